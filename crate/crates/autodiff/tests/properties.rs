use ketlab_autodiff::{clip_grad_norm, global_norm, Graph, Mask, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-30.0f64..30.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix(4, 6)) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.softmax(v).unwrap();
        for row in g.value(y).data().chunks(6) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries(
        x in matrix(3, 5),
        bits in prop::collection::vec(any::<bool>(), 15),
    ) {
        let mut allowed = bits;
        for r in 0..3 {
            allowed[r * 5 + r] = true;
        }
        let mask = Mask::new(vec![3, 5], allowed.clone()).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.masked_softmax(v, &mask).unwrap();
        for (r, row) in g.value(y).data().chunks(5).enumerate() {
            for j in 0..5 {
                if !allowed[r * 5 + j] {
                    prop_assert_eq!(row[j], 0.0);
                }
            }
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detached_input_gets_zero_gradient(x in matrix(2, 3), w in matrix(3, 3)) {
        let mut g = Graph::new();
        let xv = g.param(x);
        let wv = g.param(w);
        let h = g.matmul(xv, wv).unwrap();
        let d = g.detach(h);
        let y = g.matmul(d, wv).unwrap();
        let s = g.softmax(y).unwrap();
        let l = g.cross_entropy(s, &[0, 2]).unwrap();
        let grads = g.backward(l);
        prop_assert!(grads.get_or_zeros(xv).is_zero());
        prop_assert!(grads.get(wv).is_some());
    }

    #[test]
    fn clipped_norm_never_exceeds_max(
        a in prop::collection::vec(-100.0f64..100.0, 1..20),
        b in prop::collection::vec(-100.0f64..100.0, 1..20),
        max_norm in 0.01f64..10.0,
    ) {
        let mut grads = vec![Tensor::from_vec(a), Tensor::from_vec(b)];
        clip_grad_norm(&mut grads, max_norm);
        prop_assert!(global_norm(&grads) <= max_norm + 1e-12);
    }
}
