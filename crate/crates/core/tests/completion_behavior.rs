use ketlab_autodiff::Tensor;
use ketlab_core::completion::{block_logits, block_ppl, first_token_ppl, make_block_batch, sample_step, BlockBatch};
use ketlab_core::corpus::Batch;
use ketlab_core::models::{build_model, ModelConfig, VariantId};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const V: usize = 17;

fn window(seed: u64) -> Batch {
    let inputs: Vec<usize> = (0..3 * 12).map(|i| (i * 5 + seed as usize) % V).collect();
    let targets = inputs.iter().map(|x| (x + 1) % V).collect();
    Batch { batch_size: 3, seq_len: 12, inputs, targets }
}

fn config(v: VariantId) -> ModelConfig {
    ModelConfig { d_model: 16, heads: 2, seq_len: 12, block_size: 4, ..ModelConfig::new(v, V) }
}

fn batch(seed: u64) -> BlockBatch {
    make_block_batch(&window(seed), 4, 5, V, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn schedule_steps_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut counts = [0usize; 9];
    let n = 80_000;
    for _ in 0..n {
        counts[sample_step(&mut rng)] += 1;
    }
    assert_eq!(counts[0], 0);
    for &c in &counts[1..] {
        assert!((c as f64 / n as f64 - 0.125).abs() < 0.02);
    }
}

#[test]
fn direct_logits_ignore_everything_after_the_split() {
    for v in [VariantId::TfBlock, VariantId::KetBlock] {
        let model = build_model(&config(v)).unwrap();
        let bb = batch(1);
        let base = block_logits(&model, &bb).unwrap();
        let mut moved = bb.clone();
        for (row, &c) in bb.splits.iter().enumerate() {
            for t in c..12 {
                moved.context[row * 12 + t] = (moved.context[row * 12 + t] + 3) % V;
            }
        }
        moved.corrupted.iter_mut().for_each(|x| *x = (*x + 1) % V);
        assert_eq!(base, block_logits(&model, &moved).unwrap(), "{v}");
    }
}

#[test]
fn denoise_offsets_read_no_later_corrupted_token() {
    for v in [VariantId::TfDenoise, VariantId::KetDenoise] {
        let model = build_model(&config(v)).unwrap();
        let bb = batch(2);
        let base = block_logits(&model, &bb).unwrap();
        for j in 1..4 {
            let mut moved = bb.clone();
            for row in 0..bb.batch_size {
                moved.corrupted[row * 4 + j] = (moved.corrupted[row * 4 + j] + 1) % V;
            }
            let out = block_logits(&model, &moved).unwrap();
            for row in 0..bb.batch_size {
                let lo = row * 4 * V;
                assert_eq!(base.data()[lo..lo + j * V], out.data()[lo..lo + j * V], "{v} offset {j}");
                assert_ne!(base.data()[lo + j * V..lo + (j + 1) * V], out.data()[lo + j * V..lo + (j + 1) * V]);
            }
        }
    }
}

#[test]
fn uniform_logits_give_vocabulary_perplexity() {
    let logits = Tensor::zeros(&[2, 3, 50]);
    let gold = [0, 1, 2, 3, 4, 5];
    assert!((first_token_ppl(&logits, &gold).unwrap() - 50.0).abs() < 1e-9);
    assert!((block_ppl(&logits, &gold).unwrap() - 50.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn single_offset_blocks_have_equal_metrics(data in prop::collection::vec(-4.0f64..4.0, 4 * 6), gold in prop::collection::vec(0usize..6, 4)) {
        let logits = Tensor::new(vec![4, 1, 6], data).unwrap();
        prop_assert_eq!(first_token_ppl(&logits, &gold).unwrap(), block_ppl(&logits, &gold).unwrap());
    }

    #[test]
    fn block_batches_split_inside_the_window(seed in any::<u64>(), step in 1usize..=8) {
        let w = window(seed % 7);
        let bb = make_block_batch(&w, 4, step, V, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (row, &c) in bb.splits.iter().enumerate() {
            prop_assert!(c >= 1 && c + 4 <= 12);
            prop_assert_eq!(&bb.gold[row * 4..row * 4 + 4], &w.row(row)[c..c + 4]);
        }
        for ((&g, &x), &f) in bb.gold.iter().zip(&bb.corrupted).zip(&bb.flags) {
            prop_assert_eq!(f, g != x);
        }
    }
}
