use std::collections::BTreeMap;
use std::path::Path;

use ketlab_core::completion::{train_block, BlockRow, BlockRunSummary};
use ketlab_core::config::{Preset, RunProfile, DEFAULT_SEEDS};
use ketlab_core::corpus::{sequential_batches, Corpus, SplitSpec};
use ketlab_core::diagnostics::{
    detach_gradient_audit, leakage_shuffle_test, probe_report, scaling_measurement, write_scaling_csv, BlockKind,
    ProbeVerdict,
};
use ketlab_core::models::{build_model, regime_of, Head, Regime, VariantId};
use ketlab_core::training::{train as train_lm, write_metrics_csv, RunSummary};
use serde::{Deserialize, Serialize};

use crate::output::{append_block_rows, read_block_rows, write_json, write_rows, CliResult, Layout};
use crate::{Backbone, Common, Objective, Probe};

pub const STRICT_CAUSAL: [&str; 4] = ["transformer_causal", "gt_causal", "ket_quad_causal", "ket_inc_causal"];

/// Everything needed to reproduce a run, written next to its results.
#[derive(Serialize, Deserialize)]
struct Resolved {
    data: String,
    dataset: String,
    profile: RunProfile,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SummaryFile {
    Lm {
        #[serde(flatten)]
        resolved: Resolved,
        summary: RunSummary,
    },
    Block {
        #[serde(flatten)]
        resolved: Resolved,
        summary: BlockRunSummary,
        rows: Vec<BlockRow>,
    },
}

fn profile(common: &Common) -> CliResult<RunProfile> {
    let preset: Preset = common.preset.parse()?;
    let mut p = RunProfile::preset(preset);
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        p.apply_text(&text)?;
    }
    for pair in &common.set {
        let (k, v) = pair.split_once('=').ok_or_else(|| format!("--set expects key=value, got `{pair}`"))?;
        p.apply(k, v)?;
    }
    if let Some(seed) = common.seed {
        p.seed = seed;
    }
    if let Some(steps) = common.steps {
        p.steps = steps;
    }
    Ok(p)
}

fn corpus(common: &Common, profile: &RunProfile) -> CliResult<Corpus> {
    if common.data == "synthetic" {
        return Ok(Corpus::synthetic()?);
    }
    let path = Path::new(&common.data);
    if !path.is_file() {
        return Err(format!("data file {} does not exist", path.display()).into());
    }
    Ok(Corpus::from_file(path, profile.max_vocab, SplitSpec::default())?)
}

fn setup(common: &Common) -> CliResult<(RunProfile, Corpus, Resolved, Layout)> {
    let p = profile(common)?;
    let c = corpus(common, &p)?;
    let resolved = Resolved { data: common.data.clone(), dataset: c.name.clone(), profile: p.clone() };
    eprintln!("config: {}", serde_json::to_string(&resolved)?);
    Ok((p, c, resolved, Layout::resolve(common.out.as_deref())))
}

fn lm_variant(name: &str) -> CliResult<VariantId> {
    let v: VariantId = name.parse()?;
    if !v.is_lm() {
        return Err(format!("{v} is a block-completion model; use `ketlab block`").into());
    }
    Ok(v)
}

fn run_lm(variant: VariantId, p: &RunProfile, c: &Corpus, resolved: &Resolved, out: &Layout) -> CliResult<(RunSummary, ketlab_core::models::Model)> {
    let mut model = build_model(&p.model_config(variant, c.vocab.len()))?;
    let outcome = train_lm(&mut model, c, &p.train_config())?;
    let stem = format!("{variant}_{}_{}", c.name, p.seed);
    write_metrics_csv(&out.file("logs", &format!("{stem}.csv"))?, &outcome.metrics)?;
    let file = SummaryFile::Lm {
        resolved: Resolved { data: resolved.data.clone(), dataset: resolved.dataset.clone(), profile: p.clone() },
        summary: outcome.summary.clone(),
    };
    write_json(&out.file("summaries", &format!("{stem}.json"))?, &file)?;
    let s = &outcome.summary;
    eprintln!(
        "{variant}: val PPL {:.3}, test PPL {:.3} ({} steps, {:.1} s)",
        s.val_ppl, s.test_ppl, s.steps, s.wall_seconds
    );
    Ok((outcome.summary, model))
}

pub fn train(variant: &str, common: &Common, checkpoint: bool) -> CliResult<bool> {
    let variant = lm_variant(variant)?;
    let (p, c, resolved, out) = setup(common)?;
    let (_, model) = run_lm(variant, &p, &c, &resolved, &out)?;
    if checkpoint {
        let path = out.file("checkpoints", &format!("{variant}_{}_{}.ckpt", c.name, p.seed))?;
        model.save(&path)?;
        eprintln!("checkpoint: {}", path.display());
    }
    Ok(true)
}

#[derive(Serialize)]
struct CompareRow {
    variant: String,
    regime: String,
    dataset: String,
    seed: u64,
    val_ppl: f64,
    test_ppl: f64,
    final_train_loss: f64,
    steps: usize,
}

pub fn compare(names: &[String], common: &Common) -> CliResult<bool> {
    let variants = names.iter().map(|n| lm_variant(n)).collect::<CliResult<Vec<_>>>()?;
    if variants.len() < 2 {
        return Err("compare needs at least two variants".into());
    }
    let (p, c, resolved, out) = setup(common)?;
    let mut rows = Vec::new();
    for &v in &variants {
        let (s, _) = run_lm(v, &p, &c, &resolved, &out)?;
        rows.push(CompareRow {
            variant: s.variant,
            regime: regime_of(v)?.to_string(),
            dataset: s.dataset,
            seed: s.seed,
            val_ppl: s.val_ppl,
            test_ppl: s.test_ppl,
            final_train_loss: s.final_train_loss,
            steps: s.steps,
        });
    }
    rows.sort_by(|a, b| a.test_ppl.total_cmp(&b.test_ppl));
    let stem = format!("compare_{}_{}", c.name, p.seed);
    write_rows(&out.file("summaries", &format!("{stem}.csv"))?, &rows)?;
    write_json(&out.file("summaries", &format!("{stem}.config.json"))?, &resolved)?;
    println!("{:<28} {:>6} {:>10} {:>10}", "variant", "regime", "val_ppl", "test_ppl");
    for r in &rows {
        println!("{:<28} {:>6} {:>10.3} {:>10.3}", r.variant, r.regime, r.val_ppl, r.test_ppl);
    }
    Ok(true)
}

pub fn block(
    objective: Option<Objective>,
    backbone: Option<Backbone>,
    layers: Option<usize>,
    seeds: &[u64],
    common: &Common,
) -> CliResult<bool> {
    let (mut p, c, _, out) = setup(common)?;
    if let Some(l) = layers {
        p.layers = l;
    }
    let seeds: Vec<u64> = match (seeds.is_empty(), common.seed) {
        (false, _) => seeds.to_vec(),
        (true, Some(s)) => vec![s],
        (true, None) => DEFAULT_SEEDS.to_vec(),
    };
    let mut models = Vec::new();
    for b in [Backbone::Tf, Backbone::Ket] {
        for o in [Objective::Direct, Objective::Denoise] {
            if backbone.is_none_or(|x| x == b) && objective.is_none_or(|x| x == o) {
                models.push(match (b, o) {
                    (Backbone::Tf, Objective::Direct) => VariantId::TfBlock,
                    (Backbone::Tf, Objective::Denoise) => VariantId::TfDenoise,
                    (Backbone::Ket, Objective::Direct) => VariantId::KetBlock,
                    (Backbone::Ket, Objective::Denoise) => VariantId::KetDenoise,
                });
            }
        }
    }
    for &seed in &seeds {
        p.seed = seed;
        for &v in &models {
            let mut model = build_model(&p.model_config(v, c.vocab.len()))?;
            let outcome = train_block(&mut model, &c, &p.block_train_config())?;
            append_block_rows(&out.all_runs(), &outcome.rows)?;
            let s = &outcome.summary;
            let file = SummaryFile::Block {
                resolved: Resolved { data: common.data.clone(), dataset: c.name.clone(), profile: p.clone() },
                summary: s.clone(),
                rows: outcome.rows.clone(),
            };
            write_json(&out.file("summaries", &format!("{v}_{}_L{}_{seed}.json", c.name, p.layers))?, &file)?;
            eprintln!(
                "{v} L={} seed {seed}: first-token PPL {:.3}, block PPL {:.3} ({:.1} s)",
                p.layers, s.first_ppl, s.block_ppl, s.wall_seconds
            );
        }
    }
    Ok(true)
}

fn scaling_kind(name: &str) -> CliResult<BlockKind> {
    if let Ok(k) = name.parse::<BlockKind>() {
        return Ok(k);
    }
    match name.parse::<VariantId>()? {
        VariantId::KetQuadCausal | VariantId::KetQuadPd => Ok(BlockKind::KetQuadratic),
        VariantId::KetIncCausal | VariantId::KetIncPd | VariantId::KetBlock | VariantId::KetDenoise => {
            Ok(BlockKind::KetIncidence)
        }
        v => Err(format!("{v} has no KET block to time; use ket_quadratic or ket_incidence").into()),
    }
}

#[derive(Serialize)]
struct Diagnostic<T: Serialize> {
    probe: &'static str,
    #[serde(flatten)]
    resolved: Resolved,
    report: T,
    passed: bool,
}

pub fn diagnose(variant: &str, probe: Probe, seq_lens: &[usize], common: &Common) -> CliResult<bool> {
    if probe == Probe::Scaling {
        let kind = scaling_kind(variant)?;
        let p = profile(common)?;
        let out = Layout::resolve(common.out.as_deref());
        let report = scaling_measurement(kind, seq_lens, p.d_model, p.seed)?;
        let stem = format!("scaling_{kind}_d{}", p.d_model);
        write_scaling_csv(&out.file("diagnostics", &format!("{stem}.csv"))?, &report.points)?;
        let resolved = Resolved { data: common.data.clone(), dataset: "none".into(), profile: p };
        write_json(
            &out.file("diagnostics", &format!("{stem}.json"))?,
            &Diagnostic { probe: "scaling", resolved, report: &report, passed: true },
        )?;
        for pt in &report.points {
            println!("S={:<6} {:.6} s", pt.seq_len, pt.seconds);
        }
        println!("{kind}: fitted exponent {:.3}", report.exponent);
        return Ok(true);
    }
    let v: VariantId = variant.parse()?;
    let (p, c, resolved, out) = setup(common)?;
    let stem = format!("{}_{v}_{}_{}", probe_name(probe), c.name, p.seed);
    let path = out.file("diagnostics", &format!("{stem}.json"))?;
    let cfg = p.model_config(v, c.vocab.len());
    let batch = || -> CliResult<_> {
        let batches = sequential_batches(&c.valid, p.seq_len, 2)?;
        Ok(batches.into_iter().next().expect("at least one window"))
    };
    let passed = match probe {
        Probe::Causality => {
            if v.head() != Head::Lm {
                return Err(format!("the causality probe needs a language-model variant, got {v}").into());
            }
            let report = probe_report(&build_model(&cfg)?, &batch()?)?;
            let expected = match regime_of(v)? {
                Regime::C => ProbeVerdict::Causal,
                Regime::E | Regime::A => ProbeVerdict::FutureSensitive,
            };
            let passed = report.verdict == expected;
            println!("{v}: {:?} (expected {:?})", report.verdict, expected);
            write_json(&path, &Diagnostic { probe: "causality", resolved, report, passed })?;
            passed
        }
        Probe::Detach => {
            let report = detach_gradient_audit(&build_model(&cfg)?, &batch()?)?;
            let passed = report.passed;
            println!(
                "{v}: audit {} (carrier grads {:.1e} / {:.1e}, head grad norm {:.3e})",
                if passed { "pass" } else { "fail" },
                report.carrier_w_out_grad,
                report.carrier_emb_grad,
                report.head_w_out_grad_norm
            );
            write_json(&path, &Diagnostic { probe: "detach", resolved, report, passed })?;
            passed
        }
        Probe::Leakage => {
            let report = leakage_shuffle_test(&cfg, &c, &p.train_config(), None)?;
            println!(
                "{v}: true PPL {:.3}, shuffled PPL {:.3}, causal baseline {:.3} -> {:?}",
                report.true_ppl, report.shuffled_ppl, report.baseline_ppl, report.verdict
            );
            write_json(&path, &Diagnostic { probe: "leakage", resolved, report, passed: true })?;
            true
        }
        Probe::Scaling => unreachable!("handled above"),
    };
    eprintln!("report: {}", path.display());
    Ok(passed)
}

fn probe_name(p: Probe) -> &'static str {
    match p {
        Probe::Causality => "causality",
        Probe::Leakage => "leakage",
        Probe::Detach => "detach",
        Probe::Scaling => "scaling",
    }
}

#[derive(Serialize)]
struct LmReportRow {
    variant: String,
    regime: String,
    dataset: String,
    seed: u64,
    steps: usize,
    val_ppl: f64,
    test_ppl: f64,
}

#[derive(Serialize)]
struct BlockReportRow {
    dataset: String,
    model: String,
    #[serde(rename = "L")]
    layers: usize,
    seeds: usize,
    first_ppl_mean: f64,
    first_ppl_std: f64,
    block_ppl_mean: f64,
    block_ppl_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn report(out: Option<&Path>) -> CliResult<bool> {
    let layout = Layout::resolve(out);
    let mut lm = Vec::new();
    let summaries = layout.root.join("summaries");
    if summaries.is_dir() {
        let mut paths: Vec<_> = std::fs::read_dir(&summaries)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json") && !p.to_string_lossy().ends_with(".config.json"))
            .collect();
        paths.sort();
        for path in paths {
            let text = std::fs::read_to_string(&path)?;
            if let Ok(SummaryFile::Lm { summary: s, .. }) = serde_json::from_str(&text) {
                lm.push(LmReportRow {
                    variant: s.variant,
                    regime: s.regime.unwrap_or_default(),
                    dataset: s.dataset,
                    seed: s.seed,
                    steps: s.steps,
                    val_ppl: s.val_ppl,
                    test_ppl: s.test_ppl,
                });
            }
        }
    }
    lm.sort_by(|a, b| (&a.dataset, a.test_ppl).partial_cmp(&(&b.dataset, b.test_ppl)).expect("finite PPL"));

    // Final evaluation of each (dataset, model, L, seed) run, aggregated over seeds.
    let mut finals: BTreeMap<(String, String, usize, u64), BlockRow> = BTreeMap::new();
    if layout.all_runs().is_file() {
        for r in read_block_rows(&layout.all_runs())? {
            let key = (r.dataset.clone(), r.model.clone(), r.layers, r.seed);
            if finals.get(&key).is_none_or(|old| r.step >= old.step) {
                finals.insert(key, r);
            }
        }
    }
    let mut grouped: BTreeMap<(String, String, usize), Vec<&BlockRow>> = BTreeMap::new();
    for ((d, m, l, _), r) in &finals {
        grouped.entry((d.clone(), m.clone(), *l)).or_default().push(r);
    }
    let block: Vec<BlockReportRow> = grouped
        .into_iter()
        .map(|((dataset, model, layers), rs)| {
            let (fm, fs) = mean_std(&rs.iter().map(|r| r.first_ppl).collect::<Vec<_>>());
            let (bm, bs) = mean_std(&rs.iter().map(|r| r.block_ppl).collect::<Vec<_>>());
            BlockReportRow {
                dataset,
                model,
                layers,
                seeds: rs.len(),
                first_ppl_mean: fm,
                first_ppl_std: fs,
                block_ppl_mean: bm,
                block_ppl_std: bs,
            }
        })
        .collect();

    if lm.is_empty() && block.is_empty() {
        return Err(format!("no runs found under {}", layout.root.display()).into());
    }
    if !lm.is_empty() {
        write_rows(&layout.root.join("report_lm.csv"), &lm)?;
        println!("{:<12} {:<28} {:>6} {:>6} {:>10} {:>10}", "dataset", "variant", "regime", "seed", "val_ppl", "test_ppl");
        for r in &lm {
            println!(
                "{:<12} {:<28} {:>6} {:>6} {:>10.3} {:>10.3}",
                r.dataset, r.variant, r.regime, r.seed, r.val_ppl, r.test_ppl
            );
        }
    }
    if !block.is_empty() {
        write_rows(&layout.root.join("report_block.csv"), &block)?;
        println!("{:<12} {:<12} {:>3} {:>5} {:>18} {:>18}", "dataset", "model", "L", "seeds", "first_ppl", "block_ppl");
        for r in &block {
            println!(
                "{:<12} {:<12} {:>3} {:>5} {:>9.3} ± {:<6.3} {:>9.3} ± {:<6.3}",
                r.dataset, r.model, r.layers, r.seeds, r.first_ppl_mean, r.first_ppl_std, r.block_ppl_mean, r.block_ppl_std
            );
        }
    }
    Ok(true)
}
