//! Acceptance criteria 1-10, one line each. Runs without the libtest
//! harness so every line is printed; exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cprfl::autodiff::Tensor;
use cprfl::data::{
    embedding_provider, generate_synthetic_lt, load_features, prototype_embedding, save_embedding, save_features,
    split_groups, EmbeddingSpec, GeneratorConfig, Group, LongTailDataset, Sample,
};
use cprfl::eval::average_precision;
use cprfl::losses::{asl, bce, focal, AslConfig, Loss, LossSpec};
use cprfl::model::{dual_path_grads, Model, ModelDims, ModelParams};
use cprfl::train::{adam_step, evaluate_model, gradcheck_command, AdamState, Checkpoint, ModelKind, TrainConfig, Trainer};

type Outcome = (bool, String);

fn tiny_dims() -> ModelDims {
    ModelDims { d0: 8, d: 16, v: 6, c: 4, heads: 2, ffn: 32, tau: 0.5 }
}

fn loss_spec(name: &str) -> LossSpec {
    LossSpec { name: name.into(), ..LossSpec::default() }
}

// ---- 1 ---------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let t0 = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["asl", "bce", "focal"] {
        for literal in [false, true] {
            let cfg = TrainConfig {
                dims: tiny_dims(),
                embedding: EmbeddingSpec { m: 8, ..Default::default() },
                loss: loss_spec(name),
                literal_equations: literal,
                ..TrainConfig::default()
            };
            let out = gradcheck_command(&cfg, 1e-5, 1e-4).expect("gradcheck runs");
            ok &= out.passed;
            let r = &out.report;
            parts.push(format!(
                "{name}/{}: {:.2e} at {}[{}] (|g| {:.1e})",
                if literal { "literal" } else { "standard" },
                r.max_rel_error,
                r.worst_param,
                r.worst_index,
                r.analytic.abs()
            ));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ok &= secs < 60.0;
    (ok, format!("{}; {secs:.1}s", parts.join(", ")))
}

// ---- 2 ---------------------------------------------------------------------

fn random_sample(rng: &mut ChaCha8Rng, v: usize, d0: usize, c: usize) -> Sample {
    let data = (0..v * d0).map(|_| rng.sample(StandardNormal)).collect();
    let mut labels: Vec<u8> = (0..c).map(|_| rng.gen_bool(0.4) as u8).collect();
    labels[rng.gen_range(0..c)] = 1;
    Sample::new(Tensor::matrix(v, d0, data).unwrap(), labels).unwrap()
}

fn dual_path() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut min_norm = f64::INFINITY;
    let configs = 24;
    for i in 0..configs {
        let heads = rng.gen_range(1..=2);
        let dims = ModelDims {
            d0: rng.gen_range(2..=8),
            d: heads * rng.gen_range(2..=5),
            v: rng.gen_range(1..=6),
            c: rng.gen_range(2..=5),
            heads,
            ffn: rng.gen_range(2..=16),
            tau: 0.5,
        };
        let names: Vec<String> = (0..dims.c).map(|k| format!("k{k}")).collect();
        let emb = embedding_provider(&EmbeddingSpec { m: rng.gen_range(2..=6), seed: i, ..Default::default() }, &names)
            .unwrap();
        let mut params = ModelParams::init(dims.clone(), emb, i % 2 == 1, i).unwrap();
        let loss = [Loss::Asl(AslConfig::default()), Loss::Bce, Loss::Focal { gamma: 2.0 }][i as usize % 3];
        let batch: Vec<Sample> = (0..3).map(|_| random_sample(&mut rng, dims.v, dims.d0, dims.c)).collect();
        let refs: Vec<&Sample> = batch.iter().collect();

        // one training step first
        let mut model = Model::Cprfl(params);
        let (_, grads) = model.loss_and_grads(&refs, &loss).unwrap();
        let mut state = AdamState::for_params(&model.learnable().iter().map(|(_, t)| *t).collect::<Vec<_>>());
        let mut slots: Vec<&mut Tensor> = model.learnable_mut().into_iter().map(|(_, t)| t).collect();
        adam_step(&mut slots, &grads, &mut state, 1e-2, 1e-4).unwrap();
        let Model::Cprfl(p) = model else { unreachable!() };
        params = p;

        let g = dual_path_grads(&refs, &params, &loss).unwrap();
        for j in 0..g.total.numel() {
            worst = worst.max((g.total.data()[j] - g.direct.data()[j] - g.via_vsi.data()[j]).abs());
        }
        let norm = |t: &Tensor| t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        min_norm = min_norm.min(norm(&g.direct)).min(norm(&g.via_vsi));
    }
    (
        worst <= 1e-10 && min_norm > 0.0,
        format!("{configs} configs, max |total - direct - via_vsi| = {worst:.1e}, smallest path norm {min_norm:.2e}"),
    )
}

// ---- 3 ---------------------------------------------------------------------

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let flat = AslConfig { gamma_pos: 0.0, gamma_neg: 0.0, mu: 0.0 };
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
        let (a, b, f) = (asl(&s, &y, &flat).unwrap(), bce(&s, &y).unwrap(), focal(&s, &y, 0.0).unwrap());
        worst = worst.max((a - b).abs()).max((a - f).abs()).max((b - f).abs());
    }
    let sig6 = |x: f64, want: f64| (x - want).abs() <= 0.5e-5 * want.abs();
    let neg = asl(&[0.2], &[0.0], &AslConfig::default()).unwrap();
    let foc = focal(&[0.9], &[1.0], 2.0).unwrap();
    let ok = worst <= 1e-12 && sig6(neg, 8.2275e-5) && sig6(foc, 1.05361e-3);
    (ok, format!("max pairwise gap {worst:.1e}; asl example {neg:.6e}; focal example {foc:.6e}"))
}

// ---- 4 ---------------------------------------------------------------------

/// Precision at every positive's rank, ranks from a stable descending sort.
fn brute_force_ap(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return None;
    }
    let mut total = 0.0;
    for k in 1..=order.len() {
        if labels[order[k - 1]] == 1 {
            let hits = order[..k].iter().filter(|&&i| labels[i] == 1).count();
            total += hits as f64 / k as f64;
        }
    }
    Some(total / positives as f64)
}

fn ap_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut with_ties = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=50);
        let levels = rng.gen_range(2..=10);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.3) as u8).collect();
        labels[rng.gen_range(0..n)] = 1;
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        with_ties += sorted.windows(2).any(|w| w[0] == w[1]) as usize;
        if average_precision(&scores, &labels).ok() != brute_force_ap(&scores, &labels) {
            mismatches += 1;
        }
    }
    let worked = average_precision(&[0.9, 0.8, 0.1], &[1, 0, 1]).unwrap();
    let ok = mismatches == 0 && (worked - 0.83333).abs() < 5e-6;
    (ok, format!("{mismatches} mismatches in 1000 ({with_ties} with ties); worked example {worked:.5}"))
}

// ---- 5 ---------------------------------------------------------------------

fn small_world(seed: u64) -> (LongTailDataset, LongTailDataset) {
    generate_synthetic_lt(&GeneratorConfig {
        classes: 7,
        tokens: 4,
        n_max: 150,
        pareto_exponent: 1.6,
        rank_offset: 0.0,
        test_per_class: 8,
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 16,
        learning_rate: 3e-3,
        dims: ModelDims { d0: 8, d: 16, v: 4, c: 7, heads: 2, ffn: 32, tau: 0.5 },
        embedding: EmbeddingSpec { m: 8, seed, ..Default::default() },
        seed,
        ..TrainConfig::default()
    }
}

fn permutation() -> Outcome {
    let (train, test) = small_world(5);
    let mut t = Trainer::new(small_config(5), &train, &test).unwrap();
    t.run_epoch().unwrap();
    let Model::Cprfl(p) = t.model().clone() else { unreachable!() };
    let perm = [4, 0, 6, 2, 5, 1, 3];
    let mut q = p.clone();
    q.embedding = p.embedding.permute(&perm).unwrap();
    let test_p = test.permute_classes(&perm).unwrap();
    let (m, mp) = (Model::Cprfl(p), Model::Cprfl(q));
    let c = perm.len();
    let refs: Vec<&Sample> = test.samples.iter().collect();
    let (s, sp) = (m.predict(&refs).unwrap(), mp.predict(&refs).unwrap());
    let mut worst: f64 = 0.0;
    for i in 0..test.len() {
        for (k, &from) in perm.iter().enumerate() {
            worst = worst.max((sp[i * c + k] - s[i * c + from]).abs());
        }
    }
    let (r, rp) = (evaluate_model(&m, &test).unwrap(), evaluate_model(&mp, &test_p).unwrap());
    let nan_eq = |a: f64, b: f64| (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-10;
    let fields = nan_eq(r.map_total, rp.map_total)
        && nan_eq(r.map_head, rp.map_head)
        && nan_eq(r.map_medium, rp.map_medium)
        && nan_eq(r.map_tail, rp.map_tail)
        && r.n_classes_per_group == rp.n_classes_per_group
        && perm
            .iter()
            .enumerate()
            .all(|(k, &from)| match (rp.per_class_ap[k], r.per_class_ap[from]) {
                (Some(a), Some(b)) => (a - b).abs() <= 1e-10,
                (None, None) => true,
                _ => false,
            });
    (
        worst <= 1e-10 && fields,
        format!(
            "max score gap {worst:.1e}; mAP total {:.6} vs {:.6}, tail {:.6} vs {:.6}",
            r.map_total, rp.map_total, r.map_tail, rp.map_tail
        ),
    )
}

// ---- 6 ---------------------------------------------------------------------

fn split_protocol() -> Outcome {
    let g = split_groups(&[101, 100, 20, 19], 100, 20).unwrap();
    let boundaries = g == [Group::Head, Group::Medium, Group::Medium, Group::Tail];
    let (train, _) = generate_synthetic_lt(&GeneratorConfig::default()).unwrap();
    let sizes = train.group_sizes();
    let lo = *train.class_counts.iter().min().unwrap();
    let hi = *train.class_counts.iter().max().unwrap();
    let ok = boundaries && sizes == [6, 6, 8] && (lo, hi) == (4, 775) && train.num_classes() == 20;
    (ok, format!("boundaries ok = {boundaries}; head:medium:tail = {sizes:?}; counts span [{lo}, {hi}]"))
}

// ---- 7, 8, 10 --------------------------------------------------------------

const SEEDS: u64 = 3;

/// The default synthetic benchmark: default generator, small model dims,
/// identical budget for every arm.
fn benchmark_config(seed: u64, embedding: EmbeddingSpec) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 32,
        learning_rate: 3e-3,
        weight_decay: 1e-4,
        loss: loss_spec("asl"),
        dims: ModelDims { d0: 8, d: 32, v: 8, c: 20, heads: 4, ffn: 64, tau: 0.5 },
        embedding,
        seed,
        literal_equations: false,
        model: ModelKind::Cprfl,
    }
}

struct SeedResult {
    cprfl_asl: f64,
    baseline_asl: f64,
    cprfl_bce: f64,
    cprfl_random: f64,
    untrained_informative: f64,
    untrained_random: f64,
}

struct Benchmark {
    seeds: Vec<SeedResult>,
    /// Wall time of the CPRFL and baseline ASL arms, data generation included.
    headline_secs: f64,
}

fn final_tail(cfg: TrainConfig, train: &LongTailDataset, test: &LongTailDataset) -> f64 {
    let mut t = Trainer::new(cfg, train, test).unwrap();
    t.run(None, |_| {}).unwrap();
    t.history().last().unwrap().report.map_tail
}

fn untrained_tail(cfg: &TrainConfig, train: &LongTailDataset, test: &LongTailDataset) -> f64 {
    evaluate_model(&cfg.build_model(&train.class_names).unwrap(), test).unwrap().map_tail
}

fn run_benchmark(dir: &Path) -> Benchmark {
    let mut seeds = Vec::new();
    let mut headline_secs = 0.0;
    for seed in 0..SEEDS {
        let t0 = Instant::now();
        let (train, test) = generate_synthetic_lt(&GeneratorConfig { seed, ..GeneratorConfig::default() }).unwrap();
        let emb_path = dir.join(format!("prototypes_{seed}.cpre"));
        save_embedding(&prototype_embedding(&train).unwrap(), &emb_path).unwrap();
        let informative = EmbeddingSpec { mode: "file".into(), path: Some(emb_path), m: 0, seed };
        let random = EmbeddingSpec { mode: "random".into(), path: None, m: 8, seed };
        let cfg = benchmark_config(seed, informative);
        let cprfl_asl = final_tail(cfg.clone(), &train, &test);
        let baseline_asl = final_tail(TrainConfig { model: ModelKind::Baseline, ..cfg.clone() }, &train, &test);
        headline_secs += t0.elapsed().as_secs_f64();
        let cprfl_bce = final_tail(TrainConfig { loss: loss_spec("bce"), ..cfg.clone() }, &train, &test);
        let random_cfg = TrainConfig { embedding: random, ..cfg.clone() };
        let cprfl_random = final_tail(random_cfg.clone(), &train, &test);
        seeds.push(SeedResult {
            cprfl_asl,
            baseline_asl,
            cprfl_bce,
            cprfl_random,
            untrained_informative: untrained_tail(&cfg, &train, &test),
            untrained_random: untrained_tail(&random_cfg, &train, &test),
        });
    }
    Benchmark { seeds, headline_secs }
}

fn cprfl_benefit(b: &Benchmark) -> Outcome {
    let gaps: Vec<f64> = b.seeds.iter().map(|s| 100.0 * (s.cprfl_asl - s.baseline_asl)).collect();
    let wins = gaps.iter().filter(|&&g| g >= 5.0).count();
    let detail: Vec<String> = b
        .seeds
        .iter()
        .map(|s| format!("{:.3} vs {:.3}", s.cprfl_asl, s.baseline_asl))
        .collect();
    (
        wins == SEEDS as usize && b.headline_secs < 600.0,
        format!(
            "tail mAP CPRFL vs baseline: {}; gaps {:?} points; {wins}/{SEEDS} seeds >= 5; {:.0}s",
            detail.join(", "),
            gaps.iter().map(|g| (g * 10.0).round() / 10.0).collect::<Vec<_>>(),
            b.headline_secs
        ),
    )
}

fn loss_ordering(b: &Benchmark) -> Outcome {
    let wins = b.seeds.iter().filter(|s| s.cprfl_asl >= s.cprfl_bce).count();
    let detail: Vec<String> = b.seeds.iter().map(|s| format!("{:.3} vs {:.3}", s.cprfl_asl, s.cprfl_bce)).collect();
    (wins >= 2, format!("tail mAP ASL vs BCE: {}; {wins}/{SEEDS} seeds", detail.join(", ")))
}

fn embedding_plug(b: &Benchmark) -> Outcome {
    let above = b
        .seeds
        .iter()
        .all(|s| s.cprfl_asl > s.untrained_informative && s.cprfl_random > s.untrained_random);
    let wins = b.seeds.iter().filter(|s| s.cprfl_asl >= s.cprfl_random).count();
    let detail: Vec<String> = b
        .seeds
        .iter()
        .map(|s| {
            format!(
                "{:.3} (untrained {:.3}) vs {:.3} (untrained {:.3})",
                s.cprfl_asl, s.untrained_informative, s.cprfl_random, s.untrained_random
            )
        })
        .collect();
    (
        above && wins >= 2,
        format!("tail mAP informative vs random: {}; {wins}/{SEEDS} seeds", detail.join(", ")),
    )
}

// ---- 9 ---------------------------------------------------------------------

fn determinism(dir: &Path) -> Outcome {
    let (train, test) = small_world(9);
    let cfg = TrainConfig { epochs: 4, ..small_config(9) };
    let history = |cfg: &TrainConfig| {
        let mut t = Trainer::new(cfg.clone(), &train, &test).unwrap();
        t.run(None, |_| {}).unwrap();
        (t.history().to_vec(), t.checkpoint().to_bytes().unwrap())
    };
    let (a, a_bytes) = history(&cfg);
    let (b, _) = history(&cfg);
    let close = |x: f64, y: f64| (x.is_nan() && y.is_nan()) || (x - y).abs() <= 1e-12;
    let same_history = a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| {
            close(x.train_loss, y.train_loss)
                && close(x.report.map_total, y.report.map_total)
                && close(x.report.map_head, y.report.map_head)
                && close(x.report.map_medium, y.report.map_medium)
                && close(x.report.map_tail, y.report.map_tail)
        });

    let ck_path = dir.join("mid.cprc");
    let mut first = Trainer::new(cfg.clone(), &train, &test).unwrap();
    first.run_epoch().unwrap();
    first.run_epoch().unwrap();
    first.checkpoint().save(&ck_path).unwrap();
    let mut resumed = Trainer::resume(Checkpoint::load(&ck_path).unwrap(), &train, &test).unwrap();
    resumed.run(None, |_| {}).unwrap();
    let resumed_bitwise = resumed.checkpoint().to_bytes().unwrap() == a_bytes
        && serde_json::to_string(resumed.history()).unwrap() == serde_json::to_string(&a).unwrap();

    let f_path = dir.join("train.cprf");
    save_features(&train, &f_path).unwrap();
    let first_bytes = std::fs::read(&f_path).unwrap();
    let loaded = load_features(&f_path).unwrap();
    save_features(&loaded, &f_path).unwrap();
    let features_exact = loaded == train && std::fs::read(&f_path).unwrap() == first_bytes;

    (
        same_history && resumed_bitwise && features_exact,
        format!("histories equal = {same_history}; resume bitwise = {resumed_bitwise}; feature round trip exact = {features_exact}"),
    )
}

// ---- driver ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} [{}] {name}: {}", if o.0 { "PASS" } else { "FAIL" }, o.1);
        results.push((n, name, o));
    };
    report(1, "full-model gradient check", guarded(gradient_check));
    report(2, "dual-path decomposition", guarded(dual_path));
    report(3, "loss degeneration identities", guarded(loss_identities));
    report(4, "AP oracle equivalence", guarded(ap_oracle));
    report(5, "class permutation equivariance", guarded(permutation));
    report(6, "split protocol and generator", guarded(split_protocol));
    let bench = catch_unwind(AssertUnwindSafe(|| run_benchmark(dir.path())));
    match &bench {
        Ok(b) => report(7, "directional CPRFL benefit on tail", guarded(|| cprfl_benefit(b))),
        Err(_) => report(7, "directional CPRFL benefit on tail", (false, "benchmark panicked".into())),
    }
    match &bench {
        Ok(b) => report(8, "ASL >= BCE on tail", guarded(|| loss_ordering(b))),
        Err(_) => report(8, "ASL >= BCE on tail", (false, "benchmark panicked".into())),
    }
    report(9, "determinism and persistence", guarded(|| determinism(dir.path())));
    match &bench {
        Ok(b) => report(10, "embedding-source plug", guarded(|| embedding_plug(b))),
        Err(_) => report(10, "embedding-source plug", (false, "benchmark panicked".into())),
    }
    let passed = results.iter().filter(|r| r.2 .0).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
