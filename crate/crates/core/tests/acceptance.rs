//! Acceptance suite. Every test prints one `PASS`/`FAIL` line and then
//! asserts, so `cargo test --test acceptance -- --nocapture` gives the table.

use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use promise::contrast::{cccl_modality, fncl_loss, loss_values, nt_xent_pair, nt_xent_value, ContrastConfig, ViewTensors};
use promise::dataio::{
    apply_pattern, gen_synthetic, generate_pattern, AugmentConfig, Dataset, FeatureBatch, Label, Modality, PatternStats,
    Protocol, Sample, SynthConfig,
};
use promise::metrics::{auroc, f1_macro, F1Input};
use promise::numkernel::{check_gradients_detailed, Rng, Tape, Tensor};
use promise::promptattn::{AttnConfig, PromptAttention};
use promise::trainer::{
    apply_split_pattern, evaluate, split_dataset, total_loss_with, train, Ablation, EvalSettings, Model, ModelConfig,
    SplitKind, TrainConfig,
};

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    println!("{} criterion {id} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

// Naive enumerations: plain exp/ln, no stabilization, no shared code with the
// library.

fn brute_nt_xent(x: &Tensor, y: &Tensor, tau: f64) -> f64 {
    let b = x.rows();
    let mut total = 0.0;
    for i in 0..b {
        let pos_xy = (cos(x.row(i), y.row(i)) / tau).exp();
        let den_xy: f64 = (0..b).map(|j| (cos(x.row(i), y.row(j)) / tau).exp()).sum();
        let pos_yx = (cos(y.row(i), x.row(i)) / tau).exp();
        let den_yx: f64 = (0..b).map(|j| (cos(y.row(i), x.row(j)) / tau).exp()).sum();
        total += -(pos_xy / den_xy).ln() - (pos_yx / den_yx).ln();
    }
    total / (2.0 * b as f64)
}

fn brute_fncl(v: &ViewTensors, tau: f64) -> f64 {
    let (a, aa) = (&v.m1.0, &v.m1.1);
    let (b, ba) = (&v.m2.0, &v.m2.1);
    brute_nt_xent(a, b, tau) + brute_nt_xent(a, ba, tau) + brute_nt_xent(aa, b, tau) + brute_nt_xent(aa, ba, tau)
}

fn brute_cccl(x: &Tensor, xa: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let b = x.rows();
    // Candidate views: (is_aug, index).
    let view = |aug: bool, j: usize| if aug { xa.row(j) } else { x.row(j) };
    let mut total = 0.0;
    for i in 0..b {
        let mut num = 0.0;
        let mut den = 0.0;
        for aug in [false, true] {
            for j in 0..b {
                if !aug && j == i {
                    continue;
                }
                let e = (cos(x.row(i), view(aug, j)) / tau).exp();
                den += e;
                let positive = (aug && j == i) || (!aug && labels[j] == labels[i]);
                if positive {
                    num += e;
                }
            }
        }
        total += (num / den).ln();
    }
    -total / (2.0 * b as f64)
}

fn gate_batch(rng: &mut Rng) -> FeatureBatch {
    let d = 8;
    let mut feat = || Some((0..d).map(|_| rng.normal()).collect::<Vec<f64>>());
    let presence = [(true, true), (false, true), (true, false), (true, true)];
    let samples: Vec<Sample> = presence
        .iter()
        .enumerate()
        .map(|(i, &(p1, p2))| Sample {
            id: format!("s{i}"),
            label: Label::Single(i % 2),
            m1: if p1 { feat() } else { None },
            m2: if p2 { feat() } else { None },
        })
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    FeatureBatch::from_samples(&refs, d, d, &AugmentConfig::default(), &mut rng.fork(9)).unwrap()
}

#[test]
fn criterion_1_gradient_gate() {
    let start = Instant::now();
    let mut rng = Rng::new(20);
    let batch = gate_batch(&mut rng);
    let cfg = TrainConfig {
        attn: AttnConfig {
            d_model: 16,
            n_heads: 4,
            prompt_len: 4,
            attn_layers: 1,
            init_std: 0.3,
        },
        ..TrainConfig::default()
    };
    let model = Model::new(
        ModelConfig {
            d1: 8,
            d2: 8,
            class_count: 2,
            label_kind: promise::dataio::LabelKind::Single,
            attn: cfg.attn.clone(),
        },
        &mut rng,
    )
    .unwrap();
    // init_std 0.3 keeps the attention unsaturated so every coordinate has a
    // gradient well above finite-difference roundoff at eps 1e-5.
    let mut store = model.store.clone();
    let params: Vec<_> = store.ids().collect();
    let report = check_gradients_detailed(
        |tape, st| {
            let (vars, stats) = total_loss_with(tape, st, &model, &batch, &cfg)?;
            assert_eq!(stats.total(), 2);
            assert!(vars.fncl.is_some() && vars.cccl.is_some());
            Ok(vars.total)
        },
        &mut store,
        &params,
        1e-5,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let pass = report.max_rel_error < 1e-4 && elapsed < Duration::from_secs(10);
    verdict(
        1,
        "gradient gate",
        pass,
        &format!(
            "max rel err {:.3e} at {:?}[{}] (analytic {:.3e}, numeric {:.3e}) over {} coords, {:.2}s",
            report.max_rel_error,
            report.worst_param,
            report.worst_index,
            report.analytic,
            report.numeric,
            report.coordinates,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_loss_oracles() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = Rng::new(seed);
        for b in 1..=4 {
            let d = 2 + (seed as usize % 4);
            let tau = [0.07, 0.5, 1.0, 2.0][seed as usize % 4];
            let views = ViewTensors {
                m1: (random_matrix(&mut rng, b, d), random_matrix(&mut rng, b, d)),
                m2: (random_matrix(&mut rng, b, d), random_matrix(&mut rng, b, d)),
            };
            let classes: Vec<usize> = (0..b).map(|_| (rng.next_u64() % 2) as usize).collect();
            let labels: Vec<Label> = classes.iter().map(|&c| Label::Single(c)).collect();

            let mut tape = Tape::new();
            let x = tape.constant(views.m1.0.clone());
            let y = tape.constant(views.m2.0.clone());
            let nt = nt_xent_pair(&mut tape, x, y, tau).unwrap();
            worst = worst.max((tape.scalar(nt) - brute_nt_xent(&views.m1.0, &views.m2.0, tau)).abs());

            let ev = views.on_tape(&mut tape, &labels);
            let ccfg = ContrastConfig { tau, alpha: 0.5 };
            let f = fncl_loss(&mut tape, &ev, &ccfg).unwrap();
            worst = worst.max((tape.scalar(f) - brute_fncl(&views, tau)).abs());

            let c = cccl_modality(&mut tape, ev.m1.orig, ev.m1.aug, &labels, tau).unwrap();
            worst = worst.max((tape.scalar(c) - brute_cccl(&views.m1.0, &views.m1.1, &classes, tau)).abs());
        }
    }
    let orth = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let toy = nt_xent_value(&orth, &orth, 1.0).unwrap();
    let toy_expected = (1.0 + (-1.0f64).exp()).ln();
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12
        && (toy - toy_expected).abs() <= 1e-12
        && (toy - 0.313262).abs() < 5e-7
        && elapsed < Duration::from_secs(5);
    verdict(
        2,
        "loss oracles",
        pass,
        &format!("max |lib - brute| {worst:.2e}, toy {toy:.9}, {:.2}s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_3_protocol_exactness() {
    let ds = gen_synthetic(&SynthConfig {
        n: 100,
        d1: 4,
        d2: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let balanced = PatternStats::of(&apply_pattern(&ds, &generate_pattern(&ds, Protocol::Balanced, 0.7, 5).unwrap()).unwrap());
    let m2 = apply_pattern(&ds, &generate_pattern(&ds, Protocol::MissingM2, 0.7, 5).unwrap()).unwrap();
    let m1_count = m2.samples.iter().filter(|s| s.m1.is_some()).count();
    let m2_count = m2.samples.iter().filter(|s| s.m2.is_some()).count();
    let pass = (balanced.complete, balanced.m1_only, balanced.m2_only) == (30, 35, 35) && (m1_count, m2_count) == (100, 30);
    verdict(
        3,
        "protocol exactness",
        pass,
        &format!(
            "balanced {}/{}/{} complete/m1-only/m2-only, missing_m2 keeps m1 {m1_count} m2 {m2_count}",
            balanced.complete, balanced.m1_only, balanced.m2_only
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_reduction_identities() {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed);
        let views = ViewTensors {
            m1: (random_matrix(&mut rng, 4, 5), random_matrix(&mut rng, 4, 5)),
            m2: (random_matrix(&mut rng, 4, 5), random_matrix(&mut rng, 4, 5)),
        };
        let labels: Vec<Label> = [0, 1, 0, 2].into_iter().map(Label::Single).collect();
        let (f, _, t1) = loss_values(&views, &labels, &ContrastConfig { tau: 0.5, alpha: 1.0 }).unwrap();
        let (_, c, t0) = loss_values(&views, &labels, &ContrastConfig { tau: 0.5, alpha: 0.0 }).unwrap();
        worst = worst.max((t1 - f).abs()).max((t0 - c).abs());

        let one = ViewTensors {
            m1: (random_matrix(&mut rng, 1, 5), random_matrix(&mut rng, 1, 5)),
            m2: (random_matrix(&mut rng, 1, 5), random_matrix(&mut rng, 1, 5)),
        };
        let (f1, c1, _) = loss_values(&one, &labels[..1], &ContrastConfig { tau: 0.07, alpha: 0.5 }).unwrap();
        let nt = nt_xent_value(&one.m1.0, &one.m2.0, 0.07).unwrap();
        worst = worst.max(f1.abs()).max(c1.abs()).max(nt.abs());
    }
    let pass = worst <= 1e-12;
    verdict(4, "reduction identities", pass, &format!("max deviation {worst:.2e}"));
    assert!(pass);
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct AblationRuns {
    ds: Dataset,
    /// Mean test accuracy per component config, in `Ablation::ALL` order.
    means: Vec<f64>,
    per_seed: Vec<Vec<f64>>,
    full_models: Vec<Model>,
    full_cfg: TrainConfig,
    elapsed: Duration,
}

/// The 25 training runs shared by the ablation and missing-rate criteria.
fn ablation_runs() -> &'static AblationRuns {
    static RUNS: OnceLock<AblationRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let ds = gen_synthetic(&SynthConfig::default()).unwrap();
        let base = TrainConfig {
            epochs: 30,
            protocol: Protocol::Balanced,
            eta: 0.7,
            ..TrainConfig::default()
        };
        let mut means = Vec::new();
        let mut per_seed = Vec::new();
        let mut full_models = Vec::new();
        for a in Ablation::ALL {
            let mut accs = Vec::new();
            for seed in SEEDS {
                let cfg = TrainConfig { seed, ..base.clone() }.with_ablation(a);
                let out = train(&ds, &cfg).unwrap();
                accs.push(out.test_report.accuracy);
                if a == Ablation::Full {
                    full_models.push(out.checkpoint.model);
                }
            }
            means.push(accs.iter().sum::<f64>() / accs.len() as f64);
            per_seed.push(accs);
        }
        AblationRuns {
            ds,
            means,
            per_seed,
            full_models,
            full_cfg: base.with_ablation(Ablation::Full),
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_5_ablation_ordering() {
    let runs = ablation_runs();
    let m = |a: Ablation| runs.means[Ablation::ALL.iter().position(|&x| x == a).unwrap()];
    let (full, fncl, only, base) = (
        m(Ablation::Full),
        m(Ablation::PromptFncl),
        m(Ablation::PromptOnly),
        m(Ablation::Baseline),
    );
    let ordered = full >= fncl && fncl >= only && only >= base;
    let gap = full - base;
    let pass = ordered && gap >= 0.03 && runs.elapsed < Duration::from_secs(600);
    let table: Vec<String> = Ablation::ALL
        .iter()
        .zip(&runs.means)
        .zip(&runs.per_seed)
        .map(|((a, mean), accs)| format!("{a} {mean:.4} {accs:.4?}"))
        .collect();
    verdict(
        5,
        "ablation ordering",
        pass,
        &format!(
            "ordering {}, full - baseline {:+.2} points (need >= 3), {:.0}s; {}",
            if ordered { "holds" } else { "violated" },
            gap * 100.0,
            runs.elapsed.as_secs_f64(),
            table.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_missing_rate_monotonicity() {
    let runs = ablation_runs();
    let etas = [0.1, 0.4, 0.7, 1.0];
    let mut means = Vec::new();
    for &eta in &etas {
        let mut sum = 0.0;
        for (model, &seed) in runs.full_models.iter().zip(&SEEDS) {
            let [_, _, test] = split_dataset(&runs.ds, seed, runs.full_cfg.val_frac, runs.full_cfg.test_frac).unwrap();
            let (test, _) = apply_split_pattern(&test, Protocol::Balanced, eta, seed, SplitKind::Test).unwrap();
            let settings = EvalSettings::from_train(&runs.full_cfg, seed);
            sum += evaluate(model, &test, &settings).unwrap().accuracy;
        }
        means.push(sum / SEEDS.len() as f64);
    }
    let pass = means.windows(2).all(|w| w[1] <= w[0] + 0.01);
    verdict(
        6,
        "missing-rate monotonicity",
        pass,
        &format!("mean test accuracy at eta {etas:?}: {means:.4?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_7_metric_correctness() {
    let pair = auroc(&[0.8, 0.6, 0.4, 0.2], &[true, false, true, false]).unwrap();
    let tie = auroc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap();
    let f1 = f1_macro(
        F1Input::Single {
            pred: &[0, 0, 0, 0],
            truth: &[0, 0, 1, 1],
        },
        2,
    )
    .unwrap();

    let mut rng = Rng::new(77);
    let mut invariant = true;
    for _ in 0..100 {
        let n = 20;
        let scores: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let base = auroc(&scores, &labels).unwrap();
        // Random strictly increasing map: positive affine, then one of a few
        // monotone shapes.
        let a = rng.uniform(0.1, 10.0);
        let c = rng.uniform(-5.0, 5.0);
        let shape = rng.next_u64() % 3;
        let mapped: Vec<f64> = scores
            .iter()
            .map(|&s| {
                let t = a * s + c;
                match shape {
                    0 => t.exp(),
                    1 => t * t * t,
                    _ => t.atan(),
                }
            })
            .collect();
        if auroc(&mapped, &labels).unwrap() != base {
            invariant = false;
        }
    }
    let pass = pair == 0.75 && tie == 0.5 && f1 == 1.0 / 3.0 && invariant;
    verdict(
        7,
        "metric correctness",
        pass,
        &format!("pair {pair}, tie {tie}, f1 {f1}, monotone invariance {invariant}"),
    );
    assert!(pass);
}

fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["promise"];
    full.extend_from_slice(args);
    let code = promise::cli::run(full, &mut out, &mut err);
    (code, String::from_utf8_lossy(&err).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let gen = ["gen-synth", "--n", "240", "--d1", "16", "--d2", "16", "--seed", "3", "--out", p(&data)];
    assert_eq!(cli(&gen), (0, String::new()));
    let train_args = [
        "train", "--data", p(&data), "--seed", "11", "--epochs", "3", "--d-model", "32", "--batch", "32", "--out", p(&a),
    ];
    let (code, err) = cli(&train_args);
    assert_eq!(code, 0, "{err}");
    let manifest = a.join("manifest.json");
    let (code, err) = cli(&["train", "--config", p(&manifest), "--out", p(&b)]);
    assert_eq!(code, 0, "{err}");

    let same = |name: &str| std::fs::read(a.join(name)).unwrap() == std::fs::read(b.join(name)).unwrap();
    let ckpt = same("model.ckpt");
    let log = same("train_log.csv");
    let pass = ckpt && log;
    verdict(
        8,
        "determinism",
        pass,
        &format!("checkpoint identical {ckpt}, log identical {log}"),
    );
    assert!(pass);
}

#[test]
fn criterion_9_attention_structure() {
    let cfg = AttnConfig {
        d_model: 12,
        n_heads: 3,
        prompt_len: 6,
        attn_layers: 1,
        init_std: 0.4,
    };
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed);
        let mut store = promise::numkernel::ParamStore::new();
        let attn = PromptAttention::new(&mut store, cfg.clone(), 5, 5, &mut rng).unwrap();
        let target = if seed % 2 == 0 { Modality::M1 } else { Modality::M2 };
        let head = (seed % 3) as usize;
        let x = Tensor::row_vector(&(0..5).map(|_| rng.normal()).collect::<Vec<_>>());
        let xa = Tensor::row_vector(&(0..5).map(|_| rng.normal()).collect::<Vec<_>>());

        let mut tape = Tape::new();
        let (xv, av) = (tape.constant(x.clone()), tape.constant(xa.clone()));
        let seq_var = attn.build_head_sequence(&mut tape, &store, xv, av, target, head).unwrap();
        let seq = tape.value(seq_var).clone();
        let out = attn.head_attention(&mut tape, &store, seq_var, target, 0, head).unwrap();
        let out = tape.value(out).data().to_vec();

        let mut order: Vec<usize> = (1..=cfg.prompt_len).collect();
        rng.shuffle(&mut order);
        let mut rows = vec![seq.row(0).to_vec()];
        rows.extend(order.iter().map(|&r| seq.row(r).to_vec()));
        let permuted = tape.constant(Tensor::from_rows(&rows).unwrap());
        let out_p = attn.head_attention(&mut tape, &store, permuted, target, 0, head).unwrap();
        for (u, v) in out.iter().zip(tape.value(out_p).data()) {
            worst = worst.max((u - v).abs());
        }

        // Zero query/key maps: uniform weights, so the output is the mean of
        // the value rows.
        let hp = attn.stack(target).layers[0][head];
        store.get_mut(hp.w_q).data_mut().fill(0.0);
        store.get_mut(hp.w_k).data_mut().fill(0.0);
        let seq_c = tape.constant(seq.clone());
        let uniform = attn.head_attention(&mut tape, &store, seq_c, target, 0, head).unwrap();
        let values = seq.matmul(store.get(hp.w_v)).unwrap();
        for c in 0..values.cols() {
            let mean = (0..values.rows()).map(|r| values.get(r, c)).sum::<f64>() / values.rows() as f64;
            worst = worst.max((tape.value(uniform).data()[c] - mean).abs());
        }
    }
    let pass = worst <= 1e-12;
    verdict(
        9,
        "attention structure",
        pass,
        &format!("max deviation {worst:.2e} over 20 seeds"),
    );
    assert!(pass);
}
