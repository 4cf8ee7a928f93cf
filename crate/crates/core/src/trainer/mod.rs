//! Training: Adam, the task head, loss composition, the epoch loop and
//! checkpoints.

mod adam;
mod checkpoint;
mod config;
mod model;

pub use adam::{AdamParams, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{Ablation, TrainConfig};
pub use model::{forward, total_loss, total_loss_with, LossBreakdown, LossVars, Model, ModelConfig, TaskHead};

use crate::dataio::{
    apply_pattern, generate_pattern, Dataset, FeatureBatch, Label, LabelKind, MissingPattern, Modality, PatternStats,
    Protocol, Sample,
};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auroc, f1_macro, per_class_multi, per_class_single, EvalReport, F1Input, Metric};
use crate::numkernel::{sigmoid, Rng, Tape};

const STREAM_SPLIT: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_PATTERN: u64 = 0x100;
const STREAM_EPOCH: u64 = 0x1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            SplitKind::Train => 0,
            SplitKind::Val => 1,
            SplitKind::Test => 2,
        }
    }
}

/// Seed of the missing pattern drawn for one split.
pub fn pattern_seed(seed: u64, split: SplitKind) -> u64 {
    Rng::new(seed).fork(STREAM_PATTERN + split.tag()).next_u64()
}

/// Seeded shuffle into train/val/test; val and test sizes are
/// `round(frac * n)`.
pub fn split_dataset(ds: &Dataset, seed: u64, val_frac: f64, test_frac: f64) -> Result<[Dataset; 3]> {
    let n = ds.len();
    let n_val = (val_frac * n as f64).round() as usize;
    let n_test = (test_frac * n as f64).round() as usize;
    if n_val == 0 || n_test == 0 || n_val + n_test >= n {
        return Err(Error::Config(format!(
            "cannot split {n} samples into non-empty train/val/test with fractions {val_frac}/{test_frac}"
        )));
    }
    let perm = Rng::new(seed).fork(STREAM_SPLIT).permutation(n);
    let (test, rest) = perm.split_at(n_test);
    let (val, train) = rest.split_at(n_val);
    Ok([ds.select(train), ds.select(val), ds.select(test)])
}

/// Applies a freshly drawn pattern to one split.
pub fn apply_split_pattern(
    ds: &Dataset,
    protocol: Protocol,
    eta: f64,
    seed: u64,
    split: SplitKind,
) -> Result<(Dataset, MissingPattern)> {
    let pattern = generate_pattern(ds, protocol, eta, pattern_seed(seed, split))?;
    Ok((apply_pattern(ds, &pattern)?, pattern))
}

/// Knobs of a forward pass over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub batch_size: usize,
    /// Seeds the augmented views fed to the generator.
    pub seed: u64,
    pub use_prompt: bool,
    pub augment: crate::dataio::AugmentConfig,
    pub threshold: f64,
}

impl EvalSettings {
    pub fn from_train(cfg: &TrainConfig, seed: u64) -> Self {
        EvalSettings {
            batch_size: cfg.batch_size,
            seed,
            use_prompt: cfg.use_prompt,
            augment: cfg.augment.clone(),
            threshold: 0.5,
        }
    }
}

/// Per-sample outputs of a forward pass, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub m1: Vec<Vec<f64>>,
    pub m2: Vec<Vec<f64>>,
    /// `[m1, m2]` generated flags.
    pub generated: Vec<[bool; 2]>,
    pub logits: Vec<Vec<f64>>,
}

pub fn forward_dataset(model: &Model, ds: &Dataset, settings: &EvalSettings) -> Result<ForwardOutput> {
    if settings.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let (d1, d2) = (model.cfg.d1, model.cfg.d2);
    let mut rng = Rng::new(settings.seed).fork(STREAM_EVAL);
    let mut out = ForwardOutput {
        m1: Vec::with_capacity(ds.len()),
        m2: Vec::with_capacity(ds.len()),
        generated: Vec::with_capacity(ds.len()),
        logits: Vec::with_capacity(ds.len()),
    };
    let mut tape = Tape::new();
    for chunk in ds.samples.chunks(settings.batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = FeatureBatch::from_samples(&refs, d1, d2, &settings.augment, &mut rng)?;
        tape.reset();
        let (views, logits, _) = forward(&mut tape, model, &batch, settings.use_prompt)?;
        for i in 0..batch.len() {
            out.m1.push(tape.value(views[0].orig).row(i).to_vec());
            out.m2.push(tape.value(views[1].orig).row(i).to_vec());
            out.generated.push(
                [Modality::M1, Modality::M2].map(|m| settings.use_prompt && !batch.slots(m).present[i]),
            );
            out.logits.push(tape.value(logits).row(i).to_vec());
        }
    }
    Ok(out)
}

/// Scores logits against labels.
pub fn report_from_logits(
    logits: &[Vec<f64>],
    labels: &[Label],
    kind: LabelKind,
    class_count: usize,
    threshold: f64,
) -> Result<EvalReport> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Argument(format!(
            "need one logit row per label ({} vs {})",
            logits.len(),
            labels.len()
        )));
    }
    match kind {
        LabelKind::Single => {
            let pred: Vec<usize> = logits.iter().map(|z| argmax(z)).collect();
            let truth: Vec<usize> = labels.iter().map(Label::class).collect();
            let auroc = if class_count == 2 {
                let scores: Vec<f64> = logits.iter().map(|z| z[1] - z[0]).collect();
                let pos: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
                match auroc(&scores, &pos) {
                    Ok(a) => Some(a),
                    Err(Error::UndefinedMetric(_)) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            Ok(EvalReport {
                accuracy: accuracy(&pred, &truth)?,
                auroc,
                f1_macro: f1_macro(F1Input::Single { pred: &pred, truth: &truth }, class_count)?,
                per_class: per_class_single(&pred, &truth, class_count)?,
                n_samples: labels.len(),
            })
        }
        LabelKind::Multi => {
            let scores: Vec<Vec<f64>> = logits.iter().map(|z| z.iter().map(|&v| sigmoid(v)).collect()).collect();
            let truth: Vec<Vec<bool>> = labels
                .iter()
                .map(|l| (0..class_count).map(|k| l.has(k)).collect())
                .collect();
            let pred: Vec<Vec<bool>> = scores
                .iter()
                .map(|s| s.iter().map(|&p| p >= threshold).collect())
                .collect();
            Ok(EvalReport {
                accuracy: accuracy(&pred, &truth)?,
                auroc: None,
                f1_macro: f1_macro(
                    F1Input::Multi {
                        scores: &scores,
                        truth: &truth,
                        threshold,
                    },
                    class_count,
                )?,
                per_class: per_class_multi(&scores, &truth, threshold)?,
                n_samples: labels.len(),
            })
        }
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = k;
        }
    }
    best
}

pub fn evaluate(model: &Model, ds: &Dataset, settings: &EvalSettings) -> Result<EvalReport> {
    let out = forward_dataset(model, ds, settings)?;
    let labels: Vec<Label> = ds.samples.iter().map(|s| s.label.clone()).collect();
    report_from_logits(
        &out.logits,
        &labels,
        model.cfg.label_kind,
        model.cfg.class_count,
        settings.threshold,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task: f64,
    pub fncl: f64,
    pub cccl: f64,
    pub total: f64,
    pub val_metric: f64,
    pub test_metric: f64,
}

/// Per-epoch table plus `key=value` run metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub meta: Vec<(String, String)>,
    pub metric: Metric,
    pub rows: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// `# key=value` lines, then a comma-separated table.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k}={v}\n"));
        }
        let m = self.metric.as_str();
        out.push_str(&format!("epoch,task,fncl,cccl,total,val_{m},test_{m}\n"));
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.task, r.fncl, r.cccl, r.total, r.val_metric, r.test_metric
            ));
        }
        out
    }
}

pub fn format_percent(fraction: f64) -> String {
    let p = (fraction * 100.0 * 1e6).round() / 1e6;
    format!("{p}%")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    /// Test report of the selected model.
    pub test_report: EvalReport,
    pub val_report: EvalReport,
}

/// Trains on `ds` with a fresh seeded split; every split carries its own
/// missing pattern at `cfg.eta`. Returns the best-validation model (earliest
/// epoch on ties; the initial model when `epochs == 0`).
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    if cfg.use_fncl && ds.header.d1 != ds.header.d2 {
        return Err(Error::Config(format!(
            "cross-modal alignment needs d1 == d2 (dataset has {} and {}); disable it with --no-fncl",
            ds.header.d1, ds.header.d2
        )));
    }
    let [train_raw, val_raw, test_raw] = split_dataset(ds, cfg.seed, cfg.val_frac, cfg.test_frac)?;
    let (train_ds, _) = apply_split_pattern(&train_raw, cfg.protocol, cfg.eta, cfg.seed, SplitKind::Train)?;
    let (val_ds, _) = apply_split_pattern(&val_raw, cfg.protocol, cfg.eta, cfg.seed, SplitKind::Val)?;
    let (test_ds, _) = apply_split_pattern(&test_raw, cfg.protocol, cfg.eta, cfg.seed, SplitKind::Test)?;

    let model_cfg = ModelConfig {
        d1: ds.header.d1,
        d2: ds.header.d2,
        class_count: ds.header.class_count,
        label_kind: ds.header.label_kind,
        attn: cfg.attn.clone(),
    };
    let mut model = Model::new(model_cfg, &mut Rng::new(cfg.seed).fork(STREAM_INIT))?;
    let eval = EvalSettings::from_train(cfg, cfg.seed);

    let (n1, n2) = cfg.protocol.nominal_retention(cfg.eta);
    let st = PatternStats::of(&train_ds);
    let (r1, r2) = st.retention();
    let on_off = |b: bool| if b { "on" } else { "off" };
    let meta = vec![
        ("seed".into(), cfg.seed.to_string()),
        ("protocol".into(), cfg.protocol.to_string()),
        ("eta".into(), cfg.eta.to_string()),
        ("retain_m1".into(), format_percent(n1)),
        ("retain_m2".into(), format_percent(n2)),
        ("train_retain_m1".into(), format_percent(r1)),
        ("train_retain_m2".into(), format_percent(r2)),
        ("splits".into(), format!("{}/{}/{}", train_ds.len(), val_ds.len(), test_ds.len())),
        ("prompt".into(), on_off(cfg.use_prompt).into()),
        ("fncl".into(), on_off(cfg.use_fncl).into()),
        ("cccl".into(), on_off(cfg.use_cccl).into()),
        ("metric".into(), cfg.metric.as_str().into()),
    ];

    let mut best_val_report = evaluate(&model, &val_ds, &eval)?;
    let mut best_test_report = evaluate(&model, &test_ds, &eval)?;
    let mut best = Checkpoint {
        model: model.clone(),
        train: cfg.clone(),
        best_epoch: None,
    };
    let mut best_val = f64::NEG_INFINITY;
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut adam = AdamState::new();
    let hp = AdamParams {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps_adam,
    };
    let mut tape = Tape::new();
    let (d1, d2) = (model.cfg.d1, model.cfg.d2);

    for epoch in 0..cfg.epochs {
        let base = Rng::new(cfg.seed);
        let order = base.fork(STREAM_EPOCH + 2 * epoch as u64).permutation(train_ds.len());
        let mut aug_rng = base.fork(STREAM_EPOCH + 2 * epoch as u64 + 1);
        let mut sums = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train_ds.samples[i]).collect();
            let batch = FeatureBatch::from_samples(&refs, d1, d2, &cfg.augment, &mut aug_rng)?;
            tape.reset();
            let (lv, _) = total_loss(&mut tape, &model, &batch, cfg)?;
            let b = lv.breakdown(&tape);
            if !b.total.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}")));
            }
            let w = batch.len() as f64;
            sums.total += w * b.total;
            sums.task += w * b.task;
            sums.fncl += w * b.fncl;
            sums.cccl += w * b.cccl;
            tape.backward(lv.total)?;
            adam.step(&mut model.store, tape.grads(), &hp)?;
        }
        let n = train_ds.len() as f64;
        let val_report = evaluate(&model, &val_ds, &eval)?;
        let test_report = evaluate(&model, &test_ds, &eval)?;
        let val_metric = val_report.metric(cfg.metric)?;
        let test_metric = test_report.metric(cfg.metric)?;
        rows.push(EpochRecord {
            epoch,
            task: sums.task / n,
            fncl: sums.fncl / n,
            cccl: sums.cccl / n,
            total: sums.total / n,
            val_metric,
            test_metric,
        });
        if val_metric > best_val {
            best_val = val_metric;
            best = Checkpoint {
                model: model.clone(),
                train: cfg.clone(),
                best_epoch: Some(epoch),
            };
            best_val_report = val_report;
            best_test_report = test_report;
        }
    }

    Ok(TrainOutcome {
        checkpoint: best,
        log: TrainLog {
            meta,
            metric: cfg.metric,
            rows,
        },
        test_report: best_test_report,
        val_report: best_val_report,
    })
}
