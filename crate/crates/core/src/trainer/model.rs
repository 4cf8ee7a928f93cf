use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::contrast::{cccl_loss, fncl_loss, EffectiveViews};
use crate::dataio::{FeatureBatch, Label, LabelKind};
use crate::error::{Error, Result};
use crate::numkernel::{gaussian_init, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::promptattn::{complete_on_tape, AttnConfig, CompletionStats, PromptAttention, ViewPair};

/// Shape of a model; enough to rebuild its parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d1: usize,
    pub d2: usize,
    pub class_count: usize,
    pub label_kind: LabelKind,
    pub attn: AttnConfig,
}

/// Linear classifier over the concatenated effective originals
/// `[x_m1; x_m2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub w: ParamId,
    pub b: ParamId,
    pub kind: LabelKind,
    pub class_count: usize,
}

impl TaskHead {
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let z = tape.matmul(features, w)?;
        tape.add_row(z, b)
    }

    /// Mean softmax cross-entropy, or mean per-class sigmoid cross-entropy
    /// for multi-label data.
    pub fn loss(&self, tape: &mut Tape, logits: Var, labels: &[Label]) -> Result<Var> {
        let b = labels.len();
        let c = self.class_count;
        let sh = tape.value(logits).shape().to_vec();
        if sh != [b, c] {
            return Err(Error::dim("task_loss", &sh, &[b, c]));
        }
        let mut target = Tensor::zeros(&[b, c]);
        for (i, l) in labels.iter().enumerate() {
            match (l, self.kind) {
                (Label::Single(k), LabelKind::Single) if *k < c => target.set(i, *k, 1.0),
                (Label::Multi(bits), LabelKind::Multi) if bits.len() == c => {
                    for (k, &on) in bits.iter().enumerate() {
                        if on {
                            target.set(i, k, 1.0);
                        }
                    }
                }
                _ => return Err(Error::Data(format!("label {i} does not fit a {c}-class {:?} head", self.kind))),
            }
        }
        match self.kind {
            LabelKind::Single => {
                // -log softmax_y = lse(z) - z_y
                let all = tape.logsumexp_rows(logits, None)?;
                let picked = tape.logsumexp_rows(logits, Some(&target))?;
                let per = tape.sub(all, picked)?;
                Ok(tape.mean(per))
            }
            LabelKind::Multi => {
                // softplus(z) - y z
                let sp = tape.softplus(logits);
                let y = tape.constant(target);
                let yz = tape.mul(y, logits)?;
                let per = tape.sub(sp, yz)?;
                Ok(tape.mean(per))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub attn: PromptAttention,
    pub head: TaskHead,
}

impl Model {
    /// Fresh parameters: generator first, then the head (weights
    /// `N(0, init_std)`, zero bias).
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.class_count == 0 {
            return Err(Error::Config("class_count must be at least 1".into()));
        }
        let mut store = ParamStore::new();
        let attn = PromptAttention::new(&mut store, cfg.attn.clone(), cfg.d1, cfg.d2, rng)?;
        let d = cfg.d1 + cfg.d2;
        let w = store.register("head.w", gaussian_init(rng, &[d, cfg.class_count], 0.0, cfg.attn.init_std)?)?;
        let b = store.register("head.b", Tensor::zeros(&[1, cfg.class_count]))?;
        let head = TaskHead {
            w,
            b,
            kind: cfg.label_kind,
            class_count: cfg.class_count,
        };
        Ok(Model { cfg, store, attn, head })
    }

    pub fn head_params(&self) -> [ParamId; 2] {
        [self.head.w, self.head.b]
    }
}

/// Scalar values of every loss term for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub task: f64,
    pub fncl: f64,
    pub cccl: f64,
    /// Weighted contrastive term before `lambda_task`.
    pub contrast: f64,
}

/// Loss graph handles for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub task: Var,
    pub fncl: Option<Var>,
    pub cccl: Option<Var>,
    pub contrast: Option<Var>,
    pub views: [ViewPair; 2],
    pub logits: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
        LossBreakdown {
            total: tape.scalar(self.total),
            task: tape.scalar(self.task),
            fncl: get(self.fncl),
            cccl: get(self.cccl),
            contrast: get(self.contrast),
        }
    }
}

/// Builds `L_task + lambda * (w_f L_fncl + w_c L_cccl)` on `tape`. Disabled
/// objectives add no nodes; with both off the total is the task node itself.
pub fn total_loss(
    tape: &mut Tape,
    model: &Model,
    batch: &FeatureBatch,
    cfg: &TrainConfig,
) -> Result<(LossVars, CompletionStats)> {
    total_loss_with(tape, &model.store, model, batch, cfg)
}

/// [`total_loss`] reading parameter values from `store` instead of
/// `model.store`; the layouts must match.
pub fn total_loss_with(
    tape: &mut Tape,
    store: &ParamStore,
    model: &Model,
    batch: &FeatureBatch,
    cfg: &TrainConfig,
) -> Result<(LossVars, CompletionStats)> {
    let (views, stats) = complete_on_tape(tape, store, &model.attn, batch, cfg.use_prompt)?;
    let features = tape.concat_cols(&[views[0].orig, views[1].orig])?;
    let logits = model.head.logits(tape, store, features)?;
    let task = model.head.loss(tape, logits, &batch.labels)?;

    let ccfg = cfg.contrast();
    let ev = EffectiveViews {
        m1: views[0],
        m2: views[1],
        labels: &batch.labels,
    };
    let fncl = if cfg.use_fncl {
        if model.cfg.d1 != model.cfg.d2 {
            return Err(Error::Config(format!(
                "cross-modal alignment compares m1 and m2 features directly and needs d1 == d2 (got {} and {}); disable it with --no-fncl",
                model.cfg.d1, model.cfg.d2
            )));
        }
        Some(fncl_loss(tape, &ev, &ccfg)?)
    } else {
        None
    };
    let cccl = if cfg.use_cccl { Some(cccl_loss(tape, &ev, &ccfg)?) } else { None };
    let (wf, wc) = cfg.contrast_weights();
    let contrast = match (fncl, cccl) {
        (Some(f), Some(c)) => Some(tape.weighted_sum(&[(f, wf), (c, wc)])?),
        (Some(f), None) => Some(f),
        (None, Some(c)) => Some(c),
        (None, None) => None,
    };
    let total = match contrast {
        Some(c) => tape.weighted_sum(&[(task, 1.0), (c, cfg.lambda_task)])?,
        None => task,
    };
    Ok((
        LossVars {
            total,
            task,
            fncl,
            cccl,
            contrast,
            views,
            logits,
        },
        stats,
    ))
}

/// Forward pass without losses: effective originals and logits.
pub fn forward(
    tape: &mut Tape,
    model: &Model,
    batch: &FeatureBatch,
    use_prompt: bool,
) -> Result<([ViewPair; 2], Var, CompletionStats)> {
    let (views, stats) = complete_on_tape(tape, &model.store, &model.attn, batch, use_prompt)?;
    let features = tape.concat_cols(&[views[0].orig, views[1].orig])?;
    let logits = model.head.logits(tape, &model.store, features)?;
    Ok((views, logits, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{AugmentConfig, Sample};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d1: 3,
            d2: 3,
            class_count: 2,
            label_kind: LabelKind::Single,
            attn: AttnConfig {
                d_model: 4,
                n_heads: 2,
                prompt_len: 3,
                attn_layers: 1,
                init_std: 0.3,
            },
        }
    }

    fn toy_batch(seed: u64) -> FeatureBatch {
        let mut rng = Rng::new(seed);
        let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.normal()).collect() };
        let samples = vec![
            Sample { id: "a".into(), label: Label::Single(0), m1: Some(v(3)), m2: Some(v(3)) },
            Sample { id: "b".into(), label: Label::Single(1), m1: None, m2: Some(v(3)) },
            Sample { id: "c".into(), label: Label::Single(0), m1: Some(v(3)), m2: None },
            Sample { id: "d".into(), label: Label::Single(1), m1: Some(v(3)), m2: Some(v(3)) },
        ];
        let refs: Vec<&Sample> = samples.iter().collect();
        FeatureBatch::from_samples(&refs, 3, 3, &AugmentConfig::default(), &mut Rng::new(seed + 1)).unwrap()
    }

    #[test]
    fn breakdown_is_additive() {
        let model = Model::new(tiny_cfg(), &mut Rng::new(0)).unwrap();
        let cfg = TrainConfig::default();
        let mut tape = Tape::new();
        let (lv, stats) = total_loss(&mut tape, &model, &toy_batch(0), &cfg).unwrap();
        let b = lv.breakdown(&tape);
        assert_eq!(stats.total(), 2);
        assert!((b.contrast - (0.5 * b.fncl + 0.5 * b.cccl)).abs() < 1e-12);
        assert!((b.total - (b.task + cfg.lambda_task * b.contrast)).abs() < 1e-12);
    }

    #[test]
    fn no_contrast_means_total_is_task() {
        let model = Model::new(tiny_cfg(), &mut Rng::new(0)).unwrap();
        let cfg = TrainConfig {
            use_fncl: false,
            use_cccl: false,
            ..Default::default()
        };
        let mut tape = Tape::new();
        let (lv, _) = total_loss(&mut tape, &model, &toy_batch(0), &cfg).unwrap();
        assert_eq!(lv.total, lv.task);
        assert!(lv.fncl.is_none() && lv.cccl.is_none());
    }

    #[test]
    fn baseline_leaves_generator_without_gradient() {
        let model = Model::new(tiny_cfg(), &mut Rng::new(0)).unwrap();
        let cfg = TrainConfig::default().with_ablation(super::super::Ablation::Baseline);
        let mut tape = Tape::new();
        let (lv, stats) = total_loss(&mut tape, &model, &toy_batch(0), &cfg).unwrap();
        assert_eq!(stats.total(), 0);
        tape.backward(lv.total).unwrap();
        for id in model.attn.param_ids() {
            assert!(tape.grad(id).is_none_or(|g| g.data().iter().all(|&x| x == 0.0)));
        }
        assert!(tape.grad(model.head.w).is_some());
    }

    #[test]
    fn zero_lambda_ignores_contrast_in_gradients() {
        let model = Model::new(tiny_cfg(), &mut Rng::new(3)).unwrap();
        let batch = toy_batch(3);
        let grads_for = |cfg: &TrainConfig| {
            let mut tape = Tape::new();
            let (lv, _) = total_loss(&mut tape, &model, &batch, cfg).unwrap();
            tape.backward(lv.total).unwrap();
            tape.grads().clone()
        };
        let with = grads_for(&TrainConfig { lambda_task: 0.0, ..Default::default() });
        let without = grads_for(&TrainConfig {
            use_fncl: false,
            use_cccl: false,
            ..Default::default()
        });
        for id in model.attn.param_ids() {
            let (a, b) = (with.get(&id), without.get(&id));
            match (a, b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data().iter().zip(b.data()) {
                        assert!((x - y).abs() < 1e-14);
                    }
                }
                (Some(a), None) => assert!(a.data().iter().all(|&x| x == 0.0)),
                (None, Some(b)) => assert!(b.data().iter().all(|&x| x == 0.0)),
                (None, None) => {}
            }
        }
    }

    #[test]
    fn multi_label_loss_matches_formula() {
        let mut cfg = tiny_cfg();
        cfg.label_kind = LabelKind::Multi;
        let model = Model::new(cfg, &mut Rng::new(1)).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 2, vec![0.5, -2.0]).unwrap());
        let l = model.head.loss(&mut tape, z, &[Label::Multi(vec![true, false])]).unwrap();
        let sp = |x: f64| (1.0 + x.exp()).ln();
        let expect = ((sp(0.5) - 0.5) + sp(-2.0)) / 2.0;
        assert!((tape.scalar(l) - expect).abs() < 1e-14);
    }

    #[test]
    fn fncl_rejects_unequal_dims() {
        let mut cfg = tiny_cfg();
        cfg.d2 = 2;
        let model = Model::new(cfg, &mut Rng::new(0)).unwrap();
        let s = Sample { id: "x".into(), label: Label::Single(0), m1: Some(vec![1.0; 3]), m2: Some(vec![1.0; 2]) };
        let batch = FeatureBatch::from_samples(&[&s], 3, 2, &AugmentConfig::identity(), &mut Rng::new(0)).unwrap();
        let mut tape = Tape::new();
        let e = total_loss(&mut tape, &model, &batch, &TrainConfig::default()).unwrap_err();
        assert!(e.to_string().contains("d1 == d2"));
        let ok = TrainConfig { use_fncl: false, ..Default::default() };
        total_loss(&mut Tape::new(), &model, &batch, &ok).unwrap();
    }
}
