//! Prompt attention: generating features for an absent modality.
//!
//! For a sample whose target modality is missing, the available features
//! `x` and their augmented view `x_a` are concatenated and projected to one
//! `d_model` token, `f([x; x_a])`. Head `i` attends over the sequence made of
//! that token followed by the `prompt_len` rows of prompt `p_i` from the
//! target modality's pool, and keeps the output at token 0. The heads'
//! outputs are concatenated and mapped by two separate linear fusions to the
//! generated original and augmented features.
//!
//! There are no positional encodings, so the token-0 output does not depend
//! on the order of prompt rows. With `attn_layers > 1` the concatenated head
//! outputs become token 0 of the next layer, which has its own projections
//! and reuses the same prompts.
//!
//! Two attention stacks are instantiated, one per target modality, each
//! with its own `f`, per-head `W_Q/W_K/W_V`, and fusion maps.

use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureBatch, Modality};
use crate::error::{Error, Result};
use crate::numkernel::{gaussian_init, ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub prompt_len: usize,
    pub attn_layers: usize,
    pub init_std: f64,
}

impl Default for AttnConfig {
    fn default() -> Self {
        AttnConfig {
            d_model: 256,
            n_heads: 4,
            prompt_len: 16,
            attn_layers: 1,
            init_std: 0.02,
        }
    }
}

impl AttnConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Attention logit scale `1 / sqrt(d_head)`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.d_head() as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.prompt_len == 0 || self.attn_layers == 0 {
            return Err(Error::Config("prompt_len and attn_layers must be positive".into()));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::Config(format!("init_std must be >= 0, got {}", self.init_std)));
        }
        Ok(())
    }
}

/// Trainable prompts of one modality: one `prompt_len x d_model` matrix per head.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    pub modality: Modality,
    pub prompts: Vec<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn register(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.register(format!("{name}.w"), gaussian_init(rng, &[d_in, d_out], 0.0, std)?)?;
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[1, d_out]))?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// The attention stack generating one target modality.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptAttentionParams {
    pub target: Modality,
    /// `f`: `2 * d_source -> d_model`.
    pub proj_f: Linear,
    /// `layers[l][h]`
    pub layers: Vec<Vec<HeadParams>>,
    pub fuse_ori: Linear,
    pub fuse_aug: Linear,
}

/// Generated features for one target modality, as tape values.
#[derive(Clone, Copy, Debug)]
pub struct GeneratedVars {
    pub x_hat: Var,
    pub x_hat_aug: Var,
}

/// Generated features for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedPair {
    pub x_hat: Vec<f64>,
    pub x_hat_aug: Vec<f64>,
}

/// Pools for both modalities and one stack per target modality.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptAttention {
    pub cfg: AttnConfig,
    pub dims: [usize; 2],
    pools: [PromptPool; 2],
    stacks: [PromptAttentionParams; 2],
}

impl PromptAttention {
    /// Registers every parameter in `store`. Weights and prompts are drawn
    /// from `N(0, init_std)`; biases start at zero.
    pub fn new(store: &mut ParamStore, cfg: AttnConfig, d1: usize, d2: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let dims = [d1, d2];
        let std = cfg.init_std;
        let pools = Modality::BOTH.map(|m| -> Result<PromptPool> {
            let prompts = (0..cfg.n_heads)
                .map(|h| {
                    let p = gaussian_init(rng, &[cfg.prompt_len, cfg.d_model], 0.0, std)?;
                    store.register(format!("promptattn.pool.{m}.prompt{h}"), p)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PromptPool { modality: m, prompts })
        });
        let [p1, p2] = pools;
        let pools = [p1?, p2?];

        let mut stacks = Vec::with_capacity(2);
        for target in Modality::BOTH {
            let src_dim = dims[target.other().index()];
            let tgt_dim = dims[target.index()];
            let prefix = format!("promptattn.to_{target}");
            let proj_f = Linear::register(store, &format!("{prefix}.proj_f"), 2 * src_dim, cfg.d_model, std, rng)?;
            let mut layers = Vec::with_capacity(cfg.attn_layers);
            for l in 0..cfg.attn_layers {
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for h in 0..cfg.n_heads {
                    let mut mk = |name: &str| -> Result<ParamId> {
                        let w = gaussian_init(rng, &[cfg.d_model, cfg.d_head()], 0.0, std)?;
                        store.register(format!("{prefix}.layer{l}.head{h}.{name}"), w)
                    };
                    heads.push(HeadParams {
                        w_q: mk("w_q")?,
                        w_k: mk("w_k")?,
                        w_v: mk("w_v")?,
                    });
                }
                layers.push(heads);
            }
            let fused = cfg.n_heads * cfg.d_head();
            let fuse_ori = Linear::register(store, &format!("{prefix}.fuse_ori"), fused, tgt_dim, std, rng)?;
            let fuse_aug = Linear::register(store, &format!("{prefix}.fuse_aug"), fused, tgt_dim, std, rng)?;
            stacks.push(PromptAttentionParams {
                target,
                proj_f,
                layers,
                fuse_ori,
                fuse_aug,
            });
        }
        let s2 = stacks.pop().expect("two stacks");
        let s1 = stacks.pop().expect("two stacks");
        Ok(PromptAttention {
            cfg,
            dims,
            pools,
            stacks: [s1, s2],
        })
    }

    pub fn pool(&self, m: Modality) -> &PromptPool {
        &self.pools[m.index()]
    }

    pub fn stack(&self, target: Modality) -> &PromptAttentionParams {
        &self.stacks[target.index()]
    }

    /// Every parameter owned by the generator, pools first.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.pools.iter().flat_map(|p| p.prompts.iter().copied()).collect();
        for s in &self.stacks {
            ids.extend([s.proj_f.w, s.proj_f.b]);
            for layer in &s.layers {
                for h in layer {
                    ids.extend([h.w_q, h.w_k, h.w_v]);
                }
            }
            ids.extend([s.fuse_ori.w, s.fuse_ori.b, s.fuse_aug.w, s.fuse_aug.b]);
        }
        ids
    }

    fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.cfg.n_heads {
            return Err(Error::Index {
                index: head,
                len: self.cfg.n_heads,
            });
        }
        Ok(())
    }

    /// `A_i = [f([x; x_a]); p_i]` for one sample (`x`, `x_aug` are `1 x d_source`
    /// rows of the modality opposite to `target`).
    pub fn build_head_sequence(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        x_aug: Var,
        target: Modality,
        head: usize,
    ) -> Result<Var> {
        self.check_head(head)?;
        let token = self.fused_token(tape, store, x, x_aug, target)?;
        self.sequence_with_prompt(tape, store, token, target, head)
    }

    fn fused_token(&self, tape: &mut Tape, store: &ParamStore, x: Var, x_aug: Var, target: Modality) -> Result<Var> {
        let cat = tape.concat_cols(&[x, x_aug])?;
        self.stack(target).proj_f.forward(tape, store, cat)
    }

    fn sequence_with_prompt(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        token: Var,
        target: Modality,
        head: usize,
    ) -> Result<Var> {
        let prompt = tape.param(store, self.pool(target).prompts[head]);
        tape.concat_rows(&[token, prompt])
    }

    /// Self-attention of one head over the full `(1 + prompt_len) x d_model`
    /// sequence, `softmax(Q K^T / sqrt(d_head)) V`, returning the token-0
    /// output row (`1 x d_head`).
    pub fn head_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: Var,
        target: Modality,
        layer: usize,
        head: usize,
    ) -> Result<Var> {
        self.check_head(head)?;
        let hp = self
            .stack(target)
            .layers
            .get(layer)
            .ok_or(Error::Index {
                index: layer,
                len: self.cfg.attn_layers,
            })?[head];
        let wq = tape.param(store, hp.w_q);
        let wk = tape.param(store, hp.w_k);
        let wv = tape.param(store, hp.w_v);
        let q = tape.matmul(seq, wq)?;
        let k = tape.matmul(seq, wk)?;
        let v = tape.matmul(seq, wv)?;
        let logits = tape.matmul_t(q, k)?;
        let logits = tape.scale(logits, self.cfg.scale());
        let weights = tape.softmax_rows(logits)?;
        let out = tape.matmul(weights, v)?;
        tape.gather_rows(out, &[0])
    }

    /// Generates both views of the `target` modality for one sample from the
    /// other modality's `1 x d` rows.
    pub fn generate_missing(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        x_aug: Var,
        target: Modality,
    ) -> Result<GeneratedVars> {
        let src = self.dims[target.other().index()];
        for v in [x, x_aug] {
            if tape.value(v).shape() != [1, src] {
                return Err(Error::dim("generate_missing", tape.value(v).shape(), &[1, src]));
            }
        }
        let mut token = self.fused_token(tape, store, x, x_aug, target)?;
        for layer in 0..self.cfg.attn_layers {
            let mut outs = Vec::with_capacity(self.cfg.n_heads);
            for head in 0..self.cfg.n_heads {
                let seq = self.sequence_with_prompt(tape, store, token, target, head)?;
                outs.push(self.head_attention(tape, store, seq, target, layer, head)?);
            }
            token = tape.concat_cols(&outs)?;
        }
        self.fuse(tape, store, token, target)
    }

    fn fuse(&self, tape: &mut Tape, store: &ParamStore, heads: Var, target: Modality) -> Result<GeneratedVars> {
        let s = self.stack(target);
        Ok(GeneratedVars {
            x_hat: s.fuse_ori.forward(tape, store, heads)?,
            x_hat_aug: s.fuse_aug.forward(tape, store, heads)?,
        })
    }

    /// Value-level [`Self::generate_missing`] for one sample.
    pub fn generate_pair(&self, store: &ParamStore, x: &[f64], x_aug: &[f64], target: Modality) -> Result<GeneratedPair> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::row_vector(x));
        let av = tape.constant(Tensor::row_vector(x_aug));
        let g = self.generate_missing(&mut tape, store, xv, av, target)?;
        Ok(GeneratedPair {
            x_hat: tape.value(g.x_hat).data().to_vec(),
            x_hat_aug: tape.value(g.x_hat_aug).data().to_vec(),
        })
    }

    /// Batched generation: rows of `x`, `x_aug` (`B x d_source`) are independent
    /// samples. Only the token-0 query is formed; prompt keys and values are
    /// computed once per head and shared by the batch. The result equals
    /// [`Self::generate_missing`] applied row by row.
    pub fn generate_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        x_aug: Var,
        target: Modality,
    ) -> Result<GeneratedVars> {
        let src = self.dims[target.other().index()];
        for v in [x, x_aug] {
            let sh = tape.value(v).shape();
            if sh.len() != 2 || sh[1] != src {
                return Err(Error::dim("generate_batch", sh, &[0, src]));
            }
        }
        let stack = self.stack(target);
        let pool = self.pool(target);
        let lp = self.cfg.prompt_len;
        let mut token = self.fused_token(tape, store, x, x_aug, target)?;
        for layer in &stack.layers {
            let mut outs = Vec::with_capacity(self.cfg.n_heads);
            for (head, hp) in layer.iter().enumerate() {
                let prompt = tape.param(store, pool.prompts[head]);
                let wq = tape.param(store, hp.w_q);
                let wk = tape.param(store, hp.w_k);
                let wv = tape.param(store, hp.w_v);
                let q = tape.matmul(token, wq)?;
                let k0 = tape.matmul(token, wk)?;
                let v0 = tape.matmul(token, wv)?;
                let kp = tape.matmul(prompt, wk)?;
                let vp = tape.matmul(prompt, wv)?;
                let qk0 = tape.mul(q, k0)?;
                let s0 = tape.sum_cols(qk0)?;
                let sp = tape.matmul_t(q, kp)?;
                let logits = tape.concat_cols(&[s0, sp])?;
                let logits = tape.scale(logits, self.cfg.scale());
                let weights = tape.softmax_rows(logits)?;
                let w0 = tape.slice_cols(weights, 0, 1)?;
                let wp = tape.slice_cols(weights, 1, 1 + lp)?;
                let self_part = tape.mul_col(v0, w0)?;
                let prompt_part = tape.matmul(wp, vp)?;
                outs.push(tape.add(self_part, prompt_part)?);
            }
            token = tape.concat_cols(&outs)?;
        }
        self.fuse(tape, store, token, target)
    }
}

/// Original and augmented views of one modality on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ViewPair {
    pub orig: Var,
    pub aug: Var,
}

/// Number of generated rows per target modality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CompletionStats {
    pub generated_m1: usize,
    pub generated_m2: usize,
}

impl CompletionStats {
    pub fn total(&self) -> usize {
        self.generated_m1 + self.generated_m2
    }
}

/// Effective views of a batch on a tape: real rows where present, generated
/// rows where missing. With `generate == false` missing rows stay zero, which
/// is the no-prompt ablation baseline.
pub fn complete_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    attn: &PromptAttention,
    batch: &FeatureBatch,
    generate: bool,
) -> Result<([ViewPair; 2], CompletionStats)> {
    if let Some(i) = batch.first_empty() {
        return Err(Error::Data(format!("sample {} has both modalities missing", batch.ids[i])));
    }
    let b = batch.len();
    let mut stats = CompletionStats::default();
    let mut views = Vec::with_capacity(2);
    for target in Modality::BOTH {
        let slots = batch.slots(target);
        let missing = slots.missing_rows();
        if !generate || missing.is_empty() {
            views.push(ViewPair {
                orig: tape.constant(slots.orig.clone()),
                aug: tape.constant(slots.aug.clone()),
            });
            continue;
        }
        let source = batch.slots(target.other());
        let x = tape.constant(gather(&source.orig, &missing));
        let xa = tape.constant(gather(&source.aug, &missing));
        let generated = attn.generate_batch(tape, store, x, xa, target)?;
        match target {
            Modality::M1 => stats.generated_m1 += missing.len(),
            Modality::M2 => stats.generated_m2 += missing.len(),
        }
        let present = slots.present_rows();
        let mut assemble = |real: &Tensor, gen: Var| -> Result<Var> {
            let mut parts = vec![(gen, missing.clone())];
            if !present.is_empty() {
                parts.push((tape.constant(gather(real, &present)), present.clone()));
            }
            tape.scatter_rows(&parts, b)
        };
        let orig = assemble(&slots.orig, generated.x_hat)?;
        let aug = assemble(&slots.aug, generated.x_hat_aug)?;
        views.push(ViewPair { orig, aug });
    }
    let v2 = views.pop().expect("two views");
    let v1 = views.pop().expect("two views");
    Ok(([v1, v2], stats))
}

/// Fills every absent slot of `batch` with generated features and marks it
/// generated. Present slots are returned untouched.
pub fn complete_batch(
    batch: &FeatureBatch,
    store: &ParamStore,
    attn: &PromptAttention,
) -> Result<(FeatureBatch, CompletionStats)> {
    let mut tape = Tape::new();
    let (views, stats) = complete_on_tape(&mut tape, store, attn, batch, true)?;
    let mut out = batch.clone();
    for target in Modality::BOTH {
        let view = views[target.index()];
        let slots = out.slots_mut(target);
        for i in slots.missing_rows() {
            slots.orig.row_mut(i).copy_from_slice(tape.value(view.orig).row(i));
            slots.aug.row_mut(i).copy_from_slice(tape.value(view.aug).row(i));
            slots.generated[i] = true;
        }
    }
    Ok((out, stats))
}

fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let cols = t.cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::matrix(rows.len(), cols, data).expect("consistent rows")
}
