//! Decoder-only transformer with adapter hooks at every attention and
//! feed-forward linear map.
//!
//! Weights live in plain tensors; each training step binds them onto a
//! fresh tape as leaves. The base model is frozen after its warm-up, so
//! normal training binds it with `trainable = false`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::experts::{moe_linear, MoeCtx};

pub const LN_EPS: f64 = 1e-5;
/// Adapted linear maps per transformer layer: wq, wk, wv, wo, ff1, ff2.
pub const SITES_PER_LAYER: usize = 6;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub t_max: usize,
    pub d_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: crate::lm::tokenizer::VOCAB_SIZE,
            d: 64,
            layers: 2,
            heads: 4,
            t_max: 256,
            d_ff: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d == 0 || self.layers == 0 || self.heads == 0 || self.t_max == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// Shape and name of one adapted linear site.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiteSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// All adapted sites in fixed layer-major order. Expert adapter vectors are
/// indexed by position in this list.
pub fn adapted_sites(cfg: &ModelConfig) -> Vec<SiteSpec> {
    let mut out = Vec::with_capacity(cfg.layers * SITES_PER_LAYER);
    for l in 0..cfg.layers {
        for (suffix, rows, cols) in [
            ("wq", cfg.d, cfg.d),
            ("wk", cfg.d, cfg.d),
            ("wv", cfg.d, cfg.d),
            ("wo", cfg.d, cfg.d),
            ("ff1", cfg.d, cfg.d_ff),
            ("ff2", cfg.d_ff, cfg.d),
        ] {
            out.push(SiteSpec {
                name: format!("layer{}.{}", l, suffix),
                rows,
                cols,
            });
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct LayerWeights<F: Real> {
    pub ln1_g: Tensor<F>,
    pub ln1_b: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub ln2_g: Tensor<F>,
    pub ln2_b: Tensor<F>,
    pub ff1: Tensor<F>,
    pub ff2: Tensor<F>,
}

impl<F: Real> LayerWeights<F> {
    pub fn init(d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0f64, 0.02).expect("valid normal");
        let mut mat = |r: usize, c: usize| {
            let data: Vec<F> = (0..r * c).map(|_| F::real(dist.sample(rng))).collect();
            Tensor::new(vec![r, c], data).expect("consistent shape")
        };
        Self {
            ln1_g: Tensor::vector(vec![F::one(); d]),
            ln1_b: Tensor::vector(vec![F::zero(); d]),
            wq: mat(d, d),
            wk: mat(d, d),
            wv: mat(d, d),
            wo: mat(d, d),
            ln2_g: Tensor::vector(vec![F::one(); d]),
            ln2_b: Tensor::vector(vec![F::zero(); d]),
            ff1: mat(d, d_ff),
            ff2: mat(d_ff, d),
        }
    }

    /// Parameter views in fixed order, names relative to the layer.
    pub fn entries(&self) -> Vec<(&'static str, &Tensor<F>)> {
        vec![
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("ff1", &self.ff1),
            ("ff2", &self.ff2),
        ]
    }

    pub fn entries_mut(&mut self) -> Vec<(&'static str, &mut Tensor<F>)> {
        vec![
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("ff1", &mut self.ff1),
            ("ff2", &mut self.ff2),
        ]
    }
}

/// The frozen backbone. Mutation stops once the warm-up that stands in for
/// pre-training finishes; the training pipeline proves this with digests.
#[derive(Clone, Debug)]
pub struct BaseModel<F: Real> {
    pub cfg: ModelConfig,
    pub tok_emb: Tensor<F>,
    pub pos_emb: Tensor<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub lnf_g: Tensor<F>,
    pub lnf_b: Tensor<F>,
    pub head: Tensor<F>,
}

/// Tape handles for one layer's weights.
pub struct BoundLayer {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub ff1: Var,
    pub ff2: Var,
}

pub struct BoundBase {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<BoundLayer>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub head: Var,
}

impl<F: Real> BaseModel<F> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0f64, 0.02).expect("valid normal");
        let mat = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
            let data: Vec<F> = (0..r * c).map(|_| F::real(dist.sample(rng))).collect();
            Tensor::new(vec![r, c], data).expect("consistent shape")
        };
        let tok_emb = mat(cfg.vocab, cfg.d, &mut rng);
        let pos_emb = mat(cfg.t_max, cfg.d, &mut rng);
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights::init(cfg.d, cfg.d_ff, &mut rng))
            .collect();
        let head = mat(cfg.d, cfg.vocab, &mut rng);
        Ok(Self {
            lnf_g: Tensor::vector(vec![F::one(); cfg.d]),
            lnf_b: Tensor::vector(vec![F::zero(); cfg.d]),
            cfg,
            tok_emb,
            pos_emb,
            layers,
            head,
        })
    }

    /// Named parameter views: `tok_emb`, `pos_emb`, `layer{l}.{name}`,
    /// `lnf_g`, `lnf_b`, `head`. Order is fixed and mirrors `entries_mut`.
    pub fn entries(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (l, lw) in self.layers.iter().enumerate() {
            for (n, t) in lw.entries() {
                out.push((format!("layer{}.{}", l, n), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (l, lw) in self.layers.iter_mut().enumerate() {
            for (n, t) in lw.entries_mut() {
                out.push((format!("layer{}.{}", l, n), t));
            }
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out.push(("head".into(), &mut self.head));
        out
    }

    /// The frozen weight matrix at an adapted-site index (layer-major).
    pub fn site_weight(&self, site: usize) -> &Tensor<F> {
        let lw = &self.layers[site / SITES_PER_LAYER];
        match site % SITES_PER_LAYER {
            0 => &lw.wq,
            1 => &lw.wk,
            2 => &lw.wv,
            3 => &lw.wo,
            4 => &lw.ff1,
            _ => &lw.ff2,
        }
    }

    pub fn site_weight_mut(&mut self, site: usize) -> &mut Tensor<F> {
        let lw = &mut self.layers[site / SITES_PER_LAYER];
        match site % SITES_PER_LAYER {
            0 => &mut lw.wq,
            1 => &mut lw.wk,
            2 => &mut lw.wv,
            3 => &mut lw.wo,
            4 => &mut lw.ff1,
            _ => &mut lw.ff2,
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundBase {
        let bind_layer = |tape: &mut Tape<F>, lw: &LayerWeights<F>| BoundLayer {
            ln1_g: tape.leaf(lw.ln1_g.clone(), trainable),
            ln1_b: tape.leaf(lw.ln1_b.clone(), trainable),
            wq: tape.leaf(lw.wq.clone(), trainable),
            wk: tape.leaf(lw.wk.clone(), trainable),
            wv: tape.leaf(lw.wv.clone(), trainable),
            wo: tape.leaf(lw.wo.clone(), trainable),
            ln2_g: tape.leaf(lw.ln2_g.clone(), trainable),
            ln2_b: tape.leaf(lw.ln2_b.clone(), trainable),
            ff1: tape.leaf(lw.ff1.clone(), trainable),
            ff2: tape.leaf(lw.ff2.clone(), trainable),
        };
        BoundBase {
            tok_emb: tape.leaf(self.tok_emb.clone(), trainable),
            pos_emb: tape.leaf(self.pos_emb.clone(), trainable),
            layers: self.layers.iter().map(|lw| bind_layer(tape, lw)).collect(),
            lnf_g: tape.leaf(self.lnf_g.clone(), trainable),
            lnf_b: tape.leaf(self.lnf_b.clone(), trainable),
            head: tape.leaf(self.head.clone(), trainable),
        }
    }

    /// Final-layer hidden states after the closing layer norm: [T, d].
    pub fn hidden_on_tape(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundBase,
        ids: &[u32],
        moe: Option<&MoeCtx<'_, F>>,
    ) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("forward on empty token sequence".into()));
        }
        if ids.len() > self.cfg.t_max {
            return Err(Error::ContextOverflow {
                len: ids.len(),
                t_max: self.cfg.t_max,
            });
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let emb = tape.embedding(bound.tok_emb, &idx)?;
        let pos = tape.slice_rows(bound.pos_emb, 0, idx.len())?;
        let mut x = tape.add(emb, pos)?;
        for (l, lw) in bound.layers.iter().enumerate() {
            x = block_forward(tape, x, lw, self.cfg.heads, true, l, moe)?;
        }
        tape.layer_norm(x, bound.lnf_g, bound.lnf_b, F::real(LN_EPS))
    }

    /// Per-position vocabulary logits: [T, V]. `rows` restricts the head
    /// projection to a row range (training only scores response positions).
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundBase,
        ids: &[u32],
        moe: Option<&MoeCtx<'_, F>>,
        rows: Option<(usize, usize)>,
    ) -> Result<Var> {
        let hidden = self.hidden_on_tape(tape, bound, ids, moe)?;
        let picked = match rows {
            Some((s, e)) => tape.slice_rows(hidden, s, e)?,
            None => hidden,
        };
        tape.matmul(picked, bound.head)
    }

    /// One-shot convenience forward on a private tape.
    pub fn forward(&self, ids: &[u32], moe_state: Option<(&crate::experts::ExpertSet<F>, &crate::experts::RouterOutput<F>)>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let logits = match moe_state {
            None => self.logits_on_tape(&mut tape, &bound, ids, None, None)?,
            Some((experts, w)) => {
                let mixture = crate::experts::TapeMixture::Const(w.clone());
                let needed = mixture.needed();
                let bx = experts.bind(&mut tape, &needed, &[false; crate::pole::NUM_POLES]);
                let ctx = MoeCtx {
                    experts: &bx,
                    mixture: &mixture,
                };
                self.logits_on_tape(&mut tape, &bound, ids, Some(&ctx), None)?
            }
        };
        Ok(tape.value(logits).clone())
    }
}

/// One pre-norm transformer block: attention plus feed-forward, both with
/// residual connections. `layer` fixes which adapter sites apply.
pub fn block_forward<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    lw: &BoundLayer,
    heads: usize,
    causal: bool,
    layer: usize,
    moe: Option<&MoeCtx<'_, F>>,
) -> Result<Var> {
    let (_t, d) = tape.value(x).dims2();
    let dh = d / heads;
    let site0 = layer * SITES_PER_LAYER;

    let xn = tape.layer_norm(x, lw.ln1_g, lw.ln1_b, F::real(LN_EPS))?;
    let q = moe_linear(tape, xn, lw.wq, site0, moe)?;
    let k = moe_linear(tape, xn, lw.wk, site0 + 1, moe)?;
    let v = moe_linear(tape, xn, lw.wv, site0 + 2, moe)?;

    let scale = F::real(1.0 / (dh as f64).sqrt());
    let mut ctx_heads = Vec::with_capacity(heads);
    for h in 0..heads {
        let qs = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let ks = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vs = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
        let scores = tape.matmul_nt(qs, ks)?;
        let scaled = tape.affine(scores, scale, F::zero());
        let probs = tape.softmax_rows(scaled, F::one(), causal)?;
        ctx_heads.push(tape.matmul(probs, vs)?);
    }
    let ctx = tape.concat_cols(&ctx_heads)?;
    let attn_out = moe_linear(tape, ctx, lw.wo, site0 + 3, moe)?;
    let x = tape.add(x, attn_out)?;

    let xn2 = tape.layer_norm(x, lw.ln2_g, lw.ln2_b, F::real(LN_EPS))?;
    let a = moe_linear(tape, xn2, lw.ff1, site0 + 4, moe)?;
    let g = tape.gelu(a);
    let ff_out = moe_linear(tape, g, lw.ff2, site0 + 5, moe)?;
    tape.add(x, ff_out)
}
