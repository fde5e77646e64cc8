//! Situation-aware routing: a small trainable encoder maps a query to a
//! persona embedding h, and mixture weights follow a temperature softmax
//! over cos(h, e_i). Includes the contrastive and trait-consistency losses
//! the router trains on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::experts::{ExpertSet, RouterOutput};
use crate::lm::model::{block_forward, BoundLayer, LayerWeights, LN_EPS};
use crate::pole::{TraitActivation, NUM_POLES};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub tau: f64,
    pub margin: f64,
    pub beta: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            margin: 0.2,
            beta: 1.0,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter {
                name: "router.tau",
                details: format!("temperature must be positive, got {}", self.tau),
            });
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(Error::InvalidParameter {
                name: "router.margin",
                details: format!("margin must lie in (0,1), got {}", self.margin),
            });
        }
        if !self.beta.is_finite() {
            return Err(Error::InvalidParameter {
                name: "router.beta",
                details: "beta must be finite".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub t_max: usize,
    pub d_ff: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab: crate::lm::tokenizer::VOCAB_SIZE,
            width: 64,
            layers: 2,
            heads: 4,
            t_max: 256,
            d_ff: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.width == 0 || self.layers == 0 || self.heads == 0 || self.t_max == 0 || self.d_ff == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Non-causal byte transformer with mean pooling; the trainable f_θ.
#[derive(Clone, Debug)]
pub struct PersonaEncoder<F: Real> {
    pub cfg: EncoderConfig,
    pub tok_emb: Tensor<F>,
    pub pos_emb: Tensor<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub lnf_g: Tensor<F>,
    pub lnf_b: Tensor<F>,
}

pub struct BoundEncoder {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<BoundLayer>,
    pub lnf_g: Var,
    pub lnf_b: Var,
}

impl<F: Real> PersonaEncoder<F> {
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0f64, 0.02).expect("valid normal");
        let mat = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
            let data: Vec<F> = (0..r * c).map(|_| F::real(dist.sample(rng))).collect();
            Tensor::new(vec![r, c], data).expect("consistent shape")
        };
        let tok_emb = mat(cfg.vocab, cfg.width, &mut rng);
        let pos_emb = mat(cfg.t_max, cfg.width, &mut rng);
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights::init(cfg.width, cfg.d_ff, &mut rng))
            .collect();
        Ok(Self {
            lnf_g: Tensor::vector(vec![F::one(); cfg.width]),
            lnf_b: Tensor::vector(vec![F::zero(); cfg.width]),
            cfg,
            tok_emb,
            pos_emb,
            layers,
        })
    }

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
        out
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundEncoder {
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
        BoundEncoder {
            tok_emb: tape.leaf(self.tok_emb.clone(), trainable),
            pos_emb: tape.leaf(self.pos_emb.clone(), trainable),
            layers: self.layers.iter().map(|lw| bind_layer(tape, lw)).collect(),
            lnf_g: tape.leaf(self.lnf_g.clone(), trainable),
            lnf_b: tape.leaf(self.lnf_b.clone(), trainable),
        }
    }

    /// h = mean over positions of the final hidden states; length = width.
    pub fn encode_on_tape(&self, tape: &mut Tape<F>, bound: &BoundEncoder, ids: &[u32]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("encode_persona on empty query".into()));
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
        for lw in &bound.layers {
            x = block_forward(tape, x, lw, self.cfg.heads, false, 0, None)?;
        }
        let normed = tape.layer_norm(x, bound.lnf_g, bound.lnf_b, F::real(LN_EPS))?;
        tape.mean_rows(normed)
    }

    /// Convenience non-trainable encode on a private tape.
    pub fn encode(&self, ids: &[u32]) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let h = self.encode_on_tape(&mut tape, &bound, ids)?;
        Ok(tape.value(h).clone())
    }
}

/// w_i = exp(cos(h,e_i)/τ) / Σ_j exp(cos(h,e_j)/τ), differentiable in h and
/// every e_i.
pub fn route_on_tape<F: Real>(tape: &mut Tape<F>, h: Var, embeds: &[Var], tau: F) -> Result<Var> {
    if embeds.len() != NUM_POLES {
        return Err(Error::InvalidInput(format!(
            "routing needs {} expert embeddings, got {}",
            NUM_POLES,
            embeds.len()
        )));
    }
    let mut sims = Vec::with_capacity(NUM_POLES);
    for &e in embeds {
        sims.push(tape.cosine_similarity(h, e)?);
    }
    let stacked = tape.stack_scalars(&sims)?;
    tape.softmax_with_temperature(stacked, tau)
}

/// Routing with plain tensors, for inference and evaluation.
pub fn route<F: Real>(h: &Tensor<F>, experts: &ExpertSet<F>, rc: &RouterConfig) -> Result<RouterOutput<F>> {
    rc.validate()?;
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone(), false);
    let evs: Vec<Var> = experts
        .experts
        .iter()
        .map(|ex| tape.leaf(ex.embedding.clone(), false))
        .collect();
    let w = route_on_tape(&mut tape, hv, &evs, F::real(rc.tau))?;
    let data = tape.value(w).data();
    let mut arr = [F::zero(); NUM_POLES];
    arr.copy_from_slice(data);
    RouterOutput::new(arr)
}

/// Batch-mean contrastive alignment loss:
/// (1/B)·Σ_i [ Σ_{j∈P_i} (1−s_ij)² + Σ_{j∉P_i} max(0, s_ij−m)² ],
/// s_ij = cos(h_i, e_j), P_i the active poles of record i.
pub fn contrastive_loss_on_tape<F: Real>(
    tape: &mut Tape<F>,
    batch_h: &[Var],
    embeds: &[Var],
    p_batch: &[TraitActivation],
    margin: F,
) -> Result<Var> {
    if batch_h.is_empty() {
        return Err(Error::InvalidInput("contrastive loss on empty batch".into()));
    }
    if batch_h.len() != p_batch.len() {
        return Err(Error::InvalidInput(format!(
            "{} embeddings vs {} activation vectors",
            batch_h.len(),
            p_batch.len()
        )));
    }
    for (i, p) in p_batch.iter().enumerate() {
        if p.is_zero() {
            return Err(Error::InvalidInput(format!(
                "record {} in contrastive batch has all-zero activation",
                i
            )));
        }
    }
    let mut terms = Vec::with_capacity(batch_h.len() * NUM_POLES);
    for (&h, p) in batch_h.iter().zip(p_batch) {
        for (j, &e) in embeds.iter().enumerate() {
            let s = tape.cosine_similarity(h, e)?;
            let term = if p.bits()[j] == 1 {
                let one_minus = tape.affine(s, -F::one(), F::one());
                tape.square(one_minus)
            } else {
                let shifted = tape.affine(s, F::one(), -margin);
                let hinge = tape.relu(shifted);
                tape.square(hinge)
            };
            terms.push(term);
        }
    }
    let total = tape.add_n(&terms)?;
    Ok(tape.affine(total, F::one() / F::real(batch_h.len() as f64), F::zero()))
}

/// Mean pairwise dissimilarity (2/(B(B−1)))·Σ_{i<j} (1 − cos(h_i, h_j)).
/// Callers must supply a same-p batch; that precondition lives upstream.
pub fn trait_consistency_loss_on_tape<F: Real>(tape: &mut Tape<F>, batch_h: &[Var]) -> Result<Var> {
    let b = batch_h.len();
    if b < 2 {
        return Err(Error::InvalidInput(format!(
            "trait consistency needs a batch of at least 2, got {}",
            b
        )));
    }
    let mut terms = Vec::with_capacity(b * (b - 1) / 2);
    for i in 0..b {
        for j in (i + 1)..b {
            let c = tape.cosine_similarity(batch_h[i], batch_h[j])?;
            terms.push(tape.affine(c, -F::one(), F::one()));
        }
    }
    let total = tape.add_n(&terms)?;
    let scale = F::real(2.0 / (b as f64 * (b as f64 - 1.0)));
    Ok(tape.affine(total, scale, F::zero()))
}

/// L_router = L_contrastive + β·L_trait.
pub fn router_loss_on_tape<F: Real>(tape: &mut Tape<F>, contrastive: Var, trait_loss: Var, beta: F) -> Result<Var> {
    let scaled = tape.affine(trait_loss, beta, F::zero());
    tape.add(contrastive, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pole::TraitPole;

    fn axis(dim: usize, i: usize) -> Tensor<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Tensor::vector(v)
    }

    fn axis_embeds(tape: &mut Tape<f64>, dim: usize) -> Vec<Var> {
        (0..NUM_POLES).map(|i| tape.leaf(axis(dim, i), false)).collect()
    }

    #[test]
    fn route_uniform_when_orthogonal() {
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(axis(12, 11), false);
        let evs = axis_embeds(&mut tape, 12);
        let w = route_on_tape(&mut tape, h, &evs, 1.0).unwrap();
        for &wi in tape.value(w).data() {
            assert!((wi - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn route_hand_value_single_alignment() {
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(axis(12, 0), false);
        let evs = axis_embeds(&mut tape, 12);
        let w = route_on_tape(&mut tape, h, &evs, 1.0).unwrap();
        // sims (1,0,...,0): w_0 = e / (e + 9) = 0.2319693167…
        let expect = 1.0f64.exp() / (1.0f64.exp() + 9.0);
        assert!((tape.value(w).data()[0] - expect).abs() < 1e-12);
        assert!((tape.value(w).data()[0] - 0.231_969_316_7).abs() < 1e-9);
    }

    #[test]
    fn route_rejects_zero_embedding() {
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(Tensor::vector(vec![0.0; 12]), false);
        let evs = axis_embeds(&mut tape, 12);
        assert!(matches!(
            route_on_tape(&mut tape, h, &evs, 1.0),
            Err(Error::DegenerateInput { .. })
        ));
    }

    #[test]
    fn contrastive_hand_value_is_one() {
        // one positive at s=0 contributes (1-0)^2; nine negatives at s=0 sit
        // below the margin and contribute nothing
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(axis(12, 10), false);
        let evs = axis_embeds(&mut tape, 12);
        let p = TraitActivation::single(TraitPole::HighO);
        let loss = contrastive_loss_on_tape(&mut tape, &[h], &evs, &[p], 0.2).unwrap();
        assert!((tape.value(loss).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_zero_on_fixed_point() {
        // positive at s=1, negatives orthogonal
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(axis(12, 0), false);
        let evs = axis_embeds(&mut tape, 12);
        let p = TraitActivation::single(TraitPole::HighO);
        let loss = contrastive_loss_on_tape(&mut tape, &[h], &evs, &[p], 0.2).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn contrastive_rejects_zero_p() {
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(axis(12, 0), false);
        let evs = axis_embeds(&mut tape, 12);
        let err = contrastive_loss_on_tape(&mut tape, &[h], &evs, &[TraitActivation::zero()], 0.2);
        assert!(err.is_err());
    }

    #[test]
    fn trait_loss_hand_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(axis(8, 0), false);
        let b = tape.leaf(axis(8, 0), false);
        let c = tape.leaf(axis(8, 1), false);
        // identical pair
        let l = trait_consistency_loss_on_tape(&mut tape, &[a, b]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
        // orthogonal pair
        let l2 = trait_consistency_loss_on_tape(&mut tape, &[a, c]).unwrap();
        assert!((tape.value(l2).item() - 1.0).abs() < 1e-12);
        // cosines (1, 0, 0) → (2/6)·(0+1+1) = 2/3
        let l3 = trait_consistency_loss_on_tape(&mut tape, &[a, b, c]).unwrap();
        assert!((tape.value(l3).item() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn trait_loss_needs_two() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(axis(8, 0), false);
        assert!(trait_consistency_loss_on_tape(&mut tape, &[a]).is_err());
    }

    #[test]
    fn router_loss_combines_linearly() {
        let mut tape = Tape::<f64>::new();
        let c = tape.leaf(Tensor::scalar(1.0), false);
        let t = tape.leaf(Tensor::scalar(0.5), false);
        let l = router_loss_on_tape(&mut tape, c, t, 1.0).unwrap();
        assert!((tape.value(l).item() - 1.5).abs() < 1e-12);
        let l0 = {
            let z1 = tape.leaf(Tensor::scalar(0.0), false);
            let z2 = tape.leaf(Tensor::scalar(0.0), false);
            router_loss_on_tape(&mut tape, z1, z2, 1.0).unwrap()
        };
        assert_eq!(tape.value(l0).item(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(RouterConfig::default().validate().is_ok());
        assert!(RouterConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(RouterConfig { margin: 1.0, ..Default::default() }.validate().is_err());
        assert!(RouterConfig { margin: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn encoder_is_deterministic() {
        let enc = PersonaEncoder::<f32>::init(EncoderConfig::default(), 11).unwrap();
        let ids: Vec<u32> = "hello router".bytes().map(|b| b as u32).collect();
        let h1 = enc.encode(&ids).unwrap();
        let h2 = enc.encode(&ids).unwrap();
        assert_eq!(h1.data(), h2.data());
        assert_eq!(h1.shape(), &[64]);
        assert!(h1.all_finite());
    }

    #[test]
    fn encoder_rejects_empty() {
        let enc = PersonaEncoder::<f32>::init(EncoderConfig::default(), 11).unwrap();
        assert!(enc.encode(&[]).is_err());
    }
}
