//! The ten persona experts: low-rank adapters per adapted site, expert
//! embeddings for routing, and the mixture math inside each linear map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::lm::model::{adapted_sites, BaseModel, ModelConfig};
use crate::pole::{TraitPole, NUM_POLES};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0 }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidParameter {
                name: "lora.rank",
                details: "rank must be positive".into(),
            });
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidParameter {
                name: "lora.alpha",
                details: format!("alpha must be positive, got {}", self.alpha),
            });
        }
        Ok(())
    }

    /// ΔW scaling factor alpha/r.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// A rank-r update ΔW = (alpha/r)·B·A for one d×k host matrix.
/// B is d×r and zero-initialized; A is r×k and Gaussian, so ΔW = 0 at init.
#[derive(Clone, Debug)]
pub struct LoraAdapter<F: Real> {
    pub b: Tensor<F>,
    pub a: Tensor<F>,
    pub rank: usize,
    pub alpha: f64,
}

impl<F: Real> LoraAdapter<F> {
    pub fn init(d: usize, k: usize, cfg: &LoraConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.rank > d.min(k) / 2 {
            return Err(Error::InvalidParameter {
                name: "lora.rank",
                details: format!("rank {} too large for a {}x{} site (limit {})", cfg.rank, d, k, d.min(k) / 2),
            });
        }
        let dist = Normal::new(0.0f64, 0.02).expect("valid normal");
        let a_data: Vec<F> = (0..cfg.rank * k).map(|_| F::real(dist.sample(rng))).collect();
        Ok(Self {
            b: Tensor::zeros(&[d, cfg.rank]),
            a: Tensor::new(vec![cfg.rank, k], a_data)?,
            rank: cfg.rank,
            alpha: cfg.alpha,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Materialize ΔW = (alpha/r)·B·A.
    pub fn delta(&self) -> Result<Tensor<F>> {
        let (d, r) = self.b.dims2();
        let (r2, k) = self.a.dims2();
        if r != r2 {
            return Err(Error::Shape {
                op: "lora_delta",
                details: format!("B is {}x{} but A is {}x{}", d, r, r2, k),
            });
        }
        let s = F::real(self.scale());
        let mut out = vec![F::zero(); d * k];
        for i in 0..d {
            for p in 0..r {
                let bip = self.b.data()[i * r + p];
                if bip == F::zero() {
                    continue;
                }
                let arow = &self.a.data()[p * k..(p + 1) * k];
                let orow = &mut out[i * k..(i + 1) * k];
                for (o, &av) in orow.iter_mut().zip(arow) {
                    *o += s * bip * av;
                }
            }
        }
        Tensor::new(vec![d, k], out)
    }
}

/// One expert: a pole label, one adapter per adapted site (layer-major
/// order from `adapted_sites`), and its routing embedding e_i.
#[derive(Clone, Debug)]
pub struct PersonaExpert<F: Real> {
    pub pole: TraitPole,
    pub adapters: Vec<LoraAdapter<F>>,
    pub embedding: Tensor<F>,
}

/// All ten experts in canonical pole order.
#[derive(Clone, Debug)]
pub struct ExpertSet<F: Real> {
    pub lora: LoraConfig,
    pub embed_dim: usize,
    pub experts: Vec<PersonaExpert<F>>,
}

impl<F: Real> ExpertSet<F> {
    /// Deterministic init: B zero, A Gaussian (std 0.02), e_i unit-norm with
    /// pairwise |cos| < 0.8 enforced by rejection sampling.
    pub fn init(model_cfg: &ModelConfig, lora: LoraConfig, embed_dim: usize, seed: u64) -> Result<Self> {
        lora.validate()?;
        if embed_dim == 0 {
            return Err(Error::Config("expert embedding width must be positive".into()));
        }
        let sites = adapted_sites(model_cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut experts = Vec::with_capacity(NUM_POLES);
        let mut embeddings: Vec<Vec<F>> = Vec::with_capacity(NUM_POLES);
        for &pole in &TraitPole::ALL {
            let adapters = sites
                .iter()
                .map(|s| LoraAdapter::init(s.rows, s.cols, &lora, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let embedding = sample_embedding(embed_dim, &embeddings, &mut rng)?;
            embeddings.push(embedding.clone());
            experts.push(PersonaExpert {
                pole,
                adapters,
                embedding: Tensor::vector(embedding),
            });
        }
        Ok(Self { lora, embed_dim, experts })
    }

    /// Bind adapters onto a tape. `needed[i]` skips experts a constant
    /// mixture never touches; `trainable[i]` marks expert i's adapters as
    /// gradient targets.
    pub fn bind(&self, tape: &mut Tape<F>, needed: &[bool; NUM_POLES], trainable: &[bool; NUM_POLES]) -> BoundExperts<F> {
        let experts = self
            .experts
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                if !needed[i] {
                    return None;
                }
                Some(BoundExpert {
                    sites: ex
                        .adapters
                        .iter()
                        .map(|ad| SiteVars {
                            b: tape.leaf(ad.b.clone(), trainable[i]),
                            a: tape.leaf(ad.a.clone(), trainable[i]),
                        })
                        .collect(),
                })
            })
            .collect();
        BoundExperts {
            experts,
            scale: F::real(self.lora.scale()),
        }
    }

    /// Expert embeddings as plain vectors (for routing outside a tape).
    pub fn embedding(&self, i: usize) -> &Tensor<F> {
        &self.experts[i].embedding
    }

    /// Bind every expert embedding as a tape leaf, canonical order.
    pub fn bind_embeddings(&self, tape: &mut Tape<F>, trainable: bool) -> Vec<Var> {
        self.experts
            .iter()
            .map(|ex| tape.leaf(ex.embedding.clone(), trainable))
            .collect()
    }
}

fn sample_embedding<F: Real>(dim: usize, existing: &[Vec<F>], rng: &mut ChaCha8Rng) -> Result<Vec<F>> {
    let dist = Normal::new(0.0f64, 1.0).expect("valid normal");
    for _ in 0..10_000 {
        let mut v: Vec<F> = (0..dim).map(|_| F::real(dist.sample(rng))).collect();
        let norm = v.iter().map(|&x| x * x).sum::<F>().sqrt();
        if norm < F::real(1e-6) {
            continue;
        }
        for x in &mut v {
            *x = *x / norm;
        }
        let separated = existing.iter().all(|e| {
            let cos: F = e.iter().zip(&v).map(|(&a, &b)| a * b).sum();
            cos.abs() < F::real(0.8)
        });
        if separated {
            return Ok(v);
        }
    }
    Err(Error::DegenerateInput {
        op: "init_experts",
        details: "could not sample a separated expert embedding".into(),
    })
}

/// Simplex mixture weights over the ten experts.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterOutput<F: Real> {
    w: [F; NUM_POLES],
}

impl<F: Real> RouterOutput<F> {
    pub fn new(w: [F; NUM_POLES]) -> Result<Self> {
        let tol = F::real(1e-6);
        if w.iter().any(|&x| x < -tol || x > F::one() + tol) {
            return Err(Error::InvalidInput(format!("mixture weight outside [0,1]: {:?}", w)));
        }
        let sum: F = w.iter().copied().sum();
        if (sum - F::one()).abs() > tol {
            return Err(Error::InvalidInput(format!("mixture weights sum to {}, expected 1", sum)));
        }
        Ok(Self { w })
    }

    pub fn one_hot(i: usize) -> Self {
        debug_assert!(i < NUM_POLES);
        let mut w = [F::zero(); NUM_POLES];
        w[i] = F::one();
        Self { w }
    }

    pub fn uniform() -> Self {
        Self {
            w: [F::real(1.0 / NUM_POLES as f64); NUM_POLES],
        }
    }

    pub fn weights(&self) -> &[F; NUM_POLES] {
        &self.w
    }

    /// Indices of the k largest weights, ties broken toward lower index.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..NUM_POLES).collect();
        idx.sort_by(|&a, &b| self.w[b].partial_cmp(&self.w[a]).expect("finite weights").then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }

    pub fn argmax(&self) -> usize {
        self.top_k(1)[0]
    }

    pub fn as_f64(&self) -> [f64; NUM_POLES] {
        let mut out = [0.0; NUM_POLES];
        for (o, &w) in out.iter_mut().zip(&self.w) {
            *o = w.as_f64();
        }
        out
    }
}

/// Adapter tape handles for one expert, indexed by site.
pub struct SiteVars {
    pub b: Var,
    pub a: Var,
}

pub struct BoundExpert {
    pub sites: Vec<SiteVars>,
}

pub struct BoundExperts<F: Real> {
    pub experts: Vec<Option<BoundExpert>>,
    pub scale: F,
}

/// Mixture weights as either fixed constants (stages 0–2, inference with a
/// frozen router) or a live tape vector the joint stage differentiates
/// through.
pub enum TapeMixture<F: Real> {
    Const(RouterOutput<F>),
    Vars(Var),
}

impl<F: Real> TapeMixture<F> {
    /// Which experts a forward pass under this mixture touches.
    pub fn needed(&self) -> [bool; NUM_POLES] {
        match self {
            TapeMixture::Const(ro) => {
                let mut n = [false; NUM_POLES];
                for (ni, &wi) in n.iter_mut().zip(ro.weights()) {
                    *ni = wi != F::zero();
                }
                n
            }
            TapeMixture::Vars(_) => [true; NUM_POLES],
        }
    }
}

/// Everything `moe_linear` needs besides the host weight.
pub struct MoeCtx<'a, F: Real> {
    pub experts: &'a BoundExperts<F>,
    pub mixture: &'a TapeMixture<F>,
}

/// Adapted linear map: y = x·W + Σ_i w_i·(alpha/r)·(x·B_i)·A_i.
/// Mixing adapter outputs equals mixing ΔW matrices by linearity.
pub fn moe_linear<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    w: Var,
    site: usize,
    moe: Option<&MoeCtx<'_, F>>,
) -> Result<Var> {
    let mut y = tape.matmul(x, w)?;
    let Some(ctx) = moe else {
        return Ok(y);
    };
    match ctx.mixture {
        TapeMixture::Const(ro) => {
            for (i, &wi) in ro.weights().iter().enumerate() {
                if wi == F::zero() {
                    continue;
                }
                let be = ctx.experts.experts[i]
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput(format!("expert {} active but not bound", i)))?;
                let xb = tape.matmul(x, be.sites[site].b)?;
                let bxa = tape.matmul(xb, be.sites[site].a)?;
                let term = tape.affine(bxa, ctx.experts.scale * wi, F::zero());
                y = tape.add(y, term)?;
            }
        }
        TapeMixture::Vars(wv) => {
            for i in 0..NUM_POLES {
                let be = ctx.experts.experts[i]
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput(format!("expert {} active but not bound", i)))?;
                let xb = tape.matmul(x, be.sites[site].b)?;
                let bxa = tape.matmul(xb, be.sites[site].a)?;
                let scaled = tape.affine(bxa, ctx.experts.scale, F::zero());
                let wi = tape.index_scalar(*wv, i)?;
                let term = tape.mul_scalar(scaled, wi)?;
                y = tape.add(y, term)?;
            }
        }
    }
    Ok(y)
}

/// W + ΔW_i at every adapted site; the input model is left untouched.
pub fn merge_expert<F: Real>(base: &BaseModel<F>, expert: &PersonaExpert<F>) -> Result<BaseModel<F>> {
    let sites = adapted_sites(&base.cfg);
    if expert.adapters.len() != sites.len() {
        return Err(Error::Shape {
            op: "merge_expert",
            details: format!("{} adapters for {} sites", expert.adapters.len(), sites.len()),
        });
    }
    let mut merged = base.clone();
    for (si, adapter) in expert.adapters.iter().enumerate() {
        let delta = adapter.delta()?;
        let host = merged.site_weight_mut(si);
        if host.shape() != delta.shape() {
            return Err(Error::Shape {
                op: "merge_expert",
                details: format!(
                    "site {} host {:?} vs delta {:?}",
                    sites[si].name,
                    host.shape(),
                    delta.shape()
                ),
            });
        }
        for (hv, &dv) in host.data_mut().iter_mut().zip(delta.data()) {
            *hv += dv;
        }
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_b_means_zero_delta() {
        let cfg = LoraConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ad = LoraAdapter::<f64>::init(64, 64, &cfg, &mut rng).unwrap();
        let delta = ad.delta().unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_is_alpha_over_rank() {
        let cfg = LoraConfig { rank: 8, alpha: 16.0 };
        assert_eq!(cfg.scale(), 2.0);
    }

    #[test]
    fn rank_one_outer_product() {
        // B = [1; 0], A = [0, 3] → ΔW = alpha·[[0,3],[0,0]] at r=1
        let ad = LoraAdapter::<f64> {
            b: Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
            a: Tensor::matrix(1, 2, vec![0.0, 3.0]).unwrap(),
            rank: 1,
            alpha: 4.0,
        };
        let d = ad.delta().unwrap();
        assert_eq!(d.data(), &[0.0, 12.0, 0.0, 0.0]);
    }

    #[test]
    fn rank_guard_rejects_oversized() {
        let cfg = LoraConfig { rank: 40, alpha: 16.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(LoraAdapter::<f32>::init(64, 64, &cfg, &mut rng).is_err());
    }

    #[test]
    fn expert_init_is_deterministic_and_separated() {
        let mc = ModelConfig::default();
        let a = ExpertSet::<f32>::init(&mc, LoraConfig::default(), 64, 7).unwrap();
        let b = ExpertSet::<f32>::init(&mc, LoraConfig::default(), 64, 7).unwrap();
        assert_eq!(a.experts.len(), NUM_POLES);
        for i in 0..NUM_POLES {
            assert_eq!(a.experts[i].pole, TraitPole::ALL[i]);
            assert_eq!(a.experts[i].embedding.data(), b.experts[i].embedding.data());
            for (x, y) in a.experts[i].adapters.iter().zip(&b.experts[i].adapters) {
                assert_eq!(x.a.data(), y.a.data());
                assert_eq!(x.b.data(), y.b.data());
            }
            let norm = a.experts[i].embedding.l2_norm();
            assert!((norm - 1.0).abs() < 1e-5);
            for j in 0..i {
                let cos: f32 = a.experts[i]
                    .embedding
                    .data()
                    .iter()
                    .zip(a.experts[j].embedding.data())
                    .map(|(&x, &y)| x * y)
                    .sum();
                assert!(cos.abs() < 0.8, "experts {} and {} too aligned: {}", i, j, cos);
            }
        }
    }

    #[test]
    fn router_output_validates_simplex() {
        assert!(RouterOutput::<f64>::new([0.1; 10]).is_ok());
        assert!(RouterOutput::<f64>::new([0.2; 10]).is_err());
        let mut w = [0.0; 10];
        w[0] = 1.2;
        w[1] = -0.2;
        assert!(RouterOutput::<f64>::new(w).is_err());
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        let ro = RouterOutput::<f64>::new([0.1; 10]).unwrap();
        assert_eq!(ro.top_k(3), vec![0, 1, 2]);
        let mut w = [0.4 / 7.0; 10];
        w[4] = 0.2;
        w[7] = 0.2;
        w[9] = 0.2;
        let ro = RouterOutput::<f64>::new(w).unwrap();
        assert_eq!(ro.top_k(3), vec![4, 7, 9]);
        assert_eq!(ro.argmax(), 4);
    }
}
