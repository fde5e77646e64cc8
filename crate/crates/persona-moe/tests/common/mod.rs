//! Shared helpers for the integration suites: finite-difference runners
//! for every loss family and random micro-instance builders.
//!
//! Every instance is drawn in f64 and cast, so the f32 and f64 twins of a
//! seed hold identical values up to rounding. The f64 sweeps probe every
//! coordinate. The f32 sweeps probe only coordinates where a central
//! difference at the f32 step size is a valid measurement, which requires
//! two things. First, |gradient| must clear a floor: a step of 2ε moves the
//! loss by |g|·2ε, and once that is comparable to the rounding noise of one
//! forward pass the quotient measures ulp behaviour, not the chain rule.
//! Second, the loss must be locally linear at that step: an f64 secant at
//! the same ε that already deviates from the true gradient proves the
//! deviation is curvature (truncation error), which no arithmetic can
//! remove. Both screens use only f64 quantities, so they cannot mask an
//! f32 gradient bug; every excluded coordinate is still fully verified by
//! the f64 sweep at its hundred-times-smaller step.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use persona_moe::autodiff::{Real, Reduction, Tape, Tensor, Var};
use persona_moe::error::Result;
use persona_moe::experts::{ExpertSet, LoraConfig, MoeCtx, TapeMixture};
use persona_moe::lm::{BaseModel, ModelConfig};
use persona_moe::pole::{TraitActivation, TraitPole, NUM_POLES};
use persona_moe::router::{
    contrastive_loss_on_tape, route_on_tape, router_loss_on_tape, trait_consistency_loss_on_tape,
    EncoderConfig, PersonaEncoder,
};
use persona_moe::train::data::{pack_pair, PackedSeq};

/// How a sweep steps and selects coordinates.
#[derive(Clone, Copy)]
pub struct SweepMode {
    /// Central-difference step.
    pub eps: f64,
    /// Minimum |gradient| (from the f64 twin) for a coordinate to be probed.
    pub floor: f64,
    /// If set, a coordinate is also skipped when the f64 secant at this step
    /// already deviates from the true gradient by more than `SECANT_SCREEN`.
    pub screen_eps: Option<f64>,
}

/// f64 sweeps of the O(1)-magnitude loss families.
pub const F64_SMALL: SweepMode = SweepMode { eps: 1e-5, floor: 1e-5, screen_eps: None };
/// f32 sweeps of the O(1)-magnitude loss families.
pub const F32_SMALL: SweepMode = SweepMode { eps: 1e-2, floor: 1e-1, screen_eps: Some(1e-2) };
/// f32 sweep of the routing softmax, whose gradients are an order smaller
/// (weights sum to one, so per-coordinate sensitivities sit near 1e-2).
pub const F32_ROUTING: SweepMode = SweepMode { eps: 1e-2, floor: 1e-2, screen_eps: Some(1e-2) };
/// f64 sweep of the joint loss.
pub const F64_JOINT: SweepMode = SweepMode { eps: 1e-5, floor: 1e-4, screen_eps: None };
/// f32 sweep of the joint loss, whose magnitude is the summed response
/// cross-entropy (tens of nats on the micro model).
pub const F32_JOINT: SweepMode = SweepMode { eps: 1e-2, floor: 1.0, screen_eps: Some(1e-2) };

/// Curvature screen: a quarter of the f32 tolerance, leaving the rest of
/// the budget for genuine f32 rounding.
const SECANT_SCREEN: f64 = 2.5e-4;

pub fn randn_tensor<F: Real>(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| F::real(rng.gen_range(-1.0..1.0) * scale))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

fn random_activation(rng: &mut ChaCha8Rng) -> TraitActivation {
    loop {
        let k = rng.gen_range(1..=3);
        let mut poles: Vec<TraitPole> = Vec::new();
        while poles.len() < k {
            let p = TraitPole::ALL[rng.gen_range(0..NUM_POLES)];
            if !poles.contains(&p) && !poles.iter().any(|q| q.trait_index() == p.trait_index()) {
                poles.push(p);
            }
        }
        poles.sort_by_key(|p| p.index());
        if let Ok(p) = TraitActivation::from_poles(&poles) {
            return p;
        }
    }
}

/// Analytic gradients of `build` at `inputs`, one tensor per leaf.
fn analytic_grads<F: Real>(
    inputs: &[Tensor<F>],
    build: &impl Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
) -> Vec<Tensor<F>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&mut tape, &vars).expect("loss builds");
    tape.backward(root).expect("backward");
    vars.iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        })
        .collect()
}

fn eval_loss<F: Real>(
    inputs: &[Tensor<F>],
    build: &impl Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let root = build(&mut tape, &vars).expect("loss builds");
    tape.value(root).item().as_f64()
}

pub fn cast_tensor<F: Real>(t: &Tensor<f64>) -> Tensor<F> {
    let data: Vec<F> = t.data().iter().map(|&v| F::real(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Central-difference sweep over the selected coordinates; returns the worst
/// |analytic − numeric| / (|numeric| + 1e-8).
fn sweep_coords<F: Real>(
    inputs: &[Tensor<F>],
    build: &impl Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
    grads: &[Tensor<F>],
    coords: &[(usize, usize)],
    eps: f64,
) -> f64 {
    let mut probe: Vec<Tensor<F>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for &(li, ci) in coords {
        let orig = probe[li].data()[ci];
        probe[li].data_mut()[ci] = orig + F::real(eps);
        let f_plus = eval_loss(&probe, build);
        probe[li].data_mut()[ci] = orig - F::real(eps);
        let f_minus = eval_loss(&probe, build);
        probe[li].data_mut()[ci] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * eps);
        let a = grads[li].data()[ci].as_f64();
        let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Central difference of the f64 loss along one coordinate at step `eps`.
fn secant64(
    inputs: &[Tensor<f64>],
    build: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    li: usize,
    ci: usize,
    eps: f64,
) -> f64 {
    let mut probe = inputs.to_vec();
    let orig = probe[li].data()[ci];
    probe[li].data_mut()[ci] = orig + eps;
    let f_plus = eval_loss(&probe, build);
    probe[li].data_mut()[ci] = orig - eps;
    let f_minus = eval_loss(&probe, build);
    (f_plus - f_minus) / (2.0 * eps)
}

/// Runs one instance in precision F: selects coordinates per `mode` using
/// the f64 twin, then sweeps them with central differences in F. Returns
/// the worst relative error and how many coordinates were probed.
fn run_family<F: Real>(
    inputs64: &[Tensor<f64>],
    build64: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    build_f: &impl Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
    mode: SweepMode,
) -> (f64, usize) {
    let g64 = analytic_grads(inputs64, build64);
    let mut coords = Vec::new();
    for (li, g) in g64.iter().enumerate() {
        for ci in 0..g.numel() {
            let a = g.data()[ci];
            if a.abs() < mode.floor {
                continue;
            }
            if let Some(eps) = mode.screen_eps {
                let n = secant64(inputs64, build64, li, ci, eps);
                if (a - n).abs() / (n.abs() + 1e-8) > SECANT_SCREEN {
                    continue;
                }
            }
            coords.push((li, ci));
        }
    }
    let inputs_f: Vec<Tensor<F>> = inputs64.iter().map(cast_tensor).collect();
    let grads_f = analytic_grads(&inputs_f, build_f);
    (
        sweep_coords(&inputs_f, build_f, &grads_f, &coords, mode.eps),
        coords.len(),
    )
}

/// A floor that screened out nearly everything would make the sweep
/// vacuous; demand a healthy number of probed coordinates per instance.
fn assert_coverage(probed: usize, instances: usize) {
    assert!(
        probed >= instances * 3,
        "resolvability screens left only {probed} probed coordinates over {instances} instances"
    );
}

fn routing_builder<F: Real>(
    tau: f64,
    probe: Tensor<f64>,
) -> impl Fn(&mut Tape<F>, &[Var]) -> Result<Var> {
    move |tape, vars| {
        let w = route_on_tape(tape, vars[0], &vars[1..], F::real(tau))?;
        let c = tape.constant(cast_tensor::<F>(&probe));
        let scored = tape.mul(w, c)?;
        Ok(tape.sum_all(scored))
    }
}

/// Worst relative FD error of the routing softmax over random
/// (h, {e_i}, tau) draws; the scalar root is a fixed random projection of
/// the weight vector. Coordinates with |gradient| below `floor` are skipped.
pub fn fd_routing_worst<F: Real>(instances: usize, seed: u64, mode: SweepMode) -> f64 {
    let mut worst = 0.0f64;
    let mut probed = 0usize;
    for k in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let dim = 6;
        let tau = rng.gen_range(0.4..2.5);
        let probe: Tensor<f64> = randn_tensor(&[NUM_POLES], &mut rng, 1.0);
        let mut inputs = vec![randn_tensor::<f64>(&[dim], &mut rng, 1.0)];
        for _ in 0..NUM_POLES {
            inputs.push(randn_tensor::<f64>(&[dim], &mut rng, 1.0));
        }
        let b64 = routing_builder::<f64>(tau, probe.clone());
        let bf = routing_builder::<F>(tau, probe);
        let (w, n) = run_family(&inputs, &b64, &bf, mode);
        worst = worst.max(w);
        probed += n;
    }
    assert_coverage(probed, instances);
    worst
}

fn contrastive_builder<F: Real>(
    b: usize,
    p: Vec<TraitActivation>,
    margin: f64,
) -> impl Fn(&mut Tape<F>, &[Var]) -> Result<Var> {
    move |tape, vars| contrastive_loss_on_tape(tape, &vars[..b], &vars[b..], &p, F::real(margin))
}

/// Worst relative FD error of the contrastive loss over random batches.
pub fn fd_contrastive_worst<F: Real>(instances: usize, seed: u64, mode: SweepMode) -> f64 {
    let mut worst = 0.0f64;
    let mut probed = 0usize;
    for k in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let dim = 5;
        let b = rng.gen_range(1..=3usize);
        let p: Vec<TraitActivation> = (0..b).map(|_| random_activation(&mut rng)).collect();
        let mut inputs: Vec<Tensor<f64>> =
            (0..b).map(|_| randn_tensor(&[dim], &mut rng, 1.0)).collect();
        for _ in 0..NUM_POLES {
            inputs.push(randn_tensor::<f64>(&[dim], &mut rng, 1.0));
        }
        let b64 = contrastive_builder::<f64>(b, p.clone(), 0.2);
        let bf = contrastive_builder::<F>(b, p, 0.2);
        let (w, n) = run_family(&inputs, &b64, &bf, mode);
        worst = worst.max(w);
        probed += n;
    }
    assert_coverage(probed, instances);
    worst
}

fn trait_builder<F: Real>() -> impl Fn(&mut Tape<F>, &[Var]) -> Result<Var> {
    |tape, vars| trait_consistency_loss_on_tape(tape, vars)
}

/// Worst relative FD error of the trait-consistency loss.
pub fn fd_trait_worst<F: Real>(instances: usize, seed: u64, mode: SweepMode) -> f64 {
    let mut worst = 0.0f64;
    let mut probed = 0usize;
    for k in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let dim = 5;
        let b = rng.gen_range(2..=4usize);
        let inputs: Vec<Tensor<f64>> =
            (0..b).map(|_| randn_tensor(&[dim], &mut rng, 1.0)).collect();
        let (w, n) = run_family(&inputs, &trait_builder::<f64>(), &trait_builder::<F>(), mode);
        worst = worst.max(w);
        probed += n;
    }
    assert_coverage(probed, instances);
    worst
}

fn router_total_builder<F: Real>(
    b: usize,
    p: Vec<TraitActivation>,
    margin: f64,
    beta: f64,
) -> impl Fn(&mut Tape<F>, &[Var]) -> Result<Var> {
    move |tape, vars| {
        let lc = contrastive_loss_on_tape(tape, &vars[..b], &vars[b..], &p, F::real(margin))?;
        let lt = trait_consistency_loss_on_tape(tape, &vars[..b])?;
        router_loss_on_tape(tape, lc, lt, F::real(beta))
    }
}

/// Worst relative FD error of the combined router loss L_c + beta * L_t.
pub fn fd_router_total_worst<F: Real>(instances: usize, seed: u64, mode: SweepMode) -> f64 {
    let mut worst = 0.0f64;
    let mut probed = 0usize;
    for k in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let dim = 5;
        let b = rng.gen_range(2..=3usize);
        let beta = rng.gen_range(0.5..2.0);
        let p: Vec<TraitActivation> = (0..b).map(|_| random_activation(&mut rng)).collect();
        let mut inputs: Vec<Tensor<f64>> =
            (0..b).map(|_| randn_tensor(&[dim], &mut rng, 1.0)).collect();
        for _ in 0..NUM_POLES {
            inputs.push(randn_tensor::<f64>(&[dim], &mut rng, 1.0));
        }
        let b64 = router_total_builder::<f64>(b, p.clone(), 0.2, beta);
        let bf = router_total_builder::<F>(b, p, 0.2, beta);
        let (w, n) = run_family(&inputs, &b64, &bf, mode);
        worst = worst.max(w);
        probed += n;
    }
    assert_coverage(probed, instances);
    worst
}

/// One random micro model plus a two-record batch for joint-loss checks.
pub struct JointInstance<F: Real> {
    pub base: BaseModel<F>,
    pub experts: ExpertSet<F>,
    pub encoder: PersonaEncoder<F>,
    pub seqs: Vec<PackedSeq>,
    pub enc_ids: Vec<Vec<u32>>,
    pub p: Vec<TraitActivation>,
    pub gamma: F,
    pub beta: F,
    pub tau: F,
    pub margin: F,
}

pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        layers: 1,
        heads: 2,
        t_max: 32,
        d_ff: 12,
        ..ModelConfig::default()
    }
}

pub fn micro_encoder_config() -> EncoderConfig {
    EncoderConfig {
        width: 8,
        layers: 1,
        heads: 2,
        t_max: 32,
        d_ff: 12,
        ..EncoderConfig::default()
    }
}

fn random_ascii(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect()
}

pub fn random_joint_instance<F: Real>(seed: u64) -> JointInstance<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mc = micro_model_config();
    let ec = micro_encoder_config();
    let lora = LoraConfig { rank: 2, alpha: 4.0 };
    let base = BaseModel::<F>::init(mc.clone(), seed).expect("base init");
    let mut experts =
        ExpertSet::<F>::init(&mc, lora, ec.width, seed.wrapping_add(1)).expect("experts init");
    // Zero-init B kills the A-gradient; randomize so FD sees both factors.
    for ex in experts.experts.iter_mut() {
        for ad in ex.adapters.iter_mut() {
            for v in ad.b.data_mut() {
                *v = F::real(rng.gen_range(-0.05..0.05));
            }
        }
    }
    let encoder = PersonaEncoder::<F>::init(ec, seed.wrapping_add(2)).expect("encoder init");

    let b = 2usize;
    let mut seqs = Vec::new();
    let mut enc_ids = Vec::new();
    let mut p = Vec::new();
    for _ in 0..b {
        let q = random_ascii(&mut rng, 4, 8);
        let r = random_ascii(&mut rng, 2, 4);
        seqs.push(pack_pair(&q, &r, mc.t_max).expect("pack"));
        enc_ids.push(q.bytes().map(|x| x as u32).collect());
        p.push(random_activation(&mut rng));
    }
    JointInstance {
        base,
        experts,
        encoder,
        seqs,
        enc_ids,
        p,
        gamma: F::real(0.2),
        beta: F::real(1.0),
        tau: F::real(1.0),
        margin: F::real(0.2),
    }
}

/// Flat mutable view over every parameter, in a fixed order mirrored by the
/// gradient harvest inside `joint_loss`.
pub fn joint_params_mut<F: Real>(inst: &mut JointInstance<F>) -> Vec<&mut Tensor<F>> {
    let mut out: Vec<&mut Tensor<F>> = Vec::new();
    for (_, t) in inst.base.entries_mut() {
        out.push(t);
    }
    for ex in inst.experts.experts.iter_mut() {
        for ad in ex.adapters.iter_mut() {
            out.push(&mut ad.b);
            out.push(&mut ad.a);
        }
        out.push(&mut ex.embedding);
    }
    for (_, t) in inst.encoder.entries_mut() {
        out.push(t);
    }
    out
}

/// L_joint = L_lm + gamma * (L_c + beta * L_t) assembled from the public
/// forward pieces; gradients come back aligned with `joint_params_mut`.
pub fn joint_loss<F: Real>(inst: &JointInstance<F>, want_grads: bool) -> (f64, Option<Vec<Tensor<F>>>) {
    let mut tape = Tape::new();
    let bb = inst.base.bind(&mut tape, want_grads);
    let be = inst.experts.bind(&mut tape, &[true; NUM_POLES], &[want_grads; NUM_POLES]);
    let embeds = inst.experts.bind_embeddings(&mut tape, want_grads);
    let benc = inst.encoder.bind(&mut tape, want_grads);

    let mut hs = Vec::new();
    let mut ces = Vec::new();
    for (i, seq) in inst.seqs.iter().enumerate() {
        let h = inst
            .encoder
            .encode_on_tape(&mut tape, &benc, &inst.enc_ids[i])
            .expect("encode");
        hs.push(h);
        let w = route_on_tape(&mut tape, h, &embeds, inst.tau).expect("route");
        let mixture = TapeMixture::Vars(w);
        let ctx = MoeCtx { experts: &be, mixture: &mixture };
        let logits = inst
            .base
            .logits_on_tape(&mut tape, &bb, &seq.input, Some(&ctx), Some((seq.resp_start, seq.resp_end)))
            .expect("logits");
        let ce = tape
            .cross_entropy_lm(logits, &seq.resp_targets(), Reduction::Sum)
            .expect("ce");
        ces.push(ce);
    }
    let summed = tape.add_n(&ces).expect("sum");
    let l_lm = tape.affine(summed, F::real(1.0 / inst.seqs.len() as f64), F::zero());
    let lc = contrastive_loss_on_tape(&mut tape, &hs, &embeds, &inst.p, inst.margin).expect("contrastive");
    let lt = trait_consistency_loss_on_tape(&mut tape, &hs).expect("trait");
    let lr = router_loss_on_tape(&mut tape, lc, lt, inst.beta).expect("router");
    let scaled = tape.affine(lr, inst.gamma, F::zero());
    let loss = tape.add(l_lm, scaled).expect("joint");
    let value = tape.value(loss).item().as_f64();

    if !want_grads {
        return (value, None);
    }
    tape.backward(loss).expect("backward");
    // Same order as joint_params_mut.
    let mut vars: Vec<Var> = Vec::new();
    vars.push(bb.tok_emb);
    vars.push(bb.pos_emb);
    for l in &bb.layers {
        for v in [l.ln1_g, l.ln1_b, l.wq, l.wk, l.wv, l.wo, l.ln2_g, l.ln2_b, l.ff1, l.ff2] {
            vars.push(v);
        }
    }
    vars.push(bb.lnf_g);
    vars.push(bb.lnf_b);
    vars.push(bb.head);
    for (i, ex) in be.experts.iter().enumerate() {
        let ex = ex.as_ref().expect("all experts bound");
        for s in &ex.sites {
            vars.push(s.b);
            vars.push(s.a);
        }
        vars.push(embeds[i]);
    }
    vars.push(benc.tok_emb);
    vars.push(benc.pos_emb);
    for l in &benc.layers {
        for v in [l.ln1_g, l.ln1_b, l.wq, l.wk, l.wv, l.wo, l.ln2_g, l.ln2_b, l.ff1, l.ff2] {
            vars.push(v);
        }
    }
    vars.push(benc.lnf_g);
    vars.push(benc.lnf_b);
    let grads = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        })
        .collect();
    (value, Some(grads))
}

/// Evaluates the joint loss with one coordinate moved by `delta`, restoring
/// the original value afterwards.
fn joint_eval_perturbed<F: Real>(
    inst: &mut JointInstance<F>,
    ti: usize,
    ci: usize,
    delta: f64,
) -> f64 {
    let orig = {
        let mut params = joint_params_mut(inst);
        let o = params[ti].data()[ci];
        params[ti].data_mut()[ci] = o + F::real(delta);
        o
    };
    let (val, _) = joint_loss(inst, false);
    joint_params_mut(inst)[ti].data_mut()[ci] = orig;
    val
}

fn joint_secant<F: Real>(inst: &mut JointInstance<F>, ti: usize, ci: usize, eps: f64) -> f64 {
    let plus = joint_eval_perturbed(inst, ti, ci, eps);
    let minus = joint_eval_perturbed(inst, ti, ci, -eps);
    (plus - minus) / (2.0 * eps)
}

/// Worst relative FD error of L_joint over random micro models, probing the
/// most influential coordinates of every parameter region (base /
/// adapters+embeddings / encoder). Exhaustive probing is ruled out by cost
/// (about ten thousand parameters, two forwards each); the top-|gradient|
/// coordinates carry the training signal.
pub fn fd_joint_worst<F: Real>(instances: usize, seed: u64, mode: SweepMode) -> f64 {
    let mut worst = 0.0f64;
    let mut probed = 0usize;
    for k in 0..instances {
        let s = seed.wrapping_add(1000 + k as u64);
        let mut inst64 = random_joint_instance::<f64>(s);
        let (_, g64) = joint_loss(&inst64, true);
        let g64 = g64.expect("grads requested");

        let n_base = inst64.base.entries().len();
        let n_expert = inst64.experts.experts[0].adapters.len() * 2 + 1;
        let n_experts = n_expert * NUM_POLES;
        let regions = [
            (0, n_base),
            (n_base, n_base + n_experts),
            (n_base + n_experts, g64.len()),
        ];

        let mut all: Vec<(usize, usize, f64)> = Vec::new();
        for (ti, g) in g64.iter().enumerate() {
            for (ci, v) in g.data().iter().enumerate() {
                if v.abs() >= mode.floor {
                    all.push((ti, ci, v.abs()));
                }
            }
        }
        all.sort_by(|a, b| b.2.partial_cmp(&a.2).expect("finite grads"));

        let admits = |ti: usize, ci: usize, inst64: &mut JointInstance<f64>| -> bool {
            match mode.screen_eps {
                None => true,
                Some(se) => {
                    let a = g64[ti].data()[ci];
                    let n = joint_secant(inst64, ti, ci, se);
                    (a - n).abs() / (n.abs() + 1e-8) <= SECANT_SCREEN
                }
            }
        };

        let mut picks: Vec<(usize, usize)> = Vec::new();
        for &(t, c, _) in &all {
            if picks.len() >= 10 {
                break;
            }
            if admits(t, c, &mut inst64) {
                picks.push((t, c));
            }
        }
        for &(lo, hi) in &regions {
            if picks.iter().any(|&(t, _)| t >= lo && t < hi) {
                continue;
            }
            for &(t, c, _) in &all {
                if t < lo || t >= hi {
                    continue;
                }
                if admits(t, c, &mut inst64) {
                    picks.push((t, c));
                    break;
                }
            }
        }

        let mut inst = random_joint_instance::<F>(s);
        let (_, grads) = joint_loss(&inst, true);
        let grads = grads.expect("grads requested");

        for (ti, ci) in picks {
            let analytic = grads[ti].data()[ci].as_f64();
            let numeric = joint_secant(&mut inst, ti, ci, mode.eps);
            let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(rel);
            probed += 1;
        }
    }
    assert_coverage(probed, instances);
    worst
}
