//! The staged training pipeline.
//!
//! Order: a base warm-up on neutral responses (the stand-in for
//! pre-training; the backbone never changes afterwards), then per-expert
//! adapter training on trait partitions, then router training on same-p
//! batches, then joint fine-tuning of adapters plus router under the soft
//! mixture. Stage isolation is provable: group digests are captured after
//! every stage and recorded in the report.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::{Real, Reduction, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::experts::{ExpertSet, MoeCtx, RouterOutput, TapeMixture};
use crate::lm::model::{adapted_sites, BoundBase};
use crate::lm::{tokenize, BaseModel};
use crate::pole::{TraitActivation, NUM_POLES};
use crate::router::{route, route_on_tape, BoundEncoder, PersonaEncoder};
use crate::router::{contrastive_loss_on_tape, router_loss_on_tape, trait_consistency_loss_on_tape};
use crate::synth::{corpus, Record};
use crate::train::checkpoint::{apply_params, load_checkpoint, save_checkpoint};
use crate::train::config::TrainingConfig;
use crate::train::data::{
    make_same_p_batches, pack_pair, pack_record, partition_by_trait, IndexCycler, PackedSeq,
};
use crate::train::digest::{digest_entries, GroupDigests};
use crate::train::optim::{Adam, AdamParams};

/// Everything the trained system is: backbone, experts, encoder, and the
/// config that shaped them.
pub struct ModelState {
    pub config: TrainingConfig,
    pub base: BaseModel<f32>,
    pub experts: ExpertSet<f32>,
    pub encoder: PersonaEncoder<f32>,
}

impl ModelState {
    /// Fresh state: backbone, experts, and encoder drawn from three
    /// decorrelated streams of the run seed.
    pub fn init(config: &TrainingConfig) -> Result<Self> {
        config.validate()?;
        let base = BaseModel::init(config.model.clone(), config.seed)?;
        let experts = ExpertSet::init(
            &config.model,
            config.lora.clone(),
            config.encoder.width,
            config.seed.wrapping_add(1),
        )?;
        let encoder = PersonaEncoder::init(config.encoder.clone(), config.seed.wrapping_add(2))?;
        Ok(ModelState { config: config.clone(), base, experts, encoder })
    }

    fn expert_site_names(&self) -> Vec<String> {
        adapted_sites(&self.config.model).iter().map(|s| s.name.clone()).collect()
    }

    /// Flat named view of every parameter: `base.*`, `experts.{i}.*`,
    /// `encoder.*`. Order is canonical and stable.
    pub fn param_entries(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (n, t) in self.base.entries() {
            out.push((format!("base.{n}"), t));
        }
        let sites = self.expert_site_names();
        for (i, ex) in self.experts.experts.iter().enumerate() {
            for (s, ad) in ex.adapters.iter().enumerate() {
                out.push((format!("experts.{i}.{}.b", sites[s]), &ad.b));
                out.push((format!("experts.{i}.{}.a", sites[s]), &ad.a));
            }
            out.push((format!("experts.{i}.embedding"), &ex.embedding));
        }
        for (n, t) in self.encoder.entries() {
            out.push((format!("encoder.{n}"), t));
        }
        out
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let sites: Vec<String> = adapted_sites(&self.config.model).iter().map(|s| s.name.clone()).collect();
        let mut out = Vec::new();
        for (n, t) in self.base.entries_mut() {
            out.push((format!("base.{n}"), t));
        }
        for (i, ex) in self.experts.experts.iter_mut().enumerate() {
            for (s, ad) in ex.adapters.iter_mut().enumerate() {
                out.push((format!("experts.{i}.{}.b", sites[s]), &mut ad.b));
                out.push((format!("experts.{i}.{}.a", sites[s]), &mut ad.a));
            }
            out.push((format!("experts.{i}.embedding"), &mut ex.embedding));
        }
        for (n, t) in self.encoder.entries_mut() {
            out.push((format!("encoder.{n}"), t));
        }
        out
    }

    /// Digests of the three isolation groups: backbone / adapter matrices /
    /// router (encoder weights plus expert embeddings).
    pub fn group_digests(&self) -> GroupDigests {
        let mut base = Vec::new();
        let mut adapters = Vec::new();
        let mut router = Vec::new();
        for (name, t) in self.param_entries() {
            if name.starts_with("base.") {
                base.push((name, t));
            } else if name.ends_with(".embedding") || name.starts_with("encoder.") {
                router.push((name, t));
            } else {
                adapters.push((name, t));
            }
        }
        GroupDigests {
            base: digest_entries(&base),
            adapters: digest_entries(&adapters),
            router: digest_entries(&router),
        }
    }

    /// Project every expert embedding back to the unit sphere; run after
    /// each optimizer step that moves embeddings.
    pub fn renormalize_embeddings(&mut self) -> Result<()> {
        for ex in &mut self.experts.experts {
            let norm = ex.embedding.l2_norm();
            if norm.as_f64() < 1e-12 {
                return Err(Error::DegenerateInput {
                    op: "renormalize_embeddings",
                    details: format!("expert {} embedding collapsed to zero", ex.pole.label()),
                });
            }
            ex.embedding.scale_in_place(1.0 / norm);
        }
        Ok(())
    }

    /// Query bytes for the persona encoder (truncated to its context).
    pub fn encoder_ids(&self, query: &str) -> Result<Vec<u32>> {
        if query.trim().is_empty() {
            return Err(Error::InvalidInput("cannot encode an empty query".into()));
        }
        Ok(tokenize(query, Some(self.encoder.cfg.t_max)).ids)
    }

    pub fn encode_query(&self, query: &str) -> Result<Tensor<f32>> {
        self.encoder.encode(&self.encoder_ids(query)?)
    }

    /// Mixture weights the router assigns to a query.
    pub fn route_query(&self, query: &str) -> Result<RouterOutput<f32>> {
        let h = self.encode_query(query)?;
        route(&h, &self.experts, &self.config.router)
    }

    pub fn save(&self, dir: &Path, stage: &str, step: usize) -> Result<()> {
        let digests = self.group_digests();
        let entries = self.param_entries();
        save_checkpoint(dir, stage, step, &self.config, &digests, &entries)
    }

    /// Rebuild a state from a checkpoint; returns (state, stage tag, step).
    pub fn load(dir: &Path) -> Result<(Self, String, usize)> {
        let loaded = load_checkpoint(dir)?;
        let mut state = ModelState::init(&loaded.config)?;
        apply_params(state.param_entries_mut(), &loaded)?;
        Ok((state, loaded.stage, loaded.step))
    }
}

/// One metrics line per optimizer step. Loss terms a stage does not
/// compute are logged as zero.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    pub loss_lm: f64,
    pub loss_contrastive: f64,
    pub loss_trait: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub routing_accuracy: Option<f64>,
}

pub fn write_metrics(path: &Path, metrics: &[MetricsRecord]) -> Result<()> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Held-out summary of one stage's end state.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StageEval {
    pub routing_accuracy: f64,
    /// Mean per-sequence LM loss under the learned soft mixture.
    pub heldout_lm: f64,
}

/// Held-out LM loss around one expert's training run.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExpertHeldout {
    pub expert: usize,
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DigestTimeline {
    pub after_init: GroupDigests,
    pub after_prep: GroupDigests,
    pub after_stage1: GroupDigests,
    pub after_stage2: GroupDigests,
    pub after_stage3: GroupDigests,
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineReport {
    pub metrics: Vec<MetricsRecord>,
    pub stage1_heldout: Vec<ExpertHeldout>,
    pub stage2: StageEval,
    pub stage3: StageEval,
    pub digests: DigestTimeline,
    pub wall_seconds: f64,
}

/// Per-parameter gradient sums across the micro-batches of one step.
#[derive(Default)]
struct GradBuffer {
    map: HashMap<String, Vec<f32>>,
}

impl GradBuffer {
    fn absorb(&mut self, tape: &Tape<f32>, named: &[(String, Var)]) {
        for (name, var) in named {
            if let Some(g) = tape.grad(*var) {
                let slot = self
                    .map
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.numel()]);
                for (s, &gv) in slot.iter_mut().zip(g.data()) {
                    *s += gv;
                }
            }
        }
    }

    fn scale(&mut self, factor: f32) {
        for v in self.map.values_mut() {
            for x in v.iter_mut() {
                *x *= factor;
            }
        }
    }
}

fn bound_base_entries(b: &BoundBase) -> Vec<(String, Var)> {
    let mut out = vec![
        ("base.tok_emb".to_string(), b.tok_emb),
        ("base.pos_emb".to_string(), b.pos_emb),
    ];
    for (l, lw) in b.layers.iter().enumerate() {
        for (n, v) in [
            ("ln1_g", lw.ln1_g),
            ("ln1_b", lw.ln1_b),
            ("wq", lw.wq),
            ("wk", lw.wk),
            ("wv", lw.wv),
            ("wo", lw.wo),
            ("ln2_g", lw.ln2_g),
            ("ln2_b", lw.ln2_b),
            ("ff1", lw.ff1),
            ("ff2", lw.ff2),
        ] {
            out.push((format!("base.layer{l}.{n}"), v));
        }
    }
    out.push(("base.lnf_g".to_string(), b.lnf_g));
    out.push(("base.lnf_b".to_string(), b.lnf_b));
    out.push(("base.head".to_string(), b.head));
    out
}

fn bound_encoder_entries(e: &BoundEncoder) -> Vec<(String, Var)> {
    let mut out = vec![
        ("encoder.tok_emb".to_string(), e.tok_emb),
        ("encoder.pos_emb".to_string(), e.pos_emb),
    ];
    for (l, lw) in e.layers.iter().enumerate() {
        for (n, v) in [
            ("ln1_g", lw.ln1_g),
            ("ln1_b", lw.ln1_b),
            ("wq", lw.wq),
            ("wk", lw.wk),
            ("wv", lw.wv),
            ("wo", lw.wo),
            ("ln2_g", lw.ln2_g),
            ("ln2_b", lw.ln2_b),
            ("ff1", lw.ff1),
            ("ff2", lw.ff2),
        ] {
            out.push((format!("encoder.layer{l}.{n}"), v));
        }
    }
    out.push(("encoder.lnf_g".to_string(), e.lnf_g));
    out.push(("encoder.lnf_b".to_string(), e.lnf_b));
    out
}

fn embedding_names() -> Vec<String> {
    (0..NUM_POLES).map(|i| format!("experts.{i}.embedding")).collect()
}

/// Loss blow-up detector: aborts on non-finite loss or a 10x rise over the
/// stage's first-step loss.
struct DivergenceGuard {
    stage: String,
    initial: Option<f64>,
}

impl DivergenceGuard {
    fn new(stage: &str) -> Self {
        DivergenceGuard { stage: stage.to_string(), initial: None }
    }

    fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence { stage: self.stage.clone(), step, loss });
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > 10.0 * initial.max(1e-3) {
            return Err(Error::Divergence { stage: self.stage.clone(), step, loss });
        }
        Ok(())
    }
}

/// Mean per-sequence response loss; terms are per-sequence sums.
fn batch_mean_loss(tape: &mut Tape<f32>, terms: &[Var]) -> Result<Var> {
    let total = tape.add_n(terms)?;
    Ok(tape.affine(total, 1.0 / terms.len() as f32, 0.0))
}

fn seq_loss_on_tape(
    tape: &mut Tape<f32>,
    base: &BaseModel<f32>,
    bound: &BoundBase,
    moe: Option<&MoeCtx<'_, f32>>,
    packed: &PackedSeq,
) -> Result<Var> {
    let logits = base.logits_on_tape(tape, bound, &packed.input, moe, Some((packed.resp_start, packed.resp_end)))?;
    tape.cross_entropy_lm(logits, packed.resp_targets(), Reduction::Sum)
}

/// Top-popcount(p) experts by weight must equal p's active set.
pub fn routing_hit(w: &RouterOutput<f32>, p: &TraitActivation) -> bool {
    let mut top = w.top_k(p.count_active());
    top.sort_unstable();
    let active: Vec<usize> = p.poles().iter().map(|q| q.index()).collect();
    top == active
}

/// Fraction of records routed to exactly their active set.
pub fn routing_accuracy_over(state: &ModelState, records: &[Record]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidInput("routing accuracy over an empty set".into()));
    }
    let mut hits = 0usize;
    for r in records {
        if routing_hit(&state.route_query(&r.query)?, &r.p) {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Per-sequence LM loss under a fixed mixture, forward only.
fn record_lm_loss(state: &ModelState, packed: &PackedSeq, w: &RouterOutput<f32>) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = state.base.bind(&mut tape, false);
    let mixture = TapeMixture::Const(w.clone());
    let needed = mixture.needed();
    let bx = state.experts.bind(&mut tape, &needed, &[false; NUM_POLES]);
    let ctx = MoeCtx { experts: &bx, mixture: &mixture };
    let ce = seq_loss_on_tape(&mut tape, &state.base, &bound, Some(&ctx), packed)?;
    Ok(tape.value(ce).item().as_f64())
}

/// Mean held-out LM loss with one-hot expert `i`.
fn heldout_lm_one_hot(state: &ModelState, records: &[&Record], i: usize) -> Result<f64> {
    let w = RouterOutput::one_hot(i);
    let mut total = 0.0;
    for r in records {
        let packed = pack_record(r, state.config.model.t_max)?;
        total += record_lm_loss(state, &packed, &w)?;
    }
    Ok(total / records.len() as f64)
}

/// Mean held-out LM loss with the learned router choosing the mixture.
fn heldout_lm_routed(state: &ModelState, records: &[Record]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidInput("held-out LM loss over an empty set".into()));
    }
    let mut total = 0.0;
    for r in records {
        let w = state.route_query(&r.query)?;
        let packed = pack_record(r, state.config.model.t_max)?;
        total += record_lm_loss(state, &packed, &w)?;
    }
    Ok(total / records.len() as f64)
}

/// Base warm-up: full backbone trains on (query, neutral response) pairs.
/// This is the only stage that moves base weights.
pub fn run_prep(
    state: &mut ModelState,
    train: &[Record],
    metrics: &mut Vec<MetricsRecord>,
) -> Result<()> {
    let hp = state.config.prep;
    let t_max = state.config.model.t_max;
    let packed: Vec<PackedSeq> = train
        .iter()
        .enumerate()
        .map(|(k, r)| pack_pair(&r.query, &corpus::neutral_response(k), t_max))
        .collect::<Result<_>>()?;
    let mut cycler = IndexCycler::new((0..train.len()).collect(), state.config.seed.wrapping_add(10));
    let mut adam = Adam::new(AdamParams::with_lr(hp.lr));
    let mut guard = DivergenceGuard::new("prep");

    for step in 0..hp.steps {
        let mut buf = GradBuffer::default();
        let mut loss_sum = 0.0;
        for _ in 0..hp.grad_accum {
            let batch = cycler.next_batch(hp.batch_size);
            let mut tape = Tape::new();
            let bound = state.base.bind(&mut tape, true);
            let named = bound_base_entries(&bound);
            let mut terms = Vec::with_capacity(batch.len());
            for &j in &batch {
                terms.push(seq_loss_on_tape(&mut tape, &state.base, &bound, None, &packed[j])?);
            }
            let loss = batch_mean_loss(&mut tape, &terms)?;
            tape.backward(loss)?;
            buf.absorb(&tape, &named);
            loss_sum += tape.value(loss).item() as f64;
        }
        buf.scale(1.0 / hp.grad_accum as f32);
        let loss = loss_sum / hp.grad_accum as f64;
        guard.check(step, loss)?;

        adam.begin_step();
        for (name, t) in state.base.entries_mut() {
            let key = format!("base.{name}");
            if let Some(g) = buf.map.get(&key) {
                adam.update(&key, t, g)?;
            }
        }
        metrics.push(MetricsRecord {
            stage: "prep".into(),
            step,
            loss,
            loss_lm: loss,
            loss_contrastive: 0.0,
            loss_trait: 0.0,
            routing_accuracy: None,
        });
    }
    Ok(())
}

/// Per-expert adapter training on the trait partitions; base and router
/// frozen. Returns held-out LM loss before/after per expert.
pub fn run_stage1(
    state: &mut ModelState,
    train: &[Record],
    val: &[Record],
    metrics: &mut Vec<MetricsRecord>,
) -> Result<Vec<ExpertHeldout>> {
    let hp = state.config.stage1;
    let t_max = state.config.model.t_max;
    let parts = partition_by_trait(train)?;
    let val_parts: [Vec<usize>; NUM_POLES] = {
        let mut vp: [Vec<usize>; NUM_POLES] = Default::default();
        for (j, r) in val.iter().enumerate() {
            for (i, slot) in vp.iter_mut().enumerate() {
                if r.p.bits()[i] == 1 {
                    slot.push(j);
                }
            }
        }
        vp
    };
    let packed: Vec<PackedSeq> = train.iter().map(|r| pack_record(r, t_max)).collect::<Result<_>>()?;
    let sites = state.expert_site_names();

    let mut outcomes = Vec::with_capacity(NUM_POLES);
    for i in 0..NUM_POLES {
        // Held-out slice: the pole's validation partition, or a small train
        // slice when no validation records exist (micro runs only).
        let heldout: Vec<&Record> = if val_parts[i].is_empty() {
            parts[i].iter().take(8).map(|&j| &train[j]).collect()
        } else {
            val_parts[i].iter().map(|&j| &val[j]).collect()
        };
        let initial = heldout_lm_one_hot(state, &heldout, i)?;

        let stage_tag = format!("stage1.e{i}");
        let mut cycler = IndexCycler::new(parts[i].clone(), state.config.seed.wrapping_add(100 + i as u64));
        let mut adam = Adam::new(AdamParams::with_lr(hp.lr));
        let mut guard = DivergenceGuard::new(&stage_tag);
        let mixture = TapeMixture::Const(RouterOutput::one_hot(i));
        let needed = mixture.needed();
        let mut trainable = [false; NUM_POLES];
        trainable[i] = true;

        for step in 0..hp.steps {
            let mut buf = GradBuffer::default();
            let mut loss_sum = 0.0;
            for _ in 0..hp.grad_accum {
                let batch = cycler.next_batch(hp.batch_size);
                let mut tape = Tape::new();
                let bound = state.base.bind(&mut tape, false);
                let bx = state.experts.bind(&mut tape, &needed, &trainable);
                let named: Vec<(String, Var)> = {
                    let be = bx.experts[i].as_ref().expect("needed expert bound");
                    be.sites
                        .iter()
                        .enumerate()
                        .flat_map(|(s, sv)| {
                            [
                                (format!("experts.{i}.{}.b", sites[s]), sv.b),
                                (format!("experts.{i}.{}.a", sites[s]), sv.a),
                            ]
                        })
                        .collect()
                };
                let ctx = MoeCtx { experts: &bx, mixture: &mixture };
                let mut terms = Vec::with_capacity(batch.len());
                for &j in &batch {
                    terms.push(seq_loss_on_tape(&mut tape, &state.base, &bound, Some(&ctx), &packed[j])?);
                }
                let loss = batch_mean_loss(&mut tape, &terms)?;
                tape.backward(loss)?;
                buf.absorb(&tape, &named);
                loss_sum += tape.value(loss).item() as f64;
            }
            buf.scale(1.0 / hp.grad_accum as f32);
            let loss = loss_sum / hp.grad_accum as f64;
            guard.check(step, loss)?;

            adam.begin_step();
            let ex = &mut state.experts.experts[i];
            for (s, ad) in ex.adapters.iter_mut().enumerate() {
                let kb = format!("experts.{i}.{}.b", sites[s]);
                if let Some(g) = buf.map.get(&kb) {
                    adam.update(&kb, &mut ad.b, g)?;
                }
                let ka = format!("experts.{i}.{}.a", sites[s]);
                if let Some(g) = buf.map.get(&ka) {
                    adam.update(&ka, &mut ad.a, g)?;
                }
            }
            metrics.push(MetricsRecord {
                stage: stage_tag.clone(),
                step,
                loss,
                loss_lm: loss,
                loss_contrastive: 0.0,
                loss_trait: 0.0,
                routing_accuracy: None,
            });
        }

        let final_loss = heldout_lm_one_hot(state, &heldout, i)?;
        outcomes.push(ExpertHeldout { expert: i, initial, final_loss });
    }
    Ok(outcomes)
}

/// Router training: encoder and expert embeddings move, experts and base
/// frozen. Losses are contrastive alignment plus trait consistency over
/// same-p batches.
pub fn run_stage2(
    state: &mut ModelState,
    train: &[Record],
    val: &[Record],
    metrics: &mut Vec<MetricsRecord>,
) -> Result<StageEval> {
    let hp = state.config.stage2;
    let rc = state.config.router.clone();
    let plan = make_same_p_batches(train, hp.batch_size, state.config.seed.wrapping_add(20))?;
    if plan.batches.is_empty() {
        return Err(Error::InvalidInput("stage2: no usable same-p batches".into()));
    }
    let enc_ids: Vec<Vec<u32>> = train.iter().map(|r| state.encoder_ids(&r.query)).collect::<Result<_>>()?;
    let mut adam = Adam::new(AdamParams::with_lr(hp.lr));
    let mut guard = DivergenceGuard::new("stage2");
    let emb_names = embedding_names();

    for step in 0..hp.steps {
        let mut buf = GradBuffer::default();
        let mut loss_sum = 0.0;
        let mut contrastive_sum = 0.0;
        let mut trait_sum = 0.0;
        let mut hits = 0usize;
        let mut seen = 0usize;
        for micro in 0..hp.grad_accum {
            let batch = &plan.batches[(step * hp.grad_accum + micro) % plan.batches.len()];
            let mut tape = Tape::new();
            let bound_enc = state.encoder.bind(&mut tape, true);
            let embeds = state.experts.bind_embeddings(&mut tape, true);
            let mut named = bound_encoder_entries(&bound_enc);
            named.extend(emb_names.iter().cloned().zip(embeds.iter().copied()));

            let mut hs = Vec::with_capacity(batch.len());
            let mut ps = Vec::with_capacity(batch.len());
            for &j in batch {
                hs.push(state.encoder.encode_on_tape(&mut tape, &bound_enc, &enc_ids[j])?);
                ps.push(train[j].p.clone());
            }
            let contrastive = contrastive_loss_on_tape(&mut tape, &hs, &embeds, &ps, rc.margin as f32)?;
            let trait_loss = trait_consistency_loss_on_tape(&mut tape, &hs)?;
            let loss = router_loss_on_tape(&mut tape, contrastive, trait_loss, rc.beta as f32)?;
            tape.backward(loss)?;
            buf.absorb(&tape, &named);
            loss_sum += tape.value(loss).item() as f64;
            contrastive_sum += tape.value(contrastive).item() as f64;
            trait_sum += tape.value(trait_loss).item() as f64;

            // Batch routing accuracy from this step's (pre-update) values.
            for (k, &j) in batch.iter().enumerate() {
                let h = tape.value(hs[k]).clone();
                let w = route(&h, &state.experts, &rc)?;
                if routing_hit(&w, &train[j].p) {
                    hits += 1;
                }
                seen += 1;
            }
        }
        buf.scale(1.0 / hp.grad_accum as f32);
        let loss = loss_sum / hp.grad_accum as f64;
        guard.check(step, loss)?;

        adam.begin_step();
        for (name, t) in state.encoder.entries_mut() {
            let key = format!("encoder.{name}");
            if let Some(g) = buf.map.get(&key) {
                adam.update(&key, t, g)?;
            }
        }
        for (i, ex) in state.experts.experts.iter_mut().enumerate() {
            if let Some(g) = buf.map.get(&emb_names[i]) {
                adam.update(&emb_names[i], &mut ex.embedding, g)?;
            }
        }
        state.renormalize_embeddings()?;

        metrics.push(MetricsRecord {
            stage: "stage2".into(),
            step,
            loss,
            loss_lm: 0.0,
            loss_contrastive: contrastive_sum / hp.grad_accum as f64,
            loss_trait: trait_sum / hp.grad_accum as f64,
            routing_accuracy: Some(hits as f64 / seen as f64),
        });
    }

    let eval_set = if val.is_empty() { train } else { val };
    Ok(StageEval {
        routing_accuracy: routing_accuracy_over(state, eval_set)?,
        heldout_lm: heldout_lm_routed(state, eval_set)?,
    })
}

/// Joint fine-tuning: adapters, encoder, and embeddings all move under
/// L_joint = L_lm + gamma * L_router; the backbone stays frozen and the
/// LM term sees the router through the soft mixture weights.
pub fn run_stage3(
    state: &mut ModelState,
    train: &[Record],
    val: &[Record],
    metrics: &mut Vec<MetricsRecord>,
) -> Result<StageEval> {
    let hp = state.config.stage3;
    let rc = state.config.router.clone();
    let gamma = state.config.gamma as f32;
    let t_max = state.config.model.t_max;
    let plan = make_same_p_batches(train, hp.batch_size, state.config.seed.wrapping_add(30))?;
    if plan.batches.is_empty() {
        return Err(Error::InvalidInput("stage3: no usable same-p batches".into()));
    }
    let packed: Vec<PackedSeq> = train.iter().map(|r| pack_record(r, t_max)).collect::<Result<_>>()?;
    let enc_ids: Vec<Vec<u32>> = train.iter().map(|r| state.encoder_ids(&r.query)).collect::<Result<_>>()?;
    let sites = state.expert_site_names();
    let mut adam = Adam::new(AdamParams::with_lr(hp.lr));
    let mut guard = DivergenceGuard::new("stage3");
    let emb_names = embedding_names();
    let all = [true; NUM_POLES];

    for step in 0..hp.steps {
        let mut buf = GradBuffer::default();
        let mut loss_sum = 0.0;
        let mut lm_sum = 0.0;
        let mut contrastive_sum = 0.0;
        let mut trait_sum = 0.0;
        let mut hits = 0usize;
        let mut seen = 0usize;
        for micro in 0..hp.grad_accum {
            let batch = &plan.batches[(step * hp.grad_accum + micro) % plan.batches.len()];
            let mut tape = Tape::new();
            let bound = state.base.bind(&mut tape, false);
            let bound_enc = state.encoder.bind(&mut tape, true);
            let embeds = state.experts.bind_embeddings(&mut tape, true);
            let bx = state.experts.bind(&mut tape, &all, &all);
            let mut named = bound_encoder_entries(&bound_enc);
            named.extend(emb_names.iter().cloned().zip(embeds.iter().copied()));
            for (i, be) in bx.experts.iter().enumerate() {
                let be = be.as_ref().expect("all experts bound");
                for (s, sv) in be.sites.iter().enumerate() {
                    named.push((format!("experts.{i}.{}.b", sites[s]), sv.b));
                    named.push((format!("experts.{i}.{}.a", sites[s]), sv.a));
                }
            }

            let mut hs = Vec::with_capacity(batch.len());
            let mut ps = Vec::with_capacity(batch.len());
            let mut ce_terms = Vec::with_capacity(batch.len());
            for &j in batch {
                let h = state.encoder.encode_on_tape(&mut tape, &bound_enc, &enc_ids[j])?;
                let w = route_on_tape(&mut tape, h, &embeds, rc.tau as f32)?;
                let mixture = TapeMixture::Vars(w);
                let ctx = MoeCtx { experts: &bx, mixture: &mixture };
                ce_terms.push(seq_loss_on_tape(&mut tape, &state.base, &bound, Some(&ctx), &packed[j])?);
                hs.push(h);
                ps.push(train[j].p.clone());
            }
            let loss_lm = batch_mean_loss(&mut tape, &ce_terms)?;
            let contrastive = contrastive_loss_on_tape(&mut tape, &hs, &embeds, &ps, rc.margin as f32)?;
            let trait_loss = trait_consistency_loss_on_tape(&mut tape, &hs)?;
            let loss_router = router_loss_on_tape(&mut tape, contrastive, trait_loss, rc.beta as f32)?;
            let scaled = tape.affine(loss_router, gamma, 0.0);
            let loss = tape.add(loss_lm, scaled)?;
            tape.backward(loss)?;
            buf.absorb(&tape, &named);
            loss_sum += tape.value(loss).item() as f64;
            lm_sum += tape.value(loss_lm).item() as f64;
            contrastive_sum += tape.value(contrastive).item() as f64;
            trait_sum += tape.value(trait_loss).item() as f64;

            for (k, &j) in batch.iter().enumerate() {
                let h = tape.value(hs[k]).clone();
                let w = route(&h, &state.experts, &rc)?;
                if routing_hit(&w, &train[j].p) {
                    hits += 1;
                }
                seen += 1;
            }
        }
        buf.scale(1.0 / hp.grad_accum as f32);
        let loss = loss_sum / hp.grad_accum as f64;
        guard.check(step, loss)?;

        adam.begin_step();
        for (i, ex) in state.experts.experts.iter_mut().enumerate() {
            for (s, ad) in ex.adapters.iter_mut().enumerate() {
                let kb = format!("experts.{i}.{}.b", sites[s]);
                if let Some(g) = buf.map.get(&kb) {
                    adam.update(&kb, &mut ad.b, g)?;
                }
                let ka = format!("experts.{i}.{}.a", sites[s]);
                if let Some(g) = buf.map.get(&ka) {
                    adam.update(&ka, &mut ad.a, g)?;
                }
            }
        }
        for (name, t) in state.encoder.entries_mut() {
            let key = format!("encoder.{name}");
            if let Some(g) = buf.map.get(&key) {
                adam.update(&key, t, g)?;
            }
        }
        for (i, ex) in state.experts.experts.iter_mut().enumerate() {
            if let Some(g) = buf.map.get(&emb_names[i]) {
                adam.update(&emb_names[i], &mut ex.embedding, g)?;
            }
        }
        state.renormalize_embeddings()?;

        metrics.push(MetricsRecord {
            stage: "stage3".into(),
            step,
            loss,
            loss_lm: lm_sum / hp.grad_accum as f64,
            loss_contrastive: contrastive_sum / hp.grad_accum as f64,
            loss_trait: trait_sum / hp.grad_accum as f64,
            routing_accuracy: Some(hits as f64 / seen as f64),
        });
    }

    let eval_set = if val.is_empty() { train } else { val };
    Ok(StageEval {
        routing_accuracy: routing_accuracy_over(state, eval_set)?,
        heldout_lm: heldout_lm_routed(state, eval_set)?,
    })
}

/// The full pipeline: init, warm-up, three stages, digests, evals, and
/// (optionally) checkpoints plus logs under `out_dir`.
pub fn run_full(
    records: &[Record],
    config: &TrainingConfig,
    out_dir: Option<&Path>,
) -> Result<(ModelState, PipelineReport)> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidInput("training needs at least one record".into()));
    }
    for r in records {
        r.validate()?;
    }
    let started = Instant::now();
    let (train, val) = crate::train::data::split_train_val(records, config.val_fraction, config.seed.wrapping_add(5));
    let mut state = ModelState::init(config)?;
    let mut metrics = Vec::new();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("resolved_config.toml"), config.to_toml_string()?)?;
    }

    let after_init = state.group_digests();
    run_prep(&mut state, &train, &mut metrics)?;
    let after_prep = state.group_digests();
    if let Some(dir) = out_dir {
        state.save(&dir.join("ckpt-prep"), "prep", config.prep.steps)?;
    }

    let stage1_heldout = run_stage1(&mut state, &train, &val, &mut metrics)?;
    let after_stage1 = state.group_digests();
    if let Some(dir) = out_dir {
        state.save(&dir.join("ckpt-stage1"), "stage1", config.stage1.steps)?;
    }

    let stage2 = run_stage2(&mut state, &train, &val, &mut metrics)?;
    let after_stage2 = state.group_digests();
    if let Some(dir) = out_dir {
        state.save(&dir.join("ckpt-stage2"), "stage2", config.stage2.steps)?;
    }

    let stage3 = run_stage3(&mut state, &train, &val, &mut metrics)?;
    let after_stage3 = state.group_digests();
    if let Some(dir) = out_dir {
        state.save(&dir.join("ckpt-stage3"), "stage3", config.stage3.steps)?;
    }

    let report = PipelineReport {
        metrics,
        stage1_heldout,
        stage2,
        stage3,
        digests: DigestTimeline {
            after_init,
            after_prep,
            after_stage1,
            after_stage2,
            after_stage3,
        },
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        write_metrics(&dir.join("metrics.jsonl"), &report.metrics)?;
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    }
    Ok((state, report))
}
