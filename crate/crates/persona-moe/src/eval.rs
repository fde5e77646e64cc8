//! Evaluation and inference: routed generation with inspectable weights,
//! routing accuracy over labeled records, a paired softmax-regression
//! probe on encoder embeddings, and marker-based trait-expression rates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::experts::RouterOutput;
use crate::lm::{detokenize, generate, tokenize, DecodeParams};
use crate::pole::{TraitPole, NUM_POLES};
use crate::router::PersonaEncoder;
use crate::synth::{corpus, Record};
use crate::train::data::pack_query;
use crate::train::pipeline::{routing_hit, ModelState};

/// Route a query, generate under the soft mixture, and surface the exact
/// weights used. Deterministic for greedy decoding.
pub fn infer(state: &ModelState, query: &str, params: &DecodeParams) -> Result<(String, RouterOutput<f32>)> {
    let w = state.route_query(query)?;
    let prompt = pack_query(query, state.config.model.t_max)?;
    let seq = generate(&state.base, Some((&state.experts, &w)), &prompt, params)?;
    Ok((detokenize(&seq[prompt.len()..]), w))
}

/// Generation with a forced one-hot mixture (expert inspection).
pub fn generate_one_hot(state: &ModelState, expert: usize, query: &str, params: &DecodeParams) -> Result<String> {
    let w = RouterOutput::one_hot(expert);
    let prompt = pack_query(query, state.config.model.t_max)?;
    let seq = generate(&state.base, Some((&state.experts, &w)), &prompt, params)?;
    Ok(detokenize(&seq[prompt.len()..]))
}

/// Generation from the bare backbone (background-rate measurements).
pub fn generate_base(state: &ModelState, query: &str, params: &DecodeParams) -> Result<String> {
    let prompt = pack_query(query, state.config.model.t_max)?;
    let seq = generate(&state.base, None, &prompt, params)?;
    Ok(detokenize(&seq[prompt.len()..]))
}

/// Ten labeled weights in canonical pole order, one per line.
pub fn format_weights(w: &RouterOutput<f32>) -> String {
    let mut out = String::new();
    for (pole, &wi) in TraitPole::ALL.iter().zip(w.weights()) {
        out.push_str(&format!("{:<5} {:.6}\n", pole.label(), wi));
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct RoutingRecordEval {
    /// Top-popcount(p) experts by weight, descending.
    pub predicted: Vec<usize>,
    /// Active pole indices of the ground-truth p, ascending.
    pub actual: Vec<usize>,
    pub hit: bool,
    pub positive_mass: f64,
    pub negative_mass: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RoutingEvalResult {
    pub records: usize,
    /// Records skipped because they failed validation.
    pub excluded: usize,
    pub accuracy: f64,
    pub mean_positive_mass: f64,
    pub mean_negative_mass: f64,
    pub per_record: Vec<RoutingRecordEval>,
}

/// Top-popcount(p) set-match accuracy plus the weight mass landing on
/// active vs inactive experts. Order-invariant over the dataset.
pub fn eval_routing(state: &ModelState, records: &[Record]) -> Result<RoutingEvalResult> {
    let mut hits = 0usize;
    let mut excluded = 0usize;
    let mut pos_mass = 0.0;
    let mut per_record = Vec::new();
    for r in records {
        if r.validate().is_err() {
            excluded += 1;
            continue;
        }
        let w = state.route_query(&r.query)?;
        let actual: Vec<usize> = r.p.poles().iter().map(|pole| pole.index()).collect();
        let predicted = w.top_k(actual.len());
        let hit = routing_hit(&w, &r.p);
        let wf = w.as_f64();
        let positive_mass: f64 = actual.iter().map(|&i| wf[i]).sum();
        if hit {
            hits += 1;
        }
        pos_mass += positive_mass;
        per_record.push(RoutingRecordEval {
            predicted,
            actual,
            hit,
            positive_mass,
            negative_mass: 1.0 - positive_mass,
        });
    }
    if per_record.is_empty() {
        return Err(Error::InvalidInput("routing eval needs at least one valid record".into()));
    }
    let scored = per_record.len();
    let mean_positive_mass = pos_mass / scored as f64;
    Ok(RoutingEvalResult {
        records: scored,
        excluded,
        accuracy: hits as f64 / scored as f64,
        mean_positive_mass,
        mean_negative_mass: 1.0 - mean_positive_mass,
        per_record,
    })
}

/// Chance accuracy of top-k set matching with 10 experts: 1 / C(10, k).
pub fn random_routing_baseline(k: usize) -> f64 {
    let choose = |n: u64, r: u64| -> u64 {
        let r = r.min(n - r);
        (1..=r).fold(1u64, |acc, i| acc * (n - r + i) / i)
    };
    1.0 / choose(10, k.max(1).min(10) as u64) as f64
}

/// Paired-probe outcome: the identical fold split scores both encoders.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeResult {
    pub trained_accuracy: f64,
    pub baseline_accuracy: f64,
    pub per_class_trained: Vec<f64>,
    pub per_class_baseline: Vec<f64>,
    pub folds: usize,
    /// Classes whose embeddings under either encoder collapsed to one
    /// point (reported, not fatal).
    pub degenerate_classes: Vec<usize>,
}

/// Full-batch gradient-descent softmax regression: 200 epochs, lr 0.1, no
/// regularization. Returns held-out accuracy plus per-class hit counts.
pub fn fit_softmax_probe(
    train: &[(Vec<f64>, usize)],
    test: &[(Vec<f64>, usize)],
    classes: usize,
) -> (f64, Vec<usize>, Vec<usize>) {
    assert!(!train.is_empty() && !test.is_empty() && classes >= 2);
    let dim = train[0].0.len();
    let mut w = vec![0.0f64; classes * dim];
    let mut b = vec![0.0f64; classes];
    let n = train.len() as f64;
    for _ in 0..200 {
        let mut gw = vec![0.0f64; classes * dim];
        let mut gb = vec![0.0f64; classes];
        for (x, y) in train {
            let mut logits: Vec<f64> = (0..classes)
                .map(|c| b[c] + w[c * dim..(c + 1) * dim].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                z += *l;
            }
            for c in 0..classes {
                let p = logits[c] / z - if c == *y { 1.0 } else { 0.0 };
                gb[c] += p;
                for (g, xi) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *g += p * xi;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= 0.1 * gi / n;
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= 0.1 * gi / n;
        }
    }
    let mut hits_per_class = vec![0usize; classes];
    let mut count_per_class = vec![0usize; classes];
    let mut hits = 0usize;
    for (x, y) in test {
        let pred = (0..classes)
            .map(|c| b[c] + w[c * dim..(c + 1) * dim].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>())
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(c, _)| c)
            .unwrap();
        count_per_class[*y] += 1;
        if pred == *y {
            hits += 1;
            hits_per_class[*y] += 1;
        }
    }
    (hits as f64 / test.len() as f64, hits_per_class, count_per_class)
}

fn embed_all(encoder: &PersonaEncoder<f32>, texts: &[(String, usize)]) -> Result<Vec<(Vec<f64>, usize)>> {
    texts
        .iter()
        .map(|(text, label)| {
            let ids = tokenize(text, Some(encoder.cfg.t_max)).ids;
            if ids.is_empty() {
                return Err(Error::InvalidInput("probe text is empty".into()));
            }
            let h = encoder.encode(&ids)?;
            Ok((h.data().iter().map(|&v| v.as_f64()).collect(), *label))
        })
        .collect()
}

/// Cross-validated probe accuracy for a trained encoder against an
/// untrained one, on the same stratified folds (paired comparison).
pub fn probe_eval(
    trained: &PersonaEncoder<f32>,
    baseline: &PersonaEncoder<f32>,
    texts: &[(String, usize)],
    classes: usize,
    folds: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if classes < 2 {
        return Err(Error::InvalidInput("probe needs at least two classes".into()));
    }
    if folds < 2 {
        return Err(Error::InvalidInput("probe needs at least two folds".into()));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, (_, label)) in texts.iter().enumerate() {
        if *label >= classes {
            return Err(Error::InvalidInput(format!("label {label} out of range")));
        }
        per_class[*label].push(i);
    }
    if let Some((c, _)) = per_class.iter().enumerate().find(|(_, v)| v.len() < 20) {
        return Err(Error::InvalidInput(format!("class {c} has fewer than 20 samples")));
    }

    // One stratified fold assignment shared by both encoders.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; texts.len()];
    for members in per_class.iter_mut() {
        members.shuffle(&mut rng);
        for (k, &i) in members.iter().enumerate() {
            fold_of[i] = k % folds;
        }
    }

    let emb_trained = embed_all(trained, texts)?;
    let emb_baseline = embed_all(baseline, texts)?;

    let mut degenerate = Vec::new();
    for (c, members) in per_class.iter().enumerate() {
        for emb in [&emb_trained, &emb_baseline] {
            let first = &emb[members[0]].0;
            let collapsed = members.iter().all(|&i| {
                emb[i].0.iter().zip(first).all(|(a, b)| (a - b).abs() < 1e-9)
            });
            if collapsed && !degenerate.contains(&c) {
                degenerate.push(c);
            }
        }
    }

    let run = |emb: &[(Vec<f64>, usize)]| -> (f64, Vec<f64>) {
        let mut acc_sum = 0.0;
        let mut hits = vec![0usize; classes];
        let mut counts = vec![0usize; classes];
        for f in 0..folds {
            let train: Vec<(Vec<f64>, usize)> = emb
                .iter()
                .enumerate()
                .filter(|(i, _)| fold_of[*i] != f)
                .map(|(_, e)| e.clone())
                .collect();
            let test: Vec<(Vec<f64>, usize)> = emb
                .iter()
                .enumerate()
                .filter(|(i, _)| fold_of[*i] == f)
                .map(|(_, e)| e.clone())
                .collect();
            let (acc, h, c) = fit_softmax_probe(&train, &test, classes);
            acc_sum += acc;
            for k in 0..classes {
                hits[k] += h[k];
                counts[k] += c[k];
            }
        }
        let per = hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
            .collect();
        (acc_sum / folds as f64, per)
    };

    let (trained_accuracy, per_class_trained) = run(&emb_trained);
    let (baseline_accuracy, per_class_baseline) = run(&emb_baseline);
    Ok(ProbeResult {
        trained_accuracy,
        baseline_accuracy,
        per_class_trained,
        per_class_baseline,
        folds,
        degenerate_classes: degenerate,
    })
}

/// Marker rates: `rates[i][j]` is the fraction of group-i responses that
/// contain pole j's marker. Empty input yields an empty matrix.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ExpressionMatrix {
    pub rates: Vec<[f64; NUM_POLES]>,
    pub counts: Vec<usize>,
}

/// Per-pole marker rates over labeled responses: how often pole j's
/// marker appears when j is active vs when it is inactive.
#[derive(Clone, Debug, Default, Serialize)]
pub struct TraitExpressionReport {
    pub active_rates: Vec<f64>,
    pub inactive_rates: Vec<f64>,
    pub active_counts: Vec<usize>,
    pub inactive_counts: Vec<usize>,
    pub empty: bool,
}

pub fn trait_expression_check(pairs: &[(crate::pole::TraitActivation, String)]) -> TraitExpressionReport {
    if pairs.is_empty() {
        return TraitExpressionReport {
            empty: true,
            ..Default::default()
        };
    }
    let mut report = TraitExpressionReport {
        active_rates: vec![0.0; NUM_POLES],
        inactive_rates: vec![0.0; NUM_POLES],
        active_counts: vec![0; NUM_POLES],
        inactive_counts: vec![0; NUM_POLES],
        empty: false,
    };
    for (p, response) in pairs {
        let active = p.bits();
        for j in 0..NUM_POLES {
            let has = response.contains(corpus::MARKERS[j]);
            if active[j] != 0 {
                report.active_counts[j] += 1;
                if has {
                    report.active_rates[j] += 1.0;
                }
            } else {
                report.inactive_counts[j] += 1;
                if has {
                    report.inactive_rates[j] += 1.0;
                }
            }
        }
    }
    for j in 0..NUM_POLES {
        if report.active_counts[j] > 0 {
            report.active_rates[j] /= report.active_counts[j] as f64;
        }
        if report.inactive_counts[j] > 0 {
            report.inactive_rates[j] /= report.inactive_counts[j] as f64;
        }
    }
    report
}

pub fn expression_matrix(groups: &[Vec<String>]) -> ExpressionMatrix {
    let mut out = ExpressionMatrix::default();
    for responses in groups {
        let mut row = [0.0f64; NUM_POLES];
        for r in responses {
            for (j, marker) in corpus::MARKERS.iter().enumerate() {
                if r.contains(marker) {
                    row[j] += 1.0;
                }
            }
        }
        if !responses.is_empty() {
            for v in row.iter_mut() {
                *v /= responses.len() as f64;
            }
        }
        out.rates.push(row);
        out.counts.push(responses.len());
    }
    out
}
