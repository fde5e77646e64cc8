//! Greedy and temperature decoding over the adapted model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape};
use crate::error::{Error, Result};
use crate::experts::{ExpertSet, MoeCtx, RouterOutput, TapeMixture};
use crate::lm::model::BaseModel;
use crate::lm::tokenizer::EOS;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DecodeParams {
    pub mode: DecodeMode,
    pub max_new_tokens: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            max_new_tokens: 48,
        }
    }
}

/// Extend `prompt` token by token, stopping at EOS, `max_new_tokens`, or the
/// context limit. Greedy decoding is fully deterministic; sampling is
/// deterministic per seed.
pub fn generate<F: Real>(
    base: &BaseModel<F>,
    moe_state: Option<(&ExpertSet<F>, &RouterOutput<F>)>,
    prompt: &[u32],
    params: &DecodeParams,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::InvalidInput("generate on empty prompt".into()));
    }
    if prompt.len() > base.cfg.t_max {
        return Err(Error::ContextOverflow {
            len: prompt.len(),
            t_max: base.cfg.t_max,
        });
    }
    let mut rng = match params.mode {
        DecodeMode::Sample { seed, temperature } => {
            if !(temperature > 0.0) {
                return Err(Error::InvalidParameter {
                    name: "temperature",
                    details: format!("must be positive, got {}", temperature),
                });
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        DecodeMode::Greedy => None,
    };

    let mut seq = prompt.to_vec();
    for _ in 0..params.max_new_tokens {
        if seq.len() >= base.cfg.t_max {
            break;
        }
        let logits = last_position_logits(base, moe_state, &seq)?;
        let next = match params.mode {
            DecodeMode::Greedy => argmax(&logits),
            DecodeMode::Sample { temperature, .. } => {
                sample_token(&logits, temperature, rng.as_mut().expect("rng for sampling"))
            }
        };
        seq.push(next as u32);
        if next as u32 == EOS {
            break;
        }
    }
    Ok(seq)
}

fn last_position_logits<F: Real>(
    base: &BaseModel<F>,
    moe_state: Option<(&ExpertSet<F>, &RouterOutput<F>)>,
    seq: &[u32],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = base.bind(&mut tape, false);
    let t = seq.len();
    let logits = match moe_state {
        None => base.logits_on_tape(&mut tape, &bound, seq, None, Some((t - 1, t)))?,
        Some((experts, w)) => {
            let mixture = TapeMixture::Const(w.clone());
            let needed = mixture.needed();
            let bx = experts.bind(&mut tape, &needed, &[false; crate::pole::NUM_POLES]);
            let ctx = MoeCtx {
                experts: &bx,
                mixture: &mixture,
            };
            base.logits_on_tape(&mut tape, &bound, seq, Some(&ctx), Some((t - 1, t)))?
        }
    };
    Ok(tape.value(logits).data().iter().map(|&v| v.as_f64()).collect())
}

/// Ties resolve to the lowest id, keeping greedy decoding deterministic.
fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn sample_token(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let maxv = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - maxv) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &e) in exps.iter().enumerate() {
        u -= e;
        if u <= 0.0 {
            return i;
        }
    }
    exps.len() - 1
}
