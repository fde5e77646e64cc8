//! Generation backends: the three-call contract every record passes
//! through (cue detection, trait identification, styled response) and the
//! hermetic deterministic implementation.

use crate::error::{Error, Result};
use crate::pole::{TraitActivation, TraitPole};
use crate::synth::corpus;

/// One record's worth of generation, split into the three calls so faults
/// can be localized. `seed` lets stochastic backends vary per record; pure
/// backends ignore it.
pub trait GeneratorBackend {
    /// Read the query and produce (social_cue, task_cue).
    fn detect_situation_cues(&self, query: &str, seed: u64) -> Result<(String, String)>;

    /// Map the cue pair to the active trait poles. May return an empty or
    /// mutually exclusive set; the caller rejects those.
    fn identify_traits(&self, social_cue: &str, task_cue: &str, seed: u64) -> Result<Vec<TraitPole>>;

    /// Produce the response styled by the validated activation vector.
    fn generate_response(
        &self,
        query: &str,
        social_cue: &str,
        task_cue: &str,
        traits: &TraitActivation,
        seed: u64,
    ) -> Result<String>;
}

/// Offline backend: a pure function of the query text. Class membership is
/// recovered from the query's keyword, cues are fixed per class, and the
/// task cue carries the class tag forward to `identify_traits`.
#[derive(Clone, Copy, Debug, Default)]
pub struct DeterministicBackend;

impl GeneratorBackend for DeterministicBackend {
    fn detect_situation_cues(&self, query: &str, _seed: u64) -> Result<(String, String)> {
        if query.trim().is_empty() {
            return Err(Error::InvalidInput("query must be non-empty".into()));
        }
        let class = corpus::detect_class(query);
        Ok((corpus::social_cue(&class).to_string(), corpus::task_cue(&class)))
    }

    fn identify_traits(&self, _social_cue: &str, task_cue: &str, _seed: u64) -> Result<Vec<TraitPole>> {
        let tag = corpus::parse_scenario_tag(task_cue).ok_or_else(|| Error::ParseCompletion {
            reason: "task cue lacks a (scenario: ...) tag".into(),
            raw: task_cue.to_string(),
        })?;
        let class = corpus::ClassTag::from_tag(tag).ok_or_else(|| Error::ParseCompletion {
            reason: format!("unknown scenario tag {:?}", tag),
            raw: task_cue.to_string(),
        })?;
        Ok(class.poles())
    }

    fn generate_response(
        &self,
        _query: &str,
        _social_cue: &str,
        _task_cue: &str,
        traits: &TraitActivation,
        _seed: u64,
    ) -> Result<String> {
        if traits.is_zero() {
            return Err(Error::InvalidInput("cannot style a response with no active poles".into()));
        }
        Ok(corpus::styled_response(traits))
    }
}
