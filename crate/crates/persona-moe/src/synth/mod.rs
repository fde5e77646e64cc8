//! Trait-labeled data synthesis: drive a generation backend over a query
//! list, validate every candidate, and keep strict accounting of what was
//! rejected and why.

pub mod backend;
pub mod corpus;
pub mod http;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pole::{TraitActivation, TraitPole};
pub use backend::{DeterministicBackend, GeneratorBackend};
pub use http::{HttpBackend, HttpConfig};

/// One training record. `traits` is the human-readable pole list and `p`
/// the wire-format activation vector; they must describe the same set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub query: String,
    pub social_cue: String,
    pub task_cue: String,
    pub traits: Vec<TraitPole>,
    pub response: String,
    pub p: TraitActivation,
}

impl Record {
    pub fn validate(&self) -> Result<()> {
        if self.query.trim().is_empty() {
            return Err(Error::InvalidRecord("query is empty".into()));
        }
        if self.response.trim().is_empty() {
            return Err(Error::InvalidRecord("response is empty".into()));
        }
        if self.p.is_zero() {
            return Err(Error::InvalidRecord("activation vector is all-zero".into()));
        }
        let from_traits = TraitActivation::from_poles(&self.traits)?;
        if from_traits != self.p {
            return Err(Error::InvalidRecord(format!(
                "trait list {:?} disagrees with activation vector {:?}",
                self.traits,
                self.p.bits()
            )));
        }
        Ok(())
    }
}

/// Where every input query ended up. `input` must equal `accepted` plus
/// the four rejection buckets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthStats {
    pub input: usize,
    pub accepted: usize,
    pub rejected_zero_p: usize,
    pub rejected_exclusion: usize,
    pub rejected_parse: usize,
    pub rejected_transport: usize,
}

impl SynthStats {
    pub fn rejected_total(&self) -> usize {
        self.rejected_zero_p + self.rejected_exclusion + self.rejected_parse + self.rejected_transport
    }

    pub fn consistent(&self) -> bool {
        self.input == self.accepted + self.rejected_total()
    }
}

/// Route a backend failure into its rejection bucket; anything that is not
/// a transport or parse problem is a caller bug and propagates.
fn classify_rejection(err: Error, stats: &mut SynthStats) -> Result<()> {
    match err {
        Error::Backend(_) => {
            stats.rejected_transport += 1;
            Ok(())
        }
        Error::ParseCompletion { .. } => {
            stats.rejected_parse += 1;
            Ok(())
        }
        other => Err(other),
    }
}

/// Run the three-call generation flow for each query and keep the records
/// that survive validation. Output order follows input order; with a pure
/// backend the result is a function of (queries, seed) alone.
pub fn synthesize_dataset<B: GeneratorBackend + ?Sized>(
    backend: &B,
    queries: &[String],
    seed: u64,
) -> Result<(Vec<Record>, SynthStats)> {
    let mut stats = SynthStats { input: queries.len(), ..SynthStats::default() };
    let mut records = Vec::with_capacity(queries.len());
    for (idx, query) in queries.iter().enumerate() {
        let record_seed = seed.wrapping_add(idx as u64);
        let (social_cue, task_cue) = match backend.detect_situation_cues(query, record_seed) {
            Ok(cues) => cues,
            Err(e) => {
                classify_rejection(e, &mut stats)?;
                continue;
            }
        };
        let poles = match backend.identify_traits(&social_cue, &task_cue, record_seed) {
            Ok(p) => p,
            Err(e) => {
                classify_rejection(e, &mut stats)?;
                continue;
            }
        };
        if poles.is_empty() {
            stats.rejected_zero_p += 1;
            continue;
        }
        let p = match TraitActivation::from_poles(&poles) {
            Ok(p) => p,
            Err(_) => {
                stats.rejected_exclusion += 1;
                continue;
            }
        };
        let response = match backend.generate_response(query, &social_cue, &task_cue, &p, record_seed) {
            Ok(r) => r,
            Err(e) => {
                classify_rejection(e, &mut stats)?;
                continue;
            }
        };
        let record = Record {
            query: query.clone(),
            social_cue,
            task_cue,
            traits: p.poles(),
            response,
            p,
        };
        match record.validate() {
            Ok(()) => {
                records.push(record);
                stats.accepted += 1;
            }
            Err(_) => stats.rejected_parse += 1,
        }
    }
    debug_assert!(stats.consistent());
    Ok((records, stats))
}

/// Serialize records as JSONL with a stable field order.
pub fn to_jsonl_string(records: &[Record]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(records: &[Record], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl_string(records)?.as_bytes())?;
    Ok(())
}

/// Strict JSONL reader: every line must parse as a `Record` with no
/// unknown fields and pass validation. Errors name the offending line.
pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let f = fs::File::open(path)?;
    let reader = BufReader::new(f);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidRecord(format!("line {}: {}", i + 1, e)))?;
        record
            .validate()
            .map_err(|e| Error::InvalidRecord(format!("line {}: {}", i + 1, e)))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_stats(stats: &SynthStats, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(stats)?)?;
    Ok(())
}
