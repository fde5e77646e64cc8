//! The hermetic query/response universe: twelve scenario classes (ten
//! single-pole, two multi-trait), keyword detectors, per-pole lexical
//! markers, and deterministic query generation.
//!
//! Every class owns a query keyword no other class's template uses, so
//! class membership is machine-checkable from the query alone. Every pole
//! owns a marker adverb that appears in a response iff the pole is active,
//! which makes trait expression machine-checkable from the response alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pole::{TraitActivation, TraitPole};

/// Marker adverbs in canonical pole order. A response expresses pole i iff
/// it contains `MARKERS[i]`. Deliberately short, and none repeats a letter
/// back to back: a byte-level model has to spell these greedily, token by
/// token, and doubled letters invite stutter under greedy decoding.
pub const MARKERS: [&str; 10] = [
    "vividly",
    "plainly",
    "neatly",
    "roughly",
    "boldly",
    "softly",
    "warmly",
    "bluntly",
    "tensely",
    "gently",
];

/// Adverbs the neutral base model rotates through during its warm-up; they
/// occupy the marker slot without committing to any pole.
pub const NEUTRAL_MARKERS: [&str; 3] = ["helpfully", "directly", "clearly"];

/// Per-class query keywords in canonical pole order; disjoint from each
/// other, from all templates of other classes, and from every marker.
pub const QUERY_KEYWORDS: [&str; 10] = [
    "brainstorm",
    "familiar",
    "checklist",
    "improvise",
    "party",
    "solitude",
    "comfort",
    "critique",
    "worries",
    "reassure",
];

pub fn marker(pole: TraitPole) -> &'static str {
    MARKERS[pole.index()]
}

/// A scenario class: the latent label behind a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassTag {
    Pole(TraitPole),
    /// Canceled work shift: needs structure, empathy, and steadiness.
    AnxiousWork,
    /// Free-flowing family storytelling: novelty plus low structure.
    FamilyStory,
    /// Fallback for text no detector matches.
    General,
    /// Test hook: backend reports no active poles.
    FaultZeroP,
    /// Test hook: backend reports both poles of one trait.
    FaultDualPole,
}

/// Classes the builtin generator cycles through, in wheel order.
pub const GENERATED_CLASSES: [ClassTag; 12] = [
    ClassTag::Pole(TraitPole::HighO),
    ClassTag::Pole(TraitPole::LowO),
    ClassTag::Pole(TraitPole::HighC),
    ClassTag::Pole(TraitPole::LowC),
    ClassTag::Pole(TraitPole::HighE),
    ClassTag::Pole(TraitPole::LowE),
    ClassTag::Pole(TraitPole::HighA),
    ClassTag::Pole(TraitPole::LowA),
    ClassTag::Pole(TraitPole::HighN),
    ClassTag::Pole(TraitPole::LowN),
    ClassTag::AnxiousWork,
    ClassTag::FamilyStory,
];

impl ClassTag {
    /// Stable tag string, embedded in task cues as `(scenario: tag)`.
    pub fn tag(&self) -> &'static str {
        match self {
            ClassTag::Pole(p) => p.label(),
            ClassTag::AnxiousWork => "anxious-work",
            ClassTag::FamilyStory => "family-story",
            ClassTag::General => "general",
            ClassTag::FaultZeroP => "fault-zero-p",
            ClassTag::FaultDualPole => "fault-dual-pole",
        }
    }

    pub fn from_tag(s: &str) -> Option<ClassTag> {
        if let Ok(p) = TraitPole::parse(s) {
            return Some(ClassTag::Pole(p));
        }
        match s {
            "anxious-work" => Some(ClassTag::AnxiousWork),
            "family-story" => Some(ClassTag::FamilyStory),
            "general" => Some(ClassTag::General),
            "fault-zero-p" => Some(ClassTag::FaultZeroP),
            "fault-dual-pole" => Some(ClassTag::FaultDualPole),
            _ => None,
        }
    }

    /// The poles this class activates. Fault classes return deliberately
    /// invalid sets (empty / mutually exclusive) for rejection tests.
    pub fn poles(&self) -> Vec<TraitPole> {
        match self {
            ClassTag::Pole(p) => vec![*p],
            ClassTag::AnxiousWork => vec![TraitPole::HighC, TraitPole::HighA, TraitPole::LowN],
            ClassTag::FamilyStory => vec![TraitPole::HighO, TraitPole::LowC],
            ClassTag::General => vec![TraitPole::HighC, TraitPole::HighA],
            ClassTag::FaultZeroP => vec![],
            ClassTag::FaultDualPole => vec![TraitPole::HighO, TraitPole::LowO],
        }
    }

    pub fn activation(&self) -> Option<TraitActivation> {
        TraitActivation::from_poles(&self.poles()).ok()
    }
}

/// Classify a query by its keyword. Fault hooks win, then the multi-trait
/// phrases, then single-pole keywords; anything else is `General`.
pub fn detect_class(query: &str) -> ClassTag {
    if query.contains("[[fault:zero-p]]") {
        return ClassTag::FaultZeroP;
    }
    if query.contains("[[fault:dual-pole]]") {
        return ClassTag::FaultDualPole;
    }
    if query.contains("shift at work") {
        return ClassTag::AnxiousWork;
    }
    if query.contains("family story") {
        return ClassTag::FamilyStory;
    }
    for (i, kw) in QUERY_KEYWORDS.iter().enumerate() {
        if query.contains(kw) {
            return ClassTag::Pole(TraitPole::ALL[i]);
        }
    }
    ClassTag::General
}

pub fn social_cue(class: &ClassTag) -> &'static str {
    match class {
        ClassTag::Pole(TraitPole::HighO) => "The speaker invites novel, exploratory thinking.",
        ClassTag::Pole(TraitPole::LowO) => "The speaker prefers proven, familiar ground.",
        ClassTag::Pole(TraitPole::HighC) => "The speaker expects structure and reliability.",
        ClassTag::Pole(TraitPole::LowC) => "The speaker welcomes a loose, playful take.",
        ClassTag::Pole(TraitPole::HighE) => "The speaker seeks energetic social engagement.",
        ClassTag::Pole(TraitPole::LowE) => "The speaker leans toward reserved, low-key company.",
        ClassTag::Pole(TraitPole::HighA) => "The speaker needs warmth and empathy.",
        ClassTag::Pole(TraitPole::LowA) => "The speaker asks for unvarnished honesty.",
        ClassTag::Pole(TraitPole::HighN) => "The speaker wants vigilant, threat-alert framing.",
        ClassTag::Pole(TraitPole::LowN) => "The speaker is on edge and needs steadying.",
        ClassTag::AnxiousWork => {
            "The speaker shows anxiety and uncertainty after a sudden scheduling change and needs empathy."
        }
        ClassTag::FamilyStory => "The speaker is in a warm storytelling mood.",
        ClassTag::General | ClassTag::FaultZeroP | ClassTag::FaultDualPole => "The speaker makes a plain request.",
    }
}

pub fn task_cue(class: &ClassTag) -> String {
    let task = match class {
        ClassTag::Pole(TraitPole::HighO) => "generate unconventional possibilities",
        ClassTag::Pole(TraitPole::LowO) => "stay with established methods",
        ClassTag::Pole(TraitPole::HighC) => "organize the steps with care",
        ClassTag::Pole(TraitPole::LowC) => "respond loosely without rigid structure",
        ClassTag::Pole(TraitPole::HighE) => "bring lively social energy",
        ClassTag::Pole(TraitPole::LowE) => "keep the register hushed and low-key",
        ClassTag::Pole(TraitPole::HighA) => "respond with kindness and support",
        ClassTag::Pole(TraitPole::LowA) => "deliver direct critical judgment",
        ClassTag::Pole(TraitPole::HighN) => "surface the risks and concerns",
        ClassTag::Pole(TraitPole::LowN) => "project calm and stability",
        ClassTag::AnxiousWork => "explain workplace policies with empathy and steadiness",
        ClassTag::FamilyStory => "tell an imaginative, free-flowing story",
        ClassTag::General | ClassTag::FaultZeroP | ClassTag::FaultDualPole => "answer simply and accurately",
    };
    format!("(scenario: {}) {}", class.tag(), task)
}

/// Pull the class tag back out of a task cue.
pub fn parse_scenario_tag(task_cue: &str) -> Option<&str> {
    let start = task_cue.find("(scenario: ")? + "(scenario: ".len();
    let rest = &task_cue[start..];
    let end = rest.find(')')?;
    Some(&rest[..end])
}

/// The styled response for an activation vector: marker adverbs of every
/// active pole, in canonical order, in one fixed carrier sentence.
pub fn styled_response(p: &TraitActivation) -> String {
    let ms: Vec<&str> = p.poles().iter().map(|&pole| marker(pole)).collect();
    match ms.len() {
        0 => String::new(),
        1 => format!("I will respond {}.", ms[0]),
        2 => format!("I will respond {} and {}.", ms[0], ms[1]),
        _ => {
            let head = ms[..ms.len() - 1].join(", ");
            format!("I will respond {}, and {}.", head, ms[ms.len() - 1])
        }
    }
}

/// Neutral response k for base warm-up; rotates the three neutral adverbs.
pub fn neutral_response(k: usize) -> String {
    format!("I will respond {}.", NEUTRAL_MARKERS[k % NEUTRAL_MARKERS.len()])
}

const PREFIXES: [&str; 4] = ["Please", "Could you", "I want you to", "Help me"];

const TOPICS: [&str; 32] = [
    "the community garden",
    "the book club",
    "the weekly budget",
    "the science fair",
    "the road trip",
    "the team retreat",
    "the kitchen remodel",
    "the podcast pilot",
    "the chess club",
    "the bake sale",
    "the garage cleanup",
    "the history essay",
    "the robot kit",
    "the neighborhood watch",
    "the art supplies",
    "the hiking plan",
    "the study group",
    "the tiny library",
    "the garden pond",
    "the music recital",
    "the coding workshop",
    "the school play",
    "the flea market",
    "the bike repair",
    "the picnic menu",
    "the volunteer day",
    "the window boxes",
    "the photo archive",
    "the soup recipe",
    "the winter fair",
    "the reading list",
    "the morning plan",
];

/// Topics reserved for held-out prompts; disjoint from `TOPICS`, so no
/// held-out query string can ever occur in a training corpus.
const HELDOUT_TOPICS: [&str; 8] = [
    "the attic studio",
    "the seed swap",
    "the night market",
    "the repair cafe",
    "the canal walk",
    "the spice rack",
    "the quiz night",
    "the mural wall",
];

const ANXIOUS_OPENERS: [&str; 3] = [
    "My shift at work got canceled",
    "They canceled my shift at work",
    "My shift at work just got cut",
];

/// All ten single-pole classes share the same two sentence shapes; only the
/// keyword separates them. A router has to read the keyword, not the
/// phrasing around it. The keyword leads and the shells stay short so its
/// bytes carry real weight in the encoder's mean pool.
fn single_pole_query(kw: &str, topic: &str, shape: usize) -> String {
    if shape == 0 {
        format!("{} angle: thoughts on {}?", kw, topic)
    } else {
        format!("{} route: help with {}.", kw, topic)
    }
}

fn render_query_from(class: &ClassTag, rng: &mut ChaCha8Rng, topics: &[&str]) -> String {
    let prefix = PREFIXES[rng.gen_range(0..PREFIXES.len())];
    let topic = topics[rng.gen_range(0..topics.len())];
    match class {
        ClassTag::Pole(p) => {
            let shape = rng.gen_range(0..2);
            single_pole_query(QUERY_KEYWORDS[p.index()], topic, shape)
        }
        ClassTag::AnxiousWork => {
            let opener = ANXIOUS_OPENERS[rng.gen_range(0..ANXIOUS_OPENERS.len())];
            format!("{} and {} is up in the air; what now?", opener, topic)
        }
        ClassTag::FamilyStory => format!("{} sketch a family story idea involving {}.", prefix, topic),
        ClassTag::General => format!("{} describe {}.", prefix, topic),
        ClassTag::FaultZeroP => format!("[[fault:zero-p]] {} describe {}.", prefix, topic),
        ClassTag::FaultDualPole => format!("[[fault:dual-pole]] {} describe {}.", prefix, topic),
    }
}

/// Render one training query of the given class with slot fills from the rng.
pub fn render_query(class: &ClassTag, rng: &mut ChaCha8Rng) -> String {
    render_query_from(class, rng, &TOPICS)
}

/// n queries cycling the twelve generated classes, slot fills drawn from a
/// ChaCha8 stream. Pure function of (n, seed).
pub fn builtin_queries(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| render_query(&GENERATED_CLASSES[i % GENERATED_CLASSES.len()], &mut rng))
        .collect()
}

/// n fresh queries of one class over the reserved topic pool, on a seed
/// stream separate from `builtin_queries`; held-out prompts can never
/// collide with corpus records.
pub fn queries_for_class(class: &ClassTag, n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n).map(|_| render_query_from(class, &mut rng, &HELDOUT_TOPICS)).collect()
}
