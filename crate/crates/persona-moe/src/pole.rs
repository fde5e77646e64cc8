//! Big Five trait poles and the 10-dimensional activation vector `p`.
//!
//! Index convention, fixed everywhere in the crate:
//! `[highO, lowO, highC, lowC, highE, lowE, highA, lowA, highN, lowN]`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Number of persona experts == number of trait poles.
pub const NUM_POLES: usize = 10;

/// One pole of one Big Five trait.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TraitPole {
    #[serde(rename = "highO")]
    HighO,
    #[serde(rename = "lowO")]
    LowO,
    #[serde(rename = "highC")]
    HighC,
    #[serde(rename = "lowC")]
    LowC,
    #[serde(rename = "highE")]
    HighE,
    #[serde(rename = "lowE")]
    LowE,
    #[serde(rename = "highA")]
    HighA,
    #[serde(rename = "lowA")]
    LowA,
    #[serde(rename = "highN")]
    HighN,
    #[serde(rename = "lowN")]
    LowN,
}

impl TraitPole {
    /// All poles in canonical index order.
    pub const ALL: [TraitPole; NUM_POLES] = [
        TraitPole::HighO,
        TraitPole::LowO,
        TraitPole::HighC,
        TraitPole::LowC,
        TraitPole::HighE,
        TraitPole::LowE,
        TraitPole::HighA,
        TraitPole::LowA,
        TraitPole::HighN,
        TraitPole::LowN,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&p| p == self).expect("pole in ALL")
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("pole index {} out of range 0..{}", i, NUM_POLES)))
    }

    /// Which of the five traits this pole belongs to (0..5: O, C, E, A, N).
    pub fn trait_index(self) -> usize {
        self.index() / 2
    }

    pub fn is_high(self) -> bool {
        self.index() % 2 == 0
    }

    /// Label as persisted in records, e.g. `highO`.
    pub fn label(self) -> &'static str {
        match self {
            TraitPole::HighO => "highO",
            TraitPole::LowO => "lowO",
            TraitPole::HighC => "highC",
            TraitPole::LowC => "lowC",
            TraitPole::HighE => "highE",
            TraitPole::LowE => "lowE",
            TraitPole::HighA => "highA",
            TraitPole::LowA => "lowA",
            TraitPole::HighN => "highN",
            TraitPole::LowN => "lowN",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|p| p.label() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown trait pole {:?}", s)))
    }

    /// Human-readable trait name, for diagnostics.
    pub fn trait_name(self) -> &'static str {
        ["openness", "conscientiousness", "extraversion", "agreeableness", "neuroticism"][self.trait_index()]
    }
}

impl std::fmt::Display for TraitPole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// The binary activation vector p ∈ {0,1}^10.
///
/// Both poles of one trait can never be active together. The all-zero
/// vector is representable (backends can emit it) but record validation
/// filters it before persistence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TraitActivation {
    bits: [u8; NUM_POLES],
}

impl TraitActivation {
    pub fn zero() -> Self {
        Self { bits: [0; NUM_POLES] }
    }

    /// Validate raw bits: entries must be 0/1 and poles mutually exclusive
    /// per trait.
    pub fn from_bits(bits: [u8; NUM_POLES]) -> Result<Self> {
        if let Some(&bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidRecord(format!(
                "activation entries must be 0 or 1, got {}",
                bad
            )));
        }
        for t in 0..NUM_POLES / 2 {
            if bits[2 * t] == 1 && bits[2 * t + 1] == 1 {
                return Err(Error::InvalidRecord(format!(
                    "both poles of {} active",
                    TraitPole::ALL[2 * t].trait_name()
                )));
            }
        }
        Ok(Self { bits })
    }

    /// Build from a pole list (duplicates collapse; exclusion enforced).
    pub fn from_poles(poles: &[TraitPole]) -> Result<Self> {
        let mut bits = [0u8; NUM_POLES];
        for &p in poles {
            bits[p.index()] = 1;
        }
        Self::from_bits(bits)
    }

    pub fn single(pole: TraitPole) -> Self {
        let mut bits = [0u8; NUM_POLES];
        bits[pole.index()] = 1;
        Self { bits }
    }

    pub fn bits(&self) -> &[u8; NUM_POLES] {
        &self.bits
    }

    pub fn get(&self, pole: TraitPole) -> bool {
        self.bits[pole.index()] == 1
    }

    pub fn is_zero(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn count_active(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Active poles in canonical order.
    pub fn poles(&self) -> Vec<TraitPole> {
        TraitPole::ALL.iter().copied().filter(|&p| self.get(p)).collect()
    }
}

impl Serialize for TraitActivation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.bits.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TraitActivation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let bits = <[u8; NUM_POLES]>::deserialize(d)?;
        TraitActivation::from_bits(bits).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order_round_trips() {
        for (i, &p) in TraitPole::ALL.iter().enumerate() {
            assert_eq!(p.index(), i);
            assert_eq!(TraitPole::from_index(i).unwrap(), p);
            assert_eq!(TraitPole::parse(p.label()).unwrap(), p);
        }
        assert_eq!(TraitPole::ALL[0].label(), "highO");
        assert_eq!(TraitPole::ALL[9].label(), "lowN");
    }

    #[test]
    fn serde_uses_pole_labels() {
        let s = serde_json::to_string(&TraitPole::HighA).unwrap();
        assert_eq!(s, "\"highA\"");
        let p: TraitPole = serde_json::from_str("\"lowN\"").unwrap();
        assert_eq!(p, TraitPole::LowN);
    }

    #[test]
    fn exclusion_rejected() {
        let err = TraitActivation::from_poles(&[TraitPole::HighO, TraitPole::LowO]);
        assert!(err.is_err());
        let mut bits = [0u8; NUM_POLES];
        bits[8] = 1;
        bits[9] = 1;
        assert!(TraitActivation::from_bits(bits).is_err());
    }

    #[test]
    fn non_binary_rejected() {
        let mut bits = [0u8; NUM_POLES];
        bits[3] = 2;
        assert!(TraitActivation::from_bits(bits).is_err());
    }

    #[test]
    fn compatible_multi_trait_vectors() {
        // highC + highA + lowN
        let p = TraitActivation::from_poles(&[TraitPole::HighC, TraitPole::HighA, TraitPole::LowN]).unwrap();
        assert_eq!(p.bits(), &[0, 0, 1, 0, 0, 0, 1, 0, 0, 1]);
        // highO + lowC
        let q = TraitActivation::from_poles(&[TraitPole::HighO, TraitPole::LowC]).unwrap();
        assert_eq!(q.bits(), &[1, 0, 0, 1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(q.poles(), vec![TraitPole::HighO, TraitPole::LowC]);
    }

    #[test]
    fn zero_vector_is_representable_but_flagged() {
        let z = TraitActivation::zero();
        assert!(z.is_zero());
        assert_eq!(z.count_active(), 0);
    }

    #[test]
    fn activation_serde_round_trip() {
        let p = TraitActivation::from_poles(&[TraitPole::HighE]).unwrap();
        let js = serde_json::to_string(&p).unwrap();
        assert_eq!(js, "[0,0,0,0,1,0,0,0,0,0]");
        let back: TraitActivation = serde_json::from_str(&js).unwrap();
        assert_eq!(back, p);
        // invalid wire data refuses to deserialize
        assert!(serde_json::from_str::<TraitActivation>("[1,1,0,0,0,0,0,0,0,0]").is_err());
    }
}
