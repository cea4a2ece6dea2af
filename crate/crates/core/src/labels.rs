//! Operation label vocabulary.

use serde::{Deserialize, Serialize};
use std::fmt;

/// One of the packaging operation identifiers (100..=1000 in steps of 100, plus 8100 "Others").
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct OperationId(u32);

/// The "Others" class. Ingested and classified, never synthesized.
pub const OTHERS: OperationId = OperationId(8100);

/// Number of classes the classifier predicts.
pub const NUM_CLASSES: usize = 11;

/// Number of classes the generator is conditioned on (100..=1000).
pub const NUM_GENERATED_CLASSES: usize = 10;

impl OperationId {
    pub fn new(raw: u32) -> Option<Self> {
        LabelSet::IDS.iter().copied().find(|id| id.0 == raw)
    }

    pub fn raw(self) -> u32 {
        self.0
    }

    /// Class index in 0..11 following ascending id order.
    pub fn index(self) -> usize {
        LabelSet::index(self).expect("OperationId is always a member of the label set")
    }

    pub fn is_generatable(self) -> bool {
        self != OTHERS
    }
}

impl fmt::Display for OperationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl TryFrom<u32> for OperationId {
    type Error = String;

    fn try_from(raw: u32) -> Result<Self, Self::Error> {
        OperationId::new(raw).ok_or_else(|| format!("unknown operation id {raw}"))
    }
}

impl From<OperationId> for u32 {
    fn from(id: OperationId) -> u32 {
        id.0
    }
}

/// The fixed, ascending set of operation ids.
pub struct LabelSet;

impl LabelSet {
    pub const IDS: [OperationId; NUM_CLASSES] = [
        OperationId(100),
        OperationId(200),
        OperationId(300),
        OperationId(400),
        OperationId(500),
        OperationId(600),
        OperationId(700),
        OperationId(800),
        OperationId(900),
        OperationId(1000),
        OperationId(8100),
    ];

    pub fn index(id: OperationId) -> Option<usize> {
        Self::IDS.iter().position(|&x| x == id)
    }

    pub fn id(index: usize) -> Option<OperationId> {
        Self::IDS.get(index).copied()
    }

    /// Ids the generator may emit, in ascending order.
    pub fn generatable() -> impl Iterator<Item = OperationId> {
        Self::IDS.into_iter().filter(|id| id.is_generatable())
    }

    pub fn contains_raw(raw: u32) -> bool {
        OperationId::new(raw).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_set_is_sorted_bijection() {
        assert_eq!(LabelSet::IDS.len(), 11);
        assert!(LabelSet::IDS.windows(2).all(|w| w[0] < w[1]));
        for (i, id) in LabelSet::IDS.iter().enumerate() {
            assert_eq!(id.index(), i);
            assert_eq!(LabelSet::id(i), Some(*id));
        }
        assert_eq!(LabelSet::id(11), None);
    }

    #[test]
    fn unknown_ids_rejected() {
        assert!(OperationId::new(9999).is_none());
        assert!(OperationId::new(0).is_none());
        assert!(OperationId::new(8100).is_some());
        assert_eq!(LabelSet::generatable().count(), NUM_GENERATED_CLASSES);
    }
}
