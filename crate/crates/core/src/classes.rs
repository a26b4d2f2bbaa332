use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const NUM_CLASSES: usize = 6;

/// Land-cover classes in canonical column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Water,
    Bog,
    ChannelFen,
    ForestDense,
    ForestSparse,
    Wetland,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Water,
        ClassLabel::Bog,
        ClassLabel::ChannelFen,
        ClassLabel::ForestDense,
        ClassLabel::ForestSparse,
        ClassLabel::Wetland,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Water => "water",
            ClassLabel::Bog => "bog",
            ClassLabel::ChannelFen => "channel_fen",
            ClassLabel::ForestDense => "forest_dense",
            ClassLabel::ForestSparse => "forest_sparse",
            ClassLabel::Wetland => "wetland",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownClass(pub String);

impl fmt::Display for UnknownClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown class name {:?}", self.0)
    }
}

impl std::error::Error for UnknownClass {}

impl FromStr for ClassLabel {
    type Err = UnknownClass;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| UnknownClass(s.to_string()))
    }
}

/// Per-class sample counts in canonical order.
pub fn class_counts(labels: impl IntoIterator<Item = ClassLabel>) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for l in labels {
        counts[l.id()] += 1;
    }
    counts
}
