use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

/// Model region an op is attributed to when counting retained buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    /// Input token embedding of the backbone.
    Embedding,
    /// Backbone encoder layers.
    Backbone,
    /// Side-network encoder layers.
    Side,
    /// Fusion gates, down-projections, bottleneck projectors, mask tokens and generation blocks.
    Projectors,
    /// GAP + linear heads.
    Heads,
    /// Loss reductions.
    Loss,
}

impl Segment {
    pub const ALL: [Segment; 6] = [
        Segment::Embedding,
        Segment::Backbone,
        Segment::Side,
        Segment::Projectors,
        Segment::Heads,
        Segment::Loss,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Embedding => "embedding",
            Segment::Backbone => "backbone",
            Segment::Side => "side",
            Segment::Projectors => "projectors",
            Segment::Heads => "heads",
            Segment::Loss => "loss",
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stored-scalar counts for one segment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentCounts {
    /// Saved layer inputs, the `{a}` set.
    pub activations: usize,
    /// Saved nonlinearity derivatives, the `{σ'}` set.
    pub act_derivs: usize,
}

impl SegmentCounts {
    pub fn total(&self) -> usize {
        self.activations + self.act_derivs
    }
}

impl Add for SegmentCounts {
    type Output = SegmentCounts;
    fn add(self, rhs: SegmentCounts) -> SegmentCounts {
        SegmentCounts {
            activations: self.activations + rhs.activations,
            act_derivs: self.act_derivs + rhs.act_derivs,
        }
    }
}

impl AddAssign for SegmentCounts {
    fn add_assign(&mut self, rhs: SegmentCounts) {
        *self = *self + rhs;
    }
}

/// Scalars currently retained on a tape for the reverse pass.
///
/// Parameter values referenced by the backward rules are not counted: they
/// live in the model regardless of whether a backward pass is pending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLedger {
    pub activations_stored: usize,
    pub act_derivs_stored: usize,
    pub per_segment: BTreeMap<Segment, SegmentCounts>,
}

impl MemoryLedger {
    pub(crate) fn record(&mut self, segment: Segment, activations: usize, act_derivs: usize) {
        let entry = self.per_segment.entry(segment).or_default();
        entry.activations += activations;
        entry.act_derivs += act_derivs;
        self.activations_stored += activations;
        self.act_derivs_stored += act_derivs;
    }

    pub fn total(&self) -> usize {
        self.activations_stored + self.act_derivs_stored
    }

    pub fn segment(&self, segment: Segment) -> SegmentCounts {
        self.per_segment.get(&segment).copied().unwrap_or_default()
    }

    /// True when the totals agree with the per-segment breakdown.
    pub fn is_consistent(&self) -> bool {
        let sum = self.per_segment.values().fold(SegmentCounts::default(), |acc, c| acc + *c);
        sum.activations == self.activations_stored && sum.act_derivs == self.act_derivs_stored
    }
}

impl Add for MemoryLedger {
    type Output = MemoryLedger;
    fn add(mut self, rhs: MemoryLedger) -> MemoryLedger {
        for (seg, c) in rhs.per_segment {
            self.record(seg, c.activations, c.act_derivs);
        }
        self
    }
}
