//! Closed-form attention-score counts for each mechanism.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::Mechanism;

/// Attention variants distinguished by cost. `Alternating` reports the
/// larger of its two layer types, which bounds the peak score memory of an
/// alternating encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Intra,
    Inter,
    Alternating,
    Standard,
    TwoAxis,
    Bottleneck,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 6] = [
        AttentionKind::Intra,
        AttentionKind::Inter,
        AttentionKind::Alternating,
        AttentionKind::Standard,
        AttentionKind::TwoAxis,
        AttentionKind::Bottleneck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Intra => "intra",
            AttentionKind::Inter => "inter",
            AttentionKind::Alternating => "alternating",
            AttentionKind::Standard => "standard",
            AttentionKind::TwoAxis => "two_axis",
            AttentionKind::Bottleneck => "bottleneck",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().replace('_', "-") == s)
            .ok_or_else(|| Error::config(format!("unknown attention mechanism '{s}'")))
    }
}

impl From<Mechanism> for AttentionKind {
    fn from(m: Mechanism) -> Self {
        match m {
            Mechanism::Alternating => AttentionKind::Alternating,
            Mechanism::Standard => AttentionKind::Standard,
            Mechanism::TwoAxis => AttentionKind::TwoAxis,
            Mechanism::Bottleneck => AttentionKind::Bottleneck,
        }
    }
}

/// Analytic and measured cost of one attention block at a sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub mechanism: AttentionKind,
    pub channels: usize,
    pub n_patches: usize,
    pub d_e: usize,
    pub score_elements: u64,
    pub score_flops: u64,
    pub measured_ns: Option<u64>,
    pub measured_bytes: Option<u64>,
}

/// Number of (query, key) score entries one block materializes per example.
///
/// Intra `C·Np²`, inter `C²·Np`, standard `(C·Np)²`, two-axis
/// `C·Np·(C+Np)`. Bottleneck attends once over pooled channels and once
/// over channel-pooled patches, giving `C² + Np²`.
pub fn score_elements(kind: AttentionKind, channels: usize, n_patches: usize) -> u64 {
    let (c, n) = (channels as u64, n_patches as u64);
    match kind {
        AttentionKind::Intra => c * n * n,
        AttentionKind::Inter => c * c * n,
        AttentionKind::Alternating => (c * n * n).max(c * c * n),
        AttentionKind::Standard => (c * n) * (c * n),
        AttentionKind::TwoAxis => c * n * (c + n),
        AttentionKind::Bottleneck => c * c + n * n,
    }
}

pub fn attention_cost(kind: AttentionKind, channels: usize, n_patches: usize, d_e: usize) -> Result<CostReport> {
    if channels == 0 || n_patches == 0 || d_e == 0 {
        return Err(Error::contract("attention_cost arguments must be positive"));
    }
    let score_elements = score_elements(kind, channels, n_patches);
    Ok(CostReport {
        mechanism: kind,
        channels,
        n_patches,
        d_e,
        score_elements,
        score_flops: score_elements * d_e as u64,
        measured_ns: None,
        measured_bytes: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_point_counts() {
        assert_eq!(score_elements(AttentionKind::Standard, 64, 20), 1_638_400);
        assert_eq!(score_elements(AttentionKind::Intra, 64, 20), 25_600);
        assert_eq!(score_elements(AttentionKind::Inter, 64, 20), 81_920);
        assert_eq!(score_elements(AttentionKind::Alternating, 64, 20), 81_920);
        assert_eq!(
            score_elements(AttentionKind::Standard, 64, 20) / score_elements(AttentionKind::Alternating, 64, 20),
            20
        );
    }

    #[test]
    fn single_channel_collapse() {
        for n in 1..6 {
            let sq = (n * n) as u64;
            assert_eq!(score_elements(AttentionKind::Intra, 1, n), sq);
            assert_eq!(score_elements(AttentionKind::Inter, n, 1), sq);
            assert_eq!(score_elements(AttentionKind::Standard, 1, n), sq);
        }
    }

    #[test]
    fn flops_scale_with_width() {
        let r = attention_cost(AttentionKind::TwoAxis, 3, 4, 8).unwrap();
        assert_eq!(r.score_elements, 3 * 4 * 7);
        assert_eq!(r.score_flops, 3 * 4 * 7 * 8);
        assert!(attention_cost(AttentionKind::Intra, 0, 4, 8).is_err());
    }

    #[test]
    fn parse_names() {
        assert_eq!("two-axis".parse::<AttentionKind>().unwrap(), AttentionKind::TwoAxis);
        assert_eq!("bottleneck".parse::<AttentionKind>().unwrap(), AttentionKind::Bottleneck);
        assert!("linear".parse::<AttentionKind>().is_err());
    }
}
