//! Coupling-layer partitions: checkerboard (spatial parity) and
//! channel-halving splits, realized as dense 0/1 masks over `[C,H,W]`.
//!
//! Mask value 1 marks the passive partition (left unchanged, feeds the
//! conditioning network); 0 marks the active partition (transformed
//! elementwise). Flipping the parity bit complements the partition.

use crate::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitPattern {
    /// Passive where `(h + w) % 2 == parity`.
    Checkerboard { parity: u8 },
    /// Parity 0: the first ⌊C/2⌋ channels are passive; parity 1 swaps
    /// the roles.
    Channel { parity: u8 },
}

impl SplitPattern {
    /// Dense passive mask over one example: shape `[C,H,W]`, entries in
    /// {0.0, 1.0}, where 1 marks the passive partition.
    pub fn passive_mask(&self, shape: &[usize]) -> Tensor {
        assert_eq!(shape.len(), 3, "split mask is defined over [C,H,W]");
        let c_half = shape[0] / 2;
        Tensor::from_fn(shape, |idx| match *self {
            SplitPattern::Checkerboard { parity } => {
                if (idx[1] + idx[2]) % 2 == parity as usize {
                    1.0
                } else {
                    0.0
                }
            }
            SplitPattern::Channel { parity } => {
                let in_first_half = idx[0] < c_half;
                if in_first_half == (parity == 0) {
                    1.0
                } else {
                    0.0
                }
            }
        })
    }

    /// Number of passive elements per example.
    pub fn passive_count(&self, shape: &[usize]) -> usize {
        self.passive_mask(shape)
            .data()
            .iter()
            .filter(|&&v| v == 1.0)
            .count()
    }

    /// The same pattern with the complementary partition.
    pub fn flipped(&self) -> Self {
        match *self {
            SplitPattern::Checkerboard { parity } => SplitPattern::Checkerboard {
                parity: 1 - (parity & 1),
            },
            SplitPattern::Channel { parity } => SplitPattern::Channel {
                parity: 1 - (parity & 1),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_are_disjoint_and_exhaustive() {
        let shape = [3usize, 4, 5];
        for pattern in [
            SplitPattern::Checkerboard { parity: 0 },
            SplitPattern::Checkerboard { parity: 1 },
            SplitPattern::Channel { parity: 0 },
            SplitPattern::Channel { parity: 1 },
        ] {
            let m = pattern.passive_mask(&shape);
            let f = pattern.flipped().passive_mask(&shape);
            for (a, b) in m.data().iter().zip(f.data()) {
                assert!((a == &1.0) ^ (b == &1.0), "masks must complement");
            }
        }
    }

    #[test]
    fn checkerboard_alternates_by_spatial_parity() {
        let m = SplitPattern::Checkerboard { parity: 0 }.passive_mask(&[1, 2, 2]);
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 1.0]);
        let m1 = SplitPattern::Checkerboard { parity: 1 }.passive_mask(&[1, 2, 1]);
        assert_eq!(m1.data(), &[0.0, 1.0]);
    }

    #[test]
    fn channel_split_takes_the_first_half() {
        let m = SplitPattern::Channel { parity: 0 }.passive_mask(&[4, 1, 2]);
        assert_eq!(m.data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(
            SplitPattern::Channel { parity: 0 }.passive_count(&[4, 1, 2]),
            4
        );
        // Odd channel counts leave the extra channel active for parity
        // 0 and passive for parity 1; one channel yields an empty
        // passive set under parity 0.
        assert_eq!(
            SplitPattern::Channel { parity: 0 }.passive_count(&[1, 2, 2]),
            0
        );
        assert_eq!(
            SplitPattern::Channel { parity: 1 }.passive_count(&[1, 2, 2]),
            4
        );
    }

    #[test]
    fn merge_by_mask_reconstructs_exactly() {
        let shape = [2usize, 3, 3];
        let x = Tensor::from_fn(&shape, |i| (i[0] * 9 + i[1] * 3 + i[2]) as f64);
        let m = SplitPattern::Checkerboard { parity: 1 }.passive_mask(&shape);
        let passive = x.zip_map(&m, |x, m| x * m);
        let active = x.zip_map(&m, |x, m| x * (1.0 - m));
        let merged = passive.zip_map(&active, |a, b| a + b);
        assert_eq!(merged, x);
    }
}
