//! Stage shape law of the multi-granularity image encoder.
//!
//! Stage `s ∈ 1..=4` emits `C·s` channels. Volumetric inputs are downsampled
//! by `2^s` per spatial axis, planar inputs by `2^(s+1)`. The first three
//! stages must divide exactly; the deepest stage floors an odd extent the way
//! a stride-2 convolution does (`D = 24` gives depth 1 at stage 4).

use serde::{Deserialize, Serialize};

use crate::error::{CfcmlError, Result};

pub const N_STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialMode {
    /// 3-D volumes (`H × W × D`).
    Volumetric,
    /// 2-D images (`H × W`, usually 3 channels).
    Planar,
}

impl SpatialMode {
    fn stage_factor(self, stage: usize) -> usize {
        match self {
            SpatialMode::Volumetric => 1 << stage,
            SpatialMode::Planar => 1 << (stage + 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShapeLaw {
    /// Stage-1 channel count `C`.
    pub base_channels: usize,
    pub mode: SpatialMode,
    /// When set, an axis that has reached extent 1 stops halving instead of
    /// failing. Only meant for micro models whose inputs are too small for
    /// four exact halvings.
    pub saturate: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub channels: usize,
    pub spatial: Vec<usize>,
}

impl StageShape {
    /// Number of tokens after flattening the spatial axes.
    pub fn tokens(&self) -> usize {
        self.spatial.iter().product()
    }
}

impl StageShapeLaw {
    pub fn new(base_channels: usize, mode: SpatialMode) -> Self {
        Self {
            base_channels,
            mode,
            saturate: false,
        }
    }

    pub fn saturating(mut self) -> Self {
        self.saturate = true;
        self
    }

    /// Output shape of stage `stage` (1-based) for an input with spatial
    /// dims `input`.
    pub fn stage_shape(&self, stage: usize, input: &[usize]) -> Result<StageShape> {
        if !(1..=N_STAGES).contains(&stage) {
            return Err(CfcmlError::Shape(format!(
                "stage {stage} outside 1..={N_STAGES}"
            )));
        }
        if input.is_empty() || input.contains(&0) {
            return Err(CfcmlError::Shape(format!("bad input dims {input:?}")));
        }
        let factor = self.mode.stage_factor(stage);
        let exact = self.mode.stage_factor(stage.min(N_STAGES - 1));
        let spatial = input
            .iter()
            .map(|&e| {
                if e % exact == 0 && e / factor > 0 {
                    Ok(e / factor)
                } else if self.saturate {
                    saturating_div(e, factor)
                } else {
                    Err(())
                }
                .map_err(|_| {
                    CfcmlError::Shape(format!(
                        "input dims {input:?}: extent {e} does not admit stage {stage} (needs a multiple of {exact})"
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StageShape {
            channels: self.base_channels * stage,
            spatial,
        })
    }

    /// Shapes of all four stages; fails if any stage is inadmissible.
    pub fn all_stages(&self, input: &[usize]) -> Result<Vec<StageShape>> {
        (1..=N_STAGES).map(|s| self.stage_shape(s, input)).collect()
    }

    /// Per-axis block size of the downsampling into `stage` (from the raw
    /// input for stage 1). A flooring stage drops the trailing remainder.
    pub fn block_factors(&self, stage: usize, input: &[usize]) -> Result<Vec<usize>> {
        let prev = if stage == 1 {
            input.to_vec()
        } else {
            self.stage_shape(stage - 1, input)?.spatial
        };
        let next = self.stage_shape(stage, input)?.spatial;
        let nominal = if stage == 1 { self.mode.stage_factor(1) } else { 2 };
        Ok(prev
            .iter()
            .zip(&next)
            .map(|(&p, &n)| if n * nominal <= p { nominal } else { p / n })
            .collect())
    }
}

/// Repeated halving that pins extent 1 and rejects odd extents above 1.
fn saturating_div(mut e: usize, factor: usize) -> Result<usize, ()> {
    let mut f = factor;
    while f > 1 {
        if e > 1 {
            if e % 2 != 0 {
                return Err(());
            }
            e /= 2;
        }
        f /= 2;
    }
    Ok(e)
}

/// Free-function form of [`StageShapeLaw::stage_shape`].
pub fn stage_shape(stage: usize, input: &[usize], law: &StageShapeLaw) -> Result<StageShape> {
    law.stage_shape(stage, input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn volumetric_examples() {
        let law = StageShapeLaw::new(16, SpatialMode::Volumetric);
        let s2 = law.stage_shape(2, &[128, 128, 24]).unwrap();
        assert_eq!(s2.channels, 32);
        assert_eq!(s2.spatial, vec![32, 32, 6]);
        let s1 = law.stage_shape(1, &[128, 128, 24]).unwrap();
        assert_eq!(s1.tokens(), 49_152);
        let s4 = law.stage_shape(4, &[128, 128, 24]).unwrap();
        assert_eq!((s4.channels, s4.spatial), (64, vec![8, 8, 1]));
        assert_eq!(law.block_factors(4, &[128, 128, 24]).unwrap(), vec![2, 2, 2]);
        let s3 = law.stage_shape(3, &[8, 8, 8]).unwrap();
        assert_eq!((s3.channels, s3.spatial), (48, vec![1, 1, 1]));
    }

    #[test]
    fn planar_example() {
        let law = StageShapeLaw::new(96, SpatialMode::Planar);
        let s1 = law.stage_shape(1, &[224, 224]).unwrap();
        assert_eq!((s1.channels, s1.spatial), (96, vec![56, 56]));
        let s4 = law.stage_shape(4, &[224, 224]).unwrap();
        assert_eq!((s4.channels, s4.spatial), (384, vec![7, 7]));
    }

    #[test]
    fn indivisible_depth_is_rejected() {
        let law = StageShapeLaw::new(16, SpatialMode::Volumetric);
        assert!(law.stage_shape(4, &[128, 128, 25]).is_err());
        assert!(law.stage_shape(1, &[128, 128, 25]).is_err());
        assert!(law.stage_shape(4, &[8, 8, 8]).is_err());
        assert!(law.all_stages(&[128, 128, 25]).is_err());
        assert!(law.stage_shape(0, &[16]).is_err());
        assert!(law.stage_shape(5, &[64]).is_err());
    }

    #[test]
    fn saturation_pins_unit_extents() {
        let law = StageShapeLaw::new(2, SpatialMode::Volumetric).saturating();
        let shapes = law.all_stages(&[4, 4]).unwrap();
        let spatial: Vec<Vec<usize>> = shapes.iter().map(|s| s.spatial.clone()).collect();
        assert_eq!(spatial, vec![vec![2, 2], vec![1, 1], vec![1, 1], vec![1, 1]]);
        assert_eq!(law.block_factors(3, &[4, 4]).unwrap(), vec![1, 1]);
        let planar = StageShapeLaw::new(2, SpatialMode::Planar).saturating();
        assert_eq!(planar.block_factors(1, &[2, 8]).unwrap(), vec![2, 4]);
        assert!(law.stage_shape(2, &[6, 4]).is_err());
    }

    proptest! {
        #[test]
        fn law_holds_for_admitted_inputs(
            k in prop::collection::vec(1usize..5, 1..4),
            c in 1usize..32,
            planar in any::<bool>(),
        ) {
            let mode = if planar { SpatialMode::Planar } else { SpatialMode::Volumetric };
            let top = if planar { 32 } else { 16 };
            let input: Vec<usize> = k.iter().map(|m| m * top).collect();
            let law = StageShapeLaw::new(c, mode);
            for s in 1..=N_STAGES {
                let shape = law.stage_shape(s, &input).unwrap();
                prop_assert_eq!(shape.channels, c * s);
                let f = if planar { 1 << (s + 1) } else { 1 << s };
                for (o, i) in shape.spatial.iter().zip(&input) {
                    prop_assert_eq!(o * f, *i);
                }
            }
        }
    }
}
