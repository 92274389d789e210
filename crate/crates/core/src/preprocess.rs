//! Per-subject robust intensity normalisation.
//!
//! Inside the brain mask every voxel is standardised with the median and
//! the (consistency-scaled) median absolute deviation, clipped to
//! `[clip_lo, clip_hi]` z-units and mapped linearly onto `[0, 1]`. Voxels
//! outside the mask are zeroed and excluded from all later statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::VolumeGrid;

/// Scale that makes the MAD a consistent estimator of a Gaussian SD.
pub const MAD_CONSISTENCY: f64 = 1.4826;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizationParams {
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub mad_scale: f64,
    /// Voxels strictly above this value belong to the brain.
    pub mask_threshold: f64,
}

impl Default for NormalizationParams {
    fn default() -> Self {
        NormalizationParams {
            clip_lo: -3.0,
            clip_hi: 3.0,
            mad_scale: MAD_CONSISTENCY,
            mask_threshold: 0.0,
        }
    }
}

impl NormalizationParams {
    pub fn validate(&self) -> Result<()> {
        if self.clip_lo.partial_cmp(&self.clip_hi) != Some(std::cmp::Ordering::Less)
            || !self.clip_lo.is_finite()
            || !self.clip_hi.is_finite()
        {
            return Err(Error::Config(format!(
                "clip bounds must satisfy clip_lo < clip_hi, got [{}, {}]",
                self.clip_lo, self.clip_hi
            )));
        }
        if !self.mad_scale.is_finite() || self.mad_scale <= 0.0 {
            return Err(Error::Config("mad_scale must be positive".into()));
        }
        if !self.mask_threshold.is_finite() {
            return Err(Error::Config("mask_threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedVolume {
    pub volume: VolumeGrid,
    pub mask: Vec<bool>,
    pub median: f64,
    pub mad: f64,
    /// Set when the MAD was zero and every masked voxel was mapped to 0.5.
    pub degenerate_mad: bool,
}

pub fn brain_mask(volume: &VolumeGrid, threshold: f64) -> Result<Vec<bool>> {
    let mask: Vec<bool> = volume.data.iter().map(|&v| v > threshold).collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask);
    }
    Ok(mask)
}

/// Median with the even-count midpoint convention. Sorts `values` in place.
pub fn median_in_place(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn normalize_robust(
    volume: &VolumeGrid,
    params: &NormalizationParams,
) -> Result<NormalizedVolume> {
    params.validate()?;
    let mask = brain_mask(volume, params.mask_threshold)?;
    let mut inside: Vec<f64> = volume
        .data
        .iter()
        .zip(&mask)
        .filter_map(|(&v, &m)| m.then_some(v))
        .collect();
    let median = median_in_place(&mut inside);
    for v in inside.iter_mut() {
        *v = (*v - median).abs();
    }
    let mad = median_in_place(&mut inside);

    let degenerate_mad = mad == 0.0;
    let scale = params.mad_scale * mad;
    let span = params.clip_hi - params.clip_lo;
    let data = volume
        .data
        .iter()
        .zip(&mask)
        .map(|(&x, &m)| {
            if !m {
                0.0
            } else if degenerate_mad {
                0.5
            } else {
                let z = ((x - median) / scale).clamp(params.clip_lo, params.clip_hi);
                (z - params.clip_lo) / span
            }
        })
        .collect();
    Ok(NormalizedVolume {
        volume: VolumeGrid {
            shape: volume.shape,
            data,
            affine: volume.affine,
        },
        mask,
        median,
        mad,
        degenerate_mad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nifti::affine;
    use proptest::prelude::*;

    fn vol(values: &[f64]) -> VolumeGrid {
        VolumeGrid::new([values.len(), 1, 1], values.to_vec(), affine::identity()).unwrap()
    }

    #[test]
    fn mask_is_strictly_positive() {
        assert_eq!(
            brain_mask(&vol(&[0.0, 0.5, 1.0]), 0.0).unwrap(),
            vec![false, true, true]
        );
        assert!(matches!(
            brain_mask(&vol(&[0.0; 4]), 0.0),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn five_value_example() {
        // Independent evaluation: median 3, |x-3| = {2,1,0,1,2} -> MAD 1,
        // z = (x-3)/1.4826, out = (z+3)/6.
        let out =
            normalize_robust(&vol(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]), &Default::default()).unwrap();
        let expected = [0.0, 0.27518, 0.38759, 0.5, 0.61241, 0.72482];
        for (o, e) in out.volume.data.iter().zip(expected) {
            assert!((o - e).abs() < 1e-3, "{o} vs {e}");
        }
        assert_eq!(out.median, 3.0);
        assert_eq!(out.mad, 1.0);
        assert!(!out.mask[0]);
        for (x, o) in [1.0, 2.0, 4.0, 5.0].iter().zip([1, 2, 4, 5]) {
            let z: f64 = (x - 3.0) / 1.4826;
            assert!((out.volume.data[o] - (z + 3.0) / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_maps_to_half() {
        let out = normalize_robust(&vol(&[5.0, 5.0, 5.0]), &Default::default()).unwrap();
        assert!(out.degenerate_mad);
        assert_eq!(out.volume.data, vec![0.5; 3]);
    }

    #[test]
    fn clipping_saturates() {
        let out =
            normalize_robust(&vol(&[1.0, 2.0, 3.0, 4.0, 1000.0]), &Default::default()).unwrap();
        assert_eq!(out.volume.data[4], 1.0);
    }

    #[test]
    fn unscaled_mad_option() {
        let p = NormalizationParams {
            mad_scale: 1.0,
            ..Default::default()
        };
        let out = normalize_robust(&vol(&[1.0, 2.0, 3.0, 4.0, 5.0]), &p).unwrap();
        assert!((out.volume.data[3] - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn bad_params_rejected() {
        let p = NormalizationParams {
            clip_lo: 1.0,
            clip_hi: -1.0,
            ..Default::default()
        };
        assert!(normalize_robust(&vol(&[1.0]), &p).is_err());
    }

    proptest! {
        #[test]
        fn affine_equivariant_and_monotone(
            xs in proptest::collection::vec(0.1f64..100.0, 3..40),
            a in 0.1f64..10.0,
            b in 0.0f64..50.0,
        ) {
            let p = NormalizationParams::default();
            let base = normalize_robust(&vol(&xs), &p).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let moved = normalize_robust(&vol(&shifted), &p).unwrap();
            for (u, v) in base.volume.data.iter().zip(&moved.volume.data) {
                prop_assert!((u - v).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(u));
            }
            for i in 0..xs.len() {
                for j in 0..xs.len() {
                    if xs[i] <= xs[j] {
                        prop_assert!(base.volume.data[i] <= base.volume.data[j]);
                    }
                }
            }
        }
    }
}
