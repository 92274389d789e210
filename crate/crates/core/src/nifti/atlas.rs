use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::affine::{self, Affine};
use super::VolumeGrid;
use crate::error::{Error, NiftiError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiEntry {
    pub label_id: i32,
    pub name: String,
}

/// Integer label volume plus the ordered ROI table. Position in `roi_table`
/// is the ROI index used by every downstream stage.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasParcellation {
    pub shape: [usize; 3],
    pub labels: Vec<i32>,
    pub affine: Affine,
    pub roi_table: Vec<RoiEntry>,
}

impl AtlasParcellation {
    pub fn new(
        shape: [usize; 3],
        labels: Vec<i32>,
        affine: Affine,
        roi_table: Vec<RoiEntry>,
    ) -> Result<Self> {
        if labels.len() != shape.iter().product::<usize>() {
            return Err(NiftiError::ShapeMismatch {
                data: labels.len(),
                header: shape.iter().product(),
            }
            .into());
        }
        let atlas = AtlasParcellation {
            shape,
            labels,
            affine,
            roi_table,
        };
        atlas.validate()?;
        Ok(atlas)
    }

    /// Builds a parcellation from a label volume; voxel values must be integral.
    pub fn from_volume(volume: &VolumeGrid, roi_table: Vec<RoiEntry>) -> Result<Self> {
        let mut labels = Vec::with_capacity(volume.len());
        for &v in &volume.data {
            if v.fract() != 0.0 || v.abs() > i32::MAX as f64 {
                return Err(Error::InvalidInput(format!(
                    "atlas voxel value {v} is not an integer label"
                )));
            }
            labels.push(v as i32);
        }
        Self::new(volume.shape, labels, volume.affine, roi_table)
    }

    pub fn to_volume(&self) -> VolumeGrid {
        VolumeGrid {
            shape: self.shape,
            data: self.labels.iter().map(|&l| l as f64).collect(),
            affine: self.affine,
        }
    }

    pub fn n_rois(&self) -> usize {
        self.roi_table.len()
    }

    fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for e in &self.roi_table {
            if e.label_id == 0 {
                return Err(Error::InvalidInput("ROI table may not use label 0".into()));
            }
            if !ids.insert(e.label_id) {
                return Err(Error::InvalidInput(format!(
                    "duplicate ROI label {} in table",
                    e.label_id
                )));
            }
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l != 0 && !ids.contains(&l)) {
            return Err(Error::InvalidInput(format!(
                "atlas label {bad} is missing from the ROI table"
            )));
        }
        Ok(())
    }

    /// Per-voxel ROI index (position in `roi_table`), `None` for background.
    pub fn roi_indices(&self) -> Vec<Option<usize>> {
        let max = self.roi_table.iter().map(|e| e.label_id).max().unwrap_or(0);
        let min = self.roi_table.iter().map(|e| e.label_id).min().unwrap_or(0);
        if min > 0 && max < 1 << 20 {
            let mut lut = vec![None; max as usize + 1];
            for (i, e) in self.roi_table.iter().enumerate() {
                lut[e.label_id as usize] = Some(i);
            }
            self.labels
                .iter()
                .map(|&l| if l > 0 { lut[l as usize] } else { None })
                .collect()
        } else {
            let map: std::collections::HashMap<i32, usize> = self
                .roi_table
                .iter()
                .enumerate()
                .map(|(i, e)| (e.label_id, i))
                .collect();
            self.labels.iter().map(|l| map.get(l).copied()).collect()
        }
    }
}

/// Reads a `label_id<TAB>name` table. A first line whose first field is not
/// an integer is treated as a header. `expected` pins the row count.
pub fn read_roi_table(text: &str, expected: Option<usize>) -> Result<Vec<RoiEntry>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let id = parts.next().unwrap_or("").trim();
        let name = parts.next().map(str::trim).unwrap_or("");
        match id.parse::<i32>() {
            Ok(label_id) => {
                if name.is_empty() {
                    return Err(Error::InvalidInput(format!(
                        "ROI table line {}: missing name column",
                        lineno + 1
                    )));
                }
                rows.push(RoiEntry {
                    label_id,
                    name: name.to_string(),
                })
            }
            Err(_) if rows.is_empty() && lineno == 0 => continue,
            Err(_) => {
                return Err(Error::InvalidInput(format!(
                    "ROI table line {}: bad label id {id:?}",
                    lineno + 1
                )))
            }
        }
    }
    if let Some(n) = expected {
        if rows.len() != n {
            return Err(Error::InvalidInput(format!(
                "ROI table has {} rows, expected {n}",
                rows.len()
            )));
        }
    }
    Ok(rows)
}

pub fn read_roi_table_file(path: &Path, expected: Option<usize>) -> Result<Vec<RoiEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    read_roi_table(&text, expected).map_err(|e| e.in_file(path))
}

pub fn write_roi_table(table: &[RoiEntry]) -> String {
    let mut s = String::from("label_id\tname\n");
    for e in table {
        s.push_str(&format!("{}\t{}\n", e.label_id, e.name));
    }
    s
}

/// Nearest-neighbour label resampling onto `target`'s grid. Each target
/// voxel centre is mapped to atlas voxel space, rounded half away from
/// zero per axis; positions outside the atlas get label 0.
pub fn resample_labels_nn(
    atlas: &AtlasParcellation,
    target: &VolumeGrid,
) -> Result<AtlasParcellation> {
    let inv = affine::invert(&atlas.affine).ok_or(NiftiError::SingularAffine)?;
    if affine::invert(&target.affine).is_none() {
        return Err(NiftiError::SingularAffine.into());
    }
    let vox_to_vox = affine::multiply(&inv, &target.affine);
    let [nx, ny, nz] = target.shape;
    let [ax, ay, az] = atlas.shape;
    let mut labels = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = affine::apply(&vox_to_vox, [x as f64, y as f64, z as f64]);
                let idx = [p[0].round(), p[1].round(), p[2].round()];
                let inside = idx[0] >= 0.0
                    && idx[1] >= 0.0
                    && idx[2] >= 0.0
                    && idx[0] < ax as f64
                    && idx[1] < ay as f64
                    && idx[2] < az as f64;
                let label = if inside {
                    let (i, j, k) = (idx[0] as usize, idx[1] as usize, idx[2] as usize);
                    atlas.labels[i + ax * (j + ay * k)]
                } else {
                    0
                };
                labels.push(label);
            }
        }
    }
    Ok(AtlasParcellation {
        shape: target.shape,
        labels,
        affine: target.affine,
        roi_table: atlas.roi_table.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(ids: &[i32]) -> Vec<RoiEntry> {
        ids.iter()
            .map(|&i| RoiEntry {
                label_id: i,
                name: format!("R{i}"),
            })
            .collect()
    }

    #[test]
    fn identity_resampling_is_unchanged() {
        let labels: Vec<i32> = (0..24).map(|i| i % 3).collect();
        let atlas = AtlasParcellation::new(
            [2, 3, 4],
            labels.clone(),
            affine::diagonal(2.0, 2.0, 2.0),
            table(&[1, 2]),
        )
        .unwrap();
        let target = VolumeGrid::zeros([2, 3, 4], atlas.affine);
        let out = resample_labels_nn(&atlas, &target).unwrap();
        assert_eq!(out.labels, labels);
    }

    #[test]
    fn upsampling_doubles_blocks() {
        // atlas: 2 voxels along x at 2mm spacing, labels 1 and 2. Voxel centres
        // at world x = 0 and 2.
        let atlas = AtlasParcellation::new(
            [2, 1, 1],
            vec![1, 2],
            affine::diagonal(2.0, 1.0, 1.0),
            table(&[1, 2]),
        )
        .unwrap();
        // target: 4 voxels at 1mm spacing, shifted so voxel centres sit at
        // world x = -0.25, 0.75, 1.75, 2.75 -> atlas coords -0.125, 0.375,
        // 0.875, 1.375 -> rounded 0,0,1,1.
        let mut aff = affine::diagonal(1.0, 1.0, 1.0);
        aff[0][3] = -0.25;
        let target = VolumeGrid::zeros([4, 1, 1], aff);
        let out = resample_labels_nn(&atlas, &target).unwrap();
        assert_eq!(out.labels, vec![1, 1, 2, 2]);
    }

    #[test]
    fn half_rounds_away_from_zero() {
        let atlas = AtlasParcellation::new(
            [3, 1, 1],
            vec![1, 2, 3],
            affine::identity(),
            table(&[1, 2, 3]),
        )
        .unwrap();
        let mut aff = affine::identity();
        aff[0][3] = 0.5;
        let target = VolumeGrid::zeros([3, 1, 1], aff);
        // coords 0.5, 1.5, 2.5 -> 1, 2, 3 (out of bounds)
        let out = resample_labels_nn(&atlas, &target).unwrap();
        assert_eq!(out.labels, vec![2, 3, 0]);
    }

    #[test]
    fn outside_bounds_is_background() {
        let atlas =
            AtlasParcellation::new([2, 2, 2], vec![1; 8], affine::identity(), table(&[1])).unwrap();
        let mut aff = affine::identity();
        aff[0][3] = 100.0;
        let out = resample_labels_nn(&atlas, &VolumeGrid::zeros([2, 2, 2], aff)).unwrap();
        assert!(out.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn singular_affine_rejected() {
        let atlas =
            AtlasParcellation::new([1, 1, 1], vec![1], affine::identity(), table(&[1])).unwrap();
        let target = VolumeGrid::zeros([1, 1, 1], affine::diagonal(1.0, 0.0, 1.0));
        assert!(resample_labels_nn(&atlas, &target).is_err());
    }

    #[test]
    fn unknown_label_rejected() {
        assert!(
            AtlasParcellation::new([2, 1, 1], vec![1, 7], affine::identity(), table(&[1])).is_err()
        );
    }

    #[test]
    fn roi_table_parsing() {
        let t = read_roi_table(
            "label_id\tname\n2001\tPrecentral_L\n2002\tPrecentral_R\n",
            Some(2),
        )
        .unwrap();
        assert_eq!(t[1].label_id, 2002);
        assert_eq!(t[0].name, "Precentral_L");
        assert!(read_roi_table("1\ta\n", Some(116)).is_err());
        assert!(read_roi_table("1\ta\nx\tb\n", None).is_err());
        assert_eq!(read_roi_table(&write_roi_table(&t), Some(2)).unwrap(), t);
    }

    #[test]
    fn roi_indices_follow_table_order() {
        let atlas =
            AtlasParcellation::new([3, 1, 1], vec![0, 9, 4], affine::identity(), table(&[9, 4]))
                .unwrap();
        assert_eq!(atlas.roi_indices(), vec![None, Some(0), Some(1)]);
    }
}
