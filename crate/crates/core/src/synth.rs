//! Synthetic cohorts with planted group differences.
//!
//! The "brain" is an ellipsoid inside a cubic grid. The grid is cut into an
//! 8×8×8 lattice of blocks; the `n_rois` blocks holding the most brain
//! voxels become the ROIs and the remaining brain voxels stay unlabelled.
//! A voxel of subject `s` in ROI `r` is
//!
//! ```text
//! gain_s * (base_r + offset_{s,r} + shift_{s,r} + sd_{s,r} * noise)
//! ```
//!
//! where `offset` is a per-subject ROI deviation, `shift` is
//! `mean_shift * noise_sd` for ADHD subjects on planted ROIs (else 0) and
//! `sd` is `noise_sd`, multiplied by `iqr_factor` for ADHD subjects on
//! planted ROIs. Brain voxels are floored at a small positive value and the
//! background is exactly 0.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::derive_seed;
use crate::features::Class;
use crate::nifti::affine::Affine;
use crate::nifti::{
    write_nifti_file, write_roi_table, AtlasParcellation, NiftiHeader, RoiEntry, VolumeGrid,
};

const LATTICE: usize = 8;
const MIN_GRID: usize = 32;
const BRAIN_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_per_class: usize,
    pub grid: usize,
    pub voxel_mm: f64,
    pub n_rois: usize,
    pub planted_rois: Vec<usize>,
    /// ADHD mean shift on planted ROIs, in units of `noise_sd`.
    pub mean_shift: f64,
    /// ADHD multiplier of the within-ROI noise SD on planted ROIs.
    pub iqr_factor: f64,
    /// Within-ROI voxel noise SD.
    pub noise_sd: f64,
    /// SD of the per-subject ROI offset.
    pub subject_sd: f64,
    /// Range of the ROI base intensities.
    pub base_range: [f64; 2],
    /// Base intensity of brain voxels outside every ROI.
    pub tissue_base: f64,
    /// SD of the log global gain per subject.
    pub gain_sd: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_per_class: 40,
            grid: 48,
            voxel_mm: 3.0,
            n_rois: 116,
            planted_rois: (40..46).collect(),
            mean_shift: 1.5,
            iqr_factor: 1.5,
            noise_sd: 10.0,
            subject_sd: 10.0,
            base_range: [80.0, 120.0],
            tissue_base: 100.0,
            gain_sd: 0.05,
            seed: 2024,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.grid < MIN_GRID {
            return fail(format!(
                "grid {} below the minimum of {MIN_GRID}",
                self.grid
            ));
        }
        if self.n_per_class < 2 {
            return fail("n_per_class must be at least 2".into());
        }
        if self.n_rois == 0 || self.n_rois > LATTICE.pow(3) {
            return fail(format!("n_rois must lie in 1..={}", LATTICE.pow(3)));
        }
        let mut seen = vec![false; self.n_rois];
        for &r in &self.planted_rois {
            if r >= self.n_rois || std::mem::replace(&mut seen[r], true) {
                return fail(format!("planted ROI {r} out of range or repeated"));
            }
        }
        let finite = [
            self.voxel_mm,
            self.mean_shift,
            self.iqr_factor,
            self.noise_sd,
            self.subject_sd,
            self.base_range[0],
            self.base_range[1],
            self.tissue_base,
            self.gain_sd,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return fail("cohort parameters must be finite".into());
        }
        if self.voxel_mm <= 0.0
            || self.iqr_factor <= 0.0
            || self.noise_sd < 0.0
            || self.subject_sd < 0.0
        {
            return fail("voxel size and iqr_factor must be positive, SDs nonnegative".into());
        }
        if self.gain_sd < 0.0
            || self.base_range[0] > self.base_range[1]
            || self.base_range[0] <= 0.0
        {
            return fail("base_range must be positive and ordered, gain_sd nonnegative".into());
        }
        Ok(())
    }

    pub fn affine(&self) -> Affine {
        let v = self.voxel_mm;
        let c = -(self.grid as f64 - 1.0) * v / 2.0;
        [
            [v, 0.0, 0.0, c],
            [0.0, v, 0.0, c],
            [0.0, 0.0, v, c],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted_rois: Vec<usize>,
    pub planted_names: Vec<String>,
    pub mean_shift: f64,
    pub iqr_factor: f64,
    pub n_per_class: usize,
    pub roi_voxel_counts: Vec<usize>,
    pub spec: CohortSpec,
}

#[derive(Debug, Clone)]
pub struct SyntheticSubject {
    pub subject_id: String,
    pub label: Class,
    pub volume: VolumeGrid,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub atlas: AtlasParcellation,
    /// ROI index → network name, for the network-level tests.
    pub networks: Vec<String>,
    pub subjects: Vec<SyntheticSubject>,
    pub truth: GroundTruth,
}

fn in_brain(spec: &CohortSpec, x: usize, y: usize, z: usize) -> bool {
    let g = spec.grid as f64;
    let c = (g - 1.0) / 2.0;
    let semi = [0.46 * g, 0.42 * g, 0.40 * g];
    let d = [
        (x as f64 - c) / semi[0],
        (y as f64 - c) / semi[1],
        (z as f64 - c) / semi[2],
    ];
    d.iter().map(|v| v * v).sum::<f64>() <= 1.0
}

/// Brain mask, ROI labels (0 = none) and per-ROI lattice cells.
type Layout = (Vec<bool>, Vec<i32>, Vec<[usize; 3]>);

/// Brain mask and ROI labels over the grid, x fastest.
fn layout(spec: &CohortSpec) -> Result<Layout> {
    let g = spec.grid;
    let block = g / LATTICE;
    let cell_of = |i: usize| (i / block).min(LATTICE - 1);
    let mut brain = vec![false; g * g * g];
    let mut counts = vec![0usize; LATTICE.pow(3)];
    for z in 0..g {
        for y in 0..g {
            for x in 0..g {
                if in_brain(spec, x, y, z) {
                    brain[(z * g + y) * g + x] = true;
                    counts[(cell_of(z) * LATTICE + cell_of(y)) * LATTICE + cell_of(x)] += 1;
                }
            }
        }
    }
    let mut cells: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    if cells.len() < spec.n_rois {
        return Err(Error::InvalidInput(format!(
            "atlas tiling infeasible: {} nonempty blocks for {} ROIs",
            cells.len(),
            spec.n_rois
        )));
    }
    cells.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    cells.truncate(spec.n_rois);
    cells.sort_unstable();
    let mut roi_of_cell = vec![0i32; counts.len()];
    for (r, &c) in cells.iter().enumerate() {
        roi_of_cell[c] = r as i32 + 1;
    }
    let mut labels = vec![0i32; g * g * g];
    for z in 0..g {
        for y in 0..g {
            for x in 0..g {
                let i = (z * g + y) * g + x;
                if brain[i] {
                    labels[i] =
                        roi_of_cell[(cell_of(z) * LATTICE + cell_of(y)) * LATTICE + cell_of(x)];
                }
            }
        }
    }
    let coords = cells
        .iter()
        .map(|&c| {
            [
                c % LATTICE,
                (c / LATTICE) % LATTICE,
                c / (LATTICE * LATTICE),
            ]
        })
        .collect();
    Ok((brain, labels, coords))
}

/// Six coarse "networks": left/right half × inferior/middle/superior third.
fn network_of(cell: [usize; 3]) -> String {
    let side = if cell[0] < LATTICE / 2 {
        "left"
    } else {
        "right"
    };
    let level = match cell[2] * 3 / LATTICE {
        0 => "inferior",
        1 => "middle",
        _ => "superior",
    };
    format!("{side}_{level}")
}

pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let (brain, labels, coords) = layout(spec)?;
    let g = spec.grid;
    let affine = spec.affine();
    let roi_table: Vec<RoiEntry> = coords
        .iter()
        .enumerate()
        .map(|(r, c)| RoiEntry {
            label_id: r as i32 + 1,
            name: format!("ROI{:03}_x{}y{}z{}", r + 1, c[0], c[1], c[2]),
        })
        .collect();
    let atlas = AtlasParcellation::new([g, g, g], labels, affine, roi_table)?;
    let mut roi_voxel_counts = vec![0usize; spec.n_rois];
    for &l in &atlas.labels {
        if l > 0 {
            roi_voxel_counts[l as usize - 1] += 1;
        }
    }

    let mut base_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0xba5e]));
    let base: Vec<f64> = (0..spec.n_rois)
        .map(|_| base_rng.random_range(spec.base_range[0]..=spec.base_range[1]))
        .collect();
    let planted: Vec<bool> = (0..spec.n_rois)
        .map(|r| spec.planted_rois.contains(&r))
        .collect();

    let n = 2 * spec.n_per_class;
    let subjects = (0..n)
        .into_par_iter()
        .map(|s| {
            let label = if s < spec.n_per_class {
                Class::Hc
            } else {
                Class::Adhd
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x5b1, s as u64]));
            let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
            let gain = (spec.gain_sd * std_normal.sample(&mut rng)).exp();
            let adhd = label == Class::Adhd;
            let mut level = Vec::with_capacity(spec.n_rois);
            let mut sd = Vec::with_capacity(spec.n_rois);
            for r in 0..spec.n_rois {
                let offset = spec.subject_sd * std_normal.sample(&mut rng);
                let shift = if adhd && planted[r] {
                    spec.mean_shift * spec.noise_sd
                } else {
                    0.0
                };
                level.push(base[r] + offset + shift);
                sd.push(if adhd && planted[r] {
                    spec.noise_sd * spec.iqr_factor
                } else {
                    spec.noise_sd
                });
            }
            let data = brain
                .iter()
                .zip(&atlas.labels)
                .map(|(&b, &l)| {
                    if !b {
                        return 0.0;
                    }
                    let (mu, sigma) = if l > 0 {
                        (level[l as usize - 1], sd[l as usize - 1])
                    } else {
                        (spec.tissue_base, spec.noise_sd)
                    };
                    let v = gain * (mu + sigma * std_normal.sample(&mut rng));
                    // stored as float32 on disk; keep memory and disk identical
                    v.max(BRAIN_FLOOR) as f32 as f64
                })
                .collect();
            Ok(SyntheticSubject {
                subject_id: format!("sub-{:03}", s + 1),
                label,
                volume: VolumeGrid::new([g, g, g], data, affine)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let truth = GroundTruth {
        planted_rois: spec.planted_rois.clone(),
        planted_names: spec
            .planted_rois
            .iter()
            .map(|&r| atlas.roi_table[r].name.clone())
            .collect(),
        mean_shift: spec.mean_shift,
        iqr_factor: spec.iqr_factor,
        n_per_class: spec.n_per_class,
        roi_voxel_counts,
        spec: spec.clone(),
    };
    Ok(Cohort {
        networks: coords.iter().map(|&c| network_of(c)).collect(),
        atlas,
        subjects,
        truth,
    })
}

pub fn labels_csv(subjects: &[(String, Class)], preamble: &[String]) -> String {
    let mut out = String::new();
    for line in preamble {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str("subject_id,label\n");
    for (id, label) in subjects {
        let _ = writeln!(out, "{id},{}", label.index());
    }
    out
}

pub fn networks_tsv(atlas: &AtlasParcellation, networks: &[String]) -> String {
    let mut out = String::from("label_id\tnetwork\n");
    for (entry, net) in atlas.roi_table.iter().zip(networks) {
        let _ = writeln!(out, "{}\t{net}", entry.label_id);
    }
    out
}

/// File names written by [`write_cohort`], relative to its directory.
pub const ATLAS_FILE: &str = "atlas.nii.gz";
pub const ROI_TABLE_FILE: &str = "atlas_rois.tsv";
pub const NETWORKS_FILE: &str = "networks.tsv";
pub const LABELS_FILE: &str = "labels.csv";
pub const TRUTH_FILE: &str = "ground_truth.json";
pub const SUBJECT_DIR: &str = "subjects";

/// Writes the cohort under `dir`. `config_sha256`, when given, is recorded
/// in the NIfTI descriptions, the labels preamble and the ground truth.
pub fn write_cohort(cohort: &Cohort, dir: &Path, config_sha256: Option<&str>) -> Result<()> {
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::from(e).in_file(path))
    };
    let subject_dir = dir.join(SUBJECT_DIR);
    std::fs::create_dir_all(&subject_dir).map_err(|e| Error::from(e).in_file(&subject_dir))?;
    let atlas_volume = cohort.atlas.to_volume();
    let description = config_sha256.map_or_else(String::new, |h| {
        format!("scnfusion synth {}", &h[..h.len().min(40)])
    });
    let mut atlas_header = NiftiHeader::for_grid(cohort.atlas.shape, cohort.atlas.affine);
    atlas_header.datatype = crate::nifti::Datatype::Int16;
    atlas_header.description.clone_from(&description);
    write_nifti_file(&dir.join(ATLAS_FILE), &atlas_header, &atlas_volume)?;
    write(ROI_TABLE_FILE, write_roi_table(&cohort.atlas.roi_table))?;
    write(NETWORKS_FILE, networks_tsv(&cohort.atlas, &cohort.networks))?;
    let ids: Vec<(String, Class)> = cohort
        .subjects
        .iter()
        .map(|s| (s.subject_id.clone(), s.label))
        .collect();
    let preamble: Vec<String> = config_sha256
        .map(|h| format!("config_sha256={h}"))
        .into_iter()
        .collect();
    write(LABELS_FILE, labels_csv(&ids, &preamble))?;
    let mut truth = serde_json::to_value(&cohort.truth)?;
    if let Some(h) = config_sha256 {
        truth["config_sha256"] = h.into();
    }
    write(TRUTH_FILE, serde_json::to_string_pretty(&truth)?)?;
    cohort.subjects.par_iter().try_for_each(|s| {
        let mut header = NiftiHeader::for_grid(s.volume.shape, s.volume.affine);
        header.description.clone_from(&description);
        write_nifti_file(
            &subject_dir.join(format!("{}.nii.gz", s.subject_id)),
            &header,
            &s.volume,
        )
    })
}
