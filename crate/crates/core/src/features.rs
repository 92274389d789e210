//! ROI-wise descriptors: mean normalised intensity, interquartile range, and
//! whole-brain mean/std/median.
//!
//! Quantiles use linear interpolation between order statistics at
//! `h = (n - 1) p`. Every ROI statistic is restricted to voxels that carry
//! the ROI label *and* lie inside the brain mask. A ROI with no such voxel
//! yields 0 and raises its empty flag; fewer than two voxels gives an IQR of 0.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{AtlasParcellation, VolumeGrid};

pub const N_GLOBAL_STATS: usize = 3;
pub const QUANTILE_CONVENTION: &str = "linear interpolation at h=(n-1)p";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    Hc = 0,
    Adhd = 1,
}

impl Class {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Class::Hc),
            1 => Ok(Class::Adhd),
            other => Err(Error::InvalidInput(format!(
                "class label {other} is not 0 (HC) or 1 (ADHD)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectFeatures {
    pub subject_id: String,
    pub label: Class,
    pub roi_means: Vec<f64>,
    pub roi_iqrs: Vec<f64>,
    pub global_stats: GlobalStats,
    pub empty_roi_flags: Vec<bool>,
}

impl SubjectFeatures {
    pub fn n_rois(&self) -> usize {
        self.roi_means.len()
    }

    /// `[roi_iqrs ‖ global mean, std, median]`.
    pub fn auxiliary_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.roi_iqrs.len() + N_GLOBAL_STATS);
        v.extend_from_slice(&self.roi_iqrs);
        v.push(self.global_stats.mean);
        v.push(self.global_stats.std);
        v.push(self.global_stats.median);
        v
    }

    fn check_finite(&self) -> Result<()> {
        let all = self.roi_means.iter().chain(&self.roi_iqrs).chain([
            &self.global_stats.mean,
            &self.global_stats.std,
            &self.global_stats.median,
        ]);
        for v in all {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite feature for subject {}",
                    self.subject_id
                )));
            }
        }
        Ok(())
    }
}

/// Which ROI descriptor a feature matrix holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Descriptor {
    Mean,
    Iqr,
}

/// Subjects × ROIs matrix of one descriptor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub values: Vec<f64>,
    pub labels: Vec<Class>,
}

impl FeatureMatrix {
    pub fn from_subjects<'a, I>(subjects: I, descriptor: Descriptor) -> Result<Self>
    where
        I: IntoIterator<Item = &'a SubjectFeatures>,
    {
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut n_cols = None;
        for s in subjects {
            let row = match descriptor {
                Descriptor::Mean => &s.roi_means,
                Descriptor::Iqr => &s.roi_iqrs,
            };
            match n_cols {
                None => n_cols = Some(row.len()),
                Some(c) if c != row.len() => {
                    return Err(Error::Shape(format!(
                        "subject {} has {} ROIs, expected {c}",
                        s.subject_id,
                        row.len()
                    )))
                }
                _ => {}
            }
            values.extend_from_slice(row);
            labels.push(s.label);
        }
        Ok(FeatureMatrix {
            n_rows: labels.len(),
            n_cols: n_cols.unwrap_or(0),
            values,
            labels,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows)
            .map(|i| self.values[i * self.n_cols + j])
            .collect()
    }
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

/// Q75 − Q25; `None` with fewer than two values.
pub fn iqr(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    Some(quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25))
}

fn check_grid(volume: &VolumeGrid, mask: &[bool], parcel: &AtlasParcellation) -> Result<()> {
    if parcel.shape != volume.shape || mask.len() != volume.len() {
        return Err(Error::Shape(format!(
            "volume {:?}, mask {} and atlas {:?} are not on one grid; resample the atlas first",
            volume.shape,
            mask.len(),
            parcel.shape
        )));
    }
    Ok(())
}

fn roi_values(
    volume: &VolumeGrid,
    mask: &[bool],
    parcel: &AtlasParcellation,
    r: usize,
) -> Result<Vec<f64>> {
    check_grid(volume, mask, parcel)?;
    let label = parcel
        .roi_table
        .get(r)
        .ok_or_else(|| Error::InvalidInput(format!("ROI index {r} out of range")))?
        .label_id;
    Ok(parcel
        .labels
        .iter()
        .zip(mask)
        .zip(&volume.data)
        .filter(|((&l, &m), _)| m && l == label)
        .map(|(_, &v)| v)
        .collect())
}

/// Mean over masked voxels of ROI `r`; returns `(value, empty_flag)`.
pub fn roi_mean(
    volume: &VolumeGrid,
    mask: &[bool],
    parcel: &AtlasParcellation,
    r: usize,
) -> Result<(f64, bool)> {
    let vals = roi_values(volume, mask, parcel, r)?;
    Ok(mean_or_flag(&vals))
}

pub fn roi_iqr(
    volume: &VolumeGrid,
    mask: &[bool],
    parcel: &AtlasParcellation,
    r: usize,
) -> Result<(f64, bool)> {
    let vals = roi_values(volume, mask, parcel, r)?;
    Ok(match iqr(&vals) {
        Some(v) => (v, false),
        None => (0.0, true),
    })
}

fn mean_or_flag(vals: &[f64]) -> (f64, bool) {
    if vals.is_empty() {
        (0.0, true)
    } else {
        (vals.iter().sum::<f64>() / vals.len() as f64, false)
    }
}

/// Population mean/std and median over masked voxels.
pub fn global_stats(volume: &VolumeGrid, mask: &[bool]) -> Result<GlobalStats> {
    let mut vals: Vec<f64> = volume
        .data
        .iter()
        .zip(mask)
        .filter_map(|(&v, &m)| m.then_some(v))
        .collect();
    if vals.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let median = crate::preprocess::median_in_place(&mut vals);
    Ok(GlobalStats {
        mean,
        std: var.sqrt(),
        median,
    })
}

/// All descriptors for one subject in a single pass over the volume.
pub fn extract_subject(
    subject_id: &str,
    label: Class,
    volume: &VolumeGrid,
    mask: &[bool],
    parcel: &AtlasParcellation,
) -> Result<SubjectFeatures> {
    check_grid(volume, mask, parcel)?;
    let n_rois = parcel.n_rois();
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); n_rois];
    for ((roi, &m), &v) in parcel.roi_indices().into_iter().zip(mask).zip(&volume.data) {
        if let (Some(r), true) = (roi, m) {
            buckets[r].push(v);
        }
    }
    let mut roi_means = Vec::with_capacity(n_rois);
    let mut roi_iqrs = Vec::with_capacity(n_rois);
    let mut empty_roi_flags = Vec::with_capacity(n_rois);
    for vals in &buckets {
        let (mean, empty) = mean_or_flag(vals);
        roi_means.push(mean);
        roi_iqrs.push(iqr(vals).unwrap_or(0.0));
        empty_roi_flags.push(empty);
    }
    let features = SubjectFeatures {
        subject_id: subject_id.to_string(),
        label,
        roi_means,
        roi_iqrs,
        global_stats: global_stats(volume, mask)?,
        empty_roi_flags,
    };
    features.check_finite()?;
    Ok(features)
}

fn csv_header(n_rois: usize) -> String {
    let mut h = String::from("subject_id,label");
    for r in 0..n_rois {
        write!(h, ",mu_{r:03}").unwrap();
    }
    for r in 0..n_rois {
        write!(h, ",iqr_{r:03}").unwrap();
    }
    h.push_str(",g_mean,g_std,g_median,flags");
    h
}

/// Serialises features to CSV. `preamble` lines are emitted as `# ` comments.
pub fn write_features_csv(subjects: &[SubjectFeatures], preamble: &[String]) -> Result<String> {
    let n_rois = subjects.first().map_or(0, |s| s.n_rois());
    let mut out = String::new();
    for line in preamble {
        writeln!(out, "# {line}").unwrap();
    }
    writeln!(out, "{}", csv_header(n_rois)).unwrap();
    for s in subjects {
        if s.n_rois() != n_rois {
            return Err(Error::Shape("subjects disagree on ROI count".into()));
        }
        if s.subject_id.contains([',', '\n', '"']) {
            return Err(Error::InvalidInput(format!(
                "subject id {:?} contains a CSV delimiter",
                s.subject_id
            )));
        }
        write!(out, "{},{}", s.subject_id, s.label.index()).unwrap();
        for v in s.roi_means.iter().chain(&s.roi_iqrs) {
            write!(out, ",{v}").unwrap();
        }
        let g = &s.global_stats;
        let flags: Vec<String> = s
            .empty_roi_flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(i, _)| i.to_string())
            .collect();
        writeln!(
            out,
            ",{},{},{},{}",
            g.mean,
            g.std,
            g.median,
            flags.join(";")
        )
        .unwrap();
    }
    Ok(out)
}

/// Parses the features CSV; returns the subjects and the `# ` preamble lines.
pub fn read_features_csv<R: BufRead>(reader: R) -> Result<(Vec<SubjectFeatures>, Vec<String>)> {
    let mut preamble = Vec::new();
    let mut n_rois = None;
    let mut subjects = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if let Some(c) = line.strip_prefix('#') {
            preamble.push(c.trim_start().to_string());
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let Some(r) = n_rois else {
            let r = fields.iter().filter(|f| f.starts_with("mu_")).count();
            if fields.len() < 2 || line != csv_header(r) {
                return Err(Error::InvalidInput(
                    "features CSV header is malformed".into(),
                ));
            }
            n_rois = Some(r);
            continue;
        };
        if fields.len() != 2 * r + 6 {
            return Err(Error::InvalidInput(format!(
                "features CSV line {}: {} fields, expected {}",
                lineno + 1,
                fields.len(),
                2 * r + 6
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                Error::InvalidInput(format!(
                    "features CSV line {}: bad number {s:?}",
                    lineno + 1
                ))
            })
        };
        let label = Class::from_index(fields[1].parse::<usize>().map_err(|_| {
            Error::InvalidInput(format!("features CSV line {}: bad label", lineno + 1))
        })?)?;
        let roi_means = fields[2..2 + r]
            .iter()
            .map(|s| num(s))
            .collect::<Result<Vec<_>>>()?;
        let roi_iqrs = fields[2 + r..2 + 2 * r]
            .iter()
            .map(|s| num(s))
            .collect::<Result<Vec<_>>>()?;
        let g = 2 + 2 * r;
        let mut empty_roi_flags = vec![false; r];
        for tok in fields[g + 3].split(';').filter(|t| !t.is_empty()) {
            let i: usize = tok.parse().ok().filter(|&i| i < r).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "features CSV line {}: bad flag {tok:?}",
                    lineno + 1
                ))
            })?;
            empty_roi_flags[i] = true;
        }
        let s = SubjectFeatures {
            subject_id: fields[0].to_string(),
            label,
            roi_means,
            roi_iqrs,
            global_stats: GlobalStats {
                mean: num(fields[g])?,
                std: num(fields[g + 1])?,
                median: num(fields[g + 2])?,
            },
            empty_roi_flags,
        };
        s.check_finite()?;
        subjects.push(s);
    }
    if n_rois.is_none() {
        return Err(Error::InvalidInput("features CSV is empty".into()));
    }
    Ok((subjects, preamble))
}

pub fn read_features_file(path: &Path) -> Result<(Vec<SubjectFeatures>, Vec<String>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    read_features_csv(std::io::BufReader::new(f)).map_err(|e| e.in_file(path))
}
