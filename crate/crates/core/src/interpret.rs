//! Grad-CAM attribution over SCN inputs, ROI importance, biomarker
//! selection and ROI-wise group statistics.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::evaluation::Sample;
use crate::features::{quantile, Descriptor, FeatureMatrix};
use crate::model::{AuxMode, CamInputs, FusionNet};
use crate::nn::Tensor;
use crate::scn::midranks;

/// Percentile used for biomarker selection.
pub const SELECTION_PERCENTILE: f64 = 0.90;
/// |d| above which an ROI counts as a large effect.
pub const LARGE_EFFECT: f64 = 0.8;
/// Logit Grad-CAM attributes by default (ADHD).
pub const ADHD_TARGET: usize = 1;

/// `ReLU(Σ_k w_k A_k)` with `w_k` the spatial mean of the gradients,
/// upsampled nearest-neighbour to `n × n` (source index `⌊i·s/n⌋`).
pub fn gradcam_map(cam: &CamInputs, n: usize) -> Result<Vec<f64>> {
    let (c, s) = (cam.channels, cam.size);
    let plane = s * s;
    if cam.activations.len() != c * plane || cam.gradients.len() != c * plane || s == 0 || n == 0 {
        return Err(Error::Shape(format!(
            "Grad-CAM inputs do not match {c}x{s}x{s}"
        )));
    }
    let mut coarse = vec![0.0; plane];
    for k in 0..c {
        let g = &cam.gradients[k * plane..(k + 1) * plane];
        let w = g.iter().sum::<f64>() / plane as f64;
        if w == 0.0 {
            continue;
        }
        for (o, a) in coarse
            .iter_mut()
            .zip(&cam.activations[k * plane..(k + 1) * plane])
        {
            *o += w * a;
        }
    }
    for v in &mut coarse {
        *v = v.max(0.0);
    }
    let src: Vec<usize> = (0..n).map(|i| i * s / n).collect();
    let mut map = Vec::with_capacity(n * n);
    for &si in &src {
        for &sj in &src {
            map.push(coarse[si * s + sj]);
        }
    }
    Ok(map)
}

/// `(row mean + column mean) / 2` per ROI, before normalisation.
pub fn roi_scores_raw(map: &[f64], n: usize) -> Result<Vec<f64>> {
    if map.len() != n * n || n == 0 {
        return Err(Error::Shape(format!(
            "map of {} values is not {n}x{n}",
            map.len()
        )));
    }
    let mut row = vec![0.0; n];
    let mut col = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let v = map[i * n + j];
            row[i] += v;
            col[j] += v;
        }
    }
    Ok(row
        .iter()
        .zip(&col)
        .map(|(r, c)| (r / n as f64 + c / n as f64) / 2.0)
        .collect())
}

/// Row/column aggregated scores divided by their maximum; an all-zero map
/// stays zero.
pub fn roi_scores(map: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut s = roi_scores_raw(map, n)?;
    let max = s.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut s {
            *v /= max;
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiImportance {
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub percentile: f64,
    pub selected: Vec<usize>,
    pub n_maps: usize,
}

/// Averages per-subject scores, then keeps ROIs strictly above the
/// linear-interpolation 90th percentile of the averages.
pub fn select_biomarkers(subject_scores: &[Vec<f64>]) -> Result<RoiImportance> {
    let first = subject_scores
        .first()
        .ok_or_else(|| Error::InvalidInput("biomarker selection needs at least one map".into()))?;
    let n = first.len();
    if n == 0 || subject_scores.iter().any(|s| s.len() != n) {
        return Err(Error::Shape(
            "subject score vectors differ in length".into(),
        ));
    }
    let mut scores = vec![0.0; n];
    for s in subject_scores {
        for (a, v) in scores.iter_mut().zip(s) {
            *a += v;
        }
    }
    for a in &mut scores {
        *a /= subject_scores.len() as f64;
    }
    Ok(select_from_scores(scores, subject_scores.len()))
}

pub fn select_from_scores(scores: Vec<f64>, n_maps: usize) -> RoiImportance {
    let threshold = quantile(&scores, SELECTION_PERCENTILE);
    let selected = (0..scores.len())
        .filter(|&r| scores[r] > threshold)
        .collect();
    RoiImportance {
        scores,
        threshold,
        percentile: SELECTION_PERCENTILE,
        selected,
        n_maps,
    }
}

/// `|selected ∩ planted| / |planted|`.
pub fn hit_rate(selected: &[usize], planted: &[usize]) -> f64 {
    if planted.is_empty() {
        return 0.0;
    }
    planted.iter().filter(|p| selected.contains(p)).count() as f64 / planted.len() as f64
}

/// Which test subjects contribute maps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamPopulation {
    #[default]
    AllTest,
    CorrectAdhd,
}

/// Normalised ROI scores of each subject in `subjects`, each averaged over
/// the maps of all `models`.
pub fn subject_roi_scores(
    models: &[FusionNet],
    samples: &[Sample],
    subjects: &[usize],
    mode: AuxMode,
    target: usize,
) -> Result<Vec<Vec<f64>>> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidInput("Grad-CAM needs at least one model".into()))?;
    let n = first.config.n_rois;
    subjects
        .par_iter()
        .map(|&i| {
            let s = samples
                .get(i)
                .ok_or_else(|| Error::InvalidInput(format!("subject index {i} out of range")))?;
            let scn = Tensor::new(vec![1, 2, n, n], s.scn.clone());
            let aux = Tensor::new(vec![1, s.aux.len()], s.aux.clone());
            let mut acc = vec![0.0; n];
            for m in models {
                let mut m = m.clone();
                let cam = m.cam_inputs(&scn, &aux, mode, target)?;
                let scores = roi_scores(&gradcam_map(&cam, n)?, n)?;
                for (a, v) in acc.iter_mut().zip(scores) {
                    *a += v;
                }
            }
            for a in &mut acc {
                *a /= models.len() as f64;
            }
            Ok(acc)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitneyResult {
    /// U statistic of the first sample.
    pub u: f64,
    pub z: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn check_groups(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidInput(
            "each group needs at least two subjects".into(),
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in group test".into()));
    }
    Ok(())
}

/// Two-sided Welch t-test. Zero variance in both groups gives `p = 1` for
/// equal means and `p = 0` otherwise.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    check_groups(a, b)?;
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let equal = ma == mb;
        return Ok(WelchResult {
            t: if equal {
                0.0
            } else {
                (ma - mb).signum() * f64::INFINITY
            },
            df: (a.len() + b.len() - 2) as f64,
            p: if equal { 1.0 } else { 0.0 },
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist =
        StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(format!("Student t: {e}")))?;
    Ok(WelchResult {
        t,
        df,
        p: (2.0 * dist.sf(t.abs())).min(1.0),
    })
}

/// Two-sided Mann–Whitney U test, normal approximation with tie and
/// continuity correction.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<MannWhitneyResult> {
    check_groups(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&all);
    let ra: f64 = ranks[..a.len()].iter().sum();
    let u = ra - na * (na + 1.0) / 2.0;
    let n = na + nb;
    let mu = na * nb / 2.0;
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term(&all) / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(MannWhitneyResult { u, z: 0.0, p: 1.0 });
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt() * (u - mu).signum();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(MannWhitneyResult {
        u,
        z,
        p: (2.0 * normal.sf(z.abs())).min(1.0),
    })
}

/// `Σ (t³ − t)` over groups of tied values.
fn tie_term(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let mut sum = 0.0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i + 1;
        while j < v.len() && v[j] == v[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        sum += t * t * t - t;
        i = j;
    }
    sum
}

/// Cohen's d with the pooled SD; `None` when the pooled variance is zero.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
    (pooled > 0.0 && pooled.is_finite()).then(|| (ma - mb) / pooled.sqrt())
}

pub fn bonferroni(p: &[f64]) -> Vec<f64> {
    let m = p.len() as f64;
    p.iter().map(|v| (v * m).min(1.0)).collect()
}

/// Benjamini–Hochberg step-up q-values, returned in input order.
pub fn bh_qvalues(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p[i].total_cmp(&p[j]).then(i.cmp(&j)));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        q[i] = running.min(1.0);
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub df: usize,
    pub p: f64,
}

/// Kruskal–Wallis H over `values` grouped by `groups[i]`, with midranks and
/// tie correction; p from χ² with `k − 1` degrees of freedom.
pub fn kruskal_wallis(values: &[f64], groups: &[usize]) -> Result<KruskalWallis> {
    if values.len() != groups.len() {
        return Err(Error::Shape("values and grouping differ in length".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite value in Kruskal-Wallis input".into(),
        ));
    }
    let k = groups.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &g in groups {
        sizes[g] += 1;
    }
    sizes.retain(|&s| s > 0);
    if sizes.len() < 2 || sizes.iter().any(|&s| s < 2) {
        return Err(Error::InvalidInput(
            "Kruskal-Wallis needs at least two groups of at least two values".into(),
        ));
    }
    let n = values.len() as f64;
    let ranks = midranks(values);
    let mut rank_sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&g, r) in groups.iter().zip(&ranks) {
        rank_sums[g] += r;
        counts[g] += 1;
    }
    let s: f64 = rank_sums
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(r, &c)| r * r / c as f64)
        .sum();
    let df = sizes.len() - 1;
    let correction = 1.0 - tie_term(values) / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(KruskalWallis { h: 0.0, df, p: 1.0 });
    }
    let h = ((12.0 / (n * (n + 1.0)) * s - 3.0 * (n + 1.0)) / correction).max(0.0);
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::Numeric(format!("chi-square: {e}")))?;
    Ok(KruskalWallis {
        h,
        df,
        p: chi.sf(h),
    })
}

/// Named grouping → group indices in order of first appearance.
pub fn group_indices(names: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut levels: Vec<String> = Vec::new();
    let idx = names
        .iter()
        .map(|n| match levels.iter().position(|l| l == n) {
            Some(i) => i,
            None => {
                levels.push(n.clone());
                levels.len() - 1
            }
        })
        .collect();
    (idx, levels)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupTest {
    #[default]
    Welch,
    MannWhitney,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiStat {
    pub roi: usize,
    pub welch: WelchResult,
    pub mann_whitney: MannWhitneyResult,
    /// p of the configured primary test.
    pub p: f64,
    pub p_bonferroni: f64,
    pub q_bh: f64,
    pub cohens_d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub test: GroupTest,
    pub descriptor: Descriptor,
    pub n_a: usize,
    pub n_b: usize,
    pub rois: Vec<RoiStat>,
    pub large_effect_count: usize,
    /// ROIs whose pooled variance is zero, so d is undefined.
    pub undefined_d: Vec<usize>,
    pub network: Option<KruskalWallis>,
}

/// ROI-wise comparison of group `a` against group `b` (effects are `a − b`).
pub fn roi_stat_tests(
    a: &FeatureMatrix,
    b: &FeatureMatrix,
    descriptor: Descriptor,
    test: GroupTest,
) -> Result<StatReport> {
    if a.n_cols != b.n_cols {
        return Err(Error::Shape("feature matrices differ in ROI count".into()));
    }
    let mut rois = Vec::with_capacity(a.n_cols);
    for r in 0..a.n_cols {
        let (xa, xb) = (a.column(r), b.column(r));
        let welch = welch_t(&xa, &xb)?;
        let mw = mann_whitney(&xa, &xb)?;
        rois.push(RoiStat {
            roi: r,
            p: match test {
                GroupTest::Welch => welch.p,
                GroupTest::MannWhitney => mw.p,
            },
            welch,
            mann_whitney: mw,
            p_bonferroni: 0.0,
            q_bh: 0.0,
            cohens_d: cohens_d(&xa, &xb),
        });
    }
    let p: Vec<f64> = rois.iter().map(|r| r.p).collect();
    for ((r, bo), q) in rois.iter_mut().zip(bonferroni(&p)).zip(bh_qvalues(&p)) {
        r.p_bonferroni = bo;
        r.q_bh = q;
    }
    Ok(StatReport {
        test,
        descriptor,
        n_a: a.n_rows,
        n_b: b.n_rows,
        large_effect_count: rois
            .iter()
            .filter(|r| r.cohens_d.is_some_and(|d| d.abs() > LARGE_EFFECT))
            .count(),
        undefined_d: rois
            .iter()
            .filter(|r| r.cohens_d.is_none())
            .map(|r| r.roi)
            .collect(),
        rois,
        network: None,
    })
}

pub fn roi_importance_csv(imp: &RoiImportance, names: &[String], preamble: &[String]) -> String {
    let mut out = String::new();
    for line in preamble {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str("roi_id,name,score,selected\n");
    for (r, s) in imp.scores.iter().enumerate() {
        let name = names.get(r).map_or("", String::as_str);
        let _ = writeln!(
            out,
            "{},{name},{s},{}",
            r + 1,
            u8::from(imp.selected.contains(&r))
        );
    }
    out
}

pub fn stats_report_csv(report: &StatReport, names: &[String], preamble: &[String]) -> String {
    let mut out = String::new();
    for line in preamble {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str(
        "roi_id,name,welch_t,welch_df,welch_p,mw_u,mw_z,mw_p,p,p_bonferroni,q_bh,cohens_d\n",
    );
    for r in &report.rois {
        let name = names.get(r.roi).map_or("", String::as_str);
        let d = r.cohens_d.map_or(String::from("NA"), |d| d.to_string());
        let _ = writeln!(
            out,
            "{},{name},{},{},{},{},{},{},{},{},{},{d}",
            r.roi + 1,
            r.welch.t,
            r.welch.df,
            r.welch.p,
            r.mann_whitney.u,
            r.mann_whitney.z,
            r.mann_whitney.p,
            r.p,
            r.p_bonferroni,
            r.q_bh
        );
    }
    out
}
