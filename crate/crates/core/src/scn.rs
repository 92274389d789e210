//! Structural covariance networks.
//!
//! A subject's network for one descriptor is
//! `alpha * corr(F_train) + (1 - alpha) * u u^T` with `u = f / |f|`, where
//! `F_train` stacks the descriptor over the training subjects of the current
//! fold. Stacking the mean-intensity and IQR networks gives the two-channel
//! input of the classifier.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, SubjectFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScnKind {
    Group,
    Individual,
    Blended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Intensity,
    Heterogeneity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationKind {
    #[default]
    Pearson,
    Spearman,
}

/// Square symmetric ROI × ROI matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScnMatrix {
    pub n: usize,
    pub values: Vec<f64>,
    pub kind: ScnKind,
}

impl ScnMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| self.get(i, j).to_string()).collect();
            writeln!(s, "{}", row.join(",")).unwrap();
        }
        s
    }
}

/// Two stacked blended networks, `[channel][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScnTensor {
    pub n: usize,
    pub data: Vec<f64>,
}

impl ScnTensor {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.n * self.n..(c + 1) * self.n * self.n]
    }
}

/// Midranks (1-based) of `values`, ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Column-wise correlation across subjects. Zero-variance columns get 0
/// off the diagonal and 1 on it.
pub fn group_covariance(f: &FeatureMatrix, kind: CorrelationKind) -> Result<ScnMatrix> {
    if f.n_rows < 2 {
        return Err(Error::InvalidInput(format!(
            "group covariance needs at least 2 subjects, got {}",
            f.n_rows
        )));
    }
    let n = f.n_cols;
    let rows = f.n_rows as f64;
    let mut columns: Vec<Vec<f64>> = (0..n).map(|j| f.column(j)).collect();
    if kind == CorrelationKind::Spearman {
        for c in columns.iter_mut() {
            *c = midranks(c);
        }
    }
    let mut norms = Vec::with_capacity(n);
    for c in columns.iter_mut() {
        let mean = c.iter().sum::<f64>() / rows;
        for v in c.iter_mut() {
            *v -= mean;
        }
        norms.push(c.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in 0..i {
            let r = if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            values[i * n + j] = r;
            values[j * n + i] = r;
        }
    }
    Ok(ScnMatrix {
        n,
        values,
        kind: ScnKind::Group,
    })
}

/// Normalised outer product `(f/|f|)(f/|f|)^T`.
pub fn individual_scn(f: &[f64]) -> Result<ScnMatrix> {
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm <= 0.0 {
        return Err(Error::DegenerateSubject);
    }
    let u: Vec<f64> = f.iter().map(|v| v / norm).collect();
    let n = u.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = u[i] * u[j];
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(ScnMatrix {
        n,
        values,
        kind: ScnKind::Individual,
    })
}

pub fn blend(group: &ScnMatrix, individual: &ScnMatrix, alpha: f64) -> Result<ScnMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if group.n != individual.n {
        return Err(Error::Shape(format!(
            "cannot blend {0}x{0} with {1}x{1}",
            group.n, individual.n
        )));
    }
    let values = group
        .values
        .iter()
        .zip(&individual.values)
        .map(|(g, i)| alpha * g + (1.0 - alpha) * i)
        .collect();
    Ok(ScnMatrix {
        n: group.n,
        values,
        kind: ScnKind::Blended,
    })
}

/// Frozen per-fold group networks for both channels.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNetworks {
    pub intensity: ScnMatrix,
    pub heterogeneity: ScnMatrix,
}

impl GroupNetworks {
    pub fn fit<'a, I>(training: I, kind: CorrelationKind) -> Result<Self>
    where
        I: IntoIterator<Item = &'a SubjectFeatures> + Clone,
    {
        use crate::features::Descriptor;
        Ok(GroupNetworks {
            intensity: group_covariance(
                &FeatureMatrix::from_subjects(training.clone(), Descriptor::Mean)?,
                kind,
            )?,
            heterogeneity: group_covariance(
                &FeatureMatrix::from_subjects(training, Descriptor::Iqr)?,
                kind,
            )?,
        })
    }
}

pub fn build_scn_tensor(
    subject: &SubjectFeatures,
    group_mu: &ScnMatrix,
    group_iqr: &ScnMatrix,
    alpha: f64,
) -> Result<ScnTensor> {
    let c0 = blend(group_mu, &individual_scn(&subject.roi_means)?, alpha)?;
    let c1 = blend(group_iqr, &individual_scn(&subject.roi_iqrs)?, alpha)?;
    let n = c0.n;
    let mut data = c0.values;
    data.extend_from_slice(&c1.values);
    Ok(ScnTensor { n, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Class;
    use proptest::prelude::*;

    fn fm(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix {
            n_rows: rows.len(),
            n_cols: rows[0].len(),
            values: rows.iter().flat_map(|r| r.iter().copied()).collect(),
            labels: vec![Class::Hc; rows.len()],
        }
    }

    /// Brute-force Pearson straight from the textbook sums.
    fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|a| a * a).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn correlation_extremes() {
        let f = fm(&[&[1.0, 2.0, -1.0], &[2.0, 4.0, -2.0], &[4.0, 8.0, -4.0]]);
        let c = group_covariance(&f, CorrelationKind::Pearson).unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((c.get(0, 2) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn four_by_three_hand_matrix() {
        let rows: [&[f64]; 4] = [
            &[0.2, 0.5, 0.9],
            &[0.4, 0.1, 0.7],
            &[0.3, 0.3, 0.2],
            &[0.8, 0.6, 0.4],
        ];
        let c = group_covariance(&fm(&rows), CorrelationKind::Pearson).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let x: Vec<f64> = rows.iter().map(|r| r[i]).collect();
                let y: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                let expected = if i == j { 1.0 } else { pearson_oracle(&x, &y) };
                assert!((c.get(i, j) - expected).abs() < 1e-9, "({i},{j})");
            }
        }
    }

    #[test]
    fn zero_variance_column() {
        let c =
            group_covariance(&fm(&[&[1.0, 0.5], &[2.0, 0.5]]), CorrelationKind::Pearson).unwrap();
        assert_eq!(c.values, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn too_few_subjects() {
        assert!(group_covariance(&fm(&[&[1.0, 2.0]]), CorrelationKind::Pearson).is_err());
    }

    #[test]
    fn spearman_is_rank_invariant() {
        let f = fm(&[&[1.0, 1.0], &[2.0, 8.0], &[3.0, 27.0], &[4.0, 64.0]]);
        let c = group_covariance(&f, CorrelationKind::Spearman).unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-12);
        assert!(
            group_covariance(&f, CorrelationKind::Pearson)
                .unwrap()
                .get(0, 1)
                < 0.999
        );
    }

    #[test]
    fn individual_examples() {
        let mut e1 = vec![0.0; 5];
        e1[0] = 2.5;
        let m = individual_scn(&e1).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.values.iter().filter(|&&v| v != 0.0).count(), 1);
        let m = individual_scn(&[3.0, 4.0]).unwrap();
        let expected = [0.36, 0.48, 0.48, 0.64];
        for (v, e) in m.values.iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
        assert!(matches!(
            individual_scn(&[0.0, 0.0]),
            Err(Error::DegenerateSubject)
        ));
    }

    #[test]
    fn blend_examples() {
        let g = ScnMatrix {
            n: 2,
            values: vec![1.0, -0.2, -0.2, 1.0],
            kind: ScnKind::Group,
        };
        let ind = individual_scn(&[3.0, 4.0]).unwrap();
        assert_eq!(blend(&g, &ind, 1.0).unwrap().values, g.values);
        assert_eq!(blend(&g, &ind, 0.0).unwrap().values, ind.values);
        let b = blend(&g, &ind, 0.55).unwrap();
        // 0.55*1 + 0.45*0.36, 0.55*(-0.2) + 0.45*0.48, 0.55*1 + 0.45*0.64
        let expected = [0.712, 0.106, 0.106, 0.838];
        for (v, e) in b.values.iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
        assert!(blend(&g, &ind, 1.5).is_err());
        assert!(blend(&g, &individual_scn(&[1.0, 2.0, 3.0]).unwrap(), 0.5).is_err());
    }

    #[test]
    fn midranks_with_ties() {
        assert_eq!(
            midranks(&[10.0, 20.0, 10.0, 30.0]),
            vec![1.5, 3.0, 1.5, 4.0]
        );
    }

    fn features(means: Vec<f64>, iqrs: Vec<f64>) -> SubjectFeatures {
        SubjectFeatures {
            subject_id: "s".into(),
            label: Class::Adhd,
            empty_roi_flags: vec![false; means.len()],
            roi_means: means,
            roi_iqrs: iqrs,
            global_stats: crate::features::GlobalStats {
                mean: 0.5,
                std: 0.1,
                median: 0.5,
            },
        }
    }

    #[test]
    fn tensor_channels_and_diagonal() {
        let train = vec![
            features(vec![0.2, 0.4, 0.6], vec![0.1, 0.3, 0.2]),
            features(vec![0.3, 0.1, 0.5], vec![0.2, 0.1, 0.4]),
            features(vec![0.9, 0.5, 0.4], vec![0.3, 0.2, 0.1]),
        ];
        let g = GroupNetworks::fit(&train, CorrelationKind::Pearson).unwrap();
        let s = features(vec![0.5, 0.6, 0.7], vec![0.05, 0.1, 0.2]);
        let t = build_scn_tensor(&s, &g.intensity, &g.heterogeneity, 0.55).unwrap();
        assert_eq!(t.data.len(), 18);
        for (c, f) in [&s.roi_means, &s.roi_iqrs].iter().enumerate() {
            let norm2: f64 = f.iter().map(|v| v * v).sum();
            let ch = t.channel(c);
            for i in 0..3 {
                let expected = 0.55 + 0.45 * f[i] * f[i] / norm2;
                assert!((ch[i * 3 + i] - expected).abs() < 1e-9);
                for j in 0..3 {
                    assert!((ch[i * 3 + j] - ch[j * 3 + i]).abs() < 1e-9);
                }
            }
        }
    }

    /// Cholesky of `m + tol I`; succeeds iff every eigenvalue exceeds `-tol`.
    fn is_psd(m: &ScnMatrix, tol: f64) -> bool {
        let n = m.n;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = m.get(i, j) + if i == j { tol } else { 0.0 };
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if sum <= 0.0 {
                        return false;
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        true
    }

    proptest! {
        #[test]
        fn individual_is_rank_one_trace_one_and_scale_free(
            f in proptest::collection::vec(0.01f64..1.0, 2..12),
            c in 0.1f64..50.0,
        ) {
            let m = individual_scn(&f).unwrap();
            prop_assert!((m.trace() - 1.0).abs() < 1e-9);
            prop_assert!(m.max_asymmetry() < 1e-12);
            // every 2x2 minor vanishes for a rank-1 matrix
            for i in 0..m.n {
                for j in 0..m.n {
                    let minor = m.get(i, i) * m.get(j, j) - m.get(i, j) * m.get(j, i);
                    prop_assert!(minor.abs() < 1e-12);
                }
            }
            prop_assert!(is_psd(&m, 1e-9));
            let scaled: Vec<f64> = f.iter().map(|v| v * c).collect();
            let m2 = individual_scn(&scaled).unwrap();
            for (a, b) in m.values.iter().zip(&m2.values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn correlation_and_blend_are_psd(
            rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 5), 3..9),
            f in proptest::collection::vec(0.01f64..1.0, 5),
            a1 in 0.0f64..1.0,
            a2 in 0.0f64..1.0,
        ) {
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let g = group_covariance(&fm(&refs), CorrelationKind::Pearson).unwrap();
            prop_assert!(g.max_asymmetry() < 1e-12);
            prop_assert!(g.values.iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert!(is_psd(&g, 1e-8));
            let ind = individual_scn(&f).unwrap();
            let b1 = blend(&g, &ind, a1).unwrap();
            let b2 = blend(&g, &ind, a2).unwrap();
            let mid = blend(&g, &ind, (a1 + a2) / 2.0).unwrap();
            prop_assert!(is_psd(&b1, 1e-8));
            for k in 0..b1.values.len() {
                prop_assert!((b1.values[k] + b2.values[k] - 2.0 * mid.values[k]).abs() < 1e-12);
            }
        }
    }
}
