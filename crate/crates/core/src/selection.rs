//! Clean-sample selection from label/prediction disagreement.
//!
//! Every sample gets a Jensen-Shannon divergence `d_i` between its one-hot
//! given label and the predicted distribution. The divergence statistics set
//! a cutoff, the cutoff sets a filter rate `R`, and the lowest-divergence `R`
//! fraction of *each class* is taken as clean. A class-agnostic variant backs
//! the "without balancing" ablation.

use std::f64::consts::LN_2;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::LabeledDataset;
use crate::model::{ModelError, NetId, TwinNetworks};
use crate::ndkernel::Matrix;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("label {label} at sample {index} is outside [0, {num_classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("filter rate {0} is outside [0, 1]")]
    BadRate(f64),
    #[error("cannot compute divergences for an empty dataset")]
    Empty,
    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

fn check_distribution(name: &str, p: &[f64]) -> Result<(), SelectionError> {
    if p.is_empty() {
        return Err(SelectionError::NotADistribution(format!("{name} is empty")));
    }
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(SelectionError::NotADistribution(format!(
            "{name} has entry {v}"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(SelectionError::NotADistribution(format!(
            "{name} sums to {total}"
        )));
    }
    Ok(())
}

/// `sum_c a_c ln(a_c / m_c)` over the support of `a`.
fn kl_to_mixture(a: &[f64], m: &[f64]) -> f64 {
    a.iter()
        .zip(m)
        .filter(|(&ac, _)| ac > 0.0)
        .fold(0.0, |acc, (&ac, &mc)| acc + ac * (ac / mc).ln())
}

/// Base-2 Jensen-Shannon divergence, in `[0, 1]`.
pub fn jsd(y: &[f64], p: &[f64]) -> Result<f64, SelectionError> {
    if y.len() != p.len() {
        return Err(SelectionError::LengthMismatch {
            what: "jsd inputs",
            expected: y.len(),
            got: p.len(),
        });
    }
    check_distribution("y", y)?;
    check_distribution("p", p)?;
    Ok(jsd_unchecked(y, p))
}

fn jsd_unchecked(y: &[f64], p: &[f64]) -> f64 {
    let m: Vec<f64> = y.iter().zip(p).map(|(a, b)| 0.5 * (a + b)).collect();
    let nats = 0.5 * kl_to_mixture(y, &m) + 0.5 * kl_to_mixture(p, &m);
    (nats / LN_2).clamp(0.0, 1.0)
}

/// JSD between a one-hot label and `p`, using only the label's support for
/// the first KL term.
fn jsd_one_hot(label: usize, p: &[f64]) -> f64 {
    let m_label = 0.5 * (1.0 + p[label]);
    let kl_y = (1.0 / m_label).ln();
    let kl_p = p
        .iter()
        .enumerate()
        .filter(|(_, &pc)| pc > 0.0)
        .fold(0.0, |acc, (c, &pc)| {
            let mc = if c == label { m_label } else { 0.5 * pc };
            acc + pc * (pc / mc).ln()
        });
    ((0.5 * kl_y + 0.5 * kl_p) / LN_2).clamp(0.0, 1.0)
}

/// Per-sample divergences with their mean and minimum.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceReport {
    pub d: Vec<f64>,
    pub d_avg: f64,
    pub d_min: f64,
}

impl DivergenceReport {
    pub fn from_values(d: Vec<f64>) -> Result<Self, SelectionError> {
        if d.is_empty() {
            return Err(SelectionError::Empty);
        }
        let d_avg = d.iter().sum::<f64>() / d.len() as f64;
        let d_min = d.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(DivergenceReport { d, d_avg, d_min })
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }
}

/// `d_i = JSD(onehot(label_i), probs_i)` for every row.
pub fn divergences_from_probs(
    probs: &Matrix,
    labels: &[usize],
) -> Result<DivergenceReport, SelectionError> {
    if probs.rows() != labels.len() {
        return Err(SelectionError::LengthMismatch {
            what: "labels",
            expected: probs.rows(),
            got: labels.len(),
        });
    }
    let c = probs.cols();
    let mut d = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(SelectionError::LabelOutOfRange {
                index: i,
                label,
                num_classes: c,
            });
        }
        let p = probs.row(i);
        check_distribution("prediction", p)?;
        d.push(jsd_one_hot(label, p));
    }
    DivergenceReport::from_values(d)
}

/// Where the predicted distribution in the divergence comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictionSource {
    /// Mean of both networks' softmax outputs.
    Ensemble,
    /// One network on its own.
    Single(NetId),
}

/// Divergences of the given labels against predictions on the raw
/// (un-augmented) training features.
pub fn compute_divergences(
    twins: &TwinNetworks,
    ds: &LabeledDataset,
    source: PredictionSource,
) -> Result<DivergenceReport, SelectionError> {
    if ds.is_empty() {
        return Err(SelectionError::Empty);
    }
    let probs = match source {
        PredictionSource::Ensemble => twins.ensemble_softmax(ds.features())?,
        PredictionSource::Single(id) => twins.get(id).forward_softmax(ds.features())?,
    };
    divergences_from_probs(&probs, ds.given_labels())
}

/// Filter coefficient `tau` and adjustment threshold `d_mu`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CutoffParams {
    pub tau: f64,
    pub d_mu: f64,
}

impl Default for CutoffParams {
    fn default() -> Self {
        CutoffParams {
            tau: 5.0,
            d_mu: 0.7,
        }
    }
}

/// `d_avg - (d_avg - d_min) / tau` when `d_avg >= d_mu`, else `d_avg`.
pub fn compute_cutoff(report: &DivergenceReport, params: &CutoffParams) -> f64 {
    if report.d_avg >= params.d_mu {
        report.d_avg - (report.d_avg - report.d_min) / params.tau
    } else {
        report.d_avg
    }
}

/// Fraction of samples with `d_i < d_cutoff` (strict).
pub fn compute_filter_rate(report: &DivergenceReport, d_cutoff: f64) -> f64 {
    let below = report.d.iter().filter(|&&d| d < d_cutoff).count();
    below as f64 / report.len() as f64
}

/// How many samples each class contributes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuotaRule {
    /// `round(R * N_j)` from class `j`: the lowest `R` portion of the class.
    #[default]
    ClassFraction,
    /// `round(N * R / C)` from every class, or all of class `j` when it has
    /// fewer members.
    EqualShare,
}

/// Clean/noisy partition plus the numbers that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    /// Ascending sample indices.
    pub clean_indices: Vec<usize>,
    /// Ascending sample indices; the complement of `clean_indices`.
    pub noisy_indices: Vec<usize>,
    pub filter_rate: f64,
    /// Absent when the caller supplied `R` directly.
    pub d_cutoff: Option<f64>,
    /// Target count per given class. Empty for the class-agnostic selector.
    pub per_class_quota: Vec<usize>,
}

impl SelectionResult {
    fn from_mask(selected: Vec<bool>, filter_rate: f64, per_class_quota: Vec<usize>) -> Self {
        let (mut clean, mut noisy) = (Vec::new(), Vec::new());
        for (i, s) in selected.into_iter().enumerate() {
            if s {
                clean.push(i);
            } else {
                noisy.push(i);
            }
        }
        SelectionResult {
            clean_indices: clean,
            noisy_indices: noisy,
            filter_rate,
            d_cutoff: None,
            per_class_quota,
        }
    }

    pub fn is_clean(&self, index: usize) -> bool {
        self.clean_indices.binary_search(&index).is_ok()
    }

    /// Writes `index,given_label,d,selected`.
    pub fn write_csv<W: Write>(
        &self,
        report: &DivergenceReport,
        given_labels: &[usize],
        mut w: W,
    ) -> Result<(), SelectionError> {
        writeln!(w, "index,given_label,d,selected")?;
        let mut clean = self.clean_indices.iter().peekable();
        for (i, (&label, d)) in given_labels.iter().zip(&report.d).enumerate() {
            let selected = clean.next_if_eq(&&i).is_some();
            writeln!(w, "{i},{label},{d:?},{}", u8::from(selected))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_rate(r: f64) -> Result<(), SelectionError> {
    if !(0.0..=1.0).contains(&r) {
        return Err(SelectionError::BadRate(r));
    }
    Ok(())
}

/// Sorts indices by `(d, index)`: lower divergence first, lower index on ties.
fn sort_by_divergence(indices: &mut [usize], d: &[f64]) {
    indices.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
}

/// Class-balanced selection: within every given class take the members with
/// the smallest divergence, up to the class quota.
pub fn uniform_select(
    report: &DivergenceReport,
    given_labels: &[usize],
    num_classes: usize,
    filter_rate: f64,
    rule: QuotaRule,
) -> Result<SelectionResult, SelectionError> {
    check_rate(filter_rate)?;
    let n = report.len();
    if given_labels.len() != n {
        return Err(SelectionError::LengthMismatch {
            what: "given_labels",
            expected: n,
            got: given_labels.len(),
        });
    }
    let mut classes = vec![Vec::new(); num_classes];
    for (i, &label) in given_labels.iter().enumerate() {
        if label >= num_classes {
            return Err(SelectionError::LabelOutOfRange {
                index: i,
                label,
                num_classes,
            });
        }
        classes[label].push(i);
    }
    let equal_share = (n as f64 * filter_rate / num_classes as f64).round() as usize;
    let mut selected = vec![false; n];
    let mut quotas = Vec::with_capacity(num_classes);
    for mut members in classes {
        let quota = match rule {
            QuotaRule::ClassFraction => (filter_rate * members.len() as f64).round() as usize,
            QuotaRule::EqualShare => equal_share.min(members.len()),
        };
        sort_by_divergence(&mut members, &report.d);
        for &i in members.iter().take(quota) {
            selected[i] = true;
        }
        quotas.push(quota);
    }
    Ok(SelectionResult::from_mask(selected, filter_rate, quotas))
}

/// Class-agnostic selection: the `round(R * N)` smallest divergences overall.
pub fn baseline_global_select(
    report: &DivergenceReport,
    filter_rate: f64,
) -> Result<SelectionResult, SelectionError> {
    check_rate(filter_rate)?;
    let n = report.len();
    let count = (filter_rate * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    sort_by_divergence(&mut order, &report.d);
    let mut selected = vec![false; n];
    for &i in order.iter().take(count) {
        selected[i] = true;
    }
    Ok(SelectionResult::from_mask(
        selected,
        filter_rate,
        Vec::new(),
    ))
}

/// Strategy for turning a filter rate into a clean set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Balancing {
    PerClass(QuotaRule),
    Global,
}

/// Cutoff, filter rate and selection in one call.
pub fn select(
    report: &DivergenceReport,
    given_labels: &[usize],
    num_classes: usize,
    params: &CutoffParams,
    balancing: Balancing,
) -> Result<SelectionResult, SelectionError> {
    let d_cutoff = compute_cutoff(report, params);
    let rate = compute_filter_rate(report, d_cutoff);
    let mut result = match balancing {
        Balancing::PerClass(rule) => uniform_select(report, given_labels, num_classes, rate, rule)?,
        Balancing::Global => baseline_global_select(report, rate)?,
    };
    result.d_cutoff = Some(d_cutoff);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn report(d: &[f64]) -> DivergenceReport {
        DivergenceReport::from_values(d.to_vec()).unwrap()
    }

    #[test]
    fn jsd_examples() {
        assert_eq!(jsd(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
        assert_eq!(jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        // 0.5*log2(1/0.75) + 0.5*(0.5*log2(0.5/0.75) + 0.5*log2(0.5/0.25))
        let oracle =
            0.5 * (4.0f64 / 3.0).log2() + 0.5 * (0.5 * (2.0f64 / 3.0).log2() + 0.5 * 2.0f64.log2());
        let v = jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.311278).abs() < 1e-5);
    }

    #[test]
    fn jsd_rejects_non_distributions() {
        assert!(jsd(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(jsd(&[1.5, -0.5], &[0.5, 0.5]).is_err());
        assert!(jsd(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn one_hot_path_matches_general_jsd() {
        let p = [0.1, 0.6, 0.3, 0.0];
        for label in 0..4 {
            let mut y = [0.0; 4];
            y[label] = 1.0;
            let a = jsd(&y, &p).unwrap();
            let b = jsd_one_hot(label, &p);
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn divergences_zero_for_exact_predictions() {
        let probs = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let r = divergences_from_probs(&probs, &[0, 2]).unwrap();
        assert_eq!(r.d, vec![0.0, 0.0]);
        assert_eq!(r.len(), 2);
        assert!(divergences_from_probs(&probs, &[0, 3]).is_err());
    }

    #[test]
    fn cutoff_examples() {
        let params = CutoffParams::default();
        let r = DivergenceReport {
            d: vec![],
            d_avg: 0.8,
            d_min: 0.2,
        };
        assert!((compute_cutoff(&r, &params) - 0.68).abs() < 1e-12);
        let r = DivergenceReport {
            d: vec![],
            d_avg: 0.5,
            d_min: 0.1,
        };
        assert_eq!(compute_cutoff(&r, &params), 0.5);
        let r = report(&[0.9, 0.9, 0.9]);
        assert!((compute_cutoff(&r, &params) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn filter_rate_examples() {
        let r = report(&[0.1, 0.3, 0.68, 0.9]);
        assert_eq!(compute_filter_rate(&r, 0.68), 0.5);
        assert_eq!(compute_filter_rate(&r, 0.05), 0.0);
        assert_eq!(compute_filter_rate(&r, 0.95), 1.0);
    }

    fn skew_example() -> (DivergenceReport, Vec<usize>) {
        // class 0 at 0..4, class 1 at 4..8
        (
            report(&[0.1, 0.2, 0.9, 0.95, 0.05, 0.4, 0.6, 0.8]),
            vec![0, 0, 0, 0, 1, 1, 1, 1],
        )
    }

    #[test]
    fn uniform_select_example() {
        let (r, labels) = skew_example();
        let sel = uniform_select(&r, &labels, 2, 0.5, QuotaRule::ClassFraction).unwrap();
        assert_eq!(sel.clean_indices, vec![0, 1, 4, 5]);
        assert_eq!(sel.noisy_indices, vec![2, 3, 6, 7]);
        assert_eq!(sel.per_class_quota, vec![2, 2]);

        let none = uniform_select(&r, &labels, 2, 0.0, QuotaRule::ClassFraction).unwrap();
        assert!(none.clean_indices.is_empty());
        let all = uniform_select(&r, &labels, 2, 1.0, QuotaRule::ClassFraction).unwrap();
        assert_eq!(all.clean_indices.len(), 8);
        assert!(uniform_select(&r, &labels, 2, 1.2, QuotaRule::ClassFraction).is_err());
        assert!(uniform_select(
            &r,
            &[0, 0, 0, 0, 1, 1, 1, 2],
            2,
            0.5,
            QuotaRule::ClassFraction
        )
        .is_err());
    }

    #[test]
    fn global_select_examples() {
        let (r, _) = skew_example();
        let sel = baseline_global_select(&r, 0.5).unwrap();
        assert_eq!(sel.clean_indices, vec![0, 1, 4, 5]);
        assert_eq!(
            baseline_global_select(&r, 1.0).unwrap().clean_indices.len(),
            8
        );

        let skewed = report(&[0.01, 0.05, 0.1, 0.02, 0.9, 0.95, 0.99, 0.92]);
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        let global = baseline_global_select(&skewed, 0.5).unwrap();
        assert_eq!(global.clean_indices, vec![0, 1, 2, 3]);
        let uniform = uniform_select(&skewed, &labels, 2, 0.5, QuotaRule::ClassFraction).unwrap();
        assert_eq!(uniform.clean_indices, vec![0, 3, 4, 7]);
    }

    #[test]
    fn equal_share_takes_everything_from_small_classes() {
        // class 1 has 2 members, the equal share is round(10 * 0.6 / 2) = 3
        let r = report(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.15, 0.25]);
        let labels = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1];
        let sel = uniform_select(&r, &labels, 2, 0.6, QuotaRule::EqualShare).unwrap();
        assert_eq!(sel.per_class_quota, vec![3, 2]);
        assert_eq!(sel.clean_indices, vec![0, 1, 2, 8, 9]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let r = report(&[0.5, 0.5, 0.5, 0.5]);
        let sel = baseline_global_select(&r, 0.5).unwrap();
        assert_eq!(sel.clean_indices, vec![0, 1]);
    }

    #[test]
    fn select_fills_cutoff() {
        let r = report(&[0.1, 0.3, 0.68, 0.9]);
        let sel = select(
            &r,
            &[0, 1, 0, 1],
            2,
            &CutoffParams::default(),
            Balancing::PerClass(QuotaRule::ClassFraction),
        )
        .unwrap();
        assert_eq!(sel.d_cutoff, Some(r.d_avg));
        assert_eq!(sel.filter_rate, 0.5);
    }

    #[test]
    fn selection_export() {
        let r = report(&[0.1, 0.3, 0.68]);
        let sel = baseline_global_select(&r, 0.34).unwrap();
        let mut buf = Vec::new();
        sel.write_csv(&r, &[0, 1, 0], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "index,given_label,d,selected\n0,0,0.1,1\n1,1,0.3,0\n2,0,0.68,0\n"
        );
    }

    fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, len).prop_filter_map("non-zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn jsd_properties((p, q) in (2usize..7).prop_flat_map(|c| (distribution(c), distribution(c)))) {
            let a = jsd(&p, &q).unwrap();
            let b = jsd(&q, &p).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(jsd(&p, &p).unwrap().abs() < 1e-9);
            let max_gap = p.iter().zip(&q).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if max_gap > 1e-3 {
                prop_assert!(a > 0.0);
            }
        }

        #[test]
        fn selection_grows_with_rate(
            d in prop::collection::vec(0.0f64..1.0, 1..80),
            r1 in 0.0f64..=1.0,
            r2 in 0.0f64..=1.0,
            c in 2usize..5,
        ) {
            let labels: Vec<usize> = (0..d.len()).map(|i| (i * 7 + 3) % c).collect();
            let rep = report(&d);
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let a = uniform_select(&rep, &labels, c, lo, QuotaRule::ClassFraction).unwrap();
            let b = uniform_select(&rep, &labels, c, hi, QuotaRule::ClassFraction).unwrap();
            prop_assert!(a.clean_indices.iter().all(|i| b.is_clean(*i)));
            let ga = baseline_global_select(&rep, lo).unwrap();
            let gb = baseline_global_select(&rep, hi).unwrap();
            prop_assert!(ga.clean_indices.iter().all(|i| gb.is_clean(*i)));
        }

        #[test]
        fn cutoff_between_min_and_mean(d in prop::collection::vec(0.0f64..1.0, 1..50)) {
            let rep = report(&d);
            let params = CutoffParams::default();
            let cut = compute_cutoff(&rep, &params);
            if rep.d_avg >= params.d_mu {
                prop_assert!(cut >= rep.d_min - 1e-15 && cut <= rep.d_avg + 1e-15);
            } else {
                prop_assert_eq!(cut, rep.d_avg);
            }
        }
    }
}
