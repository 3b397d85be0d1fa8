//! Synthetic labelled data, label-noise injection, feature augmentation and
//! seeded mini-batching.
//!
//! Gaussian blobs stand in for images. Noise is injected with exact per-class
//! counts: for every true class `c` with `N_c` members exactly
//! `round(r * N_c)` samples are corrupted. Whether the original recipe counts
//! per class or globally is not pinned down; the per-class variant is used.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndkernel::Matrix;
use crate::rng::{substream, tags};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("label {label} at sample {index} is outside [0, {num_classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed snapshot: {0}")]
    Malformed(String),
}

fn invalid(name: &'static str, reason: impl Into<String>) -> DatasetError {
    DatasetError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

/// Features with both ground-truth and observed labels.
///
/// `true_labels` exist for evaluation. Training code only reads
/// [`LabeledDataset::given_labels`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    true_labels: Vec<usize>,
    given_labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Matrix,
        true_labels: Vec<usize>,
        given_labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DatasetError> {
        let n = features.rows();
        for (what, labels) in [
            ("true_labels", &true_labels),
            ("given_labels", &given_labels),
        ] {
            if labels.len() != n {
                return Err(DatasetError::LengthMismatch {
                    what,
                    expected: n,
                    got: labels.len(),
                });
            }
            if let Some((index, &label)) =
                labels.iter().enumerate().find(|(_, &l)| l >= num_classes)
            {
                return Err(DatasetError::LabelOutOfRange {
                    index,
                    label,
                    num_classes,
                });
            }
        }
        Ok(LabeledDataset {
            features,
            true_labels,
            given_labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn given_labels(&self) -> &[usize] {
        &self.given_labels
    }

    /// Ground truth. Evaluation only.
    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    /// Fraction of samples whose given label differs from the true one.
    pub fn noise_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let flipped = self
            .true_labels
            .iter()
            .zip(&self.given_labels)
            .filter(|(t, g)| t != g)
            .count();
        flipped as f64 / self.len() as f64
    }

    /// Indices grouped by true class.
    fn indices_by_true_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, &t) in self.true_labels.iter().enumerate() {
            groups[t].push(i);
        }
        groups
    }

    /// Writes `feat_0..feat_{D-1},true_label,given_label`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dims()).map(|j| format!("feat_{j}")).collect();
        header.push("true_label".into());
        header.push("given_label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self
                .features
                .row(i)
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            rec.push(self.true_labels[i].to_string());
            rec.push(self.given_labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a snapshot written by [`LabeledDataset::write_csv`]. The class
    /// count is not stored in the file and must be supplied.
    pub fn read_csv<R: std::io::Read>(reader: R, num_classes: usize) -> Result<Self, DatasetError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let cols = header.len();
        if cols < 3 || &header[cols - 2] != "true_label" || &header[cols - 1] != "given_label" {
            return Err(DatasetError::Malformed("unexpected header".into()));
        }
        let dims = cols - 2;
        for (j, name) in header.iter().take(dims).enumerate() {
            if name != format!("feat_{j}") {
                return Err(DatasetError::Malformed(format!("column {j} is {name:?}")));
            }
        }
        let mut data = Vec::new();
        let mut true_labels = Vec::new();
        let mut given_labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for field in rec.iter().take(dims) {
                data.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| DatasetError::Malformed(format!("{field:?}: {e}")))?,
                );
            }
            let parse_label = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| DatasetError::Malformed(format!("{s:?}: {e}")))
            };
            true_labels.push(parse_label(&rec[dims])?);
            given_labels.push(parse_label(&rec[dims + 1])?);
        }
        let features = Matrix::new(true_labels.len(), dims, data)
            .map_err(|e| DatasetError::Malformed(e.to_string()))?;
        LabeledDataset::new(features, true_labels, given_labels, num_classes)
    }

    pub fn load_csv(path: &Path, num_classes: usize) -> Result<Self, DatasetError> {
        Self::read_csv(std::fs::File::open(path)?, num_classes)
    }
}

/// Shape of a Gaussian-blob problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dims: usize,
    pub separation: f64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.num_classes < 2 {
            return Err(invalid("num_classes", "need at least 2 classes"));
        }
        if self.per_class < 1 {
            return Err(invalid("per_class", "need at least 1 sample per class"));
        }
        if self.dims < 2 {
            return Err(invalid("dims", "need at least 2 dimensions"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(invalid("separation", "must be positive"));
        }
        Ok(())
    }
}

/// Class means with pairwise distance at least `separation`.
///
/// Means start as standard-normal draws and are rescaled so the closest pair
/// sits exactly at `separation`; the remaining pairs are farther apart, which
/// gives the classes uneven difficulty.
pub fn blob_centers(spec: &BlobSpec, seed: u64) -> Matrix {
    let mut rng = substream(seed, &[tags::CENTERS]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (c, d) = (spec.num_classes, spec.dims);
    let mut centers = Matrix::zeros(c, d);
    loop {
        for v in centers.data_mut() {
            *v = normal.sample(&mut rng);
        }
        let min = min_pairwise_distance(&centers);
        if min > 1e-6 {
            // tiny margin so rounding never lands below the requested distance
            let factor = spec.separation / min * (1.0 + 1e-12);
            return centers.scale(factor);
        }
    }
}

pub(crate) fn min_pairwise_distance(points: &Matrix) -> f64 {
    let mut min = f64::INFINITY;
    for a in 0..points.rows() {
        for b in a + 1..points.rows() {
            let d2 = points
                .row(a)
                .iter()
                .zip(points.row(b))
                .fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y));
            min = min.min(d2.sqrt());
        }
    }
    min
}

fn sample_blobs(centers: &Matrix, per_class: usize, stream: u64, seed: u64) -> LabeledDataset {
    let mut rng = substream(seed, &[stream]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (c, d) = (centers.rows(), centers.cols());
    let mut features = Matrix::zeros(c * per_class, d);
    let mut labels = Vec::with_capacity(c * per_class);
    for class in 0..c {
        for k in 0..per_class {
            let row = features.row_mut(class * per_class + k);
            for (v, mu) in row.iter_mut().zip(centers.row(class)) {
                *v = mu + normal.sample(&mut rng);
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(features, labels.clone(), labels, c).expect("labels in range")
}

/// `num_classes * per_class` samples, class `c` drawn from `Normal(mu_c, I)`.
/// Samples are stored class by class.
pub fn make_gaussian_blobs(spec: &BlobSpec, seed: u64) -> Result<LabeledDataset, DatasetError> {
    spec.validate()?;
    let centers = blob_centers(spec, seed);
    Ok(sample_blobs(&centers, spec.per_class, tags::SAMPLES, seed))
}

/// Train set as [`make_gaussian_blobs`] plus an independent test set of
/// `test_per_class` samples per class around the same means.
pub fn make_blob_split(
    spec: &BlobSpec,
    test_per_class: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DatasetError> {
    spec.validate()?;
    let centers = blob_centers(spec, seed);
    Ok((
        sample_blobs(&centers, spec.per_class, tags::SAMPLES, seed),
        sample_blobs(&centers, test_per_class, tags::TEST_SAMPLES, seed),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
}

/// Label-noise model.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Target class per source class. Used by asymmetric noise only; `None`
    /// means `c -> (c + 1) mod C`.
    pub flip_map: Option<Vec<usize>>,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn apply(&self, ds: &LabeledDataset) -> Result<LabeledDataset, DatasetError> {
        match self.kind {
            NoiseKind::Symmetric => inject_symmetric_noise(ds, self.rate, self.seed),
            NoiseKind::Asymmetric => {
                let map = self
                    .flip_map
                    .clone()
                    .unwrap_or_else(|| next_class_flip_map(ds.num_classes()));
                inject_asymmetric_noise(ds, self.rate, &map, self.seed)
            }
        }
    }
}

/// `c -> (c + 1) mod C`.
pub fn next_class_flip_map(num_classes: usize) -> Vec<usize> {
    (0..num_classes).map(|c| (c + 1) % num_classes).collect()
}

fn check_rate(rate: f64) -> Result<(), DatasetError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(invalid("rate", format!("{rate} is outside [0, 1]")));
    }
    Ok(())
}

/// Picks `round(rate * N_c)` members of each true class and hands each one to
/// `relabel`.
fn corrupt_per_class(
    ds: &LabeledDataset,
    rate: f64,
    seed: u64,
    mut relabel: impl FnMut(usize, &mut rand_chacha::ChaCha8Rng) -> usize,
) -> LabeledDataset {
    let mut rng = substream(seed, &[tags::NOISE]);
    let mut given = ds.given_labels.clone();
    for (class, mut members) in ds.indices_by_true_class().into_iter().enumerate() {
        let count = (rate * members.len() as f64).round() as usize;
        members.shuffle(&mut rng);
        for &i in members.iter().take(count) {
            given[i] = relabel(class, &mut rng);
        }
    }
    LabeledDataset {
        features: ds.features.clone(),
        true_labels: ds.true_labels.clone(),
        given_labels: given,
        num_classes: ds.num_classes,
    }
}

/// Relabels `round(rate * N_c)` samples of every class `c` with a class drawn
/// uniformly from the `C - 1` other classes.
pub fn inject_symmetric_noise(
    ds: &LabeledDataset,
    rate: f64,
    seed: u64,
) -> Result<LabeledDataset, DatasetError> {
    check_rate(rate)?;
    let c = ds.num_classes();
    if c < 2 {
        return Err(invalid("num_classes", "symmetric noise needs C >= 2"));
    }
    Ok(corrupt_per_class(ds, rate, seed, |class, rng| {
        let u = rng.random_range(0..c - 1);
        if u >= class {
            u + 1
        } else {
            u
        }
    }))
}

/// Relabels `round(rate * N_c)` samples of every class `c` as `flip_map[c]`.
pub fn inject_asymmetric_noise(
    ds: &LabeledDataset,
    rate: f64,
    flip_map: &[usize],
    seed: u64,
) -> Result<LabeledDataset, DatasetError> {
    check_rate(rate)?;
    let c = ds.num_classes();
    if flip_map.len() != c {
        return Err(DatasetError::LengthMismatch {
            what: "flip_map",
            expected: c,
            got: flip_map.len(),
        });
    }
    for (src, &dst) in flip_map.iter().enumerate() {
        if dst >= c || dst == src {
            return Err(invalid("flip_map", format!("class {src} maps to {dst}")));
        }
    }
    Ok(corrupt_per_class(ds, rate, seed, |class, _| {
        flip_map[class]
    }))
}

/// Feature-space augmentation strengths. Weak: Gaussian jitter. Strong:
/// larger jitter followed by per-coordinate dropout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub strong_dropout_prob: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            weak_sigma: 0.1,
            strong_sigma: 0.5,
            strong_dropout_prob: 0.2,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.weak_sigma >= 0.0 && self.weak_sigma.is_finite()) {
            return Err(invalid("weak_sigma", "must be >= 0"));
        }
        if !(self.strong_sigma >= self.weak_sigma && self.strong_sigma.is_finite()) {
            return Err(invalid("strong_sigma", "must be >= weak_sigma"));
        }
        if !(0.0..1.0).contains(&self.strong_dropout_prob) {
            return Err(invalid("strong_dropout_prob", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn jitter<R: Rng>(x: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    for v in x.iter_mut() {
        *v += normal.sample(rng);
    }
}

pub fn weak_augment<R: Rng>(x: &[f64], spec: &AugmentationSpec, rng: &mut R) -> Vec<f64> {
    let mut out = x.to_vec();
    jitter(&mut out, spec.weak_sigma, rng);
    out
}

pub fn strong_augment<R: Rng>(x: &[f64], spec: &AugmentationSpec, rng: &mut R) -> Vec<f64> {
    let mut out = x.to_vec();
    jitter(&mut out, spec.strong_sigma, rng);
    if spec.strong_dropout_prob > 0.0 {
        for v in out.iter_mut() {
            if rng.random::<f64>() < spec.strong_dropout_prob {
                *v = 0.0;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strength {
    Weak,
    Strong,
}

/// Augments every row of `m` with a generator from the `(seed, tags)`
/// substream. Weak and strong draws use different stream tags, so two views
/// of one sample are independent.
pub fn augment_rows(
    m: &Matrix,
    spec: &AugmentationSpec,
    strength: Strength,
    seed: u64,
    stream: &[u64],
) -> Matrix {
    let tag = match strength {
        Strength::Weak => tags::WEAK,
        Strength::Strong => tags::STRONG,
    };
    let mut path = Vec::with_capacity(stream.len() + 1);
    path.push(tag);
    path.extend_from_slice(stream);
    let mut rng = substream(seed, &path);
    let mut out = m.clone();
    for r in 0..m.rows() {
        let aug = match strength {
            Strength::Weak => weak_augment(m.row(r), spec, &mut rng),
            Strength::Strong => strong_augment(m.row(r), spec, &mut rng),
        };
        out.row_mut(r).copy_from_slice(&aug);
    }
    out
}

/// Shuffles `indices` with the `(seed, epoch)` stream and cuts it into
/// batches of `batch_size`; a short final batch is kept.
pub fn batch_iterator(
    indices: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>, DatasetError> {
    if batch_size == 0 {
        return Err(invalid("batch_size", "must be >= 1"));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut substream(seed, &[tags::BATCH, epoch]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Independently shuffled clean and noisy batches, paired up to the shorter
/// of the two sequences.
pub fn paired_batches(
    clean: &[usize],
    noisy: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>, DatasetError> {
    let c = batch_iterator(clean, batch_size, seed, epoch)?;
    let n = batch_iterator(noisy, batch_size, seed ^ 0x05ee_d0fa_015e, epoch)?;
    Ok(c.into_iter().zip(n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(c: usize, n: usize, d: usize, sep: f64, seed: u64) -> LabeledDataset {
        make_gaussian_blobs(
            &BlobSpec {
                num_classes: c,
                per_class: n,
                dims: d,
                separation: sep,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn blob_counts() {
        let ds = blobs(2, 5, 2, 4.0, 11);
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.true_labels().iter().filter(|&&l| l == 0).count(), 5);
        assert_eq!(ds.true_labels().iter().filter(|&&l| l == 1).count(), 5);
        assert_eq!(ds.true_labels(), ds.given_labels());
    }

    #[test]
    fn blobs_are_deterministic() {
        assert_eq!(blobs(3, 20, 4, 5.0, 9), blobs(3, 20, 4, 5.0, 9));
        assert_ne!(blobs(3, 20, 4, 5.0, 9), blobs(3, 20, 4, 5.0, 10));
    }

    #[test]
    fn centers_respect_separation() {
        for seed in 0..20 {
            let spec = BlobSpec {
                num_classes: 10,
                per_class: 1,
                dims: 8,
                separation: 8.0,
            };
            assert!(min_pairwise_distance(&blob_centers(&spec, seed)) >= 8.0);
        }
    }

    #[test]
    fn separated_blobs_nearest_centroid() {
        // oracle: nearest empirical centroid computed from true labels
        let ds = blobs(4, 200, 2, 8.0, 3);
        let mut centroids = Matrix::zeros(4, 2);
        for i in 0..ds.len() {
            let c = ds.true_labels()[i];
            for j in 0..2 {
                centroids.set(c, j, centroids.get(c, j) + ds.features().get(i, j) / 200.0);
            }
        }
        let correct = (0..ds.len())
            .filter(|&i| {
                let x = ds.features().row(i);
                let best = (0..4)
                    .min_by(|&a, &b| {
                        let da: f64 = x
                            .iter()
                            .zip(centroids.row(a))
                            .map(|(p, q)| (p - q).powi(2))
                            .sum();
                        let db: f64 = x
                            .iter()
                            .zip(centroids.row(b))
                            .map(|(p, q)| (p - q).powi(2))
                            .sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == ds.true_labels()[i]
            })
            .count();
        assert!(correct as f64 / ds.len() as f64 > 0.99);
    }

    #[test]
    fn symmetric_noise_examples() {
        let ds = blobs(4, 100, 3, 5.0, 1);
        assert_eq!(inject_symmetric_noise(&ds, 0.0, 5).unwrap(), ds);

        let noisy = inject_symmetric_noise(&ds, 0.5, 5).unwrap();
        let flipped = (0..ds.len())
            .filter(|&i| noisy.given_labels()[i] != noisy.true_labels()[i])
            .count();
        assert_eq!(flipped, 200);
        assert_eq!(noisy.features(), ds.features());
        assert_eq!(noisy.true_labels(), ds.true_labels());

        let two = blobs(2, 7, 2, 5.0, 1);
        let all = inject_symmetric_noise(&two, 1.0, 2).unwrap();
        for i in 0..two.len() {
            assert_eq!(all.given_labels()[i], 1 - all.true_labels()[i]);
        }
    }

    #[test]
    fn symmetric_noise_rejects_bad_rate() {
        let ds = blobs(2, 3, 2, 5.0, 1);
        assert!(inject_symmetric_noise(&ds, 1.5, 0).is_err());
    }

    #[test]
    fn asymmetric_noise_examples() {
        let ds = blobs(3, 10, 2, 5.0, 4);
        let map = next_class_flip_map(3);
        assert_eq!(inject_asymmetric_noise(&ds, 0.0, &map, 1).unwrap(), ds);

        let all = inject_asymmetric_noise(&ds, 1.0, &map, 1).unwrap();
        for i in 0..ds.len() {
            assert_eq!(all.given_labels()[i], (ds.true_labels()[i] + 1) % 3);
        }

        let part = inject_asymmetric_noise(&ds, 0.4, &map, 1).unwrap();
        for c in 0..3 {
            let corrupted: Vec<usize> = (0..ds.len())
                .filter(|&i| part.true_labels()[i] == c && part.given_labels()[i] != c)
                .map(|i| part.given_labels()[i])
                .collect();
            assert_eq!(corrupted.len(), 4);
            assert!(corrupted.iter().all(|&g| g == map[c]));
        }
    }

    #[test]
    fn asymmetric_map_must_not_fix_a_class() {
        let ds = blobs(3, 2, 2, 5.0, 4);
        assert!(inject_asymmetric_noise(&ds, 0.5, &[1, 1, 0], 0).is_err());
        assert!(inject_asymmetric_noise(&ds, 0.5, &[1, 2], 0).is_err());
    }

    #[test]
    fn zero_strength_augmentations_are_identity() {
        let x = [1.0, -2.0, 3.5];
        let spec = AugmentationSpec {
            weak_sigma: 0.0,
            strong_sigma: 0.0,
            strong_dropout_prob: 0.0,
        };
        let mut rng = substream(0, &[]);
        assert_eq!(weak_augment(&x, &spec, &mut rng), x.to_vec());
        assert_eq!(strong_augment(&x, &spec, &mut rng), x.to_vec());
    }

    #[test]
    fn weak_jitter_is_unbiased() {
        let spec = AugmentationSpec::default();
        let x = [0.5, -1.0, 2.0, 0.0];
        let mut rng = substream(42, &[]);
        let n = 10_000;
        let mut mean = [0.0; 4];
        for _ in 0..n {
            let y = weak_augment(&x, &spec, &mut rng);
            assert_eq!(y.len(), 4);
            for j in 0..4 {
                mean[j] += (y[j] - x[j]) / n as f64;
            }
        }
        let bound = 3.0 * spec.weak_sigma / (n as f64).sqrt();
        assert!(mean.iter().all(|m| m.abs() < bound), "{mean:?}");
    }

    #[test]
    fn weak_and_strong_streams_differ() {
        let m = Matrix::filled(2, 3, 1.0);
        let spec = AugmentationSpec {
            strong_dropout_prob: 0.0,
            strong_sigma: 0.1,
            ..AugmentationSpec::default()
        };
        let w = augment_rows(&m, &spec, Strength::Weak, 5, &[1]);
        let s = augment_rows(&m, &spec, Strength::Strong, 5, &[1]);
        assert_ne!(w, s);
        assert_eq!(w, augment_rows(&m, &spec, Strength::Weak, 5, &[1]));
    }

    #[test]
    fn batching() {
        let idx: Vec<usize> = (0..10).collect();
        let one = batch_iterator(&idx, 10, 1, 0).unwrap();
        assert_eq!(one.len(), 1);
        let mut sorted = one[0].clone();
        sorted.sort_unstable();
        assert_eq!(sorted, idx);

        let sizes: Vec<usize> = batch_iterator(&idx, 4, 1, 0)
            .unwrap()
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        assert_eq!(
            batch_iterator(&idx, 3, 8, 2).unwrap(),
            batch_iterator(&idx, 3, 8, 2).unwrap()
        );
        assert_ne!(
            batch_iterator(&idx, 3, 8, 2).unwrap(),
            batch_iterator(&idx, 3, 8, 3).unwrap()
        );

        assert!(batch_iterator(&[], 4, 1, 0).unwrap().is_empty());
        assert!(batch_iterator(&idx, 0, 1, 0).is_err());
    }

    #[test]
    fn paired_batches_truncate_to_shorter() {
        let clean: Vec<usize> = (0..10).collect();
        let noisy: Vec<usize> = (10..14).collect();
        let pairs = paired_batches(&clean, &noisy, 4, 3, 0).unwrap();
        assert_eq!(pairs.len(), 1);
        assert!(paired_batches(&clean, &[], 4, 3, 0).unwrap().is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let ds = inject_symmetric_noise(&blobs(3, 4, 3, 5.0, 2), 0.5, 1).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("feat_0,feat_1,feat_2,true_label,given_label\n"));
        let back = LabeledDataset::read_csv(buf.as_slice(), 3).unwrap();
        assert_eq!(back.given_labels(), ds.given_labels());
        assert_eq!(back.true_labels(), ds.true_labels());
        for (a, b) in back.features().data().iter().zip(ds.features().data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn csv_rejects_label_out_of_range() {
        let text = "feat_0,feat_1,true_label,given_label\n0.0,1.0,0,5\n";
        assert!(matches!(
            LabeledDataset::read_csv(text.as_bytes(), 2),
            Err(DatasetError::LabelOutOfRange { .. })
        ));
    }
}
