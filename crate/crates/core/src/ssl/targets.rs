//! Soft-target construction: sharpening, label refinement for clean samples,
//! pseudo-labels for noisy samples, and MixMatch/MixUp assembly.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::SslError;
use crate::model::{NetworkParams, TwinNetworks};
use crate::ndkernel::Matrix;

/// `p_c^(1/T) / sum_k p_k^(1/T)`.
pub fn sharpen(p: &[f64], temperature: f64) -> Vec<f64> {
    let inv = 1.0 / temperature;
    let powered: Vec<f64> = p.iter().map(|v| v.powf(inv)).collect();
    let total = powered.iter().fold(0.0, |acc, v| acc + v);
    powered.into_iter().map(|v| v / total).collect()
}

pub fn sharpen_rows(m: &Matrix, temperature: f64) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let s = sharpen(m.row(r), temperature);
        out.row_mut(r).copy_from_slice(&s);
    }
    out
}

/// `w_i = 1` when `d_i < d_omega`, otherwise `1 - d_i`.
pub fn refinement_weights(d: &[f64], d_omega: f64) -> Vec<f64> {
    d.iter()
        .map(|&di| if di < d_omega { 1.0 } else { 1.0 - di })
        .collect()
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (r, &l) in labels.iter().enumerate() {
        m.set(r, l, 1.0);
    }
    m
}

/// Row-wise `w * onehot(y) + (1 - w) * p`.
pub fn blend_labels(labels: &[usize], predictions: &Matrix, weights: &[f64]) -> Matrix {
    let mut out = predictions.clone();
    for (r, (&label, &w)) in labels.iter().zip(weights).enumerate() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            let y = if c == label { 1.0 } else { 0.0 };
            *v = w * y + (1.0 - w) * *v;
        }
    }
    out
}

/// Elementwise mean of equally shaped probability matrices, summed in order.
pub fn average_predictions(parts: &[Matrix]) -> Result<Matrix, SslError> {
    let (first, rest) = parts
        .split_first()
        .ok_or(SslError::DegenerateBatch("no predictions"))?;
    let mut acc = first.clone();
    for m in rest {
        acc.add_assign(m)?;
    }
    Ok(acc.scale(1.0 / parts.len() as f64))
}

/// Refined targets for a clean batch: the trained network's mean prediction
/// over two weak views is blended with the given label by weight `w`, then
/// sharpened. Only `net` contributes.
pub fn refine_labels(
    net: &NetworkParams,
    weak_views: [&Matrix; 2],
    labels: &[usize],
    weights: &[f64],
    temperature: f64,
) -> Result<Matrix, SslError> {
    let preds = [
        net.forward_softmax(weak_views[0])?,
        net.forward_softmax(weak_views[1])?,
    ];
    let p = average_predictions(&preds)?;
    Ok(sharpen_rows(
        &blend_labels(labels, &p, weights),
        temperature,
    ))
}

/// Pseudo-labels for a noisy batch: both networks on both weak views,
/// averaged and sharpened. Each network uses its own classifier head.
pub fn guess_pseudo_labels(
    twins: &TwinNetworks,
    weak_views: [&Matrix; 2],
    temperature: f64,
) -> Result<Matrix, SslError> {
    let mut preds = Vec::with_capacity(4);
    for view in weak_views {
        preds.push(twins.net1.forward_softmax(view)?);
        preds.push(twins.net2.forward_softmax(view)?);
    }
    Ok(sharpen_rows(&average_predictions(&preds)?, temperature))
}

/// `lambda' = max(lambda, 1 - lambda)` with `lambda ~ Beta(alpha, alpha)`.
pub fn draw_mix_coefficient<R: Rng>(alpha: f64, rng: &mut R) -> f64 {
    let lambda: f64 = Beta::new(alpha, alpha)
        .expect("alpha validated")
        .sample(rng);
    lambda.max(1.0 - lambda)
}

/// Convex combination `lambda' * a + (1 - lambda') * b`.
pub fn mix(a: &[f64], b: &[f64], lambda_prime: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| lambda_prime * x + (1.0 - lambda_prime) * y)
        .collect()
}

/// One mixed sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub lambda_prime: f64,
}

pub fn mixup<R: Rng>(
    x1: &[f64],
    t1: &[f64],
    x2: &[f64],
    t2: &[f64],
    alpha: f64,
    rng: &mut R,
) -> MixedSample {
    let lambda_prime = draw_mix_coefficient(alpha, rng);
    MixedSample {
        input: mix(x1, x2, lambda_prime),
        target: mix(t1, t2, lambda_prime),
        lambda_prime,
    }
}

/// Mixed inputs with their soft targets. Every row has its own coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub lambda_prime: Vec<f64>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Inputs and targets of one side of MixMatch.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

/// Interleaves two equally shaped matrices row by row: `a0, b0, a1, b1, ...`.
pub fn interleave(a: &Matrix, b: &Matrix) -> Result<Matrix, SslError> {
    if a.shape() != b.shape() {
        return Err(crate::ndkernel::KernelError::DimensionMismatch {
            op: "interleave",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        }
        .into());
    }
    let mut out = Matrix::zeros(a.rows() * 2, a.cols());
    for r in 0..a.rows() {
        out.row_mut(2 * r).copy_from_slice(a.row(r));
        out.row_mut(2 * r + 1).copy_from_slice(b.row(r));
    }
    Ok(out)
}

/// MixMatch: shuffle the concatenation `W` of both sets, then mix the i-th
/// clean entry with `W[i]` and the i-th noisy entry with `W[i + |X|]`.
pub fn mixmatch_assemble<R: Rng>(
    clean: &LabeledBatch,
    noisy: &LabeledBatch,
    alpha: f64,
    rng: &mut R,
) -> Result<(MixedBatch, MixedBatch), SslError> {
    mixmatch_assemble_with(clean, noisy, rng, |r| draw_mix_coefficient(alpha, r))
}

/// [`mixmatch_assemble`] with a caller-supplied coefficient source.
pub fn mixmatch_assemble_with<R: Rng>(
    clean: &LabeledBatch,
    noisy: &LabeledBatch,
    rng: &mut R,
    mut coefficient: impl FnMut(&mut R) -> f64,
) -> Result<(MixedBatch, MixedBatch), SslError> {
    if clean.inputs.rows() == 0 || noisy.inputs.rows() == 0 {
        return Err(SslError::DegenerateBatch(
            "mixmatch needs clean and noisy entries",
        ));
    }
    let pool_inputs = Matrix::vstack(&[&clean.inputs, &noisy.inputs])?;
    let pool_targets = Matrix::vstack(&[&clean.targets, &noisy.targets])?;
    let mut perm: Vec<usize> = (0..pool_inputs.rows()).collect();
    perm.shuffle(rng);

    let mut build = |side: &LabeledBatch, offset: usize| {
        let n = side.inputs.rows();
        let mut inputs = Matrix::zeros(n, side.inputs.cols());
        let mut targets = Matrix::zeros(n, side.targets.cols());
        let mut lambdas = Vec::with_capacity(n);
        for i in 0..n {
            let j = perm[i + offset];
            let lam = coefficient(rng);
            inputs
                .row_mut(i)
                .copy_from_slice(&mix(side.inputs.row(i), pool_inputs.row(j), lam));
            targets
                .row_mut(i)
                .copy_from_slice(&mix(side.targets.row(i), pool_targets.row(j), lam));
            lambdas.push(lam);
        }
        MixedBatch {
            inputs,
            targets,
            lambda_prime: lambdas,
        }
    };
    let mixed_x = build(clean, 0);
    let mixed_u = build(noisy, clean.inputs.rows());
    Ok((mixed_x, mixed_u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::rng::substream;

    #[test]
    fn sharpen_examples() {
        let u = sharpen(&[0.25; 4], 0.5);
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let s = sharpen(&[0.8, 0.2], 0.5);
        assert!((s[0] - 0.941176).abs() < 1e-6);
        assert!((s[1] - 0.058824).abs() < 1e-6);
        // squaring then renormalising by hand
        assert!((s[0] - 0.64 / 0.68).abs() < 1e-15);
        let same = sharpen(&[0.3, 0.7], 1.0);
        assert!((same[0] - 0.3).abs() < 1e-15 && (same[1] - 0.7).abs() < 1e-15);
        assert_eq!(sharpen(&[1.0, 0.0, 0.0], 0.5), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn weights_follow_threshold() {
        assert_eq!(
            refinement_weights(&[0.1, 0.5, 0.8], 0.5),
            vec![1.0, 0.5, 1.0 - 0.8]
        );
    }

    #[test]
    fn blend_examples() {
        let p = Matrix::from_rows(&[[0.6, 0.4]]);
        let full = blend_labels(&[0], &p, &[1.0]);
        assert_eq!(full, Matrix::from_rows(&[[1.0, 0.0]]));
        let none = blend_labels(&[0], &p, &[0.0]);
        assert_eq!(none, p);
        let part = blend_labels(&[0], &p, &[0.3]);
        assert!((part.get(0, 0) - 0.72).abs() < 1e-12);
        assert!((part.get(0, 1) - 0.28).abs() < 1e-12);
    }

    fn arch() -> Architecture {
        Architecture {
            input_dim: 3,
            hidden_dim: 8,
            num_classes: 2,
            embed_dim: 4,
        }
    }

    #[test]
    fn refine_with_full_weight_returns_one_hot() {
        let net = NetworkParams::init(arch(), 3).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]]);
        let y = refine_labels(&net, [&x, &x], &[1, 0], &[1.0, 1.0], 0.5).unwrap();
        assert_eq!(y, Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
    }

    #[test]
    fn pseudo_labels_of_identical_twins() {
        let net = NetworkParams::init(arch(), 3).unwrap();
        let twins = TwinNetworks {
            net1: net.clone(),
            net2: net.clone(),
        };
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]]);
        let q = guess_pseudo_labels(&twins, [&x, &x], 1.0).unwrap();
        let single = net.forward_softmax(&x).unwrap();
        for (a, b) in q.data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let sharp = guess_pseudo_labels(&twins, [&x, &x], 0.5).unwrap();
        for r in 0..2 {
            assert!((sharp.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_pseudo_label_fixed_point() {
        let parts = [
            Matrix::from_rows(&[[1.0, 0.0]]),
            Matrix::from_rows(&[[1.0, 0.0]]),
            Matrix::from_rows(&[[0.0, 1.0]]),
            Matrix::from_rows(&[[0.0, 1.0]]),
        ];
        let q_bar = average_predictions(&parts).unwrap();
        assert_eq!(q_bar, Matrix::from_rows(&[[0.5, 0.5]]));
        assert_eq!(sharpen_rows(&q_bar, 0.5), q_bar);
    }

    #[test]
    fn mixup_examples() {
        assert_eq!(mix(&[1.0, 2.0], &[5.0, 7.0], 1.0), vec![1.0, 2.0]);
        let t = mix(&[1.0, 0.0], &[0.0, 1.0], 0.7);
        assert!((t[0] - 0.7).abs() < 1e-15 && (t[1] - 0.3).abs() < 1e-15);

        let mut rng = substream(4, &[]);
        for _ in 0..200 {
            let s = mixup(&[1.0], &[0.2, 0.8], &[3.0], &[0.9, 0.1], 4.0, &mut rng);
            assert!((0.5..=1.0).contains(&s.lambda_prime));
            assert!((s.target.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn batches() -> (LabeledBatch, LabeledBatch) {
        let clean = LabeledBatch {
            inputs: Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0]]),
            targets: Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]),
        };
        let noisy = LabeledBatch {
            inputs: Matrix::from_rows(&[[0.0, 3.0], [0.0, 4.0]]),
            targets: Matrix::from_rows(&[[0.0, 1.0], [0.3, 0.7]]),
        };
        (clean, noisy)
    }

    #[test]
    fn mixmatch_bookkeeping() {
        let (clean, noisy) = batches();
        let mut rng = substream(9, &[]);
        let (mx, mu) = mixmatch_assemble(&clean, &noisy, 4.0, &mut rng).unwrap();
        assert_eq!(mx.len(), 2);
        assert_eq!(mu.len(), 2);
        for b in [&mx, &mu] {
            for r in 0..b.len() {
                assert!((b.targets.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        let again = mixmatch_assemble(&clean, &noisy, 4.0, &mut substream(9, &[])).unwrap();
        assert_eq!((mx, mu), again);
    }

    #[test]
    fn mixmatch_with_unit_coefficient_is_identity() {
        let (clean, noisy) = batches();
        let mut rng = substream(2, &[]);
        let (mx, mu) = mixmatch_assemble_with(&clean, &noisy, &mut rng, |_| 1.0).unwrap();
        assert_eq!(mx.inputs, clean.inputs);
        assert_eq!(mx.targets, clean.targets);
        assert_eq!(mu.inputs, noisy.inputs);
    }

    #[test]
    fn mixmatch_partners_form_a_permutation() {
        // with coefficient 0 every output row is its partner, exposing W
        let (clean, noisy) = batches();
        let mut rng = substream(5, &[]);
        let (mx, mu) = mixmatch_assemble_with(&clean, &noisy, &mut rng, |_| 0.0).unwrap();
        let mut firsts: Vec<(u64, u64)> = Matrix::vstack(&[&mx.inputs, &mu.inputs])
            .unwrap()
            .iter_rows()
            .map(|r| (r[0].to_bits(), r[1].to_bits()))
            .collect();
        firsts.sort_unstable();
        let mut pool: Vec<(u64, u64)> = Matrix::vstack(&[&clean.inputs, &noisy.inputs])
            .unwrap()
            .iter_rows()
            .map(|r| (r[0].to_bits(), r[1].to_bits()))
            .collect();
        pool.sort_unstable();
        assert_eq!(firsts, pool);
    }

    #[test]
    fn mixmatch_rejects_empty_side() {
        let (clean, _) = batches();
        let empty = LabeledBatch {
            inputs: Matrix::zeros(0, 2),
            targets: Matrix::zeros(0, 2),
        };
        assert!(matches!(
            mixmatch_assemble(&clean, &empty, 4.0, &mut substream(1, &[])),
            Err(SslError::DegenerateBatch(_))
        ));
    }

    #[test]
    fn interleave_orders_pairs() {
        let a = Matrix::from_rows(&[[1.0], [2.0]]);
        let b = Matrix::from_rows(&[[10.0], [20.0]]);
        assert_eq!(
            interleave(&a, &b).unwrap(),
            Matrix::from_rows(&[[1.0], [10.0], [2.0], [20.0]])
        );
    }
}
