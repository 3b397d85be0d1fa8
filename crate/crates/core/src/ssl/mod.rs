//! Training: cross-entropy warmup followed by alternating semi-supervised
//! epochs on the two networks.
//!
//! Each SSL half-epoch re-selects the clean set with the current networks,
//! then walks paired clean/noisy batches. Clean samples get refined labels,
//! noisy samples get pseudo-labels from both networks, the two sets are
//! mixed, and only the network being trained takes SGD steps.

mod losses;
mod targets;

pub use losses::{
    cross_entropy, nt_xent, squared_error, total_loss, uniform_prior_penalty, LossBreakdown,
    LossVars,
};
pub use targets::{
    average_predictions, blend_labels, draw_mix_coefficient, guess_pseudo_labels, interleave, mix,
    mixmatch_assemble, mixmatch_assemble_with, mixup, one_hot, refine_labels, refinement_weights,
    sharpen, sharpen_rows, LabeledBatch, MixedBatch, MixedSample,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{
    augment_rows, batch_iterator, paired_batches, AugmentationSpec, DatasetError, LabeledDataset,
    Strength,
};
use crate::model::{ModelError, NetId, TwinNetworks, PROJECTION_PARAMS};
use crate::ndkernel::{GradientTape, KernelError, Matrix, Sgd};
use crate::rng::{derive_seed, substream, tags};
use crate::selection::{
    compute_divergences, select, Balancing, CutoffParams, DivergenceReport, PredictionSource,
    SelectionError, SelectionResult,
};

#[derive(Debug, Error)]
pub enum SslError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid hyperparameter `{key}`: {reason}")]
    InvalidHyperparameter { key: &'static str, reason: String },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(&'static str),
}

/// Training hyperparameters. Omitted fields take the reference defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// Sharpening temperature.
    pub temperature: f64,
    pub lambda_u: f64,
    pub lambda_c: f64,
    pub lambda_r: f64,
    /// Contrastive temperature.
    pub kappa: f64,
    /// Label-refinement threshold.
    pub d_omega: f64,
    /// MixUp Beta parameter.
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            temperature: 0.5,
            lambda_u: 30.0,
            lambda_c: 0.025,
            lambda_r: 1.0,
            kappa: 0.05,
            d_omega: 0.5,
            alpha: 4.0,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            warmup_epochs: 10,
            total_epochs: 60,
            lr_decay_factor: 0.1,
            lr_decay_every: 120,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), SslError> {
        fn bad(key: &'static str, reason: &str) -> Result<(), SslError> {
            Err(SslError::InvalidHyperparameter {
                key,
                reason: reason.to_string(),
            })
        }
        let positive = [
            ("temperature", self.temperature),
            ("kappa", self.kappa),
            ("alpha", self.alpha),
            ("lr", self.lr),
            ("lr_decay_factor", self.lr_decay_factor),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, "must be finite and > 0");
            }
        }
        let non_negative = [
            ("lambda_u", self.lambda_u),
            ("lambda_c", self.lambda_c),
            ("lambda_r", self.lambda_r),
            ("weight_decay", self.weight_decay),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, "must be finite and >= 0");
            }
        }
        if !(0.0..=1.0).contains(&self.d_omega) {
            return bad("d_omega", "must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every", "must be >= 1");
        }
        if self.warmup_epochs > self.total_epochs {
            return bad("warmup_epochs", "must not exceed total_epochs");
        }
        Ok(())
    }

    /// Step-decayed learning rate for a zero-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.lr_decay_every) as i32;
        self.lr * self.lr_decay_factor.powi(steps)
    }
}

/// Pipeline switches that distinguish the ablation arms.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub cutoff: CutoffParams,
    pub balancing: Balancing,
    /// When false each network selects with its own predictions only.
    pub ensemble: bool,
    pub augmentation: AugmentationSpec,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            cutoff: CutoffParams::default(),
            balancing: Balancing::PerClass(Default::default()),
            ensemble: true,
            augmentation: AugmentationSpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Ssl,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Ssl => "ssl",
        }
    }
}

/// What happened while one network trained during an SSL epoch.
#[derive(Clone, Debug)]
pub struct HalfEpoch {
    pub net: NetId,
    pub report: DivergenceReport,
    pub selection: SelectionResult,
    pub losses: LossBreakdown,
    pub iterations: usize,
    /// Set when one side of the partition was empty and the half-epoch fell
    /// back to cross-entropy.
    pub degraded: bool,
}

#[derive(Clone, Debug)]
pub struct EpochOutcome {
    /// Zero-based.
    pub epoch: usize,
    pub phase: Phase,
    /// Mean over every step taken this epoch by either network.
    pub losses: LossBreakdown,
    /// Present for SSL epochs, in training order.
    pub halves: Option<[HalfEpoch; 2]>,
}

/// Two networks with their persistent optimizers.
pub struct Trainer {
    twins: TwinNetworks,
    optimizers: [Sgd; 2],
    hp: Hyperparams,
    opts: TrainOptions,
    seed: u64,
}

#[derive(Default)]
struct LossAccumulator {
    sum: LossBreakdown,
    steps: usize,
}

impl LossAccumulator {
    fn push(&mut self, l: LossBreakdown) {
        self.sum.lx += l.lx;
        self.sum.lu += l.lu;
        self.sum.reg += l.reg;
        self.sum.lc += l.lc;
        self.steps += 1;
    }

    fn merge(&mut self, other: &LossAccumulator) {
        self.sum.lx += other.sum.lx;
        self.sum.lu += other.sum.lu;
        self.sum.reg += other.sum.reg;
        self.sum.lc += other.sum.lc;
        self.steps += other.steps;
    }

    fn mean(&self) -> LossBreakdown {
        if self.steps == 0 {
            return LossBreakdown::default();
        }
        let n = self.steps as f64;
        LossBreakdown {
            lx: self.sum.lx / n,
            lu: self.sum.lu / n,
            reg: self.sum.reg / n,
            lc: self.sum.lc / n,
        }
    }
}

impl Trainer {
    pub fn new(
        twins: TwinNetworks,
        hp: Hyperparams,
        opts: TrainOptions,
        seed: u64,
    ) -> Result<Self, SslError> {
        hp.validate()?;
        opts.augmentation.validate()?;
        let shapes = twins.arch().param_shapes();
        let make = || Sgd::new(hp.lr, hp.momentum, hp.weight_decay, &shapes);
        let optimizers = [make()?, make()?];
        Ok(Trainer {
            twins,
            optimizers,
            hp,
            opts,
            seed,
        })
    }

    pub fn twins(&self) -> &TwinNetworks {
        &self.twins
    }

    pub fn into_twins(self) -> TwinNetworks {
        self.twins
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn options(&self) -> &TrainOptions {
        &self.opts
    }

    fn set_learning_rate(&mut self, epoch: usize) -> Result<(), SslError> {
        let lr = self.hp.learning_rate_at(epoch);
        for opt in &mut self.optimizers {
            opt.set_learning_rate(lr)?;
        }
        Ok(())
    }

    /// One cross-entropy epoch on every sample's given label, for each
    /// network independently. The projection head is frozen.
    pub fn warmup_epoch(
        &mut self,
        ds: &LabeledDataset,
        epoch: usize,
    ) -> Result<EpochOutcome, SslError> {
        self.set_learning_rate(epoch)?;
        let all: Vec<usize> = (0..ds.len()).collect();
        let mut acc = LossAccumulator::default();
        for id in NetId::BOTH {
            let seed = derive_seed(self.seed, &[tags::WARMUP, id.index() as u64]);
            for batch in batch_iterator(&all, self.hp.batch_size, seed, epoch as u64)? {
                let lx = self.ce_step(ds, id, &batch)?;
                acc.push(LossBreakdown {
                    lx,
                    ..Default::default()
                });
            }
        }
        Ok(EpochOutcome {
            epoch,
            phase: Phase::Warmup,
            losses: acc.mean(),
            halves: None,
        })
    }

    /// Cross-entropy on raw inputs and given labels; the projection head
    /// receives no update.
    fn ce_step(
        &mut self,
        ds: &LabeledDataset,
        id: NetId,
        batch: &[usize],
    ) -> Result<f64, SslError> {
        let x = ds.features().select_rows(batch);
        let labels: Vec<usize> = batch.iter().map(|&i| ds.given_labels()[i]).collect();
        let targets = one_hot(&labels, ds.num_classes());
        let net = self.twins.get(id);
        let mut tape = GradientTape::new();
        let vars = net.record(&mut tape);
        let xv = tape.constant(x);
        let h = vars.features(&mut tape, xv)?;
        let z = vars.logits(&mut tape, h)?;
        let loss = cross_entropy(&mut tape, z, &targets)?;
        let value = tape.scalar(loss);
        let grads = tape.backward(loss)?;
        let g: Vec<Option<&Matrix>> = vars
            .vars
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if PROJECTION_PARAMS.contains(&i) {
                    None
                } else {
                    grads.get(v)
                }
            })
            .collect();
        let mut params = self.twins.get_mut(id).params_mut();
        self.optimizers[id.index()].step(&mut params, &g)?;
        Ok(value)
    }

    /// One SSL epoch: network 1 then network 2, each preceded by a fresh
    /// selection made with the current parameters.
    pub fn train_epoch(
        &mut self,
        ds: &LabeledDataset,
        epoch: usize,
    ) -> Result<EpochOutcome, SslError> {
        self.set_learning_rate(epoch)?;
        let mut acc = LossAccumulator::default();
        let first = self.train_half(ds, epoch, NetId::First, &mut acc)?;
        let second = self.train_half(ds, epoch, NetId::Second, &mut acc)?;
        Ok(EpochOutcome {
            epoch,
            phase: Phase::Ssl,
            losses: acc.mean(),
            halves: Some([first, second]),
        })
    }

    /// Selection the trainer would make for network `id` right now.
    pub fn select_for(
        &self,
        ds: &LabeledDataset,
        id: NetId,
    ) -> Result<(DivergenceReport, SelectionResult), SslError> {
        let source = if self.opts.ensemble {
            PredictionSource::Ensemble
        } else {
            PredictionSource::Single(id)
        };
        let report = compute_divergences(&self.twins, ds, source)?;
        let selection = select(
            &report,
            ds.given_labels(),
            ds.num_classes(),
            &self.opts.cutoff,
            self.opts.balancing,
        )?;
        Ok((report, selection))
    }

    fn train_half(
        &mut self,
        ds: &LabeledDataset,
        epoch: usize,
        id: NetId,
        total: &mut LossAccumulator,
    ) -> Result<HalfEpoch, SslError> {
        let (report, selection) = self.select_for(ds, id)?;
        let weights = refinement_weights(&report.d, self.hp.d_omega);
        let clean = &selection.clean_indices;
        let noisy = &selection.noisy_indices;
        let mut acc = LossAccumulator::default();
        let degraded = clean.is_empty() || noisy.is_empty();
        if degraded {
            let (name, set) = if clean.is_empty() {
                ("clean", noisy)
            } else {
                ("noisy", clean)
            };
            log::warn!(
                "epoch {} net {}: {name} set is empty, falling back to cross-entropy",
                epoch + 1,
                id.index() + 1
            );
            let seed = derive_seed(self.seed, &[tags::BATCH, id.index() as u64]);
            for batch in batch_iterator(set, self.hp.batch_size, seed, epoch as u64)? {
                let lx = self.ce_step(ds, id, &batch)?;
                acc.push(LossBreakdown {
                    lx,
                    ..Default::default()
                });
            }
        } else {
            let seed = derive_seed(self.seed, &[tags::BATCH, id.index() as u64]);
            let pairs = paired_batches(clean, noisy, self.hp.batch_size, seed, epoch as u64)?;
            for (it, (cb, nb)) in pairs.iter().enumerate() {
                let stream = [epoch as u64, id.index() as u64, it as u64];
                let l = self.ssl_step(ds, id, cb, nb, &weights, &stream)?;
                acc.push(l);
            }
        }
        total.merge(&acc);
        Ok(HalfEpoch {
            net: id,
            losses: acc.mean(),
            iterations: acc.steps,
            degraded,
            report,
            selection,
        })
    }

    fn views(&self, x: &Matrix, strength: Strength, stream: &[u64], side: u64) -> [Matrix; 2] {
        let aug = &self.opts.augmentation;
        let mut path = stream.to_vec();
        path.push(side);
        path.push(0);
        let a = augment_rows(x, aug, strength, self.seed, &path);
        *path.last_mut().expect("non-empty") = 1;
        let b = augment_rows(x, aug, strength, self.seed, &path);
        [a, b]
    }

    fn ssl_step(
        &mut self,
        ds: &LabeledDataset,
        id: NetId,
        clean_batch: &[usize],
        noisy_batch: &[usize],
        weights: &[f64],
        stream: &[u64],
    ) -> Result<LossBreakdown, SslError> {
        let hp = &self.hp;
        let x = ds.features().select_rows(clean_batch);
        let u = ds.features().select_rows(noisy_batch);
        let labels: Vec<usize> = clean_batch.iter().map(|&i| ds.given_labels()[i]).collect();
        let w: Vec<f64> = clean_batch.iter().map(|&i| weights[i]).collect();

        let [xw1, xw2] = self.views(&x, Strength::Weak, stream, 0);
        let [uw1, uw2] = self.views(&u, Strength::Weak, stream, 1);
        let [xs1, xs2] = self.views(&x, Strength::Strong, stream, 0);
        let [us1, us2] = self.views(&u, Strength::Strong, stream, 1);

        let refined = refine_labels(
            self.twins.get(id),
            [&xw1, &xw2],
            &labels,
            &w,
            hp.temperature,
        )?;
        let pseudo = guess_pseudo_labels(&self.twins, [&uw1, &uw2], hp.temperature)?;

        let clean_side = LabeledBatch {
            inputs: interleave(&xs1, &xs2)?,
            targets: interleave(&refined, &refined)?,
        };
        let noisy_side = LabeledBatch {
            inputs: interleave(&us1, &us2)?,
            targets: interleave(&pseudo, &pseudo)?,
        };
        let mut mix_rng = substream(self.seed, &[&[tags::MIXUP][..], stream].concat());
        let (mixed_x, mixed_u) =
            mixmatch_assemble(&clean_side, &noisy_side, hp.alpha, &mut mix_rng)?;

        let net = self.twins.get(id);
        let mut tape = GradientTape::new();
        let vars = net.record(&mut tape);
        let nx = mixed_x.len();
        let n = nx + mixed_u.len();
        let inputs = tape.constant(Matrix::vstack(&[&mixed_x.inputs, &mixed_u.inputs])?);
        let h = vars.features(&mut tape, inputs)?;
        let z = vars.logits(&mut tape, h)?;
        let zx = tape.slice_rows(z, 0, nx)?;
        let zu = tape.slice_rows(z, nx, n)?;
        let lx = cross_entropy(&mut tape, zx, &mixed_x.targets)?;
        let pu = tape.softmax_rows(zu)?;
        let lu = squared_error(&mut tape, pu, &mixed_u.targets)?;
        let p_all = tape.softmax_rows(z)?;
        let reg = uniform_prior_penalty(&mut tape, p_all)?;

        let pairs = tape.constant(noisy_side.inputs);
        let hc = vars.features(&mut tape, pairs)?;
        let emb = vars.projection(&mut tape, hc)?;
        let lc = nt_xent(&mut tape, emb, hp.kappa)?;

        let parts = LossVars { lx, lu, reg, lc };
        let loss = total_loss(&mut tape, &parts, hp)?;
        let values = parts.values(&tape);
        let grads = tape.backward(loss)?;
        let g: Vec<Option<&Matrix>> = vars.vars.iter().map(|&v| grads.get(v)).collect();
        let mut params = self.twins.get_mut(id).params_mut();
        self.optimizers[id.index()].step(&mut params, &g)?;
        Ok(values)
    }
}

/// Trains both networks with cross-entropy for `epochs` epochs.
pub fn warmup_train(
    twins: TwinNetworks,
    ds: &LabeledDataset,
    hp: &Hyperparams,
    epochs: usize,
    seed: u64,
) -> Result<TwinNetworks, SslError> {
    let mut trainer = Trainer::new(twins, hp.clone(), TrainOptions::default(), seed)?;
    for epoch in 0..epochs {
        trainer.warmup_epoch(ds, epoch)?;
    }
    Ok(trainer.into_twins())
}

/// Warmup for `hp.warmup_epochs`, then SSL up to `hp.total_epochs`.
/// `on_epoch` sees the networks after every epoch.
pub fn run<E, F>(trainer: &mut Trainer, ds: &LabeledDataset, mut on_epoch: F) -> Result<(), E>
where
    E: From<SslError>,
    F: FnMut(&TwinNetworks, &EpochOutcome) -> Result<(), E>,
{
    let (warmup, total) = (trainer.hp.warmup_epochs, trainer.hp.total_epochs);
    for epoch in 0..total {
        let outcome = if epoch < warmup {
            trainer.warmup_epoch(ds, epoch)?
        } else {
            trainer.train_epoch(ds, epoch)?
        };
        on_epoch(&trainer.twins, &outcome)?;
    }
    Ok(())
}
