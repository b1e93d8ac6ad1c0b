//! NMSE objective, AdamW, cosine learning-rate annealing, and the training
//! loop with best-checkpoint selection on untrained wavelengths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::time::Instant;

use crate::dataset::{split_by_wavelength, Dataset};
use crate::model::{checkpoint, Model, Parameters, PriorSet, Real, TrainItem};
use crate::{ComplexField, CoreError, DesignBox, Result};

/// Wavelength matching tolerance used when deriving the untrained validation
/// subset; safely below half of any schedule step of 1 nm or more.
pub const SPLIT_TOL: f64 = 0.25e-9;

/// Normalized mean squared error `||pred - target||^2 / ||target||^2` over
/// the complex field treated as stacked real/imag values. An optional mask
/// restricts both norms to the design region.
pub fn nmse(pred: &ComplexField, target: &ComplexField, mask: Option<&DesignBox>) -> Result<f64> {
    if pred.grid != target.grid {
        return Err(CoreError::ShapeMismatch(
            "prediction and target grids differ".into(),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    match mask {
        None => {
            for (p, t) in pred.values.iter().zip(target.values.iter()) {
                num += (p - t).norm_sqr();
                den += t.norm_sqr();
            }
        }
        Some(b) => {
            if !b.fits(&pred.grid) {
                return Err(CoreError::ShapeMismatch("mask exceeds grid".into()));
            }
            for i in b.x0..b.x1 {
                for k in b.z0..b.z1 {
                    let p = pred.values[[i, k]];
                    let t = target.values[[i, k]];
                    num += (p - t).norm_sqr();
                    den += t.norm_sqr();
                }
            }
        }
    }
    if den == 0.0 {
        return Err(CoreError::InvalidArg(
            "target norm is zero; NMSE undefined".into(),
        ));
    }
    Ok(num / den)
}

/// Cosine annealing: `lr_min + (lr - lr_min) (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(t: usize, total: usize, lr: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    let phase = std::f64::consts::PI * (t as f64) / (total as f64);
    lr_min + 0.5 * (lr - lr_min) * (1.0 + phase.cos())
}

/// Optimizer configuration and training-loop settings.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps_opt: f64,
    pub weight_decay: f64,
    pub lr_min: f64,
    pub seed: u64,
    /// Validate every this many epochs.
    pub val_every: usize,
    /// Select on the untrained-wavelength subset only (else the full
    /// validation set).
    pub val_untrained_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 0.002,
            betas: (0.9, 0.999),
            eps_opt: 1e-8,
            weight_decay: 0.0001,
            lr_min: 0.00001,
            seed: 0,
            val_every: 1,
            val_untrained_only: true,
        }
    }
}

/// First/second moment accumulators for decoupled-weight-decay Adam.
pub struct AdamWState<F: Real> {
    m: Vec<F>,
    v: Vec<F>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<F: Real> AdamWState<F> {
    pub fn new(param_count: usize, tc: &TrainConfig) -> Self {
        Self {
            m: vec![F::zero(); param_count],
            v: vec![F::zero(); param_count],
            step: 0,
            beta1: tc.betas.0,
            beta2: tc.betas.1,
            eps: tc.eps_opt,
            weight_decay: tc.weight_decay,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW step at learning rate `lr_t`: decoupled decay
/// `theta -= lr_t wd theta`, then the bias-corrected moment update.
/// A non-finite gradient aborts with its index in the diagnostics.
pub fn adamw_step<F: Real>(
    state: &mut AdamWState<F>,
    params: &mut [F],
    grads: &[F],
    lr_t: f64,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "optimizer holds {} moments, got {} params / {} grads",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
        return Err(CoreError::NonFinite(format!(
            "gradient component {idx} is {:?} at optimizer step {}",
            grads[idx],
            state.step + 1
        )));
    }
    state.step += 1;
    let b1 = F::of(state.beta1);
    let b2 = F::of(state.beta2);
    let one = F::one();
    let bc1 = F::of(1.0 - state.beta1.powi(state.step as i32));
    let bc2 = F::of(1.0 - state.beta2.powi(state.step as i32));
    let lr = F::of(lr_t);
    let eps = F::of(state.eps);
    let decay = F::of(lr_t * state.weight_decay);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] - decay * params[i];
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Per-epoch training record.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_nmse: f64,
    pub val_nmse_untrained: Option<f64>,
    pub wall_seconds: f64,
}

/// History CSV: `epoch,lr,train_nmse,val_nmse_untrained,wall_seconds`.
pub fn write_history_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut s = String::from("epoch,lr,train_nmse,val_nmse_untrained,wall_seconds\n");
    for r in records {
        let val = r
            .val_nmse_untrained
            .map(|v| v.to_string())
            .unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            r.epoch, r.lr, r.train_nmse, val, r.wall_seconds
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Result of a training run; `best_params` minimizes validation NMSE.
pub struct TrainOutcome<F: Real> {
    pub history: Vec<EpochRecord>,
    pub best_params: Parameters<F>,
    pub best_val_nmse: f64,
    pub best_epoch: usize,
}

/// Trains the model in place. Validation runs on the untrained-wavelength
/// subset of `val_ds` (which must be non-empty); the best checkpoint and the
/// final state are written to `out_dir` when given.
pub fn train<F: Real>(
    model: &mut Model<F>,
    train_ds: &Dataset,
    val_ds: &Dataset,
    tc: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>> {
    if tc.epochs == 0 || tc.batch_size == 0 || tc.val_every == 0 {
        return Err(CoreError::InvalidArg(
            "epochs, batch_size and val_every must be >= 1".into(),
        ));
    }
    if train_ds.is_empty() {
        return Err(CoreError::InvalidArg("training dataset is empty".into()));
    }
    let trained_wavelengths = train_ds.distinct_wavelengths();
    let val_subset: Dataset = if tc.val_untrained_only {
        let (_, untrained) = split_by_wavelength(val_ds, &trained_wavelengths, SPLIT_TOL)?;
        untrained
    } else {
        val_ds.clone()
    };
    if val_subset.is_empty() {
        return Err(CoreError::InvalidArg(
            "validation dataset has no untrained wavelengths".into(),
        ));
    }

    let train_items: Vec<TrainItem<F>> = train_ds
        .samples
        .iter()
        .map(|s| model.prepare_item(s))
        .collect::<Result<_>>()?;
    let val_items: Vec<TrainItem<F>> = val_subset
        .samples
        .iter()
        .map(|s| model.prepare_item(s))
        .collect::<Result<_>>()?;
    let mut wavelengths: Vec<f64> = train_items.iter().map(|i| i.lambda).collect();
    wavelengths.extend(val_items.iter().map(|i| i.lambda));
    let priors = PriorSet::build(model, &wavelengths)?;
    let val_refs: Vec<&TrainItem<F>> = val_items.iter().collect();

    let mut flat = model.params.flatten();
    let mut adam = AdamWState::<F>::new(flat.len(), tc);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..train_items.len()).collect();

    let mut history = Vec::with_capacity(tc.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = model.params.clone();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    for epoch in 0..tc.epochs {
        let t0 = Instant::now();
        let lr_t = cosine_lr(epoch, tc.epochs, tc.lr, tc.lr_min);
        // Epoch-wise permutation from the dedicated shuffling stream.
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_weighted = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let refs: Vec<&TrainItem<F>> = batch.iter().map(|&i| &train_items[i]).collect();
            let (loss, grad) = model.loss_and_grad(&refs, &priors)?;
            loss_weighted += loss.as_f64() * refs.len() as f64;
            let gflat = grad.flatten();
            adamw_step(&mut adam, &mut flat, &gflat, lr_t)?;
            model.params.assign_from_flat(&flat)?;
        }
        let train_nmse = loss_weighted / train_items.len() as f64;

        let val_due = (epoch + 1) % tc.val_every == 0 || epoch + 1 == tc.epochs;
        let mut val_nmse = None;
        if val_due {
            let v = model.batch_nmse(&val_refs, &priors)?.as_f64();
            val_nmse = Some(v);
            if v < best_val {
                best_val = v;
                best_epoch = epoch;
                best_params = model.params.clone();
                if let Some(dir) = out_dir {
                    checkpoint::save_checkpoint(model, &dir.join("best.wfc"))?;
                }
            }
        }
        history.push(EpochRecord {
            epoch,
            lr: lr_t,
            train_nmse,
            val_nmse_untrained: val_nmse,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
    }

    if let Some(dir) = out_dir {
        checkpoint::save_checkpoint(model, &dir.join("last.wfc"))?;
        write_history_csv(&history, &dir.join("history.csv"))?;
    }

    Ok(TrainOutcome {
        history,
        best_params,
        best_val_nmse: best_val,
        best_epoch,
    })
}

/// Salt separating the batch-shuffle stream from parameter-init streams.
const SHUFFLE_SALT: u64 = 0x5e11_ab1e_0000_0001;
