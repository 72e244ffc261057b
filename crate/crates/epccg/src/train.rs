//! Optimizer state, training steps, and finite-difference gradient checking.

use rand::{seq::index::sample, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{accumulate_gradients, AttentionMask, ModelConfig, ModelParameters};
use crate::num::Scalar;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// What a checkpointed model was trained for; `generate` refuses to run a
/// model under a different pattern or prompt than it was fine-tuned with.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    #[serde(default)]
    pub pattern: Option<String>,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub aspect_names: Vec<String>,
}

/// One training item: a packed id sequence, its attention mask, the
/// prediction targets, and the positions the loss is taken over.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub ids: Vec<u32>,
    pub mask: AttentionMask,
    pub targets: Vec<u32>,
    pub positions: Vec<usize>,
}

#[derive(Clone)]
pub struct TrainState<F> {
    pub config: ModelConfig,
    pub params: ModelParameters<F>,
    pub adam_m: ModelParameters<F>,
    pub adam_v: ModelParameters<F>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub meta: ModelMeta,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(config: ModelConfig) -> Result<TrainState<F>> {
        config.validate()?;
        Ok(TrainState {
            params: ModelParameters::init(&config),
            adam_m: ModelParameters::zeros(&config),
            adam_v: ModelParameters::zeros(&config),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            meta: ModelMeta::default(),
            config,
        })
    }
}

/// Mean gradients over the batch without touching the parameters.
/// Dropout draws from `dropout_rng` when the config enables it.
pub fn batch_gradients<F: Scalar>(
    params: &ModelParameters<F>,
    config: &ModelConfig,
    batch: &[TrainExample],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(F, ModelParameters<F>)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty training batch".into()));
    }
    let mut grads = ModelParameters::zeros(config);
    let mut total = F::zero();
    for ex in batch {
        let dropout = match &mut dropout_rng {
            Some(rng) if config.dropout_prob > 0.0 => Some(&mut **rng),
            _ => None,
        };
        total += accumulate_gradients(
            &ex.ids,
            &ex.mask,
            &ex.targets,
            &ex.positions,
            params,
            config,
            &mut grads,
            dropout,
        )?;
    }
    let inv = F::one() / F::from_f64(batch.len() as f64);
    for (_, g) in grads.tensors_mut() {
        g.scale(inv);
    }
    Ok((total * inv, grads))
}

/// One Adam update over the mean batch gradients. Returns the batch loss.
/// Fails with a training-diverged error if the loss or any parameter stops
/// being finite.
pub fn train_step<F: Scalar>(
    state: &mut TrainState<F>,
    batch: &[TrainExample],
    lr: f64,
) -> Result<F> {
    let dropout_active = state.config.dropout_prob > 0.0;
    let (loss, grads) = {
        let rng = if dropout_active { Some(&mut state.rng) } else { None };
        batch_gradients(&state.params, &state.config, batch, rng)?
    };
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged(format!("loss became {loss} at step {}", state.step)));
    }

    state.step += 1;
    let t = state.step as i32;
    let lr = F::from_f64(lr);
    let b1 = F::from_f64(ADAM_BETA1);
    let b2 = F::from_f64(ADAM_BETA2);
    let eps = F::from_f64(ADAM_EPS);
    let bc1 = F::one() - F::from_f64(ADAM_BETA1.powi(t));
    let bc2 = F::one() - F::from_f64(ADAM_BETA2.powi(t));

    let mut p_t = state.params.tensors_mut();
    let mut m_t = state.adam_m.tensors_mut();
    let mut v_t = state.adam_v.tensors_mut();
    let g_t = grads.tensors();
    for idx in 0..g_t.len() {
        let p = &mut p_t[idx].1;
        let m = &mut m_t[idx].1;
        let v = &mut v_t[idx].1;
        let g = &g_t[idx].1;
        for i in 0..g.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (F::one() - b1) * gi;
            v.data[i] = b2 * v.data[i] + (F::one() - b2) * gi * gi;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    drop(p_t);

    if !state.params.is_finite() {
        return Err(Error::TrainingDiverged(format!(
            "non-finite parameter after step {}",
            state.step
        )));
    }
    Ok(loss)
}

/// Central finite-difference verification of the analytic gradients.
///
/// Samples at least `min_coords` coordinates spread over every named tensor
/// and returns the maximum relative error
///   |analytic - numeric| / max(|analytic| + |numeric|, 1e-3).
pub fn grad_check<F: Scalar>(
    params: &mut ModelParameters<F>,
    config: &ModelConfig,
    batch: &[TrainExample],
    epsilon: f64,
    min_coords: usize,
    seed: u64,
) -> Result<f64> {
    if config.dropout_prob > 0.0 {
        return Err(Error::Argument("grad_check requires dropout disabled".into()));
    }
    let (_, analytic) = batch_gradients(params, config, batch, None)?;

    let num_tensors = analytic.tensors().len();
    let per_tensor = min_coords.div_ceil(num_tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // (tensor index, coordinate) sample covering every tensor role.
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (t_idx, (_, tensor)) in analytic.tensors().iter().enumerate() {
        let take = per_tensor.min(tensor.data.len());
        for c in sample(&mut rng, tensor.data.len(), take) {
            coords.push((t_idx, c));
        }
    }

    let eps = F::from_f64(epsilon);
    let mut max_rel = 0.0f64;
    for (t_idx, c) in coords {
        let original = params.tensors()[t_idx].1.data[c];

        params.tensors_mut()[t_idx].1.data[c] = original + eps;
        let (loss_plus, _) = batch_gradients(params, config, batch, None)?;
        params.tensors_mut()[t_idx].1.data[c] = original - eps;
        let (loss_minus, _) = batch_gradients(params, config, batch, None)?;
        params.tensors_mut()[t_idx].1.data[c] = original;

        let numeric = (loss_plus - loss_minus).to_f64() / (2.0 * epsilon);
        let a = analytic.tensors()[t_idx].1.data[c].to_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-3);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
