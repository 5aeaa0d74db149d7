//! Virtual adversarial training for the joint model.
//!
//! The clean pass runs under a frozen copy `θ̂` and fixes both the target
//! distributions and the slot tags the decoder is conditioned on. One power
//! iteration from a random direction of norm `ξ` gives the gradient of the
//! requested divergence; the finalised perturbation has per-example L2 norm
//! `ε` and is a plain matrix, so no gradient can flow through it into `θ`.

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{Heads, JointNormMode, VatConfig};
use crate::model::{Batch, ForwardOutput, ModelParams, NluModel, SlotConditioning};
use crate::tape::{Mat, Tape, Var};
use crate::{Error, Result};

pub use crate::config::PerturbationSign;

/// Floor applied to `q` before taking its log.
pub const Q_FLOOR: f64 = 1e-12;

/// `KL(p ‖ q) = Σ p log(p/q)`, with `0 · log 0 = 0` and `q ≥ 1e-12`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(p.len(), q.len()));
    }
    Ok(p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(Q_FLOOR).ln()))
        .sum::<f64>()
        .max(0.0))
}

/// Targets of the clean pass under `θ̂`: log-posteriors and greedy slot tags.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanPass {
    /// `B × |intents|`.
    pub intent_logp: Mat,
    /// `(B·T) × |slots|`.
    pub slot_logp: Mat,
    pub tags: Vec<Vec<usize>>,
}

pub fn clean_pass(model: &NluModel, theta_hat: &ModelParams, batch: &Batch) -> Result<CleanPass> {
    let mut tape = Tape::new(&theta_hat.tensors, false);
    let out = model.forward(&mut tape, batch, None, SlotConditioning::Greedy, None)?;
    Ok(CleanPass {
        intent_logp: tape.value(out.intent_logp).clone(),
        slot_logp: tape.value(out.slot_logp).clone(),
        tags: out.predicted_slots,
    })
}

/// `(1/B) Σ_k KL(p̂_int ‖ p_int)`.
pub fn intent_divergence(tape: &mut Tape, out: &ForwardOutput, clean: &CleanPass, batch: &Batch) -> Var {
    let w = 1.0 / batch.len() as f64;
    tape.kl_rows(out.intent_logp, clean.intent_logp.clone(), vec![w; batch.len()])
}

/// `(1/N) Σ_k Σ_t KL(p̂_slot ‖ p_slot)` over real tokens, `N` the batch token count.
pub fn slot_divergence(tape: &mut Tape, out: &ForwardOutput, clean: &CleanPass, batch: &Batch) -> Var {
    let w = 1.0 / batch.num_tokens() as f64;
    let weights = (0..batch.len())
        .flat_map(|b| (0..batch.steps).map(move |t| if t < batch.lengths[b] { w } else { 0.0 }))
        .collect();
    tape.kl_rows(out.slot_logp, clean.slot_logp.clone(), weights)
}

pub fn divergence(tape: &mut Tape, out: &ForwardOutput, clean: &CleanPass, batch: &Batch, heads: Heads) -> Var {
    match heads {
        Heads::Int => intent_divergence(tape, out, clean, batch),
        Heads::Slot => slot_divergence(tape, out, clean, batch),
        Heads::Joint => {
            let d_int = intent_divergence(tape, out, clean, batch);
            let d_slot = slot_divergence(tape, out, clean, batch);
            let sum = tape.add(d_int, d_slot);
            tape.scale(sum, 0.5)
        }
    }
}

/// Perturbed forward pass under the tape's parameters, conditioned on the clean tags.
fn perturbed_pass(model: &NluModel, tape: &mut Tape, batch: &Batch, clean: &CleanPass, r: Var) -> Result<ForwardOutput> {
    model.forward(tape, batch, Some(r), SlotConditioning::Fixed(&clean.tags), None)
}

fn evaluate_divergence(
    model: &NluModel,
    theta_hat: &ModelParams,
    theta: &ModelParams,
    batch: &Batch,
    r: Option<&Mat>,
    heads: Heads,
) -> Result<f64> {
    let clean = clean_pass(model, theta_hat, batch)?;
    let mut tape = Tape::new(&theta.tensors, false);
    let r = tape.constant(r.cloned().unwrap_or_else(|| zero_like(model, batch)));
    let out = perturbed_pass(model, &mut tape, batch, &clean, r)?;
    let d = divergence(&mut tape, &out, &clean, batch, heads);
    Ok(tape.scalar(d))
}

/// Mean intent KL between the clean posterior under `θ̂` and the perturbed one under `θ`.
pub fn d_int(model: &NluModel, theta_hat: &ModelParams, theta: &ModelParams, batch: &Batch, r: Option<&Mat>) -> Result<f64> {
    evaluate_divergence(model, theta_hat, theta, batch, r, Heads::Int)
}

/// Token-averaged slot KL, both passes conditioned on the clean greedy tags.
pub fn d_slot(model: &NluModel, theta_hat: &ModelParams, theta: &ModelParams, batch: &Batch, r: Option<&Mat>) -> Result<f64> {
    evaluate_divergence(model, theta_hat, theta, batch, r, Heads::Slot)
}

fn zero_like(model: &NluModel, batch: &Batch) -> Mat {
    Mat::zeros((batch.len() * batch.steps, model.dims().embedding_size))
}

/// An additive perturbation of the embedded batch, rows laid out `b*T + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub r: Mat,
    pub steps: usize,
    pub epsilon: f64,
    pub kind: Heads,
}

impl Perturbation {
    pub fn batch_len(&self) -> usize {
        self.r.nrows() / self.steps
    }

    /// L2 norm of each example's slice.
    pub fn example_norms(&self) -> Vec<f64> {
        example_norms(&self.r, self.steps)
    }

    pub fn to_array3(&self) -> Array3<f64> {
        let e = self.r.ncols();
        self.r
            .clone()
            .into_shape_with_order((self.batch_len(), self.steps, e))
            .expect("perturbation layout")
    }

    pub fn is_zero(&self) -> bool {
        self.r.iter().all(|&x| x == 0.0)
    }
}

fn example_norms(r: &Mat, steps: usize) -> Vec<f64> {
    r.rows()
        .into_iter()
        .collect::<Vec<_>>()
        .chunks(steps)
        .map(|rows| rows.iter().map(|row| row.dot(row)).sum::<f64>().sqrt())
        .collect()
}

/// Zero padded rows, then scale each example's slice to norm `scale`.
/// Slices with zero norm stay zero.
pub fn normalize_per_example(g: &Mat, batch: &Batch, scale: f64) -> Mat {
    let mut out = g.clone();
    for b in 0..batch.len() {
        for t in batch.lengths[b]..batch.steps {
            out.row_mut(b * batch.steps + t).fill(0.0);
        }
    }
    let norms = example_norms(&out, batch.steps);
    for (b, &n) in norms.iter().enumerate() {
        let k = if n > 0.0 && n.is_finite() { scale / n } else { 0.0 };
        for t in 0..batch.steps {
            out.row_mut(b * batch.steps + t).mapv_inplace(|x| x * k);
        }
    }
    out
}

/// `½(r_int + r_slot)`, renormalised to `ε` per example when nonzero.
pub fn average_perturbations(r_int: &Perturbation, r_slot: &Perturbation, batch: &Batch) -> Perturbation {
    let mean = (&r_int.r + &r_slot.r) * 0.5;
    Perturbation {
        r: normalize_per_example(&mean, batch, r_int.epsilon),
        steps: batch.steps,
        epsilon: r_int.epsilon,
        kind: Heads::Joint,
    }
}

/// `½(g_int + g_slot)`: the gradient of `½(D_int + D_slot)` from its parts.
pub fn combine_raw_gradients(g_int: &Mat, g_slot: &Mat) -> Mat {
    (g_int + g_slot) * 0.5
}

/// Finalise a raw divergence gradient into a perturbation of norm `ε`.
pub fn finalize(g: &Mat, batch: &Batch, config: &VatConfig, kind: Heads) -> Perturbation {
    Perturbation {
        r: normalize_per_example(g, batch, config.epsilon * config.sign.factor()),
        steps: batch.steps,
        epsilon: config.epsilon,
        kind,
    }
}

/// Random unit direction per example (zero at padding), scaled by `ξ`.
pub fn initial_direction(batch: &Batch, dim: usize, xi: f64, rng: &mut impl Rng) -> Mat {
    let d = Mat::from_shape_fn((batch.len() * batch.steps, dim), |_| rng.sample::<f64, _>(StandardNormal));
    normalize_per_example(&d, batch, xi)
}

/// Raw gradients of `D_int`, `D_slot` and their average at `r₀ = ξ d`.
#[derive(Debug, Clone)]
pub struct PowerStep {
    pub r0: Mat,
    pub grad_int: Mat,
    pub grad_slot: Mat,
}

impl PowerStep {
    pub fn grad(&self, heads: Heads) -> Mat {
        match heads {
            Heads::Int => self.grad_int.clone(),
            Heads::Slot => self.grad_slot.clone(),
            Heads::Joint => combine_raw_gradients(&self.grad_int, &self.grad_slot),
        }
    }
}

/// One power-iteration step from the given `r₀`.
///
/// With `track_params` the inner pass also records parameter gradients; they
/// are discarded, which makes the detachment of the result checkable.
pub fn power_step(
    model: &NluModel,
    theta_hat: &ModelParams,
    batch: &Batch,
    clean: &CleanPass,
    r0: Mat,
    track_params: bool,
) -> Result<PowerStep> {
    let mut tape = Tape::new(&theta_hat.tensors, track_params);
    let r = tape.input(r0.clone());
    let out = perturbed_pass(model, &mut tape, batch, clean, r)?;
    let d_int = intent_divergence(&mut tape, &out, clean, batch);
    let d_slot = slot_divergence(&mut tape, &out, clean, batch);
    let zero = || Mat::zeros(r0.dim());
    let grad_int = tape.backward(d_int).wrt(r).cloned().unwrap_or_else(zero);
    let grad_slot = tape.backward(d_slot).wrt(r).cloned().unwrap_or_else(zero);
    if grad_int.iter().chain(grad_slot.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite divergence gradient".into()));
    }
    Ok(PowerStep { r0, grad_int, grad_slot })
}

/// Approximate worst-case perturbation for the requested heads.
pub fn compute_r_vadv(
    model: &NluModel,
    theta_hat: &ModelParams,
    batch: &Batch,
    clean: &CleanPass,
    config: &VatConfig,
    heads: Heads,
    rng: &mut impl Rng,
) -> Result<Perturbation> {
    compute_r_vadv_inner(model, theta_hat, batch, clean, config, heads, rng, false)
}

/// [`compute_r_vadv`] with parameter-gradient tracking enabled in the inner pass.
pub fn compute_r_vadv_tracking_params(
    model: &NluModel,
    theta_hat: &ModelParams,
    batch: &Batch,
    clean: &CleanPass,
    config: &VatConfig,
    heads: Heads,
    rng: &mut impl Rng,
) -> Result<Perturbation> {
    compute_r_vadv_inner(model, theta_hat, batch, clean, config, heads, rng, true)
}

#[allow(clippy::too_many_arguments)]
fn compute_r_vadv_inner(
    model: &NluModel,
    theta_hat: &ModelParams,
    batch: &Batch,
    clean: &CleanPass,
    config: &VatConfig,
    heads: Heads,
    rng: &mut impl Rng,
    track_params: bool,
) -> Result<Perturbation> {
    config.validate()?;
    let r0 = initial_direction(batch, model.dims().embedding_size, config.xi, rng);
    let step = power_step(model, theta_hat, batch, clean, r0, track_params)?;
    Ok(match (heads, config.joint_norm_mode) {
        (Heads::Joint, JointNormMode::NormalizeThenAverage) => {
            let r_int = finalize(&step.grad_int, batch, config, Heads::Int);
            let r_slot = finalize(&step.grad_slot, batch, config, Heads::Slot);
            average_perturbations(&r_int, &r_slot, batch)
        }
        _ => finalize(&step.grad(heads), batch, config, heads),
    })
}

/// Build the VAT divergence at `x + r` on a tape over `θ`.
pub fn vat_term(
    model: &NluModel,
    tape: &mut Tape,
    batch: &Batch,
    clean: &CleanPass,
    perturbation: &Perturbation,
    heads: Heads,
) -> Result<Var> {
    let r = tape.constant(perturbation.r.clone());
    let out = perturbed_pass(model, tape, batch, clean, r)?;
    Ok(divergence(tape, &out, clean, batch, heads))
}

#[derive(Debug, Clone)]
pub struct VatLoss {
    pub value: f64,
    pub param_grads: Vec<Option<Mat>>,
    pub perturbation: Perturbation,
}

/// `L_vat` evaluated at a given perturbation, with its gradient w.r.t. `θ`.
pub fn vat_loss_at(
    model: &NluModel,
    clean: &CleanPass,
    theta: &ModelParams,
    batch: &Batch,
    perturbation: &Perturbation,
    heads: Heads,
) -> Result<(f64, Vec<Option<Mat>>)> {
    let mut tape = Tape::new(&theta.tensors, true);
    let loss = vat_term(model, &mut tape, batch, clean, perturbation, heads)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite VAT loss on batch of {} (ids {:?}, {} tokens)",
            batch.len(),
            batch.ids,
            batch.num_tokens()
        )));
    }
    Ok((value, tape.backward(loss).into_params()))
}

/// Full VAT loss: clean pass, perturbation, divergence at `x + r`.
pub fn vat_loss(
    model: &NluModel,
    theta_hat: &ModelParams,
    theta: &ModelParams,
    batch: &Batch,
    config: &VatConfig,
    heads: Heads,
    rng: &mut impl Rng,
) -> Result<VatLoss> {
    let clean = clean_pass(model, theta_hat, batch)?;
    let perturbation = compute_r_vadv(model, theta_hat, batch, &clean, config, heads, rng)?;
    let (value, param_grads) = vat_loss_at(model, &clean, theta, batch, &perturbation, heads)?;
    Ok(VatLoss {
        value,
        param_grads,
        perturbation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Encoded;
    use crate::model::tests::tiny_dims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch() -> Batch {
        let e = |id: usize, w: &[usize]| Encoded {
            id,
            words: w.to_vec(),
            intent: None,
            slots: None,
        };
        Batch::new(&[e(0, &[2, 3]), e(1, &[4, 5, 3]), e(2, &[1])]).unwrap()
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn divergences_vanish_without_perturbation() {
        let model = NluModel::new(tiny_dims());
        let theta = model.init_params(None, 0).unwrap();
        let b = batch();
        assert_eq!(d_int(&model, &theta, &theta, &b, None).unwrap(), 0.0);
        assert_eq!(d_slot(&model, &theta, &theta, &b, None).unwrap(), 0.0);
    }

    #[test]
    fn finalized_norms_equal_epsilon_and_padding_is_zero() {
        let model = NluModel::new(tiny_dims());
        let theta = model.init_params(None, 1).unwrap();
        let b = batch();
        let clean = clean_pass(&model, &theta, &b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for heads in [Heads::Int, Heads::Slot, Heads::Joint] {
            let cfg = VatConfig {
                epsilon: 0.7,
                ..VatConfig::default()
            };
            let r = compute_r_vadv(&model, &theta, &b, &clean, &cfg, heads, &mut rng).unwrap();
            for n in r.example_norms() {
                assert!((n - 0.7).abs() < 1e-6, "{heads:?}: {n}");
            }
            for bi in 0..b.len() {
                for t in b.lengths[bi]..b.steps {
                    assert!(r.r.row(bi * b.steps + t).iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn zero_gradient_gives_zero_perturbation() {
        let b = batch();
        let g = Mat::zeros((b.len() * b.steps, 3));
        let r = finalize(&g, &b, &VatConfig::default(), Heads::Int);
        assert!(r.is_zero());
    }

    #[test]
    fn descent_sign_flips_direction() {
        let model = NluModel::new(tiny_dims());
        let theta = model.init_params(None, 1).unwrap();
        let b = batch();
        let clean = clean_pass(&model, &theta, &b).unwrap();
        let up = VatConfig::default();
        let down = VatConfig {
            sign: PerturbationSign::Descent,
            ..VatConfig::default()
        };
        let r_up = compute_r_vadv(&model, &theta, &b, &clean, &up, Heads::Joint, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let r_down = compute_r_vadv(&model, &theta, &b, &clean, &down, Heads::Joint, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(r_up.r, -&r_down.r);
    }

    #[test]
    fn normalize_then_average_keeps_norm() {
        let model = NluModel::new(tiny_dims());
        let theta = model.init_params(None, 6).unwrap();
        let b = batch();
        let clean = clean_pass(&model, &theta, &b).unwrap();
        let cfg = VatConfig {
            joint_norm_mode: JointNormMode::NormalizeThenAverage,
            epsilon: 2.0,
            ..VatConfig::default()
        };
        let r = compute_r_vadv(&model, &theta, &b, &clean, &cfg, Heads::Joint, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for n in r.example_norms() {
            assert!((n - 2.0).abs() < 1e-6);
        }
    }
}
