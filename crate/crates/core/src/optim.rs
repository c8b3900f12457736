//! Relaxed steepest descent and first-order baselines.
//!
//! A relaxed steepest descent step assumes the objective's minimum along the
//! negative gradient is zero and solves the first-order model for it:
//! `α = L / ‖J‖²`, `Δ = −α·J`. In one dimension this is a Newton root-finding
//! step on `L` itself.

use crate::error::{Error, Result};

/// A differentiable scalar objective over a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;

    fn evaluate(&self, params: &[f64]) -> Result<f64>;

    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>>;

    fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.evaluate(params)?, self.gradient(params)?))
    }
}

/// Objective assembled from two closures.
pub struct FnObjective<F, G> {
    dim: usize,
    value: F,
    grad: G,
}

impl<F, G> FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    pub fn new(dim: usize, value: F, grad: G) -> Self {
        Self { dim, value, grad }
    }
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, params: &[f64]) -> Result<f64> {
        check_dim(self.dim, params)?;
        Ok((self.value)(params))
    }

    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, params)?;
        let g = (self.grad)(params);
        check_dim(self.dim, &g)?;
        Ok(g)
    }
}

fn check_dim(dim: usize, v: &[f64]) -> Result<()> {
    if v.len() == dim {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "objective expects {dim} parameters, got {}",
            v.len()
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RsdConfig {
    /// Gradients with `‖J‖² ≤ grad_floor` are treated as stationary.
    pub grad_floor: f64,
    /// Losses `≤ loss_floor` count as converged.
    pub loss_floor: f64,
    /// Upper bound on the step size; `None` leaves it unclamped.
    pub max_alpha: Option<f64>,
}

impl Default for RsdConfig {
    fn default() -> Self {
        Self {
            grad_floor: 1e-12,
            loss_floor: 1e-12,
            max_alpha: Some(1e3),
        }
    }
}

impl RsdConfig {
    /// No step clamp, so trajectories follow the closed form exactly.
    pub fn unclamped() -> Self {
        Self {
            max_alpha: None,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RsdStepRecord {
    pub iteration: usize,
    /// Loss before the step.
    pub loss: f64,
    pub alpha: f64,
    pub grad_norm_sq: f64,
    pub params_snapshot: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Stepped {
        params: Vec<f64>,
        record: RsdStepRecord,
    },
    /// Loss is already at the floor; parameters are unchanged.
    Converged { loss: f64 },
}

/// One relaxed steepest descent update.
pub fn rsd_step(
    objective: &dyn Objective,
    params: &[f64],
    config: &RsdConfig,
) -> Result<StepOutcome> {
    let (loss, grad) = objective.value_and_gradient(params)?;
    rsd_update(params, loss, &grad, 0, config)
}

/// The update given an already evaluated loss and gradient.
pub fn rsd_update(
    params: &[f64],
    loss: f64,
    grad: &[f64],
    iteration: usize,
    config: &RsdConfig,
) -> Result<StepOutcome> {
    check_dim(params.len(), grad)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Internal("non-finite loss or gradient".into()));
    }
    if loss <= config.loss_floor {
        return Ok(StepOutcome::Converged { loss });
    }
    let grad_norm_sq: f64 = grad.iter().map(|g| g * g).sum();
    if grad_norm_sq <= config.grad_floor {
        return Err(Error::Stationary { loss, grad_norm_sq });
    }
    let mut alpha = loss / grad_norm_sq;
    if let Some(cap) = config.max_alpha {
        alpha = alpha.min(cap);
    }
    let params = params
        .iter()
        .zip(grad)
        .map(|(p, g)| p - alpha * g)
        .collect();
    Ok(StepOutcome::Stepped {
        params,
        record: RsdStepRecord {
            iteration,
            loss,
            alpha,
            grad_norm_sq,
            params_snapshot: None,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RsdRun {
    pub params: Vec<f64>,
    pub trajectory: Vec<RsdStepRecord>,
    /// Loss at the returned parameters.
    pub final_loss: f64,
    pub converged: bool,
}

/// Repeated [`rsd_step`] for up to `iterations` updates, stopping early when
/// the loss reaches the floor.
pub fn rsd_optimize(
    objective: &dyn Objective,
    params: &[f64],
    iterations: usize,
    config: &RsdConfig,
    snapshots: bool,
) -> Result<RsdRun> {
    if iterations == 0 {
        return Err(Error::Argument("iterations must be >= 1".into()));
    }
    let mut current = params.to_vec();
    let mut trajectory = Vec::with_capacity(iterations);
    let (mut loss, mut grad) = objective.value_and_gradient(&current)?;
    for i in 0..iterations {
        match rsd_update(&current, loss, &grad, i, config)? {
            StepOutcome::Converged { .. } => {
                return Ok(RsdRun {
                    params: current,
                    trajectory,
                    final_loss: loss,
                    converged: true,
                })
            }
            StepOutcome::Stepped { params, mut record } => {
                if snapshots {
                    record.params_snapshot = Some(current.clone());
                }
                trajectory.push(record);
                current = params;
                (loss, grad) = objective.value_and_gradient(&current)?;
            }
        }
    }
    let converged = loss <= config.loss_floor;
    Ok(RsdRun {
        params: current,
        trajectory,
        final_loss: loss,
        converged,
    })
}

/// Plain gradient descent step `x − lr·∇f(x)`.
pub fn sgd_step(objective: &dyn Objective, params: &[f64], lr: f64) -> Result<Vec<f64>> {
    if !(lr > 0.0) {
        return Err(Error::Argument(format!("learning rate must be > 0, got {lr}")));
    }
    let g = objective.gradient(params)?;
    Ok(params.iter().zip(&g).map(|(p, g)| p - lr * g).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }
}

/// Bias-corrected Adam step.
pub fn adam_step(
    objective: &dyn Objective,
    params: &[f64],
    lr: f64,
    state: &mut AdamState,
) -> Result<Vec<f64>> {
    if !(lr > 0.0) {
        return Err(Error::Argument(format!("learning rate must be > 0, got {lr}")));
    }
    check_dim(state.m.len(), params)?;
    let g = objective.gradient(params)?;
    state.t += 1;
    let b1t = 1.0 - state.beta1.powi(state.t as i32);
    let b2t = 1.0 - state.beta2.powi(state.t as i32);
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g[i] * g[i];
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        out.push(params[i] - lr * m_hat / (v_hat.sqrt() + state.eps));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fig3() -> impl Objective {
        FnObjective::new(
            1,
            |x: &[f64]| (x[0] - 5.0).powi(2) + 2.0,
            |x: &[f64]| vec![2.0 * (x[0] - 5.0)],
        )
    }

    fn square() -> impl Objective {
        FnObjective::new(1, |x: &[f64]| x[0] * x[0], |x: &[f64]| vec![2.0 * x[0]])
    }

    fn stepped(o: StepOutcome) -> (Vec<f64>, RsdStepRecord) {
        match o {
            StepOutcome::Stepped { params, record } => (params, record),
            other => panic!("expected a step, got {other:?}"),
        }
    }

    #[test]
    fn first_step_on_shifted_quadratic() {
        let (x, rec) = stepped(rsd_step(&fig3(), &[0.0], &RsdConfig::unclamped()).unwrap());
        assert_eq!(rec.loss, 27.0);
        assert_eq!(rec.grad_norm_sq, 100.0);
        assert!((rec.alpha - 0.27).abs() < 1e-15);
        assert!((x[0] - 2.7).abs() < 1e-12);
    }

    #[test]
    fn square_halves_each_step() {
        let (x, rec) = stepped(rsd_step(&square(), &[1.0], &RsdConfig::unclamped()).unwrap());
        assert_eq!(rec.alpha, 0.25);
        assert_eq!(x[0], 0.5);
        let mut x = vec![1.0];
        for _ in 0..20 {
            let next = stepped(rsd_step(&square(), &x, &RsdConfig::unclamped()).unwrap()).0;
            assert!((next[0] / x[0] - 0.5).abs() <= 1e-12);
            x = next;
        }
    }

    #[test]
    fn zero_loss_is_converged() {
        let out = rsd_step(&square(), &[0.0], &RsdConfig::default()).unwrap();
        assert_eq!(out, StepOutcome::Converged { loss: 0.0 });
        let run = rsd_optimize(&square(), &[0.0], 5, &RsdConfig::default(), false).unwrap();
        assert!(run.trajectory.is_empty());
        assert!(run.converged);
        assert_eq!(run.params, vec![0.0]);
    }

    #[test]
    fn stationary_with_positive_loss_errors() {
        let out = rsd_step(&fig3(), &[5.0], &RsdConfig::default());
        assert!(matches!(out, Err(Error::Stationary { .. })));
    }

    #[test]
    fn step_cap_limits_alpha() {
        let cfg = RsdConfig {
            max_alpha: Some(0.1),
            ..Default::default()
        };
        let (x, rec) = stepped(rsd_step(&fig3(), &[0.0], &cfg).unwrap());
        assert_eq!(rec.alpha, 0.1);
        assert!((x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn optimize_quadratic_three_iterations() {
        // Hand iteration: x1 = 2.7, x2 = 2.7 + 7.29/4.6.
        let run = rsd_optimize(&fig3(), &[0.0], 3, &RsdConfig::unclamped(), true).unwrap();
        let losses: Vec<f64> = run.trajectory.iter().map(|r| r.loss).collect();
        let x2: f64 = 2.7 + 7.29 / 4.6;
        assert!((losses[0] - 27.0).abs() < 1e-12);
        assert!((losses[1] - 7.29).abs() < 1e-12);
        assert!((losses[2] - ((x2 - 5.0).powi(2) + 2.0)).abs() < 1e-12);
        assert!((losses[2] - 2.5115).abs() < 1e-3);
        assert_eq!(run.trajectory[1].params_snapshot.as_deref(), Some(&[2.7][..]));
    }

    #[test]
    fn zero_iterations_rejected() {
        assert!(rsd_optimize(&square(), &[1.0], 0, &RsdConfig::default(), false).is_err());
    }

    #[test]
    fn sgd_steps_on_shifted_quadratic() {
        let x = sgd_step(&fig3(), &[0.0], 0.2).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12);
        let x = sgd_step(&fig3(), &[0.0], 0.7).unwrap();
        assert!((x[0] - 7.0).abs() < 1e-12);
        // 0.7 oscillates around 5 with ratio -0.4.
        let x2 = sgd_step(&fig3(), &x, 0.7).unwrap();
        assert!((x2[0] - 4.2).abs() < 1e-12);
        assert!(sgd_step(&fig3(), &[0.0], 0.0).is_err());
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for scale in [1e-4, 1.0, 1e4] {
            let obj = FnObjective::new(
                2,
                move |x: &[f64]| scale * (x[0] * x[0] + x[1] * x[1]),
                move |x: &[f64]| vec![2.0 * scale * x[0], 2.0 * scale * x[1]],
            );
            let mut st = AdamState::new(2);
            let x = adam_step(&obj, &[1.0, -2.0], 0.01, &mut st).unwrap();
            assert!(((1.0 - x[0]) - 0.01).abs() < 1e-6);
            assert!(((x[1] + 2.0) - 0.01).abs() < 1e-6);
            assert_eq!(st.steps(), 1);
        }
    }

    proptest! {
        #[test]
        fn descent_identity_and_direction(
            centers in proptest::collection::vec(-3.0f64..3.0, 1..6),
            weights in proptest::collection::vec(0.1f64..4.0, 6),
            offset in 0.0f64..2.0,
            start in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            let n = centers.len();
            let c = centers.clone();
            let w = weights[..n].to_vec();
            let (c2, w2) = (c.clone(), w.clone());
            let obj = FnObjective::new(
                n,
                move |x: &[f64]| offset + x.iter().zip(&c).zip(&w).map(|((x, c), w)| w * (x - c).powi(2)).sum::<f64>(),
                move |x: &[f64]| x.iter().zip(&c2).zip(&w2).map(|((x, c), w)| 2.0 * w * (x - c)).collect(),
            );
            let x0 = &start[..n];
            let (loss, g) = obj.value_and_gradient(x0).unwrap();
            prop_assume!(g.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            let (x1, _) = stepped(rsd_step(&obj, x0, &RsdConfig::unclamped()).unwrap());
            let inner: f64 = x1.iter().zip(x0).zip(&g).map(|((a, b), g)| (a - b) * g).sum();
            prop_assert!((loss + inner).abs() <= 1e-9 * loss);
            prop_assert!(inner < 0.0);
        }

        #[test]
        fn scaling_objective_leaves_step_unchanged(c in 0.01f64..100.0, x0 in -10.0f64..4.0) {
            let base = fig3();
            let scaled = FnObjective::new(
                1,
                move |x: &[f64]| c * ((x[0] - 5.0).powi(2) + 2.0),
                move |x: &[f64]| vec![c * 2.0 * (x[0] - 5.0)],
            );
            let (xa, ra) = stepped(rsd_step(&base, &[x0], &RsdConfig::unclamped()).unwrap());
            let (xb, rb) = stepped(rsd_step(&scaled, &[x0], &RsdConfig::unclamped()).unwrap());
            prop_assert!((rb.alpha * c - ra.alpha).abs() <= 1e-12 * ra.alpha);
            prop_assert!((xa[0] - xb[0]).abs() <= 1e-9 * (1.0 + xa[0].abs()));
        }
    }
}
