//! Per-frame fitting of the capsule model to 3D keypoints and silhouettes.
//!
//! The objective is
//!
//! ```text
//! L = λ_joint·L_joint + λ_mask·L_mask + λ_β·‖β‖² + λ_θ·‖θ‖²
//! ```
//!
//! where `L_joint` is the mean squared distance between predicted and valid
//! target joints, `L_mask` the per-pixel MSE between soft renders and masks,
//! and `θ` is canonicalized per joint before the norm. The root transform is
//! not regularized.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation;
use crate::geometry::Rig;
use crate::io;
use crate::kinematics::{self, canonical_axis_angle, CapsuleModel, KinematicParams};
use crate::silhouette::{self, SilhouetteMask};
use crate::skeleton::SkeletonSet3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPolicy {
    /// Damped Gauss-Newton on the joint and regularizer residuals, with the
    /// mask gradient folded into the right-hand side.
    GaussNewtonLm,
    GradientDescent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub lambda_joint: f64,
    pub lambda_mask: f64,
    pub lambda_beta: f64,
    pub lambda_theta: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_policy: StepPolicy,
    /// Silhouette edge softness, pixels.
    pub soft_sigma: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_joint: 1.0,
            lambda_mask: 0.01,
            lambda_beta: 1e-3,
            lambda_theta: 1e-3,
            max_iterations: 100,
            gradient_tolerance: 1e-6,
            step_policy: StepPolicy::GaussNewtonLm,
            soft_sigma: 1.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_joint, self.lambda_mask, self.lambda_beta, self.lambda_theta];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {lambdas:?}")));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be ≥ 1".into()));
        }
        if !(self.soft_sigma > 0.0) {
            return Err(Error::Config("soft_sigma must be > 0".into()));
        }
        if !(self.gradient_tolerance >= 0.0) {
            return Err(Error::Config("gradient_tolerance must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn without_masks(mut self) -> Self {
        self.lambda_mask = 0.0;
        self
    }
}

fn check_target(model: &CapsuleModel, target: &SkeletonSet3D) -> Result<()> {
    if target.joints.len() != model.joint_count() {
        return Err(Error::DimensionMismatch(format!(
            "target has {} joints, model has {}",
            target.joints.len(),
            model.joint_count()
        )));
    }
    Ok(())
}

/// Mean squared distance over valid target joints, mm².
pub fn joint_loss(predicted: &[Vector3<f64>], target: &SkeletonSet3D) -> Result<f64> {
    Ok(joint_loss_and_gradient(predicted, target)?.0)
}

fn joint_loss_and_gradient(
    predicted: &[Vector3<f64>],
    target: &SkeletonSet3D,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    if predicted.len() != target.joints.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predicted joints for {} targets",
            predicted.len(),
            target.joints.len()
        )));
    }
    let n = target.joints.iter().filter(|j| j.valid).count();
    if n == 0 {
        return Err(Error::NoValidTargets);
    }
    let mut sum = 0.0;
    let mut grad = vec![Vector3::zeros(); predicted.len()];
    for ((p, t), g) in predicted.iter().zip(&target.joints).zip(grad.iter_mut()) {
        if t.valid {
            let d = p - t.position;
            sum += d.norm_squared();
            *g = d * (2.0 / n as f64);
        }
    }
    Ok((sum / n as f64, grad))
}

/// Squared norm of the canonicalized θ and the matching gradient `2θ_c`.
fn theta_regularizer(theta: &[f64]) -> (f64, Vec<f64>) {
    let mut canon = Vec::with_capacity(theta.len());
    for chunk in theta.chunks_exact(3) {
        let c = canonical_axis_angle(&Vector3::new(chunk[0], chunk[1], chunk[2]));
        canon.extend_from_slice(c.as_slice());
    }
    let value = canon.iter().map(|v| v * v).sum();
    (value, canon.iter().map(|v| 2.0 * v).collect())
}

/// Values of the four objective terms before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub joint: f64,
    pub mask: f64,
    pub beta: f64,
    pub theta: f64,
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub terms: LossTerms,
    /// Gradient with respect to the flattened parameters.
    pub gradient: DVector<f64>,
}

fn mask_inputs_ok(masks: &[SilhouetteMask], cfg: &FitConfig) -> Result<()> {
    if cfg.lambda_mask > 0.0 && masks.is_empty() {
        return Err(Error::DimensionMismatch("λ_mask > 0 but no masks were given".into()));
    }
    Ok(())
}

/// Weighted objective and its analytic gradient. Terms with a zero weight
/// are skipped entirely.
pub fn total_loss(
    model: &CapsuleModel,
    params: &KinematicParams,
    target: &SkeletonSet3D,
    masks: &[SilhouetteMask],
    rig: &Rig,
    cfg: &FitConfig,
) -> Result<LossEval> {
    Ok(evaluate(model, params, target, masks, rig, cfg)?.0)
}

/// Objective, gradient and the FK Jacobian they were built from.
fn evaluate(
    model: &CapsuleModel,
    params: &KinematicParams,
    target: &SkeletonSet3D,
    masks: &[SilhouetteMask],
    rig: &Rig,
    cfg: &FitConfig,
) -> Result<(LossEval, DMatrix<f64>)> {
    check_target(model, target)?;
    mask_inputs_ok(masks, cfg)?;
    let (positions, jac) = kinematics::forward_kinematics_jacobian(model, params)?;
    let mut terms = LossTerms::default();
    let mut d_pos = vec![Vector3::zeros(); positions.len()];
    if cfg.lambda_joint > 0.0 {
        let (l, g) = joint_loss_and_gradient(&positions, target)?;
        terms.joint = l;
        for (acc, gi) in d_pos.iter_mut().zip(g) {
            *acc += gi * cfg.lambda_joint;
        }
    }
    if cfg.lambda_mask > 0.0 {
        let (l, g) = silhouette::mask_loss_and_gradient(model, &positions, rig, masks, cfg.soft_sigma)?;
        terms.mask = l;
        for (acc, gi) in d_pos.iter_mut().zip(g) {
            *acc += gi * cfg.lambda_mask;
        }
    }
    let flat = DVector::from_iterator(3 * d_pos.len(), d_pos.iter().flat_map(|v| [v.x, v.y, v.z]));
    let mut gradient = jac.tr_mul(&flat);

    let nb = model.bone_count();
    terms.beta = params.beta.iter().map(|b| b * b).sum();
    let (theta_sq, theta_grad) = theta_regularizer(&params.theta);
    terms.theta = theta_sq;
    for (i, b) in params.beta.iter().enumerate() {
        gradient[i] += 2.0 * cfg.lambda_beta * b;
    }
    for (i, g) in theta_grad.iter().enumerate() {
        gradient[nb + i] += cfg.lambda_theta * g;
    }
    let eval = LossEval {
        value: weighted(&terms, cfg),
        terms,
        gradient,
    };
    Ok((eval, jac))
}

fn weighted(t: &LossTerms, cfg: &FitConfig) -> f64 {
    // skipped terms contribute exactly zero even if their raw value is unset
    let term = |lambda: f64, v: f64| if lambda > 0.0 { lambda * v } else { 0.0 };
    term(cfg.lambda_joint, t.joint)
        + term(cfg.lambda_mask, t.mask)
        + term(cfg.lambda_beta, t.beta)
        + term(cfg.lambda_theta, t.theta)
}

/// Objective value only (no gradient, no Jacobian).
pub fn loss_value(
    model: &CapsuleModel,
    params: &KinematicParams,
    target: &SkeletonSet3D,
    masks: &[SilhouetteMask],
    rig: &Rig,
    cfg: &FitConfig,
) -> Result<f64> {
    check_target(model, target)?;
    mask_inputs_ok(masks, cfg)?;
    let positions = kinematics::forward_kinematics(model, params)?;
    let mut terms = LossTerms::default();
    if cfg.lambda_joint > 0.0 {
        terms.joint = joint_loss(&positions, target)?;
    }
    if cfg.lambda_mask > 0.0 {
        terms.mask = silhouette::mask_loss_only(model, &positions, rig, masks, cfg.soft_sigma)?;
    }
    terms.beta = params.beta.iter().map(|b| b * b).sum();
    terms.theta = theta_regularizer(&params.theta).0;
    Ok(weighted(&terms, cfg))
}

/// `2·JᵀJ` of the joint and regularizer residuals, given the FK Jacobian.
fn gauss_newton_hessian(
    model: &CapsuleModel,
    jac: &DMatrix<f64>,
    target: &SkeletonSet3D,
    cfg: &FitConfig,
) -> DMatrix<f64> {
    let p = model.param_count();
    let mut hessian = DMatrix::zeros(p, p);
    if cfg.lambda_joint > 0.0 {
        let valid: Vec<usize> = (0..target.joints.len()).filter(|&i| target.joints[i].valid).collect();
        let w = 2.0 * cfg.lambda_joint / valid.len() as f64;
        let mut rows = DMatrix::zeros(3 * valid.len(), p);
        for (r, &j) in valid.iter().enumerate() {
            rows.view_mut((3 * r, 0), (3, p)).copy_from(&jac.view((3 * j, 0), (3, p)));
        }
        hessian += rows.tr_mul(&rows) * w;
    }
    let nb = model.bone_count();
    for i in 0..nb {
        hessian[(i, i)] += 2.0 * cfg.lambda_beta;
    }
    for i in nb..nb + 3 * model.joint_count() {
        hessian[(i, i)] += 2.0 * cfg.lambda_theta;
    }
    hessian
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: KinematicParams,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

const MU_INIT: f64 = 1e-8;
const MU_MAX: f64 = 1e12;
const RELATIVE_DECREASE_TOL: f64 = 1e-12;
/// Steps shorter than this fraction of the parameter norm end the run.
const RELATIVE_STEP_TOL: f64 = 1e-8;

fn step(params: &KinematicParams, model: &CapsuleModel, delta: &DVector<f64>) -> Result<KinematicParams> {
    KinematicParams::from_vector(model, &(params.to_vector() + delta))
}

/// A trial point the objective cannot be evaluated at (overflowing shape,
/// joints pushed behind a camera) is a rejected step, not a failure.
fn trial<T>(result: Result<T>) -> Result<Option<T>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateDepth { .. } | Error::NonFiniteLoss { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn non_finite(iteration: usize, detail: impl Into<String>) -> Error {
    Error::NonFiniteLoss {
        iteration,
        detail: detail.into(),
    }
}

/// Minimizes the objective from `init`. Only steps that lower the loss are
/// accepted, so the returned loss never exceeds the initial one.
pub fn fit_frame(
    model: &CapsuleModel,
    target: &SkeletonSet3D,
    masks: &[SilhouetteMask],
    rig: &Rig,
    init: &KinematicParams,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if !init.is_finite() {
        return Err(non_finite(0, "initial parameters are not finite"));
    }
    match cfg.step_policy {
        StepPolicy::GaussNewtonLm => levenberg_marquardt(model, target, masks, rig, init, cfg),
        StepPolicy::GradientDescent => gradient_descent(model, target, masks, rig, init, cfg),
    }
}

fn levenberg_marquardt(
    model: &CapsuleModel,
    target: &SkeletonSet3D,
    masks: &[SilhouetteMask],
    rig: &Rig,
    init: &KinematicParams,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    let mut params = init.clone();
    let (mut eval, jac) = evaluate(model, &params, target, masks, rig, cfg)?;
    if !eval.value.is_finite() {
        return Err(non_finite(0, format!("initial loss {}", eval.value)));
    }
    let mut hessian = gauss_newton_hessian(model, &jac, target, cfg);
    let mut history = vec![eval.value];
    let mut mu = MU_INIT;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        if eval.gradient.norm() < cfg.gradient_tolerance {
            converged = true;
            break;
        }
        let max_diag = hessian.diagonal().max().max(f64::MIN_POSITIVE);
        let scaling = hessian.diagonal().map(|d| d.max(1e-12 * max_diag));
        let accepted = loop {
            let mut damped = hessian.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += mu * scaling[i];
            }
            if let Some(chol) = damped.cholesky() {
                let delta = chol.solve(&(-&eval.gradient));
                let candidate = step(&params, model, &delta)?;
                if candidate.is_finite() {
                    if let Some((t, jac)) = trial(evaluate(model, &candidate, target, masks, rig, cfg))? {
                        if t.value.is_finite() && t.value < eval.value {
                            mu = (mu / 3.0).max(1e-15);
                            break Some((candidate, t, jac, delta.norm()));
                        }
                    }
                }
            }
            mu *= 4.0;
            if mu > MU_MAX {
                break None;
            }
        };
        let Some((candidate, trial, jac, step_norm)) = accepted else {
            // no descent direction left at machine precision
            converged = true;
            break;
        };
        iterations += 1;
        let previous = eval.value;
        params = candidate;
        eval = trial;
        hessian = gauss_newton_hessian(model, &jac, target, cfg);
        history.push(eval.value);
        let small_step = step_norm <= RELATIVE_STEP_TOL * (params.to_vector().norm() + RELATIVE_STEP_TOL);
        if small_step || previous - eval.value <= RELATIVE_DECREASE_TOL * previous {
            converged = true;
            break;
        }
    }
    if !converged && eval.gradient.norm() < cfg.gradient_tolerance {
        converged = true;
    }
    Ok(FitOutcome {
        params: params.canonicalized(),
        loss: eval.value,
        iterations,
        converged,
        history,
    })
}

fn gradient_descent(
    model: &CapsuleModel,
    target: &SkeletonSet3D,
    masks: &[SilhouetteMask],
    rig: &Rig,
    init: &KinematicParams,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    let mut params = init.clone();
    let mut eval = total_loss(model, &params, target, masks, rig, cfg)?;
    if !eval.value.is_finite() {
        return Err(non_finite(0, format!("initial loss {}", eval.value)));
    }
    let mut history = vec![eval.value];
    let mut rate = 1e-6;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        let g2 = eval.gradient.norm_squared();
        if g2.sqrt() < cfg.gradient_tolerance {
            converged = true;
            break;
        }
        let accepted = loop {
            let candidate = step(&params, model, &(-&eval.gradient * rate))?;
            let value = if candidate.is_finite() {
                trial(loss_value(model, &candidate, target, masks, rig, cfg))?
            } else {
                None
            };
            // Armijo sufficient decrease
            if value.is_some_and(|v| v.is_finite() && v <= eval.value - 1e-4 * rate * g2) {
                break Some(candidate);
            }
            rate *= 0.5;
            if rate < 1e-30 {
                break None;
            }
        };
        let Some(candidate) = accepted else {
            converged = true;
            break;
        };
        iterations += 1;
        let previous = eval.value;
        params = candidate;
        eval = total_loss(model, &params, target, masks, rig, cfg)?;
        history.push(eval.value);
        rate *= 2.0;
        if previous - eval.value <= RELATIVE_DECREASE_TOL * previous {
            converged = true;
            break;
        }
    }
    Ok(FitOutcome {
        params: params.canonicalized(),
        loss: eval.value,
        iterations,
        converged,
        history,
    })
}

/// Rest pose rigidly aligned onto the valid target joints (falls back to a
/// centroid shift when fewer than three non-collinear joints are valid).
pub fn initial_alignment(model: &CapsuleModel, target: &SkeletonSet3D) -> Result<KinematicParams> {
    check_target(model, target)?;
    let mut params = KinematicParams::zeros(model);
    let rest = kinematics::forward_kinematics(model, &params)?;
    let valid = target.valid_mask();
    let targets = target.positions();
    let safe_targets: Vec<Vector3<f64>> = targets
        .iter()
        .zip(&valid)
        .map(|(t, &v)| if v { *t } else { Vector3::zeros() })
        .collect();
    match evaluation::fit_similarity(&rest, &safe_targets, &valid, false) {
        Ok(sim) => {
            let root_rot = nalgebra::Rotation3::from_matrix(&sim.rotation);
            params.root_rotation = root_rot.scaled_axis();
            // rest positions were computed with zero root translation
            params.root_translation = sim.translation;
        }
        Err(_) => {
            let n = valid.iter().filter(|v| **v).count();
            if n == 0 {
                return Err(Error::NoValidTargets);
            }
            let shift: Vector3<f64> = rest
                .iter()
                .zip(&safe_targets)
                .zip(&valid)
                .filter(|(_, &v)| v)
                .map(|((r, t), _)| t - r)
                .sum::<Vector3<f64>>()
                / n as f64;
            params.root_translation = shift;
        }
    }
    Ok(params)
}

#[derive(Debug, Clone)]
pub struct FrameFit {
    pub frame: i64,
    pub params: KinematicParams,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

impl FrameFit {
    pub fn to_record(&self) -> FitRecord {
        FitRecord {
            frame: self.frame,
            beta: io::round_all(self.params.beta.iter().copied()),
            theta: io::round_all(self.params.theta.iter().copied()),
            root_rotation: io::round_all(self.params.root_rotation.iter().copied()),
            root_translation: io::round_all(self.params.root_translation.iter().copied()),
            loss: self.loss.is_finite().then(|| io::round_sig(self.loss)),
            iterations: self.iterations,
            converged: self.converged,
        }
    }
}

/// One line of a fit JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub frame: i64,
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub root_rotation: Vec<f64>,
    pub root_translation: Vec<f64>,
    pub loss: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl FitRecord {
    pub fn params(&self, model: &CapsuleModel) -> Result<KinematicParams> {
        let mut flat = self.beta.clone();
        flat.extend(&self.theta);
        flat.extend(&self.root_rotation);
        flat.extend(&self.root_translation);
        KinematicParams::from_vector(model, &DVector::from_vec(flat))
    }
}

/// Fits frames in order, warm-starting each from the previous solution.
/// Frame 0 (and any frame after a failure) starts from
/// [`initial_alignment`]. `masks[t]` holds frame `t`'s masks and may be
/// empty when `λ_mask = 0`.
pub fn fit_sequence(
    model: &CapsuleModel,
    targets: &[SkeletonSet3D],
    masks: &[Vec<SilhouetteMask>],
    rig: &Rig,
    cfg: &FitConfig,
) -> Result<Vec<FrameFit>> {
    cfg.validate()?;
    if cfg.lambda_mask > 0.0 && masks.len() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} mask sets for {} frames",
            masks.len(),
            targets.len()
        )));
    }
    let mut out: Vec<FrameFit> = Vec::with_capacity(targets.len());
    let mut warm: Option<KinematicParams> = None;
    for (t, target) in targets.iter().enumerate() {
        let frame_masks: &[SilhouetteMask] = masks.get(t).map(|m| m.as_slice()).unwrap_or(&[]);
        let attempt = (|| {
            let init = match &warm {
                Some(p) => p.clone(),
                None => initial_alignment(model, target)?,
            };
            fit_frame(model, target, frame_masks, rig, &init, cfg)
        })();
        match attempt {
            Ok(fit) => {
                warm = Some(fit.params.clone());
                out.push(FrameFit {
                    frame: target.frame,
                    params: fit.params,
                    loss: fit.loss,
                    iterations: fit.iterations,
                    converged: fit.converged,
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("frame {}: fit failed: {e}", target.frame);
                let params = warm.take().unwrap_or_else(|| KinematicParams::zeros(model));
                out.push(FrameFit {
                    frame: target.frame,
                    params,
                    loss: f64::NAN,
                    iterations: 0,
                    converged: false,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(out)
}
