//! Nonlinear mixed-effects fit of the one-compartment model and
//! standardization over the fitted random-effect distribution.
//!
//! Marginal likelihood per subject by the Laplace approximation around the
//! posterior mode of the individual log-parameters `u = (ln cl, ln v)`
//! (equivalently the random effects, since `u = ln mu + eta`):
//!
//! ```text
//! J(u)  = sum_j [ln 2pi + 2 ln(xi f_j) + ((y_j - f_j) / (xi f_j))^2]
//!       + sum_k [ln 2pi + 2 ln omega_k + (u_k - ln mu_k)^2 / omega_k^2]
//! L     = J(u*) + ln det H(u*) - 2 ln 2pi - 2 ln 2,   H = d2J/du2
//! ```
//!
//! Population parameters are optimized on the log scale by BFGS. The
//! gradient of `L` is exact: `u*` moves with the parameters through
//! `du*/dtheta = -H^-1 d2J/du dtheta`, which brings third derivatives of `J`
//! into the log-determinant term.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{minimize_bfgs, BfgsConfig};
use crate::pk::{
    apply_residual, conc_linear, individual_params, log_conc_derivs, schedule, DoseEvent,
    PopulationParams, SIGN, TROUGH_TIMES,
};
use crate::rng::{stream, Purpose, StreamKey};
use crate::stats;
use crate::trial::{Arm, SubjectRecord, TrialDataset};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceConfig {
    /// Gradient infinity-norm tolerance of the per-subject mean objective.
    pub outer_tol: f64,
    /// Relative objective change below which outer steps count as stalled.
    pub outer_ftol: f64,
    /// Newton-decrement tolerance of the inner mode search.
    pub inner_tol: f64,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    /// Step for finite-difference derivative checks.
    pub fd_step: f64,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        Self {
            outer_tol: 1e-6,
            outer_ftol: 1e-10,
            inner_tol: 1e-14,
            max_outer_iters: 200,
            max_inner_iters: 200,
            fd_step: 1e-4,
        }
    }
}

impl LaplaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_tol > 0.0 && self.inner_tol > 0.0 && self.fd_step > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("tolerances must be positive: {self:?}")))
        }
    }
}

/// Observations of one subject as used by the likelihood.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub id: usize,
    pub doses: Vec<DoseEvent>,
    /// `(time, observed exposure)`
    pub obs: Vec<(f64, f64)>,
    /// Individual least-squares log-parameters, a second start for the
    /// posterior mode search.
    pub start: Option<[f64; 2]>,
}

impl SubjectData {
    pub fn new(id: usize, doses: Vec<DoseEvent>, obs: Vec<(f64, f64)>) -> Self {
        let mut s = Self { id, doses, obs, start: None };
        s.start = individual_log_fit(&s).map(|(u, _)| u).filter(|u| u[0].abs() < 50.0 && u[1].abs() < 50.0);
        s
    }

    /// All four troughs with the realized doses.
    pub fn from_record(s: &SubjectRecord) -> Self {
        Self::new(s.subject_id, s.dose_events().to_vec(), TROUGH_TIMES.iter().copied().zip(s.troughs).collect())
    }
}

type M2 = [[f64; 2]; 2];

fn inv2(h: &M2) -> Option<(M2, f64)> {
    let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    if !(det > 0.0 && h[0][0] > 0.0) {
        return None;
    }
    Some(([[h[1][1] / det, -h[0][1] / det], [-h[1][0] / det, h[0][0] / det]], det))
}

/// Per-observation pieces of the data term `phi(g) = 2g + s (y e^-g - 1)^2`.
struct ObsTerm {
    gu: [f64; 2],
    h2: f64,
    h3: f64,
    /// `phi'`, `phi''`, `phi'''`
    p1: f64,
    p2: f64,
    p3: f64,
    /// `d/d ln xi` of `phi` (with its `2 ln xi`), `phi'`, `phi''`
    x0: f64,
    x1: f64,
    x2: f64,
}

/// Joint density `J` at `u` with its gradient and Hessian in `u`.
#[derive(Debug, Clone, Copy)]
pub struct JointEval {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: M2,
}

struct Model<'a> {
    theta: [f64; 5],
    subj: &'a SubjectData,
}

impl<'a> Model<'a> {
    fn s(&self) -> f64 {
        (-2.0 * self.theta[4]).exp()
    }

    fn prior_r(&self) -> [f64; 2] {
        [(-2.0 * self.theta[2]).exp(), (-2.0 * self.theta[3]).exp()]
    }

    fn obs_terms(&self, u: [f64; 2]) -> Option<(f64, Vec<ObsTerm>)> {
        let s = self.s();
        let mut value = 0.0;
        let mut terms = Vec::with_capacity(self.subj.obs.len());
        for &(t, y) in &self.subj.obs {
            let d = log_conc_derivs(u[0], u[1], &self.subj.doses, t)?;
            let w = y * (-d.g).exp();
            let q = w - 1.0;
            value += LN_2PI + 2.0 * self.theta[4] + 2.0 * d.g + s * q * q;
            terms.push(ObsTerm {
                gu: d.grad(),
                h2: d.h2,
                h3: d.h3,
                p1: 2.0 - 2.0 * s * q * w,
                p2: 2.0 * s * w * (2.0 * w - 1.0),
                p3: 2.0 * s * w * (1.0 - 4.0 * w),
                x0: 2.0 - 2.0 * s * q * q,
                x1: 4.0 * s * q * w,
                x2: -4.0 * s * w * (2.0 * w - 1.0),
            });
        }
        if !value.is_finite() {
            return None;
        }
        Some((value, terms))
    }

    fn eval(&self, u: [f64; 2]) -> Option<JointEval> {
        let (mut value, terms) = self.obs_terms(u)?;
        let mut grad = [0.0; 2];
        let mut hess = [[0.0; 2]; 2];
        for o in &terms {
            for i in 0..2 {
                grad[i] += o.p1 * o.gu[i];
                for j in 0..2 {
                    hess[i][j] += o.p2 * o.gu[i] * o.gu[j] + o.p1 * o.h2 * SIGN[i] * SIGN[j];
                }
            }
        }
        let r = self.prior_r();
        for k in 0..2 {
            let z = u[k] - self.theta[k];
            value += LN_2PI + 2.0 * self.theta[2 + k] + z * z * r[k];
            grad[k] += 2.0 * z * r[k];
            hess[k][k] += 2.0 * r[k];
        }
        Some(JointEval { value, grad, hess })
    }

    fn value(&self, u: [f64; 2]) -> f64 {
        match self.obs_terms(u) {
            None => f64::INFINITY,
            Some((v, _)) => {
                let r = self.prior_r();
                v + (0..2)
                    .map(|k| {
                        let z = u[k] - self.theta[k];
                        LN_2PI + 2.0 * self.theta[2 + k] + z * z * r[k]
                    })
                    .sum::<f64>()
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InnerMode {
    /// Individual log-parameters at the mode.
    pub u: [f64; 2],
    pub joint: JointEval,
    pub iterations: usize,
    pub converged: bool,
}

/// Newton direction. An indefinite Hessian is replaced by its absolute
/// eigenvalues so the step still descends along negative curvature.
fn newton_direction(h: &M2, g: [f64; 2]) -> [f64; 2] {
    if let Some((hi, _)) = inv2(h) {
        return [
            -(hi[0][0] * g[0] + hi[0][1] * g[1]),
            -(hi[1][0] * g[0] + hi[1][1] * g[1]),
        ];
    }
    let (a, b, d) = (h[0][0], h[0][1], h[1][1]);
    let mid = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let floor = 1e-8 * (a.abs() + d.abs()).max(1e-300);
    let lam = [mid + rad, mid - rad];
    // eigenvector of the larger eigenvalue, then its orthogonal complement
    let v0 = if b.abs() > 0.0 {
        let (x, y) = (b, lam[0] - a);
        let n = x.hypot(y);
        [x / n, y / n]
    } else if a >= d {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    let vs = [v0, [-v0[1], v0[0]]];
    let mut dir = [0.0; 2];
    for k in 0..2 {
        let c = (vs[k][0] * g[0] + vs[k][1] * g[1]) / lam[k].abs().max(floor);
        dir[0] -= c * vs[k][0];
        dir[1] -= c * vs[k][1];
    }
    dir
}

/// Posterior mode: damped Newton from the typical values and from the
/// individual least-squares start; the lower joint density wins, so a
/// subject with two local modes does not switch between them as the
/// population parameters move.
fn inner_mode(model: &Model, cfg: &LaplaceConfig) -> Result<InnerMode> {
    let typical = [model.theta[0], model.theta[1]];
    let first = newton_from(model, cfg, typical)?;
    let Some(start) = model.subj.start else {
        return Ok(first);
    };
    match newton_from(model, cfg, start) {
        Ok(m) if m.converged && (!first.converged || m.joint.value < first.joint.value) => Ok(m),
        _ => Ok(first),
    }
}

/// Damped Newton search started at `u0`. Converged when the Newton
/// decrement `g' H^-1 g` is below `inner_tol`, which does not depend on the
/// scale of `J`.
fn newton_from(model: &Model, cfg: &LaplaceConfig, u0: [f64; 2]) -> Result<InnerMode> {
    let mut u = u0;
    let mut cur = model.eval(u).ok_or_else(|| {
        Error::Degenerate(format!("subject {}: likelihood undefined at the start {u0:?}", model.subj.id))
    })?;
    let decrement = |e: &JointEval| match inv2(&e.hess) {
        Some((hi, _)) => {
            let g = e.grad;
            g[0] * (hi[0][0] * g[0] + hi[0][1] * g[1]) + g[1] * (hi[1][0] * g[0] + hi[1][1] * g[1])
        }
        None => f64::INFINITY,
    };
    let mut iterations = 0;
    while iterations < cfg.max_inner_iters {
        if decrement(&cur) <= cfg.inner_tol {
            return Ok(InnerMode { u, joint: cur, iterations, converged: true });
        }
        iterations += 1;
        let g = cur.grad;
        let dir = newton_direction(&cur.hess, g);
        let big = dir[0].abs().max(dir[1].abs());
        let scale = if big > 2.0 { 2.0 / big } else { 1.0 };
        let dir = [dir[0] * scale, dir[1] * scale];
        let slope = g[0] * dir[0] + g[1] * dir[1];
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let ut = [u[0] + step * dir[0], u[1] + step * dir[1]];
            // the tolerance admits steps that only lose rounding noise
            if model.value(ut) <= cur.value + 1e-4 * step * slope + 1e-12 * cur.value.abs() {
                if let Some(e) = model.eval(ut) {
                    u = ut;
                    cur = e;
                    moved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let converged = decrement(&cur) <= cfg.inner_tol;
    Ok(InnerMode { u, joint: cur, iterations, converged })
}

/// Posterior mode of a subject's individual log-parameters at population
/// log-parameters `theta`.
pub fn posterior_mode(theta: &[f64; 5], subj: &SubjectData, cfg: &LaplaceConfig) -> Result<InnerMode> {
    inner_mode(&Model { theta: *theta, subj }, cfg)
}

/// Laplace contribution of one subject.
#[derive(Debug, Clone, Copy)]
pub struct SubjectLaplace {
    pub neg2ll: f64,
    /// Gradient with respect to `[ln mu_cl, ln mu_v, ln omega_cl, ln omega_v, ln xi]`.
    pub grad: [f64; 5],
    pub eta: [f64; 2],
    pub inner_converged: bool,
}

fn laplace_value(mode: &InnerMode) -> Option<f64> {
    let (_, det) = inv2(&mode.joint.hess)?;
    Some(mode.joint.value + det.ln() - 2.0 * LN_2PI - 2.0 * 2f64.ln())
}

fn subject_laplace(theta: &[f64; 5], subj: &SubjectData, cfg: &LaplaceConfig, with_grad: bool) -> Result<SubjectLaplace> {
    if subj.obs.is_empty() {
        return Err(Error::Degenerate(format!("subject {} has no observations", subj.id)));
    }
    let model = Model { theta: *theta, subj };
    let mode = inner_mode(&model, cfg)?;
    let u = mode.u;
    let eta = [u[0] - theta[0], u[1] - theta[1]];
    let neg2ll = laplace_value(&mode).ok_or_else(|| {
        Error::Degenerate(format!("subject {}: curvature not positive definite at the mode", subj.id))
    })?;
    if !with_grad {
        return Ok(SubjectLaplace { neg2ll, grad: [0.0; 5], eta, inner_converged: mode.converged });
    }

    let (_, terms) = model.obs_terms(u).expect("finite at mode");
    let (hi, _) = inv2(&mode.joint.hess).expect("checked above");
    let r = model.prior_r();
    let z = eta;

    // third derivatives of the data term
    let mut d3 = [[[0.0; 2]; 2]; 2];
    for o in &terms {
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let m = |a: usize, b: usize| SIGN[a] * SIGN[b];
                    d3[i][j][k] += o.p3 * o.gu[i] * o.gu[j] * o.gu[k]
                        + o.p2 * o.h2 * (m(i, j) * o.gu[k] + m(i, k) * o.gu[j] + m(j, k) * o.gu[i])
                        + o.p1 * o.h3 * SIGN[i] * SIGN[j] * SIGN[k];
                }
            }
        }
    }

    // explicit partials at fixed u
    let mut j_theta = [
        -2.0 * z[0] * r[0],
        -2.0 * z[1] * r[1],
        2.0 - 2.0 * z[0] * z[0] * r[0],
        2.0 - 2.0 * z[1] * z[1] * r[1],
        0.0,
    ];
    let mut ju_xi = [0.0; 2];
    let mut h_xi = [[0.0; 2]; 2];
    for o in &terms {
        j_theta[4] += o.x0;
        for i in 0..2 {
            ju_xi[i] += o.x1 * o.gu[i];
            for j in 0..2 {
                h_xi[i][j] += o.x2 * o.gu[i] * o.gu[j] + o.x1 * o.h2 * SIGN[i] * SIGN[j];
            }
        }
    }
    let ju_theta: [[f64; 2]; 5] = [
        [-2.0 * r[0], 0.0],
        [0.0, -2.0 * r[1]],
        [-4.0 * z[0] * r[0], 0.0],
        [0.0, -4.0 * z[1] * r[1]],
        ju_xi,
    ];
    let zero = [[0.0; 2]; 2];
    let h_theta: [M2; 5] = [
        zero,
        zero,
        [[-4.0 * r[0], 0.0], [0.0, 0.0]],
        [[0.0, 0.0], [0.0, -4.0 * r[1]]],
        h_xi,
    ];

    let gu = mode.joint.grad;
    let mut grad = [0.0; 5];
    for p in 0..5 {
        let b = ju_theta[p];
        let du = [
            -(hi[0][0] * b[0] + hi[0][1] * b[1]),
            -(hi[1][0] * b[0] + hi[1][1] * b[1]),
        ];
        let mut dh = h_theta[p];
        for i in 0..2 {
            for j in 0..2 {
                dh[i][j] += d3[i][j][0] * du[0] + d3[i][j][1] * du[1];
            }
        }
        let tr: f64 = (0..2).map(|i| (0..2).map(|j| hi[i][j] * dh[j][i]).sum::<f64>()).sum();
        grad[p] = j_theta[p] + gu[0] * du[0] + gu[1] * du[1] + tr;
    }
    Ok(SubjectLaplace { neg2ll, grad, eta, inner_converged: mode.converged })
}

/// -2 log marginal likelihood of one subject by the Laplace approximation.
pub fn subject_neg2ll_laplace(pop: &PopulationParams, subject: &SubjectRecord, cfg: &LaplaceConfig) -> Result<SubjectLaplace> {
    subject_laplace(&pop.to_log(), &SubjectData::from_record(subject), cfg, false)
}

/// Joint `J` of a subject at random effects `eta`, for diagnostics and tests.
pub fn joint_neg2ll(pop: &PopulationParams, subj: &SubjectData, eta: [f64; 2]) -> Option<JointEval> {
    let theta = pop.to_log();
    Model { theta, subj }.eval([theta[0] + eta[0], theta[1] + eta[1]])
}

/// Total objective over subjects at log-parameters `theta`.
#[derive(Debug, Clone)]
pub struct Objective {
    pub neg2ll: f64,
    pub grad: [f64; 5],
    pub etas: Vec<[f64; 2]>,
    pub inner_failures: usize,
}

pub fn objective(theta: &[f64; 5], data: &[SubjectData], cfg: &LaplaceConfig, with_grad: bool) -> Result<Objective> {
    let parts = data
        .par_iter()
        .map(|s| subject_laplace(theta, s, cfg, with_grad))
        .collect::<Result<Vec<_>>>()?;
    // ordered reduction keeps the sum independent of scheduling
    let mut total = Objective { neg2ll: 0.0, grad: [0.0; 5], etas: Vec::with_capacity(parts.len()), inner_failures: 0 };
    for p in parts {
        total.neg2ll += p.neg2ll;
        for k in 0..5 {
            total.grad[k] += p.grad[k];
        }
        total.etas.push(p.eta);
        total.inner_failures += usize::from(!p.inner_converged);
    }
    Ok(total)
}

/// Central finite-difference gradient of the objective (derivative oracle).
pub fn fd_gradient(theta: &[f64; 5], data: &[SubjectData], cfg: &LaplaceConfig, step: f64) -> Result<[f64; 5]> {
    let mut g = [0.0; 5];
    for k in 0..5 {
        let mut hi = *theta;
        let mut lo = *theta;
        hi[k] += step;
        lo[k] -= step;
        let fh = objective(&hi, data, cfg, false)?.neg2ll;
        let fl = objective(&lo, data, cfg, false)?.neg2ll;
        g[k] = (fh - fl) / (2.0 * step);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbEstimate {
    pub subject_id: usize,
    pub eta_cl: f64,
    pub eta_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlmeFit {
    pub est: PopulationParams,
    pub eb: Vec<EbEstimate>,
    pub neg2ll: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Infinity norm of the per-subject mean gradient at the estimates.
    pub grad_norm: f64,
    /// Subjects whose inner mode search stopped short of `inner_tol` at the
    /// final estimates.
    pub inner_failures: usize,
    /// Objective after every accepted outer step.
    pub trace: Vec<f64>,
}

impl NlmeFit {
    pub fn eb_estimates(&self, subject_id: usize) -> Result<(f64, f64)> {
        eb_estimates(self, subject_id)
    }

    pub fn write_report<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Report<'a> {
            estimates: &'a PopulationParams,
            neg2ll: f64,
            converged: bool,
            iterations: usize,
            grad_norm: f64,
            n_subjects: usize,
            inner_failures: usize,
        }
        let report = Report {
            estimates: &self.est,
            neg2ll: self.neg2ll,
            converged: self.converged,
            iterations: self.iterations,
            grad_norm: self.grad_norm,
            n_subjects: self.eb.len(),
            inner_failures: self.inner_failures,
        };
        serde_json::to_writer_pretty(&mut out, &report)?;
        writeln!(out)?;
        Ok(())
    }

    pub fn write_eb_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["subject_id", "eta_cl", "eta_v"])?;
        for e in &self.eb {
            w.write_record([e.subject_id.to_string(), e.eta_cl.to_string(), e.eta_v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fits the model to an observed dataset using the realized doses.
pub fn fit_nlme(ds: &TrialDataset, init: &PopulationParams, cfg: &LaplaceConfig) -> Result<NlmeFit> {
    ds.require_observed()?;
    init.validate()?;
    cfg.validate()?;
    if ds.subjects.is_empty() {
        return Err(Error::Degenerate("no subjects to fit".into()));
    }
    let data: Vec<SubjectData> = ds.subjects.iter().map(SubjectData::from_record).collect();
    fit_subjects(&data, init, cfg)
}

pub fn fit_subjects(data: &[SubjectData], init: &PopulationParams, cfg: &LaplaceConfig) -> Result<NlmeFit> {
    let n = data.len() as f64;
    let mut failure: Option<Error> = None;
    let f = |x: &[f64]| -> (f64, Vec<f64>) {
        let theta: [f64; 5] = x.try_into().expect("five parameters");
        match objective(&theta, data, cfg, true) {
            Ok(o) => (o.neg2ll / n, o.grad.iter().map(|g| g / n).collect()),
            Err(e) => {
                failure.get_or_insert(e);
                (f64::INFINITY, vec![0.0; 5])
            }
        }
    };
    let bfgs = BfgsConfig {
        grad_tol: cfg.outer_tol,
        max_iters: cfg.max_outer_iters,
        max_step: 1.0,
        f_tol: cfg.outer_ftol,
    };
    let res = minimize_bfgs(f, &init.to_log(), &bfgs);
    if !res.f.is_finite() {
        return Err(failure.unwrap_or_else(|| Error::Degenerate("objective not finite at the start".into())));
    }
    let theta: [f64; 5] = res.x.as_slice().try_into().expect("five parameters");
    let last = objective(&theta, data, cfg, false)?;
    let grad_norm = res.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    // a stalled objective counts when the gradient is within the square root
    // of the tolerance; mode switches of two-mode subjects put a noise floor
    // under the objective
    let converged = res.converged || (res.stalled && grad_norm <= cfg.outer_tol.sqrt());
    if !converged {
        log::warn!("NLME fit stopped after {} outer iterations with gradient norm {grad_norm:.2e}", res.iterations);
    }
    Ok(NlmeFit {
        est: PopulationParams::from_log(&theta),
        eb: data
            .iter()
            .zip(&last.etas)
            .map(|(s, e)| EbEstimate { subject_id: s.id, eta_cl: e[0], eta_v: e[1] })
            .collect(),
        neg2ll: last.neg2ll,
        converged,
        iterations: res.iterations,
        grad_norm,
        inner_failures: last.inner_failures,
        trace: res.trace.iter().map(|v| v * n).collect(),
    })
}

pub fn eb_estimates(fit: &NlmeFit, subject_id: usize) -> Result<(f64, f64)> {
    fit.eb
        .iter()
        .find(|e| e.subject_id == subject_id)
        .map(|e| (e.eta_cl, e.eta_v))
        .ok_or(Error::UnknownSubject(subject_id))
}

/// Standard two-stage start: per-subject least squares of log troughs on the
/// structural model, then moments of the individual log-parameters.
/// Returns `None` if too few subjects could be fitted individually.
pub fn two_stage_init(ds: &TrialDataset) -> Option<PopulationParams> {
    let mut log_cl = Vec::new();
    let mut log_v = Vec::new();
    let mut rss = Vec::new();
    for s in &ds.subjects {
        let data = SubjectData::from_record(s);
        if let Some((u, r)) = individual_log_fit(&data) {
            log_cl.push(u[0]);
            log_v.push(u[1]);
            rss.push(r);
        }
    }
    if log_cl.len() < 10 {
        return None;
    }
    let robust_sd = |x: &[f64]| {
        let m = stats::median(x);
        let dev: Vec<f64> = x.iter().map(|v| (v - m).abs()).collect();
        (1.4826 * stats::median(&dev)).clamp(0.05, 2.0)
    };
    let dof = ds.subjects[0].troughs.len().saturating_sub(2).max(1) as f64;
    let xi = (stats::median(&rss) / dof).sqrt().clamp(1e-3, 1.0);
    Some(PopulationParams {
        mu_cl: stats::median(&log_cl).exp(),
        mu_v: stats::median(&log_v).exp(),
        omega_cl: robust_sd(&log_cl),
        omega_v: robust_sd(&log_v),
        xi,
    })
}

/// Default start: two-stage estimates, falling back to half the reference
/// values.
pub fn default_init(ds: &TrialDataset) -> PopulationParams {
    two_stage_init(ds).unwrap_or_else(|| PopulationParams::reference().scaled(0.5))
}

/// Gauss–Newton on `sum (ln y - ln f)^2` for one subject.
fn individual_log_fit(s: &SubjectData) -> Option<([f64; 2], f64)> {
    let first = s.doses.first()?;
    let y0 = s.obs.first()?.1;
    if !(y0 > 0.0) || s.obs.iter().any(|o| !(o.1 > 0.0)) {
        return None;
    }
    // ballpark: volume from the first trough, one-week half-life
    let v0 = first.amount / y0;
    let k0 = std::f64::consts::LN_2 / 168.0;
    let mut u = [(v0 * k0).ln(), v0.ln()];
    let resid = |u: [f64; 2]| -> Option<(f64, Vec<(f64, [f64; 2])>)> {
        let mut rss = 0.0;
        let mut rows = Vec::new();
        for &(t, y) in &s.obs {
            let d = log_conc_derivs(u[0], u[1], &s.doses, t)?;
            let r = y.ln() - d.g;
            rss += r * r;
            rows.push((r, d.grad()));
        }
        Some((rss, rows))
    };
    let (mut rss, mut rows) = resid(u)?;
    for _ in 0..50 {
        let mut a = [[1e-10, 0.0], [0.0, 1e-10]];
        let mut b = [0.0; 2];
        for (r, g) in &rows {
            for i in 0..2 {
                b[i] += g[i] * r;
                for j in 0..2 {
                    a[i][j] += g[i] * g[j];
                }
            }
        }
        let (ai, _) = inv2(&a)?;
        let mut d = [ai[0][0] * b[0] + ai[0][1] * b[1], ai[1][0] * b[0] + ai[1][1] * b[1]];
        let big = d[0].abs().max(d[1].abs());
        if big > 1.0 {
            d = [d[0] / big, d[1] / big];
        }
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let ut = [u[0] + step * d[0], u[1] + step * d[1]];
            if let Some((rt, rows_t)) = resid(ut) {
                if rt < rss {
                    u = ut;
                    rss = rt;
                    rows = rows_t;
                    improved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved || step * big < 1e-10 {
            break;
        }
    }
    (u[0].is_finite() && u[1].is_finite()).then_some((u, rss))
}

/// Week-8 troughs under full adherence, standardized over the fitted
/// random-effect distribution. Consumes only the population estimates and
/// the planned ladder.
pub fn simulate_counterfactual_nlme(est: &PopulationParams, arm: &Arm, n_draws: usize, seed: u64) -> Vec<f64> {
    let doses = schedule(&arm.ladder);
    (0..n_draws as u64)
        .map(|i| {
            let mut rng = stream(seed, StreamKey::new(arm.id, i, Purpose::NlmeDraw));
            let z_cl: f64 = rng.sample(StandardNormal);
            let z_v: f64 = rng.sample(StandardNormal);
            let z_eps: f64 = rng.sample(StandardNormal);
            let p = individual_params(est, est.omega_cl * z_cl, est.omega_v * z_v);
            apply_residual(conc_linear(&p, &doses, TROUGH_TIMES[3]), est.xi, z_eps)
        })
        .collect()
}

/// Lookup of EB estimates by subject id.
pub fn eb_index(fit: &NlmeFit) -> HashMap<usize, (f64, f64)> {
    fit.eb.iter().map(|e| (e.subject_id, (e.eta_cl, e.eta_v))).collect()
}

/// `-2 ln` of the fixed-effects likelihood of a subject at `eta`, used as the
/// collapsed-prior reference.
pub fn fixed_effects_neg2ll(pop: &PopulationParams, subj: &SubjectData, eta: [f64; 2]) -> f64 {
    let p = individual_params(pop, eta[0], eta[1]);
    subj.obs
        .iter()
        .map(|&(t, y)| {
            let f = conc_linear(&p, &subj.doses, t);
            let sd = pop.xi * f;
            (2.0 * PI).ln() + 2.0 * sd.ln() + ((y - f) / sd).powi(2)
        })
        .sum()
}
