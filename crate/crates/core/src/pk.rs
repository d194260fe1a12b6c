//! One-compartment bolus pharmacokinetics.
//!
//! Concentrations are in mg/L (dose mg / volume L), times in hours since the
//! first dose. A dose at exactly the evaluation time is not yet counted:
//! troughs are sampled immediately before the next administration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HOURS_PER_WEEK: f64 = 168.0;
/// Two weeks between consecutive doses.
pub const DOSE_INTERVAL: f64 = 2.0 * HOURS_PER_WEEK;
/// Dose administrations at weeks 0, 2, 4, 6.
pub const DOSE_TIMES: [f64; 4] = [0.0, DOSE_INTERVAL, 2.0 * DOSE_INTERVAL, 3.0 * DOSE_INTERVAL];
/// Trough assessments at weeks 2, 4, 6, 8.
pub const TROUGH_TIMES: [f64; 4] = [
    DOSE_INTERVAL,
    2.0 * DOSE_INTERVAL,
    3.0 * DOSE_INTERVAL,
    4.0 * DOSE_INTERVAL,
];
/// Lower bound applied to observed exposures after residual error.
pub const EXPOSURE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseEvent {
    /// Hours since first dose.
    pub time: f64,
    /// mg
    pub amount: f64,
}

impl DoseEvent {
    pub fn new(time: f64, amount: f64) -> Self {
        Self { time, amount }
    }
}

/// Builds the bolus schedule at [`DOSE_TIMES`] from per-step amounts.
pub fn schedule(amounts: &[f64; 4]) -> [DoseEvent; 4] {
    std::array::from_fn(|k| DoseEvent::new(DOSE_TIMES[k], amounts[k]))
}

/// Checks the schedule invariants: nonnegative times and amounts, strictly
/// increasing times.
pub fn validate_schedule(doses: &[DoseEvent]) -> Result<()> {
    for d in doses {
        if !(d.time >= 0.0) || !(d.amount >= 0.0) {
            return Err(Error::InvalidParameter(format!("invalid dose event {d:?}")));
        }
    }
    if doses.windows(2).any(|w| w[1].time <= w[0].time) {
        return Err(Error::InvalidParameter(
            "dose times must be strictly increasing".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PKParams {
    /// Apparent clearance, L/h.
    pub cl: f64,
    /// Apparent volume, L.
    pub v: f64,
}

impl PKParams {
    pub fn elimination_rate(&self) -> f64 {
        self.cl / self.v
    }
}

/// Population parameters of the lognormal one-compartment model.
///
/// `mu_cl` and `mu_v` are typical values on the natural scale; individual
/// parameters are `mu * exp(eta)` with `eta ~ N(0, omega^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationParams {
    pub mu_cl: f64,
    pub mu_v: f64,
    pub omega_cl: f64,
    pub omega_v: f64,
    /// Proportional residual SD.
    pub xi: f64,
}

impl PopulationParams {
    /// The simulation values used for the titration trial.
    pub fn reference() -> Self {
        Self {
            mu_cl: 0.0025,
            mu_v: 2.0,
            omega_cl: 0.3,
            omega_v: 0.3,
            xi: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.mu_cl, self.mu_v, self.omega_cl, self.omega_v, self.xi];
        if all.iter().all(|x| x.is_finite() && *x > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "population parameters must be positive: {self:?}"
            )))
        }
    }

    /// `[ln mu_cl, ln mu_v, ln omega_cl, ln omega_v, ln xi]`
    pub fn to_log(&self) -> [f64; 5] {
        [
            self.mu_cl.ln(),
            self.mu_v.ln(),
            self.omega_cl.ln(),
            self.omega_v.ln(),
            self.xi.ln(),
        ]
    }

    pub fn from_log(p: &[f64]) -> Self {
        Self {
            mu_cl: p[0].exp(),
            mu_v: p[1].exp(),
            omega_cl: p[2].exp(),
            omega_v: p[3].exp(),
            xi: p[4].exp(),
        }
    }

    /// Multiplies every parameter by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            mu_cl: self.mu_cl * factor,
            mu_v: self.mu_v * factor,
            omega_cl: self.omega_cl * factor,
            omega_v: self.omega_v * factor,
            xi: self.xi * factor,
        }
    }
}

/// Michaelis–Menten elimination: `dC/dt = -(vmax/v) * C / (km + C)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MMParams {
    /// mg/h
    pub vmax: f64,
    /// mg/L
    pub km: f64,
    /// L
    pub v: f64,
}

impl MMParams {
    /// Default saturable-elimination stand-in: low-concentration clearance
    /// `vmax / km` equals the linear model's 0.0025 L/h.
    pub fn reference() -> Self {
        let km = 30.0;
        Self {
            vmax: 0.0025 * km,
            km,
            v: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.vmax, self.km, self.v].iter().all(|x| x.is_finite() && *x > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "Michaelis-Menten parameters must be positive: {self:?}"
            )))
        }
    }
}

/// Superposition of bolus doses given strictly before `t`.
pub fn conc_linear(params: &PKParams, doses: &[DoseEvent], t: f64) -> f64 {
    let k = params.elimination_rate();
    doses
        .iter()
        .take_while(|d| d.time < t)
        .map(|d| d.amount * (-k * (t - d.time)).exp())
        .sum::<f64>()
        / params.v
}

/// Michaelis–Menten concentration at `t` by fixed-step RK4 between dose
/// events, each bolus applied as an instantaneous jump of `amount / v`.
///
/// The step is shrunk per segment so that every segment is covered by a
/// whole number of equal steps no longer than `step`.
pub fn conc_mm(params: &MMParams, doses: &[DoseEvent], t: f64, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {step}")));
    }
    if let Some(gap) = doses
        .windows(2)
        .map(|w| w[1].time - w[0].time)
        .min_by(|a, b| a.total_cmp(b))
    {
        if step > gap {
            return Err(Error::StepTooLarge { step, gap });
        }
    }
    let rate = params.vmax / params.v;
    let km = params.km;
    let deriv = |c: f64| -rate * c / (km + c);

    let mut c = 0.0;
    let mut now = 0.0;
    let given: Vec<&DoseEvent> = doses.iter().take_while(|d| d.time < t).collect();
    for (i, dose) in given.iter().enumerate() {
        c = rk4(c, dose.time - now, step, &deriv);
        c += dose.amount / params.v;
        now = dose.time;
        if i + 1 == given.len() {
            c = rk4(c, t - now, step, &deriv);
        }
    }
    Ok(c.max(0.0))
}

fn rk4(mut c: f64, span: f64, step: f64, f: &impl Fn(f64) -> f64) -> f64 {
    if span <= 0.0 {
        return c;
    }
    let n = (span / step).ceil().max(1.0) as usize;
    let h = span / n as f64;
    for _ in 0..n {
        let k1 = f(c);
        let k2 = f(c + 0.5 * h * k1);
        let k3 = f(c + 0.5 * h * k2);
        let k4 = f(c + h * k3);
        c += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    c
}

pub fn individual_params(pop: &PopulationParams, eta_cl: f64, eta_v: f64) -> PKParams {
    PKParams {
        cl: pop.mu_cl * eta_cl.exp(),
        v: pop.mu_v * eta_v.exp(),
    }
}

/// Individual saturable parameters: the clearance effect scales `vmax`, the
/// volume effect scales `v`.
pub fn individual_mm(mm: &MMParams, eta_cl: f64, eta_v: f64) -> MMParams {
    MMParams {
        vmax: mm.vmax * eta_cl.exp(),
        km: mm.km,
        v: mm.v * eta_v.exp(),
    }
}

/// Proportional residual error `conc * (1 + xi * eps)`, floored at
/// [`EXPOSURE_FLOOR`].
pub fn apply_residual(conc: f64, xi: f64, eps: f64) -> f64 {
    (conc * (1.0 + xi * eps)).max(EXPOSURE_FLOOR)
}

/// `g = ln f` of the linear model and its derivatives with respect to
/// `u = (ln cl, ln v)`.
///
/// With `c = ln cl - ln v`, `g = -ln v + h(c)` where
/// `h(c) = ln sum_k D_k exp(-e^c (t - t_k))`, so every second and third
/// derivative of `g` is `h''` or `h'''` times a `(1, -1)` sign pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogConcDerivs {
    pub g: f64,
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
}

impl LogConcDerivs {
    /// Gradient of `g` in `(ln cl, ln v)`.
    pub fn grad(&self) -> [f64; 2] {
        [self.h1, -1.0 - self.h1]
    }
}

/// Sign pattern of the higher derivatives of `g`.
pub const SIGN: [f64; 2] = [1.0, -1.0];

/// Returns `None` when no dose precedes `t` (concentration is zero).
pub fn log_conc_derivs(log_cl: f64, log_v: f64, doses: &[DoseEvent], t: f64) -> Option<LogConcDerivs> {
    let kc = (log_cl - log_v).exp();
    // Shift by the smallest exponent so the leading term is O(1).
    let mut x_min = f64::INFINITY;
    for d in doses.iter().take_while(|d| d.time < t) {
        if d.amount > 0.0 {
            x_min = x_min.min(kc * (t - d.time));
        }
    }
    if !x_min.is_finite() {
        return None;
    }
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for d in doses.iter().take_while(|d| d.time < t) {
        if d.amount <= 0.0 {
            continue;
        }
        let x = kc * (t - d.time);
        let w = d.amount * (-(x - x_min)).exp();
        s0 += w;
        s1 -= w * x;
        s2 += w * (x * x - x);
        s3 += w * (-x * x * x + 3.0 * x * x - x);
    }
    let r1 = s1 / s0;
    let r2 = s2 / s0;
    let r3 = s3 / s0;
    Some(LogConcDerivs {
        g: -log_v + s0.ln() - x_min,
        h1: r1,
        h2: r2 - r1 * r1,
        h3: r3 - 3.0 * r2 * r1 + 2.0 * r1 * r1 * r1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn typical() -> PKParams {
        PKParams { cl: 0.0025, v: 2.0 }
    }

    fn arm5() -> [DoseEvent; 4] {
        schedule(&[60.0, 240.0, 240.0, 240.0])
    }

    #[test]
    fn no_dose_is_zero() {
        assert_eq!(conc_linear(&typical(), &[], 100.0), 0.0);
    }

    #[test]
    fn bolus_right_after_dose() {
        let c = conc_linear(&typical(), &[DoseEvent::new(0.0, 30.0)], 1e-9);
        assert!((c - 15.0).abs() < 1e-8);
        // dose at the evaluation time is not yet given
        assert_eq!(conc_linear(&typical(), &[DoseEvent::new(0.0, 30.0)], 0.0), 0.0);
    }

    #[test]
    fn week8_trough_arm5() {
        // Oracle: term-by-term with exponents -1.68, -1.26, -0.84, -0.42.
        let oracle = (60.0 * (-1.68f64).exp()
            + 240.0 * (-1.26f64).exp()
            + 240.0 * (-0.84f64).exp()
            + 240.0 * (-0.42f64).exp())
            / 2.0;
        assert!((oracle - 170.28).abs() < 0.01, "oracle {oracle}");
        let c = conc_linear(&typical(), &arm5(), 1344.0);
        assert!((c - oracle).abs() < 1e-10);
    }

    #[test]
    fn mm_without_doses() {
        assert_eq!(conc_mm(&MMParams::reference(), &[], 500.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn mm_linear_limit() {
        let km = 1e6;
        let mm = MMParams {
            vmax: 0.0025 * km,
            km,
            v: 2.0,
        };
        let lin = conc_linear(&typical(), &arm5(), 1344.0);
        let c = conc_mm(&mm, &arm5(), 1344.0, 1.0).unwrap();
        assert!(((c - lin) / lin).abs() < 1e-3, "{c} vs {lin}");
    }

    #[test]
    fn mm_self_convergence() {
        let mm = MMParams::reference();
        let a = conc_mm(&mm, &arm5(), 1344.0, 2.0).unwrap();
        let b = conc_mm(&mm, &arm5(), 1344.0, 1.0).unwrap();
        assert!(((a - b) / b).abs() < 1e-4);
    }

    #[test]
    fn mm_rejects_coarse_step() {
        let err = conc_mm(&MMParams::reference(), &arm5(), 1344.0, 400.0);
        assert!(matches!(err, Err(Error::StepTooLarge { .. })));
        assert!(conc_mm(&MMParams::reference(), &arm5(), 1344.0, 0.0).is_err());
    }

    #[test]
    fn mm_saturates_above_linear() {
        // Clearance falls at high concentration, so MM exposure is higher.
        let lin = conc_linear(&typical(), &arm5(), 1344.0);
        let c = conc_mm(&MMParams::reference(), &arm5(), 1344.0, 1.0).unwrap();
        assert!(c > lin);
    }

    #[test]
    fn individual_mapping() {
        let pop = PopulationParams::reference();
        let p = individual_params(&pop, 0.0, 0.0);
        assert_eq!((p.cl, p.v), (0.0025, 2.0));
        assert!((individual_params(&pop, 0.3, 0.0).cl - 0.00337465).abs() < 1e-8);
        assert!((individual_params(&pop, 0.0, -0.3).v - 1.48164).abs() < 1e-5);
    }

    #[test]
    fn residual_examples() {
        assert_eq!(apply_residual(100.0, 0.02, 0.0), 100.0);
        assert!((apply_residual(100.0, 0.02, 1.0) - 102.0).abs() < 1e-12);
        assert_eq!(apply_residual(100.0, 0.3, -4.0), 1e-6);
    }

    #[test]
    fn schedule_validation() {
        assert!(validate_schedule(&arm5()).is_ok());
        let bad = [DoseEvent::new(0.0, 1.0), DoseEvent::new(0.0, 1.0)];
        assert!(validate_schedule(&bad).is_err());
        assert!(validate_schedule(&[DoseEvent::new(-1.0, 1.0)]).is_err());
    }

    #[test]
    fn log_conc_derivatives_match_finite_differences() {
        let doses = arm5();
        let t = 1344.0;
        let (a, b) = (0.0025f64.ln() + 0.2, 2f64.ln() - 0.1);
        let g = |a: f64, b: f64| log_conc_derivs(a, b, &doses, t).unwrap();
        let d = g(a, b);
        let direct = conc_linear(
            &PKParams {
                cl: a.exp(),
                v: b.exp(),
            },
            &doses,
            t,
        )
        .ln();
        assert!((d.g - direct).abs() < 1e-12);
        let h = 1e-4;
        // along c = a - b with b fixed, d/da g = h'
        let fd1 = (g(a + h, b).g - g(a - h, b).g) / (2.0 * h);
        let fd2 = (g(a + h, b).h1 - g(a - h, b).h1) / (2.0 * h);
        let fd3 = (g(a + h, b).h2 - g(a - h, b).h2) / (2.0 * h);
        assert!((fd1 - d.h1).abs() < 1e-7);
        assert!((fd2 - d.h2).abs() < 1e-7);
        assert!((fd3 - d.h3).abs() < 1e-7);
        let fdb = (g(a, b + h).g - g(a, b - h).g) / (2.0 * h);
        assert!((fdb - d.grad()[1]).abs() < 1e-7);
    }

    fn dose_list() -> impl Strategy<Value = Vec<DoseEvent>> {
        prop::collection::vec((0.0f64..2000.0, 0.0f64..500.0), 0..6).prop_map(|mut v| {
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            v.dedup_by(|a, b| a.0 == b.0);
            v.into_iter().map(|(t, a)| DoseEvent::new(t, a)).collect()
        })
    }

    proptest! {
        #[test]
        fn superposition(a in dose_list(), b in dose_list(), t in 0.0f64..3000.0,
                         cl in 1e-4f64..0.05, v in 0.5f64..10.0) {
            let p = PKParams { cl, v };
            let mut both: Vec<DoseEvent> = a.iter().chain(b.iter()).copied().collect();
            both.sort_by(|x, y| x.time.total_cmp(&y.time));
            let lhs = conc_linear(&p, &both, t);
            let rhs = conc_linear(&p, &a, t) + conc_linear(&p, &b, t);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }

        #[test]
        fn dose_scaling(a in dose_list(), t in 0.0f64..3000.0) {
            let p = typical();
            let doubled: Vec<DoseEvent> = a.iter().map(|d| DoseEvent::new(d.time, 2.0 * d.amount)).collect();
            let c = conc_linear(&p, &a, t);
            prop_assert!((conc_linear(&p, &doubled, t) - 2.0 * c).abs() <= 1e-9 * (1.0 + c));
        }

        #[test]
        fn monotone_decay(a in dose_list(), t1 in 2000.0f64..2500.0, dt in 0.0f64..500.0) {
            // all doses precede t1, so nothing is given in (t1, t2]
            let p = typical();
            let c1 = conc_linear(&p, &a, t1);
            let c2 = conc_linear(&p, &a, t1 + dt);
            let expect = c1 * (-p.elimination_rate() * dt).exp();
            prop_assert!((c2 - expect).abs() <= 1e-9 * (1.0 + c1));
        }
    }
}
