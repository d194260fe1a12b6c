//! Five-arm up-titration trial with treatment-confounder feedback.
//!
//! Each subject starts on the first rung of the arm's dose ladder. At weeks
//! 2, 4 and 6 a trough is measured; high exposure raises the probability of
//! an intercurrent event (IE), which repeats the current dose instead of
//! moving up the ladder. The trough at week 8 is the outcome.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pk::{
    self, apply_residual, conc_linear, conc_mm, individual_mm, individual_params, DoseEvent,
    MMParams, PopulationParams, DOSE_TIMES, TROUGH_TIMES,
};
use crate::rng::{stream, Purpose, StreamKey};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub id: u8,
    /// Planned doses (mg) at weeks 0, 2, 4, 6.
    pub ladder: [f64; 4],
}

pub const ARMS: [Arm; 5] = [
    Arm { id: 1, ladder: [30.0, 60.0, 60.0, 60.0] },
    Arm { id: 2, ladder: [30.0, 60.0, 120.0, 120.0] },
    Arm { id: 3, ladder: [60.0, 120.0, 120.0, 120.0] },
    Arm { id: 4, ladder: [60.0, 120.0, 240.0, 240.0] },
    Arm { id: 5, ladder: [60.0, 240.0, 240.0, 240.0] },
];

pub fn arm(id: u8) -> Result<Arm> {
    ARMS.iter().find(|a| a.id == id).copied().ok_or(Error::UnknownArm(id))
}

/// Planned dose of `arm_id` at `step` (1-based).
pub fn planned_dose(arm_id: u8, step: usize) -> Result<f64> {
    let a = arm(arm_id)?;
    if !(1..=4).contains(&step) {
        return Err(Error::InvalidParameter(format!("dose step must be 1..=4, got {step}")));
    }
    Ok(a.ladder[step - 1])
}

/// `invlogit(beta * ln(exposure / alpha))`.
pub fn ie_probability(exposure: f64, alpha: f64, beta: f64) -> Result<f64> {
    Ok(1.0 / (1.0 + (-ie_logit(exposure, alpha, beta)?).exp()))
}

/// `1 - ie_probability`, computed without cancellation.
pub fn adherence_probability(exposure: f64, alpha: f64, beta: f64) -> Result<f64> {
    Ok(1.0 / (1.0 + ie_logit(exposure, alpha, beta)?.exp()))
}

fn ie_logit(exposure: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(exposure > 0.0) || !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "IE probability needs positive exposure and threshold, got {exposure}, {alpha}"
        )));
    }
    Ok(beta * (exposure / alpha).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Main,
    /// Saturable (Michaelis–Menten) elimination in the data-generating model.
    Nonlinear,
    /// IE driven by the unobserved peak concentration.
    Cmax,
    /// Main with proportional residual SD 0.3.
    HighRes,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Main, Variant::Nonlinear, Variant::Cmax, Variant::HighRes];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Main => "main",
            Variant::Nonlinear => "nonlinear",
            Variant::Cmax => "cmax",
            Variant::HighRes => "highres",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown scenario '{s}'")))
    }
}

/// Which assessments can produce an intercurrent event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IeScope {
    /// Only while the next ladder dose is higher than the current one; an
    /// adverse event at the target dose does not change treatment.
    Pending,
    /// At every assessment, whether or not an up-titration is due.
    Always,
}

impl FromStr for IeScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pending" => Ok(IeScope::Pending),
            "always" => Ok(IeScope::Always),
            _ => Err(Error::Parse(format!("unknown IE scope '{s}'"))),
        }
    }
}

/// IE driver in the cmax variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CmaxDriver {
    /// True concentration right after the latest dose, including accumulation.
    Peak,
    /// Latest dose over individual volume only.
    Dose,
}

impl FromStr for CmaxDriver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "peak" => Ok(CmaxDriver::Peak),
            "dose" => Ok(CmaxDriver::Dose),
            _ => Err(Error::Parse(format!("unknown cmax driver '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub variant: Variant,
    pub n_per_arm: usize,
    pub seed: u64,
    /// IE slope.
    pub beta: f64,
    /// IE thresholds at weeks 2, 4, 6 (mg/L). Ignored by the cmax variant,
    /// which derives its thresholds from a pilot.
    pub alphas: [f64; 3],
    pub pop: PopulationParams,
    /// Used iff `variant == Nonlinear`.
    pub mm: MMParams,
    /// RK4 step for the saturable model, hours.
    pub mm_step: f64,
    pub ie_scope: IeScope,
    pub cmax_driver: CmaxDriver,
    /// Multiplier on `beta` (more or fewer IEs).
    pub beta_scale: f64,
    /// Additive shift on every threshold, mg/L.
    pub alpha_shift: f64,
}

impl Scenario {
    pub fn new(variant: Variant) -> Self {
        let mut pop = PopulationParams::reference();
        if variant == Variant::HighRes {
            pop.xi = 0.3;
        }
        Self {
            variant,
            n_per_arm: 5000,
            seed: 1,
            beta: 5.0,
            alphas: [15.0, 40.0, 100.0],
            pop,
            mm: MMParams::reference(),
            mm_step: 1.0,
            ie_scope: IeScope::Pending,
            cmax_driver: CmaxDriver::Peak,
            beta_scale: 1.0,
            alpha_shift: 0.0,
        }
    }

    pub fn with_n(mut self, n_per_arm: usize) -> Self {
        self.n_per_arm = n_per_arm;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn effective_beta(&self) -> f64 {
        self.beta * self.beta_scale
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_arm == 0 {
            return Err(Error::InvalidParameter("n_per_arm must be at least 1".into()));
        }
        if !(self.effective_beta() >= 0.0) || !self.effective_beta().is_finite() {
            return Err(Error::InvalidParameter(format!("beta must be >= 0, got {}", self.beta)));
        }
        let a = self.alphas.map(|x| x + self.alpha_shift);
        if !(a[0] > 0.0 && a[0] < a[1] && a[1] < a[2]) {
            return Err(Error::InvalidParameter(format!(
                "thresholds must be positive and strictly increasing, got {a:?}"
            )));
        }
        if !(self.mm_step > 0.0) {
            return Err(Error::InvalidParameter("mm_step must be positive".into()));
        }
        let p = &self.pop;
        let spreads_ok = [p.omega_cl, p.omega_v, p.xi].iter().all(|x| x.is_finite() && *x >= 0.0);
        if !(p.mu_cl > 0.0 && p.mu_v > 0.0 && spreads_ok) {
            return Err(Error::InvalidParameter(format!(
                "typical values must be positive and spreads non-negative: {p:?}"
            )));
        }
        self.mm.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Observed,
    GroundTruth,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Observed => "observed",
            Regime::GroundTruth => "ground_truth",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: usize,
    pub arm: u8,
    pub eta_cl: f64,
    pub eta_v: f64,
    /// Administered doses (mg) at weeks 0, 2, 4, 6.
    pub doses: [f64; 4],
    /// Observed troughs (mg/L) at weeks 2, 4, 6, 8.
    pub troughs: [f64; 4],
    /// IEs at weeks 2, 4, 6.
    pub ie: [bool; 3],
    pub adherent: bool,
}

impl SubjectRecord {
    pub fn dose_events(&self) -> [DoseEvent; 4] {
        pk::schedule(&self.doses)
    }

    pub fn week8(&self) -> f64 {
        self.troughs[3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    pub scenario: Scenario,
    pub subjects: Vec<SubjectRecord>,
    pub regime: Regime,
}

impl TrialDataset {
    pub fn arm_subjects(&self, arm_id: u8) -> impl Iterator<Item = &SubjectRecord> {
        self.subjects.iter().filter(move |s| s.arm == arm_id)
    }

    pub fn week8(&self, arm_id: u8) -> Vec<f64> {
        self.arm_subjects(arm_id).map(|s| s.week8()).collect()
    }

    pub fn require_observed(&self) -> Result<()> {
        match self.regime {
            Regime::Observed => Ok(()),
            r => Err(Error::Regime(r.as_str())),
        }
    }
}

/// Whether an up-titration is due with the ladder pointer at `pointer`.
pub fn up_titration_pending(ladder: &[f64; 4], pointer: usize) -> bool {
    pointer < 3 && ladder[pointer + 1] > ladder[pointer]
}

/// Whether an IE can occur at an assessment with the ladder pointer at
/// `pointer`.
pub fn at_risk(scope: IeScope, ladder: &[f64; 4], pointer: usize) -> bool {
    match scope {
        IeScope::Always => true,
        IeScope::Pending => up_titration_pending(ladder, pointer),
    }
}

/// Administered doses for a given IE history. The ladder pointer only
/// advances on assessments without an IE; an IE repeats the current dose.
pub fn realized_doses(ladder: &[f64; 4], ie: &[bool; 3]) -> [f64; 4] {
    let mut pointer = 0;
    let mut doses = [ladder[0]; 4];
    for (w, &s) in ie.iter().enumerate() {
        if !s {
            pointer = (pointer + 1).min(3);
        }
        doses[w + 1] = ladder[pointer];
    }
    doses
}

/// Ladder pointer in effect at each of the three assessments.
pub fn pointers(ie: &[bool; 3]) -> [usize; 3] {
    let mut p = [0usize; 3];
    for w in 1..3 {
        p[w] = (p[w - 1] + usize::from(!ie[w - 1])).min(3);
    }
    p
}

/// Scenario prepared for simulation: thresholds resolved (the cmax variant
/// needs a pilot run for them).
#[derive(Debug, Clone)]
pub struct Simulator {
    scenario: Scenario,
    thresholds: [f64; 3],
}

impl Simulator {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let mut sim = Self {
            scenario: scenario.clone(),
            thresholds: scenario.alphas.map(|a| a + scenario.alpha_shift),
        };
        if scenario.variant == Variant::Cmax {
            sim.thresholds = sim.pilot_peak_medians()?.map(|a| a + scenario.alpha_shift);
        }
        Ok(sim)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Thresholds applied to the IE driver.
    pub fn thresholds(&self) -> [f64; 3] {
        self.thresholds
    }

    /// Median IE driver per assessment over all arms of the confounding-free
    /// (planned-dose) regime of this scenario.
    fn pilot_peak_medians(&self) -> Result<[f64; 3]> {
        let n = self.scenario.n_per_arm;
        let mut peaks: [Vec<f64>; 3] = Default::default();
        for a in &ARMS {
            for i in 0..n {
                let (eta_cl, eta_v) = self.draw_eta(a.id, i as u64);
                let doses = pk::schedule(&a.ladder);
                for (w, v) in peaks.iter_mut().enumerate() {
                    v.push(self.driver_peak(&doses, w, eta_cl, eta_v)?);
                }
            }
        }
        Ok(std::array::from_fn(|w| stats::median(&peaks[w])))
    }

    fn draw_eta(&self, arm: u8, index: u64) -> (f64, f64) {
        let mut rng = stream(self.scenario.seed, StreamKey::new(arm, index, Purpose::Eta));
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        (self.scenario.pop.omega_cl * z1, self.scenario.pop.omega_v * z2)
    }

    fn draw_normal(&self, arm: u8, index: u64, purpose: Purpose) -> f64 {
        stream(self.scenario.seed, StreamKey::new(arm, index, purpose)).sample(StandardNormal)
    }

    fn draw_uniform(&self, arm: u8, index: u64, week: u8) -> f64 {
        stream(self.scenario.seed, StreamKey::new(arm, index, Purpose::Ie(week))).random()
    }

    /// True concentration at `t` given the first `given` doses.
    fn true_conc(&self, doses: &[DoseEvent], t: f64, eta_cl: f64, eta_v: f64) -> Result<f64> {
        let s = &self.scenario;
        match s.variant {
            Variant::Nonlinear => conc_mm(&individual_mm(&s.mm, eta_cl, eta_v), doses, t, s.mm_step),
            _ => Ok(conc_linear(&individual_params(&s.pop, eta_cl, eta_v), doses, t)),
        }
    }

    fn volume(&self, eta_v: f64) -> f64 {
        match self.scenario.variant {
            Variant::Nonlinear => self.scenario.mm.v * eta_v.exp(),
            _ => self.scenario.pop.mu_v * eta_v.exp(),
        }
    }

    /// Peak right after the dose opening the interval that ends at
    /// assessment `week`.
    fn driver_peak(&self, doses: &[DoseEvent], week: usize, eta_cl: f64, eta_v: f64) -> Result<f64> {
        let bolus = doses[week].amount / self.volume(eta_v);
        Ok(match self.scenario.cmax_driver {
            CmaxDriver::Dose => bolus,
            CmaxDriver::Peak => self.true_conc(&doses[..week], DOSE_TIMES[week], eta_cl, eta_v)? + bolus,
        })
    }

    /// Simulates subject `index` of `arm`. The ground-truth regime reuses the
    /// same random effects and residuals but never has an IE.
    pub fn simulate_subject(&self, arm: &Arm, index: u64, regime: Regime) -> Result<SubjectRecord> {
        let s = &self.scenario;
        let (eta_cl, eta_v) = self.draw_eta(arm.id, index);
        let beta = s.effective_beta();

        let mut doses = pk::schedule(&arm.ladder);
        let mut troughs = [0.0; 4];
        let mut ie = [false; 3];
        let mut pointer = 0usize;
        for w in 0..3 {
            let true_trough = self.true_conc(&doses[..=w], TROUGH_TIMES[w], eta_cl, eta_v)?;
            let eps = self.draw_normal(arm.id, index, Purpose::Eps(w as u8));
            troughs[w] = apply_residual(true_trough, s.pop.xi, eps);

            let u = self.draw_uniform(arm.id, index, w as u8);
            if regime == Regime::Observed && at_risk(s.ie_scope, &arm.ladder, pointer) {
                let driver = match s.variant {
                    Variant::Cmax => self.driver_peak(&doses, w, eta_cl, eta_v)?,
                    _ => troughs[w],
                };
                ie[w] = u < ie_probability(driver, self.thresholds[w], beta)?;
            }
            if !ie[w] {
                pointer = (pointer + 1).min(3);
            }
            doses[w + 1].amount = arm.ladder[pointer];
        }
        let eps = self.draw_normal(arm.id, index, Purpose::Eps(3));
        troughs[3] = apply_residual(self.true_conc(&doses, TROUGH_TIMES[3], eta_cl, eta_v)?, s.pop.xi, eps);

        let n = s.n_per_arm;
        Ok(SubjectRecord {
            subject_id: (arm.id as usize - 1) * n + index as usize,
            arm: arm.id,
            eta_cl,
            eta_v,
            doses: doses.map(|d| d.amount),
            troughs,
            ie,
            adherent: !ie.iter().any(|&x| x),
        })
    }

    pub fn simulate(&self, regime: Regime) -> Result<TrialDataset> {
        let n = self.scenario.n_per_arm;
        let jobs: Vec<(Arm, u64)> = ARMS
            .iter()
            .flat_map(|a| (0..n as u64).map(move |i| (*a, i)))
            .collect();
        let subjects = jobs
            .par_iter()
            .map(|(a, i)| self.simulate_subject(a, *i, regime))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrialDataset {
            scenario: self.scenario.clone(),
            subjects,
            regime,
        })
    }
}

pub fn simulate_trial(scenario: &Scenario) -> Result<TrialDataset> {
    Simulator::new(scenario)?.simulate(Regime::Observed)
}

pub fn simulate_ground_truth(scenario: &Scenario) -> Result<TrialDataset> {
    Simulator::new(scenario)?.simulate(Regime::GroundTruth)
}

/// Subjects without any IE.
pub fn per_protocol_filter(ds: &TrialDataset) -> TrialDataset {
    TrialDataset {
        scenario: ds.scenario.clone(),
        subjects: ds.subjects.iter().filter(|s| s.adherent).cloned().collect(),
        regime: ds.regime,
    }
}

pub const DATASET_HEADER: [&str; 16] = [
    "subject_id", "arm", "eta_cl", "eta_v", "d1", "d2", "d3", "d4", "e1", "e2", "e3", "e4", "s1",
    "s2", "s3", "adherent",
];

pub fn write_dataset_csv<W: Write>(ds: &TrialDataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(DATASET_HEADER)?;
    for s in &ds.subjects {
        let mut rec: Vec<String> = vec![s.subject_id.to_string(), s.arm.to_string(), s.eta_cl.to_string(), s.eta_v.to_string()];
        rec.extend(s.doses.iter().map(|d| d.to_string()));
        rec.extend(s.troughs.iter().map(|e| e.to_string()));
        rec.extend(s.ie.iter().map(|&b| u8::from(b).to_string()));
        rec.push(u8::from(s.adherent).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset_csv`]. The CSV carries no
/// scenario metadata, so the caller supplies it.
pub fn read_dataset_csv<R: Read>(input: R, scenario: Scenario, regime: Regime) -> Result<TrialDataset> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != DATASET_HEADER {
        return Err(Error::Parse(format!("unexpected dataset header {header:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("'{s}': {e}")));
    let flag = |s: &str| match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::Parse(format!("expected 0/1, got '{s}'"))),
    };
    let mut subjects = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let arm_id: u8 = f(1).parse().map_err(|e| Error::Parse(format!("arm: {e}")))?;
        arm(arm_id)?;
        subjects.push(SubjectRecord {
            subject_id: f(0).parse().map_err(|e| Error::Parse(format!("subject_id: {e}")))?,
            arm: arm_id,
            eta_cl: num(f(2))?,
            eta_v: num(f(3))?,
            doses: [num(f(4))?, num(f(5))?, num(f(6))?, num(f(7))?],
            troughs: [num(f(8))?, num(f(9))?, num(f(10))?, num(f(11))?],
            ie: [flag(f(12))?, flag(f(13))?, flag(f(14))?],
            adherent: flag(f(15))?,
        });
    }
    Ok(TrialDataset {
        scenario,
        subjects,
        regime,
    })
}
