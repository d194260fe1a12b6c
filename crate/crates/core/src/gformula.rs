//! Sequential parametric standardization (longitudinal g-formula).
//!
//! Per arm, the first trough is lognormal after dose normalization and each
//! later trough is linear in the dose-scaled first-trough exposure
//! `D_tau * E_1 / D_1`, with a residual scale that depends on the last two
//! doses. Models for trough `t` are fitted on subjects without an IE before
//! `t`, so the realized doses equal the planned ladder. Sampling chains the
//! models forward under the planned doses.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, StreamKey};
use crate::stats;
use crate::trial::{Arm, SubjectRecord, TrialDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct E1Model {
    /// Mean of `ln(E_1 / D_1)`.
    pub beta0: f64,
    /// SD of `ln(E_1 / D_1)`.
    pub gamma0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub prev_dose: f64,
    pub dose: f64,
    pub n: usize,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondModel {
    /// Trough index, 2..=4.
    pub t: usize,
    /// Intercept, then one coefficient per dose `D_1..D_t` times `E_norm`.
    pub beta: Vec<f64>,
    pub strata: Vec<Stratum>,
    pub r_squared: f64,
    pub n_fit: usize,
}

impl CondModel {
    pub fn regressors(t: usize, doses: &[f64], e_norm: f64) -> Vec<f64> {
        std::iter::once(1.0).chain(doses[..t].iter().map(|d| d * e_norm)).collect()
    }

    pub fn mean(&self, doses: &[f64], e_norm: f64) -> f64 {
        Self::regressors(self.t, doses, e_norm)
            .iter()
            .zip(&self.beta)
            .map(|(x, b)| x * b)
            .sum()
    }

    pub fn scale(&self, prev_dose: f64, dose: f64) -> Option<f64> {
        self.strata
            .iter()
            .find(|s| s.prev_dose == prev_dose && s.dose == dose)
            .map(|s| s.sd)
    }
}

fn e_norm(s: &SubjectRecord) -> f64 {
    s.troughs[0] / s.doses[0]
}

/// Subjects of `arm_id` with no IE at the assessments before trough `t`.
fn adherent_before(ds: &TrialDataset, arm_id: u8, t: usize) -> Vec<&SubjectRecord> {
    ds.arm_subjects(arm_id)
        .filter(|s| s.ie[..t - 1].iter().all(|&x| !x))
        .collect()
}

pub fn fit_e1_model(ds: &TrialDataset, arm_id: u8) -> Result<E1Model> {
    ds.require_observed()?;
    let x: Vec<f64> = ds.arm_subjects(arm_id).map(|s| e_norm(s).ln()).collect();
    if x.len() < 2 {
        return Err(Error::TooFewSubjects { arm: arm_id, found: x.len() });
    }
    let beta0 = stats::mean(&x);
    let gamma0 = stats::sample_sd(&x);
    // identical values leave only rounding noise in the SD
    if !(gamma0 > 1e-12 * beta0.abs().max(1.0)) {
        return Err(Error::Degenerate(format!("arm {arm_id}: first-trough scale is zero")));
    }
    Ok(E1Model { beta0, gamma0 })
}

pub fn fit_cond_model(ds: &TrialDataset, arm_id: u8, t: usize) -> Result<CondModel> {
    ds.require_observed()?;
    if !(2..=4).contains(&t) {
        return Err(Error::InvalidParameter(format!("trough index must be 2..=4, got {t}")));
    }
    let subjects = adherent_before(ds, arm_id, t);
    if subjects.len() < 2 {
        return Err(Error::TooFewSubjects { arm: arm_id, found: subjects.len() });
    }
    let p = t + 1;
    let x = DMatrix::from_fn(subjects.len(), p, |i, j| {
        CondModel::regressors(t, &subjects[i].doses, e_norm(subjects[i]))[j]
    });
    let y = DVector::from_iterator(subjects.len(), subjects.iter().map(|s| s.troughs[t - 1]));
    // doses are constant within an arm, so the dose columns are collinear;
    // the SVD solve returns the minimum-norm coefficients
    let svd = x.clone().svd(true, true);
    let tol = 1e-10 * svd.singular_values.max();
    let beta = svd
        .solve(&y, tol)
        .map_err(|e| Error::Degenerate(format!("arm {arm_id}, trough {t}: {e}")))?;
    let resid = &y - &x * &beta;

    let ybar = y.mean();
    let sst: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let ssr = resid.norm_squared();
    let r_squared = if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 };

    let mut groups: Vec<((f64, f64), Vec<f64>)> = Vec::new();
    for (s, r) in subjects.iter().zip(resid.iter()) {
        let key = (s.doses[t - 2], s.doses[t - 1]);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(*r),
            None => groups.push((key, vec![*r])),
        }
    }
    let mut strata = Vec::new();
    for ((prev_dose, dose), r) in groups {
        if r.len() < 2 {
            log::warn!("arm {arm_id}, trough {t}: dropping dose pair ({prev_dose}, {dose}) with one residual");
            continue;
        }
        let sd = (r.iter().map(|v| v * v).sum::<f64>() / (r.len() - 1) as f64).sqrt();
        strata.push(Stratum { prev_dose, dose, n: r.len(), sd });
    }
    strata.sort_by(|a, b| (a.prev_dose, a.dose).partial_cmp(&(b.prev_dose, b.dose)).expect("finite doses"));
    Ok(CondModel { t, beta: beta.iter().copied().collect(), strata, r_squared, n_fit: subjects.len() })
}

/// All models needed to standardize one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModels {
    pub arm: u8,
    pub e1: E1Model,
    /// Conditional models for troughs 2, 3, 4.
    pub conds: Vec<CondModel>,
}

pub fn fit_arm_models(ds: &TrialDataset, arm_id: u8) -> Result<ArmModels> {
    Ok(ArmModels {
        arm: arm_id,
        e1: fit_e1_model(ds, arm_id)?,
        conds: (2..=4).map(|t| fit_cond_model(ds, arm_id, t)).collect::<Result<_>>()?,
    })
}

pub fn write_models_json<W: Write>(models: &[ArmModels], mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, models)?;
    writeln!(out)?;
    Ok(())
}

/// A chain of per-period exposure distributions under a fixed regime.
pub trait SequentialModel: Sync {
    fn periods(&self) -> usize;

    /// Draws period `t` (0-based) given the draws of earlier periods.
    fn draw<R: Rng + ?Sized>(&self, t: usize, history: &[f64], rng: &mut R) -> f64;
}

/// Monte Carlo over the first `periods` links of the chain; returns the
/// last-period draws. Draw `i` uses its own stream, so the result does not
/// depend on thread scheduling.
pub fn sample_chain<M: SequentialModel>(model: &M, periods: usize, arm_id: u8, n_draws: usize, seed: u64) -> Result<Vec<f64>> {
    if periods == 0 || periods > model.periods() {
        return Err(Error::InvalidParameter(format!(
            "chain has {} periods, asked for {periods}",
            model.periods()
        )));
    }
    Ok((0..n_draws as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, StreamKey::new(arm_id, i, Purpose::GformulaDraw));
            let mut history = Vec::with_capacity(periods);
            for t in 0..periods {
                let e = model.draw(t, &history, &mut rng);
                history.push(e);
            }
            history[periods - 1]
        })
        .collect())
}

/// The fitted chain of one arm under its planned ladder.
pub struct ArmChain<'a> {
    models: &'a ArmModels,
    ladder: [f64; 4],
    scales: [f64; 3],
}

impl<'a> ArmChain<'a> {
    /// Fails with a positivity error when a planned dose pair has no fitted
    /// residual scale.
    pub fn new(models: &'a ArmModels, arm: &Arm) -> Result<Self> {
        let mut scales = [0.0; 3];
        for (k, c) in models.conds.iter().enumerate() {
            let t = c.t;
            scales[k] = c.scale(arm.ladder[t - 2], arm.ladder[t - 1]).ok_or_else(|| {
                Error::Positivity(format!(
                    "arm {}: no adherent data for dose pair ({}, {}) at trough {t}",
                    arm.id,
                    arm.ladder[t - 2],
                    arm.ladder[t - 1]
                ))
            })?;
        }
        Ok(Self { models, ladder: arm.ladder, scales })
    }
}

impl SequentialModel for ArmChain<'_> {
    fn periods(&self) -> usize {
        1 + self.models.conds.len()
    }

    fn draw<R: Rng + ?Sized>(&self, t: usize, history: &[f64], rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        if t == 0 {
            let e1 = self.models.e1;
            return (e1.beta0 + e1.gamma0 * z).exp() * self.ladder[0];
        }
        let e_norm = history[0] / self.ladder[0];
        self.models.conds[t - 1].mean(&self.ladder, e_norm) + self.scales[t - 1] * z
    }
}

/// Week-8 troughs of `arm` under full adherence.
pub fn gformula_sample(models: &ArmModels, arm: &Arm, n_draws: usize, seed: u64) -> Result<Vec<f64>> {
    let chain = ArmChain::new(models, arm)?;
    sample_chain(&chain, chain.periods(), arm.id, n_draws, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pk::PopulationParams;
    use rand::SeedableRng;
    use crate::trial::{simulate_trial, Regime, Scenario, Variant, ARMS};

    fn noise_free(n: usize) -> TrialDataset {
        let mut s = Scenario::new(Variant::Main).with_n(n);
        s.pop = PopulationParams { omega_cl: 0.0, omega_v: 0.0, xi: 0.0, ..s.pop };
        simulate_trial(&s).unwrap()
    }

    #[test]
    fn e1_on_typical_subjects() {
        let ds = noise_free(50);
        // gamma0 is zero for identical subjects
        assert!(matches!(fit_e1_model(&ds, 1), Err(Error::Degenerate(_))));
        let x: Vec<f64> = ds.arm_subjects(1).map(|s| (s.troughs[0] / s.doses[0]).ln()).collect();
        assert!((x[0] - ((-0.42f64).exp() / 2.0).ln()).abs() < 1e-9);
    }

    #[test]
    fn e1_requires_two_subjects() {
        let ds = simulate_trial(&Scenario::new(Variant::Main).with_n(1)).unwrap();
        assert!(matches!(fit_e1_model(&ds, 2), Err(Error::TooFewSubjects { arm: 2, found: 1 })));
    }

    #[test]
    fn main_scenario_models() {
        let ds = simulate_trial(&Scenario::new(Variant::Main).with_n(2000)).unwrap();
        let e1 = fit_e1_model(&ds, 5).unwrap();
        // oracle: SD of ln(exp(-k * 336) / v) + ln(1 + xi * eps) over the
        // random-effect distribution, by direct Monte Carlo
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let oracle: Vec<f64> = (0..200_000)
            .map(|_| {
                let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let (cl, v) = (0.0025 * (0.3 * z[0]).exp(), 2.0 * (0.3 * z[1]).exp());
                (-cl / v * 336.0).exp().ln() - v.ln() + (1.0 + 0.02 * z[2]).ln()
            })
            .collect();
        let sd = stats::sample_sd(&oracle);
        assert!((e1.gamma0 / sd - 1.0).abs() < 0.05, "{e1:?} vs {sd}");
        assert!((e1.beta0 - stats::mean(&oracle)).abs() < 0.02, "{e1:?}");
        let c2 = fit_cond_model(&ds, 5, 2).unwrap();
        assert!(c2.r_squared > 0.9, "{}", c2.r_squared);
        assert_eq!(fit_cond_model(&ds, 5, 4).unwrap().beta.len(), 5);
        assert!(fit_cond_model(&ds, 5, 5).is_err());
    }

    #[test]
    fn noise_free_chain_gives_typical_value() {
        let ds = noise_free(50);
        let arm = ARMS[4];
        let m = ArmModels {
            arm: 5,
            e1: E1Model { beta0: ((-0.42f64).exp() / 2.0).ln(), gamma0: 0.0 },
            conds: (2..=4).map(|t| fit_cond_model(&ds, 5, t).unwrap()).collect(),
        };
        for c in &m.conds {
            assert!(c.strata.iter().all(|s| s.sd < 1e-8));
        }
        let draws = gformula_sample(&m, &arm, 20, 1).unwrap();
        assert!(draws.iter().all(|d| (d - 170.28).abs() < 0.01), "{draws:?}");
    }

    #[test]
    fn missing_stratum_is_a_positivity_error() {
        let ds = simulate_trial(&Scenario::new(Variant::Main).with_n(200)).unwrap();
        let mut m = fit_arm_models(&ds, 5).unwrap();
        m.conds[1].strata.clear();
        assert!(matches!(gformula_sample(&m, &ARMS[4], 10, 1), Err(Error::Positivity(_))));
    }

    #[test]
    fn refuses_ground_truth_data() {
        let mut ds = noise_free(3);
        ds.regime = Regime::GroundTruth;
        assert!(matches!(fit_e1_model(&ds, 1), Err(Error::Regime(_))));
    }

    #[test]
    fn truncated_chain_reproduces_first_model() {
        let ds = simulate_trial(&Scenario::new(Variant::Main).with_n(500)).unwrap();
        let m = fit_arm_models(&ds, 3).unwrap();
        let chain = ArmChain::new(&m, &ARMS[2]).unwrap();
        let n = 20_000;
        let mut z: Vec<f64> = sample_chain(&chain, 1, 3, n, 4)
            .unwrap()
            .iter()
            .map(|e| ((e / ARMS[2].ladder[0]).ln() - m.e1.beta0) / m.e1.gamma0)
            .collect();
        z.sort_by(|a, b| a.total_cmp(b));
        let ks = z
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = stats::normal_cdf(v);
                (c - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - c).abs())
            })
            .fold(0.0, f64::max);
        // 1% critical value
        assert!(ks < 1.63 / (n as f64).sqrt(), "{ks}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let ds = simulate_trial(&Scenario::new(Variant::Main).with_n(200)).unwrap();
        let m = fit_arm_models(&ds, 2).unwrap();
        let a = gformula_sample(&m, &ARMS[1], 300, 9).unwrap();
        assert_eq!(a, gformula_sample(&m, &ARMS[1], 300, 9).unwrap());
        assert_eq!(a[..100], gformula_sample(&m, &ARMS[1], 100, 9).unwrap()[..]);
    }
}
