//! Inverse probability of adherence weighting.
//!
//! Each adherent subject gets `w = prod_t 1 / (1 - p_t)` over the
//! assessments where an IE could have occurred, with `p_t` the IE
//! probability at the subject's observed trough. Weights are unstabilized:
//! the target regime (no IE) is deterministic, so a stabilizing numerator
//! would be a per-arm constant and cancel.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trial::{arm, at_risk, pointers, IeScope, Scenario, SubjectRecord, TrialDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IeSource {
    TrueModel,
    Fitted,
}

impl std::str::FromStr for IeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true" | "true_model" => Ok(IeSource::TrueModel),
            "fitted" => Ok(IeSource::Fitted),
            _ => Err(Error::Parse(format!("unknown IE model source '{s}'"))),
        }
    }
}

/// `logit p_t = beta * ln E_t + intercept_t`, i.e. `intercept_t = -beta ln alpha_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IeModel {
    pub beta: f64,
    /// Thresholds; NaN when `beta` is not positive.
    pub alphas: [f64; 3],
    pub intercepts: [f64; 3],
    pub source: IeSource,
    pub scope: IeScope,
    /// Standard error of `beta` for fitted models.
    pub beta_se: Option<f64>,
}

impl IeModel {
    pub fn new(beta: f64, alphas: [f64; 3], scope: IeScope) -> Result<Self> {
        if !beta.is_finite() || !(alphas[0] > 0.0 && alphas[0] < alphas[1] && alphas[1] < alphas[2]) {
            return Err(Error::InvalidParameter(format!(
                "IE model needs finite slope and increasing positive thresholds, got {beta}, {alphas:?}"
            )));
        }
        Ok(Self {
            beta,
            alphas,
            intercepts: alphas.map(|a| -beta * a.ln()),
            source: IeSource::TrueModel,
            scope,
            beta_se: None,
        })
    }

    /// The model that generated the observed data.
    pub fn from_scenario(s: &Scenario) -> Result<Self> {
        Self::new(s.effective_beta(), s.alphas.map(|a| a + s.alpha_shift), s.ie_scope)
    }

    pub fn logit(&self, week: usize, exposure: f64) -> f64 {
        self.beta * exposure.ln() + self.intercepts[week]
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        writeln!(out)?;
        Ok(())
    }

    /// Probability of no IE at assessment `week` (0-based).
    pub fn adherence_probability(&self, week: usize, exposure: f64) -> f64 {
        1.0 / (1.0 + self.logit(week, exposure).exp())
    }
}

/// Whether each assessment of `s` could have produced an IE.
pub fn risk_set(scope: IeScope, s: &SubjectRecord) -> Result<[bool; 3]> {
    let ladder = arm(s.arm)?.ladder;
    let p = pointers(&s.ie);
    Ok(std::array::from_fn(|w| at_risk(scope, &ladder, p[w])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub subject_ids: Vec<usize>,
    pub arms: Vec<u8>,
    pub weights: Vec<f64>,
    /// Adherence probability per assessment; 1 where no IE was possible.
    pub adherence: Vec<[f64; 3]>,
    /// Weights that were infinite before truncation.
    pub n_infinite: usize,
    /// Weights lowered to the cap.
    pub n_truncated: usize,
}

impl WeightVector {
    pub fn arm_weights(&self, arm_id: u8) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.weights.len())
            .filter(move |&i| self.arms[i] == arm_id)
            .map(|i| (self.subject_ids[i], self.weights[i]))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["subject_id", "arm", "w", "p_adhere_1", "p_adhere_2", "p_adhere_3"])?;
        for i in 0..self.weights.len() {
            let a = self.adherence[i];
            w.write_record([
                self.subject_ids[i].to_string(),
                self.arms[i].to_string(),
                self.weights[i].to_string(),
                a[0].to_string(),
                a[1].to_string(),
                a[2].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Weights for the adherent subjects. `cap` is a quantile in (0, 1]; weights
/// above that quantile of their arm are lowered to it. Without a cap an
/// infinite weight is a positivity error.
pub fn compute_weights(ds: &TrialDataset, model: &IeModel, cap: Option<f64>) -> Result<WeightVector> {
    ds.require_observed()?;
    if let Some(q) = cap {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::InvalidParameter(format!("weight cap quantile must be in (0, 1], got {q}")));
        }
    }
    let mut out = WeightVector {
        subject_ids: Vec::new(),
        arms: Vec::new(),
        weights: Vec::new(),
        adherence: Vec::new(),
        n_infinite: 0,
        n_truncated: 0,
    };
    for s in ds.subjects.iter().filter(|s| s.adherent) {
        let risk = risk_set(model.scope, s)?;
        let probs: [f64; 3] =
            std::array::from_fn(|w| if risk[w] { model.adherence_probability(w, s.troughs[w]) } else { 1.0 });
        let w: f64 = probs.iter().map(|p| 1.0 / p).product();
        out.subject_ids.push(s.subject_id);
        out.arms.push(s.arm);
        out.weights.push(w);
        out.adherence.push(probs);
    }
    out.n_infinite = out.weights.iter().filter(|w| !w.is_finite()).count();
    match cap {
        None if out.n_infinite > 0 => Err(Error::Positivity(format!(
            "{} adherent subjects have zero modelled adherence probability",
            out.n_infinite
        ))),
        None => Ok(out),
        Some(q) => {
            for a in 1..=5u8 {
                let idx: Vec<usize> = (0..out.weights.len()).filter(|&i| out.arms[i] == a).collect();
                let mut finite: Vec<f64> = idx.iter().map(|&i| out.weights[i]).filter(|w| w.is_finite()).collect();
                if finite.is_empty() {
                    continue;
                }
                finite.sort_by(|x, y| x.total_cmp(y));
                // nearest-rank quantile
                let rank = ((q * finite.len() as f64).ceil() as usize).clamp(1, finite.len());
                let limit = finite[rank - 1];
                for i in idx {
                    if out.weights[i] > limit {
                        out.weights[i] = limit;
                        out.n_truncated += 1;
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Weighted mean and SD with the frequency-weight convention
/// `sum w (x - mean)^2 / sum w`.
pub fn weighted_summary(x: &[f64], w: &[f64]) -> Result<(f64, f64)> {
    if x.len() != w.len() {
        return Err(Error::InvalidParameter(format!("{} values but {} weights", x.len(), w.len())));
    }
    if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter("weights must be finite and non-negative".into()));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all weights are zero".into()));
    }
    let mean = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total;
    let var = x.iter().zip(w).map(|(a, b)| b * (a - mean).powi(2)).sum::<f64>() / total;
    Ok((mean, var.sqrt()))
}

/// Kish effective sample size.
pub fn effective_sample_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    s * s / s2
}

/// Maximum-likelihood logistic regression of the IE indicator on
/// `ln E_t` with one intercept per assessment, over the at-risk assessments.
pub fn fit_ie_model(ds: &TrialDataset, scope: IeScope) -> Result<IeModel> {
    ds.require_observed()?;
    // (week, ln E, outcome)
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for s in &ds.subjects {
        let risk = risk_set(scope, s)?;
        for w in 0..3 {
            if risk[w] {
                rows.push((w, s.troughs[w].ln(), f64::from(u8::from(s.ie[w]))));
            }
        }
    }
    let mut present = [false; 3];
    for week in 0..3 {
        let ys: Vec<f64> = rows.iter().filter(|r| r.0 == week).map(|r| r.2).collect();
        if ys.is_empty() {
            continue;
        }
        if ys.iter().all(|&y| y == ys[0]) {
            return Err(Error::Separation { week: week + 1 });
        }
        present[week] = true;
    }
    if !present.iter().any(|&p| p) {
        return Err(Error::Degenerate("no assessment at risk of an IE".into()));
    }
    // centre ln E for conditioning; parameters [beta, c_1, c_2, c_3]
    let centre = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    let mut theta = [0.0f64; 4];
    let mut info = nalgebra::Matrix4::<f64>::zeros();
    let mut converged = false;
    for _ in 0..100 {
        let mut grad = nalgebra::Vector4::<f64>::zeros();
        info = nalgebra::Matrix4::zeros();
        for &(w, x, y) in &rows {
            let z = [x - centre, (w == 0) as u8 as f64, (w == 1) as u8 as f64, (w == 2) as u8 as f64];
            let eta = theta[0] * z[0] + theta[1 + w];
            let p = 1.0 / (1.0 + (-eta).exp());
            let v = p * (1.0 - p);
            for i in 0..4 {
                grad[i] += (y - p) * z[i];
                for j in 0..4 {
                    info[(i, j)] += v * z[i] * z[j];
                }
            }
        }
        for w in 0..3 {
            if !present[w] {
                info[(w + 1, w + 1)] = 1.0;
            }
        }
        let Some(step) = info.cholesky().map(|c| c.solve(&grad)) else {
            return Err(Error::Degenerate("singular information matrix in IE model fit".into()));
        };
        for i in 0..4 {
            theta[i] += step[i];
        }
        if !theta.iter().all(|t| t.is_finite()) || theta.iter().any(|t| t.abs() > 1e3) {
            return Err(Error::Degenerate("IE model fit diverged (quasi-separation)".into()));
        }
        if step.amax() < 1e-10 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Degenerate("IE model fit did not converge".into()));
    }
    let beta = theta[0];
    let cov = info
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("singular information matrix in IE model fit".into()))?;
    let intercepts: [f64; 3] = std::array::from_fn(|w| theta[1 + w] - beta * centre);
    let alphas = intercepts.map(|c| if beta > 0.0 { (-c / beta).exp() } else { f64::NAN });
    Ok(IeModel {
        beta,
        alphas,
        intercepts,
        source: IeSource::Fitted,
        scope,
        beta_se: Some(cov[(0, 0)].sqrt()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial::{simulate_trial, Regime, Variant};

    fn subject(arm: u8, troughs: [f64; 4]) -> SubjectRecord {
        SubjectRecord {
            subject_id: 0,
            arm,
            eta_cl: 0.0,
            eta_v: 0.0,
            doses: crate::trial::ARMS[arm as usize - 1].ladder,
            troughs,
            ie: [false; 3],
            adherent: true,
        }
    }

    fn dataset(subjects: Vec<SubjectRecord>) -> TrialDataset {
        TrialDataset { scenario: Scenario::new(Variant::Main), subjects, regime: Regime::Observed }
    }

    #[test]
    fn closed_form_weights_every_assessment() {
        let alphas = [15.0, 40.0, 100.0];
        let m = IeModel::new(5.0, alphas, IeScope::Always).unwrap();
        let ds = dataset(vec![
            subject(5, [15.0, 40.0, 100.0, 1.0]),
            subject(5, [30.0, 80.0, 200.0, 1.0]),
        ]);
        let w = compute_weights(&ds, &m, None).unwrap();
        assert!((w.weights[0] - 8.0).abs() < 1e-9);
        assert!((w.weights[1] / 35937.0 - 1.0).abs() < 1e-12);
        let flat = IeModel::new(0.0, alphas, IeScope::Always).unwrap();
        let w0 = compute_weights(&ds, &flat, None).unwrap();
        assert!(w0.weights.iter().all(|&v| (v - 8.0).abs() < 1e-12));
    }

    #[test]
    fn pending_scope_skips_target_dose_assessments() {
        let m = IeModel::new(5.0, [15.0, 40.0, 100.0], IeScope::Pending).unwrap();
        // arm 5 reaches its target at the first up-titration
        let ds = dataset(vec![subject(5, [15.0, 40.0, 100.0, 1.0]), subject(4, [15.0, 40.0, 100.0, 1.0])]);
        let w = compute_weights(&ds, &m, None).unwrap();
        assert!((w.weights[0] - 2.0).abs() < 1e-12);
        assert!((w.weights[1] - 4.0).abs() < 1e-12);
        assert_eq!(w.adherence[0][1], 1.0);
    }

    #[test]
    fn infinite_weights_need_a_cap() {
        let m = IeModel::new(5.0, [15.0, 40.0, 100.0], IeScope::Always).unwrap();
        let mut subjects: Vec<_> = (1..=10).map(|k| subject(3, [k as f64, 30.0, 90.0, 1.0])).collect();
        subjects.push(subject(3, [1e80, 30.0, 90.0, 1.0]));
        let ds = dataset(subjects);
        assert!(matches!(compute_weights(&ds, &m, None), Err(Error::Positivity(_))));
        let w = compute_weights(&ds, &m, Some(0.9)).unwrap();
        assert_eq!(w.n_infinite, 1);
        assert!(w.weights.iter().all(|v| v.is_finite()));
        assert!(w.n_truncated >= 1);
    }

    #[test]
    fn summary_examples() {
        let (m, s) = weighted_summary(&[3.0, 7.0], &[1.0, 0.0]).unwrap();
        assert_eq!((m, s), (3.0, 0.0));
        let x = [1.0, 2.0, 6.0];
        let (m, s) = weighted_summary(&x, &[1.0; 3]).unwrap();
        assert!((m - crate::stats::mean(&x)).abs() < 1e-12 && (s - crate::stats::sd(&x)).abs() < 1e-12);
        assert!(weighted_summary(&x, &[0.0; 3]).is_err());
        assert!(weighted_summary(&x, &[1.0; 2]).is_err());
    }

    #[test]
    fn recovers_slope_and_flags_separation() {
        let mut scn = Scenario::new(Variant::Main).with_n(5000);
        scn.ie_scope = IeScope::Always;
        let ds = simulate_trial(&scn).unwrap();
        let m = fit_ie_model(&ds, IeScope::Always).unwrap();
        assert!((m.beta / 5.0 - 1.0).abs() < 0.1, "{m:?}");

        let mut flat = scn.clone();
        flat.beta = 0.0;
        let ds0 = simulate_trial(&flat).unwrap();
        let m0 = fit_ie_model(&ds0, IeScope::Always).unwrap();
        assert!(m0.beta.abs() < 3.0 * m0.beta_se.unwrap(), "{m0:?}");

        let mut none = ds0.clone();
        none.subjects.iter_mut().for_each(|s| s.ie[1] = false);
        assert!(matches!(fit_ie_model(&none, IeScope::Always), Err(Error::Separation { week: 2 })));
    }
}
