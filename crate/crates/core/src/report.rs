//! End-to-end scenario runs and the summary table.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gformula::{fit_arm_models, gformula_sample, ArmModels};
use crate::ipw::{compute_weights, fit_ie_model, weighted_summary, IeModel, IeSource, WeightVector};
use crate::nlme::{default_init, fit_nlme, simulate_counterfactual_nlme, LaplaceConfig, NlmeFit};
use crate::pk::PopulationParams;
use crate::stats;
use crate::trial::{Regime, Scenario, Simulator, TrialDataset, Variant, ARMS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    GroundTruth,
    IntentToTreat,
    PerProtocol,
    Standardization,
    Nlme,
    Ipw,
}

impl MethodId {
    pub const ALL: [MethodId; 6] = [
        MethodId::GroundTruth,
        MethodId::IntentToTreat,
        MethodId::PerProtocol,
        MethodId::Standardization,
        MethodId::Nlme,
        MethodId::Ipw,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodId::GroundTruth => "ground_truth",
            MethodId::IntentToTreat => "intent_to_treat",
            MethodId::PerProtocol => "per_protocol",
            MethodId::Standardization => "standardization",
            MethodId::Nlme => "nlme",
            MethodId::Ipw => "ipw",
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// Some IPW weights were lowered to the cap.
    Truncated,
    /// The NLME optimizer stopped before reaching tolerance.
    NotConverged,
    PositivityFailed,
    Failed,
}

impl Status {
    pub const ALL: [Status; 5] = [Status::Ok, Status::Truncated, Status::NotConverged, Status::PositivityFailed, Status::Failed];

    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Truncated => "truncated",
            Status::NotConverged => "not_converged",
            Status::PositivityFailed => "positivity_failed",
            Status::Failed => "failed",
        }
    }

    /// Whether the row carries no usable estimate.
    pub fn is_failure(&self) -> bool {
        matches!(self, Status::PositivityFailed | Status::Failed)
    }

    fn of_error(e: &Error) -> Self {
        match e {
            Error::Positivity(_) => Status::PositivityFailed,
            _ => Status::Failed,
        }
    }
}

impl FromStr for Status {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Status::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown status '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub arm: u8,
    pub method: MethodId,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    /// `mean / ground-truth mean`
    pub rel_mean: f64,
    /// `sd / ground-truth sd`
    pub rel_sd: f64,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    /// Monte Carlo draws per arm for the standardization methods.
    pub draws: usize,
    /// Quantile cap for IPW weights.
    pub ipw_cap: Option<f64>,
    /// IE model for the weights; `None` picks the true model, except in the
    /// cmax variant whose IE driver is not observed.
    pub ie_source: Option<IeSource>,
    pub laplace: LaplaceConfig,
    /// NLME start; `None` uses the two-stage estimates.
    pub nlme_init: Option<PopulationParams>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self { draws: 5000, ipw_cap: None, ie_source: None, laplace: LaplaceConfig::default(), nlme_init: None }
    }
}

impl AnalysisOptions {
    pub fn ie_source_for(&self, variant: Variant) -> IeSource {
        self.ie_source.unwrap_or(match variant {
            Variant::Cmax => IeSource::Fitted,
            _ => IeSource::TrueModel,
        })
    }
}

/// A failed estimation step, kept so the run can continue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub status: Status,
    pub reason: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self { status: Status::of_error(&e), reason: e.to_string() }
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

/// Models fitted to an observed dataset.
#[derive(Debug, Clone)]
pub struct Fits {
    pub nlme: Outcome<NlmeFit>,
    pub gformula: Vec<(u8, Outcome<ArmModels>)>,
    pub ie_model: Outcome<IeModel>,
    pub weights: Outcome<WeightVector>,
}

/// Fits every estimator. Refuses anything but observed data.
pub fn fit_all(observed: &TrialDataset, opts: &AnalysisOptions) -> Result<Fits> {
    observed.require_observed()?;
    let scn = &observed.scenario;
    let nlme = {
        let init = opts.nlme_init.unwrap_or_else(|| default_init(observed));
        fit_nlme(observed, &init, &opts.laplace).map_err(Failure::from)
    };
    let gformula = ARMS.iter().map(|a| (a.id, fit_arm_models(observed, a.id).map_err(Failure::from))).collect();
    let ie_model = match opts.ie_source_for(scn.variant) {
        IeSource::Fitted => fit_ie_model(observed, scn.ie_scope).map_err(Failure::from),
        IeSource::TrueModel if scn.variant == Variant::Cmax => Err(Failure {
            status: Status::Failed,
            reason: "the true IE driver of this scenario is not observed; use a fitted IE model".into(),
        }),
        IeSource::TrueModel => IeModel::from_scenario(scn).map_err(Failure::from),
    };
    let weights = match &ie_model {
        Ok(m) => compute_weights(observed, m, opts.ipw_cap).map_err(Failure::from),
        Err(f) => Err(f.clone()),
    };
    Ok(Fits { nlme, gformula, ie_model, weights })
}

/// Counterfactual week-8 sample (or weighted sample) of one arm and method.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub arm: u8,
    pub method: MethodId,
    pub values: Vec<f64>,
    /// Frequency weights; `None` means equal weights.
    pub weights: Option<Vec<f64>>,
    pub status: Status,
}

impl Estimate {
    fn summary(&self) -> Result<(f64, f64)> {
        match &self.weights {
            Some(w) => weighted_summary(&self.values, w),
            None if self.values.is_empty() => Err(Error::Degenerate("empty sample".into())),
            None => Ok((stats::mean(&self.values), stats::sd(&self.values))),
        }
    }
}

/// Counterfactual samples of the three estimators for every arm.
pub fn estimate_all(observed: &TrialDataset, fits: &Fits, draws: usize) -> Result<Vec<(u8, MethodId, Outcome<Estimate>)>> {
    observed.require_observed()?;
    let seed = observed.scenario.seed;
    let mut out = Vec::new();
    for a in &ARMS {
        let std = match fits.gformula.iter().find(|(id, _)| *id == a.id).map(|(_, m)| m) {
            Some(Ok(m)) => gformula_sample(m, a, draws, seed)
                .map(|values| Estimate { arm: a.id, method: MethodId::Standardization, values, weights: None, status: Status::Ok })
                .map_err(Failure::from),
            Some(Err(f)) => Err(f.clone()),
            None => Err(Failure { status: Status::Failed, reason: "no model".into() }),
        };
        out.push((a.id, MethodId::Standardization, std));

        let nlme = fits.nlme.clone().map(|fit| Estimate {
            arm: a.id,
            method: MethodId::Nlme,
            values: simulate_counterfactual_nlme(&fit.est, a, draws, seed),
            weights: None,
            status: if fit.converged { Status::Ok } else { Status::NotConverged },
        });
        out.push((a.id, MethodId::Nlme, nlme));

        let ipw = fits.weights.clone().and_then(|wv| {
            let by_id: std::collections::HashMap<usize, f64> = wv.arm_weights(a.id).collect();
            let truncated = wv.n_truncated > 0 && wv.arm_weights(a.id).count() > 0;
            let (values, weights): (Vec<f64>, Vec<f64>) = observed
                .arm_subjects(a.id)
                .filter(|s| s.adherent)
                .map(|s| (s.week8(), by_id[&s.subject_id]))
                .unzip();
            if values.is_empty() {
                return Err(Failure {
                    status: Status::PositivityFailed,
                    reason: format!("arm {}: no adherent subjects", a.id),
                });
            }
            Ok(Estimate {
                arm: a.id,
                method: MethodId::Ipw,
                values,
                weights: Some(weights),
                status: if truncated { Status::Truncated } else { Status::Ok },
            })
        });
        out.push((a.id, MethodId::Ipw, ipw));
    }
    Ok(out)
}

/// Everything produced by one scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub scenario: Scenario,
    pub observed: TrialDataset,
    pub ground_truth: TrialDataset,
    pub fits: Fits,
    pub estimates: Vec<(u8, MethodId, Outcome<Estimate>)>,
    pub rows: Vec<SummaryRow>,
}

/// Simulates the observed and ground-truth trials, fits the estimators on
/// the observed data only and tabulates every arm and method.
pub fn run_scenario(scenario: &Scenario, opts: &AnalysisOptions) -> Result<ScenarioRun> {
    if opts.draws == 0 {
        return Err(Error::InvalidParameter("draws must be at least 1".into()));
    }
    let sim = Simulator::new(scenario)?;
    let observed = sim.simulate(Regime::Observed)?;
    let ground_truth = sim.simulate(Regime::GroundTruth)?;
    let fits = fit_all(&observed, opts)?;
    let estimates = estimate_all(&observed, &fits, opts.draws)?;

    let name = scenario.variant.as_str().to_string();
    let mut rows = Vec::with_capacity(30);
    for a in &ARMS {
        let gt = ground_truth.week8(a.id);
        let (gt_mean, gt_sd) = (stats::mean(&gt), stats::sd(&gt));
        let row = |method, n, mean: f64, sd: f64, status| SummaryRow {
            scenario: name.clone(),
            arm: a.id,
            method,
            n,
            mean,
            sd,
            rel_mean: mean / gt_mean,
            rel_sd: sd / gt_sd,
            status,
        };
        let mut gt_row = row(MethodId::GroundTruth, gt.len(), gt_mean, gt_sd, Status::Ok);
        gt_row.rel_mean = 1.0;
        gt_row.rel_sd = 1.0;
        rows.push(gt_row);

        let itt = observed.week8(a.id);
        rows.push(row(MethodId::IntentToTreat, itt.len(), stats::mean(&itt), stats::sd(&itt), Status::Ok));
        let pp: Vec<f64> = observed.arm_subjects(a.id).filter(|s| s.adherent).map(|s| s.week8()).collect();
        let pp_status = if pp.is_empty() { Status::PositivityFailed } else { Status::Ok };
        rows.push(row(MethodId::PerProtocol, pp.len(), stats::mean(&pp), stats::sd(&pp), pp_status));

        for (_, method, est) in estimates.iter().filter(|(id, _, _)| *id == a.id) {
            let r = match est {
                Ok(e) => match e.summary() {
                    Ok((m, s)) => row(*method, e.values.len(), m, s, e.status),
                    Err(err) => row(*method, e.values.len(), f64::NAN, f64::NAN, Status::of_error(&err)),
                },
                Err(f) => {
                    log::warn!("arm {}: {} failed: {}", a.id, method, f.reason);
                    row(*method, 0, f64::NAN, f64::NAN, f.status)
                }
            };
            rows.push(r);
        }
    }
    Ok(ScenarioRun { scenario: scenario.clone(), observed, ground_truth, fits, estimates, rows })
}

pub const SUMMARY_HEADER: [&str; 9] = ["scenario", "arm", "method", "n", "mean", "sd", "rel_mean", "rel_sd", "status"];

fn fixed(x: f64) -> String {
    format!("{x:.6}")
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyRows);
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.arm.to_string(),
            r.method.as_str().to_string(),
            r.n.to_string(),
            fixed(r.mean),
            fixed(r.sd),
            fixed(r.rel_mean),
            fixed(r.rel_sd),
            r.status.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Rows as written, i.e. rounded to six decimals.
pub fn read_summary_csv<R: Read>(input: R) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(SUMMARY_HEADER) {
        return Err(Error::Parse("unexpected summary header".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("'{s}': {e}")));
    r.records()
        .map(|rec| {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            Ok(SummaryRow {
                scenario: f(0).to_string(),
                arm: f(1).parse().map_err(|e| Error::Parse(format!("arm: {e}")))?,
                method: f(2).parse()?,
                n: f(3).parse().map_err(|e| Error::Parse(format!("n: {e}")))?,
                mean: num(f(4))?,
                sd: num(f(5))?,
                rel_mean: num(f(6))?,
                rel_sd: num(f(7))?,
                status: f(8).parse()?,
            })
        })
        .collect()
}

/// Rounds the numeric fields the way the CSV does.
pub fn rounded(rows: &[SummaryRow]) -> Vec<SummaryRow> {
    let r = |x: f64| fixed(x).parse::<f64>().expect("formatted float parses");
    rows.iter()
        .map(|row| SummaryRow { mean: r(row.mean), sd: r(row.sd), rel_mean: r(row.rel_mean), rel_sd: r(row.rel_sd), ..row.clone() })
        .collect()
}

pub fn write_summary_json<W: Write>(rows: &[SummaryRow], mut out: W) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyRows);
    }
    serde_json::to_writer_pretty(&mut out, &rounded(rows))?;
    writeln!(out)?;
    Ok(())
}

/// Writes `summary.csv` and `summary.json` into `dir`.
pub fn emit(rows: &[SummaryRow], dir: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyRows);
    }
    fs::create_dir_all(dir)?;
    write_summary_csv(rows, fs::File::create(dir.join("summary.csv"))?)?;
    write_summary_json(rows, fs::File::create(dir.join("summary.json"))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows() -> Vec<SummaryRow> {
        vec![
            SummaryRow {
                scenario: "main".into(),
                arm: 1,
                method: MethodId::GroundTruth,
                n: 10,
                mean: 12.3456789,
                sd: 1.0 / 3.0,
                rel_mean: 1.0,
                rel_sd: 1.0,
                status: Status::Ok,
            },
            SummaryRow {
                scenario: "main".into(),
                arm: 5,
                method: MethodId::Ipw,
                n: 0,
                mean: f64::NAN,
                sd: f64::NAN,
                rel_mean: f64::NAN,
                rel_sd: f64::NAN,
                status: Status::PositivityFailed,
            },
        ]
    }

    #[test]
    fn csv_layout_and_round_trip() {
        let rows = sample_rows();
        let mut buf = Vec::new();
        write_summary_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("scenario,arm,method,n,mean,sd,rel_mean,rel_sd,status\n"));
        assert!(text.contains("main,1,ground_truth,10,12.345679,0.333333,1.000000,1.000000,ok\n"));
        assert!(!text.contains('\r'));
        let back = read_summary_csv(buf.as_slice()).unwrap();
        let want = rounded(&rows);
        assert_eq!(back[0], want[0]);
        assert!(back[1].mean.is_nan() && back[1].status == Status::PositivityFailed);
        let mut again = Vec::new();
        write_summary_csv(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn empty_rows_rejected() {
        assert!(matches!(write_summary_csv(&[], Vec::new()), Err(Error::EmptyRows)));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit(&[], dir.path()), Err(Error::EmptyRows)));
    }

    #[test]
    fn enum_names_round_trip() {
        for m in MethodId::ALL {
            assert_eq!(m.as_str().parse::<MethodId>().unwrap(), m);
        }
        for s in Status::ALL {
            assert_eq!(s.as_str().parse::<Status>().unwrap(), s);
        }
    }

    #[test]
    fn estimators_refuse_ground_truth() {
        let scn = Scenario::new(Variant::Main).with_n(20);
        let gt = crate::trial::simulate_ground_truth(&scn).unwrap();
        assert!(matches!(fit_all(&gt, &AnalysisOptions::default()), Err(Error::Regime(_))));
    }

    #[test]
    fn small_run_has_all_rows() {
        let scn = Scenario::new(Variant::Main).with_n(150);
        let opts = AnalysisOptions { draws: 500, ..Default::default() };
        let run = run_scenario(&scn, &opts).unwrap();
        assert_eq!(run.rows.len(), 30);
        for r in run.rows.iter().filter(|r| r.method == MethodId::GroundTruth) {
            assert_eq!((r.rel_mean, r.rel_sd), (1.0, 1.0));
        }
        let again = run_scenario(&scn, &opts).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_summary_csv(&run.rows, &mut a).unwrap();
        write_summary_csv(&again.rows, &mut b).unwrap();
        assert_eq!(a, b);
    }
}
