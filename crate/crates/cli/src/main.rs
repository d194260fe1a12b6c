use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gmethods_core::gformula::write_models_json;
use gmethods_core::report::{emit, estimate_all, fit_all, Fits};
use gmethods_core::trial::{read_dataset_csv, write_dataset_csv, Regime, Simulator};
use gmethods_core::{config, run_scenario, AnalysisOptions, Error, Scenario, TrialDataset, Variant};

const EXIT_USAGE: u8 = 2;
const EXIT_ESTIMATION: u8 = 3;

#[derive(Parser)]
#[command(name = "gmethods", version, about = "Titration-trial simulation and g-method estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the observed and ground-truth datasets.
    Simulate(Common),
    /// Fit the estimators and write model artifacts.
    Fit(WithData),
    /// Write counterfactual week-8 samples per arm and method.
    Estimate(WithData),
    /// Full pipeline; writes summary.csv and summary.json.
    Run(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value = "main")]
    scenario: Variant,
    #[arg(long, default_value_t = 5000)]
    n_per_arm: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Monte Carlo draws per arm and method.
    #[arg(long, default_value_t = 5000)]
    draws: usize,
    /// key = value overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// 1000 subjects per arm.
    #[arg(long)]
    fast: bool,
    /// Exit with status 3 if any estimator fails.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct WithData {
    #[command(flatten)]
    common: Common,
    /// Observed dataset written by `simulate`; simulated afresh if omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

fn setup(c: &Common) -> Result<(Scenario, AnalysisOptions), Error> {
    let mut scn = Scenario::new(c.scenario).with_n(if c.fast { 1000 } else { c.n_per_arm }).with_seed(c.seed);
    let mut opts = AnalysisOptions { draws: c.draws, ..Default::default() };
    if let Some(path) = &c.config {
        config::apply(&fs::read_to_string(path)?, &mut scn, &mut opts)?;
    }
    scn.validate()?;
    if opts.draws == 0 {
        return Err(Error::InvalidParameter("--draws must be at least 1".into()));
    }
    fs::create_dir_all(&c.out)?;
    Ok((scn, opts))
}

fn observed(scn: &Scenario, data: &Option<PathBuf>) -> Result<TrialDataset, Error> {
    match data {
        Some(p) => read_dataset_csv(fs::File::open(p)?, scn.clone(), Regime::Observed),
        None => Simulator::new(scn)?.simulate(Regime::Observed),
    }
}

fn fit_failures(fits: &Fits) -> Vec<String> {
    let mut out = Vec::new();
    if let Err(f) = &fits.nlme {
        out.push(format!("nlme: {}", f.reason));
    }
    for (arm, m) in &fits.gformula {
        if let Err(f) = m {
            out.push(format!("standardization arm {arm}: {}", f.reason));
        }
    }
    if let Err(f) = &fits.weights {
        out.push(format!("ipw: {}", f.reason));
    }
    out
}

fn write_fits(fits: &Fits, out: &Path) -> Result<(), Error> {
    if let Ok(fit) = &fits.nlme {
        fit.write_report(fs::File::create(out.join("nlme_fit.json"))?)?;
        fit.write_eb_csv(fs::File::create(out.join("nlme_eb.csv"))?)?;
    }
    let models: Vec<_> = fits.gformula.iter().filter_map(|(_, m)| m.as_ref().ok().cloned()).collect();
    write_models_json(&models, fs::File::create(out.join("gformula_models.json"))?)?;
    if let Ok(m) = &fits.ie_model {
        m.write_json(fs::File::create(out.join("ie_model.json"))?)?;
    }
    if let Ok(w) = &fits.weights {
        w.write_csv(fs::File::create(out.join("ipw_weights.csv"))?)?;
    }
    Ok(())
}

/// Returns whether every estimator succeeded.
fn execute(cmd: Command) -> Result<bool, Error> {
    match cmd {
        Command::Simulate(c) => {
            let (scn, _) = setup(&c)?;
            let sim = Simulator::new(&scn)?;
            write_dataset_csv(&sim.simulate(Regime::Observed)?, fs::File::create(c.out.join("observed.csv"))?)?;
            write_dataset_csv(&sim.simulate(Regime::GroundTruth)?, fs::File::create(c.out.join("ground_truth.csv"))?)?;
            Ok(true)
        }
        Command::Fit(w) => {
            let (scn, opts) = setup(&w.common)?;
            let ds = observed(&scn, &w.data)?;
            let fits = fit_all(&ds, &opts)?;
            write_fits(&fits, &w.common.out)?;
            let failures = fit_failures(&fits);
            failures.iter().for_each(|f| log::warn!("{f}"));
            Ok(failures.is_empty())
        }
        Command::Estimate(w) => {
            let (scn, opts) = setup(&w.common)?;
            let ds = observed(&scn, &w.data)?;
            let fits = fit_all(&ds, &opts)?;
            let dir = w.common.out.join("samples");
            fs::create_dir_all(&dir)?;
            let mut ok = true;
            for (arm, method, est) in estimate_all(&ds, &fits, opts.draws)? {
                match est {
                    Ok(e) => {
                        let mut text = String::from("week8\n");
                        for v in &e.values {
                            text.push_str(&format!("{v}\n"));
                        }
                        fs::write(dir.join(format!("arm{arm}_{method}.csv")), text)?;
                        if let Some(weights) = &e.weights {
                            let body: String = weights.iter().map(|w| format!("{w}\n")).collect();
                            fs::write(dir.join(format!("arm{arm}_{method}_weights.csv")), "w\n".to_string() + &body)?;
                        }
                    }
                    Err(f) => {
                        log::warn!("arm {arm} {method}: {}", f.reason);
                        ok = false;
                    }
                }
            }
            Ok(ok)
        }
        Command::Run(c) => {
            let (scn, opts) = setup(&c)?;
            let run = run_scenario(&scn, &opts)?;
            emit(&run.rows, &c.out)?;
            Ok(!run.rows.iter().any(|r| r.status.is_failure() || r.status == gmethods_core::Status::NotConverged))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let strict = match &cli.command {
        Command::Simulate(c) | Command::Run(c) => c.strict,
        Command::Fit(w) | Command::Estimate(w) => w.common.strict,
    };
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) if strict => {
            eprintln!("error: at least one estimator failed");
            ExitCode::from(EXIT_ESTIMATION)
        }
        Ok(false) => ExitCode::SUCCESS,
        Err(e @ (Error::Config { .. } | Error::InvalidParameter(_) | Error::Parse(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
