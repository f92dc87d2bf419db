//! `hdmd` — simulate the missing-data debiasing experiments or estimate a
//! population mean on user data.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hdmd_core::config::{parse_config, read_matrix_csv, read_vector_csv};
use hdmd_core::debias::{
    compute_dbadj, debias_empirical_sca, debias_naive, debias_propensity, influence_vectors,
    DebiasMethod, DebiasReport, MeanEstimate, PropensityRoute,
};
use hdmd_core::dof::{dof_for_outcome, dof_for_propensity};
use hdmd_core::fits::{fit_outcome, fit_propensity_m, Penalty, PropensityLoss, WeightScheme};
use hdmd_core::harness::{
    check_preset, preset, rows_to_csv, run_experiment, run_lambda_sweep, summaries_to_csv,
    summary_table,
};
use hdmd_core::link::LinkFunction;
use hdmd_core::model::{whiten, Covariance, Dataset};
use hdmd_core::summary::{shrinkage_mestimation, shrinkage_moment, summarize};
use hdmd_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "hdmd",
    about = "Debiased mean estimation for high-dimensional missing data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo experiment preset and write replicate/summary CSVs.
    Simulate(SimulateArgs),
    /// One-shot estimation on user-provided data files.
    Estimate(EstimateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Preset: fig1 | fig2 | fig3 | fig-debias | lambda-sweep
    #[arg(long)]
    preset: String,
    /// Optional key=value config file overlaying the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the replicate count.
    #[arg(long)]
    replicates: Option<usize>,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path (default `<preset>.csv`; a `<preset>_summary.csv`
    /// sits next to it).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Paper-scale replicate counts instead of desk scale.
    #[arg(long)]
    full_scale: bool,
    /// Verify the preset's headline properties; exit code 2 on violation.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct EstimateArgs {
    /// Comma-separated X.csv,y.csv,a.csv paths.
    #[arg(long)]
    data: String,
    /// Feature covariance: `identity` or a path to a p x p CSV.
    #[arg(long, default_value = "identity")]
    sigma: String,
    /// Method: ridge | debias-naive | sca-moment | sca-mest
    #[arg(long)]
    method: String,
    /// Ridge penalty strength.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Link: offset-logistic | logistic
    #[arg(long, default_value = "offset-logistic")]
    link: String,
    /// Floor of the offset-logistic link.
    #[arg(long, default_value_t = 0.1)]
    link_floor: f64,
    /// Optional path for the per-coordinate debiased coefficient CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Estimate(args) => estimate(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn simulate(args: SimulateArgs) -> Result<ExitCode> {
    let mut cfg = preset(&args.preset)?;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        cfg = parse_config(&text)?.apply_to(cfg)?;
    }
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.workers.is_some() {
        cfg.workers = args.workers;
    }
    if args.full_scale {
        cfg = cfg.full_scale();
    }

    let result = if cfg.lambda_grid.is_empty() {
        run_experiment(&cfg)?
    } else {
        run_lambda_sweep(&cfg)?
    };

    let out = args
        .out
        .unwrap_or_else(|| PathBuf::from(format!("{}.csv", cfg.id)));
    std::fs::write(&out, rows_to_csv(&result.rows))?;
    let summary_path = out.with_file_name(format!(
        "{}_summary.csv",
        out.file_stem().and_then(|s| s.to_str()).unwrap_or("run")
    ));
    std::fs::write(&summary_path, summaries_to_csv(&result.summaries))?;
    println!(
        "wrote {} replicate rows to {} and summaries to {}",
        result.rows.len(),
        out.display(),
        summary_path.display()
    );
    print!("{}", summary_table(&result.summaries));

    if args.check {
        let violations = check_preset(&cfg, &result);
        if !violations.is_empty() {
            for v in &violations {
                eprintln!("check failed: {v}");
            }
            return Ok(ExitCode::from(2));
        }
        println!("all checks passed");
    }
    Ok(ExitCode::SUCCESS)
}

fn estimate(args: EstimateArgs) -> Result<ExitCode> {
    let parts: Vec<&str> = args.data.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidConfig(
            "--data expects X.csv,y.csv,a.csv".into(),
        ));
    }
    let x = read_matrix_csv(Path::new(parts[0]))?;
    let y = read_vector_csv(Path::new(parts[1]))?;
    let a = read_vector_csv(Path::new(parts[2]))?;
    let p = x.ncols();
    let sigma = if args.sigma == "identity" {
        Covariance::Identity(p)
    } else {
        Covariance::Dense(read_matrix_csv(Path::new(&args.sigma))?)
    };
    let link = match args.link.as_str() {
        "offset-logistic" => LinkFunction::offset_logistic(args.link_floor)?,
        "logistic" => LinkFunction::Logistic,
        other => {
            return Err(Error::InvalidConfig(format!("unknown link `{other}`")));
        }
    };

    let raw = Dataset::new(x, y, a, sigma)?;
    let (data, transform) = whiten(&raw)?;
    let n = data.n();
    let penalty = Penalty::ridge(args.lambda)?;
    let fit = fit_outcome(&data, &penalty, WeightScheme::Unit, None)?;
    let dof = dof_for_outcome(&fit, &data, &penalty)?;

    let report: DebiasReport = match args.method.as_str() {
        "ridge" => DebiasReport {
            method: DebiasMethod::Naive,
            theta0_de: fit.intercept,
            theta_de: fit.coef.clone(),
            mu_out_de: fit.g_computation_mean(&data),
            tau_hat: f64::NAN,
        },
        "debias-naive" => debias_naive(
            &fit,
            &data,
            &dof,
            &MeanEstimate::Sample,
            DebiasMethod::Naive,
        )?,
        "sca-moment" => {
            let stats = summarize(&data, &link)?;
            let beta = shrinkage_moment(&stats);
            let route = PropensityRoute::Moment;
            let theta_de = debias_propensity(&data, &beta, route)?;
            let infl = influence_vectors(&fit, &data, &dof, route)?;
            let adj = compute_dbadj(&fit, &data, &dof, &stats, &theta_de, &infl, &beta)?;
            debias_empirical_sca(
                &fit,
                &data,
                &dof,
                &adj,
                &theta_de,
                DebiasMethod::EmpiricalScaMoment,
            )?
        }
        "sca-mest" => {
            let stats = summarize(&data, &link)?;
            let loss = PropensityLoss::ShiftedSquare;
            let prop_fit = fit_propensity_m(&data, &penalty, loss)?;
            let prop_dof = dof_for_propensity(&prop_fit, &data, &penalty, loss)?;
            let beta = shrinkage_mestimation(&data, &prop_fit, &prop_dof, &stats, loss, &link)?;
            let route = PropensityRoute::MEstimation {
                fit: &prop_fit,
                dof: &prop_dof,
            };
            let theta_de = debias_propensity(&data, &beta, route)?;
            let infl = influence_vectors(&fit, &data, &dof, route)?;
            let adj = compute_dbadj(&fit, &data, &dof, &stats, &theta_de, &infl, &beta)?;
            debias_empirical_sca(
                &fit,
                &data,
                &dof,
                &adj,
                &theta_de,
                DebiasMethod::EmpiricalScaMest,
            )?
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "estimate supports ridge | debias-naive | sca-moment | sca-mest, got `{other}`"
            )));
        }
    };

    println!("n = {n}, p = {p}, observed = {}", data.n_observed());
    println!("mu_out_de = {:.10}", report.mu_out_de);
    println!("theta0_de = {:.10}", report.theta0_de);
    if report.tau_hat.is_finite() {
        println!("tau_hat = {:.10}", report.tau_hat);
        println!(
            "approx 95% CI for mu_out: [{:.10}, {:.10}]",
            report.mu_out_de - 1.96 * report.tau_hat / (n as f64).sqrt(),
            report.mu_out_de + 1.96 * report.tau_hat / (n as f64).sqrt()
        );
    }

    if let Some(out) = args.out {
        // Coefficients in the original coordinates; per-coordinate standard
        // errors need the whitened scale, so both are emitted.
        let theta_orig = transform.unwhiten_coef(&report.theta_de);
        let se = report.tau_hat / (n as f64).sqrt();
        let mut csv = String::from("index,theta_de,theta_de_whitened,se_whitened\n");
        for j in 0..p {
            csv.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e}\n",
                j, theta_orig[j], report.theta_de[j], se
            ));
        }
        std::fs::write(&out, csv)?;
        println!("wrote coefficients to {}", out.display());
    }
    Ok(ExitCode::SUCCESS)
}
