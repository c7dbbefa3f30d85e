use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use mahakit::bundle::{load_bundle, write_synth_bundle};
use mahakit::diagnostics::alpha_sweep;
use mahakit::eval::{
    bundle_info, check_methods, fit_bundle, run_diagnostics, run_eval, score_set, training_data,
    DiagnosticsConfig, EvalConfig, ID_TEST,
};
use mahakit::npy;
use mahakit::report::{
    alpha_sweep_csv, histogram_csv, qq_csv, write_text, DiagnoseReport, FitFile, SCHEMA_VERSION,
};
use mahakit::scorers::{build_scorer, Fits};
use mahakit::synth::{generate, SynthSpec};
use mahakit::threads::{configure_global_pool, threads_from_env};
use mahakit::{Error, Method, Result, ScorerConfig, Shrinkage, VERSION};

/// Post-hoc OOD detection on pre-extracted features.
#[derive(Parser, Debug)]
#[command(name = "mahakit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Normalize {
    On,
    Off,
    Both,
}

#[derive(clap::Args, Debug)]
struct ScorerArgs {
    /// JSON file with scorer hyperparameters; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Covariance shrinkage: `auto` or a fixed factor.
    #[arg(long)]
    shrinkage: Option<Shrinkage>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ScorerArgs {
    fn resolve(&self) -> Result<ScorerConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
            }
            None => ScorerConfig::default(),
        };
        if let Some(s) = self.shrinkage {
            c.shrinkage = s;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit class-conditional Gaussians on the training split.
    Fit {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        normalize: Normalize,
        #[arg(long, default_value = "auto")]
        shrinkage: Shrinkage,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the ID test split or one OOD set with one method.
    Score {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        method: Method,
        /// OOD set name; the ID test split when omitted.
        #[arg(long)]
        set: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// FPR@95 and AUROC of several methods on every OOD set.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        /// Comma-separated method names, or `all`.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also compute norm statistics, QQ quantiles and variance deviation.
        #[arg(long)]
        diagnostics: bool,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// Gaussianity and norm diagnostics of the training features.
    Diagnose {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        norm_stats: bool,
        /// Number of QQ quantiles.
        #[arg(long, value_name = "Q")]
        qq: Option<usize>,
        #[arg(long)]
        deviation: bool,
        /// Correlate this method's scores with feature norms.
        #[arg(long, value_name = "METHOD")]
        correlation: Vec<Method>,
        #[arg(long, default_value_t = mahakit::diagnostics::DEFAULT_HISTOGRAM_BINS)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
        /// Directory for histogram and QQ CSV files.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// FPR@95 while scaling one OOD set's features by each alpha.
    SweepAlpha {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        set: String,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "auto")]
        shrinkage: Shrinkage,
    },
    /// Generate a synthetic bundle.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    if names.len() == 1 && names[0].trim().eq_ignore_ascii_case("all") {
        return Ok(Method::ALL.to_vec());
    }
    let methods = names
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse())
        .collect::<Result<Vec<Method>>>()?;
    check_methods(&methods)?;
    Ok(methods)
}

fn fit(bundle: &Path, normalize: Normalize, shrinkage: Shrinkage, out: &Path) -> Result<()> {
    let b = load_bundle(bundle)?;
    let (plain, normalized) = match normalize {
        Normalize::On => (false, true),
        Normalize::Off => (true, false),
        Normalize::Both => (true, true),
    };
    let fits = fit_bundle(&b, plain, normalized, shrinkage)?;
    let parts: Vec<&mahakit::GaussianFit> = fits
        .plain
        .iter()
        .chain(&fits.normalized)
        .map(Arc::as_ref)
        .collect();
    FitFile::new(shrinkage, &parts).write(out)
}

fn score(
    bundle: &Path,
    fit_path: &Path,
    method: Method,
    set: Option<&str>,
    out: &Path,
    config: ScorerConfig,
) -> Result<()> {
    let b = load_bundle(bundle)?;
    let (plain, normalized) = FitFile::read(fit_path)?.into_fits()?;
    for f in plain.iter().chain(&normalized) {
        if f.dim() != b.dim() || f.n_classes() != b.n_classes() {
            return Err(Error::FitFile(format!(
                "{} was fitted on d={}, C={} but the bundle has d={}, C={}",
                fit_path.display(),
                f.dim(),
                f.n_classes(),
                b.dim(),
                b.n_classes()
            )));
        }
    }
    let fits = Fits {
        plain: plain.map(Arc::new),
        normalized: normalized.map(Arc::new),
    };
    let scorer = build_scorer(method, &config, &training_data(&b), &fits)?;
    let scores = score_set(scorer.as_ref(), &b, set.unwrap_or(ID_TEST))?;
    npy::write_vector(out, &scores.scores)
}

fn diagnose(
    bundle: &Path,
    config: DiagnosticsConfig,
    scorer: ScorerConfig,
    out: &Path,
    plot_dir: Option<&Path>,
) -> Result<()> {
    if config.norm_stats.is_none()
        && config.qq.is_none()
        && !config.deviation
        && config.correlation.is_empty()
    {
        return Err(Error::InvalidConfig(
            "choose at least one of --norm-stats, --qq, --deviation, --correlation".into(),
        ));
    }
    let b = load_bundle(bundle)?;
    let diagnostics = run_diagnostics(&b, &Fits::default(), &config, &scorer)?;
    if let Some(dir) = plot_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", dir.display())))?;
        if let Some(ns) = &diagnostics.norm_stats {
            write_text(
                dir.join("norm_histogram.csv"),
                &histogram_csv(&ns.histogram),
            )?;
        }
        if !diagnostics.qq.is_empty() {
            write_text(dir.join("qq.csv"), &qq_csv(&diagnostics.qq))?;
        }
    }
    DiagnoseReport {
        schema_version: SCHEMA_VERSION,
        toolkit_version: VERSION.to_string(),
        bundle: bundle_info(&b, &bundle.display().to_string()),
        shrinkage: scorer.shrinkage,
        seed: scorer.seed,
        diagnostics,
    }
    .write(out)
}

fn sweep(
    bundle: &Path,
    set: &str,
    alphas: &[f64],
    method: Method,
    shrinkage: Shrinkage,
    out: &Path,
) -> Result<()> {
    let normalized = match method {
        Method::Maha => false,
        Method::MahaPP => true,
        other => {
            return Err(Error::InvalidConfig(format!(
                "sweep-alpha supports maha and maha++, not {other}"
            )))
        }
    };
    if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::InvalidConfig(format!(
            "alphas must be non-negative, got {a}"
        )));
    }
    let b = load_bundle(bundle)?;
    let ood = b.ood(set)?;
    let fit = mahakit::fit(&b.train, &b.train_labels, normalized, shrinkage)?;
    let points = alpha_sweep(&fit, &b.id_test, ood, alphas, method)?;
    write_text(out, &alpha_sweep_csv(&points))
}

fn synth(spec: &Path, out_dir: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", spec.display())))?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", spec.display())))?;
    let data = generate(&spec)?;
    let manifest = write_synth_bundle(out_dir, &spec, &data)?;
    log::info!("wrote {}", manifest.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_global_pool(threads_from_env()?);
    match cli.command {
        Command::Fit {
            bundle,
            normalize,
            shrinkage,
            out,
        } => fit(&bundle, normalize, shrinkage, &out),
        Command::Score {
            bundle,
            fit,
            method,
            set,
            out,
            scorer,
        } => score(
            &bundle,
            &fit,
            method,
            set.as_deref(),
            &out,
            scorer.resolve()?,
        ),
        Command::Eval {
            bundle,
            methods,
            out,
            csv,
            diagnostics,
            scorer,
        } => {
            let methods = parse_methods(&methods)?;
            let config = EvalConfig {
                scorer: scorer.resolve()?,
                diagnostics: diagnostics.then(DiagnosticsConfig::standard),
                ..EvalConfig::default()
            };
            let report = run_eval(&bundle, &methods, &config)?;
            report.write(&out)?;
            if let Some(csv) = csv {
                write_text(csv, &report.to_csv())?;
            }
            Ok(())
        }
        Command::Diagnose {
            bundle,
            norm_stats,
            qq,
            deviation,
            correlation,
            bins,
            out,
            plot_dir,
            scorer,
        } => diagnose(
            &bundle,
            DiagnosticsConfig {
                norm_stats: norm_stats.then_some(bins),
                qq,
                deviation,
                correlation,
            },
            scorer.resolve()?,
            &out,
            plot_dir.as_deref(),
        ),
        Command::SweepAlpha {
            bundle,
            set,
            alphas,
            method,
            out,
            shrinkage,
        } => sweep(&bundle, &set, &alphas, method, shrinkage, &out),
        Command::Synth { spec, out_dir } => synth(&spec, &out_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
