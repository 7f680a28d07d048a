use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gelmatch::hardening::MatchingMode;
use gelmatch::io::config::RunConfig;
use gelmatch::io::overlay::write_overlay;
use gelmatch::io::report::AlignmentReport;
use gelmatch::io::spotfile::{read_spot_file, write_spot_file};
use gelmatch::io::write_atomic;
use gelmatch::model::AffineTransform;
use gelmatch::pipeline::{align, screen_markers};
use gelmatch::synth::{generate, SynthParams};
use gelmatch::{Error, Result};
use serde_json::json;

/// Affine alignment of 2-D spot tables with partially labeled markers.
///
/// Exit status: 0 success, 2 malformed input or configuration,
/// 3 degenerate geometry or too few markers, 4 infeasible matching, 1 other.
#[derive(Parser)]
#[command(name = "gelmatch", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, env = "GELMATCH_CONFIG")]
    config: Option<PathBuf>,

    /// Log progress and write the EM trace to stderr as JSON lines.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align the observed spots to the reference spots.
    Align {
        /// Reference spot table.
        mu: PathBuf,
        /// Observed spot table.
        x: PathBuf,
        /// Report path; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Also draw the result as SVG.
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Screen markers for misallocation without aligning.
    QcMarkers {
        mu: PathBuf,
        x: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Write a synthetic pair of spot tables with ground truth.
    Synth(SynthArgs),
    /// Draw an existing report as SVG.
    Overlay {
        report: PathBuf,
        mu: PathBuf,
        x: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Args, Default)]
struct RunFlags {
    /// Prior strategy: gaussian, cluster or gross.
    #[arg(long)]
    prior: Option<String>,
    /// Marker-prior variance; defaults to sigma^2.
    #[arg(long)]
    sigma_star2: Option<f64>,
    /// Prior probability that a labeled marker is correctly allocated.
    #[arg(long)]
    p_m: Option<f64>,
    /// Cluster prior radius in pixels.
    #[arg(long)]
    cluster_radius: Option<f64>,
    /// Convergence exponent: stop at mean squared posterior change <= 10^-l.
    #[arg(short = 'l', long = "l")]
    l: Option<u32>,
    /// EM iteration cap.
    #[arg(long)]
    max_iterations: Option<usize>,
    /// hard (one-to-one) or soft (many-to-one).
    #[arg(long)]
    matching: Option<MatchingMode>,
    /// Background box margin in multiples of sigma.
    #[arg(long)]
    omega_margin: Option<f64>,
    /// Fix sigma^2 instead of estimating it.
    #[arg(long)]
    sigma2: Option<f64>,
    /// Floor for an estimated sigma^2.
    #[arg(long)]
    min_sigma2: Option<f64>,
    /// Screen markers for misallocation before aligning.
    #[arg(long)]
    marker_qc: bool,
    /// Least-median-of-squares scale and start for marker screening.
    #[arg(long)]
    robust_scale: bool,
}

impl RunFlags {
    fn apply(self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(v) = self.prior {
            cfg.prior = v;
        }
        if let Some(v) = self.sigma_star2 {
            cfg.sigma_star2 = Some(v);
        }
        if let Some(v) = self.p_m {
            cfg.p_m = v;
        }
        if let Some(v) = self.cluster_radius {
            cfg.cluster_radius = Some(v);
        }
        if let Some(v) = self.l {
            cfg.l = v;
        }
        if let Some(v) = self.max_iterations {
            cfg.max_iterations = v;
        }
        if let Some(v) = self.matching {
            cfg.matching = v;
        }
        if let Some(v) = self.omega_margin {
            cfg.omega_margin = v;
        }
        if let Some(v) = self.sigma2 {
            cfg.sigma2 = Some(v);
        }
        if let Some(v) = self.min_sigma2 {
            cfg.min_sigma2 = v;
        }
        cfg.marker_qc |= self.marker_qc;
        cfg.robust_scale |= self.robust_scale;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving mu.tsv, x.tsv and truth.json.
    #[arg(short, long)]
    out_dir: PathBuf,
    /// Defaults to the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    n_points: usize,
    #[arg(long, default_value_t = 12)]
    n_markers: usize,
    #[arg(long, default_value_t = 280.0)]
    width: f64,
    #[arg(long, default_value_t = 220.0)]
    height: f64,
    #[arg(long, default_value_t = 12.0)]
    min_separation: f64,
    /// Warp as a11,a12,a21,a22,b1,b2.
    #[arg(long, value_delimiter = ',', num_args = 6, allow_negative_numbers = true)]
    warp: Option<Vec<f64>>,
    #[arg(long, default_value_t = 2.0)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0.0)]
    spurious_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    missing_rate: f64,
    #[arg(long, default_value_t = 0)]
    corrupt_markers: usize,
    #[arg(long, default_value_t = 40.0)]
    corrupt_displacement: f64,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Align {
            mu,
            x,
            out,
            overlay,
            run,
        } => {
            let cfg = run.apply(load_config(config)?)?;
            let mu_t = read_spot_file(&mu)?;
            let x_t = read_spot_file(&x)?;
            let a = align(&mu_t, &x_t, &cfg)?;
            if cli.verbose {
                for rec in &a.trace {
                    eprintln!("{}", serde_json::to_string(rec).expect("trace serializes"));
                }
            }
            log::info!(
                "{} of {} observed spots matched after {} iterations",
                a.report.n_matched,
                x_t.len(),
                a.report.iterations
            );
            emit(out.as_deref(), &a.report.to_json())?;
            if let Some(p) = overlay {
                write_overlay(&p, &a.report, &mu_t, &x_t)?;
            }
        }
        Command::QcMarkers { mu, x, out, run } => {
            let cfg = run.apply(load_config(config)?)?;
            let screen = screen_markers(&read_spot_file(&mu)?, &read_spot_file(&x)?, &cfg)?;
            let doc = json!({
                "schema_version": gelmatch::io::report::SCHEMA_VERSION,
                "cases": screen.cases,
                "screened_labels": screen.labels,
                "retained_labels": screen.retained_labels(),
                "excluded_labels": screen.excluded_labels(),
                "qc": screen.report,
            });
            let mut text = serde_json::to_string_pretty(&doc).expect("qc serializes");
            text.push('\n');
            emit(out.as_deref(), &text)?;
        }
        Command::Synth(s) => {
            let cfg = load_config(config)?;
            let warp = match s.warp {
                Some(w) => AffineTransform::from_2d([[w[0], w[1]], [w[2], w[3]]], [w[4], w[5]])?,
                None => SynthParams::default().warp,
            };
            let params = SynthParams {
                seed: s.seed.unwrap_or(cfg.seed),
                n_points: s.n_points,
                n_markers: s.n_markers,
                width: s.width,
                height: s.height,
                min_separation: s.min_separation,
                warp,
                noise_sd: s.noise_sd,
                spurious_rate: s.spurious_rate,
                missing_rate: s.missing_rate,
                corrupt_markers: s.corrupt_markers,
                corrupt_displacement: s.corrupt_displacement,
            };
            let pair = generate(&params)?;
            std::fs::create_dir_all(&s.out_dir)
                .map_err(|e| Error::io(format!("creating {}", s.out_dir.display()), e))?;
            write_spot_file(&s.out_dir.join("mu.tsv"), &pair.mu)?;
            write_spot_file(&s.out_dir.join("x.tsv"), &pair.x)?;
            let truth = json!({ "params": params, "truth": pair.truth });
            let mut text = serde_json::to_string_pretty(&truth).expect("truth serializes");
            text.push('\n');
            write_atomic(&s.out_dir.join("truth.json"), text.as_bytes())?;
        }
        Command::Overlay { report, mu, x, out } => {
            let r = AlignmentReport::read(&report)?;
            write_overlay(&out, &r, &read_spot_file(&mu)?, &read_spot_file(&x)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
