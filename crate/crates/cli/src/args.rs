use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fdrecon::grid::Interval;
use fdrecon::iterative::Strategy;
use fdrecon::reconstruct::Truncation;
use fdrecon::scores::Quadrature;
use fdrecon::simulation::ScoreDraw;
use fdrecon::Method;

/// Reconstruct partially observed functional data and compare reconstruction
/// operators by simulation.
#[derive(Debug, Parser)]
#[command(name = "fdrecon", version, propagate_version = true)]
pub struct Cli {
    /// Worker threads; 0 uses one per core. Results never depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// Report failures as a JSON object on stderr.
    #[arg(long, global = true)]
    pub error_json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate mean, covariance, noise variance and eigensystem; write them as CSV.
    #[command(args_override_self = true)]
    Fit(FitArgs),
    /// Complete the missing parts of curves.
    #[command(args_override_self = true)]
    Reconstruct(ReconstructArgs),
    /// Run a Monte-Carlo comparison of reconstruction methods.
    #[command(args_override_self = true)]
    Simulate(SimulateArgs),
    /// Print the GCV criterion over the candidate truncations for one geometry.
    #[command(args_override_self = true)]
    GcvReport(GcvArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum QuadratureArg {
    Backward,
    Trapezoid,
}

impl From<QuadratureArg> for Quadrature {
    fn from(q: QuadratureArg) -> Self {
        match q {
            QuadratureArg::Backward => Quadrature::Backward,
            QuadratureArg::Trapezoid => Quadrature::Trapezoid,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScoreKind {
    Integral,
    Ce,
}

/// Estimation settings shared by every command that reads a dataset.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Flat key=value file whose keys are long flag names; flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Input CSV with header curve_id,u,y.
    #[arg(long, short, value_name = "FILE")]
    pub input: PathBuf,

    /// Domain as lo,hi; defaults to the range of the data.
    #[arg(long, value_parser = parse_interval)]
    pub domain: Option<Interval>,

    /// Number of equispaced grid points.
    #[arg(long, default_value_t = fdrecon::data::DEFAULT_GRID_LEN)]
    pub grid_len: usize,

    /// Bandwidth for smoothing single curves (alignment anchors).
    #[arg(long, value_parser = parse_bandwidth)]
    pub h_x: Option<f64>,

    /// Bandwidth of the mean smoother.
    #[arg(long, value_parser = parse_bandwidth)]
    pub h_mu: Option<f64>,

    /// Bandwidth of the covariance smoother.
    #[arg(long, value_parser = parse_bandwidth)]
    pub h_gamma: Option<f64>,

    /// Within-curve pairs required for a covariance entry to be estimable.
    #[arg(long, default_value_t = fdrecon::smoothing::DEFAULT_MIN_PAIRS)]
    pub min_pairs: usize,

    /// Fraction of the domain trimmed at each end for the noise variance.
    #[arg(long, default_value_t = fdrecon::smoothing::DEFAULT_TRIM_FRACTION)]
    pub trim_fraction: f64,

    /// Eigenvalues below this multiple of the largest are dropped.
    #[arg(long, default_value_t = fdrecon::eigen::DEFAULT_LAMBDA_REL_FLOOR)]
    pub lambda_floor: f64,

    /// Slack, as a domain fraction, for calling a curve complete.
    #[arg(long, default_value_t = fdrecon::data::DEFAULT_COMPLETE_MARGIN)]
    pub complete_margin: f64,

    /// Riemann rule for integral scores.
    #[arg(long, value_enum, default_value_t = QuadratureArg::Backward)]
    pub quadrature: QuadratureArg,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Directory receiving mean.csv, covariance.csv, mask.csv, eigensystem.csv.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,

    /// Also write scores.csv with every available component per curve.
    #[arg(long)]
    pub emit_scores: bool,

    /// Score type written by --emit-scores.
    #[arg(long, value_enum, default_value_t = ScoreKind::Integral)]
    pub score_method: ScoreKind,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// ano, anoce, ayes, ayesce, pace or kraus.
    #[arg(long, default_value = "ayesce", value_parser = parse_method)]
    pub method: Method,

    /// Truncation: an integer, gcv, or fve[:tau].
    #[arg(long = "K", default_value = "gcv", value_parser = parse_truncation)]
    pub truncation: Truncation,

    /// Comma-separated curve ids; all curves when omitted.
    #[arg(long, value_delimiter = ',')]
    pub curves: Option<Vec<String>>,

    /// Complete curves step by step when the covariance is only partly estimable.
    #[arg(long)]
    pub iterative: bool,

    /// Interval choice of the iterative scheme: greedy-band or app3.
    #[arg(long, default_value = "greedy-band", value_parser = parse_strategy)]
    pub strategy: Strategy,

    /// Maximum number of iterative steps.
    #[arg(long, default_value_t = fdrecon::iterative::DEFAULT_R_MAX)]
    pub rmax: usize,

    /// Add the reconstruction-error variance column.
    #[arg(long)]
    pub error_variance: bool,

    /// Directory receiving one CSV per curve and summary.csv.
    #[arg(long, default_value = "reconstructions")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Flat key=value file whose keys are long flag names; flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Data-generating process.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub dgp: u8,

    /// Curves per replication.
    #[arg(long, default_value_t = 50)]
    pub n: usize,

    /// Observations per curve for the irregular designs (DGP 1 and 2).
    #[arg(long, default_value_t = 15)]
    pub m: usize,

    #[arg(long, default_value_t = 100)]
    pub reps: usize,

    #[arg(long, default_value_t = 1)]
    pub seed: u64,

    /// Comma-separated methods; the process's standard set when omitted.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Option<Vec<Method>>,

    /// Number of target curves, fixed across replications.
    #[arg(long, default_value_t = fdrecon::simulation::DEFAULT_TARGETS)]
    pub targets: usize,

    #[arg(long, default_value_t = fdrecon::data::DEFAULT_GRID_LEN)]
    pub grid_len: usize,

    /// Scale of the random part of the curves.
    #[arg(long, default_value_t = fdrecon::simulation::DEFAULT_AMPLITUDE)]
    pub amplitude: f64,

    /// per-component or per-curve score factors.
    #[arg(long, default_value = "per-component", value_parser = parse_score_draw)]
    pub score_draw: ScoreDraw,

    #[arg(long, value_parser = parse_bandwidth)]
    pub h_x: Option<f64>,

    #[arg(long, value_parser = parse_bandwidth)]
    pub h_mu: Option<f64>,

    #[arg(long, value_parser = parse_bandwidth)]
    pub h_gamma: Option<f64>,

    /// Result table CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Per-target mean reconstructions and truths.
    #[arg(long)]
    pub targets_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GcvArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    #[arg(long, default_value = "ayesce", value_parser = parse_method)]
    pub method: Method,

    /// Use the observed geometry of this curve.
    #[arg(long, conflicts_with = "observed", required_unless_present = "observed")]
    pub curve: Option<String>,

    /// Observed geometry as lo,hi[,lo,hi...].
    #[arg(long, value_parser = parse_intervals)]
    pub observed: Option<Intervals>,

    /// Also write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Intervals(pub Vec<Interval>);

fn numbers(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("{t:?} is not a number")))
        .collect()
}

fn parse_interval(s: &str) -> Result<Interval, String> {
    match numbers(s)?.as_slice() {
        &[lo, hi] => Interval::new(lo, hi).map_err(|e| e.to_string()),
        _ => Err("expected lo,hi".into()),
    }
}

fn parse_intervals(s: &str) -> Result<Intervals, String> {
    let v = numbers(s)?;
    if v.is_empty() || v.len() % 2 != 0 {
        return Err("expected lo,hi pairs".into());
    }
    v.chunks(2)
        .map(|p| Interval::new(p[0], p[1]).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()
        .map(Intervals)
}

fn parse_bandwidth(s: &str) -> Result<f64, String> {
    let h: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if h > 0.0 && h.is_finite() {
        Ok(h)
    } else {
        Err(format!("bandwidth must be positive, got {s}"))
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: fdrecon::Error| e.to_string())
}

fn parse_truncation(s: &str) -> Result<Truncation, String> {
    s.parse().map_err(|e: fdrecon::Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: fdrecon::Error| e.to_string())
}

fn parse_score_draw(s: &str) -> Result<ScoreDraw, String> {
    s.parse().map_err(|e: fdrecon::Error| e.to_string())
}
