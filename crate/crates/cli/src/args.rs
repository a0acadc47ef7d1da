use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nimc_core::ActivationKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "nimc", version, about = "Nonlinear inductive matrix completion toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Gaussian moment constants of an activation.
    Moments(MomentsArgs),
    /// Draw features, a ground truth and observations and write them to --out.
    GenSynthetic(GenArgs),
    /// Gradient descent from a random, tensor or perturbed start.
    Train(TrainArgs),
    /// Empirical Hessian spectrum at the ground truth.
    HessianProbe(HessianProbeArgs),
    /// Monte-Carlo population Hessian spectrum at a ground truth.
    PopulationHessian(PopulationArgs),
    /// Tensor-method initialization (sigmoid).
    TensorInit(TensorInitArgs),
    /// Success-rate grid over user counts and observation counts.
    RecoveryGrid(GridArgs),
    /// Semi-supervised clustering with the weight-tied model.
    Cluster(ClusterArgs),
    /// Root mean squared error of saved factors on a test set.
    RmseEval(RmseArgs),
    /// Ranking curves for positive-unlabeled data.
    PuEval(PuArgs),
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Common {
    /// sigmoid, tanh or relu.
    #[arg(long)]
    pub activation: Option<ActivationKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for output files; created when missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Flat TOML file supplying options not given as flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Problem shape and synthetic data.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Shape {
    /// Sets both --d1 and --d2.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub d1: Option<usize>,
    #[arg(long)]
    pub d2: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Sets both --n1 and --n2.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub n1: Option<usize>,
    #[arg(long)]
    pub n2: Option<usize>,
    /// Observation count.
    #[arg(long)]
    pub m: Option<usize>,
    /// Condition-number cap of the ground truth; omitted means Gaussian factors.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Read X.txt, Y.txt, obs.csv (and U.txt, V.txt when present) from this
    /// directory instead of generating data.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Optim {
    /// Fixed step size; omitted means 0.5 / probed top curvature.
    #[arg(long)]
    pub eta: Option<f64>,
    /// none or fresh:<m>.
    #[arg(long)]
    pub resample: Option<String>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Stop once the relative test error reaches this value.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Stop when the loss improves by less than --plateau-tol over this many iterations.
    #[arg(long)]
    pub plateau_window: Option<usize>,
    #[arg(long)]
    pub plateau_tol: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MomentsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub shape: Shape,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub shape: Shape,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: Optim,
    /// random, tensor or perturb:<radius>.
    #[arg(long)]
    pub init: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct HessianProbeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub shape: Shape,
    /// full or relu-fixed-row.
    #[arg(long)]
    pub layout: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PopulationArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub d1: Option<usize>,
    #[arg(long)]
    pub d2: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// identity, gaussian or conditioned:<kappa>.
    #[arg(long)]
    pub truth: Option<String>,
    /// Monte-Carlo sample count.
    #[arg(long)]
    pub n_mc: Option<usize>,
    /// full or relu-fixed-row.
    #[arg(long)]
    pub layout: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TensorInitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub shape: Shape,
    /// auto, empirical or hermite-projection.
    #[arg(long)]
    pub estimator: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GridArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated user counts (n1 = n2 = n).
    #[arg(long)]
    pub n_values: Option<String>,
    /// Comma-separated observation counts.
    #[arg(long)]
    pub m_values: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: Optim,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ClusterArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Item features (matrix file); omitted means synthetic blobs.
    #[arg(long)]
    pub x: Option<PathBuf>,
    /// Ground-truth labels, one integer per line.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub per_cluster: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    /// Observed similarity entries; defaults to 20 per item.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub k_latent: Option<usize>,
    /// Random Fourier feature count; omitted means raw features.
    #[arg(long)]
    pub rff_q: Option<usize>,
    #[arg(long)]
    pub rff_sigma: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FactorFiles {
    #[arg(long)]
    pub u: Option<PathBuf>,
    #[arg(long)]
    pub v: Option<PathBuf>,
    #[arg(long)]
    pub x: Option<PathBuf>,
    #[arg(long)]
    pub y: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RmseArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub files: FactorFiles,
    /// Test observations (row,col,value).
    #[arg(long)]
    pub obs: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PuArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub files: FactorFiles,
    /// Positive cells in observation format; values are ignored.
    #[arg(long)]
    pub positives: Option<PathBuf>,
    /// Comma-separated cutoffs for the cumulative rank curve.
    #[arg(long)]
    pub r_values: Option<String>,
}
