use std::path::{Path, PathBuf};

use log::info;
use nalgebra::DMatrix;
use nimc_core::data::{gen_gaussian_features, gen_truth, perturb_within, random_init, sample_observations, TruthSpec};
use nimc_core::hessian::{
    assemble_empirical_hessian, assemble_relu_fixed_hessian, condition_numbers, population_hessian_mc, spectrum, theoretical_lambda_min_bound,
    HessianMatrix,
};
use nimc_core::io;
use nimc_core::optimizer::{contraction_rate, relative_test_error, train, Plateau, Resample, StepSize, TrainConfig};
use nimc_core::pipelines::{
    cluster_pipeline, gaussian_blobs, pu_eval, recovery_grid, rff, rmse_eval, ClusterConfig, ClusterTask, GridConfig, GRID_MAX_ITERS, GRID_PLATEAU,
};
use nimc_core::tensor_init::{min_cosine, tensor_initialize, M3Estimator, TensorInitConfig};
use nimc_core::{moment_table, ActivationKind, FactorPair, FeatureSet, NimcError, ObservationSet, ReluFixedRow, RngSeed};

use crate::args::*;
use crate::report::RunReport;
use crate::CliError;

type Res<T> = std::result::Result<T, CliError>;

const SEED_TRUTH: u64 = 0;
const SEED_FEATURES: u64 = 1;
const SEED_OBS: u64 = 2;
const SEED_INIT: u64 = 3;
const SEED_TRAIN: u64 = 4;
const SEED_AUX: u64 = 5;

fn usage<T>(msg: impl Into<String>) -> Res<T> {
    Err(CliError::Usage(msg.into()))
}

fn activation(c: &Common, default: ActivationKind) -> ActivationKind {
    c.activation.unwrap_or(default)
}

fn base_seed(c: &Common) -> RngSeed {
    RngSeed::new(c.seed.unwrap_or(0))
}

fn out_dir(c: &Common) -> Res<Option<PathBuf>> {
    match &c.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
            Ok(Some(dir.clone()))
        }
        None => Ok(None),
    }
}

fn parse_list<T: std::str::FromStr>(name: &str, s: &str) -> Res<Vec<T>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<T>().map_err(|_| CliError::Usage(format!("--{name}: '{}' is not a valid value", t.trim()))))
        .collect()
}

fn write_text(report: &mut RunReport, path: &Path, text: &str) -> Res<()> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    report.output(path);
    Ok(())
}

fn save_matrix(report: &mut RunReport, path: &Path, m: &DMatrix<f64>) -> Res<()> {
    write_text(report, path, &io::matrix_to_string(m))
}

/// Features, observations and (when known) the ground truth for one run.
struct Problem {
    fs: FeatureSet,
    obs: ObservationSet,
    truth: Option<FactorPair>,
}

struct Dims {
    d1: usize,
    d2: usize,
    k: usize,
    n1: usize,
    n2: usize,
    m: usize,
}

fn dims(s: &Shape) -> Dims {
    let d = s.d.unwrap_or(10);
    let n = s.n.unwrap_or(100);
    Dims {
        d1: s.d1.unwrap_or(d),
        d2: s.d2.unwrap_or(d),
        k: s.k.unwrap_or(5),
        n1: s.n1.unwrap_or(n),
        n2: s.n2.unwrap_or(n),
        m: s.m.unwrap_or(2000),
    }
}

fn truth_spec(kappa: Option<f64>) -> TruthSpec {
    kappa.map_or(TruthSpec::Gaussian, |kappa| TruthSpec::Conditioned { kappa })
}

fn problem(c: &Common, s: &Shape, kind: ActivationKind) -> Res<Problem> {
    let seed = base_seed(c);
    if let Some(dir) = &s.data {
        let fs = io::load_features(dir.join("X.txt"), dir.join("Y.txt"))?;
        let obs = io::load_observations_for(dir.join("obs.csv"), &fs)?;
        let truth = if dir.join("U.txt").exists() && dir.join("V.txt").exists() {
            Some(io::load_factors(dir.join("U.txt"), dir.join("V.txt"), kind)?)
        } else {
            None
        };
        info!("loaded {} observations on a {}x{} grid from {}", obs.len(), fs.n1(), fs.n2(), dir.display());
        return Ok(Problem { fs, obs, truth });
    }
    let d = dims(s);
    let truth = gen_truth(kind, d.d1, d.d2, d.k, truth_spec(s.kappa), seed.substream(SEED_TRUTH))?;
    let fs = gen_gaussian_features(d.n1, d.n2, d.d1, d.d2, seed.substream(SEED_FEATURES))?;
    let obs = sample_observations(&fs, &truth, d.m, seed.substream(SEED_OBS))?;
    Ok(Problem { fs, obs, truth: Some(truth) })
}

fn rank_of(p: &Problem, s: &Shape) -> usize {
    p.truth.as_ref().map_or_else(|| dims(s).k, |t| t.rank())
}

fn train_config(o: &Optim, seed: RngSeed, default_iters: usize, default_plateau: Option<Plateau>) -> Res<TrainConfig> {
    let resample: Resample = match &o.resample {
        Some(r) => r.parse().map_err(|e: NimcError| CliError::Usage(format!("--resample: {e}")))?,
        None => Resample::None,
    };
    let plateau = match (o.plateau_window, o.plateau_tol) {
        (None, None) => default_plateau,
        (w, t) => Some(Plateau { window: w.unwrap_or(500), rel_tol: t.unwrap_or(1e-4) }),
    };
    let cfg = TrainConfig {
        step_size: o.eta.map_or(StepSize::Probe, StepSize::Fixed),
        max_iters: o.max_iters.unwrap_or(default_iters),
        resample,
        tolerance: o.tolerance.unwrap_or(1e-3),
        seed,
        n_test: o.n_test.unwrap_or(100),
        plateau,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn moments(a: &MomentsArgs, r: &mut RunReport) -> Res<()> {
    let kind = activation(&a.common, ActivationKind::Sigmoid);
    let t = moment_table(kind);
    let (first, second) = t.rho_terms();
    r.metric("activation", kind);
    r.metric("alpha10", t.alpha10);
    r.metric("alpha11", t.alpha11);
    r.metric("alpha20", t.alpha20);
    r.metric("beta10", t.beta10);
    r.metric("beta11", t.beta11);
    r.metric("beta12", t.beta12);
    r.metric("beta20", t.beta20);
    r.metric("beta22", t.beta22);
    r.metric("gamma_cross", t.gamma_cross);
    r.metric("rho_first", first);
    r.metric("rho_second", second);
    r.metric("rho", t.rho);
    if let Some(dir) = out_dir(&a.common)? {
        let mut csv = String::from("name,value\n");
        for (name, v) in r.metrics.iter().filter(|(_, v)| v.is_f64()) {
            csv.push_str(&format!("{name},{}\n", io::fmt_f64(v.as_f64().unwrap_or(f64::NAN))));
        }
        write_text(r, &dir.join("moments.csv"), &csv)?;
    }
    Ok(())
}

pub fn gen_synthetic(a: &GenArgs, r: &mut RunReport) -> Res<()> {
    let Some(dir) = out_dir(&a.common)? else {
        return usage("gen-synthetic needs --out");
    };
    if a.shape.data.is_some() {
        return usage("gen-synthetic does not take --data");
    }
    let kind = activation(&a.common, ActivationKind::Sigmoid);
    let p = problem(&a.common, &a.shape, kind)?;
    let truth = p.truth.as_ref().expect("generated problems carry their truth");
    write_text(r, &dir.join("X.txt"), &io::matrix_to_string(p.fs.x()))?;
    write_text(r, &dir.join("Y.txt"), &io::matrix_to_string(p.fs.y()))?;
    write_text(r, &dir.join("U.txt"), &io::matrix_to_string(truth.u()))?;
    write_text(r, &dir.join("V.txt"), &io::matrix_to_string(truth.v()))?;
    write_text(r, &dir.join("obs.csv"), &io::observations_to_string(&p.obs))?;
    r.metric("n1", p.fs.n1());
    r.metric("n2", p.fs.n2());
    r.metric("observations", p.obs.len());
    let cond = condition_numbers(truth)?;
    r.metric("kappa_u", cond.kappa_u);
    r.metric("kappa_v", cond.kappa_v);
    Ok(())
}

pub fn train_cmd(a: &TrainArgs, r: &mut RunReport) -> Res<()> {
    let kind = activation(&a.common, ActivationKind::Sigmoid);
    let seed = base_seed(&a.common);
    let p = problem(&a.common, &a.shape, kind)?;
    let k = rank_of(&p, &a.shape);
    let cfg = train_config(&a.optim, seed.substream(SEED_TRAIN), 1000, None)?;
    let init = a.init.as_deref().unwrap_or("random");
    let fp0 = if init == "random" {
        random_init(kind, p.fs.d1(), p.fs.d2(), k, seed.substream(SEED_INIT))?
    } else if init == "tensor" {
        let ti = tensor_initialize(&p.fs, &p.obs, k, kind, &TensorInitConfig::default(), seed.substream(SEED_AUX))?;
        ti.init
    } else if let Some(radius) = init.strip_prefix("perturb:") {
        let radius: f64 = radius.parse().map_err(|_| CliError::Usage(format!("--init: bad radius '{radius}'")))?;
        let Some(truth) = &p.truth else {
            return usage("--init perturb needs a known ground truth");
        };
        perturb_within(truth, radius, seed.substream(SEED_INIT))?
    } else {
        return usage(format!("--init must be random, tensor or perturb:<radius>, got '{init}'"));
    };
    if matches!(cfg.resample, Resample::FreshPerIter { .. }) && p.truth.is_none() {
        return usage("fresh resampling needs a known ground truth");
    }
    info!("training {} parameters on {} observations", fp0.num_params(), p.obs.len());
    let (fp, trace) = train(&fp0, p.truth.as_ref(), &p.fs, &p.obs, &cfg)?;
    let last = trace.last().expect("trace holds the starting point");
    r.metric("step_size", trace.step_size);
    r.metric("iterations", last.iter);
    r.metric("stop", trace.stop);
    r.metric("final_loss", last.loss);
    r.metric("final_grad_norm", last.grad_norm);
    r.metric("final_test_error", trace.final_test_error());
    r.metric("final_param_error", last.param_error);
    r.metric("contraction_rate", contraction_rate(&trace).ok());
    if let Some(dir) = out_dir(&a.common)? {
        write_text(r, &dir.join("trace.csv"), &trace.to_csv())?;
        save_matrix(r, &dir.join("U_hat.txt"), fp.u())?;
        save_matrix(r, &dir.join("V_hat.txt"), fp.v())?;
    }
    Ok(())
}

fn layout_is_fixed_row(layout: &Option<String>) -> Res<bool> {
    match layout.as_deref().unwrap_or("full") {
        "full" => Ok(false),
        "relu-fixed-row" => Ok(true),
        other => usage(format!("--layout must be full or relu-fixed-row, got '{other}'")),
    }
}

fn spectrum_metrics(r: &mut RunReport, h: &HessianMatrix, truth: &FactorPair) -> Res<()> {
    let s = spectrum(h)?;
    r.metric("dimension", h.dim());
    r.metric("samples", h.samples);
    r.metric("lambda_min", s.lambda_min);
    r.metric("lambda_max", s.lambda_max);
    r.metric("asymmetry", h.asymmetry);
    if h.entry_se.is_some() {
        r.metric("spectral_se", h.spectral_se());
    }
    r.metric("theoretical_lower_bound", theoretical_lambda_min_bound(truth).ok());
    Ok(())
}

pub fn hessian_probe(a: &HessianProbeArgs, r: &mut RunReport) -> Res<()> {
    let kind = activation(&a.common, ActivationKind::Sigmoid);
    let p = problem(&a.common, &a.shape, kind)?;
    let Some(truth) = &p.truth else {
        return usage("hessian-probe needs a ground truth (U.txt and V.txt)");
    };
    let h = if layout_is_fixed_row(&a.layout)? {
        let rf = ReluFixedRow::from_factors(truth)?;
        assemble_relu_fixed_hessian(&rf, truth, &p.fs, &p.obs)?
    } else {
        assemble_empirical_hessian(truth, truth, &p.fs, &p.obs)?
    };
    spectrum_metrics(r, &h, truth)?;
    if let Some(dir) = out_dir(&a.common)? {
        save_matrix(r, &dir.join("hessian.txt"), &h.h)?;
    }
    Ok(())
}

pub fn population_hessian(a: &PopulationArgs, r: &mut RunReport) -> Res<()> {
    let kind = activation(&a.common, ActivationKind::Sigmoid);
    let seed = base_seed(&a.common);
    let d = a.d.unwrap_or(4);
    let (d1, d2, k) = (a.d1.unwrap_or(d), a.d2.unwrap_or(d), a.k.unwrap_or(d));
    let spec = a.truth.as_deref().unwrap_or("identity");
    let truth = if spec == "identity" {
        if k > d1 || k > d2 {
            return usage("identity truth needs k <= d1 and k <= d2");
        }
        FactorPair::new(DMatrix::identity(d1, k), DMatrix::identity(d2, k), kind)?
    } else if spec == "gaussian" {
        gen_truth(kind, d1, d2, k, TruthSpec::Gaussian, seed.substream(SEED_TRUTH))?
    } else if let Some(kappa) = spec.strip_prefix("conditioned:") {
        let kappa: f64 = kappa.parse().map_err(|_| CliError::Usage(format!("--truth: bad kappa '{kappa}'")))?;
        gen_truth(kind, d1, d2, k, TruthSpec::Conditioned { kappa }, seed.substream(SEED_TRUTH))?
    } else {
        return usage(format!("--truth must be identity, gaussian or conditioned:<kappa>, got '{spec}'"));
    };
    let n_mc = a.n_mc.unwrap_or(200_000);
    let mut h = population_hessian_mc(&truth, n_mc, seed.substream(SEED_AUX))?;
    if layout_is_fixed_row(&a.layout)? {
        h = h.drop_first_u_row()?;
    }
    spectrum_metrics(r, &h, &truth)?;
    if let Some(dir) = out_dir(&a.common)? {
        save_matrix(r, &dir.join("hessian.txt"), &h.h)?;
        if let Some(se) = &h.entry_se {
            save_matrix(r, &dir.join("hessian_se.txt"), se)?;
        }
    }
    Ok(())
}

pub fn tensor_init_cmd(a: &TensorInitArgs, r: &mut RunReport) -> Res<()> {
    let kind = activation(&a.common, ActivationKind::Sigmoid);
    let seed = base_seed(&a.common);
    let p = problem(&a.common, &a.shape, kind)?;
    let k = rank_of(&p, &a.shape);
    let estimator = match a.estimator.as_deref().unwrap_or("auto") {
        "auto" => M3Estimator::Auto,
        "empirical" => M3Estimator::Empirical,
        "hermite-projection" => M3Estimator::HermiteProjection,
        other => return usage(format!("--estimator must be auto, empirical or hermite-projection, got '{other}'")),
    };
    let cfg = TensorInitConfig { estimator, ..TensorInitConfig::default() };
    let ti = tensor_initialize(&p.fs, &p.obs, k, kind, &cfg, seed.substream(SEED_AUX))?;
    r.metric("u_weights", &ti.u.weights);
    r.metric("u_norms", &ti.u.norms);
    r.metric("v_weights", &ti.v.weights);
    r.metric("v_norms", &ti.v.norms);
    r.metric("pairing", &ti.pairing);
    if let Some(truth) = &p.truth {
        r.metric("min_cosine_u", min_cosine(ti.init.u(), truth.u())?);
        r.metric("min_cosine_v", min_cosine(ti.init.v(), truth.v())?);
        r.metric("relative_test_error", relative_test_error(&ti.init, truth, 100, seed.substream(SEED_TRAIN))?);
    }
    if let Some(dir) = out_dir(&a.common)? {
        save_matrix(r, &dir.join("U0.txt"), ti.init.u())?;
        save_matrix(r, &dir.join("V0.txt"), ti.init.v())?;
    }
    Ok(())
}

pub fn recovery_grid_cmd(a: &GridArgs, r: &mut RunReport) -> Res<()> {
    let kind = activation(&a.common, ActivationKind::Sigmoid);
    let seed = base_seed(&a.common);
    let (d, k) = (a.d.unwrap_or(10), a.k.unwrap_or(5));
    // Observation budgets per unit are 2kd (sigmoid) and 4kd (ReLU); user steps 10 and 20.
    let (n_step, m_step) = if kind == ActivationKind::ReLU { (20, 4 * k * d) } else { (10, 2 * k * d) };
    let n_values = match &a.n_values {
        Some(s) => parse_list("n-values", s)?,
        None => (1..=10).map(|i| i * n_step).collect(),
    };
    let m_values = match &a.m_values {
        Some(s) => parse_list("m-values", s)?,
        None => (1..=20).map(|i| i * m_step).collect(),
    };
    let trials = a.trials.unwrap_or(5);
    let train = train_config(&a.optim, seed, GRID_MAX_ITERS, Some(GRID_PLATEAU))?;
    let cfg = GridConfig { train, truth: truth_spec(a.kappa) };
    let res = recovery_grid(kind, d, k, &n_values, &m_values, trials, &cfg, seed)?;
    r.metric("cells", n_values.len() * m_values.len());
    r.metric("trials_per_cell", trials);
    r.metric("mean_success_rate", res.success_rate.iter().flatten().sum::<f64>() / (n_values.len() * m_values.len()) as f64);
    r.metric("min_n_full_rate", res.min_n_full_rate());
    r.metric("min_m_full_rate", res.min_m_full_rate());
    r.metric("spearman_n", res.spearman_n());
    r.metric("spearman_m", res.spearman_m());
    if let Some(dir) = out_dir(&a.common)? {
        write_text(r, &dir.join("grid.csv"), &res.to_csv())?;
    }
    Ok(())
}

fn read_labels(path: &Path) -> Res<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| l.trim().parse().map_err(|_| CliError::Runtime(format!("{}:{}: '{}' is not a label", path.display(), n + 1, l.trim()))))
        .collect()
}

pub fn cluster_cmd(a: &ClusterArgs, r: &mut RunReport) -> Res<()> {
    let kind = activation(&a.common, ActivationKind::ReLU);
    let seed = base_seed(&a.common);
    let (mut x, labels) = match (&a.x, &a.labels) {
        (Some(xp), Some(lp)) => (io::load_matrix(xp)?, read_labels(lp)?),
        (None, None) => gaussian_blobs(
            a.clusters.unwrap_or(3),
            a.per_cluster.unwrap_or(50),
            a.d.unwrap_or(5),
            a.separation.unwrap_or(6.0),
            seed.substream(SEED_FEATURES),
        )?,
        _ => return usage("--x and --labels must be given together"),
    };
    if let Some(q) = a.rff_q {
        x = rff(&x, q, a.rff_sigma.unwrap_or(1.0), seed.substream(SEED_AUX))?;
    }
    let k = a.clusters.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let n = x.nrows();
    let task = ClusterTask::sample(x, labels, k, a.m.unwrap_or(20 * n), seed.substream(SEED_OBS))?;
    let mut cfg = ClusterConfig { activation: kind, ..ClusterConfig::default() };
    if let Some(eta) = a.eta {
        cfg.step_size = StepSize::Fixed(eta);
    }
    if let Some(it) = a.max_iters {
        cfg.max_iters = it;
    }
    let out = cluster_pipeline(&task, &cfg, a.k_latent.unwrap_or(10), seed.substream(SEED_TRAIN))?;
    r.metric("error", out.error);
    r.metric("iterations", out.iterations);
    r.metric("initial_loss", out.initial_loss);
    r.metric("final_loss", out.final_loss);
    r.metric("step_size", out.step_size);
    if let Some(dir) = out_dir(&a.common)? {
        let mut csv = String::from("item,label\n");
        for (i, l) in out.labels.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        let path = dir.join("labels.csv");
        write_text(r, &path, &csv)?;
        // Relative to --out so the report does not depend on where it was written.
        r.metric("labels_file", "labels.csv");
    }
    Ok(())
}

fn factor_problem(f: &FactorFiles, kind: ActivationKind) -> Res<(FactorPair, FeatureSet)> {
    let need = |p: &Option<PathBuf>, name: &str| p.clone().ok_or_else(|| CliError::Usage(format!("--{name} is required")));
    let fp = io::load_factors(need(&f.u, "u")?, need(&f.v, "v")?, kind)?;
    let fs = io::load_features(need(&f.x, "x")?, need(&f.y, "y")?)?;
    Ok((fp, fs))
}

pub fn rmse_cmd(a: &RmseArgs, r: &mut RunReport) -> Res<()> {
    let kind = activation(&a.common, ActivationKind::Sigmoid);
    let (fp, fs) = factor_problem(&a.files, kind)?;
    let Some(obs_path) = &a.obs else {
        return usage("--obs is required");
    };
    let obs = io::load_observations_for(obs_path, &fs)?;
    r.metric("rmse", rmse_eval(&fp, &fs, &obs)?);
    r.metric("test_observations", obs.len());
    Ok(())
}

pub fn pu_cmd(a: &PuArgs, r: &mut RunReport) -> Res<()> {
    let kind = activation(&a.common, ActivationKind::Sigmoid);
    let (fp, fs) = factor_problem(&a.files, kind)?;
    let Some(pos_path) = &a.positives else {
        return usage("--positives is required");
    };
    let positives: Vec<(usize, usize)> = io::load_observations_for(pos_path, &fs)?.iter().map(|o| (o.i, o.j)).collect();
    let r_values = match &a.r_values {
        Some(s) => parse_list("r-values", s)?,
        None => vec![1, 5, 10, 20, 50, 100],
    };
    let res = pu_eval(&fp, &fs, &positives, &r_values)?;
    r.metric("columns_evaluated", res.columns_evaluated);
    r.metric("r_values", &res.r_values);
    r.metric("cumulative", &res.cumulative);
    if let Some(dir) = out_dir(&a.common)? {
        write_text(r, &dir.join("cumulative.csv"), &res.cumulative_csv())?;
        write_text(r, &dir.join("precision_recall.csv"), &res.precision_recall_csv())?;
    }
    Ok(())
}
