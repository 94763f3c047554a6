//! Experiment orchestration: JSON-configured studies over the localized
//! solver, with deterministic CSV and manifest artifacts.
//!
//! A run is a pure function of its configuration: calibration, noise, and
//! every Monte Carlo stage draw from counter-based streams keyed by the
//! configured seed, so rerunning a config reproduces every output byte.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as JsonValue};

use crate::localizer::{
    run_localized, run_localized_on_path, run_truncated_hierarchy, truncate_rn, LocalizedRun,
    RunCaps, Termination,
};
use crate::models::{
    linear_additive_model, make_gdiv_model, make_nondivergence_model, moment_verify, ou_oracle,
    phi_n, ModeWeights, ModelParams, ModelSpec, NoiseCoeffs, PathRun, PointwiseFn,
};
use crate::noise::{coarsen, sample_path, standard_normal, NoisePath, NoiseSpec};
use crate::spaces::{theta_lambda, GridField, MonitorSeries, Scale, SpaceTriple};
use crate::stepper::{
    assemble_operator, choose_lambda, estimate_mr_constants, measure_coefficient_lipschitz,
    measure_drift_lipschitz, measure_noise_lipschitz, picard_solve, semi_implicit_step,
    truncated_quasilinearity, MRConstants, SmallnessBudget,
};
use crate::{Error, Result};

/// The experiments the command line can dispatch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Localized runs over many paths: restart records and norm series.
    LocalizedRun,
    /// Truncation ladder with coupled exit times on shared noise.
    TruncationHierarchy,
    /// Moment bound check over initial-state scales.
    MomentVerify,
    /// Additive-noise convergence against per-mode closed forms.
    OuConvergence,
    /// Regularity-constant estimation and the resulting cut-off scale.
    MrEstimate,
    /// Fixed-point iteration diagnostics on frozen-coefficient instances.
    PicardStudy,
    /// Discrete energy identity residuals under step refinement.
    ItoResidual,
    /// Fast self-checks of the library's constructive inequalities.
    PropertySuite,
}

/// Built-in model families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Divergence form, `a(u) = 1 + u^2 / (2 (1 + u^2))`: bounded and
    /// globally Lipschitz.
    DivergenceBounded,
    /// Divergence form, `a(u) = 1 + u^2 / 2`: locally Lipschitz growth.
    DivergenceGrowing,
    /// Non-divergence form on the torus with state- and slope-dependent
    /// coefficient.
    Nondivergence,
    /// Constant-coefficient flow with additive mode noise.
    LinearAdditive,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Ellipticity floor of the diffusion coefficient.
    pub delta0: f64,
    /// Multiplicative mode weights `β_k = beta_amp (k+1)^{-beta_exponent}`.
    pub beta_amp: f64,
    pub beta_exponent: f64,
    /// Multiplicative profile scale: `g(u) = g_amp (1 + tanh u) / 2`.
    pub g_amp: f64,
    /// Additive mode weights `b_k = additive_amp (k+1)^{-additive_exponent}`.
    pub additive_amp: f64,
    pub additive_exponent: f64,
    /// Deterministic forcing `f(x) = forcing_amp · x (1 - x)`.
    pub forcing_amp: f64,
    /// Trace norm the initial state is scaled to.
    pub u0_norm: f64,
    /// Number of low modes the initial state mixes.
    pub u0_modes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::DivergenceBounded,
            delta0: 1.0,
            beta_amp: 0.05,
            beta_exponent: 1.5,
            g_amp: 0.2,
            additive_amp: 0.0,
            additive_exponent: 1.5,
            forcing_amp: 0.0,
            u0_norm: 0.1,
            u0_modes: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripleConfig {
    pub p: f64,
    pub q: f64,
    pub d: usize,
    pub n: usize,
}

impl Default for TripleConfig {
    fn default() -> Self {
        TripleConfig {
            p: 8.0,
            q: 4.0,
            d: 1,
            n: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub seed: u64,
    /// Retained noise modes `K`.
    pub k: usize,
    pub dt: f64,
    /// Time horizon `T`; must be a whole number of steps.
    pub t: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            seed: 42,
            k: 16,
            dt: 1e-4,
            t: 0.25,
        }
    }
}

/// Calibration inputs for the smallness budget. Constants left unset are
/// measured from the model by Monte Carlo probes.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    /// Target value of the contraction bound, in (0, 1).
    pub margin: f64,
    /// Hard cap on the cut-off scale.
    pub lambda_max: f64,
    /// Samples for the regularity-constant estimate.
    pub mr_samples: usize,
    /// Samples for the Lipschitz-constant probes.
    pub calibration_samples: usize,
    pub c_q: Option<f64>,
    pub l_f1: Option<f64>,
    pub l_f2: f64,
    pub l_b1: Option<f64>,
    pub l_b2: f64,
    /// Deterministic regularity constant; measured when unset.
    pub c_mrd: Option<f64>,
    /// Stochastic regularity constant; measured when unset.
    pub c_mrs: Option<f64>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            margin: 0.6,
            lambda_max: 0.2,
            mr_samples: 6,
            calibration_samples: 24,
            c_q: None,
            l_f1: None,
            l_f2: 0.0,
            l_b1: None,
            l_b2: 0.0,
            c_mrd: None,
            c_mrs: None,
        }
    }
}

/// Experiment-specific knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// Step multipliers for refinement studies, coarsest first, ending at 1.
    pub refine_factors: Vec<usize>,
    /// Extra refinement of the reference table below the finest level.
    pub reference_refine: usize,
    /// Moment orders for the moment experiment.
    pub alphas: Vec<f64>,
    /// Smallest truncation radius; levels double from here.
    pub hierarchy_base: f64,
    pub hierarchy_levels: usize,
    pub picard_instances: usize,
    /// Time horizon of each fixed-point solve.
    pub picard_kappa: f64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Modes checked against the closed-form mean and variance.
    pub tracked_modes: usize,
    /// Monitored pairs for the correction-bound sweep.
    pub q_pairs: usize,
    /// Steps per monitored pair.
    pub q_steps: usize,
    /// Number of paths that get a per-step series file.
    pub series_limit: usize,
    /// Strip all noise from the model (deterministic variant).
    pub zero_noise: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            refine_factors: vec![4, 2, 1],
            reference_refine: 4,
            alphas: vec![2.0, 4.0],
            hierarchy_base: 0.12,
            hierarchy_levels: 3,
            picard_instances: 10,
            picard_kappa: 0.05,
            picard_tol: 1e-9,
            picard_max_iter: 32,
            tracked_modes: 5,
            q_pairs: 200,
            q_steps: 16,
            series_limit: 4,
            zero_noise: false,
        }
    }
}

/// One experiment run, fully specified. Everything an artifact depends on
/// lives here; output locations do not.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub triple: TripleConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub caps: RunCaps,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub study: StudyConfig,
}

fn default_n_paths() -> usize {
    8
}

impl ExperimentConfig {
    /// Baseline configuration for one experiment, sized to run in seconds.
    pub fn defaults(experiment: Experiment) -> Self {
        let mut cfg = ExperimentConfig {
            experiment,
            model: ModelConfig::default(),
            triple: TripleConfig::default(),
            noise: NoiseConfig::default(),
            budget: BudgetConfig::default(),
            caps: RunCaps::default(),
            n_paths: default_n_paths(),
            study: StudyConfig::default(),
        };
        match experiment {
            Experiment::LocalizedRun | Experiment::MrEstimate | Experiment::PropertySuite => {}
            Experiment::TruncationHierarchy => {
                cfg.model.kind = ModelKind::DivergenceGrowing;
                cfg.model.forcing_amp = 6.0;
                cfg.model.u0_norm = 0.05;
                cfg.caps.min_segment_steps = 1;
            }
            Experiment::MomentVerify => {
                cfg.model.u0_norm = 2.2;
                cfg.caps.min_segment_steps = 1;
                cfg.n_paths = 50;
            }
            Experiment::OuConvergence => {
                cfg.model.kind = ModelKind::LinearAdditive;
                cfg.model.beta_amp = 0.0;
                cfg.model.g_amp = 0.0;
                cfg.model.additive_amp = 0.05;
                cfg.noise.dt = 2.5e-4;
                cfg.n_paths = 16;
            }
            Experiment::PicardStudy => {
                cfg.triple.n = 32;
                cfg.noise.k = 8;
                cfg.noise.dt = 1e-3;
            }
            Experiment::ItoResidual => {
                cfg.noise.dt = 2.5e-4;
                cfg.n_paths = 16;
            }
        }
        cfg
    }

    /// Number of time steps to the horizon.
    pub fn n_steps(&self) -> usize {
        (self.noise.t / self.noise.dt).round() as usize
    }
}

fn validate_config(config: &ExperimentConfig) -> Result<()> {
    let tr = &config.triple;
    if !(tr.p > 2.0 && tr.q > 2.0) {
        return Err(Error::Config(format!(
            "need p > 2 and q > 2, got p = {}, q = {}",
            tr.p, tr.q
        )));
    }
    let trace = 1.0 - 2.0 / tr.p;
    if !(trace > tr.d as f64 / tr.q) {
        return Err(Error::Config(format!(
            "the trace order 1 - 2/p = {trace} must exceed d/q = {}",
            tr.d as f64 / tr.q
        )));
    }
    let ns = &config.noise;
    if !(ns.dt > 0.0 && ns.dt.is_finite() && ns.t > 0.0 && ns.t.is_finite()) {
        return Err(Error::Config(format!(
            "need positive finite dt and t, got dt = {}, t = {}",
            ns.dt, ns.t
        )));
    }
    if ns.k == 0 {
        return Err(Error::Config("need at least one noise mode".into()));
    }
    let steps = (ns.t / ns.dt).round();
    if !(steps >= 1.0) || (steps * ns.dt - ns.t).abs() > 1e-6 * ns.t {
        return Err(Error::Config(format!(
            "the horizon t = {} must be a whole number of steps of width {}",
            ns.t, ns.dt
        )));
    }
    if config.n_paths == 0 {
        return Err(Error::Config("need at least one path".into()));
    }
    let mc = &config.model;
    if !(mc.delta0 > 0.0) {
        return Err(Error::Config(format!(
            "ellipticity floor must be positive, got {}",
            mc.delta0
        )));
    }
    if !(mc.u0_norm > 0.0 && mc.u0_norm.is_finite()) || mc.u0_modes == 0 {
        return Err(Error::Config(format!(
            "the initial state needs a positive norm and at least one mode, got norm = {}, modes = {}",
            mc.u0_norm, mc.u0_modes
        )));
    }
    for (name, v) in [
        ("beta_amp", mc.beta_amp),
        ("g_amp", mc.g_amp),
        ("additive_amp", mc.additive_amp),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Config(format!(
                "{name} must be finite and nonnegative, got {v}"
            )));
        }
    }
    if !mc.forcing_amp.is_finite()
        || !mc.beta_exponent.is_finite()
        || !mc.additive_exponent.is_finite()
    {
        return Err(Error::Config(
            "model exponents and amplitudes must be finite".into(),
        ));
    }
    if mc.forcing_amp != 0.0 && tr.d == 2 {
        return Err(Error::Config(
            "the built-in forcing profile is one-dimensional".into(),
        ));
    }
    if mc.kind == ModelKind::LinearAdditive && (mc.beta_amp > 0.0 || mc.g_amp > 0.0) {
        return Err(Error::Config(
            "the constant-coefficient additive model takes additive noise only; set beta_amp and g_amp to 0".into(),
        ));
    }
    let b = &config.budget;
    if b.mr_samples == 0 || b.calibration_samples == 0 {
        return Err(Error::Config(
            "calibration needs at least one sample".into(),
        ));
    }
    let st = &config.study;
    if st.refine_factors.is_empty() || st.refine_factors.iter().any(|f| *f == 0) {
        return Err(Error::Config(
            "refine_factors must be nonempty and positive".into(),
        ));
    }
    if st.refine_factors.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Config(
            "refine_factors must be strictly decreasing, coarsest first".into(),
        ));
    }
    if *st.refine_factors.last().unwrap() != 1 {
        return Err(Error::Config(
            "refine_factors must end at the base step (factor 1)".into(),
        ));
    }
    if matches!(
        config.experiment,
        Experiment::OuConvergence | Experiment::ItoResidual
    ) {
        let whole_steps = steps as usize;
        for f in &st.refine_factors {
            if whole_steps % f != 0 {
                return Err(Error::Config(format!(
                    "refine factor {f} does not divide {whole_steps} steps"
                )));
            }
        }
    }
    if st.reference_refine == 0 {
        return Err(Error::Config("reference_refine must be at least 1".into()));
    }
    if st.alphas.iter().any(|a| !(*a >= 2.0)) {
        return Err(Error::Config("moment orders must be at least 2".into()));
    }
    if !(st.hierarchy_base > 0.0) || st.hierarchy_levels == 0 {
        return Err(Error::Config(
            "the truncation ladder needs a positive base and at least one level".into(),
        ));
    }
    if st.picard_instances == 0
        || !(st.picard_kappa > 0.0)
        || !(st.picard_tol > 0.0)
        || st.picard_max_iter == 0
    {
        return Err(Error::Config(
            "fixed-point study parameters must be positive".into(),
        ));
    }
    if st.tracked_modes == 0 {
        return Err(Error::Config("tracked_modes must be at least 1".into()));
    }
    if st.q_pairs == 0 || st.q_steps == 0 {
        return Err(Error::Config(
            "the bound sweep needs pairs and steps".into(),
        ));
    }
    Ok(())
}

/// Fully resolved execution context: the space scale, the model with
/// calibrated constants, the validated budget, and the initial state.
pub struct ResolvedSetup {
    pub triple: Arc<SpaceTriple>,
    pub model: ModelSpec,
    pub budget: SmallnessBudget,
    pub mr: MRConstants,
    pub u0: GridField,
    pub info: ResolvedInfo,
}

/// Calibration results recorded in the manifest.
#[derive(Clone, Debug, Serialize)]
pub struct ResolvedInfo {
    pub lambda: f64,
    pub contraction_bound: f64,
    pub c_q: f64,
    pub l_f1: f64,
    pub l_f2: f64,
    pub l_b1: f64,
    pub l_b2: f64,
    pub c_mrd: f64,
    pub c_mrs: f64,
    pub mr_samples: usize,
    pub u0_trace_norm: f64,
}

fn build_model(mc: &ModelConfig) -> Result<ModelSpec> {
    let params = ModelParams {
        delta0: mc.delta0,
        ..ModelParams::default()
    };
    let g_amp = mc.g_amp;
    let noise = NoiseCoeffs {
        g: if g_amp > 0.0 {
            Some(Arc::new(move |u: f64| g_amp * 0.5 * (1.0 + u.tanh())) as PointwiseFn)
        } else {
            None
        },
        beta: ModeWeights::power_law(mc.beta_amp, mc.beta_exponent),
        additive: ModeWeights::power_law(mc.additive_amp, mc.additive_exponent),
    };
    let mut model = match mc.kind {
        ModelKind::DivergenceBounded => make_gdiv_model(
            Arc::new(|u| 1.0 + 0.5 * u * u / (1.0 + u * u)),
            None,
            noise,
            params,
        )?,
        ModelKind::DivergenceGrowing => {
            make_gdiv_model(Arc::new(|u| 1.0 + 0.5 * u * u), None, noise, params)?
        }
        ModelKind::Nondivergence => make_nondivergence_model(
            Arc::new(|x, u, du| {
                1.0 + 0.25 * u.tanh().powi(2)
                    + 0.1 * (2.0 * std::f64::consts::PI * x).sin().powi(2) / (1.0 + du * du)
            }),
            noise,
            1.0,
            params,
        )?,
        ModelKind::LinearAdditive => linear_additive_model(noise.additive),
    };
    if mc.forcing_amp != 0.0 {
        let amp = mc.forcing_amp;
        model.forcing = Some(Arc::new(move |_t: f64, x: f64| amp * x * (1.0 - x)));
    }
    Ok(model)
}

fn initial_state(mc: &ModelConfig, triple: &SpaceTriple) -> Result<GridField> {
    let modes = mc.u0_modes.min(triple.n_modes());
    let mut u = triple.mode_field(0).scale(0.0);
    for k in 0..modes {
        u.axpy(1.0 / ((k + 1) as f64).powi(2), &triple.mode_field(k));
    }
    let norm = triple.norm_ep(&u)?;
    if !(norm > 0.0) {
        return Err(Error::Config(
            "the initial state degenerated to zero".into(),
        ));
    }
    Ok(u.scale(mc.u0_norm / norm))
}

fn mr_probe_spec(config: &ExperimentConfig) -> NoiseSpec {
    NoiseSpec {
        master_seed: config.noise.seed ^ 0x6d72_7072,
        n_modes: config.noise.k,
        n_steps: 128,
        dt: config.noise.t / 128.0,
    }
}

/// Build the run context: validate the configuration, measure every
/// constant left unset, and pick the cut-off scale.
pub fn resolve(config: &ExperimentConfig) -> Result<ResolvedSetup> {
    validate_config(config)?;
    let scale = match config.model.kind {
        ModelKind::Nondivergence => Scale::NondivergenceForm,
        _ => Scale::DivergenceForm,
    };
    let triple = Arc::new(SpaceTriple::new(
        config.triple.p,
        config.triple.q,
        config.triple.d,
        config.triple.n,
        scale,
    )?);
    let mut model = build_model(&config.model)?;
    if config.study.zero_noise {
        model.noise_g = None;
        model.beta = ModeWeights::zero();
        model.b_add = ModeWeights::zero();
    }
    let b = &config.budget;
    let cal_seed = config.noise.seed ^ 0x6361_6c69;
    let c_q = match b.c_q {
        Some(v) => v,
        None => measure_coefficient_lipschitz(&model, &triple, b.calibration_samples, cal_seed)?,
    };
    let l_f1 = match b.l_f1 {
        Some(v) => v,
        None => measure_drift_lipschitz(&model, &triple, b.calibration_samples, cal_seed ^ 1)?,
    };
    let l_b1 = match b.l_b1 {
        Some(v) => v,
        None => measure_noise_lipschitz(
            &model,
            &triple,
            config.noise.k,
            b.calibration_samples,
            cal_seed ^ 2,
        )?,
    };
    model.c_q = c_q;
    model.l_f1 = l_f1;
    model.l_f2 = b.l_f2;
    model.l_b1 = l_b1;
    model.l_b2 = b.l_b2;
    let u0 = initial_state(&config.model, &triple)?;
    let mr = match (b.c_mrd, b.c_mrs) {
        (Some(d), Some(s)) => MRConstants {
            c_mrd_hat: d,
            c_mrs_hat: s,
            n_samples: 0,
        },
        _ => {
            let op = assemble_operator(&model, &u0.zeros_like())?;
            let eigen = op.eigen().map_err(|_| {
                Error::Config(
                    "regularity constants need a symmetric one-dimensional operator; set c_mrd and c_mrs explicitly for this model"
                        .into(),
                )
            })?;
            estimate_mr_constants(&eigen, &triple, &mr_probe_spec(config), b.mr_samples)?
        }
    };
    let budget = choose_lambda(c_q, l_f1, b.l_f2, l_b1, b.l_b2, &mr, b.margin, b.lambda_max)?;
    let info = ResolvedInfo {
        lambda: budget.lambda,
        contraction_bound: budget.contraction_bound(),
        c_q,
        l_f1,
        l_f2: b.l_f2,
        l_b1,
        l_b2: b.l_b2,
        c_mrd: mr.c_mrd_hat,
        c_mrs: mr.c_mrs_hat,
        mr_samples: mr.n_samples,
        u0_trace_norm: triple.norm_ep(&u0)?,
    };
    Ok(ResolvedSetup {
        triple,
        model,
        budget,
        mr,
        u0,
        info,
    })
}

fn ff(x: f64) -> String {
    format!("{x:.16e}")
}

fn term_str(t: Termination) -> &'static str {
    match t {
        Termination::ReachedT => "reached_t",
        Termination::BlowUpFlag => "blow_up_flag",
        Termination::StepFloor => "step_floor",
    }
}

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let escaped: Vec<String> = row.iter().map(|c| csv_escape(c)).collect();
        out.push_str(&escaped.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::Output(format!("cannot write {}: {e}", path.display())))
}

#[derive(Serialize)]
struct Manifest<'a> {
    code_version: &'static str,
    config: &'a ExperimentConfig,
    resolved: &'a ResolvedInfo,
    summary: &'a JsonValue,
}

fn write_manifest(
    dir: &Path,
    config: &ExperimentConfig,
    resolved: &ResolvedInfo,
    summary: &JsonValue,
) -> Result<()> {
    let manifest = Manifest {
        code_version: env!("CARGO_PKG_VERSION"),
        config,
        resolved,
        summary,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Output(format!("cannot encode the manifest: {e}")))?;
    fs::write(dir.join("manifest.json"), text + "\n")
        .map_err(|e| Error::Output(format!("cannot write the manifest: {e}")))
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Random smooth field: low reference modes with geometrically damped
/// Gaussian amplitudes, a pure function of `(seed, sample, tag)`.
fn probe_field(triple: &SpaceTriple, seed: u64, sample: u64, tag: u64, amp: f64) -> GridField {
    let modes = triple.n_modes().min(12);
    let mut out = triple.mode_field(0).scale(0.0);
    for k in 0..modes {
        let xi = standard_normal(seed, sample, tag, k as u64);
        out.axpy(amp * xi / ((k + 1) as f64).powi(2), &triple.mode_field(k));
    }
    out
}

fn random_walk(
    triple: &SpaceTriple,
    seed: u64,
    sample: u64,
    tag0: u64,
    n_steps: usize,
    dt: f64,
) -> Vec<GridField> {
    let mut walk = Vec::with_capacity(n_steps + 1);
    let mut cur = triple.mode_field(0).scale(0.0);
    walk.push(cur.clone());
    let sdt = dt.sqrt();
    for m in 1..=n_steps {
        cur = cur.add(&probe_field(triple, seed, sample, tag0 + m as u64, sdt));
        walk.push(cur.clone());
    }
    walk
}

/// March the semi-implicit scheme with the operator refreshed at every
/// step and no cut-off correction: the plain reference scheme the
/// localized solver is compared against.
pub fn direct_stepping(
    model: &ModelSpec,
    u0: &GridField,
    noise: &NoisePath,
    t_horizon: f64,
    triple: &SpaceTriple,
) -> Result<Vec<GridField>> {
    let dt = noise.dt;
    if !(t_horizon > 0.0) {
        return Err(Error::Config(format!(
            "the horizon must be positive, got {t_horizon}"
        )));
    }
    let steps = (t_horizon / dt).round() as usize;
    if steps == 0 || steps > noise.n_steps {
        return Err(Error::Config(format!(
            "need 1..={} steps in the noise table, got {steps}",
            noise.n_steps
        )));
    }
    let mut states = Vec::with_capacity(steps + 1);
    states.push(u0.clone());
    for m in 0..steps {
        let cur = states.last().unwrap();
        let op = assemble_operator(model, cur)?;
        let solver = op.solver(dt)?;
        let next = semi_implicit_step(
            cur,
            &op,
            &solver,
            model,
            triple,
            0.0,
            m as f64 * dt,
            noise.row(m),
        )?;
        states.push(next);
    }
    Ok(states)
}

/// Result of the correction-bound sweep: worst relative slack of the size
/// bound `4 C_Q λ^2` and the difference bound `6 C_Q λ · D` over monitored
/// pairs. Negative slack means the bound held with room to spare.
#[derive(Clone, Debug, Serialize)]
pub struct QBoundReport {
    pub n_pairs: usize,
    pub growth_slack: f64,
    pub lipschitz_slack: f64,
    /// Largest final monitor value seen; stays at or below `2λ` by
    /// construction of the pairs.
    pub max_monitor: f64,
}

/// Sweep random monitored path pairs around shared anchors and compare the
/// cut-off correction against its size and Lipschitz bounds. Pairs are
/// jointly rescaled so their monitors end at `2 λ r` for a cycle of
/// `r ≤ 1`, and the cut-off weight follows the running monitor.
#[allow(clippy::too_many_arguments)]
pub fn q_bound_sweep(
    model: &ModelSpec,
    triple: &SpaceTriple,
    lambda: f64,
    n_pairs: usize,
    n_steps: usize,
    dt: f64,
    seed: u64,
) -> Result<QBoundReport> {
    if !(model.c_q > 0.0) {
        return Err(Error::Config(
            "the coefficient sensitivity must be calibrated before the bound sweep".into(),
        ));
    }
    if !(lambda > 0.0 && dt > 0.0) || n_pairs == 0 || n_steps == 0 {
        return Err(Error::Config(
            "the bound sweep needs positive lambda, dt, pairs, and steps".into(),
        ));
    }
    let p = triple.p;
    let couplings = [0.05, 0.15, 0.3];
    let mut growth_slack = f64::NEG_INFINITY;
    let mut lipschitz_slack = f64::NEG_INFINITY;
    let mut max_monitor = 0.0f64;
    let mut used = 0usize;
    for pair in 0..n_pairs {
        let r = 0.25 + 0.75 * (pair % 4) as f64 / 3.0;
        let rho = couplings[pair % couplings.len()];
        let anchor0 = probe_field(triple, seed, pair as u64, 0, 0.5);
        let w1 = random_walk(triple, seed, pair as u64, 1_000, n_steps, dt);
        let extra = random_walk(triple, seed, pair as u64, 100_000, n_steps, dt);
        let w2: Vec<GridField> = w1
            .iter()
            .zip(&extra)
            .map(|(a, b)| a.add(&b.scale(rho)))
            .collect();
        let mut mon_probe1 = MonitorSeries::new();
        let mut mon_probe2 = MonitorSeries::new();
        for m in 1..=n_steps {
            mon_probe1.push(&anchor0.add(&w1[m]), &anchor0, dt, triple)?;
            mon_probe2.push(&anchor0.add(&w2[m]), &anchor0, dt, triple)?;
        }
        let worst = mon_probe1.value().max(mon_probe2.value());
        if !(worst > 0.0) {
            continue;
        }
        used += 1;
        let s = 0.999 * (2.0 * lambda * r) / worst;
        let anchor = anchor0.scale(s);
        let mut mon1 = MonitorSeries::new();
        let mut mon2 = MonitorSeries::new();
        let mut q1_pow = 0.0f64;
        let mut q2_pow = 0.0f64;
        let mut qd_pow = 0.0f64;
        let mut ud_e1_pow = 0.0f64;
        let mut sup_ud = 0.0f64;
        for m in 1..=n_steps {
            let u1 = anchor.add(&w1[m].scale(s));
            let u2 = anchor.add(&w2[m].scale(s));
            mon1.push(&u1, &anchor, dt, triple)?;
            mon2.push(&u2, &anchor, dt, triple)?;
            let th1 = theta_lambda(mon1.value(), lambda)?;
            let th2 = theta_lambda(mon2.value(), lambda)?;
            let q1 = truncated_quasilinearity(&u1, &anchor, th1, model)?;
            let q2 = truncated_quasilinearity(&u2, &anchor, th2, model)?;
            q1_pow += dt * triple.norm_e(&q1)?.powf(p);
            q2_pow += dt * triple.norm_e(&q2)?.powf(p);
            qd_pow += dt * triple.norm_e(&q1.sub(&q2))?.powf(p);
            let du = u1.sub(&u2);
            sup_ud = sup_ud.max(triple.norm_ep(&du)?);
            ud_e1_pow += dt * triple.norm_e1(&du)?.powf(p);
        }
        max_monitor = max_monitor.max(mon1.value()).max(mon2.value());
        let growth_bound = 4.0 * model.c_q * lambda * lambda;
        growth_slack = growth_slack
            .max(q1_pow.powf(1.0 / p) / growth_bound - 1.0)
            .max(q2_pow.powf(1.0 / p) / growth_bound - 1.0);
        let d_norm = sup_ud + ud_e1_pow.powf(1.0 / p);
        if d_norm > 0.0 {
            let diff_bound = 6.0 * model.c_q * lambda * d_norm;
            lipschitz_slack = lipschitz_slack.max(qd_pow.powf(1.0 / p) / diff_bound - 1.0);
        }
    }
    if used == 0 {
        return Err(Error::Solver(
            "every monitored pair degenerated to zero".into(),
        ));
    }
    Ok(QBoundReport {
        n_pairs: used,
        growth_slack,
        lipschitz_slack,
        max_monitor,
    })
}

/// One refinement level of the additive-noise convergence study.
#[derive(Clone, Debug, Serialize)]
pub struct OuLevel {
    pub dt: f64,
    /// Root mean square trace of `u(T)` against the refined per-mode
    /// reference, in the grid L2 norm.
    pub strong_error: f64,
    /// Largest per-mode deviation of the empirical mean from the closed
    /// form, in units of its standard error.
    pub mean_dev_se: f64,
    /// Same for the variance.
    pub var_dev_se: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OuReport {
    pub levels: Vec<OuLevel>,
    pub strong_slope: f64,
    /// Mean and variance checks at the finest level, within 3 standard
    /// errors per tracked mode.
    pub mean_ok: bool,
    pub var_ok: bool,
    pub n_paths: usize,
}

/// Convergence of the semi-implicit scheme on the constant-coefficient
/// additive model, against an exponential-integrator reference on a finer
/// grid driven by the same increments. Weak statistics compare empirical
/// per-mode means and variances at the horizon with their closed forms.
#[allow(clippy::too_many_arguments)]
pub fn ou_study(
    model: &ModelSpec,
    u0: &GridField,
    triple: &SpaceTriple,
    seed: u64,
    t_horizon: f64,
    dt_finest: f64,
    level_factors: &[usize],
    reference_refine: usize,
    n_noise_modes: usize,
    n_paths: usize,
    tracked_modes: usize,
) -> Result<OuReport> {
    if n_paths < 2 {
        return Err(Error::Config(
            "the convergence study needs at least two paths".into(),
        ));
    }
    if level_factors.is_empty() || reference_refine == 0 {
        return Err(Error::Config(
            "need refinement levels and a reference refinement".into(),
        ));
    }
    let steps_fine = (t_horizon / dt_finest).round() as usize;
    if steps_fine == 0 {
        return Err(Error::Config("the horizon is shorter than one step".into()));
    }
    let ref_steps = steps_fine * reference_refine;
    let dt_ref = t_horizon / ref_steps as f64;
    let spec_ref = NoiseSpec {
        master_seed: seed,
        n_modes: n_noise_modes,
        n_steps: ref_steps,
        dt: dt_ref,
    };
    let modes_total = triple.n_modes();
    let tracked = tracked_modes.min(n_noise_modes);
    let c0: Vec<f64> = (0..modes_total)
        .map(|k| crate::spaces::l2h_inner(u0, &triple.mode_field(k)))
        .collect();
    let per_path: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..n_paths)
        .into_par_iter()
        .map(|i| -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
            let table = sample_path(&spec_ref, i as u64)?;
            let mut ref_c = c0.clone();
            for (k, s) in ref_c.iter_mut().enumerate() {
                let lam = triple.eigenvalue(k);
                let decay = (-lam * dt_ref).exp();
                let b_k = if k < n_noise_modes {
                    model.b_add.weight(k)
                } else {
                    0.0
                };
                for m in 0..ref_steps {
                    let inc = if b_k != 0.0 {
                        b_k * table.inc(m, k)
                    } else {
                        0.0
                    };
                    *s = decay * (*s + inc);
                }
            }
            let mut u_ref = u0.scale(0.0);
            for (k, c) in ref_c.iter().enumerate() {
                if *c != 0.0 {
                    u_ref.axpy(*c, &triple.mode_field(k));
                }
            }
            let mut errs = Vec::with_capacity(level_factors.len());
            let mut coeffs = Vec::with_capacity(level_factors.len());
            for f in level_factors {
                let coarse = coarsen(&table, f * reference_refine)?;
                let states = direct_stepping(model, u0, &coarse, t_horizon, triple)?;
                let u_t = states.last().unwrap();
                let d = u_t.sub(&u_ref);
                errs.push(crate::spaces::l2h_inner(&d, &d));
                coeffs.push(
                    (0..tracked)
                        .map(|k| crate::spaces::l2h_inner(u_t, &triple.mode_field(k)))
                        .collect(),
                );
            }
            Ok((errs, coeffs))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = n_paths as f64;
    let mut levels = Vec::with_capacity(level_factors.len());
    for (li, f) in level_factors.iter().enumerate() {
        let strong = (per_path.iter().map(|(e, _)| e[li]).sum::<f64>() / n).sqrt();
        let mut mean_dev = 0.0f64;
        let mut var_dev = 0.0f64;
        for k in 0..tracked {
            let vals: Vec<f64> = per_path.iter().map(|(_, c)| c[li][k]).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            let (mean_or, var_or) = ou_oracle(
                triple.eigenvalue(k),
                model.b_add.weight(k),
                t_horizon,
                c0[k],
            );
            let se_mean = (var / n).sqrt().max(1e-300);
            mean_dev = mean_dev.max((mean - mean_or).abs() / se_mean);
            if var_or > 0.0 {
                let se_var = var_or * (2.0 / (n - 1.0)).sqrt();
                var_dev = var_dev.max((var - var_or).abs() / se_var);
            }
        }
        levels.push(OuLevel {
            dt: dt_finest * *f as f64,
            strong_error: strong,
            mean_dev_se: mean_dev,
            var_dev_se: var_dev,
        });
    }
    let xs: Vec<f64> = levels.iter().map(|l| l.dt.ln()).collect();
    let ys: Vec<f64> = levels
        .iter()
        .map(|l| l.strong_error.max(1e-300).ln())
        .collect();
    let strong_slope = least_squares_slope(&xs, &ys);
    let finest = levels.last().unwrap();
    let (mean_ok, var_ok) = (finest.mean_dev_se <= 3.0, finest.var_dev_se <= 3.0);
    Ok(OuReport {
        levels,
        strong_slope,
        mean_ok,
        var_ok,
        n_paths,
    })
}

/// One frozen-coefficient fixed-point instance.
#[derive(Clone, Debug, Serialize)]
pub struct PicardInstance {
    pub instance: usize,
    pub iterations: usize,
    /// Largest distance ratio past the second iteration; 0 when the
    /// iteration settled before producing two ratios.
    pub max_late_ratio: f64,
    pub lambda: f64,
    pub contraction_bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PicardReport {
    pub instances: Vec<PicardInstance>,
    /// True when every instance kept its late ratios below one.
    pub all_contracting: bool,
}

/// Run the fixed-point iteration on random frozen-coefficient instances:
/// each anchor gets its own measured regularity constants and validated
/// budget, then the iteration's distance ratios are recorded.
#[allow(clippy::too_many_arguments)]
pub fn picard_study(
    model: &ModelSpec,
    triple: &SpaceTriple,
    seed: u64,
    n_instances: usize,
    spec: &NoiseSpec,
    mr_probe: &NoiseSpec,
    mr_samples: usize,
    margin: f64,
    lambda_max: f64,
    kappa: f64,
    tol: f64,
    max_iter: usize,
) -> Result<PicardReport> {
    if n_instances == 0 {
        return Err(Error::Config("need at least one instance".into()));
    }
    let instances: Vec<PicardInstance> = (0..n_instances)
        .into_par_iter()
        .map(|i| -> Result<PicardInstance> {
            let amp = 0.1 * (1 + i % 3) as f64;
            let u0 = probe_field(triple, seed ^ 0x7069, i as u64, 7, amp);
            let op = assemble_operator(model, &u0)?;
            let eigen = op.eigen()?;
            let mr = estimate_mr_constants(&eigen, triple, mr_probe, mr_samples)?;
            let budget = choose_lambda(
                model.c_q, model.l_f1, model.l_f2, model.l_b1, model.l_b2, &mr, margin, lambda_max,
            )?;
            let path = sample_path(spec, i as u64)?;
            let (_, ratios) =
                picard_solve(&eigen, model, &u0, &path, kappa, tol, max_iter, triple)?;
            let max_late_ratio = ratios.iter().skip(1).fold(0.0f64, |a, r| a.max(*r));
            Ok(PicardInstance {
                instance: i,
                iterations: ratios.len() + 1,
                max_late_ratio,
                lambda: budget.lambda,
                contraction_bound: budget.contraction_bound(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all_contracting = instances.iter().all(|r| r.max_late_ratio < 1.0);
    Ok(PicardReport {
        instances,
        all_contracting,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ItoLevel {
    pub dt: f64,
    /// Mean absolute defect of the discrete energy identity over paths.
    pub mean_residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ItoReport {
    pub levels: Vec<ItoLevel>,
    pub slope: f64,
}

/// Residual of the discrete energy identity along directly stepped paths,
/// on a ladder of step sizes driven by one common noise table.
#[allow(clippy::too_many_arguments)]
pub fn ito_study(
    model: &ModelSpec,
    u0: &GridField,
    triple: &SpaceTriple,
    seed: u64,
    t_horizon: f64,
    dt_finest: f64,
    level_factors: &[usize],
    n_noise_modes: usize,
    n_paths: usize,
) -> Result<ItoReport> {
    let steps_fine = (t_horizon / dt_finest).round() as usize;
    let spec_fine = NoiseSpec {
        master_seed: seed,
        n_modes: n_noise_modes,
        n_steps: steps_fine,
        dt: dt_finest,
    };
    let per_path: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let fine = sample_path(&spec_fine, i as u64)?;
            level_factors
                .iter()
                .map(|f| {
                    let coarse = coarsen(&fine, *f)?;
                    let states = direct_stepping(model, u0, &coarse, t_horizon, triple)?;
                    Ok(crate::models::ito_energy_residual(&states, &coarse, model, triple)?.abs())
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let n = n_paths as f64;
    let levels: Vec<ItoLevel> = level_factors
        .iter()
        .enumerate()
        .map(|(li, f)| ItoLevel {
            dt: dt_finest * *f as f64,
            mean_residual: per_path.iter().map(|r| r[li]).sum::<f64>() / n,
        })
        .collect();
    let xs: Vec<f64> = levels.iter().map(|l| l.dt.ln()).collect();
    let ys: Vec<f64> = levels
        .iter()
        .map(|l| l.mean_residual.max(1e-300).ln())
        .collect();
    let slope = least_squares_slope(&xs, &ys);
    Ok(ItoReport { levels, slope })
}

#[derive(Clone, Debug, Serialize)]
pub struct ConsistencyLevel {
    pub dt: f64,
    /// Mean over paths of the sup trace-norm gap between the localized and
    /// the directly stepped path.
    pub sup_diff: f64,
    /// `sup_diff / dt`; stability of this ratio across levels is the
    /// consistency statement.
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConsistencyReport {
    pub levels: Vec<ConsistencyLevel>,
    /// Largest ratio between adjacent levels' `sup_diff / dt` values.
    pub max_adjacent_ratio: f64,
}

/// Compare the localized solver against plain direct stepping on shared
/// noise across a ladder of step sizes: the sup gap divided by the step
/// width should stay of one magnitude as the step is halved.
#[allow(clippy::too_many_arguments)]
pub fn consistency_study(
    model: &ModelSpec,
    u0: &GridField,
    budget: &SmallnessBudget,
    caps: &RunCaps,
    triple: &SpaceTriple,
    seed: u64,
    t_horizon: f64,
    dt_finest: f64,
    level_factors: &[usize],
    n_noise_modes: usize,
    n_paths: usize,
) -> Result<ConsistencyReport> {
    let steps_fine = (t_horizon / dt_finest).round() as usize;
    let spec_fine = NoiseSpec {
        master_seed: seed,
        n_modes: n_noise_modes,
        n_steps: steps_fine,
        dt: dt_finest,
    };
    let per_path: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let fine = sample_path(&spec_fine, i as u64)?;
            level_factors
                .iter()
                .map(|f| {
                    let coarse = coarsen(&fine, *f)?;
                    let localized =
                        run_localized_on_path(model, u0, budget, &coarse, t_horizon, caps, triple)?;
                    if localized.record.termination != Termination::ReachedT {
                        return Err(Error::Solver(format!(
                            "the localized run ended early ({}) at dt = {}, path {i}",
                            term_str(localized.record.termination),
                            coarse.dt
                        )));
                    }
                    let direct = direct_stepping(model, u0, &coarse, t_horizon, triple)?;
                    if direct.len() != localized.path.len() {
                        return Err(Error::Solver(
                            "the compared paths have different lengths".into(),
                        ));
                    }
                    let mut sup = 0.0f64;
                    for (a, b) in localized.path.iter().zip(&direct) {
                        sup = sup.max(triple.norm_ep(&a.sub(b))?);
                    }
                    Ok(sup)
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let n = n_paths as f64;
    let levels: Vec<ConsistencyLevel> = level_factors
        .iter()
        .enumerate()
        .map(|(li, f)| {
            let dt = dt_finest * *f as f64;
            let sup = per_path.iter().map(|r| r[li]).sum::<f64>() / n;
            ConsistencyLevel {
                dt,
                sup_diff: sup,
                ratio: sup / dt,
            }
        })
        .collect();
    let mut max_adjacent = 1.0f64;
    for w in levels.windows(2) {
        let (a, b) = (w[0].ratio.max(1e-300), w[1].ratio.max(1e-300));
        max_adjacent = max_adjacent.max(a / b).max(b / a);
    }
    Ok(ConsistencyReport {
        levels,
        max_adjacent_ratio: max_adjacent,
    })
}

/// One self-check of the property suite.
#[derive(Clone, Debug, Serialize)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Fast deterministic self-checks of the library's constructive
/// inequalities: cut-off profile, radial retraction, smooth power
/// approximant, budget arithmetic, correction bounds, and run determinism.
pub fn property_suite_checks(seed: u64) -> Result<Vec<PropertyCheck>> {
    let mut checks = Vec::new();

    let lambda = 0.4;
    let mut worst = 0.0f64;
    for i in 0..10_001usize {
        let x = 3.0 * lambda * i as f64 / 10_000.0;
        let expected = if x <= lambda {
            1.0
        } else if x >= 2.0 * lambda {
            0.0
        } else {
            2.0 - x / lambda
        };
        worst = worst.max((theta_lambda(x, lambda)? - expected).abs());
    }
    let mut lip_ok = true;
    for i in 0..10_000u64 {
        let a = standard_normal(seed, 1, i, 0).abs().min(3.0) * lambda;
        let b = standard_normal(seed, 1, i, 1).abs().min(3.0) * lambda;
        let lhs = (theta_lambda(a, lambda)? - theta_lambda(b, lambda)?).abs();
        if lhs > (a - b).abs() / lambda * (1.0 + 1e-12) + 1e-15 {
            lip_ok = false;
        }
    }
    let profile_ok = worst <= 1e-15
        && theta_lambda(lambda, lambda)? == 1.0
        && theta_lambda(2.0 * lambda, lambda)? == 0.0;
    checks.push(PropertyCheck {
        name: "cutoff_profile",
        passed: profile_ok && lip_ok,
        detail: format!("max profile deviation {worst:.2e}, slope bound held: {lip_ok}"),
    });

    let triple = SpaceTriple::new(8.0, 4.0, 1, 16, Scale::DivergenceForm)?;
    let radius = 0.5;
    let mut retract_ok = true;
    let mut lip_worst = 0.0f64;
    for i in 0..200u64 {
        let y1 = probe_field(&triple, seed, 2, 10 + i, 0.6);
        let y2 = probe_field(&triple, seed, 2, 400 + i, 0.6);
        let r1 = truncate_rn(&y1, radius, &triple)?;
        let r2 = truncate_rn(&y2, radius, &triple)?;
        if triple.norm_ep(&r1)? > radius * (1.0 + 1e-12) {
            retract_ok = false;
        }
        if triple.norm_ep(&y1)? <= radius && r1 != y1 {
            retract_ok = false;
        }
        let denom = triple.norm_ep(&y1.sub(&y2))?;
        if denom > 0.0 {
            lip_worst = lip_worst.max(triple.norm_ep(&r1.sub(&r2))? / denom);
        }
    }
    checks.push(PropertyCheck {
        name: "radial_retraction",
        passed: retract_ok && lip_worst <= 2.0 * (1.0 + 1e-12),
        detail: format!("worst retraction ratio {lip_worst:.6}"),
    });

    let trap = phi_n(3.0, 2, 4.0);
    let mut phi_ok = (trap - 72.0).abs() == 0.0;
    for i in 0..2001usize {
        let xi = -6.0 + 12.0 * i as f64 / 2000.0;
        for alpha in [2.0, 3.5] {
            let below = phi_n(xi, 1, alpha)
                <= phi_n(xi, 2, alpha) + 1e-12 * (1.0 + phi_n(xi, 2, alpha).abs());
            let capped =
                phi_n(xi, 2, alpha) <= xi.abs().powf(alpha) + 1e-12 * (1.0 + xi.abs().powf(alpha));
            if !(below && capped) {
                phi_ok = false;
            }
        }
    }
    checks.push(PropertyCheck {
        name: "power_approximant",
        passed: phi_ok,
        detail: format!("continuation value at the seam trap: {trap}"),
    });

    let mr_unit = MRConstants {
        c_mrd_hat: 1.0,
        c_mrs_hat: 1.0,
        n_samples: 1,
    };
    let plain = choose_lambda(1.0, 0.0, 0.0, 0.0, 0.0, &mr_unit, 0.6, 10.0)?;
    let capped = choose_lambda(0.0, 0.0, 0.0, 0.0, 0.0, &mr_unit, 0.6, 0.07)?;
    let budget_ok = (plain.lambda - 0.1).abs() <= 1e-12
        && (plain.contraction_bound() - 0.6).abs() <= 1e-12
        && capped.lambda == 0.07;
    checks.push(PropertyCheck {
        name: "budget_arithmetic",
        passed: budget_ok,
        detail: format!(
            "plain lambda {}, capped lambda {}",
            plain.lambda, capped.lambda
        ),
    });

    let mut mc = ModelConfig::default();
    mc.u0_norm = 0.1;
    let sweep_triple = SpaceTriple::new(8.0, 4.0, 1, 32, Scale::DivergenceForm)?;
    let mut sweep_model = build_model(&mc)?;
    sweep_model.c_q = measure_coefficient_lipschitz(&sweep_model, &sweep_triple, 16, seed ^ 5)?;
    let qb = q_bound_sweep(&sweep_model, &sweep_triple, 0.1, 20, 12, 1e-3, seed ^ 6)?;
    checks.push(PropertyCheck {
        name: "correction_bounds",
        passed: qb.growth_slack <= 0.5 && qb.lipschitz_slack <= 0.5,
        detail: format!(
            "growth slack {:.3e}, difference slack {:.3e}",
            qb.growth_slack, qb.lipschitz_slack
        ),
    });

    let lin = linear_additive_model(ModeWeights::power_law(0.1, 1.5));
    let det_triple = Arc::new(SpaceTriple::new(8.0, 4.0, 1, 16, Scale::DivergenceForm)?);
    let det_budget = SmallnessBudget {
        c_q: 0.0,
        l_f1: 0.0,
        l_f2: 0.0,
        l_b1: 0.0,
        l_b2: 0.0,
        lambda: 0.15,
        c_mrd: 0.5,
        c_mrs: 0.5,
    };
    let det_spec = NoiseSpec {
        master_seed: seed ^ 9,
        n_modes: 8,
        n_steps: 100,
        dt: 1e-3,
    };
    let det_u0 = initial_state(&ModelConfig::default(), &det_triple)?;
    let caps = RunCaps::default();
    let run_a = run_localized(
        &lin,
        &det_u0,
        &det_budget,
        &det_spec,
        3,
        0.1,
        &caps,
        &det_triple,
    )?;
    let run_b = run_localized(
        &lin,
        &det_u0,
        &det_budget,
        &det_spec,
        3,
        0.1,
        &caps,
        &det_triple,
    )?;
    let det_ok = run_a.path == run_b.path && run_a.monitor_history == run_b.monitor_history;
    checks.push(PropertyCheck {
        name: "run_determinism",
        passed: det_ok,
        detail: format!("replayed {} states bit for bit: {det_ok}", run_a.path.len()),
    });

    let anchor = probe_field(&triple, seed, 11, 0, 0.5);
    let walk = random_walk(&triple, seed, 11, 50, 10, 1e-3);
    let mut mon_base = MonitorSeries::new();
    let mut mon_scaled = MonitorSeries::new();
    let factor = 3.0;
    for m in 1..=10usize {
        mon_base.push(&anchor.add(&walk[m]), &anchor, 1e-3, &triple)?;
        mon_scaled.push(
            &anchor.scale(factor).add(&walk[m].scale(factor)),
            &anchor.scale(factor),
            1e-3,
            &triple,
        )?;
    }
    let hom_dev = (mon_scaled.value() - factor * mon_base.value()).abs()
        / (factor * mon_base.value()).max(1e-300);
    checks.push(PropertyCheck {
        name: "monitor_homogeneity",
        passed: hom_dev <= 1e-12,
        detail: format!("relative deviation under joint scaling: {hom_dev:.2e}"),
    });

    Ok(checks)
}

fn run_noise_spec(config: &ExperimentConfig) -> NoiseSpec {
    NoiseSpec {
        master_seed: config.noise.seed,
        n_modes: config.noise.k,
        n_steps: config.n_steps(),
        dt: config.noise.dt,
    }
}

fn exec_localized(
    config: &ExperimentConfig,
    setup: &ResolvedSetup,
    out_dir: &Path,
) -> Result<JsonValue> {
    let spec = run_noise_spec(config);
    let t = config.noise.t;
    let runs: Vec<LocalizedRun> = (0..config.n_paths)
        .into_par_iter()
        .map(|i| {
            run_localized(
                &setup.model,
                &setup.u0,
                &setup.budget,
                &spec,
                i as u64,
                t,
                &config.caps,
                &setup.triple,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        for (ai, (tau, _)) in run.record.anchors.iter().enumerate() {
            rows.push(vec![
                i.to_string(),
                ai.to_string(),
                ff(*tau),
                ff(run.record.total_monitor_lp),
                term_str(run.record.termination).to_string(),
            ]);
        }
    }
    write_csv(
        &out_dir.join("results.csv"),
        &["path", "anchor_index", "tau_n", "monitor_lp", "termination"],
        &rows,
    )?;
    for (i, run) in runs.iter().enumerate().take(config.study.series_limit) {
        let mut series = Vec::with_capacity(run.path.len());
        for (m, state) in run.path.iter().enumerate() {
            let theta = if m == 0 {
                1.0
            } else {
                run.theta_history[m - 1]
            };
            let monitor = if m == 0 {
                0.0
            } else {
                run.monitor_history[m - 1]
            };
            series.push(vec![
                ff(run.times[m]),
                ff(setup.triple.norm_e(state)?),
                ff(setup.triple.norm_ep(state)?),
                ff(setup.triple.norm_e1(state)?),
                ff(theta),
                ff(monitor),
            ]);
        }
        write_csv(
            &out_dir.join(format!("series_{i:04}.csv")),
            &["t", "norm_e", "norm_ep", "norm_e1", "theta", "monitor"],
            &series,
        )?;
    }
    let count = |t: Termination| runs.iter().filter(|r| r.record.termination == t).count();
    let mean_anchors =
        runs.iter().map(|r| r.record.anchors.len()).sum::<usize>() as f64 / runs.len() as f64;
    let max_lp = runs
        .iter()
        .map(|r| r.record.total_monitor_lp)
        .fold(0.0f64, f64::max);
    Ok(json!({
        "n_paths": config.n_paths,
        "reached_t": count(Termination::ReachedT),
        "blow_up_flag": count(Termination::BlowUpFlag),
        "step_floor": count(Termination::StepFloor),
        "mean_anchors": mean_anchors,
        "max_total_monitor_lp": max_lp,
    }))
}

fn exec_hierarchy(
    config: &ExperimentConfig,
    setup: &ResolvedSetup,
    out_dir: &Path,
) -> Result<JsonValue> {
    let spec = run_noise_spec(config);
    let t = config.noise.t;
    let levels: Vec<f64> = (0..config.study.hierarchy_levels)
        .map(|i| config.study.hierarchy_base * 2f64.powi(i as i32))
        .collect();
    let budgets = vec![setup.budget; levels.len()];
    let runs: Vec<_> = (0..config.n_paths)
        .into_par_iter()
        .map(|i| {
            run_truncated_hierarchy(
                &setup.model,
                &setup.u0,
                &budgets,
                &spec,
                i as u64,
                t,
                &levels,
                &config.caps,
                &setup.triple,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut violations = 0usize;
    let mut exits = 0usize;
    for (i, run) in runs.iter().enumerate() {
        for lv in &run.levels {
            rows.push(vec![
                i.to_string(),
                ff(lv.n),
                lv.gamma_set_member.to_string(),
                ff(lv.sigma_n),
            ]);
            if lv.sigma_n < t - 1e-12 {
                exits += 1;
            }
        }
        for w in run.levels.windows(2) {
            if w[0].sigma_n > w[1].sigma_n + 1e-12 {
                violations += 1;
            }
        }
    }
    write_csv(
        &out_dir.join("results.csv"),
        &["path", "level_n", "gamma_set_member", "sigma_n"],
        &rows,
    )?;
    Ok(json!({
        "n_paths": config.n_paths,
        "levels": levels,
        "monotone_violations": violations,
        "exits_before_horizon": exits,
    }))
}

fn exec_moment(
    config: &ExperimentConfig,
    setup: &ResolvedSetup,
    out_dir: &Path,
) -> Result<JsonValue> {
    let spec = run_noise_spec(config);
    let t = config.noise.t;
    let mut rows = Vec::new();
    let mut per_alpha = Vec::new();
    let mut max_spread = 0.0f64;
    for alpha in &config.study.alphas {
        let report = moment_verify(&setup.u0, *alpha, config.n_paths, |u0s, path| {
            let run = run_localized(
                &setup.model,
                u0s,
                &setup.budget,
                &spec,
                path,
                t,
                &config.caps,
                &setup.triple,
            )?;
            Ok(PathRun {
                states: run.path,
                completed: run.record.termination == Termination::ReachedT,
            })
        })?;
        let ratios: Vec<f64> = report.u0_scale_sweep.iter().map(|(_, _, r)| *r).collect();
        let spread = ratios.iter().fold(0.0f64, |a, r| a.max(*r))
            / ratios.iter().fold(f64::INFINITY, |a, r| a.min(*r));
        max_spread = max_spread.max(spread);
        for (scale, lhs, ratio) in &report.u0_scale_sweep {
            rows.push(vec![
                ff(*alpha),
                ff(*scale),
                ff(*lhs),
                ff(*ratio),
                report.n_flagged.to_string(),
                report.valid.to_string(),
            ]);
        }
        per_alpha.push(json!({
            "alpha": alpha,
            "ratio_spread": spread,
            "n_flagged": report.n_flagged,
            "valid": report.valid,
        }));
    }
    write_csv(
        &out_dir.join("results.csv"),
        &[
            "alpha",
            "scale",
            "empirical_lhs",
            "ratio",
            "n_flagged",
            "valid",
        ],
        &rows,
    )?;
    Ok(json!({ "per_alpha": per_alpha, "max_ratio_spread": max_spread }))
}

fn exec_ou(config: &ExperimentConfig, setup: &ResolvedSetup, out_dir: &Path) -> Result<JsonValue> {
    if config.model.kind != ModelKind::LinearAdditive {
        return Err(Error::Config(
            "the convergence experiment needs the constant-coefficient additive model".into(),
        ));
    }
    let report = ou_study(
        &setup.model,
        &setup.u0,
        &setup.triple,
        config.noise.seed,
        config.noise.t,
        config.noise.dt,
        &config.study.refine_factors,
        config.study.reference_refine,
        config.noise.k,
        config.n_paths,
        config.study.tracked_modes,
    )?;
    let rows: Vec<Vec<String>> = report
        .levels
        .iter()
        .map(|l| {
            vec![
                ff(l.dt),
                ff(l.strong_error),
                ff(l.mean_dev_se),
                ff(l.var_dev_se),
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("results.csv"),
        &["dt", "strong_error", "mean_dev_se", "var_dev_se"],
        &rows,
    )?;
    Ok(json!({
        "strong_slope": report.strong_slope,
        "mean_ok": report.mean_ok,
        "var_ok": report.var_ok,
        "n_paths": report.n_paths,
    }))
}

fn exec_mr(config: &ExperimentConfig, setup: &ResolvedSetup, out_dir: &Path) -> Result<JsonValue> {
    let op = assemble_operator(&setup.model, &setup.u0.zeros_like())?;
    let eigen = op.eigen()?;
    let probe = mr_probe_spec(config);
    let full = config.budget.mr_samples;
    let mut counts = vec![(full / 4).max(1), (full / 2).max(1), full];
    counts.dedup();
    let mut rows = Vec::new();
    for ns in counts {
        let mr = estimate_mr_constants(&eigen, &setup.triple, &probe, ns)?;
        rows.push(vec![ns.to_string(), ff(mr.c_mrd_hat), ff(mr.c_mrs_hat)]);
    }
    write_csv(
        &out_dir.join("results.csv"),
        &["n_samples", "c_mrd_hat", "c_mrs_hat"],
        &rows,
    )?;
    Ok(json!({
        "c_mrd_hat": setup.mr.c_mrd_hat,
        "c_mrs_hat": setup.mr.c_mrs_hat,
        "lambda": setup.budget.lambda,
        "contraction_bound": setup.budget.contraction_bound(),
    }))
}

fn exec_picard(
    config: &ExperimentConfig,
    setup: &ResolvedSetup,
    out_dir: &Path,
) -> Result<JsonValue> {
    let spec = run_noise_spec(config);
    let st = &config.study;
    let report = picard_study(
        &setup.model,
        &setup.triple,
        config.noise.seed,
        st.picard_instances,
        &spec,
        &mr_probe_spec(config),
        config.budget.mr_samples,
        config.budget.margin,
        config.budget.lambda_max,
        st.picard_kappa,
        st.picard_tol,
        st.picard_max_iter,
    )?;
    let rows: Vec<Vec<String>> = report
        .instances
        .iter()
        .map(|r| {
            vec![
                r.instance.to_string(),
                r.iterations.to_string(),
                ff(r.max_late_ratio),
                ff(r.lambda),
                ff(r.contraction_bound),
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("results.csv"),
        &[
            "instance",
            "iterations",
            "max_late_ratio",
            "lambda",
            "contraction_bound",
        ],
        &rows,
    )?;
    Ok(json!({
        "n_instances": report.instances.len(),
        "all_contracting": report.all_contracting,
    }))
}

fn exec_ito(config: &ExperimentConfig, setup: &ResolvedSetup, out_dir: &Path) -> Result<JsonValue> {
    let report = ito_study(
        &setup.model,
        &setup.u0,
        &setup.triple,
        config.noise.seed,
        config.noise.t,
        config.noise.dt,
        &config.study.refine_factors,
        config.noise.k,
        config.n_paths,
    )?;
    let rows: Vec<Vec<String>> = report
        .levels
        .iter()
        .map(|l| vec![ff(l.dt), ff(l.mean_residual)])
        .collect();
    write_csv(
        &out_dir.join("results.csv"),
        &["dt", "mean_abs_residual"],
        &rows,
    )?;
    Ok(json!({ "slope": report.slope, "zero_noise": config.study.zero_noise }))
}

fn exec_property(config: &ExperimentConfig, out_dir: &Path) -> Result<JsonValue> {
    let checks = property_suite_checks(config.noise.seed)?;
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| vec![c.name.to_string(), c.passed.to_string(), c.detail.clone()])
        .collect();
    write_csv(
        &out_dir.join("results.csv"),
        &["check", "passed", "detail"],
        &rows,
    )?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    Ok(json!({ "checks": checks.len(), "failed": failed }))
}

/// Execute one experiment and write `results.csv`, any per-path series
/// files, and `manifest.json` into `out_dir`. Returns the summary that
/// also lands in the manifest. Output is a pure function of the
/// configuration; reruns reproduce every byte.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<JsonValue> {
    let setup = resolve(config)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::Output(format!("cannot create {}: {e}", out_dir.display())))?;
    let summary = match config.experiment {
        Experiment::LocalizedRun => exec_localized(config, &setup, out_dir)?,
        Experiment::TruncationHierarchy => exec_hierarchy(config, &setup, out_dir)?,
        Experiment::MomentVerify => exec_moment(config, &setup, out_dir)?,
        Experiment::OuConvergence => exec_ou(config, &setup, out_dir)?,
        Experiment::MrEstimate => exec_mr(config, &setup, out_dir)?,
        Experiment::PicardStudy => exec_picard(config, &setup, out_dir)?,
        Experiment::ItoResidual => exec_ito(config, &setup, out_dir)?,
        Experiment::PropertySuite => exec_property(config, out_dir)?,
    };
    write_manifest(out_dir, config, &setup.info, &summary)?;
    if config.experiment == Experiment::PropertySuite {
        if let Some(failed) = summary.get("failed").and_then(JsonValue::as_u64) {
            if failed > 0 {
                return Err(Error::PropertyViolated(format!(
                    "{failed} self-checks failed; see {}",
                    out_dir.join("results.csv").display()
                )));
            }
        }
    }
    Ok(summary)
}

/// Read a configuration file into a JSON tree.
pub fn load_config_value(path: &Path) -> Result<JsonValue> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("invalid JSON in {}: {e}", path.display())))
}

/// Parse an override value: JSON when it parses, a bare string otherwise.
pub fn parse_json_scalar(raw: &str) -> JsonValue {
    serde_json::from_str(raw).unwrap_or_else(|_| JsonValue::String(raw.to_string()))
}

/// Set a dotted key like `noise.dt` in a JSON tree, creating intermediate
/// objects as needed.
pub fn set_config_key(value: &mut JsonValue, key: &str, new: JsonValue) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!(
            "config key '{key}' has an empty segment"
        )));
    }
    let mut cur = value;
    for part in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "config key '{key}' walks through a non-object value"
            ))
        })?;
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| JsonValue::Object(Default::default()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| {
        Error::Config(format!(
            "config key '{key}' walks through a non-object value"
        ))
    })?;
    obj.insert(parts.last().unwrap().to_string(), new);
    Ok(())
}

/// Apply a `KEY=VALUE` override to a JSON configuration tree.
pub fn apply_assignment(value: &mut JsonValue, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not KEY=VALUE")))?;
    set_config_key(value, key.trim(), parse_json_scalar(raw.trim()))
}

/// Deserialize a JSON tree into a validated experiment configuration.
pub fn config_from_value(value: JsonValue) -> Result<ExperimentConfig> {
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

/// Outcome of a parameter sweep.
pub struct SweepOutcome {
    /// Largest exit code among the points (0 when every point succeeded).
    pub worst_exit: i32,
    pub n_points: usize,
}

/// Run the cartesian product of `--set key=v1,v2,...` axes over a base
/// configuration. Each point runs in its own subdirectory; failures are
/// recorded in `summary.csv` and do not stop the sweep.
pub fn sweep(base: &JsonValue, sets: &[String], out_root: &Path) -> Result<SweepOutcome> {
    if sets.is_empty() {
        return Err(Error::Config(
            "a sweep needs at least one --set axis".into(),
        ));
    }
    let mut axes: Vec<(String, Vec<JsonValue>)> = Vec::new();
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep axis '{s}' is not KEY=V1,V2,...")))?;
        if raw.trim().is_empty() {
            return Err(Error::Config(format!("sweep axis '{s}' has no values")));
        }
        let vals: Vec<JsonValue> = raw
            .split(',')
            .map(|r| parse_json_scalar(r.trim()))
            .collect();
        axes.push((key.trim().to_string(), vals));
    }
    fs::create_dir_all(out_root)
        .map_err(|e| Error::Output(format!("cannot create {}: {e}", out_root.display())))?;
    let total: usize = axes.iter().map(|(_, v)| v.len()).product();
    let mut rows = Vec::with_capacity(total);
    let mut worst = 0i32;
    for point in 0..total {
        let mut idx = point;
        let mut choices = vec![0usize; axes.len()];
        for ai in (0..axes.len()).rev() {
            choices[ai] = idx % axes[ai].1.len();
            idx /= axes[ai].1.len();
        }
        let mut value = base.clone();
        for (ai, (key, vals)) in axes.iter().enumerate() {
            set_config_key(&mut value, key, vals[choices[ai]].clone())?;
        }
        let dir_name = format!("point_{point:04}");
        let dir = out_root.join(&dir_name);
        let outcome = config_from_value(value).and_then(|cfg| run(&cfg, &dir));
        let (status, error) = match outcome {
            Ok(_) => (0, String::new()),
            Err(e) => {
                let code = e.exit_code();
                worst = worst.max(code);
                (code, e.to_string())
            }
        };
        let mut row = vec![point.to_string(), dir_name, status.to_string(), error];
        for (ai, (_, vals)) in axes.iter().enumerate() {
            row.push(vals[choices[ai]].to_string());
        }
        rows.push(row);
    }
    let mut header: Vec<String> = vec![
        "point".into(),
        "dir".into(),
        "status".into(),
        "error".into(),
    ];
    header.extend(axes.iter().map(|(k, _)| k.clone()));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&out_root.join("summary.csv"), &header_refs, &rows)?;
    Ok(SweepOutcome {
        worst_exit: worst,
        n_points: total,
    })
}
