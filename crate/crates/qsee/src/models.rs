//! Concrete model definitions and analytic verifiers.
//!
//! A [`ModelSpec`] bundles the diffusion coefficient, flux, lower-order
//! drift, forcing, and noise coefficients of one equation, together with its
//! ellipticity floor and Lipschitz data. Constructors validate positivity by
//! sampling. The module also houses the exact scalar oracle
//! ([`ou_oracle`]), the power approximants [`phi_n`] with derivatives, the
//! Monte Carlo moment check [`moment_verify`], and the discrete energy
//! identity residual [`ito_energy_residual`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::noise::NoisePath;
use crate::spaces::{l2h_inner, lq_norm, Boundary, GridField, SpaceTriple};
use crate::{Error, Result};

/// Pointwise coefficient `u ↦ value`.
pub type PointwiseFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// Non-divergence coefficient `(x, u, u_x) ↦ value`.
pub type CoeffNdFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
/// Deterministic forcing `(t, x) ↦ value`.
pub type SpaceTimeFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Structural form of the leading operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelForm {
    Divergence,
    Nondivergence,
}

/// Power-law mode weights `w_k = amp · (k + 1)^{-exponent}` with an optional
/// explicit override table (zero beyond its length).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeWeights {
    pub amp: f64,
    pub exponent: f64,
    #[serde(default)]
    pub explicit: Option<Vec<f64>>,
}

impl ModeWeights {
    pub fn power_law(amp: f64, exponent: f64) -> Self {
        ModeWeights {
            amp,
            exponent,
            explicit: None,
        }
    }

    pub fn zero() -> Self {
        Self::power_law(0.0, 0.0)
    }

    pub fn weight(&self, k: usize) -> f64 {
        match &self.explicit {
            Some(v) => v.get(k).copied().unwrap_or(0.0),
            None => {
                if self.amp == 0.0 {
                    0.0
                } else {
                    self.amp * ((k + 1) as f64).powf(-self.exponent)
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match &self.explicit {
            Some(v) => v.iter().all(|w| *w == 0.0),
            None => self.amp == 0.0,
        }
    }
}

/// Radial state truncation applied to every coefficient argument:
/// coefficients see the state retracted onto the trace-norm ball of radius
/// `level`.
#[derive(Clone)]
pub struct Truncation {
    pub level: f64,
    pub triple: Arc<SpaceTriple>,
}

/// One concrete equation: leading coefficient, flux, drift, forcings, noise
/// coefficients, and the constants the cut-off budget needs.
#[derive(Clone)]
pub struct ModelSpec {
    pub form: ModelForm,
    /// Divergence-form diffusion coefficient `a(u)`.
    pub a: Option<PointwiseFn>,
    /// Non-divergence coefficient `a(x, u, u_x)`.
    pub a_nd: Option<CoeffNdFn>,
    /// Convective flux `G(u)`; its centered divergence enters the drift.
    pub g_flux: Option<PointwiseFn>,
    /// Extra pointwise lower-order drift `F(u)`.
    pub lower_order: Option<PointwiseFn>,
    /// Deterministic drift forcing `f(t, x)`.
    pub forcing: Option<SpaceTimeFn>,
    /// Multiplicative noise profile `g(u)`; mode `k` couples as
    /// `β_k g(u(x)) e_k(x)`.
    pub noise_g: Option<PointwiseFn>,
    /// Multiplicative mode weights `β_k`.
    pub beta: ModeWeights,
    /// Additive noise amplitudes `b_k`; mode `k` contributes `b_k e_k(x)`.
    pub b_add: ModeWeights,
    /// Spectral shift the assembled operator carries (the divergence stencil
    /// always adds the identity; the torus stencil adds `shift · I`).
    pub shift: f64,
    /// When set, `shift · u` is added back to the drift so the shift is a
    /// pure reformulation and the physical equation is unchanged.
    pub compensate_shift: bool,
    /// Ellipticity floor `δ_0 > 0`.
    pub delta0: f64,
    /// Trace-norm Lipschitz constant of the operator's coefficient
    /// dependence, used by the cut-off budget.
    pub c_q: f64,
    /// Lipschitz constants of the lower-order drift (flux and pointwise
    /// part) and of the noise coefficients.
    pub l_f1: f64,
    pub l_f2: f64,
    pub l_b1: f64,
    pub l_b2: f64,
    /// Optional radial truncation of coefficient arguments.
    pub truncation: Option<Truncation>,
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("form", &self.form)
            .field("shift", &self.shift)
            .field("compensate_shift", &self.compensate_shift)
            .field("delta0", &self.delta0)
            .field("c_q", &self.c_q)
            .field("truncated", &self.truncation.is_some())
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    /// Model seen by every coefficient: the state retracted onto the
    /// truncation ball when a truncation is set, the state itself otherwise.
    pub fn effective_state(&self, u: &GridField) -> Result<GridField> {
        match &self.truncation {
            None => Ok(u.clone()),
            Some(tr) => crate::localizer::truncate_rn(u, tr.level, &tr.triple),
        }
    }

    /// Copy of this model with coefficients truncated at radius `level`.
    pub fn with_truncation(&self, level: f64, triple: Arc<SpaceTriple>) -> Self {
        let mut m = self.clone();
        m.truncation = Some(Truncation { level, triple });
        m
    }

    /// Lower-order drift evaluated on the grid: shift compensation on the
    /// raw state, flux divergence and pointwise drift on the effective
    /// state, plus the deterministic forcing.
    pub fn drift_lower_order(&self, t: f64, u: &GridField) -> Result<GridField> {
        let u_eff = self.effective_state(u)?;
        let mut out = u.zeros_like();
        if self.compensate_shift {
            out.axpy(self.shift, u);
        }
        if let Some(g) = &self.g_flux {
            out = out.add(&central_flux_divergence(&u_eff, g)?);
        }
        if let Some(fl) = &self.lower_order {
            for (o, v) in out.values.iter_mut().zip(&u_eff.values) {
                *o += fl(*v);
            }
        }
        if let Some(f) = &self.forcing {
            let forcing_field = sample_space_time(f, t, u);
            out = out.add(&forcing_field);
        }
        Ok(out)
    }

    /// Per-mode noise coefficient fields `β_k g(u) e_k + b_k e_k` on the
    /// effective state, for modes `0..n_modes`.
    pub fn noise_fields(
        &self,
        u: &GridField,
        triple: &SpaceTriple,
        n_modes: usize,
    ) -> Result<Vec<GridField>> {
        let u_eff = self.effective_state(u)?;
        let g_vals: Option<Vec<f64>> = self
            .noise_g
            .as_ref()
            .map(|g| u_eff.values.iter().map(|v| g(*v)).collect());
        let mut fields = Vec::with_capacity(n_modes);
        for k in 0..n_modes {
            let mode = triple.mode_field(k);
            let beta = self.beta.weight(k);
            let badd = self.b_add.weight(k);
            let values = mode
                .values
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let mult = match &g_vals {
                        Some(g) => beta * g[i],
                        None => 0.0,
                    };
                    (mult + badd) * e
                })
                .collect();
            fields.push(mode.with_values(values));
        }
        Ok(fields)
    }

    /// True when the model carries no stochastic term at all.
    pub fn is_deterministic(&self) -> bool {
        (self.noise_g.is_none() || self.beta.is_zero()) && self.b_add.is_zero()
    }
}

fn sample_space_time(f: &SpaceTimeFn, t: f64, layout: &GridField) -> GridField {
    let offset = match layout.boundary {
        Boundary::Dirichlet => 1.0,
        Boundary::Periodic => 0.0,
    };
    let values = (0..layout.len())
        .map(|i| f(t, ((i % layout.nx) as f64 + offset) * layout.h))
        .collect();
    layout.with_values(values)
}

/// Centered divergence of the flux `G(u)`: `(G(u_{i+1}) - G(u_{i-1}))/(2h)`
/// with the implicit boundary state 0 under Dirichlet conditions and
/// wrap-around on the torus. One-dimensional fields only.
pub fn central_flux_divergence(u: &GridField, g: &PointwiseFn) -> Result<GridField> {
    if u.dim() != 1 {
        return Err(Error::Config(
            "convective flux support is one-dimensional".into(),
        ));
    }
    let n = u.len();
    let gv: Vec<f64> = u.values.iter().map(|v| g(*v)).collect();
    let g0 = g(0.0);
    let mut out = vec![0.0; n];
    for i in 0..n {
        let (up, dn) = match u.boundary {
            Boundary::Dirichlet => (
                if i + 1 < n { gv[i + 1] } else { g0 },
                if i > 0 { gv[i - 1] } else { g0 },
            ),
            Boundary::Periodic => (gv[(i + 1) % n], gv[(i + n - 1) % n]),
        };
        out[i] = (up - dn) / (2.0 * u.h);
    }
    Ok(u.with_values(out))
}

/// Ellipticity parameters shared by the model constructors.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModelParams {
    pub delta0: f64,
    pub c_q: f64,
    pub l_f1: f64,
    pub l_f2: f64,
    pub l_b1: f64,
    pub l_b2: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            delta0: 1.0,
            c_q: 1.0,
            l_f1: 0.0,
            l_f2: 0.0,
            l_b1: 0.0,
            l_b2: 0.0,
        }
    }
}

/// Noise coefficient bundle for the constructors.
#[derive(Clone)]
pub struct NoiseCoeffs {
    /// Multiplicative profile `g(u)`; `None` disables the multiplicative part.
    pub g: Option<PointwiseFn>,
    pub beta: ModeWeights,
    pub additive: ModeWeights,
}

impl NoiseCoeffs {
    pub fn none() -> Self {
        NoiseCoeffs {
            g: None,
            beta: ModeWeights::zero(),
            additive: ModeWeights::zero(),
        }
    }
}

const COEFF_SAMPLE_RANGE: f64 = 8.0;
const COEFF_SAMPLES: usize = 321;

/// Divergence-form convection–diffusion model on the unit interval with
/// homogeneous Dirichlet data: drift `div(a(u) ∇u) + div(G(u))` plus
/// forcing, noise `Σ_k (β_k g(u) + b_k) e_k dβ_k`.
///
/// The coefficient `a` is sampled over a symmetric state range and must
/// stay at or above `params.delta0 > 0`.
pub fn make_gdiv_model(
    a: PointwiseFn,
    g_flux: Option<PointwiseFn>,
    noise: NoiseCoeffs,
    params: ModelParams,
) -> Result<ModelSpec> {
    if !(params.delta0 > 0.0) {
        return Err(Error::Config(format!(
            "ellipticity floor must be positive, got {}",
            params.delta0
        )));
    }
    for i in 0..COEFF_SAMPLES {
        let u =
            -COEFF_SAMPLE_RANGE + 2.0 * COEFF_SAMPLE_RANGE * i as f64 / (COEFF_SAMPLES - 1) as f64;
        if !(a(u) >= params.delta0 - 1e-12) {
            return Err(Error::EllipticityViolated);
        }
    }
    Ok(ModelSpec {
        form: ModelForm::Divergence,
        a: Some(a),
        a_nd: None,
        g_flux,
        lower_order: None,
        forcing: None,
        noise_g: noise.g,
        beta: noise.beta,
        b_add: noise.additive,
        shift: 1.0,
        compensate_shift: true,
        delta0: params.delta0,
        c_q: params.c_q,
        l_f1: params.l_f1,
        l_f2: params.l_f2,
        l_b1: params.l_b1,
        l_b2: params.l_b2,
        truncation: None,
    })
}

/// Non-divergence model on the periodic torus: drift
/// `a(x, u, u_x) u_xx` plus forcing, with spectral shift `shift · I`
/// carried by the operator and compensated in the drift.
///
/// The coefficient is sampled over a grid of `(x, u, u_x)` values and must
/// stay at or above `params.delta0 > 0`.
pub fn make_nondivergence_model(
    a_nd: CoeffNdFn,
    noise: NoiseCoeffs,
    shift: f64,
    params: ModelParams,
) -> Result<ModelSpec> {
    if !(params.delta0 > 0.0) {
        return Err(Error::Config(format!(
            "ellipticity floor must be positive, got {}",
            params.delta0
        )));
    }
    if !(shift > 0.0) {
        return Err(Error::Config(format!(
            "spectral shift must be positive, got {shift}"
        )));
    }
    let pts = 17;
    for ix in 0..pts {
        let x = ix as f64 / pts as f64;
        for iu in 0..pts {
            let u = -COEFF_SAMPLE_RANGE + 2.0 * COEFF_SAMPLE_RANGE * iu as f64 / (pts - 1) as f64;
            for idu in 0..pts {
                let du =
                    -COEFF_SAMPLE_RANGE + 2.0 * COEFF_SAMPLE_RANGE * idu as f64 / (pts - 1) as f64;
                if !(a_nd(x, u, du) >= params.delta0 - 1e-12) {
                    return Err(Error::EllipticityViolated);
                }
            }
        }
    }
    Ok(ModelSpec {
        form: ModelForm::Nondivergence,
        a: None,
        a_nd: Some(a_nd),
        g_flux: None,
        lower_order: None,
        forcing: None,
        noise_g: noise.g,
        beta: noise.beta,
        b_add: noise.additive,
        shift,
        compensate_shift: true,
        delta0: params.delta0,
        c_q: params.c_q,
        l_f1: params.l_f1,
        l_f2: params.l_f2,
        l_b1: params.l_b1,
        l_b2: params.l_b2,
        truncation: None,
    })
}

/// Constant-coefficient linear model with purely additive noise: the heat
/// semigroup of the shifted reference operator driven mode-wise, the exact
/// benchmark for the stepper. The shift is *not* compensated, so mode `k`
/// decays at the full reference eigenvalue.
pub fn linear_additive_model(additive: ModeWeights) -> ModelSpec {
    ModelSpec {
        form: ModelForm::Divergence,
        a: Some(Arc::new(|_| 1.0)),
        a_nd: None,
        g_flux: None,
        lower_order: None,
        forcing: None,
        noise_g: None,
        beta: ModeWeights::zero(),
        b_add: additive,
        shift: 1.0,
        compensate_shift: false,
        delta0: 1.0,
        c_q: 0.0,
        l_f1: 0.0,
        l_f2: 0.0,
        l_b1: 0.0,
        l_b2: 0.0,
        truncation: None,
    }
}

/// Exact mean and variance of the scalar linear equation
/// `du = -λ u dt + b dβ`: mean `u0 e^{-λ t}`, variance
/// `b² (1 - e^{-2λt}) / (2λ)`.
pub fn ou_oracle(lambda_k: f64, b_k: f64, t: f64, u0_k: f64) -> (f64, f64) {
    assert!(lambda_k > 0.0, "decay rate must be positive");
    let mean = u0_k * (-lambda_k * t).exp();
    let variance = b_k * b_k * (1.0 - (-2.0 * lambda_k * t).exp()) / (2.0 * lambda_k);
    (mean, variance)
}

/// Smooth power approximant: `|ξ|^α` inside `[-n, n]`, its second-order
/// Taylor continuation outside. Twice continuously differentiable, convex,
/// and below `|ξ|^α` everywhere.
pub fn phi_n(xi: f64, n: u32, alpha: f64) -> f64 {
    assert!(n >= 1 && alpha >= 2.0, "need n ≥ 1 and α ≥ 2");
    let nf = n as f64;
    let ax = xi.abs();
    if ax <= nf {
        ax.powf(alpha)
    } else {
        nf.powf(alpha - 2.0)
            * (0.5 * alpha * (alpha - 1.0) * xi * xi - alpha * (alpha - 2.0) * nf * ax
                + 0.5 * (alpha - 1.0) * (alpha - 2.0) * nf * nf)
    }
}

/// First derivative of [`phi_n`].
pub fn phi_n_prime(xi: f64, n: u32, alpha: f64) -> f64 {
    assert!(n >= 1 && alpha >= 2.0, "need n ≥ 1 and α ≥ 2");
    let nf = n as f64;
    let ax = xi.abs();
    let sign = if xi >= 0.0 { 1.0 } else { -1.0 };
    if ax <= nf {
        sign * alpha * ax.powf(alpha - 1.0)
    } else {
        sign * nf.powf(alpha - 2.0) * (alpha * (alpha - 1.0) * ax - alpha * (alpha - 2.0) * nf)
    }
}

/// Second derivative of [`phi_n`].
pub fn phi_n_second(xi: f64, n: u32, alpha: f64) -> f64 {
    assert!(n >= 1 && alpha >= 2.0, "need n ≥ 1 and α ≥ 2");
    let nf = n as f64;
    let ax = xi.abs();
    if ax <= nf {
        alpha * (alpha - 1.0) * ax.powf(alpha - 2.0)
    } else {
        alpha * (alpha - 1.0) * nf.powf(alpha - 2.0)
    }
}

/// One completed path for the moment check.
pub struct PathRun {
    /// States along the path, the initial state first.
    pub states: Vec<GridField>,
    /// True when the run reached the horizon without an abnormal flag.
    pub completed: bool,
}

/// Monte Carlo moment report: the `α`-th root of the mean running
/// supremum of `‖u(t)‖_{L^α}^α`, swept over initial-state scales.
#[derive(Clone, Debug, Serialize)]
pub struct MomentReport {
    pub alpha: f64,
    pub empirical_lhs: f64,
    /// `(scale, empirical_lhs, ratio)` per sweep point, where the ratio
    /// divides by `1 + ‖scale · u0‖_{L^α}`.
    pub u0_scale_sweep: Vec<(f64, f64, f64)>,
    pub n_flagged: usize,
    pub n_paths: usize,
    /// False when more than 5 % of paths were flagged abnormal.
    pub valid: bool,
}

/// Estimate `(E sup_{t ≤ T} ‖u(t)‖_{L^α}^α)^{1/α}` over `n_paths` runs per
/// initial-state scale in {1, 2, 4}, via the supplied path runner.
/// Abnormally terminated paths are excluded and counted; more than 5 %
/// flagged marks the report invalid.
pub fn moment_verify(
    u0: &GridField,
    alpha: f64,
    n_paths: usize,
    runner: impl Fn(&GridField, u64) -> Result<PathRun> + Sync,
) -> Result<MomentReport> {
    if !(alpha >= 2.0) {
        return Err(Error::Config(format!(
            "moment order must be ≥ 2, got {alpha}"
        )));
    }
    if n_paths == 0 {
        return Err(Error::Config("moment check needs at least one path".into()));
    }
    let scales = [1.0, 2.0, 4.0];
    let mut sweep = Vec::new();
    let mut n_flagged = 0;
    for (si, scale) in scales.iter().enumerate() {
        let scaled = u0.scale(*scale);
        let mut sum_sup = 0.0;
        let mut used = 0usize;
        for path in 0..n_paths {
            let run = runner(&scaled, (si * n_paths + path) as u64)?;
            if !run.completed {
                n_flagged += 1;
                continue;
            }
            let mut sup = 0.0f64;
            for state in &run.states {
                sup = sup.max(lq_norm(state, alpha)?.powf(alpha));
            }
            sum_sup += sup;
            used += 1;
        }
        if used == 0 {
            return Err(Error::Solver(
                "every path of a moment sweep was flagged".into(),
            ));
        }
        let lhs = (sum_sup / used as f64).powf(1.0 / alpha);
        let ratio = lhs / (1.0 + lq_norm(&scaled, alpha)?);
        sweep.push((*scale, lhs, ratio));
    }
    let total = scales.len() * n_paths;
    Ok(MomentReport {
        alpha,
        empirical_lhs: sweep[0].1,
        u0_scale_sweep: sweep,
        n_flagged,
        n_paths: total,
        valid: (n_flagged as f64) <= 0.05 * total as f64,
    })
}

/// Maximal defect of the discrete energy identity along a stored path:
/// `‖u(t)‖² - ‖u0‖² + 2 Σ dt ⟨a(u)∇u, ∇u⟩ - 2 Σ ⟨u, B(u)ΔW⟩ - Σ dt Σ_k ‖B_k(u)‖²`,
/// with grid quadrature, face-averaged coefficients matching the stencil,
/// and left-endpoint sums.
pub fn ito_energy_residual(
    states: &[GridField],
    noise: &NoisePath,
    model: &ModelSpec,
    triple: &SpaceTriple,
) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Config(
            "energy residual needs at least one state".into(),
        ));
    }
    if model.form != ModelForm::Divergence {
        return Err(Error::Config(
            "the energy identity is stated for divergence-form models".into(),
        ));
    }
    if states.len() > noise.n_steps + 1 {
        return Err(Error::Config(format!(
            "path stores {} states but the noise table covers only {} steps",
            states.len(),
            noise.n_steps
        )));
    }
    let dt = noise.dt;
    let e0 = l2h_inner(&states[0], &states[0]);
    let mut drift_sum = 0.0;
    let mut mart_sum = 0.0;
    let mut qv_sum = 0.0;
    let mut worst = 0.0f64;
    for (m, u) in states.iter().enumerate().skip(1) {
        let prev = &states[m - 1];
        drift_sum += dt * dirichlet_form(prev, model)?;
        if !model.is_deterministic() {
            let fields = model.noise_fields(prev, triple, noise.n_modes)?;
            for (k, bk) in fields.iter().enumerate() {
                mart_sum += l2h_inner(prev, bk) * noise.inc(m - 1, k);
                qv_sum += dt * l2h_inner(bk, bk);
            }
        }
        let e = l2h_inner(u, u);
        let residual = e - e0 + 2.0 * drift_sum - 2.0 * mart_sum - qv_sum;
        worst = worst.max(residual.abs());
    }
    Ok(worst)
}

/// Discrete Dirichlet form `h Σ_faces a_face ((u_{i+1} - u_i)/h)²` with the
/// same face-averaged coefficient the divergence stencil uses.
pub fn dirichlet_form(u: &GridField, model: &ModelSpec) -> Result<f64> {
    let a = model
        .a
        .as_ref()
        .ok_or_else(|| Error::Config("dirichlet form needs a divergence coefficient".into()))?;
    if u.dim() != 1 {
        return Err(Error::Config(
            "dirichlet form support is one-dimensional".into(),
        ));
    }
    let u_eff = model.effective_state(u)?;
    let av: Vec<f64> = u_eff.values.iter().map(|v| a(*v)).collect();
    let a0 = a(0.0);
    let n = u.len();
    let mut sum = 0.0;
    match u.boundary {
        Boundary::Dirichlet => {
            for face in 0..=n {
                let (al, vl) = if face == 0 {
                    (a0, 0.0)
                } else {
                    (av[face - 1], u.values[face - 1])
                };
                let (ar, vr) = if face == n {
                    (a0, 0.0)
                } else {
                    (av[face], u.values[face])
                };
                let grad = (vr - vl) / u.h;
                sum += 0.5 * (al + ar) * grad * grad;
            }
        }
        Boundary::Periodic => {
            for i in 0..n {
                let j = (i + 1) % n;
                let grad = (u.values[j] - u.values[i]) / u.h;
                sum += 0.5 * (av[i] + av[j]) * grad * grad;
            }
        }
    }
    Ok(u.h * sum)
}

/// Discrete counterpart of the convection term the divergence theorem
/// removes in the continuum: `h Σ φ''(u) u_x · G(u)` with centered
/// differences. Used to verify that the dropped term vanishes under
/// refinement for smooth states.
pub fn gauss_divergence_defect(u: &GridField, g: &PointwiseFn, n: u32, alpha: f64) -> Result<f64> {
    if u.dim() != 1 {
        return Err(Error::Config(
            "defect check support is one-dimensional".into(),
        ));
    }
    let grad = crate::spaces::axis_gradient(u, 0);
    let mut sum = 0.0;
    for (i, v) in u.values.iter().enumerate() {
        sum += phi_n_second(*v, n, alpha) * grad.values[i] * g(*v);
    }
    Ok(u.h * sum)
}
