//! Frozen-coefficient operators and time stepping.
//!
//! [`assemble_operator`] builds the finite-difference operator at an anchor
//! state; [`semi_implicit_step`] advances one step treating the frozen
//! operator implicitly and everything else explicitly;
//! [`solve_frozen_segment`] runs a whole segment under the monitor cut-off.
//! [`picard_solve`] realizes the fixed-point construction in eigenmode
//! coordinates, [`estimate_mr_constants`] measures working regularity
//! constants, and [`choose_lambda`] turns them into a validated cut-off
//! budget.

use serde::{Deserialize, Serialize};

use crate::models::{ModelForm, ModelSpec};
use crate::noise::NoisePath;
use crate::spaces::{
    axis_gradient, gamma_noise_norm, theta_lambda, Boundary, GridField, MonitorSeries, SpaceTriple,
};
use crate::{Error, Result};

// ------------------------------------------------------------- operators --

#[derive(Clone, Debug)]
enum Stencil {
    /// Tridiagonal rows on a 1D grid with zero boundary values:
    /// `sub[i]` couples to node `i-1`, `sup[i]` to node `i+1`.
    Tri {
        sub: Vec<f64>,
        diag: Vec<f64>,
        sup: Vec<f64>,
    },
    /// Same layout on the 1D torus; `sub[0]` and `sup[n-1]` wrap around.
    Cyclic {
        sub: Vec<f64>,
        diag: Vec<f64>,
        sup: Vec<f64>,
    },
    /// 2D flux stencil: `ax` holds x-face coefficients ((nx+1) per row),
    /// `ay` the y-face coefficients (nx per row, ny+1 rows); the diagonal
    /// carries an extra `+ shift`.
    Tensor { ax: Vec<f64>, ay: Vec<f64> },
}

/// Finite-difference realization of the operator frozen at one anchor
/// state, plus its spectral shift.
#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    pub form: ModelForm,
    pub shift: f64,
    template: GridField,
    stencil: Stencil,
}

/// Build the operator of `model` frozen at `anchor` (the anchor is passed
/// through the model's truncation before coefficients see it).
///
/// Divergence form uses the conservative flux stencil with face-averaged
/// coefficients and an added identity; non-divergence form uses central
/// second differences scaled by `a(x, u, u_x)` plus `shift · I`.
pub fn assemble_operator(model: &ModelSpec, anchor: &GridField) -> Result<DiscreteOperator> {
    if !anchor.is_finite() {
        return Err(Error::NonFiniteField);
    }
    let eff = model.effective_state(anchor)?;
    let template = anchor.zeros_like();
    let h = anchor.h;
    let stencil = match model.form {
        ModelForm::Divergence => {
            let a = model
                .a
                .as_ref()
                .ok_or_else(|| Error::Config("divergence model lacks a coefficient".into()))?;
            let av: Vec<f64> = eff.values.iter().map(|v| a(*v)).collect();
            let a0 = a(0.0);
            if !(a0 > 0.0) || av.iter().any(|c| !(*c > 0.0)) {
                return Err(Error::EllipticityViolated);
            }
            match (anchor.dim(), anchor.boundary) {
                (1, Boundary::Dirichlet) => {
                    let n = av.len();
                    let face = |i: usize| -> f64 {
                        let left = if i == 0 { a0 } else { av[i - 1] };
                        let right = if i == n { a0 } else { av[i] };
                        0.5 * (left + right)
                    };
                    let mut sub = vec![0.0; n];
                    let mut diag = vec![0.0; n];
                    let mut sup = vec![0.0; n];
                    for i in 0..n {
                        let (fl, fr) = (face(i), face(i + 1));
                        diag[i] = (fl + fr) / (h * h) + 1.0;
                        if i > 0 {
                            sub[i] = -fl / (h * h);
                        }
                        if i + 1 < n {
                            sup[i] = -fr / (h * h);
                        }
                    }
                    Stencil::Tri { sub, diag, sup }
                }
                (1, Boundary::Periodic) => {
                    let n = av.len();
                    let face = |i: usize| 0.5 * (av[(i + n - 1) % n] + av[i]);
                    let mut sub = vec![0.0; n];
                    let mut diag = vec![0.0; n];
                    let mut sup = vec![0.0; n];
                    for i in 0..n {
                        let (fl, fr) = (face(i), face((i + 1) % n));
                        diag[i] = (fl + fr) / (h * h) + 1.0;
                        sub[i] = -fl / (h * h);
                        sup[i] = -fr / (h * h);
                    }
                    Stencil::Cyclic { sub, diag, sup }
                }
                (2, Boundary::Dirichlet) => {
                    let (nx, ny) = (anchor.nx, anchor.ny);
                    let val = |i: isize, j: isize| -> f64 {
                        if i < 0 || j < 0 || i >= nx as isize || j >= ny as isize {
                            a0
                        } else {
                            av[j as usize * nx + i as usize]
                        }
                    };
                    let mut ax = vec![0.0; (nx + 1) * ny];
                    for j in 0..ny {
                        for i in 0..=nx {
                            ax[j * (nx + 1) + i] = 0.5
                                * (val(i as isize - 1, j as isize) + val(i as isize, j as isize));
                        }
                    }
                    let mut ay = vec![0.0; nx * (ny + 1)];
                    for j in 0..=ny {
                        for i in 0..nx {
                            ay[j * nx + i] = 0.5
                                * (val(i as isize, j as isize - 1) + val(i as isize, j as isize));
                        }
                    }
                    Stencil::Tensor { ax, ay }
                }
                _ => {
                    return Err(Error::Config(
                        "divergence stencils support 1D and Dirichlet 2D grids".into(),
                    ))
                }
            }
        }
        ModelForm::Nondivergence => {
            if anchor.dim() != 1 {
                return Err(Error::Config(
                    "non-divergence stencils are one-dimensional".into(),
                ));
            }
            let a_nd = model
                .a_nd
                .as_ref()
                .ok_or_else(|| Error::Config("non-divergence model lacks a coefficient".into()))?;
            let grad = axis_gradient(&eff, 0);
            let offset = match anchor.boundary {
                Boundary::Dirichlet => 1.0,
                Boundary::Periodic => 0.0,
            };
            let n = eff.values.len();
            let mut sub = vec![0.0; n];
            let mut diag = vec![0.0; n];
            let mut sup = vec![0.0; n];
            for i in 0..n {
                let x = (i as f64 + offset) * h;
                let c = a_nd(x, eff.values[i], grad.values[i]);
                if !(c > 0.0) {
                    return Err(Error::EllipticityViolated);
                }
                diag[i] = 2.0 * c / (h * h) + model.shift;
                sub[i] = -c / (h * h);
                sup[i] = -c / (h * h);
            }
            match anchor.boundary {
                Boundary::Dirichlet => {
                    sub[0] = 0.0;
                    sup[n - 1] = 0.0;
                    Stencil::Tri { sub, diag, sup }
                }
                Boundary::Periodic => Stencil::Cyclic { sub, diag, sup },
            }
        }
    };
    Ok(DiscreteOperator {
        form: model.form,
        shift: model.shift,
        template,
        stencil,
    })
}

impl DiscreteOperator {
    pub fn n_dof(&self) -> usize {
        self.template.len()
    }

    /// Apply the operator to a field of matching layout.
    pub fn apply(&self, u: &GridField) -> GridField {
        let v = &u.values;
        let out = match &self.stencil {
            Stencil::Tri { sub, diag, sup } => {
                let n = v.len();
                (0..n)
                    .map(|i| {
                        let mut s = diag[i] * v[i];
                        if i > 0 {
                            s += sub[i] * v[i - 1];
                        }
                        if i + 1 < n {
                            s += sup[i] * v[i + 1];
                        }
                        s
                    })
                    .collect()
            }
            Stencil::Cyclic { sub, diag, sup } => {
                let n = v.len();
                (0..n)
                    .map(|i| diag[i] * v[i] + sub[i] * v[(i + n - 1) % n] + sup[i] * v[(i + 1) % n])
                    .collect()
            }
            Stencil::Tensor { ax, ay } => {
                let (nx, ny) = (u.nx, u.ny);
                let h2 = u.h * u.h;
                let mut out = vec![0.0; v.len()];
                for j in 0..ny {
                    for i in 0..nx {
                        let idx = j * nx + i;
                        let left = if i > 0 { v[idx - 1] } else { 0.0 };
                        let right = if i + 1 < nx { v[idx + 1] } else { 0.0 };
                        let down = if j > 0 { v[idx - nx] } else { 0.0 };
                        let up = if j + 1 < ny { v[idx + nx] } else { 0.0 };
                        let fxl = ax[j * (nx + 1) + i];
                        let fxr = ax[j * (nx + 1) + i + 1];
                        let fyl = ay[j * nx + i];
                        let fyr = ay[(j + 1) * nx + i];
                        out[idx] = (fxl * (v[idx] - left) - fxr * (right - v[idx])
                            + fyl * (v[idx] - down)
                            - fyr * (up - v[idx]))
                            / h2
                            + v[idx];
                    }
                }
                out
            }
        };
        u.with_values(out)
    }

    /// Factorize `I + dt · A` for repeated solves within a segment.
    pub fn solver(&self, dt: f64) -> Result<OperatorSolver> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!(
                "step size must be positive, got {dt}"
            )));
        }
        let guts = match &self.stencil {
            Stencil::Tri { sub, diag, sup } => {
                let msub: Vec<f64> = sub.iter().map(|s| dt * s).collect();
                let mdiag: Vec<f64> = diag.iter().map(|d| 1.0 + dt * d).collect();
                let msup: Vec<f64> = sup.iter().map(|s| dt * s).collect();
                let (low, udiag) = thomas_factor(&msub, &mdiag, &msup)?;
                SolverGuts::Thomas {
                    low,
                    udiag,
                    sup: msup,
                }
            }
            Stencil::Cyclic { sub, diag, sup } => {
                let n = diag.len();
                let msub: Vec<f64> = sub.iter().map(|s| dt * s).collect();
                let mdiag: Vec<f64> = diag.iter().map(|d| 1.0 + dt * d).collect();
                let msup: Vec<f64> = sup.iter().map(|s| dt * s).collect();
                // Woodbury split of the wrap-around couplings: solve the
                // modified tridiagonal core, then correct with one rank-one
                // update.
                let beta = msub[0];
                let alpha = msup[n - 1];
                let gamma = -mdiag[0];
                let mut core = mdiag.clone();
                core[0] = mdiag[0] - gamma;
                core[n - 1] = mdiag[n - 1] - alpha * beta / gamma;
                let mut tsub = msub.clone();
                tsub[0] = 0.0;
                let mut tsup = msup.clone();
                tsup[n - 1] = 0.0;
                let (low, udiag) = thomas_factor(&tsub, &core, &tsup)?;
                let mut uvec = vec![0.0; n];
                uvec[0] = gamma;
                uvec[n - 1] = alpha;
                let z = thomas_solve(&low, &udiag, &tsup, &uvec);
                let denom = 1.0 + z[0] + (beta / gamma) * z[n - 1];
                if denom.abs() < 1e-300 {
                    return Err(Error::Solver("cyclic solve is singular".into()));
                }
                SolverGuts::Cyclic {
                    low,
                    udiag,
                    sup: tsup,
                    z,
                    beta_over_gamma: beta / gamma,
                    denom,
                }
            }
            Stencil::Tensor { .. } => SolverGuts::Cg { op: self.clone() },
        };
        Ok(OperatorSolver { dt, guts })
    }

    /// Eigen-factorization for exact semigroup evaluation. Supported for
    /// symmetric 1D stencils with zero boundary values (the divergence
    /// form); other operators report a configuration error.
    pub fn eigen(&self) -> Result<EigenOperator> {
        let (sub, diag, sup) = match &self.stencil {
            Stencil::Tri { sub, diag, sup } => (sub, diag, sup),
            _ => {
                return Err(Error::Config(
                    "eigen factorization needs a 1D stencil with zero boundary values".into(),
                ))
            }
        };
        let n = diag.len();
        for i in 1..n {
            let scale = diag[i].abs().max(1.0);
            if (sub[i] - sup[i - 1]).abs() > 1e-12 * scale {
                return Err(Error::Config(
                    "eigen factorization needs a symmetric stencil".into(),
                ));
            }
        }
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            dense[i][i] = diag[i];
            if i > 0 {
                dense[i][i - 1] = sub[i];
                dense[i - 1][i] = sub[i];
            }
        }
        let (lambdas, vecs) = jacobi_eigen(dense);
        let h = self.template.h;
        let scale = 1.0 / h.sqrt();
        let modes = vecs
            .into_iter()
            .map(|v| {
                let flip = v
                    .iter()
                    .find(|c| c.abs() > 1e-12)
                    .map_or(1.0, |c| c.signum());
                v.into_iter().map(|c| c * scale * flip).collect()
            })
            .collect();
        Ok(EigenOperator {
            lambdas,
            modes,
            template: self.template.clone(),
        })
    }
}

fn thomas_factor(sub: &[f64], diag: &[f64], sup: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = diag.len();
    let mut low = vec![0.0; n];
    let mut udiag = diag.to_vec();
    for i in 1..n {
        if udiag[i - 1].abs() < 1e-300 {
            return Err(Error::Solver("tridiagonal factorization broke down".into()));
        }
        low[i] = sub[i] / udiag[i - 1];
        udiag[i] -= low[i] * sup[i - 1];
    }
    if udiag[n - 1].abs() < 1e-300 {
        return Err(Error::Solver("tridiagonal factorization broke down".into()));
    }
    Ok((low, udiag))
}

fn thomas_solve(low: &[f64], udiag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    let mut y = vec![0.0; n];
    y[0] = rhs[0];
    for i in 1..n {
        y[i] = rhs[i] - low[i] * y[i - 1];
    }
    let mut x = vec![0.0; n];
    x[n - 1] = y[n - 1] / udiag[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = (y[i] - sup[i] * x[i + 1]) / udiag[i];
    }
    x
}

#[derive(Clone, Debug)]
enum SolverGuts {
    Thomas {
        low: Vec<f64>,
        udiag: Vec<f64>,
        sup: Vec<f64>,
    },
    Cyclic {
        low: Vec<f64>,
        udiag: Vec<f64>,
        sup: Vec<f64>,
        z: Vec<f64>,
        beta_over_gamma: f64,
        denom: f64,
    },
    Cg {
        op: DiscreteOperator,
    },
}

/// Prefactored solver for `(I + dt · A) x = rhs`.
#[derive(Clone, Debug)]
pub struct OperatorSolver {
    pub dt: f64,
    guts: SolverGuts,
}

impl OperatorSolver {
    pub fn solve(&self, rhs: &GridField) -> Result<GridField> {
        match &self.guts {
            SolverGuts::Thomas { low, udiag, sup } => {
                Ok(rhs.with_values(thomas_solve(low, udiag, sup, &rhs.values)))
            }
            SolverGuts::Cyclic {
                low,
                udiag,
                sup,
                z,
                beta_over_gamma,
                denom,
            } => {
                let n = rhs.values.len();
                let y = thomas_solve(low, udiag, sup, &rhs.values);
                let vy = y[0] + beta_over_gamma * y[n - 1];
                let factor = vy / denom;
                Ok(rhs.with_values((0..n).map(|i| y[i] - factor * z[i]).collect()))
            }
            SolverGuts::Cg { op } => cg_solve(op, self.dt, rhs),
        }
    }
}

/// Conjugate gradients on `(I + dt · A)` for the 2D flux stencil (symmetric
/// positive definite by construction).
fn cg_solve(op: &DiscreteOperator, dt: f64, rhs: &GridField) -> Result<GridField> {
    let apply_m = |u: &GridField| -> GridField {
        let mut au = op.apply(u);
        au = au.scale(dt);
        au.axpy(1.0, u);
        au
    };
    let mut x = rhs.clone();
    let mut r = rhs.sub(&apply_m(&x));
    let mut p = r.clone();
    let rhs_norm2: f64 = rhs.values.iter().map(|v| v * v).sum();
    if rhs_norm2 == 0.0 {
        return Ok(rhs.zeros_like());
    }
    let mut rs: f64 = r.values.iter().map(|v| v * v).sum();
    let tol2 = 1e-26 * rhs_norm2;
    for _ in 0..10 * rhs.len().max(64) {
        if rs <= tol2 {
            return Ok(x);
        }
        let ap = apply_m(&p);
        let pap: f64 = p.values.iter().zip(&ap.values).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return Err(Error::Solver("conjugate gradients lost positivity".into()));
        }
        let alpha = rs / pap;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        let rs_new: f64 = r.values.iter().map(|v| v * v).sum();
        let beta = rs_new / rs;
        rs = rs_new;
        p = {
            let mut np = r.clone();
            np.axpy(beta, &p);
            np
        };
    }
    if rs <= 1e-20 * rhs_norm2 {
        Ok(x)
    } else {
        Err(Error::Solver("conjugate gradients did not converge".into()))
    }
}

/// Cyclic Jacobi eigensolver for a dense symmetric matrix; returns
/// eigenvalues ascending with matching unit eigenvectors (as rows of the
/// result's second component).
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[p][q].abs());
            }
        }
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..n {
                    let (apl, aql) = (a[p][i], a[q][i]);
                    a[p][i] = c * apl - s * aql;
                    a[q][i] = s * apl + c * aql;
                }
                for row in a.iter_mut() {
                    let (aip, aiq) = (row[p], row[q]);
                    row[p] = c * aip - s * aiq;
                    row[q] = s * aip + c * aiq;
                }
                for row in v.iter_mut() {
                    let (vip, viq) = (row[p], row[q]);
                    row[p] = c * vip - s * viq;
                    row[q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i][i].partial_cmp(&a[j][j]).unwrap());
    let lambdas = order.iter().map(|&i| a[i][i]).collect();
    let vecs = order
        .iter()
        .map(|&col| (0..n).map(|i| v[i][col]).collect())
        .collect();
    (lambdas, vecs)
}

/// Eigen-factorized operator: exact semigroup arithmetic in eigenmode
/// coordinates. Modes are orthonormal in the grid inner product.
#[derive(Clone, Debug)]
pub struct EigenOperator {
    pub lambdas: Vec<f64>,
    modes: Vec<Vec<f64>>,
    template: GridField,
}

impl EigenOperator {
    pub fn n_modes(&self) -> usize {
        self.lambdas.len()
    }

    pub fn layout(&self) -> &GridField {
        &self.template
    }

    /// Grid-weighted mode coefficients of a field.
    pub fn to_coeffs(&self, u: &GridField) -> Vec<f64> {
        let h = self.template.h;
        self.modes
            .iter()
            .map(|m| h * m.iter().zip(&u.values).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    pub fn from_coeffs(&self, coeffs: &[f64]) -> GridField {
        let mut out = vec![0.0; self.template.len()];
        for (c, m) in coeffs.iter().zip(&self.modes) {
            for (o, e) in out.iter_mut().zip(m) {
                *o += c * e;
            }
        }
        self.template.with_values(out)
    }

    /// Apply `e^{-tA}` exactly in mode coordinates.
    pub fn semigroup_coeffs(&self, t: f64, coeffs: &mut [f64]) {
        for (c, l) in coeffs.iter_mut().zip(&self.lambdas) {
            *c *= (-l * t).exp();
        }
    }

    pub fn semigroup_field(&self, t: f64, u: &GridField) -> GridField {
        let mut c = self.to_coeffs(u);
        self.semigroup_coeffs(t, &mut c);
        self.from_coeffs(&c)
    }
}

// ---------------------------------------------------------- time stepping --

/// The cut-off correction `θ · (A(anchor) - A(u)) u` on the grid. The
/// spectral shift cancels in the operator difference.
pub fn truncated_quasilinearity(
    u: &GridField,
    u_anchor: &GridField,
    theta: f64,
    model: &ModelSpec,
) -> Result<GridField> {
    let op_anchor = assemble_operator(model, u_anchor)?;
    correction_term(&op_anchor, u, theta, model)
}

fn correction_term(
    op_anchor: &DiscreteOperator,
    u: &GridField,
    theta: f64,
    model: &ModelSpec,
) -> Result<GridField> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Config(format!(
            "cut-off value must lie in [0,1], got {theta}"
        )));
    }
    if theta == 0.0 {
        return Ok(u.zeros_like());
    }
    let op_now = assemble_operator(model, u)?;
    let frozen = op_anchor.apply(u);
    let current = op_now.apply(u);
    Ok(frozen.sub(&current).scale(theta))
}

/// One semi-implicit step: solves
/// `(I + dt A_h) u⁺ = u + dt [θ (A_h - A_h(u)) u + F(u) + f] + Σ_k B_k(u) ΔW_k`
/// with the frozen operator `A_h` treated implicitly. The returned field is
/// the caller's blow-up probe: non-finite values are reported as an error.
#[allow(clippy::too_many_arguments)]
pub fn semi_implicit_step(
    u: &GridField,
    op: &DiscreteOperator,
    solver: &OperatorSolver,
    model: &ModelSpec,
    triple: &SpaceTriple,
    theta: f64,
    t: f64,
    dw: &[f64],
) -> Result<GridField> {
    let dt = solver.dt;
    let mut rhs = u.clone();
    let correction = correction_term(op, u, theta, model)?;
    rhs.axpy(dt, &correction);
    let drift = model.drift_lower_order(t, u)?;
    rhs.axpy(dt, &drift);
    if !dw.is_empty() && !model.is_deterministic() {
        let fields = model.noise_fields(u, triple, dw.len())?;
        for (field, inc) in fields.iter().zip(dw) {
            rhs.axpy(*inc, field);
        }
    }
    let next = solver.solve(&rhs)?;
    if !next.is_finite() {
        return Err(Error::NonFiniteField);
    }
    Ok(next)
}

/// Validated cut-off budget: the measured regularity constants, the
/// Lipschitz data, and the cut-off scale λ they admit.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SmallnessBudget {
    pub c_q: f64,
    pub l_f1: f64,
    pub l_f2: f64,
    pub l_b1: f64,
    pub l_b2: f64,
    pub lambda: f64,
    pub c_mrd: f64,
    pub c_mrs: f64,
}

impl SmallnessBudget {
    /// Left-hand side of the smallness condition.
    pub fn contraction_bound(&self) -> f64 {
        self.c_mrd * (6.0 * self.c_q * self.lambda + self.l_f1 + self.l_f2)
            + self.c_mrs * (self.l_b1 + self.l_b2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "cut-off scale must be positive, got {}",
                self.lambda
            )));
        }
        if [
            self.c_q, self.l_f1, self.l_f2, self.l_b1, self.l_b2, self.c_mrd, self.c_mrs,
        ]
        .iter()
        .any(|v| !(*v >= 0.0))
        {
            return Err(Error::Config("budget constants must be nonnegative".into()));
        }
        if self.contraction_bound() >= 1.0 {
            return Err(Error::SmallnessUnsatisfiable);
        }
        Ok(())
    }
}

/// Empirical regularity constants measured by [`estimate_mr_constants`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MRConstants {
    pub c_mrd_hat: f64,
    pub c_mrs_hat: f64,
    pub n_samples: usize,
}

/// Pick the largest cut-off scale λ that keeps the contraction bound at
/// `margin`, capped at `lambda_max`; returns the full validated budget.
#[allow(clippy::too_many_arguments)]
pub fn choose_lambda(
    c_q: f64,
    l_f1: f64,
    l_f2: f64,
    l_b1: f64,
    l_b2: f64,
    mr: &MRConstants,
    margin: f64,
    lambda_max: f64,
) -> Result<SmallnessBudget> {
    if !(margin > 0.0 && margin < 1.0) {
        return Err(Error::Config(format!(
            "margin must lie in (0,1), got {margin}"
        )));
    }
    if !(lambda_max > 0.0) {
        return Err(Error::Config(format!(
            "cut-off cap must be positive, got {lambda_max}"
        )));
    }
    let gap = margin - mr.c_mrd_hat * (l_f1 + l_f2) - mr.c_mrs_hat * (l_b1 + l_b2);
    if !(gap > 0.0) {
        return Err(Error::SmallnessUnsatisfiable);
    }
    let denom = 6.0 * c_q * mr.c_mrd_hat;
    let lambda = if denom > 0.0 {
        (gap / denom).min(lambda_max)
    } else {
        lambda_max
    };
    let budget = SmallnessBudget {
        c_q,
        l_f1,
        l_f2,
        l_b1,
        l_b2,
        lambda,
        c_mrd: mr.c_mrd_hat,
        c_mrs: mr.c_mrs_hat,
    };
    budget.validate()?;
    Ok(budget)
}

/// Output of one frozen-coefficient segment.
#[derive(Clone, Debug)]
pub struct SegmentResult {
    /// States per step, anchor first.
    pub states: Vec<GridField>,
    pub monitor: MonitorSeries,
    /// θ used at each executed step (adapted: step `m` uses the monitor
    /// after step `m-1`).
    pub theta_history: Vec<f64>,
    /// First step index whose monitor exceeded λ, if any; indexes into
    /// `states`.
    pub stop_index: Option<usize>,
    /// Set when a step produced a non-finite field; `states` then ends at
    /// the last finite state.
    pub blown_up: bool,
}

impl SegmentResult {
    /// Number of steps actually executed.
    pub fn steps_taken(&self) -> usize {
        self.states.len() - 1
    }
}

/// Run one frozen-coefficient segment from `t0` to `t_end` (or to the first
/// monitor exceedance), reading increments from `noise` starting at global
/// step `step_offset`. θ is evaluated from the monitor after the previous
/// step; the first step always uses θ = 1.
#[allow(clippy::too_many_arguments)]
pub fn solve_frozen_segment(
    u_anchor: &GridField,
    model: &ModelSpec,
    budget: &SmallnessBudget,
    noise: &NoisePath,
    step_offset: usize,
    t0: f64,
    t_end: f64,
    triple: &SpaceTriple,
) -> Result<SegmentResult> {
    let dt = noise.dt;
    if !(t_end > t0) {
        return Err(Error::Config(format!(
            "segment needs t_end > t0, got [{t0}, {t_end}]"
        )));
    }
    let steps = ((t_end - t0) / dt).round().max(1.0) as usize;
    if step_offset + steps > noise.n_steps {
        return Err(Error::Config(format!(
            "segment needs {} steps from offset {} but the noise table has {}",
            steps, step_offset, noise.n_steps
        )));
    }
    let op = assemble_operator(model, u_anchor)?;
    let solver = op.solver(dt)?;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(u_anchor.clone());
    let mut monitor = MonitorSeries::new();
    let mut theta_history = Vec::with_capacity(steps);
    let mut stop_index = None;
    let mut blown_up = false;
    for m in 0..steps {
        let theta = theta_lambda(monitor.value(), budget.lambda)?;
        theta_history.push(theta);
        let t = t0 + m as f64 * dt;
        let current = states.last().expect("segment holds at least the anchor");
        let next = match semi_implicit_step(
            current,
            &op,
            &solver,
            model,
            triple,
            theta,
            t,
            noise.row(step_offset + m),
        ) {
            Ok(f) => f,
            Err(Error::NonFiniteField) => {
                blown_up = true;
                break;
            }
            Err(e) => return Err(e),
        };
        monitor.push(&next, u_anchor, dt, triple)?;
        states.push(next);
        if monitor.value() > budget.lambda {
            stop_index = Some(m + 1);
            break;
        }
    }
    Ok(SegmentResult {
        states,
        monitor,
        theta_history,
        stop_index,
        blown_up,
    })
}

// ------------------------------------------------------------- fixed point --

/// Picard iteration for the frozen-operator equation in eigenmode
/// coordinates: iterates the map
/// `Kφ(t_m) = e^{-t_m A} u0 + Σ_{j<m} e^{-(t_m-t_j)A}[(F(φ_j)+f) dt + (B(φ_j)+b) ΔW_j]`
/// until the combined path distance drops below `tol`. Returns the fixed
/// point path and the successive contraction ratios.
#[allow(clippy::too_many_arguments)]
pub fn picard_solve(
    eigen: &EigenOperator,
    model: &ModelSpec,
    u0: &GridField,
    noise: &NoisePath,
    kappa: f64,
    tol: f64,
    max_iter: usize,
    triple: &SpaceTriple,
) -> Result<(Vec<GridField>, Vec<f64>)> {
    let dt = noise.dt;
    if !(kappa > 0.0) || !(tol > 0.0) || max_iter == 0 {
        return Err(Error::Config(
            "fixed-point solve needs kappa > 0, tol > 0, max_iter ≥ 1".into(),
        ));
    }
    let m_steps = (kappa / dt).round() as usize;
    if m_steps == 0 || m_steps > noise.n_steps {
        return Err(Error::Config(format!(
            "fixed-point horizon needs 1..={} steps, got {}",
            noise.n_steps, m_steps
        )));
    }
    let c0 = eigen.to_coeffs(u0);
    let decay: Vec<f64> = eigen.lambdas.iter().map(|l| (-l * dt).exp()).collect();
    let semigroup_path: Vec<GridField> = (0..=m_steps)
        .map(|m| {
            let mut c = c0.clone();
            eigen.semigroup_coeffs(m as f64 * dt, &mut c);
            eigen.from_coeffs(&c)
        })
        .collect();
    let apply_k = |phi: &[GridField]| -> Result<Vec<GridField>> {
        let n_modes = eigen.n_modes();
        let mut out = Vec::with_capacity(m_steps + 1);
        out.push(phi[0].clone());
        let mut s = vec![0.0; n_modes];
        for m in 1..=m_steps {
            let j = m - 1;
            let t_j = j as f64 * dt;
            let mut increment = model.drift_lower_order(t_j, &phi[j])?.scale(dt);
            if !model.is_deterministic() {
                let fields = model.noise_fields(&phi[j], triple, noise.n_modes)?;
                for (field, inc) in fields.iter().zip(noise.row(j)) {
                    increment.axpy(*inc, field);
                }
            }
            let cj = eigen.to_coeffs(&increment);
            for k in 0..n_modes {
                s[k] = decay[k] * (s[k] + cj[k]);
            }
            let mut c = c0.clone();
            eigen.semigroup_coeffs(m as f64 * dt, &mut c);
            for k in 0..n_modes {
                c[k] += s[k];
            }
            out.push(eigen.from_coeffs(&c));
        }
        Ok(out)
    };
    let distance = |a: &[GridField], b: &[GridField]| -> Result<f64> {
        let mut pow = 0.0;
        let mut sup = 0.0f64;
        for (fa, fb) in a.iter().zip(b) {
            let diff = fa.sub(fb);
            pow += dt * triple.norm_e1(&diff)?.powf(triple.p);
            sup = sup.max(triple.norm_ep(&diff)?);
        }
        Ok(pow.powf(1.0 / triple.p) + sup)
    };

    let mut phi = semigroup_path;
    let mut ratios = Vec::new();
    let mut prev_dist: Option<f64> = None;
    for iter in 0..max_iter {
        let next = apply_k(&phi)?;
        let d = distance(&next, &phi)?;
        if let Some(pd) = prev_dist {
            if pd > 0.0 {
                ratios.push(d / pd);
            }
        }
        phi = next;
        if d < tol {
            return Ok((phi, ratios));
        }
        prev_dist = Some(d);
        if iter + 1 == max_iter {
            let contracting = ratios.last().map_or(false, |r| *r < 1.0);
            if !contracting {
                return Err(Error::NoContraction(max_iter));
            }
        }
    }
    Ok((phi, ratios))
}

// -------------------------------------------------- regularity constants --

/// Ratio of the combined path norm of the deterministic convolution
/// `z_m = Σ_{j<m} dt e^{-(t_m-t_j)A} g_j` to the time-integrated source
/// norm. `g` holds one mode-coefficient vector per step. Returns `None`
/// when the source norm is zero.
pub fn deterministic_convolution_ratio(
    eigen: &EigenOperator,
    triple: &SpaceTriple,
    dt: f64,
    g: &[Vec<f64>],
) -> Result<Option<f64>> {
    let p = triple.p;
    let n_modes = eigen.n_modes();
    let decay: Vec<f64> = eigen.lambdas.iter().map(|l| (-l * dt).exp()).collect();
    let mut rhs_pow = 0.0;
    for row in g {
        let field = eigen.from_coeffs(row);
        rhs_pow += dt * triple.norm_e(&field)?.powf(p);
    }
    let rhs = rhs_pow.powf(1.0 / p);
    if rhs == 0.0 {
        return Ok(None);
    }
    let mut s = vec![0.0; n_modes];
    let mut lhs_pow = 0.0;
    let mut lhs_sup = 0.0f64;
    for row in g {
        for k in 0..n_modes {
            s[k] = decay[k] * (s[k] + dt * row[k]);
        }
        let z = eigen.from_coeffs(&s);
        lhs_pow += dt * triple.norm_e1(&z)?.powf(p);
        lhs_sup = lhs_sup.max(triple.norm_ep(&z)?);
    }
    Ok(Some((lhs_pow.powf(1.0 / p) + lhs_sup) / rhs))
}

/// Ratio of the Monte Carlo path norm of the stochastic convolution
/// `z_m = Σ_{j<m} Σ_k e^{-(t_m-t_j)A} g_{j,k} ΔW_{j,k}` to the
/// square-function norm of the integrand. `g[j][k]` is the mode-coefficient
/// vector of noise mode `k` at step `j`; `xi[path][j][k]` are the driving
/// increments. Symmetric in the noise-mode index: relabeling modes of `g`
/// and `xi` together leaves the ratio unchanged. Returns `None` when the
/// integrand norm is zero.
pub fn stochastic_convolution_ratio(
    eigen: &EigenOperator,
    triple: &SpaceTriple,
    dt: f64,
    g: &[Vec<Vec<f64>>],
    xi: &[Vec<Vec<f64>>],
) -> Result<Option<f64>> {
    let p = triple.p;
    let n_modes = eigen.n_modes();
    let decay: Vec<f64> = eigen.lambdas.iter().map(|l| (-l * dt).exp()).collect();
    let mut rhs_pow = 0.0;
    for row in g {
        let fields: Vec<GridField> = row.iter().map(|c| eigen.from_coeffs(c)).collect();
        rhs_pow += dt * gamma_noise_norm(&fields, triple)?.powf(p);
    }
    let rhs = rhs_pow.powf(1.0 / p);
    if rhs == 0.0 {
        return Ok(None);
    }
    let mut mean_lp = 0.0;
    let mut mean_sup = 0.0;
    for path in xi {
        let mut s = vec![0.0; n_modes];
        let mut lhs_pow = 0.0;
        let mut sup = 0.0f64;
        for (j, row) in g.iter().enumerate() {
            let mut cj = vec![0.0; n_modes];
            for (kn, coeffs) in row.iter().enumerate() {
                let w = path[j][kn];
                for k in 0..n_modes {
                    cj[k] += coeffs[k] * w;
                }
            }
            for k in 0..n_modes {
                s[k] = decay[k] * (s[k] + cj[k]);
            }
            let z = eigen.from_coeffs(&s);
            lhs_pow += dt * triple.norm_e1(&z)?.powf(p);
            sup = sup.max(triple.norm_ep(&z)?);
        }
        mean_lp += lhs_pow;
        mean_sup += sup.powf(p);
    }
    let np = xi.len() as f64;
    let lhs = (mean_lp / np).powf(1.0 / p) + (mean_sup / np).powf(1.0 / p);
    Ok(Some(lhs / rhs))
}

/// Measure working regularity constants as maxima of observed convolution
/// ratios over random step-function integrands: deterministic sources for
/// `c_mrd_hat`, stochastically integrated per-mode sources for `c_mrs_hat`.
/// Sample streams are keyed by the sample index, so estimates are
/// nondecreasing in `n_samples`. Zero-norm samples are skipped; if every
/// sample is skipped, an error is returned.
pub fn estimate_mr_constants(
    eigen: &EigenOperator,
    triple: &SpaceTriple,
    spec: &crate::noise::NoiseSpec,
    n_samples: usize,
) -> Result<MRConstants> {
    if n_samples == 0 {
        return Err(Error::Config(
            "constant estimation needs at least one sample".into(),
        ));
    }
    spec.validate()?;
    let m_steps = spec.n_steps;
    let dt = spec.dt;
    let roughness = [0.0, 0.5, 1.0];

    let mut c_mrd_hat = 0.0f64;
    let mut used_det = 0usize;
    for sample in 0..n_samples {
        let g = mr_det_integrand(eigen, spec, sample, roughness[sample % roughness.len()]);
        if let Some(r) = deterministic_convolution_ratio(eigen, triple, dt, &g)? {
            used_det += 1;
            c_mrd_hat = c_mrd_hat.max(r);
        }
    }
    if used_det == 0 {
        return Err(Error::Solver(
            "every deterministic sample had zero norm".into(),
        ));
    }

    let n_noise = spec.n_modes;
    let n_paths_per_sample = 8usize;
    let seed_path = spec.master_seed ^ 0x6d72_7061;
    let mut c_mrs_hat = 0.0f64;
    let mut used_stoch = 0usize;
    for sample in 0..n_samples {
        let g = mr_stoch_integrand(eigen, spec, sample, roughness[sample % roughness.len()]);
        let xi: Vec<Vec<Vec<f64>>> = (0..n_paths_per_sample)
            .map(|path| {
                (0..m_steps)
                    .map(|j| {
                        (0..n_noise)
                            .map(|kn| {
                                crate::noise::standard_normal(
                                    seed_path,
                                    (sample * n_paths_per_sample + path) as u64,
                                    j as u64,
                                    kn as u64,
                                ) * dt.sqrt()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        if let Some(r) = stochastic_convolution_ratio(eigen, triple, dt, &g, &xi)? {
            used_stoch += 1;
            c_mrs_hat = c_mrs_hat.max(r);
        }
    }
    if used_stoch == 0 {
        return Err(Error::Solver(
            "every stochastic sample had zero norm".into(),
        ));
    }
    Ok(MRConstants {
        c_mrd_hat,
        c_mrs_hat,
        n_samples,
    })
}

/// Sample-indexed deterministic integrand used by [`estimate_mr_constants`].
pub fn mr_det_integrand(
    eigen: &EigenOperator,
    spec: &crate::noise::NoiseSpec,
    sample: usize,
    roughness: f64,
) -> Vec<Vec<f64>> {
    let seed = spec.master_seed ^ 0x6d72_6465;
    (0..spec.n_steps)
        .map(|j| {
            (0..eigen.n_modes())
                .map(|k| {
                    crate::noise::standard_normal(seed, sample as u64, j as u64, k as u64)
                        * (1.0 + eigen.lambdas[k]).powf(-roughness)
                })
                .collect()
        })
        .collect()
}

/// Random smooth field for coefficient calibration: low reference modes
/// with geometrically damped Gaussian amplitudes.
fn calibration_field(
    triple: &SpaceTriple,
    seed: u64,
    sample: u64,
    tag: u64,
    amp: f64,
) -> GridField {
    let modes = triple.n_modes().min(12);
    let mut out = triple.mode_field(0).scale(0.0);
    for k in 0..modes {
        let xi = crate::noise::standard_normal(seed, sample, tag, k as u64);
        out.axpy(amp * xi / ((k + 1) as f64).powi(2), &triple.mode_field(k));
    }
    out
}

/// Monte Carlo estimate of the operator-level coefficient sensitivity
/// `C_Q = sup ‖(A(v) - A(w)) z‖_E / (‖v - w‖_{E_p} ‖z‖_{E^1})`, the constant
/// the smallness condition and the cut-off correction bounds are stated
/// with. Returns the max ratio over `n_samples` random smooth field triples.
pub fn measure_coefficient_lipschitz(
    model: &ModelSpec,
    triple: &SpaceTriple,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Config(
            "coefficient calibration needs at least one sample".into(),
        ));
    }
    let mut worst = 0.0f64;
    for s in 0..n_samples {
        let amp = 0.25 * (1 + s % 4) as f64;
        let v = calibration_field(triple, seed, s as u64, 0, amp);
        let w = calibration_field(triple, seed, s as u64, 1, amp);
        let z = calibration_field(triple, seed, s as u64, 2, 1.0);
        let denom = triple.norm_ep(&v.sub(&w))? * triple.norm_e1(&z)?;
        if !(denom > 0.0) {
            continue;
        }
        let op_v = assemble_operator(model, &v)?;
        let op_w = assemble_operator(model, &w)?;
        let diff = op_v.apply(&z).sub(&op_w.apply(&z));
        worst = worst.max(triple.norm_e(&diff)? / denom);
    }
    Ok(worst)
}

/// Monte Carlo estimate of the noise-coefficient Lipschitz constant
/// `L_B = sup ‖B(v) - B(w)‖_γ / ‖v - w‖_{E_p}` over random smooth pairs.
pub fn measure_noise_lipschitz(
    model: &ModelSpec,
    triple: &SpaceTriple,
    n_modes: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Config(
            "noise calibration needs at least one sample".into(),
        ));
    }
    if model.is_deterministic() {
        return Ok(0.0);
    }
    let mut worst = 0.0f64;
    for s in 0..n_samples {
        let amp = 0.25 * (1 + s % 4) as f64;
        let v = calibration_field(triple, seed, s as u64, 3, amp);
        let w = calibration_field(triple, seed, s as u64, 4, amp);
        let denom = triple.norm_ep(&v.sub(&w))?;
        if !(denom > 0.0) {
            continue;
        }
        let bv = model.noise_fields(&v, triple, n_modes)?;
        let bw = model.noise_fields(&w, triple, n_modes)?;
        let diffs: Vec<GridField> = bv.iter().zip(&bw).map(|(a, b)| a.sub(b)).collect();
        worst = worst.max(crate::spaces::gamma_noise_norm(&diffs, triple)? / denom);
    }
    Ok(worst)
}

/// Monte Carlo estimate of the trace-to-ground Lipschitz constant of the
/// lower-order drift, `sup ‖F(v) - F(w)‖_E / ‖v - w‖_{E_p}`, over random
/// smooth field pairs. Deterministic forcing cancels in the differences.
pub fn measure_drift_lipschitz(
    model: &ModelSpec,
    triple: &SpaceTriple,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Config(
            "drift calibration needs at least one sample".into(),
        ));
    }
    let mut worst = 0.0f64;
    for s in 0..n_samples {
        let amp = 0.25 * (1 + s % 4) as f64;
        let v = calibration_field(triple, seed, s as u64, 5, amp);
        let w = calibration_field(triple, seed, s as u64, 6, amp);
        let denom = triple.norm_ep(&v.sub(&w))?;
        if !(denom > 0.0) {
            continue;
        }
        let fv = model.drift_lower_order(0.0, &v)?;
        let fw = model.drift_lower_order(0.0, &w)?;
        worst = worst.max(triple.norm_e(&fv.sub(&fw))? / denom);
    }
    Ok(worst)
}

/// Sample-indexed stochastic integrand used by [`estimate_mr_constants`].
pub fn mr_stoch_integrand(
    eigen: &EigenOperator,
    spec: &crate::noise::NoiseSpec,
    sample: usize,
    roughness: f64,
) -> Vec<Vec<Vec<f64>>> {
    let seed = spec.master_seed ^ 0x6d72_7374;
    let n_modes = eigen.n_modes();
    (0..spec.n_steps)
        .map(|j| {
            (0..spec.n_modes)
                .map(|kn| {
                    (0..n_modes)
                        .map(|k| {
                            crate::noise::standard_normal(
                                seed,
                                sample as u64,
                                j as u64,
                                (kn * n_modes + k) as u64,
                            ) * (1.0 + eigen.lambdas[k]).powf(-roughness)
                                / (kn + 1) as f64
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}
