//! Discrete function spaces.
//!
//! A [`GridField`] is one spatial state on a uniform grid over the unit
//! interval or unit square. The nested scale of norms (ground space `E`,
//! half space `E^{1/2}`, trace space `E_p`, domain space `E^1`) is realized
//! through dyadic eigen-blocks of a shifted reference Laplacian held by a
//! [`SpaceTriple`]; see [`fractional_norm`]. The module also provides the
//! ramp cut-off [`theta_lambda`] and the restart monitor
//! ([`MonitorSeries`], [`monitor_update`]).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Boundary handling for grid fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Homogeneous Dirichlet data; only interior nodes are stored and the
    /// boundary value 0 is implicit.
    Dirichlet,
    /// Periodic wrap-around on the torus; all nodes are stored.
    Periodic,
}

/// One spatial state on a uniform grid with mesh width `h = 1/n`.
///
/// Dirichlet fields over `n` cells store the `n - 1` interior nodes per axis
/// (node `i` sits at `x = (i + 1) h`); periodic fields store all `n` nodes
/// (node `i` at `x = i h`). Two-dimensional fields are stored row-major with
/// `ny` rows of `nx` values.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub values: Vec<f64>,
    pub h: f64,
    pub boundary: Boundary,
    pub nx: usize,
    pub ny: usize,
}

impl GridField {
    fn nodes_per_axis(n_cells: usize, boundary: Boundary) -> usize {
        match boundary {
            Boundary::Dirichlet => n_cells - 1,
            Boundary::Periodic => n_cells,
        }
    }

    /// One-dimensional field from explicit node values.
    pub fn new_1d(n_cells: usize, boundary: Boundary, values: Vec<f64>) -> Result<Self> {
        let nx = Self::nodes_per_axis(n_cells, boundary);
        if n_cells < 2 || values.len() != nx {
            return Err(Error::Config(format!(
                "field over {} cells needs {} nodes, got {}",
                n_cells,
                nx,
                values.len()
            )));
        }
        Ok(GridField {
            values,
            h: 1.0 / n_cells as f64,
            boundary,
            nx,
            ny: 1,
        })
    }

    /// Two-dimensional field from explicit row-major node values.
    pub fn new_2d(n_cells: usize, boundary: Boundary, values: Vec<f64>) -> Result<Self> {
        let nx = Self::nodes_per_axis(n_cells, boundary);
        if n_cells < 2 || values.len() != nx * nx {
            return Err(Error::Config(format!(
                "2-d field over {} cells needs {} nodes, got {}",
                n_cells,
                nx * nx,
                values.len()
            )));
        }
        Ok(GridField {
            values,
            h: 1.0 / n_cells as f64,
            boundary,
            nx,
            ny: nx,
        })
    }

    /// Same layout as `self`, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len(), "field layout mismatch");
        GridField {
            values,
            h: self.h,
            boundary: self.boundary,
            nx: self.nx,
            ny: self.ny,
        }
    }

    /// Zero field with the same layout as `self`.
    pub fn zeros_like(&self) -> Self {
        self.with_values(vec![0.0; self.values.len()])
    }

    /// One-dimensional field sampled from a function of `x`.
    pub fn from_fn_1d(n_cells: usize, boundary: Boundary, f: impl Fn(f64) -> f64) -> Self {
        let nx = Self::nodes_per_axis(n_cells, boundary);
        let h = 1.0 / n_cells as f64;
        let offset = match boundary {
            Boundary::Dirichlet => 1.0,
            Boundary::Periodic => 0.0,
        };
        let values = (0..nx).map(|i| f((i as f64 + offset) * h)).collect();
        GridField {
            values,
            h,
            boundary,
            nx,
            ny: 1,
        }
    }

    /// Two-dimensional field sampled from a function of `(x, y)`.
    pub fn from_fn_2d(n_cells: usize, boundary: Boundary, f: impl Fn(f64, f64) -> f64) -> Self {
        let nx = Self::nodes_per_axis(n_cells, boundary);
        let h = 1.0 / n_cells as f64;
        let offset = match boundary {
            Boundary::Dirichlet => 1.0,
            Boundary::Periodic => 0.0,
        };
        let mut values = Vec::with_capacity(nx * nx);
        for j in 0..nx {
            for i in 0..nx {
                values.push(f((i as f64 + offset) * h, (j as f64 + offset) * h));
            }
        }
        GridField {
            values,
            h,
            boundary,
            nx,
            ny: nx,
        }
    }

    /// Spatial dimension (1 or 2).
    pub fn dim(&self) -> usize {
        if self.ny == 1 {
            1
        } else {
            2
        }
    }

    /// Number of grid cells per axis.
    pub fn n_cells(&self) -> usize {
        (1.0 / self.h).round() as usize
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn assert_same_layout(&self, other: &Self) {
        assert_eq!(self.nx, other.nx, "field layout mismatch");
        assert_eq!(self.ny, other.ny, "field layout mismatch");
        assert_eq!(self.boundary, other.boundary, "field boundary mismatch");
    }

    pub fn add(&self, other: &Self) -> Self {
        self.assert_same_layout(other);
        self.with_values(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.assert_same_layout(other);
        self.with_values(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn scale(&self, c: f64) -> Self {
        self.with_values(self.values.iter().map(|v| c * v).collect())
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Self) {
        self.assert_same_layout(other);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        self.with_values(self.values.iter().map(|v| f(*v)).collect())
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Grid-weighted inner product `h^d Σ f g`.
pub fn l2h_inner(f: &GridField, g: &GridField) -> f64 {
    f.assert_same_layout(g);
    let hd = f.h.powi(f.dim() as i32);
    hd * f
        .values
        .iter()
        .zip(&g.values)
        .map(|(a, b)| a * b)
        .sum::<f64>()
}

/// Which concrete space scale a triple realizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Divergence-form scale on a Dirichlet domain: the ground space is a
    /// negative-order Sobolev space, the domain space is first-order.
    DivergenceForm,
    /// Non-divergence scale on the torus: the ground space is Lebesgue,
    /// the domain space is second-order.
    NondivergenceForm,
}

/// Norm provider for the nested space scale.
///
/// Holds the integrability exponents `(p, q)`, the dimension, and the
/// eigenpairs of the shifted reference operator (discrete Dirichlet
/// Laplacian plus identity, or Fourier modes plus identity on the torus).
/// Smoothness orders are measured in powers of the reference spectrum:
/// an eigenvalue `λ ~ 4^j` carries weight `2^{j s}` for smoothness `s`.
#[derive(Clone, Debug)]
pub struct SpaceTriple {
    pub p: f64,
    pub q: f64,
    pub d: usize,
    pub n: usize,
    pub scale: Scale,
    pub boundary: Boundary,
    eigenvalues: Vec<f64>,
    modes: Vec<Vec<f64>>,
    blocks: Vec<(i32, Vec<usize>)>,
}

/// Largest cells-per-axis supported for two-dimensional triples; the
/// explicit tensor eigenbasis grows as the fourth power of the resolution.
pub const MAX_2D_CELLS: usize = 32;

impl SpaceTriple {
    /// Build a triple, validating `p > 2`, `q > 2`, `d ∈ {1, 2}` and the
    /// trace-space embedding condition `1 - 2/p > d/q`.
    pub fn new(p: f64, q: f64, d: usize, n: usize, scale: Scale) -> Result<Self> {
        if !(p > 2.0) || !(q > 2.0) {
            return Err(Error::Config(format!(
                "need p > 2 and q > 2, got p={p}, q={q}"
            )));
        }
        if d != 1 && d != 2 {
            return Err(Error::Config(format!("dimension must be 1 or 2, got {d}")));
        }
        if n < 4 {
            return Err(Error::Config(format!(
                "need at least 4 cells per axis, got {n}"
            )));
        }
        if d == 2 && n > MAX_2D_CELLS {
            return Err(Error::Config(format!(
                "two-dimensional triples support at most {MAX_2D_CELLS} cells per axis, got {n}"
            )));
        }
        if 1.0 - 2.0 / p <= d as f64 / q {
            return Err(Error::Config(format!(
                "trace-space condition 1 - 2/p > d/q violated: p={p}, q={q}, d={d}"
            )));
        }
        let boundary = match scale {
            Scale::DivergenceForm => Boundary::Dirichlet,
            Scale::NondivergenceForm => Boundary::Periodic,
        };
        let (ev1, modes1) = reference_basis_1d(n, boundary);
        let (eigenvalues, modes) = match d {
            1 => (ev1, modes1),
            _ => tensor_basis(&ev1, &modes1),
        };
        let blocks = dyadic_blocks(&eigenvalues);
        Ok(SpaceTriple {
            p,
            q,
            d,
            n,
            scale,
            boundary,
            eigenvalues,
            modes,
            blocks,
        })
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Shifted reference eigenvalue for mode `k` (ascending order).
    pub fn eigenvalue(&self, k: usize) -> f64 {
        self.eigenvalues[k]
    }

    /// Mode `k` as a grid field, orthonormal under the `h^d`-weighted dot.
    pub fn mode_field(&self, k: usize) -> GridField {
        GridField {
            values: self.modes[k].clone(),
            h: self.h(),
            boundary: self.boundary,
            nx: if self.d == 1 {
                self.modes[k].len()
            } else {
                nodes_1d(self.n, self.boundary)
            },
            ny: if self.d == 1 {
                1
            } else {
                nodes_1d(self.n, self.boundary)
            },
        }
    }

    /// Smoothness order of the ground space `E`.
    pub fn s_e(&self) -> f64 {
        match self.scale {
            Scale::DivergenceForm => -1.0,
            Scale::NondivergenceForm => 0.0,
        }
    }

    /// Smoothness order of the half space `E^{1/2}`.
    pub fn s_ehalf(&self) -> f64 {
        match self.scale {
            Scale::DivergenceForm => 0.0,
            Scale::NondivergenceForm => 1.0,
        }
    }

    /// Smoothness order of the trace space `E_p`.
    pub fn s_ep(&self) -> f64 {
        match self.scale {
            Scale::DivergenceForm => 1.0 - 2.0 / self.p,
            Scale::NondivergenceForm => 2.0 - 2.0 / self.p,
        }
    }

    /// Smoothness order of the domain space `E^1`.
    pub fn s_e1(&self) -> f64 {
        match self.scale {
            Scale::DivergenceForm => 1.0,
            Scale::NondivergenceForm => 2.0,
        }
    }

    /// Ground-space norm.
    pub fn norm_e(&self, f: &GridField) -> Result<f64> {
        fractional_norm(f, self.s_e(), self, self.p)
    }

    /// Trace-space norm.
    pub fn norm_ep(&self, f: &GridField) -> Result<f64> {
        fractional_norm(f, self.s_ep(), self, self.p)
    }

    /// Domain-space norm.
    pub fn norm_e1(&self, f: &GridField) -> Result<f64> {
        fractional_norm(f, self.s_e1(), self, self.p)
    }

    /// Half-space norm; at smoothness 0 this is comparable to [`lq_norm`].
    pub fn norm_ehalf(&self, f: &GridField) -> Result<f64> {
        fractional_norm(f, self.s_ehalf(), self, self.q)
    }

    /// Coefficients of `f` against the reference modes.
    pub fn project_coeffs(&self, f: &GridField) -> Result<Vec<f64>> {
        if !f.is_finite() {
            return Err(Error::NonFiniteField);
        }
        if f.values.len() != self.modes.first().map_or(0, Vec::len) {
            return Err(Error::Config(format!(
                "field has {} nodes but the triple's basis has {}",
                f.values.len(),
                self.modes.first().map_or(0, Vec::len)
            )));
        }
        let hd = self.h().powi(self.d as i32);
        Ok(self
            .modes
            .iter()
            .map(|m| hd * m.iter().zip(&f.values).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }

    /// Dyadic block partition of the mode indices, with block exponents.
    pub fn blocks(&self) -> &[(i32, Vec<usize>)] {
        &self.blocks
    }
}

fn nodes_1d(n: usize, boundary: Boundary) -> usize {
    match boundary {
        Boundary::Dirichlet => n - 1,
        Boundary::Periodic => n,
    }
}

/// Eigenpairs of the shifted 1-d reference operator, ascending, with modes
/// orthonormal under the `h`-weighted dot.
fn reference_basis_1d(n: usize, boundary: Boundary) -> (Vec<f64>, Vec<Vec<f64>>) {
    let h = 1.0 / n as f64;
    let mut pairs: Vec<(f64, Vec<f64>)> = Vec::new();
    match boundary {
        Boundary::Dirichlet => {
            for k in 1..n {
                let lam =
                    4.0 / (h * h) * (0.5 * k as f64 * std::f64::consts::PI * h).sin().powi(2) + 1.0;
                let mode = (1..n)
                    .map(|i| {
                        (2.0f64).sqrt() * (k as f64 * std::f64::consts::PI * i as f64 * h).sin()
                    })
                    .collect();
                pairs.push((lam, mode));
            }
        }
        Boundary::Periodic => {
            let lam_of = |k: usize| {
                4.0 / (h * h) * (std::f64::consts::PI * k as f64 / n as f64).sin().powi(2) + 1.0
            };
            pairs.push((lam_of(0), vec![1.0; n]));
            for k in 1..n / 2 {
                let c = (0..n)
                    .map(|i| {
                        (2.0f64).sqrt()
                            * (2.0 * std::f64::consts::PI * k as f64 * i as f64 * h).cos()
                    })
                    .collect();
                let s = (0..n)
                    .map(|i| {
                        (2.0f64).sqrt()
                            * (2.0 * std::f64::consts::PI * k as f64 * i as f64 * h).sin()
                    })
                    .collect();
                pairs.push((lam_of(k), c));
                pairs.push((lam_of(k), s));
            }
            if n % 2 == 0 {
                let nyquist = (0..n)
                    .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
                    .collect();
                pairs.push((lam_of(n / 2), nyquist));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Tensor-product basis for two dimensions. The shift is counted once:
/// the pair `(k, l)` carries eigenvalue `λ_k + λ_l - 1`.
fn tensor_basis(ev1: &[f64], modes1: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m = modes1[0].len();
    let mut pairs: Vec<(f64, Vec<f64>)> = Vec::with_capacity(ev1.len() * ev1.len());
    for (lk, mk) in ev1.iter().zip(modes1) {
        for (ll, ml) in ev1.iter().zip(modes1) {
            let mut v = Vec::with_capacity(m * m);
            for mj in ml {
                for mi in mk {
                    v.push(mi * mj);
                }
            }
            pairs.push((lk + ll - 1.0, v));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Partition mode indices into dyadic blocks `Λ_j = {k : λ_k ∈ [4^j, 4^{j+1})}`.
fn dyadic_blocks(eigenvalues: &[f64]) -> Vec<(i32, Vec<usize>)> {
    let mut blocks: Vec<(i32, Vec<usize>)> = Vec::new();
    for (k, lam) in eigenvalues.iter().enumerate() {
        let j = lam.log2().div_euclid(2.0) as i32;
        match blocks.last_mut() {
            Some((jj, idx)) if *jj == j => idx.push(k),
            _ => blocks.push((j, vec![k])),
        }
    }
    blocks
}

/// Grid quadrature of the Lebesgue norm: `(h^d Σ |f|^q)^{1/q}`.
pub fn lq_norm(f: &GridField, q: f64) -> Result<f64> {
    if !f.is_finite() {
        return Err(Error::NonFiniteField);
    }
    if q < 1.0 {
        return Err(Error::Config(format!(
            "Lebesgue exponent must be ≥ 1, got {q}"
        )));
    }
    let hd = f.h.powi(f.dim() as i32);
    let sum: f64 = f.values.iter().map(|v| v.abs().powf(q)).sum();
    Ok((hd * sum).powf(1.0 / q))
}

/// First-order Sobolev norm: gradient norm plus Lebesgue norm.
///
/// The gradient uses centered differences in the interior, one-sided
/// differences against the implicit zero at a Dirichlet boundary, and
/// wrap-around on the torus. A field that is discontinuous across the
/// periodic wrap (for example a linear ramp) is not rejected; it simply
/// reports the large gradient the wrap produces.
pub fn sobolev1_norm(f: &GridField, q: f64) -> Result<f64> {
    if !f.is_finite() {
        return Err(Error::NonFiniteField);
    }
    let grad_mag = gradient_magnitude(f);
    Ok(lq_norm(&grad_mag, q)? + lq_norm(f, q)?)
}

/// Pointwise Euclidean magnitude of the centered-difference gradient.
pub(crate) fn gradient_magnitude(f: &GridField) -> GridField {
    let gx = axis_gradient(f, 0);
    if f.dim() == 1 {
        return gx.map(f64::abs);
    }
    let gy = axis_gradient(f, 1);
    f.with_values(
        gx.values
            .iter()
            .zip(&gy.values)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .collect(),
    )
}

/// Centered-difference gradient along one axis (0 = x, 1 = y), one-sided at
/// Dirichlet boundaries, wrap-around for periodic fields.
pub(crate) fn axis_gradient(f: &GridField, axis: usize) -> GridField {
    let (nx, ny) = (f.nx, f.ny);
    let stride = if axis == 0 { 1 } else { nx };
    let extent = if axis == 0 { nx } else { ny };
    let mut values = vec![0.0; f.values.len()];
    for j in 0..ny {
        for i in 0..nx {
            let pos = if axis == 0 { i } else { j };
            let idx = j * nx + i;
            let g = match f.boundary {
                Boundary::Dirichlet => {
                    if extent == 1 {
                        0.0
                    } else if pos == 0 {
                        f.values[idx] / f.h
                    } else if pos == extent - 1 {
                        -f.values[idx] / f.h
                    } else {
                        (f.values[idx + stride] - f.values[idx - stride]) / (2.0 * f.h)
                    }
                }
                Boundary::Periodic => {
                    let up = if pos == extent - 1 {
                        idx + stride - extent * stride
                    } else {
                        idx + stride
                    };
                    let dn = if pos == 0 {
                        idx + (extent - 1) * stride
                    } else {
                        idx - stride
                    };
                    (f.values[up] - f.values[dn]) / (2.0 * f.h)
                }
            };
            values[idx] = g;
        }
    }
    f.with_values(values)
}

/// Dyadic-block norm of smoothness `s`:
/// `(Σ_j 2^{j s outer_p} ‖Δ_j f‖_q^{outer_p})^{1/outer_p}`, where `Δ_j f` is
/// the reconstruction of `f` from the modes in block `Λ_j`.
///
/// At `s = 0` and `outer_p = q` this is comparable to [`lq_norm`] within a
/// fixed constant; on a single mode of block `j` with unit Lebesgue norm it
/// returns `2^{j s}` exactly.
pub fn fractional_norm(f: &GridField, s: f64, triple: &SpaceTriple, outer_p: f64) -> Result<f64> {
    if !(-1.0..=2.0).contains(&s) {
        return Err(Error::Config(format!(
            "smoothness order must lie in [-1, 2], got {s}"
        )));
    }
    if triple.n_modes() == 0 {
        return Err(Error::Config("empty eigenbasis".into()));
    }
    let coeffs = triple.project_coeffs(f)?;
    let mut total = 0.0;
    let mut rec = vec![0.0; f.values.len()];
    for (j, idx) in triple.blocks() {
        rec.iter_mut().for_each(|v| *v = 0.0);
        for &k in idx {
            let c = coeffs[k];
            if c != 0.0 {
                for (r, m) in rec.iter_mut().zip(&triple.modes[k]) {
                    *r += c * m;
                }
            }
        }
        let block_field = f.with_values(rec.clone());
        let bn = lq_norm(&block_field, triple.q)?;
        if bn > 0.0 {
            total += (2.0f64).powf(*j as f64 * s * outer_p) * bn.powf(outer_p);
        }
    }
    Ok(total.powf(1.0 / outer_p))
}

/// Noise-coefficient norm `‖(Σ_k B_k²)^{1/2}‖` matching the half space:
/// the Lebesgue norm of the pointwise mode magnitude, plus the same for the
/// mode gradients when the half space is first-order.
pub fn gamma_noise_norm(mode_fields: &[GridField], triple: &SpaceTriple) -> Result<f64> {
    let first = match mode_fields.first() {
        Some(f) => f,
        None => return Ok(0.0),
    };
    let mut mag = first.zeros_like();
    for f in mode_fields {
        if !f.is_finite() {
            return Err(Error::NonFiniteField);
        }
        for (m, v) in mag.values.iter_mut().zip(&f.values) {
            *m += v * v;
        }
    }
    let mag = mag.map(f64::sqrt);
    let mut total = lq_norm(&mag, triple.q)?;
    if triple.s_ehalf() >= 1.0 {
        let mut gmag = first.zeros_like();
        for f in mode_fields {
            let g = gradient_magnitude(f);
            for (m, v) in gmag.values.iter_mut().zip(&g.values) {
                *m += v * v;
            }
        }
        total += lq_norm(&gmag.map(f64::sqrt), triple.q)?;
    }
    Ok(total)
}

/// Ramp cut-off: 1 on `[0, λ]`, affine down to 0 on `[λ, 2λ]`, 0 beyond.
/// Satisfies `|θ_λ(x) - θ_λ(y)| ≤ |x - y| / λ` and is nonincreasing.
pub fn theta_lambda(x: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!(
            "cut-off scale must be positive, got {lambda}"
        )));
    }
    if !(x >= 0.0) {
        return Err(Error::Config(format!(
            "cut-off argument must be nonnegative, got {x}"
        )));
    }
    Ok(if x <= lambda {
        1.0
    } else if x >= 2.0 * lambda {
        0.0
    } else {
        2.0 - x / lambda
    })
}

/// Running restart monitor: the sup distance to the segment anchor in the
/// trace norm plus the accumulated domain-norm time integral,
/// `sup_{s ≤ t} ‖u(s) - u_a‖_{E_p} + (Σ Δt ‖u‖_{E^1}^p)^{1/p}`.
///
/// Both component series are nondecreasing; times are relative to the
/// anchor. The time integral uses the left-endpoint rule so the monitor is
/// known without look-ahead.
#[derive(Clone, Debug, Default)]
pub struct MonitorSeries {
    pub times: Vec<f64>,
    pub sup_term: Vec<f64>,
    pub lp_term: Vec<f64>,
    lp_pow: Vec<f64>,
}

impl MonitorSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Current monitor value: last sup term plus last integral term
    /// (0 for a fresh series).
    pub fn value(&self) -> f64 {
        match self.times.len() {
            0 => 0.0,
            m => self.sup_term[m - 1] + self.lp_term[m - 1],
        }
    }

    /// Append one observation.
    pub fn push(
        &mut self,
        u_new: &GridField,
        u_anchor: &GridField,
        dt: f64,
        triple: &SpaceTriple,
    ) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!(
                "monitor step must be positive, got {dt}"
            )));
        }
        let m = self.times.len();
        let prev_sup = if m == 0 { 0.0 } else { self.sup_term[m - 1] };
        let prev_pow = if m == 0 { 0.0 } else { self.lp_pow[m - 1] };
        let prev_t = if m == 0 { 0.0 } else { self.times[m - 1] };
        let diff = u_new.sub(u_anchor);
        let sup = prev_sup.max(triple.norm_ep(&diff)?);
        let pow = prev_pow + dt * triple.norm_e1(u_new)?.powf(triple.p);
        self.times.push(prev_t + dt);
        self.sup_term.push(sup);
        self.lp_pow.push(pow);
        self.lp_term.push(pow.powf(1.0 / triple.p));
        Ok(())
    }
}

/// Pure-function form of [`MonitorSeries::push`]: returns the extended series.
pub fn monitor_update(
    series: &MonitorSeries,
    u_new: &GridField,
    u_anchor: &GridField,
    dt: f64,
    triple: &SpaceTriple,
) -> Result<MonitorSeries> {
    let mut next = series.clone();
    next.push(u_new, u_anchor, dt, triple)?;
    Ok(next)
}
