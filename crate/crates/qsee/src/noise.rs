//! Reproducible truncated cylindrical Brownian increments.
//!
//! Every increment is a pure function of the key tuple
//! `(master_seed, path_index, step, mode)`: the tuple is avalanched through
//! a splitmix64-style mixer into one uniform 64-bit word, which is mapped to
//! a standard normal through the inverse distribution function. Generation
//! is therefore stateless, random-access, and bit-identical across platforms
//! and across concurrent path simulations.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Parameters of one driving-noise family.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub master_seed: u64,
    /// Number of retained noise modes `K`.
    pub n_modes: usize,
    /// Number of time steps `M` per path.
    pub n_steps: usize,
    /// Step width; each increment has variance `dt`.
    pub dt: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_modes == 0 || self.n_steps == 0 {
            return Err(Error::Config(
                "noise table needs at least one mode and one step".into(),
            ));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!(
                "step width must be positive, got {}",
                self.dt
            )));
        }
        Ok(())
    }
}

/// Materialized increment table of one path, row-major `[M × K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath {
    increments: Vec<f64>,
    pub n_steps: usize,
    pub n_modes: usize,
    pub dt: f64,
}

impl NoisePath {
    /// Increment of mode `k` over step `m`.
    pub fn inc(&self, m: usize, k: usize) -> f64 {
        debug_assert!(m < self.n_steps && k < self.n_modes);
        self.increments[m * self.n_modes + k]
    }

    /// All mode increments of step `m`.
    pub fn row(&self, m: usize) -> &[f64] {
        &self.increments[m * self.n_modes..(m + 1) * self.n_modes]
    }

    /// Total displacement `Σ_m ΔW_{m,k}` of mode `k`.
    pub fn displacement(&self, k: usize) -> f64 {
        (0..self.n_steps).map(|m| self.inc(m, k)).sum()
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Avalanche the key tuple into one uniform 64-bit word.
fn key_word(master_seed: u64, path_index: u64, step: u64, mode: u64) -> u64 {
    let mut h = mix64(master_seed ^ 0x9e37_79b9_7f4a_7c15);
    h = mix64(h ^ path_index);
    h = mix64(h ^ step);
    h = mix64(h ^ mode);
    h
}

/// Uniform variate in the open interval (0, 1), symmetric under `u ↦ 1 - u`.
fn uniform_open(word: u64) -> f64 {
    ((word >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
}

/// Inverse standard-normal distribution function.
///
/// Solves `Φ(x) = u` by safeguarded Halley iteration on the complementary
/// error function, with a central linear / tail asymptotic initial guess.
/// Accurate to full double precision over the representable input range.
pub fn standard_normal_quantile(u: f64) -> f64 {
    assert!(u > 0.0 && u < 1.0, "quantile argument must lie in (0, 1)");
    if u == 0.5 {
        return 0.0;
    }
    if u > 0.5 {
        return -standard_normal_quantile(1.0 - u);
    }
    // Solve Φ(-z) = u for z ≥ 0, i.e. erfc(z/√2) = 2u.
    let sqrt_2 = std::f64::consts::SQRT_2;
    let sqrt_2pi = (2.0 * std::f64::consts::PI).sqrt();
    let mut z = if u >= 0.08 {
        sqrt_2pi * (0.5 - u)
    } else {
        // erfc(w) ≈ exp(-w²)/(w √π) for large w: iterate w² = -ln(2u √π w).
        let mut w2 = -(2.0 * u).ln();
        for _ in 0..3 {
            let w = w2.max(1e-12).sqrt();
            w2 = -(2.0 * u * std::f64::consts::PI.sqrt() * w).ln();
        }
        sqrt_2 * w2.max(0.0).sqrt()
    };
    let (mut lo, mut hi) = (0.0f64, 45.0f64);
    for _ in 0..80 {
        let f = 0.5 * libm::erfc(z / sqrt_2) - u;
        if f > 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        let pdf = (-0.5 * z * z).exp() / sqrt_2pi;
        // Halley update for f(z) = Φ(-z) - u, f' = -pdf, f'' = z·pdf.
        let mut step = 2.0 * f / (2.0 * pdf + f * z);
        if !step.is_finite() {
            step = 0.0;
        }
        let mut next = z + step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - z).abs() <= 1e-16 * (1.0 + z.abs()) {
            z = next;
            break;
        }
        z = next;
    }
    -z
}

/// Standard normal variate for one key tuple.
pub fn standard_normal(master_seed: u64, path_index: u64, step: u64, mode: u64) -> f64 {
    standard_normal_quantile(uniform_open(key_word(master_seed, path_index, step, mode)))
}

/// Materialize the increment table of one path: entry `(m, k)` is
/// `N(0, dt)`-distributed and a pure function of
/// `(master_seed, path_index, m, k)`.
pub fn sample_path(spec: &NoiseSpec, path_index: u64) -> Result<NoisePath> {
    spec.validate()?;
    let scale = spec.dt.sqrt();
    let mut increments = Vec::with_capacity(spec.n_steps * spec.n_modes);
    for m in 0..spec.n_steps {
        for k in 0..spec.n_modes {
            increments
                .push(scale * standard_normal(spec.master_seed, path_index, m as u64, k as u64));
        }
    }
    Ok(NoisePath {
        increments,
        n_steps: spec.n_steps,
        n_modes: spec.n_modes,
        dt: spec.dt,
    })
}

/// Aggregate consecutive increments: coarse step `m` sums the `factor` fine
/// steps it spans, per mode, and the step width multiplies by `factor`.
/// Mode-wise total displacement is invariant.
pub fn coarsen(path: &NoisePath, factor: usize) -> Result<NoisePath> {
    if factor == 0 || path.n_steps % factor != 0 {
        return Err(Error::Config(format!(
            "coarsening factor {factor} does not divide {} steps",
            path.n_steps
        )));
    }
    let n_steps = path.n_steps / factor;
    let mut increments = vec![0.0; n_steps * path.n_modes];
    for m in 0..n_steps {
        for f in 0..factor {
            let fine = path.row(m * factor + f);
            for k in 0..path.n_modes {
                increments[m * path.n_modes + k] += fine[k];
            }
        }
    }
    Ok(NoisePath {
        increments,
        n_steps,
        n_modes: path.n_modes,
        dt: path.dt * factor as f64,
    })
}
