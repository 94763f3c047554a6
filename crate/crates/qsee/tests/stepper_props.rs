//! Oracle and property tests for operator assembly, the linear solvers,
//! the semi-implicit step, frozen segments, the fixed-point iteration, and
//! the regularity-constant machinery.

use std::sync::Arc;

use proptest::prelude::*;

use qsee::models::{
    linear_additive_model, make_gdiv_model, make_nondivergence_model, ModeWeights, ModelParams,
    ModelSpec, NoiseCoeffs,
};
use qsee::noise::{sample_path, NoiseSpec};
use qsee::spaces::{Boundary, GridField, Scale, SpaceTriple};
use qsee::stepper::{
    assemble_operator, choose_lambda, deterministic_convolution_ratio, estimate_mr_constants,
    mr_det_integrand, mr_stoch_integrand, picard_solve, semi_implicit_step, solve_frozen_segment,
    stochastic_convolution_ratio, truncated_quasilinearity, MRConstants, SmallnessBudget,
};
use qsee::Error;

fn triple_div(n: usize) -> SpaceTriple {
    SpaceTriple::new(8.0, 4.0, 1, n, Scale::DivergenceForm).unwrap()
}

fn heat_model() -> ModelSpec {
    make_gdiv_model(
        Arc::new(|_| 1.0),
        None,
        NoiseCoeffs::none(),
        ModelParams::default(),
    )
    .unwrap()
}

fn bounded_model() -> ModelSpec {
    make_gdiv_model(
        Arc::new(|u: f64| 1.0 + 0.5 * u * u / (1.0 + u * u)),
        None,
        NoiseCoeffs::none(),
        ModelParams::default(),
    )
    .unwrap()
}

fn wide_budget() -> SmallnessBudget {
    SmallnessBudget {
        c_q: 1.0,
        l_f1: 0.0,
        l_f2: 0.0,
        l_b1: 0.0,
        l_b2: 0.0,
        lambda: 1e9,
        c_mrd: 1.0,
        c_mrs: 1.0,
    }
}

/// Dense matrix of an operator obtained by applying it to unit vectors.
fn dense_of(op: &qsee::stepper::DiscreteOperator, layout: &GridField) -> Vec<Vec<f64>> {
    let n = layout.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut v = vec![0.0; n];
        v[j] = 1.0;
        cols.push(op.apply(&layout.with_values(v)).values);
    }
    // cols[j][i] = A[i][j]; transpose into rows.
    (0..n)
        .map(|i| (0..n).map(|j| cols[j][i]).collect())
        .collect()
}

/// Gaussian elimination with partial pivoting, for small oracle systems.
fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in (row + 1)..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    x
}

// ---------------------------------------------------------------- assembly --

#[test]
fn heat_stencil_has_the_reference_spectrum() {
    let n = 32;
    let tr = triple_div(n);
    let anchor = GridField::from_fn_1d(n, Boundary::Dirichlet, |_| 0.0);
    let op = assemble_operator(&heat_model(), &anchor).unwrap();
    let eig = op.eigen().unwrap();
    let h = tr.h();
    for (k, lam) in eig.lambdas.iter().enumerate() {
        let expect = 4.0 / (h * h)
            * ((k + 1) as f64 * std::f64::consts::PI * h / 2.0)
                .sin()
                .powi(2)
            + 1.0;
        assert!(
            (lam - expect).abs() <= 1e-9 * expect,
            "mode {k}: {lam} vs {expect}"
        );
        assert!((lam - tr.eigenvalue(k)).abs() <= 1e-9 * expect);
    }
}

#[test]
fn constant_coefficient_collapses_to_scaled_laplacian() {
    let n = 24;
    let c = 2.75;
    let model = make_gdiv_model(
        Arc::new(move |_| c),
        None,
        NoiseCoeffs::none(),
        ModelParams::default(),
    )
    .unwrap();
    let anchor = GridField::from_fn_1d(n, Boundary::Dirichlet, |x| (7.0 * x).sin());
    let op = assemble_operator(&model, &anchor).unwrap();
    let u = GridField::from_fn_1d(n, Boundary::Dirichlet, |x| x * x * (1.0 - x));
    let got = op.apply(&u);
    let h = u.h;
    let v = &u.values;
    for i in 0..v.len() {
        let left = if i > 0 { v[i - 1] } else { 0.0 };
        let right = if i + 1 < v.len() { v[i + 1] } else { 0.0 };
        let expect = c * (2.0 * v[i] - left - right) / (h * h) + v[i];
        assert!(
            (got.values[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()),
            "node {i}"
        );
    }
}

#[test]
fn divergence_stencil_is_symmetric_for_any_anchor() {
    let n = 16;
    let anchor = GridField::from_fn_1d(n, Boundary::Dirichlet, |x| (3.0 * x).cos() - 0.3);
    let op = assemble_operator(&bounded_model(), &anchor).unwrap();
    let a = dense_of(&op, &anchor.zeros_like());
    for i in 0..a.len() {
        for j in 0..a.len() {
            assert!(
                (a[i][j] - a[j][i]).abs() <= 1e-12 * (1.0 + a[i][j].abs()),
                "asymmetry at ({i},{j})"
            );
        }
    }
}

#[test]
fn assembly_rejects_degenerate_coefficients() {
    let mut m = heat_model();
    m.a = Some(Arc::new(|u: f64| u.abs()));
    let anchor = GridField::from_fn_1d(16, Boundary::Dirichlet, |_| 0.0);
    assert!(matches!(
        assemble_operator(&m, &anchor),
        Err(Error::EllipticityViolated)
    ));
}

#[test]
fn torus_operator_on_constant_field_is_shift_only() {
    let n = 16;
    let shift = 1.5;
    let model = make_nondivergence_model(
        Arc::new(|x: f64, u: f64, _du| 1.0 + 0.25 * (u + x).sin().powi(2)),
        NoiseCoeffs::none(),
        shift,
        ModelParams::default(),
    )
    .unwrap();
    let anchor = GridField::from_fn_1d(n, Boundary::Periodic, |x| {
        (2.0 * std::f64::consts::PI * x).sin()
    });
    let op = assemble_operator(&model, &anchor).unwrap();
    let c = GridField::from_fn_1d(n, Boundary::Periodic, |_| 3.0);
    let out = op.apply(&c);
    for v in &out.values {
        assert!((v - shift * 3.0).abs() <= 1e-11);
    }
    // Cyclic stencils have no symmetric eigen-factorization here.
    assert!(op.eigen().is_err());
}

#[test]
fn two_dimensional_flux_stencil_matches_hand_formula() {
    let n = 6;
    let model = bounded_model();
    let anchor = GridField::from_fn_2d(n, Boundary::Dirichlet, |x, y| x * y - 0.2);
    let op = assemble_operator(&model, &anchor).unwrap();
    let u = GridField::from_fn_2d(n, Boundary::Dirichlet, |x, y| (x + 0.5 * y) * (1.0 - x) * y);
    let got = op.apply(&u);
    let a = model.a.as_ref().unwrap();
    let h = u.h;
    let nx = u.nx;
    let av: Vec<f64> = anchor.values.iter().map(|v| a(*v)).collect();
    let a_at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= nx as isize || j >= nx as isize {
            a(0.0)
        } else {
            av[j as usize * nx + i as usize]
        }
    };
    let u_at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= nx as isize || j >= nx as isize {
            0.0
        } else {
            u.values[j as usize * nx + i as usize]
        }
    };
    for j in 0..nx as isize {
        for i in 0..nx as isize {
            let axl = 0.5 * (a_at(i - 1, j) + a_at(i, j));
            let axr = 0.5 * (a_at(i, j) + a_at(i + 1, j));
            let ayl = 0.5 * (a_at(i, j - 1) + a_at(i, j));
            let ayr = 0.5 * (a_at(i, j) + a_at(i, j + 1));
            let expect = (-axr * (u_at(i + 1, j) - u_at(i, j))
                + axl * (u_at(i, j) - u_at(i - 1, j))
                - ayr * (u_at(i, j + 1) - u_at(i, j))
                + ayl * (u_at(i, j) - u_at(i, j - 1)))
                / (h * h)
                + u_at(i, j);
            let idx = j as usize * nx + i as usize;
            assert!(
                (got.values[idx] - expect).abs() <= 1e-12 * (1.0 + expect.abs()),
                "cell ({i},{j})"
            );
        }
    }
}

// ----------------------------------------------------------------- solvers --

#[test]
fn tridiagonal_solver_inverts_the_operator() {
    let n = 32;
    let anchor = GridField::from_fn_1d(n, Boundary::Dirichlet, |x| 2.0 * x - 0.7);
    let op = assemble_operator(&bounded_model(), &anchor).unwrap();
    let dt = 0.05;
    let solver = op.solver(dt).unwrap();
    let x_true = GridField::from_fn_1d(n, Boundary::Dirichlet, |x| (9.0 * x).sin() + 0.2);
    let mut rhs = op.apply(&x_true).scale(dt);
    rhs.axpy(1.0, &x_true);
    let x = solver.solve(&rhs).unwrap();
    for (a, b) in x.values.iter().zip(&x_true.values) {
        assert!((a - b).abs() <= 1e-11 * (1.0 + b.abs()));
    }
}

#[test]
fn cyclic_solver_matches_dense_elimination() {
    let n = 12;
    let model = make_nondivergence_model(
        Arc::new(|x: f64, u: f64, du: f64| {
            1.0 + 0.2 * (x * 6.0 + u).sin().powi(2) + 0.1 * du.tanh().powi(2)
        }),
        NoiseCoeffs::none(),
        0.8,
        ModelParams::default(),
    )
    .unwrap();
    let anchor = GridField::from_fn_1d(n, Boundary::Periodic, |x| {
        (2.0 * std::f64::consts::PI * x).cos()
    });
    let op = assemble_operator(&model, &anchor).unwrap();
    let dt = 0.07;
    let solver = op.solver(dt).unwrap();
    let layout = anchor.zeros_like();
    // Dense (I + dt A) via operator application.
    let a_dense = dense_of(&op, &layout);
    let m_dense: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| dt * a_dense[i][j] + if i == j { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let rhs: Vec<f64> = (0..n).map(|i| ((i * i) % 7) as f64 - 2.0).collect();
    let expect = dense_solve(m_dense, rhs.clone());
    let got = solver.solve(&layout.with_values(rhs)).unwrap();
    for (a, b) in got.values.iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn conjugate_gradient_inverts_the_2d_operator() {
    let n = 8;
    let anchor = GridField::from_fn_2d(n, Boundary::Dirichlet, |x, y| (x - y) * 0.8);
    let op = assemble_operator(&bounded_model(), &anchor).unwrap();
    let dt = 0.03;
    let solver = op.solver(dt).unwrap();
    let x_true = GridField::from_fn_2d(n, Boundary::Dirichlet, |x, y| x * (1.0 - x) * (0.3 + y));
    let mut rhs = op.apply(&x_true).scale(dt);
    rhs.axpy(1.0, &x_true);
    let x = solver.solve(&rhs).unwrap();
    for (a, b) in x.values.iter().zip(&x_true.values) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    }
}

#[test]
fn eigen_factorization_reconstructs_the_operator() {
    let n = 20;
    let anchor = GridField::from_fn_1d(n, Boundary::Dirichlet, |x| 1.4 * (5.0 * x).sin());
    let op = assemble_operator(&bounded_model(), &anchor).unwrap();
    let eig = op.eigen().unwrap();
    let u = GridField::from_fn_1d(n, Boundary::Dirichlet, |x| {
        x * (1.0 - x) * (2.0 + (8.0 * x).cos())
    });
    // Modes are orthonormal in the grid inner product.
    let m = eig.n_modes();
    for i in 0..m {
        let ei = eig.from_coeffs(&unit(m, i));
        for j in i..m {
            let ej = eig.from_coeffs(&unit(m, j));
            let dot = qsee::spaces::l2h_inner(&ei, &ej);
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((dot - expect).abs() <= 1e-9, "modes ({i},{j}): {dot}");
        }
    }
    // Spectral application reproduces the stencil application.
    let coeffs = eig.to_coeffs(&u);
    let scaled: Vec<f64> = coeffs
        .iter()
        .zip(&eig.lambdas)
        .map(|(c, l)| c * l)
        .collect();
    let via_eigen = eig.from_coeffs(&scaled);
    let direct = op.apply(&u);
    for (a, b) in via_eigen.values.iter().zip(&direct.values) {
        assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()));
    }
    // Round trip.
    let back = eig.from_coeffs(&coeffs);
    for (a, b) in back.values.iter().zip(&u.values) {
        assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
    }
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

// ------------------------------------------------------------------- step --

#[test]
fn zero_data_steps_to_zero() {
    let n = 16;
    let tr = triple_div(n);
    let model = heat_model();
    let u = GridField::from_fn_1d(n, Boundary::Dirichlet, |_| 0.0);
    let op = assemble_operator(&model, &u).unwrap();
    let solver = op.solver(1e-3).unwrap();
    let next = semi_implicit_step(&u, &op, &solver, &model, &tr, 1.0, 0.0, &[0.0, 0.0]).unwrap();
    assert!(next.values.iter().all(|v| *v == 0.0));
}

#[test]
fn eigenmodes_decay_geometrically() {
    let n = 32;
    let tr = triple_div(n);
    let model = linear_additive_model(ModeWeights::zero());
    for k in [0usize, 3, 10] {
        let e = tr.mode_field(k);
        let op = assemble_operator(&model, &e).unwrap();
        let dt = 1e-2;
        let solver = op.solver(dt).unwrap();
        let next = semi_implicit_step(&e, &op, &solver, &model, &tr, 1.0, 0.0, &[]).unwrap();
        let factor = 1.0 / (1.0 + dt * tr.eigenvalue(k));
        for (a, b) in next.values.iter().zip(&e.values) {
            assert!(
                (a - factor * b).abs() <= 1e-11 * (1.0 + b.abs()),
                "mode {k}"
            );
        }
    }
}

#[test]
fn cutoff_value_is_irrelevant_for_state_independent_coefficients() {
    let n = 24;
    let tr = triple_div(n);
    let model = heat_model();
    let u = GridField::from_fn_1d(n, Boundary::Dirichlet, |x| (4.0 * x).sin() - 0.5 * x);
    let op = assemble_operator(&model, &u).unwrap();
    let solver = op.solver(2e-3).unwrap();
    let dw = [0.01, -0.02, 0.005];
    let with0 = semi_implicit_step(&u, &op, &solver, &model, &tr, 0.0, 0.0, &dw).unwrap();
    let with1 = semi_implicit_step(&u, &op, &solver, &model, &tr, 1.0, 0.0, &dw).unwrap();
    assert_eq!(with0.values, with1.values);
}

#[test]
fn quasilinearity_correction_vanishes_at_anchor_and_zero_cutoff() {
    let n = 16;
    let model = bounded_model();
    let u = GridField::from_fn_1d(n, Boundary::Dirichlet, |x| (2.0 * x).sin());
    let other = GridField::from_fn_1d(n, Boundary::Dirichlet, |x| 0.7 * (5.0 * x).cos());

    let at_anchor = truncated_quasilinearity(&u, &u, 1.0, &model).unwrap();
    assert!(at_anchor.values.iter().all(|v| *v == 0.0));

    let no_cutoff = truncated_quasilinearity(&u, &other, 0.0, &model).unwrap();
    assert!(no_cutoff.values.iter().all(|v| *v == 0.0));

    let active = truncated_quasilinearity(&u, &other, 1.0, &model).unwrap();
    assert!(active.values.iter().any(|v| v.abs() > 1e-12));

    assert!(truncated_quasilinearity(&u, &other, 1.5, &model).is_err());
}

// ---------------------------------------------------------------- segments --

#[test]
fn wide_cutoff_runs_to_the_horizon() {
    let n = 32;
    let tr = triple_div(n);
    let model = heat_model();
    let anchor = tr.mode_field(0);
    let spec = NoiseSpec {
        master_seed: 7,
        n_modes: 4,
        n_steps: 100,
        dt: 1e-3,
    };
    let path = sample_path(&spec, 0).unwrap();
    let seg =
        solve_frozen_segment(&anchor, &model, &wide_budget(), &path, 0, 0.0, 0.1, &tr).unwrap();
    assert_eq!(seg.states.len(), 101);
    assert_eq!(seg.stop_index, None);
    assert!(!seg.blown_up);
    assert!(seg.theta_history.iter().all(|t| *t == 1.0));
    assert_eq!(seg.steps_taken(), 100);
}

#[test]
fn one_step_monitor_excess_stops_immediately() {
    let n = 32;
    let tr = triple_div(n);
    let model = heat_model();
    let anchor = tr.mode_field(0).scale(3.0);
    let spec = NoiseSpec {
        master_seed: 9,
        n_modes: 2,
        n_steps: 50,
        dt: 1e-3,
    };
    let path = sample_path(&spec, 0).unwrap();
    let lambda = 0.5 * spec.dt.powf(1.0 / tr.p) * tr.norm_e1(&anchor).unwrap();
    let mut budget = wide_budget();
    budget.lambda = lambda;
    let seg = solve_frozen_segment(&anchor, &model, &budget, &path, 0, 0.0, 0.05, &tr).unwrap();
    assert_eq!(seg.stop_index, Some(1));
    assert_eq!(seg.states.len(), 2);
    assert_eq!(seg.theta_history, vec![1.0]);
}

#[test]
fn deterministic_heat_monitor_matches_closed_form() {
    let n = 64;
    let tr = triple_div(n);
    let model = linear_additive_model(ModeWeights::zero());
    let anchor = tr.mode_field(0);
    let steps = 1000;
    let dt = 1e-4;
    let spec = NoiseSpec {
        master_seed: 4,
        n_modes: 1,
        n_steps: steps,
        dt,
    };
    let path = sample_path(&spec, 0).unwrap();
    let seg = solve_frozen_segment(
        &anchor,
        &model,
        &wide_budget(),
        &path,
        0,
        0.0,
        steps as f64 * dt,
        &tr,
    )
    .unwrap();
    assert_eq!(seg.stop_index, None);
    let lam = tr.eigenvalue(0);
    let r = 1.0 / (1.0 + dt * lam);
    let ep = tr.norm_ep(&anchor).unwrap();
    let e1 = tr.norm_e1(&anchor).unwrap();
    let sup_expect = (1.0 - r.powi(steps as i32)) * ep;
    let mut pow = 0.0;
    for m in 1..=steps {
        pow += dt * (e1 * r.powi(m as i32)).powf(tr.p);
    }
    let lp_expect = pow.powf(1.0 / tr.p);
    let got_sup = *seg.monitor.sup_term.last().unwrap();
    let got_lp = *seg.monitor.lp_term.last().unwrap();
    assert!(
        (got_sup - sup_expect).abs() <= 0.02 * sup_expect,
        "sup {got_sup} vs {sup_expect}"
    );
    assert!(
        (got_lp - lp_expect).abs() <= 0.02 * lp_expect,
        "lp {got_lp} vs {lp_expect}"
    );
}

#[test]
fn non_finite_drift_flags_blow_up() {
    let n = 16;
    let tr = triple_div(n);
    let mut model = heat_model();
    model.forcing = Some(Arc::new(|_, _| f64::NAN));
    let anchor = tr.mode_field(0);
    let spec = NoiseSpec {
        master_seed: 3,
        n_modes: 1,
        n_steps: 10,
        dt: 1e-3,
    };
    let path = sample_path(&spec, 0).unwrap();
    let seg =
        solve_frozen_segment(&anchor, &model, &wide_budget(), &path, 0, 0.0, 0.01, &tr).unwrap();
    assert!(seg.blown_up);
    assert_eq!(seg.states.len(), 1);
    assert_eq!(seg.stop_index, None);
}

#[test]
fn segment_rejects_noise_table_overrun() {
    let n = 16;
    let tr = triple_div(n);
    let model = heat_model();
    let anchor = tr.mode_field(0);
    let spec = NoiseSpec {
        master_seed: 3,
        n_modes: 1,
        n_steps: 10,
        dt: 1e-3,
    };
    let path = sample_path(&spec, 0).unwrap();
    assert!(matches!(
        solve_frozen_segment(&anchor, &model, &wide_budget(), &path, 5, 0.0, 0.01, &tr),
        Err(Error::Config(_))
    ));
}

// ------------------------------------------------------------- fixed point --

#[test]
fn semigroup_case_converges_in_one_iteration() {
    let n = 24;
    let tr = triple_div(n);
    let model = linear_additive_model(ModeWeights::zero());
    let anchor = GridField::from_fn_1d(n, Boundary::Dirichlet, |_| 0.0);
    let op = assemble_operator(&model, &anchor).unwrap();
    let eig = op.eigen().unwrap();
    let u0 = tr.mode_field(0).add(&tr.mode_field(2).scale(0.5));
    let spec = NoiseSpec {
        master_seed: 21,
        n_modes: 4,
        n_steps: 64,
        dt: 1e-3,
    };
    let path = sample_path(&spec, 0).unwrap();
    let (fixed, ratios) = picard_solve(&eig, &model, &u0, &path, 0.064, 1e-12, 20, &tr).unwrap();
    assert!(ratios.is_empty());
    assert_eq!(fixed.len(), 65);
    // The fixed point is the exact semigroup path.
    let c0 = eig.to_coeffs(&u0);
    for (m, state) in fixed.iter().enumerate() {
        let mut c = c0.clone();
        eig.semigroup_coeffs(m as f64 * spec.dt, &mut c);
        let expect = eig.from_coeffs(&c);
        for (a, b) in state.values.iter().zip(&expect.values) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "step {m}");
        }
    }
}

#[test]
fn linear_drift_gives_stable_geometric_ratios() {
    let n = 24;
    let tr = triple_div(n);
    let mut model = linear_additive_model(ModeWeights::zero());
    model.lower_order = Some(Arc::new(|u: f64| 0.3 * u));
    let anchor = GridField::from_fn_1d(n, Boundary::Dirichlet, |_| 0.0);
    let op = assemble_operator(&model, &anchor).unwrap();
    let eig = op.eigen().unwrap();
    let u0 = tr.mode_field(0);
    let spec = NoiseSpec {
        master_seed: 22,
        n_modes: 2,
        n_steps: 128,
        dt: 1e-3,
    };
    let path = sample_path(&spec, 0).unwrap();
    let (_, ratios) = picard_solve(&eig, &model, &u0, &path, 0.128, 1e-13, 60, &tr).unwrap();
    assert!(ratios.len() >= 3, "ratios: {ratios:?}");
    for r in &ratios {
        assert!(*r < 1.0, "ratio {r} not contracting");
    }
    for w in ratios.windows(2).skip(1) {
        assert!(
            (w[1] - w[0]).abs() <= 0.25 * w[0].max(1e-6),
            "ratios not stable: {ratios:?}"
        );
    }
}

#[test]
fn picard_rejects_divergent_drift() {
    let n = 16;
    let tr = triple_div(n);
    let mut model = linear_additive_model(ModeWeights::zero());
    // Drive the drift well beyond the semigroup's damping.
    model.lower_order = Some(Arc::new(|u: f64| 500.0 * u));
    model.forcing = Some(Arc::new(|_, x| x));
    let anchor = GridField::from_fn_1d(n, Boundary::Dirichlet, |_| 0.0);
    let op = assemble_operator(&model, &anchor).unwrap();
    let eig = op.eigen().unwrap();
    let u0 = tr.mode_field(0);
    let spec = NoiseSpec {
        master_seed: 5,
        n_modes: 1,
        n_steps: 64,
        dt: 1e-2,
    };
    let path = sample_path(&spec, 0).unwrap();
    let err = picard_solve(&eig, &model, &u0, &path, 0.64, 1e-12, 8, &tr).unwrap_err();
    assert!(matches!(err, Error::NoContraction(8)));
}

#[test]
fn fixed_point_and_stepper_agree_under_refinement() {
    let n = 16;
    let tr = triple_div(n);
    let mut model = linear_additive_model(ModeWeights::zero());
    model.lower_order = Some(Arc::new(|u: f64| 0.2 * u));
    model.noise_g = Some(Arc::new(|u: f64| 0.1 + 0.05 * u.tanh()));
    model.beta = ModeWeights::power_law(0.5, 1.5);
    let anchor = GridField::from_fn_1d(n, Boundary::Dirichlet, |_| 0.0);
    let op = assemble_operator(&model, &anchor).unwrap();
    let eig = op.eigen().unwrap();
    let u0 = tr.mode_field(0);
    let t_end = 0.16;
    let fine = NoiseSpec {
        master_seed: 77,
        n_modes: 4,
        n_steps: 64,
        dt: t_end / 64.0,
    };
    let fine_path = sample_path(&fine, 0).unwrap();
    let mut dts = Vec::new();
    let mut sups = Vec::new();
    for factor in [4usize, 2, 1] {
        let path = if factor == 1 {
            fine_path.clone()
        } else {
            qsee::noise::coarsen(&fine_path, factor).unwrap()
        };
        let dt = path.dt;
        let steps = path.n_steps;
        let (fixed, _) = picard_solve(&eig, &model, &u0, &path, t_end, 1e-12, 80, &tr).unwrap();
        let solver = op.solver(dt).unwrap();
        let mut u = u0.clone();
        let mut sup = 0.0f64;
        for m in 0..steps {
            u = semi_implicit_step(
                &u,
                &op,
                &solver,
                &model,
                &tr,
                1.0,
                m as f64 * dt,
                path.row(m),
            )
            .unwrap();
            let diff = u.sub(&fixed[m + 1]);
            sup = sup.max(tr.norm_ep(&diff).unwrap());
        }
        dts.push(dt.ln());
        sups.push(sup.max(1e-300).ln());
    }
    let slope = least_squares_slope(&dts, &sups);
    assert!(slope >= 0.4, "refinement slope {slope}: sups {sups:?}");
}

fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

// ---------------------------------------------------- regularity constants --

#[test]
fn scalar_convolution_ratio_matches_quadrature_limit() {
    let n = 8;
    let tr = triple_div(n);
    let model = linear_additive_model(ModeWeights::zero());
    let anchor = GridField::from_fn_1d(n, Boundary::Dirichlet, |_| 0.0);
    let eig = assemble_operator(&model, &anchor).unwrap().eigen().unwrap();
    let m_steps = 1 << 12;
    let t_end = 1.0;
    let dt = t_end / m_steps as f64;
    // Source concentrated on the lowest mode, constant in time.
    let g: Vec<Vec<f64>> = (0..m_steps).map(|_| unit(eig.n_modes(), 0)).collect();
    let got = deterministic_convolution_ratio(&eig, &tr, dt, &g)
        .unwrap()
        .unwrap();

    let lam = eig.lambdas[0];
    let mode = eig.from_coeffs(&unit(eig.n_modes(), 0));
    let w_e = tr.norm_e(&mode).unwrap();
    let w_e1 = tr.norm_e1(&mode).unwrap();
    let w_ep = tr.norm_ep(&mode).unwrap();
    let p = tr.p;
    // Continuum limit via fine quadrature of z(t) = (1 - e^{-λt})/λ.
    let quad_n = 200_000;
    let qdt = t_end / quad_n as f64;
    let mut int_p = 0.0;
    for i in 1..=quad_n {
        let t = i as f64 * qdt;
        int_p += qdt * ((1.0 - (-lam * t).exp()) / lam).powf(p);
    }
    let z_sup = (1.0 - (-lam * t_end).exp()) / lam;
    let expect = (w_e1 * int_p.powf(1.0 / p) + w_ep * z_sup) / (w_e * t_end.powf(1.0 / p));
    assert!(
        (got - expect).abs() <= 0.05 * expect,
        "ratio {got} vs continuum {expect}"
    );
}

#[test]
fn singleton_estimate_equals_that_samples_ratio() {
    let n = 8;
    let tr = triple_div(n);
    let model = linear_additive_model(ModeWeights::zero());
    let anchor = GridField::from_fn_1d(n, Boundary::Dirichlet, |_| 0.0);
    let eig = assemble_operator(&model, &anchor).unwrap().eigen().unwrap();
    let spec = NoiseSpec {
        master_seed: 500,
        n_modes: 3,
        n_steps: 32,
        dt: 1e-2,
    };
    let est = estimate_mr_constants(&eig, &tr, &spec, 1).unwrap();
    assert_eq!(est.n_samples, 1);
    let g = mr_det_integrand(&eig, &spec, 0, 0.0);
    let expect = deterministic_convolution_ratio(&eig, &tr, spec.dt, &g)
        .unwrap()
        .unwrap();
    assert!((est.c_mrd_hat - expect).abs() <= 1e-12 * (1.0 + expect));
    assert!(est.c_mrs_hat > 0.0);
}

#[test]
fn estimates_grow_with_more_samples() {
    let n = 8;
    let tr = triple_div(n);
    let model = linear_additive_model(ModeWeights::zero());
    let anchor = GridField::from_fn_1d(n, Boundary::Dirichlet, |_| 0.0);
    let eig = assemble_operator(&model, &anchor).unwrap().eigen().unwrap();
    let spec = NoiseSpec {
        master_seed: 501,
        n_modes: 2,
        n_steps: 24,
        dt: 1e-2,
    };
    let a = estimate_mr_constants(&eig, &tr, &spec, 3).unwrap();
    let b = estimate_mr_constants(&eig, &tr, &spec, 9).unwrap();
    assert!(b.c_mrd_hat >= a.c_mrd_hat);
    assert!(b.c_mrs_hat >= a.c_mrs_hat);
}

#[test]
fn stochastic_ratio_is_invariant_under_mode_relabeling() {
    let n = 8;
    let tr = triple_div(n);
    let model = linear_additive_model(ModeWeights::zero());
    let anchor = GridField::from_fn_1d(n, Boundary::Dirichlet, |_| 0.0);
    let eig = assemble_operator(&model, &anchor).unwrap().eigen().unwrap();
    let spec = NoiseSpec {
        master_seed: 502,
        n_modes: 4,
        n_steps: 16,
        dt: 1e-2,
    };
    let g = mr_stoch_integrand(&eig, &spec, 0, 0.5);
    let xi: Vec<Vec<Vec<f64>>> = (0..4)
        .map(|path| {
            (0..spec.n_steps)
                .map(|j| {
                    (0..spec.n_modes)
                        .map(|k| {
                            qsee::noise::standard_normal(900, path, j as u64, k as u64)
                                * spec.dt.sqrt()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let base = stochastic_convolution_ratio(&eig, &tr, spec.dt, &g, &xi)
        .unwrap()
        .unwrap();
    // Relabel noise modes by reversal, applied to integrand and increments.
    let perm = |rows: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f64>>> {
        rows.iter()
            .map(|steps_or_paths| {
                steps_or_paths
                    .iter()
                    .map(|modes: &Vec<f64>| modes.iter().rev().cloned().collect())
                    .collect()
            })
            .collect()
    };
    let g_perm: Vec<Vec<Vec<f64>>> = g
        .iter()
        .map(|row| row.iter().rev().cloned().collect())
        .collect();
    let xi_perm = perm(&xi);
    let relabeled = stochastic_convolution_ratio(&eig, &tr, spec.dt, &g_perm, &xi_perm)
        .unwrap()
        .unwrap();
    assert!(
        (base - relabeled).abs() <= 1e-11 * (1.0 + base),
        "{base} vs {relabeled}"
    );
}

// ----------------------------------------------------------- cut-off budget --

#[test]
fn lambda_choice_matches_plugin_arithmetic() {
    let mr = MRConstants {
        c_mrd_hat: 1.0,
        c_mrs_hat: 1.0,
        n_samples: 1,
    };
    let budget = choose_lambda(1.0, 0.0, 0.0, 0.0, 0.0, &mr, 0.6, 1.0).unwrap();
    assert!((budget.lambda - 0.1).abs() <= 1e-15);
    budget.validate().unwrap();
    assert!((budget.contraction_bound() - 0.6).abs() <= 1e-12);
}

#[test]
fn lambda_shrinks_with_growing_coefficient_sensitivity() {
    let mr = MRConstants {
        c_mrd_hat: 1.0,
        c_mrs_hat: 1.0,
        n_samples: 1,
    };
    let mut prev = f64::INFINITY;
    for c_q in [0.5, 1.0, 4.0, 32.0, 1e6] {
        let b = choose_lambda(c_q, 0.1, 0.0, 0.05, 0.0, &mr, 0.6, 10.0).unwrap();
        assert!(b.lambda <= prev);
        prev = b.lambda;
    }
    // Vanishing sensitivity: the cap binds.
    let capped = choose_lambda(0.0, 0.0, 0.0, 0.0, 0.0, &mr, 0.5, 2.5).unwrap();
    assert_eq!(capped.lambda, 2.5);
}

#[test]
fn lambda_choice_rejects_oversized_lipschitz_data() {
    let mr = MRConstants {
        c_mrd_hat: 1.0,
        c_mrs_hat: 1.0,
        n_samples: 1,
    };
    assert!(matches!(
        choose_lambda(1.0, 0.7, 0.0, 0.0, 0.0, &mr, 0.6, 1.0),
        Err(Error::SmallnessUnsatisfiable)
    ));
    assert!(matches!(
        choose_lambda(1.0, 0.0, 0.0, 0.0, 0.0, &mr, 1.2, 1.0),
        Err(Error::Config(_))
    ));
    let bad = SmallnessBudget {
        c_q: 1.0,
        l_f1: 0.0,
        l_f2: 0.0,
        l_b1: 0.0,
        l_b2: 0.0,
        lambda: 1.0,
        c_mrd: 1.0,
        c_mrs: 0.0,
    };
    assert!(matches!(bad.validate(), Err(Error::SmallnessUnsatisfiable)));
}

// -------------------------------------------------------------- properties --

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn tridiagonal_solver_agrees_with_dense_oracle(seed in 0u64..1000) {
        let n = 10;
        let anchor = GridField::from_fn_1d(n, Boundary::Dirichlet, |x| {
            ((seed % 11) as f64 - 5.0) * 0.2 * (x * (seed % 7 + 1) as f64).sin()
        });
        let op = assemble_operator(&bounded_model(), &anchor).unwrap();
        let dt = 0.01 + (seed % 13) as f64 * 0.01;
        let solver = op.solver(dt).unwrap();
        let layout = anchor.zeros_like();
        let a_dense = dense_of(&op, &layout);
        let m: Vec<Vec<f64>> = (0..layout.len())
            .map(|i| {
                (0..layout.len())
                    .map(|j| dt * a_dense[i][j] + if i == j { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let rhs: Vec<f64> = (0..layout.len())
            .map(|i| qsee::noise::standard_normal(seed, 1, 0, i as u64))
            .collect();
        let expect = dense_solve(m, rhs.clone());
        let got = solver.solve(&layout.with_values(rhs)).unwrap();
        for (a, b) in got.values.iter().zip(&expect) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn step_is_deterministic(seed in 0u64..500) {
        let n = 16;
        let tr = triple_div(n);
        let model = bounded_model();
        let u = GridField::from_fn_1d(n, Boundary::Dirichlet, |x| {
            (x * (seed % 5 + 1) as f64 * 3.0).sin() * 0.8
        });
        let op = assemble_operator(&model, &u).unwrap();
        let solver = op.solver(1e-3).unwrap();
        let dw = [0.02, -0.01];
        let a = semi_implicit_step(&u, &op, &solver, &model, &tr, 0.5, 0.0, &dw).unwrap();
        let b = semi_implicit_step(&u, &op, &solver, &model, &tr, 0.5, 0.0, &dw).unwrap();
        prop_assert_eq!(a.values, b.values);
    }
}
