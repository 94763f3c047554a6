//! Restarted segment solves, radial state truncation, and the truncation
//! hierarchy.
//!
//! [`run_localized`] glues frozen-coefficient segments at stopping times
//! into one path and classifies how the run ended. [`truncate_rn`] retracts
//! states onto trace-norm balls; [`run_truncated_hierarchy`] runs a ladder
//! of truncation levels on one shared noise path and stitches the levels
//! into a single trajectory.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::models::ModelSpec;
use crate::noise::{sample_path, NoisePath, NoiseSpec};
use crate::spaces::{GridField, SpaceTriple};
use crate::stepper::{solve_frozen_segment, SmallnessBudget};
use crate::{Error, Result};

/// How a localized run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The path reached the requested horizon.
    ReachedT,
    /// A field exceeded the norm cap or became non-finite.
    BlowUpFlag,
    /// Restart intervals collapsed: two consecutive segments stopped in
    /// fewer than the configured minimum number of steps.
    StepFloor,
}

/// Restart bookkeeping of one localized run.
#[derive(Clone, Debug)]
pub struct StoppingRecord {
    /// Segment anchors `(time, state)`, the initial state first; times are
    /// strictly increasing.
    pub anchors: Vec<(f64, GridField)>,
    pub termination: Termination,
    /// Accumulated smooth-norm activity `(Σ ∫ ‖u‖^p dt)^{1/p}` over all
    /// segments.
    pub total_monitor_lp: f64,
    /// Final time the path is defined up to.
    pub final_time: f64,
}

/// One rung of the truncation ladder.
#[derive(Clone, Debug, Serialize)]
pub struct TruncationLevel {
    pub n: f64,
    /// Whether the initial state lies in the admissible half-ball
    /// `‖u0‖ ≤ n/2`.
    pub gamma_set_member: bool,
    /// Exit time of the `n`-ball, or the end of the run if never exited.
    pub sigma_n: f64,
}

/// Plain-language report of one run's termination.
#[derive(Clone, Debug, Serialize)]
pub struct TerminationReport {
    pub termination: Termination,
    pub final_time: f64,
    pub anchor_count: usize,
    pub total_monitor_lp: f64,
    /// Human-readable classification.
    pub label: String,
}

/// Radial retraction onto the trace-norm ball of radius `n`: the identity
/// inside the ball, `n · y / ‖y‖` outside. 2-Lipschitz in the trace norm.
pub fn truncate_rn(
    y: &GridField,
    n: f64,
    triple: &crate::spaces::SpaceTriple,
) -> Result<GridField> {
    if !(n > 0.0) {
        return Err(Error::Config(format!(
            "truncation radius must be positive, got {n}"
        )));
    }
    let norm = triple.norm_ep(y)?;
    if norm <= n {
        Ok(y.clone())
    } else {
        Ok(y.scale(n / norm))
    }
}

/// Abnormal-run thresholds for [`run_localized`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunCaps {
    /// Trace-norm ceiling; crossing it flags blow-up.
    pub field_cap: f64,
    /// Two consecutive segments shorter than this many steps flag a
    /// collapsing restart cascade.
    pub min_segment_steps: usize,
}

impl Default for RunCaps {
    fn default() -> Self {
        RunCaps {
            field_cap: 1e6,
            min_segment_steps: 2,
        }
    }
}

/// A localized run: the glued path with per-step diagnostics and the
/// restart record.
#[derive(Clone, Debug)]
pub struct LocalizedRun {
    /// State at every executed grid time, the initial state first.
    pub path: Vec<GridField>,
    /// Times matching `path`.
    pub times: Vec<f64>,
    pub record: StoppingRecord,
    /// θ used at each executed step.
    pub theta_history: Vec<f64>,
    /// Segment monitor value after each executed step (resets at anchors).
    pub monitor_history: Vec<f64>,
}

/// Glue frozen-coefficient segments into one path on `[0, T]`: solve from
/// the current anchor until the segment monitor exceeds the budget's λ,
/// restart from the stopped state, and repeat. Abnormal ends are encoded in
/// the record rather than reported as errors: crossing `caps.field_cap` in
/// the trace norm (or producing a non-finite field) flags blow-up, and two
/// consecutive restarts after fewer than `caps.min_segment_steps` steps end
/// the run as a step floor.
///
/// The run is a pure function of `(model, u0, budget, spec, path_index, T,
/// caps)`.
#[allow(clippy::too_many_arguments)]
pub fn run_localized(
    model: &ModelSpec,
    u0: &GridField,
    budget: &SmallnessBudget,
    spec: &NoiseSpec,
    path_index: u64,
    t_horizon: f64,
    caps: &RunCaps,
    triple: &SpaceTriple,
) -> Result<LocalizedRun> {
    let noise = sample_path(spec, path_index)?;
    run_localized_on_path(model, u0, budget, &noise, t_horizon, caps, triple)
}

/// [`run_localized`] on an explicit increment table, for couplings that
/// share or coarsen one noise realization across several runs.
pub fn run_localized_on_path(
    model: &ModelSpec,
    u0: &GridField,
    budget: &SmallnessBudget,
    noise: &NoisePath,
    t_horizon: f64,
    caps: &RunCaps,
    triple: &SpaceTriple,
) -> Result<LocalizedRun> {
    budget.validate()?;
    if !u0.is_finite() {
        return Err(Error::NonFiniteField);
    }
    if !(t_horizon > 0.0) {
        return Err(Error::Config(format!(
            "horizon must be positive, got {t_horizon}"
        )));
    }
    if !(caps.field_cap > 0.0) || caps.min_segment_steps == 0 {
        return Err(Error::Config(
            "caps need field_cap > 0 and min_segment_steps ≥ 1".into(),
        ));
    }
    let dt = noise.dt;
    let total_steps = (t_horizon / dt).round().max(1.0) as usize;
    if total_steps > noise.n_steps {
        return Err(Error::Config(format!(
            "horizon needs {} steps but the noise table has {}",
            total_steps, noise.n_steps
        )));
    }

    let mut path = vec![u0.clone()];
    let mut times = vec![0.0];
    let mut theta_history = Vec::new();
    let mut monitor_history = Vec::new();
    let mut anchors = vec![(0.0, u0.clone())];
    let mut lp_pow = 0.0;
    let mut short_stops = 0usize;
    let mut offset = 0usize;
    let mut termination = None;

    while termination.is_none() {
        let t0 = offset as f64 * dt;
        let anchor = path
            .last()
            .expect("path holds at least the initial state")
            .clone();
        let seg =
            solve_frozen_segment(&anchor, model, budget, noise, offset, t0, t_horizon, triple)?;

        let mut capped_at = None;
        for (i, state) in seg.states.iter().enumerate().skip(1) {
            path.push(state.clone());
            times.push(t0 + i as f64 * dt);
            if triple.norm_ep(state)? > caps.field_cap {
                capped_at = Some(i);
                break;
            }
        }
        let kept = capped_at.unwrap_or_else(|| seg.steps_taken());
        theta_history.extend_from_slice(&seg.theta_history[..kept]);
        for i in 0..kept {
            monitor_history.push(seg.monitor.sup_term[i] + seg.monitor.lp_term[i]);
        }
        if kept > 0 {
            lp_pow += seg.monitor.lp_term[kept - 1].powf(triple.p);
        }
        if seg.blown_up || capped_at.is_some() {
            termination = Some(Termination::BlowUpFlag);
            break;
        }
        offset += seg.steps_taken();
        if offset >= total_steps {
            termination = Some(Termination::ReachedT);
            break;
        }
        // The segment stopped on a monitor exceedance; restart here.
        if seg.steps_taken() < caps.min_segment_steps {
            short_stops += 1;
            if short_stops >= 2 {
                termination = Some(Termination::StepFloor);
                break;
            }
        } else {
            short_stops = 0;
        }
        let state = path
            .last()
            .expect("segment appended at least one state")
            .clone();
        anchors.push((offset as f64 * dt, state));
    }

    let final_time = *times.last().expect("times holds at least t = 0");
    Ok(LocalizedRun {
        path,
        times,
        record: StoppingRecord {
            anchors,
            termination: termination.expect("loop sets a termination before exiting"),
            total_monitor_lp: lp_pow.powf(1.0 / triple.p),
            final_time,
        },
        theta_history,
        monitor_history,
    })
}

/// A truncation-ladder run: the stitched path, the per-level exit records,
/// and each level's full path on the shared noise.
#[derive(Clone, Debug)]
pub struct HierarchyRun {
    /// Stitched trajectory: at each time the state of the smallest
    /// admissible level whose ball has not been exited yet.
    pub stitched: Vec<GridField>,
    pub times: Vec<f64>,
    pub levels: Vec<TruncationLevel>,
    /// Full localized path of every level, aligned with `levels`.
    pub level_paths: Vec<Vec<GridField>>,
}

/// Run the truncation ladder on one shared noise path: level `n` evolves
/// the radially truncated model and records `σ_n`, the first grid time its
/// trace norm leaves the `n`-ball (or the end of its run). The stitched
/// path follows the smallest admissible level at each time. Levels must be
/// increasing and the initial state must lie in the half-ball of at least
/// the largest level.
#[allow(clippy::too_many_arguments)]
pub fn run_truncated_hierarchy(
    model: &ModelSpec,
    u0: &GridField,
    budgets: &[SmallnessBudget],
    spec: &NoiseSpec,
    path_index: u64,
    t_horizon: f64,
    levels: &[f64],
    caps: &RunCaps,
    triple: &Arc<SpaceTriple>,
) -> Result<HierarchyRun> {
    if levels.is_empty() || budgets.len() != levels.len() {
        return Err(Error::Config(
            "the ladder needs one budget per truncation level".into(),
        ));
    }
    for w in levels.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::Config("truncation levels must be increasing".into()));
        }
    }
    if !(levels[0] > 0.0) {
        return Err(Error::Config("truncation levels must be positive".into()));
    }
    let u0_norm = triple.norm_ep(u0)?;
    if u0_norm > levels[levels.len() - 1] / 2.0 {
        return Err(Error::Config(format!(
            "initial trace norm {u0_norm} exceeds half of every truncation level"
        )));
    }

    let mut records = Vec::with_capacity(levels.len());
    let mut level_paths = Vec::with_capacity(levels.len());
    let mut exited = Vec::with_capacity(levels.len());
    for (n, budget) in levels.iter().zip(budgets) {
        let truncated = model.with_truncation(*n, Arc::clone(triple));
        let run = run_localized(
            &truncated,
            u0,
            budget,
            spec,
            path_index,
            t_horizon,
            caps,
            triple.as_ref(),
        )?;
        let mut sigma = run.record.final_time;
        let mut left_ball = false;
        for (state, t) in run.path.iter().zip(&run.times) {
            if triple.norm_ep(state)? > *n {
                sigma = *t;
                left_ball = true;
                break;
            }
        }
        records.push(TruncationLevel {
            n: *n,
            gamma_set_member: u0_norm <= *n / 2.0,
            sigma_n: sigma,
        });
        exited.push(left_ball);
        level_paths.push(run.path);
    }

    // Stitch: at each grid time take the smallest admissible level that has
    // neither exited its ball nor ended its run. The ball-exit interval is
    // half-open, so an exited level is dropped from its exit time onward.
    let dt = spec.dt;
    let mut stitched = Vec::new();
    let mut times = Vec::new();
    let mut m = 0usize;
    loop {
        let t = m as f64 * dt;
        let pick = records.iter().enumerate().find(|(i, lv)| {
            lv.gamma_set_member && (!exited[*i] || t < lv.sigma_n) && m < level_paths[*i].len()
        });
        match pick {
            Some((i, _)) => {
                stitched.push(level_paths[i][m].clone());
                times.push(t);
            }
            None => break,
        }
        m += 1;
    }
    if stitched.is_empty() {
        return Err(Error::Config(
            "the stitched path is empty: every admissible level exited immediately".into(),
        ));
    }
    Ok(HierarchyRun {
        stitched,
        times,
        levels: records,
        level_paths,
    })
}

/// Summarize a stopping record. For globally Lipschitz models the abnormal
/// labels should become rare under time-step refinement; the label says
/// which regime the run landed in.
pub fn classify_termination(record: &StoppingRecord) -> TerminationReport {
    let label = match record.termination {
        Termination::ReachedT => "global".to_string(),
        Termination::BlowUpFlag => format!("blow_up_flag at t = {:.6}", record.final_time),
        Termination::StepFloor => format!("step_floor at t = {:.6}", record.final_time),
    };
    TerminationReport {
        termination: record.termination,
        final_time: record.final_time,
        anchor_count: record.anchors.len(),
        total_monitor_lp: record.total_monitor_lp,
        label,
    }
}
