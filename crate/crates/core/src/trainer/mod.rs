//! Verification-in-the-loop training: every epoch computes a differentiable
//! reach tube, descends the composite loss with Adam, and checks the
//! scenario's verification criteria.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamParams, AdamState};
pub use checkpoint::{load as load_checkpoint, save as save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{check_tube, invariance_check, mc_soundness, CertReport};
use crate::crown::{
    extract_tube, rollout_on_tape, stage_params, BoundConfig, BoundGraph, CrownError, ReachTube,
};
use crate::diffcore::{Tape, TapeError, Tensor};
use crate::losses::{total_loss, LossBreakdown, LossError, LossInputs};
use crate::scenario::{GoalCriterion, Scenario};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("gradient/parameter shapes disagree")]
    ShapeMismatch,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("checkpoint io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint encode error: {0}")]
    Encode(serde_json::Error),
    #[error("checkpoint decode error: {0}")]
    Decode(serde_json::Error),
    #[error("checkpoint checksum mismatch at {path}")]
    ChecksumMismatch { path: String },
    #[error("unsupported checkpoint version {got}")]
    BadVersion { got: u32 },
    #[error(transparent)]
    Crown(#[from] CrownError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Why a run stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Termination {
    MaxEpochs,
    Plateau { epoch: usize },
    Certified { epoch: usize },
    /// Poisoned numerics; parameters roll back to the last good epoch.
    Aborted { epoch: usize, reason: String },
}

/// Everything a finished (or aborted) run reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub scenario_name: String,
    pub config_hash: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub termination: Termination,
    /// Per-epoch raw loss terms; length equals `epochs_run`.
    pub history: Vec<LossBreakdown>,
    pub wall_clock_secs: f64,
    /// Final trainable parameters (or last good ones after an abort).
    pub final_params: Vec<Tensor>,
    /// Reach tube of the final parameters.
    pub tube: ReachTube,
    pub cert: CertReport,
    pub criteria_pass: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where periodic and final checkpoints go; skipped when absent.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Evaluate the scenario's verification criteria on a concrete tube.
/// Invariance is only checked when requested (it costs one extra bound step
/// per scanned timestep).
pub fn evaluate_criteria(
    scenario: &Scenario,
    graph: &BoundGraph,
    tube: &ReachTube,
    cfg: &BoundConfig,
    with_invariance: bool,
) -> Result<(CertReport, bool), TrainError> {
    let goal = scenario.goal_region();
    let boxes = scenario.box_obstacles();
    let spheres = scenario.sphere_obstacles();
    let mut report = check_tube(tube, &goal, &boxes, &spheres, &scenario.system.position_dims);

    if with_invariance && scenario.criteria.invariance {
        let start = scenario.weights.t_inv.unwrap_or(0);
        report.invariance = invariance_check(graph, tube, start, cfg, 0.0)?;
    }

    let crit = &scenario.criteria;
    let mut pass = true;
    if crit.avoid_obstacles && !(boxes.is_empty() && spheres.is_empty()) {
        pass &= report.all_avoided();
    }
    match &crit.goal {
        GoalCriterion::Containment => pass &= report.goal_containment_t.is_some(),
        GoalCriterion::Proximity { distance } => pass &= report.final_goal_distance <= *distance,
        GoalCriterion::None => {}
    }
    if crit.invariance {
        pass &= report.invariance.is_some();
    }
    Ok((report, pass))
}

struct EpochOutput {
    breakdown: LossBreakdown,
    grads: Option<Vec<Tensor>>,
    tube: ReachTube,
}

/// One rollout + loss (+ gradient) evaluation at the graph's current theta.
fn run_epoch(
    graph: &BoundGraph,
    scenario: &Scenario,
    cfg: &BoundConfig,
    tape: &mut Tape,
    want_grads: bool,
) -> Result<EpochOutput, TrainError> {
    tape.clear();
    let staged = stage_params(tape, graph, want_grads)?;
    let x0 = scenario.initial_rect();
    let tube_ids = rollout_on_tape(tape, graph, &staged, &x0, scenario.horizon, cfg)?;

    let goal = scenario.goal_region();
    let boxes = scenario.box_obstacles();
    let spheres = scenario.sphere_obstacles();
    let vol_normalizer = if scenario.weights.normalize_vol {
        Some(x0.volume().max(f64::MIN_POSITIVE))
    } else {
        None
    };
    let inputs = LossInputs {
        goal: &goal,
        box_obstacles: &boxes,
        sphere_obstacles: &spheres,
        position_dims: &scenario.system.position_dims,
        velocity_dims: &scenario.system.velocity_dims,
        weights: scenario.loss_weights(),
        t_inv: scenario.weights.t_inv,
        vol_normalizer,
    };
    let (total, breakdown) = total_loss(tape, &tube_ids, &inputs)?;

    if !breakdown.total.is_finite() {
        // Name the op that poisoned the run.
        tape.check_finite()?;
    }

    let grads = if want_grads {
        let map = tape.backward(total)?;
        let ids = staged.trainable_ids(graph);
        Some(
            ids.iter()
                .map(|id| map.get(*id).expect("trainable leaf has gradient").clone())
                .collect(),
        )
    } else {
        None
    };

    let tube = ReachTube { rects: extract_tube(tape, &tube_ids)? };
    Ok(EpochOutput { breakdown, grads, tube })
}

fn write_checkpoint(
    dir: &Path,
    scenario: &Scenario,
    seed: u64,
    epoch: usize,
    params: &[Tensor],
    adam: &AdamState,
) -> Result<PathBuf, TrainError> {
    std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let path = dir.join(format!("checkpoint-{epoch:06}.json"));
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        scenario_hash: scenario.config_hash(),
        seed,
        epoch,
        params: params.to_vec(),
        adam: adam.clone(),
    };
    save_checkpoint(&path, &ck)?;
    Ok(path)
}

/// Run verification-in-the-loop training on a scenario. Deterministic for a
/// fixed (scenario, seed).
pub fn train(scenario: &Scenario, opts: &TrainOptions) -> Result<TrainReport, TrainError> {
    let start = Instant::now();
    let seed = scenario.train.seed;
    let mut graph = scenario.build_graph(seed).map_err(|e| {
        TrainError::Crown(CrownError::BadGraph(e.to_string()))
    })?;
    let cfg = scenario.bound_config();
    let hp = AdamParams::with_lr(scenario.train.lr);
    let mut adam = AdamState::new(&graph.trainable_params());
    let mut tape = Tape::new();

    let mut history: Vec<LossBreakdown> = Vec::with_capacity(scenario.train.epochs);
    let mut last_good = graph.trainable_params();
    let mut termination = Termination::MaxEpochs;
    let mut epochs_run = 0usize;

    for epoch in 0..scenario.train.epochs {
        let theta_snapshot = graph.trainable_params();
        let out = match run_epoch(&graph, scenario, &cfg, &mut tape, true) {
            Ok(out) => out,
            Err(e) => {
                termination = Termination::Aborted { epoch, reason: e.to_string() };
                break;
            }
        };
        let grads = out.grads.as_ref().expect("gradients requested");
        if grads.iter().any(|g| !g.is_finite()) {
            termination = Termination::Aborted { epoch, reason: "non-finite gradient".into() };
            break;
        }
        last_good = theta_snapshot;
        history.push(out.breakdown);
        epochs_run = epoch + 1;

        // Alg-1-style criteria check on the current parameters' tube.
        let cheap_criteria_due = scenario.train.early_stop_on_cert
            && (epoch % scenario.train.cert_check_every == 0
                || epoch + 1 == scenario.train.epochs);
        if cheap_criteria_due {
            let (_, pass) = evaluate_criteria(scenario, &graph, &out.tube, &cfg, true)?;
            if pass {
                termination = Termination::Certified { epoch };
                break;
            }
        }

        let mut theta = graph.trainable_params();
        if let Err(e) = adam_step(&hp, &mut adam, &mut theta, grads) {
            termination = Termination::Aborted { epoch, reason: e.to_string() };
            break;
        }
        graph
            .set_trainable_params(&theta)
            .map_err(TrainError::Crown)?;

        if epoch % 500 == 0 {
            log::info!(
                "epoch {epoch}: loss {:.6} (goal {:.4} vol {:.4})",
                out.breakdown.total,
                out.breakdown.goal,
                out.breakdown.vol
            );
        }

        // Plateau: relative change over a trailing window.
        let w = scenario.train.plateau_window;
        if w > 0 && history.len() > w {
            let then = history[history.len() - 1 - w].total;
            let now = out.breakdown.total;
            let rel = (now - then).abs() / then.abs().max(1e-12);
            if rel < scenario.train.plateau_tol {
                termination = Termination::Plateau { epoch };
                break;
            }
        }

        if scenario.train.checkpoint_every > 0
            && (epoch + 1) % scenario.train.checkpoint_every == 0
        {
            if let Some(dir) = &opts.checkpoint_dir {
                write_checkpoint(dir, scenario, seed, epoch + 1, &graph.trainable_params(), &adam)?;
            }
        }
    }

    // Roll back after an abort; otherwise keep the trained parameters.
    let final_params = match &termination {
        Termination::Aborted { .. } => {
            graph.set_trainable_params(&last_good).map_err(TrainError::Crown)?;
            last_good
        }
        _ => graph.trainable_params(),
    };

    let final_out = run_epoch(&graph, scenario, &cfg, &mut tape, false)?;
    let (mut cert, criteria_pass) =
        evaluate_criteria(scenario, &graph, &final_out.tube, &cfg, true)?;
    cert.mc_violations = Some(mc_soundness(&graph, &final_out.tube, 200, seed));

    if let Some(dir) = &opts.checkpoint_dir {
        write_checkpoint(dir, scenario, seed, epochs_run, &final_params, &adam)?;
    }

    Ok(TrainReport {
        scenario_name: scenario.name.clone(),
        config_hash: scenario.config_hash(),
        seed,
        epochs_run,
        termination,
        history,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        final_params,
        tube: final_out.tube,
        cert,
        criteria_pass,
    })
}

/// Rebuild the trained closed loop from a scenario and checkpoint parameters.
pub fn restore_graph(scenario: &Scenario, ck: &Checkpoint) -> Result<BoundGraph, TrainError> {
    let mut graph = scenario
        .build_graph(ck.seed)
        .map_err(|e| TrainError::Crown(CrownError::BadGraph(e.to_string())))?;
    graph.set_trainable_params(&ck.params).map_err(TrainError::Crown)?;
    Ok(graph)
}
