//! Assembly of the per-step optimal-control problems.
//!
//! Three problem kinds exist: the path-following warm-up controller on the
//! kinematic model, the single-agent lap-time controller on the identified
//! model with a convex terminal set, and the multi-agent variant that adds an
//! obstacle barrier and a signed-distance cost against the opponent's
//! propagated prediction. The builders produce a complete nonlinear problem
//! description plus an initial linearization; the SQP loop in [`crate::solver`]
//! re-linearizes as it iterates.

use crate::models::{
    identified_step_kappa, kinematic_step_kappa, KinematicState, VehicleInput, VehicleParams,
    VehicleState, V_FLOOR,
};
use crate::sysid::RegressionModel;
use crate::safeset::{LocalSafeSet, PropagatedTrajectory, SafeSetStore};
use crate::track::Track;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ControllerError {
    #[error("current state is inside the inflated obstacle ellipse (value {0})")]
    BarrierDomain(f64),
    #[error("terminal safe set is empty")]
    EmptyTerminalSet,
}

/// Tuning of the optimal-control problems. Field names follow the parameter
/// table the configs expose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Horizon length.
    pub n: usize,
    /// Controller period, s.
    pub t: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    /// Path-following tracking weights.
    pub w_v: f64,
    pub w_ey: f64,
    pub w_a: f64,
    pub w_df: f64,
    pub w_ddf: f64,
    /// Input magnitude weights `(a, delta_f)`.
    pub w_u: [f64; 2],
    /// Input rate weights `(a, delta_f)`.
    pub w_du: [f64; 2],
    /// State magnitude weights.
    pub w_x: [f64; 6],
    /// State rate weights.
    pub w_dx: [f64; 6],
    /// Linear and quadratic lateral slack penalties.
    pub u_slack: f64,
    pub v_slack: f64,
    /// Multiplier applied to the slack penalties for the terminal equality.
    pub terminal_slack_scale: f64,
    pub v_ref: f64,
    pub e_y_ref: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            n: 10,
            t: 0.1,
            a_min: -1.3,
            a_max: 3.0,
            delta_min: -0.4,
            delta_max: 0.4,
            w_v: 4.0,
            w_ey: 8.0,
            w_a: 0.3,
            w_df: 0.5,
            w_ddf: 2.0,
            w_u: [0.0, 0.0],
            w_du: [10.0, 0.1],
            w_x: [0.0; 6],
            w_dx: [1.0; 6],
            u_slack: 10.0,
            v_slack: 100.0,
            terminal_slack_scale: 10.0,
            v_ref: 1.2,
            e_y_ref: 0.0,
        }
    }
}

/// Racing-specific tuning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaceConfig {
    /// Obstacle ellipse radii in `s` and `e_y`, m.
    pub r_s: f64,
    pub r_ey: f64,
    /// Barrier magnitude `(far, near)`.
    pub w_obs: [f64; 2],
    /// Barrier steepness `(far, near)`.
    pub w_safe: [f64; 2],
    /// Signed-distance reward weight, positive.
    pub w_d: f64,
    /// Squared-deviation threshold of the opponent terminal propagation.
    pub propagation_margin: f64,
    /// Range ahead within which the overtaking corridor activates, m.
    pub engagement_range: f64,
    /// Collision-pruning reach-back.
    pub tau: i64,
    /// Optional soft cap on the agent's own longitudinal speed, m/s.
    pub v_cap: Option<f64>,
}

impl Default for RaceConfig {
    fn default() -> Self {
        RaceConfig {
            r_s: 0.4,
            r_ey: 0.2,
            w_obs: [0.1, 0.5],
            w_safe: [1.0, 0.5],
            w_d: 0.5,
            propagation_margin: 0.5,
            engagement_range: 3.0,
            tau: 0,
            v_cap: None,
        }
    }
}

/// Reference point the barrier expansion must keep clear of, one per stage.
#[derive(Debug, Clone)]
pub struct RaceTerms {
    /// Opponent position per stage, already unwrapped into the agent's frame.
    pub obs: Vec<(f64, f64)>,
    pub w_obs: f64,
    pub w_safe: f64,
    pub w_d: f64,
    pub r_s: f64,
    pub r_ey: f64,
    pub v_cap: Option<f64>,
}

/// Whether the problem runs the kinematic tracker or the learning controller.
#[derive(Debug, Clone)]
pub enum ProblemKind {
    PathFollowing {
        x0: KinematicState,
        v_ref: f64,
        e_y_ref: f64,
    },
    Lmpc {
        x0: VehicleState,
        terminal: LocalSafeSet,
        model: RegressionModel,
        race: Option<RaceTerms>,
    },
}

/// One control-step optimal-control instance.
#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub kind: ProblemKind,
    pub cfg: ControllerConfig,
    pub vp: VehicleParams,
    pub track_width: f64,
    /// Frozen curvature per stage, length `n`.
    pub kappa: Vec<f64>,
    /// Linearization trajectory: `n + 1` states (dimension 4 or 6) and `n`
    /// inputs, dynamically consistent with the nonlinear model.
    pub ref_states: Vec<Vec<f64>>,
    pub ref_inputs: Vec<VehicleInput>,
    /// Shifted previous-solution terminal weights, by store provenance.
    pub warm_lambda: Vec<((usize, i64), f64)>,
    /// Whether `ref_*` came from a shifted previous solution (then the
    /// incumbent competes with the SQP iterates on true cost).
    pub has_incumbent: bool,
}

/// Per-step cost breakdown for logging.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub total: f64,
    pub terminal: f64,
    pub barrier: f64,
    pub distance: f64,
    pub slack: f64,
    pub smoothness: f64,
    pub tracking: f64,
}

/// Solution of one control step.
#[derive(Debug, Clone)]
pub struct OcpSolution {
    /// Optimized inputs, length `n`; the first one is applied.
    pub inputs: Vec<VehicleInput>,
    /// Predicted states along the nonlinear rollout, length `n + 1`. For the
    /// path-following problem the kinematic state maps into the 6-component
    /// layout with `v_y = 0`.
    pub states: Vec<VehicleState>,
    /// Terminal convex-combination weights with store provenance.
    pub lambda: Vec<((usize, i64), f64)>,
    pub cost: CostBreakdown,
    /// Maximum lateral box violation along the prediction.
    pub lateral_slack: f64,
    /// Norm of the terminal convex-combination residual.
    pub terminal_slack: f64,
    pub qp_iterations: usize,
    pub sqp_iterations: usize,
    /// True when the accepted iterate came from the shifted incumbent rather
    /// than a QP step.
    pub used_incumbent: bool,
}

impl OcpSolution {
    /// Shift every predicted arc length, used at the lap transition.
    pub fn shift_s(&mut self, delta: f64) {
        for x in &mut self.states {
            x.s += delta;
        }
    }

    pub fn support_size(&self, tol: f64) -> usize {
        self.lambda.iter().filter(|(_, w)| *w > tol).count()
    }
}

/// Start-line shift of the state once it crosses the finish line.
pub fn lap_shift(x: &VehicleState, s_f: f64) -> VehicleState {
    debug_assert!(x.s > s_f);
    debug_assert!(x.s < 2.0 * s_f, "cannot shift across two laps at once");
    VehicleState { s: x.s - s_f, ..*x }
}

/// Curvature schedule from the previous prediction: the curvature of stage k
/// is looked up at the previous solution's stage k+1 arc length.
pub fn propagate_curvature(prev: Option<&OcpSolution>, track: &Track, n: usize, s_now: f64) -> Vec<f64> {
    match prev {
        Some(sol) if sol.states.len() >= n + 1 => (0..n)
            .map(|k| track.curvature_at(sol.states[k + 1].s))
            .collect(),
        _ => vec![track.curvature_at(s_now); n],
    }
}

/// Propagate the opponent's communicated prediction by one step.
///
/// The body of the trajectory shifts forward; the new terminal point is the
/// shifted convex combination of the opponent's stored states, unless it
/// deviates from the previous terminal by more than the margin, in which case
/// the previous terminal is reused.
pub fn propagate_opponent(
    prev_states: &[VehicleState],
    prev_lambda: &[((usize, i64), f64)],
    opp_store: &SafeSetStore,
    margin_m: f64,
) -> PropagatedTrajectory {
    let n_plus_1 = prev_states.len();
    if n_plus_1 == 0 {
        return PropagatedTrajectory::default();
    }
    let mut states: Vec<VehicleState> = prev_states[1..].to_vec();
    let prev_terminal = prev_states[n_plus_1 - 1];

    let shifted = shift_lambda(prev_lambda, opp_store);
    let terminal = if shifted.is_empty() {
        prev_terminal
    } else {
        let mut acc = [0.0; 6];
        let mut total = 0.0;
        for ((it, t), w) in &shifted {
            let st = opp_store.iteration(*it).extended_state(*t).to_array();
            for i in 0..6 {
                acc[i] += w * st[i];
            }
            total += w;
        }
        if total > 1e-9 {
            for v in &mut acc {
                *v /= total;
            }
            let cand = VehicleState::from_array(acc);
            let dev: f64 = cand
                .to_array()
                .iter()
                .zip(prev_terminal.to_array().iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            if dev <= margin_m {
                cand
            } else {
                prev_terminal
            }
        } else {
            prev_terminal
        }
    };
    states.push(terminal);
    PropagatedTrajectory { states }
}

/// Move every terminal weight one step forward along its source trajectory.
pub fn shift_lambda(
    lambda: &[((usize, i64), f64)],
    store: &SafeSetStore,
) -> Vec<((usize, i64), f64)> {
    lambda
        .iter()
        .filter(|(_, w)| *w > 1e-12)
        .map(|((it, t), w)| {
            if *it < store.len() {
                let (_, hi) = store.iteration(*it).extended_range();
                (((*it), (t + 1).min(hi)), *w)
            } else {
                ((*it, *t), *w)
            }
        })
        .collect()
}

fn rollout_kinematic(
    x0: &KinematicState,
    inputs: &[VehicleInput],
    kappa: &[f64],
    t: f64,
    vp: &VehicleParams,
) -> Vec<Vec<f64>> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.to_array().to_vec());
    let mut x = *x0;
    for (k, u) in inputs.iter().enumerate() {
        x = match kinematic_step_kappa(&x, u, kappa[k], t, vp) {
            Ok(next) => next,
            Err(_) => x, // singular geometry: hold the state
        };
        states.push(x.to_array().to_vec());
    }
    states
}

/// Identified-model rollout with the speed floored inside the features so it
/// is total.
pub fn rollout_identified(
    x0: &VehicleState,
    inputs: &[VehicleInput],
    kappa: &[f64],
    t: f64,
    model: &RegressionModel,
) -> Vec<VehicleState> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(*x0);
    let mut x = *x0;
    for (k, u) in inputs.iter().enumerate() {
        let mut guarded = x;
        if guarded.v_x.abs() < V_FLOOR {
            guarded.v_x = V_FLOOR.copysign(if guarded.v_x == 0.0 { 1.0 } else { guarded.v_x });
        }
        x = match identified_step_kappa(&guarded, u, kappa[k], t, model) {
            Ok(next) => next,
            Err(_) => x,
        };
        states.push(x);
    }
    states
}

/// Shifted input sequence from the previous solution: drop the first, repeat
/// the last.
fn shifted_inputs(prev: &OcpSolution, n: usize) -> Vec<VehicleInput> {
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let idx = (k + 1).min(prev.inputs.len().saturating_sub(1));
        out.push(prev.inputs[idx]);
    }
    out
}

/// Build the path-following tracking problem.
pub fn build_path_following(
    x: &KinematicState,
    prev: Option<&OcpSolution>,
    cfg: &ControllerConfig,
    vp: &VehicleParams,
    track: &Track,
) -> OcpProblem {
    let n = cfg.n;
    let kappa = propagate_curvature(prev, track, n, x.s);
    let inputs = match prev {
        Some(sol) => shifted_inputs(sol, n),
        None => vec![VehicleInput::ZERO; n],
    };
    let ref_states = rollout_kinematic(x, &inputs, &kappa, cfg.t, vp);
    OcpProblem {
        kind: ProblemKind::PathFollowing {
            x0: *x,
            v_ref: cfg.v_ref,
            e_y_ref: cfg.e_y_ref,
        },
        cfg: cfg.clone(),
        vp: *vp,
        track_width: track.width(),
        kappa,
        ref_states,
        ref_inputs: inputs,
        warm_lambda: Vec::new(),
        has_incumbent: prev.is_some(),
    }
}

/// Build the single-agent learning problem around the local terminal set.
pub fn build_single_agent_lmpc(
    x: &VehicleState,
    local_set: &LocalSafeSet,
    model: &RegressionModel,
    prev: Option<&OcpSolution>,
    store: &SafeSetStore,
    cfg: &ControllerConfig,
    vp: &VehicleParams,
    track: &Track,
) -> Result<OcpProblem, ControllerError> {
    if local_set.is_empty() {
        return Err(ControllerError::EmptyTerminalSet);
    }
    let n = cfg.n;
    let kappa = propagate_curvature(prev, track, n, x.s);
    let inputs = match prev {
        Some(sol) => shifted_inputs(sol, n),
        None => vec![VehicleInput::ZERO; n],
    };
    let ref_states: Vec<Vec<f64>> = rollout_identified(x, &inputs, &kappa, cfg.t, model)
        .iter()
        .map(|s| s.to_array().to_vec())
        .collect();
    let warm_lambda = match prev {
        Some(sol) => shift_lambda(&sol.lambda, store),
        None => Vec::new(),
    };
    Ok(OcpProblem {
        kind: ProblemKind::Lmpc {
            x0: *x,
            terminal: local_set.clone(),
            model: *model,
            race: None,
        },
        cfg: cfg.clone(),
        vp: *vp,
        track_width: track.width(),
        kappa,
        ref_states,
        ref_inputs: inputs,
        warm_lambda,
        has_incumbent: prev.is_some(),
    })
}

/// Wrap a signed arc-length difference into `[-s_f/2, s_f/2)`.
pub fn wrap_half(ds: f64, s_f: f64) -> f64 {
    let mut d = ds % s_f;
    if d >= s_f / 2.0 {
        d -= s_f;
    } else if d < -s_f / 2.0 {
        d += s_f;
    }
    d
}

/// Ellipse clearance value between two track positions.
pub fn ellipse_value(ds: f64, dey: f64, r_s: f64, r_ey: f64) -> f64 {
    (ds / r_s).powi(2) + (dey / r_ey).powi(2)
}

/// Build the multi-agent problem: the single-agent problem augmented with the
/// obstacle barrier and distance costs against the opponent's propagated
/// trajectory.
#[allow(clippy::too_many_arguments)]
pub fn build_multi_agent_lmpc(
    x: &VehicleState,
    terminal_set: &LocalSafeSet,
    model: &RegressionModel,
    prev: Option<&OcpSolution>,
    store: &SafeSetStore,
    opp: &PropagatedTrajectory,
    cfg: &ControllerConfig,
    race: &RaceConfig,
    vp: &VehicleParams,
    track: &Track,
) -> Result<OcpProblem, ControllerError> {
    let mut problem =
        build_single_agent_lmpc(x, terminal_set, model, prev, store, cfg, vp, track)?;
    let s_f = track.total_length();
    let n = cfg.n;

    // Opponent stage positions expressed in the agent's unwrapped frame.
    let mut obs = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let o = opp
            .states
            .get(k.min(opp.states.len().saturating_sub(1)))
            .copied()
            .unwrap_or(VehicleState {
                s: x.s + s_f, // no opponent data: park it far away
                e_y: 0.0,
                e_psi: 0.0,
                r: 0.0,
                v_x: 0.0,
                v_y: 0.0,
            });
        let ds = wrap_half(o.s - x.s, s_f);
        obs.push((x.s + ds, o.e_y));
    }

    // Weight pairing: risky when the opponent ahead is farther than half the
    // track, risk-averse otherwise.
    let gap_ahead = {
        let d = wrap_half(obs[0].0 - x.s, s_f);
        if d >= 0.0 {
            d
        } else {
            d + s_f
        }
    };
    let far = gap_ahead > s_f / 2.0;
    let (w_obs, w_safe) = if far {
        (race.w_obs[0], race.w_safe[0])
    } else {
        (race.w_obs[1], race.w_safe[1])
    };

    const EPS_DOM: f64 = 0.05;
    let current_ellipse = ellipse_value(obs[0].0 - x.s, obs[0].1 - x.e_y, race.r_s, race.r_ey);
    if current_ellipse < 1.0 + EPS_DOM {
        return Err(ControllerError::BarrierDomain(current_ellipse));
    }

    if let ProblemKind::Lmpc { race: slot, .. } = &mut problem.kind {
        *slot = Some(RaceTerms {
            obs,
            w_obs,
            w_safe,
            w_d: race.w_d,
            r_s: race.r_s,
            r_ey: race.r_ey,
            v_cap: race.v_cap,
        });
    }
    Ok(problem)
}

/// Map a kinematic 4-state into the 6-component layout for logging and
/// prediction exchange.
pub fn kinematic_to_vehicle(x: &KinematicState, vp: &VehicleParams, delta_f: f64) -> VehicleState {
    let beta = crate::models::slip_angle_beta(delta_f, vp);
    VehicleState {
        s: x.s,
        e_y: x.e_y,
        e_psi: x.e_psi,
        r: x.v / vp.l_r * beta.sin(),
        v_x: x.v * beta.cos(),
        v_y: x.v * beta.sin(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::oval_track;

    #[test]
    fn lap_shift_subtracts_track_length() {
        let x = VehicleState {
            s: 16.3,
            e_y: 0.1,
            e_psi: 0.05,
            r: 0.4,
            v_x: 2.0,
            v_y: -0.1,
        };
        let shifted = lap_shift(&x, 16.0);
        assert!((shifted.s - 0.3).abs() < 1e-12);
        assert_eq!(shifted.v_x, x.v_x);
        assert_eq!(shifted.r, x.r);
        assert_eq!(shifted.e_y, x.e_y);
    }

    #[test]
    fn curvature_propagation_shifts_by_one() {
        let track = oval_track();
        // A previous prediction marching straight through the first breakpoint
        // at s = 3.0.
        let states: Vec<VehicleState> = (0..11)
            .map(|k| VehicleState {
                s: 2.55 + 0.1 * k as f64,
                e_y: 0.0,
                e_psi: 0.0,
                r: 0.0,
                v_x: 1.0,
                v_y: 0.0,
            })
            .collect();
        let prev = OcpSolution {
            inputs: vec![VehicleInput::ZERO; 10],
            states,
            lambda: vec![],
            cost: CostBreakdown::default(),
            lateral_slack: 0.0,
            terminal_slack: 0.0,
            qp_iterations: 0,
            sqp_iterations: 0,
            used_incumbent: false,
        };
        let kappa = propagate_curvature(Some(&prev), &track, 10, 2.55);
        // stage k uses s_{k+1}: first straddle index moves one earlier
        assert_eq!(kappa[0], 0.0); // s_1 = 2.65
        assert_eq!(kappa[2], 0.0); // s_3 = 2.85
        assert!(kappa[4] > 0.0); // s_5 = 3.05, inside the arc
        assert!(kappa[9] > 0.0);

        // Cold start: constant vector at the current curvature.
        let cold = propagate_curvature(None, &track, 10, 1.0);
        assert!(cold.iter().all(|k| *k == 0.0));
        // Entirely within one segment: constant.
        let inside = propagate_curvature(None, &track, 10, 4.0);
        assert!(inside.iter().all(|k| *k == inside[0] && *k > 0.0));
    }

    #[test]
    fn opponent_propagation_branches() {
        let store = SafeSetStore::new(15, 15);
        let constant = VehicleState {
            s: 2.0,
            e_y: 0.1,
            e_psi: 0.0,
            r: 0.0,
            v_x: 1.0,
            v_y: 0.0,
        };
        let states = vec![constant; 11];
        // Stationary prediction with no terminal weights: propagation is the
        // identity.
        let prop = propagate_opponent(&states, &[], &store, 0.5);
        assert_eq!(prop.states.len(), 11);
        for st in &prop.states {
            assert_eq!(st.s, constant.s);
        }
    }

    #[test]
    fn lambda_shift_moves_one_hot_to_next_point() {
        let s_f = 16.0;
        let mut store = SafeSetStore::new(15, 15);
        let ds = s_f * 1.001 / 100.0;
        let states: Vec<VehicleState> = (0..=100)
            .map(|t| VehicleState {
                s: t as f64 * ds,
                e_y: 0.0,
                e_psi: 0.0,
                r: 0.0,
                v_x: 1.0,
                v_y: 0.0,
            })
            .collect();
        let rec = crate::safeset::IterationRecord::new(
            states.clone(),
            vec![VehicleInput::ZERO; 100],
            s_f,
            0,
        );
        store.add_iteration(rec, s_f);
        let lambda = vec![((0usize, 40i64), 1.0)];
        let shifted = shift_lambda(&lambda, &store);
        assert_eq!(shifted, vec![((0usize, 41i64), 1.0)]);

        let prev_states = vec![states[40]; 11];
        let prop = propagate_opponent(&prev_states, &lambda, &store, 10.0);
        let terminal = prop.states.last().unwrap();
        assert!((terminal.s - states[41].s).abs() < 1e-12);

        // Tiny margin: the shifted terminal deviates too much, previous kept.
        let prop2 = propagate_opponent(&prev_states, &lambda, &store, 1e-9);
        assert!((prop2.states.last().unwrap().s - states[40].s).abs() < 1e-12);
    }

    #[test]
    fn far_and_near_weights() {
        let track = oval_track();
        let cfg = ControllerConfig::default();
        let race = RaceConfig::default();
        let vp = VehicleParams::agent_one();
        let model = RegressionModel::zero();
        let x = VehicleState {
            s: 1.0,
            e_y: 0.0,
            e_psi: 0.0,
            r: 0.0,
            v_x: 1.0,
            v_y: 0.0,
        };
        let mut store = SafeSetStore::new(15, 15);
        let ds = 16.0 * 1.001 / 100.0;
        let states: Vec<VehicleState> = (0..=100)
            .map(|t| VehicleState {
                s: t as f64 * ds,
                e_y: 0.0,
                e_psi: 0.0,
                r: 0.0,
                v_x: 1.0,
                v_y: 0.0,
            })
            .collect();
        store.add_iteration(
            crate::safeset::IterationRecord::new(states, vec![VehicleInput::ZERO; 100], 16.0, 0),
            16.0,
        );
        let set = crate::safeset::select_terminal_set(
            &store,
            &x,
            &crate::safeset::SafeSetConfig::default(),
            None,
        )
        .unwrap();

        // Opponent just behind: wrapped gap ahead is ~15 m > s_f/2 -> risky.
        let far_opp = PropagatedTrajectory {
            states: vec![
                VehicleState {
                    s: 0.0,
                    e_y: 0.0,
                    e_psi: 0.0,
                    r: 0.0,
                    v_x: 1.0,
                    v_y: 0.0,
                };
                11
            ],
        };
        let p = build_multi_agent_lmpc(
            &x, &set, &model, None, &store, &far_opp, &cfg, &race, &vp, &track,
        )
        .unwrap();
        if let ProblemKind::Lmpc { race: Some(rt), .. } = &p.kind {
            assert_eq!(rt.w_obs, 0.1);
            assert_eq!(rt.w_safe, 1.0);
        } else {
            panic!("race terms missing");
        }

        // Opponent one meter ahead: risk-averse pair.
        let near_opp = PropagatedTrajectory {
            states: vec![
                VehicleState {
                    s: 2.0,
                    e_y: 0.0,
                    e_psi: 0.0,
                    r: 0.0,
                    v_x: 1.0,
                    v_y: 0.0,
                };
                11
            ],
        };
        let p = build_multi_agent_lmpc(
            &x, &set, &model, None, &store, &near_opp, &cfg, &race, &vp, &track,
        )
        .unwrap();
        if let ProblemKind::Lmpc { race: Some(rt), .. } = &p.kind {
            assert_eq!(rt.w_obs, 0.5);
            assert_eq!(rt.w_safe, 0.5);
        } else {
            panic!("race terms missing");
        }

        // Overlapping opponent: the barrier domain is violated.
        let on_top = PropagatedTrajectory {
            states: vec![x; 11],
        };
        let err = build_multi_agent_lmpc(
            &x, &set, &model, None, &store, &on_top, &cfg, &race, &vp, &track,
        )
        .unwrap_err();
        assert!(matches!(err, ControllerError::BarrierDomain(_)));
    }

    #[test]
    fn barrier_value_hand_check() {
        // ellipse = 2, w_obs = 0.5, w_safe = 0.5 -> cost = -0.5 * ln(0.5)
        let cost = -0.5 * (0.5f64 * (2.0 - 1.0)).ln();
        assert!((cost - 0.34657359).abs() < 1e-7);
    }

    #[test]
    fn wrap_half_symmetry() {
        assert!((wrap_half(15.9 - 0.1, 16.0) - (-0.2)).abs() < 1e-12);
        assert!((wrap_half(0.3 - 15.8, 16.0) - 0.5).abs() < 1e-12);
        assert!((wrap_half(5.0, 16.0) - 5.0).abs() < 1e-12);
    }
}
