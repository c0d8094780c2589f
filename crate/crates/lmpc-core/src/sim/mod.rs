//! Plant simulation and race orchestration.
//!
//! The plant integrates the Pacejka dynamic bicycle at a fine step with
//! zero-order-hold inputs from the controller period. The agent pipeline
//! bundles everything one agent does per control step: lap bookkeeping,
//! system identification, terminal-set selection, problem building and
//! solving, and the failure fallback.

mod race;

pub use race::{
    run_race, CollisionEvent, OvertakeEvent, RaceLog, RaceSetup, RaceSummary, TraceRow,
};

use crate::controllers::{
    build_multi_agent_lmpc, build_path_following, build_single_agent_lmpc, lap_shift,
    propagate_opponent, ControllerConfig, ControllerError, OcpSolution, RaceConfig,
};
use crate::estimation::SensorNoise;
use crate::models::{
    dynamic_step_pacejka, kinematic_step, KinematicState, ModelError, PacejkaParams,
    VehicleInput, VehicleParams, VehicleState, V_EPS,
};
use crate::safeset::{
    select_terminal_set, IterationRecord, PropagatedTrajectory, SafeSetConfig, SafeSetStore,
    TerminalRaceContext,
};
use crate::solver::{solve_ocp, SqpConfig};
use crate::sysid::{fit, select_regression_window, RegressionModel, SysIdConfig};
use crate::track::Track;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimConfig {
    /// Plant integration step, s.
    pub t_sim: f64,
    /// Controller period, s; must be an integer multiple of `t_sim`.
    pub t_ctrl: f64,
    pub seed: u64,
    /// Path-following laps per initialization.
    pub n_pf: usize,
    /// Learning laps per initialization.
    pub n_lmpc: usize,
    /// Race laps.
    pub n_race: usize,
    /// Optional measurement noise; `None` runs on ground truth.
    pub noise: Option<SensorNoise>,
    /// Hard cap on control steps per lap before the lap aborts.
    pub max_steps_per_lap: usize,
    /// Consecutive solver failures tolerated before a lap abort.
    pub k_fallback: usize,
    /// Input decay factor applied during fallback steps.
    pub fallback_decay: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            t_sim: 0.01,
            t_ctrl: 0.1,
            seed: 0,
            n_pf: 5,
            n_lmpc: 30,
            n_race: 30,
            noise: None,
            max_steps_per_lap: 600,
            k_fallback: 8,
            fallback_decay: 0.5,
        }
    }
}

impl SimConfig {
    pub fn substeps(&self) -> usize {
        (self.t_ctrl / self.t_sim).round() as usize
    }
}

/// One plant substep: Pacejka bicycle above the low-speed guard, kinematic
/// rollover below it.
pub fn plant_step(
    x: &VehicleState,
    u_held: &VehicleInput,
    dt: f64,
    vp: &VehicleParams,
    pp: &PacejkaParams,
    track: &Track,
) -> Result<VehicleState, ModelError> {
    if x.v_x.abs() > V_EPS {
        dynamic_step_pacejka(x, u_held, track, dt, vp, pp)
    } else {
        let kin = KinematicState {
            s: x.s,
            e_y: x.e_y,
            e_psi: x.e_psi,
            v: x.v_x,
        };
        let next = kinematic_step(&kin, u_held, track, dt, vp)?;
        let beta = crate::models::slip_angle_beta(u_held.delta_f, vp);
        Ok(VehicleState {
            s: next.s,
            e_y: next.e_y,
            e_psi: next.e_psi,
            r: next.v / vp.l_r * beta.sin(),
            v_x: next.v,
            v_y: 0.0,
        })
    }
}

/// Fallback input applied while the solver reports failures: the previous
/// acceleration decays (toward gentle braking once it is nonpositive) and the
/// steering is held.
pub fn failure_fallback(prev_input: &VehicleInput, decay: f64, a_min: f64) -> VehicleInput {
    let brake_target = a_min / 4.0;
    let a = if prev_input.a > 0.0 {
        decay * prev_input.a
    } else {
        decay * prev_input.a + (1.0 - decay) * brake_target
    };
    VehicleInput {
        a,
        delta_f: prev_input.delta_f,
    }
}

/// Which controller the pipeline runs this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlPhase {
    PathFollow,
    Lmpc,
    Race,
}

/// Per-step solver report for logging.
#[derive(Debug, Clone, Serialize)]
pub struct StepInfo {
    pub status: String,
    pub cost_terminal: f64,
    pub cost_barrier: f64,
    pub cost_distance: f64,
    pub cost_slack: f64,
    pub lambda_support: usize,
    pub qp_iterations: usize,
    pub used_incumbent: bool,
    pub fallback: bool,
}

/// Everything one agent carries through a run.
pub struct AgentPipeline {
    pub store: SafeSetStore,
    pub track: Track,
    pub vp: VehicleParams,
    pub ctrl: ControllerConfig,
    pub ss_cfg: SafeSetConfig,
    pub si_cfg: SysIdConfig,
    pub race_cfg: RaceConfig,
    pub sqp: SqpConfig,
    pub model: RegressionModel,
    prev: Option<OcpSolution>,
    partial: Vec<(VehicleState, VehicleInput)>,
    last_input: VehicleInput,
    fallback_count: usize,
    chain: usize,
}

/// Result of the lap bookkeeping at a control tick.
pub enum LapEvent {
    None,
    Completed { steps: usize },
    Aborted,
}

impl AgentPipeline {
    pub fn new(
        track: Track,
        vp: VehicleParams,
        ctrl: ControllerConfig,
        ss_cfg: SafeSetConfig,
        si_cfg: SysIdConfig,
        race_cfg: RaceConfig,
        sqp: SqpConfig,
    ) -> Self {
        AgentPipeline {
            store: SafeSetStore::new(ss_cfg.n_before, ss_cfg.n_trans),
            track,
            vp,
            ctrl,
            ss_cfg,
            si_cfg,
            race_cfg,
            sqp,
            model: RegressionModel::zero(),
            prev: None,
            partial: Vec::new(),
            last_input: VehicleInput::ZERO,
            fallback_count: 0,
            chain: 0,
        }
    }

    /// Start a new chain of laps: extensions stop linking across this point.
    pub fn begin_chain(&mut self) {
        self.chain += 1;
        self.partial.clear();
        self.prev = None;
        self.last_input = VehicleInput::ZERO;
        self.fallback_count = 0;
    }

    pub fn chain(&self) -> usize {
        self.chain
    }

    pub fn last_input(&self) -> VehicleInput {
        self.last_input
    }

    /// Lap bookkeeping: when the state crossed the line, the completed lap is
    /// archived, the state and the previous solution shift back by one track
    /// length, and the next lap starts from the crossing state.
    pub fn observe(&mut self, x: &mut VehicleState) -> LapEvent {
        let s_f = self.track.total_length();
        if x.s <= s_f {
            return LapEvent::None;
        }
        let mut states: Vec<VehicleState> = self.partial.iter().map(|(s, _)| *s).collect();
        let inputs: Vec<VehicleInput> = self.partial.iter().map(|(_, u)| *u).collect();
        states.push(*x);
        let steps = inputs.len();
        if steps < 2 {
            // Degenerate lap (reset right on the line); drop it.
            self.partial.clear();
            *x = lap_shift(x, s_f);
            if let Some(prev) = &mut self.prev {
                prev.shift_s(-s_f);
            }
            return LapEvent::None;
        }
        let record = IterationRecord::new(states, inputs, s_f, self.chain);
        self.store.add_iteration(record, s_f);
        *x = lap_shift(x, s_f);
        if let Some(prev) = &mut self.prev {
            prev.shift_s(-s_f);
        }
        self.partial.clear();
        LapEvent::Completed { steps }
    }

    /// Discard the lap in progress after an abort and reset the warm start.
    pub fn abort_lap(&mut self) {
        self.partial.clear();
        self.prev = None;
        self.last_input = VehicleInput::ZERO;
        self.fallback_count = 0;
    }

    /// Refit the regression model over the locality window; keeps the last
    /// model when the window is too thin or degenerate.
    fn refit_model(&mut self, x: &VehicleState) {
        if let Ok(samples) =
            select_regression_window(&self.store, x, &self.partial, &self.si_cfg)
        {
            if let Ok((model, _res)) = fit(&samples, self.ctrl.t, &self.si_cfg) {
                self.model = RegressionModel {
                    fitted_at: self.partial.len(),
                    ..model
                };
            }
        }
    }

    /// Run one control step and return the input to hold over the next
    /// control period.
    pub fn step(
        &mut self,
        x: &VehicleState,
        opp: Option<&PropagatedTrajectory>,
        phase: ControlPhase,
    ) -> (VehicleInput, StepInfo) {
        let solution = match phase {
            ControlPhase::PathFollow => {
                let kin = KinematicState {
                    s: x.s,
                    e_y: x.e_y,
                    e_psi: x.e_psi,
                    v: x.v_x,
                };
                let problem =
                    build_path_following(&kin, self.prev.as_ref(), &self.ctrl, &self.vp, &self.track);
                solve_ocp(&problem, &self.sqp).ok()
            }
            ControlPhase::Lmpc | ControlPhase::Race => {
                self.refit_model(x);
                // Express the opponent's prediction in this agent's unwrapped
                // frame so plain arc-length differences stay meaningful near
                // the start/finish line.
                let aligned = opp.map(|opp_pred| {
                    let s_f = self.track.total_length();
                    PropagatedTrajectory {
                        states: opp_pred
                            .states
                            .iter()
                            .map(|o| VehicleState {
                                s: x.s + crate::controllers::wrap_half(o.s - x.s, s_f),
                                ..*o
                            })
                            .collect(),
                    }
                });
                let race_ctx = aligned.as_ref().map(|opp_pred| {
                    let gap = opp_pred.states.first().map(|o| o.s).unwrap_or(x.s) - x.s;
                    let opp_v = opp_pred.states.first().map(|o| o.v_x).unwrap_or(0.0);
                    TerminalRaceContext {
                        opponent: opp_pred,
                        track_width: self.track.width(),
                        radii: (self.race_cfg.r_s, self.race_cfg.r_ey),
                        tau: self.race_cfg.tau,
                        engaged: gap > 0.0
                            && gap <= self.race_cfg.engagement_range
                            && x.v_x >= opp_v,
                    }
                });
                match select_terminal_set(&self.store, x, &self.ss_cfg, race_ctx.as_ref()) {
                    Ok(set) => {
                        let problem = match (phase, aligned.as_ref()) {
                            (ControlPhase::Race, Some(opp_pred)) => build_multi_agent_lmpc(
                                x,
                                &set,
                                &self.model,
                                self.prev.as_ref(),
                                &self.store,
                                opp_pred,
                                &self.ctrl,
                                &self.race_cfg,
                                &self.vp,
                                &self.track,
                            )
                            .or_else(|err| match err {
                                // Inside the barrier domain: recovery mode
                                // keeps the pruned set but drops the barrier.
                                ControllerError::BarrierDomain(_) => build_single_agent_lmpc(
                                    x,
                                    &set,
                                    &self.model,
                                    self.prev.as_ref(),
                                    &self.store,
                                    &self.ctrl,
                                    &self.vp,
                                    &self.track,
                                ),
                                other => Err(other),
                            }),
                            _ => build_single_agent_lmpc(
                                x,
                                &set,
                                &self.model,
                                self.prev.as_ref(),
                                &self.store,
                                &self.ctrl,
                                &self.vp,
                                &self.track,
                            ),
                        };
                        problem.ok().and_then(|p| solve_ocp(&p, &self.sqp).ok())
                    }
                    Err(_) => None,
                }
            }
        };

        let (input, info) = match solution {
            Some(sol) => {
                self.fallback_count = 0;
                let info = StepInfo {
                    status: "optimal".to_string(),
                    cost_terminal: sol.cost.terminal,
                    cost_barrier: sol.cost.barrier,
                    cost_distance: sol.cost.distance,
                    cost_slack: sol.cost.slack,
                    lambda_support: sol.support_size(1e-6),
                    qp_iterations: sol.qp_iterations,
                    used_incumbent: sol.used_incumbent,
                    fallback: false,
                };
                let input = sol.inputs[0];
                self.prev = Some(sol);
                (input, info)
            }
            None => {
                self.fallback_count += 1;
                let input =
                    failure_fallback(&self.last_input, 0.5, self.ctrl.a_min);
                (
                    input,
                    StepInfo {
                        status: "fallback".to_string(),
                        cost_terminal: 0.0,
                        cost_barrier: 0.0,
                        cost_distance: 0.0,
                        cost_slack: 0.0,
                        lambda_support: 0,
                        qp_iterations: 0,
                        used_incumbent: false,
                        fallback: true,
                    },
                )
            }
        };
        self.partial.push((*x, input));
        self.store
            .note_ongoing_state(x, self.track.total_length());
        self.last_input = input;
        (input, info)
    }

    /// Propagated own prediction for the opponent's next step.
    pub fn prediction(&self) -> PropagatedTrajectory {
        match &self.prev {
            Some(sol) => propagate_opponent(
                &sol.states,
                &sol.lambda,
                &self.store,
                self.race_cfg.propagation_margin,
            ),
            None => PropagatedTrajectory::default(),
        }
    }

    pub fn fallback_exhausted(&self, k_fallback: usize) -> bool {
        self.fallback_count >= k_fallback
    }
}

/// Outcome of one initialization run (Algorithm 1 for a single seed line).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitRunLog {
    pub e_y_ref: f64,
    pub pf_lap_steps: Vec<usize>,
    pub lmpc_lap_steps: Vec<usize>,
    pub aborts: usize,
}

/// Run path-following laps followed by learning laps for one initialization,
/// appending every completed lap to the pipeline's store.
pub fn run_initialization(
    pipeline: &mut AgentPipeline,
    e_y_ref: f64,
    pp: &PacejkaParams,
    sim: &SimConfig,
) -> InitRunLog {
    let track = pipeline.track.clone();
    let s_f = track.total_length();
    pipeline.begin_chain();
    pipeline.ctrl.e_y_ref = e_y_ref;

    let mut log = InitRunLog {
        e_y_ref,
        pf_lap_steps: Vec::new(),
        lmpc_lap_steps: Vec::new(),
        aborts: 0,
    };
    let mut x = VehicleState {
        s: 0.0,
        e_y: e_y_ref,
        e_psi: 0.0,
        r: 0.0,
        v_x: 0.0,
        v_y: 0.0,
    };
    let substeps = sim.substeps();
    let envelope = track.envelope();
    let mut steps_this_lap = 0usize;
    let max_ticks = (sim.n_pf + sim.n_lmpc + 8) * sim.max_steps_per_lap;

    for _ in 0..max_ticks {
        let phase = if log.pf_lap_steps.len() < sim.n_pf {
            ControlPhase::PathFollow
        } else {
            ControlPhase::Lmpc
        };
        let (input, _info) = pipeline.step(&x, None, phase);
        let mut aborted = false;
        for _ in 0..substeps {
            match plant_step(&x, &input, sim.t_sim, &pipeline.vp, pp, &track) {
                Ok(next) => x = next,
                Err(_) => {
                    aborted = true;
                    break;
                }
            }
        }
        steps_this_lap += 1;
        if x.e_y.abs() > envelope
            || steps_this_lap > sim.max_steps_per_lap
            || pipeline.fallback_exhausted(sim.k_fallback)
        {
            aborted = true;
        }
        if aborted {
            log.aborts += 1;
            pipeline.abort_lap();
            x = VehicleState {
                s: track.wrap_s(x.s),
                e_y: 0.0,
                e_psi: 0.0,
                r: 0.0,
                v_x: pipeline.ctrl.v_ref / 2.0,
                v_y: 0.0,
            };
            steps_this_lap = 0;
            continue;
        }
        if let LapEvent::Completed { steps } = pipeline.observe(&mut x) {
            steps_this_lap = 0;
            if log.pf_lap_steps.len() < sim.n_pf {
                log.pf_lap_steps.push(steps);
            } else {
                log.lmpc_lap_steps.push(steps);
                if log.lmpc_lap_steps.len() >= sim.n_lmpc {
                    break;
                }
            }
        }
        let _ = s_f;
    }
    log
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::oval_track;

    #[test]
    fn plant_at_rest_stays_at_rest() {
        let track = oval_track();
        let vp = VehicleParams::agent_one();
        let pp = PacejkaParams::simulation();
        let x = VehicleState {
            s: 0.0,
            e_y: 0.0,
            e_psi: 0.0,
            r: 0.0,
            v_x: 0.0,
            v_y: 0.0,
        };
        let next = plant_step(&x, &VehicleInput::ZERO, 0.01, &vp, &pp, &track).unwrap();
        assert_eq!(next.v_x, 0.0);
        assert_eq!(next.s, 0.0);
    }

    #[test]
    fn substep_refinement_matches_coarse_step_to_first_order() {
        let track = oval_track();
        let vp = VehicleParams::agent_one();
        let pp = PacejkaParams::simulation();
        let x0 = VehicleState {
            s: 0.2,
            e_y: 0.05,
            e_psi: 0.02,
            r: 0.1,
            v_x: 1.4,
            v_y: 0.02,
        };
        let u = VehicleInput {
            a: 0.8,
            delta_f: 0.15,
        };
        // Settle the fast yaw transient first; the refinement comparison is
        // meaningful on the slow manifold only (the yaw channel relaxes in
        // ~15 ms, which is why the plant integrates at 100 Hz at all).
        let mut settled = x0;
        for _ in 0..400 {
            settled = plant_step(&settled, &u, 1e-3, &vp, &pp, &track).unwrap();
        }
        let coarse =
            crate::models::dynamic_step_pacejka(&settled, &u, &track, 0.1, &vp, &pp).unwrap();
        let run = |dt: f64| {
            let mut x = settled;
            let n = (0.1 / dt).round() as usize;
            for _ in 0..n {
                x = plant_step(&x, &u, dt, &vp, &pp, &track).unwrap();
            }
            x
        };
        let fine = run(0.01);
        let finer = run(0.001);
        // The single coarse step agrees with the refined flow to first order:
        // its defect shrinks roughly tenfold per refinement decade.
        let gap = |a: &VehicleState, b: &VehicleState| {
            a.to_array()
                .iter()
                .zip(b.to_array().iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        let defect_coarse = gap(&coarse, &finer);
        let defect_fine = gap(&fine, &finer);
        assert!(defect_coarse < 0.05, "coarse defect {defect_coarse}");
        assert!(defect_fine < defect_coarse * 0.25, "{defect_fine} vs {defect_coarse}");
    }

    #[test]
    fn mass_difference_changes_longitudinal_response() {
        let track = oval_track();
        let pp = PacejkaParams::simulation();
        let vp1 = VehicleParams::agent_one();
        let vp2 = VehicleParams::agent_two();
        let mut a = VehicleState {
            s: 0.0,
            e_y: 0.0,
            e_psi: 0.0,
            r: 0.05,
            v_x: 1.0,
            v_y: 0.01,
        };
        let mut b = a;
        let u = VehicleInput {
            a: 2.0,
            delta_f: 0.1,
        };
        for _ in 0..50 {
            a = plant_step(&a, &u, 0.01, &vp1, &pp, &track).unwrap();
            b = plant_step(&b, &u, 0.01, &vp2, &pp, &track).unwrap();
        }
        // The Newton-Euler lateral channel divides tire force by mass.
        assert!((a.v_y - b.v_y).abs() > 1e-6 || (a.r - b.r).abs() > 1e-6);
    }

    #[test]
    fn fallback_input_examples() {
        let a_min = -1.3;
        let u = failure_fallback(
            &VehicleInput {
                a: 1.0,
                delta_f: 0.2,
            },
            0.5,
            a_min,
        );
        assert!((u.a - 0.5).abs() < 1e-12);
        assert_eq!(u.delta_f, 0.2);
        // Zero previous input decays toward gentle braking.
        let u = failure_fallback(&VehicleInput::ZERO, 0.5, a_min);
        assert!(u.a < 0.0);
        assert!(u.a >= a_min / 4.0);
    }
}
