//! Two-agent race orchestration.
//!
//! Both agent pipelines run on their own threads and synchronize at every
//! control tick; within a tick each agent sees only the opponent's prediction
//! from the previous tick, exchanged as an immutable snapshot. The lock-step
//! virtual clock keeps runs bit-reproducible.

use super::{plant_step, AgentPipeline, ControlPhase, LapEvent, SimConfig, StepInfo};
use crate::controllers::wrap_half;
use crate::models::{PacejkaParams, VehicleInput, VehicleState};
use crate::safeset::PropagatedTrajectory;
use serde::{Deserialize, Serialize};
use std::sync::mpsc;

/// Plant-level ellipse value below which a collision is logged.
pub const COLLISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OvertakeEvent {
    pub tick: usize,
    /// Index of the agent that moved ahead.
    pub overtaker: usize,
    /// 'L' when the pass happened on the low-e_y side.
    pub side: char,
    pub lap_overtaker: usize,
    pub lap_other: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CollisionEvent {
    pub tick: usize,
    pub ellipse: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceRow {
    pub tick: usize,
    pub agent: usize,
    pub s: f64,
    pub e_y: f64,
    pub e_psi: f64,
    pub r: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub a: f64,
    pub delta_f: f64,
}

/// Machine-readable race outcome; identical seeds yield identical summaries.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RaceSummary {
    pub seed: u64,
    pub race_laps: usize,
    /// Completed lap step counts per agent (warm-up lap included first).
    pub lap_steps: [Vec<usize>; 2],
    pub overtakes: Vec<OvertakeEvent>,
    pub collisions: Vec<CollisionEvent>,
    /// Smallest inter-agent ellipse value seen outside logged collisions.
    pub min_ellipse: f64,
    pub aborts: [usize; 2],
    pub ticks: usize,
}

#[derive(Debug, Clone)]
pub struct RaceLog {
    pub summary: RaceSummary,
    pub traces: Vec<TraceRow>,
    pub step_infos: Vec<(usize, usize, StepInfo)>,
}

#[derive(Debug, Clone)]
pub struct RaceSetup {
    pub start_s: [f64; 2],
    pub start_e_y: [f64; 2],
}

impl Default for RaceSetup {
    fn default() -> Self {
        RaceSetup {
            start_s: [0.0, 0.0],
            start_e_y: [0.0, 0.0],
        }
    }
}

struct TickRequest {
    x: VehicleState,
    opp: Option<PropagatedTrajectory>,
    phase: ControlPhase,
    abort_first: bool,
}

struct TickResponse {
    input: VehicleInput,
    prediction: PropagatedTrajectory,
    info: StepInfo,
    lap_completed: Option<usize>,
}

enum WorkerMsg {
    Tick(Box<TickRequest>),
    Stop,
}

fn worker_loop(
    mut pipeline: AgentPipeline,
    rx: mpsc::Receiver<WorkerMsg>,
    tx: mpsc::Sender<TickResponse>,
) -> AgentPipeline {
    while let Ok(msg) = rx.recv() {
        match msg {
            WorkerMsg::Stop => break,
            WorkerMsg::Tick(req) => {
                if req.abort_first {
                    pipeline.abort_lap();
                }
                let mut x = req.x;
                let lap_completed = match pipeline.observe(&mut x) {
                    LapEvent::Completed { steps } => Some(steps),
                    _ => None,
                };
                let (input, info) = pipeline.step(&x, req.opp.as_ref(), req.phase);
                let prediction = pipeline.prediction();
                let _ = tx.send(TickResponse {
                    input,
                    prediction,
                    info,
                    lap_completed,
                });
            }
        }
    }
    pipeline
}

/// Run the multi-agent race: one path-following warm-up lap per agent, then
/// the configured number of obstacle-aware learning laps. Completed laps keep
/// joining each agent's own safe set.
pub fn run_race(
    pipelines: [AgentPipeline; 2],
    pp: [PacejkaParams; 2],
    setup: &RaceSetup,
    sim: &SimConfig,
) -> (RaceLog, [AgentPipeline; 2]) {
    let track = pipelines[0].track.clone();
    let s_f = track.total_length();
    let substeps = sim.substeps();
    let envelope = track.envelope();
    let vps = [pipelines[0].vp, pipelines[1].vp];
    let (r_s, r_ey) = (pipelines[0].race_cfg.r_s, pipelines[0].race_cfg.r_ey);
    let v_ref = pipelines[0].ctrl.v_ref;

    let mut plants = [
        VehicleState {
            s: setup.start_s[0],
            e_y: setup.start_e_y[0],
            e_psi: 0.0,
            r: 0.0,
            v_x: 0.0,
            v_y: 0.0,
        },
        VehicleState {
            s: setup.start_s[1],
            e_y: setup.start_e_y[1],
            e_psi: 0.0,
            r: 0.0,
            v_x: 0.0,
            v_y: 0.0,
        },
    ];

    let mut summary = RaceSummary {
        seed: sim.seed,
        race_laps: sim.n_race,
        lap_steps: [Vec::new(), Vec::new()],
        overtakes: Vec::new(),
        collisions: Vec::new(),
        min_ellipse: f64::INFINITY,
        aborts: [0, 0],
        ticks: 0,
    };
    let mut traces: Vec<TraceRow> = Vec::new();
    let mut step_infos: Vec<(usize, usize, StepInfo)> = Vec::new();

    let mut predictions: [Option<PropagatedTrajectory>; 2] = [None, None];
    let mut laps_done = [0usize, 0usize];
    let mut abort_flags = [false, false];
    let mut steps_this_lap = [0usize, 0usize];
    // Cumulative progress for overtake detection.
    let progress = |lap: usize, s: f64| lap as f64 * s_f + s.clamp(0.0, s_f * 1.5);
    let mut last_sign: Option<bool> = None;
    let max_ticks = (sim.n_race + 4) * sim.max_steps_per_lap * 2;

    let [pipe_a, pipe_b] = pipelines;
    let (req_tx_a, req_rx_a) = mpsc::channel::<WorkerMsg>();
    let (req_tx_b, req_rx_b) = mpsc::channel::<WorkerMsg>();
    let (res_tx_a, res_rx_a) = mpsc::channel::<TickResponse>();
    let (res_tx_b, res_rx_b) = mpsc::channel::<TickResponse>();

    let (log, pipes) = std::thread::scope(|scope| {
        let handle_a = scope.spawn(move || worker_loop(pipe_a, req_rx_a, res_tx_a));
        let handle_b = scope.spawn(move || worker_loop(pipe_b, req_rx_b, res_tx_b));
        let req_tx = [req_tx_a, req_tx_b];

        for tick in 0..max_ticks {
            summary.ticks = tick + 1;
            // Dispatch both agents with the opponent snapshots from the
            // previous tick, then collect in fixed order.
            for i in 0..2 {
                let phase = if laps_done[i] == 0 {
                    ControlPhase::PathFollow
                } else {
                    ControlPhase::Race
                };
                let req = TickRequest {
                    x: plants[i],
                    opp: predictions[1 - i].clone(),
                    phase,
                    abort_first: abort_flags[i],
                };
                abort_flags[i] = false;
                let _ = req_tx[i].send(WorkerMsg::Tick(Box::new(req)));
            }
            let responses = [res_rx_a.recv().unwrap(), res_rx_b.recv().unwrap()];

            let mut inputs = [VehicleInput::ZERO; 2];
            for (i, resp) in responses.iter().enumerate() {
                if let Some(steps) = resp.lap_completed {
                    plants[i].s -= s_f;
                    laps_done[i] += 1;
                    steps_this_lap[i] = 0;
                    summary.lap_steps[i].push(steps);
                }
                inputs[i] = resp.input;
                predictions[i] = Some(resp.prediction.clone());
                step_infos.push((tick, i, resp.info.clone()));
                traces.push(TraceRow {
                    tick,
                    agent: i,
                    s: plants[i].s,
                    e_y: plants[i].e_y,
                    e_psi: plants[i].e_psi,
                    r: plants[i].r,
                    v_x: plants[i].v_x,
                    v_y: plants[i].v_y,
                    a: resp.input.a,
                    delta_f: resp.input.delta_f,
                });
            }

            // Plant propagation under zero-order-hold inputs.
            let mut plant_failed = [false, false];
            for _ in 0..substeps {
                for i in 0..2 {
                    match plant_step(&plants[i], &inputs[i], sim.t_sim, &vps[i], &pp[i], &track) {
                        Ok(next) => plants[i] = next,
                        Err(_) => plant_failed[i] = true,
                    }
                }
            }
            for i in 0..2 {
                steps_this_lap[i] += 1;
            }

            // Collision and proximity monitoring.
            let ds = wrap_half(plants[1].s - plants[0].s, s_f);
            let ellipse = crate::controllers::ellipse_value(
                ds,
                plants[1].e_y - plants[0].e_y,
                r_s,
                r_ey,
            );
            let mut collided = false;
            if ellipse < COLLISION_THRESHOLD {
                summary.collisions.push(CollisionEvent { tick, ellipse });
                collided = true;
            } else {
                summary.min_ellipse = summary.min_ellipse.min(ellipse);
            }

            // Overtake detection by cumulative progress.
            let p0 = progress(laps_done[0], plants[0].s);
            let p1 = progress(laps_done[1], plants[1].s);
            let sign = p0 > p1;
            if let Some(prev_sign) = last_sign {
                if sign != prev_sign {
                    let overtaker = if sign { 0 } else { 1 };
                    let other = 1 - overtaker;
                    let side = if plants[overtaker].e_y < plants[other].e_y {
                        'L'
                    } else {
                        'R'
                    };
                    summary.overtakes.push(OvertakeEvent {
                        tick,
                        overtaker,
                        side,
                        lap_overtaker: laps_done[overtaker],
                        lap_other: laps_done[other],
                    });
                }
            }
            last_sign = Some(sign);

            // Aborts: out of envelope, stuck laps, plant failure, collision.
            for i in 0..2 {
                let stuck = steps_this_lap[i] > sim.max_steps_per_lap;
                if plants[i].e_y.abs() > envelope || stuck || plant_failed[i] {
                    summary.aborts[i] += 1;
                    abort_flags[i] = true;
                    plants[i] = VehicleState {
                        s: track.wrap_s(plants[i].s),
                        e_y: 0.0,
                        e_psi: 0.0,
                        r: 0.0,
                        v_x: v_ref / 2.0,
                        v_y: 0.0,
                    };
                    steps_this_lap[i] = 0;
                }
            }
            if collided {
                // Penalty reset for the trailing agent.
                let trailing = if p0 <= p1 { 0 } else { 1 };
                let leader = 1 - trailing;
                summary.aborts[trailing] += 1;
                abort_flags[trailing] = true;
                let new_s = track.wrap_s(plants[leader].s - 2.0);
                plants[trailing] = VehicleState {
                    s: new_s,
                    e_y: 0.0,
                    e_psi: 0.0,
                    r: 0.0,
                    v_x: v_ref / 2.0,
                    v_y: 0.0,
                };
                steps_this_lap[trailing] = 0;
                last_sign = None;
            }

            if laps_done[0] > sim.n_race && laps_done[1] > sim.n_race {
                break;
            }
        }

        let _ = req_tx[0].send(WorkerMsg::Stop);
        let _ = req_tx[1].send(WorkerMsg::Stop);
        let pipe_a = handle_a.join().expect("agent worker panicked");
        let pipe_b = handle_b.join().expect("agent worker panicked");
        (
            RaceLog {
                summary,
                traces,
                step_infos,
            },
            [pipe_a, pipe_b],
        )
    });

    (log, pipes)
}
