// Scratch probe for closed-loop behavior; replaced by the acceptance suite.
use lmpc_core::controllers::{ControllerConfig, RaceConfig};
use lmpc_core::models::{PacejkaParams, VehicleInput, VehicleParams, VehicleState};
use lmpc_core::safeset::SafeSetConfig;
use lmpc_core::sim::{plant_step, AgentPipeline, ControlPhase, LapEvent, SimConfig};
use lmpc_core::solver::SqpConfig;
use lmpc_core::sysid::SysIdConfig;
use lmpc_core::track::oval_track;

fn pipeline() -> AgentPipeline {
    AgentPipeline::new(
        oval_track(),
        VehicleParams::agent_one(),
        ControllerConfig::default(),
        SafeSetConfig::default(),
        SysIdConfig::default(),
        RaceConfig::default(),
        SqpConfig::default(),
    )
}

#[test]
#[ignore]
fn probe_manual_loop() {
    let track = oval_track();
    let pp = PacejkaParams::simulation();
    let sim = SimConfig::default();
    let mut pipe = pipeline();
    pipe.begin_chain();
    let mut x = VehicleState {
        s: 0.0,
        e_y: 0.0,
        e_psi: 0.0,
        r: 0.0,
        v_x: 0.0,
        v_y: 0.0,
    };
    let mut laps = 0usize;
    let mut tick_times = Vec::new();
    for tick in 0..3000 {
        let phase = if laps < 3 {
            ControlPhase::PathFollow
        } else {
            ControlPhase::Lmpc
        };
        let t0 = std::time::Instant::now();
        let (input, info) = pipe.step(&x, None, phase);
        tick_times.push(t0.elapsed().as_secs_f64());
        for _ in 0..sim.substeps() {
            x = plant_step(&x, &input, sim.t_sim, &pipe.vp, &pp, &track).unwrap();
        }
        if let LapEvent::Completed { steps } = pipe.observe(&mut x) {
            laps += 1;
            println!(
                "lap {laps}: {steps} steps, phase {phase:?}, avg tick {:.1} ms",
                tick_times.iter().sum::<f64>() / tick_times.len() as f64 * 1e3
            );
            tick_times.clear();
            if laps >= 8 {
                break;
            }
        }
        if tick % 100 == 0 {
            println!(
                "tick {tick}: s={:.2} ey={:.3} v={:.2} status={} qp_it={} tick_ms={:.1}",
                x.s,
                x.e_y,
                x.v_x,
                info.status,
                info.qp_iterations,
                tick_times.last().unwrap() * 1e3
            );
        }
        let _ = input;
    }
}
