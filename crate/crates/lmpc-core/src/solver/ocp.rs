//! Real-time-iteration SQP over the operator-splitting QP solver.
//!
//! Each control step runs a fixed small number of QP solves. The dynamics are
//! linearized around the shifted previous solution (or a constant-input
//! rollout on cold start), barrier terms are expanded to second order with
//! their curvature clamped positive semidefinite, the QP step is clipped to a
//! trust region, and the iterate is re-rolled through the nonlinear model so
//! every candidate is dynamically consistent. The returned iterate is the
//! candidate with the smallest true nonlinear objective, which keeps the
//! accepted solution at least as good as the shifted incumbent.

use crate::controllers::{
    CostBreakdown, OcpProblem, OcpSolution, ProblemKind, RaceTerms,
};
use crate::models::{
    identified_step_jacobian, kinematic_step_jacobian, kinematic_step_kappa, KinematicState,
    VehicleInput, VehicleState,
};
use crate::solver::qp::{solve_qp_warm, QpInstance, QpSettings, QpStatus};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("no usable iterate: {reason}")]
pub struct SolverFailure {
    pub reason: String,
}

#[derive(Debug, Clone, Copy)]
pub struct SqpConfig {
    /// Inner QP solves per control step.
    pub iterations: usize,
    /// Trust region on the acceleration step, m/s^2.
    pub trust_a: f64,
    /// Trust region on the steering step, rad.
    pub trust_delta: f64,
    pub qp: QpSettings,
}

impl Default for SqpConfig {
    fn default() -> Self {
        SqpConfig {
            iterations: 2,
            trust_a: 1.0,
            trust_delta: 0.2,
            qp: QpSettings::control_loop(),
        }
    }
}

/// Penalty charged when a rollout lands inside the barrier domain; large but
/// finite so candidate comparison stays total.
const BARRIER_DOMAIN_PENALTY: f64 = 1e9;
const HESSIAN_REG: f64 = 1e-8;
/// Strong-convexity floor on the terminal weights. Adjacent candidate costs
/// differ by one unit, so the induced argmin distortion is negligible.
const LAMBDA_REG: f64 = 1e-2;

struct Candidate {
    inputs: Vec<VehicleInput>,
    /// Rolled-out states in the problem's native dimension.
    states: Vec<Vec<f64>>,
    /// `(source, state, cost, weight)` of the terminal combination.
    lambda: Vec<((usize, i64), [f64; 6], f64, f64)>,
    objective: f64,
    breakdown: CostBreakdown,
    from_incumbent: bool,
}

/// Solve one optimal-control instance.
pub fn solve_ocp(problem: &OcpProblem, cfg: &SqpConfig) -> Result<OcpSolution, SolverFailure> {
    let n = problem.cfg.n;
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut qp_iterations = 0usize;
    let mut sqp_done = 0usize;

    // The shifted previous solution competes on true cost.
    if problem.has_incumbent {
        let lam = resolve_warm_lambda(problem);
        let cand = make_candidate(problem, problem.ref_inputs.clone(), lam, true);
        candidates.push(cand);
    }

    let mut ref_inputs = problem.ref_inputs.clone();
    let mut ref_states = problem.ref_states.clone();

    for _ in 0..cfg.iterations {
        let qp = assemble_qp(problem, &ref_states, &ref_inputs);
        let warm = warm_start_vector(problem, &qp, &ref_states, &ref_inputs);
        let sol = solve_qp_warm(&qp.instance, &cfg.qp, Some((&warm, &DVector::zeros(qp.instance.a_eq.nrows() + qp.instance.g_in.nrows()))));
        qp_iterations += sol.iterations;
        if sol.status == QpStatus::Infeasible {
            break;
        }
        // Extract and clip the input step.
        let mut inputs = Vec::with_capacity(n);
        for k in 0..n {
            let a_raw = sol.z[qp.u_off + 2 * k];
            let d_raw = sol.z[qp.u_off + 2 * k + 1];
            let a_ref = ref_inputs[k].a;
            let d_ref = ref_inputs[k].delta_f;
            let a = a_raw
                .clamp(a_ref - cfg.trust_a, a_ref + cfg.trust_a)
                .clamp(problem.cfg.a_min, problem.cfg.a_max);
            let d = d_raw
                .clamp(d_ref - cfg.trust_delta, d_ref + cfg.trust_delta)
                .clamp(problem.cfg.delta_min, problem.cfg.delta_max);
            inputs.push(VehicleInput { a, delta_f: d });
        }
        // Extract the terminal weights.
        let lambda = match &problem.kind {
            ProblemKind::Lmpc { terminal, .. } => {
                let mut lam: Vec<((usize, i64), [f64; 6], f64, f64)> = Vec::new();
                let mut total = 0.0;
                for (i, pt) in terminal.points.iter().enumerate() {
                    let w = sol.z[qp.lambda_off + i].max(0.0);
                    if w > 1e-12 {
                        lam.push((pt.source, pt.state.to_array(), pt.cost, w));
                        total += w;
                    }
                }
                if total > 1e-9 {
                    for entry in &mut lam {
                        entry.3 /= total;
                    }
                    lam
                } else {
                    min_cost_lambda(problem)
                }
            }
            ProblemKind::PathFollowing { .. } => Vec::new(),
        };
        let cand = make_candidate(problem, inputs, lambda, false);
        ref_inputs = cand.inputs.clone();
        ref_states = cand.states.clone();
        candidates.push(cand);
        sqp_done += 1;
    }

    let best = candidates
        .into_iter()
        .filter(|c| c.objective.is_finite())
        .min_by(|a, b| {
            a.objective
                .partial_cmp(&b.objective)
                .unwrap_or(std::cmp::Ordering::Equal)
                // QP iterates win exact ties so progress is preferred.
                .then_with(|| a.from_incumbent.cmp(&b.from_incumbent))
        })
        .ok_or_else(|| SolverFailure {
            reason: "every QP failed and no incumbent was available".to_string(),
        })?;

    Ok(finish_solution(problem, best, qp_iterations, sqp_done))
}

fn min_cost_lambda(problem: &OcpProblem) -> Vec<((usize, i64), [f64; 6], f64, f64)> {
    match &problem.kind {
        ProblemKind::Lmpc { terminal, .. } => {
            let best = terminal
                .points
                .iter()
                .min_by(|a, b| a.cost.partial_cmp(&b.cost).unwrap_or(std::cmp::Ordering::Equal));
            match best {
                Some(pt) => vec![(pt.source, pt.state.to_array(), pt.cost, 1.0)],
                None => Vec::new(),
            }
        }
        _ => Vec::new(),
    }
}

/// Resolve the shifted previous terminal weights against the current problem.
fn resolve_warm_lambda(problem: &OcpProblem) -> Vec<((usize, i64), [f64; 6], f64, f64)> {
    match &problem.kind {
        ProblemKind::Lmpc { terminal, .. } => {
            let mut out = Vec::new();
            let mut total = 0.0;
            for (source, w) in &problem.warm_lambda {
                // Match by provenance in the current set; points that left the
                // window are dropped and the weights renormalized.
                if let Some(pt) = terminal.points.iter().find(|p| p.source == *source) {
                    out.push((pt.source, pt.state.to_array(), pt.cost, *w));
                    total += *w;
                }
            }
            if out.is_empty() || total < 0.2 {
                return min_cost_lambda(problem);
            }
            for entry in &mut out {
                entry.3 /= total;
            }
            out
        }
        ProblemKind::PathFollowing { .. } => Vec::new(),
    }
}

fn rollout(problem: &OcpProblem, inputs: &[VehicleInput]) -> Vec<Vec<f64>> {
    match &problem.kind {
        ProblemKind::PathFollowing { x0, .. } => {
            let mut states = Vec::with_capacity(inputs.len() + 1);
            states.push(x0.to_array().to_vec());
            let mut x = *x0;
            for (k, u) in inputs.iter().enumerate() {
                x = kinematic_step_kappa(&x, u, problem.kappa[k], problem.cfg.t, &problem.vp)
                    .unwrap_or(x);
                states.push(x.to_array().to_vec());
            }
            states
        }
        ProblemKind::Lmpc { x0, model, .. } => {
            crate::controllers::rollout_identified(x0, inputs, &problem.kappa, problem.cfg.t, model)
                .iter()
                .map(|s| s.to_array().to_vec())
                .collect()
        }
    }
}

fn make_candidate(
    problem: &OcpProblem,
    inputs: Vec<VehicleInput>,
    lambda: Vec<((usize, i64), [f64; 6], f64, f64)>,
    from_incumbent: bool,
) -> Candidate {
    let mut clipped = inputs;
    for u in &mut clipped {
        u.a = u.a.clamp(problem.cfg.a_min, problem.cfg.a_max);
        u.delta_f = u.delta_f.clamp(problem.cfg.delta_min, problem.cfg.delta_max);
    }
    let states = rollout(problem, &clipped);
    let (objective, breakdown) = true_objective(problem, &states, &clipped, &lambda);
    Candidate {
        inputs: clipped,
        states,
        lambda,
        objective,
        breakdown,
        from_incumbent,
    }
}

/// Evaluate the exact nonlinear objective of a candidate.
fn true_objective(
    problem: &OcpProblem,
    states: &[Vec<f64>],
    inputs: &[VehicleInput],
    lambda: &[((usize, i64), [f64; 6], f64, f64)],
) -> (f64, CostBreakdown) {
    let cfg = &problem.cfg;
    let n = cfg.n;
    let mut bd = CostBreakdown::default();

    // Input magnitude and rate terms.
    for (k, u) in inputs.iter().enumerate() {
        bd.smoothness += cfg.w_u[0] * u.a * u.a + cfg.w_u[1] * u.delta_f * u.delta_f;
        if k >= 1 {
            let da = u.a - inputs[k - 1].a;
            let dd = u.delta_f - inputs[k - 1].delta_f;
            bd.smoothness += cfg.w_du[0] * da * da + cfg.w_du[1] * dd * dd;
        }
    }

    match &problem.kind {
        ProblemKind::PathFollowing { v_ref, e_y_ref, .. } => {
            for st in states.iter() {
                let e_y = st[1];
                let v = st[3];
                bd.tracking += cfg.w_v * (v - v_ref).powi(2) + cfg.w_ey * (e_y - e_y_ref).powi(2);
            }
            for (k, u) in inputs.iter().enumerate() {
                bd.tracking += cfg.w_a * u.a * u.a + cfg.w_df * u.delta_f * u.delta_f;
                if k >= 1 {
                    let dd = u.delta_f - inputs[k - 1].delta_f;
                    bd.tracking += cfg.w_ddf * dd * dd;
                }
            }
            // Lateral soft box.
            for st in states.iter().skip(1) {
                bd.slack += slack_penalty(st[1], problem.track_width / 2.0, cfg.u_slack, cfg.v_slack);
            }
        }
        ProblemKind::Lmpc { race, .. } => {
            // State magnitude and rate terms.
            for k in 1..=n {
                for j in 0..6 {
                    bd.smoothness += cfg.w_x[j] * states[k][j] * states[k][j];
                    let d = states[k][j] - states[k - 1][j];
                    bd.smoothness += cfg.w_dx[j] * d * d;
                }
            }
            // Lateral soft box.
            for st in states.iter().skip(1) {
                bd.slack += slack_penalty(st[1], problem.track_width / 2.0, cfg.u_slack, cfg.v_slack);
            }
            // Terminal convex combination: weight cost plus residual penalty.
            let mut combo = [0.0; 6];
            for (_, st, cost, w) in lambda {
                bd.terminal += cost * w;
                for j in 0..6 {
                    combo[j] += st[j] * w;
                }
            }
            let u_term = cfg.u_slack * cfg.terminal_slack_scale;
            let v_term = cfg.v_slack * cfg.terminal_slack_scale;
            for j in 0..6 {
                let r = combo[j] - states[n][j];
                bd.slack += u_term * r.abs() + v_term * r * r;
            }
            if let Some(rt) = race {
                for k in 0..=n {
                    let (s_o, e_o) = rt.obs[k];
                    let q = crate::controllers::ellipse_value(
                        states[k][0] - s_o,
                        states[k][1] - e_o,
                        rt.r_s,
                        rt.r_ey,
                    );
                    if q <= 1.0 + 1e-9 {
                        bd.barrier += BARRIER_DOMAIN_PENALTY * (2.0 - q).max(1.0);
                    } else {
                        bd.barrier += -rt.w_obs * (rt.w_safe * (q - 1.0)).ln();
                    }
                    bd.distance += -rt.w_d * (states[k][0] - s_o);
                }
                if let Some(cap) = rt.v_cap {
                    for st in states.iter().skip(1) {
                        let viol = (st[4] - cap).max(0.0);
                        bd.slack += cfg.u_slack * viol + cfg.v_slack * viol * viol;
                    }
                }
            }
        }
    }
    bd.total = bd.smoothness + bd.tracking + bd.slack + bd.terminal + bd.barrier + bd.distance;
    (bd.total, bd)
}

fn slack_penalty(e_y: f64, half_width: f64, u_w: f64, v_w: f64) -> f64 {
    let upper = (e_y - half_width).max(0.0);
    let lower = (-e_y - half_width).max(0.0);
    u_w * (upper + lower) + v_w * (upper * upper + lower * lower)
}

struct AssembledQp {
    instance: QpInstance,
    u_off: usize,
    lambda_off: usize,
}

/// Condensed quadratic approximation around the reference trajectory: the
/// predicted states are eliminated through the linearized dynamics
/// `x_k = phi_k + gamma_k u`, leaving the inputs, the terminal weights and
/// the slack variables as decision variables. The condensed form keeps the
/// QP small and well conditioned for the operator-splitting solver.
fn assemble_qp(
    problem: &OcpProblem,
    ref_states: &[Vec<f64>],
    ref_inputs: &[VehicleInput],
) -> AssembledQp {
    match &problem.kind {
        ProblemKind::PathFollowing { x0, v_ref, e_y_ref } => {
            let lin = linearize_pf(problem, ref_states, ref_inputs, x0);
            assemble_condensed(problem, &lin, None, Some((*v_ref, *e_y_ref)))
        }
        ProblemKind::Lmpc {
            x0,
            terminal,
            model,
            race,
        } => {
            let lin = linearize_lmpc(problem, ref_states, ref_inputs, x0, model);
            assemble_condensed(problem, &lin, Some((terminal, race.as_ref())), None)
        }
    }
}

/// Prediction matrices of the linearized dynamics: `x_k = phi[k] + gamma[k] u`
/// with `u` stacked over the horizon.
struct Condensation {
    nx: usize,
    /// `n + 1` entries, each of length `nx`.
    phi: Vec<DVector<f64>>,
    /// `n + 1` entries, each `nx x 2n`.
    gamma: Vec<DMatrix<f64>>,
}

fn condense(
    n: usize,
    nx: usize,
    x0: &[f64],
    aks: &[Vec<Vec<f64>>],
    bks: &[Vec<Vec<f64>>],
    nexts: &[Vec<f64>],
    ref_states: &[Vec<f64>],
    ref_inputs: &[VehicleInput],
) -> Condensation {
    let nu = 2 * n;
    let mut phi: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
    let mut gamma: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    phi.push(DVector::from_column_slice(x0));
    gamma.push(DMatrix::zeros(nx, nu));
    for k in 0..n {
        let ak = &aks[k];
        let bk = &bks[k];
        // affine part: c_k = f(xr, ur) - A xr - B ur
        let mut c = DVector::zeros(nx);
        for row in 0..nx {
            let mut v = nexts[k][row]
                - bk[row][0] * ref_inputs[k].a
                - bk[row][1] * ref_inputs[k].delta_f;
            for col in 0..nx {
                v -= ak[row][col] * ref_states[k][col];
            }
            c[row] = v;
        }
        let mut phi_next = c;
        let mut gamma_next = DMatrix::zeros(nx, nu);
        for row in 0..nx {
            for col in 0..nx {
                phi_next[row] += ak[row][col] * phi[k][col];
            }
        }
        // gamma_{k+1} = A gamma_k  (dense small product)
        for row in 0..nx {
            for col in 0..nu {
                let mut acc = 0.0;
                for mid in 0..nx {
                    acc += ak[row][mid] * gamma[k][(mid, col)];
                }
                gamma_next[(row, col)] = acc;
            }
        }
        for row in 0..nx {
            gamma_next[(row, 2 * k)] += bk[row][0];
            gamma_next[(row, 2 * k + 1)] += bk[row][1];
        }
        phi.push(phi_next);
        gamma.push(gamma_next);
    }
    Condensation { nx, phi, gamma }
}

fn linearize_pf(
    problem: &OcpProblem,
    ref_states: &[Vec<f64>],
    ref_inputs: &[VehicleInput],
    x0: &KinematicState,
) -> Condensation {
    let n = problem.cfg.n;
    let nx = 4;
    let mut aks = Vec::with_capacity(n);
    let mut bks = Vec::with_capacity(n);
    let mut nexts = Vec::with_capacity(n);
    for k in 0..n {
        let xr = KinematicState {
            s: ref_states[k][0],
            e_y: ref_states[k][1],
            e_psi: ref_states[k][2],
            v: ref_states[k][3],
        };
        let (ak, bk) =
            kinematic_step_jacobian(&xr, &ref_inputs[k], problem.kappa[k], problem.cfg.t, &problem.vp);
        let next = kinematic_step_kappa(&xr, &ref_inputs[k], problem.kappa[k], problem.cfg.t, &problem.vp)
            .map(|s| s.to_array().to_vec())
            .unwrap_or_else(|_| ref_states[k].clone());
        aks.push(ak.iter().map(|r| r.to_vec()).collect());
        bks.push(bk.iter().map(|r| r.to_vec()).collect());
        nexts.push(next);
    }
    condense(n, nx, &x0.to_array(), &aks, &bks, &nexts, ref_states, ref_inputs)
}

fn linearize_lmpc(
    problem: &OcpProblem,
    ref_states: &[Vec<f64>],
    ref_inputs: &[VehicleInput],
    x0: &VehicleState,
    model: &crate::sysid::RegressionModel,
) -> Condensation {
    let n = problem.cfg.n;
    let nx = 6;
    let mut aks = Vec::with_capacity(n);
    let mut bks = Vec::with_capacity(n);
    let mut nexts = Vec::with_capacity(n);
    for k in 0..n {
        let mut xr = VehicleState::from_array([
            ref_states[k][0],
            ref_states[k][1],
            ref_states[k][2],
            ref_states[k][3],
            ref_states[k][4],
            ref_states[k][5],
        ]);
        if xr.v_x.abs() < crate::models::V_FLOOR {
            xr.v_x = crate::models::V_FLOOR;
        }
        let (ak, bk) =
            identified_step_jacobian(&xr, &ref_inputs[k], problem.kappa[k], problem.cfg.t, model);
        let next = crate::models::identified_step_kappa(
            &xr,
            &ref_inputs[k],
            problem.kappa[k],
            problem.cfg.t,
            model,
        )
        .map(|s| s.to_array().to_vec())
        .unwrap_or_else(|_| ref_states[k].clone());
        aks.push(ak.iter().map(|r| r.to_vec()).collect());
        bks.push(bk.iter().map(|r| r.to_vec()).collect());
        nexts.push(next);
    }
    condense(n, nx, &x0.to_array(), &aks, &bks, &nexts, ref_states, ref_inputs)
}

type TerminalCtx<'a> = (&'a crate::safeset::LocalSafeSet, Option<&'a RaceTerms>);

/// Assemble the condensed QP. `terminal` is present for the learning
/// problems, `tracking` for the path-following problem.
fn assemble_condensed(
    problem: &OcpProblem,
    lin: &Condensation,
    terminal: Option<TerminalCtx<'_>>,
    tracking: Option<(f64, f64)>,
) -> AssembledQp {
    let cfg = &problem.cfg;
    let n = cfg.n;
    let nu = 2 * n;
    let nx = lin.nx;
    let n_lambda = terminal.map(|(t, _)| t.points.len()).unwrap_or(0);
    let race = terminal.and_then(|(_, r)| r);
    let has_cap = race.and_then(|r| r.v_cap).is_some();

    let u_off = 0;
    let lambda_off = nu;
    let lat_p_off = lambda_off + n_lambda;
    let lat_m_off = lat_p_off + n;
    let term_p_off = lat_m_off + n;
    let term_m_off = term_p_off + if n_lambda > 0 { nx } else { 0 };
    let cap_off = term_m_off + if n_lambda > 0 { nx } else { 0 };
    let n_z = cap_off + if has_cap { n } else { 0 };

    let mut h = DMatrix::zeros(n_z, n_z);
    let mut q = DVector::zeros(n_z);
    for i in 0..n_z {
        h[(i, i)] = HESSIAN_REG;
    }

    // Generic helper: add weight * (g' z + offset)^2 over the condensed
    // variables, where g is a sparse row over z.
    let mut add_quad = |h: &mut DMatrix<f64>, q: &mut DVector<f64>, g: &[(usize, f64)], offset: f64, weight: f64| {
        for &(i, gi) in g {
            q[i] += 2.0 * weight * gi * offset;
            for &(j, gj) in g {
                h[(i, j)] += 2.0 * weight * gi * gj;
            }
        }
    };

    // Input magnitude and rate costs directly on u.
    for k in 0..n {
        for j in 0..2 {
            let idx = u_off + 2 * k + j;
            let w_mag = if tracking.is_some() {
                if j == 0 {
                    cfg.w_a
                } else {
                    cfg.w_df
                }
            } else {
                cfg.w_u[j]
            };
            h[(idx, idx)] += 2.0 * w_mag;
            let w_rate = if tracking.is_some() {
                if j == 0 {
                    0.0
                } else {
                    cfg.w_ddf
                }
            } else {
                cfg.w_du[j]
            };
            if k >= 1 && w_rate > 0.0 {
                let prev = u_off + 2 * (k - 1) + j;
                h[(idx, idx)] += 2.0 * w_rate;
                h[(prev, prev)] += 2.0 * w_rate;
                h[(idx, prev)] += -2.0 * w_rate;
                h[(prev, idx)] += -2.0 * w_rate;
            }
        }
    }

    // Stage costs through the prediction matrices. A state component
    // x_k[j] = phi_k[j] + gamma_k[j, :] u contributes rows over u only.
    let state_row = |k: usize, j: usize| -> (Vec<(usize, f64)>, f64) {
        let mut g: Vec<(usize, f64)> = Vec::new();
        for col in 0..nu {
            let v = lin.gamma[k][(j, col)];
            if v != 0.0 {
                g.push((u_off + col, v));
            }
        }
        (g, lin.phi[k][j])
    };
    let diff_row = |k: usize, j: usize| -> (Vec<(usize, f64)>, f64) {
        // x_k[j] - x_{k-1}[j]
        let mut g: Vec<(usize, f64)> = Vec::new();
        for col in 0..nu {
            let v = lin.gamma[k][(j, col)] - lin.gamma[k - 1][(j, col)];
            if v != 0.0 {
                g.push((u_off + col, v));
            }
        }
        (g, lin.phi[k][j] - lin.phi[k - 1][j])
    };

    if let Some((v_ref, e_y_ref)) = tracking {
        for k in 1..=n {
            let (g, off) = state_row(k, 3);
            add_quad(&mut h, &mut q, &g, off - v_ref, cfg.w_v);
            let (g, off) = state_row(k, 1);
            add_quad(&mut h, &mut q, &g, off - e_y_ref, cfg.w_ey);
        }
    } else {
        for k in 1..=n {
            for j in 0..nx {
                if cfg.w_x[j] > 0.0 {
                    let (g, off) = state_row(k, j);
                    add_quad(&mut h, &mut q, &g, off, cfg.w_x[j]);
                }
                if cfg.w_dx[j] > 0.0 {
                    let (g, off) = diff_row(k, j);
                    add_quad(&mut h, &mut q, &g, off, cfg.w_dx[j]);
                }
            }
        }
    }

    // Terminal cost: linear in lambda, plus a small quadratic term that keeps
    // the simplex block strongly convex for the operator-splitting solver.
    if let Some((set, _)) = terminal {
        for (i, pt) in set.points.iter().enumerate() {
            q[lambda_off + i] += pt.cost;
            h[(lambda_off + i, lambda_off + i)] += LAMBDA_REG;
        }
    }

    // Slack penalties.
    for k in 0..n {
        for off in [lat_p_off + k, lat_m_off + k] {
            q[off] += cfg.u_slack;
            h[(off, off)] += 2.0 * cfg.v_slack;
        }
    }
    if n_lambda > 0 {
        let u_term = cfg.u_slack * cfg.terminal_slack_scale;
        let v_term = cfg.v_slack * cfg.terminal_slack_scale;
        for j in 0..nx {
            for off in [term_p_off + j, term_m_off + j] {
                q[off] += u_term;
                h[(off, off)] += 2.0 * v_term;
            }
        }
    }
    if has_cap {
        for k in 0..n {
            q[cap_off + k] += cfg.u_slack;
            h[(cap_off + k, cap_off + k)] += 2.0 * cfg.v_slack;
        }
    }

    // Barrier expansion and distance gradient on (s_k, e_k).
    if let Some(rt) = race {
        for k in 1..=n {
            let (s_o, e_o) = rt.obs[k];
            let (mut s_ref, mut e_ref) = (lin.phi[k][0], lin.phi[k][1]);
            // Expand around the reference trajectory values, not phi, when
            // they differ (phi equals the reference by construction here).
            let mut qv = crate::controllers::ellipse_value(s_ref - s_o, e_ref - e_o, rt.r_s, rt.r_ey);
            if qv < 1.05 {
                let scale = (1.05f64 / qv.max(1e-9)).sqrt();
                s_ref = s_o + (s_ref - s_o) * scale;
                e_ref = e_o + (e_ref - e_o) * scale;
                qv = 1.05;
            }
            let gq = [
                2.0 * (s_ref - s_o) / (rt.r_s * rt.r_s),
                2.0 * (e_ref - e_o) / (rt.r_ey * rt.r_ey),
            ];
            let hq = [2.0 / (rt.r_s * rt.r_s), 2.0 / (rt.r_ey * rt.r_ey)];
            let denom = qv - 1.0;
            let grad = [-rt.w_obs * gq[0] / denom, -rt.w_obs * gq[1] / denom];
            let mut hb = [
                [
                    rt.w_obs * (gq[0] * gq[0] / (denom * denom) - hq[0] / denom),
                    rt.w_obs * (gq[0] * gq[1]) / (denom * denom),
                ],
                [
                    rt.w_obs * (gq[1] * gq[0]) / (denom * denom),
                    rt.w_obs * (gq[1] * gq[1] / (denom * denom) - hq[1] / denom),
                ],
            ];
            let tr = hb[0][0] + hb[1][1];
            let det = hb[0][0] * hb[1][1] - hb[0][1] * hb[1][0];
            let lam_min = tr / 2.0 - ((tr * tr / 4.0 - det).max(0.0)).sqrt();
            if lam_min < 0.0 {
                hb[0][0] += -lam_min + 1e-12;
                hb[1][1] += -lam_min + 1e-12;
            }
            // delta_s = (phi_s - s_ref) + gamma_s u, delta_e likewise.
            let (gs, off_s) = state_row(k, 0);
            let (ge, off_e) = state_row(k, 1);
            let ds0 = off_s - s_ref;
            let de0 = off_e - e_ref;
            // 0.5 [ds de] Hb [ds de]' + grad . [ds de]
            add_quad(&mut h, &mut q, &gs, ds0, 0.5 * hb[0][0]);
            add_quad(&mut h, &mut q, &ge, de0, 0.5 * hb[1][1]);
            // cross term hb01 * ds * de expands over both rows
            for &(i, gi) in &gs {
                q[i] += hb[0][1] * gi * de0;
                for &(j, gj) in &ge {
                    h[(i, j)] += hb[0][1] * gi * gj;
                }
            }
            for &(i, gi) in &ge {
                q[i] += hb[0][1] * gi * ds0;
            }
            // linear barrier gradient and distance reward
            for &(i, gi) in &gs {
                q[i] += grad[0] * gi - rt.w_d * gi;
            }
            for &(i, gi) in &ge {
                q[i] += grad[1] * gi;
            }
        }
    }

    // Equalities: terminal convex combination and simplex normalization.
    let p_eq = if n_lambda > 0 { nx + 1 } else { 0 };
    let mut a_eq = DMatrix::zeros(p_eq, n_z);
    let mut b_eq = DVector::zeros(p_eq);
    if let Some((set, _)) = terminal {
        for j in 0..nx {
            for (i, pt) in set.points.iter().enumerate() {
                a_eq[(j, lambda_off + i)] = pt.state.to_array()[j];
            }
            let (gs, off) = state_row(n, j);
            for &(col, v) in &gs {
                a_eq[(j, col)] = -v;
            }
            a_eq[(j, term_p_off + j)] = -1.0;
            a_eq[(j, term_m_off + j)] = 1.0;
            b_eq[j] = off;
        }
        for i in 0..n_lambda {
            a_eq[(nx, lambda_off + i)] = 1.0;
        }
        b_eq[nx] = 1.0;
    }

    // Inequalities.
    let mut m_in = 4 * n + n_lambda + 2 * n + 2 * n;
    if n_lambda > 0 {
        m_in += 2 * nx;
    }
    if has_cap {
        m_in += 2 * n;
    }
    let mut g_in = DMatrix::zeros(m_in, n_z);
    let mut w_in = DVector::zeros(m_in);
    let mut row = 0;
    for k in 0..n {
        g_in[(row, u_off + 2 * k)] = 1.0;
        w_in[row] = cfg.a_max;
        row += 1;
        g_in[(row, u_off + 2 * k)] = -1.0;
        w_in[row] = -cfg.a_min;
        row += 1;
        g_in[(row, u_off + 2 * k + 1)] = 1.0;
        w_in[row] = cfg.delta_max;
        row += 1;
        g_in[(row, u_off + 2 * k + 1)] = -1.0;
        w_in[row] = -cfg.delta_min;
        row += 1;
    }
    for i in 0..n_lambda {
        g_in[(row, lambda_off + i)] = -1.0;
        row += 1;
    }
    for k in 0..n {
        g_in[(row, lat_p_off + k)] = -1.0;
        row += 1;
        g_in[(row, lat_m_off + k)] = -1.0;
        row += 1;
    }
    if n_lambda > 0 {
        for j in 0..nx {
            g_in[(row, term_p_off + j)] = -1.0;
            row += 1;
            g_in[(row, term_m_off + j)] = -1.0;
            row += 1;
        }
    }
    // Soft lateral box through the prediction matrices.
    let half = problem.track_width / 2.0;
    for k in 1..=n {
        let (g, off) = state_row(k, 1);
        for &(col, v) in &g {
            g_in[(row, col)] = v;
            g_in[(row + 1, col)] = -v;
        }
        g_in[(row, lat_p_off + (k - 1))] = -1.0;
        w_in[row] = half - off;
        g_in[(row + 1, lat_m_off + (k - 1))] = -1.0;
        w_in[row + 1] = half + off;
        row += 2;
    }
    if has_cap {
        let cap = race.and_then(|r| r.v_cap).unwrap();
        for k in 1..=n {
            let (g, off) = state_row(k, 4);
            for &(col, v) in &g {
                g_in[(row, col)] = v;
            }
            g_in[(row, cap_off + (k - 1))] = -1.0;
            w_in[row] = cap - off;
            row += 1;
            g_in[(row, cap_off + (k - 1))] = -1.0;
            w_in[row] = 0.0;
            row += 1;
        }
    }
    debug_assert_eq!(row, m_in);

    AssembledQp {
        instance: QpInstance {
            h,
            q,
            a_eq,
            b_eq,
            g_in,
            w_in,
        },
        u_off,
        lambda_off,
    }
}

/// Warm-start vector: the reference inputs plus the shifted terminal weights
/// distributed over the current set.
fn warm_start_vector(
    problem: &OcpProblem,
    qp: &AssembledQp,
    ref_inputs: &[VehicleInput],
) -> DVector<f64> {
    let mut z = DVector::zeros(qp.instance.n());
    for (k, u) in ref_inputs.iter().enumerate() {
        z[qp.u_off + 2 * k] = u.a;
        z[qp.u_off + 2 * k + 1] = u.delta_f;
    }
    if let ProblemKind::Lmpc { terminal, .. } = &problem.kind {
        let lam = resolve_warm_lambda(problem);
        let mut assigned = 0.0;
        for (source, _, _, w) in &lam {
            if let Some(i) = terminal.points.iter().position(|p| p.source == *source) {
                z[qp.lambda_off + i] = *w;
                assigned += *w;
            }
        }
        if assigned < 1e-9 && !terminal.points.is_empty() {
            z[qp.lambda_off] = 1.0;
        }
    }
    z
}


fn finish_solution(
    problem: &OcpProblem,
    best: Candidate,
    qp_iterations: usize,
    sqp_iterations: usize,
) -> OcpSolution {
    let n = problem.cfg.n;
    let states: Vec<VehicleState> = match &problem.kind {
        ProblemKind::PathFollowing { .. } => best
            .states
            .iter()
            .enumerate()
            .map(|(k, st)| {
                let delta = if k < best.inputs.len() {
                    best.inputs[k].delta_f
                } else {
                    best.inputs.last().map(|u| u.delta_f).unwrap_or(0.0)
                };
                crate::controllers::kinematic_to_vehicle(
                    &KinematicState {
                        s: st[0],
                        e_y: st[1],
                        e_psi: st[2],
                        v: st[3],
                    },
                    &problem.vp,
                    delta,
                )
            })
            .collect(),
        ProblemKind::Lmpc { .. } => best
            .states
            .iter()
            .map(|st| VehicleState::from_array([st[0], st[1], st[2], st[3], st[4], st[5]]))
            .collect(),
    };
    let half = problem.track_width / 2.0;
    let lateral_slack = states
        .iter()
        .skip(1)
        .map(|s| (s.e_y.abs() - half).max(0.0))
        .fold(0.0, f64::max);
    let terminal_slack = match &problem.kind {
        ProblemKind::Lmpc { .. } => {
            let mut combo = [0.0; 6];
            for (_, st, _, w) in &best.lambda {
                for j in 0..6 {
                    combo[j] += st[j] * w;
                }
            }
            let xn = states[n].to_array();
            combo
                .iter()
                .zip(xn.iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        }
        _ => 0.0,
    };
    OcpSolution {
        inputs: best.inputs,
        states,
        lambda: best
            .lambda
            .iter()
            .map(|(source, _, _, w)| (*source, *w))
            .collect(),
        cost: best.breakdown,
        lateral_slack,
        terminal_slack,
        qp_iterations,
        sqp_iterations,
        used_incumbent: best.from_incumbent,
    }
}
