//! Archive of completed laps and selection of the local terminal sets.
//!
//! Every completed lap is stored as an [`IterationRecord`]. Records are
//! extended across the lap boundary: the tail of the predecessor lap is
//! prepended with its arc length shifted down by one track length, and the
//! head of the successor lap is appended shifted up. The extension makes the
//! window extraction, the cost bookkeeping and the nearest-state matching
//! seamless through the start/finish line.
//!
//! Cost-to-go uses the unit stage cost: it decreases by exactly one per step
//! along a record and keeps decreasing into the appended region, so terminal
//! candidates past the finish line are strictly cheaper than candidates on
//! it. The modified cost adds the lap-time handicap of the source lap
//! relative to the best stored lap.

use crate::models::{VehicleInput, VehicleState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SafeSetError {
    #[error("all candidate safe-set states were filtered out")]
    EmptySafeSet,
    #[error("safe-set store is empty")]
    EmptyStore,
}

/// Weights of the nearest-state norm: track position and longitudinal speed
/// dominate the match; heading error, yaw rate and lateral velocity are
/// ignored because their scales are incommensurate.
const MATCH_WEIGHTS: [f64; 6] = [1.0, 1.0, 0.0, 0.0, 1.0, 0.0];

/// One completed lap: states, applied inputs and the boundary extensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    /// `states[0..=steps]`; the final entry is the first state past the line.
    states: Vec<VehicleState>,
    /// `inputs[t]` drove `states[t]` to `states[t + 1]`.
    inputs: Vec<VehicleInput>,
    /// Step count of the lap.
    steps: usize,
    /// Predecessor tail, shifted by `-s_f`; index `-1` is the last element.
    ext_before: Vec<VehicleState>,
    /// Successor head, shifted by `+s_f`; index `steps + 1` is the first.
    ext_after: Vec<VehicleState>,
    /// Chain identifier; extensions only link records of the same chain.
    chain: usize,
}

impl IterationRecord {
    /// Build a record from a completed lap. `states` must hold one more
    /// entry than `inputs` and terminate past the finish line.
    pub fn new(
        states: Vec<VehicleState>,
        inputs: Vec<VehicleInput>,
        s_f: f64,
        chain: usize,
    ) -> Self {
        assert_eq!(states.len(), inputs.len() + 1, "one input per transition");
        assert!(
            states.last().map(|x| x.s > s_f).unwrap_or(false),
            "lap must terminate past the finish line"
        );
        let steps = inputs.len();
        IterationRecord {
            states,
            inputs,
            steps,
            ext_before: Vec::new(),
            ext_after: Vec::new(),
            chain,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn states(&self) -> &[VehicleState] {
        &self.states
    }

    pub fn inputs(&self) -> &[VehicleInput] {
        &self.inputs
    }

    pub fn chain(&self) -> usize {
        self.chain
    }

    /// Valid extended index range, inclusive.
    pub fn extended_range(&self) -> (i64, i64) {
        (
            -(self.ext_before.len() as i64),
            self.steps as i64 + self.ext_after.len() as i64,
        )
    }

    /// State at an extended index.
    pub fn extended_state(&self, t: i64) -> VehicleState {
        if t < 0 {
            let i = self.ext_before.len() as i64 + t;
            self.ext_before[i as usize]
        } else if t as usize <= self.steps {
            self.states[t as usize]
        } else {
            self.ext_after[t as usize - self.steps - 1]
        }
    }

    /// Plain cost-to-go at an extended index; negative past the line.
    pub fn extended_cost_to_go(&self, t: i64) -> i64 {
        self.steps as i64 - t
    }

    /// Nearest-state match under the weighted norm.
    ///
    /// Returns the window anchor `t = m - d` where `m` is the index of the
    /// closest stored state to `x` looked up `d` steps ahead, so the returned
    /// anchor may reach up to `-d` into the prepended extension right after a
    /// lap transition. Ties resolve to the smallest index.
    pub fn nearest_index(&self, x: &VehicleState, d: usize) -> i64 {
        let xa = x.to_array();
        let mut best_m = 0usize;
        let mut best_d2 = f64::INFINITY;
        for (m, state) in self.states.iter().enumerate() {
            let sa = state.to_array();
            let mut d2 = 0.0;
            for i in 0..6 {
                let diff = sa[i] - xa[i];
                d2 += MATCH_WEIGHTS[i] * diff * diff;
            }
            if d2 < best_d2 - 1e-15 {
                best_d2 = d2;
                best_m = m;
            }
        }
        best_m as i64 - d as i64
    }
}

/// Per-agent archive of completed iterations.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SafeSetStore {
    iterations: Vec<IterationRecord>,
    /// Extension lengths applied when linking consecutive laps.
    n_before: usize,
    n_trans: usize,
}

impl SafeSetStore {
    pub fn new(n_before: usize, n_trans: usize) -> Self {
        SafeSetStore {
            iterations: Vec::new(),
            n_before,
            n_trans,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn iteration(&self, idx: usize) -> &IterationRecord {
        &self.iterations[idx]
    }

    pub fn iterations(&self) -> &[IterationRecord] {
        &self.iterations
    }

    pub fn step_counts(&self) -> Vec<usize> {
        self.iterations.iter().map(|r| r.steps).collect()
    }

    pub fn min_steps(&self) -> Option<usize> {
        self.iterations.iter().map(|r| r.steps).min()
    }

    /// Append a completed lap and wire the lap-transition extensions to the
    /// previous record when both belong to the same chain.
    pub fn add_iteration(&mut self, mut record: IterationRecord, s_f: f64) {
        if let Some(prev) = self.iterations.last_mut() {
            if prev.chain == record.chain {
                // Predecessor tail, excluding the shared boundary state.
                let lo = prev.steps.saturating_sub(self.n_before);
                record.ext_before = prev.states[lo..prev.steps]
                    .iter()
                    .map(|x| VehicleState { s: x.s - s_f, ..*x })
                    .collect();
                // Successor head for the previous record, skipping the
                // duplicated boundary state.
                prev.ext_after = record.states[1..record.states.len().min(self.n_trans + 1)]
                    .iter()
                    .map(|x| VehicleState { s: x.s + s_f, ..*x })
                    .collect();
            }
        }
        self.iterations.push(record);
    }

    /// Feed one state of the lap currently being driven into the previous
    /// record's appended extension. Call once per control step while the
    /// ongoing lap continues the same chain.
    pub fn note_ongoing_state(&mut self, state: &VehicleState, s_f: f64) {
        if let Some(prev) = self.iterations.last_mut() {
            if prev.ext_after.len() < self.n_trans {
                prev.ext_after.push(VehicleState {
                    s: state.s + s_f,
                    ..*state
                });
            }
        }
    }

    /// Indices of the `n` iterations with the smallest step counts, ties
    /// resolved toward the more recent iteration.
    pub fn fastest_iterations(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.iterations.len()).collect();
        order.sort_by_key(|&i| (self.iterations[i].steps, std::cmp::Reverse(i)));
        order.truncate(n);
        order
    }
}

/// Plain cost-to-go: remaining steps until the lap record terminates.
pub fn cost_to_go(rec: &IterationRecord, t: usize) -> usize {
    assert!(t <= rec.steps);
    rec.steps - t
}

/// Cost-to-go plus the source lap's handicap against the best stored lap.
pub fn modified_cost_to_go(store: &SafeSetStore, k: usize, t: usize) -> usize {
    let rec = store.iteration(k);
    let best = store.min_steps().unwrap_or(rec.steps);
    cost_to_go(rec, t) + (rec.steps - best)
}

fn modified_cost_extended(store: &SafeSetStore, k: usize, t: i64) -> f64 {
    let rec = store.iteration(k);
    let best = store.min_steps().unwrap_or(rec.steps);
    rec.extended_cost_to_go(t) as f64 + (rec.steps - best) as f64
}

/// One terminal-set candidate with its modified cost and provenance.
#[derive(Debug, Clone, Copy)]
pub struct SafeSetPoint {
    pub state: VehicleState,
    /// Modified cost-to-go; negative only for appended post-finish states.
    pub cost: f64,
    /// `(iteration index, extended time index)`.
    pub source: (usize, i64),
}

/// The state-varying terminal set handed to the controller.
#[derive(Debug, Clone, Default)]
pub struct LocalSafeSet {
    pub points: Vec<SafeSetPoint>,
}

impl LocalSafeSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn min_cost(&self) -> f64 {
        self.points.iter().map(|p| p.cost).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SafeSetConfig {
    /// Laps considered for the terminal set.
    pub n_l: usize,
    /// States taken per lap window.
    pub n_p: usize,
    /// Nearest-state match offset.
    pub d: usize,
    /// Prepended extension length.
    pub n_before: usize,
    /// Appended extension length.
    pub n_trans: usize,
    /// Overtaking corridor factor, in `[1, track_width / body_width]`.
    pub alpha: f64,
    /// Body width of the agent, m.
    pub body_width: f64,
    /// Acceleration bound used by the velocity reachability filter, m/s^2.
    pub a_max: f64,
    /// Controller period, s.
    pub t: f64,
    /// Controller horizon.
    pub n_horizon: usize,
}

impl Default for SafeSetConfig {
    fn default() -> Self {
        SafeSetConfig {
            n_l: 4,
            n_p: 20,
            d: 5,
            n_before: 15,
            n_trans: 15,
            alpha: 4.0,
            body_width: 0.1,
            a_max: 3.0,
            t: 0.1,
            n_horizon: 10,
        }
    }
}

/// Opponent prediction over the horizon, as exchanged between agents.
#[derive(Debug, Clone, Default)]
pub struct PropagatedTrajectory {
    /// `states[i]` is the opponent's predicted state at `t + i`, `N + 1` long.
    pub states: Vec<VehicleState>,
}

impl PropagatedTrajectory {
    pub fn terminal(&self) -> Option<&VehicleState> {
        self.states.last()
    }
}

fn window_points(
    store: &SafeSetStore,
    x: &VehicleState,
    cfg: &SafeSetConfig,
    use_s_filter: bool,
    use_v_filter: bool,
) -> Vec<SafeSetPoint> {
    let mut points = Vec::new();
    for i in store.fastest_iterations(cfg.n_l) {
        let rec = store.iteration(i);
        let gamma = rec.nearest_index(x, cfg.d);
        let (lo, hi) = rec.extended_range();
        let from = gamma.max(lo);
        let to = (gamma + cfg.n_p as i64).min(hi);
        // Reachability gates per iteration: the window anchor must lie within
        // the arc length covered over one horizon, and the stored speed one
        // horizon ahead must be attainable under the acceleration bound.
        if use_s_filter {
            let anchor = rec.extended_state(from);
            let reach = cfg.n_horizon as f64 * cfg.t * x.v_x.abs();
            if (anchor.s - x.s).abs() > reach + cfg.d as f64 * cfg.t * x.v_x.abs() {
                continue;
            }
        }
        if use_v_filter {
            let probe = rec.extended_state((gamma + cfg.n_horizon as i64).clamp(lo, hi));
            let dv = cfg.n_horizon as f64 * cfg.t * cfg.a_max;
            if (probe.v_x - x.v_x).abs() > dv {
                continue;
            }
        }
        for t in from..=to {
            points.push(SafeSetPoint {
                state: rec.extended_state(t),
                cost: modified_cost_extended(store, i, t),
                source: (i, t),
            });
        }
    }
    points
}

/// The state-varying safe set: windows around the nearest-state match of the
/// fastest laps, intersected with the arc-length and velocity reachability
/// filters.
pub fn local_safe_set(
    store: &SafeSetStore,
    x: &VehicleState,
    cfg: &SafeSetConfig,
) -> Result<LocalSafeSet, SafeSetError> {
    if store.is_empty() {
        return Err(SafeSetError::EmptyStore);
    }
    let points = window_points(store, x, cfg, true, true);
    if points.is_empty() {
        return Err(SafeSetError::EmptySafeSet);
    }
    Ok(LocalSafeSet { points })
}

/// Side of the track an overtaking corridor is placed on. `Left` is the
/// low-`e_y` side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OvertakeSide {
    Left,
    Right,
}

/// Side selection for an overtaking maneuver.
///
/// Left is chosen when the agent is already on the low-`e_y` side of the
/// opponent's predicted terminal position, or when the gap between the
/// opponent and the high-`e_y` boundary is too small to pass through.
pub fn overtake_side(
    e_y_agent: f64,
    e_y_opp_terminal: f64,
    track_width: f64,
    alpha: f64,
    body_width: f64,
) -> OvertakeSide {
    if e_y_agent - e_y_opp_terminal <= 0.0
        || track_width / 2.0 - e_y_opp_terminal <= alpha * body_width
    {
        OvertakeSide::Left
    } else {
        OvertakeSide::Right
    }
}

/// Lateral corridor the terminal state must lie in for the chosen side.
pub fn overtake_interval(
    side: OvertakeSide,
    e_y_agent: f64,
    e_y_opp_terminal: f64,
    track_width: f64,
    alpha: f64,
    body_width: f64,
) -> (f64, f64) {
    match side {
        OvertakeSide::Left => {
            let e_max = e_y_opp_terminal.min(e_y_agent + alpha * body_width / 2.0);
            (e_max - alpha * body_width / 2.0, e_max)
        }
        OvertakeSide::Right => {
            let lo = (e_y_opp_terminal - alpha * body_width).max(-track_width / 2.0);
            (lo, e_y_opp_terminal)
        }
    }
}

/// The overtaking-modified terminal set: the plain state-varying set
/// restricted to the lateral corridor beside the opponent's predicted
/// terminal position.
pub fn overtaking_safe_set(
    store: &SafeSetStore,
    x_b: &VehicleState,
    opp_pred: &PropagatedTrajectory,
    cfg: &SafeSetConfig,
    track_width: f64,
) -> Result<LocalSafeSet, SafeSetError> {
    let base = local_safe_set(store, x_b, cfg)?;
    let opp_term = opp_pred.terminal().ok_or(SafeSetError::EmptySafeSet)?;
    let side = overtake_side(x_b.e_y, opp_term.e_y, track_width, cfg.alpha, cfg.body_width);
    let (lo, hi) = overtake_interval(
        side,
        x_b.e_y,
        opp_term.e_y,
        track_width,
        cfg.alpha,
        cfg.body_width,
    );
    let points: Vec<SafeSetPoint> = base
        .points
        .into_iter()
        .filter(|p| p.state.e_y >= lo && p.state.e_y <= hi)
        .collect();
    if points.is_empty() {
        return Err(SafeSetError::EmptySafeSet);
    }
    Ok(LocalSafeSet { points })
}

/// Remove stored states that collide with the opponent's terminal position.
///
/// For each source trajectory, the first state inside the ellipse and every
/// later state of that trajectory's window are dropped, reaching back `tau`
/// steps before the collision.
pub fn prune_colliding_states(
    set: &LocalSafeSet,
    opp_terminal: (f64, f64),
    radii: (f64, f64),
    tau: i64,
) -> LocalSafeSet {
    let (s_obs, ey_obs) = opp_terminal;
    let (r_s, r_ey) = radii;
    let collides = |p: &SafeSetPoint| {
        let ds = (p.state.s - s_obs) / r_s;
        let de = (p.state.e_y - ey_obs) / r_ey;
        ds * ds + de * de <= 1.0
    };
    // First collision time per source iteration.
    let mut cut: std::collections::BTreeMap<usize, i64> = std::collections::BTreeMap::new();
    for p in &set.points {
        if collides(p) {
            let entry = cut.entry(p.source.0).or_insert(p.source.1);
            *entry = (*entry).min(p.source.1);
        }
    }
    let points = set
        .points
        .iter()
        .filter(|p| match cut.get(&p.source.0) {
            Some(&t_collide) => p.source.1 < t_collide - tau,
            None => true,
        })
        .copied()
        .collect();
    LocalSafeSet { points }
}

/// Terminal-set selection with the fallback ladder the controller relies on:
/// overtaking corridor first when engaged, then the collision-pruned plain
/// set, then progressively unfiltered windows. The solver always receives a
/// non-empty set; safety degrades gracefully to the obstacle barrier cost.
pub fn select_terminal_set(
    store: &SafeSetStore,
    x: &VehicleState,
    cfg: &SafeSetConfig,
    race: Option<&TerminalRaceContext<'_>>,
) -> Result<LocalSafeSet, SafeSetError> {
    if store.is_empty() {
        return Err(SafeSetError::EmptyStore);
    }
    if let Some(ctx) = race {
        if ctx.engaged {
            if let Ok(set) = overtaking_safe_set(store, x, ctx.opponent, cfg, ctx.track_width) {
                let pruned = prune_colliding_states(&set, ctx.opp_terminal(), ctx.radii, ctx.tau);
                if !pruned.is_empty() {
                    return Ok(pruned);
                }
            }
        }
        if let Ok(set) = local_safe_set(store, x, cfg) {
            let pruned = prune_colliding_states(&set, ctx.opp_terminal(), ctx.radii, ctx.tau);
            if !pruned.is_empty() {
                return Ok(pruned);
            }
        }
    }
    if let Ok(set) = local_safe_set(store, x, cfg) {
        return Ok(set);
    }
    // Drop the velocity filter, then the reachability filter.
    let points = window_points(store, x, cfg, true, false);
    if !points.is_empty() {
        return Ok(LocalSafeSet { points });
    }
    let points = window_points(store, x, cfg, false, false);
    if !points.is_empty() {
        return Ok(LocalSafeSet { points });
    }
    Err(SafeSetError::EmptySafeSet)
}

/// Opponent information needed by the race-mode terminal-set selection.
pub struct TerminalRaceContext<'a> {
    pub opponent: &'a PropagatedTrajectory,
    pub track_width: f64,
    pub radii: (f64, f64),
    pub tau: i64,
    /// Overtaking corridor active (opponent ahead in range, agent not slower).
    pub engaged: bool,
}

impl TerminalRaceContext<'_> {
    fn opp_terminal(&self) -> (f64, f64) {
        match self.opponent.terminal() {
            Some(x) => (x.s, x.e_y),
            None => (f64::INFINITY, f64::INFINITY),
        }
    }
}
