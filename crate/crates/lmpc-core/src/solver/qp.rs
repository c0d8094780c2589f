//! Dense convex QP solver based on over-relaxed operator splitting
//! (alternating projections on the constraint set) with diagonal Ruiz
//! preconditioning and an active-set polish step.
//!
//! The solver is factorization-light: each iteration solves one symmetric
//! positive-definite system whose Cholesky factor is reused until the penalty
//! parameter changes. Everything is deterministic: fixed iteration order, no
//! randomization, no time-based decisions.

use nalgebra::{Cholesky, DMatrix, DVector};

/// Convex QP in standard form:
/// minimize `0.5 z' H z + q' z` subject to `A z = b` and `G z <= w`.
#[derive(Debug, Clone)]
pub struct QpInstance {
    pub h: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub g_in: DMatrix<f64>,
    pub w_in: DVector<f64>,
}

impl QpInstance {
    pub fn n(&self) -> usize {
        self.q.len()
    }

    /// Objective value at `z`.
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (z.transpose() * &self.h * z)[(0, 0)] + self.q.dot(z)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor.
    pub alpha: f64,
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub max_iter: usize,
    /// Penalty adaptation cadence in iterations.
    pub rho_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            tol_abs: 1e-7,
            tol_rel: 1e-6,
            max_iter: 4000,
            rho_interval: 25,
            polish: true,
        }
    }
}

impl QpSettings {
    /// Looser profile used inside the control loop, where the SQP outer
    /// iteration dominates accuracy.
    pub fn control_loop() -> Self {
        QpSettings {
            tol_abs: 1e-6,
            tol_rel: 1e-5,
            max_iter: 1500,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Multipliers of the equality rows.
    pub y_eq: DVector<f64>,
    /// Multipliers of the inequality rows, nonnegative at optimality.
    pub y_in: DVector<f64>,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Complementary-slackness residual.
    pub comp_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
}

impl QpSolution {
    /// Stationarity, primal, dual and complementarity residuals, recomputed
    /// from scratch against the instance.
    pub fn kkt_residuals(&self, qp: &QpInstance) -> [f64; 4] {
        let grad = &qp.h * &self.z
            + &qp.q
            + qp.a_eq.transpose() * &self.y_eq
            + qp.g_in.transpose() * &self.y_in;
        let stationarity = grad.amax();
        let mut primal: f64 = 0.0;
        if qp.a_eq.nrows() > 0 {
            primal = (&qp.a_eq * &self.z - &qp.b_eq).amax();
        }
        let mut dual: f64 = 0.0;
        let mut comp: f64 = 0.0;
        if qp.g_in.nrows() > 0 {
            let slack = &qp.w_in - &qp.g_in * &self.z;
            for i in 0..slack.len() {
                primal = primal.max(-slack[i]);
                dual = dual.max(-self.y_in[i]);
                comp = comp.max((self.y_in[i] * slack[i]).abs());
            }
        }
        [stationarity, primal, dual, comp]
    }
}

struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

/// Ruiz-style diagonal equilibration of the stacked KKT data.
fn ruiz_equilibrate(
    h: &mut DMatrix<f64>,
    q: &mut DVector<f64>,
    cm: &mut DMatrix<f64>,
    l: &mut DVector<f64>,
    u: &mut DVector<f64>,
) -> Scaling {
    let n = q.len();
    let m = cm.nrows();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut c = 1.0;
    for _ in 0..10 {
        let mut delta = DVector::from_element(n, 1.0);
        for j in 0..n {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max(h[(i, j)].abs());
            }
            for i in 0..m {
                norm = norm.max(cm[(i, j)].abs());
            }
            if norm > 1e-12 {
                delta[j] = 1.0 / norm.sqrt();
            }
        }
        let mut eps = DVector::from_element(m, 1.0);
        for i in 0..m {
            let mut norm: f64 = 0.0;
            for j in 0..n {
                norm = norm.max(cm[(i, j)].abs());
            }
            if norm > 1e-12 {
                eps[i] = 1.0 / norm.sqrt();
            }
        }
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] *= delta[i] * delta[j];
            }
            q[i] *= delta[i];
        }
        for i in 0..m {
            for j in 0..n {
                cm[(i, j)] *= eps[i] * delta[j];
            }
            if l[i].is_finite() {
                l[i] *= eps[i];
            }
            if u[i].is_finite() {
                u[i] *= eps[i];
            }
        }
        d.component_mul_assign(&delta);
        e.component_mul_assign(&eps);

        // Cost scaling keeps the objective terms of comparable magnitude.
        let mut col_means = 0.0;
        for j in 0..n {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max(h[(i, j)].abs());
            }
            col_means += norm;
        }
        col_means /= n as f64;
        let gamma = 1.0 / col_means.max(q.amax()).max(1e-6);
        if (gamma - 1.0).abs() > 1e-3 {
            *h *= gamma;
            *q *= gamma;
            c *= gamma;
        }
    }
    Scaling { d, e, c }
}

/// Solve a QP cold.
pub fn solve_qp(qp: &QpInstance, settings: &QpSettings) -> QpSolution {
    solve_qp_warm(qp, settings, None)
}

/// Solve a QP with optional warm start `(primal, dual)`, dual ordered as
/// equality rows then inequality rows.
pub fn solve_qp_warm(
    qp: &QpInstance,
    settings: &QpSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> QpSolution {
    let n = qp.n();
    let p = qp.a_eq.nrows();
    let m_in = qp.g_in.nrows();
    let m = p + m_in;

    // Stack equality and inequality rows into l <= C z <= u.
    let mut cm = DMatrix::zeros(m, n);
    let mut l = DVector::from_element(m, f64::NEG_INFINITY);
    let mut u = DVector::from_element(m, f64::INFINITY);
    if p > 0 {
        cm.rows_mut(0, p).copy_from(&qp.a_eq);
        l.rows_mut(0, p).copy_from(&qp.b_eq);
        u.rows_mut(0, p).copy_from(&qp.b_eq);
    }
    if m_in > 0 {
        cm.rows_mut(p, m_in).copy_from(&qp.g_in);
        u.rows_mut(p, m_in).copy_from(&qp.w_in);
    }

    let mut h = qp.h.clone();
    let mut q = qp.q.clone();
    let scaling = ruiz_equilibrate(&mut h, &mut q, &mut cm, &mut l, &mut u);

    let mut rho = DVector::from_element(m, settings.rho);
    for i in 0..p {
        rho[i] = settings.rho * 1e3;
    }
    let mut rho_base = settings.rho;

    let factorize = |h: &DMatrix<f64>, cm: &DMatrix<f64>, rho: &DVector<f64>| {
        let mut mat = h.clone();
        for i in 0..n {
            mat[(i, i)] += settings.sigma;
        }
        // M = H + sigma I + C' diag(rho) C
        for a in 0..n {
            for b in a..n {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += cm[(i, a)] * rho[i] * cm[(i, b)];
                }
                mat[(a, b)] += acc;
                if a != b {
                    mat[(b, a)] += acc;
                }
            }
        }
        Cholesky::new(mat)
    };

    let mut chol = match factorize(&h, &cm, &rho) {
        Some(c) => c,
        None => {
            return failed_solution(qp, n, p, m_in, QpStatus::Infeasible);
        }
    };

    // Scaled iterates.
    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(m);
    let mut y = DVector::zeros(m);
    if let Some((zw, yw)) = warm {
        for i in 0..n {
            x[i] = zw[i] / scaling.d[i];
        }
        let mut yf = DVector::zeros(m);
        for i in 0..m {
            yf[i] = yw[i] * scaling.c / scaling.e[i];
        }
        y = yf;
        z = &cm * &x;
    }
    for i in 0..m {
        z[i] = z[i].clamp(l[i], u[i]);
    }

    let mut status = QpStatus::MaxIter;
    let mut iterations = settings.max_iter;
    let mut prim_res = f64::INFINITY;
    let mut dual_res = f64::INFINITY;

    let mut x_prev_cert = x.clone();
    let mut y_prev_cert = y.clone();

    for it in 0..settings.max_iter {
        // x-update through the reduced normal equations, then projection.
        let mut rhs = -&q + settings.sigma * &x;
        let mut scaled = DVector::zeros(m);
        for i in 0..m {
            scaled[i] = rho[i] * z[i] - y[i];
        }
        rhs += cm.transpose() * scaled;
        let xt = chol.solve(&rhs);
        let zt = &cm * &xt;

        let x_new = settings.alpha * &xt + (1.0 - settings.alpha) * &x;
        let mut z_new = DVector::zeros(m);
        let mut y_new = DVector::zeros(m);
        for i in 0..m {
            let relaxed = settings.alpha * zt[i] + (1.0 - settings.alpha) * z[i];
            let v = relaxed + y[i] / rho[i];
            z_new[i] = v.clamp(l[i], u[i]);
            y_new[i] = y[i] + rho[i] * (relaxed - z_new[i]);
        }
        x = x_new;
        z = z_new;
        y = y_new;

        let check_now = (it + 1) % 10 == 0 || it + 1 == settings.max_iter;
        if check_now {
            // Residuals in the unscaled problem.
            let (rp, rd, ep, ed) = unscaled_residuals(&h, &q, &cm, &x, &z, &y, &scaling, settings);
            prim_res = rp;
            dual_res = rd;
            if rp <= ep && rd <= ed {
                status = QpStatus::Optimal;
                iterations = it + 1;
                break;
            }
            // Divergence certificates.
            let dy = &y - &y_prev_cert;
            let dx = &x - &x_prev_cert;
            if primal_infeasibility_cert(&cm, &l, &u, &dy)
                || dual_infeasibility_cert(&h, &q, &cm, &l, &u, &dx)
            {
                status = QpStatus::Infeasible;
                iterations = it + 1;
                break;
            }
            x_prev_cert = x.clone();
            y_prev_cert = y.clone();
        }

        if (it + 1) % settings.rho_interval == 0 && prim_res.is_finite() {
            // Balance the residuals; refactor only on a material change.
            let (rp, rd, ep, ed) = unscaled_residuals(&h, &q, &cm, &x, &z, &y, &scaling, settings);
            let ratio = ((rp / ep.max(1e-30)) / (rd / ed.max(1e-30)).max(1e-30)).sqrt();
            let new_base = (rho_base * ratio).clamp(1e-6, 1e6);
            if new_base > 5.0 * rho_base || new_base < rho_base / 5.0 {
                rho_base = new_base;
                for i in 0..m {
                    rho[i] = if i < p { rho_base * 1e3 } else { rho_base };
                }
                match factorize(&h, &cm, &rho) {
                    Some(c) => chol = c,
                    None => break,
                }
            }
        }
    }

    // Unscale.
    let mut z_out = DVector::zeros(n);
    for i in 0..n {
        z_out[i] = x[i] * scaling.d[i];
    }
    let mut y_out = DVector::zeros(m);
    for i in 0..m {
        y_out[i] = y[i] * scaling.e[i] / scaling.c;
    }

    if settings.polish && status == QpStatus::Optimal {
        if let Some((zp, yp)) = polish(qp, &z_out, &y_out) {
            z_out = zp;
            y_out = yp;
        }
    }

    // Project tiny negative inequality multipliers.
    for i in p..m {
        if y_out[i] < 0.0 && y_out[i] > -1e-9 {
            y_out[i] = 0.0;
        }
    }

    let y_eq = y_out.rows(0, p).into_owned();
    let y_in = y_out.rows(p, m_in).into_owned();
    let mut solution = QpSolution {
        objective: qp.objective(&z_out),
        z: z_out,
        y_eq,
        y_in,
        primal_residual: prim_res,
        dual_residual: dual_res,
        comp_residual: 0.0,
        iterations,
        status,
    };
    let kkt = solution.kkt_residuals(qp);
    solution.primal_residual = kkt[1];
    solution.dual_residual = kkt[0];
    solution.comp_residual = kkt[3];
    solution
}

#[allow(clippy::too_many_arguments)]
fn unscaled_residuals(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    cm: &DMatrix<f64>,
    x: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    scaling: &Scaling,
    settings: &QpSettings,
) -> (f64, f64, f64, f64) {
    let n = x.len();
    let m = z.len();
    let cx = cm * x;
    let hx = h * x + q + cm.transpose() * y;
    let mut rp: f64 = 0.0;
    let mut cx_norm: f64 = 0.0;
    let mut z_norm: f64 = 0.0;
    for i in 0..m {
        let ei = scaling.e[i];
        rp = rp.max(((cx[i] - z[i]) / ei).abs());
        cx_norm = cx_norm.max((cx[i] / ei).abs());
        z_norm = z_norm.max((z[i] / ei).abs());
    }
    let mut rd: f64 = 0.0;
    let mut hx_n: f64 = 0.0;
    let mut cty_n: f64 = 0.0;
    let mut q_n: f64 = 0.0;
    let hx_only = h * x;
    let cty = cm.transpose() * y;
    for i in 0..n {
        let di = scaling.d[i];
        rd = rd.max((hx[i] / (di * scaling.c)).abs());
        hx_n = hx_n.max((hx_only[i] / (di * scaling.c)).abs());
        cty_n = cty_n.max((cty[i] / (di * scaling.c)).abs());
        q_n = q_n.max((q[i] / (di * scaling.c)).abs());
    }
    let ep = settings.tol_abs + settings.tol_rel * cx_norm.max(z_norm);
    let ed = settings.tol_abs + settings.tol_rel * hx_n.max(cty_n).max(q_n);
    (rp, rd, ep, ed)
}

fn primal_infeasibility_cert(
    cm: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    dy: &DVector<f64>,
) -> bool {
    let norm = dy.amax();
    if norm < 1e-12 {
        return false;
    }
    let eps = 1e-8 * norm;
    if (cm.transpose() * dy).amax() > eps {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        let dyi = dy[i];
        if dyi > 0.0 {
            if !u[i].is_finite() {
                return false;
            }
            support += u[i] * dyi;
        } else if dyi < 0.0 {
            if !l[i].is_finite() {
                return false;
            }
            support += l[i] * dyi;
        }
    }
    support < -eps
}

fn dual_infeasibility_cert(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    cm: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    dx: &DVector<f64>,
) -> bool {
    let norm = dx.amax();
    if norm < 1e-12 {
        return false;
    }
    let eps = 1e-8 * norm;
    if (h * dx).amax() > eps || q.dot(dx) > -eps {
        return false;
    }
    let cdx = cm * dx;
    for i in 0..cdx.len() {
        let v = cdx[i];
        if v > eps && u[i].is_finite() {
            return false;
        }
        if v < -eps && l[i].is_finite() {
            return false;
        }
    }
    true
}

/// Re-solve the KKT system restricted to the detected active set for a
/// high-accuracy primal/dual pair. Falls back to the iterate when the
/// polished point is worse.
fn polish(qp: &QpInstance, z: &DVector<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = qp.n();
    let p = qp.a_eq.nrows();
    let m_in = qp.g_in.nrows();
    let mut active: Vec<usize> = Vec::new();
    if m_in > 0 {
        let slack = &qp.w_in - &qp.g_in * z;
        for i in 0..m_in {
            if slack[i] < 1e-6 || y[p + i] > 1e-6 {
                active.push(i);
            }
        }
    }
    let k = p + active.len();
    let dim = n + k;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
    for i in 0..n {
        kkt[(i, i)] += 1e-12;
    }
    for r in 0..p {
        for c in 0..n {
            kkt[(n + r, c)] = qp.a_eq[(r, c)];
            kkt[(c, n + r)] = qp.a_eq[(r, c)];
        }
    }
    for (j, &row) in active.iter().enumerate() {
        for c in 0..n {
            kkt[(n + p + j, c)] = qp.g_in[(row, c)];
            kkt[(c, n + p + j)] = qp.g_in[(row, c)];
        }
        kkt[(n + p + j, n + p + j)] = -1e-12;
    }
    for r in 0..p {
        kkt[(n + r, n + r)] = -1e-12;
    }
    let mut rhs = DVector::zeros(dim);
    for i in 0..n {
        rhs[i] = -qp.q[i];
    }
    for r in 0..p {
        rhs[n + r] = qp.b_eq[r];
    }
    for (j, &row) in active.iter().enumerate() {
        rhs[n + p + j] = qp.w_in[row];
    }
    let lu = kkt.lu();
    let sol = lu.solve(&rhs)?;
    let zp = sol.rows(0, n).into_owned();
    let mut yp = DVector::zeros(p + m_in);
    for r in 0..p {
        yp[r] = sol[n + r];
    }
    for (j, &row) in active.iter().enumerate() {
        yp[p + row] = sol[n + p + j];
    }
    // Accept only if the polished point is feasible and the multipliers on
    // the active inequalities stay nonnegative.
    if m_in > 0 {
        let slack = &qp.w_in - &qp.g_in * &zp;
        for i in 0..m_in {
            if slack[i] < -1e-7 {
                return None;
            }
            if yp[p + i] < -1e-7 {
                return None;
            }
            if yp[p + i] < 0.0 {
                yp[p + i] = 0.0;
            }
        }
    }
    let candidate = QpSolution {
        z: zp.clone(),
        y_eq: yp.rows(0, p).into_owned(),
        y_in: yp.rows(p, m_in).into_owned(),
        objective: 0.0,
        primal_residual: 0.0,
        dual_residual: 0.0,
        comp_residual: 0.0,
        iterations: 0,
        status: QpStatus::Optimal,
    };
    let kkt_new = candidate.kkt_residuals(qp);
    let reference = QpSolution {
        z: z.clone(),
        y_eq: y.rows(0, p).into_owned(),
        y_in: y.rows(p, m_in).into_owned(),
        ..candidate.clone()
    };
    let kkt_old = reference.kkt_residuals(qp);
    let score =
        |r: &[f64; 4]| r.iter().fold(0.0f64, |acc, v| acc.max(*v));
    if score(&kkt_new) <= score(&kkt_old) {
        Some((zp, yp))
    } else {
        None
    }
}

fn failed_solution(
    qp: &QpInstance,
    n: usize,
    p: usize,
    m_in: usize,
    status: QpStatus,
) -> QpSolution {
    let z = DVector::zeros(n);
    QpSolution {
        objective: qp.objective(&z),
        z,
        y_eq: DVector::zeros(p),
        y_in: DVector::zeros(m_in),
        primal_residual: f64::INFINITY,
        dual_residual: f64::INFINITY,
        comp_residual: f64::INFINITY,
        iterations: 0,
        status,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_qp() -> QpInstance {
        QpInstance {
            h: DMatrix::from_row_slice(1, 1, &[1.0]),
            q: DVector::from_row_slice(&[-1.0]),
            a_eq: DMatrix::zeros(0, 1),
            b_eq: DVector::zeros(0),
            g_in: DMatrix::from_row_slice(1, 1, &[-1.0]),
            w_in: DVector::from_row_slice(&[0.0]),
        }
    }

    #[test]
    fn scalar_box() {
        let qp = scalar_qp();
        let sol = solve_qp(&qp, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z[0] - 1.0).abs() < 1e-7, "z = {}", sol.z[0]);
    }

    #[test]
    fn worked_two_variable_qp() {
        // min 3x1^2 + x2^2 + 2x1x2 + x1 + 6x2 + 2,
        // s.t. 2x1 + 3x2 >= 4, x >= 0
        let qp = QpInstance {
            h: DMatrix::from_row_slice(2, 2, &[6.0, 2.0, 2.0, 2.0]),
            q: DVector::from_row_slice(&[1.0, 6.0]),
            a_eq: DMatrix::zeros(0, 2),
            b_eq: DVector::zeros(0),
            g_in: DMatrix::from_row_slice(
                3,
                2,
                &[-2.0, -3.0, -1.0, 0.0, 0.0, -1.0],
            ),
            w_in: DVector::from_row_slice(&[-4.0, 0.0, 0.0]),
        };
        let sol = solve_qp(&qp, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z[0] - 0.5).abs() < 1e-6);
        assert!((sol.z[1] - 1.0).abs() < 1e-6);
        let kkt = sol.kkt_residuals(&qp);
        for r in kkt {
            assert!(r <= 1e-6, "kkt residuals {kkt:?}");
        }
    }

    #[test]
    fn equality_constrained() {
        // min ||z||^2 s.t. z1 + z2 = 2 -> z = (1, 1)
        let qp = QpInstance {
            h: DMatrix::identity(2, 2) * 2.0,
            q: DVector::zeros(2),
            a_eq: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            b_eq: DVector::from_row_slice(&[2.0]),
            g_in: DMatrix::zeros(0, 2),
            w_in: DVector::zeros(0),
        };
        let sol = solve_qp(&qp, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z[0] - 1.0).abs() < 1e-7);
        assert!((sol.z[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn infeasible_detected() {
        // z <= -1 and z >= 1 cannot hold.
        let qp = QpInstance {
            h: DMatrix::identity(1, 1),
            q: DVector::zeros(1),
            a_eq: DMatrix::zeros(0, 1),
            b_eq: DVector::zeros(0),
            g_in: DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            w_in: DVector::from_row_slice(&[-1.0, -1.0]),
        };
        let sol = solve_qp(&qp, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn scaling_invariance_of_argmin() {
        let qp = QpInstance {
            h: DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]),
            q: DVector::from_row_slice(&[-2.0, 1.5]),
            a_eq: DMatrix::zeros(0, 2),
            b_eq: DVector::zeros(0),
            g_in: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            w_in: DVector::from_row_slice(&[0.4, 0.4]),
        };
        let sol1 = solve_qp(&qp, &QpSettings::default());
        let scaled = QpInstance {
            h: &qp.h * 37.0,
            q: &qp.q * 37.0,
            ..qp.clone()
        };
        let sol2 = solve_qp(&scaled, &QpSettings::default());
        assert_eq!(sol1.status, QpStatus::Optimal);
        assert_eq!(sol2.status, QpStatus::Optimal);
        assert!((sol1.z[0] - sol2.z[0]).abs() < 1e-6);
        assert!((sol1.z[1] - sol2.z[1]).abs() < 1e-6);
    }

    #[test]
    fn determinism() {
        let qp = QpInstance {
            h: DMatrix::from_row_slice(2, 2, &[6.0, 2.0, 2.0, 2.0]),
            q: DVector::from_row_slice(&[1.0, 6.0]),
            a_eq: DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            b_eq: DVector::from_row_slice(&[0.1]),
            g_in: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]),
            w_in: DVector::from_row_slice(&[0.0, 0.0]),
        };
        let a = solve_qp(&qp, &QpSettings::default());
        let b = solve_qp(&qp, &QpSettings::default());
        assert_eq!(a.z, b.z);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.y_in, b.y_in);
    }

    #[test]
    fn warm_start_converges_fast() {
        let qp = QpInstance {
            h: DMatrix::from_row_slice(2, 2, &[6.0, 2.0, 2.0, 2.0]),
            q: DVector::from_row_slice(&[1.0, 6.0]),
            a_eq: DMatrix::zeros(0, 2),
            b_eq: DVector::zeros(0),
            g_in: DMatrix::from_row_slice(3, 2, &[-2.0, -3.0, -1.0, 0.0, 0.0, -1.0]),
            w_in: DVector::from_row_slice(&[-4.0, 0.0, 0.0]),
        };
        let cold = solve_qp(&qp, &QpSettings::default());
        let mut dual = DVector::zeros(3);
        dual.copy_from(&cold.y_in);
        let warm = solve_qp_warm(&qp, &QpSettings::default(), Some((&cold.z, &dual)));
        assert_eq!(warm.status, QpStatus::Optimal);
        assert!(warm.iterations <= cold.iterations);
    }
}
