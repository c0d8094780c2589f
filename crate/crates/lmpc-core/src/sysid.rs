//! Online identification of the yaw and velocity dynamics.
//!
//! Each control step the agent refits three small least-squares problems over
//! a window of recorded states picked near its current position: one for the
//! longitudinal velocity, one for the lateral velocity and one for the yaw
//! rate. The fitted coefficient vectors parameterize the model propagated
//! inside the controller.

use crate::models::{VehicleInput, VehicleState, V_FLOOR};
use crate::safeset::SafeSetStore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SysIdError {
    #[error("only {got} regression samples available, {need} required")]
    InsufficientData { got: usize, need: usize },
    #[error("normal matrix is numerically singular even after regularization")]
    IllConditioned,
}

/// Coefficients of the identified dynamics.
///
/// `theta_vx` weights the features `(a, r*v_y, v_x)`, `theta_vy` the features
/// `(v_y/v_x, r/v_x, delta_f, r*v_x)` and `theta_psidot` the features
/// `(v_y/v_x, r/v_x, delta_f)`. The coefficients scale continuous-time rates;
/// the Euler step multiplies them by the controller period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub theta_vx: [f64; 3],
    pub theta_vy: [f64; 4],
    pub theta_psidot: [f64; 3],
    /// Control-step index the model was fitted at.
    pub fitted_at: usize,
}

impl RegressionModel {
    pub fn zero() -> Self {
        RegressionModel {
            theta_vx: [0.0; 3],
            theta_vy: [0.0; 4],
            theta_psidot: [0.0; 3],
            fitted_at: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta_vx.iter().all(|v| v.is_finite())
            && self.theta_vy.iter().all(|v| v.is_finite())
            && self.theta_psidot.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SysIdConfig {
    /// Number of fastest stored iterations sampled for the regression.
    pub n_id: usize,
    /// Steps taken behind the match point.
    pub n_before: usize,
    /// Steps taken ahead of the match point.
    pub n_after: usize,
    /// Minimum total sample count for a fit.
    pub min_samples: usize,
    /// Tikhonov term added to the normal matrix diagonal. Zero recovers the
    /// plain normal equation.
    pub ridge_eps: f64,
    /// Match-point offset, shared with the controller's safe-set matching.
    pub d: usize,
}

impl Default for SysIdConfig {
    fn default() -> Self {
        SysIdConfig {
            n_id: 2,
            n_before: 15,
            n_after: 15,
            min_samples: 8,
            ridge_eps: 1e-9,
            d: 5,
        }
    }
}

/// One regression sample: state, applied input, successor state.
#[derive(Debug, Clone, Copy)]
pub struct RegressionSample {
    pub state: VehicleState,
    pub input: VehicleInput,
    pub next: VehicleState,
}

/// Residual report of a fit, one RMS value per channel.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct FitResiduals {
    pub vx: f64,
    pub vy: f64,
    pub psidot: f64,
}

/// Collect the regression window around the current state.
///
/// Takes, for each of the `n_id` fastest stored iterations, the samples with
/// indices in `[gamma - n_before, gamma + n_after]` clipped to the recorded
/// range, where `gamma` is the nearest-state match index; then appends the
/// last `n_before` samples of the current partial iteration. Samples whose
/// speed falls under the 1/v_x feature floor are skipped.
pub fn select_regression_window(
    store: &SafeSetStore,
    current: &VehicleState,
    current_iter_partial: &[(VehicleState, VehicleInput)],
    cfg: &SysIdConfig,
) -> Result<Vec<RegressionSample>, SysIdError> {
    let mut samples = Vec::new();
    if !store.is_empty() {
        for idx in store.fastest_iterations(cfg.n_id) {
            let rec = store.iteration(idx);
            let gamma = rec.nearest_index(current, cfg.d);
            // Window clipped to the recorded range; successor pairing needs
            // t + 1, so it also stops one short of the last state.
            let lo = (gamma - cfg.n_before as i64).max(0) as usize;
            let hi_i64 = (gamma + cfg.n_after as i64).min(rec.steps() as i64 - 1);
            if hi_i64 < lo as i64 {
                continue;
            }
            let hi = hi_i64 as usize;
            for t in lo..=hi {
                let state = rec.states()[t];
                if state.v_x.abs() < V_FLOOR {
                    continue;
                }
                samples.push(RegressionSample {
                    state,
                    input: rec.inputs()[t],
                    next: rec.states()[t + 1],
                });
            }
        }
    }
    // Tail of the lap being driven right now.
    if current_iter_partial.len() >= 2 {
        let n = current_iter_partial.len();
        let lo = n.saturating_sub(cfg.n_before + 1);
        for t in lo..n - 1 {
            let (state, input) = current_iter_partial[t];
            if state.v_x.abs() < V_FLOOR {
                continue;
            }
            samples.push(RegressionSample {
                state,
                input,
                next: current_iter_partial[t + 1].0,
            });
        }
    }
    if samples.len() < cfg.min_samples {
        return Err(SysIdError::InsufficientData {
            got: samples.len(),
            need: cfg.min_samples,
        });
    }
    Ok(samples)
}

/// Solve a small ridge least-squares problem via Cholesky on the normal
/// matrix. Returns `None` when the regularized matrix is not positive
/// definite.
fn normal_equation_solve(
    rows: &[Vec<f64>],
    targets: &[f64],
    ridge: f64,
) -> Option<Vec<f64>> {
    let n = rows[0].len();
    let mut ata = vec![0.0; n * n];
    let mut aty = vec![0.0; n];
    for (row, &y) in rows.iter().zip(targets.iter()) {
        for i in 0..n {
            aty[i] += row[i] * y;
            for j in 0..n {
                ata[i * n + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..n {
        ata[i * n + i] += ridge;
    }
    // In-place Cholesky factorization.
    let mut l = ata;
    for i in 0..n {
        for j in 0..=i {
            let mut sum = l[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 1e-300 {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // Forward and backward substitution.
    let mut z = aty;
    for i in 0..n {
        for k in 0..i {
            z[i] -= l[i * n + k] * z[k];
        }
        z[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            z[i] -= l[k * n + i] * z[k];
        }
        z[i] /= l[i * n + i];
    }
    if z.iter().all(|v| v.is_finite()) {
        Some(z)
    } else {
        None
    }
}

/// Fit the three regression channels over the supplied samples.
///
/// The targets are the per-step velocity differences divided by `t`, so the
/// recovered coefficients act as continuous-time rates and round-trip exactly
/// through the identified Euler step.
pub fn fit(
    samples: &[RegressionSample],
    t: f64,
    cfg: &SysIdConfig,
) -> Result<(RegressionModel, FitResiduals), SysIdError> {
    if samples.len() < cfg.min_samples {
        return Err(SysIdError::InsufficientData {
            got: samples.len(),
            need: cfg.min_samples,
        });
    }
    let mut rows_vx = Vec::with_capacity(samples.len());
    let mut rows_vy = Vec::with_capacity(samples.len());
    let mut rows_r = Vec::with_capacity(samples.len());
    let mut y_vx = Vec::with_capacity(samples.len());
    let mut y_vy = Vec::with_capacity(samples.len());
    let mut y_r = Vec::with_capacity(samples.len());
    for smp in samples {
        let x = &smp.state;
        let u = &smp.input;
        let vx = if x.v_x.abs() < V_FLOOR {
            V_FLOOR.copysign(x.v_x)
        } else {
            x.v_x
        };
        rows_vx.push(vec![u.a, x.r * x.v_y, x.v_x]);
        rows_vy.push(vec![x.v_y / vx, x.r / vx, u.delta_f, x.r * x.v_x]);
        rows_r.push(vec![x.v_y / vx, x.r / vx, u.delta_f]);
        y_vx.push((smp.next.v_x - x.v_x) / t);
        y_vy.push((smp.next.v_y - x.v_y) / t);
        y_r.push((smp.next.r - x.r) / t);
    }
    let theta_vx = normal_equation_solve(&rows_vx, &y_vx, cfg.ridge_eps)
        .ok_or(SysIdError::IllConditioned)?;
    let theta_vy = normal_equation_solve(&rows_vy, &y_vy, cfg.ridge_eps)
        .ok_or(SysIdError::IllConditioned)?;
    let theta_r = normal_equation_solve(&rows_r, &y_r, cfg.ridge_eps)
        .ok_or(SysIdError::IllConditioned)?;

    let rms = |rows: &[Vec<f64>], ys: &[f64], theta: &[f64]| {
        let sum: f64 = rows
            .iter()
            .zip(ys.iter())
            .map(|(row, y)| {
                let pred: f64 = row.iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
                (pred - y).powi(2)
            })
            .sum();
        (sum / rows.len() as f64).sqrt()
    };
    let residuals = FitResiduals {
        vx: rms(&rows_vx, &y_vx, &theta_vx),
        vy: rms(&rows_vy, &y_vy, &theta_vy),
        psidot: rms(&rows_r, &y_r, &theta_r),
    };
    let model = RegressionModel {
        theta_vx: [theta_vx[0], theta_vx[1], theta_vx[2]],
        theta_vy: [theta_vy[0], theta_vy[1], theta_vy[2], theta_vy[3]],
        theta_psidot: [theta_r[0], theta_r[1], theta_r[2]],
        fitted_at: 0,
    };
    if !model.is_finite() {
        return Err(SysIdError::IllConditioned);
    }
    Ok((model, residuals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::identified_step_kappa;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn synth_model() -> RegressionModel {
        RegressionModel {
            theta_vx: [0.98, 0.03, -0.05],
            theta_vy: [-0.7, -0.08, 1.3, -0.9],
            theta_psidot: [-1.5, -0.4, 7.0],
            fitted_at: 0,
        }
    }

    fn generate_samples(model: &RegressionModel, n: usize, noise: f64, seed: u64) -> Vec<RegressionSample> {
        let mut rng = StdRng::seed_from_u64(seed);
        let t = 0.1;
        let mut out = Vec::new();
        while out.len() < n {
            let x = VehicleState {
                s: rng.gen_range(0.0..10.0),
                e_y: rng.gen_range(-0.4..0.4),
                e_psi: rng.gen_range(-0.3..0.3),
                r: rng.gen_range(-1.5..1.5),
                v_x: rng.gen_range(0.5..3.0),
                v_y: rng.gen_range(-0.4..0.4),
            };
            let u = VehicleInput {
                a: rng.gen_range(-1.3..3.0),
                delta_f: rng.gen_range(-0.4..0.4),
            };
            let mut next = identified_step_kappa(&x, &u, 0.0, t, model).unwrap();
            if noise > 0.0 {
                next.r += rng.gen_range(-noise..noise);
                next.v_x += rng.gen_range(-noise..noise);
                next.v_y += rng.gen_range(-noise..noise);
            }
            out.push(RegressionSample {
                state: x,
                input: u,
                next,
            });
        }
        out
    }

    #[test]
    fn exact_recovery_on_noiseless_data() {
        let truth = synth_model();
        let samples = generate_samples(&truth, 200, 0.0, 1);
        let cfg = SysIdConfig {
            ridge_eps: 0.0,
            ..SysIdConfig::default()
        };
        let (model, res) = fit(&samples, 0.1, &cfg).unwrap();
        for (got, want) in model
            .theta_vx
            .iter()
            .chain(model.theta_vy.iter())
            .chain(model.theta_psidot.iter())
            .zip(
                truth
                    .theta_vx
                    .iter()
                    .chain(truth.theta_vy.iter())
                    .chain(truth.theta_psidot.iter()),
            )
        {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
        assert!(res.vx < 1e-10 && res.vy < 1e-10 && res.psidot < 1e-10);
    }

    #[test]
    fn degenerate_columns_need_ridge() {
        // Constant straight driving: v_y = r = 0, a = 0, delta_f = 0 leaves
        // three of the four v_y features identically zero.
        let t = 0.1;
        let mut samples = Vec::new();
        for i in 0..40 {
            let x = VehicleState {
                s: i as f64 * 0.1,
                e_y: 0.0,
                e_psi: 0.0,
                r: 0.0,
                v_x: 1.2,
                v_y: 0.0,
            };
            samples.push(RegressionSample {
                state: x,
                input: VehicleInput::ZERO,
                next: VehicleState { s: x.s + 0.12, ..x },
            });
        }
        let plain = SysIdConfig {
            ridge_eps: 0.0,
            ..SysIdConfig::default()
        };
        assert_eq!(fit(&samples, t, &plain).unwrap_err(), SysIdError::IllConditioned);
        let ridged = SysIdConfig::default();
        let (model, _) = fit(&samples, t, &ridged).unwrap();
        assert!(model.is_finite());
    }

    #[test]
    fn matches_qr_oracle() {
        // Independent QR-based least squares on the same design matrix.
        let truth = synth_model();
        let samples = generate_samples(&truth, 120, 1e-3, 3);
        let cfg = SysIdConfig {
            ridge_eps: 0.0,
            ..SysIdConfig::default()
        };
        let (model, _) = fit(&samples, 0.1, &cfg).unwrap();

        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for smp in &samples {
            let x = &smp.state;
            rows.push(vec![smp.input.a, x.r * x.v_y, x.v_x]);
            ys.push((smp.next.v_x - x.v_x) / 0.1);
        }
        let a = nalgebra::DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
        let y = nalgebra::DVector::from_vec(ys);
        let qr = a.qr();
        let qty = qr.q().transpose() * y;
        let theta = qr
            .r()
            .solve_upper_triangular(&qty.rows(0, 3).into_owned())
            .unwrap();
        for i in 0..3 {
            assert!(
                (model.theta_vx[i] - theta[i]).abs() < 1e-10,
                "channel vx coeff {i}: {} vs {}",
                model.theta_vx[i],
                theta[i]
            );
        }
    }

    #[test]
    fn duplicate_samples_match_duplicated_design() {
        let truth = synth_model();
        let samples = generate_samples(&truth, 60, 1e-3, 7);
        let mut doubled = samples.clone();
        doubled.extend(samples.iter().cloned());
        let cfg = SysIdConfig {
            ridge_eps: 0.0,
            ..SysIdConfig::default()
        };
        let (m1, _) = fit(&samples, 0.1, &cfg).unwrap();
        let (m2, _) = fit(&doubled, 0.1, &cfg).unwrap();
        // Duplicating every sample scales X'X and X'y equally.
        for i in 0..3 {
            assert!((m1.theta_vx[i] - m2.theta_vx[i]).abs() < 1e-9);
            assert!((m1.theta_psidot[i] - m2.theta_psidot[i]).abs() < 1e-9);
        }
        for i in 0..4 {
            assert!((m1.theta_vy[i] - m2.theta_vy[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let truth = synth_model();
        let samples = generate_samples(&truth, 3, 0.0, 5);
        let cfg = SysIdConfig::default();
        assert!(matches!(
            fit(&samples, 0.1, &cfg),
            Err(SysIdError::InsufficientData { .. })
        ));
    }
}
