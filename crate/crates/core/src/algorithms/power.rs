use crate::channel::ComplexGain;
use crate::error::{Error, Result};
use crate::model::SgdTrajectory;

/// How the server-side scale `beta_t` is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaPolicy {
    Fixed(f64),
    /// Calibrated once from a pilot so the median client needs about
    /// `tau_target` local steps.
    Auto {
        tau_target: usize,
    },
}

/// Pilot measurements taken at the initial model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PilotStats {
    /// Median over clients of `||x_{0,tau_target} - x_0||`.
    pub update_norm: f64,
    /// Median over clients of `|h_hat|`.
    pub median_h_hat: f64,
    pub max_weight: f64,
}

pub fn choose_beta(pilot: &PilotStats, power: f64, policy: BetaPolicy) -> Result<f64> {
    match policy {
        BetaPolicy::Fixed(c) => {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Calibration(format!(
                    "fixed beta must be positive, got {c}"
                )));
            }
            Ok(c)
        }
        BetaPolicy::Auto { tau_target } => {
            if !(pilot.update_norm > 0.0) {
                return Err(Error::Calibration("pilot update norm is zero".into()));
            }
            if !(pilot.median_h_hat > 0.0) || !(pilot.max_weight > 0.0) || tau_target == 0 {
                return Err(Error::Calibration(
                    "pilot channel estimate, weights and tau_target must be positive".into(),
                ));
            }
            let beta = tau_target as f64 * pilot.median_h_hat * power.sqrt()
                / (pilot.max_weight * pilot.update_norm);
            if !beta.is_finite() {
                return Err(Error::Calibration(format!("calibrated beta is {beta}")));
            }
            Ok(beta)
        }
    }
}

/// Whether `(beta_t * alpha / (k * |h_hat|)) * ||dx(k)|| <= sqrt(P)`.
pub fn fits_power(
    beta_t: f64,
    alpha: f64,
    h_hat_abs: f64,
    power: f64,
    k: usize,
    norm: f64,
) -> bool {
    beta_t * alpha / (k as f64 * h_hat_abs) * norm <= power.sqrt()
}

/// Smallest `k` in `[tau_min, tau_max]` whose update fits the power budget
/// after CHARLES precoding; `(tau_max, true)` when none does.
#[allow(clippy::too_many_arguments)]
pub fn select_local_steps(
    traj: &SgdTrajectory,
    beta_t: f64,
    alpha: f64,
    h_hat: ComplexGain,
    power: f64,
    tau_min: usize,
    tau_max: usize,
    deep_fade_threshold: f64,
) -> Result<(usize, bool)> {
    if tau_min == 0 || tau_min > tau_max || tau_max > traj.steps() {
        return Err(Error::arg(format!(
            "need 1 <= tau_min <= tau_max <= {} steps, got {tau_min}..{tau_max}",
            traj.steps()
        )));
    }
    let modulus = h_hat.norm();
    if modulus < deep_fade_threshold || modulus == 0.0 {
        return Err(Error::DeepFade {
            modulus,
            threshold: deep_fade_threshold,
        });
    }
    for k in tau_min..=tau_max {
        if fits_power(beta_t, alpha, modulus, power, k, traj.update_norm(k)) {
            return Ok((k, false));
        }
    }
    Ok((tau_max, true))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::data::synthetic_logreg;
    use crate::model::{local_sgd, Objective, SoftmaxObjective};
    use crate::rng::SimRng;

    fn trajectory() -> SgdTrajectory {
        let ds = synthetic_logreg(6, 200, 4, 3.0, 3).unwrap();
        let obj = SoftmaxObjective::new(&ds);
        let x0 = vec![0.0; obj.dim()];
        local_sgd(&x0, &obj, 0.5, 16, 4, SimRng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn immediate_satisfaction() {
        let traj = trajectory();
        let r = select_local_steps(
            &traj,
            1e-6,
            0.1,
            ComplexGain::new(1.0, 0.0),
            1.0,
            2,
            16,
            1e-6,
        );
        assert_eq!(r.unwrap(), (2, false));
    }

    #[test]
    fn unreachable_budget_clips_at_tau_max() {
        let traj = trajectory();
        let r = select_local_steps(
            &traj,
            1e9,
            0.1,
            ComplexGain::new(1.0, 0.0),
            1.0,
            1,
            10,
            1e-6,
        );
        assert_eq!(r.unwrap(), (10, true));
    }

    #[test]
    fn deep_fade_is_an_error() {
        let traj = trajectory();
        let r = select_local_steps(
            &traj,
            1.0,
            0.1,
            ComplexGain::new(1e-8, 0.0),
            1.0,
            1,
            10,
            1e-6,
        );
        assert!(matches!(r, Err(Error::DeepFade { .. })));
    }

    #[test]
    fn weaker_gain_never_selects_fewer_steps() {
        let traj = trajectory();
        let norms: Vec<f64> = (1..=16).map(|k| traj.update_norm(k) / k as f64).collect();
        // choose beta so the unit-gain client lands mid-range
        let beta = 1.0 / (0.1 * norms[3]);
        let mut prev = 0;
        for gain in [4.0, 2.0, 1.0, 0.5, 0.25, 0.125, 0.01] {
            let (tau, _) = select_local_steps(
                &traj,
                beta,
                0.1,
                ComplexGain::new(0.0, gain),
                1.0,
                1,
                16,
                1e-6,
            )
            .unwrap();
            assert!(tau >= prev, "gain {gain}: {tau} < {prev}");
            prev = tau;
        }
    }

    #[test]
    fn beta_policies() {
        let pilot = PilotStats {
            update_norm: 0.5,
            median_h_hat: 0.8,
            max_weight: 0.1,
        };
        assert_eq!(
            choose_beta(&pilot, 4.0, BetaPolicy::Fixed(1.0)).unwrap(),
            1.0
        );
        let auto = BetaPolicy::Auto { tau_target: 4 };
        let b = choose_beta(&pilot, 4.0, auto).unwrap();
        assert!((b - 4.0 * 0.8 * 2.0 / (0.1 * 0.5)).abs() < 1e-12);
        let doubled = PilotStats {
            update_norm: 1.0,
            ..pilot
        };
        assert!((choose_beta(&doubled, 4.0, auto).unwrap() - b / 2.0).abs() < 1e-12);
        let zero = PilotStats {
            update_norm: 0.0,
            ..pilot
        };
        assert!(matches!(
            choose_beta(&zero, 4.0, auto),
            Err(Error::Calibration(_))
        ));
    }
}
