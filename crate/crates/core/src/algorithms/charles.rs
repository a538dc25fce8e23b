//! Channel-inversion power control with adaptive local steps.
//!
//! Client `i` precodes with `beta_i = beta_t * alpha_i / (tau_i * h_hat_i)` and
//! keeps taking local SGD steps until `||beta_i * dx(tau_i)||^2 <= P`. After
//! the channel multiplies by `h_i` and the server divides by `beta_t`, the
//! client contributes `(h_i / h_hat_i) * alpha_i * dx(tau_i) / tau_i`.

use crate::channel::ChannelDraw;
use crate::error::{Error, Result};
use crate::model::{LocalSgd, ModelVector};
use crate::rng::{Purpose, SimRng};

use super::power::{choose_beta, fits_power, select_local_steps, BetaPolicy, PilotStats};
use super::{
    form_signal, pilot_draws, Client, ClientRoundReport, RoundEngine, RoundEnv, Transmission,
};

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub struct Charles {
    policy: BetaPolicy,
    beta: Option<f64>,
}

impl Charles {
    pub fn new(policy: BetaPolicy) -> Self {
        Self { policy, beta: None }
    }

    pub fn beta(&self) -> Option<f64> {
        self.beta
    }
}

/// One CHARLES client for one round.
pub fn charles_client(
    index: usize,
    x_t: &ModelVector,
    client: &Client<'_>,
    beta_t: f64,
    draw: ChannelDraw,
    env: &RoundEnv<'_>,
    rng: SimRng,
) -> Result<Transmission> {
    let s = env.settings;
    let t = &s.training;
    let modulus = draw.h_hat.norm();
    if modulus < s.deep_fade_threshold || modulus == 0.0 {
        return Ok(Transmission {
            report: ClientRoundReport::absent(index, draw, x_t.len()),
            signal: None,
        });
    }

    let mut sgd = LocalSgd::new(client.objective, x_t, t.eta, t.batch_size, rng)?;
    for k in 1..=t.tau_max {
        let norm = sgd.step()?.norm();
        if k >= t.tau_min && fits_power(beta_t, client.weight, modulus, s.power, k, norm) {
            break;
        }
    }
    let traj = sgd.into_trajectory();
    let (tau, clipped) = match select_local_steps(
        &traj,
        beta_t,
        client.weight,
        draw.h_hat,
        s.power,
        t.tau_min,
        traj.steps(),
        s.deep_fade_threshold,
    ) {
        Ok(sel) => sel,
        Err(Error::DeepFade { .. }) => unreachable!("checked above"),
        Err(e) => return Err(e),
    };

    let beta_i = (beta_t * client.weight / tau as f64) * draw.h_hat.inv();
    let update = traj.updates.into_iter().nth(tau).expect("tau <= steps");
    let (mut signal, mut tx_power) = form_signal(beta_i, &update);
    let mut clip_scale = 1.0;
    if clipped && tx_power > 0.0 {
        clip_scale = (s.power / tx_power).sqrt();
        signal.iter_mut().for_each(|z| *z *= clip_scale);
        tx_power = signal.iter().map(|z| z.norm_sqr()).sum();
    }
    Ok(Transmission {
        report: ClientRoundReport {
            client: index,
            tau,
            beta_i,
            tx_power,
            clipped,
            clip_scale,
            absent: false,
            update,
            draw,
        },
        signal: Some(signal),
    })
}

impl RoundEngine for Charles {
    fn name(&self) -> &'static str {
        "charles"
    }

    fn calibrate(&mut self, x0: &ModelVector, env: &RoundEnv<'_>) -> Result<()> {
        let pilot = match self.policy {
            BetaPolicy::Fixed(_) => PilotStats {
                update_norm: 0.0,
                median_h_hat: 0.0,
                max_weight: env.max_weight(),
            },
            BetaPolicy::Auto { tau_target } => {
                let t = &env.settings.training;
                let mut norms = env
                    .clients
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let rng = env.stream(i, Purpose::PilotSgd);
                        let mut sgd = LocalSgd::new(c.objective, x0, t.eta, t.batch_size, rng)?;
                        let mut norm = 0.0;
                        for _ in 0..tau_target {
                            norm = sgd.step()?.norm();
                        }
                        Ok(norm)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let mut gains: Vec<f64> = pilot_draws(env).iter().map(|d| d.h_hat.norm()).collect();
                PilotStats {
                    update_norm: median(&mut norms),
                    median_h_hat: median(&mut gains),
                    max_weight: env.max_weight(),
                }
            }
        };
        self.beta = Some(choose_beta(&pilot, env.settings.power, self.policy)?);
        Ok(())
    }

    fn server_scale(&self) -> f64 {
        self.beta.expect("calibrate() runs before the first round")
    }

    fn transmit(
        &self,
        client: usize,
        x_t: &ModelVector,
        draw: ChannelDraw,
        env: &RoundEnv<'_>,
    ) -> Result<Transmission> {
        let rng = env.stream(client, Purpose::LocalSgd);
        charles_client(
            client,
            x_t,
            &env.clients[client],
            self.server_scale(),
            draw,
            env,
            rng,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
