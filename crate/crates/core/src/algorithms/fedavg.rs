use crate::channel::ChannelDraw;
use crate::error::Result;
use crate::model::{local_sgd, ModelVector};
use crate::rng::Purpose;

use super::{inverted_clipped, ClientRoundReport, RoundEngine, RoundEnv, Transmission};

/// Over-the-air FedAvg: each client sends `(alpha_i / h_hat_i) * dx_i(H)`,
/// clipped to the power budget, and the server adds the real part of what it
/// receives without rescaling.
#[derive(Debug, Default)]
pub struct FedAvg;

impl FedAvg {
    pub fn new() -> Self {
        Self
    }
}

impl RoundEngine for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn calibrate(&mut self, _x0: &ModelVector, _env: &RoundEnv<'_>) -> Result<()> {
        Ok(())
    }

    fn server_scale(&self) -> f64 {
        1.0
    }

    fn transmit(
        &self,
        client: usize,
        x_t: &ModelVector,
        draw: ChannelDraw,
        env: &RoundEnv<'_>,
    ) -> Result<Transmission> {
        let t = &env.settings.training;
        let c = &env.clients[client];
        let rng = env.stream(client, Purpose::LocalSgd);
        let traj = local_sgd(x_t, c.objective, t.eta, t.local_steps, t.batch_size, rng)?;
        let update = traj
            .updates
            .into_iter()
            .nth(t.local_steps)
            .expect("H steps");
        let (beta_i, signal, tx_power, clipped, clip_scale) =
            inverted_clipped(c.weight, draw.h_hat, &update, env.settings.power);
        Ok(Transmission {
            report: ClientRoundReport {
                client,
                tau: t.local_steps,
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
}
