use crate::channel::ChannelDraw;
use crate::error::{Error, Result};
use crate::model::{local_sgd, ModelVector};
use crate::rng::Purpose;

use super::{inverted_clipped, ClientRoundReport, RoundEngine, RoundEnv, Transmission};

/// Time-varying precoding with a common scale `sqrt(gamma_t)`, where
/// `gamma_t = P m^2 / max_i ||dx_i||^2` uses the previous round's largest
/// update. Each client inverts its estimated channel and clips to the budget.
pub struct Cotaf {
    gamma: Option<f64>,
}

impl Cotaf {
    pub fn new() -> Self {
        Self { gamma: None }
    }

    fn gamma_for(power: f64, m: usize, max_norm_sq: f64) -> Option<f64> {
        (max_norm_sq > 0.0).then(|| power * (m * m) as f64 / max_norm_sq)
    }
}

impl Default for Cotaf {
    fn default() -> Self {
        Self::new()
    }
}

impl RoundEngine for Cotaf {
    fn name(&self) -> &'static str {
        "cotaf"
    }

    fn calibrate(&mut self, x0: &ModelVector, env: &RoundEnv<'_>) -> Result<()> {
        let t = &env.settings.training;
        let mut max_norm_sq: f64 = 0.0;
        for (i, c) in env.clients.iter().enumerate() {
            let rng = env.stream(i, Purpose::PilotSgd);
            let traj = local_sgd(x0, c.objective, t.eta, t.local_steps, t.batch_size, rng)?;
            max_norm_sq = max_norm_sq.max(traj.update(t.local_steps).norm_sq());
        }
        self.gamma = Some(
            Self::gamma_for(env.settings.power, env.clients.len(), max_norm_sq)
                .ok_or_else(|| Error::Calibration("pilot updates are all zero".into()))?,
        );
        Ok(())
    }

    fn server_scale(&self) -> f64 {
        self.gamma
            .expect("calibrate() runs before the first round")
            .sqrt()
    }

    fn transmit(
        &self,
        client: usize,
        x_t: &ModelVector,
        draw: ChannelDraw,
        env: &RoundEnv<'_>,
    ) -> Result<Transmission> {
        let t = &env.settings.training;
        let m = env.clients.len() as f64;
        let rng = env.stream(client, Purpose::LocalSgd);
        let traj = local_sgd(
            x_t,
            env.clients[client].objective,
            t.eta,
            t.local_steps,
            t.batch_size,
            rng,
        )?;
        let update = traj
            .updates
            .into_iter()
            .nth(t.local_steps)
            .expect("H steps");
        let numer = self.server_scale() / m;
        let (beta_i, signal, tx_power, clipped, clip_scale) =
            inverted_clipped(numer, draw.h_hat, &update, env.settings.power);
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

    fn end_round(&mut self, reports: &[ClientRoundReport], env: &RoundEnv<'_>) {
        let max_norm_sq = reports
            .iter()
            .map(|r| r.update.norm_sq())
            .fold(0.0, f64::max);
        if let Some(g) = Self::gamma_for(env.settings.power, env.clients.len(), max_norm_sq) {
            self.gamma = Some(g);
        }
    }
}
