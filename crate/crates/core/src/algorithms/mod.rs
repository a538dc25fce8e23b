//! Round engines for over-the-air aggregation.
//!
//! Every algorithm implements [`RoundEngine`]: it decides what each client
//! transmits and which scale the server divides the received sum by. The
//! shared [`run_round`] draws the channels, superposes the signals, adds
//! receiver noise and decodes. Engines are looked up by name through an
//! [`EngineRegistry`].

mod charles;
mod cotaf;
mod fedavg;
mod power;

use std::collections::BTreeMap;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::channel::{self, ChannelConfig, ChannelDraw, ComplexGain};
use crate::error::{Error, Result};
use crate::model::{ModelVector, Objective};
use crate::rng::{self, Purpose, SimRng};

pub use charles::{charles_client, Charles};
pub use cotaf::Cotaf;
pub use fedavg::FedAvg;
pub use power::{choose_beta, fits_power, select_local_steps, BetaPolicy, PilotStats};

/// One participating client: its local objective and aggregation weight.
#[derive(Clone, Copy)]
pub struct Client<'a> {
    pub objective: &'a (dyn Objective + 'a),
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub eta: f64,
    pub batch_size: usize,
    /// Adaptive local-step range (CHARLES).
    pub tau_min: usize,
    pub tau_max: usize,
    /// Fixed local steps (COTAF, FedAvg).
    pub local_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundSettings {
    pub training: LocalTraining,
    /// Per-client transmit power budget `P`.
    pub power: f64,
    pub channel: ChannelConfig,
    pub deep_fade_threshold: f64,
    /// Run clients on the rayon pool. Results do not depend on this flag.
    pub parallel: bool,
}

impl RoundSettings {
    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if !(t.eta > 0.0) || !t.eta.is_finite() {
            return Err(Error::arg(format!("eta must be positive, got {}", t.eta)));
        }
        if t.batch_size == 0 {
            return Err(Error::arg("batch size must be at least 1"));
        }
        if t.tau_min == 0 || t.tau_min > t.tau_max {
            return Err(Error::arg(format!(
                "need 1 <= tau_min <= tau_max, got {}..{}",
                t.tau_min, t.tau_max
            )));
        }
        if t.local_steps == 0 {
            return Err(Error::arg("fixed local steps H must be at least 1"));
        }
        if !(self.power > 0.0) || !self.power.is_finite() {
            return Err(Error::arg(format!(
                "power budget must be positive, got {}",
                self.power
            )));
        }
        if !(self.deep_fade_threshold >= 0.0) {
            return Err(Error::arg("deep-fade threshold must be non-negative"));
        }
        self.channel.validate()
    }
}

/// Everything an engine may look at during one round.
#[derive(Clone, Copy)]
pub struct RoundEnv<'a> {
    pub seed: u64,
    pub round: usize,
    pub clients: &'a [Client<'a>],
    pub settings: &'a RoundSettings,
}

impl RoundEnv<'_> {
    pub fn stream(&self, client: usize, purpose: Purpose) -> SimRng {
        rng::substream(self.seed, self.round as u64, client as u64, purpose)
    }

    pub fn server_stream(&self, purpose: Purpose) -> SimRng {
        rng::substream(self.seed, self.round as u64, rng::SERVER, purpose)
    }

    pub fn dim(&self) -> usize {
        self.clients.first().map_or(0, |c| c.objective.dim())
    }

    pub fn max_weight(&self) -> f64 {
        self.clients.iter().map(|c| c.weight).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundReport {
    pub client: usize,
    /// Local steps used; zero when the client sat the round out.
    pub tau: usize,
    /// Precoding coefficient before any power clipping.
    pub beta_i: ComplexGain,
    /// `||z||^2` actually transmitted.
    pub tx_power: f64,
    pub clipped: bool,
    /// Factor applied to reach the power budget (1 when not clipped).
    pub clip_scale: f64,
    /// Deep-faded CHARLES clients do not transmit.
    pub absent: bool,
    /// Local update `x_{t,tau} - x_{t,0}`.
    pub update: ModelVector,
    pub draw: ChannelDraw,
}

impl ClientRoundReport {
    pub(crate) fn absent(client: usize, draw: ChannelDraw, d: usize) -> Self {
        Self {
            client,
            tau: 0,
            beta_i: ComplexGain::new(0.0, 0.0),
            tx_power: 0.0,
            clipped: false,
            clip_scale: 1.0,
            absent: true,
            update: ModelVector::zeros(d),
            draw,
        }
    }

    /// Weight `h * beta_i * clip / beta_t` the server effectively applies to
    /// this client's update (zero when absent).
    pub fn effective_gain(&self, beta_t: f64) -> ComplexGain {
        if self.absent {
            return ComplexGain::new(0.0, 0.0);
        }
        self.draw.h * self.beta_i * self.clip_scale / beta_t
    }
}

/// What a client puts on the air: its report and the complex signal
/// (`None` when it stays silent).
pub struct Transmission {
    pub report: ClientRoundReport,
    pub signal: Option<Vec<Complex64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    pub new_global: ModelVector,
    pub reports: Vec<ClientRoundReport>,
    pub beta_t: f64,
    /// Noise variance after server scaling, `sigma_c^2 / beta_t^2`.
    pub effective_noise_var: f64,
    /// Norm of the discarded imaginary part of `y / beta_t`.
    pub imag_residue_norm: f64,
}

pub trait RoundEngine: Send + Sync {
    fn name(&self) -> &'static str;

    /// Called once before round 0 with the initial model.
    fn calibrate(&mut self, x0: &ModelVector, env: &RoundEnv<'_>) -> Result<()>;

    /// Server-side scale `beta_t`; the decoder divides the received sum by it.
    fn server_scale(&self) -> f64;

    fn transmit(
        &self,
        client: usize,
        x_t: &ModelVector,
        draw: ChannelDraw,
        env: &RoundEnv<'_>,
    ) -> Result<Transmission>;

    /// Called after the server has decoded a round.
    fn end_round(&mut self, _reports: &[ClientRoundReport], _env: &RoundEnv<'_>) {}
}

/// Parameters shared by the engine constructors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineParams {
    pub beta_policy: BetaPolicy,
}

pub type EngineFactory = fn(&EngineParams) -> Box<dyn RoundEngine>;

/// Name -> constructor table.
pub struct EngineRegistry {
    factories: BTreeMap<&'static str, EngineFactory>,
}

impl EngineRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: EngineFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn create(&self, name: &str, params: &EngineParams) -> Result<Box<dyn RoundEngine>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            let known: Vec<_> = self.names().collect();
            Error::arg(format!(
                "unknown algorithm `{name}` (known: {})",
                known.join(", ")
            ))
        })?;
        Ok(factory(params))
    }
}

impl Default for EngineRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("charles", |p| Box::new(Charles::new(p.beta_policy)));
        r.register("cotaf", |_| Box::new(Cotaf::new()));
        r.register("fedavg", |_| Box::new(FedAvg::new()));
        r
    }
}

/// Channel of `client` in the round described by `env`.
pub fn round_draw(env: &RoundEnv<'_>, client: usize) -> ChannelDraw {
    let mut fading = env.stream(client, Purpose::Fading);
    let mut estimation = env.stream(client, Purpose::Estimation);
    channel::draw_channel(&env.settings.channel, &mut fading, &mut estimation)
}

/// Pilot channel estimates used for calibration before round 0.
pub fn pilot_draws(env: &RoundEnv<'_>) -> Vec<ChannelDraw> {
    (0..env.clients.len())
        .map(|i| {
            let mut fading = env.stream(i, Purpose::PilotChannel);
            let mut estimation = env.stream(i, Purpose::PilotEstimation);
            channel::draw_channel(&env.settings.channel, &mut fading, &mut estimation)
        })
        .collect()
}

/// `x_{t+1} = x_t + Re{y / beta_t}`; returns the new model and the norm of
/// the discarded imaginary part.
pub fn server_decode(
    x_t: &ModelVector,
    y: &[Complex64],
    beta_t: f64,
) -> Result<(ModelVector, f64)> {
    if !(beta_t > 0.0) || !beta_t.is_finite() {
        return Err(Error::arg(format!(
            "server scale must be positive, got {beta_t}"
        )));
    }
    if y.len() != x_t.len() {
        return Err(Error::arg("received signal length differs from the model"));
    }
    let mut next = x_t.clone();
    let mut imag = 0.0;
    for (x, yj) in next.iter_mut().zip(y) {
        *x += yj.re / beta_t;
        imag += (yj.im / beta_t).powi(2);
    }
    Ok((next, imag.sqrt()))
}

/// `coeff * update` as a complex signal, with its energy.
pub(crate) fn form_signal(coeff: ComplexGain, update: &[f64]) -> (Vec<Complex64>, f64) {
    let signal: Vec<Complex64> = update.iter().map(|&u| coeff * u).collect();
    let energy = signal.iter().map(Complex64::norm_sqr).sum();
    (signal, energy)
}

/// Channel-inverting precoder with a hard power clip: transmits
/// `(numer / h_hat) * update`, scaled down to `||z||^2 = P` when it would
/// exceed the budget. A zero estimate clips to full power with zero phase.
pub(crate) fn inverted_clipped(
    numer: f64,
    h_hat: ComplexGain,
    update: &[f64],
    power: f64,
) -> (ComplexGain, Vec<Complex64>, f64, bool, f64) {
    let update_norm = update.iter().map(|v| v * v).sum::<f64>().sqrt();
    let modulus = h_hat.norm();
    let coeff = if modulus > 0.0 {
        numer * h_hat.inv()
    } else {
        ComplexGain::new(f64::INFINITY, 0.0)
    };
    let unclipped = numer.abs() * update_norm / modulus;
    if update_norm == 0.0 || unclipped <= power.sqrt() {
        let (signal, energy) = form_signal(coeff, update);
        return (coeff, signal, energy, false, 1.0);
    }
    let phase = if modulus > 0.0 {
        h_hat.conj() / modulus
    } else {
        ComplexGain::new(1.0, 0.0)
    };
    let clipped_coeff = numer.signum() * power.sqrt() / update_norm * phase;
    let (signal, energy) = form_signal(clipped_coeff, update);
    let scale = if unclipped.is_finite() {
        power.sqrt() / unclipped
    } else {
        0.0
    };
    (coeff, signal, energy, true, scale)
}

/// Runs one communication round of `engine` from `x_t`.
pub fn run_round(
    engine: &mut dyn RoundEngine,
    x_t: &ModelVector,
    env: &RoundEnv<'_>,
) -> Result<RoundResult> {
    let m = env.clients.len();
    let d = x_t.len();
    let draws: Vec<ChannelDraw> = (0..m).map(|i| round_draw(env, i)).collect();
    let shared: &dyn RoundEngine = engine;
    let transmissions: Vec<Transmission> = if env.settings.parallel {
        (0..m)
            .into_par_iter()
            .map(|i| shared.transmit(i, x_t, draws[i], env))
            .collect::<Result<_>>()?
    } else {
        (0..m)
            .map(|i| shared.transmit(i, x_t, draws[i], env))
            .collect::<Result<_>>()?
    };

    let signals: Vec<(ComplexGain, &[Complex64])> = transmissions
        .iter()
        .filter_map(|t| t.signal.as_deref().map(|s| (t.report.draw.h, s)))
        .collect();
    let sigma_c2 = env.settings.channel.sigma_c2;
    let mut noise_rng = env.server_stream(Purpose::Noise);
    let y = channel::mac_superpose(&signals, sigma_c2, d, &mut noise_rng)?;
    let beta_t = engine.server_scale();
    let (new_global, imag_residue_norm) = server_decode(x_t, &y, beta_t)?;
    let reports: Vec<ClientRoundReport> = transmissions.into_iter().map(|t| t.report).collect();
    engine.end_round(&reports, env);
    Ok(RoundResult {
        new_global,
        reports,
        beta_t,
        effective_noise_var: sigma_c2 / (beta_t * beta_t),
        imag_residue_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_knows_the_three_engines() {
        let r = EngineRegistry::default();
        assert_eq!(
            r.names().collect::<Vec<_>>(),
            vec!["charles", "cotaf", "fedavg"]
        );
        let params = EngineParams {
            beta_policy: BetaPolicy::Fixed(1.0),
        };
        for name in ["charles", "cotaf", "fedavg"] {
            assert_eq!(r.create(name, &params).unwrap().name(), name);
        }
        assert!(matches!(r.create("sgd", &params), Err(Error::Argument(_))));
    }

    #[test]
    fn decode_null_round() {
        let x = ModelVector::from_vec(vec![1.0, -2.0, 0.5]);
        let y = vec![Complex64::new(0.0, 0.0); 3];
        let (next, imag) = server_decode(&x, &y, 3.0).unwrap();
        assert_eq!(next, x);
        assert_eq!(imag, 0.0);
        assert!(server_decode(&x, &y, 0.0).is_err());
    }

    #[test]
    fn clipped_precoder_respects_budget() {
        let update = [3.0, -4.0];
        let (_, sig, energy, clipped, scale) =
            inverted_clipped(1.0, ComplexGain::new(0.01, 0.02), &update, 2.0);
        assert!(clipped);
        assert!(energy <= 2.0 + 1e-12);
        assert!(scale > 0.0 && scale < 1.0);
        assert_eq!(sig.len(), 2);
        let (_, _, energy, clipped, scale) =
            inverted_clipped(1.0, ComplexGain::new(0.0, 0.0), &update, 2.0);
        assert!(clipped && energy <= 2.0 + 1e-12 && scale == 0.0);
        let (_, _, energy, clipped, _) =
            inverted_clipped(0.1, ComplexGain::new(1.0, 0.0), &update, 2.0);
        assert!(!clipped);
        assert!((energy - 0.25).abs() < 1e-15);
    }
}
