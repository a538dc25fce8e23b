//! Convergence-bound evaluation over recorded traces.
//!
//! The constants `L`, `sigma^2`, `G^2` are estimated from probes, so they are
//! lower bounds on the true suprema and every check built on them is advisory.

use std::fmt::Write as _;

use rand::Rng;

use crate::channel::{self, ChannelConfig, ComplexGain, DEFAULT_DEEP_FADE_THRESHOLD};
use crate::config::parse_pairs;
use crate::error::{Error, Result};
use crate::model::{ModelVector, Objective};
use crate::rng::{standard_normal, SimRng};
use crate::trace::RunTrace;

/// Distance between the two points of a smoothness probe pair.
pub const PROBE_SCALE: f64 = 1e-2;
/// Largest number of per-sample gradients taken per client and probe point.
pub const MAX_SAMPLE_GRADIENTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    pub l: f64,
    pub sigma2: f64,
    pub g2: f64,
    pub f0_minus_fstar: f64,
}

impl BoundConstants {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.l > 0.0)
            || !ok(self.l)
            || !ok(self.sigma2)
            || !ok(self.g2)
            || !ok(self.f0_minus_fstar)
        {
            return Err(Error::Precondition(format!(
                "constants must be finite and nonnegative with L > 0: {self:?}"
            )));
        }
        Ok(())
    }

    /// Reads `L`, `sigma2`, `G2` and `F0_minus_Fstar` from `key = value` text.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut c = Self {
            l: f64::NAN,
            sigma2: f64::NAN,
            g2: f64::NAN,
            f0_minus_fstar: f64::NAN,
        };
        for (k, v) in &pairs {
            let value: f64 = v
                .parse()
                .map_err(|_| Error::config(k.as_str(), format!("cannot parse `{v}`")))?;
            match k.as_str() {
                "L" => c.l = value,
                "sigma2" => c.sigma2 = value,
                "G2" => c.g2 = value,
                "F0_minus_Fstar" => c.f0_minus_fstar = value,
                _ => return Err(Error::config(k.as_str(), "unknown key")),
            }
        }
        for (name, v) in [
            ("L", c.l),
            ("sigma2", c.sigma2),
            ("G2", c.g2),
            ("F0_minus_Fstar", c.f0_minus_fstar),
        ] {
            if v.is_nan() {
                return Err(Error::config(name, "missing"));
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "L = {}\nsigma2 = {}\nG2 = {}\nF0_minus_Fstar = {}\n",
            self.l, self.sigma2, self.g2, self.f0_minus_fstar
        )
    }
}

/// How the "stochastic" gradient samples are drawn when estimating constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientSampling {
    SingleSample,
    /// Every sample is the full local gradient; the variance estimate is zero.
    FullBatch,
}

fn weighted_full_grad(
    objectives: &[&dyn Objective],
    weights: &[f64],
    x: &[f64],
) -> Result<(f64, ModelVector)> {
    let mut loss = 0.0;
    let mut grad = ModelVector::zeros(x.len());
    for (obj, &w) in objectives.iter().zip(weights) {
        let (l, g) = obj.full_loss_and_grad(x)?;
        loss += w * l;
        grad.axpy(w, &g);
    }
    Ok((loss, grad))
}

fn random_direction(d: usize, rng: &mut SimRng) -> ModelVector {
    loop {
        let v = ModelVector::from_vec((0..d).map(|_| standard_normal(rng)).collect());
        let n = v.norm();
        if n > 0.0 {
            return ModelVector::from_vec(v.iter().map(|a| a / n).collect());
        }
    }
}

/// Probe estimates of the smoothness, variance and gradient-bound constants
/// of `F = sum_i w_i F_i` around `x0`, plus `F(x0) - F*` with `F* = 0`.
pub fn estimate_constants(
    objectives: &[&dyn Objective],
    weights: &[f64],
    x0: &[f64],
    probes: usize,
    sampling: GradientSampling,
    rng: &mut SimRng,
) -> Result<BoundConstants> {
    if probes < 10 {
        return Err(Error::Precondition(format!(
            "need at least 10 probes, got {probes}"
        )));
    }
    if objectives.is_empty() || objectives.len() != weights.len() {
        return Err(Error::arg("one weight per objective is required"));
    }
    if objectives.iter().map(|o| o.num_samples()).sum::<usize>() < 2 {
        return Err(Error::Estimation("need at least two data points".into()));
    }
    let d = x0.len();
    let (f0, _) = weighted_full_grad(objectives, weights, x0)?;

    let mut l: f64 = 0.0;
    let mut g2: f64 = 0.0;
    let mut sigma2: f64 = 0.0;
    for _ in 0..probes {
        let mut x = ModelVector::from_vec(x0.to_vec());
        x.axpy(1.0, &random_direction(d, rng));
        let mut y = x.clone();
        y.axpy(PROBE_SCALE, &random_direction(d, rng));
        let (_, gx) = weighted_full_grad(objectives, weights, &x)?;
        let (_, gy) = weighted_full_grad(objectives, weights, &y)?;
        let diff: f64 = gx
            .iter()
            .zip(gy.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let dist: f64 = x
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        l = l.max(diff / dist);

        for obj in objectives {
            let n = obj.num_samples();
            if n == 0 {
                continue;
            }
            let (_, full) = obj.full_loss_and_grad(&x)?;
            let (mean_sq, var) = match sampling {
                GradientSampling::FullBatch => (full.norm_sq(), 0.0),
                GradientSampling::SingleSample => {
                    let picks: Vec<usize> = if n <= MAX_SAMPLE_GRADIENTS {
                        (0..n).collect()
                    } else {
                        (0..MAX_SAMPLE_GRADIENTS)
                            .map(|_| rng.gen_range(0..n))
                            .collect()
                    };
                    let mut sq = 0.0;
                    let mut var = 0.0;
                    for &j in &picks {
                        let (_, g) = obj.loss_and_grad(&x, &[j])?;
                        sq += g.norm_sq();
                        var += g
                            .iter()
                            .zip(full.iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>();
                    }
                    let k = picks.len() as f64;
                    (sq / k, var / k)
                }
            };
            g2 = g2.max(mean_sq);
            sigma2 = sigma2.max(var);
        }
    }
    if !(l > 0.0) {
        return Err(Error::Estimation(
            "gradient does not change between probes".into(),
        ));
    }
    let c = BoundConstants {
        l,
        sigma2,
        g2,
        f0_minus_fstar: f0.max(0.0),
    };
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelMoments {
    /// Mean of `|h / h_hat|^2`.
    pub m_ratio: f64,
    /// Mean of `|1 - h / h_hat|^2`.
    pub m_mismatch: f64,
    pub se_ratio: f64,
    pub se_mismatch: f64,
    pub used: usize,
    pub discarded: usize,
}

fn mean_and_se(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = sum / nf;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

fn moments_where(
    cfg: &ChannelConfig,
    samples: usize,
    keep: impl Fn(ComplexGain, ComplexGain) -> bool,
    rng: &mut SimRng,
) -> Result<ChannelMoments> {
    if samples < 10_000 {
        return Err(Error::Precondition(format!(
            "need at least 10^4 samples, got {samples}"
        )));
    }
    let (mut sr, mut sr2, mut sm, mut sm2) = (0.0, 0.0, 0.0, 0.0);
    let mut used = 0;
    for _ in 0..samples {
        let h = channel::sample_fading(cfg, &mut *rng);
        let draw = channel::estimate_csi(h, cfg, &mut *rng);
        if !keep(draw.h, draw.h_hat) {
            continue;
        }
        let ratio = draw.h / draw.h_hat;
        let r = ratio.norm_sqr();
        let mm = (ComplexGain::new(1.0, 0.0) - ratio).norm_sqr();
        sr += r;
        sr2 += r * r;
        sm += mm;
        sm2 += mm * mm;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Estimation("every channel draw was discarded".into()));
    }
    let (m_ratio, se_ratio) = mean_and_se(sr, sr2, used);
    let (m_mismatch, se_mismatch) = mean_and_se(sm, sm2, used);
    Ok(ChannelMoments {
        m_ratio,
        m_mismatch,
        se_ratio,
        se_mismatch,
        used,
        discarded: samples - used,
    })
}

/// Monte-Carlo `E|h/h_hat|^2` and `E|1 - h/h_hat|^2`, skipping draws with
/// `|h_hat| < eps_h`.
pub fn channel_moments(
    cfg: &ChannelConfig,
    samples: usize,
    eps_h: f64,
    rng: &mut SimRng,
) -> Result<ChannelMoments> {
    moments_where(cfg, samples, |_, h_hat| h_hat.norm() >= eps_h, rng)
}

/// Same moments restricted to draws with `|h| >= h_min`.
pub fn conditioned_moments(
    cfg: &ChannelConfig,
    samples: usize,
    h_min: f64,
    rng: &mut SimRng,
) -> Result<ChannelMoments> {
    let eps = DEFAULT_DEEP_FADE_THRESHOLD;
    moments_where(
        cfg,
        samples,
        |h, h_hat| h.norm() >= h_min && h_hat.norm() >= eps,
        rng,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    pub opt_err: f64,
    pub channel_noise_err: f64,
    pub local_update_err: f64,
    pub statistical_err: f64,
    pub channel_est_err: f64,
    pub total: f64,
}

impl BoundTerms {
    fn new(opt: f64, noise: f64, local: f64, stat: f64, est: f64) -> Self {
        Self {
            opt_err: opt,
            channel_noise_err: noise,
            local_update_err: local,
            statistical_err: stat,
            channel_est_err: est,
            total: opt + noise + local + stat + est,
        }
    }

    pub const CSV_HEADER: &'static str =
        "opt_err,channel_noise_err,local_update_err,statistical_err,channel_est_err,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.opt_err,
            self.channel_noise_err,
            self.local_update_err,
            self.statistical_err,
            self.channel_est_err,
            self.total
        )
    }

    pub fn to_kv(&self) -> String {
        format!(
            "opt_err = {}\nchannel_noise_err = {}\nlocal_update_err = {}\nstatistical_err = {}\nchannel_est_err = {}\ntotal = {}\n",
            self.opt_err,
            self.channel_noise_err,
            self.local_update_err,
            self.statistical_err,
            self.channel_est_err,
            self.total
        )
    }
}

fn check_eta(c: &BoundConstants, eta: f64) -> Result<()> {
    c.validate()?;
    if !(eta > 0.0) || eta > 1.0 / c.l {
        return Err(Error::Precondition(format!(
            "the bound needs 0 < eta <= 1/L = {}, got eta = {eta}",
            1.0 / c.l
        )));
    }
    Ok(())
}

/// Terms that do not depend on the channel moments.
fn shared_terms(c: &BoundConstants, trace: &RunTrace, eta: f64) -> Result<(f64, f64, f64)> {
    check_eta(c, eta)?;
    let t = trace.rounds.len();
    if t == 0 {
        return Err(Error::Precondition("trace has no rounds".into()));
    }
    let tf = t as f64;
    let m = trace.num_clients();
    let alpha = &trace.meta.weights;

    let opt = 2.0 * c.f0_minus_fstar / (tf * eta);

    let inv_beta2 = trace
        .rounds
        .iter()
        .map(|r| 1.0 / (r.beta_t * r.beta_t))
        .sum::<f64>()
        / tf;
    let noise = c.l * trace.meta.sigma_c2 * inv_beta2 / eta;

    let tau_term: f64 = (0..m)
        .map(|i| {
            let mean_tau2 = trace
                .rounds
                .iter()
                .map(|r| (r.clients[i].tau as f64).powi(2))
                .sum::<f64>()
                / tf;
            alpha[i] * alpha[i] * mean_tau2
        })
        .sum();
    let local = 2.0 * m as f64 * c.l * c.l * eta * eta * c.g2 * tau_term;
    Ok((opt, noise, local))
}

/// Five-term bound on the average squared gradient norm, using the realized
/// `h / h_hat` of every client-round. Absent clients count as `h / h_hat = 0`
/// and `tau = 0`.
pub fn theorem1_bound(c: &BoundConstants, trace: &RunTrace, eta: f64) -> Result<BoundTerms> {
    let (opt, noise, local) = shared_terms(c, trace, eta)?;
    let tf = trace.rounds.len() as f64;
    let alpha = &trace.meta.weights;
    let (mut ratio_sum, mut mismatch_sum) = (0.0, 0.0);
    for r in &trace.rounds {
        for (i, rec) in r.clients.iter().enumerate() {
            let q = rec.ratio();
            let a2 = alpha[i] * alpha[i];
            ratio_sum += a2 * q.norm_sqr();
            mismatch_sum += a2 * (ComplexGain::new(1.0, 0.0) - q).norm_sqr();
        }
    }
    let m = trace.num_clients() as f64;
    let stat = c.l * eta * c.sigma2 * ratio_sum / tf;
    let est = 2.0 * m * c.g2 * mismatch_sum / tf;
    Ok(BoundTerms::new(opt, noise, local, stat, est))
}

/// The same bound with population moments in place of realized ratios.
pub fn theorem1_bound_population(
    c: &BoundConstants,
    trace: &RunTrace,
    eta: f64,
    moments: &ChannelMoments,
) -> Result<BoundTerms> {
    let (opt, noise, local) = shared_terms(c, trace, eta)?;
    let sum_a2: f64 = trace.meta.weights.iter().map(|a| a * a).sum();
    let m = trace.num_clients() as f64;
    let stat = c.l * eta * c.sigma2 * sum_a2 * moments.m_ratio;
    let est = 2.0 * m * c.g2 * sum_a2 * moments.m_mismatch;
    Ok(BoundTerms::new(opt, noise, local, stat, est))
}

/// Small-error bounds on the statistical and channel-estimation terms, with
/// `h_m` the smallest realized `|h|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorollaryTerms {
    pub h_min: f64,
    pub statistical_bound: f64,
    pub channel_est_bound: f64,
}

pub fn corollary_terms(c: &BoundConstants, trace: &RunTrace, eta: f64) -> Result<CorollaryTerms> {
    check_eta(c, eta)?;
    let h_min = trace.min_gain();
    if !(h_min > 0.0) || !h_min.is_finite() {
        return Err(Error::Domain(format!("smallest channel gain is {h_min}")));
    }
    let sum_a2: f64 = trace.meta.weights.iter().map(|a| a * a).sum();
    let m = trace.num_clients() as f64;
    let s2 = trace.meta.sigma_est2;
    Ok(CorollaryTerms {
        h_min,
        statistical_bound: c.l * eta * c.sigma2 * sum_a2 * (1.0 + s2 / (h_min * h_min)),
        channel_est_bound: 2.0 * m * c.g2 * sum_a2 * s2 / (h_min * h_min),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorCheck {
    /// `|1 - h / h_hat|`.
    pub exact: f64,
    /// `|delta / h_hat|`, algebraically equal to `exact`.
    pub first_order: f64,
    /// `|delta / h|`, the leading term for small estimation error.
    pub linear: f64,
    /// `|exact - linear|`.
    pub residual: f64,
}

pub fn taylor_check(h: ComplexGain, delta: ComplexGain) -> Result<TaylorCheck> {
    let h_hat = h + delta;
    let eps = DEFAULT_DEEP_FADE_THRESHOLD;
    if h.norm() < eps || h_hat.norm() < eps {
        return Err(Error::Domain(format!(
            "|h| = {:e} or |h_hat| = {:e} is below {eps:e}",
            h.norm(),
            h_hat.norm()
        )));
    }
    let exact = (ComplexGain::new(1.0, 0.0) - h / h_hat).norm();
    let linear = (delta / h).norm();
    Ok(TaylorCheck {
        exact,
        first_order: (delta / h_hat).norm(),
        linear,
        residual: (exact - linear).abs(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentReport {
    pub mean_grad_norm_sq: f64,
    pub min_grad_norm_sq: f64,
    pub bound_total: f64,
    pub mean_within_bound: bool,
    pub min_within_bound: bool,
}

impl DescentReport {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mean_grad_norm_sq = {}", self.mean_grad_norm_sq);
        let _ = writeln!(s, "min_grad_norm_sq = {}", self.min_grad_norm_sq);
        let _ = writeln!(s, "bound_total = {}", self.bound_total);
        let _ = writeln!(s, "mean_within_bound = {}", self.mean_within_bound);
        let _ = writeln!(s, "min_within_bound = {}", self.min_within_bound);
        s
    }
}

/// Compares seed-averaged squared gradient norms at the evaluation points
/// with the mean bound over the same traces. A violation is reported, not
/// raised.
pub fn descent_check(traces: &[RunTrace], c: &BoundConstants, eta: f64) -> Result<DescentReport> {
    if traces.is_empty() {
        return Err(Error::arg("no traces"));
    }
    let mut bound_total = 0.0;
    for t in traces {
        bound_total += theorem1_bound(c, t, eta)?.total;
    }
    bound_total /= traces.len() as f64;

    let points = traces.iter().map(|t| t.evals.len()).min().unwrap_or(0);
    if points == 0 {
        return Err(Error::arg("traces have no evaluation points"));
    }
    // Exclude the point after the final round, which the bound does not cover.
    let per_point: Vec<f64> = (0..points)
        .map(|k| traces.iter().map(|t| t.evals[k].grad_norm_sq).sum::<f64>() / traces.len() as f64)
        .collect();
    let covered = if points > 1 && traces[0].evals[points - 1].round >= traces[0].rounds.len() {
        &per_point[..points - 1]
    } else {
        &per_point[..]
    };
    let mean = covered.iter().sum::<f64>() / covered.len() as f64;
    let min = covered.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(DescentReport {
        mean_grad_norm_sq: mean,
        min_grad_norm_sq: min,
        bound_total,
        mean_within_bound: mean <= bound_total,
        min_within_bound: min <= bound_total,
    })
}

/// CSV and text rendering of the bound for several saved traces.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub csv: String,
    pub text: String,
    pub terms: Vec<BoundTerms>,
}

/// Evaluates the bound for every trace file with each trace's own step size.
pub fn bound_report(paths: &[std::path::PathBuf], c: &BoundConstants) -> Result<BoundReport> {
    c.validate()?;
    let mut csv = format!(
        "trace,algorithm,csi,channel,seed,T,eta,sigma_c2,{},h_min,statistical_bound,channel_est_bound\n",
        BoundTerms::CSV_HEADER
    );
    let mut text = String::new();
    let _ = writeln!(text, "# constants (estimated)");
    text.push_str(&c.to_kv());
    let mut traces = Vec::new();
    let mut terms = Vec::new();
    for path in paths {
        let trace = RunTrace::read(path)?;
        let eta = trace.meta.eta;
        let b = theorem1_bound(c, &trace, eta)?;
        let k = corollary_terms(c, &trace, eta).ok();
        let name = path.display().to_string();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            name,
            trace.meta.algorithm,
            trace.meta.csi,
            trace.meta.channel,
            trace.meta.seed,
            trace.rounds.len(),
            eta,
            trace.meta.sigma_c2,
            b.csv_row(),
            k.map_or(String::new(), |k| k.h_min.to_string()),
            k.map_or(String::new(), |k| k.statistical_bound.to_string()),
            k.map_or(String::new(), |k| k.channel_est_bound.to_string()),
        );
        let _ = writeln!(text, "\n[{name}]");
        text.push_str(&b.to_kv());
        if let Some(k) = k {
            let _ = writeln!(text, "h_min = {}", k.h_min);
            let _ = writeln!(text, "statistical_bound = {}", k.statistical_bound);
            let _ = writeln!(text, "channel_est_bound = {}", k.channel_est_bound);
        }
        terms.push(b);
        traces.push(trace);
    }
    let evaluated: Vec<RunTrace> = traces.into_iter().filter(|t| !t.evals.is_empty()).collect();
    if let Some(first) = evaluated.first() {
        if evaluated.iter().all(|t| t.meta.eta == first.meta.eta) {
            let d = descent_check(&evaluated, c, first.meta.eta)?;
            let _ = writeln!(text, "\n[descent check over {} traces]", evaluated.len());
            text.push_str(&d.to_kv());
        }
    }
    Ok(BoundReport { csv, text, terms })
}
