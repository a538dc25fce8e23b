//! Seeded experiment driver: data preparation, the round loop, evaluation
//! and output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::algorithms::{
    run_round, Client, EngineRegistry, RoundEngine, RoundEnv, RoundResult, RoundSettings,
};
use crate::bounds::{self, GradientSampling};
use crate::config::{DatasetKind, ExperimentConfig, DATA_DIR_ENV};
use crate::data::{
    load_mnist_dir, partition_noniid, synthetic_logreg, ClientPartition, Dataset, MnistSplit,
};
use crate::error::{Error, Result};
use crate::model::{evaluate, ModelVector, Objective, SoftmaxObjective};
use crate::rng::{substream, Purpose, NO_ROUND, SERVER};
use crate::trace::{ClientRecord, EvalRecord, RoundRecord, RunTrace, TraceMeta};

pub const SUMMARY_FILE: &str = "summary.csv";
const SUMMARY_SCHEMA: &str = "# airfl-summary v1";

/// Training and test sets for one configuration.
pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    match cfg.dataset {
        DatasetKind::Mnist => {
            let dir = cfg.data_dir().ok_or_else(|| {
                Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("no MNIST directory: set {DATA_DIR_ENV} or `data_dir`"),
                ))
            })?;
            let mut train = load_mnist_dir(&dir, MnistSplit::Train)?;
            if cfg.train_limit > 0 && cfg.train_limit < train.len() {
                let keep: Vec<usize> = (0..cfg.train_limit).collect();
                train = train.subset(&keep)?;
            }
            let test = load_mnist_dir(&dir, MnistSplit::Test)?;
            Ok(Datasets { train, test })
        }
        DatasetKind::Synthetic => {
            let s = &cfg.synthetic;
            let all = synthetic_logreg(
                s.features,
                s.train_samples + s.test_samples,
                s.classes,
                s.separation,
                s.data_seed,
            )?;
            let n = s.train_samples;
            let train_idx: Vec<usize> = (0..n).collect();
            let test_idx: Vec<usize> = (n..all.len()).collect();
            Ok(Datasets {
                train: all.subset(&train_idx)?,
                test: all.subset(&test_idx)?,
            })
        }
    }
}

/// Per-client objectives over a shared training set.
pub struct Federation<'a> {
    objectives: Vec<SoftmaxObjective<'a>>,
    weights: Vec<f64>,
}

impl<'a> Federation<'a> {
    pub fn new(train: &'a Dataset, partition: &'a ClientPartition) -> Self {
        Self {
            objectives: partition
                .shards
                .iter()
                .map(|s| SoftmaxObjective::on_shard(train, s))
                .collect(),
            weights: partition.weights.clone(),
        }
    }

    pub fn clients(&self) -> Vec<Client<'_>> {
        self.objectives
            .iter()
            .zip(&self.weights)
            .map(|(o, &weight)| Client {
                objective: o as &dyn Objective,
                weight,
            })
            .collect()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.objectives.first().map_or(0, |o| o.dim())
    }

    /// Weighted training loss and squared norm of the weighted full gradient.
    pub fn global_loss_and_grad_norm_sq(&self, x: &[f64]) -> Result<(f64, f64)> {
        let parts: Vec<(f64, ModelVector)> = self
            .objectives
            .par_iter()
            .map(|o| o.full_loss_and_grad(x))
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut grad = ModelVector::zeros(x.len());
        for ((l, g), &w) in parts.iter().zip(&self.weights) {
            loss += w * l;
            grad.axpy(w, g);
        }
        Ok((loss, grad.norm_sq()))
    }
}

/// A single seeded run that can be advanced one round at a time.
pub struct Simulation<'a> {
    engine: Box<dyn RoundEngine>,
    clients: &'a [Client<'a>],
    settings: RoundSettings,
    seed: u64,
    round: usize,
    model: ModelVector,
}

impl<'a> Simulation<'a> {
    /// Validates the settings and calibrates `engine` at `x0`.
    pub fn new(
        mut engine: Box<dyn RoundEngine>,
        clients: &'a [Client<'a>],
        settings: RoundSettings,
        seed: u64,
        x0: ModelVector,
    ) -> Result<Self> {
        settings.validate()?;
        if clients.is_empty() {
            return Err(Error::arg("need at least one client"));
        }
        let env = RoundEnv {
            seed,
            round: 0,
            clients,
            settings: &settings,
        };
        engine.calibrate(&x0, &env)?;
        Ok(Self {
            engine,
            clients,
            settings,
            seed,
            round: 0,
            model: x0,
        })
    }

    pub fn step(&mut self) -> Result<RoundResult> {
        let env = RoundEnv {
            seed: self.seed,
            round: self.round,
            clients: self.clients,
            settings: &self.settings,
        };
        let result = run_round(self.engine.as_mut(), &self.model, &env)?;
        self.model = result.new_global.clone();
        self.round += 1;
        Ok(result)
    }

    pub fn model(&self) -> &ModelVector {
        &self.model
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn settings(&self) -> &RoundSettings {
        &self.settings
    }
}

fn record_round(result: &RoundResult, round: usize) -> RoundRecord {
    RoundRecord {
        round,
        beta_t: result.beta_t,
        imag_residue: result.imag_residue_norm,
        clients: result
            .reports
            .iter()
            .map(|r| ClientRecord {
                tau: r.tau,
                tx_power: r.tx_power,
                clipped: r.clipped,
                clip_scale: r.clip_scale,
                absent: r.absent,
                h: r.draw.h,
                h_hat: r.draw.h_hat,
                update_norm: r.update.norm(),
            })
            .collect(),
    }
}

/// One seed's trace and, when requested, its bound report text.
pub struct SeedOutcome {
    pub trace: RunTrace,
    pub bound_report: Option<String>,
}

/// Runs every round of one seed.
pub fn run_seed(
    cfg: &ExperimentConfig,
    data: &Datasets,
    partition: &ClientPartition,
    registry: &EngineRegistry,
    seed: u64,
) -> Result<SeedOutcome> {
    let federation = Federation::new(&data.train, partition);
    let clients = federation.clients();
    let d = federation.dim();
    let settings = cfg.round_settings(d)?;
    let engine = registry.create(&cfg.algorithm, &cfg.engine_params())?;
    let x0 = ModelVector::zeros(d);
    let mut sim = Simulation::new(engine, &clients, settings, seed, x0.clone())?;

    let eval = |x: &ModelVector, round: usize| -> Result<EvalRecord> {
        let (train_loss, grad_norm_sq) = federation.global_loss_and_grad_norm_sq(x)?;
        let (test_loss, test_accuracy) = evaluate(x, &data.test)?;
        Ok(EvalRecord {
            round,
            train_loss,
            test_loss,
            test_accuracy,
            grad_norm_sq,
        })
    };

    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut evals = Vec::new();
    for t in 0..cfg.rounds {
        if t % cfg.eval_every == 0 {
            evals.push(eval(sim.model(), t)?);
        }
        let result = sim.step()?;
        rounds.push(record_round(&result, t));
        if !result.new_global.is_finite() {
            break;
        }
    }
    let last = sim.round();
    if evals.last().is_none_or(|e| e.round != last) {
        evals.push(eval(sim.model(), last)?);
    }

    let trace = RunTrace {
        meta: TraceMeta {
            algorithm: cfg.algorithm.clone(),
            channel: cfg.channel_mode.to_string(),
            csi: cfg.csi.to_string(),
            seed,
            rounds: cfg.rounds,
            eta: cfg.eta,
            labels_per_client: cfg.labels_per_client,
            snr_db: cfg.snr_db,
            sigma_h2: cfg.sigma_h2,
            sigma_est2: cfg.sigma_est2,
            sigma_c2: sim.settings().channel.sigma_c2,
            power: cfg.power,
            dim: d,
            classes: data.train.num_classes(),
            weights: federation.weights().to_vec(),
        },
        rounds,
        evals,
    };

    let bound_report = if cfg.bound_probes > 0 {
        let objectives: Vec<&dyn Objective> = clients.iter().map(|c| c.objective).collect();
        let mut rng = substream(seed, NO_ROUND, SERVER, Purpose::Probe);
        let constants = bounds::estimate_constants(
            &objectives,
            federation.weights(),
            &x0,
            cfg.bound_probes,
            GradientSampling::SingleSample,
            &mut rng,
        )?;
        Some(bound_report_text(&constants, &trace, cfg.eta))
    } else {
        None
    };
    Ok(SeedOutcome {
        trace,
        bound_report,
    })
}

/// Key-value report of the constants, the five terms, the small-error bounds
/// and the descent comparison. Preconditions that fail are reported inline.
pub fn bound_report_text(c: &bounds::BoundConstants, trace: &RunTrace, eta: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# estimated constants");
    s.push_str(&c.to_kv());
    let _ = writeln!(s, "eta = {eta}");
    match bounds::theorem1_bound(c, trace, eta) {
        Ok(terms) => {
            let _ = writeln!(s, "# bound terms");
            s.push_str(&terms.to_kv());
            if let Ok(k) = bounds::corollary_terms(c, trace, eta) {
                let _ = writeln!(s, "h_min = {}", k.h_min);
                let _ = writeln!(s, "statistical_bound = {}", k.statistical_bound);
                let _ = writeln!(s, "channel_est_bound = {}", k.channel_est_bound);
            }
            if let Ok(r) = bounds::descent_check(std::slice::from_ref(trace), c, eta) {
                s.push_str(&r.to_kv());
            }
        }
        Err(e) => {
            let _ = writeln!(s, "bound_unavailable = {e}");
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_accuracy: f64,
    pub final_train_loss: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seeds: Vec<SeedSummary>,
}

impl RunSummary {
    pub fn from_traces<'t>(traces: impl IntoIterator<Item = &'t RunTrace>) -> Self {
        Self {
            seeds: traces
                .into_iter()
                .map(|t| {
                    let last = t.final_eval();
                    SeedSummary {
                        seed: t.meta.seed,
                        final_accuracy: last.map_or(f64::NAN, |e| e.test_accuracy),
                        final_train_loss: last.map_or(f64::NAN, |e| e.train_loss),
                        diverged: t.diverged(),
                    }
                })
                .collect(),
        }
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.seeds.iter().map(|s| s.final_accuracy).sum::<f64>() / self.seeds.len() as f64
    }

    /// Sample standard deviation (zero for a single seed).
    pub fn std_accuracy(&self) -> f64 {
        let n = self.seeds.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean_accuracy();
        let ss: f64 = self
            .seeds
            .iter()
            .map(|s| (s.final_accuracy - mean).powi(2))
            .sum();
        (ss / (n - 1) as f64).sqrt()
    }

    pub fn diverged_count(&self) -> usize {
        self.seeds.iter().filter(|s| s.diverged).count()
    }

    /// More than half of the seeds diverged.
    pub fn majority_diverged(&self) -> bool {
        2 * self.diverged_count() > self.seeds.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{SUMMARY_SCHEMA}");
        let _ = writeln!(s, "seed,final_test_accuracy,final_train_loss,diverged");
        for r in &self.seeds {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.seed,
                r.final_accuracy,
                r.final_train_loss,
                u8::from(r.diverged)
            );
        }
        let _ = writeln!(
            s,
            "mean,{},,{}",
            self.mean_accuracy(),
            self.diverged_count()
        );
        let _ = writeln!(s, "std,{},,", self.std_accuracy());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(SUMMARY_SCHEMA) {
            return Err(Error::Format(format!(
                "summary must start with `{SUMMARY_SCHEMA}`"
            )));
        }
        if lines.next() != Some("seed,final_test_accuracy,final_train_loss,diverged") {
            return Err(Error::Format("unexpected summary header".into()));
        }
        let bad = |l: &str| Error::Format(format!("bad summary row `{l}`"));
        let mut seeds = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(bad(line));
            }
            if parts[0] == "mean" || parts[0] == "std" {
                continue;
            }
            seeds.push(SeedSummary {
                seed: parts[0].parse().map_err(|_| bad(line))?,
                final_accuracy: parts[1].parse().map_err(|_| bad(line))?,
                final_train_loss: parts[2].parse().map_err(|_| bad(line))?,
                diverged: match parts[3] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad(line)),
                },
            });
        }
        if seeds.is_empty() {
            return Err(Error::Format("summary lists no seeds".into()));
        }
        Ok(Self { seeds })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(dir.join(SUMMARY_FILE))?)
    }
}

/// Everything a finished run produced.
pub struct RunOutput {
    pub traces: Vec<RunTrace>,
    pub summary: RunSummary,
    pub files: Vec<PathBuf>,
}

/// Runs every seed (in parallel when enabled) and writes the per-seed traces,
/// optional bound reports and `summary.csv` into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let data = load_datasets(cfg)?;
    run_with_data(cfg, &data, out)
}

pub fn run_with_data(cfg: &ExperimentConfig, data: &Datasets, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let partition = partition_noniid(&data.train, cfg.clients, cfg.labels_per_client)?;
    let registry = EngineRegistry::default();
    let one = |&seed: &u64| run_seed(cfg, data, &partition, &registry, seed);
    let outcomes: Vec<SeedOutcome> = if cfg.parallel {
        cfg.seeds.par_iter().map(one).collect::<Result<_>>()?
    } else {
        cfg.seeds.iter().map(one).collect::<Result<_>>()?
    };

    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for o in &outcomes {
        let (a, b) = o.trace.write(out)?;
        files.extend([a, b]);
        if let Some(report) = &o.bound_report {
            let path = out.join(format!("seed-{}.bound.txt", o.trace.meta.seed));
            fs::write(&path, report)?;
            files.push(path);
        }
    }
    let traces: Vec<RunTrace> = outcomes.into_iter().map(|o| o.trace).collect();
    let summary = RunSummary::from_traces(&traces);
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, summary.to_csv())?;
    files.push(path);
    Ok(RunOutput {
        traces,
        summary,
        files,
    })
}
