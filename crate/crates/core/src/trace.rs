//! Per-run traces and their CSV form.
//!
//! A run with seed `s` writes `seed-<s>.csv` (one row per round and client)
//! and `seed-<s>.eval.csv` (one row per evaluation point). Both start with the
//! schema line `# airfl-trace v1`, followed by `# key=value` metadata lines and
//! a header row. Floats are written in Rust's shortest round-trip form, so
//! reading a trace back gives bit-identical values.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::channel::ComplexGain;
use crate::error::{Error, Result};

pub const SCHEMA_LINE: &str = "# airfl-trace v1";

const ROUND_HEADER: &str = "round,client,beta_t,sigma_c2,imag_residue,tau,tx_power,clipped,clip_scale,absent,h_re,h_im,h_hat_re,h_hat_im,update_norm";
const EVAL_HEADER: &str = "round,train_loss,test_loss,test_accuracy,grad_norm_sq";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceMeta {
    pub algorithm: String,
    pub channel: String,
    pub csi: String,
    pub seed: u64,
    pub rounds: usize,
    pub eta: f64,
    pub labels_per_client: usize,
    pub snr_db: f64,
    pub sigma_h2: f64,
    pub sigma_est2: f64,
    pub sigma_c2: f64,
    pub power: f64,
    pub dim: usize,
    pub classes: usize,
    /// Aggregation weights `alpha_i`, one per client.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientRecord {
    pub tau: usize,
    pub tx_power: f64,
    pub clipped: bool,
    pub clip_scale: f64,
    pub absent: bool,
    pub h: ComplexGain,
    pub h_hat: ComplexGain,
    pub update_norm: f64,
}

impl ClientRecord {
    /// `h / h_hat`, or zero for a client that did not transmit.
    pub fn ratio(&self) -> ComplexGain {
        if self.absent {
            ComplexGain::new(0.0, 0.0)
        } else {
            self.h / self.h_hat
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub beta_t: f64,
    pub imag_residue: f64,
    pub clients: Vec<ClientRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub round: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub grad_norm_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub meta: TraceMeta,
    pub rounds: Vec<RoundRecord>,
    pub evals: Vec<EvalRecord>,
}

impl RunTrace {
    pub fn num_clients(&self) -> usize {
        self.meta.weights.len()
    }

    /// Non-finite loss anywhere, or final accuracy below `1.5 / C`.
    pub fn diverged(&self) -> bool {
        if self
            .evals
            .iter()
            .any(|e| !e.train_loss.is_finite() || !e.test_loss.is_finite())
        {
            return true;
        }
        match self.evals.last() {
            Some(last) => last.test_accuracy < 1.5 / self.meta.classes as f64,
            None => false,
        }
    }

    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// Smallest `|h|` over every client-round.
    pub fn min_gain(&self) -> f64 {
        self.rounds
            .iter()
            .flat_map(|r| r.clients.iter().map(|c| c.h.norm()))
            .fold(f64::INFINITY, f64::min)
    }

    fn meta_lines(&self) -> String {
        let m = &self.meta;
        let weights: Vec<String> = m.weights.iter().map(|w| w.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "{SCHEMA_LINE}");
        for (k, v) in [
            ("algorithm", m.algorithm.clone()),
            ("channel", m.channel.clone()),
            ("csi", m.csi.clone()),
            ("seed", m.seed.to_string()),
            ("T", m.rounds.to_string()),
            ("eta", m.eta.to_string()),
            ("p", m.labels_per_client.to_string()),
            ("snr_db", m.snr_db.to_string()),
            ("sigma_h2", m.sigma_h2.to_string()),
            ("sigma_est2", m.sigma_est2.to_string()),
            ("sigma_c2", m.sigma_c2.to_string()),
            ("P", m.power.to_string()),
            ("d", m.dim.to_string()),
            ("classes", m.classes.to_string()),
            ("weights", weights.join(";")),
        ] {
            let _ = writeln!(s, "# {k}={v}");
        }
        s
    }

    pub fn rounds_csv(&self) -> String {
        let mut s = self.meta_lines();
        s.push_str(ROUND_HEADER);
        s.push('\n');
        for r in &self.rounds {
            for (i, c) in r.clients.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    r.round,
                    i,
                    r.beta_t,
                    self.meta.sigma_c2,
                    r.imag_residue,
                    c.tau,
                    c.tx_power,
                    u8::from(c.clipped),
                    c.clip_scale,
                    u8::from(c.absent),
                    c.h.re,
                    c.h.im,
                    c.h_hat.re,
                    c.h_hat.im,
                    c.update_norm
                );
            }
        }
        s
    }

    pub fn eval_csv(&self) -> String {
        let mut s = self.meta_lines();
        s.push_str(EVAL_HEADER);
        s.push('\n');
        for e in &self.evals {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                e.round, e.train_loss, e.test_loss, e.test_accuracy, e.grad_norm_sq
            );
        }
        s
    }

    pub fn file_names(seed: u64) -> (String, String) {
        (format!("seed-{seed}.csv"), format!("seed-{seed}.eval.csv"))
    }

    /// Writes both files into `dir` and returns their paths.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let (rounds_name, eval_name) = Self::file_names(self.meta.seed);
        let rounds_path = dir.join(rounds_name);
        let eval_path = dir.join(eval_name);
        fs::write(&rounds_path, self.rounds_csv())?;
        fs::write(&eval_path, self.eval_csv())?;
        Ok((rounds_path, eval_path))
    }

    /// Reads a `seed-<s>.csv` file and, when present, its `.eval.csv` sibling.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut trace = Self::parse_rounds(&text)?;
        let eval_path = eval_sibling(path);
        if eval_path.is_file() {
            let eval_text = fs::read_to_string(&eval_path)?;
            let (meta, evals) = parse_evals(&eval_text)?;
            if meta != trace.meta {
                return Err(Error::Format(format!(
                    "{} does not belong to {}",
                    eval_path.display(),
                    path.display()
                )));
            }
            trace.evals = evals;
        }
        Ok(trace)
    }

    pub fn parse_rounds(text: &str) -> Result<Self> {
        let (meta, rows) = split_file(text, ROUND_HEADER)?;
        let m = meta.weights.len();
        let mut rounds: Vec<RoundRecord> = Vec::new();
        for (lineno, row) in rows {
            let f = Fields::new(row, 15, lineno)?;
            let round: usize = f.get(0)?;
            let client: usize = f.get(1)?;
            let record = ClientRecord {
                tau: f.get(5)?,
                tx_power: f.get(6)?,
                clipped: f.flag(7)?,
                clip_scale: f.get(8)?,
                absent: f.flag(9)?,
                h: ComplexGain::new(f.get(10)?, f.get(11)?),
                h_hat: ComplexGain::new(f.get(12)?, f.get(13)?),
                update_norm: f.get(14)?,
            };
            if client == 0 {
                rounds.push(RoundRecord {
                    round,
                    beta_t: f.get(2)?,
                    imag_residue: f.get(4)?,
                    clients: Vec::with_capacity(m),
                });
            }
            let current = rounds
                .last_mut()
                .filter(|r| r.round == round && r.clients.len() == client)
                .ok_or_else(|| Error::Format(format!("line {lineno}: rows out of order")))?;
            current.clients.push(record);
        }
        for (t, r) in rounds.iter().enumerate() {
            if r.round != t || r.clients.len() != m {
                return Err(Error::Format(format!(
                    "round {} has {} clients, expected round {t} with {m}",
                    r.round,
                    r.clients.len()
                )));
            }
        }
        Ok(Self {
            meta,
            rounds,
            evals: Vec::new(),
        })
    }
}

fn eval_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let stem = name.strip_suffix(".csv").unwrap_or(name);
    path.with_file_name(format!("{stem}.eval.csv"))
}

fn parse_evals(text: &str) -> Result<(TraceMeta, Vec<EvalRecord>)> {
    let (meta, rows) = split_file(text, EVAL_HEADER)?;
    let mut evals = Vec::new();
    for (lineno, row) in rows {
        let f = Fields::new(row, 5, lineno)?;
        evals.push(EvalRecord {
            round: f.get(0)?,
            train_loss: f.get(1)?,
            test_loss: f.get(2)?,
            test_accuracy: f.get(3)?,
            grad_norm_sq: f.get(4)?,
        });
    }
    if evals.windows(2).any(|w| w[0].round >= w[1].round) {
        return Err(Error::Format("eval rows are not ordered by round".into()));
    }
    Ok((meta, evals))
}

type Rows<'a> = Vec<(usize, &'a str)>;

fn split_file<'a>(text: &'a str, header: &str) -> Result<(TraceMeta, Rows<'a>)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == SCHEMA_LINE => {}
        Some((_, l)) => {
            return Err(Error::Format(format!(
                "expected `{SCHEMA_LINE}` on the first line, got `{l}`"
            )))
        }
        None => return Err(Error::Format("empty trace".into())),
    }
    let mut pairs = Vec::new();
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (i, line) in lines {
        if !saw_header {
            if let Some(kv) = line.strip_prefix("# ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| {
                    Error::Format(format!("line {}: bad metadata `{line}`", i + 1))
                })?;
                pairs.push((k.to_string(), v.to_string()));
                continue;
            }
            if line != header {
                return Err(Error::Format(format!(
                    "line {}: unexpected column header `{line}`",
                    i + 1
                )));
            }
            saw_header = true;
        } else if !line.is_empty() {
            rows.push((i + 1, line));
        }
    }
    if !saw_header {
        return Err(Error::Format("missing column header".into()));
    }
    Ok((meta_from_pairs(&pairs)?, rows))
}

fn meta_from_pairs(pairs: &[(String, String)]) -> Result<TraceMeta> {
    let get = |key: &str| -> Result<&str> {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("missing metadata `{key}`")))
    };
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::Format(format!("metadata `{key}`: cannot parse `{v}`")))
    }
    let weights = get("weights")?
        .split(';')
        .filter(|s| !s.is_empty())
        .map(|w| num("weights", w))
        .collect::<Result<Vec<f64>>>()?;
    Ok(TraceMeta {
        algorithm: get("algorithm")?.to_string(),
        channel: get("channel")?.to_string(),
        csi: get("csi")?.to_string(),
        seed: num("seed", get("seed")?)?,
        rounds: num("T", get("T")?)?,
        eta: num("eta", get("eta")?)?,
        labels_per_client: num("p", get("p")?)?,
        snr_db: num("snr_db", get("snr_db")?)?,
        sigma_h2: num("sigma_h2", get("sigma_h2")?)?,
        sigma_est2: num("sigma_est2", get("sigma_est2")?)?,
        sigma_c2: num("sigma_c2", get("sigma_c2")?)?,
        power: num("P", get("P")?)?,
        dim: num("d", get("d")?)?,
        classes: num("classes", get("classes")?)?,
        weights,
    })
}

struct Fields<'a> {
    parts: Vec<&'a str>,
    lineno: usize,
}

impl<'a> Fields<'a> {
    fn new(row: &'a str, expected: usize, lineno: usize) -> Result<Self> {
        let parts: Vec<&str> = row.split(',').collect();
        if parts.len() != expected {
            return Err(Error::Format(format!(
                "line {lineno}: expected {expected} columns, found {}",
                parts.len()
            )));
        }
        Ok(Self { parts, lineno })
    }

    fn get<T: std::str::FromStr>(&self, i: usize) -> Result<T> {
        self.parts[i].parse().map_err(|_| {
            Error::Format(format!(
                "line {}: cannot parse column {} value `{}`",
                self.lineno,
                i + 1,
                self.parts[i]
            ))
        })
    }

    fn flag(&self, i: usize) -> Result<bool> {
        match self.parts[i] {
            "0" => Ok(false),
            "1" => Ok(true),
            v => Err(Error::Format(format!(
                "line {}: expected 0/1, got `{v}`",
                self.lineno
            ))),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample_trace() -> RunTrace {
        let c = |tau, h: (f64, f64), hh: (f64, f64)| ClientRecord {
            tau,
            tx_power: 0.75,
            clipped: tau == 3,
            clip_scale: if tau == 3 { 0.5 } else { 1.0 },
            absent: false,
            h: ComplexGain::new(h.0, h.1),
            h_hat: ComplexGain::new(hh.0, hh.1),
            update_norm: 0.1 * tau as f64,
        };
        RunTrace {
            meta: TraceMeta {
                algorithm: "charles".into(),
                channel: "fading".into(),
                csi: "imperfect".into(),
                seed: 7,
                rounds: 2,
                eta: 0.1,
                labels_per_client: 2,
                snr_db: 10.0,
                sigma_h2: 1.0,
                sigma_est2: 0.1,
                sigma_c2: 1e-3 / 3.0,
                power: 1.0,
                dim: 4,
                classes: 10,
                weights: vec![0.5, 0.5],
            },
            rounds: vec![
                RoundRecord {
                    round: 0,
                    beta_t: 2.0,
                    imag_residue: 0.125,
                    clients: vec![c(1, (1.0, 0.0), (0.5, 0.5)), c(3, (-0.2, 0.1), (-0.3, 0.0))],
                },
                RoundRecord {
                    round: 1,
                    beta_t: 2.0,
                    imag_residue: 1.0 / 7.0,
                    clients: vec![c(2, (0.3, -0.4), (0.3, -0.4)), c(1, (2.0, 1.0), (1.5, 1.0))],
                },
            ],
            evals: vec![
                EvalRecord {
                    round: 0,
                    train_loss: 2.25,
                    test_loss: 2.31,
                    test_accuracy: 0.1,
                    grad_norm_sq: 0.5,
                },
                EvalRecord {
                    round: 2,
                    train_loss: 1.2,
                    test_loss: 1.3,
                    test_accuracy: 0.62,
                    grad_norm_sq: 0.05,
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let trace = sample_trace();
        let (path, _) = trace.write(dir.path()).unwrap();
        assert_eq!(path.file_name().unwrap(), "seed-7.csv");
        assert_eq!(RunTrace::read(&path).unwrap(), trace);
    }

    #[test]
    fn schema_line_is_checked() {
        let text = sample_trace().rounds_csv().replacen("v1", "v2", 1);
        assert!(matches!(
            RunTrace::parse_rounds(&text),
            Err(Error::Format(_))
        ));
        let text = sample_trace().rounds_csv().replace("update_norm", "norm");
        assert!(matches!(
            RunTrace::parse_rounds(&text),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn missing_rows_are_format_errors() {
        let text = sample_trace().rounds_csv();
        let truncated: String = text
            .lines()
            .take(text.lines().count() - 1)
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(
            RunTrace::parse_rounds(&truncated),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn divergence_flag() {
        let mut t = sample_trace();
        assert!(!t.diverged());
        t.evals[1].test_accuracy = 0.149;
        assert!(t.diverged());
        t.evals[1].test_accuracy = 0.9;
        t.evals[0].train_loss = f64::NAN;
        assert!(t.diverged());
    }
}
