//! Initialization, federated rounds, baselines, persistence and resume.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod monitor;

pub use checkpoint::{latest_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{Baseline, DataSource, FederationConfig, InitMode};
pub use dataset::{load_dataset, write_synth, Dataset};
pub use monitor::ConvergenceMonitor;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{
    align_bank, client_update, extract_all_memories, max_patch_norm, memory_reduce, ClientModel, ClientModelState, MemoryBank,
    UpdateTrace,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport, TestItem};
use crate::numerics::io::{tensor_from_bytes, tensor_to_bytes, Container};
use crate::numerics::{rng::tags, SeedStream};
use crate::server::{aggregate, plain_average, CommLedger, Direction};

/// One line of `metrics.jsonl`. Wall time goes to a separate file so the
/// metrics stay a pure function of config and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundMetrics {
    pub round: u64,
    /// Mean batch loss per client (empty at round 0, where nothing trains).
    pub client_loss: Vec<f64>,
    /// Mean squared gradient norm per client.
    pub client_grad_sq: Vec<f64>,
    pub r_hat: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub messages: usize,
}

impl RoundMetrics {
    pub fn mean_loss(&self) -> f64 {
        mean(&self.client_loss)
    }

    pub fn mean_grad_sq(&self) -> f64 {
        mean(&self.client_grad_sq)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// In-memory state of a simulated federation.
#[derive(Clone, Debug)]
pub struct Federation {
    pub cfg: FederationConfig,
    pub data: Dataset,
    pub clients: Vec<ClientModelState>,
    /// `None` for the local-only baseline.
    pub global: Option<MemoryBank>,
    pub ledger: CommLedger,
    pub monitor: ConvergenceMonitor,
    pub history: Vec<RoundMetrics>,
    /// Last completed round.
    pub round: u64,
}

fn send(bank: &MemoryBank) -> Vec<u8> {
    tensor_to_bytes(&bank.patches)
}

fn receive(bytes: &[u8], round: u64) -> Result<MemoryBank> {
    MemoryBank::new(tensor_from_bytes(bytes)?, round)
}

/// Fresh, untrained client model shaped for `cin` input channels.
pub fn new_client_model(cfg: &FederationConfig, cin: usize, n: usize) -> Result<ClientModel<f32>> {
    let stream = match cfg.init {
        InitMode::Shared => 0,
        InitMode::PerClient => n as u64,
    };
    let mut rng = SeedStream::new(cfg.seed).path(&[tags::INIT, stream]).rng(0);
    ClientModel::init(cin, &cfg.model, &mut rng)
}

impl Federation {
    /// Per-client init, round-0 reduce, aggregation and distribution.
    pub fn initialize(cfg: FederationConfig) -> Result<Self> {
        cfg.validate()?;
        let data = load_dataset(&cfg)?;
        Self::initialize_with(cfg, data)
    }

    pub fn initialize_with(cfg: FederationConfig, data: Dataset) -> Result<Self> {
        let (h, w, cin) = data.fused_dims()?;
        cfg.train.validate(h * w)?;
        if let Some(dims) = cfg.bank_dims() {
            if dims != (h, w, cfg.model.memory_channels) {
                return Err(Error::dim(format!("fused features are {h}×{w}, extractor declares {dims:?}")));
            }
        }
        for x in data.clients.iter().flatten().chain(data.test.iter().map(|t| &t.fused)) {
            if x.hwc()? != (h, w, cin) {
                return Err(Error::dim(format!("sample dims {:?} differ from {:?}", x.dims(), (h, w, cin))));
            }
        }
        let clients: Vec<ClientModelState> = (0..cfg.clients)
            .into_par_iter()
            .map(|n| {
                let model = new_client_model(&cfg, cin, n)?;
                let mems = extract_all_memories(&model, &data.clients[n])?;
                let bank = memory_reduce(&mems, None, 0)?;
                Ok(ClientModelState::new(n, model, &cfg.train, bank))
            })
            .collect::<Result<_>>()?;
        let mut fed = Self {
            cfg,
            data,
            clients,
            global: None,
            ledger: CommLedger::default(),
            monitor: ConvergenceMonitor::default(),
            history: Vec::new(),
            round: 0,
        };
        for s in &fed.clients {
            fed.monitor.observe_norm(s.bank.max_patch_norm());
        }
        fed.exchange(0)?;
        let m = fed.metrics(0, &[]);
        fed.history.push(m);
        Ok(fed)
    }

    /// Uploads every client bank, aggregates and distributes the result.
    fn exchange(&mut self, t: u64) -> Result<()> {
        let baseline = self.cfg.baseline;
        if baseline == Baseline::LocalOnly {
            return Ok(());
        }
        let mut received = Vec::with_capacity(self.clients.len());
        for s in &self.clients {
            let msg = send(&s.bank);
            self.ledger.record_exchange(t, s.id, Direction::Up, msg.len() as u64);
            received.push(receive(&msg, t)?);
        }
        let global = match baseline {
            Baseline::PlainAverage => plain_average(&received, t)?,
            _ => {
                let mut rng = SeedStream::new(self.cfg.seed).path(&[tags::KMEANS, t]).rng(0);
                aggregate(&received, &self.cfg.aggregation, t, &mut rng)?.0
            }
        };
        self.monitor.observe_norm(global.max_patch_norm());
        let msg = send(&global);
        for s in &mut self.clients {
            self.ledger.record_exchange(t, s.id, Direction::Down, msg.len() as u64);
            s.bank = receive(&msg, t)?;
        }
        self.global = Some(global);
        Ok(())
    }

    fn metrics(&self, t: u64, traces: &[UpdateTrace]) -> RoundMetrics {
        let (bytes_up, bytes_down) = self.ledger.round_totals(t);
        RoundMetrics {
            round: t,
            client_loss: traces.iter().map(|tr| mean(&tr.losses)).collect(),
            client_grad_sq: traces.iter().map(|tr| mean(&tr.grad_sq_norms)).collect(),
            r_hat: self.monitor.r_hat,
            bytes_up,
            bytes_down,
            messages: self.ledger.message_count(t),
        }
    }

    /// One round: local training, memory-reduce, upload, aggregate, download.
    pub fn run_round(&mut self) -> Result<&RoundMetrics> {
        let t = self.round + 1;
        let cfg = &self.cfg;
        let shuffle = SeedStream::new(cfg.seed).fork(tags::SHUFFLE);
        let results: Vec<(UpdateTrace, MemoryBank, f64)> = self
            .clients
            .par_iter_mut()
            .zip(self.data.clients.par_iter())
            .map(|(s, d)| {
                let r_bank = s.bank.max_patch_norm();
                let trace = client_update(s, d, &cfg.train, t, &shuffle)?;
                let mems = extract_all_memories(&s.model, d)?;
                let r_mem = mems.iter().map(max_patch_norm).fold(0.0, f64::max);
                let prev = if cfg.align_prev_bank {
                    align_bank(&s.bank, &mems)?
                } else {
                    s.bank.clone()
                };
                let reduced = memory_reduce(&mems, Some(&prev), t)?;
                Ok((trace, reduced, r_bank.max(r_mem)))
            })
            .collect::<Result<_>>()?;
        let mut traces = Vec::with_capacity(results.len());
        for (s, (trace, reduced, r)) in self.clients.iter_mut().zip(results) {
            self.monitor.observe_norm(r.max(trace.max_patch_norm).max(reduced.max_patch_norm()));
            s.bank = reduced;
            traces.push(trace);
        }
        for tr in &traces {
            for (&l, &g) in tr.losses.iter().zip(&tr.grad_sq_norms) {
                self.monitor.record(l, g)?;
            }
        }
        self.exchange(t)?;
        self.round = t;
        let m = self.metrics(t, &traces);
        self.history.push(m);
        Ok(self.history.last().expect("just pushed"))
    }

    /// Mean over clients of each client's model scored against the bank it holds.
    pub fn evaluate(&self) -> Result<StageResult> {
        evaluate_clients(
            self.clients.iter().map(|s| (&s.model, &s.bank)),
            &self.data.test,
            &self.cfg.eval,
        )
    }
}

/// Client-averaged detection metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageResult {
    pub i_auroc: f64,
    pub p_auroc: Option<f64>,
    pub pro: Option<f64>,
    pub per_client: Vec<EvalReport>,
}

pub fn evaluate_clients<'a>(
    pairs: impl Iterator<Item = (&'a ClientModel<f32>, &'a MemoryBank)>,
    test: &[TestItem],
    cfg: &EvalConfig,
) -> Result<StageResult> {
    let per_client: Vec<EvalReport> = pairs.map(|(m, b)| evaluate(m, b, test, cfg)).collect::<Result<_>>()?;
    if per_client.is_empty() {
        return Err(Error::contract("no clients to evaluate"));
    }
    let opt_mean = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
        let v: Option<Vec<f64>> = per_client.iter().map(f).collect();
        v.map(|v| mean(&v))
    };
    Ok(StageResult {
        i_auroc: mean(&per_client.iter().map(|r| r.i_auroc).collect::<Vec<_>>()),
        p_auroc: opt_mean(&|r| r.p_auroc),
        pro: opt_mean(&|r| r.pro),
        per_client,
    })
}

pub fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn client_file(dir: &Path, n: usize) -> PathBuf {
    dir.join("clients").join(format!("client_{n}.fdm"))
}

/// Parameters plus the local bank as one container.
pub fn client_container(s: &ClientModelState) -> Container {
    let mut c = s.model.to_container();
    c.push("bank", s.bank.patches.clone());
    c
}

/// Writes `global_bank.fdm` (when present) and `clients/client_n.fdm`.
pub fn write_models(dir: &Path, fed: &Federation) -> Result<()> {
    mkdir(&dir.join("clients"))?;
    if let Some(g) = &fed.global {
        crate::numerics::io::write_tensor(&dir.join("global_bank.fdm"), &g.patches)?;
    }
    for s in &fed.clients {
        client_container(s).write(&client_file(dir, s.id))?;
    }
    Ok(())
}

/// Reloads the per-client models and banks written by [`write_models`].
pub fn read_models(dir: &Path, cfg: &FederationConfig, cin: usize) -> Result<Vec<(ClientModel<f32>, MemoryBank)>> {
    (0..cfg.clients)
        .map(|n| {
            let c = Container::read(&client_file(dir, n))?;
            let mut model = new_client_model(cfg, cin, n)?;
            model.load_container(&c)?;
            let bank = MemoryBank::new(c.get("bank")?.clone(), 0)?;
            Ok((model, bank))
        })
        .collect()
}

/// Appends single-writer JSON lines.
struct JsonLines {
    file: fs::File,
    path: PathBuf,
}

impl JsonLines {
    fn append(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    fn write<T: Serialize>(&mut self, v: &T) -> Result<()> {
        let line = serde_json::to_string(v).expect("metrics serialize");
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Serialize)]
struct Timing {
    round: u64,
    wall_ms: f64,
}

/// Reads `metrics.jsonl`.
pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    read_metrics_prefix(path, usize::MAX)
}

/// Reads at most the first `n` metric lines; anything after them is ignored.
pub fn read_metrics_prefix(path: &Path, n: usize) -> Result<Vec<RoundMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .take(n)
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

fn truncate_lines(path: &Path, keep: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for l in text.lines().take(keep) {
        out.push_str(l);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Initializes (or resumes from the newest checkpoint under `out`), runs the
/// remaining rounds and persists everything under `out`.
pub fn run_training(cfg: FederationConfig, out: &Path, resume: bool) -> Result<Federation> {
    cfg.validate()?;
    mkdir(out)?;
    let metrics_path = out.join("metrics.jsonl");
    let timing_path = out.join("timing.jsonl");
    let mut fed = match resume.then(|| latest_checkpoint(out)).transpose()?.flatten() {
        Some(dir) => {
            let mut fed = load_checkpoint(&dir, cfg)?;
            log::info!("resuming at round {} from {}", fed.round, dir.display());
            let keep = fed.round as usize + 1;
            let on_disk = if metrics_path.exists() { read_metrics_prefix(&metrics_path, keep)? } else { Vec::new() };
            if on_disk.len() < keep || on_disk[keep - 1].round != fed.round {
                return Err(Error::Format("metrics.jsonl does not reach the checkpoint round".into()));
            }
            fed.history = on_disk;
            truncate_lines(&metrics_path, keep)?;
            truncate_lines(&timing_path, keep)?;
            fs::write(out.join("config.json"), fed.cfg.to_json()).map_err(|e| Error::io(out, e))?;
            fed
        }
        None => {
            if resume {
                log::warn!("no checkpoint under {}, starting fresh", out.display());
            }
            let start = Instant::now();
            let fed = Federation::initialize(cfg)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            fs::write(out.join("config.json"), fed.cfg.to_json()).map_err(|e| Error::io(out, e))?;
            write_models(&out.join("init"), &fed)?;
            fs::write(&metrics_path, "").map_err(|e| Error::io(&metrics_path, e))?;
            fs::write(&timing_path, "").map_err(|e| Error::io(&timing_path, e))?;
            JsonLines::append(&metrics_path)?.write(&fed.history[0])?;
            JsonLines::append(&timing_path)?.write(&Timing { round: 0, wall_ms })?;
            fed
        }
    };
    let mut metrics = JsonLines::append(&metrics_path)?;
    let mut timing = JsonLines::append(&timing_path)?;
    while fed.round < fed.cfg.rounds {
        let start = Instant::now();
        let m = fed.run_round()?.clone();
        metrics.write(&m)?;
        timing.write(&Timing {
            round: m.round,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })?;
        log::info!("round {} mean loss {:.6}", m.round, m.mean_loss());
        let every = fed.cfg.checkpoint_every;
        if every > 0 && (fed.round % every == 0 || fed.round == fed.cfg.rounds) {
            save_checkpoint(out, &fed)?;
        }
    }
    write_models(out, &fed)?;
    fed.ledger.write_csv(&out.join("ledger.csv"))?;
    Ok(fed)
}

#[cfg(test)]
mod tests;
