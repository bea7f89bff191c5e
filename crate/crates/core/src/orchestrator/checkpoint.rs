//! Checkpoints: a manifest plus one container per client, the global bank
//! and the ledger so far.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{client_container, client_file, load_dataset, mkdir, Federation, FederationConfig};
use super::monitor::ConvergenceMonitor;
use crate::client::{MemoryBank, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, write_tensor, Container};
use crate::server::{CommLedger, Direction};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    round: u64,
    config: FederationConfig,
    monitor: ConvergenceMonitor,
    /// Adam step counters per client, in parameter order.
    adam_steps: Vec<Vec<u64>>,
}

pub fn checkpoint_dir(out: &Path, round: u64) -> PathBuf {
    out.join("checkpoints").join(format!("round_{round:04}"))
}

pub fn save_checkpoint(out: &Path, fed: &Federation) -> Result<PathBuf> {
    let dir = checkpoint_dir(out, fed.round);
    mkdir(&dir.join("clients"))?;
    for s in &fed.clients {
        let mut c = client_container(s);
        for (name, opt) in PARAM_NAMES.iter().zip(&s.adam) {
            c.push(format!("adam_m/{name}"), opt.m.clone());
            c.push(format!("adam_v/{name}"), opt.v.clone());
        }
        c.write(&client_file(&dir, s.id))?;
    }
    if let Some(g) = &fed.global {
        write_tensor(&dir.join("global_bank.fdm"), &g.patches)?;
    }
    fed.ledger.write_csv(&dir.join("ledger.csv"))?;
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        round: fed.round,
        config: fed.cfg.clone(),
        monitor: fed.monitor.clone(),
        adam_steps: fed.clients.iter().map(|s| s.adam.iter().map(|a| a.step).collect()).collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

/// Newest checkpoint directory under `out` holding a manifest.
pub fn latest_checkpoint(out: &Path) -> Result<Option<PathBuf>> {
    let root = out.join("checkpoints");
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
        let path = entry.map_err(|e| Error::io(&root, e))?.path();
        let round = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("round_"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(r) = round {
            if path.join("manifest.json").exists() && best.as_ref().is_none_or(|b| r > b.0) {
                best = Some((r, path));
            }
        }
    }
    Ok(best.map(|b| b.1))
}

pub fn parse_ledger(text: &str) -> Result<CommLedger> {
    let mut ledger = CommLedger::default();
    let bad = |l: &str| Error::Format(format!("bad ledger row `{l}`"));
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(line));
        }
        let dir = match f[2] {
            "up" => Direction::Up,
            "down" => Direction::Down,
            _ => return Err(bad(line)),
        };
        ledger.record_exchange(
            f[0].parse().map_err(|_| bad(line))?,
            f[1].parse().map_err(|_| bad(line))?,
            dir,
            f[3].parse().map_err(|_| bad(line))?,
        );
    }
    Ok(ledger)
}

/// Rebuilds the federation saved in `dir`. `cfg` may differ from the saved
/// config only in `rounds`.
pub fn load_checkpoint(dir: &Path, cfg: FederationConfig) -> Result<Federation> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let saved = FederationConfig {
        rounds: cfg.rounds,
        ..manifest.config.clone()
    };
    if saved != cfg {
        return Err(Error::config("config differs from the checkpointed run (only `rounds` may change)"));
    }
    if manifest.round > cfg.rounds {
        return Err(Error::config_key("rounds", "checkpoint is past the requested round count"));
    }
    if manifest.adam_steps.len() != cfg.clients {
        return Err(Error::Format("checkpoint client count differs from the config".into()));
    }

    let mut fed = Federation::initialize_with(cfg.clone(), load_dataset(&cfg)?)?;
    for (s, steps) in fed.clients.iter_mut().zip(&manifest.adam_steps) {
        let c = Container::read(&client_file(dir, s.id))?;
        s.model.load_container(&c)?;
        s.bank = MemoryBank::new(c.get("bank")?.clone(), manifest.round)?;
        if steps.len() != s.adam.len() {
            return Err(Error::Format("optimizer state count differs from the model".into()));
        }
        for ((name, opt), &step) in PARAM_NAMES.iter().zip(&mut s.adam).zip(steps) {
            let m = c.get(&format!("adam_m/{name}"))?;
            let v = c.get(&format!("adam_v/{name}"))?;
            m.same_dims(&opt.m)?;
            v.same_dims(&opt.v)?;
            opt.m = m.clone();
            opt.v = v.clone();
            opt.step = step;
        }
    }
    let global = dir.join("global_bank.fdm");
    fed.global = if global.exists() {
        Some(MemoryBank::new(read_tensor(&global)?, manifest.round)?)
    } else {
        None
    };
    let ledger_path = dir.join("ledger.csv");
    fed.ledger = parse_ledger(&fs::read_to_string(&ledger_path).map_err(|e| Error::io(&ledger_path, e))?)?;
    fed.monitor = manifest.monitor;
    fed.round = manifest.round;
    fed.history.clear();
    Ok(fed)
}
