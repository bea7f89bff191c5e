//! The `feddymem` command line.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::synth_dataset;
use crate::extract::{ExtractorSpec, FeatureExtractor};
use crate::numerics::io::encoded_len;
use crate::orchestrator::checkpoint::parse_ledger;
use crate::orchestrator::{
    evaluate_clients, load_dataset, mkdir, new_client_model, read_models, run_training, write_synth, Baseline,
    DataSource, Dataset, FederationConfig,
};
use crate::privacy::{audit_reduction, AuditStatus};
use crate::server::CommLedger;

#[derive(Debug, Parser)]
#[command(name = "feddymem", version, about = "Federated memory-bank anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the top-level `seed` of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the config's baseline (feddymem, local_only, plain_average).
    #[arg(long, global = true)]
    pub baseline: Option<String>,
    /// More log output; FEDDYMEM_LOG takes precedence.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset (images, masks, pyramids, manifests).
    Synth,
    /// Build and store the round-0 state only.
    Init,
    /// Run all rounds.
    Train {
        /// Continue from the newest checkpoint under --out.
        #[arg(long)]
        resume: bool,
    },
    /// Score init and final models of one or more runs into results.csv.
    Eval {
        /// Training output directory; repeatable. Defaults to --out.
        #[arg(long)]
        run: Vec<PathBuf>,
    },
    /// Privacy audit of memory-reduce.
    Audit,
    /// Per-round bytes of bank exchange against parameter exchange.
    BenchComm,
}

/// Machine-readable failure report printed on stderr.
pub fn error_json(e: &Error) -> String {
    let key = match e {
        Error::Config { key, .. } => key.clone(),
        _ => None,
    };
    let message = match e {
        Error::Config { message, .. } => message.clone(),
        other => other.to_string(),
    };
    serde_json::json!({ "error": { "kind": e.kind(), "message": message, "key": key } }).to_string()
}

pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env(env_logger::Env::new().filter("FEDDYMEM_LOG"))
        .try_init();
}

/// Loads the config and applies the flag overrides; validates before
/// returning.
pub fn resolve_config(cli: &Cli) -> Result<FederationConfig> {
    let mut cfg = match &cli.config {
        Some(p) => FederationConfig::load(p)?,
        None => FederationConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = &cli.baseline {
        cfg.baseline = Baseline::parse(b)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config_key("threads", "need at least one thread"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config_key("threads", e.to_string()))?;
    }
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth => synth(cfg, out),
        Command::Init => run_training(FederationConfig { rounds: 0, ..cfg }, out, false).map(|_| ()),
        Command::Train { resume } => {
            let fed = run_training(cfg, out, *resume)?;
            println!(
                "trained {} rounds, {} loss-bound violations",
                fed.round, fed.monitor.violations
            );
            Ok(())
        }
        Command::Eval { run } => {
            let runs = if run.is_empty() { vec![out.to_path_buf()] } else { run.clone() };
            eval(&runs, out)
        }
        Command::Audit => audit(&cfg, out),
        Command::BenchComm => bench_comm(&cfg, out),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the dataset plus `config.json` pointing at it (pyramids read back
/// through the file extractor).
fn synth(cfg: FederationConfig, out: &Path) -> Result<()> {
    let DataSource::Synthetic(spec) = &cfg.data else {
        return Err(Error::config_key("data", "synth needs a synthetic data source"));
    };
    if !matches!(cfg.extractor, ExtractorSpec::Synthetic { .. }) {
        return Err(Error::config_key("extractor", "synth needs a synthetic extractor"));
    }
    let data = synth_dataset(spec)?;
    let ex = FeatureExtractor::from_spec(&cfg.extractor)?;
    mkdir(out)?;
    write_synth(out, &data, Some(&ex))?;
    let dir_cfg = FederationConfig {
        data: DataSource::Dir(out.to_path_buf()),
        extractor: ExtractorSpec::File { dir: out.join("features") },
        ..cfg
    };
    write(&out.join("config.json"), &dir_cfg.to_json())?;
    println!(
        "wrote {} training and {} test samples to {}",
        data.clients.iter().map(Vec::len).sum::<usize>(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub run_id: String,
    pub baseline: &'static str,
    pub stage: &'static str,
    pub i_auroc: f64,
    pub p_auroc: Option<f64>,
    pub pro: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from("run_id,baseline,stage,i_auroc,p_auroc,pro\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{},{}\n",
            r.run_id,
            r.baseline,
            r.stage,
            r.i_auroc,
            opt(r.p_auroc),
            opt(r.pro)
        ));
    }
    s
}

/// Scores `init/` and the final models of every run.
pub fn eval_runs(runs: &[PathBuf]) -> Result<Vec<ResultRow>> {
    let mut cache: HashMap<String, Dataset> = HashMap::new();
    let mut rows = Vec::new();
    for dir in runs {
        let cfg = FederationConfig::load(&dir.join("config.json"))?;
        let key = serde_json::to_string(&(&cfg.data, &cfg.extractor)).expect("config serializes");
        if !cache.contains_key(&key) {
            cache.insert(key.clone(), load_dataset(&cfg)?);
        }
        let data = &cache[&key];
        let cin = data.fused_dims()?.2;
        let run_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("run")
            .to_string();
        for (stage, sub) in [("init", dir.join("init")), ("final", dir.clone())] {
            let models = read_models(&sub, &cfg, cin)?;
            let r = evaluate_clients(models.iter().map(|(m, b)| (m, b)), &data.test, &cfg.eval)?;
            rows.push(ResultRow {
                run_id: run_id.clone(),
                baseline: cfg.baseline.as_str(),
                stage,
                i_auroc: r.i_auroc,
                p_auroc: r.p_auroc,
                pro: r.pro,
            });
        }
    }
    Ok(rows)
}

fn eval(runs: &[PathBuf], out: &Path) -> Result<()> {
    let rows = eval_runs(runs)?;
    let csv = results_csv(&rows);
    mkdir(out)?;
    write(&out.join("results.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn audit(cfg: &FederationConfig, out: &Path) -> Result<()> {
    let report = audit_reduction(&cfg.audit)?;
    mkdir(out)?;
    write(
        &out.join("audit.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    println!(
        "audit {:?}: {} bound violations over {} configs, ratios decreasing {}, MI reduced everywhere {}",
        report.status, report.bound.violations, report.bound.configs, report.ratios_decreasing, report.mi_reduced_everywhere
    );
    if report.status == AuditStatus::Fail {
        log::warn!("privacy audit failed");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommRow {
    pub round: u64,
    pub messages: u64,
    pub bank_bytes: u64,
    /// What the same messages would cost carrying the trainable parameters.
    pub param_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommSummary {
    pub bank_bytes_per_message: u64,
    pub param_bytes_per_message: u64,
    /// Trainable parameters plus the frozen extractor weights.
    pub full_model_bytes: u64,
    pub rounds: u64,
    pub total_bank_bytes: u64,
    pub total_param_bytes: u64,
    pub source: &'static str,
}

/// Byte table for `cfg`. Uses `ledger` when a training run recorded one,
/// otherwise the exchange pattern the baseline would produce.
pub fn comm_table(cfg: &FederationConfig, cin: usize, ledger: Option<&CommLedger>) -> Result<(Vec<CommRow>, CommSummary)> {
    let model = new_client_model(cfg, cin, 0)?;
    let param = model.to_container().to_bytes().len() as u64;
    let extractor: u64 = match &cfg.extractor {
        spec @ ExtractorSpec::Synthetic { .. } => match FeatureExtractor::from_spec(spec)? {
            FeatureExtractor::Synthetic(ex) => ex.parameters().iter().map(|t| encoded_len(t.dims()) as u64).sum(),
            FeatureExtractor::File { .. } => 0,
        },
        ExtractorSpec::File { .. } => 0,
    };
    let (h, w) = match cfg.extractor.base_dims() {
        Some(d) => d,
        None => {
            let (h, w, _) = load_dataset(cfg)?.fused_dims()?;
            (h, w)
        }
    };
    let bank = encoded_len(&[h, w, cfg.model.memory_channels]) as u64;
    let mut rows = Vec::new();
    let source = match ledger {
        Some(l) => {
            for round in 0..=cfg.rounds {
                let messages = l.message_count(round) as u64;
                let (up, down) = l.round_totals(round);
                rows.push(CommRow {
                    round,
                    messages,
                    bank_bytes: up + down,
                    param_bytes: messages * param,
                });
            }
            "ledger"
        }
        None => {
            let per_round = match cfg.baseline {
                Baseline::LocalOnly => 0,
                _ => 2 * cfg.clients as u64,
            };
            for round in 0..=cfg.rounds {
                rows.push(CommRow {
                    round,
                    messages: per_round,
                    bank_bytes: per_round * bank,
                    param_bytes: per_round * param,
                });
            }
            "config"
        }
    };
    let summary = CommSummary {
        bank_bytes_per_message: bank,
        param_bytes_per_message: param,
        full_model_bytes: param + extractor,
        rounds: rows.len().saturating_sub(1) as u64,
        total_bank_bytes: rows.iter().map(|r| r.bank_bytes).sum(),
        total_param_bytes: rows.iter().map(|r| r.param_bytes).sum(),
        source,
    };
    Ok((rows, summary))
}

fn bench_comm(cfg: &FederationConfig, out: &Path) -> Result<()> {
    let ledger_path = out.join("ledger.csv");
    let ledger = if ledger_path.exists() {
        Some(parse_ledger(&fs::read_to_string(&ledger_path).map_err(|e| Error::io(&ledger_path, e))?)?)
    } else {
        None
    };
    let cin = match cfg.extractor.fused_channels() {
        Some(c) => c,
        None => load_dataset(cfg)?.fused_dims()?.2,
    };
    let (rows, summary) = comm_table(cfg, cin, ledger.as_ref())?;
    let mut csv = String::from("round,messages,bank_bytes,param_bytes\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.round, r.messages, r.bank_bytes, r.param_bytes));
    }
    mkdir(out)?;
    write(&out.join("comm.csv"), &csv)?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&out.join("comm_summary.json"), &json)?;
    println!("{json}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags_in_any_position() {
        let cli = Cli::try_parse_from(["feddymem", "train", "--resume", "--seed", "4", "--threads", "2"]).unwrap();
        assert!(matches!(cli.command, Command::Train { resume: true }));
        assert_eq!(cli.seed, Some(4));
        assert_eq!(cli.threads, Some(2));
        let cli = Cli::try_parse_from(["feddymem", "--out", "x", "eval", "--run", "a", "--run", "b"]).unwrap();
        assert!(matches!(cli.command, Command::Eval { ref run } if run.len() == 2));
        assert!(Cli::try_parse_from(["feddymem", "bench-comm"]).is_ok());
    }

    #[test]
    fn overrides_apply() {
        let cli = Cli::try_parse_from(["feddymem", "init", "--seed", "9", "--baseline", "local_only"]).unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.baseline, Baseline::LocalOnly);
        let cli = Cli::try_parse_from(["feddymem", "init", "--baseline", "fedavg"]).unwrap();
        assert_eq!(resolve_config(&cli).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn error_json_names_key() {
        let e = FederationConfig::from_json(r#"{"nope": 1}"#).unwrap_err();
        let v: serde_json::Value = serde_json::from_str(&error_json(&e)).unwrap();
        assert_eq!(v["error"]["kind"], "config");
        assert_eq!(v["error"]["key"], "nope");
    }

    #[test]
    fn default_bank_is_smaller_than_parameters() {
        let cfg = FederationConfig::default();
        let (rows, s) = comm_table(&cfg, cfg.extractor.fused_channels().unwrap(), None).unwrap();
        assert!(s.bank_bytes_per_message < s.param_bytes_per_message);
        assert_eq!(rows.len() as u64, cfg.rounds + 1);
        assert!(rows.iter().all(|r| r.messages == 10 && r.bank_bytes < r.param_bytes));
    }
}
