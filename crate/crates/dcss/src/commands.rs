//! The pipeline stages behind each subcommand.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use dcss_core::correlation::{run_trial, CorrelationReport, ExcludedTrial, TrialRecord};
use dcss_core::data::{generate, Dataset};
use dcss_core::decode::{decode, train_standalone, DecodeMode, DecodedArchitecture, InitMode, StandaloneNet};
use dcss_core::optim::{Adam, Sgd};
use dcss_core::search::{BestCheckpoint, EpochMetrics, Search, SearchState};
use dcss_core::supernet::{ArchParams, SupernetSpec, OPERATORS, SCALES};
use dcss_core::{Error, ParamStore};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::datasets::{read_dataset, sha256_hex, write_dataset};
use crate::error::{CliError, CliResult};
use crate::tensors::{load_optimizers, load_store, save_optimizers, save_store, write_atomic};
use crate::to_json_bytes;

pub const CONFIG_ECHO: &str = "config.json";
pub const RUN_LOG: &str = "run.log";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const OPTIM_CKPT: &str = "optim.ckpt";
pub const SEARCH_STATE: &str = "search_state.json";
pub const ARCH_INDEX: &str = "arch_index.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const NAN_DIAGNOSTICS: &str = "nan_diagnostics.json";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const TRAIN_RESULT: &str = "result.json";
pub const REPORT_JSON: &str = "report.json";
pub const SCATTER_CSV: &str = "scatter.csv";

/// Timestamped progress lines, kept apart from the result artifacts.
pub struct RunLog {
    file: fs::File,
}

impl RunLog {
    pub fn open(dir: &Path) -> CliResult<Self> {
        let path = dir.join(RUN_LOG);
        let file = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(RunLog { file })
    }

    pub fn line(&mut self, msg: impl AsRef<str>) {
        let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let _ = writeln!(self.file, "[{}.{:03}] {}", t.as_secs(), t.subsec_millis(), msg.as_ref());
        log::info!("{}", msg.as_ref());
    }
}

/// Creates `dir`, refusing one that already holds files unless `force`.
pub fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(CliError::io(dir, "output directory is not empty; pass --force to overwrite"));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_atomic(path, &to_json_bytes(value))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

pub fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> CliResult<()> {
    prepare_out(out, force)?;
    let mut log = RunLog::open(out)?;
    write_json(&out.join(CONFIG_ECHO), cfg)?;
    let manifest = write_dataset(&cfg.dataset, out)?;
    for s in &manifest.splits {
        log.line(format!("wrote {} ({} samples, sha256 {})", s.file, s.count, s.sha256));
    }
    Ok(())
}

/// Loads a dataset directory, or generates the configured one in memory.
pub fn load_or_generate(cfg: &RunConfig, data: Option<&Path>) -> CliResult<Dataset> {
    let ds = match data {
        Some(dir) => read_dataset(dir)?,
        None => generate(&cfg.dataset)?,
    };
    if ds.spec != cfg.dataset {
        log::warn!("dataset on disk differs from the config's dataset section; using the one on disk");
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BestSummary {
    pub epoch: usize,
    pub miou: f64,
}

/// Progress of a search between epochs; the tensors live in the checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchStateFile {
    pub epochs_done: usize,
    pub best: Option<BestSummary>,
    pub history: Vec<EpochMetrics>,
}

fn checkpoint_meta(spec: &SupernetSpec, kind: &str, epochs_done: usize, miou: Option<f64>) -> Value {
    json!({ "kind": kind, "spec": spec, "epochs_done": epochs_done, "val_miou": miou })
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,trainA_ce,trainB_ce,L_alpha,L_beta,L_con,tau,val_miou\n");
    for m in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            m.epoch, m.train_a_ce, m.train_b_ce, m.l_alpha, m.l_beta, m.l_con, m.tau, m.val_miou
        );
    }
    s
}

fn save_search_state(dir: &Path, spec: &SupernetSpec, st: &SearchState) -> CliResult<()> {
    save_store(&dir.join(LAST_CKPT), &st.store, checkpoint_meta(spec, "supernet", st.epochs_done, None))?;
    save_optimizers(&dir.join(OPTIM_CKPT), &st.sgd, &st.adam)?;
    if let Some(b) = &st.best {
        save_store(&dir.join(BEST_CKPT), &b.store, checkpoint_meta(spec, "supernet", b.epoch, Some(b.miou)))?;
    }
    let file = SearchStateFile {
        epochs_done: st.epochs_done,
        best: st.best.as_ref().map(|b| BestSummary { epoch: b.epoch, miou: b.miou }),
        history: st.history.clone(),
    };
    write_json(&dir.join(SEARCH_STATE), &file)?;
    write_atomic(&dir.join(METRICS_CSV), metrics_csv(&st.history).as_bytes())
}

fn load_search_state(dir: &Path, cfg: &RunConfig) -> CliResult<SearchState> {
    let file: SearchStateFile = read_json(&dir.join(SEARCH_STATE))?;
    let (store, _) = load_store(&dir.join(LAST_CKPT))?;
    let mut sgd = Sgd::new(cfg.search.sgd_config());
    let mut adam = Adam::new(cfg.search.adam_config());
    load_optimizers(&dir.join(OPTIM_CKPT), &mut sgd, &mut adam)?;
    let best = match file.best {
        Some(b) => {
            let (store, _) = load_store(&dir.join(BEST_CKPT))?;
            Some(BestCheckpoint { epoch: b.epoch, miou: b.miou, store })
        }
        None => None,
    };
    Ok(SearchState { epochs_done: file.epochs_done, store, sgd, adam, best, history: file.history })
}

fn arch_index(spec: &SupernetSpec) -> Value {
    json!({
        "L": spec.layers,
        "F": spec.base_width,
        "scales": SCALES,
        "operators": OPERATORS.iter().map(|o| o.name()).collect::<Vec<_>>(),
        "node_naming": "s{scale}_l{layer}",
    })
}

pub struct SearchArgs<'a> {
    pub data: Option<&'a Path>,
    pub out: &'a Path,
    pub resume: bool,
    pub stop_after: Option<usize>,
    pub force: bool,
}

/// Runs (or continues) the bilevel search, checkpointing after every epoch.
pub fn search(cfg: &RunConfig, args: SearchArgs<'_>) -> CliResult<()> {
    let out = args.out;
    let data = load_or_generate(cfg, args.data)?;
    let spec = &cfg.supernet;
    let mut run = if args.resume {
        let echoed: RunConfig = read_json(&out.join(CONFIG_ECHO))?;
        if &echoed != cfg {
            return Err(CliError::Config("resumed run must use the same resolved configuration".into()));
        }
        let state = load_search_state(out, cfg)?;
        Search::resume(&data, spec, &cfg.search, state)?
    } else {
        prepare_out(out, args.force)?;
        write_json(&out.join(CONFIG_ECHO), cfg)?;
        Search::new(&data, spec, &cfg.search)?
    };
    let mut log = RunLog::open(out)?;
    write_json(&out.join(ARCH_INDEX), &arch_index(spec))?;
    log.line(format!("search from epoch {} of {}", run.state().epochs_done, cfg.search.epochs));

    let mut ran = 0;
    while !run.is_done() && args.stop_after.is_none_or(|n| ran < n) {
        let started = Instant::now();
        match run.run_epoch() {
            Ok(m) => {
                save_search_state(out, spec, run.state())?;
                log.line(format!(
                    "epoch {} trainA_ce {:.5} val_miou {:.5} ({:.1}s)",
                    m.epoch,
                    m.train_a_ce,
                    m.val_miou,
                    started.elapsed().as_secs_f64()
                ));
            }
            Err(Error::NonFinite { what }) => {
                let path = out.join(NAN_DIAGNOSTICS);
                let st = run.state();
                write_json(
                    &path,
                    &json!({
                        "error": what,
                        "epochs_completed": st.epochs_done,
                        "last_epoch_metrics": st.history.last(),
                        "config": cfg.search,
                    }),
                )?;
                log.line(format!("aborted on a non-finite value: {what}"));
                return Err(CliError::Numeric(format!("{what}; diagnostics in {}", path.display())));
            }
            Err(e) => return Err(e.into()),
        }
        ran += 1;
    }
    save_search_state(out, spec, run.state())?;
    if run.is_done() {
        let outcome = run.finish()?;
        let b = &outcome.best;
        save_store(&out.join(BEST_CKPT), &b.store, checkpoint_meta(spec, "supernet", b.epoch, Some(b.miou)))?;
        log.line(format!("search finished; best epoch {} val_miou {}", b.epoch, b.miou));
    } else {
        log.line("search paused; continue with --resume");
    }
    Ok(())
}

/// Loads a supernet checkpoint and the spec embedded in it.
pub fn load_supernet_checkpoint(path: &Path) -> CliResult<(ParamStore, SupernetSpec)> {
    let (store, meta) = load_store(path)?;
    let spec = meta
        .get("spec")
        .cloned()
        .ok_or_else(|| CliError::io(path, "checkpoint carries no supernet spec"))
        .and_then(|v| serde_json::from_value(v).map_err(|e| CliError::io(path, e)))?;
    Ok((store, spec))
}

/// Decodes a checkpoint; `dot` additionally writes a Graphviz rendering
/// next to `out`.
pub fn decode_checkpoint(checkpoint: &Path, out: &Path, strict: bool, dot: bool) -> CliResult<DecodedArchitecture> {
    let bytes = fs::read(checkpoint).map_err(|e| CliError::io(checkpoint, e))?;
    let (store, spec) = load_supernet_checkpoint(checkpoint)?;
    let arch = ArchParams::from_store(&store, spec.layers)?;
    let mode = if strict { DecodeMode::Strict } else { DecodeMode::Fallback };
    let decoded = decode(&arch, &spec, mode, &format!("sha256:{}", sha256_hex(&bytes)))?;
    if decoded.edges.is_empty() {
        log::warn!("decoded architecture has no edges: no connection has a non-negative beta");
        eprintln!("warning: decoded architecture is empty (no connection with beta >= 0)");
    } else if let Err(e) = decoded.validate() {
        log::warn!("decoded architecture is not trainable: {e}");
        eprintln!("warning: decoded architecture is not trainable: {e}");
    }
    write_json(out, &decoded)?;
    if dot {
        write_atomic(&out.with_extension("dot"), decoded.to_dot().as_bytes())?;
    }
    Ok(decoded)
}

pub fn read_architecture(path: &Path) -> CliResult<DecodedArchitecture> {
    let arch: DecodedArchitecture = read_json(path)?;
    arch.validate()?;
    Ok(arch)
}

pub struct TrainArgs<'a> {
    pub arch: &'a Path,
    pub data: Option<&'a Path>,
    pub out: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub force: bool,
}

/// Retrains a decoded architecture and returns its T-mIoU.
pub fn train(cfg: &RunConfig, args: TrainArgs<'_>) -> CliResult<f64> {
    let arch = read_architecture(args.arch)?;
    let data = load_or_generate(cfg, args.data)?;
    if arch.spec.num_classes != data.spec.num_classes {
        return Err(CliError::Config("architecture and dataset disagree on num_classes".into()));
    }
    let inherited = match (cfg.train.init, args.checkpoint) {
        (InitMode::Inherit, Some(p)) => Some(load_supernet_checkpoint(p)?.0),
        (InitMode::Inherit, None) => return Err(CliError::Config("train.init = inherit needs --checkpoint".into())),
        (InitMode::Fresh, _) => None,
    };
    let mut store = ParamStore::new(cfg.train.seed);
    let net = StandaloneNet::new(&arch, &mut store, cfg.train.init, inherited.as_ref())?;
    prepare_out(args.out, args.force)?;
    write_json(&args.out.join(CONFIG_ECHO), cfg)?;
    let mut log = RunLog::open(args.out)?;
    log.line(format!("training {} nodes, {} edges for {} epochs", arch.nodes.len(), arch.edges.len(), cfg.train.epochs));
    let started = Instant::now();
    let outcome = train_standalone(&net, &mut store, &data, &cfg.train)?;
    let meta = json!({ "kind": "standalone", "arch_provenance": arch.provenance, "best_epoch": outcome.best_epoch, "t_miou": outcome.t_miou });
    save_store(&args.out.join(MODEL_CKPT), &outcome.best, meta)?;
    let mut csv = String::from("epoch,train_ce,val_miou\n");
    for m in &outcome.history {
        let _ = writeln!(csv, "{},{},{}", m.epoch, m.train_ce, m.val_miou);
    }
    write_atomic(&args.out.join(METRICS_CSV), csv.as_bytes())?;
    write_json(
        &args.out.join(TRAIN_RESULT),
        &json!({ "t_miou": outcome.t_miou, "best_epoch": outcome.best_epoch, "history": outcome.history }),
    )?;
    log.line(format!("T-mIoU {} at epoch {} ({:.1}s)", outcome.t_miou, outcome.best_epoch, started.elapsed().as_secs_f64()));
    Ok(outcome.t_miou)
}

pub fn scatter_csv(report: &CorrelationReport) -> String {
    let mut s = String::from("s_miou,t_miou,trial_id\n");
    for r in &report.records {
        let _ = writeln!(s, "{},{},{}", r.s_miou, r.t_miou, r.trial_id);
    }
    s
}

/// Runs every trial on a pool of `jobs` threads and writes the report.
pub fn correlate(cfg: &RunConfig, out: &Path, data: Option<&Path>, jobs: usize, force: bool) -> CliResult<CorrelationReport> {
    use rayon::prelude::*;

    let data = load_or_generate(cfg, data)?;
    prepare_out(out, force)?;
    write_json(&out.join(CONFIG_ECHO), cfg)?;
    let trials_dir = out.join("trials");
    fs::create_dir_all(&trials_dir).map_err(|e| CliError::io(&trials_dir, e))?;
    let mut log = RunLog::open(out)?;
    let seeds = cfg.correlation.trial_seeds();
    log.line(format!("{} trials on {} worker(s)", seeds.len(), jobs.max(1)));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))?;
    let results: Vec<(usize, u64, f64, dcss_core::Result<(TrialRecord, DecodedArchitecture)>)> = pool.install(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(id, &seed)| {
                let started = Instant::now();
                let r = run_trial(&data, &cfg.supernet, &cfg.search, &cfg.train, id, seed).map(|t| (t.record, t.arch));
                (id, seed, started.elapsed().as_secs_f64(), r)
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for (id, seed, secs, r) in results {
        match r {
            Ok((mut record, arch)) => {
                let rel = format!("trials/arch_{id}.json");
                write_json(&out.join(&rel), &arch)?;
                record.arch_path = Some(rel);
                record.wall_time_s = secs;
                log.line(format!(
                    "trial {id} seed {seed}: S-mIoU {} T-mIoU {} ({secs:.1}s)",
                    record.s_miou, record.t_miou
                ));
                records.push(record);
            }
            Err(Error::NonFinite { what }) => {
                log.line(format!("trial {id} seed {seed} excluded: {what}"));
                excluded.push(ExcludedTrial { trial_id: id, seed, error: what });
            }
            Err(e) => return Err(e.into()),
        }
    }
    let report = CorrelationReport::from_records(records, excluded);
    write_json(&out.join(REPORT_JSON), &report)?;
    write_atomic(&out.join(SCATTER_CSV), scatter_csv(&report).as_bytes())?;
    log.line(format!("rho {:?} tau {:?} ties {}", report.rho, report.tau, report.ties));
    Ok(report)
}

fn fmt_stat(v: Option<f64>, note: &Option<String>) -> String {
    match (v, note) {
        (Some(v), _) => format!("{v:+.4}"),
        (None, Some(n)) => format!("undefined ({n})"),
        (None, None) => "undefined".into(),
    }
}

/// Human-readable rendering of a correlation report.
pub fn render_report(report: &CorrelationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "trials      {}", report.n);
    let _ = writeln!(s, "pearson rho {}", fmt_stat(report.rho, &report.rho_note));
    let _ = writeln!(s, "kendall tau {}", fmt_stat(report.tau, &report.tau_note));
    let _ = writeln!(s, "tied pairs  {}", report.ties);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:>5}  {:>10}  {:>8}  {:>8}", "trial", "seed", "S-mIoU", "T-mIoU");
    for r in &report.records {
        let _ = writeln!(s, "{:>5}  {:>10}  {:>8.4}  {:>8.4}", r.trial_id, r.seed, r.s_miou, r.t_miou);
    }
    for e in &report.excluded {
        let _ = writeln!(s, "{:>5}  {:>10}  excluded: {}", e.trial_id, e.seed, e.error);
    }
    s
}

pub fn report(dir: &Path) -> CliResult<String> {
    if !dir.is_dir() {
        return Err(CliError::Config(format!("{} is not a directory", dir.display())));
    }
    let path: PathBuf = dir.join(REPORT_JSON);
    if !path.is_file() {
        return Err(CliError::Config(format!("{} has no {REPORT_JSON}", dir.display())));
    }
    let report: CorrelationReport = read_json(&path)?;
    Ok(render_report(&report))
}
