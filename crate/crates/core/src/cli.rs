//! Command-line entry points and artifact emission.
//!
//! Commands: `train`, `evaluate`, `ablate`, `synthetic`. Any flag that is
//! not recognized is treated as a config override: `--epochs 3` assigns
//! `epochs = 3` on top of the `--config` file (or the defaults).

use std::collections::HashSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{updater_name, variant_name, RunConfig, REPORT_KS};
use crate::dataset::{chronological_split, parse_events, EventLog};
use crate::embedding::EmbeddingVariant;
use crate::error::{Error, NumericsError, Result};
use crate::eval::{evaluate_split, MetricsReport, TgnScorer};
use crate::graph::TemporalAdjacency;
use crate::memory::{MemoryStore, UpdaterKind};
use crate::model::{ModelSpec, TgnModel};
use crate::synthetic::{generate, write_csv};
use crate::tensor::Tensor;
use crate::training::{
    child_seed, replay_log, train, EpochRecord, RunState, EVAL_NBR_STREAM, TEST_EVAL_STREAM,
    VAL_EVAL_STREAM,
};

const USAGE: &str = "\
usage: tgrec <command> [flags]

commands:
  train       train a model; writes checkpoint.bin and stats.jsonl
  evaluate    score a checkpoint on the val or test split; writes report.json
  ablate      run the {gru,rnn} x {attn,sum,gcn} grid; writes ablation.json
  synthetic   generate the planted-preference dataset as CSV

flags:
  --config PATH       config file (flat `key = value` lines)
  --checkpoint PATH   checkpoint to evaluate (evaluate only)
  --split val|test    evaluation split (evaluate only, default test)
  --report PATH       report destination (evaluate only)
  --out PATH          output CSV (synthetic only)
  --parallel          run ablation cells as parallel processes
  --KEY VALUE         any config key as an override, e.g. --epochs 3

exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numeric failure";

pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            i32::from(e.exit_code())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Val,
    Test,
}

#[derive(Debug, Default)]
struct ParsedArgs {
    config_path: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    checkpoint: Option<PathBuf>,
    split: Option<Split>,
    report: Option<PathBuf>,
    out: Option<PathBuf>,
    parallel: bool,
}

fn parse_args(args: &[String]) -> Result<ParsedArgs> {
    let mut parsed = ParsedArgs::default();
    let mut i = 0;
    while i < args.len() {
        let flag = &args[i];
        let Some(name) = flag.strip_prefix("--") else {
            return Err(Error::config(format!("unexpected argument `{flag}`; flags start with --")));
        };
        if name == "parallel" {
            parsed.parallel = true;
            i += 1;
            continue;
        }
        let Some(value) = args.get(i + 1) else {
            return Err(Error::config(format!("flag --{name} needs a value")));
        };
        match name {
            "config" => parsed.config_path = Some(PathBuf::from(value)),
            "checkpoint" => parsed.checkpoint = Some(PathBuf::from(value)),
            "report" => parsed.report = Some(PathBuf::from(value)),
            "out" => parsed.out = Some(PathBuf::from(value)),
            "split" => {
                parsed.split = Some(match value.as_str() {
                    "val" => Split::Val,
                    "test" => Split::Test,
                    _ => {
                        return Err(Error::config(format!(
                            "--split expects `val` or `test`, got `{value}`"
                        )))
                    }
                })
            }
            key => parsed.overrides.push((key.to_string(), value.clone())),
        }
        i += 2;
    }
    Ok(parsed)
}

fn load_config(parsed: &ParsedArgs) -> Result<RunConfig> {
    let mut cfg = match &parsed.config_path {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for (key, value) in &parsed.overrides {
        cfg.set(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn dispatch(args: &[String]) -> Result<()> {
    let Some(cmd) = args.first() else {
        eprintln!("{USAGE}");
        return Err(Error::config("missing command"));
    };
    if matches!(cmd.as_str(), "--help" | "-h" | "help") {
        println!("{USAGE}");
        return Ok(());
    }
    let parsed = parse_args(&args[1..])?;
    match cmd.as_str() {
        "train" => {
            let cfg = load_config(&parsed)?;
            cmd_train(&cfg)
        }
        "evaluate" => cmd_evaluate(&parsed),
        "ablate" => {
            let cfg = load_config(&parsed)?;
            cmd_ablate(&cfg, parsed.parallel)
        }
        "synthetic" => {
            let cfg = load_config(&parsed)?;
            cmd_synthetic(&cfg, parsed.out.as_deref())
        }
        other => {
            eprintln!("{USAGE}");
            Err(Error::config(format!("unknown command `{other}`")))
        }
    }
}

fn load_data(cfg: &RunConfig) -> Result<EventLog> {
    if cfg.data_path.is_empty() {
        return Err(Error::config("data.path is required (set it in the config or via --data.path)"));
    }
    parse_events(Path::new(&cfg.data_path), &cfg.csv_schema()?)
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn epoch_line(r: &EpochRecord) -> String {
    let recall = |k: usize| *r.recalls.get(&k).expect("configured cutoff");
    format!(
        "{{\"epoch\":{},\"train_loss\":{},\"val_recall@5\":{},\"val_recall@10\":{},\
         \"val_recall@20\":{},\"skipped_examples\":{},\"wall_ms\":{}}}",
        r.epoch,
        r.train_loss,
        recall(5),
        recall(10),
        recall(20),
        r.skipped,
        r.wall_ms
    )
}

fn report_json(split_name: &str, report: &MetricsReport, config_text: &str) -> String {
    let mut s = String::from("{");
    s.push_str(&format!("\"split\":{},", json_str(split_name)));
    s.push_str(&format!("\"cases\":{},", report.cases));
    s.push_str(&format!("\"flagged_cases\":{},", report.flagged));
    for (k, v) in &report.recalls {
        s.push_str(&format!("\"recall@{k}\":{v},"));
    }
    s.push_str(&format!("\"config\":{}", json_str(config_text)));
    s.push('}');
    s
}

pub struct TrainRun {
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_recall: f64,
}

pub fn run_train(cfg: &RunConfig) -> Result<TrainRun> {
    let log = load_data(cfg)?;
    let (train_log, val_log, _) = chronological_split(&log, cfg.split_ratios())?;
    let spec = cfg.model_spec(log.d_e);
    let mut model = TgnModel::new(spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let outcome = train(&mut model, &train_log, &val_log, &cfg.train_options())?;

    // The checkpoint carries the best parameters plus the memory they
    // produce over the train split, flushed, so evaluation can start
    // without a replay.
    let best_model = TgnModel { spec, params: outcome.best_params.clone() };
    let warm = replay_log(&best_model, &train_log, cfg.batch_size)?;

    let out_dir = Path::new(&cfg.output_dir);
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", out_dir.display())))?;
    let ckpt_path = out_dir.join("checkpoint.bin");
    let memory = warm.store.memory_tensor();
    let last_update = warm.store.last_update_tensor();
    let mut entries: Vec<(String, &Tensor)> =
        best_model.params.iter().map(|(name, tensor)| (name.clone(), tensor)).collect();
    entries.push(("state.memory".to_string(), &memory));
    entries.push(("state.last_update".to_string(), &last_update));
    save_checkpoint(&ckpt_path, &cfg.to_text(), &entries)?;

    let stats_path = out_dir.join("stats.jsonl");
    let mut stats = String::new();
    for record in &outcome.history {
        stats.push_str(&epoch_line(record));
        stats.push('\n');
    }
    stats.push_str(&format!("{{\"config\":{}}}\n", json_str(&cfg.to_text())));
    fs::write(&stats_path, stats)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", stats_path.display())))?;

    Ok(TrainRun {
        checkpoint: ckpt_path,
        best_epoch: outcome.best_epoch,
        best_recall: outcome.best_recall,
    })
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let run = run_train(cfg)?;
    println!("wrote {}", run.checkpoint.display());
    println!("wrote {}", Path::new(&cfg.output_dir).join("stats.jsonl").display());
    if run.best_epoch > 0 {
        println!("best epoch {}: val recall@10 = {:.4}", run.best_epoch, run.best_recall);
    }
    Ok(())
}

/// The checkpoint's model geometry must match the active config; anything
/// else (eval pool, negatives, paths) may differ.
fn check_shape_compatibility(ckpt: &RunConfig, active: &RunConfig) -> Result<()> {
    let pairs = [
        ("d_mem", ckpt.d_mem.to_string(), active.d_mem.to_string()),
        ("d_node", ckpt.d_node.to_string(), active.d_node.to_string()),
        ("d_time", ckpt.d_time.to_string(), active.d_time.to_string()),
        (
            "memory_updater",
            updater_name(ckpt.memory_updater).to_string(),
            updater_name(active.memory_updater).to_string(),
        ),
        (
            "embedding.variant",
            variant_name(ckpt.variant).to_string(),
            variant_name(active.variant).to_string(),
        ),
        ("embedding.heads", ckpt.heads.to_string(), active.heads.to_string()),
        ("embedding.layers", ckpt.layers.to_string(), active.layers.to_string()),
    ];
    for (key, was, requested) in pairs {
        if was != requested {
            return Err(Error::config(format!(
                "checkpoint was trained with {key} = {was} but the config requests {key} = {requested}"
            )));
        }
    }
    Ok(())
}

fn model_from_entries(
    spec: ModelSpec,
    seed: u64,
    entries: Vec<(String, Tensor)>,
) -> Result<(TgnModel, MemoryStore)> {
    let mut model = TgnModel::new(spec, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut memory = None;
    let mut last_update = None;
    let mut replaced: HashSet<String> = HashSet::new();
    for (name, tensor) in entries {
        match name.as_str() {
            "state.memory" => memory = Some(tensor),
            "state.last_update" => last_update = Some(tensor),
            _ => {
                let Some(existing) = model.params.get(&name) else {
                    return Err(Error::data(format!(
                        "checkpoint contains unexpected parameter `{name}`"
                    )));
                };
                if existing.shape() != tensor.shape() {
                    return Err(Error::data(format!(
                        "checkpoint parameter `{name}` has shape {:?} but the config implies {:?}",
                        tensor.shape(),
                        existing.shape()
                    )));
                }
                *model.params.get_mut(&name).expect("present") = tensor.with_grad();
                replaced.insert(name);
            }
        }
    }
    if replaced.len() != model.params.len() {
        let missing = model
            .params
            .names()
            .find(|n| !replaced.contains(n.as_str()))
            .expect("some parameter missing");
        return Err(Error::data(format!("checkpoint is missing parameter `{missing}`")));
    }
    let (Some(memory), Some(last_update)) = (memory, last_update) else {
        return Err(Error::data("checkpoint lacks the memory state entries"));
    };
    let store = MemoryStore::from_tensors(&memory, &last_update)?;
    Ok((model, store))
}

pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub split: Split,
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
    pub report: Option<PathBuf>,
}

pub struct EvalRun {
    pub report_path: PathBuf,
    pub split: &'static str,
    pub cases: usize,
    pub recalls: std::collections::BTreeMap<usize, f64>,
}

pub fn run_evaluate(req: &EvalRequest) -> Result<EvalRun> {
    let split = req.split;
    let (ckpt_text, entries) = load_checkpoint(&req.checkpoint)?;
    let ckpt_cfg = RunConfig::parse(&ckpt_text)?;

    let mut cfg = match &req.config_path {
        Some(path) => RunConfig::from_file(path)?,
        None => ckpt_cfg.clone(),
    };
    for (key, value) in &req.overrides {
        cfg.set(key, value)?;
    }
    cfg.validate()?;
    check_shape_compatibility(&ckpt_cfg, &cfg)?;

    let log = load_data(&cfg)?;
    let (train_log, val_log, test_log) = chronological_split(&log, cfg.split_ratios())?;
    let spec = cfg.model_spec(log.d_e);
    let (model, store) = model_from_entries(spec, cfg.seed, entries)?;
    let expected_nodes = log.num_users + log.num_items;
    if store.num_nodes() != expected_nodes {
        return Err(Error::data(format!(
            "checkpoint memory covers {} nodes but the data has {expected_nodes}",
            store.num_nodes()
        )));
    }

    // Adjacency and index are structural, so they rebuild from the train
    // events; the memory comes from the checkpoint (it equals a frozen
    // replay of the same events).
    let mut state = RunState {
        store,
        adj: TemporalAdjacency::from_log(&train_log)?,
        index: crate::training::PositiveSetIndex::new(log.num_users),
        next_event_ref: 0,
    };
    for event in &train_log.events {
        state.index.add(event.user, event.item);
    }
    state.next_event_ref = train_log.events.len();

    let mut scorer = TgnScorer::new(&model, child_seed(cfg.seed, EVAL_NBR_STREAM));
    let (events, split_name, stream_tag) = match split {
        Split::Val => (&val_log.events, "val", VAL_EVAL_STREAM),
        Split::Test => (&test_log.events, "test", TEST_EVAL_STREAM),
    };
    if split == Split::Test {
        // The validation events precede the test split chronologically, so
        // stream them through the model first (no scoring).
        use crate::eval::CandidateScorer;
        for event in &val_log.events {
            scorer.observe_event(&mut state, event)?;
            state.index.add(event.user, event.item);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, stream_tag));
    let (report, _) =
        evaluate_split(&mut scorer, &mut state, events, log.num_items, &cfg.eval_options(), &mut rng)?;

    let report_path = req
        .report
        .clone()
        .unwrap_or_else(|| Path::new(&cfg.output_dir).join("report.json"));
    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Error::data(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    let json = report_json(split_name, &report, &cfg.to_text());
    fs::write(&report_path, format!("{json}\n"))
        .map_err(|e| Error::data(format!("cannot write {}: {e}", report_path.display())))?;
    Ok(EvalRun { report_path, split: split_name, cases: report.cases, recalls: report.recalls })
}

fn cmd_evaluate(parsed: &ParsedArgs) -> Result<()> {
    let Some(checkpoint) = parsed.checkpoint.clone() else {
        return Err(Error::config("evaluate requires --checkpoint PATH"));
    };
    let run = run_evaluate(&EvalRequest {
        checkpoint,
        split: parsed.split.unwrap_or(Split::Test),
        config_path: parsed.config_path.clone(),
        overrides: parsed.overrides.clone(),
        report: parsed.report.clone(),
    })?;
    println!("wrote {}", run.report_path.display());
    for (k, v) in &run.recalls {
        println!("{} recall@{k} = {v:.4}", run.split);
    }
    Ok(())
}

const GRID: [(UpdaterKind, EmbeddingVariant); 6] = [
    (UpdaterKind::Gru, EmbeddingVariant::Attention),
    (UpdaterKind::Gru, EmbeddingVariant::Sum),
    (UpdaterKind::Gru, EmbeddingVariant::Gcn),
    (UpdaterKind::Rnn, EmbeddingVariant::Attention),
    (UpdaterKind::Rnn, EmbeddingVariant::Sum),
    (UpdaterKind::Rnn, EmbeddingVariant::Gcn),
];

struct AblationCell {
    updater: &'static str,
    variant: &'static str,
    cfg: RunConfig,
    dir: PathBuf,
}

fn ablation_cells(cfg: &RunConfig) -> Vec<AblationCell> {
    let root = PathBuf::from(&cfg.output_dir);
    GRID.iter()
        .map(|&(u, v)| {
            let mut cell_cfg = cfg.clone();
            cell_cfg.memory_updater = u;
            cell_cfg.variant = v;
            let dir = root.join(format!("ablate_{}_{}", updater_name(u), variant_name(v)));
            cell_cfg.output_dir = dir.to_string_lossy().into_owned();
            AblationCell { updater: updater_name(u), variant: variant_name(v), cfg: cell_cfg, dir }
        })
        .collect()
}

fn child_error(cell: &str, code: Option<i32>) -> Error {
    let msg = match code {
        Some(c) => format!("ablation cell {cell} failed with exit code {c}"),
        None => format!("ablation cell {cell} was killed"),
    };
    match code {
        Some(2) => Error::data(msg),
        Some(3) => {
            eprintln!("error: {msg}");
            Error::Numerics(NumericsError::NonFinite { op: "ablation cell" })
        }
        _ => Error::config(msg),
    }
}

fn run_cells_as_processes(cells: &[AblationCell]) -> Result<()> {
    let exe = std::env::current_exe()
        .map_err(|e| Error::config(format!("cannot locate own executable: {e}")))?;
    let mut children = Vec::new();
    for cell in cells {
        fs::create_dir_all(&cell.dir)
            .map_err(|e| Error::data(format!("cannot create {}: {e}", cell.dir.display())))?;
        let cfg_path = cell.dir.join("config.txt");
        fs::write(&cfg_path, cell.cfg.to_text())
            .map_err(|e| Error::data(format!("cannot write {}: {e}", cfg_path.display())))?;
        let child = std::process::Command::new(&exe)
            .arg("train")
            .arg("--config")
            .arg(&cfg_path)
            .spawn()
            .map_err(|e| Error::config(format!("cannot spawn ablation cell: {e}")))?;
        children.push((format!("{}_{}", cell.updater, cell.variant), child));
    }
    for (name, mut child) in children {
        let status = child
            .wait()
            .map_err(|e| Error::config(format!("ablation cell {name} did not finish: {e}")))?;
        if !status.success() {
            return Err(child_error(&name, status.code()));
        }
    }
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, parallel: bool) -> Result<()> {
    let cells = ablation_cells(cfg);
    if parallel {
        run_cells_as_processes(&cells)?;
    } else {
        for cell in &cells {
            eprintln!("ablation cell {}_{}", cell.updater, cell.variant);
            run_train(&cell.cfg)?;
        }
    }

    // Score every cell on the test split, sequentially for determinism.
    let mut reports = Vec::new();
    for cell in &cells {
        let run = run_evaluate(&EvalRequest {
            checkpoint: cell.dir.join("checkpoint.bin"),
            split: Split::Test,
            config_path: None,
            overrides: Vec::new(),
            report: Some(cell.dir.join("report.json")),
        })?;
        let raw = fs::read_to_string(&run.report_path)
            .map_err(|e| Error::data(format!("cannot read cell report: {e}")))?;
        let value: serde_json::Value = serde_json::from_str(&raw)
            .map_err(|e| Error::data(format!("cell report is not valid JSON: {e}")))?;
        reports.push(value);
    }

    let mut json = String::from("{\"cells\":[");
    for (i, (cell, value)) in cells.iter().zip(&reports).enumerate() {
        if i > 0 {
            json.push(',');
        }
        json.push_str(&format!(
            "{{\"memory_updater\":{},\"embedding_variant\":{}",
            json_str(cell.updater),
            json_str(cell.variant)
        ));
        json.push_str(&format!(",\"cases\":{}", value["cases"]));
        for k in REPORT_KS {
            json.push_str(&format!(",\"recall@{k}\":{}", value[&format!("recall@{k}")]));
        }
        json.push('}');
    }
    json.push_str(&format!("],\"config\":{}}}", json_str(&cfg.to_text())));

    let out_root = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out_root)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", out_root.display())))?;
    let json_path = out_root.join("ablation.json");
    fs::write(&json_path, format!("{json}\n"))
        .map_err(|e| Error::data(format!("cannot write {}: {e}", json_path.display())))?;

    println!("{}", ablation_table(&cells, &reports));
    println!("wrote {}", json_path.display());
    Ok(())
}

fn ablation_table(cells: &[AblationCell], reports: &[serde_json::Value]) -> String {
    let mut table = format!("{:<12}{:>10}{:>10}{:>10}\n", "recall@10", "attn", "sum", "gcn");
    for updater in ["gru", "rnn"] {
        table.push_str(&format!("{updater:<12}"));
        for variant in ["attn", "sum", "gcn"] {
            let idx = cells
                .iter()
                .position(|c| c.updater == updater && c.variant == variant)
                .expect("full grid");
            let r10 = reports[idx]["recall@10"].as_f64().unwrap_or(f64::NAN);
            table.push_str(&format!("{r10:>10.4}"));
        }
        table.push('\n');
    }
    table
}

pub fn run_synthetic(cfg: &RunConfig, out: Option<&Path>) -> Result<(PathBuf, usize)> {
    let opts = cfg.synthetic_options();
    let log = generate(&opts, cfg.seed)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| Path::new(&cfg.output_dir).join("synthetic.csv"));
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Error::data(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    let file = fs::File::create(&path)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", path.display())))?;
    write_csv(BufWriter::new(file), &log, &opts, cfg.seed)?;
    Ok((path, log.events.len()))
}

fn cmd_synthetic(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let (path, rows) = run_synthetic(cfg, out)?;
    println!("wrote {} ({rows} events)", path.display());
    Ok(())
}
