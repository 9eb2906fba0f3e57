//! The `evprobe` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data or integrity failure, 3 bad
//! configuration.

mod output;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::behavior::{
    build_question_records, find_transitions, kde, summarize_transition, QuestionRecord, ResponseSummary,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::probe::{baseline_rows, layer_sweep, EvalReport, EvalRow, ProbeDataset, SweepConfig};
use crate::scoring::score_trace;
use crate::synth::{behavior_dataset, planted_signal, BehaviorPlan, PlantedSignalConfig, SignalTokens};
use crate::trace::{labels_path_for, read_labels, Condition, DatasetReader, LabelSet, TraceKey};

use output::{write_csv, write_jsonl};

pub const EXIT_USAGE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "evprobe", version, about = "Evidential token uncertainty and hidden-state probes over stored generation traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check record integrity and label coverage.
    Validate(DatasetArgs),
    /// Per-response uncertainty scores and bounds (scores.jsonl).
    Score(DatasetArgs),
    /// Correctness ratio and regime per question and condition (regimes.csv).
    Regimes(DatasetArgs),
    /// Context transitions and their score distributions (transitions.jsonl).
    Transitions(DatasetArgs),
    /// Density curves of both sides of every transition (kde.jsonl, kde.csv).
    Kde(DatasetArgs),
    /// Layer × token-selection probe sweep and baselines (sweep.jsonl, sweep_heatmap.csv).
    Sweep(SweepArgs),
    /// Summarize the sweep and transition outputs in an output directory.
    Report(ReportArgs),
    /// Write a synthetic dataset with known structure.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct DatasetArgs {
    /// Trace dataset file.
    dataset: PathBuf,
    /// Label file (defaults to `<dataset>.labels.jsonl`).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Also write every trained probe to probes.jsonl.
    #[arg(long)]
    save_probes: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Label linearly encoded in one layer.
    Planted,
    /// Questions with fixed correctness ratios and EU levels.
    Behavior,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(value_enum)]
    kind: SynthKind,
    /// Dataset file to write; labels go to `<out>.labels.jsonl`.
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Planted: put the signal on the high-EU tokens only.
    #[arg(long)]
    high_eu_only: bool,
    /// Planted: number of questions (each with 5 responses).
    #[arg(long, default_value_t = 100)]
    questions: usize,
    /// Behavior: questions per planted group.
    #[arg(long, default_value_t = 10)]
    per_group: usize,
}

/// Flags mirroring [`RunConfig`]; each overrides the config file.
#[derive(Debug, Args, Default)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (also `EVPROBE_OUTPUT_DIR`).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    k_evidence: Option<String>,
    /// relu, softplus or shift-min.
    #[arg(long)]
    transform: Option<String>,
    /// evidence or alpha.
    #[arg(long)]
    au_variant: Option<String>,
    #[arg(long)]
    k_agg: Option<String>,
    #[arg(long)]
    k_bound: Option<String>,
    #[arg(long)]
    tau_c: Option<String>,
    #[arg(long)]
    tau_e: Option<String>,
    #[arg(long)]
    theta: Option<String>,
    /// Response score for regimes and KDE, e.g. eu-lower or au-upper.
    #[arg(long)]
    score: Option<String>,
    /// per-response or per-question.
    #[arg(long)]
    pooling: Option<String>,
    /// silverman or a fixed bandwidth.
    #[arg(long)]
    bandwidth: Option<String>,
    /// Comma-separated, e.g. WOC:E->WCC:C,WOC:C->WIC:E.
    #[arg(long)]
    transitions: Option<String>,
    /// Comma-separated indices or ranges, e.g. 12..=31.
    #[arg(long)]
    layers: Option<String>,
    /// Comma-separated, e.g. EOS,EXACT,EU1,EU-1,AVG,AVG(eu-high-3+eos).
    #[arg(long)]
    selections: Option<String>,
    /// Token measure ranking tokens for selection: eu or au.
    #[arg(long)]
    rank_by: Option<String>,
    /// Conditions whose responses train the probes (default all).
    #[arg(long)]
    probe_conditions: Option<String>,
    #[arg(long)]
    l2: Option<String>,
    #[arg(long)]
    max_iter: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    split_seed: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_env();
        let flags = [
            ("k_evidence", &self.k_evidence),
            ("transform", &self.transform),
            ("au_variant", &self.au_variant),
            ("k_agg", &self.k_agg),
            ("k_bound", &self.k_bound),
            ("tau_c", &self.tau_c),
            ("tau_e", &self.tau_e),
            ("theta", &self.theta),
            ("score", &self.score),
            ("pooling", &self.pooling),
            ("bandwidth", &self.bandwidth),
            ("transitions", &self.transitions),
            ("layers", &self.layers),
            ("selections", &self.selections),
            ("rank_by", &self.rank_by),
            ("probe_conditions", &self.probe_conditions),
            ("l2", &self.l2),
            ("max_iter", &self.max_iter),
            ("tol", &self.tol),
            ("split_seed", &self.split_seed),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Validate(a) => cmd_validate(&a),
        Command::Score(a) => cmd_score(&a).map(|_| 0),
        Command::Regimes(a) => cmd_regimes(&a).map(|_| 0),
        Command::Transitions(a) => cmd_transitions(&a).map(|_| 0),
        Command::Kde(a) => cmd_kde(&a).map(|_| 0),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| 0),
        Command::Report(a) => cmd_report(&a).map(|_| 0),
        Command::Synth(a) => cmd_synth(&a).map(|_| 0),
    }
}

struct Loaded {
    cfg: RunConfig,
    reader: DatasetReader,
}

fn open(args: &DatasetArgs) -> Result<Loaded> {
    let cfg = args.run.resolve()?;
    let reader = DatasetReader::open(&args.dataset)?;
    cfg.validate_for(reader.manifest())?;
    Ok(Loaded { cfg, reader })
}

fn labels_path(args: &DatasetArgs) -> PathBuf {
    args.labels.clone().unwrap_or_else(|| labels_path_for(&args.dataset))
}

fn load_labels(args: &DatasetArgs) -> Result<LabelSet> {
    let path = labels_path(args);
    if !path.exists() {
        return Err(Error::NotFound(format!("label file {} does not exist", path.display())));
    }
    read_labels(path)
}

fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.join(name))
}

fn cmd_validate(args: &DatasetArgs) -> Result<i32> {
    let cfg = args.run.resolve()?;
    let reader = DatasetReader::open(&args.dataset)?;
    let manifest = reader.manifest();
    println!(
        "dataset {}: {} traces, k_store {}, {} layers, hidden_dim {}",
        args.dataset.display(),
        reader.len(),
        manifest.k_store,
        manifest.layer_indices.len(),
        manifest.hidden_dim
    );
    let mut findings = 0;
    for (entry, err) in reader.check_all() {
        findings += 1;
        println!("FINDING {} @ offset {}: {err}", entry.key(), entry.offset);
    }
    if let Err(e) = cfg.validate_for(manifest) {
        println!("WARNING {e}");
    }

    let path = labels_path(args);
    if path.exists() {
        let labels = read_labels(&path)?;
        let mut coverage: BTreeMap<(String, Condition), (usize, usize)> = BTreeMap::new();
        for e in reader.entries() {
            let c = coverage.entry((e.question_id.clone(), e.condition)).or_default();
            c.0 += 1;
            if labels.get(&e.key()).is_some() {
                c.1 += 1;
            }
        }
        let mut missing_groups = 0;
        let mut missing = 0;
        for ((qid, cond), (n, labeled)) in &coverage {
            if labeled < n {
                missing_groups += 1;
                missing += n - labeled;
                println!("WARNING labels missing for {qid}/{cond}: {labeled} of {n} labeled");
            }
        }
        let stored: std::collections::BTreeSet<TraceKey> = reader.entries().iter().map(|e| e.key()).collect();
        let orphans = labels.iter().filter(|l| !stored.contains(&l.key())).count();
        if orphans > 0 {
            println!("WARNING {orphans} labels refer to no trace");
        }
        println!(
            "labels {}: {} records, {missing} traces unlabeled in {missing_groups} question/condition groups",
            path.display(),
            labels.len()
        );
    } else {
        println!("WARNING no label file at {}", path.display());
    }

    if findings > 0 {
        println!("{findings} integrity findings");
        Ok(2)
    } else {
        println!("0 integrity findings");
        Ok(0)
    }
}

fn cmd_score(args: &DatasetArgs) -> Result<PathBuf> {
    let Loaded { cfg, reader } = open(args)?;
    if reader.is_empty() {
        return Err(Error::Data(format!("{} holds no traces", args.dataset.display())));
    }
    let labels = match labels_path(args) {
        p if p.exists() => Some(read_labels(p)?),
        _ => None,
    };
    let scoring = cfg.scoring();
    let mut rows = Vec::with_capacity(reader.len());
    let mut no_p_true = 0;
    for trace in reader.traces() {
        let trace = trace?;
        let s = score_trace(&trace, &scoring)?;
        let mut row = json!({
            "question_id": s.key.question_id,
            "condition": s.key.condition,
            "sample_index": s.key.sample_index,
            "n_tokens": trace.len(),
            "logprob": s.logprob,
            "logtoku": s.logtoku,
            "bounds": s.bounds,
        });
        match s.p_true {
            Some(p) => row["p_true"] = json!(p),
            None => no_p_true += 1,
        }
        if let Some(l) = labels.as_ref().and_then(|ls| ls.get(&s.key)) {
            row["z"] = json!(l.z);
        }
        rows.push(row);
    }
    let path = out_path(&cfg, "scores.jsonl")?;
    write_jsonl(&path, cfg.echo_json("score"), &rows)?;
    println!("scored {} responses -> {}", rows.len(), path.display());
    if no_p_true > 0 {
        println!("p_true unavailable for {no_p_true} responses (field omitted)");
    }
    Ok(path)
}

fn question_records(args: &DatasetArgs, cfg: &RunConfig, reader: &DatasetReader) -> Result<Vec<QuestionRecord>> {
    let labels = load_labels(args)?;
    let scoring = cfg.scoring();
    let mut responses: Vec<(TraceKey, ResponseSummary)> = Vec::new();
    let mut unlabeled = 0;
    for entry in reader.entries() {
        let key = entry.key();
        let Some(label) = labels.get(&key) else {
            unlabeled += 1;
            continue;
        };
        let trace = reader.read_entry(entry)?;
        responses.push(ResponseSummary::score(&trace, label, &scoring)?);
    }
    if unlabeled > 0 {
        eprintln!("warning: {unlabeled} traces have no label and were left out");
    }
    if responses.is_empty() {
        return Err(Error::Data("no labeled responses".into()));
    }
    build_question_records(responses, cfg.thresholds()?)
}

fn cmd_regimes(args: &DatasetArgs) -> Result<PathBuf> {
    let Loaded { cfg, reader } = open(args)?;
    let records = question_records(args, &cfg, &reader)?;
    let mut lines = vec!["question_id,condition,m,n_correct,ratio,regime".to_owned()];
    for q in &records {
        for (cond, rec) in &q.conditions {
            let n_correct = rec.labels.iter().filter(|&&z| z == 1).count();
            lines.push(format!(
                "{},{},{},{},{},{}",
                output::csv_field(&q.question_id),
                cond,
                rec.labels.len(),
                n_correct,
                rec.ratio,
                rec.regime
            ));
        }
    }
    let path = out_path(&cfg, "regimes.csv")?;
    write_csv(&path, &cfg.echo_comments("regimes"), &lines)?;
    println!("{} questions -> {}", records.len(), path.display());
    Ok(path)
}

fn cmd_transitions(args: &DatasetArgs) -> Result<PathBuf> {
    let Loaded { cfg, reader } = open(args)?;
    let records = question_records(args, &cfg, &reader)?;
    let mut rows = Vec::new();
    for &spec in &cfg.transitions {
        let set = find_transitions(&records, spec, cfg.score, cfg.pooling);
        let report = summarize_transition(&set, cfg.pooling);
        println!(
            "{spec}: {} questions, mean shift {}",
            report.n_questions,
            report.mean_shift.map_or("n/a".to_owned(), |s| format!("{s:.4}"))
        );
        rows.push(serde_json::to_value(report)?);
    }
    let path = out_path(&cfg, "transitions.jsonl")?;
    write_jsonl(&path, cfg.echo_json("transitions"), &rows)?;
    Ok(path)
}

fn cmd_kde(args: &DatasetArgs) -> Result<PathBuf> {
    let Loaded { cfg, reader } = open(args)?;
    let records = question_records(args, &cfg, &reader)?;
    let mut rows = Vec::new();
    let mut lines = vec!["transition,side,state,x,density".to_owned()];
    for &spec in &cfg.transitions {
        let set = find_transitions(&records, spec, cfg.score, cfg.pooling);
        for (side, state, samples) in [("from", spec.from, &set.from_samples), ("to", spec.to, &set.to_samples)] {
            let mut row = json!({
                "transition": spec.to_string(),
                "side": side,
                "state": state.to_string(),
                "score": cfg.score.to_string(),
                "n": samples.len(),
            });
            match kde(samples, cfg.bandwidth) {
                Ok(curve) => {
                    row["bandwidth"] = json!(curve.bandwidth);
                    row["integral"] = json!(curve.integral());
                    for (x, d) in curve.grid.iter().zip(&curve.density) {
                        lines.push(format!("{spec},{side},{state},{x},{d}"));
                    }
                    row["grid"] = json!(curve.grid);
                    row["density"] = json!(curve.density);
                }
                Err(e) => {
                    println!("{spec} {side}: {e}");
                    row["error"] = json!(e.to_string());
                }
            }
            rows.push(row);
        }
    }
    let path = out_path(&cfg, "kde.jsonl")?;
    write_jsonl(&path, cfg.echo_json("kde"), &rows)?;
    write_csv(&out_path(&cfg, "kde.csv")?, &cfg.echo_comments("kde"), &lines)?;
    println!("{} curves -> {}", rows.len(), path.display());
    Ok(path)
}

fn cmd_sweep(args: &SweepArgs) -> Result<PathBuf> {
    let Loaded { mut cfg, reader } = open(&args.data)?;
    let labels = load_labels(&args.data)?;
    let data = ProbeDataset::load(&reader, &labels, &cfg.scoring(), cfg.rank_by, &cfg.probe_conditions)?;
    if data.unlabeled > 0 {
        eprintln!("warning: {} traces have no label and were left out", data.unlabeled);
    }
    if data.is_empty() {
        return Err(Error::Data("no labeled responses to probe".into()));
    }
    let layers = cfg.sweep_layers(reader.manifest());
    cfg.layers = layers.clone();
    let sweep_cfg = SweepConfig::new(layers.clone(), cfg.selections.clone(), cfg.hyper());
    let outcome = layer_sweep(&data, &sweep_cfg)?;
    let mut report = EvalReport {
        rows: baseline_rows(&data, cfg.split_seed),
    };
    report.rows.extend(outcome.report.rows);
    report.mark_best();

    let rows = report.rows.iter().map(serde_json::to_value).collect::<std::result::Result<Vec<_>, _>>()?;
    let path = out_path(&cfg, "sweep.jsonl")?;
    write_jsonl(&path, cfg.echo_json("sweep"), &rows)?;

    let selections: Vec<String> = cfg.selections.iter().map(ToString::to_string).collect();
    let mut lines = vec![format!("layer,{}", selections.iter().map(|s| output::csv_field(s)).collect::<Vec<_>>().join(","))];
    for &layer in &layers {
        let cells: Vec<String> = selections
            .iter()
            .map(|s| {
                report
                    .cell(layer, s)
                    .and_then(|r| r.auroc)
                    .map_or(String::new(), |a| a.to_string())
            })
            .collect();
        lines.push(format!("{layer},{}", cells.join(",")));
    }
    write_csv(&out_path(&cfg, "sweep_heatmap.csv")?, &cfg.echo_comments("sweep"), &lines)?;

    if args.save_probes {
        let models = outcome.models.iter().map(serde_json::to_value).collect::<std::result::Result<Vec<_>, _>>()?;
        write_jsonl(&out_path(&cfg, "probes.jsonl")?, cfg.echo_json("sweep"), &models)?;
    }
    for row in report.rows.iter().filter(|r| r.best) {
        println!("{}", describe_row(row));
    }
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        println!("{failed} cells failed (see error fields)");
    }
    Ok(path)
}

fn describe_row(row: &EvalRow) -> String {
    let mut s = format!("{:<12}", row.method);
    if let Some(l) = row.layer {
        s.push_str(&format!(" layer {l:>3}"));
    }
    if let Some(sel) = &row.selection {
        s.push_str(&format!(" {sel}"));
    }
    if let Some(c) = &row.chosen {
        s.push_str(&format!(" [{c}]"));
    }
    match row.auroc {
        Some(a) => s.push_str(&format!(" auroc {a:.4} (n_test {})", row.n_test)),
        None => s.push_str(&format!(" failed: {}", row.error.as_deref().unwrap_or("unknown"))),
    }
    s
}

fn read_jsonl_rows(path: &Path) -> Result<Vec<Value>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        rows.push(serde_json::from_str(line)?);
    }
    Ok(rows)
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let cfg = args.run.resolve()?;
    let sweep = cfg.output_dir.join("sweep.jsonl");
    let transitions = cfg.output_dir.join("transitions.jsonl");
    if !sweep.exists() && !transitions.exists() {
        return Err(Error::NotFound(format!(
            "neither sweep.jsonl nor transitions.jsonl in {}",
            cfg.output_dir.display()
        )));
    }
    let mut out = String::new();
    if sweep.exists() {
        out.push_str("best AUROC per method\n");
        for v in read_jsonl_rows(&sweep)? {
            let row: EvalRow = serde_json::from_value(v)?;
            if row.best {
                out.push_str(&format!("  {}\n", describe_row(&row)));
            }
        }
    }
    if transitions.exists() {
        out.push_str("transitions\n");
        for v in read_jsonl_rows(&transitions)? {
            let name = v["transition"].as_str().unwrap_or("?");
            let n = v["n_questions"].as_u64().unwrap_or(0);
            let shift = v["mean_shift"].as_f64().map_or("n/a".to_owned(), |s| format!("{s:+.4}"));
            out.push_str(&format!("  {name}: {n} questions, {} mean shift {shift}\n", v["score"].as_str().unwrap_or("")));
        }
    }
    std::fs::write(cfg.output_dir.join("report.txt"), &out)?;
    print!("{out}");
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let ds = match args.kind {
        SynthKind::Planted => planted_signal(&PlantedSignalConfig {
            n_questions: args.questions,
            tokens: if args.high_eu_only {
                SignalTokens::HighEu(5)
            } else {
                SignalTokens::EosAndHighEu(5)
            },
            seed: args.seed,
            ..Default::default()
        })?,
        SynthKind::Behavior => behavior_dataset(&BehaviorPlan::standard(args.per_group, 0.5, 0.2), 10, 20, args.seed)?,
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    ds.write(&args.out)?;
    println!(
        "wrote {} traces to {} and labels to {}",
        ds.traces.len(),
        args.out.display(),
        labels_path_for(&args.out).display()
    );
    Ok(())
}
