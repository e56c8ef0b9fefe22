//! Context-length sweeps with a journal so interrupted sweeps resume.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use lcasr::config::ExperimentConfig;
use lcasr::eval::{format_sweep_tsv, sweep_report, EvalReport};
use lcasr::trainer::{load_checkpoint, Dataset};
use serde::{Deserialize, Serialize};

use crate::commands::{
    evaluate_dataset, resolve_window, run_dir_name, schedule_for_context, train_run, WindowSettings,
};
use crate::failure::{CliResult, Failure};

pub const JOURNAL: &str = "sweep_journal.jsonl";
pub const REPORT_FILE: &str = "eval_report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Status {
    Started,
    Done,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct JournalEntry {
    context_s: f64,
    seed: u64,
    run_dir: PathBuf,
    status: Status,
}

fn read_journal(path: &Path) -> CliResult<Vec<JournalEntry>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Failure::data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn append_journal(path: &Path, entry: &JournalEntry) -> CliResult<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(entry)?)?;
    Ok(())
}

fn same_run(e: &JournalEntry, context_s: f64, seed: u64) -> bool {
    e.seed == seed && (e.context_s - context_s).abs() < 1e-9
}

fn load_report(path: &Path) -> CliResult<EvalReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn sweep(
    config: &Path,
    contexts: &[f64],
    seeds: &[u64],
    steps: Option<usize>,
    runs_dir: Option<PathBuf>,
) -> CliResult<()> {
    let mut base = ExperimentConfig::load(config)?;
    if let Some(s) = steps {
        base.train.total_steps = s;
    }
    if let Some(d) = runs_dir {
        base.data.runs_dir = d;
    }
    if contexts.iter().any(|c| !(*c > 0.0)) || seeds.is_empty() {
        return Err(Failure::config(
            "contexts must be positive and at least one seed is needed",
        ));
    }
    let runs_dir = base.data.runs_dir.clone();
    std::fs::create_dir_all(&runs_dir)?;
    let journal_path = runs_dir.join(JOURNAL);
    let journal = read_journal(&journal_path)?;

    let train = Dataset::from_manifest(&base.data.train_manifest, base.data.norm_scope)?;
    let eval = match &base.data.eval_manifest {
        Some(p) => Dataset::from_manifest(p, base.data.norm_scope)?,
        None => train.clone(),
    };

    let mut reports = Vec::new();
    for &context_s in contexts {
        for &seed in seeds {
            let done = journal
                .iter()
                .rev()
                .find(|e| same_run(e, context_s, seed) && e.status == Status::Done)
                .filter(|e| e.run_dir.join(REPORT_FILE).exists());
            if let Some(e) = done {
                log::info!("{context_s} s seed {seed}: already done in {}", e.run_dir.display());
                reports.push(load_report(&e.run_dir.join(REPORT_FILE))?);
                continue;
            }
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            cfg.curriculum = schedule_for_context(&base.curriculum, context_s);
            cfg.validate()?;
            let run_dir = run_dir_name(&runs_dir, context_s, seed);
            let mut entry = JournalEntry {
                context_s,
                seed,
                run_dir: run_dir.clone(),
                status: Status::Started,
            };
            append_journal(&journal_path, &entry)?;
            log::info!("{context_s} s seed {seed}: training in {}", run_dir.display());
            let ckpt = train_run(&cfg, &train, &run_dir)?;
            let (encoder, vocab, _) = load_checkpoint(&ckpt)?;
            let settings = WindowSettings {
                window_s: Some(context_s),
                stride_s: None,
                merge: cfg.eval.merge,
                norm: cfg.data.norm_scope,
            };
            let decoding = resolve_window(&settings, context_s, cfg.eval.stride_fraction)?;
            let report = evaluate_dataset(&encoder, &vocab, &eval, &decoding, seed)?;
            std::fs::write(run_dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
            log::info!("{context_s} s seed {seed}: WER {:.4}", report.aggregate_wer);
            entry.status = Status::Done;
            append_journal(&journal_path, &entry)?;
            reports.push(report);
        }
    }
    let baseline = pick_baseline(&reports, base.eval.baseline_context_s);
    let rows = sweep_report(&reports, baseline)?;
    let tsv = format_sweep_tsv(&rows);
    std::fs::write(runs_dir.join("sweep_report.tsv"), &tsv)?;
    let mut summary = String::new();
    for r in &reports {
        let line = serde_json::json!({
            "context_s": r.context_len_s,
            "seed": r.seed,
            "wer": r.aggregate_wer,
            "recordings": r.recordings.len(),
        });
        summary.push_str(&line.to_string());
        summary.push('\n');
    }
    std::fs::write(runs_dir.join("sweep_summary.jsonl"), summary)?;
    print!("{tsv}");
    Ok(())
}

/// The configured baseline if it was swept, otherwise the shortest context.
fn pick_baseline(reports: &[EvalReport], preferred: f64) -> f64 {
    if reports.iter().any(|r| (r.context_len_s - preferred).abs() < 1e-9) {
        return preferred;
    }
    let shortest = reports.iter().map(|r| r.context_len_s).fold(f64::INFINITY, f64::min);
    log::warn!("baseline {preferred} s was not swept; using {shortest} s");
    shortest
}

fn collect_reports(dir: &Path, out: &mut Vec<(PathBuf, EvalReport)>) -> CliResult<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == REPORT_FILE) {
            out.push((p.clone(), load_report(&p)?));
        }
    }
    Ok(())
}

pub fn report(results_dir: &Path, baseline_s: f64) -> CliResult<()> {
    let mut found = Vec::new();
    collect_reports(results_dir, &mut found)?;
    if found.is_empty() {
        return Err(Failure::data(format!(
            "no {REPORT_FILE} files under {}",
            results_dir.display()
        )));
    }
    let reports: Vec<EvalReport> = found.into_iter().map(|(_, r)| r).collect();
    let rows = sweep_report(&reports, baseline_s)?;
    print!("{}", format_sweep_tsv(&rows));
    Ok(())
}
