use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lcasr::config::ExperimentConfig;
use lcasr::ctc::Vocabulary;
use lcasr::curriculum::{CurriculumSchedule, TimedWord};
use lcasr::dsp::{compute_log_mel, normalize_with_scope, read_wav, write_wav, MelSpectrogram, NormScope};
use lcasr::encoder::Encoder;
use lcasr::eval::{normalize_text, EvalReport, SimpleNormalizer};
use lcasr::manifest::{validate_manifest, write_manifest, ManifestRecord};
use lcasr::synth::{cue_corpus, tone_corpus, CueCorpusOptions, Sample, ToneCorpusOptions};
use lcasr::trainer::{load_checkpoint, train as run_training, Dataset, Trainer};
use lcasr::window::{seconds_to_frames, transcribe_long, worker_count, MergeMode, MergedLattice, WindowOptions};
use serde::Serialize;

use crate::failure::{CliResult, Failure, EXIT_INVALID_RECORDS};

pub fn prepare(manifest: &Path, out: Option<&Path>, validate_only: bool) -> CliResult<()> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Failure::data(format!("{}: {e}", manifest.display())))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let check = validate_manifest(&text, base, true);
    for w in &check.warnings {
        eprintln!("{}:{}: warning: {}", manifest.display(), w.line, w.message);
    }
    for e in &check.errors {
        eprintln!("{}:{}: error: {}", manifest.display(), e.line, e.message);
    }
    if !check.errors.is_empty() {
        return Err(Failure::new(
            EXIT_INVALID_RECORDS,
            format!("{} invalid record(s) in {}", check.errors.len(), manifest.display()),
        ));
    }
    let records: Vec<ManifestRecord> = check
        .records
        .iter()
        .map(|r| {
            let audio_path = std::fs::canonicalize(r.resolve_audio(base))?;
            let words = r
                .words
                .iter()
                .filter_map(|w| {
                    let norm = normalize_text(&w.w);
                    (!norm.is_empty()).then(|| TimedWord::new(norm, w.s, w.e))
                })
                .collect();
            Ok(ManifestRecord {
                audio_path,
                duration_s: r.duration_s,
                words,
            })
        })
        .collect::<CliResult<_>>()?;
    if validate_only {
        println!("{} records valid, {} warning(s)", records.len(), check.warnings.len());
        return Ok(());
    }
    let out = out.ok_or_else(|| Failure::config("--out is required unless --validate is given"))?;
    std::fs::create_dir_all(out)?;
    write_manifest(&out.join("manifest.jsonl"), &records)?;
    let chars: BTreeSet<char> = records
        .iter()
        .flat_map(|r| r.words.iter().flat_map(|w| w.w.chars()))
        .filter(|c| !c.is_whitespace())
        .collect();
    let vocab = Vocabulary::from_chars(&chars.into_iter().collect::<String>())?;
    vocab.save(&out.join("vocab.txt"))?;
    println!(
        "wrote {} records and a {}-token vocabulary to {}",
        records.len(),
        vocab.len(),
        out.display()
    );
    Ok(())
}

/// Command-line overrides applied on top of the config file.
pub struct TrainOverrides {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub peak_lr: Option<f64>,
    pub context_s: Option<f64>,
}

/// Curriculum for a model whose final context is `context_s`: the warmup
/// schedule capped at that length, or a constant length when the cap is
/// below the schedule's first value.
pub fn schedule_for_context(base: &CurriculumSchedule, context_s: f64) -> CurriculumSchedule {
    if context_s >= base.s0 {
        CurriculumSchedule {
            s_max: context_s,
            ..base.clone()
        }
    } else {
        CurriculumSchedule::constant(context_s)
    }
}

pub fn load_vocab(cfg: &ExperimentConfig) -> CliResult<Vocabulary> {
    Ok(match &cfg.data.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::characters(),
    })
}

fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// `{timestamp}-{context}s-{seed}` under `runs_dir`.
pub fn run_dir_name(runs_dir: &Path, context_s: f64, seed: u64) -> PathBuf {
    runs_dir.join(format!("{}-{context_s}s-{seed}", unix_seconds()))
}

/// Trains with `cfg` into `out`, writing the effective config alongside the
/// checkpoints. Returns the final checkpoint path.
pub fn train_run(cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> CliResult<PathBuf> {
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("config.toml"))?;
    let vocab = load_vocab(cfg)?;
    let mut trainer = Trainer::from_config(cfg.encoder.clone(), cfg.train.clone(), cfg.curriculum.clone(), vocab)?;
    let every = (cfg.train.total_steps / 20).max(1);
    run_training(&mut trainer, data, Some(out), |r| {
        if r.step % every == 0 || r.step == 1 {
            log::info!(
                "step {} loss {:.4} lr {:.2e} context {} s grad norm {:.3}",
                r.step,
                r.loss,
                r.lr,
                r.seq_len_s,
                r.grad_norm
            );
        }
    })?;
    if trainer.skipped_chunks > 0 {
        log::warn!(
            "skipped {} chunk(s) that were too short for their targets",
            trainer.skipped_chunks
        );
    }
    Ok(out.join("final.ckpt"))
}

pub fn train(o: &TrainOverrides) -> CliResult<()> {
    let mut cfg = ExperimentConfig::load(&o.config)?;
    if let Some(s) = o.steps {
        cfg.train.total_steps = s;
    }
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(lr) = o.peak_lr {
        cfg.train.peak_lr = lr;
    }
    if let Some(c) = o.context_s {
        cfg.curriculum = CurriculumSchedule::constant(c);
    }
    cfg.validate()?;
    let data = Dataset::from_manifest(&cfg.data.train_manifest, cfg.data.norm_scope)?;
    if data.is_empty() {
        return Err(Failure::data("training manifest has no records"));
    }
    let out = match &o.out {
        Some(p) => p.clone(),
        None => run_dir_name(&cfg.data.runs_dir, cfg.curriculum.s_max, cfg.train.seed),
    };
    let ckpt = train_run(&cfg, &data, &out)?;
    println!("{}", ckpt.display());
    Ok(())
}

/// Decoding window settings shared by `transcribe` and `evaluate`.
#[derive(Clone, Copy, Debug)]
pub struct WindowSettings {
    pub window_s: Option<f64>,
    pub stride_s: Option<f64>,
    pub merge: MergeMode,
    pub norm: NormScope,
}

/// Resolved window geometry in mel frames.
#[derive(Clone, Copy, Debug)]
pub struct Decoding {
    pub window: usize,
    pub stride: usize,
    pub window_s: f64,
    pub merge: MergeMode,
}

/// Snaps window and stride to the encoder grid; `context_s` is the default window.
pub fn resolve_window(w: &WindowSettings, context_s: f64, stride_fraction: f64) -> CliResult<Decoding> {
    let window_s = w.window_s.unwrap_or(context_s);
    let (window, snapped) = seconds_to_frames(window_s)?;
    if snapped {
        log::info!("window {window_s} s snapped to {} s", window as f64 / 100.0);
    }
    let stride_s = w.stride_s.unwrap_or(window_s * stride_fraction);
    let (stride, snapped) = seconds_to_frames(stride_s)?;
    if snapped {
        log::info!("stride {stride_s} s snapped to {} s", stride as f64 / 100.0);
    }
    if stride > window {
        return Err(Failure::config(format!(
            "stride {stride_s} s exceeds window {window_s} s"
        )));
    }
    Ok(Decoding {
        window,
        stride,
        window_s,
        merge: w.merge,
    })
}

fn spectrogram(path: &Path, scope: NormScope) -> CliResult<MelSpectrogram> {
    let audio = read_wav(path).map_err(|e| Failure::from(e).with_context(path))?;
    Ok(normalize_with_scope(&compute_log_mel(&audio)?, scope))
}

impl Failure {
    fn with_context(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

#[derive(Serialize)]
struct LatticeDump<'a> {
    frame_duration_s: f64,
    window_frames: usize,
    stride_frames: usize,
    tokens: &'a [String],
    coverage: &'a [usize],
    log_probs: Vec<&'a [f64]>,
}

pub fn transcribe(checkpoint: &Path, wav: &Path, w: &WindowSettings, lattice_out: Option<&Path>) -> CliResult<()> {
    let (encoder, vocab, meta) = load_checkpoint(checkpoint)?;
    let d = resolve_window(w, meta.seq_len_s, 0.125)?;
    let spec = spectrogram(wav, w.norm)?;
    let opts = WindowOptions {
        mode: d.merge,
        workers: worker_count(),
    };
    let (tokens, merged) = transcribe_long(&encoder, &spec, d.window, d.stride, opts)?;
    println!("{}", vocab.decode(&tokens));
    if let Some(path) = lattice_out {
        write_lattice(path, &merged, &d, &vocab)?;
    }
    Ok(())
}

fn write_lattice(path: &Path, merged: &MergedLattice, d: &Decoding, vocab: &Vocabulary) -> CliResult<()> {
    let lp = merged.lattice.log_probs();
    let dump = LatticeDump {
        frame_duration_s: merged.lattice.frame_duration,
        window_frames: d.window,
        stride_frames: d.stride,
        tokens: vocab.tokens(),
        coverage: &merged.coverage,
        log_probs: (0..lp.rows()).map(|r| lp.row(r)).collect(),
    };
    std::fs::write(path, serde_json::to_string(&dump)?)?;
    Ok(())
}

/// Decodes every recording of `data` and scores it.
pub fn evaluate_dataset(
    encoder: &Encoder,
    vocab: &Vocabulary,
    data: &Dataset,
    d: &Decoding,
    seed: u64,
) -> CliResult<EvalReport> {
    let opts = WindowOptions {
        mode: d.merge,
        workers: worker_count(),
    };
    let pairs = data
        .items
        .iter()
        .map(|u| {
            let spec = MelSpectrogram::from_frames(u.mel.clone())?;
            let (tokens, _) = transcribe_long(encoder, &spec, d.window, d.stride, opts)?;
            Ok((u.id.clone(), u.transcript.text(), vocab.decode(&tokens)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(EvalReport::score(d.window_s, seed, &pairs, &SimpleNormalizer))
}

pub fn evaluate(checkpoint: &Path, manifest: &Path, w: &WindowSettings, out: Option<&Path>) -> CliResult<()> {
    let (encoder, vocab, meta) = load_checkpoint(checkpoint)?;
    let d = resolve_window(w, meta.seq_len_s, 0.125)?;
    let data = Dataset::from_manifest(manifest, w.norm)?;
    let report = evaluate_dataset(&encoder, &vocab, &data, &d, meta.train.seed)?;
    log::info!(
        "WER {:.4} over {} recordings",
        report.aggregate_wer,
        report.recordings.len()
    );
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => std::fs::write(p, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

pub fn synth(cue: bool, out: &Path, n: Option<usize>, seed: Option<u64>) -> CliResult<()> {
    let samples: Vec<Sample> = if cue {
        let d = CueCorpusOptions::default();
        cue_corpus(&CueCorpusOptions {
            n_recordings: n.unwrap_or(d.n_recordings),
            seed: seed.unwrap_or(d.seed),
            ..d
        })
    } else {
        let d = ToneCorpusOptions::default();
        tone_corpus(&ToneCorpusOptions {
            n_utterances: n.unwrap_or(d.n_utterances),
            seed: seed.unwrap_or(d.seed),
            ..d
        })
    };
    std::fs::create_dir_all(out.join("wav"))?;
    let mut records = Vec::new();
    for (id, audio, transcript) in &samples {
        let rel = PathBuf::from("wav").join(format!("{id}.wav"));
        write_wav(&out.join(&rel), audio)?;
        records.push(ManifestRecord {
            audio_path: rel,
            duration_s: audio.duration_s(),
            words: transcript.words.clone(),
        });
    }
    write_manifest(&out.join("manifest.jsonl"), &records)?;
    println!("wrote {} recordings to {}", records.len(), out.display());
    Ok(())
}
