//! Implementations of the five subcommands.

use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use asr_core::audio::{load_wav, resample_linear, synth_dataset};
use asr_core::ctc::{beam_decode, greedy_decode, log_softmax};
use asr_core::dataset::{
    build_vocab, decode_ids, load_manifest, normalize_text, save_manifest, single_gender_warnings,
    split_by_speaker, ManifestEntry, Vocabulary, SPLIT_NAMES,
};
use asr_core::features::{log_mel, normalize, write_fmx, FrameConfig};
use asr_core::metrics::{edit_ops, tokenize, WerBreakdown};
use asr_core::model::{
    forward_eval, init_params, load_checkpoint, save_checkpoint, validate_params, ModelConfig,
    ParameterStore,
};
use asr_core::optim::{prepare_items, train_loop, OptimError, TrainItem};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{from_meta, to_meta, RunConfig};
use crate::CliError;

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

/// Generates the synthetic corpus and writes speaker-disjoint
/// train/dev/test manifests next to it.
pub fn cmd_synth_data(config: &RunConfig, seed: u64, out_dir: &Path) -> Result<(), CliError> {
    let spec = config.synth_spec(seed);
    let entries = synth_dataset(&spec, out_dir).map_err(data_err)?;
    let splits = split_by_speaker(&entries, config.fractions, seed).map_err(data_err)?;
    for warning in single_gender_warnings(&splits) {
        eprintln!("warning: {warning}");
    }
    for (split, name) in splits.iter().zip(SPLIT_NAMES) {
        let path = out_dir.join(format!("{name}.jsonl"));
        save_manifest(split, &path).map_err(data_err)?;
        println!(
            "{name}: {} utterances, {} speakers -> {}",
            split.len(),
            split
                .iter()
                .map(|e| e.speaker.as_str())
                .collect::<std::collections::BTreeSet<_>>()
                .len(),
            path.display()
        );
    }
    Ok(())
}

/// Normalized log-mel features for one WAV, written as FMX1.
pub fn cmd_featurize(config: &RunConfig, wav: &Path, out: &Path) -> Result<(), CliError> {
    let clip = load_wav(wav).map_err(data_err)?;
    let clip = resample_linear(&clip, config.sample_rate).map_err(data_err)?;
    let frame_config = config.frame_config();
    let features = log_mel(&clip, &frame_config).map_err(data_err)?;
    let features = normalize(&features);
    write_fmx(&features, out).map_err(data_err)?;
    println!(
        "{}: {} mels x {} frames -> {}",
        wav.display(),
        features.n_mels(),
        features.n_frames(),
        out.display()
    );
    Ok(())
}

/// Feature extraction for a whole manifest, optionally fanned out over
/// threads. Errors keep their 1-based manifest line numbers.
fn prepare_split(
    entries: &[ManifestEntry],
    base_dir: &Path,
    frame_config: &FrameConfig,
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    threads: usize,
) -> Result<Vec<TrainItem>, OptimError> {
    if threads <= 1 || entries.len() <= 1 {
        return prepare_items(entries, base_dir, frame_config, vocab, model_config);
    }
    let chunk_size = entries.len().div_ceil(threads);
    let offset_line = |e: OptimError, offset: usize| match e {
        OptimError::Data { line, message } => OptimError::Data {
            line: line + offset,
            message,
        },
        OptimError::InfeasibleUtterance {
            line,
            needed,
            available,
        } => OptimError::InfeasibleUtterance {
            line: line + offset,
            needed,
            available,
        },
        other => other,
    };
    std::thread::scope(|scope| {
        let handles: Vec<_> = entries
            .chunks(chunk_size)
            .enumerate()
            .map(|(i, chunk)| {
                scope.spawn(move || {
                    prepare_items(chunk, base_dir, frame_config, vocab, model_config)
                        .map_err(|e| offset_line(e, i * chunk_size))
                        .map(|mut items| {
                            for item in &mut items {
                                item.line += i * chunk_size;
                            }
                            items
                        })
                })
            })
            .collect();
        let mut all = Vec::with_capacity(entries.len());
        for handle in handles {
            all.extend(handle.join().expect("feature worker panicked")?);
        }
        Ok(all)
    })
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub struct TrainArgs {
    pub train_manifest: PathBuf,
    pub dev_manifest: PathBuf,
    pub out_dir: PathBuf,
    pub augment: bool,
}

/// Full training run: builds the vocabulary, trains, logs a CSV of
/// per-epoch losses and WERs, checkpoints every epoch, and keeps the
/// best-dev-WER checkpoint as `best.ckpt`.
pub fn cmd_train(
    config: &RunConfig,
    seed: u64,
    threads: usize,
    args: &TrainArgs,
) -> Result<(), CliError> {
    let train_entries = load_manifest(&args.train_manifest).map_err(data_err)?;
    let dev_entries = load_manifest(&args.dev_manifest).map_err(data_err)?;

    let mut vocab_source = train_entries.clone();
    vocab_source.extend(dev_entries.iter().cloned());
    let vocab = build_vocab(&vocab_source, config.unit).map_err(data_err)?;
    let model_config = config.model_config(vocab.n_outputs());
    model_config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let frame_config = config.frame_config();
    let train_items = prepare_split(
        &train_entries,
        &manifest_dir(&args.train_manifest),
        &frame_config,
        &vocab,
        &model_config,
        threads,
    )
    .map_err(data_err)?;
    let dev_items = prepare_split(
        &dev_entries,
        &manifest_dir(&args.dev_manifest),
        &frame_config,
        &vocab,
        &model_config,
        threads,
    )
    .map_err(data_err)?;

    fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out_dir.display())))?;
    let meta = to_meta(config, &vocab, args.augment, seed);
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |e: asr_core::model::ModelError| CliError::Data(format!("{}: {e}", path.display()))
    };

    let mut master_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params =
        init_params(&model_config, &mut master_rng).map_err(|e| CliError::Usage(e.to_string()))?;
    let init_path = args.out_dir.join("init.ckpt");
    save_checkpoint(&init_path, &params, &meta).map_err(io_err(&init_path))?;

    let mut log = String::from("epoch,split,loss,wer\n");
    let mut best: Option<(f64, ParameterStore)> = None;
    let opts = config.train_options(seed, args.augment);

    let records = train_loop(
        &model_config,
        &mut params,
        &vocab,
        &train_items,
        &dev_items,
        &opts,
        |pair, current| {
            for record in pair {
                log.push_str(&format!(
                    "{},{},{},{}\n",
                    record.epoch, record.split, record.loss, record.wer
                ));
            }
            let epoch = pair[0].epoch;
            let path = args.out_dir.join(format!("epoch_{epoch:04}.ckpt"));
            save_checkpoint(&path, current, &meta)
                .map_err(|e| OptimError::Sink(format!("{}: {e}", path.display())))?;
            let dev_wer = pair[1].wer;
            if best.as_ref().is_none_or(|(wer, _)| dev_wer < *wer) {
                best = Some((dev_wer, current.clone()));
            }
            Ok(ControlFlow::Continue(()))
        },
    )
    .map_err(|e| match e {
        OptimError::NonFiniteLoss { .. } | OptimError::NonFiniteGradient(_) => {
            CliError::Numeric(e.to_string())
        }
        other => CliError::Data(other.to_string()),
    })?;

    let log_path = args.out_dir.join("log.csv");
    fs::write(&log_path, &log).map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;

    if let Some((dev_wer, best_params)) = best {
        let best_path = args.out_dir.join("best.ckpt");
        save_checkpoint(&best_path, &best_params, &meta).map_err(io_err(&best_path))?;
        let last = records.last().expect("records exist when best does");
        println!(
            "trained {} epochs; final train wer {:.4}; best dev wer {dev_wer:.4} -> {}",
            last.epoch,
            records[records.len() - 2].wer,
            best_path.display()
        );
    } else {
        println!("no epochs run; wrote {}", init_path.display());
    }
    println!("log: {}", log_path.display());
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub beam: Option<usize>,
    pub csv: PathBuf,
}

/// Pooled corpus WER of a checkpoint over a manifest, as an aligned
/// text table and a CSV row.
pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (params, meta) = load_checkpoint(&args.checkpoint).map_err(data_err)?;
    let trained = from_meta(&meta)?;
    validate_params(&trained.model_config, &params)
        .map_err(|e| CliError::Data(format!("checkpoint does not match its config: {e}")))?;

    let entries = load_manifest(&args.manifest).map_err(data_err)?;
    if entries.is_empty() {
        return Err(CliError::Data(format!(
            "{}: empty manifest, nothing to evaluate",
            args.manifest.display()
        )));
    }

    let base = manifest_dir(&args.manifest);
    let mut pooled = WerBreakdown::default();
    for (idx, entry) in entries.iter().enumerate() {
        let line_err =
            |e: String| CliError::Data(format!("{} line {}: {e}", args.manifest.display(), idx + 1));
        let hyp_text = transcribe_one(
            &base.join(&entry.audio_filepath),
            &trained.model_config,
            &trained.frame_config,
            &params,
            &trained.vocab,
            args.beam,
        )
        .map_err(|e| line_err(e.to_string()))?;
        let ref_text = normalize_text(&entry.text).map_err(|e| line_err(e.to_string()))?;
        pooled.absorb(&edit_ops(&tokenize(&ref_text), &tokenize(&hyp_text)));
    }
    let wer = pooled.errors() as f64 / pooled.reference_len as f64;

    let arch = meta.get("model.arch").map(String::as_str).unwrap_or("?");
    let augment = if trained.augment { "with" } else { "without" };
    let decoder = match args.beam {
        Some(width) => format!("beam({width})"),
        None => "greedy".to_string(),
    };
    println!("{:<12} {:<14} {:<10} {:>8}", "model", "augmentation", "decoder", "wer");
    println!("{arch:<12} {augment:<14} {decoder:<10} {wer:>8.4}");

    let csv = format!("model,augmentation,decoder,wer\n{arch},{augment},{decoder},{wer}\n");
    fs::write(&args.csv, csv).map_err(|e| CliError::Data(format!("{}: {e}", args.csv.display())))?;
    Ok(())
}

enum TranscribeError {
    Audio(asr_core::audio::AudioError),
    Feature(asr_core::features::FeatureError),
    Model(asr_core::model::ModelError),
    Decode(asr_core::ctc::CtcError),
}

impl std::fmt::Display for TranscribeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TranscribeError::Audio(e) => e.fmt(f),
            TranscribeError::Feature(e) => e.fmt(f),
            TranscribeError::Model(e) => e.fmt(f),
            TranscribeError::Decode(e) => e.fmt(f),
        }
    }
}

fn transcribe_one(
    wav: &Path,
    model_config: &ModelConfig,
    frame_config: &FrameConfig,
    params: &ParameterStore,
    vocab: &Vocabulary,
    beam: Option<usize>,
) -> Result<String, TranscribeError> {
    let clip = load_wav(wav).map_err(TranscribeError::Audio)?;
    let clip = resample_linear(&clip, asr_core::audio::CANONICAL_SAMPLE_RATE)
        .map_err(TranscribeError::Audio)?;
    let features = log_mel(&clip, frame_config).map_err(TranscribeError::Feature)?;
    let features = normalize(&features);
    let logits = forward_eval(model_config, params, &[features.values])
        .map_err(TranscribeError::Model)?;
    let log_probs = log_softmax(logits[0].view());
    let decoded = match beam {
        Some(width) => beam_decode(log_probs.view(), width).map_err(TranscribeError::Decode)?,
        None => greedy_decode(log_probs.view()).map_err(TranscribeError::Decode)?,
    };
    Ok(decode_ids(decoded.ids.ids(), vocab).expect("decoder ids are always in vocabulary"))
}

/// One normalized transcript line per WAV, in argument order.
pub fn cmd_transcribe(checkpoint: &Path, wavs: &[PathBuf]) -> Result<(), CliError> {
    let (params, meta) = load_checkpoint(checkpoint).map_err(data_err)?;
    let trained = from_meta(&meta)?;
    validate_params(&trained.model_config, &params)
        .map_err(|e| CliError::Data(format!("checkpoint does not match its config: {e}")))?;

    let mut out = std::io::stdout().lock();
    for wav in wavs {
        let text = transcribe_one(
            wav,
            &trained.model_config,
            &trained.frame_config,
            &params,
            &trained.vocab,
            None,
        )
        .map_err(|e| CliError::Data(e.to_string()))?;
        writeln!(out, "{text}").map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(())
}
