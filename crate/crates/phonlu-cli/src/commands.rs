//! Subcommand implementations. Each one loads its inputs, resolves
//! configuration (flag over file over default), runs the library call, and
//! writes artifacts plus a finished manifest into `--out`.

use std::fmt;
use std::path::{Path, PathBuf};

use phonlu::dataset::{load_dataset, ratio_split, save_dataset, DatasetError};
use phonlu::lusid::{
    generate_dataset, locate_peak, train_pair_classifier, tune_windows, verify, LusidError,
    SlotPrototype, SpliceSpec,
};
use phonlu::model::{
    Checkpoint, CheckpointError, CnnLstmConfig, LoadedModel, ModelConfig, ModelError,
    TransformerConfig,
};
use phonlu::phone_text::{parse_transcript, PhoneSequence, PhoneTextError, Vocabulary};
use phonlu::recognizer::{
    read_manifest, transcribe, transcribe_corpus, OutputMode, RecognizerError, RecognizerSpec,
    Transcription,
};
use phonlu::reporting::{
    attention_csv, attention_svg, curve_csv, leaderboard_csv, metrics_json, tune_csv,
    write_epoch_logs, ReportingError, RunManifest,
};
use phonlu::training::{
    cross_validate, default_transformer_space, evaluate, grid_search, learning_curve, pretrain,
    train_classifier, ModelFamily, TrainConfig, TrainingError,
};

use crate::config::{load_space, FileConfig};
use crate::{Command, CommonArgs, FamilyArg, ModeArg, TrainFlags};

#[derive(Debug)]
pub enum CliError {
    /// Bad data, files, or configuration values; exit 2.
    Data(String),
    /// Training diverged; exit 3.
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Data(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Data(msg) | CliError::Diverged(msg) => f.write_str(msg),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<LusidError> for CliError {
    fn from(e: LusidError) -> Self {
        match e {
            LusidError::Training(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(
    DatasetError,
    PhoneTextError,
    RecognizerError,
    ReportingError,
    CheckpointError,
    ModelError,
    std::io::Error,
    serde_json::Error
);

/// Open run: resolved config, seed, and a started manifest already on disk.
struct RunCtx {
    out: PathBuf,
    cfg: FileConfig,
    seed: u64,
    manifest: RunManifest,
}

fn start_run(common: &CommonArgs, allowed: &[&str]) -> Result<RunCtx, CliError> {
    let cfg = FileConfig::load(common.config.as_deref())?;
    cfg.check_keys(allowed)?;
    let seed = match common.seed {
        Some(s) => s,
        None => cfg.get_u64("seed")?.unwrap_or(0),
    };
    let command = std::env::args().collect::<Vec<_>>().join(" ");
    let manifest = RunManifest::new(command, common.config.clone(), seed, env!("CARGO_PKG_VERSION"));
    manifest.write_to_dir(&common.out)?;
    Ok(RunCtx {
        out: common.out.clone(),
        cfg,
        seed,
        manifest,
    })
}

fn finish_run(mut ctx: RunCtx) -> Result<(), CliError> {
    ctx.manifest.finish();
    ctx.manifest.write_to_dir(&ctx.out)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn resolve<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn train_config(flags: &TrainFlags, cfg: &FileConfig, seed: u64) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        learning_rate: resolve(flags.learning_rate, cfg.get_f64("learning_rate")?, d.learning_rate),
        batch_size: resolve(flags.batch_size, cfg.get_usize("batch_size")?, d.batch_size),
        max_epochs: resolve(flags.max_epochs, cfg.get_usize("max_epochs")?, d.max_epochs),
        patience: resolve(flags.patience, cfg.get_usize("patience")?, d.patience),
        seed,
    })
}

const TRAIN_KEYS: [&str; 5] = ["seed", "learning_rate", "batch_size", "max_epochs", "patience"];
const CNN_KEYS: [&str; 5] = [
    "embed_dim",
    "kernel_sizes",
    "conv_filters",
    "lstm_hidden",
    "use_attention",
];
const TRANSFORMER_KEYS: [&str; 6] = [
    "embed_dim",
    "num_heads",
    "num_layers",
    "ff_hidden",
    "max_seq_len",
    "dropout",
];
const RATIO_KEYS: [&str; 3] = ["train_ratio", "val_ratio", "test_ratio"];

fn keys(groups: &[&[&'static str]]) -> Vec<&'static str> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

fn cnn_config(cfg: &FileConfig) -> Result<CnnLstmConfig, CliError> {
    // num_classes is a placeholder; training derives it from the labels.
    let mut c = CnnLstmConfig::new(2);
    if let Some(v) = cfg.get_usize("embed_dim")? {
        c.embed_dim = v;
    }
    if let Some(v) = cfg.get_usize_list("kernel_sizes")? {
        c.conv_kernel_sizes = v;
    }
    if let Some(v) = cfg.get_usize("conv_filters")? {
        c.conv_filters = v;
    }
    if let Some(v) = cfg.get_usize("lstm_hidden")? {
        c.lstm_hidden = v;
    }
    if let Some(v) = cfg.get_bool("use_attention")? {
        c.use_attention = v;
    }
    Ok(c)
}

fn transformer_config(cfg: &FileConfig) -> Result<TransformerConfig, CliError> {
    let mut c = TransformerConfig::new(2);
    if let Some(v) = cfg.get_usize("embed_dim")? {
        c.embed_dim = v;
    }
    if let Some(v) = cfg.get_usize("num_heads")? {
        c.num_heads = v;
    }
    if let Some(v) = cfg.get_usize("num_layers")? {
        c.num_layers = v;
    }
    if let Some(v) = cfg.get_usize("ff_hidden")? {
        c.ff_hidden = v;
    }
    if let Some(v) = cfg.get_usize("max_seq_len")? {
        c.max_seq_len = v;
    }
    if let Some(v) = cfg.get_f64("dropout")? {
        c.dropout = v;
    }
    Ok(c)
}

fn model_config(family: Option<FamilyArg>, cfg: &FileConfig) -> Result<ModelConfig, CliError> {
    let family = match family {
        Some(FamilyArg::CnnLstm) => ModelFamily::CnnLstm,
        Some(FamilyArg::Transformer) => ModelFamily::Transformer,
        None => match cfg.get_str("family") {
            Some("cnn_lstm") | Some("cnn-lstm") => ModelFamily::CnnLstm,
            Some("transformer") => ModelFamily::Transformer,
            Some(other) => {
                return Err(CliError::Data(format!(
                    "config key \"family\": {other:?} is not cnn_lstm or transformer"
                )))
            }
            None => ModelFamily::CnnLstm,
        },
    };
    Ok(match family {
        ModelFamily::CnnLstm => ModelConfig::CnnLstm(cnn_config(cfg)?),
        ModelFamily::Transformer => ModelConfig::Transformer(transformer_config(cfg)?),
    })
}

fn ratios(cfg: &FileConfig) -> Result<(f64, f64, f64), CliError> {
    Ok((
        cfg.get_f64("train_ratio")?.unwrap_or(0.6),
        cfg.get_f64("val_ratio")?.unwrap_or(0.2),
        cfg.get_f64("test_ratio")?.unwrap_or(0.2),
    ))
}

fn load_model(path: &Path) -> Result<LoadedModel, CliError> {
    let ck = Checkpoint::load(path)?;
    Ok(LoadedModel::from_checkpoint(&ck)?)
}

fn prototype_from(phones: &str, label: &str) -> Result<SlotPrototype, CliError> {
    Ok(SlotPrototype {
        label: label.to_string(),
        phones: parse_transcript(phones)?,
    })
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Vocab { data, min_count, common } => {
            let ctx = start_run(&common, &["seed", "min_count"])?;
            let records = load_dataset(&data)?;
            let corpus: Vec<PhoneSequence> = records.iter().map(|u| u.phones.clone()).collect();
            let min_count = resolve(min_count, ctx.cfg.get_usize("min_count")?, 1);
            let vocab = Vocabulary::build(&corpus, min_count)?;
            let symbols: Vec<&str> = vocab.phones().iter().map(|t| t.as_str()).collect();
            write_json(&ctx.out.join("vocab.json"), &serde_json::json!({
                "phones": symbols,
                "num_phones": vocab.num_phones(),
                "size": vocab.size(),
            }))?;
            println!(
                "vocabulary: {} phones, {} ids with specials",
                vocab.num_phones(),
                vocab.size()
            );
            finish_run(ctx)
        }

        Command::Pretrain { data, common, train } => {
            let allowed = keys(&[&["seed"], &TRAIN_KEYS[1..], &TRANSFORMER_KEYS]);
            let ctx = start_run(&common, &allowed)?;
            let records = load_dataset(&data)?;
            let corpus: Vec<PhoneSequence> = records.iter().map(|u| u.phones.clone()).collect();
            let config = transformer_config(&ctx.cfg)?;
            let tc = train_config(&train, &ctx.cfg, ctx.seed)?;
            let outcome = pretrain(&corpus, &config, &tc)?;
            outcome.checkpoint.save(&ctx.out.join("encoder.ckpt"))?;
            write_epoch_logs(&ctx.out.join("epochs.jsonl"), &outcome.logs)?;
            println!(
                "held-out masked-prediction loss: initial {:.6}, best {:.6}",
                outcome.initial_heldout_loss, outcome.best_heldout_loss
            );
            finish_run(ctx)
        }

        Command::Train { data, family, init, cv_folds, common, train } => {
            let allowed = keys(&[
                &["seed", "family"],
                &TRAIN_KEYS[1..],
                &CNN_KEYS,
                &TRANSFORMER_KEYS,
                &RATIO_KEYS,
            ]);
            let ctx = start_run(&common, &allowed)?;
            let records = load_dataset(&data)?;
            let config = model_config(family, &ctx.cfg)?;
            let tc = train_config(&train, &ctx.cfg, ctx.seed)?;

            if let Some(folds) = cv_folds {
                let report = cross_validate(&records, folds, &config, &tc)?;
                write_json(&ctx.out.join("cv.json"), &report)?;
                for (i, acc) in report.fold_accuracies.iter().enumerate() {
                    println!("fold {i}: accuracy {acc:.4}");
                }
                println!("mean accuracy {:.4} (std {:.4})", report.mean, report.std_dev);
                return finish_run(ctx);
            }

            let split = ratio_split(&records, ratios(&ctx.cfg)?, tc.seed)?;
            let init_ck = init.as_deref().map(Checkpoint::load).transpose()?;
            let outcome = train_classifier(&split, &config, &tc, init_ck.as_ref())?;
            outcome.checkpoint.save(&ctx.out.join("model.ckpt"))?;
            write_epoch_logs(&ctx.out.join("epochs.jsonl"), &outcome.logs)?;
            write_text(
                &ctx.out.join("val_metrics.json"),
                &metrics_json(&outcome.metrics)?,
            )?;
            let test_metrics = evaluate(&outcome.checkpoint, &split.test)?;
            let rendered = metrics_json(&test_metrics)?;
            write_text(&ctx.out.join("metrics.json"), &rendered)?;
            print!("{rendered}");
            finish_run(ctx)
        }

        Command::Eval { model, data, common } => {
            let ctx = start_run(&common, &["seed"])?;
            let ck = Checkpoint::load(&model)?;
            let records = load_dataset(&data)?;
            let metrics = evaluate(&ck, &records)?;
            let rendered = metrics_json(&metrics)?;
            write_text(&ctx.out.join("metrics.json"), &rendered)?;
            print!("{rendered}");
            finish_run(ctx)
        }

        Command::Curve { data, step, family, common, train } => {
            let allowed = keys(&[
                &["seed", "family"],
                &TRAIN_KEYS[1..],
                &CNN_KEYS,
                &TRANSFORMER_KEYS,
            ]);
            let ctx = start_run(&common, &allowed)?;
            let records = load_dataset(&data)?;
            let config = model_config(family, &ctx.cfg)?;
            let tc = train_config(&train, &ctx.cfg, ctx.seed)?;
            let rows = learning_curve(&records, step, &config, &tc)?;
            let rendered = curve_csv(&rows)?;
            write_text(&ctx.out.join("curve.csv"), &rendered)?;
            print!("{rendered}");
            finish_run(ctx)
        }

        Command::Grid { data, family, space, common, train } => {
            let allowed = keys(&[&["seed", "family"], &TRAIN_KEYS[1..], &RATIO_KEYS]);
            let ctx = start_run(&common, &allowed)?;
            let records = load_dataset(&data)?;
            let file_family = match ctx.cfg.get_str("family") {
                Some("cnn_lstm") | Some("cnn-lstm") => Some(FamilyArg::CnnLstm),
                Some("transformer") => Some(FamilyArg::Transformer),
                _ => None,
            };
            let family = match family.or(file_family) {
                Some(FamilyArg::CnnLstm) => ModelFamily::CnnLstm,
                Some(FamilyArg::Transformer) | None => ModelFamily::Transformer,
            };
            let space = match &space {
                Some(path) => load_space(path)?,
                None if family == ModelFamily::Transformer => default_transformer_space(),
                None => {
                    return Err(CliError::Data(
                        "grid over cnn-lstm needs --space; only the transformer has a \
                         built-in space"
                            .into(),
                    ))
                }
            };
            let tc = train_config(&train, &ctx.cfg, ctx.seed)?;
            let split = ratio_split(&records, ratios(&ctx.cfg)?, tc.seed)?;
            let (best_config, leaderboard) = grid_search(&split, family, &space, &tc)?;
            write_text(&ctx.out.join("leaderboard.csv"), &leaderboard_csv(&leaderboard)?)?;
            write_json(&ctx.out.join("best_config.json"), &best_config)?;
            let best = &leaderboard[0];
            println!(
                "best of {}: val accuracy {:.4}, {} params, {}",
                leaderboard.len(),
                best.val_accuracy,
                best.num_params,
                best.assignment
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            finish_run(ctx)
        }

        Command::LusidTrain { class_a, class_b, common, train } => {
            let allowed = keys(&[&["seed"], &TRAIN_KEYS[1..], &CNN_KEYS]);
            let ctx = start_run(&common, &allowed)?;
            let a = load_dataset(&class_a)?;
            let b = load_dataset(&class_b)?;
            let mut config = cnn_config(&ctx.cfg)?;
            if ctx.cfg.get_bool("use_attention")? == Some(false) {
                return Err(CliError::Data(
                    "lusid-train requires attention pooling; drop use_attention = false".into(),
                ));
            }
            config.use_attention = true;
            let tc = train_config(&train, &ctx.cfg, ctx.seed)?;
            let outcome = train_pair_classifier(&a, &b, &config, &tc)?;
            outcome.checkpoint.save(&ctx.out.join("model.ckpt"))?;
            write_epoch_logs(&ctx.out.join("epochs.jsonl"), &outcome.logs)?;
            write_text(&ctx.out.join("metrics.json"), &metrics_json(&outcome.metrics)?)?;
            println!(
                "pair classifier: train accuracy {:.4} at epoch {}",
                outcome.metrics.accuracy, outcome.best_epoch
            );
            finish_run(ctx)
        }

        Command::LusidLocate { model, data, common } => {
            let ctx = start_run(&common, &["seed"])?;
            let model = load_model(&model)?;
            let records = load_dataset(&data)?;
            let mut out = String::from("id,peak\n");
            for utt in &records {
                let (peak, _) = locate_peak(&model, &utt.phones)?;
                out.push_str(&format!("{},{peak}\n", utt.id));
            }
            write_text(&ctx.out.join("peaks.csv"), &out)?;
            println!("located {} attention peaks", records.len());
            finish_run(ctx)
        }

        Command::LusidSplice {
            model,
            base,
            prototype,
            label,
            l,
            r,
            verifier,
            all,
            common,
        } => {
            let ctx = start_run(&common, &["seed"])?;
            let model = load_model(&model)?;
            let base = load_dataset(&base)?;
            let prototype = prototype_from(&prototype, &label)?;
            let verifier = verifier.as_deref().map(load_model).transpose()?;
            let report = generate_dataset(
                &model,
                &base,
                &prototype,
                SpliceSpec { l, r },
                verifier.as_ref(),
            )?;
            save_dataset(&ctx.out.join("generated.jsonl"), &report.to_utterances(!all))?;
            write_json(&ctx.out.join("report.json"), &report)?;
            println!(
                "generated {} examples, verified fraction {:.6}",
                report.examples.len(),
                report.verified_fraction
            );
            finish_run(ctx)
        }

        Command::LusidVerify { model, data, target, common } => {
            let ctx = start_run(&common, &["seed"])?;
            let model = load_model(&model)?;
            let records = load_dataset(&data)?;
            let target_index = model
                .labels
                .iter()
                .position(|l| *l == target)
                .ok_or_else(|| {
                    CliError::Data(format!(
                        "label {target:?} unknown to the model (labels: {:?})",
                        model.labels
                    ))
                })?;
            let mut verified = 0usize;
            for utt in &records {
                if verify(&model, &utt.phones, target_index)? {
                    verified += 1;
                }
            }
            let fraction = verified as f64 / records.len().max(1) as f64;
            write_json(&ctx.out.join("verify.json"), &serde_json::json!({
                "total": records.len(),
                "verified": verified,
                "fraction": fraction,
            }))?;
            println!("verified_fraction {fraction:.6}");
            finish_run(ctx)
        }

        Command::LusidTune {
            model,
            base,
            prototype,
            label,
            l_min,
            l_max,
            r_min,
            r_max,
            common,
        } => {
            let ctx = start_run(&common, &["seed"])?;
            let model = load_model(&model)?;
            let base = load_dataset(&base)?;
            let prototype = prototype_from(&prototype, &label)?;
            if l_min > l_max || r_min > r_max {
                return Err(CliError::Data("window ranges must have min <= max".into()));
            }
            let ls: Vec<usize> = (l_min..=l_max).collect();
            let rs: Vec<usize> = (r_min..=r_max).collect();
            let (best, cells) = tune_windows(&model, &base, &prototype, &ls, &rs)?;
            write_text(&ctx.out.join("tune.csv"), &tune_csv(&cells)?)?;
            println!("best window l={} r={}", best.l, best.r);
            finish_run(ctx)
        }

        Command::Transcribe {
            audio,
            manifest,
            command_template,
            output_mode,
            k,
            cache_dir,
            workers,
            common,
        } => {
            let allowed = ["seed", "command_template", "output_mode", "k", "cache_dir", "workers"];
            let ctx = start_run(&common, &allowed)?;
            let template = command_template
                .or_else(|| ctx.cfg.get_str("command_template").map(String::from))
                .ok_or_else(|| {
                    CliError::Data("a recognizer command template is required".into())
                })?;
            let mode = match output_mode {
                Some(ModeArg::Top1) => OutputMode::Top1,
                Some(ModeArg::Topk) => OutputMode::TopK,
                None => match ctx.cfg.get_str("output_mode") {
                    Some("top1") | None => OutputMode::Top1,
                    Some("topk") => OutputMode::TopK,
                    Some(other) => {
                        return Err(CliError::Data(format!(
                            "config key \"output_mode\": {other:?} is not top1 or topk"
                        )))
                    }
                },
            };
            // The environment variable wins over flag and file so a shared
            // cache can be imposed on recorded commands without editing them.
            let cache_dir = match std::env::var_os("PHONLU_CACHE_DIR") {
                Some(dir) => PathBuf::from(dir),
                None => cache_dir
                    .or_else(|| ctx.cfg.get_str("cache_dir").map(PathBuf::from))
                    .unwrap_or_else(|| ctx.out.join("cache")),
            };
            let spec = RecognizerSpec {
                command_template: template,
                output_mode: mode,
                k: resolve(k, ctx.cfg.get_usize("k")?, 1),
                cache_dir,
            };

            if let Some(audio) = audio {
                match transcribe(&audio, &spec)? {
                    Transcription::Top1(seq) => {
                        let line = seq
                            .tokens()
                            .iter()
                            .map(|t| t.as_str())
                            .collect::<Vec<_>>()
                            .join(" ");
                        write_text(&ctx.out.join("transcript.txt"), &format!("{line}\n"))?;
                        println!("{line}");
                    }
                    Transcription::TopK(lattice) => {
                        let line = lattice.to_json_line();
                        write_text(&ctx.out.join("lattice.jsonl"), &format!("{line}\n"))?;
                        println!("{line}");
                    }
                }
            } else {
                let rows = read_manifest(&manifest.expect("clap enforces audio xor manifest"))?;
                let out_path = ctx.out.join("transcripts.jsonl");
                let report =
                    transcribe_corpus(&rows, &spec, &out_path, resolve(workers, ctx.cfg.get_usize("workers")?, 1))?;
                match &report.sidecar {
                    Some(sidecar) => println!(
                        "transcribed {} of {} rows; failures in {}",
                        report.written,
                        rows.len(),
                        sidecar.display()
                    ),
                    None => println!("transcribed {} rows", report.written),
                }
            }
            finish_run(ctx)
        }

        Command::PlotAttention { model, phones, common } => {
            let ctx = start_run(&common, &["seed"])?;
            let model = load_model(&model)?;
            let utterance = parse_transcript(&phones)?;
            let (peak, profile) = locate_peak(&model, &utterance)?;
            let csv = attention_csv(&utterance, &profile)?;
            let svg = attention_svg(&utterance, &profile)?;
            write_text(&ctx.out.join("attention.csv"), &csv)?;
            write_text(&ctx.out.join("attention.svg"), &svg)?;
            print!("{csv}");
            println!("peak at {peak} ({})", utterance.tokens()[peak].as_str());
            finish_run(ctx)
        }
    }
}
