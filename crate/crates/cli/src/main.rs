use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use msr_core::checkpoint;
use msr_core::config::RunConfig;
use msr_core::data::{self, gen_corpus, Split};
use msr_core::error::PathContext;
use msr_core::gradsuite::{self, TOLERANCE};
use msr_core::model::{Modality, Model};
use msr_core::pipeline::{decode_all, encode_hyps, evaluate_pairs, read_token_file};
use msr_core::train::{run_stage1, run_stage2, HistoryEntry, StepReport, Trainer};
use msr_core::Error;

/// Multimodal speech recognition: data generation, training, decoding and
/// scoring.
#[derive(Parser, Debug)]
#[command(name = "msr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (train/valid/test splits + vocab.json).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `corpus.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one recipe stage and write `checkpoint.bin` plus logs to `--out`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory; defaults to `paths.data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 checkpoint for stage 2; defaults to `paths.stage1_checkpoint`.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Overrides the stage's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode one corpus split into a hypotheses file.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, default_value = "audio+visual")]
        modality: Modality,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score hypotheses against references (corpus split or hypotheses file).
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite; exit 0 iff every check passes.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Exit code classes.
const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Classifies by the innermost library error; anything else is a runtime
/// failure.
fn exit_class(e: &anyhow::Error) -> u8 {
    let Some(e) = e.downcast_ref::<Error>() else {
        return EXIT_RUNTIME;
    };
    match e {
        Error::Config(_)
        | Error::Vocab { .. }
        | Error::Input(_)
        | Error::Feasibility { .. }
        | Error::Parse { .. }
        | Error::Checkpoint(_)
        | Error::Recipe(_)
        | Error::File { .. }
        | Error::Io(_) => EXIT_DATA,
        Error::Dimension { .. } | Error::Numeric(_) | Error::Contract(_) | Error::OracleSize(_) => EXIT_RUNTIME,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.corpus.seed = s;
    }
    let (vocab, corpus) = gen_corpus(&cfg.corpus).context("generating corpus")?;
    data::write_corpus_dir(out, &vocab, &corpus).context("writing corpus")?;
    log::info!(
        "wrote {} / {} / {} utterances to {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

fn train(
    config: Option<&Path>,
    stage: u8,
    out: &Path,
    data_dir: Option<&Path>,
    init: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let data_dir = data_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.data_dir.clone())
        .ok_or_else(|| Error::Config("no corpus directory: pass --data or set paths.data_dir".into()))?;
    let (vocab, corpus) =
        data::read_corpus_dir(&data_dir).with_context(|| format!("reading corpus {}", data_dir.display()))?;
    let model_cfg = cfg.model_config()?;
    if vocab.size != model_cfg.text_vocab || vocab.d_in() != model_cfg.encoder.d_in {
        return Err(Error::Config(format!(
            "corpus has vocab {} and d_in {}, config expects {} and {}",
            vocab.size,
            vocab.d_in(),
            model_cfg.text_vocab,
            model_cfg.encoder.d_in
        ))
        .into());
    }
    let mut tcfg = cfg.stage(stage)?.clone();
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    fs::create_dir_all(out).at(out)?;
    let log_path = out.join("train_log.jsonl");
    let mut log_file = fs::File::create(&log_path).at(&log_path)?;
    let mut on_step = |_: &Trainer, r: &StepReport| -> msr_core::Result<()> {
        let line = serde_json::to_string(r).expect("step report serializes");
        writeln!(log_file, "{line}").at(&log_path)?;
        Ok(())
    };
    let mut history: Vec<HistoryEntry> = Vec::new();
    let trainer = if stage == 1 {
        let model = Model::new(model_cfg, cfg.model.init_seed)?;
        run_stage1(model, tcfg, &corpus.train, &corpus.valid, &mut history, &mut on_step).context("stage 1")?
    } else {
        let init = init.map(Path::to_path_buf).or_else(|| cfg.paths.stage1_checkpoint.clone());
        let stage1 = match init {
            Some(p) => Some(
                checkpoint::load(&p)
                    .with_context(|| format!("loading stage-1 checkpoint {}", p.display()))?
                    .model,
            ),
            None => None,
        };
        run_stage2(stage1.as_ref(), tcfg, &corpus.train, &corpus.valid, &mut history, &mut on_step).context("stage 2")?
    };
    if trainer.skipped > 0 {
        log::warn!("{} CTC-infeasible utterances skipped", trainer.skipped);
    }
    let mut hist = String::new();
    for h in &history {
        hist.push_str(&serde_json::to_string(h)?);
        hist.push('\n');
    }
    let hist_path = out.join("history.jsonl");
    fs::write(&hist_path, hist).at(&hist_path)?;
    checkpoint::save(&out.join("checkpoint.bin"), &trainer).context("saving checkpoint")?;
    Ok(())
}

fn decode(ckpt: &Path, corpus: &Path, split: Split, beam: usize, modality: Modality, out: &Path) -> Result<()> {
    let model = checkpoint::load(ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?
        .model;
    let utts = data::read_corpus(&corpus.join(data::split_file(split)))
        .with_context(|| format!("reading {} split", split.name()))?;
    let hyps = decode_all(&model, &utts, modality, beam).context("decoding")?;
    fs::write(out, encode_hyps(&hyps)?).at(out)?;
    Ok(())
}

fn eval(reference: &Path, hyp: &Path, vocab: &Path, out: &Path) -> Result<()> {
    let vocab = data::read_vocab(vocab).context("reading vocabulary")?;
    let refs = read_token_file(reference).context("reading references")?;
    let hyps = read_token_file(hyp).context("reading hypotheses")?;
    let report = evaluate_pairs(&refs, &hyps, &vocab).context("scoring")?;
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(out, text + "\n").at(out)?;
    let t = &report.total;
    println!(
        "S={} D={} I={} N={} WER={:.4}",
        t.substitutions, t.deletions, t.insertions, t.ref_len, t.wer
    );
    Ok(())
}

fn grad_check(seed: u64) -> Result<bool> {
    let mut ok = true;
    for r in gradsuite::run_suite(seed)? {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<22} cases={} max_rel_err={:.3e} (tol {TOLERANCE:e})",
            r.name, r.cases, r.worst
        );
        ok &= r.passed();
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData { config, out, seed } => gen_data(config.as_deref(), &out, seed)?,
        Command::Train {
            config,
            stage,
            out,
            data,
            init,
            seed,
        } => train(config.as_deref(), stage, &out, data.as_deref(), init.as_deref(), seed)?,
        Command::Decode {
            ckpt,
            corpus,
            split,
            beam,
            modality,
            out,
        } => decode(&ckpt, &corpus, split, beam, modality, &out)?,
        Command::Eval {
            reference,
            hyp,
            vocab,
            out,
        } => eval(&reference, &hyp, &vocab, &out)?,
        Command::GradCheck { seed } => {
            if !grad_check(seed)? {
                return Ok(EXIT_RUNTIME);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(exit_class(&e))
        }
    }
}
