//! Command-line entry points: `train`, `generate`, `verify`, `inspect`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error,
//! 3 verification failure. Diagnostics are single lines on stderr;
//! stdout carries the command's payload (CSV loss log, generated text,
//! or the verification report).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::ambiguity::{build_plm, check_rectangular, KernelFamily};
use crate::checkpoint::{content_hash, load_checkpoint, save_checkpoint, CheckpointHeader};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::inference::{generate, GenConfig};
use crate::model::GammtParams;
use crate::tokenizer::{encode_corpus_lines, Vocabulary};
use crate::training::{train, TrainConfig, LOSS_CSV_HEADER};

#[derive(Parser)]
#[command(
    name = "gammt",
    about = "Ambiguity-aware sequence modeling with parallel transformer decoders"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Build a vocabulary from the corpus, train the ensemble, and write
    /// vocabulary and checkpoint files.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Load a checkpoint and continue a prompt.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a scenario file: build the rectangular hull and verify its
    /// enumeration count, membership, and pasting closure.
    Verify {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Print a checkpoint's header and parameter shapes.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Parse arguments and run; returns the process exit code.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Clap prints help/version on stdout (exit 0) and usage errors
            // on stderr (exit 2).
            e.exit();
        }
    };
    run(cli)
}

pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Train { config } => cmd_train(&config).map(|_| 0),
        Command::Generate {
            config,
            prompt,
            max_new_tokens,
            temperature,
            seed,
        } => cmd_generate(&config, &prompt, max_new_tokens, temperature, seed).map(|_| 0),
        Command::Verify { scenario } => cmd_verify(&scenario),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint).map(|_| 0),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("gammt: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn cmd_train(config_path: &Path) -> Result<()> {
    let cfg = RunConfig::from_file(config_path)?;
    let corpus_path = cfg.require_path("corpus")?;
    let vocab_path = cfg.require_path("vocab")?.to_path_buf();
    let checkpoint_path = cfg.require_path("checkpoint")?.to_path_buf();
    let corpus = std::fs::read_to_string(corpus_path)
        .map_err(|e| Error::Config(format!("cannot read corpus {}: {e}", corpus_path.display())))?;

    let vocab = Vocabulary::from_corpus(&corpus)?;
    let dataset = encode_corpus_lines(&corpus, &vocab, cfg.max_len)?;
    eprintln!(
        "training: {} sequences, vocabulary of {} tokens, {} heads",
        dataset.len(),
        vocab.size(),
        cfg.m
    );

    let configs = cfg.decoder_configs(vocab.size())?;
    let params = GammtParams::init(&configs, cfg.seed)?;
    let selection = cfg.selection_mechanism(cfg.m)?;
    let train_cfg = TrainConfig {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        seed: cfg.seed,
        selection: selection.clone(),
        grad_clip: cfg.grad_clip,
        log_every: cfg.log_every,
    };
    println!("{LOSS_CSV_HEADER}");
    let outcome = train(&dataset, params, &train_cfg, |r| {
        println!("{}", r.csv_line());
    })?;

    vocab.write_to(&vocab_path)?;
    let header = CheckpointHeader {
        m: cfg.m,
        d_model: cfg.d_model,
        d_mlp: cfg.d_mlp,
        max_len: cfg.max_len,
        vocab_size: vocab.size(),
        layers: cfg.layers_per_head(),
        heads: cfg.heads_per_head(),
        activation: cfg.activation,
        selection,
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        temperature: cfg.temperature,
        seed: cfg.seed,
        vocab_hash: content_hash(vocab.to_file_string().as_bytes()),
    };
    save_checkpoint(&outcome.params, &header, &checkpoint_path)?;
    eprintln!(
        "wrote {} and {}",
        vocab_path.display(),
        checkpoint_path.display()
    );
    Ok(())
}

fn cmd_generate(
    config_path: &Path,
    prompt: &str,
    max_new_tokens: Option<usize>,
    temperature: Option<f64>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = RunConfig::from_file(config_path)?;
    let checkpoint_path = cfg.require_path("checkpoint")?;
    let vocab_path = cfg.require_path("vocab")?;
    let (header, params) = load_checkpoint(checkpoint_path)?;

    // The checkpoint header is authoritative for model structure; a config
    // that explicitly contradicts it is an error.
    let structure = [
        ("m", cfg.m == header.m),
        ("d_e", cfg.d_model == header.d_model),
        ("d_mlp", cfg.d_mlp == header.d_mlp),
        ("l_max", cfg.max_len == header.max_len),
        ("layers", cfg.layers_per_head() == header.layers),
        ("heads", cfg.heads_per_head() == header.heads),
        ("activation", cfg.activation == header.activation),
    ];
    for (key, matches) in structure {
        if cfg.was_set(key) && !matches {
            return Err(Error::Config(format!(
                "config key {key:?} contradicts the checkpoint header"
            )));
        }
    }

    let vocab = Vocabulary::read_from(vocab_path)?;
    if content_hash(vocab.to_file_string().as_bytes()) != header.vocab_hash {
        return Err(Error::Config(format!(
            "vocabulary {} does not match the checkpoint's vocab_hash",
            vocab_path.display()
        )));
    }
    if vocab.size() != header.vocab_size {
        return Err(Error::Config(
            "vocabulary size disagrees with checkpoint header".to_string(),
        ));
    }

    let selection = if cfg.was_set("selection") || cfg.was_set("selection_weights") {
        cfg.selection_mechanism(header.m)?
    } else {
        header.selection.clone()
    };
    let gen_cfg = GenConfig {
        temperature: temperature.unwrap_or(if cfg.was_set("temperature") {
            cfg.temperature
        } else {
            header.temperature
        }),
        max_new_tokens: max_new_tokens.unwrap_or(cfg.max_new_tokens),
        seed: seed.unwrap_or(cfg.seed),
        selection,
    };
    let prompt_ids = vocab.encode(prompt)?;
    let output = generate(&prompt_ids, &params, vocab.eos_id(), &gen_cfg)?;
    println!("{}", vocab.decode(&output)?);
    Ok(())
}

/// Returns exit code 0 when all checks pass, 3 when any fails.
fn cmd_verify(scenario_path: &Path) -> Result<i32> {
    let text = std::fs::read_to_string(scenario_path).map_err(|e| {
        Error::Config(format!(
            "cannot read scenario {}: {e}",
            scenario_path.display()
        ))
    })?;
    let family = KernelFamily::from_scenario_str(&text)?;
    println!(
        "scenario: K={} T={} set sizes {:?}",
        family.k(),
        family.horizon(),
        family.sets().iter().map(|s| s.len()).collect::<Vec<_>>()
    );
    let expected = family.enumeration_count()?;
    let measures = build_plm(&family)?;
    println!(
        "enumeration: {expected} selections, {} distinct measures",
        measures.len()
    );
    let report = check_rectangular(&measures, &family)?;
    print!("{report}");
    if report.is_rectangular() {
        println!("result: PASS");
        Ok(0)
    } else {
        println!("result: FAIL");
        Ok(3)
    }
}

fn cmd_inspect(checkpoint_path: &Path) -> Result<()> {
    let (header, params) = load_checkpoint(checkpoint_path)?;
    println!("m={}", header.m);
    println!("d_e={}", header.d_model);
    println!("d_mlp={}", header.d_mlp);
    println!("l_max={}", header.max_len);
    println!("n_v={}", header.vocab_size);
    println!(
        "layers={:?} heads={:?} activation={}",
        header.layers,
        header.heads,
        header.activation.name()
    );
    match &header.selection {
        crate::model::SelectionMechanism::Max => println!("selection=max"),
        crate::model::SelectionMechanism::RandomIndex { weights } => {
            println!("selection=random weights={weights:?}")
        }
    }
    println!(
        "learning_rate={} epochs={} temperature={} seed={}",
        header.learning_rate, header.epochs, header.temperature, header.seed
    );
    println!("vocab_hash={}", header.vocab_hash);
    for (i, head) in params.heads().iter().enumerate() {
        head.visit(&mut |name, t| {
            println!("head{i}.{name} {:?}", t.shape());
        });
    }
    Ok(())
}
