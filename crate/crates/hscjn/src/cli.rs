//! Command-line interface: `train`, `generate`, `eval`, and the
//! `ablate` grid. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure. A `--config` file of `key=value` lines is applied first;
//! explicit flags override it; `HSCJN_SEED` overrides both.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::TrainConfig;
use crate::corpus::{tokenize_utterance, Vocabulary, EOU_TOKEN};
use crate::decode::{render_response, Decoder};
use crate::error::{Error, Result};
use crate::metrics::{eval_report_files, word_frequency_profile, EvalOptions};
use crate::train::checkpoint::load_checkpoint;
use crate::train::run_training;

#[derive(Parser)]
#[command(
    name = "hscjn",
    version,
    about = "Hierarchical dialogue generation with future-word-set prediction and entropy regularization"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a __eou__-delimited dialogue corpus
    Train(RunArgs),
    /// Generate responses for contexts with a trained checkpoint
    Generate(GenerateArgs),
    /// Score a responses file against a references file
    Eval(EvalArgs),
    /// Train the full/no-entropy/no-prediction/baseline grid with one seed
    Ablate(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// key=value config file applied before any flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// training corpus (one dialogue per line, __eou__ separators)
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// output directory (checkpoint, vocab, logs, reports)
    #[arg(long)]
    out: Option<PathBuf>,
    /// resume from a checkpoint written by an identical config
    #[arg(long)]
    resume: Option<PathBuf>,
    /// weight of the word-prediction loss
    #[arg(long)]
    alpha: Option<f64>,
    /// weight of the entropy regularizer
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, alias = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// drop probability (0.75 reproduces the literal large-rate reading)
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab_cap: Option<usize>,
    #[arg(long)]
    max_dialogue_tokens: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    max_decode_len: Option<usize>,
    /// std-dev of the Gaussian init (0.1 gives the variance reading)
    #[arg(long)]
    init_std: Option<f64>,
    /// clip gradients to this global L2 norm
    #[arg(long)]
    grad_clip: Option<f64>,
    /// drop the maximum-entropy regularizer (beta = 0)
    #[arg(long)]
    wo_me: bool,
    /// drop the prediction sub-network (alpha = 0)
    #[arg(long)]
    wo_pn: bool,
    /// embed 300 / word 500 / utterance 1000 / decoder 500 dimensions
    #[arg(long)]
    paper_scale: bool,
    /// train and generate two consecutive turns
    #[arg(long)]
    two_turn: bool,
    /// use exactly the two previous utterances as the source
    #[arg(long)]
    two_prev_source: bool,
    /// add the negative-class term to the word-prediction loss
    #[arg(long)]
    wp_negatives: bool,
    /// length-normalize beam scores at final selection
    #[arg(long)]
    length_norm: bool,
    /// average per-sentence BLEU instead of corpus-level BLEU
    #[arg(long)]
    sentence_bleu: bool,
    /// let <unk> tokens count toward distinct-n
    #[arg(long)]
    count_unk: bool,
    /// attention score form
    #[arg(long, value_parser = ["additive", "scalar_wc"])]
    attention: Option<String>,
    /// bidirectional word-level encoder with summed directions
    #[arg(long)]
    bidirectional: bool,
    /// run the full epoch budget even with a validation set
    #[arg(long)]
    no_early_stop: bool,
}

impl RunArgs {
    fn into_config(self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            alpha,
            beta,
            learning_rate,
            batch_size,
            dropout,
            epochs,
            seed,
            vocab_cap,
            max_dialogue_tokens,
            beam_width,
            max_decode_len,
            init_std
        );
        if let Some(v) = self.grad_clip {
            cfg.grad_clip = Some(v);
        }
        macro_rules! set_flag {
            ($($field:ident),*) => {
                $(if self.$field { cfg.$field = true; })*
            };
        }
        set_flag!(
            wo_me,
            wo_pn,
            paper_scale,
            two_turn,
            two_prev_source,
            wp_negatives,
            length_norm,
            sentence_bleu,
            count_unk,
            bidirectional,
            no_early_stop
        );
        if let Some(kind) = &self.attention {
            cfg.scalar_wc_attention = kind == "scalar_wc";
        }
        if let Some(p) = self.train {
            cfg.train_path = Some(p);
        }
        if let Some(p) = self.valid {
            cfg.valid_path = Some(p);
        }
        if let Some(p) = self.test {
            cfg.test_path = Some(p);
        }
        if let Some(p) = self.out {
            cfg.out_dir = p;
        }
        if let Some(p) = self.resume {
            cfg.resume = Some(p);
        }
        let env: std::collections::HashMap<String, String> = std::env::vars().collect();
        cfg.apply_env(&env)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// vocabulary dump written by `train` (token<TAB>id<TAB>count)
    #[arg(long)]
    vocab: PathBuf,
    /// contexts, one per line, utterances separated by __eou__
    #[arg(long)]
    input: PathBuf,
    /// responses file; stdout when omitted
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    beam_width: usize,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    /// generate two consecutive turns per context
    #[arg(long)]
    two_turn: bool,
    #[arg(long)]
    length_norm: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    responses: PathBuf,
    #[arg(long)]
    references: PathBuf,
    /// write the JSON report here instead of stdout
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    sentence_bleu: bool,
    #[arg(long)]
    count_unk: bool,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// tab-separated token<TAB>frequency table of the responses
    #[arg(long)]
    freq_table: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
}

pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(args) => cmd_ablate(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(Error::Config(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn cmd_train(args: RunArgs) -> Result<()> {
    let cfg = args.into_config()?;
    let outcome = run_training(&cfg, None)?;
    eprintln!(
        "trained {} epochs ({} steps); checkpoint at {}",
        outcome.epochs_run,
        outcome.log.len(),
        outcome.checkpoint_path.display()
    );
    eprintln!("final train NLL/token: {:.4}", outcome.final_train_nll_per_token);
    if let Some(report) = &outcome.report {
        let json = serde_json::to_string_pretty(report)
            .map_err(|e| Error::Eval(format!("report serialization: {e}")))?;
        println!("{json}");
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let (header, params, _) = load_checkpoint::<f32>(&args.checkpoint)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    if vocab.len() != header.config.vocab_size {
        return Err(Error::Vocab(format!(
            "vocabulary has {} entries but the checkpoint expects {}",
            vocab.len(),
            header.config.vocab_size
        )));
    }
    let text = fs::read_to_string(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let mut decoder = Decoder::new(&params, &header.config);
    decoder.length_norm = args.length_norm;
    let mut lines = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let context: Vec<Vec<u32>> = raw
            .split(EOU_TOKEN)
            .map(tokenize_utterance)
            .filter(|u| !u.is_empty())
            .map(|u| u.iter().map(|t| vocab.encode(t)).collect())
            .collect();
        if context.is_empty() {
            return Err(Error::Eval(format!(
                "{}:{}: no context utterances",
                args.input.display(),
                lineno + 1
            )));
        }
        let line = if args.two_turn {
            let (a, b) = decoder.two_turn(&context, args.beam_width, args.max_len);
            render_response(&vocab, &[a, b])
        } else {
            let out = decoder.beam(&context, args.beam_width, args.max_len);
            render_response(&vocab, &[out])
        };
        lines.push(line);
    }
    let body = lines.join("\n") + "\n";
    match &args.output {
        Some(path) => fs::write(path, body).map_err(|e| Error::io(path, e))?,
        None => print!("{body}"),
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let opts = EvalOptions {
        sentence_bleu: args.sentence_bleu,
        smoothing: true,
        exclude_unk: !args.count_unk,
        top_k: args.top_k,
        label: args.label.clone(),
    };
    let report = eval_report_files(&args.responses, &args.references, &opts)?;
    if let Some(path) = &args.freq_table {
        let responses = crate::metrics::read_response_file(&args.responses)?;
        let table = word_frequency_profile(&responses, args.top_k, true);
        let body: String =
            table.iter().map(|(t, c)| format!("{t}\t{c}\n")).collect();
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Eval(format!("report serialization: {e}")))?;
    match &args.report {
        Some(path) => fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?,
        None => println!("{json}"),
    }
    Ok(())
}

/// Table-1 row labels for the four ablation runs.
pub const ABLATION_GRID: [(&str, &str, bool, bool); 4] = [
    ("HSCJN", "hscjn", false, false),
    ("HSCJN(w/o ME)", "hscjn_wo_me", true, false),
    ("HSCJN(w/o PN)", "hscjn_wo_pn", false, true),
    ("HRED", "hred", true, true),
];

fn cmd_ablate(args: RunArgs) -> Result<()> {
    let base = args.into_config()?;
    if base.train_path.is_none() {
        return Err(Error::Config("train corpus path is required".into()));
    }
    let mut reports = Vec::new();
    for (label, dir, wo_me, wo_pn) in ABLATION_GRID {
        let mut cfg = base.clone();
        cfg.wo_me = base.wo_me || wo_me;
        cfg.wo_pn = base.wo_pn || wo_pn;
        cfg.out_dir = base.out_dir.join(dir);
        // score against the training corpus when no test split is given
        cfg.test_path = base.test_path.clone().or_else(|| base.train_path.clone());
        eprintln!(
            "[ablate] {label}: alpha={} beta={}",
            cfg.effective_alpha(),
            cfg.effective_beta()
        );
        let outcome = run_training(&cfg, Some(label.to_string()))?;
        reports.push(outcome.report.expect("ablate always evaluates"));
    }
    let summary_path = base.out_dir.join("ablate_summary.json");
    let json = serde_json::to_string_pretty(&reports)
        .map_err(|e| Error::Eval(format!("summary serialization: {e}")))?;
    fs::write(&summary_path, json + "\n").map_err(|e| Error::io(&summary_path, e))?;
    println!("{}", summary_path.display());
    Ok(())
}
