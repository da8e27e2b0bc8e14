//! Training loop: teacher-forced forward passes over padded batches,
//! Adam updates, JSON-lines loss logging, validation early stopping,
//! and checkpoint/resume.

pub mod adam;
pub mod checkpoint;

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::model::apply_dropout;

use crate::config::TrainConfig;
use crate::corpus::{
    batch_examples, encode_example, make_examples, parse_corpus, Batch, EncodedExample,
    Vocabulary, EOU,
};
use crate::decode::{render_response, Decoder};
use crate::error::{Error, Result};
use crate::loss::{forward_example, LossWeights};
use crate::metrics::{eval_report, EvalOptions, EvalReport};
use crate::model::{init_parameters, FwdMode, ModelConfig, ModelParams, ModelVars};
use crate::tensor::{Array, Real, Tape, Var};
use adam::{adam_update, clip_gradients, AdamHyper, AdamState};
use checkpoint::{load_checkpoint, save_checkpoint};

/// One JSON log line per batch. `step` counts optimizer updates
/// completed before the batch, so the first entry is step 0 at the
/// initial parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub nll: f64,
    pub l_wp: f64,
    pub l_me: f64,
    pub total: f64,
    pub mean_entropy: f64,
    pub nll_per_token: f64,
    pub wall_ms: f64,
}

pub struct TrainState<R: Real> {
    pub params: ModelParams<R>,
    pub adam: AdamState<R>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

pub struct TrainSetup<'a> {
    pub model_cfg: &'a ModelConfig,
    pub weights: LossWeights,
    pub hyper: AdamHyper,
    pub grad_clip: Option<f64>,
}

/// (context, target) passes of one example. A two-target example trains
/// as two sequential passes, the first turn (with its EOU) joining the
/// context of the second, mirroring two-turn generation.
fn expand_passes(context: &[Vec<u32>], targets: &[Vec<u32>]) -> Vec<(Vec<Vec<u32>>, Vec<u32>)> {
    match targets {
        [single] => vec![(context.to_vec(), single.clone())],
        [first, second] => {
            let mut extended = context.to_vec();
            extended.push(first.clone());
            vec![(context.to_vec(), first.clone()), (extended, second.clone())]
        }
        _ => panic!("examples carry one or two targets, got {}", targets.len()),
    }
}

struct BatchForward {
    objective: Var,
    nll: f64,
    l_wp: f64,
    l_me: f64,
    entropies: Vec<f64>,
    tokens: usize,
}

fn batch_forward<R: Real>(
    tape: &mut Tape<R>,
    vars: &ModelVars,
    batch: &Batch,
    setup: &TrainSetup,
    mode: &mut FwdMode,
) -> BatchForward {
    let mut objective: Option<Var> = None;
    let mut nll = 0.0;
    let mut l_wp = 0.0;
    let mut l_me = 0.0;
    let mut entropies = Vec::new();
    let mut tokens = 0usize;
    for i in 0..batch.len() {
        let context = batch.context_of(i);
        let targets = batch.targets_of(i);
        for (pass_ctx, target) in expand_passes(&context, &targets) {
            let fwd = forward_example(
                tape,
                vars,
                setup.model_cfg,
                &pass_ctx,
                &target,
                &setup.weights,
                mode,
            );
            objective = Some(match objective {
                None => fwd.objective,
                Some(acc) => tape.add(acc, fwd.objective),
            });
            nll += fwd.breakdown.nll;
            l_wp += fwd.breakdown.l_wp;
            l_me += fwd.breakdown.l_me;
            entropies.extend(fwd.breakdown.step_entropies);
            tokens += fwd.target_tokens;
        }
    }
    let objective = objective.expect("batch is nonempty");
    let n = batch.len() as f64;
    let objective = if batch.len() == 1 { objective } else { tape.affine(objective, 1.0 / n, 0.0) };
    BatchForward { objective, nll: nll / n, l_wp: l_wp / n, l_me: l_me / n, entropies, tokens }
}

/// One pass over `batches`: forward, backward, Adam step per batch, one
/// log line each (written to `sink` as it happens).
pub fn train_epoch<R: Real>(
    state: &mut TrainState<R>,
    batches: &[Batch],
    setup: &TrainSetup,
    sink: &mut dyn Write,
) -> Result<Vec<LogEntry>> {
    let mut entries = Vec::with_capacity(batches.len());
    for (batch_idx, batch) in batches.iter().enumerate() {
        let t0 = Instant::now();
        let mut tape: Tape<R> = Tape::new();
        let vars = ModelVars::bind(&mut tape, &state.params, true);
        let mut mode = FwdMode::Train {
            dropout: setup.model_cfg.dropout_rate,
            rng: &mut state.rng,
        };
        let fwd = batch_forward(&mut tape, &vars, batch, setup, &mut mode);
        let alpha = setup.weights.alpha;
        let beta = setup.weights.beta;
        let total = fwd.nll + alpha * fwd.l_wp + beta * fwd.l_me;
        if !total.is_finite() {
            return Err(Error::Train(format!(
                "non-finite loss at step {} (batch {}): nll={} l_wp={} l_me={}",
                state.step, batch_idx, fwd.nll, fwd.l_wp, fwd.l_me
            )));
        }
        tape.backward(fwd.objective);
        let mut grads: Vec<Option<Array<R>>> = vars
            .named()
            .iter()
            .map(|(_, var)| {
                tape.grad(*var).map(|g| Array::new(tape.shape(*var).to_vec(), g.to_vec()))
            })
            .collect();
        if let Some(max_norm) = setup.grad_clip {
            clip_gradients(&mut grads, max_norm);
        }
        adam_update(&mut state.params, &grads, &mut state.adam, &setup.hyper);

        let mean_entropy = if fwd.entropies.is_empty() {
            0.0
        } else {
            fwd.entropies.iter().sum::<f64>() / fwd.entropies.len() as f64
        };
        let entry = LogEntry {
            step: state.step,
            nll: fwd.nll,
            l_wp: fwd.l_wp,
            l_me: fwd.l_me,
            total,
            mean_entropy,
            nll_per_token: fwd.nll * batch.len() as f64 / fwd.tokens as f64,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        let line = serde_json::to_string(&entry)
            .map_err(|e| Error::Train(format!("log serialization: {e}")))?;
        writeln!(sink, "{line}").map_err(|e| Error::Train(format!("log write: {e}")))?;
        state.step += 1;
        entries.push(entry);
    }
    Ok(entries)
}

/// Mean per-example total loss without dropout or updates.
pub fn validation_loss<R: Real>(
    params: &ModelParams<R>,
    batches: &[Batch],
    setup: &TrainSetup,
) -> f64 {
    let mut total = 0.0;
    let mut examples = 0usize;
    for batch in batches {
        let mut tape: Tape<R> = Tape::new();
        let vars = ModelVars::bind(&mut tape, params, false);
        let fwd = batch_forward(&mut tape, &vars, batch, setup, &mut FwdMode::Eval);
        let batch_total =
            fwd.nll + setup.weights.alpha * fwd.l_wp + setup.weights.beta * fwd.l_me;
        total += batch_total * batch.len() as f64;
        examples += batch.len();
    }
    total / examples.max(1) as f64
}

/// Teacher-forced NLL per target token over a whole split.
pub fn corpus_nll_per_token<R: Real>(
    params: &ModelParams<R>,
    model_cfg: &ModelConfig,
    batches: &[Batch],
) -> f64 {
    let setup = TrainSetup {
        model_cfg,
        weights: LossWeights { alpha: 0.0, beta: 0.0, wp_negatives: false },
        hyper: AdamHyper::default(),
        grad_clip: None,
    };
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for batch in batches {
        let mut tape: Tape<R> = Tape::new();
        let vars = ModelVars::bind(&mut tape, params, false);
        let fwd = batch_forward(&mut tape, &vars, batch, &setup, &mut FwdMode::Eval);
        nll += fwd.nll * batch.len() as f64;
        tokens += fwd.tokens;
    }
    nll / tokens.max(1) as f64
}

/// Mean per-step output entropy under teacher forcing.
pub fn corpus_mean_entropy<R: Real>(
    params: &ModelParams<R>,
    model_cfg: &ModelConfig,
    batches: &[Batch],
) -> f64 {
    let setup = TrainSetup {
        model_cfg,
        weights: LossWeights { alpha: 0.0, beta: 0.0, wp_negatives: false },
        hyper: AdamHyper::default(),
        grad_clip: None,
    };
    let mut sum = 0.0;
    let mut steps = 0usize;
    for batch in batches {
        let mut tape: Tape<R> = Tape::new();
        let vars = ModelVars::bind(&mut tape, params, false);
        let fwd = batch_forward(&mut tape, &vars, batch, &setup, &mut FwdMode::Eval);
        sum += fwd.entropies.iter().sum::<f64>();
        steps += fwd.entropies.len();
    }
    sum / steps.max(1) as f64
}

fn strip_eou(target: &[u32]) -> &[u32] {
    match target.last() {
        Some(&t) if t == EOU => &target[..target.len() - 1],
        _ => target,
    }
}

pub struct EvalOutput {
    pub report: EvalReport,
    pub responses: Vec<String>,
    pub references: Vec<String>,
}

/// Decode every example with beam search and score against the
/// references. Two-target examples generate two consecutive turns.
pub fn evaluate_split<R: Real>(
    params: &ModelParams<R>,
    model_cfg: &ModelConfig,
    examples: &[EncodedExample],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    label: Option<String>,
) -> EvalOutput {
    assert!(!examples.is_empty(), "evaluate_split: no examples");
    let mut decoder = Decoder::new(params, model_cfg);
    decoder.length_norm = cfg.length_norm;
    let mut responses = Vec::with_capacity(examples.len());
    let mut references = Vec::with_capacity(examples.len());
    for ex in examples {
        let (response, reference) = if ex.targets.len() == 2 {
            let (a, b) = decoder.two_turn(&ex.context, cfg.beam_width, cfg.max_decode_len);
            let reference: Vec<Vec<u32>> =
                ex.targets.iter().map(|t| strip_eou(t).to_vec()).collect();
            (render_response(vocab, &[a, b]), render_response(vocab, &reference))
        } else {
            let out = decoder.beam(&ex.context, cfg.beam_width, cfg.max_decode_len);
            (
                render_response(vocab, &[out]),
                render_response(vocab, &[strip_eou(&ex.targets[0]).to_vec()]),
            )
        };
        responses.push(response);
        references.push(reference);
    }
    let tokenized = |lines: &[String]| -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(|t| t.to_string()).collect())
            .collect()
    };
    let opts = EvalOptions {
        sentence_bleu: cfg.sentence_bleu,
        smoothing: true,
        exclude_unk: !cfg.count_unk,
        top_k: 10,
        label,
    };
    let report = eval_report(&tokenized(&responses), &tokenized(&references), &opts);
    EvalOutput { report, responses, references }
}

pub struct TrainOutcome {
    pub log: Vec<LogEntry>,
    pub epochs_run: usize,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub vocab_path: PathBuf,
    pub report: Option<EvalReport>,
    pub responses_path: Option<PathBuf>,
    pub final_train_nll_per_token: f64,
}

/// Prepared split: encoded examples plus their padded batches.
fn prepare_split(
    path: &std::path::Path,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    quiet: bool,
) -> Result<(Vec<EncodedExample>, Vec<Batch>)> {
    let parsed = parse_corpus(path)?;
    let (kept, over_length) = crate::corpus::filter_dialogues(parsed.dialogues, cfg.max_dialogue_tokens);
    if !quiet {
        eprintln!(
            "{}: {} dialogues ({} malformed lines dropped, {} over {} tokens removed)",
            path.display(),
            kept.len(),
            parsed.dropped,
            over_length,
            cfg.max_dialogue_tokens
        );
    }
    let examples: Vec<EncodedExample> = make_examples(&kept, cfg.example_mode())
        .iter()
        .map(|e| encode_example(e, vocab))
        .collect();
    if examples.is_empty() {
        return Err(Error::Train(format!("{}: no usable examples", path.display())));
    }
    let batches = batch_examples(&examples, cfg.batch_size);
    Ok((examples, batches))
}

/// End-to-end training per the config: ingest, build vocabulary, train
/// with per-epoch checkpoints, optionally early-stop on validation
/// loss, optionally evaluate a test split.
pub fn run_training(cfg: &TrainConfig, label: Option<String>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_path = cfg
        .train_path
        .as_ref()
        .ok_or_else(|| Error::Config("train corpus path is required".into()))?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let parsed = parse_corpus(train_path)?;
    let (kept, _) = crate::corpus::filter_dialogues(parsed.dialogues, cfg.max_dialogue_tokens);
    if kept.is_empty() {
        return Err(Error::EmptyCorpus { path: train_path.clone() });
    }
    let vocab = Vocabulary::build(&kept, cfg.vocab_cap);
    let vocab_path = cfg.out_dir.join("vocab.tsv");
    vocab.dump(&vocab_path)?;

    let (_, train_batches) = prepare_split(train_path, cfg, &vocab, false)?;
    let valid_batches = match &cfg.valid_path {
        Some(p) => Some(prepare_split(p, cfg, &vocab, false)?.1),
        None => None,
    };

    let model_cfg = cfg.model_config(vocab.len());
    model_cfg.validate()?;
    let setup = TrainSetup {
        model_cfg: &model_cfg,
        weights: LossWeights {
            alpha: cfg.effective_alpha(),
            beta: cfg.effective_beta(),
            wp_negatives: cfg.wp_negatives,
        },
        hyper: AdamHyper { lr: cfg.learning_rate, ..Default::default() },
        grad_clip: cfg.grad_clip,
    };

    let mut state: TrainState<f32> = match &cfg.resume {
        Some(path) => {
            let (header, params, adam) = load_checkpoint::<f32>(path)?;
            if header.config != model_cfg {
                return Err(Error::Checkpoint(format!(
                    "{}: checkpoint config does not match this run's config",
                    path.display()
                )));
            }
            let rng = header.rng.restore()?;
            TrainState { params, adam, step: header.step, rng }
        }
        None => {
            let params = init_parameters(&model_cfg, cfg.seed, cfg.init_std);
            let adam = AdamState::new(&params);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1); // distinct from the init stream
            TrainState { params, adam, step: 0, rng }
        }
    };

    let log_path = cfg.out_dir.join("train_log.jsonl");
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let checkpoint_path = cfg.out_dir.join("checkpoint.bin");

    let mut log = Vec::new();
    let mut best_valid = f64::INFINITY;
    let mut bad_epochs = 0usize;
    let mut epochs_run = 0usize;
    for _epoch in 0..cfg.epochs {
        let entries = train_epoch(&mut state, &train_batches, &setup, &mut log_file)?;
        log.extend(entries);
        epochs_run += 1;
        save_checkpoint(
            &checkpoint_path,
            &model_cfg,
            state.step,
            &state.rng,
            &state.params,
            &state.adam,
        )?;
        if let Some(vb) = &valid_batches {
            if !cfg.no_early_stop {
                let vloss = validation_loss(&state.params, vb, &setup);
                if vloss < best_valid {
                    best_valid = vloss;
                    bad_epochs = 0;
                } else {
                    bad_epochs += 1;
                    if bad_epochs >= 3 {
                        eprintln!("early stop after {epochs_run} epochs (validation loss {vloss:.4})");
                        break;
                    }
                }
            }
        }
    }

    let final_train_nll_per_token =
        corpus_nll_per_token(&state.params, &model_cfg, &train_batches);

    let mut report = None;
    let mut responses_path = None;
    if let Some(test) = &cfg.test_path {
        let (test_examples, _) = prepare_split(test, cfg, &vocab, false)?;
        let out = evaluate_split(&state.params, &model_cfg, &test_examples, &vocab, cfg, label);
        let rp = cfg.out_dir.join("responses.txt");
        fs::write(&rp, out.responses.join("\n") + "\n").map_err(|e| Error::io(&rp, e))?;
        let refs = cfg.out_dir.join("references.txt");
        fs::write(&refs, out.references.join("\n") + "\n").map_err(|e| Error::io(&refs, e))?;
        let report_path = cfg.out_dir.join("report.json");
        let json = serde_json::to_string_pretty(&out.report)
            .map_err(|e| Error::Eval(format!("report serialization: {e}")))?;
        fs::write(&report_path, json + "\n").map_err(|e| Error::io(&report_path, e))?;
        report = Some(out.report);
        responses_path = Some(rp);
    }

    Ok(TrainOutcome {
        log,
        epochs_run,
        checkpoint_path,
        log_path,
        vocab_path,
        report,
        responses_path,
        final_train_nll_per_token,
    })
}
