//! Acceptance suite: one test per criterion, each printing a PASS line
//! when it holds. Gradient checks run in double precision on tiny
//! models; trend and determinism checks run the real f32 training
//! pipeline end to end.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hscjn::config::TrainConfig;
use hscjn::corpus::{
    batch_examples, encode_example, make_examples, parse_corpus_str, ExampleMode, Vocabulary,
    EOU, SOS,
};
use hscjn::decode::Decoder;
use hscjn::loss::{
    forward_example, loss_me, loss_total, loss_wp, LossWeights, TargetWordSets,
};
use hscjn::metrics::{bleu_scores, distinct_n, eval_report, word_frequency_profile, EvalOptions};
use hscjn::model::{
    decoder_step, encode_dialogue, init_decoder_state, init_parameters, FwdMode, ModelConfig,
    ModelParams, ModelVars,
};
use hscjn::tensor::{Array, Tape, Var};
use hscjn::train::{corpus_mean_entropy, run_training, LogEntry};

// ── shared helpers ───────────────────────────────────────────────────

fn tiny_cfg() -> ModelConfig {
    ModelConfig::tiny(7, 4)
}

const TINY_CONTEXT: [&[u32]; 2] = [&[4, 5], &[6]];
const TINY_TARGET: [u32; 3] = [5, 6, EOU];

#[derive(Clone, Copy, PartialEq, Debug)]
enum Component {
    Nll,
    Wp,
    Me,
    Total,
}

fn tiny_forward(
    tape: &mut Tape<f64>,
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    trainable: bool,
) -> hscjn::loss::ExampleForward {
    let vars = ModelVars::bind(tape, params, trainable);
    let context: Vec<Vec<u32>> = TINY_CONTEXT.iter().map(|c| c.to_vec()).collect();
    forward_example(
        tape,
        &vars,
        cfg,
        &context,
        &TINY_TARGET,
        &LossWeights { alpha: 1.0, beta: 0.13, wp_negatives: false },
        &mut FwdMode::Eval,
    )
}

fn component_value(params: &ModelParams<f64>, cfg: &ModelConfig, which: Component) -> f64 {
    let mut tape: Tape<f64> = Tape::new();
    let fwd = tiny_forward(&mut tape, params, cfg, false);
    match which {
        Component::Nll => fwd.breakdown.nll,
        Component::Wp => fwd.breakdown.l_wp,
        Component::Me => fwd.breakdown.l_me,
        Component::Total => fwd.breakdown.total,
    }
}

/// Max relative error of the analytic gradient of one loss component
/// against central finite differences, over every parameter coordinate.
fn component_grad_error(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    which: Component,
) -> (f64, usize, usize) {
    let mut tape: Tape<f64> = Tape::new();
    let vars = ModelVars::bind(&mut tape, params, true);
    let context: Vec<Vec<u32>> = TINY_CONTEXT.iter().map(|c| c.to_vec()).collect();
    let fwd = forward_example(
        &mut tape,
        &vars,
        cfg,
        &context,
        &TINY_TARGET,
        &LossWeights { alpha: 1.0, beta: 0.13, wp_negatives: false },
        &mut FwdMode::Eval,
    );
    let root = match which {
        Component::Nll => fwd.nll_var,
        Component::Wp => fwd.l_wp_var.expect("alpha > 0"),
        Component::Me => fwd.l_me_var.expect("beta > 0"),
        Component::Total => fwd.objective,
    };
    tape.backward(root);
    let bound: Vec<(String, Var)> = vars.named();

    let eps = 1e-4;
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let named = params.named();
    for (pi, (name, arr)) in named.iter().enumerate() {
        let var = bound[pi].1;
        let analytic: Vec<f64> =
            tape.grad(var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; arr.numel()]);
        for k in 0..arr.numel() {
            let mut hi = params.clone();
            hi.named_mut()[pi].1.data[k] += eps;
            let mut lo = params.clone();
            lo.named_mut()[pi].1.data[k] -= eps;
            let fd =
                (component_value(&hi, cfg, which) - component_value(&lo, cfg, which)) / (2.0 * eps);
            let a = analytic[k];
            if a == 0.0 && fd == 0.0 {
                // the component provably ignores this coordinate
                checked += 1;
                continue;
            }
            // near-zero gradients measure only central-difference
            // cancellation noise, not backward-rule information
            if a.abs() + fd.abs() < 1e-6 {
                skipped += 1;
                continue;
            }
            checked += 1;
            let err = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
            if err > max_err {
                max_err = err;
                if err >= 1e-4 {
                    eprintln!("{name}[{k}]: analytic {a} vs fd {fd} (err {err})");
                }
            }
        }
    }
    (max_err, checked, skipped)
}

fn write_corpus(path: &Path, lines: &[String]) {
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

/// 20 dialogues with distinct subjects: memorizable by a desk model.
fn overfit_corpus() -> Vec<String> {
    let subjects = [
        "tea", "coffee", "rain", "music", "books", "games", "food", "work", "cats", "dogs",
        "snow", "wine", "art", "math", "birds", "ships", "maps", "keys", "shoes", "clocks",
    ];
    subjects
        .iter()
        .map(|s| format!("do you like {s} ? __eou__ i really enjoy {s} every day . __eou__"))
        .collect()
}

/// 500 two-turn dialogues with a skewed word distribution.
fn trend_corpus(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = [
        "tea", "coffee", "rain", "music", "books", "games", "food", "work", "cats", "dogs",
        "snow", "wine", "art", "math", "birds", "ships", "maps", "keys", "shoes", "clocks",
        "stars", "roads", "bread", "rice", "fish", "trees", "hills", "lakes", "towns", "songs",
    ];
    let replies = [
        "yes i like {} very much .",
        "i do not care for {} at all .",
        "oh i love {} .",
        "{} is fine i guess .",
        "everyone likes {} here .",
    ];
    let questions = [
        "do you like {} ?",
        "what do you think of {} ?",
        "how about {} ?",
        "any opinion on {} ?",
    ];
    (0..500)
        .map(|_| {
            // zipf-ish subject pick: low indices dominate
            let r: f64 = rng.random();
            let idx = ((r * r) * subjects.len() as f64) as usize;
            let s = subjects[idx.min(subjects.len() - 1)];
            let q = questions[rng.random_range(0..questions.len())].replace("{}", s);
            let a = replies[rng.random_range(0..replies.len())].replace("{}", s);
            format!("{q} __eou__ {a} __eou__")
        })
        .collect()
}

fn read_log(path: &Path) -> Vec<LogEntry> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn logs_equal_ignoring_wall(a: &[LogEntry], b: &[LogEntry]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.step == y.step
                && x.nll.to_bits() == y.nll.to_bits()
                && x.l_wp.to_bits() == y.l_wp.to_bits()
                && x.l_me.to_bits() == y.l_me.to_bits()
                && x.total.to_bits() == y.total.to_bits()
                && x.mean_entropy.to_bits() == y.mean_entropy.to_bits()
                && x.nll_per_token.to_bits() == y.nll_per_token.to_bits()
        })
}

// ── criteria ─────────────────────────────────────────────────────────

#[test]
fn criterion_01_gradient_fidelity() {
    let start = Instant::now();
    let cfg = tiny_cfg();
    let params: ModelParams<f64> = init_parameters(&cfg, 33, 0.5);
    for (which, label) in [
        (Component::Nll, "NLL"),
        (Component::Wp, "L_WP"),
        (Component::Me, "L_ME"),
        (Component::Total, "total"),
    ] {
        let (err, checked, skipped) = component_grad_error(&params, &cfg, which);
        assert!(err < 1e-4, "{label}: max rel err {err}");
        assert!(checked > 0, "{label}: nothing checked");
        assert!(
            skipped < (checked + skipped) / 4,
            "{label}: too many noise-only coordinates ({skipped} of {})",
            checked + skipped
        );
        eprintln!("{label}: rel err {err:.2e} over {checked} coordinates ({skipped} noise-only)");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!("[acceptance] criterion 1 (gradient fidelity < 1e-4, < 10 s): PASS");
}

#[test]
fn criterion_02_loss_identities() {
    // alpha = beta = 0: total is the NLL node itself
    let cfg = tiny_cfg();
    let params: ModelParams<f64> = init_parameters(&cfg, 5, 0.1);
    let mut tape: Tape<f64> = Tape::new();
    let vars = ModelVars::bind(&mut tape, &params, false);
    let context: Vec<Vec<u32>> = TINY_CONTEXT.iter().map(|c| c.to_vec()).collect();
    let fwd = forward_example(
        &mut tape,
        &vars,
        &cfg,
        &context,
        &TINY_TARGET,
        &LossWeights { alpha: 0.0, beta: 0.0, wp_negatives: false },
        &mut FwdMode::Eval,
    );
    assert_eq!(fwd.objective, fwd.nll_var);
    assert_eq!(fwd.breakdown.total.to_bits(), fwd.breakdown.nll.to_bits());

    // saturated head scores: L_WP exactly 0
    let p0 = tape.scalar(0.0);
    let pj = [tape.scalar(0.0), tape.scalar(0.0), tape.scalar(0.0)];
    let wp = loss_wp(&mut tape, p0, &pj);
    assert_eq!(tape.scalar_value(wp), 0.0);

    // L_ME bounds attained: one-hot exactly 0, uniform -m ln|V| (+-1e-9)
    let m = 3;
    let v = 6usize;
    let onehots: Vec<Var> = (0..m)
        .map(|i| {
            let mut d = vec![0.0; v];
            d[i] = 1.0;
            tape.leaf(Array::vector(d), false)
        })
        .collect();
    let me0 = loss_me(&mut tape, &onehots);
    assert_eq!(tape.scalar_value(me0), 0.0);
    let uniforms: Vec<Var> =
        (0..m).map(|_| tape.leaf(Array::vector(vec![1.0 / v as f64; v]), false)).collect();
    let me_u = loss_me(&mut tape, &uniforms);
    let bound = -(m as f64) * (v as f64).ln();
    assert!((tape.scalar_value(me_u) - bound).abs() < 1e-9);
    println!("[acceptance] criterion 2 (loss identities): PASS");
}

#[test]
fn criterion_03_hand_computed_values() {
    let mut tape: Tape<f64> = Tape::new();
    // m = 2, every sigmoid score 0.5
    let p0 = tape.scalar(2.0 * 0.5f64.ln());
    let p1 = tape.scalar(2.0 * 0.5f64.ln());
    let p2 = tape.scalar(0.5f64.ln());
    let wp = loss_wp(&mut tape, p0, &[p1, p2]);
    assert!((tape.scalar_value(wp) - 3.0 * 2f64.ln()).abs() < 1e-9);

    // one uniform step over |V| = 4
    let uniform = tape.leaf(Array::vector(vec![0.25; 4]), false);
    let me = loss_me(&mut tape, &[uniform]);
    assert!((tape.scalar_value(me) - (-(4f64.ln()))).abs() < 1e-9);

    // single-step entropy of [0.9, 0.1]
    let skew = tape.leaf(Array::vector(vec![0.9, 0.1]), false);
    let me_skew = loss_me(&mut tape, &[skew]);
    assert!((-tape.scalar_value(me_skew) - 0.32508).abs() < 1e-5);

    // weighted combination arithmetic
    let b = loss_total(2.0, 1.0, -0.5, 1.0, 0.13);
    assert!((b.total - 2.935).abs() < 1e-12);
    println!("[acceptance] criterion 3 (hand-computed values): PASS");
}

#[test]
fn criterion_04_target_set_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..1000 {
        let m = rng.random_range(1..=12);
        // small alphabet forces duplicates
        let target: Vec<u32> = (0..m).map(|_| rng.random_range(4..10)).collect();
        let sets = TargetWordSets::build(&target);
        assert_eq!(sets.len(), m);
        assert_eq!(sets.full(), &target[..]);
        for j in 1..=m {
            assert_eq!(sets.set(j).len(), m - j + 1);
        }
        for j in 1..m {
            // telescoping: set j+1 is set j minus one occurrence of y_j
            let mut reduced = sets.set(j).to_vec();
            let y_j = target[j - 1];
            let pos = reduced.iter().position(|&t| t == y_j).expect("y_j in its own set");
            reduced.remove(pos);
            assert_eq!(reduced, sets.set(j + 1));
        }
    }
    println!("[acceptance] criterion 4 (target word sets, 1000 random targets): PASS");
}

#[test]
fn criterion_05_overfit_smoke_test() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("train.txt");
    write_corpus(&corpus, &overfit_corpus());

    let mut cfg = TrainConfig::default();
    cfg.train_path = Some(corpus);
    cfg.out_dir = dir.path().join("run");
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    cfg.epochs = 500;
    cfg.seed = 11;
    // smoke-test hyperparameters: no dropout, faster learning rate
    cfg.dropout = 0.0;
    cfg.learning_rate = 2e-3;
    let outcome = run_training(&cfg, None).unwrap();
    assert!(
        outcome.final_train_nll_per_token < 0.1,
        "NLL per token {} after 500 passes",
        outcome.final_train_nll_per_token
    );

    // decoding the training contexts reproduces the targets
    let (header, params, _) =
        hscjn::train::checkpoint::load_checkpoint::<f32>(&outcome.checkpoint_path).unwrap();
    let vocab = Vocabulary::load(&outcome.vocab_path).unwrap();
    let ds = parse_corpus_str(&std::fs::read_to_string(cfg.train_path.as_ref().unwrap()).unwrap());
    let examples: Vec<_> = make_examples(&ds.dialogues, ExampleMode::NextTurn)
        .iter()
        .map(|e| encode_example(e, &vocab))
        .collect();
    let mut decoder = Decoder::new(&params, &header.config);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for ex in &examples {
        let out = decoder.beam(&ex.context, 5, 50);
        // on a converged model, width-1 search and greedy argmax agree
        assert_eq!(decoder.beam(&ex.context, 1, 50), decoder.greedy(&ex.context, 50));
        cands.push(out.iter().map(|&t| vocab.decode(t).to_string()).collect::<Vec<_>>());
        let target = &ex.targets[0][..ex.targets[0].len() - 1]; // strip EOU
        refs.push(target.iter().map(|&t| vocab.decode(t).to_string()).collect::<Vec<_>>());
    }
    let bleu = bleu_scores(&cands, &refs, 1, true);
    assert!(bleu[0] > 95.0, "BLEU-1 {} on the training set", bleu[0]);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:?}");
    println!(
        "[acceptance] criterion 5 (overfit: NLL/token {:.4} < 0.1, BLEU-1 {:.1} > 95, {:?} < 5 min): PASS",
        outcome.final_train_nll_per_token, bleu[0], elapsed
    );
}

#[test]
fn criterion_06_entropy_trend() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("train.txt");
    write_corpus(&corpus, &trend_corpus(66));

    let run = |beta: f64, out: &str| {
        let mut cfg = TrainConfig::default();
        cfg.train_path = Some(corpus.clone());
        cfg.out_dir = dir.path().join(out);
        cfg.alpha = 1.0;
        cfg.beta = beta;
        cfg.epochs = 8;
        cfg.seed = 21;
        cfg.dropout = 0.0;
        cfg.learning_rate = 1e-3;
        cfg.beam_width = 5;
        cfg.max_decode_len = 20;
        let outcome = run_training(&cfg, None).unwrap();
        let (header, params, _) =
            hscjn::train::checkpoint::load_checkpoint::<f32>(&outcome.checkpoint_path).unwrap();
        let vocab = Vocabulary::load(&outcome.vocab_path).unwrap();
        let ds =
            parse_corpus_str(&std::fs::read_to_string(&corpus).unwrap());
        let examples: Vec<_> = make_examples(&ds.dialogues, ExampleMode::NextTurn)
            .iter()
            .map(|e| encode_example(e, &vocab))
            .collect();
        let batches = batch_examples(&examples, cfg.batch_size);
        let mean_entropy = corpus_mean_entropy(&params, &header.config, &batches);

        let mut decoder = Decoder::new(&params, &header.config);
        let responses: Vec<Vec<String>> = examples
            .iter()
            .map(|ex| {
                decoder
                    .beam(&ex.context, cfg.beam_width, cfg.max_decode_len)
                    .iter()
                    .map(|&t| vocab.decode(t).to_string())
                    .collect()
            })
            .collect();
        let profile = word_frequency_profile(&responses, 1, true);
        let top = profile.first().map(|(w, c)| (w.clone(), *c)).unwrap_or(("".into(), 0));
        (mean_entropy, top)
    };

    let (entropy_reg, top_reg) = run(0.13, "with_me");
    let (entropy_plain, top_plain) = run(0.0, "without_me");
    assert!(
        entropy_reg > entropy_plain,
        "mean entropy with beta=0.13 ({entropy_reg}) not above beta=0 ({entropy_plain})"
    );
    assert!(
        top_reg.1 <= top_plain.1,
        "top word {:?} with regularizer outnumbers {:?} without",
        top_reg,
        top_plain
    );
    println!(
        "[acceptance] criterion 6 (entropy trend: {entropy_reg:.4} > {entropy_plain:.4}, top word {} <= {}): PASS",
        top_reg.1, top_plain.1
    );
}

#[test]
fn criterion_07_beam_search_oracle() {
    // exhaustive enumeration of finished sequences on tiny models
    fn brute_force_best(params: &ModelParams<f64>, cfg: &ModelConfig, cap: usize) -> f64 {
        let mut tape: Tape<f64> = Tape::new();
        let vars = ModelVars::bind(&mut tape, params, false);
        let enc = encode_dialogue(&mut tape, &vars, cfg, &[vec![1, 2]], &mut FwdMode::Eval);
        let s0 = init_decoder_state(&mut tape, &vars, cfg, &enc);
        let mut best = f64::NEG_INFINITY;
        let mut stack = vec![(s0, SOS, 0usize, 0.0f64)];
        while let Some((state, y_prev, depth, score)) = stack.pop() {
            if depth == cap {
                best = best.max(score);
                continue;
            }
            let out =
                decoder_step(&mut tape, &vars, cfg, y_prev, &state, &enc, None, &mut FwdMode::Eval);
            let lp_var = tape.log_softmax(out.logits, 0);
            let lp = tape.value(lp_var).to_vec();
            best = best.max(score + lp[EOU as usize]);
            for tok in 0..cfg.vocab_size as u32 {
                if tok != EOU {
                    stack.push((out.state, tok, depth + 1, score + lp[tok as usize]));
                }
            }
        }
        best
    }

    for seed in 0..50u64 {
        let cfg = ModelConfig::tiny(4, 3);
        let params: ModelParams<f64> = init_parameters(&cfg, seed, 0.6);
        let cap = 1 + (seed % 3) as usize;
        let best = brute_force_best(&params, &cfg, cap);
        let mut decoder = Decoder::new(&params, &cfg);
        let hyp = decoder.beam_hypothesis(&[vec![1, 2]], 3, cap);
        assert!(
            (hyp.score - best).abs() <= 1e-9,
            "seed {seed} cap {cap}: beam {} vs brute force {}",
            hyp.score,
            best
        );
        assert!(hyp.finished);
    }
    println!("[acceptance] criterion 7 (beam equals brute force on 50 tiny models): PASS");
}

#[test]
fn criterion_08_metric_oracles() {
    // independent distinct-n recount on 100 random response sets
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for _ in 0..100 {
        let n_resp = rng.random_range(1..12);
        let responses: Vec<Vec<String>> = (0..n_resp)
            .map(|_| {
                let len = rng.random_range(0..9);
                (0..len).map(|_| format!("w{}", rng.random_range(0..6))).collect()
            })
            .collect();
        for n in 1..=3 {
            let (ratio, count) = distinct_n(&responses, n);
            // recount with joined-string keys instead of token windows
            let mut seen = std::collections::BTreeSet::new();
            let mut total = 0u64;
            for r in &responses {
                for w in r.windows(n) {
                    seen.insert(w.join("\u{1}"));
                    total += 1;
                }
            }
            assert_eq!(count, seen.len() as u64);
            if total > 0 {
                assert!((ratio - seen.len() as f64 / total as f64).abs() < 1e-12);
            } else {
                assert_eq!(ratio, 0.0);
            }
        }
    }

    // BLEU identity and the clipped-precision hand case
    let corpus: Vec<Vec<String>> = vec![
        "what a fine day".split_whitespace().map(String::from).collect(),
        "indeed it is".split_whitespace().map(String::from).collect(),
    ];
    let identity = bleu_scores(&corpus, &corpus, 4, true);
    for s in identity {
        assert!((s - 100.0).abs() < 1e-9);
    }
    let cand = vec!["the the the".split_whitespace().map(String::from).collect::<Vec<_>>()];
    let reff = vec!["the cat".split_whitespace().map(String::from).collect::<Vec<_>>()];
    let clipped = bleu_scores(&cand, &reff, 1, false);
    assert!((clipped[0] - 100.0 / 3.0).abs() < 1e-9);

    // report strings follow the ratio/count table format
    let report = eval_report(&corpus, &corpus, &EvalOptions::default());
    for d in &report.distinct {
        assert_eq!(d.display, format!("{:.3}/{}", d.ratio, d.count));
    }
    println!("[acceptance] criterion 8 (metric oracles): PASS");
}

#[test]
fn criterion_09_ablation_grid() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("train.txt");
    write_corpus(&corpus, &overfit_corpus());
    let out = dir.path().join("grid");
    let code = hscjn::cli::run_cli([
        "hscjn",
        "ablate",
        "--train",
        corpus.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "1",
        "--seed",
        "9",
        "--beam-width",
        "2",
        "--max-decode-len",
        "6",
    ]);
    assert_eq!(code, 0);

    let logs: Vec<Vec<LogEntry>> = ["hscjn", "hscjn_wo_me", "hscjn_wo_pn", "hred"]
        .iter()
        .map(|d| read_log(&out.join(d).join("train_log.jsonl")))
        .collect();
    let step0: Vec<&LogEntry> = logs.iter().map(|l| &l[0]).collect();
    for e in &step0 {
        assert_eq!(e.step, 0);
    }
    // shared seed: identical first forward pass across the grid
    for e in &step0[1..] {
        assert_eq!(e.nll.to_bits(), step0[0].nll.to_bits());
        assert_eq!(e.l_me.to_bits(), step0[0].l_me.to_bits());
    }
    assert_eq!(step0[0].l_wp.to_bits(), step0[1].l_wp.to_bits());
    let (nll, l_wp, l_me) = (step0[0].nll, step0[0].l_wp, step0[0].l_me);
    assert_eq!(step0[0].total, nll + 1.0 * l_wp + 0.13 * l_me); // HSCJN
    assert_eq!(step0[1].total, nll + 1.0 * l_wp); // w/o ME
    assert_eq!(step0[2].total, nll + 0.13 * l_me); // w/o PN
    assert_eq!(step0[3].total, nll); // baseline
    assert_eq!(step0[2].total, step0[3].total + 0.13 * l_me);
    assert_eq!(step0[2].l_wp, 0.0);

    // reports carry the table row labels
    let summary: Vec<hscjn::metrics::EvalReport> =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablate_summary.json")).unwrap())
            .unwrap();
    let labels: Vec<Option<String>> = summary.iter().map(|r| r.model.clone()).collect();
    assert_eq!(
        labels,
        vec![
            Some("HSCJN".into()),
            Some("HSCJN(w/o ME)".into()),
            Some("HSCJN(w/o PN)".into()),
            Some("HRED".into())
        ]
    );
    println!("[acceptance] criterion 9 (ablation grid zeroing identities): PASS");
}

#[test]
fn criterion_10_determinism_and_checkpointing() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("train.txt");
    write_corpus(&corpus, &overfit_corpus());
    let base = |out: PathBuf| {
        let mut cfg = TrainConfig::default();
        cfg.train_path = Some(corpus.clone());
        cfg.test_path = Some(corpus.clone());
        cfg.out_dir = out;
        cfg.epochs = 2;
        cfg.seed = 31;
        cfg.dropout = 0.2;
        cfg.beam_width = 3;
        cfg.max_decode_len = 12;
        cfg
    };

    // same seed, same corpus, same config: identical metrics
    let a = run_training(&base(dir.path().join("a")), None).unwrap();
    let b = run_training(&base(dir.path().join("b")), None).unwrap();
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
    assert!(logs_equal_ignoring_wall(&a.log, &b.log));

    // resume reproduces the unbroken run's loss log bit-exactly
    let mut first_half = base(dir.path().join("c"));
    first_half.epochs = 1;
    first_half.test_path = None;
    let c = run_training(&first_half, None).unwrap();

    let mut second_half = base(dir.path().join("d"));
    second_half.epochs = 1;
    second_half.test_path = None;
    second_half.resume = Some(c.checkpoint_path.clone());
    let d = run_training(&second_half, None).unwrap();

    let unbroken = &a.log;
    let resumed = &d.log;
    assert_eq!(resumed.len(), unbroken.len() / 2);
    assert!(
        logs_equal_ignoring_wall(resumed, &unbroken[unbroken.len() / 2..]),
        "resumed log diverges from the unbroken run"
    );
    println!("[acceptance] criterion 10 (determinism and checkpoint resume): PASS");
}
