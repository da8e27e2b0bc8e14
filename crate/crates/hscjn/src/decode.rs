//! Inference-time generation: greedy decoding and beam search with
//! end-of-utterance stopping. Scores accumulate in f64 regardless of
//! the model's precision.

use crate::corpus::{EOU, EOU_TOKEN};
use crate::model::{
    decoder_step, encode_dialogue, init_decoder_state, DecoderState, FwdMode,
    ModelConfig, ModelParams, ModelVars,
};
use crate::tensor::{Real, Tape};

/// A finished or live beam entry. `score` is the exact sum of per-step
/// log-probabilities (including the EOU step when one ended it);
/// `tokens` is the surface sequence with EOU stripped.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub finished: bool,
}

/// Read-only decoding handle: binds the parameters once and rewinds the
/// tape between sequences. Parameters stay untouched, so separate
/// decoders over the same params may run on separate threads.
pub struct Decoder<'a, R: Real> {
    cfg: &'a ModelConfig,
    tape: Tape<R>,
    vars: ModelVars,
    mark: usize,
    pub length_norm: bool,
}

struct Live {
    tokens: Vec<u32>,
    score: f64,
    state: DecoderState,
    y_prev: u32,
}

impl<'a, R: Real> Decoder<'a, R> {
    pub fn new(params: &ModelParams<R>, cfg: &'a ModelConfig) -> Self {
        let mut tape = Tape::new();
        let vars = ModelVars::bind(&mut tape, params, false);
        let mark = tape.mark();
        Decoder { cfg, tape, vars, mark, length_norm: false }
    }

    /// Argmax token each step; stops at EOU or `max_len`. Ties go to the
    /// lower token id.
    pub fn greedy(&mut self, context: &[Vec<u32>], max_len: usize) -> Vec<u32> {
        assert!(max_len >= 1, "greedy: max_len must be >= 1");
        self.tape.rewind(self.mark);
        let enc = encode_dialogue(&mut self.tape, &self.vars, self.cfg, context, &mut FwdMode::Eval);
        let mut state = init_decoder_state(&mut self.tape, &self.vars, self.cfg, &enc);
        let mut y_prev = crate::corpus::SOS;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let step = decoder_step(
                &mut self.tape,
                &self.vars,
                self.cfg,
                y_prev,
                &state,
                &enc,
                None,
                &mut FwdMode::Eval,
            );
            let logits = self.tape.value(step.logits);
            let mut best = 0usize;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            if best as u32 == EOU {
                break;
            }
            out.push(best as u32);
            y_prev = best as u32;
            state = step.state;
        }
        out
    }

    pub fn beam(&mut self, context: &[Vec<u32>], width: usize, max_len: usize) -> Vec<u32> {
        self.beam_hypothesis(context, width, max_len).tokens
    }

    /// Beam search with a finished pool: every live hypothesis always
    /// retires its EOU extension to the pool, its top-`width` non-EOU
    /// extensions compete for the `width` live slots. Hypotheses still
    /// live at `max_len` are finished by the cap and compete with the
    /// pool. Width 1 therefore follows the greedy path but may stop at
    /// an earlier EOU when that scores higher overall.
    pub fn beam_hypothesis(
        &mut self,
        context: &[Vec<u32>],
        width: usize,
        max_len: usize,
    ) -> Hypothesis {
        assert!(width >= 1, "beam search: width must be >= 1");
        assert!(max_len >= 1, "beam search: max_len must be >= 1");
        self.tape.rewind(self.mark);
        let enc = encode_dialogue(&mut self.tape, &self.vars, self.cfg, context, &mut FwdMode::Eval);
        let s0 = init_decoder_state(&mut self.tape, &self.vars, self.cfg, &enc);

        let mut live = vec![Live {
            tokens: Vec::new(),
            score: 0.0,
            state: s0,
            y_prev: crate::corpus::SOS,
        }];
        let mut pool: Vec<Hypothesis> = Vec::new();

        for _ in 0..max_len {
            if live.is_empty() {
                break;
            }
            let mut candidates: Vec<Live> = Vec::new();
            for hyp in &live {
                let step = decoder_step(
                    &mut self.tape,
                    &self.vars,
                    self.cfg,
                    hyp.y_prev,
                    &hyp.state,
                    &enc,
                    None,
                    &mut FwdMode::Eval,
                );
                let log_probs = self.tape.log_softmax(step.logits, 0);
                let lp = self.tape.value(log_probs);
                pool.push(Hypothesis {
                    tokens: hyp.tokens.clone(),
                    score: hyp.score + lp[EOU as usize].as_f64(),
                    finished: true,
                });
                let mut order: Vec<usize> =
                    (0..lp.len()).filter(|&t| t as u32 != EOU).collect();
                order.sort_by(|&a, &b| {
                    lp[b].partial_cmp(&lp[a]).unwrap().then_with(|| a.cmp(&b))
                });
                for &tok in order.iter().take(width) {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok as u32);
                    candidates.push(Live {
                        tokens,
                        score: hyp.score + lp[tok].as_f64(),
                        state: step.state,
                        y_prev: tok as u32,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.score.partial_cmp(&a.score).unwrap().then_with(|| a.tokens.cmp(&b.tokens))
            });
            candidates.truncate(width);
            live = candidates;
        }

        // hypotheses alive at the cap are finished by definition
        for hyp in live {
            pool.push(Hypothesis { tokens: hyp.tokens, score: hyp.score, finished: true });
        }
        assert!(!pool.is_empty(), "beam search produced no hypotheses");
        let norm = |h: &Hypothesis| {
            if self.length_norm {
                h.score / (h.tokens.len().max(1) as f64)
            } else {
                h.score
            }
        };
        pool.into_iter()
            .min_by(|a, b| {
                norm(b).partial_cmp(&norm(a)).unwrap().then_with(|| a.tokens.cmp(&b.tokens))
            })
            .unwrap()
    }

    /// Two-turn generation: decode turn one, append it (with its EOU) to
    /// the context, re-encode, decode turn two.
    pub fn two_turn(
        &mut self,
        context: &[Vec<u32>],
        width: usize,
        max_len: usize,
    ) -> (Vec<u32>, Vec<u32>) {
        let first = self.beam(context, width, max_len);
        let mut extended: Vec<Vec<u32>> = context.to_vec();
        let mut appended = first.clone();
        appended.push(EOU);
        extended.push(appended);
        let second = self.beam(&extended, width, max_len);
        (first, second)
    }
}

/// Render decoded token ids as the line format metrics consume:
/// utterances joined by ` __eou__ `.
pub fn render_response(vocab: &crate::corpus::Vocabulary, turns: &[Vec<u32>]) -> String {
    turns
        .iter()
        .map(|turn| turn.iter().map(|&t| vocab.decode(t)).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(&format!(" {} ", EOU_TOKEN))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_parameters;

    fn tiny_model(seed: u64) -> (ModelConfig, ModelParams<f64>) {
        let cfg = ModelConfig::tiny(6, 4);
        let params = init_parameters(&cfg, seed, 0.3);
        (cfg, params)
    }

    #[test]
    fn beam_width_one_follows_greedy_path() {
        // width 1 tracks the greedy continuation; the pool may stop it
        // at an earlier EOU only when that finished score is higher
        for seed in [1u64, 2, 3, 4, 5, 6, 7, 8] {
            let (cfg, params) = tiny_model(seed);
            let mut dec = Decoder::new(&params, &cfg);
            let ctx = vec![vec![4, 5]];
            let greedy = dec.greedy(&ctx, 4);
            let hyp = dec.beam_hypothesis(&ctx, 1, 4);
            assert!(
                hyp.tokens.len() <= greedy.len()
                    && hyp.tokens[..] == greedy[..hyp.tokens.len()],
                "seed {seed}: beam-1 {:?} is not a prefix of greedy {:?}",
                hyp.tokens,
                greedy
            );
            if hyp.tokens.len() == greedy.len() {
                assert_eq!(hyp.tokens, greedy, "seed {seed}");
            }
        }
    }

    #[test]
    fn forced_one_hot_model_returns_forced_sequence() {
        // huge bias pins the output distribution step-independently
        let (cfg, mut params) = tiny_model(77);
        for v in params.w_out.data.iter_mut() {
            *v = 0.0;
        }
        for v in params.b_out.data.iter_mut() {
            *v = 0.0;
        }
        params.b_out.data[5] = 1000.0;
        let mut dec = Decoder::new(&params, &cfg);
        let out = dec.greedy(&[vec![4]], 3);
        assert_eq!(out, vec![5, 5, 5]);
        for width in [1, 2, 4] {
            assert_eq!(dec.beam(&[vec![4]], width, 3), vec![5, 5, 5]);
        }
    }

    #[test]
    fn eou_at_step_one_gives_empty_surface() {
        let (cfg, mut params) = tiny_model(78);
        for v in params.w_out.data.iter_mut() {
            *v = 0.0;
        }
        for v in params.b_out.data.iter_mut() {
            *v = 0.0;
        }
        params.b_out.data[EOU as usize] = 1000.0;
        let mut dec = Decoder::new(&params, &cfg);
        assert_eq!(dec.greedy(&[vec![4]], 5), Vec::<u32>::new());
        let hyp = dec.beam_hypothesis(&[vec![4]], 2, 5);
        assert_eq!(hyp.tokens, Vec::<u32>::new());
        assert!(hyp.finished);
    }

    #[test]
    fn output_length_respects_cap() {
        for seed in 10..20u64 {
            let (cfg, params) = tiny_model(seed);
            let mut dec = Decoder::new(&params, &cfg);
            let out = dec.greedy(&[vec![4, 5, 4]], 3);
            assert!(out.len() <= 3);
            let beam = dec.beam(&[vec![4, 5, 4]], 3, 3);
            assert!(beam.len() <= 3);
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        let (cfg, params) = tiny_model(41);
        let mut dec1 = Decoder::new(&params, &cfg);
        let mut dec2 = Decoder::new(&params, &cfg);
        let ctx = vec![vec![5, 4], vec![4]];
        assert_eq!(dec1.beam_hypothesis(&ctx, 3, 5), dec2.beam_hypothesis(&ctx, 3, 5));
        assert_eq!(dec1.beam_hypothesis(&ctx, 3, 5), dec1.beam_hypothesis(&ctx, 3, 5));
    }

    #[test]
    fn wider_beam_never_scores_worse() {
        for seed in 100..140u64 {
            let (cfg, params) = tiny_model(seed);
            let mut dec = Decoder::new(&params, &cfg);
            let ctx = vec![vec![4, 5]];
            let narrow = dec.beam_hypothesis(&ctx, 1, 3);
            let wide = dec.beam_hypothesis(&ctx, 5, 3);
            assert!(
                wide.score >= narrow.score - 1e-9,
                "seed {seed}: width 5 scored {} below width 1 {}",
                wide.score,
                narrow.score
            );
        }
    }

    #[test]
    #[should_panic(expected = "width must be >= 1")]
    fn zero_width_is_usage_error() {
        let (cfg, params) = tiny_model(1);
        let mut dec = Decoder::new(&params, &cfg);
        dec.beam(&[vec![4]], 0, 3);
    }

    #[test]
    fn length_norm_prefers_longer_high_average_sequences() {
        // step-independent distribution: p(5) = 0.6, p(EOU) = 0.4.
        // unnormalized best is the empty response (ln .4); per-step
        // normalization favors filling the cap with token 5
        let (cfg, mut params) = tiny_model(3);
        for v in params.w_out.data.iter_mut() {
            *v = 0.0;
        }
        for v in params.b_out.data.iter_mut() {
            *v = -1000.0;
        }
        params.b_out.data[5] = 0.6f64.ln();
        params.b_out.data[EOU as usize] = 0.4f64.ln();
        let mut dec = Decoder::new(&params, &cfg);
        assert_eq!(dec.beam(&[vec![4]], 2, 3), Vec::<u32>::new());
        dec.length_norm = true;
        assert_eq!(dec.beam(&[vec![4]], 2, 3), vec![5, 5, 5]);
    }

    #[test]
    fn two_turn_appends_first_turn_to_context() {
        let (cfg, params) = tiny_model(55);
        let mut dec = Decoder::new(&params, &cfg);
        let ctx = vec![vec![4, 5]];
        let (first, second) = dec.two_turn(&ctx, 2, 4);
        // the second turn must equal decoding with the first turn (plus
        // EOU) appended as context
        let mut extended = ctx.clone();
        let mut appended = first.clone();
        appended.push(EOU);
        extended.push(appended);
        assert_eq!(second, dec.beam(&extended, 2, 4));
    }

    #[test]
    fn render_joins_turns_with_eou() {
        let ds = crate::corpus::parse_corpus_str("a b __eou__ c __eou__\n").dialogues;
        let vocab = crate::corpus::Vocabulary::build(&ds, 10);
        let a = vocab.encode("a");
        let b = vocab.encode("b");
        let c = vocab.encode("c");
        assert_eq!(render_response(&vocab, &[vec![a, b]]), "a b");
        assert_eq!(render_response(&vocab, &[vec![a], vec![c]]), "a __eou__ c");
    }
}
