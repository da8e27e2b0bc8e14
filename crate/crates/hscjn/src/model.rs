//! Hierarchical encoder (word-level GRU per utterance, utterance-level
//! GRU over utterance summaries), additive attention over word-level
//! states, and an LSTM decoder with input feeding of the attention
//! context.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Array, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// score_i = v . tanh(W_c [s; h_i])
    Additive,
    /// Literal single-row W_c: score_i = tanh(W_c [s; h_i])
    ScalarWc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub word_enc_dim: usize,
    pub utt_enc_dim: usize,
    pub dec_dim: usize,
    pub attn_dim: usize,
    pub head_hidden_dim: usize,
    pub dropout_rate: f64,
    pub bidirectional_word_encoder: bool,
    pub attention: AttentionKind,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 64,
            word_enc_dim: 64,
            utt_enc_dim: 128,
            dec_dim: 64,
            attn_dim: 64,
            head_hidden_dim: 64,
            dropout_rate: 0.25,
            bidirectional_word_encoder: false,
            attention: AttentionKind::Additive,
        }
    }

    pub fn paper_scale(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 300,
            word_enc_dim: 500,
            utt_enc_dim: 1000,
            dec_dim: 500,
            attn_dim: 500,
            head_hidden_dim: 500,
            dropout_rate: 0.25,
            bidirectional_word_encoder: false,
            attention: AttentionKind::Additive,
        }
    }

    /// Tiny dimensions for gradient checks.
    pub fn tiny(vocab_size: usize, dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: dim,
            word_enc_dim: dim,
            utt_enc_dim: dim,
            dec_dim: dim,
            attn_dim: dim,
            head_hidden_dim: dim,
            dropout_rate: 0.0,
            bidirectional_word_encoder: false,
            attention: AttentionKind::Additive,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let dims = [
            self.embed_dim,
            self.word_enc_dim,
            self.utt_enc_dim,
            self.dec_dim,
            self.attn_dim,
            self.head_hidden_dim,
        ];
        if dims.contains(&0) {
            return Err(crate::Error::Config("model dimensions must be >= 1".into()));
        }
        if self.vocab_size < 5 {
            return Err(crate::Error::Config(format!(
                "vocab_size {} too small (reserved tokens + 1 required)",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(crate::Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Width of one word-level encoder state as seen by attention.
    /// Bidirectional runs are summed, so the width never changes.
    pub fn enc_out_dim(&self) -> usize {
        self.word_enc_dim
    }
}

#[derive(Clone, Debug)]
pub struct GruParams<R: Real> {
    pub w_xz: Array<R>,
    pub w_hz: Array<R>,
    pub b_z: Array<R>,
    pub w_xr: Array<R>,
    pub w_hr: Array<R>,
    pub b_r: Array<R>,
    pub w_xh: Array<R>,
    pub w_hh: Array<R>,
    pub b_h: Array<R>,
}

#[derive(Clone, Debug)]
pub struct LstmParams<R: Real> {
    pub w_xi: Array<R>,
    pub w_hi: Array<R>,
    pub b_i: Array<R>,
    pub w_xf: Array<R>,
    pub w_hf: Array<R>,
    pub b_f: Array<R>,
    pub w_xo: Array<R>,
    pub w_ho: Array<R>,
    pub b_o: Array<R>,
    pub w_xg: Array<R>,
    pub w_hg: Array<R>,
    pub b_g: Array<R>,
}

#[derive(Clone, Debug)]
pub struct AttnParams<R: Real> {
    /// Decoder-state block of W_c.
    pub w_cs: Array<R>,
    /// Encoder-state block of W_c.
    pub w_ch: Array<R>,
    /// Score vector; absent in the scalar-W_c reading.
    pub v: Option<Array<R>>,
}

/// Future-word-set prediction MLP: per-variant first layers (the two
/// input forms differ in width), shared second hidden and output layer.
#[derive(Clone, Debug)]
pub struct HeadParams<R: Real> {
    pub w1_step: Array<R>,
    pub b1_step: Array<R>,
    pub w1_init: Array<R>,
    pub b1_init: Array<R>,
    pub w2: Array<R>,
    pub b2: Array<R>,
    pub w3: Array<R>,
    pub b3: Array<R>,
}

#[derive(Clone, Debug)]
pub struct ModelParams<R: Real> {
    pub embedding: Array<R>,
    pub word_fwd: GruParams<R>,
    pub word_bwd: Option<GruParams<R>>,
    pub utt: GruParams<R>,
    pub dec: LstmParams<R>,
    pub attn: AttnParams<R>,
    pub w_init: Array<R>,
    pub b_init: Array<R>,
    pub w_out: Array<R>,
    pub b_out: Array<R>,
    pub head: HeadParams<R>,
}

macro_rules! gru_fields {
    ($prefix:expr, $g:expr, $out:expr, $wrap:expr) => {
        for (name, arr) in [
            ("w_xz", &$g.w_xz),
            ("w_hz", &$g.w_hz),
            ("b_z", &$g.b_z),
            ("w_xr", &$g.w_xr),
            ("w_hr", &$g.w_hr),
            ("b_r", &$g.b_r),
            ("w_xh", &$g.w_xh),
            ("w_hh", &$g.w_hh),
            ("b_h", &$g.b_h),
        ] {
            $out.push((format!("{}.{}", $prefix, name), $wrap(arr)));
        }
    };
}

impl<R: Real> ModelParams<R> {
    /// Every parameter in a fixed order shared by the checkpoint format,
    /// the optimizer state, and gradient extraction.
    pub fn named(&self) -> Vec<(String, &Array<R>)> {
        let mut out: Vec<(String, &Array<R>)> = Vec::new();
        out.push(("embedding".into(), &self.embedding));
        gru_fields!("word_fwd", self.word_fwd, out, |a| a);
        if let Some(bwd) = &self.word_bwd {
            gru_fields!("word_bwd", bwd, out, |a| a);
        }
        gru_fields!("utt", self.utt, out, |a| a);
        for (name, arr) in [
            ("w_xi", &self.dec.w_xi),
            ("w_hi", &self.dec.w_hi),
            ("b_i", &self.dec.b_i),
            ("w_xf", &self.dec.w_xf),
            ("w_hf", &self.dec.w_hf),
            ("b_f", &self.dec.b_f),
            ("w_xo", &self.dec.w_xo),
            ("w_ho", &self.dec.w_ho),
            ("b_o", &self.dec.b_o),
            ("w_xg", &self.dec.w_xg),
            ("w_hg", &self.dec.w_hg),
            ("b_g", &self.dec.b_g),
        ] {
            out.push((format!("dec.{}", name), arr));
        }
        out.push(("attn.w_cs".into(), &self.attn.w_cs));
        out.push(("attn.w_ch".into(), &self.attn.w_ch));
        if let Some(v) = &self.attn.v {
            out.push(("attn.v".into(), v));
        }
        out.push(("w_init".into(), &self.w_init));
        out.push(("b_init".into(), &self.b_init));
        out.push(("w_out".into(), &self.w_out));
        out.push(("b_out".into(), &self.b_out));
        for (name, arr) in [
            ("w1_step", &self.head.w1_step),
            ("b1_step", &self.head.b1_step),
            ("w1_init", &self.head.w1_init),
            ("b1_init", &self.head.b1_init),
            ("w2", &self.head.w2),
            ("b2", &self.head.b2),
            ("w3", &self.head.w3),
            ("b3", &self.head.b3),
        ] {
            out.push((format!("head.{}", name), arr));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array<R>)> {
        let mut out: Vec<(String, &mut Array<R>)> = Vec::new();
        macro_rules! gru_mut {
            ($prefix:expr, $g:expr) => {
                out.push((format!("{}.w_xz", $prefix), &mut $g.w_xz));
                out.push((format!("{}.w_hz", $prefix), &mut $g.w_hz));
                out.push((format!("{}.b_z", $prefix), &mut $g.b_z));
                out.push((format!("{}.w_xr", $prefix), &mut $g.w_xr));
                out.push((format!("{}.w_hr", $prefix), &mut $g.w_hr));
                out.push((format!("{}.b_r", $prefix), &mut $g.b_r));
                out.push((format!("{}.w_xh", $prefix), &mut $g.w_xh));
                out.push((format!("{}.w_hh", $prefix), &mut $g.w_hh));
                out.push((format!("{}.b_h", $prefix), &mut $g.b_h));
            };
        }
        out.push(("embedding".into(), &mut self.embedding));
        gru_mut!("word_fwd", self.word_fwd);
        if let Some(bwd) = &mut self.word_bwd {
            gru_mut!("word_bwd", bwd);
        }
        gru_mut!("utt", self.utt);
        out.push(("dec.w_xi".into(), &mut self.dec.w_xi));
        out.push(("dec.w_hi".into(), &mut self.dec.w_hi));
        out.push(("dec.b_i".into(), &mut self.dec.b_i));
        out.push(("dec.w_xf".into(), &mut self.dec.w_xf));
        out.push(("dec.w_hf".into(), &mut self.dec.w_hf));
        out.push(("dec.b_f".into(), &mut self.dec.b_f));
        out.push(("dec.w_xo".into(), &mut self.dec.w_xo));
        out.push(("dec.w_ho".into(), &mut self.dec.w_ho));
        out.push(("dec.b_o".into(), &mut self.dec.b_o));
        out.push(("dec.w_xg".into(), &mut self.dec.w_xg));
        out.push(("dec.w_hg".into(), &mut self.dec.w_hg));
        out.push(("dec.b_g".into(), &mut self.dec.b_g));
        out.push(("attn.w_cs".into(), &mut self.attn.w_cs));
        out.push(("attn.w_ch".into(), &mut self.attn.w_ch));
        if let Some(v) = &mut self.attn.v {
            out.push(("attn.v".into(), v));
        }
        out.push(("w_init".into(), &mut self.w_init));
        out.push(("b_init".into(), &mut self.b_init));
        out.push(("w_out".into(), &mut self.w_out));
        out.push(("b_out".into(), &mut self.b_out));
        out.push(("head.w1_step".into(), &mut self.head.w1_step));
        out.push(("head.b1_step".into(), &mut self.head.b1_step));
        out.push(("head.w1_init".into(), &mut self.head.w1_init));
        out.push(("head.b1_init".into(), &mut self.head.b1_init));
        out.push(("head.w2".into(), &mut self.head.w2));
        out.push(("head.b2".into(), &mut self.head.b2));
        out.push(("head.w3".into(), &mut self.head.w3));
        out.push(("head.b3".into(), &mut self.head.b3));
        out
    }
}

fn gaussian<R: Real>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Array<R> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            R::of(z * std)
        })
        .collect();
    Array::new(shape, data)
}

/// Orthogonal square matrix from the QR of a Gaussian draw (modified
/// Gram-Schmidt with one re-orthogonalization pass; R's diagonal is the
/// column norms, hence positive).
fn orthogonal<R: Real>(n: usize, rng: &mut ChaCha8Rng) -> Array<R> {
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for j in 0..n {
        for _pass in 0..2 {
            for i in 0..j {
                let dot: f64 = (0..n).map(|k| cols[i][k] * cols[j][k]).sum();
                for k in 0..n {
                    cols[j][k] -= dot * cols[i][k];
                }
            }
        }
        let norm: f64 = (0..n).map(|k| cols[j][k] * cols[j][k]).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "orthogonal init: degenerate column");
        for k in 0..n {
            cols[j][k] /= norm;
        }
    }
    // columns -> row-major matrix
    let mut data = vec![R::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = R::of(cols[j][i]);
        }
    }
    Array::new(vec![n, n], data)
}

fn init_gru<R: Real>(in_dim: usize, hid: usize, std: f64, rng: &mut ChaCha8Rng) -> GruParams<R> {
    GruParams {
        w_xz: gaussian(vec![hid, in_dim], std, rng),
        w_hz: orthogonal(hid, rng),
        b_z: Array::zeros(vec![hid]),
        w_xr: gaussian(vec![hid, in_dim], std, rng),
        w_hr: orthogonal(hid, rng),
        b_r: Array::zeros(vec![hid]),
        w_xh: gaussian(vec![hid, in_dim], std, rng),
        w_hh: orthogonal(hid, rng),
        b_h: Array::zeros(vec![hid]),
    }
}

fn init_lstm<R: Real>(in_dim: usize, hid: usize, std: f64, rng: &mut ChaCha8Rng) -> LstmParams<R> {
    LstmParams {
        w_xi: gaussian(vec![hid, in_dim], std, rng),
        w_hi: orthogonal(hid, rng),
        b_i: Array::zeros(vec![hid]),
        w_xf: gaussian(vec![hid, in_dim], std, rng),
        w_hf: orthogonal(hid, rng),
        b_f: Array::zeros(vec![hid]),
        w_xo: gaussian(vec![hid, in_dim], std, rng),
        w_ho: orthogonal(hid, rng),
        b_o: Array::zeros(vec![hid]),
        w_xg: gaussian(vec![hid, in_dim], std, rng),
        w_hg: orthogonal(hid, rng),
        b_g: Array::zeros(vec![hid]),
    }
}

/// Recurrent (hidden-to-hidden) matrices orthogonal, biases exactly 0,
/// everything else Gaussian with the given standard deviation.
pub fn init_parameters<R: Real>(cfg: &ModelConfig, seed: u64, init_std: f64) -> ModelParams<R> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc_out = cfg.enc_out_dim();
    let dec_in = cfg.embed_dim + enc_out;
    let attn_rows = match cfg.attention {
        AttentionKind::Additive => cfg.attn_dim,
        AttentionKind::ScalarWc => 1,
    };
    ModelParams {
        embedding: gaussian(vec![cfg.vocab_size, cfg.embed_dim], init_std, &mut rng),
        word_fwd: init_gru(cfg.embed_dim, cfg.word_enc_dim, init_std, &mut rng),
        word_bwd: cfg
            .bidirectional_word_encoder
            .then(|| init_gru(cfg.embed_dim, cfg.word_enc_dim, init_std, &mut rng)),
        utt: init_gru(enc_out, cfg.utt_enc_dim, init_std, &mut rng),
        dec: init_lstm(dec_in, cfg.dec_dim, init_std, &mut rng),
        attn: AttnParams {
            w_cs: gaussian(vec![attn_rows, cfg.dec_dim], init_std, &mut rng),
            w_ch: gaussian(vec![attn_rows, enc_out], init_std, &mut rng),
            v: matches!(cfg.attention, AttentionKind::Additive)
                .then(|| gaussian(vec![cfg.attn_dim], init_std, &mut rng)),
        },
        w_init: gaussian(vec![cfg.dec_dim, cfg.utt_enc_dim], init_std, &mut rng),
        b_init: Array::zeros(vec![cfg.dec_dim]),
        w_out: gaussian(vec![cfg.vocab_size, cfg.dec_dim + enc_out], init_std, &mut rng),
        b_out: Array::zeros(vec![cfg.vocab_size]),
        head: HeadParams {
            w1_step: gaussian(
                vec![cfg.head_hidden_dim, cfg.embed_dim + cfg.dec_dim + enc_out],
                init_std,
                &mut rng,
            ),
            b1_step: Array::zeros(vec![cfg.head_hidden_dim]),
            w1_init: gaussian(vec![cfg.head_hidden_dim, cfg.dec_dim + enc_out], init_std, &mut rng),
            b1_init: Array::zeros(vec![cfg.head_hidden_dim]),
            w2: gaussian(vec![cfg.head_hidden_dim, cfg.head_hidden_dim], init_std, &mut rng),
            b2: Array::zeros(vec![cfg.head_hidden_dim]),
            w3: gaussian(vec![cfg.vocab_size, cfg.head_hidden_dim], init_std, &mut rng),
            b3: Array::zeros(vec![cfg.vocab_size]),
        },
    }
}

fn zeros_gru<R: Real>(in_dim: usize, hid: usize) -> GruParams<R> {
    GruParams {
        w_xz: Array::zeros(vec![hid, in_dim]),
        w_hz: Array::zeros(vec![hid, hid]),
        b_z: Array::zeros(vec![hid]),
        w_xr: Array::zeros(vec![hid, in_dim]),
        w_hr: Array::zeros(vec![hid, hid]),
        b_r: Array::zeros(vec![hid]),
        w_xh: Array::zeros(vec![hid, in_dim]),
        w_hh: Array::zeros(vec![hid, hid]),
        b_h: Array::zeros(vec![hid]),
    }
}

impl<R: Real> ModelParams<R> {
    /// All-zero parameters with the shapes `cfg` dictates; checkpoint
    /// loading fills these in by name.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let enc_out = cfg.enc_out_dim();
        let dec_in = cfg.embed_dim + enc_out;
        let attn_rows = match cfg.attention {
            AttentionKind::Additive => cfg.attn_dim,
            AttentionKind::ScalarWc => 1,
        };
        let zeros_lstm = |in_dim: usize, hid: usize| LstmParams {
            w_xi: Array::zeros(vec![hid, in_dim]),
            w_hi: Array::zeros(vec![hid, hid]),
            b_i: Array::zeros(vec![hid]),
            w_xf: Array::zeros(vec![hid, in_dim]),
            w_hf: Array::zeros(vec![hid, hid]),
            b_f: Array::zeros(vec![hid]),
            w_xo: Array::zeros(vec![hid, in_dim]),
            w_ho: Array::zeros(vec![hid, hid]),
            b_o: Array::zeros(vec![hid]),
            w_xg: Array::zeros(vec![hid, in_dim]),
            w_hg: Array::zeros(vec![hid, hid]),
            b_g: Array::zeros(vec![hid]),
        };
        ModelParams {
            embedding: Array::zeros(vec![cfg.vocab_size, cfg.embed_dim]),
            word_fwd: zeros_gru(cfg.embed_dim, cfg.word_enc_dim),
            word_bwd: cfg
                .bidirectional_word_encoder
                .then(|| zeros_gru(cfg.embed_dim, cfg.word_enc_dim)),
            utt: zeros_gru(enc_out, cfg.utt_enc_dim),
            dec: zeros_lstm(dec_in, cfg.dec_dim),
            attn: AttnParams {
                w_cs: Array::zeros(vec![attn_rows, cfg.dec_dim]),
                w_ch: Array::zeros(vec![attn_rows, enc_out]),
                v: matches!(cfg.attention, AttentionKind::Additive)
                    .then(|| Array::zeros(vec![cfg.attn_dim])),
            },
            w_init: Array::zeros(vec![cfg.dec_dim, cfg.utt_enc_dim]),
            b_init: Array::zeros(vec![cfg.dec_dim]),
            w_out: Array::zeros(vec![cfg.vocab_size, cfg.dec_dim + enc_out]),
            b_out: Array::zeros(vec![cfg.vocab_size]),
            head: HeadParams {
                w1_step: Array::zeros(vec![
                    cfg.head_hidden_dim,
                    cfg.embed_dim + cfg.dec_dim + enc_out,
                ]),
                b1_step: Array::zeros(vec![cfg.head_hidden_dim]),
                w1_init: Array::zeros(vec![cfg.head_hidden_dim, cfg.dec_dim + enc_out]),
                b1_init: Array::zeros(vec![cfg.head_hidden_dim]),
                w2: Array::zeros(vec![cfg.head_hidden_dim, cfg.head_hidden_dim]),
                b2: Array::zeros(vec![cfg.head_hidden_dim]),
                w3: Array::zeros(vec![cfg.vocab_size, cfg.head_hidden_dim]),
                b3: Array::zeros(vec![cfg.vocab_size]),
            },
        }
    }
}

// ── tape-bound views ─────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GruVars {
    pub w_xz: Var,
    pub w_hz: Var,
    pub b_z: Var,
    pub w_xr: Var,
    pub w_hr: Var,
    pub b_r: Var,
    pub w_xh: Var,
    pub w_hh: Var,
    pub b_h: Var,
}

#[derive(Clone, Debug)]
pub struct LstmVars {
    pub w_xi: Var,
    pub w_hi: Var,
    pub b_i: Var,
    pub w_xf: Var,
    pub w_hf: Var,
    pub b_f: Var,
    pub w_xo: Var,
    pub w_ho: Var,
    pub b_o: Var,
    pub w_xg: Var,
    pub w_hg: Var,
    pub b_g: Var,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embedding: Var,
    pub word_fwd: GruVars,
    pub word_bwd: Option<GruVars>,
    pub utt: GruVars,
    pub dec: LstmVars,
    pub attn_w_cs: Var,
    pub attn_w_ch: Var,
    pub attn_v: Option<Var>,
    pub w_init: Var,
    pub b_init: Var,
    pub w_out: Var,
    pub b_out: Var,
    pub head_w1_step: Var,
    pub head_b1_step: Var,
    pub head_w1_init: Var,
    pub head_b1_init: Var,
    pub head_w2: Var,
    pub head_b2: Var,
    pub head_w3: Var,
    pub head_b3: Var,
}

fn bind_gru<R: Real>(tape: &mut Tape<R>, g: &GruParams<R>, trainable: bool) -> GruVars {
    GruVars {
        w_xz: tape.leaf(g.w_xz.clone(), trainable),
        w_hz: tape.leaf(g.w_hz.clone(), trainable),
        b_z: tape.leaf(g.b_z.clone(), trainable),
        w_xr: tape.leaf(g.w_xr.clone(), trainable),
        w_hr: tape.leaf(g.w_hr.clone(), trainable),
        b_r: tape.leaf(g.b_r.clone(), trainable),
        w_xh: tape.leaf(g.w_xh.clone(), trainable),
        w_hh: tape.leaf(g.w_hh.clone(), trainable),
        b_h: tape.leaf(g.b_h.clone(), trainable),
    }
}

impl ModelVars {
    /// Registers every parameter as a tape leaf, in `ModelParams::named`
    /// order.
    pub fn bind<R: Real>(tape: &mut Tape<R>, params: &ModelParams<R>, trainable: bool) -> Self {
        ModelVars {
            embedding: tape.leaf(params.embedding.clone(), trainable),
            word_fwd: bind_gru(tape, &params.word_fwd, trainable),
            word_bwd: params.word_bwd.as_ref().map(|g| bind_gru(tape, g, trainable)),
            utt: bind_gru(tape, &params.utt, trainable),
            dec: LstmVars {
                w_xi: tape.leaf(params.dec.w_xi.clone(), trainable),
                w_hi: tape.leaf(params.dec.w_hi.clone(), trainable),
                b_i: tape.leaf(params.dec.b_i.clone(), trainable),
                w_xf: tape.leaf(params.dec.w_xf.clone(), trainable),
                w_hf: tape.leaf(params.dec.w_hf.clone(), trainable),
                b_f: tape.leaf(params.dec.b_f.clone(), trainable),
                w_xo: tape.leaf(params.dec.w_xo.clone(), trainable),
                w_ho: tape.leaf(params.dec.w_ho.clone(), trainable),
                b_o: tape.leaf(params.dec.b_o.clone(), trainable),
                w_xg: tape.leaf(params.dec.w_xg.clone(), trainable),
                w_hg: tape.leaf(params.dec.w_hg.clone(), trainable),
                b_g: tape.leaf(params.dec.b_g.clone(), trainable),
            },
            attn_w_cs: tape.leaf(params.attn.w_cs.clone(), trainable),
            attn_w_ch: tape.leaf(params.attn.w_ch.clone(), trainable),
            attn_v: params.attn.v.as_ref().map(|v| tape.leaf(v.clone(), trainable)),
            w_init: tape.leaf(params.w_init.clone(), trainable),
            b_init: tape.leaf(params.b_init.clone(), trainable),
            w_out: tape.leaf(params.w_out.clone(), trainable),
            b_out: tape.leaf(params.b_out.clone(), trainable),
            head_w1_step: tape.leaf(params.head.w1_step.clone(), trainable),
            head_b1_step: tape.leaf(params.head.b1_step.clone(), trainable),
            head_w1_init: tape.leaf(params.head.w1_init.clone(), trainable),
            head_b1_init: tape.leaf(params.head.b1_init.clone(), trainable),
            head_w2: tape.leaf(params.head.w2.clone(), trainable),
            head_b2: tape.leaf(params.head.b2.clone(), trainable),
            head_w3: tape.leaf(params.head.w3.clone(), trainable),
            head_b3: tape.leaf(params.head.b3.clone(), trainable),
        }
    }

    /// Vars in the same order and under the same names as
    /// `ModelParams::named`.
    pub fn named(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = Vec::new();
        macro_rules! gru_vars {
            ($prefix:expr, $g:expr) => {
                for (name, var) in [
                    ("w_xz", $g.w_xz),
                    ("w_hz", $g.w_hz),
                    ("b_z", $g.b_z),
                    ("w_xr", $g.w_xr),
                    ("w_hr", $g.w_hr),
                    ("b_r", $g.b_r),
                    ("w_xh", $g.w_xh),
                    ("w_hh", $g.w_hh),
                    ("b_h", $g.b_h),
                ] {
                    out.push((format!("{}.{}", $prefix, name), var));
                }
            };
        }
        out.push(("embedding".into(), self.embedding));
        gru_vars!("word_fwd", self.word_fwd);
        if let Some(bwd) = &self.word_bwd {
            gru_vars!("word_bwd", bwd);
        }
        gru_vars!("utt", self.utt);
        for (name, var) in [
            ("w_xi", self.dec.w_xi),
            ("w_hi", self.dec.w_hi),
            ("b_i", self.dec.b_i),
            ("w_xf", self.dec.w_xf),
            ("w_hf", self.dec.w_hf),
            ("b_f", self.dec.b_f),
            ("w_xo", self.dec.w_xo),
            ("w_ho", self.dec.w_ho),
            ("b_o", self.dec.b_o),
            ("w_xg", self.dec.w_xg),
            ("w_hg", self.dec.w_hg),
            ("b_g", self.dec.b_g),
        ] {
            out.push((format!("dec.{}", name), var));
        }
        out.push(("attn.w_cs".into(), self.attn_w_cs));
        out.push(("attn.w_ch".into(), self.attn_w_ch));
        if let Some(v) = self.attn_v {
            out.push(("attn.v".into(), v));
        }
        out.push(("w_init".into(), self.w_init));
        out.push(("b_init".into(), self.b_init));
        out.push(("w_out".into(), self.w_out));
        out.push(("b_out".into(), self.b_out));
        for (name, var) in [
            ("w1_step", self.head_w1_step),
            ("b1_step", self.head_b1_step),
            ("w1_init", self.head_w1_init),
            ("b1_init", self.head_b1_init),
            ("w2", self.head_w2),
            ("b2", self.head_b2),
            ("w3", self.head_w3),
            ("b3", self.head_b3),
        ] {
            out.push((format!("head.{}", name), var));
        }
        out
    }
}

// ── forward-pass mode ────────────────────────────────────────────────

/// Inverted dropout: zero each element with probability `rate` during
/// training, scale survivors by 1/(1-rate); identity in evaluation.
pub fn apply_dropout<R: Real>(
    tape: &mut Tape<R>,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Var {
    assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0,1)");
    if !training || rate == 0.0 {
        return x;
    }
    let keep: Vec<bool> = (0..tape.value(x).len()).map(|_| rng.random::<f64>() >= rate).collect();
    tape.dropout_masked(x, keep, rate)
}

pub enum FwdMode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

impl FwdMode<'_> {
    fn dropout<R: Real>(&mut self, tape: &mut Tape<R>, x: Var) -> Var {
        match self {
            FwdMode::Eval => x,
            FwdMode::Train { dropout, rng } => apply_dropout(tape, x, *dropout, true, *rng),
        }
    }
}

// ── recurrent cells ──────────────────────────────────────────────────

pub fn gru_step<R: Real>(tape: &mut Tape<R>, g: &GruVars, x: Var, h: Var) -> Var {
    let zx = tape.matvec(g.w_xz, x);
    let zh = tape.matvec(g.w_hz, h);
    let zs = tape.add(zx, zh);
    let zs = tape.add(zs, g.b_z);
    let z = tape.sigmoid(zs);

    let rx = tape.matvec(g.w_xr, x);
    let rh = tape.matvec(g.w_hr, h);
    let rs = tape.add(rx, rh);
    let rs = tape.add(rs, g.b_r);
    let r = tape.sigmoid(rs);

    let rh = tape.mul(r, h);
    let hx = tape.matvec(g.w_xh, x);
    let hh = tape.matvec(g.w_hh, rh);
    let hs = tape.add(hx, hh);
    let hs = tape.add(hs, g.b_h);
    let h_tilde = tape.tanh(hs);

    let one_minus_z = tape.affine(z, -1.0, 1.0);
    let keep = tape.mul(one_minus_z, h);
    let update = tape.mul(z, h_tilde);
    tape.add(keep, update)
}

pub fn lstm_step<R: Real>(
    tape: &mut Tape<R>,
    l: &LstmVars,
    x: Var,
    state: (Var, Var),
) -> (Var, Var) {
    let (h, c) = state;
    let gate = |tape: &mut Tape<R>, wx: Var, wh: Var, b: Var| {
        let a = tape.matvec(wx, x);
        let bpart = tape.matvec(wh, h);
        let s = tape.add(a, bpart);
        tape.add(s, b)
    };
    let i_s = gate(tape, l.w_xi, l.w_hi, l.b_i);
    let i = tape.sigmoid(i_s);
    let f_s = gate(tape, l.w_xf, l.w_hf, l.b_f);
    let f = tape.sigmoid(f_s);
    let o_s = gate(tape, l.w_xo, l.w_ho, l.b_o);
    let o = tape.sigmoid(o_s);
    let g_s = gate(tape, l.w_xg, l.w_hg, l.b_g);
    let g = tape.tanh(g_s);

    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_new = tape.add(fc, ig);
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc);
    (h_new, c_new)
}

// ── encoder ──────────────────────────────────────────────────────────

pub struct EncoderOutput {
    /// All word-level states across context utterances, [T, enc_out].
    pub word_states: Var,
    /// Precomputed W_ch . h_i per position, [T, attn_rows].
    pub proj_states: Var,
    /// Final utterance-level state.
    pub utterance_summary: Var,
    pub t_len: usize,
}

fn embed<R: Real>(
    tape: &mut Tape<R>,
    vars: &ModelVars,
    token: u32,
    mode: &mut FwdMode,
) -> Var {
    let e = tape.select_row(vars.embedding, token as usize);
    mode.dropout(tape, e)
}

/// Word-level encoder over each utterance (shared weights), final state
/// per utterance feeding the utterance-level encoder in turn order.
pub fn encode_dialogue<R: Real>(
    tape: &mut Tape<R>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    context: &[Vec<u32>],
    mode: &mut FwdMode,
) -> EncoderOutput {
    assert!(!context.is_empty(), "encode_dialogue: empty context");
    let mut all_states: Vec<Var> = Vec::new();
    let mut utt_inputs: Vec<Var> = Vec::new();
    for utterance in context {
        assert!(!utterance.is_empty(), "encode_dialogue: empty context utterance");
        let embeds: Vec<Var> =
            utterance.iter().map(|&tok| embed(tape, vars, tok, mode)).collect();
        let mut h = tape.constant(vec![cfg.word_enc_dim], R::zero());
        let mut fwd_states = Vec::with_capacity(embeds.len());
        for &e in &embeds {
            h = gru_step(tape, &vars.word_fwd, e, h);
            fwd_states.push(h);
        }
        let fwd_last = *fwd_states.last().unwrap();
        if let Some(bwd) = &vars.word_bwd {
            let mut hb = tape.constant(vec![cfg.word_enc_dim], R::zero());
            let mut rev = Vec::with_capacity(embeds.len());
            for &e in embeds.iter().rev() {
                hb = gru_step(tape, bwd, e, hb);
                rev.push(hb);
            }
            rev.reverse();
            for (t, &fs) in fwd_states.iter().enumerate() {
                all_states.push(tape.add(fs, rev[t]));
            }
            utt_inputs.push(tape.add(fwd_last, rev[0]));
        } else {
            all_states.extend_from_slice(&fwd_states);
            utt_inputs.push(fwd_last);
        }
    }
    let mut g = tape.constant(vec![cfg.utt_enc_dim], R::zero());
    for &u in &utt_inputs {
        g = gru_step(tape, &vars.utt, u, g);
    }
    let word_states = tape.stack_rows(&all_states);
    let w_ch_t = tape.transpose(vars.attn_w_ch);
    let proj_states = tape.matmul(word_states, w_ch_t);
    EncoderOutput { word_states, proj_states, utterance_summary: g, t_len: all_states.len() }
}

// ── attention ────────────────────────────────────────────────────────

const MASKED_SCORE: f64 = -1e30;

/// Attention context for decoder state `s_prev`. Masked positions get a
/// score of -1e30, which underflows to an exactly-zero weight.
pub fn attention_context<R: Real>(
    tape: &mut Tape<R>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    s_prev: Var,
    enc: &EncoderOutput,
    mask: Option<&[bool]>,
) -> (Var, Var) {
    assert!(enc.t_len >= 1, "attention: empty encoder output");
    let u = tape.matvec(vars.attn_w_cs, s_prev);
    let pre = tape.add(enc.proj_states, u);
    let act = tape.tanh(pre);
    let scores = match cfg.attention {
        AttentionKind::Additive => {
            let v = vars.attn_v.expect("additive attention requires v");
            tape.matvec(act, v)
        }
        AttentionKind::ScalarWc => tape.reshape(act, vec![enc.t_len]),
    };
    let scores = match mask {
        None => scores,
        Some(m) => {
            assert_eq!(m.len(), enc.t_len, "attention: mask length mismatch");
            assert!(m.iter().any(|&keep| keep), "attention: all positions masked");
            let bias: Vec<R> =
                m.iter().map(|&keep| if keep { R::zero() } else { R::of(MASKED_SCORE) }).collect();
            let bias = tape.leaf(Array::vector(bias), false);
            tape.add(scores, bias)
        }
    };
    let a = tape.softmax(scores, 0);
    let h_t = tape.transpose(enc.word_states);
    let c = tape.matvec(h_t, a);
    (c, a)
}

// ── decoder ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub cell: Var,
}

/// s_0 = tanh(W_init . utterance_summary + b_init), zero cell state.
pub fn init_decoder_state<R: Real>(
    tape: &mut Tape<R>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    enc: &EncoderOutput,
) -> DecoderState {
    let proj = tape.matvec(vars.w_init, enc.utterance_summary);
    let s = tape.add(proj, vars.b_init);
    let h = tape.tanh(s);
    let cell = tape.constant(vec![cfg.dec_dim], R::zero());
    DecoderState { h, cell }
}

pub struct StepOutput {
    pub logits: Var,
    pub state: DecoderState,
    /// Attention context used this step, for reuse by the prediction head.
    pub context: Var,
    pub attn_weights: Var,
    /// Embedding of the previous token (after dropout), for head reuse.
    pub e_prev: Var,
}

/// One decoder step: attention with the previous state as query, LSTM
/// over [e(y_prev); c_j], logits over the vocabulary from [s_j; c_j].
/// `precomputed` short-circuits the attention when the caller already
/// holds (c, a) for this query.
#[allow(clippy::too_many_arguments)]
pub fn decoder_step<R: Real>(
    tape: &mut Tape<R>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    y_prev: u32,
    state: &DecoderState,
    enc: &EncoderOutput,
    precomputed: Option<(Var, Var)>,
    mode: &mut FwdMode,
) -> StepOutput {
    assert!(
        (y_prev as usize) < cfg.vocab_size,
        "decoder_step: token id {} out of range for vocab {}",
        y_prev,
        cfg.vocab_size
    );
    let (c, a) = match precomputed {
        Some(ca) => ca,
        None => attention_context(tape, vars, cfg, state.h, enc, None),
    };
    let e = embed(tape, vars, y_prev, mode);
    let x = tape.concat(&[e, c], 0);
    let (h, cell) = lstm_step(tape, &vars.dec, x, (state.h, state.cell));
    let feat = tape.concat(&[h, c], 0);
    let feat = mode.dropout(tape, feat);
    let proj = tape.matvec(vars.w_out, feat);
    let logits = tape.add(proj, vars.b_out);
    StepOutput { logits, state: DecoderState { h, cell }, context: c, attn_weights: a, e_prev: e }
}
