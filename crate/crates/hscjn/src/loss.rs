//! Training objective: per-step future-word-set prediction loss, the
//! maximum-entropy output regularizer, and their weighted combination
//! with the token negative log-likelihood.

use crate::corpus::SOS;
use crate::model::{
    attention_context, decoder_step, encode_dialogue, init_decoder_state, FwdMode, ModelConfig,
    ModelVars,
};
use crate::tensor::{Real, Tape, Var};

/// Per-step multisets of the target tokens still to be generated:
/// step j covers positions j..m, step 1 doubles as the full-target set
/// predicted from the initial state. Duplicates are kept; the product
/// in the prediction loss runs over positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetWordSets {
    target: Vec<u32>,
}

impl TargetWordSets {
    pub fn build(target: &[u32]) -> Self {
        assert!(!target.is_empty(), "target word sets: empty target");
        TargetWordSets { target: target.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Remaining tokens at step j (1-based): (y_j, ..., y_m).
    pub fn set(&self, j: usize) -> &[u32] {
        assert!(j >= 1 && j <= self.target.len(), "word set step {} out of 1..={}", j, self.target.len());
        &self.target[j - 1..]
    }

    /// The full-target multiset predicted from the initial state.
    pub fn full(&self) -> &[u32] {
        &self.target
    }
}

/// Sigmoid-head logits for one decoder step: two tanh hidden layers,
/// step-variant input [e(y_prev); s_j; c_j].
pub fn head_step_logits<R: Real>(
    tape: &mut Tape<R>,
    vars: &ModelVars,
    e_prev: Var,
    s_j: Var,
    c_j: Var,
) -> Var {
    let x = tape.concat(&[e_prev, s_j, c_j], 0);
    head_trunk(tape, vars, vars.head_w1_step, vars.head_b1_step, x)
}

/// Initial-state variant: input [s_0; c_0] only.
pub fn head_initial_logits<R: Real>(
    tape: &mut Tape<R>,
    vars: &ModelVars,
    s_0: Var,
    c_0: Var,
) -> Var {
    let x = tape.concat(&[s_0, c_0], 0);
    head_trunk(tape, vars, vars.head_w1_init, vars.head_b1_init, x)
}

fn head_trunk<R: Real>(tape: &mut Tape<R>, vars: &ModelVars, w1: Var, b1: Var, x: Var) -> Var {
    let a1 = tape.matvec(w1, x);
    let a1 = tape.add(a1, b1);
    let h1 = tape.tanh(a1);
    let a2 = tape.matvec(vars.head_w2, h1);
    let a2 = tape.add(a2, vars.head_b2);
    let h2 = tape.tanh(a2);
    let a3 = tape.matvec(vars.head_w3, h2);
    tape.add(a3, vars.head_b3)
}

/// log P = sum over the multiset of log sigmoid(z[y]). Computed in log
/// space, so saturated scores stay finite. With `negatives`, adds the
/// complementary term sum_{w not in set} log sigmoid(-z[w]) / |V| as a
/// separate loss component (an extension beyond the plain objective).
pub struct SetLogProb {
    pub log_p: Var,
    pub neg_loss: Option<Var>,
}

pub fn set_logprob<R: Real>(
    tape: &mut Tape<R>,
    logits: Var,
    set: &[u32],
    negatives: bool,
) -> SetLogProb {
    assert!(!set.is_empty(), "set_logprob: empty word set");
    let log_q = tape.log_sigmoid(logits);
    let idx: Vec<usize> = set.iter().map(|&t| t as usize).collect();
    let picked = tape.gather(log_q, &idx);
    let log_p = tape.sum(picked);
    let neg_loss = negatives.then(|| {
        let vocab = tape.value(logits).len();
        let mut member = vec![false; vocab];
        for &i in &idx {
            member[i] = true;
        }
        let rest: Vec<usize> = (0..vocab).filter(|&i| !member[i]).collect();
        if rest.is_empty() {
            return tape.scalar(R::zero());
        }
        let neg_logits = tape.neg(logits);
        let log_not_q = tape.log_sigmoid(neg_logits);
        let picked = tape.gather(log_not_q, &rest);
        let s = tape.sum(picked);
        tape.affine(s, -1.0 / vocab as f64, 0.0)
    });
    SetLogProb { log_p, neg_loss }
}

/// L_WP = -(1/m) log P_0 - sum_j (1/(m-j+1)) log P_j. Non-negative,
/// zero exactly when every log term is zero.
pub fn loss_wp<R: Real>(tape: &mut Tape<R>, log_p0: Var, log_pj: &[Var]) -> Var {
    let m = log_pj.len();
    assert!(m >= 1, "loss_wp: no per-step predictions");
    let mut total = tape.affine(log_p0, -1.0 / m as f64, 0.0);
    for (j, &lp) in log_pj.iter().enumerate() {
        let weight = -1.0 / (m - j) as f64; // j is 0-based: m - (j+1) + 1
        let term = tape.affine(lp, weight, 0.0);
        total = tape.add(total, term);
    }
    total
}

/// L_ME = -sum_t H(p_t) = sum_t sum_i p_i ln p_i over full
/// distributions; 0 ln 0 := 0. Bounded by [-m ln|V|, 0].
pub fn loss_me<R: Real>(tape: &mut Tape<R>, step_distributions: &[Var]) -> Var {
    assert!(!step_distributions.is_empty(), "loss_me: no distributions");
    let mut total: Option<Var> = None;
    for &d in step_distributions {
        let total_mass: f64 = tape.value(d).iter().map(|v| v.as_f64()).sum();
        assert!(
            (total_mass - 1.0).abs() < 1e-6,
            "loss_me: distribution sums to {total_mass}, not 1"
        );
        let plogp = tape.xlogx(d);
        let s = tape.sum(plogp);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s),
        });
    }
    total.unwrap()
}

/// Same quantity built from log-softmax outputs: p ln p = exp(lp) * lp,
/// which keeps underflowed probabilities at an exact zero contribution.
pub fn loss_me_from_log_probs<R: Real>(tape: &mut Tape<R>, step_log_probs: &[Var]) -> Var {
    assert!(!step_log_probs.is_empty(), "loss_me: no distributions");
    let mut total: Option<Var> = None;
    for &lp in step_log_probs {
        let p = tape.exp(lp);
        let plogp = tape.mul(p, lp);
        let s = tape.sum(plogp);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s),
        });
    }
    total.unwrap()
}

/// Scalar loss components of one example or batch. `total` is always
/// recomputed as nll + alpha*l_wp + beta*l_me on the same f64 path the
/// log checker uses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub nll: f64,
    pub l_wp: f64,
    pub l_me: f64,
    pub total: f64,
    pub step_entropies: Vec<f64>,
}

impl LossBreakdown {
    pub fn mean_entropy(&self) -> f64 {
        if self.step_entropies.is_empty() {
            0.0
        } else {
            self.step_entropies.iter().sum::<f64>() / self.step_entropies.len() as f64
        }
    }
}

pub fn loss_total(nll: f64, l_wp: f64, l_me: f64, alpha: f64, beta: f64) -> LossBreakdown {
    validate_weights(alpha, beta);
    LossBreakdown {
        nll,
        l_wp,
        l_me,
        total: nll + alpha * l_wp + beta * l_me,
        step_entropies: Vec::new(),
    }
}

pub fn validate_weights(alpha: f64, beta: f64) {
    assert!((0.0..=1.0).contains(&alpha), "alpha {alpha} outside [0,1]");
    assert!((0.0..=1.0).contains(&beta), "beta {beta} outside [0,1]");
}

/// Forward pass of one (context -> target) example under teacher
/// forcing, producing the weighted objective node and its breakdown.
pub struct ExampleForward {
    /// nll + alpha*L_WP + beta*L_ME on the tape; zero-weight components
    /// are never built, so alpha=beta=0 yields the NLL node itself.
    pub objective: Var,
    pub nll_var: Var,
    /// Present when alpha > 0.
    pub l_wp_var: Option<Var>,
    /// Present when beta > 0.
    pub l_me_var: Option<Var>,
    pub breakdown: LossBreakdown,
    pub target_tokens: usize,
}

pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub wp_negatives: bool,
}

pub fn forward_example<R: Real>(
    tape: &mut Tape<R>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    context: &[Vec<u32>],
    target: &[u32],
    weights: &LossWeights,
    mode: &mut FwdMode,
) -> ExampleForward {
    validate_weights(weights.alpha, weights.beta);
    let sets = TargetWordSets::build(target);
    let m = sets.len();

    let enc = encode_dialogue(tape, vars, cfg, context, mode);
    let mut state = init_decoder_state(tape, vars, cfg, &enc);
    // c_0 and step 1's context share the query s_0, so one attention
    // pass serves both.
    let mut ctx = attention_context(tape, vars, cfg, state.h, &enc, None);

    let mut log_p0 = None;
    let mut neg_acc: Option<Var> = None;
    if weights.alpha > 0.0 {
        let z0 = head_initial_logits(tape, vars, state.h, ctx.0);
        let lp = set_logprob(tape, z0, sets.full(), weights.wp_negatives);
        log_p0 = Some(lp.log_p);
        neg_acc = lp.neg_loss;
    }

    let mut nll_acc: Option<Var> = None;
    let mut log_pj: Vec<Var> = Vec::with_capacity(m);
    let mut me_acc: Option<Var> = None;
    let mut entropies: Vec<f64> = Vec::with_capacity(m);
    let mut y_prev = SOS;

    for j in 1..=m {
        let out = decoder_step(tape, vars, cfg, y_prev, &state, &enc, Some(ctx), mode);
        let log_probs = tape.log_softmax(out.logits, 0);

        let y_j = target[j - 1];
        let picked = tape.gather(log_probs, &[y_j as usize]);
        let step_nll = tape.affine(picked, -1.0, 0.0);
        let step_nll = tape.reshape(step_nll, vec![1]);
        nll_acc = Some(match nll_acc {
            None => step_nll,
            Some(acc) => tape.add(acc, step_nll),
        });

        // entropy is always measured on the tape path so ablated and
        // regularized runs log bit-identical diagnostics; it joins the
        // objective only when beta > 0
        let p = tape.exp(log_probs);
        let plogp = tape.mul(p, log_probs);
        let s = tape.sum(plogp);
        entropies.push(-tape.scalar_value(s).as_f64());
        me_acc = Some(match me_acc {
            None => s,
            Some(acc) => tape.add(acc, s),
        });

        if weights.alpha > 0.0 {
            let z = head_step_logits(tape, vars, out.e_prev, out.state.h, out.context);
            let lp = set_logprob(tape, z, sets.set(j), weights.wp_negatives);
            log_pj.push(lp.log_p);
            if let Some(extra) = lp.neg_loss {
                neg_acc = Some(match neg_acc {
                    None => extra,
                    Some(acc) => tape.add(acc, extra),
                });
            }
        }

        state = out.state;
        y_prev = y_j;
        if j < m {
            ctx = attention_context(tape, vars, cfg, state.h, &enc, None);
        }
    }

    let nll = nll_acc.expect("target nonempty");
    let mut l_wp_var = None;
    if weights.alpha > 0.0 {
        let mut wp = loss_wp(tape, log_p0.unwrap(), &log_pj);
        if let Some(neg) = neg_acc {
            wp = tape.add(wp, neg);
        }
        l_wp_var = Some(wp);
    }

    let mut objective = nll;
    if let Some(wp) = l_wp_var {
        let scaled = tape.affine(wp, weights.alpha, 0.0);
        objective = tape.add(objective, scaled);
    }
    let me = me_acc.expect("target nonempty");
    if weights.beta > 0.0 {
        let scaled = tape.affine(me, weights.beta, 0.0);
        objective = tape.add(objective, scaled);
    }

    let nll_value = tape.scalar_value(nll).as_f64();
    let l_wp_value = l_wp_var.map(|v| tape.scalar_value(v).as_f64()).unwrap_or(0.0);
    let l_me_value = tape.scalar_value(me).as_f64();
    let mut breakdown = loss_total(nll_value, l_wp_value, l_me_value, weights.alpha, weights.beta);
    breakdown.step_entropies = entropies;

    ExampleForward {
        objective,
        nll_var: nll,
        l_wp_var,
        l_me_var: Some(me),
        breakdown,
        target_tokens: m,
    }
}
