//! Training objectives: CTC, teacher-forced attention cross-entropy, their
//! hybrid, and the downstream classification/regression losses.

use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the CTC term; the attention term gets `1 - lambda`.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("hybrid weight {lambda} outside [0, 1]")));
    }
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Number of adjacent equal labels; each needs a separating blank.
pub fn count_repeats(labels: &[usize]) -> usize {
    labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Result of the CTC forward-backward recursion.
#[derive(Debug, Clone)]
pub struct CtcOutput {
    /// `-ln p(labels | x)`.
    pub loss: f64,
    /// d loss / d log_probs, row-major like the input.
    pub grad: Vec<f64>,
}

/// CTC negative log-likelihood and its gradient with respect to
/// frame-level log-probabilities `[T x (A+1)]`.
///
/// The recursion runs in log space. Label sequences that no alignment can
/// emit are reported as [`Error::InfeasibleAlignment`].
pub fn ctc_forward_backward(log_probs: &Tensor, labels: &[usize], blank: usize) -> Result<CtcOutput> {
    let s = log_probs.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("ctc expects [T x K] log-probs, got {s:?}")));
    }
    let (t_len, k) = (s[0], s[1]);
    if blank >= k {
        return Err(Error::SymbolOutOfAlphabet { symbol: blank, alphabet: k });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k || l == blank) {
        return Err(Error::SymbolOutOfAlphabet { symbol: bad, alphabet: k - 1 });
    }
    let repeats = count_repeats(labels);
    if t_len < labels.len() + repeats {
        return Err(Error::InfeasibleAlignment {
            frames: t_len,
            labels: labels.len(),
            repeats,
        });
    }
    let lp = log_probs.data();
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(labels.iter().flat_map(|&l| [l, blank]))
        .collect();
    let n = ext.len();
    let ninf = f64::NEG_INFINITY;
    let emit = |t: usize, s: usize| lp[t * k + ext[s]];
    // Transitions into s: from s, s-1, and s-2 when ext[s] is a label
    // differing from ext[s-2].
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * n];
    alpha[0] = emit(0, 0);
    if n > 1 {
        alpha[1] = emit(0, 1);
    }
    for t in 1..t_len {
        for s in 0..n {
            let prev = &alpha[(t - 1) * n..t * n];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * n + s] = if a == ninf { ninf } else { a + emit(t, s) };
        }
    }
    let last = (t_len - 1) * n;
    let log_p = if n > 1 {
        log_add(alpha[last + n - 1], alpha[last + n - 2])
    } else {
        alpha[last]
    };
    if !log_p.is_finite() {
        return Err(Error::NonFinite("ctc likelihood".into()));
    }

    let mut beta = vec![ninf; t_len * n];
    beta[last + n - 1] = emit(t_len - 1, n - 1);
    if n > 1 {
        beta[last + n - 2] = emit(t_len - 1, n - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..n {
            let next = &beta[(t + 1) * n..(t + 2) * n];
            let mut b = next[s];
            if s + 1 < n {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < n && skip_ok(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * n + s] = if b == ninf { ninf } else { b + emit(t, s) };
        }
    }

    // alpha and beta both include the emission at t, so
    // sum_s alpha*beta / y = p; dL/dlp[t,c] = -sum_{s: ext[s]=c} alpha*beta / (y p).
    let mut grad = vec![0.0; t_len * k];
    let mut acc = vec![ninf; k];
    for t in 0..t_len {
        acc.iter_mut().for_each(|v| *v = ninf);
        for s in 0..n {
            let v = alpha[t * n + s] + beta[t * n + s];
            acc[ext[s]] = log_add(acc[ext[s]], v);
        }
        for c in 0..k {
            if acc[c] != ninf {
                grad[t * k + c] = -(acc[c] - lp[t * k + c] - log_p).exp();
            }
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

/// CTC loss recorded on the graph.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, labels: &[usize], blank: usize) -> Result<Var> {
    let out = ctc_forward_backward(g.value(log_probs), labels, blank)?;
    g.precomputed(log_probs, out.loss, out.grad)
}

/// Mean per-step cross-entropy of teacher-forced attention logits `[L x A]`.
pub fn attention_ce(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "attention logits {s:?} vs {} labels",
            labels.len()
        )));
    }
    let lp = g.log_softmax_rows(logits)?;
    g.nll_rows(lp, labels)
}

/// `lambda * ctc + (1 - lambda) * att`.
pub fn hybrid(ctc: f64, att: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * ctc + (1.0 - lambda) * att)
}

pub fn hybrid_loss(g: &mut Graph, ctc: Var, att: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = g.scale(ctc, lambda);
    let b = g.scale(att, 1.0 - lambda);
    g.add(a, b)
}

/// Logistic cross-entropy on a logit (classification) or squared error
/// (regression).
pub fn downstream_loss(g: &mut Graph, prediction: Var, target: f64, task: TaskKind) -> Result<Var> {
    match task {
        TaskKind::Classification => {
            if target != 0.0 && target != 1.0 {
                return Err(Error::InvalidArgument(format!("class target {target} not in {{0, 1}}")));
            }
            g.bce_with_logits(prediction, target)
        }
        TaskKind::Regression => {
            if !(0.0..=24.0).contains(&target) {
                return Err(Error::InvalidArgument(format!("regression target {target} outside [0, 24]")));
            }
            g.squared_error(prediction, target)
        }
    }
}
