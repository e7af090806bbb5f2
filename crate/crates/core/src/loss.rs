//! Training objective: next-item cross-entropy plus a β-weighted
//! single-positive self-contrastive term over item representations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const PROB_FLOOR: f64 = 1e-12;

/// Which items enter the self-contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplScope {
    AllItems,
    /// Distinct items appearing in the current batch (prefixes and targets).
    BatchItems,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeForm {
    /// `−[log ŷ_t + Σ_{i≠t} log(1 − ŷ_i)]`
    AsPrinted,
    /// `−log ŷ_t`
    SoftmaxCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub tau: f64,
    pub spl_scope: SplScope,
    pub ce_form: CeForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_spl: f64,
    pub total: f64,
}

pub fn total_loss(l_ce: f64, l_spl: f64, beta: f64) -> LossBreakdown {
    LossBreakdown {
        l_ce,
        l_spl,
        total: l_ce + beta * l_spl,
    }
}

/// Single-example cross-entropy on a probability vector.
pub fn cross_entropy(probs: &[f64], target: usize, form: CeForm) -> Result<f64> {
    if target >= probs.len() {
        return Err(Error::Data(format!(
            "target {target} outside {} candidates",
            probs.len()
        )));
    }
    let clamp = |p: f64| p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    Ok(match form {
        CeForm::SoftmaxCe => -clamp(probs[target]).ln(),
        CeForm::AsPrinted => {
            -probs
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    if i == target {
                        clamp(p).ln()
                    } else {
                        (1.0 - clamp(p)).ln()
                    }
                })
                .sum::<f64>()
        }
    })
}

/// Batch-mean cross-entropy on the tape. `scores` are the pre-softmax
/// logits (`batch × n`), `probs` their row softmax.
pub fn cross_entropy_on_tape(
    tape: &mut Tape,
    scores: Var,
    probs: Var,
    targets: &[usize],
    form: CeForm,
) -> Result<Var> {
    let (b, n) = tape.value(probs).shape();
    if targets.len() != b {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: (b, n),
            right: (targets.len(), 1),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::Data(format!("target {t} outside {n} candidates")));
    }
    let mut onehot = Tensor::zeros(b, n);
    for (r, &t) in targets.iter().enumerate() {
        onehot.set(r, t, 1.0);
    }
    let per_batch = match form {
        CeForm::SoftmaxCe => {
            let logp = tape.row_log_softmax(scores);
            let logp = tape.clamp(logp, PROB_FLOOR.ln(), (1.0 - PROB_FLOOR).ln());
            let picked = tape.mul_const(logp, &onehot)?;
            tape.sum(picked)
        }
        CeForm::AsPrinted => {
            let p = tape.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR);
            let logp = tape.log(p);
            let one_minus = tape.affine(p, -1.0, 1.0);
            let log_one_minus = tape.log(one_minus);
            let pos = tape.mul_const(logp, &onehot)?;
            let mut rest = Tensor::filled(b, n, 1.0);
            rest.data_mut()
                .iter_mut()
                .zip(onehot.data())
                .for_each(|(r, o)| *r -= o);
            let neg = tape.mul_const(log_one_minus, &rest)?;
            let both = tape.add(pos, neg)?;
            tape.sum(both)
        }
    };
    Ok(tape.scale(per_batch, -1.0 / b as f64))
}

/// `Σ_i [logsumexp_j(cos(x_i, x_j)/τ) − 1/τ]`, i.e.
/// `−Σ_i log(g(x_i,x_i) / Σ_j g(x_i,x_j))` with `g = exp(cos/τ)`.
pub fn single_positive_loss_on_tape(tape: &mut Tape, x: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let sim = tape.cosine_similarity_matrix(x)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let lse = tape.row_log_sum_exp(logits);
    // each row's lse is at least its diagonal logit, so every term is >= 0
    let per_item = tape.affine(lse, 1.0, -1.0 / tau);
    Ok(tape.sum(per_item))
}

pub fn single_positive_loss(x: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = single_positive_loss_on_tape(&mut tape, v, tau)?;
    Ok(tape.value(out).item())
}

/// Sorted distinct items of a batch, for [`SplScope::BatchItems`].
pub fn batch_item_set(items: &[usize], targets: &[usize]) -> Vec<usize> {
    let mut all: Vec<usize> = items.iter().chain(targets).copied().collect();
    all.sort_unstable();
    all.dedup();
    all
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn as_printed_hand_value() {
        let v = cross_entropy(&[0.25, 0.25, 0.5], 2, CeForm::AsPrinted).unwrap();
        let expected = -(0.5f64.ln() + 2.0 * 0.75f64.ln());
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 1.2685).abs() < 1e-4);
    }

    #[test]
    fn softmax_ce_hand_value() {
        let v = cross_entropy(&[0.25, 0.25, 0.5], 2, CeForm::SoftmaxCe).unwrap();
        assert!((v - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        for form in [CeForm::AsPrinted, CeForm::SoftmaxCe] {
            let v = cross_entropy(&[0.0, 1.0, 0.0], 1, form).unwrap();
            assert!(v.abs() <= 1e-9, "{form:?}: {v}");
        }
    }

    #[test]
    fn target_out_of_range() {
        assert!(cross_entropy(&[0.5, 0.5], 2, CeForm::AsPrinted).is_err());
    }

    #[test]
    fn tape_matches_scalar_form() {
        let scores = Tensor::from_rows(&[&[0.3, -1.0, 2.0], &[0.0, 0.5, 0.1]]);
        let targets = [2, 0];
        for form in [CeForm::AsPrinted, CeForm::SoftmaxCe] {
            let mut tape = Tape::new();
            let s = tape.constant(scores.clone());
            let p = tape.row_softmax(s);
            let l = cross_entropy_on_tape(&mut tape, s, p, &targets, form).unwrap();
            let probs = tape.value(p).clone();
            let expected: f64 = (0..2)
                .map(|r| cross_entropy(probs.row(r), targets[r], form).unwrap())
                .sum::<f64>()
                / 2.0;
            assert!((tape.value(l).item() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn spl_single_item_is_zero() {
        let v = single_positive_loss(&Tensor::from_rows(&[&[0.3, 0.4]]), 0.1).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn spl_orthogonal_pair() {
        let x = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = single_positive_loss(&x, 1.0).unwrap();
        let expected = 2.0 * (1.0 + (-1f64).exp()).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.6265).abs() < 1e-4);
    }

    #[test]
    fn spl_identical_pair() {
        let x = Tensor::from_rows(&[&[0.6, 0.8], &[0.6, 0.8]]);
        let v = single_positive_loss(&x, 1.0).unwrap();
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn spl_zero_row_rejected() {
        let x = Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(
            single_positive_loss(&x, 0.1),
            Err(Error::DegenerateRepresentation(0))
        ));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 2.0, 0.5).total, 2.0);
        assert_eq!(total_loss(1.3, 7.0, 0.0).total, 1.3);
        let b = total_loss(0.5, 2.0, 75.0);
        assert!(75.0 * b.l_spl > 100.0 * b.l_ce);
    }

    #[test]
    fn batch_items_are_sorted_unique() {
        assert_eq!(batch_item_set(&[3, 1, 3], &[1, 7]), vec![1, 3, 7]);
    }
}
