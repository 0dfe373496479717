//! Sigmoid contrastive loss, stratified margin loss with three margin
//! schedules, and their exact gradients with respect to the similarity
//! matrix.
//!
//! The contrastive term scores every image-caption pair independently
//! against its match label. The margin term ranks, for every anchor row,
//! positives above same-group hard negatives, hard negatives above the other
//! groups' candidates, and positives above the other groups' real
//! candidates (the last comparison weighted by `alpha` because real data is
//! assumed trustworthy).
//!
//! The margin itself can follow three schedules. `fixed` always applies the
//! base margin. `adaptive` looks at the observed gap `d` between the ranked
//! pair: a gap below the cutoff `beta` marks the pair as probably mislabeled
//! and cancels its term exactly, a gap above the base margin marks it as
//! already separated, and in between the margin grows linearly as the gap
//! shrinks. `adaptive_inverse` flips the slope of the middle branch while
//! keeping the cancellation branch.
//!
//! The margin is a schedule, not a trained quantity: gradients treat the
//! margin value of each pair as a constant. The `*_frozen` entry points make
//! that surrogate explicit by taking the matrix the margins are read from as
//! a separate argument, which is what finite-difference verification has to
//! differentiate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batching::{caption_sets_for_image, AlignmentMatrix};
use crate::numkit::{log1p_exp, Matrix};

/// Errors produced by loss evaluation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    /// Operand shapes disagree.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// A margin computation was requested with the margin loss disabled.
    #[error("margin mode 'none' admits no margin value")]
    InvalidMode,
    /// The loss configuration is inconsistent.
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

/// Which margin schedule the margin loss follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// Margin loss disabled; only valid with `lambda = 0`.
    None,
    /// Constant base margin for every pair.
    Fixed,
    /// Gap-dependent margin: cancel below `beta`, grow as the gap shrinks
    /// inside `[beta, m0]`, cap at `m0` above.
    Adaptive,
    /// Like `adaptive` but the middle branch grows with the gap instead.
    AdaptiveInverse,
}

impl MarginMode {
    /// Stable lowercase name used in CLI flags and reports.
    pub fn name(self) -> &'static str {
        match self {
            MarginMode::None => "none",
            MarginMode::Fixed => "fixed",
            MarginMode::Adaptive => "adaptive",
            MarginMode::AdaptiveInverse => "adaptive_inverse",
        }
    }

    /// Parses the stable lowercase name.
    pub fn parse(name: &str) -> Option<MarginMode> {
        match name {
            "none" => Some(MarginMode::None),
            "fixed" => Some(MarginMode::Fixed),
            "adaptive" => Some(MarginMode::Adaptive),
            "adaptive_inverse" => Some(MarginMode::AdaptiveInverse),
            _ => None,
        }
    }
}

impl std::fmt::Display for MarginMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// All knobs of the combined loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Temperature dividing similarities inside the contrastive logits.
    pub tau: f64,
    /// Additive bias inside the contrastive logits.
    pub b: f64,
    /// Weight of the margin loss in the total.
    pub lambda: f64,
    /// Extra weight on ranking positives above other groups' real
    /// candidates; at least 1.
    pub alpha: f64,
    /// Base margin, positive.
    pub m0: f64,
    /// Mislabel cutoff on the observed gap, negative.
    pub beta: f64,
    /// Slope scale of the adaptive middle branch.
    pub gamma: f64,
    /// Margin schedule.
    pub margin_mode: MarginMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.01,
            b: -30.0,
            lambda: 1.0,
            alpha: 10.0,
            m0: 0.005,
            beta: -0.02,
            gamma: 1.0,
            margin_mode: MarginMode::Adaptive,
        }
    }
}

impl LossConfig {
    /// Checks the structural invariants of the configuration.
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "tau must be positive and finite, got {}",
                self.tau
            )));
        }
        if !self.b.is_finite() {
            return Err(LossError::InvalidConfig("b must be finite".into()));
        }
        if !(self.m0 > 0.0 && self.m0.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "m0 must be positive, got {}",
                self.m0
            )));
        }
        if !(self.beta < 0.0 && self.beta.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "beta must be negative, got {}",
                self.beta
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "alpha must be at least 1, got {}",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Logistic sigmoid, evaluated without overflow on either tail.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise sigmoid contrastive loss and its gradient.
///
/// Every entry contributes `log(1 + exp(-M * (S / tau + b)))`, averaged over
/// the anchor rows. The gradient with respect to each similarity is
/// `(-M / tau) * sigmoid(-M * (S / tau + b))` under the same averaging.
pub fn sigmoid_contrastive_loss(
    s: &Matrix,
    m: &AlignmentMatrix,
    tau: f64,
    b: f64,
) -> Result<(f64, Matrix), LossError> {
    let labels = m.matrix();
    if s.rows() != labels.rows() {
        return Err(LossError::ShapeMismatch {
            context: "contrastive loss rows",
            expected: labels.rows(),
            got: s.rows(),
        });
    }
    if s.cols() != labels.cols() {
        return Err(LossError::ShapeMismatch {
            context: "contrastive loss cols",
            expected: labels.cols(),
            got: s.cols(),
        });
    }
    let scale = 1.0 / s.rows() as f64;
    let mut grad = Matrix::zeros(s.rows(), s.cols());
    let mut total = 0.0;
    for i in 0..s.rows() {
        for j in 0..s.cols() {
            let label = labels.get(i, j);
            let z = -label * (s.get(i, j) / tau + b);
            total += scale * log1p_exp(z);
            grad.set(i, j, scale * (-label / tau) * sigmoid(z));
        }
    }
    Ok((total, grad))
}

/// Gap-dependent margin schedule.
///
/// For an observed gap `d` between a ranked pair: below `beta` the margin
/// equals `d` itself (which cancels the pair's hinge term), inside
/// `[beta, m0]` it decays linearly from `(gamma + 1) * m0` down to `m0`, and
/// above `m0` it stays at the base margin.
pub fn adaptive_margin(d: f64, cfg: &LossConfig) -> f64 {
    if d < cfg.beta {
        d
    } else if d <= cfg.m0 {
        ((cfg.m0 - d) / (cfg.m0 - cfg.beta) * cfg.gamma + 1.0) * cfg.m0
    } else {
        cfg.m0
    }
}

/// Margin value for the configured schedule.
///
/// `fixed` ignores the gap, `adaptive` follows [`adaptive_margin`], and
/// `adaptive_inverse` mirrors the middle branch so larger gaps get larger
/// margins, rising from `m0` at `beta` to `(gamma + 1) * m0` at and beyond
/// `m0`, while keeping the cancellation branch below `beta`.
pub fn margin_for_mode(d: f64, cfg: &LossConfig) -> Result<f64, LossError> {
    match cfg.margin_mode {
        MarginMode::None => Err(LossError::InvalidMode),
        MarginMode::Fixed => Ok(cfg.m0),
        MarginMode::Adaptive => Ok(adaptive_margin(d, cfg)),
        MarginMode::AdaptiveInverse => Ok(if d < cfg.beta {
            d
        } else if d <= cfg.m0 {
            ((d - cfg.beta) / (cfg.m0 - cfg.beta) * cfg.gamma + 1.0) * cfg.m0
        } else {
            (cfg.gamma + 1.0) * cfg.m0
        }),
    }
}

/// Margin loss anchored on image rows.
///
/// For each image row, one hinge per pair ranks positives above the hard
/// negative, the hard negative above the other groups' candidates, and
/// (weighted by `alpha`) positives above the other groups' real candidates.
/// Each hinge pair carries its own margin from the observed gap. Terms over
/// empty sets contribute zero. The result is averaged over the anchor rows,
/// and the gradient treats every margin as a constant.
pub fn margin_loss_image_side(
    s: &Matrix,
    n: usize,
    cfg: &LossConfig,
) -> Result<(f64, Matrix), LossError> {
    margin_loss_rows(s, s, n, cfg)
}

/// Margin loss anchored on caption columns.
///
/// Exact mirror of [`margin_loss_image_side`]: anchors are caption rows of
/// the transposed similarity matrix, candidates are images, and the same
/// role-based sets apply. Transposing the similarity matrix swaps the two
/// sides.
pub fn margin_loss_text_side(
    s: &Matrix,
    n: usize,
    cfg: &LossConfig,
) -> Result<(f64, Matrix), LossError> {
    let st = s.transpose();
    let (loss, grad_t) = margin_loss_rows(&st, &st, n, cfg)?;
    Ok((loss, grad_t.transpose()))
}

/// Image-side margin loss with margins pinned to a reference matrix.
///
/// Hinge arguments are evaluated at `s` while every pair's gap, margin
/// value, and cancellation decision come from `margin_ref`. With
/// `margin_ref = s` this is exactly [`margin_loss_image_side`]; with a
/// fixed reference it is the surrogate the analytic gradient differentiates,
/// which is what a finite-difference check must probe.
pub fn margin_loss_image_side_frozen(
    s: &Matrix,
    margin_ref: &Matrix,
    n: usize,
    cfg: &LossConfig,
) -> Result<(f64, Matrix), LossError> {
    margin_loss_rows(s, margin_ref, n, cfg)
}

/// Caption-side margin loss with margins pinned to a reference matrix.
pub fn margin_loss_text_side_frozen(
    s: &Matrix,
    margin_ref: &Matrix,
    n: usize,
    cfg: &LossConfig,
) -> Result<(f64, Matrix), LossError> {
    let st = s.transpose();
    let rt = margin_ref.transpose();
    let (loss, grad_t) = margin_loss_rows(&st, &rt, n, cfg)?;
    Ok((loss, grad_t.transpose()))
}

fn margin_loss_rows(
    s: &Matrix,
    margin_ref: &Matrix,
    n: usize,
    cfg: &LossConfig,
) -> Result<(f64, Matrix), LossError> {
    if cfg.margin_mode == MarginMode::None {
        return Err(LossError::InvalidMode);
    }
    let rows = 3 * n;
    if s.rows() != rows || s.cols() != rows {
        return Err(LossError::ShapeMismatch {
            context: "margin loss similarity shape",
            expected: rows,
            got: if s.rows() != rows { s.rows() } else { s.cols() },
        });
    }
    if margin_ref.rows() != rows || margin_ref.cols() != rows {
        return Err(LossError::ShapeMismatch {
            context: "margin reference shape",
            expected: rows,
            got: if margin_ref.rows() != rows {
                margin_ref.rows()
            } else {
                margin_ref.cols()
            },
        });
    }

    let row_scale = 1.0 / rows as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(rows, rows);
    for anchor in 0..rows {
        let sets =
            caption_sets_for_image(anchor, n).expect("anchor rows are in range by construction");
        for (ranked_up, ranked_down, coeff) in [
            (&sets.p, &sets.n_h, 1.0),
            (&sets.n_h, &sets.n_e, 1.0),
            (&sets.p, &sets.n_r, cfg.alpha),
        ] {
            if ranked_up.is_empty() || ranked_down.is_empty() {
                continue;
            }
            let w = row_scale * coeff / (ranked_up.len() * ranked_down.len()) as f64;
            for &j1 in ranked_up {
                for &j2 in ranked_down {
                    let d = margin_ref.get(anchor, j1) - margin_ref.get(anchor, j2);
                    let m = match cfg.margin_mode {
                        MarginMode::Fixed => cfg.m0,
                        // The cancellation branch sets the margin to the gap
                        // itself, which zeroes the term and its gradient; skip
                        // it outright so the zero is exact rather than a
                        // rounded difference.
                        MarginMode::Adaptive | MarginMode::AdaptiveInverse if d < cfg.beta => {
                            continue
                        }
                        MarginMode::Adaptive => adaptive_margin(d, cfg),
                        MarginMode::AdaptiveInverse => {
                            if d <= cfg.m0 {
                                ((d - cfg.beta) / (cfg.m0 - cfg.beta) * cfg.gamma + 1.0) * cfg.m0
                            } else {
                                (cfg.gamma + 1.0) * cfg.m0
                            }
                        }
                        MarginMode::None => unreachable!("rejected at entry"),
                    };
                    let arg = m + s.get(anchor, j2) - s.get(anchor, j1);
                    if arg > 0.0 {
                        total += w * arg;
                        *grad.row_mut(anchor).get_mut(j2).expect("set index in range") += w;
                        *grad.row_mut(anchor).get_mut(j1).expect("set index in range") -= w;
                    }
                }
            }
        }
    }
    Ok((total, grad))
}

/// Components of the total loss, before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Contrastive component.
    pub con: f64,
    /// Image-anchored margin component, unweighted.
    pub mar_img: f64,
    /// Caption-anchored margin component, unweighted.
    pub mar_txt: f64,
}

/// Total loss, its gradient, and the component breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    /// Contrastive plus `lambda` times both margin components.
    pub total: f64,
    /// Gradient of the total with respect to every similarity entry.
    pub grad: Matrix,
    /// Unweighted components.
    pub parts: LossParts,
}

/// Combined loss over a full role-layout batch.
///
/// Computes the contrastive component plus `lambda` times the two margin
/// components. With `lambda = 0` or margin mode `none` the margin components
/// are skipped and reported as zero.
pub fn total_loss(
    s: &Matrix,
    m: &AlignmentMatrix,
    n: usize,
    cfg: &LossConfig,
) -> Result<TotalLoss, LossError> {
    let (con, grad_con) = sigmoid_contrastive_loss(s, m, cfg.tau, cfg.b)?;
    if cfg.lambda == 0.0 || cfg.margin_mode == MarginMode::None {
        return Ok(TotalLoss {
            total: con,
            grad: grad_con,
            parts: LossParts {
                con,
                mar_img: 0.0,
                mar_txt: 0.0,
            },
        });
    }
    let (mar_img, grad_img) = margin_loss_image_side(s, n, cfg)?;
    let (mar_txt, grad_txt) = margin_loss_text_side(s, n, cfg)?;
    let mut grad = grad_con;
    for (g, (gi, gt)) in grad
        .data_mut()
        .iter_mut()
        .zip(grad_img.data().iter().zip(grad_txt.data()))
    {
        *g += cfg.lambda * (gi + gt);
    }
    Ok(TotalLoss {
        total: con + cfg.lambda * (mar_img + mar_txt),
        grad,
        parts: LossParts {
            con,
            mar_img,
            mar_txt,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::alignment_matrix;

    const TAU: f64 = 0.01;
    const B: f64 = -30.0;

    fn single_pair(s: f64, label: f64) -> (Matrix, AlignmentMatrix) {
        let sm = Matrix::from_vec(1, 1, vec![s]).unwrap();
        let labels = Matrix::from_vec(1, 1, vec![label]).unwrap();
        (sm, AlignmentMatrix::from_labels(labels).unwrap())
    }

    #[test]
    fn matched_pair_far_above_threshold_is_near_zero_loss() {
        let (s, m) = single_pair(0.5, 1.0);
        let (loss, _) = sigmoid_contrastive_loss(&s, &m, TAU, B).unwrap();
        assert!((loss - 2.0612e-9).abs() < 1e-13);
    }

    #[test]
    fn mismatched_pair_far_above_threshold_pays_the_logit() {
        let (s, m) = single_pair(0.5, -1.0);
        let (loss, _) = sigmoid_contrastive_loss(&s, &m, TAU, B).unwrap();
        assert!((loss - 20.0000000021).abs() < 1e-9);
    }

    #[test]
    fn matched_pair_at_threshold_costs_ln_two() {
        // s / tau + b = 0 exactly at s = 0.3.
        let (s, m) = single_pair(0.3, 1.0);
        let (loss, _) = sigmoid_contrastive_loss(&s, &m, TAU, B).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn full_block_matches_the_nine_term_hand_sum() {
        let m = alignment_matrix(1);
        let mut s = Matrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                s.set(i, j, if i == j { 0.9 } else { 0.1 });
            }
        }
        let (loss, _) = sigmoid_contrastive_loss(&s, &m, TAU, B).unwrap();
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let z = -m.get(i, j) * (s.get(i, j) / TAU + B);
                expected += (1.0 + z.exp()).ln();
            }
        }
        expected /= 3.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn contrastive_gradient_signs_follow_the_labels() {
        let m = alignment_matrix(1);
        let mut s = Matrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                s.set(i, j, 0.3 + 0.01 * (i as f64) - 0.01 * (j as f64));
            }
        }
        let (_, grad) = sigmoid_contrastive_loss(&s, &m, TAU, B).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                // Raising a positive pair's similarity lowers the loss, and
                // raising a negative pair's similarity raises it.
                if m.get(i, j) > 0.0 {
                    assert!(grad.get(i, j) < 0.0);
                } else {
                    assert!(grad.get(i, j) > 0.0);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = alignment_matrix(1);
        let s = Matrix::zeros(2, 3);
        assert!(matches!(
            sigmoid_contrastive_loss(&s, &m, TAU, B),
            Err(LossError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn adaptive_margin_branch_values() {
        let cfg = LossConfig::default();
        assert_eq!(adaptive_margin(-0.05, &cfg), -0.05);
        assert!((adaptive_margin(0.0, &cfg) - 0.006).abs() < 1e-12);
        assert!((adaptive_margin(-0.02, &cfg) - 0.01).abs() < 1e-12);
        assert!((adaptive_margin(0.005, &cfg) - 0.005).abs() < 1e-12);
        assert!((adaptive_margin(0.04, &cfg) - 0.005).abs() < 1e-12);
    }

    #[test]
    fn margin_mode_dispatch() {
        let fixed = LossConfig {
            margin_mode: MarginMode::Fixed,
            ..LossConfig::default()
        };
        for d in [-0.5, -0.02, 0.0, 0.003, 0.9] {
            assert_eq!(margin_for_mode(d, &fixed).unwrap(), 0.005);
        }

        let inverse = LossConfig {
            margin_mode: MarginMode::AdaptiveInverse,
            ..LossConfig::default()
        };
        assert!((margin_for_mode(-0.02, &inverse).unwrap() - 0.005).abs() < 1e-12);
        assert!((margin_for_mode(0.005, &inverse).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(margin_for_mode(-0.05, &inverse).unwrap(), -0.05);
        assert!((margin_for_mode(0.5, &inverse).unwrap() - 0.01).abs() < 1e-12);

        let none = LossConfig {
            margin_mode: MarginMode::None,
            lambda: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(margin_for_mode(0.0, &none), Err(LossError::InvalidMode));
    }

    #[test]
    fn single_group_margin_uses_only_hard_negative_pairs() {
        // With one group there are no other-group candidates, so only the
        // positives-vs-hard-negative comparisons can contribute.
        let cfg = LossConfig {
            margin_mode: MarginMode::Fixed,
            ..LossConfig::default()
        };
        let mut s = Matrix::zeros(3, 3);
        // Anchor 0: positives at columns 0 and 2 score 0.5, the hard
        // negative at column 1 scores 0.499, inside the margin.
        for i in 0..3 {
            s.set(i, 0, 0.5);
            s.set(i, 2, 0.5);
            s.set(i, 1, 0.499);
        }
        let (loss, _) = margin_loss_image_side(&s, 1, &cfg).unwrap();
        // Anchors 0 and 2 rank {0, 2} above {1}: hinge = 0.005 - 0.001 each,
        // averaged over |P| * |N_h| = 2 pairs. Anchor 1 ranks {1} above
        // {0, 2}: hinge = 0.005 + 0.001 each, averaged over 2 pairs.
        let expected = ((0.004 + 0.004) / 2.0 + (0.006 + 0.006) / 2.0 + (0.004 + 0.004) / 2.0) / 3.0;
        assert!((loss - expected).abs() < 1e-15);
    }

    #[test]
    fn adaptive_mode_cancels_every_low_gap_term_exactly() {
        for mode in [MarginMode::Adaptive, MarginMode::AdaptiveInverse] {
            let cfg = LossConfig {
                margin_mode: mode,
                ..LossConfig::default()
            };
            // Every ranked pair sees a gap of -0.1, far below beta = -0.02.
            let mut s = Matrix::zeros(3, 3);
            s.set(0, 0, 0.1);
            s.set(0, 1, 0.2);
            s.set(0, 2, 0.1);
            s.set(1, 1, 0.0);
            s.set(1, 0, 0.1);
            s.set(1, 2, 0.1);
            s.set(2, 0, 0.1);
            s.set(2, 1, 0.2);
            s.set(2, 2, 0.1);
            let (loss, grad) = margin_loss_image_side(&s, 1, &cfg).unwrap();
            assert_eq!(loss, 0.0, "mode {mode} must cancel mislabeled pairs");
            assert!(grad.data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn adaptive_mode_ignores_already_separated_pairs_exactly() {
        let cfg = LossConfig::default();
        // Gaps of 0.3 exceed m0 = 0.005 everywhere, for every anchor role.
        let mut s = Matrix::zeros(3, 3);
        s.set(0, 0, 0.5);
        s.set(0, 1, 0.2);
        s.set(0, 2, 0.5);
        s.set(1, 1, 0.5);
        s.set(1, 0, 0.2);
        s.set(1, 2, 0.2);
        s.set(2, 0, 0.5);
        s.set(2, 1, 0.2);
        s.set(2, 2, 0.5);
        let (loss, grad) = margin_loss_image_side(&s, 1, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn alpha_scales_only_the_real_negative_term() {
        // Build a 2-group matrix with all three term families active, then
        // check the loss is affine in alpha with a positive slope.
        let base = LossConfig {
            margin_mode: MarginMode::Fixed,
            ..LossConfig::default()
        };
        let mut s = Matrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                // Small deterministic spread keeps many hinges active.
                s.set(i, j, 0.3 + 0.001 * ((i * 7 + j * 3) % 5) as f64);
            }
        }
        let at = |alpha: f64| {
            let cfg = LossConfig { alpha, ..base.clone() };
            margin_loss_image_side(&s, 2, &cfg).unwrap().0
        };
        let l1 = at(1.0);
        let l3 = at(3.0);
        let l7 = at(7.0);
        let slope = (l3 - l1) / 2.0;
        assert!(slope > 0.0, "the real-negative term should be active");
        assert!((l7 - (l1 + 6.0 * slope)).abs() < 1e-14);
    }

    #[test]
    fn text_side_equals_image_side_on_transposed_input() {
        let cfg = LossConfig::default();
        let mut s = Matrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                s.set(i, j, 0.3 + 0.002 * ((i * 5 + j * 11) % 7) as f64 - 0.004);
            }
        }
        let st = s.transpose();
        let (img, gi) = margin_loss_image_side(&s, 2, &cfg).unwrap();
        let (txt, gt) = margin_loss_text_side(&st, 2, &cfg).unwrap();
        assert!((img - txt).abs() < 1e-15);
        assert_eq!(gi, gt.transpose());

        // Symmetric input with one group: the two sides coincide.
        let mut sym = Matrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let v = 0.3 + 0.001 * ((i + j) as f64);
                sym.set(i, j, v);
            }
        }
        let (a, _) = margin_loss_image_side(&sym, 1, &cfg).unwrap();
        let (b, _) = margin_loss_text_side(&sym, 1, &cfg).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn frozen_reference_equals_live_loss_at_the_reference_point() {
        let cfg = LossConfig::default();
        let mut s = Matrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                s.set(i, j, 0.3 + 0.003 * ((i * 3 + j) % 4) as f64 - 0.004);
            }
        }
        let live = margin_loss_image_side(&s, 2, &cfg).unwrap();
        let frozen = margin_loss_image_side_frozen(&s, &s, 2, &cfg).unwrap();
        assert_eq!(live, frozen);
    }

    #[test]
    fn total_loss_with_zero_lambda_is_contrastive_only() {
        let m = alignment_matrix(2);
        let mut s = Matrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                s.set(i, j, 0.25 + 0.01 * ((i + 2 * j) % 3) as f64);
            }
        }
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let out = total_loss(&s, &m, 2, &cfg).unwrap();
        let (con, grad_con) = sigmoid_contrastive_loss(&s, &m, cfg.tau, cfg.b).unwrap();
        assert_eq!(out.total, con);
        assert_eq!(out.grad, grad_con);
        assert_eq!(out.parts.mar_img, 0.0);
        assert_eq!(out.parts.mar_txt, 0.0);
    }

    #[test]
    fn margin_mode_none_ignores_lambda() {
        let m = alignment_matrix(1);
        let mut s = Matrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                s.set(i, j, 0.3 + 0.002 * ((i * 3 + j) % 5) as f64);
            }
        }
        let with_weight = LossConfig {
            margin_mode: MarginMode::None,
            lambda: 0.7,
            ..LossConfig::default()
        };
        assert!(with_weight.validate().is_ok());
        let out = total_loss(&s, &m, 1, &with_weight).unwrap();
        let contrastive_only = total_loss(
            &s,
            &m,
            1,
            &LossConfig {
                lambda: 0.0,
                ..with_weight.clone()
            },
        )
        .unwrap();
        assert_eq!(out.total, contrastive_only.total);
        assert_eq!(out.grad, contrastive_only.grad);
        assert_eq!(out.parts.mar_img, 0.0);
        assert_eq!(out.parts.mar_txt, 0.0);
    }

    #[test]
    fn total_loss_recomposes_from_its_parts() {
        let m = alignment_matrix(2);
        let mut s = Matrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                s.set(i, j, 0.29 + 0.004 * ((i * 7 + j * 5) % 6) as f64);
            }
        }
        let cfg = LossConfig::default();
        let out = total_loss(&s, &m, 2, &cfg).unwrap();
        let recomposed = out.parts.con + cfg.lambda * (out.parts.mar_img + out.parts.mar_txt);
        assert!((out.total - recomposed).abs() < 1e-12);
    }

    #[test]
    fn raising_a_positive_similarity_never_raises_the_margin_loss() {
        let cfg = LossConfig {
            margin_mode: MarginMode::Fixed,
            ..LossConfig::default()
        };
        let mut s = Matrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                s.set(i, j, 0.3 + 0.002 * ((i * 3 + j * 7) % 5) as f64);
            }
        }
        let (base, _) = margin_loss_image_side(&s, 2, &cfg).unwrap();
        // Anchor 0 is real for group 0, so columns 0 and 4 are positives.
        for &j1 in &[0usize, 4] {
            let mut raised = s.clone();
            raised.set(0, j1, raised.get(0, j1) + 0.003);
            let (l, _) = margin_loss_image_side(&raised, 2, &cfg).unwrap();
            assert!(l <= base + 1e-15, "raising a positive raised the loss");
        }
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let good = LossConfig::default();
        assert!(good.validate().is_ok());
        for bad in [
            LossConfig { tau: 0.0, ..good.clone() },
            LossConfig { m0: -0.001, ..good.clone() },
            LossConfig { beta: 0.01, ..good.clone() },
            LossConfig { alpha: 0.5, ..good.clone() },
            LossConfig { lambda: -0.1, ..good.clone() },
            LossConfig { gamma: -1.0, ..good.clone() },
        ] {
            assert!(bad.validate().is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in [
            MarginMode::None,
            MarginMode::Fixed,
            MarginMode::Adaptive,
            MarginMode::AdaptiveInverse,
        ] {
            assert_eq!(MarginMode::parse(mode.name()), Some(mode));
        }
        assert_eq!(MarginMode::parse("softmax"), None);
    }
}
