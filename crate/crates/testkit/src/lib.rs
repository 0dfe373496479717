//! Verification helpers shared by the test suites.
//!
//! The loss oracles here restate the loss definitions as plain nested loops
//! with their own index arithmetic and their own margin formulas, so the
//! production implementations can be checked against an independently
//! written reading of the same definitions. Alongside them live central
//! finite-difference helpers, guard-band samplers that keep random inputs
//! away from hinge and branch kinks, and a small Gauss-Jordan inverse for
//! constructing closed-form reference encoders.
//!
//! Everything is deterministic: samplers take explicit seeds and retry on
//! a fixed schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparcl_core::batching::AlignmentMatrix;
use sparcl_core::losses::{
    margin_loss_image_side_frozen, margin_loss_text_side_frozen, sigmoid_contrastive_loss,
    LossConfig, MarginMode,
};
use sparcl_core::numkit::Matrix;
use sparcl_core::trainer::{encode, EncoderParams, Side};

/// Deterministic generator for test data.
pub fn test_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Matrix with entries drawn uniformly from `(-scale, scale)`.
pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.gen_range(-scale..scale);
    }
    m
}

/// Largest absolute entry difference between two equal-shaped matrices.
pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.rows(), b.rows(), "row mismatch in max_abs_diff");
    assert_eq!(a.cols(), b.cols(), "col mismatch in max_abs_diff");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest per-entry relative error, with the denominator floored at 1.
///
/// The floor makes the comparison absolute for sub-unit entries, which is
/// where central differences bottom out in cancellation noise, and relative
/// for large entries.
pub fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.rows(), b.rows(), "row mismatch in max_rel_err");
    assert_eq!(a.cols(), b.cols(), "col mismatch in max_rel_err");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Central finite differences of a scalar function over every matrix entry.
pub fn fd_grad_matrix<F: FnMut(&Matrix) -> f64>(mut f: F, x: &Matrix, h: f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let mut plus = x.clone();
            plus.set(i, j, x.get(i, j) + h);
            let mut minus = x.clone();
            minus.set(i, j, x.get(i, j) - h);
            grad.set(i, j, (f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    grad
}

// ---------------------------------------------------------------------------
// Loss oracles
// ---------------------------------------------------------------------------

/// Contrastive loss and gradient written directly from the definition.
///
/// No overflow guards: within the similarity and temperature ranges the
/// tests use, `exp` stays finite, so the naive formulas are exact enough to
/// serve as an oracle.
pub fn oracle_contrastive(s: &Matrix, labels: &Matrix, tau: f64, b: f64) -> (f64, Matrix) {
    assert_eq!(s.rows(), labels.rows());
    assert_eq!(s.cols(), labels.cols());
    let rows = s.rows() as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(s.rows(), s.cols());
    for i in 0..s.rows() {
        for j in 0..s.cols() {
            let label = labels.get(i, j);
            let z = -label * (s.get(i, j) / tau + b);
            total += (1.0 + z.exp()).ln() / rows;
            let sig = 1.0 / (1.0 + (-z).exp());
            grad.set(i, j, (-label / tau) * sig / rows);
        }
    }
    (total, grad)
}

/// Margin value restated from the schedule definitions.
fn oracle_margin_value(d: f64, cfg: &LossConfig) -> Option<f64> {
    match cfg.margin_mode {
        MarginMode::None => None,
        MarginMode::Fixed => Some(cfg.m0),
        MarginMode::Adaptive => {
            if d < cfg.beta {
                // Cancelled pair: the margin equals the gap, zeroing the
                // term, and the schedule is a constant during
                // differentiation, so neither loss nor gradient receives a
                // contribution.
                None
            } else if d <= cfg.m0 {
                Some(cfg.m0 * (1.0 + cfg.gamma * (cfg.m0 - d) / (cfg.m0 - cfg.beta)))
            } else {
                Some(cfg.m0)
            }
        }
        MarginMode::AdaptiveInverse => {
            if d < cfg.beta {
                None
            } else if d <= cfg.m0 {
                Some(cfg.m0 * (1.0 + cfg.gamma * (d - cfg.beta) / (cfg.m0 - cfg.beta)))
            } else {
                Some(cfg.m0 * (1.0 + cfg.gamma))
            }
        }
    }
}

/// The three ranked-pair families of one anchor row, derived from the role
/// layout with local index arithmetic.
fn oracle_families(anchor: usize, n: usize) -> Vec<(Vec<usize>, Vec<usize>, bool)> {
    let rows = 3 * n;
    let group = anchor % n;
    let role = anchor / n;
    let (positives, hard) = if role == 1 {
        (vec![n + group], vec![group, 2 * n + group])
    } else {
        (vec![group, 2 * n + group], vec![n + group])
    };
    let easy: Vec<usize> = (0..rows).filter(|j| j % n != group).collect();
    let real_others: Vec<usize> = (0..n).filter(|&j| j != group).collect();
    vec![
        (positives.clone(), hard.clone(), false),
        (hard, easy, false),
        (positives, real_others, true),
    ]
}

/// Image-anchored margin loss and gradient written from the definition.
pub fn oracle_margin_image(s: &Matrix, n: usize, cfg: &LossConfig) -> (f64, Matrix) {
    let rows = 3 * n;
    assert_eq!(s.rows(), rows);
    assert_eq!(s.cols(), rows);
    let mut total = 0.0;
    let mut grad = Matrix::zeros(rows, rows);
    for anchor in 0..rows {
        for (ups, downs, weighted) in oracle_families(anchor, n) {
            if ups.is_empty() || downs.is_empty() {
                continue;
            }
            let coeff = if weighted { cfg.alpha } else { 1.0 };
            let w = coeff / ((ups.len() * downs.len()) as f64 * rows as f64);
            for &j1 in &ups {
                for &j2 in &downs {
                    let d = s.get(anchor, j1) - s.get(anchor, j2);
                    let Some(m) = oracle_margin_value(d, cfg) else {
                        continue;
                    };
                    let arg = m + s.get(anchor, j2) - s.get(anchor, j1);
                    if arg > 0.0 {
                        total += w * arg;
                        grad.set(anchor, j2, grad.get(anchor, j2) + w);
                        grad.set(anchor, j1, grad.get(anchor, j1) - w);
                    }
                }
            }
        }
    }
    (total, grad)
}

/// Caption-anchored margin loss and gradient written from the definition.
///
/// Anchors run over caption columns and candidates over image rows, reading
/// the similarity matrix directly without transposing it.
pub fn oracle_margin_text(s: &Matrix, n: usize, cfg: &LossConfig) -> (f64, Matrix) {
    let rows = 3 * n;
    assert_eq!(s.rows(), rows);
    assert_eq!(s.cols(), rows);
    let mut total = 0.0;
    let mut grad = Matrix::zeros(rows, rows);
    for anchor in 0..rows {
        for (ups, downs, weighted) in oracle_families(anchor, n) {
            if ups.is_empty() || downs.is_empty() {
                continue;
            }
            let coeff = if weighted { cfg.alpha } else { 1.0 };
            let w = coeff / ((ups.len() * downs.len()) as f64 * rows as f64);
            for &i1 in &ups {
                for &i2 in &downs {
                    let d = s.get(i1, anchor) - s.get(i2, anchor);
                    let Some(m) = oracle_margin_value(d, cfg) else {
                        continue;
                    };
                    let arg = m + s.get(i2, anchor) - s.get(i1, anchor);
                    if arg > 0.0 {
                        total += w * arg;
                        grad.set(i2, anchor, grad.get(i2, anchor) + w);
                        grad.set(i1, anchor, grad.get(i1, anchor) - w);
                    }
                }
            }
        }
    }
    (total, grad)
}

/// Combined loss and gradient from the oracles above.
pub fn oracle_total(s: &Matrix, labels: &Matrix, n: usize, cfg: &LossConfig) -> (f64, Matrix) {
    let (con, mut grad) = oracle_contrastive(s, labels, cfg.tau, cfg.b);
    if cfg.lambda == 0.0 {
        return (con, grad);
    }
    let (mi, gi) = oracle_margin_image(s, n, cfg);
    let (mt, gt) = oracle_margin_text(s, n, cfg);
    for i in 0..grad.rows() {
        for j in 0..grad.cols() {
            let v = grad.get(i, j) + cfg.lambda * (gi.get(i, j) + gt.get(i, j));
            grad.set(i, j, v);
        }
    }
    (con + cfg.lambda * (mi + mt), grad)
}

// ---------------------------------------------------------------------------
// Frozen surrogates for finite differences
// ---------------------------------------------------------------------------

/// Total loss with every margin pinned to `margin_ref`.
///
/// This is the scalar the analytic gradient differentiates: margins and
/// cancellation decisions come from the reference matrix and stay constant
/// while `s` varies. At `s = margin_ref` it equals the live total loss.
pub fn frozen_total(
    s: &Matrix,
    margin_ref: &Matrix,
    labels: &AlignmentMatrix,
    n: usize,
    cfg: &LossConfig,
) -> f64 {
    let (con, _) = sigmoid_contrastive_loss(s, labels, cfg.tau, cfg.b)
        .expect("surrogate shapes are valid by construction");
    if cfg.lambda == 0.0 {
        return con;
    }
    let (mi, _) = margin_loss_image_side_frozen(s, margin_ref, n, cfg)
        .expect("surrogate shapes are valid by construction");
    let (mt, _) = margin_loss_text_side_frozen(s, margin_ref, n, cfg)
        .expect("surrogate shapes are valid by construction");
    con + cfg.lambda * (mi + mt)
}

/// Frozen-margin total loss as a function of the two weight matrices.
///
/// Encodes both sides with the given weights, scores similarities, and
/// evaluates [`frozen_total`] against the fixed reference. Finite
/// differences over weight entries probe exactly the surrogate whose
/// gradient the trainer computes.
#[allow(clippy::too_many_arguments)]
pub fn frozen_total_from_weights(
    w_img: &Matrix,
    w_txt: &Matrix,
    images: &Matrix,
    captions: &Matrix,
    margin_ref: &Matrix,
    labels: &AlignmentMatrix,
    n: usize,
    cfg: &LossConfig,
) -> f64 {
    let params = EncoderParams {
        w_img: w_img.clone(),
        w_txt: w_txt.clone(),
    };
    let u_img = encode(&params, images, Side::Image).expect("test weights keep rows nonzero");
    let u_txt = encode(&params, captions, Side::Text).expect("test weights keep rows nonzero");
    let s = u_img
        .matmul(&u_txt.transpose())
        .expect("embedding dims agree");
    frozen_total(&s, margin_ref, labels, n, cfg)
}

// ---------------------------------------------------------------------------
// Guard-band sampling
// ---------------------------------------------------------------------------

/// True when every ranked pair of every anchor sits clear of the hinge and
/// schedule kinks by more than `band`, on both the image and caption sides.
pub fn margin_guards_ok(s: &Matrix, n: usize, cfg: &LossConfig, band: f64) -> bool {
    if cfg.margin_mode == MarginMode::None {
        return true;
    }
    let adaptive = matches!(
        cfg.margin_mode,
        MarginMode::Adaptive | MarginMode::AdaptiveInverse
    );
    for anchor in 0..3 * n {
        for (ups, downs, _) in oracle_families(anchor, n) {
            for &j1 in &ups {
                for &j2 in &downs {
                    for (s1, s2) in [
                        (s.get(anchor, j1), s.get(anchor, j2)),
                        (s.get(j1, anchor), s.get(j2, anchor)),
                    ] {
                        let d = s1 - s2;
                        if adaptive {
                            if (d - cfg.beta).abs() <= band || (d - cfg.m0).abs() <= band {
                                return false;
                            }
                            if d < cfg.beta {
                                continue;
                            }
                        }
                        let m = oracle_margin_value(d, cfg)
                            .expect("mode none was handled above");
                        if (m + s2 - s1).abs() <= band {
                            return false;
                        }
                    }
                }
            }
        }
    }
    true
}

/// Random similarity matrix whose every ranked pair clears the kink guard
/// band, found by deterministic resampling.
pub fn guarded_similarity(seed: u64, n: usize, cfg: &LossConfig, band: f64) -> Matrix {
    for attempt in 0..10_000u64 {
        let mut rng = test_rng(seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        let s = random_matrix(&mut rng, 3 * n, 3 * n, 0.35);
        if margin_guards_ok(&s, n, cfg, band) {
            return s;
        }
    }
    panic!("no guarded similarity matrix found for seed {seed}, n {n}");
}

// ---------------------------------------------------------------------------
// Dense inverse for reference encoders
// ---------------------------------------------------------------------------

/// Gauss-Jordan inverse with partial pivoting; `None` when a pivot falls
/// below `1e-12`.
pub fn invert_matrix(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return None;
    }
    let mut work = a.clone();
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        inv.set(i, i, 1.0);
    }
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| {
                work.get(r1, col)
                    .abs()
                    .total_cmp(&work.get(r2, col).abs())
            })
            .expect("column range is never empty");
        if work.get(pivot_row, col).abs() < 1e-12 {
            return None;
        }
        if pivot_row != col {
            for j in 0..n {
                let tmp = work.get(col, j);
                work.set(col, j, work.get(pivot_row, j));
                work.set(pivot_row, j, tmp);
                let tmp = inv.get(col, j);
                inv.set(col, j, inv.get(pivot_row, j));
                inv.set(pivot_row, j, tmp);
            }
        }
        let pivot = work.get(col, col);
        for j in 0..n {
            work.set(col, j, work.get(col, j) / pivot);
            inv.set(col, j, inv.get(col, j) / pivot);
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = work.get(row, col);
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                work.set(row, j, work.get(row, j) - factor * work.get(col, j));
                inv.set(row, j, inv.get(row, j) - factor * inv.get(col, j));
            }
        }
    }
    Some(inv)
}
