//! Batch assembly, ground-truth alignment labels, and the stratified index
//! sets the margin loss ranks against.
//!
//! A batch of `n` sample groups expands into `3n` image rows and `3n`
//! caption rows in a fixed role layout: rows `[0, n)` are real, `[n, 2n)`
//! are synthetic negatives, and `[2n, 3n)` are synthetic positives, with
//! group `g` at offset `g` inside each block. Row `role * n + g` of the
//! image matrix and of the caption matrix always refer to the same group.
//!
//! Within one group the five positive image-caption role pairs are
//! (real, real), (sn, sn), (sp, sp), (real, sp), and (sp, real); every other
//! same-group pair and every cross-group pair is a negative.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::Matrix;
use crate::toyworld::SampleGroup;

/// Errors produced by batch assembly and index-set queries.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum BatchError {
    /// Sample groups disagree on vector dimensions, or no groups were given.
    #[error("batch dimension mismatch: {0}")]
    DimMismatch(String),
    /// A row index outside `[0, 3n)` was queried.
    #[error("row {row} out of range for a batch of {n} groups ({rows} rows)")]
    IndexOutOfRange { row: usize, n: usize, rows: usize },
    /// An explicit label matrix held a value other than `-1` or `+1`.
    #[error("alignment labels must be -1 or +1, found {0}")]
    InvalidLabel(f64),
}

/// The three roles a row can play in the fixed batch layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Real,
    SynNeg,
    SynPos,
}

/// All roles in block order.
pub const ALL_ROLES: [Role; 3] = [Role::Real, Role::SynNeg, Role::SynPos];

/// Decomposes a batch row index into its role and group.
pub fn role_of_row(row: usize, n: usize) -> Result<(Role, usize), BatchError> {
    if n == 0 || row >= 3 * n {
        return Err(BatchError::IndexOutOfRange {
            row,
            n,
            rows: 3 * n,
        });
    }
    Ok((ALL_ROLES[row / n], row % n))
}

/// Batch row index of `(role, group)`.
pub fn row_of_role(role: Role, group: usize, n: usize) -> usize {
    let block = match role {
        Role::Real => 0,
        Role::SynNeg => 1,
        Role::SynPos => 2,
    };
    block * n + group
}

/// A fixed-layout batch of image and caption feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    n: usize,
    images: Matrix,
    captions: Matrix,
}

impl Batch {
    /// Number of sample groups.
    pub fn n(&self) -> usize {
        self.n
    }

    /// All `3n` image rows in role-block order.
    pub fn images(&self) -> &Matrix {
        &self.images
    }

    /// All `3n` caption rows in role-block order.
    pub fn captions(&self) -> &Matrix {
        &self.captions
    }
}

/// Stacks `n` sample groups into the fixed role layout.
pub fn build_batch(groups: &[SampleGroup]) -> Result<Batch, BatchError> {
    let n = groups.len();
    if n == 0 {
        return Err(BatchError::DimMismatch("batch needs at least one group".into()));
    }
    let d_i = groups[0].img_r.len();
    let d_t = groups[0].cap_r.len();
    for (g, group) in groups.iter().enumerate() {
        let image_dims = [group.img_r.len(), group.img_sn.len(), group.img_sp.len()];
        let caption_dims = [group.cap_r.len(), group.cap_sn.len(), group.cap_sp.len()];
        if image_dims != [d_i; 3] || caption_dims != [d_t; 3] {
            return Err(BatchError::DimMismatch(format!(
                "group {g} has vector dims {image_dims:?}/{caption_dims:?}, expected {d_i}/{d_t}"
            )));
        }
    }

    let mut images = Matrix::zeros(3 * n, d_i);
    let mut captions = Matrix::zeros(3 * n, d_t);
    for (g, group) in groups.iter().enumerate() {
        for (role, img, cap) in [
            (Role::Real, &group.img_r, &group.cap_r),
            (Role::SynNeg, &group.img_sn, &group.cap_sn),
            (Role::SynPos, &group.img_sp, &group.cap_sp),
        ] {
            let row = row_of_role(role, g, n);
            images.row_mut(row).copy_from_slice(img);
            captions.row_mut(row).copy_from_slice(cap);
        }
    }
    Ok(Batch {
        n,
        images,
        captions,
    })
}

/// Ground-truth match labels over a `3n x 3n` batch, entries in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    m: Matrix,
}

impl AlignmentMatrix {
    /// Label of the pair (image row `i`, caption row `j`).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m.get(i, j)
    }

    /// The labels as a dense matrix.
    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    pub fn rows(&self) -> usize {
        self.m.rows()
    }

    /// Labels for a batch that carries only the `n` real pairs: positive on
    /// the diagonal, negative elsewhere.
    pub fn real_pairs_only(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, if i == j { 1.0 } else { -1.0 });
            }
        }
        AlignmentMatrix { m }
    }

    /// Wraps an explicit label matrix; every entry must be `-1` or `+1`.
    pub fn from_labels(m: Matrix) -> Result<Self, BatchError> {
        if let Some(bad) = m.data().iter().find(|v| v.abs() != 1.0) {
            return Err(BatchError::InvalidLabel(*bad));
        }
        Ok(AlignmentMatrix { m })
    }
}

/// Builds the `3n x 3n` alignment labels for the fixed role layout.
///
/// Within each group the 3x3 role block (image roles real/sn/sp by caption
/// roles real/sn/sp) is `[[+1, -1, +1], [-1, +1, -1], [+1, -1, +1]]`, five
/// positives per group; every cross-group entry is `-1`.
pub fn alignment_matrix(n: usize) -> AlignmentMatrix {
    assert!(n >= 1, "alignment matrix needs at least one group");
    let mut m = Matrix::zeros(3 * n, 3 * n);
    for v in m.data_mut() {
        *v = -1.0;
    }
    for g in 0..n {
        for (img_role, cap_role) in [
            (Role::Real, Role::Real),
            (Role::SynNeg, Role::SynNeg),
            (Role::SynPos, Role::SynPos),
            (Role::Real, Role::SynPos),
            (Role::SynPos, Role::Real),
        ] {
            let i = row_of_role(img_role, g, n);
            let j = row_of_role(cap_role, g, n);
            m.set(i, j, 1.0);
        }
    }
    AlignmentMatrix { m }
}

/// Stratified candidate sets for one anchor row, as ascending index lists.
///
/// `p` holds the anchor's positive counterparts, `n_h` its same-group hard
/// negatives, `n_e` every row of the other groups, and `n_r` just the real
/// rows of the other groups (`n_r` is a subset of `n_e`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSets {
    pub p: Vec<usize>,
    pub n_h: Vec<usize>,
    pub n_e: Vec<usize>,
    pub n_r: Vec<usize>,
}

/// Candidate caption sets for an image anchor row.
///
/// For a real or synthetic-positive image of group `g`: `p` is the group's
/// real and synthetic-positive captions, `n_h` its synthetic-negative
/// caption. For a synthetic-negative image the roles swap: `p` is the
/// synthetic-negative caption and `n_h` the other two. `n_e` and `n_r` are
/// the other groups' captions as described on [`PairSets`].
pub fn caption_sets_for_image(row: usize, n: usize) -> Result<PairSets, BatchError> {
    sets_for_anchor(row, n)
}

/// Candidate image sets for a caption anchor row.
///
/// Mirror of [`caption_sets_for_image`] with image and caption roles
/// swapped; the role layout is identical on both sides, so the index sets
/// coincide with the image-side construction.
pub fn image_sets_for_caption(row: usize, n: usize) -> Result<PairSets, BatchError> {
    sets_for_anchor(row, n)
}

fn sets_for_anchor(row: usize, n: usize) -> Result<PairSets, BatchError> {
    let (role, g) = role_of_row(row, n)?;
    let real = row_of_role(Role::Real, g, n);
    let sn = row_of_role(Role::SynNeg, g, n);
    let sp = row_of_role(Role::SynPos, g, n);
    let (p, n_h) = match role {
        Role::Real | Role::SynPos => (vec![real, sp], vec![sn]),
        Role::SynNeg => (vec![sn], vec![real, sp]),
    };
    let mut n_e = Vec::with_capacity(3 * (n - 1));
    let mut n_r = Vec::with_capacity(n - 1);
    for j in 0..3 * n {
        if j % n != g {
            n_e.push(j);
            if j < n {
                n_r.push(j);
            }
        }
    }
    Ok(PairSets { p, n_h, n_e, n_r })
}
