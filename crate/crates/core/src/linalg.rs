//! Small dense helpers shared by the estimation modules.

use nalgebra::{DMatrix, DVector};

/// Relative pivot threshold below which a column is treated as linearly dependent.
pub const RANK_TOL: f64 = 1e-10;

/// Thin QR of a tall matrix by modified Gram-Schmidt with column pivoting
/// and one reorthogonalization pass.
///
/// Columns whose residual norm falls below `rel_tol` times the leading pivot
/// are dropped instead of factored.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// n × rank orthonormal basis.
    pub q: DMatrix<f64>,
    /// rank × rank upper triangular factor for the kept columns, in pivot order.
    pub r: DMatrix<f64>,
    /// Original indices of the kept columns, in pivot order.
    pub kept: Vec<usize>,
    /// Original indices of dropped columns.
    pub dropped: Vec<usize>,
}

impl PivotedQr {
    pub fn new(a: &DMatrix<f64>, rel_tol: f64) -> Self {
        let (n, m) = a.shape();
        let mut work = a.clone();
        let mut remaining: Vec<usize> = (0..m).collect();
        let mut q_cols: Vec<DVector<f64>> = Vec::new();
        let mut kept = Vec::new();
        // r entries indexed by (pivot step, original column)
        let mut r_full = DMatrix::<f64>::zeros(m.min(n), m);
        let mut lead = 0.0_f64;

        while !remaining.is_empty() && q_cols.len() < n {
            let (pos, norm) = remaining
                .iter()
                .enumerate()
                .map(|(pos, &j)| (pos, work.column(j).norm()))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if q_cols.is_empty() {
                lead = norm;
            }
            if !(norm > rel_tol * lead) || norm == 0.0 {
                break;
            }
            let j = remaining.remove(pos);
            let step = q_cols.len();
            let qj: DVector<f64> = work.column(j) / norm;
            r_full[(step, j)] = norm;
            for &other in &remaining {
                // two passes of projection for numerical orthogonality
                let mut col = work.column(other).clone_owned();
                let c1 = qj.dot(&col);
                col.axpy(-c1, &qj, 1.0);
                let c2 = qj.dot(&col);
                col.axpy(-c2, &qj, 1.0);
                r_full[(step, other)] = c1 + c2;
                work.set_column(other, &col);
            }
            q_cols.push(qj);
            kept.push(j);
        }

        let rank = q_cols.len();
        let q = if rank == 0 {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&q_cols)
        };
        let mut r = DMatrix::zeros(rank, rank);
        for (a_idx, _) in kept.iter().enumerate() {
            for (b_idx, &col) in kept.iter().enumerate() {
                r[(a_idx, b_idx)] = r_full[(a_idx, col)];
            }
        }
        let mut dropped = remaining;
        dropped.sort_unstable();
        PivotedQr { q, r, kept, dropped }
    }

    pub fn rank(&self) -> usize {
        self.kept.len()
    }
}

/// Multiplies each row of `a` by the matching entry of `scale`.
pub fn scale_rows(a: &DMatrix<f64>, scale: &DVector<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= scale[i];
    }
    out
}

/// Weighted least squares fit of `z` on the columns of `design` with
/// diagonal weights `w`; dependent columns get a zero coefficient.
pub fn weighted_least_squares(design: &DMatrix<f64>, z: &DVector<f64>, w: &DVector<f64>) -> (DVector<f64>, Vec<usize>) {
    let sqrt_w = w.map(f64::sqrt);
    let a = scale_rows(design, &sqrt_w);
    let zt = z.component_mul(&sqrt_w);
    let qr = PivotedQr::new(&a, RANK_TOL);
    let mut coef = DVector::zeros(design.ncols());
    if qr.rank() > 0 {
        let rhs = qr.q.transpose() * &zt;
        let sol =
            qr.r.solve_upper_triangular(&rhs)
                .expect("pivoted factor has nonzero diagonal");
        for (idx, &col) in qr.kept.iter().enumerate() {
            coef[col] = sol[idx];
        }
    }
    (coef, qr.dropped)
}

/// `a' diag(w) b` without forming the diagonal matrix.
pub fn weighted_cross(a: &DMatrix<f64>, w: &DVector<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * scale_rows(b, w)
}

/// Horizontal concatenation of column blocks with a common row count.
pub fn hstack(blocks: &[&DMatrix<f64>], nrows: usize) -> DMatrix<f64> {
    let ncols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(nrows, ncols);
    let mut at = 0;
    for b in blocks {
        debug_assert_eq!(b.nrows(), nrows);
        out.columns_mut(at, b.ncols()).copy_from(b);
        at += b.ncols();
    }
    out
}

/// Largest absolute entry, zero for empty input.
pub fn max_abs(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// ‖new − old‖∞ / max(‖old‖∞, 1).
pub fn relative_change(new: &[f64], old: &[f64]) -> f64 {
    debug_assert_eq!(new.len(), old.len());
    let diff = max_abs(new.iter().zip(old).map(|(a, b)| a - b));
    diff / max_abs(old.iter().copied()).max(1.0)
}
