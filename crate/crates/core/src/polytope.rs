//! Vertex enumeration for small H-polytopes `{x | G x <= c}`.
//!
//! Enumerates every `n`-subset of rows, so it is only meant for desk-scale
//! sets (a handful of dimensions, a few dozen rows).

use nalgebra::{DMatrix, DVector};

const FEAS_TOL: f64 = 1e-9;

/// Calls `f` with every `k`-subset of `0..n` in lexicographic order.
pub fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// All vertices of `{x | G x <= c}`, deduplicated, in discovery order.
pub fn vertices(g: &DMatrix<f64>, c: &DVector<f64>) -> Vec<DVector<f64>> {
    let (m, n) = g.shape();
    let mut out: Vec<DVector<f64>> = Vec::new();
    if n == 0 {
        return out;
    }
    for_each_subset(m, n, |rows| {
        let a = DMatrix::from_fn(n, n, |i, j| g[(rows[i], j)]);
        let rhs = DVector::from_fn(n, |i, _| c[rows[i]]);
        let Some(x) = a.lu().solve(&rhs) else { return };
        if !x.iter().all(|v| v.is_finite()) {
            return;
        }
        let slack = c - g * &x;
        let scale = 1.0 + x.amax();
        if slack.iter().all(|s| *s >= -FEAS_TOL * scale) && !out.iter().any(|v| (v - &x).amax() <= 1e-9 * scale) {
            out.push(x);
        }
    });
    out
}

/// True when the recession cone `{d | G d <= 0}` is `{0}`.
pub fn is_bounded(g: &DMatrix<f64>) -> bool {
    let n = g.ncols();
    let m = g.nrows();
    let mut gb = DMatrix::zeros(m + 2 * n, n);
    gb.view_mut((0, 0), (m, n)).copy_from(g);
    let mut cb = DVector::zeros(m + 2 * n);
    for i in 0..n {
        gb[(m + 2 * i, i)] = 1.0;
        gb[(m + 2 * i + 1, i)] = -1.0;
        cb[m + 2 * i] = 1.0;
        cb[m + 2 * i + 1] = 1.0;
    }
    vertices(&gb, &cb).iter().all(|v| v.amax() <= 1e-9)
}

/// Axis-aligned bounding box of a vertex set as `(lo, hi)`.
pub fn bounding_box(verts: &[DVector<f64>]) -> Option<(DVector<f64>, DVector<f64>)> {
    let first = verts.first()?;
    let mut lo = first.clone();
    let mut hi = first.clone();
    for v in &verts[1..] {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    Some((lo, hi))
}
