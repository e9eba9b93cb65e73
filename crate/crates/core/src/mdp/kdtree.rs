//! Static kd-tree for nearest-covariance lookup under the Frobenius norm.

use crate::psd::CovMatrix;

/// Coordinates whose Euclidean distance equals the Frobenius distance of the matrices.
pub(crate) fn features(c: &CovMatrix) -> Vec<f64> {
    let d = c.dim();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        out.push(c.get(i, i));
        for j in i + 1..d {
            out.push(c.get(i, j) * std::f64::consts::SQRT_2);
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
pub(crate) struct KdTree {
    dim: usize,
    /// Flattened feature vectors, in tree order.
    coords: Vec<f64>,
    /// Caller ids, in tree order.
    ids: Vec<usize>,
    /// Split axis of the node stored at each position.
    axes: Vec<u8>,
}

impl KdTree {
    pub fn build(dim: usize, points: Vec<(usize, Vec<f64>)>) -> Self {
        let mut pts = points;
        let n = pts.len();
        let mut axes = vec![0u8; n];
        Self::build_rec(dim, &mut pts, &mut axes, 0);
        let mut coords = Vec::with_capacity(n * dim);
        let mut ids = Vec::with_capacity(n);
        for (id, f) in pts {
            coords.extend_from_slice(&f);
            ids.push(id);
        }
        Self { dim, coords, ids, axes }
    }

    fn build_rec(dim: usize, pts: &mut [(usize, Vec<f64>)], axes: &mut [u8], _depth: usize) {
        if pts.len() <= 1 {
            return;
        }
        let mut axis = 0;
        let mut spread = -1.0;
        for k in 0..dim {
            let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.1[k]), h.max(p.1[k])));
            if hi - lo > spread {
                spread = hi - lo;
                axis = k;
            }
        }
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |a, b| a.1[axis].total_cmp(&b.1[axis]).then(a.0.cmp(&b.0)));
        axes[mid] = axis as u8;
        let (left, right) = pts.split_at_mut(mid);
        let (laxes, raxes) = axes.split_at_mut(mid);
        Self::build_rec(dim, left, laxes, _depth + 1);
        Self::build_rec(dim, &mut right[1..], &mut raxes[1..], _depth + 1);
    }

    /// Nearest stored point as (id, squared distance); ties go to the lower id.
    pub fn nearest(&self, q: &[f64]) -> Option<(usize, f64)> {
        if self.ids.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.ids.len(), &mut best);
        Some(best)
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    fn search(&self, q: &[f64], lo: usize, hi: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = self.point(mid);
        let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        let id = self.ids[mid];
        if d2 < best.1 || (d2 == best.1 && id < best.0) {
            *best = (id, d2);
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, best);
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}
