//! Minimal dense row-major matrices for the toy model.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec size");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_row_vec(&mut self, v: &[f64]) {
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(v) {
                *a += b;
            }
        }
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn col_means(&self) -> Vec<f64> {
        let inv = 1.0 / self.rows as f64;
        self.col_sums().into_iter().map(|v| v * inv).collect()
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn cols_slice(&self, start: usize, width: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    pub fn set_cols(&mut self, start: usize, src: &Mat) {
        for r in 0..self.rows {
            self.row_mut(r)[start..start + src.cols].copy_from_slice(src.row(r));
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a @ b`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ @ b`, accumulated into `out`.
pub fn matmul_tn_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    assert_eq!(a.rows, b.rows, "matmul_tn rows");
    assert_eq!((out.rows, out.cols), (a.cols, b.cols), "matmul_tn out");
    for r in 0..a.rows {
        let brow = b.row(r);
        for (i, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.cols, b.cols);
    matmul_tn_acc(a, b, &mut out);
    out
}

/// `a @ bᵀ`.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dims");
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    out
}

/// `v @ m` for a row vector.
pub fn vecmat(v: &[f64], m: &Mat) -> Vec<f64> {
    assert_eq!(v.len(), m.rows, "vecmat dims");
    let mut out = vec![0.0; m.cols];
    for (k, &x) in v.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(m.row(k)) {
            *o += x * w;
        }
    }
    out
}

/// `m @ v` for a column vector.
pub fn matvec(m: &Mat, v: &[f64]) -> Vec<f64> {
    assert_eq!(m.cols, v.len(), "matvec dims");
    (0..m.rows).map(|r| dot(m.row(r), v)).collect()
}

/// `out += xᵀ ⊗ y` (outer product).
pub fn outer_acc(x: &[f64], y: &[f64], out: &mut Mat) {
    for (i, &a) in x.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (o, &b) in out.row_mut(i).iter_mut().zip(y) {
            *o += a * b;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = Mat::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        out.row_mut(r).copy_from_slice(&softmax(m.row(r)));
    }
    out
}

/// Backward of a row-wise softmax: `A ⊙ (dA - rowsum(dA ⊙ A))`.
pub fn softmax_rows_backward(a: &Mat, da: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        let (ar, dr) = (a.row(r), da.row(r));
        let s = dot(ar, dr);
        for ((o, &av), &dv) in out.row_mut(r).iter_mut().zip(ar).zip(dr) {
            *o = av * (dv - s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree() {
        let a = Mat::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Mat::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        assert_eq!(matmul(&a, &b).data, vec![58., 64., 139., 154.]);
        let bt = Mat::from_vec(2, 3, vec![7., 9., 11., 8., 10., 12.]);
        assert_eq!(matmul_nt(&a, &bt).data, vec![58., 64., 139., 154.]);
        let at = Mat::from_vec(3, 2, vec![1., 4., 2., 5., 3., 6.]);
        assert_eq!(matmul_tn(&at, &b).data, vec![58., 64., 139., 154.]);
        assert_eq!(vecmat(&[1., 2., 3.], &b), vec![58., 64.]);
        assert_eq!(matvec(&a, &[1., 1., 1.]), vec![6., 15.]);
    }

    #[test]
    fn softmax_is_stable() {
        let s = softmax(&[1000.0, 1000.0]);
        assert_eq!(s, vec![0.5, 0.5]);
        let l = log_softmax(&[1000.0, 0.0]);
        assert!(l[0].abs() < 1e-300 && l[1] < -999.0);
    }
}
