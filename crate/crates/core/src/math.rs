//! Small dense-matrix and vector helpers used by the denoiser and the tape.
//!
//! Everything is `f64`; the models here are far too small to justify a BLAS
//! dependency.

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// y = W x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| dot(self.row(r), x))
            .collect()
    }

    /// acc += Wᵀ d  (gradient w.r.t. the input of `matvec`)
    pub fn matvec_transpose_acc(&self, d: &[f64], acc: &mut [f64]) {
        debug_assert_eq!(d.len(), self.rows);
        debug_assert_eq!(acc.len(), self.cols);
        for r in 0..self.rows {
            let dr = d[r];
            if dr == 0.0 {
                continue;
            }
            let row = self.row(r);
            for c in 0..self.cols {
                acc[c] += row[c] * dr;
            }
        }
    }

    /// self += d ⊗ x  (outer-product accumulation for weight gradients)
    pub fn outer_acc(&mut self, d: &[f64], x: &[f64]) {
        debug_assert_eq!(d.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for r in 0..self.rows {
            let dr = d[r];
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for c in 0..self.cols {
                row[c] += dr * x[c];
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sum_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    sum_sq(a).sqrt()
}

/// a - b elementwise.
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// a + b elementwise.
pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// acc += c * v
pub fn axpy(acc: &mut [f64], c: f64, v: &[f64]) {
    debug_assert_eq!(acc.len(), v.len());
    for (a, x) in acc.iter_mut().zip(v) {
        *a += c * x;
    }
}

pub fn scale(v: &[f64], c: f64) -> Vec<f64> {
    v.iter().map(|x| c * x).collect()
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard error of the mean (sample standard deviation / sqrt(n)).
pub fn std_err(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose() {
        let w = Mat {
            rows: 2,
            cols: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        assert_eq!(w.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);

        let mut acc = vec![0.0; 3];
        w.matvec_transpose_acc(&[1.0, 1.0], &mut acc);
        assert_eq!(acc, vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn outer_accumulates() {
        let mut w = Mat::zeros(2, 2);
        w.outer_acc(&[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(w.data, vec![3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn std_err_matches_hand_value() {
        // values 1,2,3,4: sample var 5/3, se = sqrt(5/3/4)
        let se = std_err(&[1.0, 2.0, 3.0, 4.0]);
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }
}
