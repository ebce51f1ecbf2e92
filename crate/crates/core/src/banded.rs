//! Banded linear systems solved by Gaussian elimination with partial pivoting.

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum BandError {
    #[error("matrix is singular to working precision at row {0}")]
    Singular(usize),
    #[error("entry ({row}, {col}) lies outside the band")]
    OutOfBand { row: usize, col: usize },
}

/// Square matrix with `kl` sub- and `ku` super-diagonals.
///
/// Row `r` keeps the columns `r - kl ..= r + kl + ku`; the extra `kl`
/// columns on the right absorb the fill-in created by row interchanges.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self { n, kl, ku, width, data: vec![0.0; n * width] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = 0.0);
    }

    #[inline]
    fn pos(&self, r: usize, c: usize) -> usize {
        r * self.width + c + self.kl - r
    }

    #[inline]
    pub fn in_band(&self, r: usize, c: usize) -> bool {
        r < self.n && c < self.n && c + self.kl >= r && c <= r + self.ku
    }

    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) -> Result<(), BandError> {
        if !self.in_band(r, c) {
            return Err(BandError::OutOfBand { row: r, col: c });
        }
        let p = self.pos(r, c);
        self.data[p] += v;
        Ok(())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        if self.in_band(r, c) {
            self.data[self.pos(r, c)]
        } else {
            0.0
        }
    }

    /// `y = A x` using the stored band (before factorization).
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                let lo = r.saturating_sub(self.kl);
                let hi = (r + self.ku).min(self.n - 1);
                (lo..=hi).map(|c| self.data[self.pos(r, c)] * x[c]).sum()
            })
            .collect()
    }

    /// Solve `A x = b`, consuming the matrix.
    pub fn solve(mut self, mut b: Vec<f64>) -> Result<Vec<f64>, BandError> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        assert_eq!(b.len(), n);
        let scale = self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let tiny = scale * f64::EPSILON * n as f64;
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + kl + ku).min(n - 1);
            let mut piv = k;
            let mut best = self.data[self.pos(k, k)].abs();
            for r in k + 1..=last_row {
                let a = self.data[self.pos(r, k)].abs();
                if a > best {
                    best = a;
                    piv = r;
                }
            }
            if !(best > tiny) {
                return Err(BandError::Singular(k));
            }
            if piv != k {
                for c in k..=last_col {
                    let (pa, pb) = (self.pos(k, c), self.pos(piv, c));
                    self.data.swap(pa, pb);
                }
                b.swap(k, piv);
            }
            let pivot = self.data[self.pos(k, k)];
            let kstart = self.pos(k, k + 1);
            let len = last_col - k;
            for r in k + 1..=last_row {
                let pk = self.pos(r, k);
                let l = self.data[pk] / pivot;
                if l == 0.0 {
                    continue;
                }
                self.data[pk] = 0.0;
                let rstart = self.pos(r, k + 1);
                let (head, tail) = self.data.split_at_mut(rstart);
                let pivot_row = &head[kstart..kstart + len];
                for (x, y) in tail[..len].iter_mut().zip(pivot_row) {
                    *x -= l * y;
                }
                b[r] -= l * b[k];
            }
        }
        for k in (0..n).rev() {
            let last_col = (k + kl + ku).min(n - 1);
            let mut s = b[k];
            let start = self.pos(k, k);
            for (off, c) in (k + 1..=last_col).enumerate() {
                s -= self.data[start + 1 + off] * b[c];
            }
            b[k] = s / self.data[start];
        }
        Ok(b)
    }
}
