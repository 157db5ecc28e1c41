//! Symmetric banded storage with an in-place Cholesky factorization.

#[derive(Debug, Clone)]
pub(crate) struct BandMatrix {
    n: usize,
    bw: usize,
    // row i holds columns i-bw ..= i at offsets 0 ..= bw
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> usize {
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Adds `v` to entry `(i, j)`; only the lower triangle is stored, so each
    /// off-diagonal pair should be added once.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(r - c <= self.bw);
        let k = self.at(r, c);
        self.data[k] += v;
    }

    /// `y = A x` using the symmetric lower band.
    #[cfg(test)]
    pub fn mul(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.bw);
            let row = &self.data[i * (self.bw + 1)..(i + 1) * (self.bw + 1)];
            for j in j0..i {
                let a = row[j + self.bw - i];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += row[self.bw] * x[i];
        }
    }

    /// In-place `L L^T` factorization. Returns the row of the first non-positive pivot.
    pub fn cholesky(mut self) -> Result<Cholesky, usize> {
        let w = self.bw + 1;
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(self.bw));
                let mut s = self.data[i * w + (j + self.bw - i)];
                let ri = i * w + (k0 + self.bw - i);
                let rj = j * w + (k0 + self.bw - j);
                let len = j - k0;
                let (a, b) = (&self.data[ri..ri + len], &self.data[rj..rj + len]);
                s -= a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(i);
                    }
                    self.data[i * w + self.bw] = s.sqrt();
                } else {
                    let d = self.data[j * w + self.bw];
                    self.data[i * w + (j + self.bw - i)] = s / d;
                }
            }
        }
        Ok(Cholesky { m: self })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Cholesky {
    m: BandMatrix,
}

impl Cholesky {
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.m.n;
        let bw = self.m.bw;
        let w = bw + 1;
        let d = &self.m.data;
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let row = &d[i * w + (j0 + bw - i)..i * w + bw];
            let s: f64 = row.iter().zip(&b[j0..i]).map(|(a, x)| a * x).sum();
            b[i] = (b[i] - s) / d[i * w + bw];
        }
        for i in (0..n).rev() {
            b[i] /= d[i * w + bw];
            let bi = b[i];
            let j0 = i.saturating_sub(bw);
            for j in j0..i {
                b[j] -= d[i * w + (j + bw - i)] * bi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_tridiagonal() {
        let n = 50;
        let mut a = BandMatrix::zeros(n, 1);
        for i in 0..n {
            a.add(i, i, 2.0);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
        }
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut b = vec![0.0; n];
        a.mul(&x, &mut b);
        let c = a.clone().cholesky().unwrap();
        c.solve(&mut b);
        for (u, v) in b.iter().zip(&x) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn solves_wide_band() {
        let n = 40;
        let bw = 6;
        let mut a = BandMatrix::zeros(n, bw);
        for i in 0..n {
            a.add(i, i, 20.0 + i as f64);
            for k in 1..=bw.min(i) {
                a.add(i, i - k, 1.0 / (1.0 + k as f64 + i as f64 * 0.1));
            }
        }
        let x: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64).collect();
        let mut b = vec![0.0; n];
        a.mul(&x, &mut b);
        let c = a.cholesky().unwrap();
        c.solve(&mut b);
        for (u, v) in b.iter().zip(&x) {
            assert!((u - v).abs() < 1e-11);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let mut a = BandMatrix::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 1, 1.0);
        a.add(1, 0, 2.0);
        assert_eq!(a.cholesky().err(), Some(1));
    }
}
