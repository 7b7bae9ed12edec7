//! Small dense matrices: just enough linear algebra for per-token kernels.
//!
//! Everything here runs on S×S matrices with S in the tens, so a plain
//! row-major `Vec<f64>` beats pulling in a full linear-algebra stack.

use crate::error::{Error, Result};

/// Row-major dense square-or-rectangular matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn scale(&self, a: f64) -> Mat {
        let mut m = self.clone();
        for v in &mut m.data {
            *v *= a;
        }
        m
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut m = self.clone();
        for (v, &o) in m.data.iter_mut().zip(&other.data) {
            *v += o;
        }
        m
    }

    /// Left-multiply a row vector: `v * self`.
    pub fn vecmul_left(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(i)) {
                *o += vi * m;
            }
        }
        out
    }

    /// Max absolute row sum (operator 1-norm of the transpose, enough for exp scaling).
    pub fn max_abs_row_sum(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Solve `self * X = b` by LU with partial pivoting; consumes copies.
    pub fn solve(&self, b: &Mat) -> Result<Mat> {
        assert_eq!(self.rows, self.cols);
        assert_eq!(self.rows, b.rows);
        let n = self.rows;
        let mut lu = self.clone();
        let mut x = b.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut piv = col;
            let mut best = lu[(perm[col], col)].abs();
            for r in col + 1..n {
                let cand = lu[(perm[r], col)].abs();
                if cand > best {
                    best = cand;
                    piv = r;
                }
            }
            if best == 0.0 {
                return Err(Error::Integration("singular matrix in LU solve".into()));
            }
            perm.swap(col, piv);
            let prow = perm[col];
            for r in col + 1..n {
                let row = perm[r];
                let f = lu[(row, col)] / lu[(prow, col)];
                lu[(row, col)] = f;
                for c in col + 1..n {
                    let v = lu[(prow, c)];
                    lu[(row, c)] -= f * v;
                }
            }
        }
        // Forward/back substitution on permuted rows.
        let mut out = Mat::zeros(n, x.cols);
        for c in 0..x.cols {
            let mut y = vec![0.0; n];
            for r in 0..n {
                let mut acc = x[(perm[r], c)];
                for k in 0..r {
                    acc -= lu[(perm[r], k)] * y[k];
                }
                y[r] = acc;
            }
            for r in (0..n).rev() {
                let mut acc = y[r];
                for k in r + 1..n {
                    acc -= lu[(perm[r], k)] * out[(k, c)];
                }
                out[(r, c)] = acc / lu[(perm[r], r)];
            }
        }
        let _ = &mut x;
        Ok(out)
    }

    /// Matrix exponential by Padé(13) with scaling and squaring.
    pub fn expm(&self) -> Result<Mat> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        if n == 0 {
            return Ok(Mat::zeros(0, 0));
        }
        // Padé 13 coefficients (Higham 2005).
        const B: [f64; 14] = [
            64764752532480000.0,
            32382376266240000.0,
            7771770303897600.0,
            1187353796428800.0,
            129060195264000.0,
            10559470521600.0,
            670442572800.0,
            33522128640.0,
            1323241920.0,
            40840800.0,
            960960.0,
            16380.0,
            182.0,
            1.0,
        ];
        let norm = self.max_abs_row_sum();
        // theta_13 for double precision
        let theta = 5.371920351148152;
        let s = if norm > theta {
            (norm / theta).log2().ceil() as i32
        } else {
            0
        };
        let a = self.scale(0.5_f64.powi(s));
        let a2 = a.matmul(&a);
        let a4 = a2.matmul(&a2);
        let a6 = a4.matmul(&a2);
        let ident = Mat::identity(n);

        // U = A * (A6*(b13 A6 + b11 A4 + b9 A2) + b7 A6 + b5 A4 + b3 A2 + b1 I)
        let w1 = a6.scale(B[13]).add(&a4.scale(B[11])).add(&a2.scale(B[9]));
        let w = a6.matmul(&w1).add(
            &a6.scale(B[7]).add(&a4.scale(B[5])).add(&a2.scale(B[3])).add(&ident.scale(B[1])),
        );
        let u = a.matmul(&w);
        // V = A6*(b12 A6 + b10 A4 + b8 A2) + b6 A6 + b4 A4 + b2 A2 + b0 I
        let z1 = a6.scale(B[12]).add(&a4.scale(B[10])).add(&a2.scale(B[8]));
        let v = a6.matmul(&z1).add(
            &a6.scale(B[6]).add(&a4.scale(B[4])).add(&a2.scale(B[2])).add(&ident.scale(B[0])),
        );

        let p = v.add(&u);
        let q = v.add(&u.scale(-1.0));
        let mut r = q.solve(&p)?;
        for _ in 0..s {
            r = r.matmul(&r);
        }
        Ok(r)
    }

    /// `∫_0^dt exp(u·self) du` via the augmented-matrix identity
    /// `exp([[A, I], [0, 0]]·dt) = [[exp(A·dt), ∫exp(A·u)du], [0, I]]`.
    pub fn expm_integral(&self, dt: f64) -> Result<Mat> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut aug = Mat::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = self[(i, j)] * dt;
            }
            aug[(i, n + i)] = dt;
        }
        let e = aug.expm()?;
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = e[(i, n + j)];
            }
        }
        Ok(out)
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_zero_is_identity() {
        let e = Mat::zeros(3, 3).expm().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((e[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn expm_matches_two_state_closed_form() {
        // Generator [[-a, a], [b, -b]]: exp has closed form via eigenvalues {0, -(a+b)}.
        let (a, b) = (0.7, 1.9);
        let g = Mat::from_rows(&[vec![-a, a], vec![b, -b]]);
        let e = g.expm().unwrap();
        let s = a + b;
        let decay = (-s).exp();
        let expect = [
            [(b + a * decay) / s, a * (1.0 - decay) / s],
            [b * (1.0 - decay) / s, (a + b * decay) / s],
        ];
        for i in 0..2 {
            for j in 0..2 {
                assert!((e[(i, j)] - expect[i][j]).abs() < 1e-13, "({i},{j})");
            }
        }
    }

    #[test]
    fn expm_handles_large_norm_by_scaling() {
        let g = Mat::from_rows(&[vec![-500.0, 500.0], vec![500.0, -500.0]]);
        let e = g.expm().unwrap();
        // Fully mixed.
        for i in 0..2 {
            for j in 0..2 {
                assert!((e[(i, j)] - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expm_integral_matches_quadrature() {
        let g = Mat::from_rows(&[vec![-1.0, 1.0], vec![0.5, -0.5]]);
        let dt = 0.8;
        let integral = g.expm_integral(dt).unwrap();
        // Simpson with many panels as an independent route.
        let panels = 2000;
        let h = dt / panels as f64;
        let mut acc = Mat::zeros(2, 2);
        for p in 0..=panels {
            let w = if p == 0 || p == panels {
                1.0
            } else if p % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let e = g.scale(p as f64 * h).expm().unwrap();
            acc = acc.add(&e.scale(w * h / 3.0));
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!((integral[(i, j)] - acc[(i, j)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn solve_recovers_known_solution() {
        let a = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]);
        let x_true = Mat::from_rows(&[vec![1.0], vec![-2.0]]);
        let b = a.matmul(&x_true);
        let x = a.solve(&b).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((x[(1, 0)] + 2.0).abs() < 1e-14);
    }
}
