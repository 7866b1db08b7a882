//! Dense two-phase primal simplex for tiny equality-form programs
//!
//! `maximize c.x  s.t.  A x = b, x >= 0`, with Bland's smallest-index rule for
//! both the entering and the leaving variable, so pivoting never cycles and the
//! optimum reported for a given input is reproducible.

const PIVOT_EPS: f64 = 1e-12;

/// A basic feasible solution of `A x = b, x >= 0` in tableau form.
#[derive(Debug, Clone)]
pub struct FeasibleBasis {
    n: usize,
    /// Rows of `[B^-1 A | B^-1 b]`, each of length `n + 1`.
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
    /// Phase-one optimum: L1 norm of the residual `b - A x`.
    pub infeasibility: f64,
}

fn pivot(rows: &mut [Vec<f64>], r: usize, c: usize) {
    let p = rows[r][c];
    rows[r].iter_mut().for_each(|v| *v /= p);
    let pivot_row = rows[r].clone();
    for (i, row) in rows.iter_mut().enumerate() {
        if i == r {
            continue;
        }
        let f = row[c];
        if f != 0.0 {
            for (v, pv) in row.iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
            row[c] = 0.0;
        }
    }
}

/// Runs simplex iterations maximizing `profit . x` on a tableau whose last
/// column is the right-hand side. Returns `false` when unbounded.
fn optimize(rows: &mut [Vec<f64>], basis: &mut [usize], profit: &[f64], allowed: usize) -> bool {
    let rhs = rows.first().map(|r| r.len() - 1).unwrap_or(0);
    loop {
        let mut entering = None;
        for j in 0..allowed {
            if basis.contains(&j) {
                continue;
            }
            let reduced = profit[j] - rows.iter().zip(basis.iter()).map(|(r, &b)| profit[b] * r[j]).sum::<f64>();
            if reduced > 1e-11 {
                entering = Some(j);
                break;
            }
        }
        let Some(j) = entering else { return true };
        let mut leave: Option<(usize, f64)> = None;
        for (i, row) in rows.iter().enumerate() {
            if row[j] > PIVOT_EPS {
                let ratio = row[rhs] / row[j];
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((k, best)) => {
                        if ratio < best - 1e-14 || (ratio <= best + 1e-14 && basis[i] < basis[k]) {
                            Some((i, ratio))
                        } else {
                            Some((k, best))
                        }
                    }
                };
            }
        }
        let Some((r, _)) = leave else { return false };
        pivot(rows, r, j);
        basis[r] = j;
    }
}

/// Phase one with one artificial per row; artificials left in the basis at
/// level zero are pivoted out or their redundant rows dropped.
pub fn phase_one(a: &[Vec<f64>], b: &[f64]) -> FeasibleBasis {
    let m = a.len();
    let n = a.first().map(|r| r.len()).unwrap_or(0);
    let width = n + m + 1;
    let mut rows: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
            let mut row = vec![0.0; width];
            for j in 0..n {
                row[j] = sign * a[i][j];
            }
            row[n + i] = 1.0;
            row[width - 1] = sign * b[i];
            row
        })
        .collect();
    let mut basis: Vec<usize> = (n..n + m).collect();
    let mut profit = vec![0.0; n + m];
    profit[n..].iter_mut().for_each(|p| *p = -1.0);
    optimize(&mut rows, &mut basis, &profit, n + m);
    let infeasibility: f64 = rows.iter().zip(&basis).filter(|(_, &bv)| bv >= n).map(|(r, _)| r[width - 1].abs()).sum();

    // drive zero-level artificials out of the basis
    let mut i = 0;
    while i < rows.len() {
        if basis[i] >= n {
            match (0..n).find(|&j| !basis.contains(&j) && rows[i][j].abs() > 1e-10) {
                Some(j) => {
                    pivot(&mut rows, i, j);
                    basis[i] = j;
                    i += 1;
                }
                None => {
                    rows.remove(i);
                    basis.remove(i);
                }
            }
        } else {
            i += 1;
        }
    }
    let rows = rows
        .into_iter()
        .map(|r| {
            let mut out = r[..n].to_vec();
            out.push(r[width - 1].max(0.0));
            out
        })
        .collect();
    FeasibleBasis { n, rows, basis, infeasibility }
}

impl FeasibleBasis {
    pub fn point(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for (row, &b) in self.rows.iter().zip(&self.basis) {
            if b < self.n {
                x[b] = *row.last().unwrap();
            }
        }
        x
    }

    /// Phase two from this basis. `None` if unbounded.
    pub fn maximize(&self, c: &[f64]) -> Option<(Vec<f64>, f64)> {
        let mut rows = self.rows.clone();
        let mut basis = self.basis.clone();
        if !optimize(&mut rows, &mut basis, c, self.n) {
            return None;
        }
        let mut x = vec![0.0; self.n];
        for (row, &b) in rows.iter().zip(&basis) {
            x[b] = *row.last().unwrap();
        }
        let v = x.iter().zip(c).map(|(xi, ci)| xi * ci).sum();
        Some((x, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_program() {
        // max x + 2y  s.t. x + y + s = 4, x + 3y + u = 6
        let a = vec![vec![1.0, 1.0, 1.0, 0.0], vec![1.0, 3.0, 0.0, 1.0]];
        let fb = phase_one(&a, &[4.0, 6.0]);
        assert!(fb.infeasibility < 1e-12);
        let (x, v) = fb.maximize(&[1.0, 2.0, 0.0, 0.0]).unwrap();
        assert!((v - 5.0).abs() < 1e-12, "{x:?}");
    }

    #[test]
    fn detects_infeasible() {
        let a = vec![vec![1.0, 4.0], vec![1.0, 1.0]];
        let fb = phase_one(&a, &[5.0, 1.0]);
        assert!((fb.infeasibility - 1.0).abs() < 1e-12);
    }

    #[test]
    fn redundant_rows_are_dropped() {
        let a = vec![vec![1.0, 1.0], vec![2.0, 2.0]];
        let fb = phase_one(&a, &[1.0, 2.0]);
        assert!(fb.infeasibility < 1e-12);
        let (x, v) = fb.maximize(&[0.0, 1.0]).unwrap();
        assert_eq!(x, vec![0.0, 1.0]);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn degenerate_ties_are_deterministic() {
        let a = vec![vec![1.0, 1.0, 1.0]];
        let fb = phase_one(&a, &[1.0]);
        let (x1, _) = fb.maximize(&[1.0, 1.0, 0.0]).unwrap();
        let (x2, _) = fb.maximize(&[1.0, 1.0, 0.0]).unwrap();
        assert_eq!(x1, x2);
        assert_eq!(x1, vec![1.0, 0.0, 0.0]);
    }
}
