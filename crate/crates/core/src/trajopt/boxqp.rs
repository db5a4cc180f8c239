//! Small dense QPs with box constraints, solved by projected Newton.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

pub(crate) struct BoxQpSolution {
    pub x: DVector<f64>,
    pub free: Vec<bool>,
    /// Factor of the Hessian restricted to the free set; `None` when every
    /// coordinate is clamped.
    pub chol_free: Option<Cholesky<f64, Dyn>>,
}

fn value(h: &DMatrix<f64>, g: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(h * x)) + g.dot(x)
}

fn clamp(x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len(), (0..x.len()).map(|i| x[i].clamp(lo[i], hi[i])))
}

fn sub(h: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| h[(idx[i], idx[j])])
}

/// Minimizes `x'Hx/2 + g'x` over `lo <= x <= hi`. Returns `None` when the
/// Hessian restricted to the free set is not positive definite.
pub(crate) fn solve(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    x0: &DVector<f64>,
) -> Option<BoxQpSolution> {
    let n = g.len();
    let mut x = clamp(x0, lo, hi);
    let mut free = vec![true; n];
    let mut chol = None;
    let mut f = value(h, g, &x);
    for _ in 0..100 {
        let grad = h * &x + g;
        let new_free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lo[i] && grad[i] > 0.0) || (x[i] >= hi[i] && grad[i] < 0.0)))
            .collect();
        let idx: Vec<usize> = (0..n).filter(|&i| new_free[i]).collect();
        if idx.is_empty() {
            free = new_free;
            chol = None;
            break;
        }
        let hf = sub(h, &idx);
        let c = Cholesky::new(hf)?;
        let gf = DVector::from_iterator(idx.len(), idx.iter().map(|&i| grad[i]));
        let step_f = c.solve(&(-&gf));
        free = new_free;
        chol = Some(c);
        if gf.amax() <= 1e-13 * (1.0 + g.amax()) {
            break;
        }
        let mut dir = DVector::zeros(n);
        for (k, &i) in idx.iter().enumerate() {
            dir[i] = step_f[k];
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = clamp(&(&x + &dir * alpha), lo, hi);
            let ft = value(h, g, &trial);
            if ft <= f + 0.1 * grad.dot(&(&trial - &x)) {
                let change = (&trial - &x).amax();
                x = trial;
                let prev = f;
                f = ft;
                accepted = true;
                if change <= 1e-14 * (1.0 + x.amax()) || prev - f <= 1e-15 * (1.0 + f.abs()) {
                    alpha = 0.0;
                }
                break;
            }
            alpha *= 0.5;
        }
        if !accepted || alpha == 0.0 {
            // Refresh the free set at the final point.
            let grad = h * &x + g;
            free = (0..n)
                .map(|i| !((x[i] <= lo[i] && grad[i] > 0.0) || (x[i] >= hi[i] && grad[i] < 0.0)))
                .collect();
            let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
            chol = if idx.is_empty() { None } else { Some(Cholesky::new(sub(h, &idx))?) };
            break;
        }
    }
    Some(BoxQpSolution { x, free, chol_free: chol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_matches_linear_solve() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = DVector::from_vec(vec![-1.0, 1.0]);
        let big = DVector::from_element(2, 1e9);
        let s = solve(&h, &g, &(-&big), &big, &DVector::zeros(2)).unwrap();
        let want = h.clone().lu().solve(&(-&g)).unwrap();
        assert!((s.x - want).amax() < 1e-12);
        assert_eq!(s.free, vec![true, true]);
    }

    #[test]
    fn active_bound_is_detected() {
        let h = DMatrix::identity(2, 2);
        let g = DVector::from_vec(vec![-3.0, 0.5]);
        let lo = DVector::from_element(2, -1.0);
        let hi = DVector::from_element(2, 1.0);
        let s = solve(&h, &g, &lo, &hi, &DVector::zeros(2)).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-14);
        assert!((s.x[1] + 0.5).abs() < 1e-12);
        assert_eq!(s.free, vec![false, true]);
    }

    #[test]
    fn matches_brute_force_on_grid() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let g = DVector::from_vec(vec![0.3, -2.0]);
        let lo = DVector::from_vec(vec![-0.5, -0.5]);
        let hi = DVector::from_vec(vec![0.5, 0.5]);
        let s = solve(&h, &g, &lo, &hi, &DVector::zeros(2)).unwrap();
        let mut best = f64::INFINITY;
        for i in 0..=1000 {
            for j in 0..=1000 {
                let x = DVector::from_vec(vec![-0.5 + i as f64 / 1000.0, -0.5 + j as f64 / 1000.0]);
                best = best.min(value(&h, &g, &x));
            }
        }
        assert!(value(&h, &g, &s.x) <= best + 1e-12);
    }
}
