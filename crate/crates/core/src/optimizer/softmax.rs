//! Annealed softmax relaxation of discrete phase selection.

use rand::Rng;

use crate::scene::{phase_grid, PhaseSchedule};

/// Annealing schedule `α(l) = 1 + (r·l)²`.
pub fn temperature(l: usize, r: f64) -> f64 {
    let x = r * l as f64;
    1.0 + x * x
}

/// Softmax of `α|w|` and the resulting convex combination of grid phases.
pub fn softmax_select(w_row: &[f64], alpha: f64, grid: &[f64]) -> (f64, Vec<f64>) {
    let mut weights = vec![0.0; w_row.len()];
    let theta = softmax_into(w_row, alpha, grid, &mut weights);
    (theta, weights)
}

pub(crate) fn softmax_into(w_row: &[f64], alpha: f64, grid: &[f64], weights: &mut [f64]) -> f64 {
    let max = w_row.iter().fold(f64::NEG_INFINITY, |m, w| m.max(alpha * w.abs()));
    let mut total = 0.0;
    for (p, w) in weights.iter_mut().zip(w_row) {
        *p = (alpha * w.abs() - max).exp();
        total += *p;
    }
    let mut theta = 0.0;
    for (p, s) in weights.iter_mut().zip(grid) {
        *p /= total;
        theta += *p * s;
    }
    theta
}

/// Index of the largest `|w|`, ties to the smaller index.
pub fn hard_select(w_row: &[f64]) -> usize {
    let mut best = 0;
    for (i, w) in w_row.iter().enumerate() {
        if w.abs() > w_row[best].abs() {
            best = i;
        }
    }
    best
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Chain rule through `softmax_select`: adds `dθ · ∂θ/∂w_s` into `out`.
pub(crate) fn softmax_pullback(w_row: &[f64], alpha: f64, grid: &[f64], dtheta: f64, scratch: &mut [f64], out: &mut [f64]) {
    let theta = softmax_into(w_row, alpha, grid, scratch);
    for s in 0..w_row.len() {
        out[s] += dtheta * alpha * sign(w_row[s]) * scratch[s] * (grid[s] - theta);
    }
}

/// Logits `w_{t,n,s}` over the `2^bits` admissible phases.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftWeights {
    rows: usize,
    n_ris: usize,
    pub grid: Vec<f64>,
    pub w: Vec<f64>,
}

impl SoftWeights {
    pub fn zeros(rows: usize, n_ris: usize, levels: usize) -> Self {
        SoftWeights {
            rows,
            n_ris,
            grid: phase_grid(levels),
            w: vec![0.0; rows * n_ris * levels],
        }
    }

    /// Logits drawn uniformly from `[-1, 1)`.
    pub fn random(rows: usize, n_ris: usize, levels: usize, rng: &mut impl Rng) -> Self {
        let mut sw = Self::zeros(rows, n_ris, levels);
        sw.w.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        sw
    }

    pub fn levels(&self) -> usize {
        self.grid.len()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn n_ris(&self) -> usize {
        self.n_ris
    }

    /// Logits of element `n` at 0-based row `r`.
    pub fn logits(&self, r: usize, n: usize) -> &[f64] {
        let s = self.levels();
        let i = (r * self.n_ris + n) * s;
        &self.w[i..i + s]
    }

    /// Relaxed schedule at temperature `alpha`.
    pub fn select(&self, alpha: f64) -> PhaseSchedule {
        let mut scratch = vec![0.0; self.levels()];
        PhaseSchedule::from_fn(self.rows, self.n_ris, |r, n| {
            softmax_into(self.logits(r, n), alpha, &self.grid, &mut scratch)
        })
    }

    /// Each phase snapped to the grid point with the largest weight.
    pub fn hard_quantize(&self) -> PhaseSchedule {
        PhaseSchedule::from_fn(self.rows, self.n_ris, |r, n| self.grid[hard_select(self.logits(r, n))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn temperature_examples() {
        assert_eq!(temperature(0, 0.005), 1.0);
        assert!((temperature(100, 0.005) - 1.25).abs() < 1e-12);
        assert!((temperature(1000, 0.005) - 26.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let grid = phase_grid(4);
        let (theta, p) = softmax_select(&[0.3; 4], 7.0, &grid);
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!((theta - grid.iter().sum::<f64>() / 4.0).abs() < 1e-12);

        let (theta, p) = softmax_select(&[0.1, -0.9, 0.2, 0.5], 1e6, &grid);
        assert!(p[1] >= 1.0 - 1e-6);
        assert!((theta - grid[1]).abs() < 1e-6);

        let (theta, p) = softmax_select(&[0.1, 0.3], 1.0, &[0.0, PI]);
        let e1 = 0.1f64.exp();
        let e2 = 0.3f64.exp();
        assert!((p[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((p[1] - e2 / (e1 + e2)).abs() < 1e-15);
        assert!((theta - PI * e2 / (e1 + e2)).abs() < 1e-15);
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let grid = phase_grid(8);
        let w = [0.3, -0.7, 0.05, 0.9, -0.2, 0.0, 0.6, -0.4];
        let alpha = 3.7;
        let mut scratch = vec![0.0; 8];
        let mut g = vec![0.0; 8];
        softmax_pullback(&w, alpha, &grid, 1.0, &mut scratch, &mut g);
        for s in 0..8 {
            if w[s] == 0.0 {
                continue;
            }
            let h = 1e-6;
            let mut a = w;
            let mut b = w;
            a[s] += h;
            b[s] -= h;
            let fd = (softmax_select(&a, alpha, &grid).0 - softmax_select(&b, alpha, &grid).0) / (2.0 * h);
            assert!((fd - g[s]).abs() <= 1e-6 * fd.abs().max(1e-3), "s={s} fd={fd} an={}", g[s]);
        }
    }

    #[test]
    fn quantize_picks_largest_magnitude() {
        let mut sw = SoftWeights::zeros(1, 2, 4);
        sw.w = vec![0.1, -0.8, 0.3, 0.2, 0.5, 0.5, 0.1, 0.0];
        let q = sw.hard_quantize();
        assert_eq!(q.row(0), &[sw.grid[1], sw.grid[0]]);
        assert!(q.is_on_grid(4));
    }

    proptest! {
        #[test]
        fn weights_form_a_distribution(
            w in prop::collection::vec(-5.0f64..5.0, 2..16),
            alpha in 1.0f64..1e4,
        ) {
            let grid = phase_grid(w.len());
            let (theta, p) = softmax_select(&w, alpha, &grid);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(theta >= 0.0 && theta <= *grid.last().unwrap() + 1e-12);
            let top = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(p[hard_select(&w)], top);
        }
    }
}
