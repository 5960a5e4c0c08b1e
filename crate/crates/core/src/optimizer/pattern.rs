//! Receive beam patterns `g^T Θ(t) a(θ)` of a schedule.

use crate::config::{linspace, SceneConfig};
use crate::error::{Error, Result};
use crate::scene::{steering_vector, PhaseSchedule, Scene, C64};

fn db_power(p: f64) -> f64 {
    10.0 * p.max(1e-300).log10()
}

/// Folded responses `g ⊙ a(θ_p)` for every grid angle.
fn folded(scene: &Scene, grid: &[f64]) -> Result<Vec<Vec<C64>>> {
    grid.iter()
        .map(|&a| {
            let v = steering_vector(a, scene.n_ris)?;
            Ok(v.iter().zip(&scene.g).map(|(a, g)| a * g).collect())
        })
        .collect()
}

fn row_powers(phases: &[f64], cols: &[Vec<C64>]) -> Vec<f64> {
    let e: Vec<C64> = phases.iter().map(|&th| C64::from_polar(1.0, th)).collect();
    cols.iter()
        .map(|c| c.iter().zip(&e).map(|(a, b)| a * b).sum::<C64>().norm_sqr())
        .collect()
}

/// Pattern at 1-based time `t` in dB, normalized so the grid maximum is 0 dB.
pub fn beam_pattern(cfg: &SceneConfig, sched: &PhaseSchedule, t: usize, grid: &[f64]) -> Result<Vec<f64>> {
    sched.check_shape(cfg)?;
    if t == 0 || t > sched.rows() {
        return Err(Error::Config(format!("time index {t} outside 1..={}", sched.rows())));
    }
    let scene = Scene::new(cfg)?;
    let p = row_powers(sched.row(t - 1), &folded(&scene, grid)?);
    let peak = p.iter().cloned().fold(0.0, f64::max);
    Ok(p.iter().map(|&x| db_power(x) - db_power(peak)).collect())
}

/// Unnormalized pattern `20·log10 |g^T Θ(t) a(θ)|` at 1-based time `t`.
pub fn beam_gain_db(cfg: &SceneConfig, sched: &PhaseSchedule, t: usize, grid: &[f64]) -> Result<Vec<f64>> {
    let scene = Scene::new(cfg)?;
    Ok(row_powers(sched.row(t - 1), &folded(&scene, grid)?).into_iter().map(db_power).collect())
}

/// Angle grid from −89.9° to 89.9° in 0.1° steps.
pub fn fine_grid() -> Vec<f64> {
    (0..=1798).map(|i| -89.9 + 0.1 * i as f64).collect()
}

/// Summary of a schedule's beam patterns over time.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSummary {
    /// Mean of `|g^T Θ(t) a(θ_U)|²` over `t`, in dB.
    pub ue_gain_db: f64,
    /// Mean pattern power over `t` and a 200-point grid spanning the RoI, in dB.
    pub roi_gain_db: f64,
    /// Direction of the pattern maximum on [`fine_grid`], one per row.
    pub peak_deg: Vec<f64>,
}

impl PatternSummary {
    /// Fraction of rows whose pattern maximum lies within `tol` degrees of `theta`.
    pub fn peak_fraction(&self, theta: f64, tol: f64) -> f64 {
        let hits = self.peak_deg.iter().filter(|&&p| (p - theta).abs() <= tol + 1e-9).count();
        hits as f64 / self.peak_deg.len() as f64
    }
}

/// Pattern statistics over the rows `rows` (0-based) of a schedule.
pub fn summarize(cfg: &SceneConfig, sched: &PhaseSchedule, rows: impl Iterator<Item = usize>) -> Result<PatternSummary> {
    sched.check_shape(cfg)?;
    let scene = Scene::new(cfg)?;
    let ue = folded(&scene, &[cfg.theta_ue])?;
    let lo = cfg.roi_angles[0];
    let hi = *cfg.roi_angles.last().unwrap();
    let roi = folded(&scene, &linspace(lo, hi, 200))?;
    let grid = fine_grid();
    let all = folded(&scene, &grid)?;
    let (mut ue_sum, mut roi_sum, mut count) = (0.0, 0.0, 0usize);
    let mut peak_deg = Vec::new();
    for r in rows {
        let ph = sched.row(r);
        ue_sum += row_powers(ph, &ue)[0];
        roi_sum += row_powers(ph, &roi).iter().sum::<f64>() / roi.len() as f64;
        let p = row_powers(ph, &all);
        let mut best = 0;
        for (i, &x) in p.iter().enumerate() {
            if x > p[best] {
                best = i;
            }
        }
        peak_deg.push(grid[best]);
        count += 1;
    }
    let c = count.max(1) as f64;
    Ok(PatternSummary {
        ue_gain_db: db_power(ue_sum / c),
        roi_gain_db: db_power(roi_sum / c),
        peak_deg,
    })
}
