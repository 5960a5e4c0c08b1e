//! Two-stage RIS phase design: an incoherence-driven initialization followed
//! by gain refinement under the orthogonality constraint.
//!
//! Both objectives split into independent per-time terms, so every row of the
//! schedule is stepped on its own. Unless annealing, the gradient is scaled to
//! unit RMS and the row's step size grows by 5% after an improving step and
//! halves (with the step rejected) otherwise.

pub mod loss;
pub mod pattern;
pub mod sensing;
pub mod softmax;

use rayon::prelude::*;

use crate::config::{PhaseResolution, SceneConfig};
use crate::error::{Error, Result};
use crate::rng::{self, StreamTag};
use crate::scene::{wrap_phase, PhaseSchedule, Scene, C64};

pub use loss::{init_loss, init_loss_grad, refine_loss, refine_loss_grad, sample_target, RefineLoss};
pub use pattern::{beam_gain_db, beam_pattern, fine_grid, summarize, PatternSummary};
pub use sensing::{ortho_metric, sensing_matrix, SensingMatrix};
pub use softmax::{hard_select, softmax_select, temperature, SoftWeights};

use loss::RowLoss;
use softmax::{softmax_into, softmax_pullback};

const PLATEAU_WINDOW: usize = 50;
const MAX_STEP: f64 = 1.0;
const STEP_GROWTH: f64 = 1.05;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerReport {
    /// Initialization loss per stage-1 iteration, then refinement loss per
    /// accepted stage-2 iteration.
    pub loss_trace: Vec<f64>,
    /// Orthogonality metric alongside each `loss_trace` entry.
    pub ortho_trace: Vec<f64>,
    pub stage1_iterations: usize,
    pub iterations: usize,
    pub threshold: f64,
    pub final_ortho_metric: f64,
    /// Refinement loss of the returned schedule.
    pub final_loss: f64,
    pub final_temperature: f64,
    /// Relaxed refinement loss at the last accepted iteration.
    pub relaxed_loss: f64,
    /// Refinement loss of the last iterate after snapping to the grid. The
    /// returned schedule is the best snapped iterate per row, so its loss
    /// (`final_loss`) is never above this.
    pub exit_quantized_loss: f64,
    /// Stage 2 stopped because the next step would break the constraint.
    pub constraint_hit: bool,
    pub accepted: bool,
    pub clamped: bool,
}

trait Param: Sync {
    fn width(&self, n: usize) -> usize;
    fn phases(&self, p: &[f64], alpha: f64, out: &mut [f64]);
    fn pullback(&self, p: &[f64], alpha: f64, dtheta: &[f64], out: &mut [f64]);
    fn normalize(&self, p: &mut [f64]);
    /// Rescales parameters before the refinement stage.
    fn restart(&self, _: &mut [f64]) {}
    /// Phases after snapping to the admissible set.
    fn hard(&self, p: &[f64], out: &mut [f64]) {
        out.copy_from_slice(p);
    }
}

struct Raw;

impl Param for Raw {
    fn width(&self, n: usize) -> usize {
        n
    }
    fn phases(&self, p: &[f64], _: f64, out: &mut [f64]) {
        out.copy_from_slice(p);
    }
    fn pullback(&self, _: &[f64], _: f64, dtheta: &[f64], out: &mut [f64]) {
        out.copy_from_slice(dtheta);
    }
    fn normalize(&self, p: &mut [f64]) {
        p.iter_mut().for_each(|x| *x = wrap_phase(*x));
    }
}

struct Soft {
    grid: Vec<f64>,
}

impl Param for Soft {
    fn width(&self, n: usize) -> usize {
        n * self.grid.len()
    }
    fn phases(&self, p: &[f64], alpha: f64, out: &mut [f64]) {
        let s = self.grid.len();
        let mut scratch = vec![0.0; s];
        for (o, w) in out.iter_mut().zip(p.chunks(s)) {
            *o = softmax_into(w, alpha, &self.grid, &mut scratch);
        }
    }
    fn pullback(&self, p: &[f64], alpha: f64, dtheta: &[f64], out: &mut [f64]) {
        let s = self.grid.len();
        let mut scratch = vec![0.0; s];
        out.iter_mut().for_each(|x| *x = 0.0);
        for ((w, o), &d) in p.chunks(s).zip(out.chunks_mut(s)).zip(dtheta) {
            softmax_pullback(w, alpha, &self.grid, d, &mut scratch, o);
        }
    }
    fn normalize(&self, _: &mut [f64]) {}
    fn hard(&self, p: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(p.chunks(self.grid.len())) {
            *o = self.grid[hard_select(w)];
        }
    }
    fn restart(&self, p: &mut [f64]) {
        for w in p.chunks_mut(self.grid.len()) {
            let top = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if top > 0.0 {
                w.iter_mut().for_each(|x| *x /= top);
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Init,
    Refine,
}

struct Driver<'a, P: Param> {
    cfg: &'a SceneConfig,
    loss: RowLoss<'a>,
    param: P,
    target: Vec<C64>,
    width: usize,
    params: Vec<f64>,
    steps: Vec<f64>,
    fixed_steps: bool,
    /// `g^T Θ(t) H_I` of the current state for every row.
    sens: Vec<C64>,
}

impl<'a, P: Param> Driver<'a, P> {
    fn row_loss(&self, stage: Stage, r: usize, th: &[f64], grad: Option<&mut [f64]>, sv: &mut [C64]) -> (f64, bool) {
        match stage {
            Stage::Init => {
                let k = self.cfg.delay;
                let m = self.cfg.n_pixels;
                if r < k {
                    if let Some(g) = grad {
                        g.iter_mut().for_each(|x| *x = 0.0);
                    }
                    return (0.0, false);
                }
                let tgt = &self.target[(r - k) * m..(r - k + 1) * m];
                (self.loss.init_row(th, tgt, grad, sv), false)
            }
            Stage::Refine => self.loss.refine_row(th, grad, sv),
        }
    }

    /// One step on every row; returns the per-row losses after the step.
    fn iterate(&mut self, stage: Stage, alpha: f64) -> (Vec<f64>, bool) {
        let n = self.cfg.n_ris;
        let m = self.cfg.n_pixels;
        let width = self.width;
        let mut params = std::mem::take(&mut self.params);
        let mut steps = std::mem::take(&mut self.steps);
        let mut sens = std::mem::take(&mut self.sens);
        let this = &*self;
        let out: Vec<(f64, bool)> = params
            .par_chunks_mut(width)
            .zip(steps.par_iter_mut())
            .zip(sens.par_chunks_mut(m))
            .enumerate()
            .map(|(r, ((p, step), sv))| {
                let mut th = vec![0.0; n];
                let mut gth = vec![0.0; n];
                let mut gp = vec![0.0; width];
                this.param.phases(p, alpha, &mut th);
                let (l0, c0) = this.row_loss(stage, r, &th, Some(&mut gth), sv);
                this.param.pullback(p, alpha, &gth, &mut gp);
                let rms = (gp.iter().map(|x| x * x).sum::<f64>() / width as f64).sqrt();
                if !(rms > 0.0 && rms.is_finite()) {
                    return (l0, c0);
                }
                if this.fixed_steps {
                    if step.is_nan() {
                        *step = this.cfg.anneal_step / rms;
                    }
                    for (x, g) in p.iter_mut().zip(&gp) {
                        *x -= *step * g;
                    }
                    this.param.phases(p, alpha, &mut th);
                    return this.row_loss(stage, r, &th, None, sv);
                }
                let mut cand: Vec<f64> = p.iter().zip(&gp).map(|(x, g)| x - *step * g / rms).collect();
                this.param.normalize(&mut cand);
                this.param.phases(&cand, alpha, &mut th);
                let mut sv_new = vec![C64::new(0.0, 0.0); m];
                let (l1, c1) = this.row_loss(stage, r, &th, None, &mut sv_new);
                if l1 < l0 {
                    p.copy_from_slice(&cand);
                    sv.copy_from_slice(&sv_new);
                    *step = (*step * STEP_GROWTH).min(MAX_STEP);
                    (l1, c1)
                } else {
                    *step *= 0.5;
                    (l0, c0)
                }
            })
            .collect();
        self.params = params;
        self.steps = steps;
        self.sens = sens;
        let clamped = out.iter().any(|x| x.1);
        (out.into_iter().map(|x| x.0).collect(), clamped)
    }

    /// Per row, keeps the parameters whose snapped phases give the lowest
    /// refinement loss seen so far.
    fn track_best(&self, best: &mut [f64], best_loss: &mut [f64]) {
        let n = self.cfg.n_ris;
        let m = self.cfg.n_pixels;
        best.par_chunks_mut(self.width)
            .zip(best_loss.par_iter_mut())
            .zip(self.params.par_chunks(self.width))
            .for_each(|((b, bl), p)| {
                let mut th = vec![0.0; n];
                let mut sv = vec![C64::new(0.0, 0.0); m];
                self.param.hard(p, &mut th);
                let (v, _) = self.loss.refine_row(&th, None, &mut sv);
                if v < *bl {
                    *bl = v;
                    b.copy_from_slice(p);
                }
            });
    }

    fn schedule(&self, alpha: f64) -> PhaseSchedule {
        let n = self.cfg.n_ris;
        let mut phases = vec![0.0; self.cfg.total_len() * n];
        for (p, o) in self.params.chunks(self.width).zip(phases.chunks_mut(n)) {
            self.param.phases(p, alpha, o);
        }
        PhaseSchedule::new(self.cfg.total_len(), n, phases).expect("shape")
    }

    fn refresh_sensing(&mut self, alpha: f64) {
        let sched = self.schedule(alpha);
        let m = self.cfg.n_pixels;
        for (r, sv) in self.sens.chunks_mut(m).enumerate() {
            self.loss.scene.imaging_row_into(sched.row(r), sv);
        }
    }

    fn metric(&self) -> Result<f64> {
        let k = self.cfg.delay;
        let m = self.cfg.n_pixels;
        ortho_metric(&SensingMatrix {
            rows: self.cfg.frame_len,
            cols: m,
            g_mat: self.sens[k * m..].to_vec(),
        })
    }

}

fn plateaued(trace: &[f64], tol: f64) -> bool {
    if trace.len() <= PLATEAU_WINDOW {
        return false;
    }
    let now = trace[trace.len() - 1];
    let then = trace[trace.len() - 1 - PLATEAU_WINDOW];
    then - now < tol * then.abs()
}

/// Runs both stages and returns the final parameters with the report.
fn optimize_with<P: Param>(cfg: &SceneConfig, scene: &Scene, seed: u64, param: P, params: Vec<f64>) -> Result<(Vec<f64>, f64, OptimizerReport, bool)> {
    let discrete = param.width(1) > 1;
    let rows = cfg.total_len();
    let width = param.width(cfg.n_ris);
    let mut trng = rng::stream(seed, 0, StreamTag::Target);
    let mut d = Driver {
        cfg,
        loss: RowLoss::new(scene, cfg),
        param,
        target: sample_target(cfg, &mut trng),
        width,
        params,
        steps: vec![cfg.learning_rate; rows],
        fixed_steps: false,
        sens: vec![C64::new(0.0, 0.0); rows * cfg.n_pixels],
    };
    let temp = |l: usize| if discrete { temperature(l, cfg.temp_rate) } else { 1.0 };

    let mut loss_trace = Vec::new();
    let mut ortho_trace = Vec::new();
    let mut l = 0;
    let mut best_metric = f64::INFINITY;
    let mut best_params = d.params.clone();
    for _ in 0..cfg.stage1_max_iters {
        let alpha = temp(l);
        let (row, _) = d.iterate(Stage::Init, alpha);
        l += 1;
        let metric = d.metric()?;
        if metric < best_metric {
            best_metric = metric;
            best_params.copy_from_slice(&d.params);
        }
        loss_trace.push(row.iter().sum::<f64>().sqrt());
        ortho_trace.push(metric);
        if plateaued(&loss_trace, cfg.stage1_tol) {
            break;
        }
    }
    let stage1_iterations = l;
    // keep the most incoherent state seen, the point of this stage
    d.params = best_params;
    // Refinement is a fresh annealing run seeded with the stage-1 selection:
    // logits are rescaled to unit peak magnitude and the temperature restarts.
    d.param.restart(&mut d.params);
    let mut l = 0;
    d.refresh_sensing(temp(l));
    let start_metric = d.metric()?;
    let threshold = cfg.ortho_threshold.resolve(start_metric);
    if start_metric > threshold {
        return Err(Error::InfeasibleStart {
            best: best_metric.min(start_metric),
            threshold,
        });
    }

    // Annealed runs use plain gradient steps with a per-row scale fixed at
    // the first iteration, so rising temperature hardens the selection
    // instead of being tracked by an adaptive step.
    d.fixed_steps = discrete;
    let first = if discrete { f64::NAN } else { cfg.learning_rate };
    d.steps.iter_mut().for_each(|s| *s = first);
    let mut refine_trace = Vec::new();
    let mut prev = (d.params.clone(), d.sens.clone());
    let mut constraint_hit = false;
    let mut clamped = false;
    let mut best = d.params.clone();
    let mut best_loss = vec![f64::INFINITY; rows];
    if discrete {
        d.track_best(&mut best, &mut best_loss);
    }
    for _ in 0..cfg.stage2_max_iters {
        let alpha = temp(l);
        prev.0.copy_from_slice(&d.params);
        prev.1.copy_from_slice(&d.sens);
        let (row, c) = d.iterate(Stage::Refine, alpha);
        let metric = d.metric()?;
        if metric > threshold {
            d.params.copy_from_slice(&prev.0);
            d.sens.copy_from_slice(&prev.1);
            constraint_hit = true;
            break;
        }
        l += 1;
        clamped |= c;
        if discrete {
            d.track_best(&mut best, &mut best_loss);
        }
        let total: f64 = row.iter().sum();
        refine_trace.push(total);
        loss_trace.push(total);
        ortho_trace.push(metric);
        let annealed = !discrete || alpha >= cfg.anneal_target;
        if annealed && plateaued(&refine_trace, cfg.stage2_tol) {
            break;
        }
    }
    let relaxed_loss = refine_trace.last().copied().unwrap_or(f64::NAN);
    let exit_quantized_loss = if discrete {
        let mut last = vec![f64::INFINITY; rows];
        let mut scratch = d.params.clone();
        d.track_best(&mut scratch, &mut last);
        d.params = best;
        last.iter().sum()
    } else {
        relaxed_loss
    };
    let final_temperature = temp(l.saturating_sub(1));
    let report = OptimizerReport {
        loss_trace,
        ortho_trace,
        stage1_iterations,
        iterations: stage1_iterations + l,
        threshold,
        final_ortho_metric: f64::NAN,
        final_loss: f64::NAN,
        final_temperature,
        relaxed_loss,
        exit_quantized_loss,
        constraint_hit,
        accepted: false,
        clamped,
    };
    Ok((d.params, final_temperature, report, discrete))
}

fn finish(cfg: &SceneConfig, sched: PhaseSchedule, mut report: OptimizerReport) -> Result<(PhaseSchedule, OptimizerReport)> {
    let metric = ortho_metric(&sensing_matrix(cfg, &sched)?)?;
    let loss = refine_loss(cfg, &sched)?;
    report.final_ortho_metric = metric;
    report.final_loss = loss.value;
    report.clamped |= loss.clamped;
    report.accepted = metric <= report.threshold;
    Ok((sched, report))
}

/// Discrete-phase design through the annealed softmax relaxation. The
/// returned schedule is hard-quantized to the grid.
pub fn optimize_discrete(cfg: &SceneConfig, seed: u64) -> Result<(PhaseSchedule, OptimizerReport)> {
    cfg.validate()?;
    let levels = cfg
        .n_bit
        .levels()
        .ok_or_else(|| Error::Config("discrete optimization needs a finite n_bit".into()))?;
    let scene = Scene::new(cfg)?;
    let mut wrng = rng::stream(seed, 0, StreamTag::Weights);
    let init = SoftWeights::random(cfg.total_len(), cfg.n_ris, levels, &mut wrng);
    let grid = init.grid.clone();
    let (w, _, report, _) = optimize_with(cfg, &scene, seed, Soft { grid }, init.w.clone())?;
    let mut sw = init;
    sw.w = w;
    finish(cfg, sw.hard_quantize(), report)
}

/// Continuous-phase design by gradient steps directly on the phases.
pub fn optimize_continuous(cfg: &SceneConfig, seed: u64) -> Result<(PhaseSchedule, OptimizerReport)> {
    cfg.validate()?;
    if cfg.n_bit != PhaseResolution::Continuous {
        return Err(Error::Config("continuous optimization needs n_bit = continuous".into()));
    }
    let scene = Scene::new(cfg)?;
    let mut prng = rng::stream(seed, 0, StreamTag::Optimizer);
    let init = PhaseSchedule::random(cfg.total_len(), cfg.n_ris, &mut prng);
    let (p, _, report, _) = optimize_with(cfg, &scene, seed, Raw, init.as_slice().to_vec())?;
    let p = p.into_iter().map(wrap_phase).collect();
    finish(cfg, PhaseSchedule::new(cfg.total_len(), cfg.n_ris, p)?, report)
}

/// Dispatches on `cfg.n_bit`.
pub fn optimize(cfg: &SceneConfig, seed: u64) -> Result<(PhaseSchedule, OptimizerReport)> {
    match cfg.n_bit {
        PhaseResolution::Continuous => optimize_continuous(cfg, seed),
        PhaseResolution::Bits(_) => optimize_discrete(cfg, seed),
    }
}
