//! Array geometry, RIS phase schedules and the three-segment received signal.
//!
//! Time indices in the public API are 1-based, matching the signal model:
//! communication symbols live on `t = 1..=L`, received samples on
//! `t = 1..=L+k`. Storage is 0-based, so sample `t` sits at index `t - 1`.

use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::SceneConfig;
use crate::error::{check_len, Error, Result};
use crate::rng::{self, StreamTag};

pub type C64 = Complex64;

/// The four QPSK points `e^{j(π/2·i − π/4)}` for `i = 1..=4`.
pub const QPSK: [C64; 4] = [
    C64::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2),
    C64::new(-FRAC_1_SQRT_2, FRAC_1_SQRT_2),
    C64::new(-FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
    C64::new(FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
];

/// Constellation point for a 1-based index.
pub fn qpsk_point(index: usize) -> C64 {
    QPSK[index - 1]
}

/// 1-based index of the nearest QPSK point; ties go to the smaller index.
pub fn qpsk_index(symbol: C64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, s) in QPSK.iter().enumerate() {
        let d = (s - symbol).norm_sqr();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best + 1
}

fn check_angle(theta_deg: f64) -> Result<()> {
    if theta_deg > -90.0 && theta_deg < 90.0 {
        Ok(())
    } else {
        Err(Error::AngleOutOfRange(theta_deg))
    }
}

/// Half-wavelength ULA response: entry `i` is `exp(jπ·i·sin θ)`.
pub fn steering_vector(theta_deg: f64, n: usize) -> Result<Vec<C64>> {
    check_angle(theta_deg)?;
    let s = theta_deg.to_radians().sin();
    Ok((0..n).map(|i| C64::from_polar(1.0, PI * i as f64 * s)).collect())
}

/// Applies `diag(e^{jθ_1}, …, e^{jθ_N})` to `v`.
pub fn phase_matrix_apply(phase_row: &[f64], v: &[C64]) -> Result<Vec<C64>> {
    check_len("phase row vs vector", phase_row.len(), v.len())?;
    Ok(phase_row
        .iter()
        .zip(v)
        .map(|(&th, &x)| C64::from_polar(1.0, th) * x)
        .collect())
}

/// Admissible phases `2πq / 2^bits`.
pub fn phase_grid(levels: usize) -> Vec<f64> {
    (0..levels).map(|q| TAU * q as f64 / levels as f64).collect()
}

pub fn wrap_phase(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// RIS phases `θ_{t,n}` for every received time index.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSchedule {
    rows: usize,
    n_ris: usize,
    phases: Vec<f64>,
}

impl PhaseSchedule {
    pub fn new(rows: usize, n_ris: usize, phases: Vec<f64>) -> Result<Self> {
        check_len("schedule entries", rows * n_ris, phases.len())?;
        Ok(PhaseSchedule {
            rows,
            n_ris,
            phases,
        })
    }

    pub fn zeros(rows: usize, n_ris: usize) -> Self {
        PhaseSchedule {
            rows,
            n_ris,
            phases: vec![0.0; rows * n_ris],
        }
    }

    pub fn from_fn(rows: usize, n_ris: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut phases = Vec::with_capacity(rows * n_ris);
        for t in 0..rows {
            for n in 0..n_ris {
                phases.push(f(t, n));
            }
        }
        PhaseSchedule {
            rows,
            n_ris,
            phases,
        }
    }

    /// Independent uniform phases on `[0, 2π)`.
    pub fn random(rows: usize, n_ris: usize, rng: &mut impl Rng) -> Self {
        Self::from_fn(rows, n_ris, |_, _| rng.random_range(0.0..TAU))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn n_ris(&self) -> usize {
        self.n_ris
    }

    /// Phases of 0-based row `r` (time index `r + 1`).
    pub fn row(&self, r: usize) -> &[f64] {
        &self.phases[r * self.n_ris..(r + 1) * self.n_ris]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.phases[r * self.n_ris..(r + 1) * self.n_ris]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.phases
    }

    /// True when every entry sits on the `levels`-point grid to within 1e-12.
    pub fn is_on_grid(&self, levels: usize) -> bool {
        let step = TAU / levels as f64;
        self.phases.iter().all(|&p| {
            let q = (p / step).round();
            (p - q * step).abs() <= 1e-12 && q >= 0.0 && (q as usize) < levels
        })
    }

    pub fn check_shape(&self, cfg: &SceneConfig) -> Result<()> {
        check_len("schedule rows (L + k)", cfg.total_len(), self.rows)?;
        check_len("schedule columns (N)", cfg.n_ris, self.n_ris)
    }
}

/// One frame of QPSK symbols `x(1..=L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolFrame {
    pub symbols: Vec<C64>,
}

impl SymbolFrame {
    pub fn from_indices(indices: &[usize]) -> Self {
        SymbolFrame {
            symbols: indices.iter().map(|&i| qpsk_point(i)).collect(),
        }
    }

    pub fn random(len: usize, rng: &mut impl Rng) -> Self {
        SymbolFrame {
            symbols: (0..len).map(|_| QPSK[rng.random_range(0..4)]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.symbols.iter().map(|&s| qpsk_index(s)).collect()
    }
}

/// Received samples `y(1..=L+k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedFrame {
    pub samples: Vec<C64>,
    pub noise_seed: u64,
}

impl ReceivedFrame {
    /// Sample at 1-based time `t`.
    pub fn at(&self, t: usize) -> C64 {
        self.samples[t - 1]
    }
}

/// Ground-truth scene reflectivities.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub sigma: Vec<C64>,
}

impl SceneTruth {
    pub fn new(sigma: Vec<C64>) -> Self {
        SceneTruth { sigma }
    }

    pub fn zeros(m: usize) -> Self {
        SceneTruth {
            sigma: vec![C64::new(0.0, 0.0); m],
        }
    }

    pub fn sparsity(&self) -> usize {
        self.sigma.iter().filter(|s| s.norm() > 0.0).count()
    }
}

/// Steering vectors of one geometry, folded with the BS vector `g` so that
/// `g^T Θ(t) v = Σ_n e^{jθ_{t,n}} (g ⊙ v)_n`.
#[derive(Debug, Clone)]
pub struct Scene {
    pub n_ris: usize,
    pub n_pixels: usize,
    pub g: Vec<C64>,
    pub h_c: Vec<C64>,
    /// `g ⊙ h_c`.
    pub comm_vec: Vec<C64>,
    /// `g ⊙ H_I`, row-major `N × M` (element-major, pixels contiguous).
    pub img_mat: Vec<C64>,
}

impl Scene {
    pub fn new(cfg: &SceneConfig) -> Result<Self> {
        let n = cfg.n_ris;
        let m = cfg.n_pixels;
        check_len("roi_angles", m, cfg.roi_angles.len())?;
        let g = steering_vector(cfg.theta_bs, n)?;
        let h_c = steering_vector(cfg.theta_ue, n)?;
        let cols = cfg
            .roi_angles
            .iter()
            .map(|&a| steering_vector(a, n))
            .collect::<Result<Vec<_>>>()?;
        let comm_vec = g.iter().zip(&h_c).map(|(a, b)| a * b).collect();
        let mut img_mat = vec![C64::new(0.0, 0.0); n * m];
        for i in 0..n {
            for (j, col) in cols.iter().enumerate() {
                img_mat[i * m + j] = g[i] * col[i];
            }
        }
        Ok(Scene {
            n_ris: n,
            n_pixels: m,
            g,
            h_c,
            comm_vec,
            img_mat,
        })
    }

    /// `g^T Θ h_c` for one phase row.
    pub fn comm_gain(&self, phases: &[f64]) -> C64 {
        phases
            .iter()
            .zip(&self.comm_vec)
            .map(|(&th, &u)| C64::from_polar(1.0, th) * u)
            .sum()
    }

    /// `g^T Θ H_I` for one phase row, written into `out` (length M).
    pub fn imaging_row_into(&self, phases: &[f64], out: &mut [C64]) {
        let m = self.n_pixels;
        out.iter_mut().for_each(|o| *o = C64::new(0.0, 0.0));
        for (i, &th) in phases.iter().enumerate() {
            let e = C64::from_polar(1.0, th);
            let row = &self.img_mat[i * m..(i + 1) * m];
            for (o, &b) in out.iter_mut().zip(row) {
                *o += e * b;
            }
        }
    }

    pub fn imaging_row(&self, phases: &[f64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.n_pixels];
        self.imaging_row_into(phases, &mut out);
        out
    }

    /// `g^T Θ a(θ)` for one phase row and an arbitrary direction.
    pub fn response(&self, phases: &[f64], theta_deg: f64) -> Result<C64> {
        let a = steering_vector(theta_deg, self.n_ris)?;
        Ok(phases
            .iter()
            .zip(self.g.iter().zip(&a))
            .map(|(&th, (&g, &a))| C64::from_polar(1.0, th) * g * a)
            .sum())
    }

    /// Per-time link coefficients of a schedule.
    pub fn link(&self, cfg: &SceneConfig, sched: &PhaseSchedule) -> Result<LinkModel> {
        sched.check_shape(cfg)?;
        let l = cfg.frame_len;
        let k = cfg.delay;
        let m = self.n_pixels;
        let comm = (0..sched.rows()).map(|r| self.comm_gain(sched.row(r))).collect();
        let mut sensing = vec![C64::new(0.0, 0.0); l * m];
        for (i, out) in sensing.chunks_mut(m).enumerate() {
            self.imaging_row_into(sched.row(k + i), out);
        }
        Ok(LinkModel {
            frame_len: l,
            delay: k,
            n_pixels: m,
            alpha_c: cfg.alpha_c,
            alpha_i: cfg.alpha_i,
            comm,
            sensing,
        })
    }
}

/// Time-varying link coefficients derived from a schedule.
#[derive(Debug, Clone)]
pub struct LinkModel {
    pub frame_len: usize,
    pub delay: usize,
    pub n_pixels: usize,
    pub alpha_c: f64,
    pub alpha_i: f64,
    /// `g^T Θ(t) h_c` for `t = 1..=L+k` (attenuation not applied).
    pub comm: Vec<C64>,
    /// Sensing matrix rows `g^T Θ(t) H_I` for `t = k+1..=L+k`, row-major
    /// `L × M` (attenuation not applied).
    pub sensing: Vec<C64>,
}

impl LinkModel {
    /// `α_c g^T Θ(t) h_c`, the coefficient of `x(t)` at 1-based time `t`.
    pub fn comm_scalar(&self, t: usize) -> C64 {
        self.comm[t - 1] * self.alpha_c
    }

    /// Sensing row for 1-based received time `t ∈ (k, L+k]`.
    pub fn sensing_row(&self, t: usize) -> &[C64] {
        let i = t - self.delay - 1;
        &self.sensing[i * self.n_pixels..(i + 1) * self.n_pixels]
    }

    /// `α_I g^T Θ(t) H_I σ` for every `t ∈ (k, L+k]`, indexed from 0.
    pub fn imaging_response(&self, sigma: &[C64]) -> Vec<C64> {
        self.sensing
            .chunks(self.n_pixels)
            .map(|row| row.iter().zip(sigma).map(|(a, b)| a * b).sum::<C64>() * self.alpha_i)
            .collect()
    }

    pub fn with_alphas(&self, alpha_c: f64, alpha_i: f64) -> LinkModel {
        LinkModel {
            alpha_c,
            alpha_i,
            ..self.clone()
        }
    }
}

/// Noise-free received signal under the three-segment model.
pub fn clean_signal(link: &LinkModel, frame: &SymbolFrame, truth: &SceneTruth) -> Result<Vec<C64>> {
    let l = link.frame_len;
    let k = link.delay;
    check_len("symbol frame", l, frame.len())?;
    check_len("scene vector", link.n_pixels, truth.sigma.len())?;
    let echo = link.imaging_response(&truth.sigma);
    let mut y = vec![C64::new(0.0, 0.0); l + k];
    for t in 1..=l + k {
        let mut v = C64::new(0.0, 0.0);
        if t <= l {
            v += link.comm_scalar(t) * frame.symbols[t - 1];
        }
        if t > k {
            v += echo[t - k - 1] * frame.symbols[t - k - 1];
        }
        y[t - 1] = v;
    }
    Ok(y)
}

/// Adds circular complex Gaussian noise of total variance `noise_var`.
pub fn add_noise(samples: &mut [C64], noise_var: f64, rng: &mut impl Rng) {
    let sd = (noise_var / 2.0).sqrt();
    for y in samples.iter_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *y += C64::new(re, im) * sd;
    }
}

/// Synthesizes `y(1..=L+k)` from a precomputed link model.
pub fn synth_with_link(
    link: &LinkModel,
    noise_var: f64,
    frame: &SymbolFrame,
    truth: &SceneTruth,
    seed: u64,
) -> Result<ReceivedFrame> {
    let mut samples = clean_signal(link, frame, truth)?;
    if noise_var > 0.0 {
        let mut rng = rng::stream(seed, 0, StreamTag::Noise);
        add_noise(&mut samples, noise_var, &mut rng);
    }
    Ok(ReceivedFrame {
        samples,
        noise_seed: seed,
    })
}

/// Synthesizes the received frame for a schedule, symbols and scene.
pub fn synth_received(
    cfg: &SceneConfig,
    sched: &PhaseSchedule,
    frame: &SymbolFrame,
    truth: &SceneTruth,
    seed: u64,
) -> Result<ReceivedFrame> {
    let scene = Scene::new(cfg)?;
    let link = scene.link(cfg, sched)?;
    synth_with_link(&link, cfg.noise_var, frame, truth, seed)
}

/// Mean communication and imaging powers before normalization by noise.
pub fn link_powers(link: &LinkModel, frame: &SymbolFrame, truth: &SceneTruth) -> Result<(f64, f64)> {
    let l = link.frame_len;
    check_len("symbol frame", l, frame.len())?;
    check_len("scene vector", link.n_pixels, truth.sigma.len())?;
    let p_c = (1..=l)
        .map(|t| (link.comm_scalar(t) * frame.symbols[t - 1]).norm_sqr())
        .sum::<f64>()
        / l as f64;
    let echo = link.imaging_response(&truth.sigma);
    let p_i = echo
        .iter()
        .zip(&frame.symbols)
        .map(|(h, x)| (h * x).norm_sqr())
        .sum::<f64>()
        / l as f64;
    Ok((p_c, p_i))
}

fn to_db(ratio: f64) -> f64 {
    if ratio > 0.0 {
        10.0 * ratio.log10()
    } else {
        f64::NEG_INFINITY
    }
}

/// `(CNR, INR)` in dB. A silent link reports `-∞`.
pub fn cnr_inr_link(link: &LinkModel, noise_var: f64, frame: &SymbolFrame, truth: &SceneTruth) -> Result<(f64, f64)> {
    if noise_var <= 0.0 {
        return Err(Error::InfiniteRatio);
    }
    let (p_c, p_i) = link_powers(link, frame, truth)?;
    Ok((to_db(p_c / noise_var), to_db(p_i / noise_var)))
}

pub fn cnr_inr(
    cfg: &SceneConfig,
    sched: &PhaseSchedule,
    frame: &SymbolFrame,
    truth: &SceneTruth,
) -> Result<(f64, f64)> {
    let scene = Scene::new(cfg)?;
    let link = scene.link(cfg, sched)?;
    cnr_inr_link(&link, cfg.noise_var, frame, truth)
}
