//! Message passing over the echo-coupled factor graph.
//!
//! Every observation `y_t` mixes the communication term `c_t x_t` with the
//! echo `h_{t−k} x_{t−k}`. A symbol therefore receives a forward message
//! through its own communication node and a backward message through the
//! echo it produces `k` samples later. Messages are complex scalar
//! Gaussians; the discrete QPSK prior enters through moment matching.

use crate::config::{NoiseRule, SceneConfig};
use crate::error::{check_len, Error, Result};
use crate::sbl::{build_residual_link, link_gram, run_sbl, SparseEstimate};
use crate::scene::{qpsk_index, LinkModel, PhaseSchedule, ReceivedFrame, Scene, SymbolFrame, C64, QPSK};

/// Coefficients below this magnitude carry no information.
const TINY: f64 = 1e-12;
/// Lower bound on the observation noise variance.
const NOISE_FLOOR: f64 = 1e-12;

/// Complex Gaussian message with `weight = 1 / variance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarGaussian {
    pub mean: C64,
    pub weight: f64,
}

impl ScalarGaussian {
    pub fn uninformative() -> Self {
        ScalarGaussian {
            mean: C64::new(0.0, 0.0),
            weight: 0.0,
        }
    }

    pub fn from_variance(mean: C64, var: f64) -> Self {
        ScalarGaussian { mean, weight: 1.0 / var }
    }

    pub fn variance(&self) -> f64 {
        1.0 / self.weight
    }

    /// Product of two densities.
    pub fn product(&self, other: &ScalarGaussian) -> ScalarGaussian {
        let w = self.weight + other.weight;
        if w == 0.0 {
            return ScalarGaussian::uninformative();
        }
        ScalarGaussian {
            mean: (self.mean * self.weight + other.mean * other.weight) / w,
            weight: w,
        }
    }

    fn is_finite(&self) -> bool {
        self.mean.re.is_finite() && self.mean.im.is_finite() && !self.weight.is_nan()
    }

    fn damped(&self, old: &ScalarGaussian, lambda: f64) -> ScalarGaussian {
        ScalarGaussian {
            mean: self.mean * lambda + old.mean * (1.0 - lambda),
            weight: self.weight * lambda + old.weight * (1.0 - lambda),
        }
    }
}

/// First two moments of the QPSK prior tilted by a Gaussian message.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: C64,
    pub var: f64,
    pub probs: [f64; 4],
}

/// Normalized `exp(logits)` computed with max subtraction.
fn normalize_logits(logits: [f64; 4]) -> [f64; 4] {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = logits.map(|l| (l - top).exp());
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

fn tilt_logits(msg: &ScalarGaussian) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (o, s) in out.iter_mut().zip(QPSK) {
        *o = -(s - msg.mean).norm_sqr() * msg.weight;
    }
    out
}

pub fn moment_match(msg: &ScalarGaussian) -> Moments {
    if msg.weight <= 0.0 {
        return Moments {
            mean: C64::new(0.0, 0.0),
            var: 1.0,
            probs: [0.25; 4],
        };
    }
    let probs = normalize_logits(tilt_logits(msg));
    let mean: C64 = probs.iter().zip(QPSK).map(|(p, s)| s * p).sum();
    let var = probs.iter().zip(QPSK).map(|(p, s)| p * (s - mean).norm_sqr()).sum();
    Moments { mean, var, probs }
}

/// `α_c g^T Θ(t) h_c` for `1 ≤ t ≤ L`.
pub fn comm_scalar(cfg: &SceneConfig, sched: &PhaseSchedule, t: usize) -> Result<C64> {
    if t == 0 || t > cfg.frame_len {
        return Err(Error::Config(format!("time index {t} outside 1..={}", cfg.frame_len)));
    }
    sched.check_shape(cfg)?;
    Ok(Scene::new(cfg)?.comm_gain(sched.row(t - 1)) * cfg.alpha_c)
}

/// Observation `y = coef·x + n` with `n ~ CN(0, var)` seen as a message on `x`.
fn divide_out(y: C64, coef: C64, var: f64) -> ScalarGaussian {
    if coef.norm() < TINY {
        return ScalarGaussian::uninformative();
    }
    ScalarGaussian {
        mean: y / coef,
        weight: coef.norm_sqr() / var,
    }
}

/// Forward message for a sample without echo.
pub fn fwd_msg_pure_comm(y: C64, c: C64, noise_var: f64) -> ScalarGaussian {
    divide_out(y, c, noise_var)
}

/// Forward message with the echo of `x_{t−k}` subtracted.
pub fn fwd_msg_overlap(y: C64, c: C64, m_h: C64, prev: &Moments, noise_var: f64) -> ScalarGaussian {
    let mean_b = m_h * prev.mean;
    let var_b = m_h.norm_sqr() * prev.var;
    divide_out(y - mean_b, c, noise_var + var_b)
}

/// Backward message from a pure-echo sample `y_{t+k}`.
pub fn bwd_msg_tail(y: C64, m_h: C64, noise_var: f64) -> ScalarGaussian {
    divide_out(y, m_h, noise_var)
}

/// Backward message from `y_{t+k}` with the communication term of
/// `x_{t+k}` subtracted.
pub fn bwd_msg_mid(y: C64, m_h: C64, c_next: C64, next: &Moments, noise_var: f64) -> ScalarGaussian {
    let mean_a = c_next * next.mean;
    let var_a = c_next.norm_sqr() * next.var;
    divide_out(y - mean_a, m_h, noise_var + var_a)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymbolBelief {
    pub probs: [f64; 4],
    /// 1-based constellation index.
    pub decided: usize,
}

pub fn belief_and_decide(fwd: &ScalarGaussian, bwd: &ScalarGaussian) -> SymbolBelief {
    if fwd.weight <= 0.0 && bwd.weight <= 0.0 {
        return SymbolBelief {
            probs: [0.25; 4],
            decided: 1,
        };
    }
    let mut logits = [0.0; 4];
    for (l, (a, b)) in logits.iter_mut().zip(tilt_logits(fwd).iter().zip(tilt_logits(bwd))) {
        *l = a + b;
    }
    let mut decided = 0;
    for i in 1..4 {
        if logits[i] > logits[decided] {
            decided = i;
        }
    }
    SymbolBelief {
        probs: normalize_logits(logits),
        decided: decided + 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub fwd_msgs: Vec<ScalarGaussian>,
    pub bwd_msgs: Vec<ScalarGaussian>,
    /// `m_{h_t}` for `t = 1..=L`.
    pub h_point: Vec<C64>,
    pub beliefs: Vec<SymbolBelief>,
}

impl DecoderState {
    fn new(l: usize) -> Self {
        DecoderState {
            fwd_msgs: vec![ScalarGaussian::uninformative(); l],
            bwd_msgs: vec![ScalarGaussian::uninformative(); l],
            h_point: vec![C64::new(0.0, 0.0); l],
            beliefs: Vec::with_capacity(l),
        }
    }
}

/// Produces a scene estimate from the current symbol decisions.
pub trait Imager {
    fn image(&mut self, link: &LinkModel, y: &[C64], x_hat: &SymbolFrame) -> Result<SparseEstimate>;
}

/// Sparse Bayesian learning on the residual, restarted on every call.
#[derive(Debug, Clone)]
pub struct SblImager {
    pub gamma_rate: f64,
    pub rule: NoiseRule,
    pub max_iters: usize,
    pub tol: f64,
    gram: Option<Vec<C64>>,
}

impl SblImager {
    pub fn new(gamma_rate: f64, rule: NoiseRule, max_iters: usize, tol: f64) -> Self {
        SblImager {
            gamma_rate,
            rule,
            max_iters,
            tol,
            gram: None,
        }
    }

    pub fn from_config(cfg: &SceneConfig) -> Self {
        Self::new(cfg.gamma_rate, cfg.sbl_noise_rule, cfg.sbl_max_iters, cfg.sbl_tol)
    }
}

impl Imager for SblImager {
    fn image(&mut self, link: &LinkModel, y: &[C64], x_hat: &SymbolFrame) -> Result<SparseEstimate> {
        let gram = self.gram.get_or_insert_with(|| link_gram(link));
        let sys = build_residual_link(link, y, x_hat, Some(gram))?;
        run_sbl(&sys, SparseEstimate::initial(&sys), self.gamma_rate, self.rule, self.max_iters, self.tol)
    }
}

/// Always returns the same scene.
#[derive(Debug, Clone)]
pub struct KnownScene(pub Vec<C64>);

impl Imager for KnownScene {
    fn image(&mut self, _link: &LinkModel, _y: &[C64], _x_hat: &SymbolFrame) -> Result<SparseEstimate> {
        Ok(SparseEstimate::known(self.0.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderOptions {
    pub noise_var: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub damping: f64,
}

impl DecoderOptions {
    pub fn from_config(cfg: &SceneConfig) -> Self {
        DecoderOptions {
            noise_var: cfg.noise_var,
            max_iters: cfg.decoder_max_iters,
            tol: cfg.decoder_tol,
            damping: cfg.damping,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub symbols: SymbolFrame,
    pub estimate: SparseEstimate,
    pub iterations: usize,
    pub converged: bool,
    /// `Δ` after each outer iteration.
    pub deltas: Vec<f64>,
    pub state: DecoderState,
}

fn sweep(link: &LinkModel, y: &[C64], noise_var: f64, state: &mut DecoderState, damping: f64, first: bool) {
    let l = link.frame_len;
    let k = link.delay;
    for t in 1..=l {
        let c = link.comm_scalar(t);
        let msg = if t <= k {
            fwd_msg_pure_comm(y[t - 1], c, noise_var)
        } else {
            let prev = moment_match(&state.fwd_msgs[t - k - 1]);
            fwd_msg_overlap(y[t - 1], c, state.h_point[t - k - 1], &prev, noise_var)
        };
        state.fwd_msgs[t - 1] = if first { msg } else { msg.damped(&state.fwd_msgs[t - 1], damping) };
    }
    for t in (1..=l).rev() {
        let m_h = state.h_point[t - 1];
        let msg = if t + k > l {
            bwd_msg_tail(y[t + k - 1], m_h, noise_var)
        } else {
            let next = moment_match(&state.bwd_msgs[t + k - 1]);
            bwd_msg_mid(y[t + k - 1], m_h, link.comm_scalar(t + k), &next, noise_var)
        };
        state.bwd_msgs[t - 1] = if first { msg } else { msg.damped(&state.bwd_msgs[t - 1], damping) };
    }
    state.beliefs = state
        .fwd_msgs
        .iter()
        .zip(&state.bwd_msgs)
        .map(|(f, b)| belief_and_decide(f, b))
        .collect();
}

fn distance(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
}

/// Alternates message sweeps with scene estimation until the decisions
/// and the scene stop moving.
pub fn decode_link(link: &LinkModel, y: &[C64], imager: &mut dyn Imager, opts: &DecoderOptions) -> Result<DecodeOutput> {
    let l = link.frame_len;
    check_len("received frame", l + link.delay, y.len())?;
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::Config(format!("damping must lie in (0, 1], got {}", opts.damping)));
    }
    let noise_var = opts.noise_var.max(NOISE_FLOOR);
    let mut state = DecoderState::new(l);
    let mut sigma = vec![C64::new(0.0, 0.0); link.n_pixels];
    let mut x_prev = vec![C64::new(0.0, 0.0); l];
    let mut deltas = Vec::new();
    let mut estimate = SparseEstimate::known(sigma.clone());
    let mut symbols = SymbolFrame { symbols: x_prev.clone() };
    let mut converged = false;
    for p in 1..=opts.max_iters.max(1) {
        state.h_point = link.imaging_response(&sigma);
        sweep(link, y, noise_var, &mut state, opts.damping, p == 1);
        if !state.fwd_msgs.iter().chain(&state.bwd_msgs).all(ScalarGaussian::is_finite) {
            return Err(Error::NumericalFailure { iteration: p });
        }
        let decided: Vec<usize> = state.beliefs.iter().map(|b| b.decided).collect();
        symbols = SymbolFrame::from_indices(&decided);
        estimate = imager.image(link, y, &symbols)?;
        if estimate.sigma.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NumericalFailure { iteration: p });
        }
        let delta = distance(&symbols.symbols, &x_prev) + distance(&estimate.sigma, &sigma);
        deltas.push(delta);
        x_prev.clone_from(&symbols.symbols);
        sigma.clone_from(&estimate.sigma);
        if delta <= opts.tol {
            converged = true;
            break;
        }
    }
    Ok(DecodeOutput {
        symbols,
        estimate,
        iterations: deltas.len(),
        converged,
        deltas,
        state,
    })
}

pub fn run_decoder(cfg: &SceneConfig, sched: &PhaseSchedule, y: &ReceivedFrame, imager: &mut dyn Imager) -> Result<DecodeOutput> {
    cfg.validate()?;
    let link = Scene::new(cfg)?.link(cfg, sched)?;
    decode_link(&link, &y.samples, imager, &DecoderOptions::from_config(cfg))
}

/// Per-symbol nearest point of `y_t / c_t`, treating the echo as absent.
pub fn detect_ignoring_echo(link: &LinkModel, y: &[C64]) -> Result<SymbolFrame> {
    check_len("received frame", link.frame_len + link.delay, y.len())?;
    let idx: Vec<usize> = (1..=link.frame_len)
        .map(|t| {
            let c = link.comm_scalar(t);
            if c.norm() < TINY {
                1
            } else {
                qpsk_index(y[t - 1] / c)
            }
        })
        .collect();
    Ok(SymbolFrame::from_indices(&idx))
}
