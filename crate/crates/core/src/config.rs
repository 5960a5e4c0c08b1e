//! Experiment configuration and its flat `key = value` file format.
//!
//! Every field of [`SceneConfig`] can be set from a text file with one
//! `key = value` pair per line (`#` starts a comment). Keys are the field
//! names. `roi_angles` accepts either an explicit comma separated list or a
//! range `start..end`, which expands to `n_pixels` equispaced angles.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Phase quantization of the RIS elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseResolution {
    /// `2^bits` equispaced phases on `[0, 2π)`.
    Bits(u8),
    Continuous,
}

impl PhaseResolution {
    pub fn levels(self) -> Option<usize> {
        match self {
            PhaseResolution::Bits(b) => Some(1usize << b),
            PhaseResolution::Continuous => None,
        }
    }
}

impl FromStr for PhaseResolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("continuous") || s.eq_ignore_ascii_case("inf") {
            return Ok(PhaseResolution::Continuous);
        }
        let bits: u8 = s
            .parse()
            .map_err(|_| Error::Config(format!("n_bit must be 1..16 or 'continuous', got '{s}'")))?;
        if !(1..=16).contains(&bits) {
            return Err(Error::Config(format!("n_bit must be 1..16, got {bits}")));
        }
        Ok(PhaseResolution::Bits(bits))
    }
}

impl fmt::Display for PhaseResolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseResolution::Bits(b) => write!(f, "{b}"),
            PhaseResolution::Continuous => write!(f, "continuous"),
        }
    }
}

/// Threshold on the sensing-matrix orthogonality metric.
///
/// `Relative(f)` resolves to `f` times the metric reached by the
/// initialization stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrthoThreshold {
    Absolute(f64),
    Relative(f64),
}

impl OrthoThreshold {
    pub fn resolve(self, init_metric: f64) -> f64 {
        match self {
            OrthoThreshold::Absolute(v) => v,
            OrthoThreshold::Relative(f) => f * init_metric,
        }
    }
}

impl FromStr for OrthoThreshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("ortho_threshold: expected a number or 'rel:<factor>', got '{s}'"));
        if let Some(rest) = s.strip_prefix("rel:") {
            let f: f64 = rest.trim().parse().map_err(|_| bad())?;
            if !(f > 0.0) {
                return Err(bad());
            }
            Ok(OrthoThreshold::Relative(f))
        } else {
            let v: f64 = s.parse().map_err(|_| bad())?;
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("ortho_threshold must lie in (0, 1), got {v}")));
            }
            Ok(OrthoThreshold::Absolute(v))
        }
    }
}

impl fmt::Display for OrthoThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrthoThreshold::Absolute(v) => write!(f, "{v}"),
            OrthoThreshold::Relative(v) => write!(f, "rel:{v}"),
        }
    }
}

/// How the imaging term of the gain objective aggregates over pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImagingGainNorm {
    /// `‖g^T Θ H_I‖² / M`: mean power per RoI pixel.
    PerPixel,
    /// `‖g^T Θ H_I‖²`: summed over pixels.
    Total,
}

impl FromStr for ImagingGainNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "per_pixel" | "mean" => Ok(ImagingGainNorm::PerPixel),
            "total" | "sum" => Ok(ImagingGainNorm::Total),
            other => Err(Error::Config(format!("imaging_gain_norm: unknown value '{other}'"))),
        }
    }
}

/// Denominator used for the SBL noise update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseRule {
    /// `L - Σ γ_m`, held at the previous value when non-positive.
    Adaptive,
    /// `L - Σ (1 - γ_m Σ_mm)`, the classic evidence-maximizing form.
    Standard,
}

impl FromStr for NoiseRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "adaptive" => Ok(NoiseRule::Adaptive),
            "standard" => Ok(NoiseRule::Standard),
            other => Err(Error::Config(format!("sbl_noise_rule: unknown value '{other}'"))),
        }
    }
}

/// All physical and algorithmic constants of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_ris: usize,
    pub n_pixels: usize,
    pub frame_len: usize,
    pub delay: usize,
    /// BS direction in degrees.
    pub theta_bs: f64,
    /// UE direction in degrees.
    pub theta_ue: f64,
    /// RoI pixel directions in degrees, strictly increasing.
    pub roi_angles: Vec<f64>,
    pub alpha_c: f64,
    pub alpha_i: f64,
    /// Total complex noise variance ξ².
    pub noise_var: f64,
    pub n_bit: PhaseResolution,
    pub rho: f64,
    pub ortho_threshold: OrthoThreshold,
    pub temp_rate: f64,
    pub learning_rate: f64,
    pub decoder_max_iters: usize,
    pub decoder_tol: f64,
    pub gamma_rate: f64,

    pub stage1_max_iters: usize,
    pub stage1_tol: f64,
    pub stage2_max_iters: usize,
    pub stage2_tol: f64,
    /// Discrete runs keep refining until the temperature reaches this value.
    pub anneal_target: f64,
    /// RMS logit step of the first annealed refinement iteration; later
    /// steps keep the same per-row scale.
    pub anneal_step: f64,
    pub imaging_gain_norm: ImagingGainNorm,
    pub sbl_max_iters: usize,
    pub sbl_tol: f64,
    pub sbl_noise_rule: NoiseRule,
    /// Message damping factor in (0, 1]; 1 disables damping.
    pub damping: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let n_pixels = 64;
        SceneConfig {
            n_ris: 150,
            n_pixels,
            frame_len: 1024,
            delay: 1,
            theta_bs: -45.0,
            theta_ue: 70.0,
            roi_angles: linspace(15.0, 50.0, n_pixels),
            alpha_c: 1.0,
            alpha_i: 1.0,
            noise_var: 1.0,
            n_bit: PhaseResolution::Continuous,
            rho: 0.5,
            ortho_threshold: OrthoThreshold::Absolute(0.1),
            temp_rate: 0.005,
            learning_rate: 0.001,
            decoder_max_iters: 10,
            decoder_tol: 1e-6,
            gamma_rate: 1e-6,
            stage1_max_iters: 5000,
            stage1_tol: 1e-4,
            stage2_max_iters: 5000,
            stage2_tol: 1e-10,
            anneal_target: 100.0,
            anneal_step: 0.5,
            imaging_gain_norm: ImagingGainNorm::PerPixel,
            sbl_max_iters: 200,
            sbl_tol: 1e-6,
            sbl_noise_rule: NoiseRule::Standard,
            damping: 1.0,
        }
    }
}

pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

impl SceneConfig {
    /// Geometry used for the numerical results: N = 150, M = 64, L = 1024.
    pub fn full() -> Self {
        Self::default()
    }

    /// Laptop-sized variant (N = 32, M = 16, L = 256) of the same geometry.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.n_ris = 32;
        cfg.n_pixels = 16;
        cfg.frame_len = 256;
        cfg.roi_angles = linspace(15.0, 50.0, 16);
        cfg.ortho_threshold = OrthoThreshold::Relative(1.5);
        cfg
    }

    pub fn total_len(&self) -> usize {
        self.frame_len + self.delay
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        cfg.apply_str(&text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply_pairs(&pairs)?;
        self.validate()
    }

    /// Applies a batch of overrides. `n_pixels` is handled before
    /// `roi_angles` so that range syntax expands to the right length.
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut roi = None;
        for (k, v) in pairs {
            match k.as_str() {
                "roi_angles" => roi = Some(v.clone()),
                _ => self.set(k, v)?,
            }
        }
        if let Some(v) = roi {
            self.set("roi_angles", &v)?;
        }
        Ok(())
    }

    /// Sets one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
        }
        match key {
            "n_ris" => self.n_ris = num(key, value)?,
            "n_pixels" => {
                let m: usize = num(key, value)?;
                if m != self.roi_angles.len() && !self.roi_angles.is_empty() {
                    let lo = self.roi_angles[0];
                    let hi = *self.roi_angles.last().unwrap();
                    self.roi_angles = linspace(lo, hi, m);
                }
                self.n_pixels = m;
            }
            "frame_len" => self.frame_len = num(key, value)?,
            "delay" => self.delay = num(key, value)?,
            "theta_bs" => self.theta_bs = num(key, value)?,
            "theta_ue" => self.theta_ue = num(key, value)?,
            "roi_angles" => {
                if let Some((a, b)) = value.split_once("..") {
                    let lo: f64 = num(key, a)?;
                    let hi: f64 = num(key, b)?;
                    self.roi_angles = linspace(lo, hi, self.n_pixels);
                } else {
                    self.roi_angles = value
                        .split(',')
                        .map(|s| num::<f64>(key, s))
                        .collect::<Result<_>>()?;
                    self.n_pixels = self.roi_angles.len();
                }
            }
            "alpha_c" => self.alpha_c = num(key, value)?,
            "alpha_i" => self.alpha_i = num(key, value)?,
            "noise_var" => self.noise_var = num(key, value)?,
            "n_bit" => self.n_bit = value.parse()?,
            "rho" => self.rho = num(key, value)?,
            "ortho_threshold" => self.ortho_threshold = value.parse()?,
            "temp_rate" => self.temp_rate = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "decoder_max_iters" => self.decoder_max_iters = num(key, value)?,
            "decoder_tol" => self.decoder_tol = num(key, value)?,
            "gamma_rate" => self.gamma_rate = num(key, value)?,
            "stage1_max_iters" => self.stage1_max_iters = num(key, value)?,
            "stage1_tol" => self.stage1_tol = num(key, value)?,
            "stage2_max_iters" => self.stage2_max_iters = num(key, value)?,
            "stage2_tol" => self.stage2_tol = num(key, value)?,
            "anneal_target" => self.anneal_target = num(key, value)?,
            "anneal_step" => self.anneal_step = num(key, value)?,
            "imaging_gain_norm" => self.imaging_gain_norm = value.parse()?,
            "sbl_max_iters" => self.sbl_max_iters = num(key, value)?,
            "sbl_tol" => self.sbl_tol = num(key, value)?,
            "sbl_noise_rule" => self.sbl_noise_rule = value.parse()?,
            "damping" => self.damping = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_ris == 0 || self.n_pixels == 0 || self.frame_len == 0 {
            return fail("n_ris, n_pixels and frame_len must be positive".into());
        }
        if self.delay >= self.frame_len {
            return fail(format!("delay {} must be < frame_len {}", self.delay, self.frame_len));
        }
        if self.roi_angles.len() != self.n_pixels {
            return fail(format!(
                "roi_angles has {} entries but n_pixels = {}",
                self.roi_angles.len(),
                self.n_pixels
            ));
        }
        for &a in [self.theta_bs, self.theta_ue].iter().chain(&self.roi_angles) {
            if !(a > -90.0 && a < 90.0) {
                return Err(Error::AngleOutOfRange(a));
            }
        }
        if self.roi_angles.windows(2).any(|w| w[1] <= w[0]) {
            return fail("roi_angles must be strictly increasing".into());
        }
        if !(self.alpha_c >= 0.0 && self.alpha_i >= 0.0) {
            return fail("alpha_c and alpha_i must be nonnegative".into());
        }
        if !(self.noise_var >= 0.0) {
            return fail("noise_var must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return fail(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.temp_rate > 0.0 && self.learning_rate > 0.0 && self.anneal_step > 0.0) {
            return fail("temp_rate, learning_rate and anneal_step must be positive".into());
        }
        if self.decoder_max_iters == 0 || !(self.decoder_tol > 0.0) {
            return fail("decoder_max_iters and decoder_tol must be positive".into());
        }
        if !(self.gamma_rate > 0.0) {
            return fail("gamma_rate must be positive".into());
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return fail(format!("damping must lie in (0, 1], got {}", self.damping));
        }
        if self.sbl_max_iters == 0 {
            return fail("sbl_max_iters must be positive".into());
        }
        Ok(())
    }

    /// Renders the configuration in the same `key = value` format it loads.
    pub fn to_kv_string(&self) -> String {
        let roi: Vec<String> = self.roi_angles.iter().map(|a| format!("{a}")).collect();
        let norm = match self.imaging_gain_norm {
            ImagingGainNorm::PerPixel => "per_pixel",
            ImagingGainNorm::Total => "total",
        };
        let rule = match self.sbl_noise_rule {
            NoiseRule::Adaptive => "adaptive",
            NoiseRule::Standard => "standard",
        };
        format!(
            "n_ris = {}\nn_pixels = {}\nframe_len = {}\ndelay = {}\ntheta_bs = {}\ntheta_ue = {}\n\
             roi_angles = {}\nalpha_c = {}\nalpha_i = {}\nnoise_var = {}\nn_bit = {}\nrho = {}\n\
             ortho_threshold = {}\ntemp_rate = {}\nlearning_rate = {}\ndecoder_max_iters = {}\n\
             decoder_tol = {}\ngamma_rate = {}\nstage1_max_iters = {}\nstage1_tol = {}\n\
             stage2_max_iters = {}\nstage2_tol = {}\nanneal_target = {}\nanneal_step = {}\nimaging_gain_norm = {}\n\
             sbl_max_iters = {}\nsbl_tol = {}\nsbl_noise_rule = {}\ndamping = {}\n",
            self.n_ris,
            self.n_pixels,
            self.frame_len,
            self.delay,
            self.theta_bs,
            self.theta_ue,
            roi.join(", "),
            self.alpha_c,
            self.alpha_i,
            self.noise_var,
            self.n_bit,
            self.rho,
            self.ortho_threshold,
            self.temp_rate,
            self.learning_rate,
            self.decoder_max_iters,
            self.decoder_tol,
            self.gamma_rate,
            self.stage1_max_iters,
            self.stage1_tol,
            self.stage2_max_iters,
            self.stage2_tol,
            self.anneal_target,
            self.anneal_step,
            norm,
            self.sbl_max_iters,
            self.sbl_tol,
            rule,
            self.damping,
        )
    }
}
