//! Monte Carlo harness: operating-point calibration, per-trial methods
//! and scenario sweeps with CSV and SVG output.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::config::SceneConfig;
use crate::decoder::{decode_link, detect_ignoring_echo, DecoderOptions, KnownScene, SblImager};
use crate::error::{Error, Result};
use crate::io::{write_rows, write_schedule, write_sigma};
use crate::optimizer::{optimize, OptimizerReport};
use crate::plot::{Chart, Series};
use crate::rng::{self, StreamTag};
use crate::sbl::{build_residual_link, run_sbl, SparseEstimate};
use crate::scene::{add_noise, clean_signal, link_powers, LinkModel, PhaseSchedule, Scene, SceneTruth, SymbolFrame, C64};

/// Detection and imaging strategies compared in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Iterative message passing with SBL imaging.
    Proposed,
    /// Nearest-point detection that treats the echo as absent.
    IgnoreEcho,
    /// Same detector on a frame synthesized without any echo.
    PureQpsk,
    /// The decoder with the true scene.
    GivenSigma,
    /// SBL with the true symbols.
    GivenX,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Proposed,
        Method::IgnoreEcho,
        Method::PureQpsk,
        Method::GivenSigma,
        Method::GivenX,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::IgnoreEcho => "ignore_echo",
            Method::PureQpsk => "pure_qpsk",
            Method::GivenSigma => "given_sigma",
            Method::GivenX => "given_x",
        }
    }

    pub fn detects(self) -> bool {
        self != Method::GivenX
    }

    pub fn images(self) -> bool {
        matches!(self, Method::Proposed | Method::GivenX)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Letter {
    X,
    D,
    U,
}

impl FromStr for Letter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "X" | "x" => Ok(Letter::X),
            "D" | "d" => Ok(Letter::D),
            "U" | "u" => Ok(Letter::U),
            other => Err(Error::Config(format!("unknown letter '{other}'"))),
        }
    }
}

pub const GRID: usize = 8;

const D_MASK: [&str; GRID] = [
    "######..", "#.....#.", "#......#", "#......#", "#......#", "#......#", "#.....#.", "######..",
];
const U_MASK: [&str; GRID] = [
    "#......#", "#......#", "#......#", "#......#", "#......#", "#......#", ".#....#.", "..####..",
];

/// Row-major 8×8 mask.
pub fn letter_mask(letter: Letter) -> [[bool; GRID]; GRID] {
    let mut mask = [[false; GRID]; GRID];
    for (r, row) in mask.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = match letter {
                Letter::X => r == c || r + c == GRID - 1,
                Letter::D => D_MASK[r].as_bytes()[c] == b'#',
                Letter::U => U_MASK[r].as_bytes()[c] == b'#',
            };
        }
    }
    mask
}

pub fn flatten_mask(mask: &[[bool; GRID]; GRID]) -> Vec<C64> {
    mask.iter()
        .flatten()
        .map(|&on| C64::new(if on { 1.0 } else { 0.0 }, 0.0))
        .collect()
}

pub fn unflatten_mask(sigma: &[C64]) -> Result<[[bool; GRID]; GRID]> {
    if sigma.len() != GRID * GRID {
        return Err(Error::Config(format!("a {GRID}×{GRID} grid needs {} pixels, got {}", GRID * GRID, sigma.len())));
    }
    let mut mask = [[false; GRID]; GRID];
    for (i, z) in sigma.iter().enumerate() {
        mask[i / GRID][i % GRID] = z.norm() > 0.0;
    }
    Ok(mask)
}

/// Unit-magnitude, zero-phase letter on the 8×8 pixel grid.
pub fn letter_scene(letter: Letter, n_pixels: usize) -> Result<SceneTruth> {
    if n_pixels != GRID * GRID {
        return Err(Error::Config(format!("letter scenes need M = {}, got {n_pixels}", GRID * GRID)));
    }
    Ok(SceneTruth::new(flatten_mask(&letter_mask(letter))))
}

/// Unit reflectors at the listed 0-based pixels.
pub fn spike_scene(n_pixels: usize, pixels: &[usize]) -> Result<SceneTruth> {
    let mut sigma = vec![C64::new(0.0, 0.0); n_pixels];
    for &p in pixels {
        if p >= n_pixels {
            return Err(Error::Config(format!("pixel {p} outside 0..{n_pixels}")));
        }
        sigma[p] = C64::new(1.0, 0.0);
    }
    Ok(SceneTruth::new(sigma))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SceneKind {
    Letter(Letter),
    Spikes(Vec<usize>),
}

impl SceneKind {
    pub fn truth(&self, n_pixels: usize) -> Result<SceneTruth> {
        match self {
            SceneKind::Letter(l) => letter_scene(*l, n_pixels),
            SceneKind::Spikes(p) => spike_scene(n_pixels, p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub cnr_db: f64,
    pub inr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub id: u8,
    pub sweep: Vec<SweepPoint>,
    pub scene: SceneKind,
    pub trials: usize,
}

fn steps(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step).round() as usize;
    (0..=n).map(|i| start + step * i as f64).collect()
}

impl ScenarioSpec {
    /// Scenario 1 keeps CNR − INR = 5 dB, scenario 2 fixes CNR = 12 dB and
    /// scenario 3 fixes INR = 6 dB. Letter scenes need 64 pixels; smaller
    /// grids use three point reflectors.
    pub fn standard(id: u8, n_pixels: usize, trials: usize) -> Result<Self> {
        let sweep: Vec<SweepPoint> = match id {
            1 => steps(6.0, 16.0, 2.0)
                .into_iter()
                .map(|c| SweepPoint { cnr_db: c, inr_db: c - 5.0 })
                .collect(),
            2 => steps(4.0, 8.0, 1.0)
                .into_iter()
                .map(|i| SweepPoint { cnr_db: 12.0, inr_db: i })
                .collect(),
            3 => steps(8.0, 16.0, 2.0)
                .into_iter()
                .map(|c| SweepPoint { cnr_db: c, inr_db: 6.0 })
                .collect(),
            other => return Err(Error::Config(format!("scenario must be 1, 2 or 3, got {other}"))),
        };
        let scene = if n_pixels == GRID * GRID {
            SceneKind::Letter([Letter::X, Letter::D, Letter::U][id as usize - 1])
        } else {
            let pixels = [n_pixels / 8, n_pixels / 2 - 1, n_pixels - n_pixels / 4];
            SceneKind::Spikes(pixels.to_vec())
        };
        Ok(ScenarioSpec {
            id,
            sweep,
            scene,
            trials,
        })
    }

    /// Scenario 2 sweeps INR; the others sweep CNR.
    pub fn sweeps_inr(&self) -> bool {
        self.id == 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Cnr(f64),
    Inr(f64),
}

fn unit_frame(l: usize) -> SymbolFrame {
    SymbolFrame::from_indices(&vec![1; l])
}

/// Noise variance putting the communication (or echo) power at the
/// target ratio. Powers do not depend on the unit-modulus symbols.
pub fn calibrate_noise(link: &LinkModel, truth: &SceneTruth, target: Target) -> Result<f64> {
    let (p_c, p_i) = link_powers(link, &unit_frame(link.frame_len), truth)?;
    let (p, db, what) = match target {
        Target::Cnr(db) => (p_c, db, "CNR"),
        Target::Inr(db) => (p_i, db, "INR"),
    };
    if db.is_nan() || db == f64::NEG_INFINITY {
        return Err(Error::InfeasibleTarget(format!("{what} target {db} dB")));
    }
    if p <= 0.0 {
        return Err(Error::InfeasibleTarget(format!("{what} of {db} dB with zero signal power")));
    }
    Ok(p / 10f64.powf(db / 10.0))
}

/// `(ξ², α_I)` reaching both ratios, with `α_c` held fixed. An infinite
/// CNR means a noiseless frame and keeps the link's `α_I`.
pub fn calibrate_point(link: &LinkModel, truth: &SceneTruth, point: SweepPoint) -> Result<(f64, f64)> {
    if point.cnr_db == f64::INFINITY {
        return Ok((0.0, link.alpha_i));
    }
    let noise_var = calibrate_noise(link, truth, Target::Cnr(point.cnr_db))?;
    let unit = link.with_alphas(link.alpha_c, 1.0);
    let (_, p_i) = link_powers(&unit, &unit_frame(link.frame_len), truth)?;
    if !point.inr_db.is_finite() {
        return Err(Error::InfeasibleTarget(format!("INR target {} dB", point.inr_db)));
    }
    if p_i <= 0.0 {
        return Err(Error::InfeasibleTarget(format!(
            "INR of {} dB with a silent echo path",
            point.inr_db
        )));
    }
    let alpha_i = (noise_var * 10f64.powf(point.inr_db / 10.0) / p_i).sqrt();
    Ok((noise_var, alpha_i))
}

/// Everything a trial needs at one operating point.
#[derive(Debug, Clone)]
pub struct PointContext {
    pub point: SweepPoint,
    pub link: LinkModel,
    pub noise_var: f64,
    pub truth: SceneTruth,
    pub decoder: DecoderOptions,
    pub imager: SblImager,
}

impl PointContext {
    pub fn new(cfg: &SceneConfig, base: &LinkModel, truth: &SceneTruth, point: SweepPoint) -> Result<Self> {
        let (noise_var, alpha_i) = calibrate_point(base, truth, point)?;
        let mut decoder = DecoderOptions::from_config(cfg);
        decoder.noise_var = noise_var;
        Ok(PointContext {
            point,
            link: base.with_alphas(base.alpha_c, alpha_i),
            noise_var,
            truth: truth.clone(),
            decoder,
            imager: SblImager::from_config(cfg),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub errors: usize,
    pub sigma_hat: Option<Vec<C64>>,
}

/// `10 log10(‖σ̂ − σ‖² / ‖σ‖²)`, floored at −300 dB.
pub fn nmse_db(estimate: &[C64], truth: &[C64]) -> f64 {
    let err: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b).norm_sqr()).sum();
    let power: f64 = truth.iter().map(|z| z.norm_sqr()).sum();
    10.0 * (err / power).max(1e-30).log10()
}

fn symbol_errors(a: &SymbolFrame, b: &SymbolFrame) -> usize {
    a.indices().iter().zip(b.indices()).filter(|(x, y)| **x != *y).count()
}

/// One trial of one method. Every method sees the same symbols and noise
/// for a given `(master_seed, trial)`.
pub fn run_trial(ctx: &PointContext, method: Method, master_seed: u64, trial: u64) -> Result<TrialOutcome> {
    let frame = SymbolFrame::random(ctx.link.frame_len, &mut rng::stream(master_seed, trial, StreamTag::Symbols));
    let link = if method == Method::PureQpsk {
        ctx.link.with_alphas(ctx.link.alpha_c, 0.0)
    } else {
        ctx.link.clone()
    };
    let mut y = clean_signal(&link, &frame, &ctx.truth)?;
    if ctx.noise_var > 0.0 {
        add_noise(&mut y, ctx.noise_var, &mut rng::stream(master_seed, trial, StreamTag::Noise));
    }
    match method {
        Method::IgnoreEcho | Method::PureQpsk => Ok(TrialOutcome {
            errors: symbol_errors(&detect_ignoring_echo(&link, &y)?, &frame),
            sigma_hat: None,
        }),
        Method::Proposed => {
            let out = decode_link(&link, &y, &mut ctx.imager.clone(), &ctx.decoder)?;
            Ok(TrialOutcome {
                errors: symbol_errors(&out.symbols, &frame),
                sigma_hat: Some(out.estimate.sigma),
            })
        }
        Method::GivenSigma => {
            let out = decode_link(&link, &y, &mut KnownScene(ctx.truth.sigma.clone()), &ctx.decoder)?;
            Ok(TrialOutcome {
                errors: symbol_errors(&out.symbols, &frame),
                sigma_hat: None,
            })
        }
        Method::GivenX => {
            let sys = build_residual_link(&link, &y, &frame, None)?;
            let im = &ctx.imager;
            let est = run_sbl(&sys, SparseEstimate::initial(&sys), im.gamma_rate, im.rule, im.max_iters, im.tol)?;
            Ok(TrialOutcome {
                errors: 0,
                sigma_hat: Some(est.sigma),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub cnr_db: f64,
    pub inr_db: f64,
    pub method: Method,
    pub trial: u64,
    pub errors: usize,
    /// NaN for methods that do not image.
    pub nmse_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub cnr_db: f64,
    pub inr_db: f64,
    pub method: Method,
    /// NaN for methods that do not detect.
    pub ser: f64,
    /// Binomial standard error of `ser`.
    pub stderr: f64,
    /// NaN for methods that do not image.
    pub nmse_db: f64,
    pub trials: usize,
    pub errors_total: usize,
}

/// Aggregates trial records of one point and method, in trial order.
pub fn aggregate(records: &[TrialRecord], frame_len: usize) -> Option<MetricsRecord> {
    let first = records.first()?;
    let q = records.len();
    let errors_total: usize = records.iter().map(|r| r.errors).sum();
    let (ser, stderr) = if first.method.detects() {
        let n = (q * frame_len) as f64;
        let p = errors_total as f64 / n;
        (p, (p * (1.0 - p) / n).sqrt())
    } else {
        (f64::NAN, f64::NAN)
    };
    let nmse_db = if first.method.images() {
        records.iter().map(|r| r.nmse_db).sum::<f64>() / q as f64
    } else {
        f64::NAN
    };
    Some(MetricsRecord {
        cnr_db: first.cnr_db,
        inr_db: first.inr_db,
        method: first.method,
        ser,
        stderr,
        nmse_db,
        trials: q,
        errors_total,
    })
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub schedule: PhaseSchedule,
    pub report: OptimizerReport,
    pub truth: SceneTruth,
    pub trials_per_point: usize,
    pub records: Vec<MetricsRecord>,
    pub trials: Vec<TrialRecord>,
}

impl ScenarioResult {
    pub fn record(&self, point: usize, method: Method) -> Option<&MetricsRecord> {
        let per_point = Method::ALL.len();
        self.records[point * per_point..(point + 1) * per_point]
            .iter()
            .find(|r| r.method == method)
    }

    /// Trial records of one method at one point, in trial order.
    pub fn trials_of(&self, point: usize, method: Method) -> Vec<&TrialRecord> {
        let q = self.trials_per_point;
        let start = point * q * Method::ALL.len();
        self.trials[start..start + q * Method::ALL.len()]
            .iter()
            .filter(|r| r.method == method)
            .collect()
    }
}

fn fmt_opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub fn write_ser_curve(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let rows = records.iter().filter(|r| r.method.detects()).map(|r| {
        vec![
            r.cnr_db.to_string(),
            r.inr_db.to_string(),
            r.method.to_string(),
            r.ser.to_string(),
            r.stderr.to_string(),
            r.trials.to_string(),
        ]
    });
    write_rows(path, &["cnr_db", "inr_db", "method", "ser", "stderr", "trials"], rows)
}

pub fn write_nmse_curve(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let rows = records.iter().filter(|r| r.method.images()).map(|r| {
        vec![
            r.cnr_db.to_string(),
            r.inr_db.to_string(),
            r.method.to_string(),
            r.nmse_db.to_string(),
            r.trials.to_string(),
        ]
    });
    write_rows(path, &["cnr_db", "inr_db", "method", "nmse_db", "trials"], rows)
}

pub fn write_trials(path: impl AsRef<Path>, trials: &[TrialRecord]) -> Result<()> {
    let rows = trials.iter().map(|r| {
        vec![
            r.cnr_db.to_string(),
            r.inr_db.to_string(),
            r.method.to_string(),
            r.trial.to_string(),
            r.errors.to_string(),
            fmt_opt(r.nmse_db),
        ]
    });
    write_rows(path, &["cnr_db", "inr_db", "method", "trial", "errors", "nmse_db"], rows)
}

fn curve_chart(spec: &ScenarioSpec, records: &[MetricsRecord], ser: bool) -> Chart {
    let x_of = |r: &MetricsRecord| if spec.sweeps_inr() { r.inr_db } else { r.cnr_db };
    let series = Method::ALL
        .into_iter()
        .filter(|m| if ser { m.detects() } else { m.images() })
        .map(|m| Series {
            name: m.to_string(),
            points: records
                .iter()
                .filter(|r| r.method == m)
                .map(|r| (x_of(r), if ser { r.ser } else { r.nmse_db }))
                .collect(),
        })
        .collect();
    Chart {
        title: format!("Scenario {}: {}", spec.id, if ser { "SER" } else { "NMSE" }),
        x_label: if spec.sweeps_inr() { "INR (dB)" } else { "CNR (dB)" }.into(),
        y_label: if ser { "SER" } else { "NMSE (dB)" }.into(),
        log_y: ser,
        series,
    }
}

fn write_outputs(dir: &Path, spec: &ScenarioSpec, records: &[MetricsRecord], trials: &[TrialRecord]) -> Result<()> {
    write_ser_curve(dir.join("ser_curve.csv"), records)?;
    write_nmse_curve(dir.join("nmse_curve.csv"), records)?;
    write_trials(dir.join("trials.csv"), trials)?;
    std::fs::write(dir.join("ser_curve.svg"), curve_chart(spec, records, true).to_svg())?;
    std::fs::write(dir.join("nmse_curve.svg"), curve_chart(spec, records, false).to_svg())?;
    Ok(())
}

/// Sweeps every point of a scenario with all methods on a schedule
/// optimized for `cfg`. Trials run on `jobs` threads; results are
/// collected in trial order, so outputs do not depend on `jobs`. Output
/// files are rewritten after every point.
pub fn run_scenario(spec: &ScenarioSpec, cfg: &SceneConfig, out_dir: Option<&Path>, master_seed: u64, jobs: usize) -> Result<ScenarioResult> {
    cfg.validate()?;
    if spec.trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let truth = spec.scene.truth(cfg.n_pixels)?;
    let (schedule, report) = pool.install(|| optimize(cfg, master_seed))?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_schedule(dir.join("schedule.csv"), &schedule)?;
        write_sigma(dir.join("truth.csv"), &truth.sigma)?;
    }
    let base = Scene::new(cfg)?.link(cfg, &schedule)?;
    let mut records = Vec::new();
    let mut trials = Vec::new();
    for &point in &spec.sweep {
        let ctx = PointContext::new(cfg, &base, &truth, point)?;
        let per_trial: Result<Vec<Vec<TrialRecord>>> = pool.install(|| {
            (0..spec.trials as u64)
                .into_par_iter()
                .map(|q| {
                    Method::ALL
                        .into_iter()
                        .map(|m| {
                            let out = run_trial(&ctx, m, master_seed, q)?;
                            Ok(TrialRecord {
                                cnr_db: point.cnr_db,
                                inr_db: point.inr_db,
                                method: m,
                                trial: q,
                                errors: out.errors,
                                nmse_db: out.sigma_hat.map_or(f64::NAN, |s| nmse_db(&s, &truth.sigma)),
                            })
                        })
                        .collect()
                })
                .collect()
        });
        let per_trial = match per_trial {
            Ok(v) => v,
            Err(e) => {
                if let Some(dir) = out_dir {
                    write_outputs(dir, spec, &records, &trials)?;
                }
                return Err(e);
            }
        };
        for m in Method::ALL {
            let of_m: Vec<TrialRecord> = per_trial.iter().flatten().filter(|r| r.method == m).cloned().collect();
            records.extend(aggregate(&of_m, cfg.frame_len));
        }
        trials.extend(per_trial.into_iter().flatten());
        if let Some(dir) = out_dir {
            write_outputs(dir, spec, &records, &trials)?;
        }
    }
    Ok(ScenarioResult {
        schedule,
        report,
        truth,
        trials_per_point: spec.trials,
        records,
        trials,
    })
}
