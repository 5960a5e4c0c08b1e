//! Acceptance criteria, one test per criterion. Each test writes a
//! `criterion ...: PASS|FAIL` line to stderr (uncaptured) before asserting.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use risac::decoder::{decode_link, detect_ignoring_echo, moment_match, DecoderOptions, ScalarGaussian, SblImager};
use risac::optimizer::loss::{init_loss_logits, refine_loss_logits};
use risac::optimizer::{init_loss, init_loss_grad, refine_loss, refine_loss_grad, sample_target, summarize, SoftWeights};
use risac::sbl::{posterior, ImagingSystem};
use risac::scene::synth_with_link;
use risac::sim::{run_scenario, Method, ScenarioResult, ScenarioSpec};
use risac::{optimize, PhaseResolution, PhaseSchedule, Scene, SceneConfig, SceneTruth, SymbolFrame, C64, QPSK};

const SEED: u64 = 1;
/// Frame length for the discrete-phase comparison; the per-row gains do not
/// depend on it and the 1-bit design at 1024 rows takes several minutes.
const QUANT_FRAME_LEN: usize = 256;

fn report(name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {name}: {verdict} ({detail})");
}

fn check(name: &str, pass: bool, detail: String) {
    report(name, pass, &detail);
    assert!(pass, "criterion {name}: {detail}");
}

fn full_geometry(rho: f64, bits: PhaseResolution, frame_len: usize) -> SceneConfig {
    let mut cfg = SceneConfig::full();
    cfg.rho = rho;
    cfg.n_bit = bits;
    cfg.frame_len = frame_len;
    cfg
}

/// Continuous-phase full-size schedules, shared between criteria 1 and 3.
fn continuous(rho: f64) -> (SceneConfig, PhaseSchedule) {
    static CACHE: OnceLock<Mutex<HashMap<u64, (SceneConfig, PhaseSchedule)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut map = cache.lock().unwrap_or_else(|e| e.into_inner());
    map.entry(rho.to_bits())
        .or_insert_with(|| {
            let cfg = full_geometry(rho, PhaseResolution::Continuous, 1024);
            let (sched, _) = optimize(&cfg, SEED).unwrap();
            (cfg, sched)
        })
        .clone()
}

#[test]
fn criterion_1_beam_peak_at_ue() {
    let (cfg, sched) = continuous(0.5);
    let s = summarize(&cfg, &sched, 0..cfg.total_len()).unwrap();
    let frac = s.peak_fraction(cfg.theta_ue, 1.0);
    check("1 beam peak", frac >= 0.95, format!("{:.1}% of {} rows peak within 1 deg of 70 deg", 100.0 * frac, s.peak_deg.len()));
}

#[test]
fn criterion_2_quantization_loss() {
    let gain = |bits| {
        let cfg = full_geometry(0.5, bits, QUANT_FRAME_LEN);
        let (sched, _) = optimize(&cfg, SEED).unwrap();
        summarize(&cfg, &sched, 0..cfg.total_len()).unwrap().ue_gain_db
    };
    let cont = gain(PhaseResolution::Continuous);
    let one = cont - gain(PhaseResolution::Bits(1));
    let two = cont - gain(PhaseResolution::Bits(2));
    let pass = (one - 0.5).abs() <= 0.3 && two <= 0.2;
    check("2 quantization loss", pass, format!("1-bit loss {one:.3} dB (want 0.5 +/- 0.3), 2-bit loss {two:.3} dB (want <= 0.2)"));
}

#[test]
fn criterion_3_rho_tradeoff() {
    let gains: Vec<(f64, f64)> = [0.1, 0.5, 0.9]
        .iter()
        .map(|&rho| {
            let (cfg, sched) = continuous(rho);
            let s = summarize(&cfg, &sched, 0..cfg.total_len()).unwrap();
            (s.ue_gain_db, s.roi_gain_db)
        })
        .collect();
    let ue_up = gains.windows(2).all(|w| w[1].0 > w[0].0);
    let roi_down = gains.windows(2).all(|w| w[1].1 < w[0].1);
    let detail = gains
        .iter()
        .zip([0.1, 0.5, 0.9])
        .map(|((u, r), rho)| format!("rho {rho}: UE {u:.5} dB, RoI {r:.3} dB"))
        .collect::<Vec<_>>()
        .join("; ");
    check("3 rho trade-off", ue_up && roi_down, detail);
}

fn scenario(id: u8) -> &'static ScenarioResult {
    static RESULTS: [OnceLock<ScenarioResult>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    RESULTS[id as usize - 1].get_or_init(|| {
        let cfg = SceneConfig::desk();
        let spec = ScenarioSpec::standard(id, cfg.n_pixels, 200).unwrap();
        run_scenario(&spec, &cfg, None, SEED, 1).unwrap()
    })
}

fn points(res: &ScenarioResult) -> usize {
    res.records.len() / Method::ALL.len()
}

#[test]
fn criterion_4a_ser_monotone_in_cnr() {
    let res = scenario(1);
    let mut bad = Vec::new();
    let mut curve = Vec::new();
    for p in 0..points(res) {
        let r = res.record(p, Method::Proposed).unwrap();
        curve.push(format!("{}:{:.2e}", r.cnr_db, r.ser));
        if p > 0 {
            let prev = res.record(p - 1, Method::Proposed).unwrap();
            let slack = 1.96 * (prev.stderr.powi(2) + r.stderr.powi(2)).sqrt();
            if r.ser > prev.ser + slack {
                bad.push(format!("CNR {} rises above CNR {}", r.cnr_db, prev.cnr_db));
            }
        }
    }
    check("4a SER monotone", bad.is_empty(), format!("SER by CNR {}; {}", curve.join(" "), if bad.is_empty() { "no violations".into() } else { bad.join(", ") }));
}

#[test]
fn criterion_4b_ser_ordering() {
    let mut bad = Vec::new();
    let mut checked = 0;
    for id in 1..=3 {
        let res = scenario(id);
        for p in 0..points(res) {
            let ser = |m| res.record(p, m).unwrap().ser;
            let pr = res.record(p, Method::Proposed).unwrap();
            if pr.cnr_db < 10.0 {
                continue;
            }
            checked += 1;
            let (gs, pp, ie) = (ser(Method::GivenSigma), pr.ser, ser(Method::IgnoreEcho));
            if !(gs <= pp && pp <= ie) {
                bad.push(format!(
                    "scenario {id} CNR {} INR {}: given_sigma {gs:.2e}, proposed {pp:.2e}, ignore_echo {ie:.2e}",
                    pr.cnr_db, pr.inr_db
                ));
            }
        }
    }
    check("4b SER ordering", bad.is_empty(), format!("{checked} points with CNR >= 10 dB; {}", if bad.is_empty() { "all ordered".into() } else { bad.join("; ") }));
}

#[test]
fn criterion_4c_beats_pure_qpsk_at_top_inr() {
    let res = scenario(2);
    let top = points(res) - 1;
    let pr = res.record(top, Method::Proposed).unwrap();
    let pq = res.record(top, Method::PureQpsk).unwrap();
    check(
        "4c beats pure QPSK",
        pr.ser < pq.ser,
        format!("INR {} dB: proposed {:.3e} +/- {:.1e}, pure_qpsk {:.3e} +/- {:.1e}", pr.inr_db, pr.ser, pr.stderr, pq.ser, pq.stderr),
    );
}

#[test]
fn criterion_4d_nmse_reaches_bound() {
    let res = scenario(1);
    let top = points(res) - 1;
    let pr = res.record(top, Method::Proposed).unwrap();
    let gx = res.record(top, Method::GivenX).unwrap();
    let pass = pr.nmse_db <= -15.0 && (pr.nmse_db - gx.nmse_db).abs() <= 3.0;
    check("4d NMSE", pass, format!("CNR {} dB: proposed {:.2} dB, given_x {:.2} dB", pr.cnr_db, pr.nmse_db, gx.nmse_db));
}

fn cn(rng: &mut impl Rng) -> C64 {
    let re: f64 = rng.sample(rand_distr::StandardNormal);
    let im: f64 = rng.sample(rand_distr::StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn moment_match_oracle() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let msg = ScalarGaussian {
            mean: C64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
            weight: 10f64.powf(rng.random_range(-3.0..2.0)),
        };
        let logw: Vec<f64> = QPSK.iter().map(|s| -(s - msg.mean).norm_sqr() * msg.weight).collect();
        let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        let mean: C64 = w.iter().zip(QPSK).map(|(p, s)| s * (p / z)).sum();
        let var = w.iter().zip(QPSK).map(|(p, s)| (s - mean).norm_sqr() * p / z).sum::<f64>();
        let got = moment_match(&msg);
        let err = (got.mean - mean).norm().max((got.var - var).abs());
        let perr = got.probs.iter().zip(&w).map(|(a, b)| (a - b / z).abs()).fold(0.0, f64::max);
        if err.max(perr) > 1e-12 {
            return Err(format!("moment match off by {:.1e} at {msg:?}", err.max(perr)));
        }
    }
    Ok(())
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<C64>>, mut b: Vec<C64>) -> Vec<C64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].norm().total_cmp(&a[j][c].norm())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                let v = a[c][k];
                a[r][k] -= f * v;
            }
            let v = b[c];
            b[r] -= f * v;
        }
    }
    let mut x = vec![C64::new(0.0, 0.0); n];
    for r in (0..n).rev() {
        let s: C64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn sbl_oracle() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (rows, cols) in [(24, 8), (16, 16), (10, 20)] {
        let g: Vec<C64> = (0..rows * cols).map(|_| cn(&mut rng)).collect();
        let h: Vec<C64> = (0..rows).map(|_| cn(&mut rng)).collect();
        let gamma: Vec<f64> = (0..cols).map(|_| 10f64.powf(rng.random_range(-2.0..2.0))).collect();
        let xi = rng.random_range(0.05..2.0);
        let sys = ImagingSystem::new(rows, cols, g.clone(), h.clone()).unwrap();
        let (mean, _, _) = posterior(&sys, &gamma, xi).map_err(|e| e.to_string())?;
        let at = |r: usize, c: usize| g[r * cols + c];
        let a: Vec<Vec<C64>> = (0..cols)
            .map(|i| {
                (0..cols)
                    .map(|j| {
                        let ip: C64 = (0..rows).map(|r| at(r, i).conj() * at(r, j)).sum::<C64>() / xi;
                        if i == j { ip + gamma[i] } else { ip }
                    })
                    .collect()
            })
            .collect();
        let b: Vec<C64> = (0..cols).map(|i| (0..rows).map(|r| at(r, i).conj() * h[r]).sum::<C64>() / xi).collect();
        let direct = solve(a, b);
        for (x, y) in mean.iter().zip(&direct) {
            if (x - y).norm() > 1e-8 * y.norm().max(1.0) {
                return Err(format!("posterior mean {x} vs direct {y} ({rows}x{cols})"));
            }
        }
    }
    Ok(())
}

fn fd_check(what: &str, f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> Result<(), String> {
    let h = 1e-5;
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for i in 0..x.len() {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[i] += h;
        b[i] -= h;
        let fd = (f(&a) - f(&b)) / (2.0 * h);
        if fd.abs() < 1e-6 * scale && grad[i].abs() < 1e-6 * scale {
            continue;
        }
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
        if rel > 1e-4 {
            return Err(format!("{what}: coordinate {i} analytic {} vs central difference {fd}", grad[i]));
        }
    }
    Ok(())
}

fn gradient_oracle() -> Result<(), String> {
    let mut cfg = SceneConfig::default();
    cfg.n_ris = 6;
    cfg.n_pixels = 3;
    cfg.roi_angles = vec![15.0, 32.0, 50.0];
    cfg.frame_len = 5;
    cfg.delay = 2;
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cfg.rho = rng.random_range(0.0..=1.0);
        let sched = PhaseSchedule::random(cfg.total_len(), cfg.n_ris, &mut rng);
        let target = sample_target(&cfg, &mut rng);
        let rebuild = |x: &[f64]| PhaseSchedule::new(sched.rows(), cfg.n_ris, x.to_vec()).unwrap();
        let (_, g) = init_loss_grad(&cfg, &sched, &target).unwrap();
        fd_check("initialization loss", |x| init_loss(&cfg, &rebuild(x), &target).unwrap(), sched.as_slice(), &g)?;
        let (_, g) = refine_loss_grad(&cfg, &sched).unwrap();
        fd_check("refinement loss", |x| refine_loss(&cfg, &rebuild(x)).unwrap().value, sched.as_slice(), &g)?;

        let bits = 1 + seed as usize % 3;
        let alpha = rng.random_range(1.0..8.0);
        let sw = SoftWeights::random(cfg.total_len(), cfg.n_ris, 1 << bits, &mut rng);
        let with = |x: &[f64]| {
            let mut c = sw.clone();
            c.w = x.to_vec();
            c.select(alpha)
        };
        let (_, g) = init_loss_logits(&cfg, &sw, alpha, &target).unwrap();
        fd_check("initialization logits", |x| init_loss(&cfg, &with(x), &target).unwrap(), &sw.w, &g)?;
        let (_, g) = refine_loss_logits(&cfg, &sw, alpha).unwrap();
        fd_check("refinement logits", |x| refine_loss(&cfg, &with(x)).unwrap().value, &sw.w, &g)?;
    }
    Ok(())
}

fn silent_echo_oracle() -> Result<(), String> {
    let mut cfg = SceneConfig::desk();
    cfg.alpha_i = 0.0;
    cfg.noise_var = 2.0;
    let scene = Scene::new(&cfg).unwrap();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let sched = PhaseSchedule::random(cfg.total_len(), cfg.n_ris, &mut rng);
        let link = scene.link(&cfg, &sched).unwrap();
        let frame = SymbolFrame::random(cfg.frame_len, &mut rng);
        let truth = SceneTruth::new((0..cfg.n_pixels).map(|_| cn(&mut rng)).collect());
        let y = synth_with_link(&link, cfg.noise_var, &frame, &truth, seed).unwrap();
        let out = decode_link(&link, &y.samples, &mut SblImager::from_config(&cfg), &DecoderOptions::from_config(&cfg))
            .map_err(|e| e.to_string())?;
        let nearest = detect_ignoring_echo(&link, &y.samples).unwrap();
        if out.symbols != nearest {
            return Err(format!("seed {seed}: decoder differs from the nearest-point detector"));
        }
    }
    Ok(())
}

/// `ln p(y | x)` with the scene integrated out under `σ ~ CN(0, I)`.
fn log_evidence(link: &risac::LinkModel, y: &[C64], x: &[C64], noise_var: f64) -> f64 {
    let n = y.len();
    let (l, k, m) = (link.frame_len, link.delay, link.n_pixels);
    let mut a = nalgebra::DMatrix::<C64>::zeros(n, m);
    let mut r = nalgebra::DVector::from_column_slice(y);
    for t in 1..=n {
        if t <= l {
            r[t - 1] -= link.comm_scalar(t) * x[t - 1];
        }
        if t > k {
            for (j, g) in link.sensing_row(t).iter().enumerate() {
                a[(t - 1, j)] = g * link.alpha_i * x[t - k - 1];
            }
        }
    }
    let cov = &a * a.adjoint() + nalgebra::DMatrix::<C64>::identity(n, n) * C64::new(noise_var, 0.0);
    let chol = cov.cholesky().expect("covariance is positive definite");
    let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.re.ln()).sum();
    let z = chol.l().solve_lower_triangular(&r).unwrap();
    -logdet - z.norm_squared()
}

fn exhaustive_map_oracle() -> Result<(), String> {
    let mut cfg = SceneConfig::default();
    cfg.n_ris = 4;
    cfg.n_pixels = 2;
    cfg.frame_len = 6;
    cfg.delay = 1;
    cfg.roi_angles = vec![20.0, 40.0];
    cfg.noise_var = 0.3;
    cfg.alpha_i = 0.5;
    let scene = Scene::new(&cfg).unwrap();
    // rows near the UE-aligned setting, so the link is communication dominated
    let aligned: Vec<f64> = scene.comm_vec.iter().map(|z| -z.arg()).collect();
    let trials = 200;
    let mut agree = 0;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let sched = PhaseSchedule::from_fn(cfg.total_len(), cfg.n_ris, |_, n| aligned[n] + rng.random_range(-1.0..1.0));
        let link = scene.link(&cfg, &sched).unwrap();
        let frame = SymbolFrame::random(cfg.frame_len, &mut rng);
        let truth = SceneTruth::new((0..2).map(|_| cn(&mut rng)).collect());
        let y = synth_with_link(&link, cfg.noise_var, &frame, &truth, seed).unwrap();
        let mut best = (f64::NEG_INFINITY, 0);
        for code in 0..4usize.pow(6) {
            let x: Vec<C64> = (0..6).map(|i| QPSK[(code >> (2 * i)) & 3]).collect();
            let ll = log_evidence(&link, &y.samples, &x, cfg.noise_var);
            if ll > best.0 {
                best = (ll, code);
            }
        }
        let map: Vec<usize> = (0..6).map(|i| ((best.1 >> (2 * i)) & 3) + 1).collect();
        let out = decode_link(&link, &y.samples, &mut SblImager::from_config(&cfg), &DecoderOptions::from_config(&cfg))
            .map_err(|e| e.to_string())?;
        if out.symbols.indices() == map {
            agree += 1;
        }
    }
    if agree * 100 >= 95 * trials {
        Ok(())
    } else {
        Err(format!("decoder agrees with exhaustive MAP in {agree}/{trials} trials"))
    }
}

#[test]
fn criterion_5_oracles() {
    let suites: [(&str, fn() -> Result<(), String>); 5] = [
        ("moment matching", moment_match_oracle),
        ("SBL posterior mean", sbl_oracle),
        ("optimizer gradients", gradient_oracle),
        ("silent echo", silent_echo_oracle),
        ("exhaustive MAP", exhaustive_map_oracle),
    ];
    let mut failures = Vec::new();
    for (name, run) in suites {
        let t0 = std::time::Instant::now();
        let res = run();
        let secs = t0.elapsed().as_secs_f64();
        match res {
            Ok(()) if secs < 60.0 => {}
            Ok(()) => failures.push(format!("{name} took {secs:.0} s")),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    check("5 oracle suites", failures.is_empty(), if failures.is_empty() { "all five agree".into() } else { failures.join("; ") });
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_6_determinism_across_thread_counts() {
    let cfg = SceneConfig::desk();
    let spec = ScenarioSpec::standard(1, cfg.n_pixels, 12).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let outputs: Vec<Vec<(String, Vec<u8>)>> = [1, 4, 16]
        .iter()
        .map(|&jobs| {
            let dir = tmp.path().join(format!("jobs{jobs}"));
            run_scenario(&spec, &cfg, Some(&dir), 7, jobs).unwrap();
            read_all(&dir)
        })
        .collect();
    let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
    let same = outputs[1..].iter().all(|o| *o == outputs[0]);
    check("6 determinism", same && names.len() >= 5, format!("{} files compared at 1, 4 and 16 threads: {}", names.len(), names.join(", ")));
}
