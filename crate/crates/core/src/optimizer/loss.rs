//! Initialization and refinement objectives with analytic phase gradients.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{ImagingGainNorm, SceneConfig};
use crate::error::{check_len, Result};
use crate::scene::{PhaseSchedule, Scene, C64};

use super::softmax::{softmax_pullback, SoftWeights};

const DEN_FLOOR: f64 = 1e-30;

/// Complex Gaussian target for the initialization stage, `L × M` with
/// i.i.d. `CN(0, N)` entries (the per-entry power of `G` under random phases).
pub fn sample_target(cfg: &SceneConfig, rng: &mut impl Rng) -> Vec<C64> {
    let sd = (cfg.n_ris as f64 / 2.0).sqrt();
    (0..cfg.frame_len * cfg.n_pixels)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            C64::new(re, im) * sd
        })
        .collect()
}

/// Refinement loss value; `clamped` is set if any denominator hit the floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineLoss {
    pub value: f64,
    pub clamped: bool,
}

/// Per-row evaluation of both objectives for one geometry.
pub(crate) struct RowLoss<'a> {
    pub scene: &'a Scene,
    pub rho: f64,
    pub pixel_scale: f64,
}

impl<'a> RowLoss<'a> {
    pub fn new(scene: &'a Scene, cfg: &SceneConfig) -> Self {
        let pixel_scale = match cfg.imaging_gain_norm {
            ImagingGainNorm::PerPixel => 1.0 / cfg.n_pixels as f64,
            ImagingGainNorm::Total => 1.0,
        };
        RowLoss {
            scene,
            rho: cfg.rho,
            pixel_scale,
        }
    }

    /// `Σ_n e^{jθ_n} B_{n,m}` into `s_row`; returns `g^T Θ h_c`.
    fn responses(&self, phases: &[f64], e: &mut [C64], s_row: &mut [C64]) -> C64 {
        for (z, &th) in e.iter_mut().zip(phases) {
            *z = C64::from_polar(1.0, th);
        }
        let s: C64 = e.iter().zip(&self.scene.comm_vec).map(|(a, b)| a * b).sum();
        let m = self.scene.n_pixels;
        s_row.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        for (i, &ei) in e.iter().enumerate() {
            for (o, &b) in s_row.iter_mut().zip(&self.scene.img_mat[i * m..(i + 1) * m]) {
                *o += ei * b;
            }
        }
        s
    }

    /// `2 Re(j e_n Σ_m conj(v_m) B_{n,m})` for every element `n`.
    fn img_grad(&self, e: &[C64], v: &[C64], scale: f64, out: &mut [f64]) {
        let m = self.scene.n_pixels;
        for (n, o) in out.iter_mut().enumerate() {
            let acc: C64 = v
                .iter()
                .zip(&self.scene.img_mat[n * m..(n + 1) * m])
                .map(|(a, b)| a.conj() * b)
                .sum();
            *o += scale * 2.0 * (C64::i() * e[n] * acc).re;
        }
    }

    /// `‖R_t − G_t‖²` and, optionally, its phase gradient. `sv` receives `G_t`.
    pub fn init_row(&self, phases: &[f64], target: &[C64], grad: Option<&mut [f64]>, sv: &mut [C64]) -> f64 {
        let mut e = vec![C64::new(0.0, 0.0); phases.len()];
        self.responses(phases, &mut e, sv);
        let d: Vec<C64> = sv.iter().zip(target).map(|(g, r)| g - r).collect();
        if let Some(g) = grad {
            g.iter_mut().for_each(|x| *x = 0.0);
            self.img_grad(&e, &d, 1.0, g);
        }
        d.iter().map(|z| z.norm_sqr()).sum()
    }

    /// `1 / (ρ|g^TΘh_c|² + (1−ρ)·c·‖g^TΘH_I‖²)` and, optionally, its phase
    /// gradient. `sv` receives `g^TΘH_I`.
    pub fn refine_row(&self, phases: &[f64], grad: Option<&mut [f64]>, sv: &mut [C64]) -> (f64, bool) {
        let mut e = vec![C64::new(0.0, 0.0); phases.len()];
        let s = self.responses(phases, &mut e, sv);
        let img = sv.iter().map(|z| z.norm_sqr()).sum::<f64>();
        let raw = self.rho * s.norm_sqr() + (1.0 - self.rho) * self.pixel_scale * img;
        let clamped = raw < DEN_FLOOR;
        let den = raw.max(DEN_FLOOR);
        if let Some(g) = grad {
            g.iter_mut().for_each(|x| *x = 0.0);
            if !clamped {
                let wi = (1.0 - self.rho) * self.pixel_scale;
                if wi != 0.0 {
                    self.img_grad(&e, sv, wi, g);
                }
                for (n, o) in g.iter_mut().enumerate() {
                    *o += self.rho * 2.0 * (s.conj() * C64::i() * e[n] * self.scene.comm_vec[n]).re;
                    *o *= -1.0 / (den * den);
                }
            }
        }
        (1.0 / den, clamped)
    }
}

fn check_target(cfg: &SceneConfig, target: &[C64]) -> Result<()> {
    check_len("init target (L × M)", cfg.frame_len * cfg.n_pixels, target.len())
}

/// `‖R − G‖_F` for a phase schedule.
pub fn init_loss(cfg: &SceneConfig, sched: &PhaseSchedule, target: &[C64]) -> Result<f64> {
    Ok(init_loss_grad(cfg, sched, target)?.0)
}

/// `‖R − G‖_F` and its gradient with respect to every `θ_{t,n}`.
pub fn init_loss_grad(cfg: &SceneConfig, sched: &PhaseSchedule, target: &[C64]) -> Result<(f64, Vec<f64>)> {
    sched.check_shape(cfg)?;
    check_target(cfg, target)?;
    let scene = Scene::new(cfg)?;
    let rl = RowLoss::new(&scene, cfg);
    let n = cfg.n_ris;
    let m = cfg.n_pixels;
    let mut grad = vec![0.0; sched.rows() * n];
    let mut sv = vec![C64::new(0.0, 0.0); m];
    let mut sq = 0.0;
    for i in 0..cfg.frame_len {
        let r = cfg.delay + i;
        sq += rl.init_row(sched.row(r), &target[i * m..(i + 1) * m], Some(&mut grad[r * n..(r + 1) * n]), &mut sv);
    }
    let f = sq.sqrt();
    if f > 0.0 {
        grad.iter_mut().for_each(|g| *g /= 2.0 * f);
    }
    Ok((f, grad))
}

pub fn refine_loss(cfg: &SceneConfig, sched: &PhaseSchedule) -> Result<RefineLoss> {
    Ok(refine_loss_grad(cfg, sched)?.0)
}

/// Refinement loss summed over `t = 1..=L+k` and its phase gradient.
pub fn refine_loss_grad(cfg: &SceneConfig, sched: &PhaseSchedule) -> Result<(RefineLoss, Vec<f64>)> {
    sched.check_shape(cfg)?;
    let scene = Scene::new(cfg)?;
    let rl = RowLoss::new(&scene, cfg);
    let n = cfg.n_ris;
    let mut grad = vec![0.0; sched.rows() * n];
    let mut sv = vec![C64::new(0.0, 0.0); cfg.n_pixels];
    let mut value = 0.0;
    let mut clamped = false;
    for r in 0..sched.rows() {
        let (v, c) = rl.refine_row(sched.row(r), Some(&mut grad[r * n..(r + 1) * n]), &mut sv);
        value += v;
        clamped |= c;
    }
    Ok((RefineLoss { value, clamped }, grad))
}

/// Maps a gradient over phases to one over the softmax logits.
pub fn pullback_to_logits(sw: &SoftWeights, alpha: f64, dtheta: &[f64]) -> Vec<f64> {
    let s = sw.levels();
    let mut out = vec![0.0; sw.w.len()];
    let mut scratch = vec![0.0; s];
    for (i, &d) in dtheta.iter().enumerate() {
        let (w, o) = (&sw.w[i * s..(i + 1) * s], &mut out[i * s..(i + 1) * s]);
        softmax_pullback(w, alpha, &sw.grid, d, &mut scratch, o);
    }
    out
}

/// Initialization loss of the relaxed schedule and its logit gradient.
pub fn init_loss_logits(cfg: &SceneConfig, sw: &SoftWeights, alpha: f64, target: &[C64]) -> Result<(f64, Vec<f64>)> {
    let (f, g) = init_loss_grad(cfg, &sw.select(alpha), target)?;
    Ok((f, pullback_to_logits(sw, alpha, &g)))
}

/// Refinement loss of the relaxed schedule and its logit gradient.
pub fn refine_loss_logits(cfg: &SceneConfig, sw: &SoftWeights, alpha: f64) -> Result<(RefineLoss, Vec<f64>)> {
    let (f, g) = refine_loss_grad(cfg, &sw.select(alpha))?;
    Ok((f, pullback_to_logits(sw, alpha, &g)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::sensing::sensing_matrix;
    use crate::scene::steering_vector;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> SceneConfig {
        let mut cfg = SceneConfig::default();
        cfg.n_ris = 6;
        cfg.n_pixels = 3;
        cfg.roi_angles = vec![15.0, 32.0, 50.0];
        cfg.frame_len = 5;
        cfg.delay = 2;
        cfg
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn init_loss_examples() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sched = PhaseSchedule::random(cfg.total_len(), cfg.n_ris, &mut rng);
        let g = sensing_matrix(&cfg, &sched).unwrap();
        assert!(init_loss(&cfg, &sched, &g.g_mat).unwrap() < 1e-12);
        let zero = vec![C64::new(0.0, 0.0); g.g_mat.len()];
        let fro = g.g_mat.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert!((init_loss(&cfg, &sched, &zero).unwrap() - fro).abs() < 1e-12);
        assert!(init_loss(&cfg, &sched, &zero[1..]).is_err());
    }

    #[test]
    fn target_power_matches_random_phase_sensing() {
        let mut cfg = small_cfg();
        cfg.frame_len = 4000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = sample_target(&cfg, &mut rng);
        let p = r.iter().map(|z| z.norm_sqr()).sum::<f64>() / r.len() as f64;
        assert!((p / 6.0 - 1.0).abs() < 0.05);
        let sched = PhaseSchedule::random(cfg.total_len(), cfg.n_ris, &mut rng);
        let g = sensing_matrix(&cfg, &sched).unwrap();
        let q = g.g_mat.iter().map(|z| z.norm_sqr()).sum::<f64>() / g.g_mat.len() as f64;
        assert!((q / 6.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn refine_coherent_maximum() {
        let mut cfg = small_cfg();
        cfg.rho = 1.0;
        let scene = Scene::new(&cfg).unwrap();
        let conj: Vec<f64> = scene.comm_vec.iter().map(|u| -u.arg()).collect();
        let sched = PhaseSchedule::from_fn(cfg.total_len(), cfg.n_ris, |_, n| conj[n]);
        let l = refine_loss(&cfg, &sched).unwrap();
        let n2 = (cfg.n_ris * cfg.n_ris) as f64;
        assert!((l.value - cfg.total_len() as f64 / n2).abs() < 1e-12);
        assert!(!l.clamped);
    }

    #[test]
    fn refine_ignores_ue_when_rho_zero() {
        let mut cfg = small_cfg();
        cfg.rho = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sched = PhaseSchedule::random(cfg.total_len(), cfg.n_ris, &mut rng);
        let a = refine_loss(&cfg, &sched).unwrap().value;
        cfg.theta_ue = -10.0;
        let b = refine_loss(&cfg, &sched).unwrap().value;
        assert_eq!(a, b);
    }

    #[test]
    fn refine_matches_direct_evaluation() {
        let mut cfg = small_cfg();
        cfg.rho = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sched = PhaseSchedule::random(cfg.total_len(), cfg.n_ris, &mut rng);
        let g = steering_vector(cfg.theta_bs, 6).unwrap();
        let hc = steering_vector(cfg.theta_ue, 6).unwrap();
        let cols: Vec<Vec<C64>> = cfg.roi_angles.iter().map(|&a| steering_vector(a, 6).unwrap()).collect();
        let mut oracle = 0.0;
        for t in 0..sched.rows() {
            let th = sched.row(t);
            let bil = |v: &[C64]| -> C64 { (0..6).map(|n| g[n] * C64::from_polar(1.0, th[n]) * v[n]).sum() };
            let comm = bil(&hc).norm_sqr();
            let img: f64 = cols.iter().map(|c| bil(c).norm_sqr()).sum();
            oracle += 1.0 / (0.3 * comm + 0.7 * img / 3.0);
        }
        let v = refine_loss(&cfg, &sched).unwrap().value;
        assert!((v - oracle).abs() <= 1e-10 * oracle);
        cfg.imaging_gain_norm = ImagingGainNorm::Total;
        let mut oracle_total = 0.0;
        for t in 0..sched.rows() {
            let th = sched.row(t);
            let bil = |v: &[C64]| -> C64 { (0..6).map(|n| g[n] * C64::from_polar(1.0, th[n]) * v[n]).sum() };
            let img: f64 = cols.iter().map(|c| bil(c).norm_sqr()).sum();
            oracle_total += 1.0 / (0.3 * bil(&hc).norm_sqr() + 0.7 * img);
        }
        let v = refine_loss(&cfg, &sched).unwrap().value;
        assert!((v - oracle_total).abs() <= 1e-10 * oracle_total);
    }

    #[test]
    fn silent_rows_clamp() {
        let mut cfg = small_cfg();
        cfg.n_ris = 2;
        cfg.theta_bs = 0.0;
        cfg.theta_ue = 0.0;
        cfg.rho = 1.0;
        // opposite phases cancel the two-element sum exactly
        let sched = PhaseSchedule::from_fn(cfg.total_len(), 2, |_, n| if n == 0 { 0.0 } else { std::f64::consts::PI });
        let (l, g) = refine_loss_grad(&cfg, &sched).unwrap();
        assert!(l.clamped);
        assert!(l.value.is_finite());
        assert!(g.iter().all(|x| x.is_finite()));
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if fd.abs() < 1e-6 * scale && grad[i].abs() < 1e-6 * scale {
                continue;
            }
            assert!(rel_err(fd, grad[i]) < 1e-4, "i={i} fd={fd} an={}", grad[i]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn phase_gradients_match_finite_differences(seed in any::<u64>(), rho in 0.0f64..=1.0) {
            let mut cfg = small_cfg();
            cfg.rho = rho;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sched = PhaseSchedule::random(cfg.total_len(), cfg.n_ris, &mut rng);
            let target = sample_target(&cfg, &mut rng);
            let rebuild = |x: &[f64]| PhaseSchedule::new(sched.rows(), cfg.n_ris, x.to_vec()).unwrap();

            let (_, g) = init_loss_grad(&cfg, &sched, &target).unwrap();
            fd_check(|x| init_loss(&cfg, &rebuild(x), &target).unwrap(), sched.as_slice(), &g);

            let (_, g) = refine_loss_grad(&cfg, &sched).unwrap();
            fd_check(|x| refine_loss(&cfg, &rebuild(x)).unwrap().value, sched.as_slice(), &g);
        }

        #[test]
        fn logit_gradients_match_finite_differences(seed in any::<u64>(), bits in 1usize..=3, alpha in 1.0f64..8.0) {
            let mut cfg = small_cfg();
            cfg.rho = 0.5;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sw = SoftWeights::random(cfg.total_len(), cfg.n_ris, 1 << bits, &mut rng);
            let target = sample_target(&cfg, &mut rng);
            let rebuild = |x: &[f64]| {
                let mut c = sw.clone();
                c.w = x.to_vec();
                c
            };

            let (_, g) = init_loss_logits(&cfg, &sw, alpha, &target).unwrap();
            fd_check(|x| init_loss(&cfg, &rebuild(x).select(alpha), &target).unwrap(), &sw.w, &g);

            let (_, g) = refine_loss_logits(&cfg, &sw, alpha).unwrap();
            fd_check(|x| refine_loss(&cfg, &rebuild(x).select(alpha)).unwrap().value, &sw.w, &g);
        }
    }
}
