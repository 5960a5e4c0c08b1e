//! Sensing matrix and its column-coherence metric.

use crate::config::SceneConfig;
use crate::error::{Error, Result};
use crate::scene::{PhaseSchedule, Scene, C64};

/// Stacked rows `g^T Θ(t) H_I` for `t = k+1..=L+k`, attenuation not applied.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub g_mat: Vec<C64>,
}

impl SensingMatrix {
    pub fn row(&self, i: usize) -> &[C64] {
        &self.g_mat[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn sensing_matrix(cfg: &SceneConfig, sched: &PhaseSchedule) -> Result<SensingMatrix> {
    let scene = Scene::new(cfg)?;
    sensing_matrix_for(&scene, cfg, sched)
}

pub(crate) fn sensing_matrix_for(scene: &Scene, cfg: &SceneConfig, sched: &PhaseSchedule) -> Result<SensingMatrix> {
    sched.check_shape(cfg)?;
    let m = scene.n_pixels;
    let mut g_mat = vec![C64::new(0.0, 0.0); cfg.frame_len * m];
    for (i, out) in g_mat.chunks_mut(m).enumerate() {
        scene.imaging_row_into(sched.row(cfg.delay + i), out);
    }
    Ok(SensingMatrix {
        rows: cfg.frame_len,
        cols: m,
        g_mat,
    })
}

/// Column Gramian `G^H G` as a row-major `M × M` matrix.
pub fn gramian(rows: usize, cols: usize, g: &[C64]) -> Vec<C64> {
    let mut gram = vec![C64::new(0.0, 0.0); cols * cols];
    for row in g.chunks(cols).take(rows) {
        for a in 0..cols {
            let ca = row[a].conj();
            let out = &mut gram[a * cols..(a + 1) * cols];
            for b in a..cols {
                out[b] += ca * row[b];
            }
        }
    }
    for a in 0..cols {
        for b in 0..a {
            gram[a * cols + b] = gram[b * cols + a].conj();
        }
    }
    gram
}

/// `‖R(G) − I‖_F / (M² − M)` with `R` the column correlation-coefficient matrix.
pub fn ortho_metric(g: &SensingMatrix) -> Result<f64> {
    let m = g.cols;
    if m < 2 {
        return Err(Error::Config("orthogonality metric needs at least two pixels".into()));
    }
    let gram = gramian(g.rows, m, &g.g_mat);
    let norms: Vec<f64> = (0..m).map(|a| gram[a * m + a].re.sqrt()).collect();
    if let Some(z) = norms.iter().position(|&n| n <= 0.0) {
        return Err(Error::DegenerateColumn(z));
    }
    let mut sq = 0.0;
    for a in 0..m {
        for b in a + 1..m {
            let r = gram[a * m + b].norm() / (norms[a] * norms[b]);
            sq += 2.0 * r * r;
        }
    }
    Ok(sq.sqrt() / (m * m - m) as f64)
}
