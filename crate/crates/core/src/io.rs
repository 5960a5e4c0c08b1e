//! CSV readers and writers for schedules, frames, scenes and metrics.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::decoder::SymbolBelief;
use crate::error::{Error, Result};
use crate::optimizer::OptimizerReport;
use crate::sbl::SparseEstimate;
use crate::scene::{PhaseSchedule, ReceivedFrame, C64};

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

pub fn write_rows<I>(path: impl AsRef<Path>, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of a headed CSV file as parsed numbers, with their line numbers.
fn read_numeric(path: impl AsRef<Path>, header: &[&str]) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let found: Vec<String> = r.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    if found != header {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}, found {}", header.join(","), found.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let vals = rec
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("'{f}': {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", header.len(), vals.len()),
            });
        }
        out.push((line, vals));
    }
    Ok(out)
}

fn index(v: f64, line: usize, what: &str) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Parse {
            line,
            message: format!("{what} must be a positive integer, got {v}"),
        })
    }
}

/// `t,n,theta_rad` with 1-based `t` and `n`.
pub fn write_schedule(path: impl AsRef<Path>, sched: &PhaseSchedule) -> Result<()> {
    let n_ris = sched.n_ris();
    let rows = (0..sched.rows()).flat_map(|r| {
        (0..n_ris).map(move |n| vec![(r + 1).to_string(), (n + 1).to_string(), sched.row(r)[n].to_string()])
    });
    write_rows(path, &["t", "n", "theta_rad"], rows)
}

pub fn read_schedule(path: impl AsRef<Path>) -> Result<PhaseSchedule> {
    let rows = read_numeric(path, &["t", "n", "theta_rad"])?;
    let mut cells = Vec::with_capacity(rows.len());
    let (mut t_max, mut n_max) = (0, 0);
    for (line, v) in &rows {
        let t = index(v[0], *line, "t")?;
        let n = index(v[1], *line, "n")?;
        t_max = t_max.max(t);
        n_max = n_max.max(n);
        cells.push((t, n, v[2], *line));
    }
    let mut phases = vec![f64::NAN; t_max * n_max];
    for (t, n, theta, line) in cells {
        let slot = &mut phases[(t - 1) * n_max + n - 1];
        if !slot.is_nan() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate entry for t={t}, n={n}"),
            });
        }
        *slot = theta;
    }
    if let Some(i) = phases.iter().position(|p| p.is_nan()) {
        return Err(Error::Parse {
            line: 0,
            message: format!("missing entry for t={}, n={}", i / n_max + 1, i % n_max + 1),
        });
    }
    PhaseSchedule::new(t_max, n_max, phases)
}

/// `iter,loss,ortho_metric`, one row per optimizer iteration.
pub fn write_loss_trace(path: impl AsRef<Path>, report: &OptimizerReport) -> Result<()> {
    let rows = report
        .loss_trace
        .iter()
        .zip(&report.ortho_trace)
        .enumerate()
        .map(|(i, (l, o))| vec![(i + 1).to_string(), l.to_string(), o.to_string()]);
    write_rows(path, &["iter", "loss", "ortho_metric"], rows)
}

fn complex_rows<'a>(v: &'a [C64]) -> impl Iterator<Item = Vec<String>> + 'a {
    v.iter()
        .enumerate()
        .map(|(i, z)| vec![(i + 1).to_string(), z.re.to_string(), z.im.to_string()])
}

fn read_complex(path: impl AsRef<Path>, key: &'static str) -> Result<Vec<C64>> {
    let rows = read_numeric(path, &[key, "re", "im"])?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, (line, v)) in rows.iter().enumerate() {
        if index(v[0], *line, key)? != i + 1 {
            return Err(Error::Parse {
                line: *line,
                message: format!("{key} must run 1, 2, ... in order"),
            });
        }
        out.push(C64::new(v[1], v[2]));
    }
    Ok(out)
}

/// `t,re,im`.
pub fn write_frame(path: impl AsRef<Path>, frame: &ReceivedFrame) -> Result<()> {
    write_rows(path, &["t", "re", "im"], complex_rows(&frame.samples))
}

pub fn read_frame(path: impl AsRef<Path>) -> Result<ReceivedFrame> {
    Ok(ReceivedFrame {
        samples: read_complex(path, "t")?,
        noise_seed: 0,
    })
}

/// `m,re,im`.
pub fn write_sigma(path: impl AsRef<Path>, sigma: &[C64]) -> Result<()> {
    write_rows(path, &["m", "re", "im"], complex_rows(sigma))
}

pub fn read_sigma(path: impl AsRef<Path>) -> Result<Vec<C64>> {
    read_complex(path, "m")
}

/// `m,re,im,gamma`.
pub fn write_estimate(path: impl AsRef<Path>, est: &SparseEstimate) -> Result<()> {
    let rows = est.sigma.iter().zip(&est.gamma).enumerate().map(|(i, (z, g))| {
        vec![(i + 1).to_string(), z.re.to_string(), z.im.to_string(), g.to_string()]
    });
    write_rows(path, &["m", "re", "im", "gamma"], rows)
}

/// Pixel magnitudes as an 8-column grid, row-major.
pub fn write_magnitude_grid(path: impl AsRef<Path>, sigma: &[C64], width: usize) -> Result<()> {
    let mut f = File::create(path)?;
    for row in sigma.chunks(width) {
        let line: Vec<String> = row.iter().map(|z| format!("{:.4}", z.norm())).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

/// `t,symbol_index,prob1,prob2,prob3,prob4`.
pub fn write_decisions(path: impl AsRef<Path>, beliefs: &[SymbolBelief]) -> Result<()> {
    let rows = beliefs.iter().enumerate().map(|(i, b)| {
        let mut row = vec![(i + 1).to_string(), b.decided.to_string()];
        row.extend(b.probs.iter().map(|p| p.to_string()));
        row
    });
    write_rows(path, &["t", "symbol_index", "prob1", "prob2", "prob3", "prob4"], rows)
}

/// `t,theta_deg,gain_db`.
pub fn write_beam_pattern(path: impl AsRef<Path>, patterns: &[(usize, Vec<(f64, f64)>)]) -> Result<()> {
    let rows = patterns.iter().flat_map(|(t, pts)| {
        pts.iter()
            .map(move |(theta, g)| vec![t.to_string(), theta.to_string(), g.to_string()])
    });
    write_rows(path, &["t", "theta_deg", "gain_db"], rows)
}
