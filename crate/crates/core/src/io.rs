//! Persistence: numeric CSV tables, JSON checkpoints and reports, the
//! output manifest with content hashes, and minimal SVG plot emission.
//!
//! Float formatting uses Rust's shortest round-trip representation, so a
//! written table parses back to bit-identical values. The manifest lists
//! every artifact with its SHA-256 so re-runs can be verified.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::net::Mlp;
use crate::sampler::SampleGrid;
use crate::sim::{MomentSeries, TrajectoryEnsemble};
use crate::train::{Metrics, SampledNodeRecord, TrainMode, TrainReport};
use crate::{Error, Result};

fn parse_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

// ───────────────────────── CSV tables ─────────────────────────

/// Moment series schema: `t, mu_1..mu_n, sigma_11..sigma_nn` (covariance
/// row-major).
pub fn write_moments_csv(path: &Path, m: &MomentSeries) -> Result<()> {
    let n = m.dim();
    let mut out = String::new();
    out.push('t');
    for i in 1..=n {
        write!(out, ",mu_{i}").unwrap();
    }
    for i in 1..=n {
        for j in 1..=n {
            write!(out, ",sigma_{i}{j}").unwrap();
        }
    }
    out.push('\n');
    for k in 0..m.len() {
        write!(out, "{}", m.times[k]).unwrap();
        for i in 0..n {
            write!(out, ",{}", m.means[k][i]).unwrap();
        }
        for i in 0..n {
            for j in 0..n {
                write!(out, ",{}", m.covariances[k][(i, j)]).unwrap();
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_moments_csv(path: &Path) -> Result<MomentSeries> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(path, "empty file"))??;
    let cols = header.split(',').count();
    // 1 + n + n^2 columns
    let n = (0..=64usize)
        .find(|n| 1 + n + n * n == cols)
        .ok_or_else(|| parse_err(path, format!("{cols} columns do not match 1 + n + n^2")))?;

    let mut times = Vec::new();
    let mut means = Vec::new();
    let mut covs = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| parse_err(path, format!("bad float: {e}")))?;
        if vals.len() != cols {
            return Err(parse_err(path, "ragged row"));
        }
        times.push(vals[0]);
        means.push(DVector::from_row_slice(&vals[1..1 + n]));
        covs.push(DMatrix::from_row_slice(n, n, &vals[1 + n..]));
    }
    Ok(MomentSeries {
        times,
        means,
        covariances: covs,
    })
}

/// Ensemble table schema: `traj_index, step, x_1..x_n`.
pub fn write_ensemble_csv(path: &Path, e: &TrajectoryEnsemble) -> Result<()> {
    let mut out = String::new();
    out.push_str("traj_index,step");
    for i in 1..=e.dim {
        write!(out, ",x_{i}").unwrap();
    }
    out.push('\n');
    for traj in 0..e.n_kept {
        for step in 0..=e.config.steps {
            write!(out, "{traj},{step}").unwrap();
            for v in e.state(traj, step) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Training-curve schema: `round, n_samples, rmse, rrmse, max_sigma_err`.
pub fn write_curves_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut out = String::from("round,n_samples,rmse,rrmse,max_sigma_err\n");
    for r in &report.rounds {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.round, r.n_samples, r.rmse, r.rrmse, r.max_sigma_error
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Sampled-node schema: `epoch, node_index, coord_1..coord_n, epsilon, pdf`
/// (epoch 0 is the seeded initial draw, before any residual exists).
pub fn write_samples_csv(path: &Path, grid: &SampleGrid, records: &[SampledNodeRecord]) -> Result<()> {
    let dim = grid.dim();
    let mut out = String::from("epoch,node_index");
    for d in 1..=dim {
        write!(out, ",coord_{d}").unwrap();
    }
    out.push_str(",epsilon,pdf\n");
    for r in records {
        write!(out, "{},{}", r.epoch, r.node_index).unwrap();
        for c in grid.coords(r.node_index) {
            write!(out, ",{c}").unwrap();
        }
        writeln!(out, ",{},{}", r.epsilon, r.pdf).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Generic numeric table with a caller-supplied header.
pub fn write_table_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ───────────────────────── checkpoints & reports ─────────────────────────

/// Self-contained weight checkpoint: both networks (with their feature
/// scaling), the activation spec, the seed, and training metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub activation: String,
    pub seed: u64,
    pub drift: Mlp,
    pub diffusion: Mlp,
    pub metadata: CheckpointMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub system: String,
    pub mode: TrainMode,
    pub rounds: usize,
    pub final_samples: usize,
    pub final_metrics: Option<Metrics>,
}

impl Checkpoint {
    pub fn new(drift: Mlp, diffusion: Mlp, seed: u64, metadata: CheckpointMeta) -> Self {
        Self {
            format: "sdeid-checkpoint-v1".into(),
            activation: "tanh".into(),
            seed,
            drift,
            diffusion,
            metadata,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&data)?;
        if ckpt.format != "sdeid-checkpoint-v1" {
            return Err(parse_err(path, format!("unknown checkpoint format {}", ckpt.format)));
        }
        if !ckpt.drift.all_finite() || !ckpt.diffusion.all_finite() {
            return Err(parse_err(path, "checkpoint contains non-finite parameters"));
        }
        Ok(ckpt)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut data = serde_json::to_string_pretty(value)?;
    data.push('\n');
    fs::write(path, data)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let data = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&data)?)
}

// ───────────────────────── manifest ─────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Manifest {
    /// Grid-node coordinates, filled by the simulate step.
    #[serde(default)]
    pub nodes: Vec<NodeEntry>,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeEntry {
    pub node_index: usize,
    pub coords: Vec<f64>,
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let data = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&data);
    Ok(format!("{:x}", hasher.finalize()))
}

impl Manifest {
    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn load_or_default(dir: &Path) -> Result<Self> {
        let p = Self::path_in(dir);
        if p.exists() {
            read_json(&p)
        } else {
            Ok(Self::default())
        }
    }

    /// Record (or refresh) a file entry; `rel` is relative to the output dir.
    pub fn upsert(&mut self, dir: &Path, rel: &str) -> Result<()> {
        let hash = sha256_hex(&dir.join(rel))?;
        if let Some(e) = self.files.iter_mut().find(|e| e.path == rel) {
            e.sha256 = hash;
        } else {
            self.files.push(FileEntry {
                path: rel.into(),
                sha256: hash,
            });
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&Self::path_in(dir), self)
    }

    /// Re-hash every listed file; returns the relative paths that are
    /// missing or whose content changed.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for e in &self.files {
            let p = dir.join(&e.path);
            if !p.exists() || sha256_hex(&p)? != e.sha256 {
                bad.push(e.path.clone());
            }
        }
        Ok(bad)
    }
}

// ───────────────────────── SVG emission ─────────────────────────

fn viridis(t: f64) -> (u8, u8, u8) {
    // five-anchor approximation of the viridis colormap
    const ANCHORS: [(f64, [f64; 3]); 5] = [
        (0.0, [68.0, 1.0, 84.0]),
        (0.25, [59.0, 82.0, 139.0]),
        (0.5, [33.0, 145.0, 140.0]),
        (0.75, [94.0, 201.0, 98.0]),
        (1.0, [253.0, 231.0, 37.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    for w in ANCHORS.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if t <= t1 {
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            let mix = |a: f64, b: f64| (a + f * (b - a)).round() as u8;
            return (mix(c0[0], c1[0]), mix(c0[1], c1[1]), mix(c0[2], c1[2]));
        }
    }
    (253, 231, 37)
}

/// Top-view heat map of a row-major `shape[0] x shape[1]` field (or a
/// 1-D strip when `shape.len() == 1`).
pub fn heatmap_svg(values: &[f64], shape: &[usize], bounds: &[[f64; 2]], title: &str) -> String {
    let (nx, ny) = if shape.len() == 2 { (shape[0], shape[1]) } else { (shape[0], 1) };
    let cell = 8.0f64;
    let margin = 40.0;
    let w = margin * 2.0 + nx as f64 * cell;
    let h = margin * 2.0 + ny as f64 * cell;
    let vmax = values.iter().cloned().fold(f64::MIN, f64::max);
    let vmin = values.iter().cloned().fold(f64::MAX, f64::min);
    let span = (vmax - vmin).max(1e-300);

    let mut svg = String::new();
    write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    )
    .unwrap();
    write!(
        svg,
        r#"<text x="{:.0}" y="20" font-family="monospace" font-size="13">{}</text>"#,
        margin, title
    )
    .unwrap();
    for ix in 0..nx {
        for iy in 0..ny {
            let v = if shape.len() == 2 { values[ix * ny + iy] } else { values[ix] };
            let (r, g, b) = viridis((v - vmin) / span);
            // y axis points up
            let px = margin + ix as f64 * cell;
            let py = margin + (ny - 1 - iy) as f64 * cell;
            write!(
                svg,
                r#"<rect x="{px:.1}" y="{py:.1}" width="{cell:.1}" height="{cell:.1}" fill="rgb({r},{g},{b})"/>"#
            )
            .unwrap();
        }
    }
    // axis labels from bounds
    write!(
        svg,
        r#"<text x="{:.0}" y="{:.0}" font-family="monospace" font-size="11">{}..{}</text>"#,
        margin,
        h - 12.0,
        bounds[0][0],
        bounds[0][1]
    )
    .unwrap();
    if bounds.len() > 1 {
        write!(
            svg,
            r#"<text x="4" y="{:.0}" font-family="monospace" font-size="11" transform="rotate(-90 12 {:.0})">{}..{}</text>"#,
            margin + 40.0,
            margin + 40.0,
            bounds[1][0],
            bounds[1][1]
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Overlay line plot of several named series sharing an x axis.
pub fn line_plot_svg(series: &[(&str, &[f64], &[f64])], title: &str) -> String {
    const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let w = 520.0;
    let h = 360.0;
    let ml = 50.0;
    let mr = 20.0;
    let mt = 36.0;
    let mb = 40.0;
    let (mut xmin, mut xmax) = (f64::MAX, f64::MIN);
    let (mut ymin, mut ymax) = (f64::MAX, f64::MIN);
    for (_, xs, ys) in series {
        for &x in *xs {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
        }
        for &y in *ys {
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    let xspan = (xmax - xmin).max(1e-300);
    let yspan = (ymax - ymin).max(1e-300);
    let px = |x: f64| ml + (x - xmin) / xspan * (w - ml - mr);
    let py = |y: f64| h - mb - (y - ymin) / yspan * (h - mt - mb);

    let mut svg = String::new();
    write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    )
    .unwrap();
    write!(
        svg,
        r#"<text x="{ml:.0}" y="20" font-family="monospace" font-size="13">{title}</text>"#
    )
    .unwrap();
    write!(
        svg,
        r##"<rect x="{ml:.0}" y="{mt:.0}" width="{:.0}" height="{:.0}" fill="none" stroke="#999"/>"##,
        w - ml - mr,
        h - mt - mb
    )
    .unwrap();
    for (si, (name, xs, ys)) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let mut d = String::new();
        for (i, (&x, &y)) in xs.iter().zip(ys.iter()).enumerate() {
            write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, px(x), py(y)).unwrap();
        }
        write!(
            svg,
            r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#
        )
        .unwrap();
        write!(
            svg,
            r#"<text x="{:.0}" y="{:.0}" font-family="monospace" font-size="11" fill="{color}">{name}</text>"#,
            w - mr - 150.0,
            mt + 16.0 + 14.0 * si as f64
        )
        .unwrap();
    }
    // axis extremes
    write!(
        svg,
        r#"<text x="{ml:.0}" y="{:.0}" font-family="monospace" font-size="10">{xmin:.3}</text>"#,
        h - mb + 14.0
    )
    .unwrap();
    write!(
        svg,
        r#"<text x="{:.0}" y="{:.0}" font-family="monospace" font-size="10">{xmax:.3}</text>"#,
        w - mr - 30.0,
        h - mb + 14.0
    )
    .unwrap();
    write!(
        svg,
        r#"<text x="4" y="{:.0}" font-family="monospace" font-size="10">{ymax:.3}</text>"#,
        mt + 8.0
    )
    .unwrap();
    write!(
        svg,
        r#"<text x="4" y="{:.0}" font-family="monospace" font-size="10">{ymin:.3}</text>"#,
        h - mb
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{compute_moments, simulate_ensemble, SdeModel, SimConfig};
    use tempfile::tempdir;

    fn sample_moments() -> MomentSeries {
        let model = SdeModel::new(
            2,
            1,
            |x, out| {
                out[0] = x[1];
                out[1] = -x[0];
            },
            |x, out| {
                out[0] = 0.1 * x[0];
                out[1] = 0.2 * x[1];
            },
        );
        let cfg = SimConfig {
            dt: 0.01,
            steps: 5,
            ensemble_size: 50,
            seed: 9,
            milstein_correction: false,
        };
        let ens = simulate_ensemble(&model, &[1.0, -0.5], &cfg).unwrap();
        compute_moments(&ens).unwrap()
    }

    #[test]
    fn moments_csv_round_trips_bit_exactly() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = sample_moments();
        write_moments_csv(&p, &m).unwrap();
        let back = read_moments_csv(&p).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn moments_csv_header_matches_schema() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_moments_csv(&p, &sample_moments()).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "t,mu_1,mu_2,sigma_11,sigma_12,sigma_21,sigma_22"
        );
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("w.json");
        let drift = Mlp::new(&[1, 8, 1], 3);
        let diffusion = Mlp::new(&[1, 8, 1], 4);
        let ckpt = Checkpoint::new(
            drift.clone(),
            diffusion.clone(),
            42,
            CheckpointMeta {
                system: "grazing".into(),
                mode: TrainMode::Rbms2,
                rounds: 7,
                final_samples: 140,
                final_metrics: None,
            },
        );
        ckpt.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.drift, drift);
        assert_eq!(back.diffusion, diffusion);
        assert_eq!(back.metadata.rounds, 7);
    }

    #[test]
    fn manifest_detects_content_changes() {
        let dir = tempdir().unwrap();
        let f = dir.path().join("a.csv");
        fs::write(&f, "x\n1\n").unwrap();
        let mut m = Manifest::default();
        m.upsert(dir.path(), "a.csv").unwrap();
        m.save(dir.path()).unwrap();
        assert!(m.verify(dir.path()).unwrap().is_empty());
        fs::write(&f, "x\n2\n").unwrap();
        assert_eq!(m.verify(dir.path()).unwrap(), vec!["a.csv".to_string()]);
    }

    #[test]
    fn svg_emitters_produce_wellformed_documents() {
        let hm = heatmap_svg(&[0.0, 0.5, 1.0, 0.25], &[2, 2], &[[0.0, 1.0], [0.0, 1.0]], "test");
        assert!(hm.starts_with("<svg") && hm.trim_end().ends_with("</svg>"));
        assert!(hm.matches("<rect").count() >= 4);
        let xs = [0.0, 1.0, 2.0];
        let ys = [0.1, 0.4, 0.2];
        let lp = line_plot_svg(&[("a", &xs, &ys)], "curve");
        assert!(lp.contains("<path") && lp.trim_end().ends_with("</svg>"));
    }
}
