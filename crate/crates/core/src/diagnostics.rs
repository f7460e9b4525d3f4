//! Field maps, adjoint inputs, the ghost-residual metric and report files.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses;
use crate::nets::{self, Critic};
use crate::tensor::Tape;
use crate::{Image, Net, Real};

/// Pixels of the shifted target below this fraction of its peak are outside
/// the ghost window.
pub const WINDOW_THRESHOLD: f64 = 1e-3;
/// Amplitude percentile used as the PNG clip level.
pub const CLIP_PERCENTILE: f64 = 0.99;

/// Raw `F(X, Y)` before pixel summation.
pub fn f_map(critic: &dyn Critic<Real>, x: &Image, y: &Image) -> Result<Image> {
    nets::field_map(critic, x, y)
}

/// Which loss the adjoint input is taken of.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AdjointLoss {
    /// `sum |Y - G|^p`.
    Lp(f64),
    /// `-D_X(G)`.
    Wcgan,
    /// `sum |F(X, Y) - F(X, G)|`.
    Ccgan,
}

impl AdjointLoss {
    pub fn name(&self) -> &'static str {
        match self {
            AdjointLoss::Lp(_) => "lp",
            AdjointLoss::Wcgan => "wcgan",
            AdjointLoss::Ccgan => "ccgan",
        }
    }
}

/// `dLOSS/dG(y)` at the given prediction.
pub fn adjoint_at(
    loss: AdjointLoss,
    critic: Option<&dyn Critic<Real>>,
    x: &Image,
    y: &Image,
    pred: &Image,
) -> Result<Image> {
    let tape = Tape::new();
    let g = tape.var(pred.clone());
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let need = || critic.ok_or_else(|| Error::invalid("adjoint_input", "adversarial loss needs a critic"));
    let l = match loss {
        AdjointLoss::Lp(p) => losses::lp_loss_on(&tape, g, yv, p, None)?,
        AdjointLoss::Wcgan => {
            let c = need()?;
            let params = c.bind(&tape, false);
            let d = c.value_on(&tape, &params, xv, g)?;
            tape.scale(d, -1.0)
        }
        AdjointLoss::Ccgan => {
            let c = need()?;
            let params = c.bind(&tape, false);
            losses::ccgan_term_on(&tape, c, &params, xv, yv, g)?
        }
    };
    Ok(tape.grad_values(l, &[g])?.remove(0))
}

/// `dLOSS/dG(y)` at `G = generator(X)`.
pub fn adjoint_input(
    loss: AdjointLoss,
    generator: &Net,
    critic: Option<&dyn Critic<Real>>,
    x: &Image,
    y: &Image,
    z: Option<&Image>,
) -> Result<Image> {
    let pred = generator.generator_forward(x, z)?;
    adjoint_at(loss, critic, x, y, &pred)
}

/// Mask of the ghost window: rows `tau..h-tau` where the `tau`-shifted
/// target is non-negligible.
pub fn ghost_window(target: &Image, tau: usize) -> Result<Vec<bool>> {
    let (c, h, w) = target.chw()?;
    if tau == 0 || 2 * tau >= h {
        return Err(Error::invalid("ghost_residual_energy", format!("delay {tau} invalid for height {h}")));
    }
    let thr = WINDOW_THRESHOLD * target.max_abs();
    let d = target.data();
    let mut mask = vec![false; c * h * w];
    for ch in 0..c {
        for r in tau..h - tau {
            for col in 0..w {
                let shifted = d[(ch * h + r - tau) * w + col];
                mask[(ch * h + r) * w + col] = shifted.abs() > thr;
            }
        }
    }
    Ok(mask)
}

/// Energy of `pred - target` inside the ghost window, over target energy.
pub fn ghost_residual_energy(pred: &Image, target: &Image, tau: usize) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "ghost_residual_energy",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let mask = ghost_window(target, tau)?;
    let norm: f64 = target.data().iter().map(|v| v * v).sum();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let e: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|((p, t), _)| (p - t) * (p - t))
        .sum();
    Ok(e / norm)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportMeta {
    pub epoch: usize,
    pub step: usize,
    pub mode: String,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct DiagnosticReport {
    pub meta: ReportMeta,
    /// Named images, all with the same extents.
    pub images: Vec<(String, Image)>,
    pub ghost_residual_energy: f64,
    pub metrics: BTreeMap<String, f64>,
}

impl DiagnosticReport {
    pub fn validate(&self) -> Result<()> {
        if let Some((_, first)) = self.images.first() {
            if let Some((name, _)) = self.images.iter().find(|(_, i)| i.shape() != first.shape()) {
                return Err(Error::shape("diagnostic-report", format!("image {name} differs in extent")));
            }
        }
        if !(self.ghost_residual_energy >= 0.0) {
            return Err(Error::invalid("diagnostic-report", "negative ghost energy"));
        }
        Ok(())
    }

    pub fn stem(&self) -> String {
        format!("{}_e{:04}_s{}", self.meta.mode, self.meta.epoch, self.meta.seed)
    }
}

/// Nearest-rank percentile of `|v|`.
pub fn clip_level(img: &Image) -> f64 {
    let mut a: Vec<f64> = img.data().iter().map(|v| v.abs()).collect();
    if a.is_empty() {
        return 0.0;
    }
    a.sort_by(|x, y| x.total_cmp(y));
    let rank = ((CLIP_PERCENTILE * a.len() as f64).ceil() as usize).clamp(1, a.len());
    a[rank - 1]
}

/// Grey level of amplitude `v`: 128 at zero, darker for positive values.
pub fn grey_level(v: f64, clip: f64) -> u8 {
    if clip <= 0.0 {
        return 128;
    }
    let s = (v / clip).clamp(-1.0, 1.0);
    (128.0 - 127.0 * s).round() as u8
}

pub fn to_png(img: &Image, clip: f64) -> Result<GrayImage> {
    let (_, h, w) = img.chw()?;
    let d = img.data();
    Ok(GrayImage::from_fn(w as u32, h as u32, |c, r| {
        Luma([grey_level(d[r as usize * w + c as usize], clip)])
    }))
}

#[derive(Serialize)]
struct Sidecar<'a> {
    epoch: usize,
    step: usize,
    mode: &'a str,
    seed: u64,
    ghost_residual_energy: f64,
    metrics: &'a BTreeMap<String, f64>,
    clip: BTreeMap<&'a str, f64>,
    images: Vec<String>,
}

pub const REPORT_CSV: &str = "diagnostics.csv";

/// Writes one PNG per image, a JSON sidecar and a CSV row; returns the
/// paths written.
pub fn emit_report(report: &DiagnosticReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    report.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = report.stem();
    let mut written = Vec::new();
    let mut clips = BTreeMap::new();
    let mut names = Vec::new();
    for (name, img) in &report.images {
        let clip = clip_level(img);
        clips.insert(name.as_str(), clip);
        let path = dir.join(format!("{stem}_{name}.png"));
        to_png(img, clip)?
            .save(&path)
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        names.push(path.file_name().unwrap().to_string_lossy().into_owned());
        written.push(path);
    }
    let side = Sidecar {
        epoch: report.meta.epoch,
        step: report.meta.step,
        mode: &report.meta.mode,
        seed: report.meta.seed,
        ghost_residual_energy: report.ghost_residual_energy,
        metrics: &report.metrics,
        clip: clips,
        images: names,
    };
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    written.push(json_path);

    let csv = dir.join(REPORT_CSV);
    let fresh = !csv.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv)
        .map_err(|e| Error::io(&csv, e))?;
    let keys: Vec<&String> = report.metrics.keys().collect();
    let mut out = String::new();
    if fresh {
        out.push_str("epoch,step,mode,seed,ghost_residual_energy");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
    }
    out.push_str(&format!(
        "{},{},{},{},{}",
        report.meta.epoch, report.meta.step, report.meta.mode, report.meta.seed, report.ghost_residual_energy
    ));
    for k in &keys {
        out.push_str(&format!(",{}", report.metrics[*k]));
    }
    out.push('\n');
    f.write_all(out.as_bytes()).map_err(|e| Error::io(&csv, e))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{IdentityField, LinearField};
    use crate::synth::{apply_ghost, render_events, shift_rows, Event};
    use crate::Tensor;

    fn primary() -> Image {
        render_events(32, 8, 2.0, &[Event::flat(9.0, 1.0), Event::flat(20.0, -0.5)])
    }

    #[test]
    fn zero_at_target() {
        let y = primary();
        assert_eq!(ghost_residual_energy(&y, &y, 5).unwrap(), 0.0);
        assert!(ghost_residual_energy(&y, &y, 0).is_err());
        assert!(ghost_residual_energy(&y, &y, 16).is_err());
    }

    #[test]
    fn unprocessed_input_scores_its_ghost() {
        let y = primary();
        let x = apply_ghost(&y, 5, -1.0).unwrap();
        let g = shift_rows(&y, 5).unwrap();
        let thr = WINDOW_THRESHOLD * y.max_abs();
        let want = g.data()[5 * 8..27 * 8]
            .iter()
            .filter(|v| v.abs() > thr)
            .map(|v| v * v)
            .sum::<f64>()
            / y.data().iter().map(|v| v * v).sum::<f64>();
        let got = ghost_residual_energy(&x, &y, 5).unwrap();
        assert!(got > 0.0);
        assert!((got - want).abs() < 1e-9 * want, "{got} vs {want}");
    }

    #[test]
    fn noise_outside_window_is_ignored() {
        let y = primary();
        let x = apply_ghost(&y, 5, -1.0).unwrap();
        let mask = ghost_window(&y, 5).unwrap();
        let mut noisy = x.clone();
        for (i, v) in noisy.data_mut().iter_mut().enumerate() {
            if !mask[i] {
                *v += 0.3 * ((i * 7919) % 13) as f64;
            }
        }
        let a = ghost_residual_energy(&x, &y, 5).unwrap();
        let b = ghost_residual_energy(&noisy, &y, 5).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn f_map_examples() {
        let x = Tensor::image(4, 4, |r, c| (r + c) as f64);
        let y = Tensor::image(4, 4, |r, c| r as f64 - c as f64);
        assert_eq!(f_map(&IdentityField, &x, &y).unwrap(), y);
        let zero = LinearField { coef: Tensor::zeros(&[1, 4, 4]) };
        assert!(f_map(&zero, &x, &y).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adjoint_examples() {
        let x = Tensor::image(4, 4, |r, c| (r * c) as f64);
        let y = Tensor::image(4, 4, |r, c| (r as f64 - 1.5) * (c as f64 + 0.25));
        let g = Tensor::image(4, 4, |r, c| 0.1 * (r + 2 * c) as f64);
        let a = adjoint_at(AdjointLoss::Lp(2.0), None, &x, &y, &g).unwrap();
        let want = y.sub(&g).unwrap().scale(-2.0);
        assert!(a.sub(&want).unwrap().max_abs() < 1e-12);
        let a = adjoint_at(AdjointLoss::Lp(1.5), None, &x, &y, &y).unwrap();
        assert!(a.max_abs() == 0.0);
        let a = adjoint_at(AdjointLoss::Ccgan, Some(&IdentityField), &x, &y, &g).unwrap();
        let want = y.sub(&g).unwrap().map(|v| -v.signum());
        assert_eq!(a, want);
        assert!(adjoint_at(AdjointLoss::Wcgan, None, &x, &y, &g).is_err());
    }

    #[test]
    fn png_levels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::image(8, 8, |r, c| (r as f64 - 3.5) * 0.3 + c as f64 * 0.01);
        let report = DiagnosticReport {
            meta: ReportMeta { epoch: 40, step: 7, mode: "ccgan".into(), seed: 2 },
            images: vec![("pred".into(), img.clone()), ("target".into(), img.scale(2.0)), ("input".into(), img.scale(-1.0))],
            ghost_residual_energy: 0.25,
            metrics: BTreeMap::from([("loss_lp".to_string(), 1.5)]),
        };
        let files = emit_report(&report, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "png").count(), 3);
        let clip = clip_level(&img);
        let png = image::open(&files[0]).unwrap().to_luma8();
        for r in 0..8 {
            for c in 0..8 {
                let v = img.data()[r * 8 + c];
                let back = (128.0 - png.get_pixel(c as u32, r as u32)[0] as f64) / 127.0 * clip;
                assert!((back - v.clamp(-clip, clip)).abs() <= clip / 254.0 + 1e-12);
            }
        }
        let first = fs::read(&files[0]).unwrap();
        emit_report(&report, dir.path()).unwrap();
        assert_eq!(fs::read(&files[0]).unwrap(), first);
        let csv = fs::read_to_string(dir.path().join(REPORT_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
