//! Image-fidelity and classification metrics: PSNR, SSIM, accuracy, and
//! confusion matrices.
//!
//! Fidelity metrics follow the 8-bit reporting convention: differences are
//! scaled to [0,255] regardless of the tensors' own scale, so a PSNR of
//! 48.13 dB means a uniform one-count error. Infinite PSNR (identical
//! inputs) is carried as `f64::INFINITY` internally and always rendered as
//! the literal sentinel `inf` in reports, never as a raw float.

use crate::autodiff::{Real, Tensor};
use crate::manip::ManipulationClass;
use crate::{Error, Result};

/// BT.601 luminance weights, shared with the JPEG path.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Row/column presentation order for confusion tables: the classes are
/// listed as (native, sharpen, gaussian, jpg, resample).
pub const DISPLAY_ORDER: [usize; 5] = [0, 1, 3, 4, 2];

fn check_pair<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "metric inputs must share a shape, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB on the [0,255] scale:
/// `20·log10(255) − 10·log10(MSE₂₅₅)`. Identical inputs give `f64::INFINITY`.
pub fn psnr<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| {
            let d = 255.0 * (p.as_f64() - q.as_f64());
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * 255.0f64.log10() - 10.0 * mse.log10())
}

/// Renders a dB value for reports: finite values print as themselves,
/// infinity as the `inf` sentinel.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Luminance plane on the [0,255] scale. Accepts (h,w,3) RGB or an (h,w,1)
/// single channel.
fn luminance255<E: Real>(img: &Tensor<E>) -> Result<Vec<f64>> {
    let s = img.shape();
    if s.len() != 3 || (s[2] != 1 && s[2] != 3) {
        return Err(Error::Shape(format!(
            "luminance needs (h,w,1) or (h,w,3), got {s:?}"
        )));
    }
    let c = s[2];
    Ok(img
        .data()
        .chunks_exact(c)
        .map(|px| {
            if c == 1 {
                255.0 * px[0].as_f64()
            } else {
                255.0
                    * (LUMA[0] * px[0].as_f64()
                        + LUMA[1] * px[1].as_f64()
                        + LUMA[2] * px[2].as_f64())
            }
        })
        .collect())
}

fn gaussian_window11() -> [f64; 121] {
    let sigma = 1.5f64;
    let mut w = [0.0; 121];
    let mut sum = 0.0;
    for dy in -5i32..=5 {
        for dx in -5i32..=5 {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            w[((dy + 5) * 11 + (dx + 5)) as usize] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Structural similarity on luminance with the standard 11×11 Gaussian
/// window (σ = 1.5) and constants C1 = (0.01·255)², C2 = (0.03·255)²,
/// averaged over all fully-covered window positions.
pub fn ssim<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < 11 || w < 11 {
        return Err(Error::Input(format!(
            "ssim needs at least 11x11 images, got {h}x{w}"
        )));
    }
    let la = luminance255(a)?;
    let lb = luminance255(b)?;
    let win = gaussian_window11();
    let c1 = (0.01 * 255.0f64).powi(2);
    let c2 = (0.03 * 255.0f64).powi(2);

    let mut total = 0.0;
    let mut positions = 0usize;
    for y0 in 0..h - 10 {
        for x0 in 0..w - 10 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..11 {
                let row = (y0 + dy) * w + x0;
                for dx in 0..11 {
                    let g = win[dy * 11 + dx];
                    let (va, vb) = (la[row + dx], lb[row + dx]);
                    ma += g * va;
                    mb += g * vb;
                    saa += g * va * va;
                    sbb += g * vb * vb;
                    sab += g * va * vb;
                }
            }
            let (va, vb, vab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * vab + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            positions += 1;
        }
    }
    Ok(total / positions as f64)
}

/// 5×5 confusion counts indexed `[true][predicted]` in class-encoding order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u64; 5]; 5],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= 5 || predicted >= 5 {
            return Err(Error::Input(format!(
                "class indices must lie in 0..5, got truth {truth}, predicted {predicted}"
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn counts(&self) -> &[[u64; 5]; 5] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Fraction of correct predictions; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..5).map(|i| self.counts[i][i]).sum();
        trace as f64 / total as f64
    }

    /// Raw counts as CSV in presentation order, one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for &j in &DISPLAY_ORDER {
            out.push(',');
            out.push_str(ManipulationClass::from_index(j).unwrap().label());
        }
        out.push('\n');
        for &i in &DISPLAY_ORDER {
            out.push_str(ManipulationClass::from_index(i).unwrap().label());
            for &j in &DISPLAY_ORDER {
                out.push_str(&format!(",{}", self.counts[i][j]));
            }
            out.push('\n');
        }
        out
    }

    /// Row-normalized percentages as an aligned text table in presentation
    /// order; rows with no samples render as dashes.
    pub fn render_text(&self) -> String {
        let mut out = format!("{:>10}", "");
        for &j in &DISPLAY_ORDER {
            out.push_str(&format!(
                "{:>10}",
                ManipulationClass::from_index(j).unwrap().label()
            ));
        }
        out.push('\n');
        for &i in &DISPLAY_ORDER {
            out.push_str(&format!(
                "{:>10}",
                ManipulationClass::from_index(i).unwrap().label()
            ));
            let row_total: u64 = self.counts[i].iter().sum();
            for &j in &DISPLAY_ORDER {
                if row_total == 0 {
                    out.push_str(&format!("{:>10}", "-"));
                } else {
                    out.push_str(&format!(
                        "{:>9.1}%",
                        100.0 * self.counts[i][j] as f64 / row_total as f64
                    ));
                }
            }
            out.push('\n');
        }
        out.push_str(&format!("accuracy: {:.4}\n", self.accuracy()));
        out
    }
}

/// Tallies a prediction stream against ground truth.
pub fn confusion(labels: &[usize], predictions: &[usize]) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::Input(format!(
            "label and prediction streams differ in length: {} vs {}",
            labels.len(),
            predictions.len()
        )));
    }
    let mut m = ConfusionMatrix::new();
    for (&t, &p) in labels.iter().zip(predictions) {
        m.record(t, p)?;
    }
    Ok(m)
}
