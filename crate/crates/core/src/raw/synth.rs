//! Synthetic raw acquisition: runs sRGB sources backwards through the
//! reference pipeline (inverse gamma, sensor mixing, inverse white balance,
//! CFA sampling) into raw counts, then forward again to produce training
//! pairs. Everything is keyed by explicit seeds.

use super::{
    isp::{reference_develop, CAMERA_MIX, GAMMA},
    preprocess_raw, BayerStack, CfaOrder, RawFrame,
};
use crate::autodiff::{Real, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sensor calibration used when synthesizing raw frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorProfile {
    pub black_level: f64,
    pub saturation: f64,
    pub wb_gains: (f64, f64, f64),
    /// Shot-noise scale: measurements are perturbed by `σ·√v` before
    /// quantizing into counts. Zero disables noise.
    pub noise_sigma: f64,
    pub cfa: CfaOrder,
}

impl Default for SensorProfile {
    fn default() -> Self {
        Self {
            black_level: 64.0 / 1023.0,
            saturation: 1.0,
            wb_gains: (2.0, 1.0, 1.6),
            noise_sigma: 0.0,
            cfa: CfaOrder::Rggb,
        }
    }
}

/// One training pair: packed input stack and its reference-developed target.
#[derive(Debug, Clone)]
pub struct RawSample<E: Real> {
    pub stack: BayerStack<E>,
    pub target: Tensor<E>,
}

impl<E: Real> RawSample<E> {
    pub fn cast<T: Real>(&self) -> RawSample<T> {
        RawSample { stack: self.stack.cast::<T>(), target: self.target.cast::<T>() }
    }
}

/// Derive an independent per-item seed from a run seed (splitmix64 finalizer,
/// so neighboring indices give uncorrelated streams).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Turn one sRGB patch into a raw frame and its training pair.
///
/// The inverse pipeline is exact at zero noise: decoded linear light is mixed
/// into camera space by [`CAMERA_MIX`] (the inverse of the development
/// matrix), divided by the white-balance gains, sampled at the CFA sites, and
/// affinely mapped into `[black, saturation]` counts.
pub fn synth_sample<E: Real>(
    source: &Tensor<E>,
    profile: &SensorProfile,
    seed: u64,
) -> Result<(RawFrame<E>, RawSample<E>)> {
    let s = source.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("synthesis source must be (h, w, 3), got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("synthesis source extents must be even, got {h}x{w}")));
    }
    if !(profile.saturation > profile.black_level) {
        return Err(Error::Input("sensor profile: saturation must exceed black level".into()));
    }
    let wb = [profile.wb_gains.0, profile.wb_gains.1, profile.wb_gains.2];
    if wb.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::Input("sensor profile: white-balance gains must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = source.data();
    let mut counts = vec![E::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let p = (y * w + x) * 3;
            let lin = [
                src[p].as_f64().clamp(0.0, 1.0).powf(GAMMA),
                src[p + 1].as_f64().clamp(0.0, 1.0).powf(GAMMA),
                src[p + 2].as_f64().clamp(0.0, 1.0).powf(GAMMA),
            ];
            let c = profile.cfa.color_at(y, x);
            let cam = CAMERA_MIX[c][0] * lin[0] + CAMERA_MIX[c][1] * lin[1] + CAMERA_MIX[c][2] * lin[2];
            let mut v = cam / wb[c];
            if profile.noise_sigma > 0.0 {
                v += profile.noise_sigma * v.max(0.0).sqrt() * gaussian(&mut rng);
                v = v.clamp(0.0, 1.0);
            }
            counts[y * w + x] = E::from_f64(
                profile.black_level + (profile.saturation - profile.black_level) * v,
            );
        }
    }
    let frame = RawFrame {
        mosaic: Tensor::new(&[h, w, 1], counts)?,
        black_level: profile.black_level,
        saturation: profile.saturation,
        wb_gains: profile.wb_gains,
        cfa: profile.cfa,
    };
    let stack = preprocess_raw(&frame)?;
    let target = reference_develop(&stack)?;
    Ok((frame, RawSample { stack, target }))
}

/// Cut `count` random patches from the sources and synthesize a raw training
/// pair for each. Deterministic given `seed`; samples use independent derived
/// seeds, so any subset is reproducible in isolation.
pub fn synth_dataset<E: Real>(
    sources: &[Tensor<E>],
    profile: &SensorProfile,
    seed: u64,
    count: usize,
    patch: usize,
) -> Result<Vec<RawSample<E>>> {
    if sources.is_empty() {
        return Err(Error::Input("synthesis needs at least one source image".into()));
    }
    if patch < 32 || patch % 2 != 0 {
        return Err(Error::Input(format!("patch size must be even and >= 32, got {patch}")));
    }
    for (i, src) in sources.iter().enumerate() {
        let s = src.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Shape(format!("source {i} must be (h, w, 3), got {s:?}")));
        }
        if s[0] < patch || s[1] < patch {
            return Err(Error::Input(format!(
                "source {i} is {}x{}, smaller than the {patch}-pixel patch",
                s[0], s[1]
            )));
        }
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let s_pick = derive_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s_pick);
        let src = &sources[rng.gen_range(0..sources.len())];
        let (sh, sw) = (src.shape()[0], src.shape()[1]);
        let y0 = rng.gen_range(0..=sh - patch);
        let x0 = rng.gen_range(0..=sw - patch);
        let d = src.data();
        let patch_rgb = Tensor::from_fn(&[patch, patch, 3], |j| {
            let c = j % 3;
            let x = (j / 3) % patch + x0;
            let y = (j / 3) / patch + y0;
            d[(y * sw + x) * 3 + c]
        })?;
        let (_, sample) = synth_sample(&patch_rgb, profile, derive_seed(s_pick, 0x5eed))?;
        out.push(sample);
    }
    Ok(out)
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in [−1, 1].
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f64> {
    let n = size / cell + 2;
    let grid: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let gy = fy as usize;
        let ty = smoothstep(fy - gy as f64);
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let gx = fx as usize;
            let tx = smoothstep(fx - gx as f64);
            let g00 = grid[gy * n + gx];
            let g01 = grid[gy * n + gx + 1];
            let g10 = grid[(gy + 1) * n + gx];
            let g11 = grid[(gy + 1) * n + gx + 1];
            let top = g00 + (g01 - g00) * tx;
            let bot = g10 + (g11 - g10) * tx;
            out[y * size + x] = top + (bot - top) * ty;
        }
    }
    out
}

/// Deterministic procedural photographs for synthesis sources: multi-octave
/// value noise with mild chroma variation, compressed through tanh so values
/// stay well inside (0, 1).
///
/// `detail` in [0, 1] adds fine octaves and soft-edged shapes. Zero detail
/// keeps spatial frequencies low enough that bilinear demosaicing is nearly
/// exact, which the inverse-pipeline round-trip test relies on; full detail
/// provides the high-frequency content classifier training needs.
pub fn procedural_sources<E: Real>(
    seed: u64,
    count: usize,
    size: usize,
    detail: f64,
) -> Result<Vec<Tensor<E>>> {
    if size < 64 || size % 2 != 0 {
        return Err(Error::Input(format!("source size must be even and >= 64, got {size}")));
    }
    let detail = detail.clamp(0.0, 1.0);
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let mut luma = vec![0.0f64; size * size];
        let octave = |rng: &mut ChaCha8Rng, cell: usize, amp: f64, field: &mut [f64]| {
            if amp <= 0.0 || cell < 2 {
                return;
            }
            let n = value_noise(rng, size, cell);
            for (f, v) in field.iter_mut().zip(&n) {
                *f += amp * v;
            }
        };
        octave(&mut rng, size / 4, 0.28, &mut luma);
        octave(&mut rng, size / 8, 0.16, &mut luma);
        octave(&mut rng, size / 16, 0.05, &mut luma);
        octave(&mut rng, size / 32, 0.10 * detail, &mut luma);
        octave(&mut rng, size / 64, 0.06 * detail, &mut luma);

        // Soft-edged elliptical patches give training sources crisp-but-
        // differentiable structure (edges a couple of pixels wide).
        let shapes = if detail > 0.0 { 6 } else { 0 };
        for _ in 0..shapes {
            let cx = rng.gen_range(0.0..size as f64);
            let cy = rng.gen_range(0.0..size as f64);
            let rx = rng.gen_range(size as f64 / 10.0..size as f64 / 3.0);
            let ry = rng.gen_range(size as f64 / 10.0..size as f64 / 3.0);
            let amp = rng.gen_range(0.12..0.35) * detail * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let edge = 2.5 / rx.min(ry);
            for y in 0..size {
                for x in 0..size {
                    let dx = (x as f64 - cx) / rx;
                    let dy = (y as f64 - cy) / ry;
                    let d = (dx * dx + dy * dy).sqrt();
                    let a = smoothstep((1.0 - d) / edge * 0.5 + 0.5);
                    if a > 0.0 {
                        luma[y * size + x] += amp * a;
                    }
                }
            }
        }

        let mut chroma1 = vec![0.0f64; size * size];
        let mut chroma2 = vec![0.0f64; size * size];
        octave(&mut rng, size / 4, 0.7, &mut chroma1);
        octave(&mut rng, size / 8, 0.3, &mut chroma1);
        octave(&mut rng, size / 4, 0.7, &mut chroma2);
        octave(&mut rng, size / 8, 0.3, &mut chroma2);

        let img = Tensor::from_fn(&[size, size, 3], |j| {
            let c = j % 3;
            let p = j / 3;
            let base = 0.525 + 0.33 * (luma[p] / 0.30).tanh();
            let (c1, c2) = ((chroma1[p] / 1.0).tanh(), (chroma2[p] / 1.0).tanh());
            let v = match c {
                0 => base + 0.055 * c1 + 0.015 * c2,
                1 => base - 0.015 * c1 + 0.020 * c2,
                _ => base - 0.045 * c1 - 0.035 * c2,
            };
            E::from_f64(v.clamp(0.02, 0.98))
        })?;
        images.push(img);
    }
    Ok(images)
}
