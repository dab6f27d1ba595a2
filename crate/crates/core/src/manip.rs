//! Post-processing manipulations and the lossy distribution channel.
//!
//! A developed photograph passes through one of five manipulation classes —
//! the identity, an unsharp mask, a down/up resampling cycle, a Gaussian
//! blur, or a JPEG recompression — and is then pushed through a distribution
//! channel that down-samples it and recompresses it at a low JPEG quality.
//! Every operation here is built from graph primitives, so gradients flow
//! from the classifier all the way back into the imaging pipeline.
//!
//! Border handling uses replicate padding for the convolution-based
//! manipulations: a constant image is then a fixed point of sharpening and
//! blurring everywhere, not just in the interior, which keeps the "native
//! versus processed" distinction meaningful on flat regions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, OpCheck, PadMode, PadSpec, Padding, Real, Tensor};
use crate::djpeg::{self, RoundingMode};
use crate::{Error, Result};

/// The five manipulation classes, with their stable integer encoding
/// (`Native = 0`) used for classifier labels and checkpoint metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManipulationClass {
    Native,
    Sharpen,
    Resample,
    Gaussian,
    Jpeg80,
}

impl ManipulationClass {
    pub const COUNT: usize = 5;

    /// All classes in encoding order.
    pub fn all() -> [Self; Self::COUNT] {
        [
            Self::Native,
            Self::Sharpen,
            Self::Resample,
            Self::Gaussian,
            Self::Jpeg80,
        ]
    }

    pub fn index(self) -> usize {
        match self {
            Self::Native => 0,
            Self::Sharpen => 1,
            Self::Resample => 2,
            Self::Gaussian => 3,
            Self::Jpeg80 => 4,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::all()
            .get(i)
            .copied()
            .ok_or_else(|| Error::Input(format!("manipulation class index {i} out of range (0..5)")))
    }

    /// Short name used in reports and confusion-matrix headers.
    pub fn label(self) -> &'static str {
        match self {
            Self::Native => "native",
            Self::Sharpen => "sharpen",
            Self::Resample => "resample",
            Self::Gaussian => "gaussian",
            Self::Jpeg80 => "jpg",
        }
    }
}

/// Lossy distribution channel settings: bilinear down-sampling followed by
/// JPEG recompression with a differentiable rounding surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub downsample_factor: usize,
    pub jpeg_quality: u8,
    pub rounding: RoundingMode,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            downsample_factor: 2,
            jpeg_quality: 50,
            rounding: RoundingMode::Sinusoidal,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor < 1 {
            return Err(Error::Config("channel downsample factor must be >= 1".into()));
        }
        if self.jpeg_quality < 1 || self.jpeg_quality > 100 {
            return Err(Error::Config(format!(
                "channel jpeg quality must lie in [1, 100], got {}",
                self.jpeg_quality
            )));
        }
        Ok(())
    }
}

/// Unsharp-mask taps applied to the value channel, row-major. The taps sum
/// to one ((26 − 4·4 − 1·4)/6 = 1), so flat regions pass through unchanged.
pub fn sharpen_taps() -> [f64; 9] {
    let k = [-1.0, -4.0, -1.0, -4.0, 26.0, -4.0, -1.0, -4.0, -1.0];
    k.map(|v| v / 6.0)
}

/// Normalized 5×5 Gaussian taps (σ = 0.83), sampled at integer offsets and
/// normalized to sum to one.
pub fn gaussian_taps() -> [f64; 25] {
    let sigma = 0.83f64;
    let mut taps = [0.0; 25];
    let mut sum = 0.0;
    for dy in -2i32..=2 {
        for dx in -2i32..=2 {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            taps[((dy + 2) * 5 + (dx + 2)) as usize] = v;
            sum += v;
        }
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

fn require_rgb<E: Real>(g: &Graph<E>, x: NodeId, what: &str) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("{what}: need an (h,w,3) image, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Builds a depthwise (h,w,c)→(h,w,c) convolution from per-tap weights by
/// zeroing all cross-channel entries.
fn depthwise_kernel<E: Real>(taps: &[f64], k: usize, channels: usize) -> Tensor<E> {
    Tensor::from_fn(&[k, k, channels, channels], |i| {
        let co = i % channels;
        let ci = (i / channels) % channels;
        let tap = i / (channels * channels);
        if ci == co {
            E::from_f64(taps[tap])
        } else {
            E::zero()
        }
    })
    .expect("kernel shape is valid")
}

/// Unsharp masking on the HSV value channel.
///
/// The value channel is the channel-wise maximum; sharpening it and scaling
/// the RGB triple by `V'/V` leaves hue and saturation untouched, which is
/// exactly the "convert, filter V, convert back" round trip without
/// materializing hue or saturation. Only the filtered value is clamped. The
/// max picks the first of tied channels when propagating gradients, and the
/// division guard keeps black pixels at zero.
pub fn sharpen<E: Real>(g: &mut Graph<E>, rgb: NodeId) -> Result<NodeId> {
    require_rgb(g, rgb, "sharpen")?;
    let v = g.reduce_max_channels(rgb)?;
    let kernel = g.constant(depthwise_kernel(&sharpen_taps(), 3, 1));
    let padded = g.pad2d(v, PadSpec::uniform(1, PadMode::Replicate))?;
    let filtered = g.conv2d(padded, kernel, None, 1, Padding::Valid)?;
    let filtered = g.clamp01(filtered);
    let safe = g.clamp_min(v, 1e-6);
    let inv = g.recip(safe);
    let ratio = g.mul(filtered, inv)?;
    g.mul_bcast(rgb, ratio)
}

/// One 1:2 bilinear down-sampling step followed by one 2:1 bilinear
/// up-sampling step; output extents equal the input's.
pub fn resample<E: Real>(g: &mut Graph<E>, rgb: NodeId) -> Result<NodeId> {
    let (h, w) = require_rgb(g, rgb, "resample")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "resample: extents must be even for a 1:2 cycle, got {h}x{w}"
        )));
    }
    let down = g.downsample(rgb, 2)?;
    g.upsample2(down)
}

/// Per-channel 5×5 Gaussian blur (σ = 0.83).
pub fn gaussian<E: Real>(g: &mut Graph<E>, rgb: NodeId) -> Result<NodeId> {
    require_rgb(g, rgb, "gaussian")?;
    let kernel = g.constant(depthwise_kernel(&gaussian_taps(), 5, 3));
    let padded = g.pad2d(rgb, PadSpec::uniform(2, PadMode::Replicate))?;
    g.conv2d(padded, kernel, None, 1, Padding::Valid)
}

/// JPEG recompression at quality 80 with the sinusoidal rounding surrogate.
pub fn jpeg80<E: Real>(g: &mut Graph<E>, rgb: NodeId) -> Result<NodeId> {
    djpeg::djpeg(g, rgb, 80, RoundingMode::Sinusoidal)
}

/// Applies one manipulation class. `Native` is the identity; every other
/// class clamps its output back to `[0,1]` so downstream stages always see
/// valid image data.
pub fn apply_manipulation<E: Real>(
    g: &mut Graph<E>,
    class: ManipulationClass,
    rgb: NodeId,
) -> Result<NodeId> {
    let out = match class {
        ManipulationClass::Native => return Ok(rgb),
        ManipulationClass::Sharpen => sharpen(g, rgb)?,
        ManipulationClass::Resample => resample(g, rgb)?,
        ManipulationClass::Gaussian => gaussian(g, rgb)?,
        ManipulationClass::Jpeg80 => jpeg80(g, rgb)?,
    };
    Ok(g.clamp01(out))
}

/// The distribution channel: bilinear down-sampling by `cfg.downsample_factor`
/// followed by JPEG recompression at `cfg.jpeg_quality` with `cfg.rounding`.
/// Output extents are the input's divided by the factor.
pub fn distribution_channel<E: Real>(
    g: &mut Graph<E>,
    rgb: NodeId,
    cfg: &ChannelConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let (h, w) = require_rgb(g, rgb, "distribution_channel")?;
    let f = cfg.downsample_factor;
    if h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!(
            "distribution_channel: extents {h}x{w} not divisible by factor {f}"
        )));
    }
    let reduced = if f == 1 { rgb } else { g.downsample(rgb, f)? };
    djpeg::djpeg(g, reduced, cfg.jpeg_quality, cfg.rounding)
}

/// Eager convenience wrapper: applies a manipulation to a plain tensor.
pub fn apply_manipulation_eval<E: Real>(
    class: ManipulationClass,
    rgb: &Tensor<E>,
) -> Result<Tensor<E>> {
    let mut g = Graph::new();
    let x = g.constant(rgb.clone());
    let y = apply_manipulation(&mut g, class, x)?;
    Ok(g.value(y).clone())
}

/// Eager convenience wrapper: pushes a plain tensor through the channel.
pub fn distribution_channel_eval<E: Real>(rgb: &Tensor<E>, cfg: &ChannelConfig) -> Result<Tensor<E>> {
    let mut g = Graph::new();
    let x = g.constant(rgb.clone());
    let y = distribution_channel(&mut g, x, cfg)?;
    Ok(g.value(y).clone())
}

/// Gradient checks for the manipulation/channel composites. Inputs stay in
/// `[0.2, 0.8]` so clamps and the value-channel max are away from their
/// kinks and central differences remain valid.
pub fn grad_checks() -> Vec<OpCheck> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    let image = Tensor::from_fn(&[16, 16, 3], |_| rng.gen_range(0.2..0.8))
        .expect("static shape")
        .with_requires_grad(true);
    let mut checks = Vec::new();
    let mk = |name: &str, class: ManipulationClass, img: &Tensor<f64>| {
        let img = img.clone();
        OpCheck::new(name, vec![img], move |g, l| apply_manipulation(g, class, l[0]))
            .sampled(40)
    };
    checks.push(mk("manip/sharpen", ManipulationClass::Sharpen, &image));
    checks.push(mk("manip/resample", ManipulationClass::Resample, &image));
    checks.push(mk("manip/gaussian", ManipulationClass::Gaussian, &image));
    checks.push(mk("manip/jpeg80", ManipulationClass::Jpeg80, &image));
    checks.push(
        OpCheck::new("manip/channel", vec![image], move |g, l| {
            distribution_channel(g, l[0], &ChannelConfig::default())
        })
        .sampled(40),
    );
    checks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rgb_tensor(seed: u64, h: usize, w: usize, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w, 3], |_| rng.gen_range(lo..hi)).unwrap()
    }

    #[test]
    fn class_encoding_is_stable() {
        assert_eq!(ManipulationClass::COUNT, 5);
        assert_eq!(ManipulationClass::Native.index(), 0);
        for (i, c) in ManipulationClass::all().into_iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(ManipulationClass::from_index(i).unwrap(), c);
        }
        assert!(ManipulationClass::from_index(5).is_err());
    }

    #[test]
    fn sharpen_kernel_shape_and_center() {
        let taps = sharpen_taps();
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((taps[4] - 26.0 / 6.0).abs() < 1e-12);
        assert!((taps[1] + 4.0 / 6.0).abs() < 1e-12);
        assert!((taps[0] + 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_kernel_normalized_with_expected_center() {
        let taps = gaussian_taps();
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Independent recomputation of the normalized center weight.
        let mut sum = 0.0;
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                sum += (-((dy * dy + dx * dx) as f64) / (2.0 * 0.83 * 0.83)).exp();
            }
        }
        assert!((taps[12] - 1.0 / sum).abs() < 1e-12);
        // Symmetry and positivity.
        for i in 0..25 {
            assert!(taps[i] > 0.0);
            assert!((taps[i] - taps[24 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_images_are_fixed_points() {
        let c = Tensor::from_fn(&[10, 12, 3], |i| 0.2 + 0.2 * (i % 3) as f64).unwrap();
        for class in [
            ManipulationClass::Sharpen,
            ManipulationClass::Resample,
            ManipulationClass::Gaussian,
        ] {
            let out = apply_manipulation_eval(class, &c).unwrap();
            assert!(
                out.max_abs_diff(&c) <= 1e-12,
                "{} moved a constant image by {}",
                class.label(),
                out.max_abs_diff(&c)
            );
        }
        // The mean is preserved to the same precision.
        let mean = |t: &Tensor<f64>| t.data().iter().sum::<f64>() / t.len() as f64;
        let out = apply_manipulation_eval(ManipulationClass::Gaussian, &c).unwrap();
        assert!((mean(&out) - mean(&c)).abs() <= 1e-12);
    }

    #[test]
    fn native_is_identity_and_dispatch_is_pure() {
        let x = rgb_tensor(5, 8, 8, 0.0, 1.0);
        let a = apply_manipulation_eval(ManipulationClass::Native, &x).unwrap();
        assert_eq!(a.data(), x.data());
        for class in ManipulationClass::all() {
            let once = apply_manipulation_eval(class, &x).unwrap();
            let twice = apply_manipulation_eval(class, &x).unwrap();
            assert_eq!(once.data(), twice.data(), "{} is not pure", class.label());
        }
    }

    #[test]
    fn sharpen_matches_direct_convolution_oracle() {
        // Gray image with a brighter center pixel: all channels equal, so the
        // output equals the clamped filtered value channel directly.
        let (h, w) = (7, 7);
        let mut v = vec![0.4; h * w];
        v[3 * w + 3] = 0.5;
        let img = Tensor::from_fn(&[h, w, 3], |i| v[i / 3]).unwrap();
        let out = apply_manipulation_eval(ManipulationClass::Sharpen, &img).unwrap();

        let taps = sharpen_taps();
        let at = |y: i64, x: i64| {
            let yc = y.clamp(0, h as i64 - 1) as usize;
            let xc = x.clamp(0, w as i64 - 1) as usize;
            v[yc * w + xc]
        };
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        acc += taps[((dy + 1) * 3 + (dx + 1)) as usize]
                            * at(y as i64 + dy, x as i64 + dx);
                    }
                }
                let expect = acc.clamp(0.0, 1.0);
                for c in 0..3 {
                    assert!(
                        (out.at3(y, x, c) - expect).abs() < 1e-9,
                        "({y},{x},{c}): got {}, oracle {expect}",
                        out.at3(y, x, c)
                    );
                }
            }
        }
        // Center amplified, 4-neighbors darkened, per the kernel signs.
        assert!(out.at3(3, 3, 0) > 0.5);
        for (ny, nx) in [(2, 3), (4, 3), (3, 2), (3, 4)] {
            assert!(out.at3(ny, nx, 0) < 0.4);
        }
    }

    #[test]
    fn sharpen_preserves_hue_and_saturation() {
        // Scaling all channels by V'/V keeps R:G:B ratios, hence hue and
        // saturation, wherever no channel clamps.
        let x = rgb_tensor(9, 8, 8, 0.2, 0.7);
        let out = apply_manipulation_eval(ManipulationClass::Sharpen, &x).unwrap();
        for p in 0..64 {
            let (r, g, b) = (x.data()[3 * p], x.data()[3 * p + 1], x.data()[3 * p + 2]);
            let (ro, go, bo) = (
                out.data()[3 * p],
                out.data()[3 * p + 1],
                out.data()[3 * p + 2],
            );
            if ro < 1.0 && go < 1.0 && bo < 1.0 && ro > 0.0 {
                assert!((ro * g - go * r).abs() < 1e-9);
                assert!((ro * b - bo * r).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn resample_reproduces_linear_ramps_interior() {
        let (h, w) = (12, 12);
        let ramp =
            Tensor::from_fn(&[h, w, 3], |i| {
                let p = i / 3;
                0.1 + 0.02 * (p / w) as f64 + 0.03 * (p % w) as f64
            })
            .unwrap();
        let out = apply_manipulation_eval(ManipulationClass::Resample, &ramp).unwrap();
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                for c in 0..3 {
                    assert!(
                        (out.at3(y, x, c) - ramp.at3(y, x, c)).abs() < 1e-12,
                        "ramp not reproduced at ({y},{x})"
                    );
                }
            }
        }
    }

    #[test]
    fn resample_flattens_nyquist_checkerboard_and_matches_scalar_oracle() {
        let (h, w) = (8, 10);
        let checker = Tensor::from_fn(&[h, w, 3], |i| {
            let p = i / 3;
            ((p / w + p % w) % 2) as f64
        })
        .unwrap();
        let out = apply_manipulation_eval(ManipulationClass::Resample, &checker).unwrap();
        for v in out.data() {
            assert!((*v - 0.5).abs() < 1e-12, "checkerboard survived: {v}");
        }

        // Full scalar-loop oracle on a random image: 2x2 box average, then
        // two-tap (3/4, 1/4) up-sampling with clamped edges.
        let x = rgb_tensor(21, h, w, 0.0, 1.0);
        let out = apply_manipulation_eval(ManipulationClass::Resample, &x).unwrap();
        let (hh, hw) = (h / 2, w / 2);
        let mut down = vec![0.0; hh * hw * 3];
        for y in 0..hh {
            for xx in 0..hw {
                for c in 0..3 {
                    down[(y * hw + xx) * 3 + c] = (x.at3(2 * y, 2 * xx, c)
                        + x.at3(2 * y, 2 * xx + 1, c)
                        + x.at3(2 * y + 1, 2 * xx, c)
                        + x.at3(2 * y + 1, 2 * xx + 1, c))
                        / 4.0;
                }
            }
        }
        let taps = |o: usize, n: usize| -> [(usize, f64); 2] {
            let k = o / 2;
            if o % 2 == 0 {
                [(k.saturating_sub(1), 0.25), (k, 0.75)]
            } else {
                [(k, 0.75), ((k + 1).min(n - 1), 0.25)]
            }
        };
        for y in 0..h {
            for xx in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (sy, wy) in taps(y, hh) {
                        for (sx, wx) in taps(xx, hw) {
                            acc += wy * wx * down[(sy * hw + sx) * 3 + c];
                        }
                    }
                    assert!(
                        (out.at3(y, xx, c) - acc.clamp(0.0, 1.0)).abs() < 1e-12,
                        "oracle mismatch at ({y},{xx},{c})"
                    );
                }
            }
        }
    }

    #[test]
    fn resample_rejects_odd_extents() {
        let x = rgb_tensor(1, 7, 8, 0.0, 1.0);
        let mut g = Graph::new();
        let n = g.constant(x);
        assert!(matches!(resample(&mut g, n), Err(Error::Shape(_))));
    }

    #[test]
    fn jpeg80_behaves_like_mild_compression() {
        // A constant stays within 1/255 (DC-only blocks).
        let c = Tensor::full(&[8, 8, 3], 0.42).unwrap();
        let out = apply_manipulation_eval(ManipulationClass::Jpeg80, &c).unwrap();
        assert!(out.max_abs_diff(&c) <= 1.0 / 255.0);

        // Strictly lossier than quality 95 on a textured patch.
        let x = rgb_tensor(33, 16, 16, 0.0, 1.0);
        let q80 = apply_manipulation_eval(ManipulationClass::Jpeg80, &x).unwrap();
        let q95 = {
            let mut g = Graph::new();
            let n = g.constant(x.clone());
            let y = djpeg::djpeg(&mut g, n, 95, RoundingMode::Sinusoidal).unwrap();
            let y = g.clamp01(y);
            g.value(y).clone()
        };
        let mse = |a: &Tensor<f64>, b: &Tensor<f64>| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                / a.len() as f64
        };
        assert!(mse(&q80, &x) > mse(&q95, &x), "quality 80 should lose more signal");
    }

    #[test]
    fn classes_produce_pairwise_distinct_outputs_in_range() {
        let x = rgb_tensor(13, 16, 16, 0.0, 1.0);
        let outs: Vec<Tensor<f64>> = ManipulationClass::all()
            .into_iter()
            .map(|c| apply_manipulation_eval(c, &x).unwrap())
            .collect();
        for out in &outs {
            for v in out.data() {
                assert!(*v >= 0.0 && *v <= 1.0);
            }
        }
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                assert!(
                    outs[i].max_abs_diff(&outs[j]) > 1e-6,
                    "classes {i} and {j} coincide"
                );
            }
        }
    }

    #[test]
    fn channel_geometry_and_constant_behavior() {
        let cfg = ChannelConfig::default();
        let x = rgb_tensor(3, 32, 48, 0.0, 1.0);
        let out = distribution_channel_eval(&x, &cfg).unwrap();
        assert_eq!(out.shape(), &[16, 24, 3]);

        let c = Tensor::full(&[16, 16, 3], 0.6).unwrap();
        let out = distribution_channel_eval(&c, &cfg).unwrap();
        for v in out.data() {
            assert!((*v - 0.6f64).abs() <= 1.0 / 255.0);
        }

        // A reduced size that is not a whole number of JPEG blocks is fine —
        // the codec pads internally — but extents must divide by the factor.
        let awkward = rgb_tensor(4, 18, 16, 0.0, 1.0);
        let mut g = Graph::new();
        let n = g.constant(awkward);
        let y = distribution_channel(&mut g, n, &cfg).unwrap();
        assert_eq!(g.shape(y), &[9, 8, 3]);

        let odd = rgb_tensor(5, 17, 16, 0.0, 1.0);
        let mut g = Graph::new();
        let n = g.constant(odd);
        assert!(matches!(
            distribution_channel(&mut g, n, &cfg),
            Err(Error::Shape(_))
        ));

        let bad = ChannelConfig {
            jpeg_quality: 0,
            ..ChannelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ChannelConfig {
            downsample_factor: 0,
            ..ChannelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn composites_pass_gradient_checks() {
        for check in grad_checks() {
            let report = check_gradients(&check, 1e-5, 1e-4).unwrap();
            assert!(report.pass, "{report}");
        }
    }

    #[test]
    fn low_pass_classes_confusable_after_channel() {
        // After the channel, the three low-pass manipulations look more like
        // one another than any of them looks like sharpening: their pairwise
        // PSNR exceeds every PSNR against the sharpened branch.
        let src = crate::raw::procedural_sources::<f64>(400, 1, 64, 1.0).unwrap();
        let x = &src[0];
        let cfg = ChannelConfig::default();
        let through = |class: ManipulationClass| {
            let mut g = Graph::new();
            let n = g.constant(x.clone());
            let m = apply_manipulation(&mut g, class, n).unwrap();
            let y = distribution_channel(&mut g, m, &cfg).unwrap();
            g.value(y).clone()
        };
        let psnr = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let mse = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (255.0 * (p - q)).powi(2))
                .sum::<f64>()
                / a.len() as f64;
            20.0 * 255.0f64.log10() - 10.0 * mse.log10()
        };
        let lp = [
            through(ManipulationClass::Gaussian),
            through(ManipulationClass::Jpeg80),
            through(ManipulationClass::Resample),
        ];
        let sharp = through(ManipulationClass::Sharpen);
        let mut min_lp = f64::INFINITY;
        for i in 0..3 {
            for j in i + 1..3 {
                min_lp = min_lp.min(psnr(&lp[i], &lp[j]));
            }
        }
        let max_sharp = lp
            .iter()
            .map(|a| psnr(a, &sharp))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            min_lp > max_sharp,
            "low-pass pairwise PSNR {min_lp:.2} dB should exceed PSNR to sharpen {max_sharp:.2} dB"
        );
    }

    #[test]
    fn rounding_mode_serde_round_trips() {
        let cfg = ChannelConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: ChannelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let harmonic: ChannelConfig =
            serde_json::from_str(r#"{"downsample_factor":2,"jpeg_quality":50,"rounding":"harmonic5"}"#)
                .unwrap();
        assert_eq!(harmonic.rounding, RoundingMode::Harmonic(5));
        assert!(serde_json::from_str::<ChannelConfig>(
            r#"{"downsample_factor":2,"jpeg_quality":50,"rounding":"cubic"}"#
        )
        .is_err());
    }
}
