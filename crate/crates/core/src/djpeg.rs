//! Differentiable JPEG compression.
//!
//! The codec mirrors baseline JPEG at 4:4:4 chroma resolution — BT.601
//! full-range colour conversion, 8x8 blocking, orthonormal DCT-II, standard
//! quantization tables with the usual quality scaling — but expresses every
//! stage as graph operations so gradients flow end to end. The only
//! non-differentiable stage, coefficient rounding, is selectable: exact
//! rounding for evaluation (forward only) or a smooth surrogate for training.
//!
//! Conventions: images live in `[0, 1]`, the level shift subtracts 0.5 from
//! all three channels, and the integer quantization tables are rescaled by
//! 1/255 so quantization decisions match the classical 255-domain pipeline
//! exactly. Images whose extents are not multiples of 8 are edge-replicated
//! up and cropped back after decoding.

use crate::autodiff::{Graph, NodeId, Real, Tensor};
use crate::autodiff::{PadMode, PadSpec, Padding};
use crate::{Error, Result};

/// How DCT coefficients are mapped to quantization levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundingMode {
    /// True round-to-nearest-even. Forward passes only: its gradient is zero
    /// almost everywhere, and the graph refuses to backpropagate through it.
    Exact,
    /// `rho(x) = x - sin(2 pi x) / (2 pi)`: the first Fourier term of the
    /// rounding residual. Smooth, exact at integers.
    Sinusoidal,
    /// `rho_K(x) = x - sum_{k=1..K} (-1)^(k+1) sin(2 pi k x) / (k pi)`: the
    /// K-term Fourier expansion of the rounding residual, which is the
    /// L2-optimal trigonometric approximation of that degree.
    Harmonic(u32),
}

impl RoundingMode {
    /// Number of harmonic terms used when callers ask for the default
    /// higher-order surrogate.
    pub const DEFAULT_HARMONIC_TERMS: u32 = 5;

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(RoundingMode::Exact),
            "sin" | "sinusoidal" => Ok(RoundingMode::Sinusoidal),
            "harmonic" => Ok(RoundingMode::Harmonic(Self::DEFAULT_HARMONIC_TERMS)),
            other => {
                if let Some(k) = other.strip_prefix("harmonic").and_then(|k| k.parse().ok()) {
                    if k >= 1 {
                        return Ok(RoundingMode::Harmonic(k));
                    }
                }
                Err(Error::Input(format!(
                    "unknown rounding mode '{other}' (expected exact, sin or harmonic[K])"
                )))
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            RoundingMode::Exact => "exact".into(),
            RoundingMode::Sinusoidal => "sin".into(),
            RoundingMode::Harmonic(k) => format!("harmonic{k}"),
        }
    }
}

impl serde::Serialize for RoundingMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> serde::Deserialize<'de> for RoundingMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        RoundingMode::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Baseline luminance quantization table (quality 50), row-major.
pub const BASE_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Baseline chrominance quantization table (quality 50), row-major.
pub const BASE_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Integer quantization tables after quality scaling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantTablePair {
    pub luma: [u16; 64],
    pub chroma: [u16; 64],
}

impl QuantTablePair {
    /// Standard quality scaling: `scale = 5000/q` below 50 and `200 - 2q`
    /// from 50 up; each entry becomes `floor((base*scale + 50)/100)` clamped
    /// to `[1, 255]`. Quality 50 reproduces the base tables, quality 100 is
    /// all ones.
    pub fn for_quality(quality: u8) -> Result<Self> {
        if quality < 1 || quality > 100 {
            return Err(Error::Input(format!(
                "jpeg quality must be in 1..=100, got {quality}"
            )));
        }
        let q = quality as u32;
        let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
        let apply = |base: &[u16; 64]| {
            let mut out = [0u16; 64];
            for (o, &b) in out.iter_mut().zip(base) {
                *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
            }
            out
        };
        Ok(QuantTablePair {
            luma: apply(&BASE_LUMA),
            chroma: apply(&BASE_CHROMA),
        })
    }
}

/// The orthonormal 8-point DCT-II basis used by both codec directions.
pub struct DctBasis {
    mat: [f64; 64],
}

impl DctBasis {
    pub fn new() -> Self {
        DctBasis {
            mat: crate::autodiff::dct8_basis_matrix(),
        }
    }

    /// Row-major 8x8 matrix; row 0 is the constant vector `1/sqrt(8)`.
    pub fn matrix(&self) -> &[f64; 64] {
        &self.mat
    }
}

impl Default for DctBasis {
    fn default() -> Self {
        Self::new()
    }
}

/// BT.601 full-range RGB -> YCbCr expressed as a 1x1 convolution: returns
/// the `(1,1,3,3)` kernel and `(3)` bias. White maps to Y=1, Cb=Cr=0.5.
pub fn rgb_to_ycbcr_weights<E: Real>() -> (Tensor<E>, Tensor<E>) {
    const KR: f64 = 0.299;
    const KG: f64 = 0.587;
    const KB: f64 = 0.114;
    let cb_scale = 2.0 * (1.0 - KB); // 1.772
    let cr_scale = 2.0 * (1.0 - KR); // 1.402
    // Rows: Y, Cb, Cr; columns: R, G, B.
    let m = [
        [KR, KG, KB],
        [-KR / cb_scale, -KG / cb_scale, (1.0 - KB) / cb_scale],
        [(1.0 - KR) / cr_scale, -KG / cr_scale, -KB / cr_scale],
    ];
    let bias = [0.0, 0.5, 0.5];
    pack_1x1(m, bias)
}

/// Inverse of [`rgb_to_ycbcr_weights`], derived from the same constants so
/// the round trip is exact to floating-point precision.
pub fn ycbcr_to_rgb_weights<E: Real>() -> (Tensor<E>, Tensor<E>) {
    const KR: f64 = 0.299;
    const KG: f64 = 0.587;
    const KB: f64 = 0.114;
    let cb_scale = 2.0 * (1.0 - KB);
    let cr_scale = 2.0 * (1.0 - KR);
    let g_cb = -KB * cb_scale / KG;
    let g_cr = -KR * cr_scale / KG;
    // Rows: R, G, B; columns: Y, Cb, Cr. The bias folds in the -0.5 chroma
    // offset of each contributing column.
    let m = [
        [1.0, 0.0, cr_scale],
        [1.0, g_cb, g_cr],
        [1.0, cb_scale, 0.0],
    ];
    let bias = [
        -0.5 * cr_scale,
        -0.5 * (g_cb + g_cr),
        -0.5 * cb_scale,
    ];
    pack_1x1(m, bias)
}

fn pack_1x1<E: Real>(m: [[f64; 3]; 3], bias: [f64; 3]) -> (Tensor<E>, Tensor<E>) {
    // conv kernel layout is (kh, kw, cin, cout): k[ci][co] = m[co][ci].
    let mut k = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
    for ci in 0..3 {
        for co in 0..3 {
            k.data_mut()[ci * 3 + co] = E::from_f64(m[co][ci]);
        }
    }
    let b = Tensor::new(&[3], bias.iter().map(|&v| E::from_f64(v)).collect()).unwrap();
    (k, b)
}

/// Smooth (or exact) rounding applied elementwise on the graph.
pub fn apply_rounding<E: Real>(g: &mut Graph<E>, x: NodeId, mode: RoundingMode) -> Result<NodeId> {
    match mode {
        RoundingMode::Exact => Ok(g.round_ties_even(x)),
        RoundingMode::Sinusoidal => {
            let two_pi = 2.0 * std::f64::consts::PI;
            let s = g.scale(x, two_pi);
            let sn = g.sin(s);
            let term = g.scale(sn, 1.0 / two_pi);
            g.sub(x, term)
        }
        RoundingMode::Harmonic(terms) => {
            if terms == 0 {
                return Err(Error::Contract(
                    "harmonic rounding needs at least one term".into(),
                ));
            }
            let mut acc: Option<NodeId> = None;
            for k in 1..=terms {
                let kf = k as f64;
                let s = g.scale(x, 2.0 * std::f64::consts::PI * kf);
                let sn = g.sin(s);
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                let term = g.scale(sn, sign / (kf * std::f64::consts::PI));
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term)?,
                });
            }
            g.sub(x, acc.unwrap())
        }
    }
}

/// Scalar version of the rounding surrogates, used by validation sweeps.
pub fn rho_scalar(x: f64, mode: RoundingMode) -> f64 {
    match mode {
        RoundingMode::Exact => x.round_ties_even(),
        RoundingMode::Sinusoidal => {
            let two_pi = 2.0 * std::f64::consts::PI;
            x - (two_pi * x).sin() / two_pi
        }
        RoundingMode::Harmonic(terms) => {
            let mut s = 0.0;
            for k in 1..=terms {
                let kf = k as f64;
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                s += sign * (2.0 * std::f64::consts::PI * kf * x).sin() / (kf * std::f64::consts::PI);
            }
            x - s
        }
    }
}

/// Differentiable JPEG encode-decode of an `(h, w, 3)` image in `[0, 1]`.
pub fn djpeg<E: Real>(
    g: &mut Graph<E>,
    image: NodeId,
    quality: u8,
    mode: RoundingMode,
) -> Result<NodeId> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Shape(format!(
            "djpeg: need an (h,w,3) image, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let tables = QuantTablePair::for_quality(quality)?;

    // Replicate-pad up to block multiples; cropped back after decoding.
    let (ph, pw) = (h.next_multiple_of(8), w.next_multiple_of(8));
    let mut x = image;
    if (ph, pw) != (h, w) {
        x = g.pad2d(
            x,
            PadSpec {
                top: 0,
                bottom: ph - h,
                left: 0,
                right: pw - w,
                mode: PadMode::Replicate,
            },
        )?;
    }

    let (fwd_k, fwd_b) = rgb_to_ycbcr_weights::<E>();
    let kid = g.constant(fwd_k);
    let bid = g.constant(fwd_b);
    let ycc = g.conv2d(x, kid, Some(bid), 1, Padding::Same)?;
    let shifted = g.offset(ycc, -0.5);

    let n_blocks = (ph / 8) * (pw / 8);
    let mut channels: Option<NodeId> = None;
    for c in 0..3 {
        let int_table: &[u16; 64] = if c == 0 { &tables.luma } else { &tables.chroma };
        // Tables are rescaled into the unit domain so coefficient/step ratios
        // match the classical 255-domain codec exactly.
        let fwd_tbl: Vec<E> = int_table
            .iter()
            .map(|&q| E::from_f64(255.0 / q as f64))
            .collect();
        let inv_tbl: Vec<E> = int_table
            .iter()
            .map(|&q| E::from_f64(q as f64 / 255.0))
            .collect();

        let ch = g.select_channel(shifted, c)?;
        let packed = g.space_to_depth(ch, 8)?;
        let blocks = g.reshape(packed, &[n_blocks, 8, 8])?;
        let freq = g.dct8(blocks, true)?;
        let levels = g.mul_blocks(freq, &fwd_tbl)?;
        let rounded = apply_rounding(g, levels, mode)?;
        let deq = g.mul_blocks(rounded, &inv_tbl)?;
        let spatial = g.dct8(deq, false)?;
        let repacked = g.reshape(spatial, &[ph / 8, pw / 8, 64])?;
        let plane = g.depth_to_space(repacked, 8)?;
        channels = Some(match channels {
            None => plane,
            Some(acc) => g.concat_channels(acc, plane)?,
        });
    }

    let unshifted = g.offset(channels.unwrap(), 0.5);
    let (inv_k, inv_b) = ycbcr_to_rgb_weights::<E>();
    let kid = g.constant(inv_k);
    let bid = g.constant(inv_b);
    let rgb = g.conv2d(unshifted, kid, Some(bid), 1, Padding::Same)?;
    let rgb = if (ph, pw) != (h, w) {
        g.crop(rgb, 0, 0, h, w)?
    } else {
        rgb
    };
    Ok(g.clamp01(rgb))
}

/// Plain scalar-loop baseline JPEG encode-decode in `f64`, used as the
/// independent oracle for [`djpeg`] with exact rounding. The DCT here is the
/// textbook double cosine sum, deliberately not sharing the basis-matrix
/// path of the graph op.
pub fn reference_jpeg(image: &Tensor<f64>, quality: u8) -> Result<Tensor<f64>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!(
            "reference_jpeg: need an (h,w,3) image, got {s:?}"
        )));
    }
    let (h, w) = (s[0], s[1]);
    let (ph, pw) = (h.next_multiple_of(8), w.next_multiple_of(8));
    let tables = QuantTablePair::for_quality(quality)?;

    const KR: f64 = 0.299;
    const KG: f64 = 0.587;
    const KB: f64 = 0.114;
    let cb_scale = 2.0 * (1.0 - KB);
    let cr_scale = 2.0 * (1.0 - KR);

    // Colour convert + level shift + replicate pad, one channel plane at a time.
    let mut planes = vec![vec![0.0f64; ph * pw]; 3];
    for y in 0..ph {
        for x in 0..pw {
            let (sy, sx) = (y.min(h - 1), x.min(w - 1));
            let r = image.at3(sy, sx, 0);
            let gch = image.at3(sy, sx, 1);
            let b = image.at3(sy, sx, 2);
            let luma = KR * r + KG * gch + KB * b;
            planes[0][y * pw + x] = luma - 0.5;
            planes[1][y * pw + x] = (b - luma) / cb_scale;
            planes[2][y * pw + x] = (r - luma) / cr_scale;
        }
    }

    let cos_tab: Vec<f64> = (0..8)
        .flat_map(|u| {
            (0..8).map(move |n| ((2 * n + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos())
        })
        .collect();
    let alpha = |u: usize| if u == 0 { (0.125f64).sqrt() } else { 0.5 };

    for (c, plane) in planes.iter_mut().enumerate() {
        let table: &[u16; 64] = if c == 0 { &tables.luma } else { &tables.chroma };
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut coef = [0.0f64; 64];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for y in 0..8 {
                            for x in 0..8 {
                                acc += plane[(by + y) * pw + bx + x]
                                    * cos_tab[u * 8 + y]
                                    * cos_tab[v * 8 + x];
                            }
                        }
                        // Quantize against the integer table in the 255 domain.
                        let q = table[u * 8 + v] as f64;
                        let level = (alpha(u) * alpha(v) * acc * 255.0 / q).round_ties_even();
                        coef[u * 8 + v] = level * q / 255.0;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let mut acc = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                acc += alpha(u)
                                    * alpha(v)
                                    * coef[u * 8 + v]
                                    * cos_tab[u * 8 + y]
                                    * cos_tab[v * 8 + x];
                            }
                        }
                        plane[(by + y) * pw + bx + x] = acc;
                    }
                }
            }
        }
    }

    Tensor::from_fn(&[h, w, 3], |i| {
        let c = i % 3;
        let x = (i / 3) % w;
        let y = i / (3 * w);
        let luma = planes[0][y * pw + x] + 0.5;
        let cb = planes[1][y * pw + x];
        let cr = planes[2][y * pw + x];
        let v = match c {
            0 => luma + cr_scale * cr,
            1 => luma - (KB * cb_scale / KG) * cb - (KR * cr_scale / KG) * cr,
            _ => luma + cb_scale * cb,
        };
        v.clamp(0.0, 1.0)
    })
}

/// Convenience: run the differentiable codec forward on a plain tensor.
pub fn djpeg_eval<E: Real>(image: &Tensor<E>, quality: u8, mode: RoundingMode) -> Result<Tensor<E>> {
    let mut g = Graph::new();
    let id = g.constant(image.clone());
    let out = djpeg(&mut g, id, quality, mode)?;
    Ok(g.value(out).clone())
}

/// Gradient check for the full codec with the sinusoidal surrogate.
pub fn grad_check() -> crate::autodiff::OpCheck {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1207);
    let img = Tensor::from_fn(&[16, 16, 3], |_| 0.05 + 0.9 * rng.gen::<f64>()).unwrap();
    crate::autodiff::OpCheck::new("djpeg/sinusoidal-q50", vec![img], |g, l| {
        djpeg(g, l[0], 50, RoundingMode::Sinusoidal)
    })
    .sampled(48)
}
