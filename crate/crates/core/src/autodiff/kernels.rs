//! Dense compute kernels shared by graph forward and backward passes.
//!
//! All image tensors are row-major height x width x channels, and kernels are
//! stored kh x kw x cin x cout. That layout makes the innermost loops run
//! over contiguous `cout` (or `cin`) lanes as independent accumulations,
//! which the compiler can vectorize without needing to reassociate floating
//! point reductions; keep new kernels in that style.

use super::tensor::{Real, Tensor};

/// Spatial padding policy for convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so the output extent is `ceil(in / stride)`.
    Same,
    /// No padding; output extent is `(in - k) / stride + 1`.
    Valid,
}

pub struct ConvDims {
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub fn conv_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: Padding) -> ConvDims {
    match pad {
        Padding::Valid => ConvDims {
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
            pad_top: 0,
            pad_left: 0,
        },
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
            ConvDims {
                oh,
                ow,
                pad_top: pad_h / 2,
                pad_left: pad_w / 2,
            }
        }
    }
}

/// 2-D convolution (cross-correlation): input (h, w, cin) * kernel
/// (kh, kw, cin, cout) -> (oh, ow, cout), plus an optional per-channel bias.
pub fn conv2d_fwd<E: Real>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: Padding,
) -> Tensor<E> {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    let d = conv_dims(h, w, kh, kw, stride, pad);
    let mut out = Tensor::zeros(&[d.oh, d.ow, cout]).expect("conv output shape");

    let idata = input.data();
    let kdata = kernel.data();
    let odata = out.data_mut();
    let mut acc = vec![E::zero(); cout];

    for oy in 0..d.oh {
        for ox in 0..d.ow {
            match bias {
                Some(b) => acc.copy_from_slice(b.data()),
                None => acc.fill(E::zero()),
            }
            let base_y = (oy * stride) as isize - d.pad_top as isize;
            let base_x = (ox * stride) as isize - d.pad_left as isize;
            for dy in 0..kh {
                let iy = base_y + dy as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let ix = base_x + dx as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_off = ((iy as usize * w) + ix as usize) * cin;
                    let k_off = (dy * kw + dx) * cin * cout;
                    for ci in 0..cin {
                        let v = idata[in_off + ci];
                        let krow = &kdata[k_off + ci * cout..k_off + (ci + 1) * cout];
                        for (a, &k) in acc.iter_mut().zip(krow) {
                            *a += v * k;
                        }
                    }
                }
            }
            odata[(oy * d.ow + ox) * cout..(oy * d.ow + ox + 1) * cout].copy_from_slice(&acc);
        }
    }
    out
}

/// Gradients of [`conv2d_fwd`] with respect to input, kernel and bias.
pub fn conv2d_bwd<E: Real>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    gout: &Tensor<E>,
    stride: usize,
    pad: Padding,
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>, Option<Tensor<E>>) {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    let d = conv_dims(h, w, kh, kw, stride, pad);
    let gdata = gout.data();

    // Kernel transposed to (kh, kw, cout, cin) so the d_input inner loop is an
    // axpy over contiguous cin.
    let kt = if need_input {
        let kdata = kernel.data();
        let mut kt = vec![E::zero(); kdata.len()];
        for dy in 0..kh {
            for dx in 0..kw {
                let base = (dy * kw + dx) * cin * cout;
                for ci in 0..cin {
                    for co in 0..cout {
                        kt[base + co * cin + ci] = kdata[base + ci * cout + co];
                    }
                }
            }
        }
        kt
    } else {
        Vec::new()
    };

    let mut d_input = need_input.then(|| Tensor::zeros(input.shape()).unwrap());
    let mut d_kernel = need_kernel.then(|| Tensor::zeros(kernel.shape()).unwrap());
    let mut d_bias = need_bias.then(|| Tensor::zeros(&[cout]).unwrap());

    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let g_off = (oy * d.ow + ox) * cout;
            let grow = &gdata[g_off..g_off + cout];
            if let Some(db) = &mut d_bias {
                for (b, &g) in db.data_mut().iter_mut().zip(grow) {
                    *b += g;
                }
            }
            if d_input.is_none() && d_kernel.is_none() {
                continue;
            }
            let base_y = (oy * stride) as isize - d.pad_top as isize;
            let base_x = (ox * stride) as isize - d.pad_left as isize;
            for dy in 0..kh {
                let iy = base_y + dy as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let ix = base_x + dx as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_off = ((iy as usize * w) + ix as usize) * cin;
                    let k_off = (dy * kw + dx) * cin * cout;
                    if let Some(di) = &mut d_input {
                        let dslice = &mut di.data_mut()[in_off..in_off + cin];
                        for (co, &g) in grow.iter().enumerate() {
                            let krow = &kt[k_off + co * cin..k_off + (co + 1) * cin];
                            for (dv, &k) in dslice.iter_mut().zip(krow) {
                                *dv += g * k;
                            }
                        }
                    }
                    if let Some(dk) = &mut d_kernel {
                        let idata = input.data();
                        let dkdata = dk.data_mut();
                        for ci in 0..cin {
                            let v = idata[in_off + ci];
                            let drow =
                                &mut dkdata[k_off + ci * cout..k_off + (ci + 1) * cout];
                            for (dv, &g) in drow.iter_mut().zip(grow) {
                                *dv += v * g;
                            }
                        }
                    }
                }
            }
        }
    }
    (d_input, d_kernel, d_bias)
}

/// (m, k) x (k, n) -> (m, n).
pub fn matmul_fwd<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]).unwrap();
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        let orow = &mut od[i * n..(i + 1) * n];
        for kk in 0..k {
            let v = ad[i * k + kk];
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &x) in orow.iter_mut().zip(brow) {
                *o += v * x;
            }
        }
    }
    out
}

pub fn matmul_bwd<E: Real>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    gout: &Tensor<E>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let gd = gout.data();

    let da = need_a.then(|| {
        // dA = G * B^T, with B transposed up front for contiguous axpy rows.
        let bd = b.data();
        let mut bt = vec![E::zero(); k * n];
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = bd[kk * n + j];
            }
        }
        let mut da = Tensor::zeros(&[m, k]).unwrap();
        let dad = da.data_mut();
        for i in 0..m {
            let arow = &mut dad[i * k..(i + 1) * k];
            for j in 0..n {
                let g = gd[i * n + j];
                let btrow = &bt[j * k..(j + 1) * k];
                for (o, &x) in arow.iter_mut().zip(btrow) {
                    *o += g * x;
                }
            }
        }
        da
    });

    let db = need_b.then(|| {
        let ad = a.data();
        let mut db = Tensor::zeros(&[k, n]).unwrap();
        let dbd = db.data_mut();
        for i in 0..m {
            let grow = &gd[i * n..(i + 1) * n];
            for kk in 0..k {
                let v = ad[i * k + kk];
                let brow = &mut dbd[kk * n..(kk + 1) * n];
                for (o, &g) in brow.iter_mut().zip(grow) {
                    *o += v * g;
                }
            }
        }
        db
    });

    (da, db)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and the flat
/// input index of each winner (first maximum in scan order on ties), which
/// the backward pass scatters into.
pub fn maxpool2_fwd<E: Real>(input: &Tensor<E>) -> (Tensor<E>, Vec<u32>) {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[oh, ow, c]).unwrap();
    let mut arg = vec![0u32; oh * ow * c];
    let id = input.data();
    let od = out.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = E::neg_infinity();
                let mut best_i = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = ((oy * 2 + dy) * w + ox * 2 + dx) * c + ch;
                        if id[i] > best {
                            best = id[i];
                            best_i = i;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                od[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_bwd<E: Real>(in_shape: &[usize], gout: &Tensor<E>, arg: &[u32]) -> Tensor<E> {
    let mut d = Tensor::zeros(in_shape).unwrap();
    let dd = d.data_mut();
    for (g, &i) in gout.data().iter().zip(arg) {
        dd[i as usize] += *g;
    }
    d
}

/// (h, w, c) -> (1, c) spatial mean.
pub fn global_avg_pool_fwd<E: Real>(input: &Tensor<E>) -> Tensor<E> {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut out = Tensor::zeros(&[1, c]).unwrap();
    let od = out.data_mut();
    for px in input.data().chunks_exact(c) {
        for (o, &v) in od.iter_mut().zip(px) {
            *o += v;
        }
    }
    let inv = E::from_f64(1.0 / (h * w) as f64);
    for o in od.iter_mut() {
        *o *= inv;
    }
    out
}

pub fn global_avg_pool_bwd<E: Real>(in_shape: &[usize], gout: &Tensor<E>) -> Tensor<E> {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let inv = E::from_f64(1.0 / (h * w) as f64);
    let g = gout.data();
    Tensor::from_fn(in_shape, |i| g[i % c] * inv).unwrap()
}

/// (h, w, c) -> (h/b, w/b, b*b*c); the block unrolls row-major ahead of the
/// original channels, so block (dy, dx) channel ci lands at (dy*b+dx)*c + ci.
pub fn space_to_depth<E: Real>(input: &Tensor<E>, b: usize) -> Tensor<E> {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow, oc) = (h / b, w / b, b * b * c);
    let id = input.data();
    let mut out = Tensor::zeros(&[oh, ow, oc]).unwrap();
    let od = out.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * oc;
            for dy in 0..b {
                let ibase = ((oy * b + dy) * w + ox * b) * c;
                let orow = &mut od[obase + dy * b * c..obase + (dy + 1) * b * c];
                orow.copy_from_slice(&id[ibase..ibase + b * c]);
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`]: (h, w, b*b*c) -> (h*b, w*b, c).
pub fn depth_to_space<E: Real>(input: &Tensor<E>, b: usize) -> Tensor<E> {
    let (h, w, ic) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let c = ic / (b * b);
    let (oh, ow) = (h * b, w * b);
    let id = input.data();
    let mut out = Tensor::zeros(&[oh, ow, c]).unwrap();
    let od = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let ibase = (y * w + x) * ic;
            for dy in 0..b {
                let obase = ((y * b + dy) * ow + x * b) * c;
                od[obase..obase + b * c]
                    .copy_from_slice(&id[ibase + dy * b * c..ibase + (dy + 1) * b * c]);
            }
        }
    }
    out
}

/// How out-of-range coordinates are mapped back inside for padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Clamp to the nearest edge pixel (a a | a b c | c c).
    Replicate,
    /// Mirror about the edge pixel without repeating it (c b | a b c | b a).
    Reflect101,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadSpec {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
    pub mode: PadMode,
}

impl PadSpec {
    pub fn uniform(p: usize, mode: PadMode) -> Self {
        PadSpec {
            top: p,
            bottom: p,
            left: p,
            right: p,
            mode,
        }
    }
}

#[inline]
fn pad_src(i: isize, n: usize, mode: PadMode) -> usize {
    let n = n as isize;
    let j = match mode {
        PadMode::Replicate => i.clamp(0, n - 1),
        PadMode::Reflect101 => {
            let mut j = i;
            if j < 0 {
                j = -j;
            }
            if j >= n {
                j = 2 * n - 2 - j;
            }
            j
        }
    };
    j as usize
}

pub fn pad2d_fwd<E: Real>(input: &Tensor<E>, s: PadSpec) -> Tensor<E> {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (h + s.top + s.bottom, w + s.left + s.right);
    let id = input.data();
    let mut out = Tensor::zeros(&[oh, ow, c]).unwrap();
    let od = out.data_mut();
    for oy in 0..oh {
        let iy = pad_src(oy as isize - s.top as isize, h, s.mode);
        for ox in 0..ow {
            let ix = pad_src(ox as isize - s.left as isize, w, s.mode);
            let src = (iy * w + ix) * c;
            let dst = (oy * ow + ox) * c;
            od[dst..dst + c].copy_from_slice(&id[src..src + c]);
        }
    }
    out
}

pub fn pad2d_bwd<E: Real>(in_shape: &[usize], gout: &Tensor<E>, s: PadSpec) -> Tensor<E> {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let ow = w + s.left + s.right;
    let oh = h + s.top + s.bottom;
    let gd = gout.data();
    let mut d = Tensor::zeros(in_shape).unwrap();
    let dd = d.data_mut();
    for oy in 0..oh {
        let iy = pad_src(oy as isize - s.top as isize, h, s.mode);
        for ox in 0..ow {
            let ix = pad_src(ox as isize - s.left as isize, w, s.mode);
            let src = (iy * w + ix) * c;
            let dst = (oy * ow + ox) * c;
            for ch in 0..c {
                dd[src + ch] += gd[dst + ch];
            }
        }
    }
    d
}

/// Box (area) downsampling by an integer factor; for factor 2 this equals
/// half-pixel-centred bilinear reduction.
pub fn downsample_fwd<E: Real>(input: &Tensor<E>, f: usize) -> Tensor<E> {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (h / f, w / f);
    let id = input.data();
    let mut out = Tensor::zeros(&[oh, ow, c]).unwrap();
    let od = out.data_mut();
    let inv = E::from_f64(1.0 / (f * f) as f64);
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * c;
            for dy in 0..f {
                let ibase = ((oy * f + dy) * w + ox * f) * c;
                for dx in 0..f {
                    for ch in 0..c {
                        od[obase + ch] += id[ibase + dx * c + ch];
                    }
                }
            }
            for ch in 0..c {
                od[obase + ch] *= inv;
            }
        }
    }
    out
}

pub fn downsample_bwd<E: Real>(in_shape: &[usize], gout: &Tensor<E>, f: usize) -> Tensor<E> {
    let (w, c) = (in_shape[1], in_shape[2]);
    let ow = w / f;
    let gd = gout.data();
    let inv = E::from_f64(1.0 / (f * f) as f64);
    Tensor::from_fn(in_shape, |i| {
        let ch = i % c;
        let x = (i / c) % w;
        let y = i / (c * w);
        gd[((y / f) * ow + x / f) * c + ch] * inv
    })
    .unwrap()
}

/// Weights of the half-pixel-centred 2x bilinear upsampler along one axis:
/// output 2k draws (0.25, 0.75) from sources (k-1, k); output 2k+1 draws
/// (0.75, 0.25) from (k, k+1). Out-of-range sources clamp to the edge.
#[inline]
fn up2_taps(o: usize, n: usize) -> [(usize, f64); 2] {
    let k = o / 2;
    if o % 2 == 0 {
        let prev = k.saturating_sub(1);
        [(prev, 0.25), (k, 0.75)]
    } else {
        let next = (k + 1).min(n - 1);
        [(k, 0.75), (next, 0.25)]
    }
}

pub fn upsample2_fwd<E: Real>(input: &Tensor<E>) -> Tensor<E> {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (h * 2, w * 2);
    let id = input.data();
    let mut out = Tensor::zeros(&[oh, ow, c]).unwrap();
    let od = out.data_mut();
    for oy in 0..oh {
        let ty = up2_taps(oy, h);
        for ox in 0..ow {
            let tx = up2_taps(ox, w);
            let obase = (oy * ow + ox) * c;
            for (sy, wy) in ty {
                for (sx, wx) in tx {
                    let wgt = E::from_f64(wy * wx);
                    let ibase = (sy * w + sx) * c;
                    for ch in 0..c {
                        od[obase + ch] += wgt * id[ibase + ch];
                    }
                }
            }
        }
    }
    out
}

pub fn upsample2_bwd<E: Real>(in_shape: &[usize], gout: &Tensor<E>) -> Tensor<E> {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let ow = w * 2;
    let gd = gout.data();
    let mut d = Tensor::zeros(in_shape).unwrap();
    let dd = d.data_mut();
    for oy in 0..h * 2 {
        let ty = up2_taps(oy, h);
        for ox in 0..ow {
            let tx = up2_taps(ox, w);
            let gbase = (oy * ow + ox) * c;
            for (sy, wy) in ty {
                for (sx, wx) in tx {
                    let wgt = E::from_f64(wy * wx);
                    let ibase = (sy * w + sx) * c;
                    for ch in 0..c {
                        dd[ibase + ch] += wgt * gd[gbase + ch];
                    }
                }
            }
        }
    }
    d
}

/// Per-pixel maximum over channels: (h, w, c) -> (h, w, 1), recording the
/// winning channel for the backward scatter (first maximum wins ties).
pub fn reduce_max_channels_fwd<E: Real>(input: &Tensor<E>) -> (Tensor<E>, Vec<u32>) {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut out = Tensor::zeros(&[h, w, 1]).unwrap();
    let mut arg = vec![0u32; h * w];
    let od = out.data_mut();
    for (p, px) in input.data().chunks_exact(c).enumerate() {
        let mut best = px[0];
        let mut bi = 0;
        for (i, &v) in px.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                bi = i;
            }
        }
        od[p] = best;
        arg[p] = bi as u32;
    }
    (out, arg)
}

/// The orthonormal 8-point DCT-II basis matrix; `dct8` applies it to both
/// axes of each 8x8 block via two matrix products per block.
pub fn dct8_basis() -> [f64; 64] {
    let mut d = [0.0; 64];
    for u in 0..8 {
        let scale = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            0.5
        };
        for n in 0..8 {
            d[u * 8 + n] = scale * ((2 * n + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    d
}

/// Batched 8x8 DCT-II over (n, 8, 8): `forward` computes D x D^T per block,
/// otherwise D^T x D (the inverse). The backward pass of either direction is
/// the other direction applied to the incoming gradient.
pub fn dct8<E: Real>(input: &Tensor<E>, forward: bool) -> Tensor<E> {
    let basis = dct8_basis();
    let mut d = [E::zero(); 64];
    for (o, &v) in d.iter_mut().zip(basis.iter()) {
        *o = E::from_f64(v);
    }
    let n = input.shape()[0];
    let id = input.data();
    let mut out = Tensor::zeros(input.shape()).unwrap();
    let od = out.data_mut();
    let mut tmp = [E::zero(); 64];
    for blk in 0..n {
        let x = &id[blk * 64..(blk + 1) * 64];
        // tmp = M1 * x, where M1 = D (forward) or D^T (inverse).
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = E::zero();
                for k in 0..8 {
                    let m1 = if forward { d[i * 8 + k] } else { d[k * 8 + i] };
                    acc += m1 * x[k * 8 + j];
                }
                tmp[i * 8 + j] = acc;
            }
        }
        // out = tmp * M2, where M2 = D^T (forward) or D (inverse).
        let o = &mut od[blk * 64..(blk + 1) * 64];
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = E::zero();
                for k in 0..8 {
                    let m2 = if forward { d[j * 8 + k] } else { d[k * 8 + j] };
                    acc += tmp[i * 8 + k] * m2;
                }
                o[i * 8 + j] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "element {i}: {x} vs {y} (tol {tol})"
            );
        }
    }

    /// Brute-force convolution used as the oracle for the optimized kernel.
    fn conv_oracle(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        stride: usize,
        pad: Padding,
    ) -> Tensor<f64> {
        let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (kh, kw, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
        let d = conv_dims(h, w, kh, kw, stride, pad);
        Tensor::from_fn(&[d.oh, d.ow, cout], |i| {
            let co = i % cout;
            let ox = (i / cout) % d.ow;
            let oy = i / (cout * d.ow);
            let mut acc = bias.map_or(0.0, |b| b.data()[co]);
            for dy in 0..kh {
                for dx in 0..kw {
                    let iy = (oy * stride + dy) as isize - d.pad_top as isize;
                    let ix = (ox * stride + dx) as isize - d.pad_left as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for ci in 0..cin {
                        acc += input.at3(iy as usize, ix as usize, ci)
                            * kernel.data()[((dy * kw + dx) * cin + ci) * cout + co];
                    }
                }
            }
            acc
        })
        .unwrap()
    }

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 37 + 11) % 101) as f64 / 101.0 - 0.3).unwrap()
    }

    #[test]
    fn conv2d_matches_bruteforce_oracle() {
        for (stride, pad) in [
            (1, Padding::Same),
            (1, Padding::Valid),
            (2, Padding::Same),
            (2, Padding::Valid),
        ] {
            let x = ramp(&[9, 7, 3]);
            let k = ramp(&[3, 5, 3, 4]);
            let b = ramp(&[4]);
            let got = conv2d_fwd(&x, &k, Some(&b), stride, pad);
            let want = conv_oracle(&x, &k, Some(&b), stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert_close(got.data(), want.data(), 1e-12);
        }
    }

    #[test]
    fn conv2d_same_identity_kernel_is_identity() {
        let x = ramp(&[6, 6, 2]);
        // 3x3 kernel with a centre-tap identity per channel.
        let mut k = Tensor::zeros(&[3, 3, 2, 2]).unwrap();
        for c in 0..2 {
            k.data_mut()[((1 * 3 + 1) * 2 + c) * 2 + c] = 1.0;
        }
        let y = conv2d_fwd(&x, &k, None, 1, Padding::Same);
        assert_close(y.data(), x.data(), 0.0);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = ramp(&[4, 6]);
        let b = ramp(&[6, 5]);
        let got = matmul_fwd(&a, &b);
        let want = Tensor::from_fn(&[4, 5], |i| {
            let (r, c) = (i / 5, i % 5);
            (0..6).map(|k| a.data()[r * 6 + k] * b.data()[k * 5 + c]).sum()
        })
        .unwrap();
        assert_close(got.data(), want.data(), 1e-12);
    }

    #[test]
    fn space_depth_roundtrip_and_order() {
        // 2x2x1 [[a,b],[c,d]] packs to [a,b,c,d] in one cell.
        let x = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = space_to_depth(&x, 2);
        assert_eq!(p.shape(), &[1, 1, 4]);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);
        let x2 = ramp(&[16, 16, 3]);
        let rt = depth_to_space(&space_to_depth(&x2, 8), 8);
        assert_eq!(rt.shape(), x2.shape());
        assert_close(rt.data(), x2.data(), 0.0);
    }

    #[test]
    fn pad_modes_match_hand_example() {
        // Row [a b c] padded by 2: replicate -> a a a b c c c,
        // reflect101 -> c b a b c b a.
        let x = Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let rep = pad2d_fwd(
            &x,
            PadSpec { top: 0, bottom: 0, left: 2, right: 2, mode: PadMode::Replicate },
        );
        assert_eq!(rep.data(), &[1.0, 1.0, 1.0, 2.0, 3.0, 3.0, 3.0]);
        let ref101 = pad2d_fwd(
            &x,
            PadSpec { top: 0, bottom: 0, left: 2, right: 2, mode: PadMode::Reflect101 },
        );
        assert_eq!(ref101.data(), &[3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn upsample2_reproduces_linear_ramp_interior() {
        // A linear ramp must stay exactly linear away from the clamped edges.
        let x = Tensor::from_fn(&[1, 8, 1], |i| 0.1 + 0.2 * i as f64).unwrap();
        let y = upsample2_fwd(&x);
        assert_eq!(y.shape(), &[2, 16, 1]);
        for o in 2..14 {
            let src = o as f64 / 2.0 - 0.25;
            let want = 0.1 + 0.2 * src;
            assert!((y.data()[o] - want).abs() < 1e-12, "o={o}");
        }
    }

    #[test]
    fn downsample2_is_box_mean() {
        let x = Tensor::new(&[2, 2, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let y: Tensor<f64> = downsample_fwd(&x, 2);
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert!((y.data()[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn dct8_basis_is_orthonormal_and_inverts() {
        let d = dct8_basis();
        // Row 0 is the constant vector 1/sqrt(8).
        for j in 0..8 {
            assert!((d[j] - 0.3535533905932738).abs() < 1e-15);
        }
        // D * D^T = I.
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = (0..8).map(|k| d[i * 8 + k] * d[j * 8 + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
        let x = ramp(&[3, 8, 8]);
        let rt = dct8(&dct8(&x, true), false);
        assert_close(rt.data(), x.data(), 1e-12);
    }

    #[test]
    fn dct8_constant_block_concentrates_in_dc() {
        // A constant block v has DC = 8v and zero AC.
        let x = Tensor::full(&[1, 8, 8], 0.25f64).unwrap();
        let y = dct8(&x, true);
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
        for &v in &y.data()[1..] {
            assert!(v.abs() < 1e-12);
        }
        // Double-sum DCT definition as an independent oracle on a random block.
        let x = ramp(&[1, 8, 8]);
        let y = dct8(&x, true);
        for u in 0..8 {
            for v in 0..8 {
                let cu = if u == 0 { (0.125f64).sqrt() } else { 0.5 };
                let cv = if v == 0 { (0.125f64).sqrt() } else { 0.5 };
                let mut acc = 0.0;
                for a in 0..8 {
                    for b in 0..8 {
                        acc += x.data()[a * 8 + b]
                            * ((2 * a + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos()
                            * ((2 * b + 1) as f64 * v as f64 * std::f64::consts::PI / 16.0).cos();
                    }
                }
                assert!((y.data()[u * 8 + v] - cu * cv * acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_tracks_first_max_and_routes_gradient() {
        let x = Tensor::new(&[2, 2, 1], vec![1.0, 5.0, 5.0, 2.0]).unwrap();
        let (y, arg) = maxpool2_fwd(&x);
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(arg, vec![1]); // first 5.0 in scan order
        let g = Tensor::new(&[1, 1, 1], vec![3.0]).unwrap();
        let d = maxpool2_bwd(&[2, 2, 1], &g, &arg);
        assert_eq!(d.data(), &[0.0, 3.0, 0.0, 0.0]);
    }
}
