//! The fixed reference development pipeline (classical ISP): bilinear
//! demosaicing, a fixed color-correction matrix, and gamma encoding. Its
//! output defines the regression targets for the trainable models.

use super::{cfa_masks, BayerStack};
use crate::autodiff::{
    kernels::{conv2d_fwd, depth_to_space, pad2d_fwd, PadMode, PadSpec},
    Padding, Real, Tensor,
};
use crate::Result;

/// Display gamma of the encoded output: pixels are stored as `v^(1/GAMMA)`.
pub const GAMMA: f64 = 2.2;

/// Fixed sensor spectral-mixing matrix: `camera_rgb = CAMERA_MIX · linear_rgb`.
///
/// Entries are non-negative and every row sums to 1, so camera values are
/// convex combinations of scene values — synthesis never clips — and the
/// correction matrix (its inverse) maps neutral gray to neutral gray.
pub const CAMERA_MIX: [[f64; 3]; 3] = [
    [0.70, 0.20, 0.10],
    [0.15, 0.70, 0.15],
    [0.10, 0.25, 0.65],
];

/// Closed-form 3×3 inverse (adjugate over determinant).
pub fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    assert!(det.abs() > 1e-12, "matrix is singular");
    let cof = |r: usize, c: usize| -> f64 {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (c1, c2) = ((c + 1) % 3, (c + 2) % 3);
        // Cyclic index choice already encodes the cofactor sign.
        m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]
    };
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = cof(c, r) / det; // adjugate transposes
        }
    }
    out
}

/// The color-correction matrix applied during development:
/// `linear_rgb = CM · camera_rgb`, with `CM = CAMERA_MIX⁻¹`.
pub fn reference_color_matrix() -> [[f64; 3]; 3] {
    invert3(&CAMERA_MIX)
}

/// 3×3 bilinear demosaic kernel (already divided by 4) for a sparse color
/// plane: green sites form a quincunx, red/blue a rectangular subgrid.
pub fn bilinear_kernel3(color: usize) -> [f64; 9] {
    let base: [f64; 9] = if color == 1 {
        [0.0, 1.0, 0.0, 1.0, 4.0, 1.0, 0.0, 1.0, 0.0]
    } else {
        [1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]
    };
    base.map(|v| v / 4.0)
}

/// Unpack a stack back to its full-resolution single-channel mosaic.
pub fn unpack_mosaic<E: Real>(stack: &BayerStack<E>) -> Tensor<E> {
    depth_to_space(stack.data(), 2)
}

/// Interpolate full RGB from the packed mosaic by sparse-plane bilinear
/// filtering with reflect-101 borders (which preserve CFA parity).
pub fn bilinear_demosaic<E: Real>(stack: &BayerStack<E>) -> Tensor<E> {
    let mosaic = unpack_mosaic(stack);
    let (h, w) = stack.full_size();
    let masks = cfa_masks::<E>(stack.cfa(), h, w);
    let mut rgb = Tensor::zeros(&[h, w, 3]).expect("rgb shape");
    for (c, mask) in masks.iter().enumerate() {
        let plane = Tensor::from_fn(&[h, w, 1], |i| mosaic.data()[i] * mask.data()[i])
            .expect("plane shape");
        let padded = pad2d_fwd(&plane, PadSpec::uniform(1, PadMode::Reflect101));
        let kernel = Tensor::new(
            &[3, 3, 1, 1],
            bilinear_kernel3(c).iter().map(|v| E::from_f64(*v)).collect(),
        )
        .expect("kernel shape");
        let full = conv2d_fwd(&padded, &kernel, None, 1, Padding::Valid);
        let out = rgb.data_mut();
        for (i, v) in full.data().iter().enumerate() {
            out[i * 3 + c] = *v;
        }
    }
    rgb
}

/// Develop a stack with the reference pipeline:
/// bilinear demosaic → fixed color matrix → clamp to [0,1] → gamma encode.
pub fn reference_develop<E: Real>(stack: &BayerStack<E>) -> Result<Tensor<E>> {
    let rgb = bilinear_demosaic(stack);
    let cm = reference_color_matrix();
    let cm_e: Vec<[E; 3]> = cm
        .iter()
        .map(|row| [E::from_f64(row[0]), E::from_f64(row[1]), E::from_f64(row[2])])
        .collect();
    let inv_gamma = E::from_f64(1.0 / GAMMA);
    let d = rgb.data();
    let mut out = vec![E::zero(); d.len()];
    for p in 0..d.len() / 3 {
        let (r, g, b) = (d[p * 3], d[p * 3 + 1], d[p * 3 + 2]);
        for c in 0..3 {
            let v = cm_e[c][0] * r + cm_e[c][1] * g + cm_e[c][2] * b;
            let v = v.max(E::zero()).min(E::one());
            out[p * 3 + c] = v.powf(inv_gamma);
        }
    }
    Tensor::new(rgb.shape(), out)
}
