//! Raw sensor data: CFA mosaics, normalization into packed Bayer stacks, the
//! fixed reference development pipeline that produces training targets, the
//! synthetic raw-data generator, and the two trainable development models.

mod inet;
mod isp;
mod synth;
mod unet;

pub use inet::{grad_check as inet_grad_check, inet_develop, inet_init, train_gamma_toy, GammaToy};
pub use isp::{
    invert3, reference_color_matrix, reference_develop, unpack_mosaic, CAMERA_MIX, GAMMA,
};
pub use synth::{
    derive_seed, procedural_sources, synth_dataset, synth_sample, RawSample, SensorProfile,
};
pub use unet::{
    grad_check as unet_grad_check, unet_develop, unet_init, unet_widths, UNET_FULL_WIDTH_PARAMS,
};

use crate::autodiff::{Graph, NodeId, Real, Tensor};
use crate::params::{Bound, ParamSet};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Color filter array layout of the top-left 2×2 cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CfaOrder {
    Rggb,
    Gbrg,
}

impl CfaOrder {
    /// Color measured at pixel (y, x): 0 = R, 1 = G, 2 = B.
    pub fn color_at(self, y: usize, x: usize) -> usize {
        let (py, px) = (y % 2, x % 2);
        match self {
            CfaOrder::Rggb => match (py, px) {
                (0, 0) => 0,
                (1, 1) => 2,
                _ => 1,
            },
            CfaOrder::Gbrg => match (py, px) {
                (0, 1) => 2,
                (1, 0) => 0,
                _ => 1,
            },
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CfaOrder::Rggb => "RGGB",
            CfaOrder::Gbrg => "GBRG",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(CfaOrder::Rggb),
            "GBRG" => Ok(CfaOrder::Gbrg),
            other => Err(Error::Input(format!("unknown CFA order: {other}"))),
        }
    }
}

/// Un-normalized sensor measurements plus the calibration needed to read them.
#[derive(Debug, Clone)]
pub struct RawFrame<E: Real> {
    /// Raw counts, shape `(h, w, 1)` with even spatial extents.
    pub mosaic: Tensor<E>,
    pub black_level: f64,
    pub saturation: f64,
    /// White-balance gains for (R, G, B) sites.
    pub wb_gains: (f64, f64, f64),
    pub cfa: CfaOrder,
}

impl<E: Real> RawFrame<E> {
    pub fn validate(&self) -> Result<()> {
        let s = self.mosaic.shape();
        if s.len() != 3 || s[2] != 1 {
            return Err(Error::Shape(format!("raw mosaic must be (h, w, 1), got {s:?}")));
        }
        if s[0] % 2 != 0 || s[1] % 2 != 0 {
            return Err(Error::Shape(format!(
                "raw mosaic extents must be even, got {}x{}",
                s[0], s[1]
            )));
        }
        if !(self.saturation > self.black_level) {
            return Err(Error::Input(format!(
                "saturation ({}) must exceed black level ({})",
                self.saturation, self.black_level
            )));
        }
        let (r, g, b) = self.wb_gains;
        if !(r > 0.0 && g > 0.0 && b > 0.0) {
            return Err(Error::Input(format!("white-balance gains must be positive, got {:?}", self.wb_gains)));
        }
        Ok(())
    }
}

/// Normalized, white-balanced measurements packed so each 2×2 CFA cell
/// becomes one 4-channel pixel: channel index is `dy·2 + dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct BayerStack<E: Real> {
    data: Tensor<E>,
    cfa: CfaOrder,
}

impl<E: Real> BayerStack<E> {
    /// Wrap packed data, enforcing the type's invariants: shape `(h2, w2, 4)`
    /// with extents ≥ 4 (full-resolution mosaic extents ≥ 8 and even by
    /// construction), and every value inside `[0, 1]`. Architecture-specific
    /// divisibility (e.g. the UNet's pooling pyramid) is checked at develop
    /// time, since the stack itself is architecture-agnostic.
    pub fn new(data: Tensor<E>, cfa: CfaOrder) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[2] != 4 {
            return Err(Error::Shape(format!("bayer stack must be (h/2, w/2, 4), got {s:?}")));
        }
        if s[0] < 4 || s[1] < 4 {
            return Err(Error::Shape(format!(
                "bayer stack extents must be >= 4, got {}x{}",
                s[0], s[1]
            )));
        }
        if data.data().iter().any(|v| !v.is_finite() || *v < E::zero() || *v > E::one()) {
            return Err(Error::Input("bayer stack values must lie in [0, 1]".into()));
        }
        Ok(Self { data, cfa })
    }

    pub fn data(&self) -> &Tensor<E> {
        &self.data
    }

    pub fn cfa(&self) -> CfaOrder {
        self.cfa
    }

    /// Packed (half-resolution) extents.
    pub fn packed_size(&self) -> (usize, usize) {
        (self.data.shape()[0], self.data.shape()[1])
    }

    /// Full-resolution extents of the underlying mosaic.
    pub fn full_size(&self) -> (usize, usize) {
        (self.data.shape()[0] * 2, self.data.shape()[1] * 2)
    }

    /// Crop a window given in packed coordinates.
    pub fn crop(&self, y0: usize, x0: usize, h2: usize, w2: usize) -> Result<Self> {
        let (sh, sw) = self.packed_size();
        if y0 + h2 > sh || x0 + w2 > sw {
            return Err(Error::Shape(format!(
                "crop {h2}x{w2}@({y0},{x0}) exceeds stack {sh}x{sw}"
            )));
        }
        let d = self.data.data();
        let mut out = Vec::with_capacity(h2 * w2 * 4);
        for y in 0..h2 {
            let row = ((y0 + y) * sw + x0) * 4;
            out.extend_from_slice(&d[row..row + w2 * 4]);
        }
        Self::new(Tensor::new(&[h2, w2, 4], out)?, self.cfa)
    }

    pub fn cast<T: Real>(&self) -> BayerStack<T> {
        BayerStack { data: self.data.cast::<T>(), cfa: self.cfa }
    }
}

/// Normalize, white-balance, and pack a raw frame.
///
/// Counts are mapped through `(c − black) / (saturation − black)`, clamped to
/// `[0, 1]`, multiplied by the white-balance gain of the measuring site's
/// color, clamped again, and packed 2×2 → 4 channels.
pub fn preprocess_raw<E: Real>(frame: &RawFrame<E>) -> Result<BayerStack<E>> {
    frame.validate()?;
    let s = frame.mosaic.shape();
    let (h, w) = (s[0], s[1]);
    let black = E::from_f64(frame.black_level);
    let range = E::from_f64(frame.saturation - frame.black_level);
    let gains = [
        E::from_f64(frame.wb_gains.0),
        E::from_f64(frame.wb_gains.1),
        E::from_f64(frame.wb_gains.2),
    ];
    let src = frame.mosaic.data();
    let mut packed = vec![E::zero(); h * w];
    let (h2, w2) = (h / 2, w / 2);
    for y in 0..h {
        for x in 0..w {
            let v = ((src[y * w + x] - black) / range).max(E::zero()).min(E::one());
            let v = (v * gains[frame.cfa.color_at(y, x)]).max(E::zero()).min(E::one());
            packed[(y / 2 * w2 + x / 2) * 4 + (y % 2) * 2 + (x % 2)] = v;
        }
    }
    BayerStack::new(Tensor::new(&[h2, w2, 4], packed)?, frame.cfa)
}

/// Per-color binary masks over the full-resolution mosaic: `masks[c]` is 1
/// where pixel (y, x) measures color c, shape `(h, w, 1)` each.
pub fn cfa_masks<E: Real>(cfa: CfaOrder, h: usize, w: usize) -> [Tensor<E>; 3] {
    let build = |c: usize| {
        Tensor::from_fn(&[h, w, 1], |i| {
            let (y, x) = (i / w, i % w);
            if cfa.color_at(y, x) == c {
                E::one()
            } else {
                E::zero()
            }
        })
        .expect("mask shape is valid")
    };
    [build(0), build(1), build(2)]
}

/// Which trainable development model a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum NipModel {
    INet,
    UNet { width: f64 },
}

impl NipModel {
    pub fn label(&self) -> &'static str {
        match self {
            NipModel::INet => "inet",
            NipModel::UNet { .. } => "unet",
        }
    }
}

/// A development model: architecture tag plus its named parameters.
#[derive(Debug, Clone)]
pub struct Nip<E: Real> {
    pub model: NipModel,
    pub params: ParamSet<E>,
}

impl<E: Real> Nip<E> {
    pub fn init(model: NipModel, seed: u64) -> Result<Self> {
        let params = match model {
            NipModel::INet => inet_init::<E>(seed)?,
            NipModel::UNet { width } => unet_init::<E>(width, seed)?,
        };
        Ok(Self { model, params })
    }

    /// Append this model's forward pass to a graph. `bound` must come from
    /// binding `self.params` into the same graph.
    pub fn develop(
        &self,
        g: &mut Graph<E>,
        bound: &Bound,
        stack: NodeId,
        cfa: CfaOrder,
    ) -> Result<NodeId> {
        match self.model {
            NipModel::INet => inet_develop(g, bound, stack, cfa),
            NipModel::UNet { width } => unet_develop(g, bound, stack, width),
        }
    }

    /// Run the model outside any training loop.
    pub fn develop_eval(&self, stack: &BayerStack<E>) -> Result<Tensor<E>> {
        let mut g = Graph::new();
        let bound = self.params.bind_with(&mut g, false);
        let input = g.constant(stack.data().clone());
        let out = self.develop(&mut g, &bound, input, stack.cfa())?;
        Ok(g.value(out).clone())
    }

    pub fn cast<T: Real>(&self) -> Nip<T> {
        Nip { model: self.model, params: self.params.cast::<T>() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cfa_color_layout() {
        // RGGB: R G / G B ; GBRG: G B / R G.
        let r = CfaOrder::Rggb;
        assert_eq!(
            [r.color_at(0, 0), r.color_at(0, 1), r.color_at(1, 0), r.color_at(1, 1)],
            [0, 1, 1, 2]
        );
        let g = CfaOrder::Gbrg;
        assert_eq!(
            [g.color_at(0, 0), g.color_at(0, 1), g.color_at(1, 0), g.color_at(1, 1)],
            [1, 2, 0, 1]
        );
        assert_eq!(CfaOrder::parse("rggb").unwrap(), CfaOrder::Rggb);
        assert!(CfaOrder::parse("XYZW").is_err());
    }

    fn frame_of(counts: Tensor<f64>) -> RawFrame<f64> {
        RawFrame {
            mosaic: counts,
            black_level: 64.0 / 1023.0,
            saturation: 1.0,
            wb_gains: (2.0, 1.0, 1.6),
            cfa: CfaOrder::Rggb,
        }
    }

    #[test]
    fn black_counts_preprocess_to_zero() {
        let f = frame_of(Tensor::full(&[8, 8, 1], 64.0 / 1023.0).unwrap());
        let s = preprocess_raw(&f).unwrap();
        assert!(s.data().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn saturated_counts_with_unit_gains_preprocess_to_one() {
        let mut f = frame_of(Tensor::full(&[8, 8, 1], 1.0).unwrap());
        f.wb_gains = (1.0, 1.0, 1.0);
        let s = preprocess_raw(&f).unwrap();
        assert!(s.data().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn preprocess_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w) = (10, 12);
        let mosaic = Tensor::from_fn(&[h, w, 1], |_| rng.gen_range(0.0..1.0)).unwrap();
        let f = frame_of(mosaic.clone());
        let s = preprocess_raw(&f).unwrap();

        let (black, sat) = (64.0 / 1023.0, 1.0);
        let gains = [2.0, 1.0, 1.6];
        for y in 0..h {
            for x in 0..w {
                let mut v = (mosaic.data()[y * w + x] - black) / (sat - black);
                v = v.clamp(0.0, 1.0);
                v = (v * gains[CfaOrder::Rggb.color_at(y, x)]).clamp(0.0, 1.0);
                let got = s.data().at3(y / 2, x / 2, (y % 2) * 2 + (x % 2));
                assert!((got - v).abs() <= 1e-6, "({y},{x}): {got} vs {v}");
            }
        }
    }

    #[test]
    fn preprocess_rejects_bad_calibration() {
        let mut f = frame_of(Tensor::full(&[8, 8, 1], 0.5).unwrap());
        f.saturation = f.black_level;
        assert!(matches!(preprocess_raw(&f), Err(Error::Input(_))));
        let mut f2 = frame_of(Tensor::full(&[8, 8, 1], 0.5).unwrap());
        f2.wb_gains = (0.0, 1.0, 1.0);
        assert!(preprocess_raw(&f2).is_err());
    }

    #[test]
    fn stack_invariants_are_enforced() {
        let ok = Tensor::full(&[4, 4, 4], 0.5).unwrap();
        assert!(BayerStack::new(ok, CfaOrder::Rggb).is_ok());
        let bad_range = Tensor::full(&[4, 4, 4], 1.5).unwrap();
        assert!(BayerStack::new(bad_range, CfaOrder::Rggb).is_err());
        let bad_shape = Tensor::full(&[4, 4, 3], 0.5).unwrap();
        assert!(BayerStack::new(bad_shape, CfaOrder::Rggb).is_err());
        // Odd packed extents are fine (mosaic 10x8): only the mosaic must be even.
        let odd_packed = Tensor::full(&[5, 4, 4], 0.5).unwrap();
        assert!(BayerStack::new(odd_packed, CfaOrder::Rggb).is_ok());
        let too_small = Tensor::full(&[3, 4, 4], 0.5).unwrap();
        assert!(BayerStack::new(too_small, CfaOrder::Rggb).is_err());
    }

    #[test]
    fn stack_crop_windows_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Tensor::from_fn(&[8, 10, 4], |_| rng.gen_range(0.0..1.0f64)).unwrap();
        let s = BayerStack::new(data.clone(), CfaOrder::Rggb).unwrap();
        let c = s.crop(2, 3, 4, 6).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                for ch in 0..4 {
                    assert_eq!(c.data().at3(y, x, ch), data.at3(y + 2, x + 3, ch));
                }
            }
        }
        assert!(s.crop(6, 0, 4, 4).is_err());
    }

    #[test]
    fn masks_partition_the_mosaic() {
        let [r, g, b] = cfa_masks::<f64>(CfaOrder::Gbrg, 6, 6);
        for i in 0..36 {
            assert_eq!(r.data()[i] + g.data()[i] + b.data()[i], 1.0);
        }
        // Green covers half the sites, red/blue a quarter each.
        assert_eq!(g.data().iter().sum::<f64>(), 18.0);
        assert_eq!(r.data().iter().sum::<f64>(), 9.0);
        assert_eq!(b.data().iter().sum::<f64>(), 9.0);
    }
}
