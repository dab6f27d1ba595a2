//! Forensic analysis network: a constrained-residual first layer feeding a
//! conventional CNN classifier over the five manipulation classes.
//!
//! The first convolution carries no bias and is projected onto zero-sum
//! filters after every optimizer step, so it can only pass residual
//! (high-pass) information: a constant image produces an exactly-zero
//! response. The remainder is four strided-by-pooling 5×5 stages, a 1×1
//! feature projection, global average pooling, and a three-layer classifier
//! head ending in a softmax over the classes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, OpCheck, PadMode, PadSpec, Padding, Real, Tensor};
use crate::params::{Bound, ParamSet};
use crate::{Error, Result};

/// Trainable parameter total at width multiplier 1.
pub const FAN_FULL_WIDTH_PARAMS: usize = 1_341_990;

/// Number of output classes.
pub const FAN_CLASSES: usize = 5;

const SLOPE: f64 = 0.2;

/// Base widths before the multiplier: four conv stages and two hidden
/// fully-connected layers.
const CONV_BASE: [usize; 4] = [32, 64, 128, 256];
const FC_BASE: [usize; 2] = [512, 128];

/// Scales the base widths, requiring every result to be a positive integer.
pub fn fan_widths(mult: f64) -> Result<([usize; 4], [usize; 2])> {
    let scale = |base: usize| -> Result<usize> {
        let v = base as f64 * mult;
        if !(v.is_finite() && v >= 1.0 && v.fract() == 0.0) {
            return Err(Error::Config(format!(
                "width multiplier {mult} makes layer width {base} -> {v}, not a positive integer"
            )));
        }
        Ok(v as usize)
    };
    Ok((
        [
            scale(CONV_BASE[0])?,
            scale(CONV_BASE[1])?,
            scale(CONV_BASE[2])?,
            scale(CONV_BASE[3])?,
        ],
        [scale(FC_BASE[0])?, scale(FC_BASE[1])?],
    ))
}

/// The residual initializer: `[[−1,−2,−1],[−2,12,−2],[−1,−2,−1]]` zero-padded
/// to 5×5, placed on diagonal (input = output) channel pairs.
pub fn constrained_init<E: Real>() -> Tensor<E> {
    let core = [
        [-1.0, -2.0, -1.0],
        [-2.0, 12.0, -2.0],
        [-1.0, -2.0, -1.0],
    ];
    Tensor::from_fn(&[5, 5, 3, 3], |i| {
        let co = i % 3;
        let ci = (i / 3) % 3;
        let kx = (i / 9) % 5;
        let ky = i / 45;
        if ci == co && (1..=3).contains(&ky) && (1..=3).contains(&kx) {
            E::from_f64(core[ky - 1][kx - 1])
        } else {
            E::zero()
        }
    })
    .expect("static shape")
}

fn kaiming_uniform<E: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<E> {
    let gain = (2.0 / (1.0 + SLOPE * SLOPE)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| E::from_f64(rng.gen_range(-bound..bound)))
        .expect("parameter shapes are valid")
}

/// Builds a freshly initialized parameter set. The constrained layer gets the
/// residual filter on diagonal channel pairs; everything else is seeded
/// fan-in-scaled uniform with zero biases.
pub fn fan_init<E: Real>(mult: f64, seed: u64) -> Result<ParamSet<E>> {
    let (conv, fc) = fan_widths(mult)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    p.insert("constrained.k", constrained_init())?;

    let mut cin = 3;
    for (i, &cout) in conv.iter().enumerate() {
        let name = format!("conv{}", i + 1);
        p.insert(
            &format!("{name}.k"),
            kaiming_uniform(&mut rng, &[5, 5, cin, cout], 25 * cin),
        )?;
        p.insert(&format!("{name}.b"), Tensor::zeros(&[cout])?)?;
        cin = cout;
    }
    p.insert("proj.k", kaiming_uniform(&mut rng, &[1, 1, cin, cin], cin))?;
    p.insert("proj.b", Tensor::zeros(&[cin])?)?;

    let dims = [cin, fc[0], fc[1], FAN_CLASSES];
    for i in 0..3 {
        let name = format!("fc{}", i + 1);
        let mut k = kaiming_uniform(&mut rng, &[dims[i], dims[i + 1]], dims[i]);
        if i == 2 {
            // The classifier head starts two orders of magnitude smaller, so
            // an untrained network predicts near the uniform distribution
            // instead of a saturated one (the residual first layer amplifies
            // its input considerably, and that scale survives to the head).
            k = k.map(|v| v * E::from_f64(0.01));
        }
        p.insert(&format!("{name}.k"), k)?;
        p.insert(&format!("{name}.b"), Tensor::zeros(&[1, dims[i + 1]])?)?;
    }
    Ok(p)
}

/// Classifier logits for one image: shape `[1, 5]`.
pub fn fan_logits<E: Real>(g: &mut Graph<E>, p: &Bound, rgb: NodeId) -> Result<NodeId> {
    let s = g.shape(rgb).to_vec();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("fan: need an (h,w,3) image, got {s:?}")));
    }
    if s[0] % 16 != 0 || s[1] % 16 != 0 || s[0] < 16 || s[1] < 16 {
        return Err(Error::Shape(format!(
            "fan: extents must be positive multiples of 16 (four 2x2 pools), got {}x{}",
            s[0], s[1]
        )));
    }

    // Constrained residual layer: replicate padding keeps the zero-sum
    // property effective at the borders, and there is no bias or activation.
    let padded = g.pad2d(rgb, PadSpec::uniform(2, PadMode::Replicate))?;
    let mut x = g.conv2d(padded, p.id("constrained.k"), None, 1, Padding::Valid)?;

    for i in 1..=4 {
        let k = p.id(&format!("conv{i}.k"));
        let b = p.id(&format!("conv{i}.b"));
        x = g.conv2d(x, k, Some(b), 1, Padding::Same)?;
        x = g.leaky_relu(x, SLOPE);
        x = g.maxpool2(x)?;
    }

    x = g.conv2d(x, p.id("proj.k"), Some(p.id("proj.b")), 1, Padding::Same)?;
    x = g.leaky_relu(x, SLOPE);
    x = g.global_avg_pool(x)?;

    for i in 1..=3 {
        x = g.matmul(x, p.id(&format!("fc{i}.k")))?;
        x = g.add(x, p.id(&format!("fc{i}.b")))?;
        if i < 3 {
            x = g.leaky_relu(x, SLOPE);
        }
    }
    Ok(x)
}

/// Class probabilities for one image: softmax of the logits, shape `[1, 5]`.
pub fn fan_forward<E: Real>(g: &mut Graph<E>, p: &Bound, rgb: NodeId) -> Result<NodeId> {
    let logits = fan_logits(g, p, rgb)?;
    g.softmax(logits)
}

/// Restores the residual constraint exactly: for every (input, output)
/// channel pair the center tap becomes the negated sum of the other 24.
pub fn project_constrained<E: Real>(params: &mut ParamSet<E>) -> Result<()> {
    let k = params
        .get_mut("constrained.k")
        .ok_or_else(|| Error::Contract("parameter set has no constrained.k".into()))?;
    if k.shape() != [5, 5, 3, 3] {
        return Err(Error::Contract(format!(
            "constrained layer must be (5,5,3,3), got {:?}",
            k.shape()
        )));
    }
    let data = k.data_mut();
    for ci in 0..3 {
        for co in 0..3 {
            // Accumulate in f64 regardless of the working precision: the
            // center tap then carries a single rounding error instead of a
            // 24-term f32 summation drift, keeping |tap sum| well below 1e-6
            // even late in training when taps have grown.
            let mut sum = 0.0f64;
            for tap in 0..25 {
                if tap != 12 {
                    sum += data[(tap * 3 + ci) * 3 + co].as_f64();
                }
            }
            data[(12 * 3 + ci) * 3 + co] = E::from_f64(-sum);
        }
    }
    Ok(())
}

/// Per-(input, output) tap sums of the constrained filter, for verifying the
/// residual constraint. Nine entries, row-major over (ci, co).
pub fn constrained_tap_sums<E: Real>(params: &ParamSet<E>) -> Result<Vec<f64>> {
    let k = params
        .get("constrained.k")
        .ok_or_else(|| Error::Contract("parameter set has no constrained.k".into()))?;
    if k.shape() != [5, 5, 3, 3] {
        return Err(Error::Contract(format!(
            "constrained layer must be (5,5,3,3), got {:?}",
            k.shape()
        )));
    }
    let data = k.data();
    let mut sums = Vec::with_capacity(9);
    for ci in 0..3 {
        for co in 0..3 {
            let mut sum = 0.0;
            for tap in 0..25 {
                sum += data[(tap * 3 + ci) * 3 + co].as_f64();
            }
            sums.push(sum);
        }
    }
    Ok(sums)
}

/// Gradient check of the cross-entropy loss with respect to every parameter
/// at width 0.25 on a 32×32 input.
pub fn grad_check() -> OpCheck {
    let params: ParamSet<f64> = fan_init(0.25, 9).expect("0.25 is a valid multiplier");
    let names: Vec<String> = params.names().map(|n| n.to_string()).collect();
    let tensors: Vec<Tensor<f64>> = (0..params.len())
        .map(|i| params.tensor_at(i).clone())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let image = Tensor::from_fn(&[32, 32, 3], |_| rng.gen_range(0.0..1.0)).expect("static shape");
    OpCheck::new("fan/xent", tensors, move |g, leaves| {
        let bound = Bound::from_parts(names.clone(), leaves.to_vec());
        let x = g.constant(image.clone());
        let logits = fan_logits(g, &bound, x)?;
        g.softmax_xent(logits, &[2])
    })
    .sampled(60)
}
