//! UNet: the full-capacity development model, an encoder–decoder with skip
//! connections operating on the packed stack and ending in a depth-to-space
//! upsample back to full resolution.
//!
//! Widths follow the 32/64/128/256/512 ladder scaled by a multiplier; at
//! multiplier 1 the parameter count is exactly [`UNET_FULL_WIDTH_PARAMS`]
//! (all 3×3 and the final 1×1 convolutions carry biases, the 1×1 upsampling
//! projections do not).

use crate::autodiff::{Graph, NodeId, Padding, Real, Tensor};
use crate::params::{Bound, ParamSet};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Trainable parameter count at width multiplier 1.
pub const UNET_FULL_WIDTH_PARAMS: usize = 7_760_268;

const LEAKY_SLOPE: f64 = 0.2;

/// Encoder/decoder widths for a multiplier; each scaled width must land on a
/// positive integer.
pub fn unet_widths(mult: f64) -> Result<[usize; 5]> {
    let base = [32.0, 64.0, 128.0, 256.0, 512.0];
    let mut out = [0usize; 5];
    for (i, b) in base.iter().enumerate() {
        let w = b * mult;
        if !(w >= 1.0) || (w - w.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "width multiplier {mult} gives non-integral channel count {w} (base {b})"
            )));
        }
        out[i] = w.round() as usize;
    }
    Ok(out)
}

fn kaiming_uniform<E: Real>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> Result<Tensor<E>> {
    // Gain for leaky-ReLU(0.2): sqrt(2 / (1 + 0.2²)).
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| E::from_f64(rng.gen_range(-bound..bound)))
}

fn insert_conv<E: Real>(
    p: &mut ParamSet<E>,
    rng: &mut ChaCha8Rng,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
    bias: bool,
) -> Result<()> {
    p.insert(
        &format!("{name}.k"),
        kaiming_uniform(rng, &[k, k, cin, cout], k * k * cin)?,
    )?;
    if bias {
        p.insert(&format!("{name}.b"), Tensor::zeros(&[cout])?)?;
    }
    Ok(())
}

/// Random (He-uniform) initialization of every layer, biases zero.
pub fn unet_init<E: Real>(mult: f64, seed: u64) -> Result<ParamSet<E>> {
    let w = unet_widths(mult)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let block = |p: &mut ParamSet<E>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize| -> Result<()> {
        insert_conv(p, rng, &format!("{name}.conv1"), 3, cin, cout, true)?;
        insert_conv(p, rng, &format!("{name}.conv2"), 3, cout, cout, true)
    };
    block(&mut p, &mut rng, "enc1", 4, w[0])?;
    block(&mut p, &mut rng, "enc2", w[0], w[1])?;
    block(&mut p, &mut rng, "enc3", w[1], w[2])?;
    block(&mut p, &mut rng, "enc4", w[2], w[3])?;
    block(&mut p, &mut rng, "mid", w[3], w[4])?;
    for (i, (cin, cout)) in [(w[4], w[3]), (w[3], w[2]), (w[2], w[1]), (w[1], w[0])]
        .iter()
        .enumerate()
    {
        let name = format!("dec{}", 4 - i);
        // Learned 2× upsampling: 1×1 projection to 4·cout (no bias), then
        // depth-to-space.
        insert_conv(&mut p, &mut rng, &format!("{name}.up"), 1, *cin, 4 * cout, false)?;
        block(&mut p, &mut rng, &name, 2 * cout, *cout)?;
    }
    insert_conv(&mut p, &mut rng, "final", 1, w[0], 12, true)?;
    Ok(p)
}

/// Differentiable UNet forward pass. Input `(h/2, w/2, 4)` with extents
/// divisible by 16; output `(h, w, 3)`, unclamped.
pub fn unet_develop<E: Real>(
    g: &mut Graph<E>,
    p: &Bound,
    stack: NodeId,
    mult: f64,
) -> Result<NodeId> {
    unet_widths(mult)?;
    let s = g.shape(stack).to_vec();
    if s.len() != 3 || s[2] != 4 {
        return Err(Error::Shape(format!("unet input must be (h/2, w/2, 4), got {s:?}")));
    }
    if s[0] % 16 != 0 || s[1] % 16 != 0 {
        return Err(Error::Shape(format!(
            "unet input extents must be divisible by 16, got {}x{}",
            s[0], s[1]
        )));
    }

    let block = |g: &mut Graph<E>, name: &str, x: NodeId| -> Result<NodeId> {
        let c1 = g.conv2d(
            x,
            p.id(&format!("{name}.conv1.k")),
            Some(p.id(&format!("{name}.conv1.b"))),
            1,
            Padding::Same,
        )?;
        let a1 = g.leaky_relu(c1, LEAKY_SLOPE);
        let c2 = g.conv2d(
            a1,
            p.id(&format!("{name}.conv2.k")),
            Some(p.id(&format!("{name}.conv2.b"))),
            1,
            Padding::Same,
        )?;
        Ok(g.leaky_relu(c2, LEAKY_SLOPE))
    };

    let e1 = block(g, "enc1", stack)?;
    let p1 = g.maxpool2(e1)?;
    let e2 = block(g, "enc2", p1)?;
    let p2 = g.maxpool2(e2)?;
    let e3 = block(g, "enc3", p2)?;
    let p3 = g.maxpool2(e3)?;
    let e4 = block(g, "enc4", p3)?;
    let p4 = g.maxpool2(e4)?;
    let mut x = block(g, "mid", p4)?;

    for (i, skip) in [e4, e3, e2, e1].iter().enumerate() {
        let name = format!("dec{}", 4 - i);
        let up = g.conv2d(x, p.id(&format!("{name}.up.k")), None, 1, Padding::Same)?;
        let up = g.depth_to_space(up, 2)?;
        let cat = g.concat_channels(up, *skip)?;
        x = block(g, &name, cat)?;
    }
    let fin = g.conv2d(x, p.id("final.k"), Some(p.id("final.b")), 1, Padding::Same)?;
    g.depth_to_space(fin, 2)
}

/// Reduced-width develop-path gradient check (parameters and input jointly).
pub fn grad_check() -> crate::autodiff::OpCheck {
    let params = unet_init::<f64>(1.0 / 32.0, 3).expect("unet init");
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    inputs.push(
        Tensor::from_fn(&[16, 16, 4], |i| 0.2 + 0.6 * (((i * 29) % 97) as f64) / 97.0)
            .expect("stack shape"),
    );
    crate::autodiff::OpCheck::new("unet/width-1-32", inputs, move |g, ids| {
        let bound = Bound::from_parts(names.clone(), ids[..names.len()].to_vec());
        unet_develop(g, &bound, *ids.last().unwrap(), 1.0 / 32.0)
    })
    .sampled(40)
}
