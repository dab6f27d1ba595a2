//! Finite-difference verification of every differentiable operation.
//!
//! Each [`OpCheck`] bundles seeded inputs plus a builder that appends the op
//! under test to a fresh graph. The harness projects the op output to a
//! scalar through a fixed random weighting (so the whole Jacobian is
//! exercised), computes analytic gradients with one backward pass, and
//! compares against central differences in `f64`:
//!
//!   rel_err = |analytic - numeric| / max(1, |numeric|)
//!
//! Checks run entirely in double precision; single-precision noise would
//! otherwise dominate the 1e-4 acceptance tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId, PadMode, PadSpec, Padding};
use super::tensor::Tensor;
use crate::Result;

type BuildFn = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

/// A named gradient check: inputs plus a graph builder returning the node to
/// verify (any shape; the harness reduces it to a scalar loss).
pub struct OpCheck {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: BuildFn,
    /// Check at most this many coordinates per input (all when `None`);
    /// large composite models sample to stay inside the time budget.
    pub sample_coords: Option<usize>,
}

impl OpCheck {
    pub fn new(
        name: &str,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'static,
    ) -> Self {
        OpCheck {
            name: name.to_string(),
            inputs,
            build: Box::new(build),
            sample_coords: None,
        }
    }

    pub fn sampled(mut self, coords: usize) -> Self {
        self.sample_coords = Some(coords);
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} (max rel err {:.3e} over {} coords, tol {:.1e})",
            self.name,
            if self.pass { "ok" } else { "FAIL" },
            self.max_rel_err,
            self.coords_checked,
            self.tol
        )
    }
}

/// Deterministic projection weights so the scalarized loss is sensitive to
/// every output coordinate.
fn projection_weights(name: &str, len: usize) -> Tensor<f64> {
    let seed = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x1000_0000_01b3)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[len], |_| 0.5 + rng.gen::<f64>()).unwrap()
}

fn eval_loss(
    check: &OpCheck,
    inputs: &[Tensor<f64>],
    with_grad: bool,
) -> Result<(Graph<f64>, NodeId, Vec<NodeId>)> {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(with_grad)))
        .collect();
    let out = (check.build)(&mut g, &leaves)?;
    let w = projection_weights(&check.name, g.value(out).len());
    let out_flat = g.reshape(out, &[g.value(out).len()])?;
    let wid = g.constant(w);
    let prod = g.mul(out_flat, wid)?;
    let loss = g.sum(prod);
    Ok((g, loss, leaves))
}

/// Central-difference gradient of `f` at `x` for the given coordinates.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    eps: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(coords.len());
    let mut probe = x.clone();
    for &c in coords {
        let orig = probe.data()[c];
        probe.data_mut()[c] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[c] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[c] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

/// Run one gradient check; `tol` is the maximum allowed relative error.
pub fn check_gradients(check: &OpCheck, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let (g, loss, leaves) = eval_loss(check, &check.inputs, true)?;
    let grads = g.backward(loss)?;

    let mut max_rel_err = 0.0f64;
    let mut coords_checked = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);

    for (k, input) in check.inputs.iter().enumerate() {
        let analytic = grads
            .get(leaves[k])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);

        let n = input.len();
        let coords: Vec<usize> = match check.sample_coords {
            Some(s) if s < n => {
                let mut picked: Vec<usize> = (0..s).map(|_| rng.gen_range(0..n)).collect();
                picked.sort_unstable();
                picked.dedup();
                picked
            }
            _ => (0..n).collect(),
        };

        let f = |probe: &Tensor<f64>| -> Result<f64> {
            let mut inputs: Vec<Tensor<f64>> = check.inputs.clone();
            inputs[k] = probe.clone();
            let (g, loss, _) = eval_loss(check, &inputs, false)?;
            Ok(g.value(loss).data()[0])
        };
        let numeric = finite_diff_grad(f, input, eps, &coords)?;

        for (&c, &nv) in coords.iter().zip(&numeric) {
            let av = analytic[c];
            let rel = (av - nv).abs() / nv.abs().max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            coords_checked += 1;
        }
    }

    Ok(GradCheckReport {
        name: check.name.clone(),
        max_rel_err,
        coords_checked,
        tol,
        pass: max_rel_err <= tol,
    })
}

fn rng_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| lo + (hi - lo) * rng.gen::<f64>()).unwrap()
}

/// Gradient checks covering every differentiable primitive, with inputs kept
/// away from subgradient kinks so central differences are valid.
pub fn registered_op_checks() -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut checks = Vec::new();

    let a = rng_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rng_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    checks.push(OpCheck::new("add", vec![a.clone(), b.clone()], |g, l| {
        g.add(l[0], l[1])
    }));
    checks.push(OpCheck::new("sub", vec![a.clone(), b.clone()], |g, l| {
        g.sub(l[0], l[1])
    }));
    checks.push(OpCheck::new("mul", vec![a.clone(), b.clone()], |g, l| {
        g.mul(l[0], l[1])
    }));

    let img = rng_tensor(&mut rng, &[4, 5, 3], -1.0, 1.0);
    let chan = rng_tensor(&mut rng, &[4, 5, 1], 0.2, 1.0);
    checks.push(OpCheck::new("mul_bcast", vec![img.clone(), chan], |g, l| {
        g.mul_bcast(l[0], l[1])
    }));

    let pos = rng_tensor(&mut rng, &[3, 4], 0.3, 2.0);
    checks.push(OpCheck::new("recip", vec![pos], |g, l| Ok(g.recip(l[0]))));

    // Values straddle the threshold but stay > 2*eps away from it.
    let cm = rng_tensor(&mut rng, &[4, 4], -1.0, 1.0).map(|v| if v.abs() < 0.05 { 0.2 } else { v });
    checks.push(OpCheck::new("clamp_min", vec![cm], |g, l| {
        Ok(g.clamp_min(l[0], 0.0))
    }));

    let c01 = rng_tensor(&mut rng, &[4, 4], -0.5, 1.5)
        .map(|v| if (v - 0.0).abs() < 0.05 || (v - 1.0).abs() < 0.05 { 0.5 } else { v });
    checks.push(OpCheck::new("clamp01", vec![c01], |g, l| Ok(g.clamp01(l[0]))));

    checks.push(OpCheck::new("scale", vec![a.clone()], |g, l| {
        Ok(g.scale(l[0], -2.5))
    }));
    checks.push(OpCheck::new("offset", vec![a.clone()], |g, l| {
        Ok(g.offset(l[0], 0.75))
    }));
    checks.push(OpCheck::new("sin", vec![a.clone()], |g, l| Ok(g.sin(l[0]))));
    checks.push(OpCheck::new("sigmoid", vec![a.clone()], |g, l| {
        Ok(g.sigmoid(l[0]))
    }));

    let lr = rng_tensor(&mut rng, &[4, 4], -1.0, 1.0).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    checks.push(OpCheck::new("leaky_relu", vec![lr], |g, l| {
        Ok(g.leaky_relu(l[0], 0.2))
    }));

    checks.push(OpCheck::new("sum", vec![a.clone()], |g, l| Ok(g.sum(l[0]))));
    checks.push(OpCheck::new("mean", vec![a.clone()], |g, l| Ok(g.mean(l[0]))));
    checks.push(OpCheck::new("reshape", vec![a.clone()], |g, l| {
        g.reshape(l[0], &[2, 6])
    }));

    let ma = rng_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    let mb = rng_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    checks.push(OpCheck::new("matmul", vec![ma, mb], |g, l| {
        g.matmul(l[0], l[1])
    }));

    let cx = rng_tensor(&mut rng, &[6, 5, 3], -1.0, 1.0);
    let ck = rng_tensor(&mut rng, &[3, 3, 3, 2], -0.5, 0.5);
    let cb = rng_tensor(&mut rng, &[2], -0.5, 0.5);
    checks.push(OpCheck::new(
        "conv2d/same",
        vec![cx.clone(), ck.clone(), cb.clone()],
        |g, l| g.conv2d(l[0], l[1], Some(l[2]), 1, Padding::Same),
    ));
    checks.push(OpCheck::new(
        "conv2d/valid",
        vec![cx.clone(), ck.clone()],
        |g, l| g.conv2d(l[0], l[1], None, 1, Padding::Valid),
    ));
    checks.push(OpCheck::new(
        "conv2d/same-stride2",
        vec![cx.clone(), ck, cb],
        |g, l| g.conv2d(l[0], l[1], Some(l[2]), 2, Padding::Same),
    ));

    let s2d = rng_tensor(&mut rng, &[4, 6, 2], -1.0, 1.0);
    checks.push(OpCheck::new("space_to_depth", vec![s2d], |g, l| {
        g.space_to_depth(l[0], 2)
    }));
    let d2s = rng_tensor(&mut rng, &[2, 3, 8], -1.0, 1.0);
    checks.push(OpCheck::new("depth_to_space", vec![d2s], |g, l| {
        g.depth_to_space(l[0], 2)
    }));

    let mp = rng_tensor(&mut rng, &[4, 4, 2], -1.0, 1.0);
    checks.push(OpCheck::new("maxpool2", vec![mp], |g, l| g.maxpool2(l[0])));
    checks.push(OpCheck::new("global_avg_pool", vec![cx.clone()], |g, l| {
        g.global_avg_pool(l[0])
    }));

    let logits = rng_tensor(&mut rng, &[3, 5], -2.0, 2.0);
    checks.push(OpCheck::new("softmax", vec![logits.clone()], |g, l| {
        g.softmax(l[0])
    }));
    checks.push(OpCheck::new("softmax_xent", vec![logits], |g, l| {
        g.softmax_xent(l[0], &[0, 3, 2])
    }));

    checks.push(OpCheck::new("pad2d/replicate", vec![cx.clone()], |g, l| {
        g.pad2d(l[0], PadSpec::uniform(2, PadMode::Replicate))
    }));
    checks.push(OpCheck::new("pad2d/reflect101", vec![cx.clone()], |g, l| {
        g.pad2d(l[0], PadSpec::uniform(2, PadMode::Reflect101))
    }));
    checks.push(OpCheck::new("crop", vec![cx.clone()], |g, l| {
        g.crop(l[0], 1, 2, 3, 2)
    }));

    let cca = rng_tensor(&mut rng, &[3, 4, 2], -1.0, 1.0);
    let ccb = rng_tensor(&mut rng, &[3, 4, 3], -1.0, 1.0);
    checks.push(OpCheck::new("concat_channels", vec![cca, ccb], |g, l| {
        g.concat_channels(l[0], l[1])
    }));
    checks.push(OpCheck::new("select_channel", vec![cx.clone()], |g, l| {
        g.select_channel(l[0], 1)
    }));

    let ds = rng_tensor(&mut rng, &[6, 4, 3], -1.0, 1.0);
    checks.push(OpCheck::new("downsample", vec![ds], |g, l| {
        g.downsample(l[0], 2)
    }));
    let us = rng_tensor(&mut rng, &[3, 4, 2], -1.0, 1.0);
    checks.push(OpCheck::new("upsample2", vec![us], |g, l| g.upsample2(l[0])));

    let rmc = rng_tensor(&mut rng, &[4, 3, 3], -1.0, 1.0);
    checks.push(OpCheck::new("reduce_max_channels", vec![rmc], |g, l| {
        g.reduce_max_channels(l[0])
    }));

    let blocks = rng_tensor(&mut rng, &[3, 8, 8], -1.0, 1.0);
    checks.push(OpCheck::new("dct8/fwd", vec![blocks.clone()], |g, l| {
        g.dct8(l[0], true)
    }));
    checks.push(OpCheck::new("dct8/inv", vec![blocks.clone()], |g, l| {
        g.dct8(l[0], false)
    }));

    let table: Vec<f64> = (0..64).map(|i| 0.5 + (i as f64) / 64.0).collect();
    checks.push(OpCheck::new("mul_blocks", vec![blocks], move |g, l| {
        g.mul_blocks(l[0], &table)
    }));

    checks
}
