//! Forward passes: the plan executor, output heads, scale fusing, and
//! mask prediction.

use std::collections::BTreeMap;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::network::{plan, Arch, Feed, ModelParams, NetworkConfig};
use crate::ops::{self, BN_MOMENTUM};
use crate::pyramid::image_pyramid;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Whether batch norm uses batch statistics (and updates running state) or
/// frozen running statistics.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of a forward pass: per-scale probability maps plus every block
/// application's output, keyed by grid position (useful for inspection and
/// wiring tests).
pub struct ForwardOutputs {
    /// One 2-channel softmax map per scale (a single entry for baselines),
    /// ordered fine to coarse.
    pub probs: Vec<Var>,
    pub trace: BTreeMap<String, Var>,
}

fn var_of(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("parameter `{name}` not registered on tape")))
}

/// Batch norm in either mode; train mode folds the batch statistics into
/// the running state stored on `params` with rate [`BN_MOMENTUM`].
fn batch_norm<E: Element>(
    tape: &mut Tape<E>,
    vars: &BTreeMap<String, Var>,
    params: &mut ModelParams<E>,
    affine: &str,
    stats: &str,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let gamma = var_of(vars, &format!("{affine}.gamma"))?;
    let beta = var_of(vars, &format!("{affine}.beta"))?;
    let mean_name = format!("{stats}.running_mean");
    let var_name = format!("{stats}.running_var");
    match mode {
        Mode::Train => {
            let (y, batch) = tape.batch_norm_train(x, gamma, beta)?;
            let momentum = E::from_f64_c(BN_MOMENTUM);
            let keep = E::one() - momentum;
            let rm = params
                .get_mut(&mean_name)
                .ok_or_else(|| Error::Config(format!("missing running stats `{mean_name}`")))?;
            for (r, &b) in rm.data_mut().iter_mut().zip(&batch.mean) {
                *r = keep * *r + momentum * b;
            }
            let rv = params
                .get_mut(&var_name)
                .ok_or_else(|| Error::Config(format!("missing running stats `{var_name}`")))?;
            for (r, &b) in rv.data_mut().iter_mut().zip(&batch.var) {
                *r = keep * *r + momentum * b;
            }
            Ok(y)
        }
        Mode::Eval => {
            let mean = params.expect(&mean_name)?.data().to_vec();
            let var = params.expect(&var_name)?.data().to_vec();
            tape.batch_norm_eval(x, gamma, beta, mean, var)
        }
    }
}

/// Two conv+bn+relu stages with an optional skip from block input to block
/// output (identity, or a bias-free 1x1 projection when channels differ).
#[allow(clippy::too_many_arguments)]
fn run_block<E: Element>(
    tape: &mut Tape<E>,
    vars: &BTreeMap<String, Var>,
    params: &mut ModelParams<E>,
    weights: &str,
    stats: &str,
    x: Var,
    residual: bool,
    needs_projection: bool,
    mode: Mode,
) -> Result<Var> {
    let w1 = var_of(vars, &format!("{weights}.conv1.weight"))?;
    let b1 = var_of(vars, &format!("{weights}.conv1.bias"))?;
    let c1 = tape.conv2d(x, w1, b1, 1, 1)?;
    let n1 = batch_norm(tape, vars, params, &format!("{weights}.bn1"), &format!("{stats}.bn1"), c1, mode)?;
    let r1 = tape.relu(n1)?;

    let w2 = var_of(vars, &format!("{weights}.conv2.weight"))?;
    let b2 = var_of(vars, &format!("{weights}.conv2.bias"))?;
    let c2 = tape.conv2d(r1, w2, b2, 1, 1)?;
    let n2 = batch_norm(tape, vars, params, &format!("{weights}.bn2"), &format!("{stats}.bn2"), c2, mode)?;
    let r2 = tape.relu(n2)?;

    if !residual {
        return Ok(r2);
    }
    let skip = if needs_projection {
        let pw = var_of(vars, &format!("{weights}.proj.weight"))?;
        let cout = tape.value(pw).shape().n;
        let zero_bias = tape.leaf(Tensor::zeros(Shape::new(1, cout, 1, 1)), false);
        tape.conv2d(x, pw, zero_bias, 1, 0)?
    } else {
        x
    };
    tape.add(r2, skip)
}

/// Executes an architecture plan over registered inputs. `inputs` holds the
/// pyramid levels for MIMO-FAN, or the single full-resolution image for the
/// baselines.
fn run_plan<E: Element>(
    tape: &mut Tape<E>,
    vars: &BTreeMap<String, Var>,
    params: &mut ModelParams<E>,
    inputs: &[Var],
    config: &NetworkConfig,
    mode: Mode,
) -> Result<ForwardOutputs> {
    let plan = plan(config);
    let mut features: BTreeMap<String, Var> = BTreeMap::new();

    for app in &plan.apps {
        let mut resolved = Vec::with_capacity(app.feeds.len());
        for feed in &app.feeds {
            let v = match feed {
                Feed::Pyramid(s) => *inputs.get(*s).ok_or_else(|| {
                    Error::Config(format!("pyramid level {s} missing for `{}`", app.key))
                })?,
                Feed::App { key, pool, up } => {
                    let mut v = *features
                        .get(key)
                        .ok_or_else(|| Error::Config(format!("feature `{key}` not yet computed")))?;
                    for _ in 0..*pool {
                        v = tape.avg_pool2(v)?;
                    }
                    for _ in 0..*up {
                        v = tape.upsample2_bilinear(v)?;
                    }
                    v
                }
            };
            resolved.push(v);
        }
        let x = if resolved.len() == 1 {
            resolved[0]
        } else {
            tape.concat_channels(&resolved)?
        };
        let w = &plan.weights[app.weights];
        let out = run_block(
            tape,
            vars,
            params,
            &w.name,
            &app.stats_key,
            x,
            w.residual,
            w.needs_projection(),
            mode,
        )?;
        features.insert(app.key.clone(), out);
    }

    let mut probs = Vec::with_capacity(plan.heads.len());
    for head in &plan.heads {
        let src = features[&head.src_key];
        let hw = var_of(vars, &format!("{}.weight", head.name))?;
        let hb = var_of(vars, &format!("{}.bias", head.name))?;
        let logits = tape.conv2d(src, hw, hb, 1, 0)?;
        let prob = tape.softmax_channels(logits)?;
        features.insert(head.name.clone(), prob);
        probs.push(prob);
    }
    Ok(ForwardOutputs {
        probs,
        trace: features,
    })
}

/// MIMO-FAN forward pass over a registered image pyramid. Returns one
/// 2-channel probability map per scale, ordered fine to coarse.
pub fn forward_mimofan<E: Element>(
    tape: &mut Tape<E>,
    vars: &BTreeMap<String, Var>,
    params: &mut ModelParams<E>,
    pyramid: &[Var],
    config: &NetworkConfig,
    mode: Mode,
) -> Result<ForwardOutputs> {
    config.validate()?;
    if config.arch != Arch::MimoFan {
        return Err(Error::Config(format!(
            "forward_mimofan called with arch {}",
            config.arch
        )));
    }
    if pyramid.len() != config.scales {
        return Err(Error::Config(format!(
            "pyramid has {} levels but the network expects {}",
            pyramid.len(),
            config.scales
        )));
    }
    let base = tape.value(pyramid[0]).shape();
    for (s, &level) in pyramid.iter().enumerate() {
        let shape = tape.value(level).shape();
        if shape.c != 1 {
            return Err(Error::Config(format!(
                "pyramid level {s} must be single-channel, got {shape}"
            )));
        }
        if shape.h != base.h >> s || shape.w != base.w >> s || shape.n != base.n {
            return Err(Error::Config(format!(
                "pyramid level {s} has shape {shape}, expected halving chain from {base}"
            )));
        }
    }
    run_plan(tape, vars, params, pyramid, config, mode)
}

/// Baseline forward pass (U-Net or ResU-Net) on a registered full-resolution
/// image. Returns a single full-resolution probability map.
pub fn forward_baseline<E: Element>(
    tape: &mut Tape<E>,
    vars: &BTreeMap<String, Var>,
    params: &mut ModelParams<E>,
    image: Var,
    config: &NetworkConfig,
    mode: Mode,
) -> Result<ForwardOutputs> {
    config.validate()?;
    if config.arch == Arch::MimoFan {
        return Err(Error::Config(
            "forward_baseline called with arch mimofan".into(),
        ));
    }
    let shape = tape.value(image).shape();
    let factor = 1usize << (config.required_scales() - 1);
    if shape.c != 1 || shape.h % factor != 0 || shape.w % factor != 0 {
        return Err(Error::Config(format!(
            "baseline input must be single-channel with spatial dims divisible by {factor}, got {shape}"
        )));
    }
    run_plan(tape, vars, params, &[image], config, mode)
}

/// Averages the two finest probability maps: `(p0 + upsample(p1)) / 2`.
/// Both inputs must be 2-channel softmax maps with `p1` at half the spatial
/// size of `p0`; the result stays softmax-normalized.
pub fn scale_fuse<E: Element>(p0: &Tensor<E>, p1: &Tensor<E>) -> Result<Tensor<E>> {
    let s0 = p0.shape();
    let s1 = p1.shape();
    if s0.c != 2 || s1.c != 2 {
        return Err(Error::dim(
            "channel",
            format!("scale_fuse expects 2-channel maps, got {s0} and {s1}"),
        ));
    }
    if s1.h * 2 != s0.h || s1.w * 2 != s0.w || s1.n != s0.n {
        return Err(Error::dim(
            "h",
            format!("scale_fuse expects {s1} to be half of {s0}"),
        ));
    }
    let up = ops::upsample2_bilinear(p1);
    Ok(ops::scale(&ops::add(p0, &up)?, E::from_f64_c(0.5)))
}

/// Per-voxel argmax of a 2-channel probability map into a binary mask.
/// Exact ties go to the background class.
pub fn predict_mask<E: Element>(prob: &Tensor<E>) -> Result<Tensor<E>> {
    let s = prob.shape();
    if s.c != 2 {
        return Err(Error::dim(
            "channel",
            format!("predict_mask expects a 2-channel map, got {s}"),
        ));
    }
    let mut mask = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    let plane = s.h * s.w;
    for n in 0..s.n {
        for p in 0..plane {
            let bg = prob.data()[prob.idx(n, 0, 0, 0) + p];
            let fg = prob.data()[prob.idx(n, 1, 0, 0) + p];
            if fg > bg {
                let i = mask.idx(n, 0, 0, 0) + p;
                mask.data_mut()[i] = E::one();
            }
        }
    }
    Ok(mask)
}

/// Inference convenience: runs the architecture recorded in `params` on one
/// image in eval mode and returns the per-scale probability maps (a single
/// map for baselines).
pub fn predict_probs<E: Element>(
    params: &mut ModelParams<E>,
    image: &Tensor<E>,
) -> Result<Vec<Tensor<E>>> {
    let config = params.config.clone();
    let mut tape = Tape::new();
    let vars = super::register_params(&mut tape, params);
    let outputs = match config.arch {
        Arch::MimoFan => {
            let pyramid = image_pyramid(image, config.scales)?;
            let levels = super::register_pyramid(&mut tape, &pyramid);
            forward_mimofan(&mut tape, &vars, params, &levels, &config, Mode::Eval)?
        }
        Arch::UNet | Arch::ResUNet => {
            let image = tape.leaf(image.clone(), false);
            forward_baseline(&mut tape, &vars, params, image, &config, Mode::Eval)?
        }
    };
    Ok(outputs
        .probs
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect())
}

/// Full inference for one image: probability map (with scale fusing if the
/// configuration enables it) and the binary mask derived from it.
pub fn predict_case<E: Element>(
    params: &mut ModelParams<E>,
    image: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let probs = predict_probs(params, image)?;
    let fused = if params.config.sf && params.config.arch == Arch::MimoFan && probs.len() >= 2 {
        scale_fuse(&probs[0], &probs[1])?
    } else {
        probs[0].clone()
    };
    let mask = predict_mask(&fused)?;
    Ok((fused, mask))
}
