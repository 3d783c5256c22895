//! Finite-difference verification of the gradient engine.
//!
//! Every differentiable primitive is checked against central finite
//! differences in `f64` (the `verify64` mode), over randomized small shapes
//! and at least 20 seeds per op. The error measure is
//! `max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8)`, compared against
//! [`PRIMITIVE_TOLERANCE`]. The end-to-end check differentiates the full
//! deep-pyramid-supervision loss of a tiny network through every layer and
//! samples parameter coordinates from each tensor.
//!
//! `mimofan gradcheck` runs this suite from the command line and exits
//! nonzero if any check fails.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{dps_loss, ClassWeights};
use crate::network::{self, Arch, Mode, NetworkConfig};
use crate::ops;
use crate::pyramid::{image_pyramid, label_pyramid};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Relative-error bound for single primitives.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for the end-to-end loss gradient.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Central-difference step for primitives.
pub const PRIMITIVE_EPSILON: f64 = 1e-4;
/// Central-difference step for the end-to-end check.
pub const END_TO_END_EPSILON: f64 = 1e-5;
/// Seeds exercised per check.
pub const SEEDS: u64 = 20;
/// Resolution floor of the end-to-end check. A central difference of an
/// O(1) loss carries ~2e-11 of f64 roundoff at the step size above, so
/// gradient coordinates where both routes sit below this floor are
/// numerically zero on both sides and are compared as such.
pub const END_TO_END_ZERO_FLOOR: f64 = 1e-8;

/// Outcome of one named check, aggregated over its seeds.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<24} max_rel_err {:.3e} (tolerance {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance
        )
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..shape.len()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn rand_tensor_off_origin(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let data = (0..shape.len())
        .map(|_| {
            let mag = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn rand_small_shape(rng: &mut ChaCha8Rng, even_spatial: bool) -> Shape {
    let mut h = rng.gen_range(1..=6);
    let mut w = rng.gen_range(1..=6);
    if even_spatial {
        h = (h / 2).max(1) * 2;
        w = (w / 2).max(1) * 2;
    }
    Shape::new(rng.gen_range(1..=4), rng.gen_range(1..=4), h, w)
}

/// Checks one differentiable construction against central differences.
///
/// `build` reconstructs the graph from leaf tensors on a fresh tape and
/// returns the scalar loss; it must be deterministic in its inputs. Returns
/// the worst relative error over all leaf elements.
pub fn check_scalar_fn(
    inputs: &[Tensor<f64>],
    epsilon: f64,
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::with_finite_checks();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    // analytic gradients
    let mut tape = Tape::with_finite_checks();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).shape() != Shape::scalar() {
        return Err(Error::Contract("gradcheck target must be scalar".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + epsilon;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - epsilon;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(rel_err(analytic[ti].data()[ei], numeric));
        }
    }
    Ok(worst)
}

fn report(name: &str, tolerance: f64, result: Result<f64>) -> CheckReport {
    match result {
        Ok(max_rel_err) => CheckReport {
            name: name.to_string(),
            max_rel_err,
            tolerance,
            passed: max_rel_err < tolerance,
        },
        Err(e) => {
            eprintln!("gradcheck {name}: {e}");
            CheckReport {
                name: name.to_string(),
                max_rel_err: f64::INFINITY,
                tolerance,
                passed: false,
            }
        }
    }
}

fn check_primitive(
    name: &str,
    make: &dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>),
) -> CheckReport {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9 ^ seed);
        let (inputs, build) = make(&mut rng);
        match check_scalar_fn(&inputs, PRIMITIVE_EPSILON, build.as_ref()) {
            Ok(err) => worst = worst.max(err),
            Err(e) => return report(name, PRIMITIVE_TOLERANCE, Err(e)),
        }
    }
    report(name, PRIMITIVE_TOLERANCE, Ok(worst))
}

/// Wraps an op output into a scalar via a random positive coefficient dot
/// product, so every output element influences the loss.
fn coeffs_for(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    rand_tensor(rng, shape, 0.5, 1.5)
}

type MakeFn = dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn primitive_checks() -> Vec<(&'static str, Box<MakeFn>)> {
    let mut checks: Vec<(&'static str, Box<MakeFn>)> = Vec::new();

    checks.push(("conv2d", Box::new(|rng: &mut ChaCha8Rng| {
        let cout = rng.gen_range(1..=3);
        let k = if rng.gen_bool(0.3) { 1 } else { 3 };
        let stride = if rng.gen_bool(0.8) { 1 } else { 2 };
        let pad = if k == 3 { rng.gen_range(0..=1) } else { 0 };
        let x_shape = Shape::new(rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(3..=6), rng.gen_range(3..=6));
        let x = rand_tensor(rng, x_shape, -1.0, 1.0);
        let w = rand_tensor(rng, Shape::new(cout, x_shape.c, k, k), -1.0, 1.0);
        let b = rand_tensor(rng, Shape::new(1, cout, 1, 1), -0.5, 0.5);
        let oh = (x_shape.h + 2 * pad - k) / stride + 1;
        let ow = (x_shape.w + 2 * pad - k) / stride + 1;
        let coeffs = coeffs_for(rng, Shape::new(x_shape.n, cout, oh, ow));
        let inputs = vec![x, w, b];
        let build = Box::new(move |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.conv2d(vars[0], vars[1], vars[2], stride, pad)?;
            tape.weighted_sum(y, coeffs.clone())
        });
        (inputs, build as Box<_>)
    })));

    checks.push(("avg_pool2", Box::new(|rng: &mut ChaCha8Rng| {
        let shape = rand_small_shape(rng, true);
        let x = rand_tensor(rng, shape, -1.0, 1.0);
        let coeffs = coeffs_for(rng, Shape::new(shape.n, shape.c, shape.h / 2, shape.w / 2));
        (vec![x], Box::new(move |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.avg_pool2(vars[0])?;
            tape.weighted_sum(y, coeffs.clone())
        }) as Box<_>)
    })));

    checks.push(("upsample2_bilinear", Box::new(|rng: &mut ChaCha8Rng| {
        let shape = rand_small_shape(rng, false);
        let x = rand_tensor(rng, shape, -1.0, 1.0);
        let coeffs = coeffs_for(rng, Shape::new(shape.n, shape.c, shape.h * 2, shape.w * 2));
        (vec![x], Box::new(move |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.upsample2_bilinear(vars[0])?;
            tape.weighted_sum(y, coeffs.clone())
        }) as Box<_>)
    })));

    checks.push(("batch_norm_train", Box::new(|rng: &mut ChaCha8Rng| {
        // at least two elements per channel so the variance is generic
        let shape = Shape::new(rng.gen_range(2..=4), rng.gen_range(1..=4), rng.gen_range(2..=6), rng.gen_range(2..=6));
        let x = rand_tensor(rng, shape, -2.0, 2.0);
        let gamma = rand_tensor(rng, Shape::new(1, shape.c, 1, 1), 0.5, 1.5);
        let beta = rand_tensor(rng, Shape::new(1, shape.c, 1, 1), -0.5, 0.5);
        let coeffs = coeffs_for(rng, shape);
        (vec![x, gamma, beta], Box::new(move |tape: &mut Tape<f64>, vars: &[Var]| {
            let (y, _) = tape.batch_norm_train(vars[0], vars[1], vars[2])?;
            tape.weighted_sum(y, coeffs.clone())
        }) as Box<_>)
    })));

    checks.push(("batch_norm_eval", Box::new(|rng: &mut ChaCha8Rng| {
        let shape = rand_small_shape(rng, false);
        let x = rand_tensor(rng, shape, -2.0, 2.0);
        let gamma = rand_tensor(rng, Shape::new(1, shape.c, 1, 1), 0.5, 1.5);
        let beta = rand_tensor(rng, Shape::new(1, shape.c, 1, 1), -0.5, 0.5);
        let mean: Vec<f64> = (0..shape.c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..shape.c).map(|_| rng.gen_range(0.2..2.0)).collect();
        let coeffs = coeffs_for(rng, shape);
        (vec![x, gamma, beta], Box::new(move |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.batch_norm_eval(vars[0], vars[1], vars[2], mean.clone(), var.clone())?;
            tape.weighted_sum(y, coeffs.clone())
        }) as Box<_>)
    })));

    checks.push(("relu", Box::new(|rng: &mut ChaCha8Rng| {
        let shape = rand_small_shape(rng, false);
        let x = rand_tensor_off_origin(rng, shape);
        let coeffs = coeffs_for(rng, shape);
        (vec![x], Box::new(move |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.relu(vars[0])?;
            tape.weighted_sum(y, coeffs.clone())
        }) as Box<_>)
    })));

    checks.push(("add", Box::new(|rng: &mut ChaCha8Rng| {
        let shape = rand_small_shape(rng, false);
        let a = rand_tensor(rng, shape, -1.0, 1.0);
        let b = rand_tensor(rng, shape, -1.0, 1.0);
        let coeffs = coeffs_for(rng, shape);
        (vec![a, b], Box::new(move |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.add(vars[0], vars[1])?;
            tape.weighted_sum(y, coeffs.clone())
        }) as Box<_>)
    })));

    checks.push(("scale", Box::new(|rng: &mut ChaCha8Rng| {
        let shape = rand_small_shape(rng, false);
        let x = rand_tensor(rng, shape, -1.0, 1.0);
        let factor = rng.gen_range(-2.0..2.0);
        let coeffs = coeffs_for(rng, shape);
        (vec![x], Box::new(move |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.scale(vars[0], factor)?;
            tape.weighted_sum(y, coeffs.clone())
        }) as Box<_>)
    })));

    checks.push(("concat_channels", Box::new(|rng: &mut ChaCha8Rng| {
        let base = rand_small_shape(rng, false);
        let c2 = rng.gen_range(1..=3);
        let a = rand_tensor(rng, base, -1.0, 1.0);
        let b = rand_tensor(rng, Shape::new(base.n, c2, base.h, base.w), -1.0, 1.0);
        let coeffs = coeffs_for(rng, Shape::new(base.n, base.c + c2, base.h, base.w));
        (vec![a, b], Box::new(move |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.concat_channels(&[vars[0], vars[1]])?;
            tape.weighted_sum(y, coeffs.clone())
        }) as Box<_>)
    })));

    checks.push(("softmax_channels", Box::new(|rng: &mut ChaCha8Rng| {
        let shape = Shape::new(rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(1..=5), rng.gen_range(1..=5));
        let x = rand_tensor(rng, shape, -2.0, 2.0);
        let coeffs = coeffs_for(rng, shape);
        (vec![x], Box::new(move |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.softmax_channels(vars[0])?;
            tape.weighted_sum(y, coeffs.clone())
        }) as Box<_>)
    })));

    checks.push(("wce_level", Box::new(|rng: &mut ChaCha8Rng| {
        let shape = Shape::new(rng.gen_range(1..=3), 2, rng.gen_range(2..=5), rng.gen_range(2..=5));
        // strictly positive probabilities away from the clamp floor
        let logits = rand_tensor(rng, shape, -1.5, 1.5);
        let probs = ops::softmax_channels(&logits);
        let labels_data: Vec<f64> = (0..shape.n * shape.h * shape.w)
            .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
            .collect();
        let labels =
            Tensor::from_vec(Shape::new(shape.n, 1, shape.h, shape.w), labels_data).unwrap();
        (vec![probs], Box::new(move |tape: &mut Tape<f64>, vars: &[Var]| {
            tape.wce_level(vars[0], labels.clone(), 0.2, 1.2)
        }) as Box<_>)
    })));

    checks.push(("scalar_mean", Box::new(|rng: &mut ChaCha8Rng| {
        let a = Tensor::scalar(rng.gen_range(-1.0..1.0));
        let b = Tensor::scalar(rng.gen_range(-1.0..1.0));
        let c = Tensor::scalar(rng.gen_range(-1.0..1.0));
        (vec![a, b, c], Box::new(move |tape: &mut Tape<f64>, vars: &[Var]| {
            tape.scalar_mean(vars)
        }) as Box<_>)
    })));

    checks.push(("sum_all", Box::new(|rng: &mut ChaCha8Rng| {
        let shape = rand_small_shape(rng, false);
        let x = rand_tensor(rng, shape, -1.0, 1.0);
        (vec![x], Box::new(move |tape: &mut Tape<f64>, vars: &[Var]| {
            tape.sum_all(vars[0])
        }) as Box<_>)
    })));

    checks
}

/// End-to-end check: the deep-pyramid-supervision loss of a tiny MIMO-FAN
/// differentiated with respect to every parameter tensor, compared against
/// central differences on sampled coordinates (all tensors are covered; up
/// to four coordinates are drawn per tensor per seed).
pub fn check_end_to_end(seed: u64) -> Result<f64> {
    let config = NetworkConfig {
        scales: 3,
        base_filters: 2,
        arch: Arch::MimoFan,
        ..NetworkConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xabcd ^ seed);
    let image = rand_tensor(&mut rng, Shape::new(1, 1, 16, 16), 0.0, 1.0);
    let mask_data: Vec<f64> = {
        // a centered square so both classes appear at all scales
        let mut m = vec![0.0; 16 * 16];
        for y in 4..12 {
            for x in 4..12 {
                m[y * 16 + x] = 1.0;
            }
        }
        m
    };
    let mask = Tensor::from_vec(Shape::new(1, 1, 16, 16), mask_data)?;
    let images = image_pyramid(&image, config.scales)?;
    let labels = label_pyramid(&mask, config.scales)?;

    let params = network::build::<f64>(&config, 1234 + seed);

    let eval = |params: &network::ModelParams<f64>| -> Result<f64> {
        let mut params = params.clone();
        let mut tape = Tape::new();
        let vars = network::register_params(&mut tape, &params);
        let pyr = network::register_pyramid(&mut tape, &images);
        let out = network::forward_mimofan(&mut tape, &vars, &mut params, &pyr, &config, Mode::Train)?;
        let loss = dps_loss(&mut tape, &out.probs, &labels, ClassWeights::default())?;
        tape.value(loss).item()
    };

    // analytic gradients for every trainable tensor
    let mut work = params.clone();
    let mut tape = Tape::new();
    let vars = network::register_params(&mut tape, &params);
    let pyr = network::register_pyramid(&mut tape, &images);
    let out = network::forward_mimofan(&mut tape, &vars, &mut work, &pyr, &config, Mode::Train)?;
    let loss = dps_loss(&mut tape, &out.probs, &labels, ClassWeights::default())?;
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut perturbed = params.clone();
    let names: Vec<String> = params.trainable_names();
    for name in names {
        let var = vars[&name];
        let analytic = tape.grad_or_zeros(var);
        let len = analytic.len();
        let picks = len.min(4);
        for _ in 0..picks {
            let ei = rng.gen_range(0..len);
            let orig = params.get(&name).unwrap().data()[ei];
            perturbed.get_mut(&name).unwrap().data_mut()[ei] = orig + END_TO_END_EPSILON;
            let plus = eval(&perturbed)?;
            perturbed.get_mut(&name).unwrap().data_mut()[ei] = orig - END_TO_END_EPSILON;
            let minus = eval(&perturbed)?;
            let numeric = (plus - minus) / (2.0 * END_TO_END_EPSILON);
            // Richardson consistency probe: a second estimate at half the
            // step. The two only disagree when the loss is not locally
            // smooth (a ReLU kink inside the stencil), where central
            // differences measure nothing; such coordinates are skipped.
            perturbed.get_mut(&name).unwrap().data_mut()[ei] = orig + END_TO_END_EPSILON / 2.0;
            let plus_half = eval(&perturbed)?;
            perturbed.get_mut(&name).unwrap().data_mut()[ei] = orig - END_TO_END_EPSILON / 2.0;
            let minus_half = eval(&perturbed)?;
            perturbed.get_mut(&name).unwrap().data_mut()[ei] = orig;
            let numeric_half = (plus_half - minus_half) / END_TO_END_EPSILON;
            if rel_err(numeric_half, numeric) > 1e-4 {
                continue;
            }
            let analytic = analytic.data()[ei];
            if analytic.abs().max(numeric.abs()) < END_TO_END_ZERO_FLOOR {
                continue;
            }
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    Ok(worst)
}

/// Runs the whole verification suite, optionally filtered by op name
/// substring. Prints one line per check and returns the reports.
pub fn run(filter: Option<&str>) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    for (name, make) in primitive_checks() {
        if let Some(f) = filter {
            if !name.contains(f) {
                continue;
            }
        }
        let rep = check_primitive(name, make.as_ref());
        println!("{rep}");
        reports.push(rep);
    }
    let e2e_name = "dps_loss_end_to_end";
    if filter.map_or(true, |f| e2e_name.contains(f)) {
        let mut worst = 0.0f64;
        let mut failed = None;
        for seed in 0..SEEDS {
            match check_end_to_end(seed) {
                Ok(err) => worst = worst.max(err),
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        let rep = match failed {
            None => report(e2e_name, END_TO_END_TOLERANCE, Ok(worst)),
            Some(e) => report(e2e_name, END_TO_END_TOLERANCE, Err(e)),
        };
        println!("{rep}");
        reports.push(rep);
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    // The full suite runs in the acceptance tests; here a cheap smoke pass
    // over two representative primitives guards against regressions in the
    // checker itself.
    #[test]
    fn conv_gradcheck_smoke() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
        let w = rand_tensor(&mut rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
        let b = rand_tensor(&mut rng, Shape::new(1, 2, 1, 1), -0.5, 0.5);
        let coeffs = coeffs_for(&mut rng, Shape::new(1, 2, 4, 4));
        let err = check_scalar_fn(&[x, w, b], PRIMITIVE_EPSILON, &move |tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], vars[2], 1, 1)?;
            tape.weighted_sum(y, coeffs.clone())
        })
        .unwrap();
        assert!(err < PRIMITIVE_TOLERANCE, "rel err {err}");
    }

    #[test]
    fn softmax_gradcheck_smoke() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, Shape::new(1, 3, 2, 2), -2.0, 2.0);
        let coeffs = coeffs_for(&mut rng, Shape::new(1, 3, 2, 2));
        let err = check_scalar_fn(&[x], PRIMITIVE_EPSILON, &move |tape, vars| {
            let y = tape.softmax_channels(vars[0])?;
            tape.weighted_sum(y, coeffs.clone())
        })
        .unwrap();
        assert!(err < PRIMITIVE_TOLERANCE, "rel err {err}");
    }
}
