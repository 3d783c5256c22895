//! Structural wiring tests for the cross-scale topology: the dense
//! connections must be exactly the extra concatenated channels (nothing
//! else changes), and gradient reach must follow the documented paths.

use std::collections::BTreeMap;

use mimofan::loss::{dps_loss, ClassWeights};
use mimofan::network::{self, Arch, Mode, ModelParams, NetworkConfig};
use mimofan::pyramid::{image_pyramid, label_pyramid};
use mimofan::tape::Tape;
use mimofan::tensor::{Shape, Tensor};

fn tiny_config(dcc: bool) -> NetworkConfig {
    NetworkConfig {
        scales: 3,
        base_filters: 2,
        dcc,
        arch: Arch::MimoFan,
        ..NetworkConfig::default()
    }
}

/// Channel width of scale `s` for base filters `f`.
fn c(f: usize, s: usize) -> usize {
    f << s.min(4)
}

/// Previous-depth (own-path) channel count feeding block `(d, s)`.
fn own_channels(f: usize, d: usize) -> impl Fn(usize) -> usize {
    move |s| if d == 1 { f } else { c(f, s) }
}

/// With the cross-scale kernel slices zeroed, a dcc=true forward must equal
/// the dcc=false forward that shares the own-path weights: the dense
/// connections are purely additive input channels.
#[test]
fn zeroed_cross_scale_slices_reproduce_dcc_off_forward() {
    let scales = 3;
    let f = 2;
    let plain = network::build::<f64>(&tiny_config(false), 31);
    let mut dense = network::build::<f64>(&tiny_config(true), 77);

    // shared depth-0 block and heads copy over verbatim
    for (name, tensor) in plain.iter() {
        if name.starts_with("enc.d0.shared") || name.starts_with("head.") {
            *dense.get_mut(name).unwrap() = tensor.clone();
        }
    }

    for d in 1..(2 * scales - 1) {
        let stage = if d < scales { "enc" } else { "dec" };
        let own = own_channels(f, d);
        for s in 0..scales {
            let block = format!("{stage}.d{d}.s{s}");
            let out_ch = c(f, s);
            let own_ch = own(s);

            // conv1: own slice from the plain model, cross slice zero
            let plain_w = plain.get(&format!("{block}.conv1.weight")).unwrap();
            let dense_w = dense.get_mut(&format!("{block}.conv1.weight")).unwrap();
            let in_total = dense_w.shape().c;
            for co in 0..out_ch {
                for ci in 0..in_total {
                    for kh in 0..3 {
                        for kw in 0..3 {
                            let v = if ci < own_ch {
                                plain_w.at(co, ci, kh, kw)
                            } else {
                                0.0
                            };
                            dense_w.set(co, ci, kh, kw, v);
                        }
                    }
                }
            }

            // projection: the plain model uses an identity skip when the
            // channel counts agree, so the dense model's projection must
            // restrict to identity on the own slice
            let dense_p = dense.get_mut(&format!("{block}.proj.weight")).unwrap();
            for co in 0..out_ch {
                for ci in 0..in_total {
                    dense_p.set(co, ci, 0, 0, 0.0);
                }
            }
            match plain.get(&format!("{block}.proj.weight")) {
                Some(plain_p) => {
                    let dense_p = dense.get_mut(&format!("{block}.proj.weight")).unwrap();
                    for co in 0..out_ch {
                        for ci in 0..own_ch {
                            dense_p.set(co, ci, 0, 0, plain_p.at(co, ci, 0, 0));
                        }
                    }
                }
                None => {
                    let dense_p = dense.get_mut(&format!("{block}.proj.weight")).unwrap();
                    for co in 0..out_ch {
                        dense_p.set(co, co, 0, 0, 1.0);
                    }
                }
            }

            // everything else in the block is shared verbatim
            for suffix in [
                "conv1.bias",
                "conv2.weight",
                "conv2.bias",
                "bn1.gamma",
                "bn1.beta",
                "bn2.gamma",
                "bn2.beta",
            ] {
                let src = plain.get(&format!("{block}.{suffix}")).unwrap().clone();
                *dense.get_mut(&format!("{block}.{suffix}")).unwrap() = src;
            }
        }
    }

    let image = Tensor::from_vec(
        Shape::new(1, 1, 16, 16),
        (0..256).map(|i| ((i * 7) % 23) as f64 / 23.0).collect(),
    )
    .unwrap();
    let forward = |params: &ModelParams<f64>, config: &NetworkConfig| -> Vec<Tensor<f64>> {
        let mut params = params.clone();
        let pyramid = image_pyramid(&image, config.scales).unwrap();
        let mut tape = Tape::new();
        let vars = network::register_params(&mut tape, &params);
        let levels = network::register_pyramid(&mut tape, &pyramid);
        let out =
            network::forward_mimofan(&mut tape, &vars, &mut params, &levels, config, Mode::Eval)
                .unwrap();
        out.probs.iter().map(|&v| tape.value(v).clone()).collect()
    };

    let plain_out = forward(&plain, &tiny_config(false));
    let dense_out = forward(&dense, &tiny_config(true));
    assert_eq!(plain_out.len(), dense_out.len());
    for (a, b) in plain_out.iter().zip(&dense_out) {
        assert!(
            a.max_abs_diff(b).unwrap() < 1e-10,
            "outputs diverge by {}",
            a.max_abs_diff(b).unwrap()
        );
    }
}

/// Without cross-scale connections, the loss on one head reaches only the
/// shared depth-0 block, that scale's own blocks, and that head.
#[test]
fn gradient_sparsity_follows_scale_paths_without_dcc() {
    let config = tiny_config(false);
    let mut params = network::build::<f64>(&config, 5);
    let image = Tensor::from_vec(
        Shape::new(1, 1, 16, 16),
        (0..256).map(|i| ((i * 13) % 31) as f64 / 31.0).collect(),
    )
    .unwrap();
    let mut mask = Tensor::zeros(Shape::new(1, 1, 16, 16));
    for y in 4..12 {
        for x in 4..12 {
            mask.set(0, 0, y, x, 1.0);
        }
    }
    let images = image_pyramid(&image, config.scales).unwrap();
    let labels = label_pyramid(&mask, config.scales).unwrap();

    let target_scale = 1;
    let mut tape = Tape::new();
    let vars: BTreeMap<String, _> = network::register_params(&mut tape, &params);
    let levels = network::register_pyramid(&mut tape, &images);
    let out =
        network::forward_mimofan(&mut tape, &vars, &mut params, &levels, &config, Mode::Train)
            .unwrap();
    // supervise only the target scale's head
    let single_labels = mimofan::pyramid::ScalePyramid {
        levels: vec![labels.levels[target_scale].clone()],
        kind: mimofan::pyramid::PyramidKind::Label,
    };
    let loss = dps_loss(
        &mut tape,
        &out.probs[target_scale..=target_scale],
        &single_labels,
        ClassWeights::default(),
    )
    .unwrap();
    tape.backward(loss).unwrap();

    let grad_norm = |name: &str| -> f64 {
        tape.grad(vars[name])
            .map(|g| g.data().iter().map(|v| v.abs()).fold(0.0, f64::max))
            .unwrap_or(0.0)
    };

    // the shared first-level block feeds every scale, including this one
    assert!(grad_norm("enc.d0.shared.conv1.weight") > 0.0);
    // the supervised scale's own path carries gradient
    assert!(grad_norm(&format!("enc.d1.s{target_scale}.conv1.weight")) > 0.0);
    assert!(grad_norm(&format!("head.s{target_scale}.weight")) > 0.0);
    // other scales' blocks and heads are unreachable
    for s in [0usize, 2] {
        for name in [
            format!("enc.d1.s{s}.conv1.weight"),
            format!("dec.d4.s{s}.conv2.weight"),
            format!("head.s{s}.weight"),
        ] {
            assert_eq!(grad_norm(&name), 0.0, "unexpected gradient at {name}");
        }
    }
}

/// With dense connections on, perturbing the shared depth-0 weights changes
/// the depth-0 features at every scale.
#[test]
fn shared_block_perturbation_reaches_all_scales() {
    let config = tiny_config(true);
    let params = network::build::<f64>(&config, 6);
    let image = Tensor::from_vec(
        Shape::new(1, 1, 16, 16),
        (0..256).map(|i| ((i * 11) % 29) as f64 / 29.0).collect(),
    )
    .unwrap();
    let pyramid = image_pyramid(&image, config.scales).unwrap();

    let depth0 = |params: &ModelParams<f64>| -> Vec<Tensor<f64>> {
        let mut params = params.clone();
        let mut tape = Tape::new();
        let vars = network::register_params(&mut tape, &params);
        let levels = network::register_pyramid(&mut tape, &pyramid);
        let out =
            network::forward_mimofan(&mut tape, &vars, &mut params, &levels, &config, Mode::Eval)
                .unwrap();
        (0..config.scales)
            .map(|s| tape.value(out.trace[&format!("enc.d0.s{s}")]).clone())
            .collect()
    };

    let base = depth0(&params);
    let mut perturbed = params.clone();
    perturbed
        .get_mut("enc.d0.shared.conv1.weight")
        .unwrap()
        .data_mut()[0] += 0.25;
    let moved = depth0(&perturbed);
    for (s, (a, b)) in base.iter().zip(&moved).enumerate() {
        assert!(
            a.max_abs_diff(b).unwrap() > 1e-9,
            "scale {s} depth-0 feature unchanged by shared-weight perturbation"
        );
    }
}
