//! Network topologies: MIMO-FAN plus U-Net and ResU-Net baselines.
//!
//! All three share the residual/plain block of [`BlockSpec`]: two 3x3
//! convolutions (pad 1, stride 1), each followed by batch norm and ReLU,
//! with an optional skip from block input to block output (1x1 projection
//! when the channel counts differ).
//!
//! # MIMO-FAN wiring
//!
//! The network is a grid of blocks over `2S-1` depth levels and `S` scales,
//! where scale `s` keeps spatial size `(h/2^s, w/2^s)` throughout:
//!
//! * depth 0 is a single block with shared weights, applied to every level
//!   of the input pyramid;
//! * encoder depths `1..S-1`: the block at `(d, s)` consumes its own scale's
//!   previous-depth feature concatenated (when dense cross-scale connections
//!   are enabled) with the previous-depth features of every finer scale,
//!   average-pooled down to size — information flows top-down, fine to
//!   coarse;
//! * decoder depths `S..2S-2`: mirrored bottom-up — the block consumes its
//!   own path plus every coarser scale's previous-depth feature, bilinearly
//!   upsampled to size;
//! * each scale ends in a 1x1 convolution head and a channel softmax.
//!
//! Because every connection advances depth by exactly one, each
//! input-to-output path passes through `2S-1` blocks and one head: 19
//! convolution layers at the default `S = 5`, matching the 19-layer U-Net
//! and ResU-Net baselines.
//!
//! The filter schedule ties channel width to scale: a feature map at scale
//! `s` has `F * 2^min(s,4)` channels, the same widths the baselines use at
//! equal spatial resolution.

mod forward;
pub mod graph;

pub use forward::{
    forward_baseline, forward_mimofan, predict_case, predict_mask, predict_probs, scale_fuse,
    ForwardOutputs, Mode,
};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::pyramid::ScalePyramid;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Architecture selector.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Arch {
    MimoFan,
    UNet,
    ResUNet,
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::MimoFan => "mimofan",
            Arch::UNet => "unet",
            Arch::ResUNet => "resunet",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Arch> {
        match s {
            "mimofan" => Ok(Arch::MimoFan),
            "unet" => Ok(Arch::UNet),
            "resunet" => Ok(Arch::ResUNet),
            other => Err(Error::Usage(format!(
                "unknown architecture `{other}` (expected mimofan, unet, or resunet)"
            ))),
        }
    }
}

/// Hyper-parameters of one architecture variant.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct NetworkConfig {
    /// Number of pyramid scales `S`.
    pub scales: usize,
    /// Base filter count `F`; scale `s` uses `F * 2^min(s,4)` channels.
    pub base_filters: usize,
    /// Output classes; fixed at 2 (background, foreground).
    pub classes: usize,
    /// Dense cross-scale connections toggle (MIMO-FAN only).
    pub dcc: bool,
    /// Deep pyramid supervision toggle (MIMO-FAN only). Side heads are
    /// always built; this controls whether they contribute to the loss.
    pub dps: bool,
    /// Scale fusing toggle: average the two finest probability maps at
    /// inference.
    pub sf: bool,
    pub arch: Arch,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            scales: 5,
            base_filters: 16,
            classes: 2,
            dcc: true,
            dps: true,
            sf: true,
            arch: Arch::MimoFan,
        }
    }
}

/// Number of levels in the fixed-depth U-Net / ResU-Net baselines.
pub const BASELINE_LEVELS: usize = 5;

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(Error::Config("scales must be >= 2".into()));
        }
        if self.base_filters < 1 {
            return Err(Error::Config("base_filters must be >= 1".into()));
        }
        if self.classes != 2 {
            return Err(Error::Config("classes is fixed at 2".into()));
        }
        Ok(())
    }

    /// Channel width at scale `s`: `F * 2^min(s,4)`.
    pub fn channels_at(&self, scale: usize) -> usize {
        self.base_filters << scale.min(4)
    }

    /// Pyramid depth the input must support: the baselines always pool
    /// down `BASELINE_LEVELS - 1` times, MIMO-FAN `scales - 1` times.
    pub fn required_scales(&self) -> usize {
        match self.arch {
            Arch::MimoFan => self.scales,
            Arch::UNet | Arch::ResUNet => BASELINE_LEVELS,
        }
    }

    /// Short human-readable tag for table rows and file names, e.g.
    /// `mimofan_dcc_dps_sf` or `unet`.
    pub fn row_label(&self) -> String {
        match self.arch {
            Arch::UNet => "unet".into(),
            Arch::ResUNet => "resunet".into(),
            Arch::MimoFan => {
                let mut label = String::from("mimofan");
                if self.dcc {
                    label.push_str("_dcc");
                }
                if self.dps {
                    label.push_str("_dps");
                }
                if self.sf {
                    label.push_str("_sf");
                }
                label
            }
        }
    }

    /// Canonical single-line text form, stable across runs; the checkpoint
    /// format embeds this verbatim.
    pub fn canonical_text(&self) -> String {
        format!(
            "arch={};base_filters={};classes={};dcc={};dps={};scales={};sf={}",
            self.arch, self.base_filters, self.classes, self.dcc, self.dps, self.scales, self.sf
        )
    }

    pub fn from_canonical_text(text: &str) -> Result<NetworkConfig> {
        let mut cfg = NetworkConfig::default();
        for field in text.split(';') {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config field `{field}`")))?;
            let parse_bool = |v: &str| -> Result<bool> {
                v.parse::<bool>()
                    .map_err(|_| Error::Config(format!("bad boolean `{v}` for `{key}`")))
            };
            let parse_usize = |v: &str| -> Result<usize> {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad integer `{v}` for `{key}`")))
            };
            match key {
                "arch" => cfg.arch = value.parse()?,
                "base_filters" => cfg.base_filters = parse_usize(value)?,
                "classes" => cfg.classes = parse_usize(value)?,
                "dcc" => cfg.dcc = parse_bool(value)?,
                "dps" => cfg.dps = parse_bool(value)?,
                "scales" => cfg.scales = parse_usize(value)?,
                "sf" => cfg.sf = parse_bool(value)?,
                other => return Err(Error::Config(format!("unknown config key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// topology plan
// ---------------------------------------------------------------------------

/// One set of block weights: two 3x3 convs with batch norm, and an optional
/// 1x1 projection on the skip when `in_ch != out_ch`.
#[derive(Clone, Debug)]
pub(crate) struct BlockWeights {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub residual: bool,
}

impl BlockWeights {
    pub fn needs_projection(&self) -> bool {
        self.residual && self.in_ch != self.out_ch
    }
}

/// Where a block application draws one of its inputs from.
#[derive(Clone, Debug)]
pub(crate) enum Feed {
    /// Input pyramid level `s`.
    Pyramid(usize),
    /// Output of an earlier application, pooled `pool` times then upsampled
    /// `up` times (at most one of the two is nonzero).
    App { key: String, pool: usize, up: usize },
}

/// One execution of a block at a grid position. Shared weights appear in
/// several applications; batch-norm running statistics are per application
/// (keyed by `stats_key`).
#[derive(Clone, Debug)]
pub(crate) struct BlockApp {
    pub key: String,
    pub weights: usize,
    pub stats_key: String,
    pub feeds: Vec<Feed>,
}

/// A 1x1 convolution head plus channel softmax on top of an application.
#[derive(Clone, Debug)]
pub(crate) struct HeadDef {
    pub name: String,
    pub in_ch: usize,
    pub src_key: String,
}

/// The complete execution plan for one architecture.
#[derive(Clone, Debug)]
pub(crate) struct Plan {
    pub weights: Vec<BlockWeights>,
    pub apps: Vec<BlockApp>,
    pub heads: Vec<HeadDef>,
}

pub(crate) fn plan(config: &NetworkConfig) -> Plan {
    match config.arch {
        Arch::MimoFan => plan_mimofan(config),
        Arch::UNet | Arch::ResUNet => plan_baseline(config),
    }
}

fn plan_mimofan(config: &NetworkConfig) -> Plan {
    let s_count = config.scales;
    let f = config.base_filters;
    let c = |s: usize| config.channels_at(s);
    let mut weights = Vec::new();
    let mut apps = Vec::new();

    // depth 0: one shared block, applied to every pyramid level
    let shared = BlockWeights {
        name: "enc.d0.shared".into(),
        in_ch: 1,
        out_ch: f,
        residual: true,
    };
    weights.push(shared);
    for s in 0..s_count {
        apps.push(BlockApp {
            key: format!("enc.d0.s{s}"),
            weights: 0,
            stats_key: format!("enc.d0.shared.s{s}"),
            feeds: vec![Feed::Pyramid(s)],
        });
    }

    // computes the previous-depth channel width of scale `s` at depth `d`
    let prev_ch = |d: usize, s: usize| if d == 1 { f } else { c(s) };

    for d in 1..(2 * s_count - 1) {
        let encoder = d < s_count;
        let stage = if encoder { "enc" } else { "dec" };
        for s in 0..s_count {
            let mut feeds = vec![Feed::App {
                key: format!(
                    "{}.d{}.s{s}",
                    if d - 1 < s_count { "enc" } else { "dec" },
                    d - 1
                ),
                pool: 0,
                up: 0,
            }];
            let mut in_ch = prev_ch(d, s);
            if config.dcc {
                let others: Vec<usize> = if encoder {
                    (0..s).collect()
                } else {
                    (s + 1..s_count).collect()
                };
                for other in others {
                    feeds.push(Feed::App {
                        key: format!(
                            "{}.d{}.s{other}",
                            if d - 1 < s_count { "enc" } else { "dec" },
                            d - 1
                        ),
                        pool: if encoder { s - other } else { 0 },
                        up: if encoder { 0 } else { other - s },
                    });
                    in_ch += prev_ch(d, other);
                }
            }
            let name = format!("{stage}.d{d}.s{s}");
            weights.push(BlockWeights {
                name: name.clone(),
                in_ch,
                out_ch: c(s),
                residual: true,
            });
            apps.push(BlockApp {
                key: name.clone(),
                weights: weights.len() - 1,
                stats_key: name,
                feeds,
            });
        }
    }

    let last = 2 * s_count - 2;
    let heads = (0..s_count)
        .map(|s| HeadDef {
            name: format!("head.s{s}"),
            in_ch: c(s),
            src_key: format!("dec.d{last}.s{s}"),
        })
        .collect();

    Plan { weights, apps, heads }
}

fn plan_baseline(config: &NetworkConfig) -> Plan {
    let residual = config.arch == Arch::ResUNet;
    let c = |l: usize| config.channels_at(l);
    let mut weights = Vec::new();
    let mut apps = Vec::new();

    for l in 0..BASELINE_LEVELS {
        let in_ch = if l == 0 { 1 } else { c(l - 1) };
        let name = format!("enc.l{l}");
        weights.push(BlockWeights {
            name: name.clone(),
            in_ch,
            out_ch: c(l),
            residual,
        });
        let feeds = if l == 0 {
            vec![Feed::Pyramid(0)]
        } else {
            vec![Feed::App {
                key: format!("enc.l{}", l - 1),
                pool: 1,
                up: 0,
            }]
        };
        apps.push(BlockApp {
            key: name.clone(),
            weights: weights.len() - 1,
            stats_key: name,
            feeds,
        });
    }

    for l in (0..BASELINE_LEVELS - 1).rev() {
        let prev = if l == BASELINE_LEVELS - 2 {
            format!("enc.l{}", BASELINE_LEVELS - 1)
        } else {
            format!("dec.l{}", l + 1)
        };
        let name = format!("dec.l{l}");
        weights.push(BlockWeights {
            name: name.clone(),
            in_ch: c(l + 1) + c(l),
            out_ch: c(l),
            residual,
        });
        apps.push(BlockApp {
            key: name.clone(),
            weights: weights.len() - 1,
            stats_key: name.clone(),
            feeds: vec![
                Feed::App { key: prev, pool: 0, up: 1 },
                Feed::App { key: format!("enc.l{l}"), pool: 0, up: 0 },
            ],
        });
    }

    let heads = vec![HeadDef {
        name: "head".into(),
        in_ch: c(0),
        src_key: "dec.l0".into(),
    }];

    Plan { weights, apps, heads }
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

const STAT_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

/// True for batch-norm running statistics, which are saved state but not
/// trained.
pub fn is_running_stat(name: &str) -> bool {
    STAT_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// Named parameter set for one architecture variant. Keys are layer paths
/// like `enc.d2.s1.conv1.weight`; batch-norm running statistics live in the
/// same map under `.running_mean` / `.running_var` names.
#[derive(Clone, Debug)]
pub struct ModelParams<E: Element> {
    pub config: NetworkConfig,
    tensors: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> ModelParams<E> {
    pub fn new(config: NetworkConfig) -> ModelParams<E> {
        ModelParams {
            config,
            tensors: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.tensors.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor<E>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<E>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|n| !is_running_stat(n))
            .cloned()
            .collect()
    }

    /// Total number of trainable scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| !is_running_stat(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Converts every tensor to another precision.
    pub fn cast<T: Element>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// He-style initialization: conv weights are zero-mean normals with
/// `std = sqrt(2 / fan_in)`, biases and batch-norm shifts zero, batch-norm
/// scales one. Fully determined by `(config, seed)`.
pub fn build<E: Element>(config: &NetworkConfig, seed: u64) -> ModelParams<E> {
    config.validate().expect("invalid network configuration");
    let plan = plan(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new(config.clone());

    let conv = |params: &mut ModelParams<E>,
                    rng: &mut ChaCha8Rng,
                    name: String,
                    cout: usize,
                    cin: usize,
                    k: usize,
                    bias: bool| {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let shape = Shape::new(cout, cin, k, k);
        let data = (0..shape.len())
            .map(|_| E::from_f64_c(normal.sample(rng)))
            .collect();
        params.insert(
            format!("{name}.weight"),
            Tensor::from_vec(shape, data).expect("init shape"),
        );
        if bias {
            params.insert(
                format!("{name}.bias"),
                Tensor::zeros(Shape::new(1, cout, 1, 1)),
            );
        }
    };

    for block in &plan.weights {
        conv(&mut params, &mut rng, format!("{}.conv1", block.name), block.out_ch, block.in_ch, 3, true);
        conv(&mut params, &mut rng, format!("{}.conv2", block.name), block.out_ch, block.out_ch, 3, true);
        if block.needs_projection() {
            conv(&mut params, &mut rng, format!("{}.proj", block.name), block.out_ch, block.in_ch, 1, false);
        }
        for bn in ["bn1", "bn2"] {
            params.insert(
                format!("{}.{bn}.gamma", block.name),
                Tensor::full(Shape::new(1, block.out_ch, 1, 1), E::one()),
            );
            params.insert(
                format!("{}.{bn}.beta", block.name),
                Tensor::zeros(Shape::new(1, block.out_ch, 1, 1)),
            );
        }
    }
    for head in &plan.heads {
        conv(&mut params, &mut rng, head.name.clone(), config.classes, head.in_ch, 1, true);
    }
    // running statistics, one set per block application
    for app in &plan.apps {
        let out_ch = plan.weights[app.weights].out_ch;
        for bn in ["bn1", "bn2"] {
            params.insert(
                format!("{}.{bn}.running_mean", app.stats_key),
                Tensor::zeros(Shape::new(1, out_ch, 1, 1)),
            );
            params.insert(
                format!("{}.{bn}.running_var", app.stats_key),
                Tensor::full(Shape::new(1, out_ch, 1, 1), E::one()),
            );
        }
    }
    params
}

/// Registers every trainable parameter as a gradient-bearing tape leaf.
pub fn register_params<E: Element>(
    tape: &mut Tape<E>,
    params: &ModelParams<E>,
) -> BTreeMap<String, Var> {
    params
        .iter()
        .filter(|(n, _)| !is_running_stat(n))
        .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), true)))
        .collect()
}

/// Registers pyramid levels as constant tape leaves.
pub fn register_pyramid<E: Element>(tape: &mut Tape<E>, pyramid: &ScalePyramid<E>) -> Vec<Var> {
    pyramid
        .levels
        .iter()
        .map(|t| tape.leaf(t.clone(), false))
        .collect()
}

/// Extracts the gradient of every trainable parameter after a backward
/// pass; parameters the loss does not reach get zero gradients.
pub fn collect_grads<E: Element>(
    tape: &Tape<E>,
    vars: &BTreeMap<String, Var>,
    params: &ModelParams<E>,
) -> BTreeMap<String, Tensor<E>> {
    params
        .iter()
        .filter(|(n, _)| !is_running_stat(n))
        .map(|(n, _)| (n.clone(), tape.grad_or_zeros(vars[n])))
        .collect()
}
