//! Multi-scale pyramid segmentation networks on a small rank-4 tensor
//! engine with reverse-mode automatic differentiation.
//!
//! The crate builds everything needed to train and evaluate the MIMO-FAN
//! family of 2D segmentation networks on desk-scale data, from scratch:
//!
//! * [`tensor`] / [`tape`] / [`ops`] — a rank-4 `(batch, channel, row, col)`
//!   tensor type, the differentiable operation set (convolution, pooling,
//!   bilinear upsampling, batch norm, softmax, weighted cross-entropy), and
//!   a Wengert tape that replays them in reverse for gradients. `f32` is the
//!   training precision, `f64` the verification precision.
//! * [`pyramid`] — dyadic image and label pyramids built by repeated 2x2
//!   average pooling.
//! * [`network`] — the MIMO-FAN topology (shared first-level block, dense
//!   cross-scale connections, per-scale output heads, scale fusing) plus
//!   U-Net and ResU-Net baselines with matching filter schedules.
//! * [`loss`] / [`metrics`] / [`stats`] — deep pyramid supervision loss,
//!   Dice metrics, and a paired t-test.
//! * [`optim`] / [`train`] — Adam, deterministic k-fold cross-validation,
//!   majority-vote ensembling, and the ablation harness.
//! * [`io`] — PGM/PPM images, dataset manifests, synthetic data, overlay
//!   rendering, and binary checkpoints.
//! * [`gradcheck`] — the finite-difference verification suite behind
//!   `mimofan gradcheck`.
//!
//! # Quick start
//!
//! Build a tiny network, run one forward/backward pass, and take an Adam
//! step:
//!
//! ```
//! use mimofan::network::{self, Arch, NetworkConfig};
//! use mimofan::pyramid::image_pyramid;
//! use mimofan::loss::{dps_loss, ClassWeights};
//! use mimofan::optim::Adam;
//! use mimofan::pyramid::label_pyramid;
//! use mimofan::tape::Tape;
//! use mimofan::tensor::{Shape, Tensor};
//!
//! # fn main() -> mimofan::error::Result<()> {
//! let config = NetworkConfig { scales: 3, base_filters: 2, ..NetworkConfig::default() };
//! let mut params = network::build::<f32>(&config, 42);
//!
//! let image = Tensor::full(Shape::new(1, 1, 16, 16), 0.5);
//! let mask = Tensor::zeros(Shape::new(1, 1, 16, 16));
//! let images = image_pyramid(&image, config.scales)?;
//! let labels = label_pyramid(&mask, config.scales)?;
//!
//! let mut tape = Tape::new();
//! let vars = network::register_params(&mut tape, &params);
//! let pyramid = network::register_pyramid(&mut tape, &images);
//! let outputs = network::forward_mimofan(
//!     &mut tape, &vars, &mut params, &pyramid, &config, network::Mode::Train,
//! )?;
//! let loss = dps_loss(&mut tape, &outputs.probs, &labels, ClassWeights::default())?;
//! tape.backward(loss)?;
//!
//! let mut adam = Adam::new(1e-3);
//! let grads = network::collect_grads(&tape, &vars, &params);
//! adam.step(&mut params, &grads)?;
//! # Ok(())
//! # }
//! ```
//!
//! The `book/` directory of the repository walks through each concept with
//! longer examples; the code blocks there mirror the doc-tests in these
//! modules.

pub mod cli;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod pyramid;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod train;

pub use element::Element;
pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
