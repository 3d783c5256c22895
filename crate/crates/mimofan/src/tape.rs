//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every differentiable operation in execution order,
//! which is by construction a topological order of the computation DAG.
//! [`Tape::backward`] walks the records once in reverse, applying each op's
//! gradient rule from [`ops`](crate::ops) and accumulating into per-node
//! gradient buffers.
//!
//! Gradient lifetime follows an explicit-zeroing contract: gradients persist
//! across `backward` calls and accumulate; call [`Tape::zero_grads`] to
//! reset. One tape models one forward pass; training builds a fresh tape per
//! step.
//!
//! The element type selects the precision mode: `Tape<f32>` is the training
//! configuration, `Tape<f64>` the verification configuration used by the
//! gradient checker. With [`Tape::check_finite`] enabled every op output is
//! scanned for NaN/Inf.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::{self, BatchStats};
use crate::tensor::{Shape, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

enum Node<E: Element> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    AvgPool2 {
        x: Var,
    },
    Upsample2 {
        x: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchStats<E>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<E>,
        var: Vec<E>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: E,
    },
    ConcatChannels {
        parts: Vec<Var>,
    },
    SoftmaxChannels {
        x: Var,
    },
    WceLevel {
        probs: Var,
        labels: Tensor<E>,
        w_background: E,
        w_foreground: E,
    },
    ScalarMean {
        parts: Vec<Var>,
    },
    SumAll {
        x: Var,
    },
    WeightedSum {
        x: Var,
        coeffs: Tensor<E>,
    },
}

/// Records a forward computation and replays it in reverse for gradients.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    values: Vec<Tensor<E>>,
    grads: Vec<Option<Tensor<E>>>,
    requires: Vec<bool>,
    check_finite: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Tape<E> {
        Tape {
            nodes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            check_finite: false,
        }
    }

    /// Enables NaN/Inf scanning of every op output (verification mode).
    pub fn with_finite_checks() -> Tape<E> {
        Tape {
            check_finite: true,
            ..Tape::new()
        }
    }

    /// Registers an input value. `requires_grad` marks it as a leaf whose
    /// gradient should be retained by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(Node::Leaf, value, requires_grad)
            .expect("leaf registration cannot fail finite checks on finite input")
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.values[v.0]
    }

    /// Accumulated gradient of a node, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a leaf, materializing zeros if the loss does not depend
    /// on it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<E> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.values[v.0].shape()),
        }
    }

    /// Clears all gradient buffers (the explicit reset between backward
    /// passes).
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<E>, value: Tensor<E>, requires: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(format!(
                "tape node {} produced NaN/Inf in {} mode",
                self.nodes.len(),
                E::MODE
            )));
        }
        self.nodes.push(node);
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        Ok(Var(self.nodes.len() - 1))
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    // -- recorded operations -------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d(
            &self.values[x.0],
            &self.values[w.0],
            &self.values[b.0],
            stride,
            pad,
        )?;
        let req = self.req(&[x, w, b]);
        self.push(Node::Conv2d { x, w, b, stride, pad }, out, req)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let out = ops::avg_pool2(&self.values[x.0])?;
        let req = self.requires[x.0];
        self.push(Node::AvgPool2 { x }, out, req)
    }

    pub fn upsample2_bilinear(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample2_bilinear(&self.values[x.0]);
        let req = self.requires[x.0];
        self.push(Node::Upsample2 { x }, out, req)
    }

    /// Training-mode batch norm; returns the output and the batch statistics
    /// for the caller's running-state update.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<E>)> {
        let (out, stats) =
            ops::batch_norm_train(&self.values[x.0], &self.values[gamma.0], &self.values[beta.0])?;
        let req = self.req(&[x, gamma, beta]);
        let returned = stats.clone();
        let var = self.push(Node::BatchNormTrain { x, gamma, beta, stats }, out, req)?;
        Ok((var, returned))
    }

    /// Inference-mode batch norm with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<E>,
        var: Vec<E>,
    ) -> Result<Var> {
        let out = ops::batch_norm_eval(
            &self.values[x.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            &mean,
            &var,
        )?;
        let req = self.req(&[x, gamma, beta]);
        self.push(Node::BatchNormEval { x, gamma, beta, mean, var }, out, req)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(&self.values[x.0]);
        let req = self.requires[x.0];
        self.push(Node::Relu { x }, out, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(&self.values[a.0], &self.values[b.0])?;
        let req = self.req(&[a, b]);
        self.push(Node::Add { a, b }, out, req)
    }

    pub fn scale(&mut self, x: Var, factor: E) -> Result<Var> {
        let out = ops::scale(&self.values[x.0], factor);
        let req = self.requires[x.0];
        self.push(Node::Scale { x, factor }, out, req)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<E>> = parts.iter().map(|v| &self.values[v.0]).collect();
        let out = ops::concat_channels(&tensors)?;
        let req = self.req(parts);
        self.push(Node::ConcatChannels { parts: parts.to_vec() }, out, req)
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_channels(&self.values[x.0]);
        let req = self.requires[x.0];
        self.push(Node::SoftmaxChannels { x }, out, req)
    }

    /// Weighted cross-entropy of one pyramid level against a constant binary
    /// label mask, averaged over voxels. Produces a scalar.
    pub fn wce_level(
        &mut self,
        probs: Var,
        labels: Tensor<E>,
        w_background: E,
        w_foreground: E,
    ) -> Result<Var> {
        let out = ops::wce_level(&self.values[probs.0], &labels, w_background, w_foreground)?;
        let req = self.requires[probs.0];
        self.push(
            Node::WceLevel { probs, labels, w_background, w_foreground },
            out,
            req,
        )
    }

    /// Arithmetic mean of scalar nodes (the cross-scale average of the loss).
    pub fn scalar_mean(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("scalar_mean of zero terms".into()));
        }
        let mut acc = E::zero();
        for v in parts {
            acc = acc + self.values[v.0].item()?;
        }
        let out = Tensor::scalar(acc / E::from_f64_c(parts.len() as f64));
        let req = self.req(parts);
        self.push(Node::ScalarMean { parts: parts.to_vec() }, out, req)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = ops::sum_all(&self.values[x.0]);
        let req = self.requires[x.0];
        self.push(Node::SumAll { x }, out, req)
    }

    /// Dot product with constant coefficients, producing a scalar.
    pub fn weighted_sum(&mut self, x: Var, coeffs: Tensor<E>) -> Result<Var> {
        let out = ops::weighted_sum(&self.values[x.0], &coeffs)?;
        let req = self.requires[x.0];
        self.push(Node::WeightedSum { x, coeffs }, out, req)
    }

    // -- backward ------------------------------------------------------------

    fn accumulate(&mut self, v: Var, grad: Tensor<E>) {
        if !self.requires[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e = *e + *g;
                }
            }
            slot => *slot = Some(grad),
        }
    }

    /// Propagates gradients from a scalar loss to every `requires_grad`
    /// leaf. Each node is visited exactly once, in reverse record order.
    /// Repeated calls accumulate; use [`Tape::zero_grads`] between passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].shape() != Shape::scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {}",
                self.values[loss.0].shape()
            )));
        }
        // Upstream gradients for this pass live separately from the
        // accumulated leaf gradients so repeated backward calls compose.
        let mut up: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        up[loss.0] = Some(Tensor::scalar(E::one()));

        for i in (0..=loss.0).rev() {
            let Some(gout) = up[i].take() else { continue };
            if self.requires[i] {
                if let Node::Leaf = self.nodes[i] {
                    self.accumulate(Var(i), gout.clone());
                }
            }
            let send = |idx: usize, grad: Tensor<E>, up: &mut Vec<Option<Tensor<E>>>| {
                if !self.requires[idx] {
                    return;
                }
                match &mut up[idx] {
                    Some(existing) => {
                        for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                            *e = *e + *g;
                        }
                    }
                    slot => *slot = Some(grad),
                }
            };
            match &self.nodes[i] {
                Node::Leaf => {}
                Node::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = ops::conv2d_backward(
                        &self.values[x.0],
                        &self.values[w.0],
                        &gout,
                        *stride,
                        *pad,
                    )?;
                    send(x.0, dx, &mut up);
                    send(w.0, dw, &mut up);
                    send(b.0, db, &mut up);
                }
                Node::AvgPool2 { x } => {
                    let dx = ops::avg_pool2_backward(&gout, self.values[x.0].shape());
                    send(x.0, dx, &mut up);
                }
                Node::Upsample2 { x } => {
                    let dx = ops::upsample2_bilinear_backward(&gout, self.values[x.0].shape());
                    send(x.0, dx, &mut up);
                }
                Node::BatchNormTrain { x, gamma, beta, stats } => {
                    let (dx, dg, db) = ops::batch_norm_train_backward(
                        &self.values[x.0],
                        &self.values[gamma.0],
                        stats,
                        &gout,
                    );
                    send(x.0, dx, &mut up);
                    send(gamma.0, dg, &mut up);
                    send(beta.0, db, &mut up);
                }
                Node::BatchNormEval { x, gamma, beta, mean, var } => {
                    let (dx, dg, db) = ops::batch_norm_eval_backward(
                        &self.values[x.0],
                        &self.values[gamma.0],
                        mean,
                        var,
                        &gout,
                    );
                    send(x.0, dx, &mut up);
                    send(gamma.0, dg, &mut up);
                    send(beta.0, db, &mut up);
                }
                Node::Relu { x } => {
                    let dx = ops::relu_backward(&self.values[x.0], &gout);
                    send(x.0, dx, &mut up);
                }
                Node::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    send(a.0, gout.clone(), &mut up);
                    send(b.0, gout, &mut up);
                }
                Node::Scale { x, factor } => {
                    let dx = ops::scale(&gout, *factor);
                    send(x.0, dx, &mut up);
                }
                Node::ConcatChannels { parts } => {
                    let channels: Vec<usize> =
                        parts.iter().map(|p| self.values[p.0].shape().c).collect();
                    let grads = ops::concat_channels_backward(&gout, &channels);
                    let parts = parts.clone();
                    for (p, g) in parts.iter().zip(grads) {
                        send(p.0, g, &mut up);
                    }
                }
                Node::SoftmaxChannels { x } => {
                    let dx = ops::softmax_channels_backward(&self.values[i], &gout);
                    send(x.0, dx, &mut up);
                }
                Node::WceLevel { probs, labels, w_background, w_foreground } => {
                    let dp = ops::wce_level_backward(
                        &self.values[probs.0],
                        labels,
                        *w_background,
                        *w_foreground,
                        gout.item()?,
                    );
                    send(probs.0, dp, &mut up);
                }
                Node::ScalarMean { parts } => {
                    let share = gout.item()? / E::from_f64_c(parts.len() as f64);
                    let parts = parts.clone();
                    for p in parts {
                        send(p.0, Tensor::scalar(share), &mut up);
                    }
                }
                Node::SumAll { x } => {
                    let g = gout.item()?;
                    let dx = Tensor::full(self.values[x.0].shape(), g);
                    send(x.0, dx, &mut up);
                }
                Node::WeightedSum { x, coeffs } => {
                    let dx = ops::scale(coeffs, gout.item()?);
                    send(x.0, dx, &mut up);
                }
            }
        }
        Ok(())
    }
}
