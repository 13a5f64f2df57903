//! Small dense feed-forward networks.
//!
//! Parameters are plain data ([`MlpParams`]); to differentiate through a
//! network, record it on a tape with [`TapedMlp::record`] and apply it to
//! node inputs. The tape-free [`MlpParams::forward`] path calls the same
//! kernels, so taped and untaped evaluation agree bitwise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels;
use super::tape::{NodeId, Tape};
use super::tensor::{Shape, Tensor};
use crate::{Error, Result};

/// Hidden-layer activation. The output layer is always linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

/// One dense layer: weight matrix (out×in, row-major) and bias vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

/// Parameters of a feed-forward network. Immutable snapshots of this type
/// may be shared across threads; all mutation happens through the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl MlpParams {
    /// Initialize with entries uniform in [-1/√fan_in, +1/√fan_in].
    ///
    /// `dims` lists layer widths, e.g. `[in, hidden.., out]`.
    pub fn init(dims: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let wdata = (0..fan_out * fan_in)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                let bdata = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
                Layer {
                    w: Tensor::matrix(fan_out, fan_in, wdata).expect("sized above"),
                    b: Tensor::vector(bdata),
                }
            })
            .collect();
        MlpParams { layers, activation }
    }

    /// All-zero network with the given layer widths.
    pub fn zeros(dims: &[usize], activation: Activation) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                w: Tensor::zeros(Shape::Matrix {
                    rows: w[1],
                    cols: w[0],
                }),
                b: Tensor::zeros(Shape::Vector(w[1])),
            })
            .collect();
        MlpParams { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        match self.layers[0].w.shape {
            Shape::Matrix { cols, .. } => cols,
            _ => unreachable!(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.layers.last().expect("non-empty").w.shape {
            Shape::Matrix { rows, .. } => rows,
            _ => unreachable!(),
        }
    }

    /// Check layer chaining and finiteness.
    pub fn validate(&self) -> Result<()> {
        let mut prev_out = None;
        for (k, layer) in self.layers.iter().enumerate() {
            let (rows, cols) = match layer.w.shape {
                Shape::Matrix { rows, cols } => (rows, cols),
                other => {
                    return Err(Error::Shape {
                        context: "mlp layer weight",
                        expected: "matrix".into(),
                        got: other.to_string(),
                    })
                }
            };
            if layer.b.shape != Shape::Vector(rows) {
                return Err(Error::Shape {
                    context: "mlp layer bias",
                    expected: format!("vec[{rows}]"),
                    got: layer.b.shape.to_string(),
                });
            }
            if let Some(prev) = prev_out {
                if cols != prev {
                    return Err(Error::Shape {
                        context: "mlp layer chaining",
                        expected: format!("in-dim {prev}"),
                        got: format!("in-dim {cols} at layer {k}"),
                    });
                }
            }
            if !layer.w.is_finite() || !layer.b.is_finite() {
                return Err(Error::NonFinite {
                    what: "mlp parameter",
                    index: k,
                });
            }
            prev_out = Some(rows);
        }
        Ok(())
    }

    fn activate(&self, x: &[f64]) -> Vec<f64> {
        match self.activation {
            Activation::Tanh => kernels::map_tanh(x),
            Activation::Relu => kernels::map_relu(x),
            Activation::Sigmoid => kernels::map_sigmoid(x),
        }
    }

    /// Tape-free forward pass over concatenated input segments.
    pub fn forward_segments(&self, segments: &[&[f64]]) -> Result<Vec<f64>> {
        let got: usize = segments.iter().map(|s| s.len()).sum();
        if got != self.in_dim() {
            return Err(Error::Shape {
                context: "mlp input",
                expected: format!("{} entries", self.in_dim()),
                got: format!("{got}"),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = kernels::affine(&self.layers[0].w, Some(&self.layers[0].b), segments);
        if last > 0 {
            h = self.activate(&h);
        }
        for (k, layer) in self.layers.iter().enumerate().skip(1) {
            h = kernels::affine(&layer.w, Some(&layer.b), &[&h]);
            if k < last {
                h = self.activate(&h);
            }
        }
        Ok(h)
    }

    /// Tape-free forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward_segments(&[input])
    }

    /// Forward pass that also returns every post-activation hidden layer.
    pub fn forward_with_hidden(&self, segments: &[&[f64]]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let got: usize = segments.iter().map(|s| s.len()).sum();
        if got != self.in_dim() {
            return Err(Error::Shape {
                context: "mlp input",
                expected: format!("{} entries", self.in_dim()),
                got: format!("{got}"),
            });
        }
        let last = self.layers.len() - 1;
        let mut hidden = Vec::new();
        let mut h = kernels::affine(&self.layers[0].w, Some(&self.layers[0].b), segments);
        if last > 0 {
            h = self.activate(&h);
            hidden.push(h.clone());
        }
        for (k, layer) in self.layers.iter().enumerate().skip(1) {
            h = kernels::affine(&layer.w, Some(&layer.b), &[&h]);
            if k < last {
                h = self.activate(&h);
                hidden.push(h.clone());
            }
        }
        Ok((hidden, h))
    }

    /// Parameter tensors in flatten order: `w0, b0, w1, b1, ...`.
    pub fn flatten(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.clone(), l.b.clone()])
            .collect()
    }

    /// Inverse of [`MlpParams::flatten`]; consumes tensors from the front of `iter`.
    pub fn assign(&mut self, iter: &mut impl Iterator<Item = Tensor>) {
        for layer in &mut self.layers {
            layer.w = iter.next().expect("weight tensor");
            layer.b = iter.next().expect("bias tensor");
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.data.len() + l.b.data.len())
            .sum()
    }
}

/// An MLP whose parameters live on a tape as leaf nodes.
pub struct TapedMlp {
    layer_ids: Vec<(NodeId, NodeId)>,
    activation: Activation,
    n_layers: usize,
}

impl TapedMlp {
    /// Push all parameters of `params` onto `tape` as trainable leaves.
    pub fn record(tape: &mut Tape, params: &MlpParams) -> Self {
        let layer_ids = params
            .layers
            .iter()
            .map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone())))
            .collect::<Vec<_>>();
        TapedMlp {
            n_layers: layer_ids.len(),
            layer_ids,
            activation: params.activation,
        }
    }

    fn activate(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self.activation {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    /// Apply to input segment nodes; returns the output node.
    pub fn apply(&self, tape: &mut Tape, segments: &[NodeId]) -> Result<NodeId> {
        Ok(self.apply_with_hidden(tape, segments)?.1)
    }

    /// Apply, also returning the post-activation hidden-layer nodes.
    pub fn apply_with_hidden(
        &self,
        tape: &mut Tape,
        segments: &[NodeId],
    ) -> Result<(Vec<NodeId>, NodeId)> {
        let last = self.n_layers - 1;
        let mut hidden = Vec::new();
        let (w0, b0) = self.layer_ids[0];
        let mut h = tape.affine(w0, Some(b0), segments)?;
        if last > 0 {
            h = self.activate(tape, h);
            hidden.push(h);
        }
        for (k, &(w, b)) in self.layer_ids.iter().enumerate().skip(1) {
            h = tape.affine(w, Some(b), &[h])?;
            if k < last {
                h = self.activate(tape, h);
                hidden.push(h);
            }
        }
        Ok((hidden, h))
    }

    /// Gradient tensors in the same order as [`MlpParams::flatten`].
    pub fn grads(&self, tape: &Tape, grads: &super::tape::Grads) -> Vec<Tensor> {
        self.layer_ids
            .iter()
            .flat_map(|&(w, b)| {
                [
                    grads.get(w, tape.value(w)),
                    grads.get(b, tape.value(b)),
                ]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_maps_anything_to_zero() {
        let net = MlpParams::zeros(&[3, 4, 2], Activation::Tanh);
        let out = net.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_is_an_affine_map() {
        // W = [[2]], b = [1], input [3] → [7]
        let net = MlpParams {
            layers: vec![Layer {
                w: Tensor::matrix(1, 1, vec![2.0]).unwrap(),
                b: Tensor::vector(vec![1.0]),
            }],
            activation: Activation::Tanh,
        };
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn taped_forward_matches_straight_line_reevaluation() {
        // Oracle: an independent evaluation of the same affine/tanh chain.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = MlpParams::init(&[4, 5, 3], Activation::Tanh, &mut rng);
        let input: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut oracle = kernels_free_forward(&net, &input);
        let plain = net.forward(&input).unwrap();

        let mut tape = Tape::new();
        let taped = TapedMlp::record(&mut tape, &net);
        let x = tape.constant_vector(input.clone());
        let out = taped.apply(&mut tape, &[x]).unwrap();

        for k in 0..3 {
            assert!((tape.value(out).data[k] - oracle[k]).abs() < 1e-12);
            assert_eq!(tape.value(out).data[k], plain[k]);
        }
        oracle.clear();
    }

    // Straight-line re-evaluation that shares no code with MlpParams::forward.
    fn kernels_free_forward(net: &MlpParams, input: &[f64]) -> Vec<f64> {
        let mut h: Vec<f64> = input.to_vec();
        for (k, layer) in net.layers.iter().enumerate() {
            let (rows, cols) = match layer.w.shape {
                Shape::Matrix { rows, cols } => (rows, cols),
                _ => unreachable!(),
            };
            let mut next = vec![0.0; rows];
            for i in 0..rows {
                let mut acc = layer.b.data[i];
                for j in 0..cols {
                    acc += layer.w.data[i * cols + j] * h[j];
                }
                next[i] = acc;
            }
            if k + 1 < net.layers.len() {
                for v in &mut next {
                    *v = v.tanh();
                }
            }
            h = next;
        }
        h
    }

    #[test]
    fn shape_mismatch_is_a_configuration_error() {
        let net = MlpParams::zeros(&[3, 2], Activation::Relu);
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn flatten_assign_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MlpParams::init(&[2, 3, 1], Activation::Relu, &mut rng);
        let flat = net.flatten();
        let mut copy = MlpParams::zeros(&[2, 3, 1], Activation::Relu);
        copy.assign(&mut flat.into_iter());
        assert_eq!(net, copy);
    }
}
