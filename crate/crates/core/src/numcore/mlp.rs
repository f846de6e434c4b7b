use serde::{Deserialize, Serialize};

use super::{GradSet, Matrix, ParamId, ParamSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Affine layer `y = x·W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    pub fn input_dim(&self, params: &ParamSet) -> usize {
        params.value(self.weight).rows()
    }

    pub fn output_dim(&self, params: &ParamSet) -> usize {
        params.value(self.weight).cols()
    }

    pub fn forward(&self, params: &ParamSet, input: &Matrix) -> Result<Matrix> {
        let mut out = input.matmul(params.value(self.weight))?;
        out.add_row_broadcast(params.value(self.bias))?;
        Ok(out)
    }

    /// Accumulates weight/bias gradients and returns the gradient w.r.t. `input`.
    pub fn backward(
        &self,
        params: &ParamSet,
        input: &Matrix,
        grad_out: &Matrix,
        grads: &mut GradSet,
    ) -> Result<Matrix> {
        grads.get_mut(self.weight).axpy(1.0, &input.t_matmul(grad_out)?)?;
        grads.get_mut(self.bias).axpy(1.0, &grad_out.column_sums())?;
        grad_out.matmul_t(params.value(self.weight))
    }

    /// Backward pass that only produces the input gradient.
    pub fn backward_input(&self, params: &ParamSet, grad_out: &Matrix) -> Result<Matrix> {
        grad_out.matmul_t(params.value(self.weight))
    }
}

/// A stack of dense layers with one activation between them.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
    /// Whether the activation is also applied after the last layer.
    pub activate_output: bool,
}

impl MlpSpec {
    pub fn input_dim(&self, params: &ParamSet) -> usize {
        self.layers.first().map_or(0, |l| l.input_dim(params))
    }

    pub fn output_dim(&self, params: &ParamSet) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim(params))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.activate_output
    }
}

/// Everything [`backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    layers: Vec<DenseLayer>,
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    output_shape: (usize, usize),
}

impl MlpCache {
    pub fn batch_size(&self) -> usize {
        self.output_shape.0
    }
}

/// Runs the network on `input`, retaining per-layer activations.
pub fn forward_mlp(params: &ParamSet, spec: &MlpSpec, input: &Matrix) -> Result<(Matrix, MlpCache)> {
    let expected = spec.input_dim(params);
    if input.cols() != expected {
        return Err(Error::shape("forward_mlp", format!("{expected} input columns"), input.cols()));
    }
    let mut inputs = Vec::with_capacity(spec.layers.len());
    let mut pre_activations = Vec::with_capacity(spec.layers.len());
    let mut current = input.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        let pre = layer.forward(params, &current)?;
        let next = if spec.activated(i) {
            pre.map(|v| spec.activation.apply(v))
        } else {
            pre.clone()
        };
        inputs.push(current);
        pre_activations.push(pre);
        current = next;
    }
    if !current.is_finite() {
        return Err(Error::NonFinite("forward_mlp produced a non-finite activation".into()));
    }
    let cache = MlpCache {
        layers: spec.layers.clone(),
        inputs,
        pre_activations,
        output_shape: current.shape(),
    };
    Ok((current, cache))
}

/// Back-propagates `grad_out` (gradient of the loss w.r.t. the network output)
/// through the cached pass. Parameter gradients are added into `grads`; the
/// gradient w.r.t. the network input is returned.
pub fn backward(
    params: &ParamSet,
    spec: &MlpSpec,
    cache: &MlpCache,
    grad_out: &Matrix,
    grads: &mut GradSet,
) -> Result<Matrix> {
    if cache.layers != spec.layers {
        return Err(Error::Contract("activation cache was produced by a different network".into()));
    }
    if grad_out.shape() != cache.output_shape {
        return Err(Error::Contract(format!(
            "output gradient is {:?} but the cached pass produced {:?}",
            grad_out.shape(),
            cache.output_shape
        )));
    }
    if !grads.is_congruent(params) {
        return Err(Error::Contract("gradient set is not congruent with the parameters".into()));
    }
    let mut grad = grad_out.clone();
    for i in (0..spec.layers.len()).rev() {
        if spec.activated(i) {
            let pre = &cache.pre_activations[i];
            for (g, &z) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *g *= spec.activation.derivative(z);
            }
        }
        grad = spec.layers[i].backward(params, &cache.inputs[i], &grad, grads)?;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Group;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net(params: &mut ParamSet, dims: &[usize], act: Activation, rng: &mut ChaCha8Rng) -> MlpSpec {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = Matrix::from_fn(w[0], w[1], |_, _| rng.random_range(-1.0..1.0));
                let bias = Matrix::from_fn(1, w[1], |_, _| rng.random_range(-1.0..1.0));
                DenseLayer {
                    weight: params.add(format!("w{i}"), Group::Extractor, weight),
                    bias: params.add(format!("b{i}"), Group::Extractor, bias),
                }
            })
            .collect();
        MlpSpec {
            layers,
            activation: act,
            activate_output: false,
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut params = ParamSet::new();
        let layer = DenseLayer {
            weight: params.add("w", Group::Extractor, Matrix::zeros(3, 2)),
            bias: params.add("b", Group::Extractor, Matrix::zeros(1, 2)),
        };
        let spec = MlpSpec {
            layers: vec![layer],
            activation: Activation::Relu,
            activate_output: true,
        };
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 9.0]]).unwrap();
        let (out, _) = forward_mlp(&params, &spec, &x).unwrap();
        assert_eq!(out, Matrix::zeros(2, 2));
    }

    #[test]
    fn identity_relu_clips_negative() {
        let mut params = ParamSet::new();
        let layer = DenseLayer {
            weight: params.add("w", Group::Extractor, Matrix::identity(2)),
            bias: params.add("b", Group::Extractor, Matrix::zeros(1, 2)),
        };
        let spec = MlpSpec {
            layers: vec![layer],
            activation: Activation::Relu,
            activate_output: true,
        };
        let x = Matrix::from_rows(&[[-1.0, 2.0]]).unwrap();
        let (out, _) = forward_mlp(&params, &spec, &x).unwrap();
        assert_eq!(out, Matrix::from_rows(&[[0.0, 2.0]]).unwrap());
    }

    #[test]
    fn forward_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        let spec = net(&mut params, &[2, 3, 2], Activation::Tanh, &mut rng);
        let x = Matrix::from_rows(&[[0.3, -0.7], [1.2, 0.1]]).unwrap();
        let (out, _) = forward_mlp(&params, &spec, &x).unwrap();

        // Scalar reference, layer by layer.
        let w0 = params.value(spec.layers[0].weight);
        let b0 = params.value(spec.layers[0].bias);
        let w1 = params.value(spec.layers[1].weight);
        let b1 = params.value(spec.layers[1].bias);
        for r in 0..2 {
            let mut hidden = [0.0; 3];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut s = b0[(0, j)];
                for i in 0..2 {
                    s += x[(r, i)] * w0[(i, j)];
                }
                *h = s.tanh();
            }
            for k in 0..2 {
                let mut s = b1[(0, k)];
                for (j, h) in hidden.iter().enumerate() {
                    s += h * w1[(j, k)];
                }
                assert!((out[(r, k)] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn linear_sum_gradient_is_input_transpose_times_ones() {
        let mut params = ParamSet::new();
        let w = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.25], [0.0, 1.0]]).unwrap();
        let layer = DenseLayer {
            weight: params.add("w", Group::Extractor, w),
            bias: params.add("b", Group::Extractor, Matrix::zeros(1, 2)),
        };
        let spec = MlpSpec {
            layers: vec![layer],
            activation: Activation::Relu,
            activate_output: false,
        };
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]]).unwrap();
        let (out, cache) = forward_mlp(&params, &spec, &x).unwrap();
        let ones = Matrix::filled(out.rows(), out.cols(), 1.0);
        let mut grads = GradSet::zeros_like(&params);
        backward(&params, &spec, &cache, &ones, &mut grads).unwrap();
        assert_eq!(grads.get(layer.weight), &x.t_matmul(&ones).unwrap());
        assert_eq!(grads.get(layer.bias), &Matrix::filled(1, 2, 2.0));
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let mut params = ParamSet::new();
        let l0 = DenseLayer {
            weight: params.add("w0", Group::Extractor, Matrix::from_rows(&[[1.0, -1.0]]).unwrap()),
            bias: params.add("b0", Group::Extractor, Matrix::zeros(1, 2)),
        };
        let l1 = DenseLayer {
            weight: params.add("w1", Group::Extractor, Matrix::from_rows(&[[1.0], [1.0]]).unwrap()),
            bias: params.add("b1", Group::Extractor, Matrix::zeros(1, 1)),
        };
        let spec = MlpSpec {
            layers: vec![l0, l1],
            activation: Activation::Relu,
            activate_output: false,
        };
        // Second hidden unit has pre-activation -2 and is dead.
        let x = Matrix::from_rows(&[[2.0]]).unwrap();
        let (_, cache) = forward_mlp(&params, &spec, &x).unwrap();
        let mut grads = GradSet::zeros_like(&params);
        backward(&params, &spec, &cache, &Matrix::filled(1, 1, 1.0), &mut grads).unwrap();
        assert_eq!(grads.get(l0.weight)[(0, 1)], 0.0);
        assert_eq!(grads.get(l0.bias)[(0, 1)], 0.0);
        assert_eq!(grads.get(l1.weight)[(1, 0)], 0.0);
        assert_eq!(grads.get(l0.weight)[(0, 0)], 2.0);
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let spec = net(&mut params, &[2, 3, 2], Activation::Relu, &mut rng);
        let x = Matrix::zeros(4, 2);
        let (_, cache) = forward_mlp(&params, &spec, &x).unwrap();
        let mut grads = GradSet::zeros_like(&params);
        assert!(matches!(
            backward(&params, &spec, &cache, &Matrix::zeros(3, 2), &mut grads),
            Err(Error::Contract(_))
        ));
        let other = MlpSpec {
            layers: spec.layers[..1].to_vec(),
            ..spec.clone()
        };
        assert!(backward(&params, &other, &cache, &Matrix::zeros(4, 2), &mut grads).is_err());
        assert!(forward_mlp(&params, &spec, &Matrix::zeros(1, 5)).is_err());
    }
}
