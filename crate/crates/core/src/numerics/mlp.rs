//! Fixed-architecture tanh MLPs over a flat parameter vector.
//!
//! Layer `l` maps `a[l-1]` to `z[l] = W[l] a[l-1] + b[l]`; hidden layers apply
//! `tanh`, the last layer is linear. Weights are stored row-major
//! (`W[out][in]`) followed by the bias, layer after layer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HIDDEN_WIDTH: usize = 64;
pub const HIDDEN_LAYERS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub layers: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
struct LayerSpan {
    weights: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

impl MlpShape {
    pub fn new(layers: Vec<usize>) -> Result<Self> {
        if layers.len() < 2 || layers.iter().any(|&n| n == 0) {
            return Err(Error::Usage(format!("invalid layer sizes {layers:?}")));
        }
        Ok(Self { layers })
    }

    /// `input -> 64 -> 64 -> 64 -> output`.
    pub fn standard(input: usize, output: usize) -> Self {
        let mut layers = vec![input];
        layers.extend(std::iter::repeat_n(HIDDEN_WIDTH, HIDDEN_LAYERS));
        layers.push(output);
        Self { layers }
    }

    /// `input -> width x layers -> output`.
    pub fn hidden(input: usize, width: usize, layers: usize, output: usize) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(width, layers));
        sizes.push(output);
        Self::new(sizes)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layers.last().expect("validated shape")
    }

    pub fn param_count(&self) -> usize {
        self.layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn spans(&self) -> Vec<LayerSpan> {
        let mut offset = 0;
        self.layers
            .windows(2)
            .map(|w| {
                let span = LayerSpan {
                    weights: offset,
                    bias: offset + w[0] * w[1],
                    fan_in: w[0],
                    fan_out: w[1],
                };
                offset += w[0] * w[1] + w[1];
                span
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatParams {
    pub shape: MlpShape,
    pub values: Vec<f64>,
}

impl FlatParams {
    pub fn zeros(shape: MlpShape) -> Self {
        let n = shape.param_count();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    /// Weights `N(0, 1) / sqrt(fan_in)`, biases zero.
    pub fn init(shape: MlpShape, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        for span in p.shape.spans() {
            let scale = 1.0 / (span.fan_in as f64).sqrt();
            for w in &mut p.values[span.weights..span.bias] {
                let z: f64 = StandardNormal.sample(rng);
                *w = z * scale;
            }
        }
        p
    }

    pub fn from_values(shape: MlpShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.param_count() {
            return Err(Error::Usage(format!(
                "{} values for a shape with {} parameters",
                values.len(),
                shape.param_count()
            )));
        }
        let p = Self { shape, values };
        p.check_finite()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric("parameters", format!("entry {i} is not finite"))),
        }
    }

    /// `self + scale * delta`.
    pub fn offset(&self, delta: &[f64], scale: f64) -> Self {
        let mut out = self.clone();
        for (v, d) in out.values.iter_mut().zip(delta) {
            *v += scale * d;
        }
        out
    }
}

/// Post-activation values of every layer; `activations[0]` is the input and
/// the last entry is the raw (linear) output.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("non-empty cache")
    }
}

fn check_input(params: &FlatParams, input: &[f64]) -> Result<()> {
    if input.len() != params.shape.input_dim() {
        return Err(Error::Usage(format!(
            "input has {} features, network expects {}",
            input.len(),
            params.shape.input_dim()
        )));
    }
    Ok(())
}

pub fn forward(params: &FlatParams, input: &[f64]) -> Result<ForwardCache> {
    check_input(params, input)?;
    let spans = params.shape.spans();
    let last = spans.len() - 1;
    let mut activations = Vec::with_capacity(spans.len() + 1);
    activations.push(input.to_vec());
    for (l, span) in spans.iter().enumerate() {
        let prev = &activations[l];
        let w = &params.values[span.weights..span.bias];
        let b = &params.values[span.bias..span.bias + span.fan_out];
        let mut z: Vec<f64> = b.to_vec();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &w[o * span.fan_in..(o + 1) * span.fan_in];
            *zo += row.iter().zip(prev).map(|(a, x)| a * x).sum::<f64>();
        }
        if l != last {
            for v in z.iter_mut() {
                *v = v.tanh();
            }
        }
        activations.push(z);
    }
    Ok(ForwardCache { activations })
}

/// Accumulates `J^T upstream` into `grad`, where `J` is the Jacobian of the
/// raw output with respect to the parameters.
pub fn backward_into(params: &FlatParams, cache: &ForwardCache, upstream: &[f64], grad: &mut [f64]) {
    let spans = params.shape.spans();
    let mut delta = upstream.to_vec();
    for l in (0..spans.len()).rev() {
        let span = spans[l];
        let input = &cache.activations[l];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &mut grad[span.weights + o * span.fan_in..span.weights + (o + 1) * span.fan_in];
            for (g, x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
            grad[span.bias + o] += d;
        }
        if l > 0 {
            let w = &params.values[span.weights..span.bias];
            let mut prev = vec![0.0; span.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * span.fan_in..(o + 1) * span.fan_in];
                for (p, wv) in prev.iter_mut().zip(row) {
                    *p += wv * d;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }
}

/// Directional derivative of the raw output along parameter tangent `v`.
pub fn jvp(params: &FlatParams, cache: &ForwardCache, v: &[f64]) -> Vec<f64> {
    let spans = params.shape.spans();
    let last = spans.len() - 1;
    let mut tangent = vec![0.0; params.shape.input_dim()];
    for (l, span) in spans.iter().enumerate() {
        let input = &cache.activations[l];
        let w = &params.values[span.weights..span.bias];
        let vw = &v[span.weights..span.bias];
        let mut dz: Vec<f64> = v[span.bias..span.bias + span.fan_out].to_vec();
        for (o, d) in dz.iter_mut().enumerate() {
            let r = o * span.fan_in..(o + 1) * span.fan_in;
            let (wr, vr) = (&w[r.clone()], &vw[r]);
            let mut acc = 0.0;
            for i in 0..span.fan_in {
                acc += wr[i] * tangent[i] + vr[i] * input[i];
            }
            *d += acc;
        }
        if l != last {
            let out = &cache.activations[l + 1];
            for (d, a) in dz.iter_mut().zip(out) {
                *d *= 1.0 - a * a;
            }
        }
        tangent = dz;
    }
    tangent
}
