//! Small numerical kernel: MLPs with analytic gradients, categorical
//! distributions, Fisher-vector products and conjugate gradient.

mod categorical;
mod cg;
mod fisher;
mod mlp;

pub use categorical::{kl_categorical, masked_softmax, Categorical, Jacobian3, NUM_ACTIONS, PROB_FLOOR};
pub use cg::{conjugate_gradient, CgSolution};
pub use fisher::{fisher_vector_product, DistributionPoint};
pub use mlp::{backward_into, forward, jvp, FlatParams, ForwardCache, MlpShape, HIDDEN_LAYERS, HIDDEN_WIDTH};

use crate::error::{Error, Result};

/// Which head the network output feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Three logits, softmaxed over the legal actions.
    Policy { legal: [bool; NUM_ACTIONS] },
    /// One raw scalar.
    Value,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadOutput {
    Distribution(Categorical),
    Value(f64),
}

fn check_head(params: &FlatParams, head: Head) -> Result<()> {
    let want = match head {
        Head::Policy { .. } => NUM_ACTIONS,
        Head::Value => 1,
    };
    if params.shape.output_dim() != want {
        return Err(Error::Usage(format!(
            "network has {} outputs, head needs {want}",
            params.shape.output_dim()
        )));
    }
    if let Head::Policy { legal } = head {
        if !legal.iter().any(|l| *l) {
            return Err(Error::Usage("no legal action".into()));
        }
    }
    Ok(())
}

pub fn mlp_forward(params: &FlatParams, features: &[f64], head: Head) -> Result<HeadOutput> {
    check_head(params, head)?;
    let cache = forward(params, features)?;
    Ok(match head {
        Head::Policy { legal } => HeadOutput::Distribution(masked_softmax(cache.output(), legal).0),
        Head::Value => HeadOutput::Value(cache.output()[0]),
    })
}

/// Gradient of `<upstream, head output>` with respect to the parameters.
/// For the policy head `upstream` is a gradient over the three probabilities.
pub fn mlp_backward(params: &FlatParams, features: &[f64], head: Head, upstream: &[f64]) -> Result<Vec<f64>> {
    check_head(params, head)?;
    let cache = forward(params, features)?;
    let mut grad = vec![0.0; params.len()];
    match head {
        Head::Policy { legal } => {
            if upstream.len() != NUM_ACTIONS {
                return Err(Error::Usage("policy upstream gradient needs 3 entries".into()));
            }
            let (_, jac) = masked_softmax(cache.output(), legal);
            let logits_grad: Vec<f64> = (0..NUM_ACTIONS)
                .map(|b| (0..NUM_ACTIONS).map(|a| jac[a][b] * upstream[a]).sum())
                .collect();
            backward_into(params, &cache, &logits_grad, &mut grad);
        }
        Head::Value => {
            if upstream.len() != 1 {
                return Err(Error::Usage("value upstream gradient needs 1 entry".into()));
            }
            backward_into(params, &cache, upstream, &mut grad);
        }
    }
    Ok(grad)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
