use super::categorical::{Jacobian3, NUM_ACTIONS};
use super::mlp::{backward_into, jvp, FlatParams, ForwardCache};
use crate::error::{Error, Result};

/// A distribution head linearized at one input: the network's forward cache,
/// the output distribution, and its Jacobian with respect to the raw outputs.
#[derive(Clone, Debug)]
pub struct DistributionPoint {
    pub cache: ForwardCache,
    pub probs: [f64; NUM_ACTIONS],
    pub jac: Jacobian3,
}

/// Hessian-vector product of the mean `KL(p_theta || p_frozen)` at `theta = frozen`,
/// plus `damping * v`.
///
/// At the expansion point the KL Hessian reduces exactly to
/// `sum_a (1/p_a) grad p_a grad p_a^T` (the second-order terms cancel because
/// the probabilities sum to one), so the product is one forward-mode pass
/// followed by one reverse-mode pass per point.
pub fn fisher_vector_product(
    params: &FlatParams,
    points: &[DistributionPoint],
    v: &[f64],
    damping: f64,
) -> Result<Vec<f64>> {
    if v.len() != params.len() {
        return Err(Error::Usage(format!(
            "vector has {} entries, policy has {} parameters",
            v.len(),
            params.len()
        )));
    }
    let mut out = vec![0.0; v.len()];
    if points.is_empty() {
        return Ok(v.iter().map(|x| damping * x).collect());
    }
    for pt in points {
        let du = jvp(params, &pt.cache, v);
        let mut weighted = [0.0; NUM_ACTIONS];
        for a in 0..NUM_ACTIONS {
            if pt.probs[a] > 0.0 {
                let dp: f64 = (0..NUM_ACTIONS).map(|b| pt.jac[a][b] * du[b]).sum();
                weighted[a] = dp / pt.probs[a];
            }
        }
        let upstream: Vec<f64> = (0..NUM_ACTIONS)
            .map(|b| (0..NUM_ACTIONS).map(|a| pt.jac[a][b] * weighted[a]).sum())
            .collect();
        backward_into(params, &pt.cache, &upstream, &mut out);
    }
    let scale = 1.0 / points.len() as f64;
    for (o, x) in out.iter_mut().zip(v) {
        *o = *o * scale + damping * x;
    }
    Ok(out)
}
