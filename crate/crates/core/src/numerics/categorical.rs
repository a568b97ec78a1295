use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 3;

/// Lower bound applied to every legal action's probability after softmax.
pub const PROB_FLOOR: f64 = 1e-6;

pub type Jacobian3 = [[f64; NUM_ACTIONS]; NUM_ACTIONS];

/// A distribution over the three orchestration actions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Categorical(pub [f64; NUM_ACTIONS]);

impl Categorical {
    pub fn new(probs: [f64; NUM_ACTIONS]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::numeric("categorical", format!("invalid entries {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::numeric("categorical", format!("sums to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform_over(legal: [bool; NUM_ACTIONS]) -> Self {
        let n = legal.iter().filter(|l| **l).count() as f64;
        Self(legal.map(|l| if l { 1.0 / n } else { 0.0 }))
    }

    pub fn probs(&self) -> &[f64; NUM_ACTIONS] {
        &self.0
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..NUM_ACTIONS {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Softmax over the legal logits, floored at [`PROB_FLOOR`] and renormalized.
/// Returns the distribution and its Jacobian `d probs / d logits`.
pub fn masked_softmax(logits: &[f64], legal: [bool; NUM_ACTIONS]) -> (Categorical, Jacobian3) {
    let max = (0..NUM_ACTIONS)
        .filter(|&i| legal[i])
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; NUM_ACTIONS];
    for i in 0..NUM_ACTIONS {
        if legal[i] {
            p[i] = (logits[i] - max).exp();
        }
    }
    let z: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= z;
    }

    let mut floored = p;
    let mut pass = [0.0; NUM_ACTIONS];
    for i in 0..NUM_ACTIONS {
        if legal[i] {
            if p[i] < PROB_FLOOR {
                floored[i] = PROB_FLOOR;
            } else {
                pass[i] = 1.0;
            }
        }
    }
    let s: f64 = floored.iter().sum();
    let out = floored.map(|v| v / s);

    // d out / d floored, times floor pass-through, times softmax Jacobian.
    let mut jac = [[0.0; NUM_ACTIONS]; NUM_ACTIONS];
    for a in 0..NUM_ACTIONS {
        if !legal[a] {
            continue;
        }
        for b in 0..NUM_ACTIONS {
            if !legal[b] {
                continue;
            }
            let mut acc = 0.0;
            for c in 0..NUM_ACTIONS {
                if !legal[c] || pass[c] == 0.0 {
                    continue;
                }
                let d_out = (if a == c { 1.0 } else { 0.0 } - out[a]) / s;
                let d_soft = p[c] * (if c == b { 1.0 } else { 0.0 } - p[b]);
                acc += d_out * d_soft;
            }
            jac[a][b] = acc;
        }
    }
    (Categorical(out), jac)
}

/// `KL(p || q) = sum_a p_a ln(p_a / q_a)`.
pub fn kl_categorical(p: &Categorical, q: &Categorical) -> Result<f64> {
    let mut kl = 0.0;
    for i in 0..NUM_ACTIONS {
        let (pi, qi) = (p.0[i], q.0[i]);
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::Usage(format!(
                "KL undefined: q has no mass on action {i} where p = {pi}"
            )));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}
