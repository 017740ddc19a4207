//! Central-difference gradient checking.

use super::{Graph, NodeId, Tensor};
use crate::error::Result;
use crate::rng::SplitMix64;

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_abs: f64,
    /// `|analytic − numeric| / max(1, |analytic|, |numeric|)`
    pub max_rel: f64,
    pub checked: usize,
}

/// Compares analytic gradients of the scalar built by `build` against
/// central differences with step `h`, for every input whose tensor has
/// `requires_grad` set.
pub fn gradcheck<F>(inputs: &[Tensor], build: F, h: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = ids
        .iter()
        .map(|&id| g.grad(id).map(|s| s.to_vec()))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        g.value(loss).item()
    };

    let mut report = GradcheckReport {
        max_abs: 0.0,
        max_rel: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let zeros = vec![0.0; t.numel()];
        let an = analytic[i].as_deref().unwrap_or(&zeros);
        for e in 0..t.numel() {
            let orig = t.data()[e];
            work[i].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let abs = (an[e] - numeric).abs();
            let rel = abs / 1f64.max(an[e].abs()).max(numeric.abs());
            report.max_abs = report.max_abs.max(abs);
            report.max_rel = report.max_rel.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// `Σ out ⊙ R` for a fixed random `R`, turning any output into a scalar
/// whose gradient exercises every output element.
pub fn random_projection(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = SplitMix64::new(seed);
    let shape = g.shape(out).to_vec();
    let r = g.constant(Tensor::randn(shape, &mut rng));
    let prod = g.mul(out, r)?;
    g.sum_all(prod)
}
