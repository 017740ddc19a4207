//! Cross-domain feature alignment.
//!
//! Both mechanisms take paired patch features `x_s, x_t` of shape `B×D×G`
//! (same patch index ⇒ same region, courtesy of the shared Z-order scan).
//!
//! * Spatial: a shared depthwise conv along the patch axis, per-patch cosine
//!   similarity of the two convolved maps, both inputs gated by that weight,
//!   MSE between the gated features.
//! * Channel: global mean features feed a strength estimator `α`; channel
//!   segments are interleaved across domains, the per-patch cosine of the
//!   two mixes (pulled toward 1 by `1 − α`) gates both inputs, MSE again.
//!
//! Both losses are always computed from the gated features. Whether the
//! gated or the raw features are handed onward is the caller's choice via
//! `train`: with `train == false` the outputs are the raw inputs.

use crate::error::{dim_err, Error, Result};
use crate::params::{init_uniform, Bound, Linear, ParamKey, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, NodeId};

/// Kernel width of the spatial branch's depthwise conv.
pub const SPATIAL_CONV_WIDTH: usize = 3;

#[derive(Debug, Clone, Copy)]
pub struct SpatialAlignOut {
    pub d_s: NodeId,
    pub d_t: NodeId,
    pub w_spatial: NodeId,
    pub x_s_mod: NodeId,
    pub x_t_mod: NodeId,
    pub l_sp: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelAlignOut {
    pub g_s: NodeId,
    pub g_t: NodeId,
    pub alpha: NodeId,
    pub x_s_mix: NodeId,
    pub x_t_mix: NodeId,
    pub w_channel: NodeId,
    pub w_channel_adapted: NodeId,
    pub f_s_mod: NodeId,
    pub f_t_mod: NodeId,
    pub l_ch: NodeId,
}

/// Learnable state of both alignment branches.
#[derive(Debug, Clone)]
pub struct AlignParams {
    pub spatial_kernel: ParamKey,
    pub alpha_hidden: Linear,
    pub alpha_out: Linear,
    pub segments: usize,
}

impl AlignParams {
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        segments: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        check_segments(d, segments)?;
        let spatial_kernel = store.add(
            "align.spatial_conv.w",
            init_uniform(vec![d, SPATIAL_CONV_WIDTH], SPATIAL_CONV_WIDTH, rng),
        );
        let alpha_hidden = Linear::new(store, "align.alpha.hidden", 2 * d, d, true, rng);
        let alpha_out = Linear::new(store, "align.alpha.out", d, 1, true, rng);
        Ok(Self {
            spatial_kernel,
            alpha_hidden,
            alpha_out,
            segments,
        })
    }

    pub fn num_params(d: usize) -> usize {
        d * SPATIAL_CONV_WIDTH + (2 * d * d + d) + (d + 1)
    }
}

pub fn check_segments(d: usize, segments: usize) -> Result<()> {
    if segments == 0 || d % segments != 0 {
        return Err(Error::Config(format!(
            "feature width D={d} must be divisible by segment count S={segments}"
        )));
    }
    Ok(())
}

fn check_pair(g: &Graph, x_s: NodeId, x_t: NodeId) -> Result<(usize, usize, usize)> {
    let (ss, st) = (g.shape(x_s), g.shape(x_t));
    if ss != st || ss.len() != 3 {
        return Err(dim_err!(
            "alignment inputs {ss:?} and {st:?} must be equal B×D×G"
        ));
    }
    Ok((ss[0], ss[1], ss[2]))
}

/// Gate `x[B×D×G]` by per-patch weights `w[B×G]`.
fn gate(g: &mut Graph, x: NodeId, w: NodeId) -> Result<NodeId> {
    let s = g.shape(w).to_vec();
    let w3 = g.reshape(w, vec![s[0], 1, s[1]])?;
    g.mul(x, w3)
}

/// Spatial alignment with a shared depthwise kernel `kernel[D×W]`.
pub fn cdsa(
    g: &mut Graph,
    x_s: NodeId,
    x_t: NodeId,
    kernel: NodeId,
    train: bool,
) -> Result<SpatialAlignOut> {
    check_pair(g, x_s, x_t)?;
    let d_s = g.dwconv1d(x_s, kernel)?;
    let d_t = g.dwconv1d(x_t, kernel)?;
    let w_spatial = g.cosine_sim(d_s, d_t, 1)?;
    let gated_s = gate(g, x_s, w_spatial)?;
    let gated_t = gate(g, x_t, w_spatial)?;
    let l_sp = g.mse(gated_s, gated_t)?;
    let (x_s_mod, x_t_mod) = if train {
        (gated_s, gated_t)
    } else {
        (x_s, x_t)
    };
    Ok(SpatialAlignOut {
        d_s,
        d_t,
        w_spatial,
        x_s_mod,
        x_t_mod,
        l_sp,
    })
}

/// Interleaves `S` channel segments: `[s₁, t₂, s₃, t₄, …]` and
/// `[t₁, s₂, t₃, s₄, …]`.
pub fn interleave_segments(
    g: &mut Graph,
    x_s: NodeId,
    x_t: NodeId,
    segments: usize,
) -> Result<(NodeId, NodeId)> {
    let d = g.shape(x_s)[1];
    check_segments(d, segments)?;
    let seg_s = g.split(x_s, segments, 1)?;
    let seg_t = g.split(x_t, segments, 1)?;
    let (mut mix_s, mut mix_t) = (Vec::with_capacity(segments), Vec::with_capacity(segments));
    for i in 0..segments {
        if i % 2 == 0 {
            mix_s.push(seg_s[i]);
            mix_t.push(seg_t[i]);
        } else {
            mix_s.push(seg_t[i]);
            mix_t.push(seg_s[i]);
        }
    }
    Ok((g.concat(&mix_s, 1)?, g.concat(&mix_t, 1)?))
}

/// Alignment strength `α = σ(MLP([g_s + g_t ‖ |g_s − g_t|]))`, `B×1`.
pub fn alignment_strength(
    g: &mut Graph,
    p: &Bound,
    ap: &AlignParams,
    g_s: NodeId,
    g_t: NodeId,
) -> Result<NodeId> {
    let sum = g.add(g_s, g_t)?;
    let diff = g.sub(g_s, g_t)?;
    let diff = g.abs(diff);
    let input = g.concat(&[sum, diff], 1)?;
    let h = ap.alpha_hidden.forward(g, p, input)?;
    let h = g.softplus(h);
    let logit = ap.alpha_out.forward(g, p, h)?;
    Ok(g.sigmoid(logit))
}

/// Channel alignment.
pub fn cdca(
    g: &mut Graph,
    p: &Bound,
    ap: &AlignParams,
    x_s: NodeId,
    x_t: NodeId,
    train: bool,
) -> Result<ChannelAlignOut> {
    check_pair(g, x_s, x_t)?;
    let g_s = g.mean(x_s, 2)?;
    let g_t = g.mean(x_t, 2)?;
    let alpha = alignment_strength(g, p, ap, g_s, g_t)?;
    let (x_s_mix, x_t_mix) = interleave_segments(g, x_s, x_t, ap.segments)?;
    let w_channel = g.cosine_sim(x_s_mix, x_t_mix, 1)?;
    // α·w + (1 − α)  ==  α·(w − 1) + 1
    let shifted = g.affine(w_channel, 1.0, -1.0);
    let scaled = g.mul(shifted, alpha)?;
    let w_channel_adapted = g.affine(scaled, 1.0, 1.0);
    let gated_s = gate(g, x_s, w_channel_adapted)?;
    let gated_t = gate(g, x_t, w_channel_adapted)?;
    let l_ch = g.mse(gated_s, gated_t)?;
    let (f_s_mod, f_t_mod) = if train {
        (gated_s, gated_t)
    } else {
        (x_s, x_t)
    };
    Ok(ChannelAlignOut {
        g_s,
        g_t,
        alpha,
        x_s_mix,
        x_t_mix,
        w_channel,
        w_channel_adapted,
        f_s_mod,
        f_t_mod,
        l_ch,
    })
}

/// Per-step loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub loss_cd: f64,
    pub l_sp: f64,
    pub l_ch: f64,
    pub total: f64,
}

/// `total = loss_cd + λ·l_sp + β·l_ch`
pub fn total_loss(
    loss_cd: f64,
    l_sp: f64,
    l_ch: f64,
    lambda: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    for (name, v) in [("loss_cd", loss_cd), ("l_sp", l_sp), ("l_ch", l_ch)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Internal(format!(
                "loss component {name} = {v} must be finite and non-negative"
            )));
        }
    }
    Ok(LossBreakdown {
        loss_cd,
        l_sp,
        l_ch,
        total: loss_cd + lambda * l_sp + beta * l_ch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::gradcheck;
    use crate::tensor::Tensor;

    #[test]
    fn total_loss_weights() {
        let lb = total_loss(1.0, 2.0, 3.0, 0.1, 0.1).unwrap();
        assert!((lb.total - 1.5).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 5.0, 9.0, 0.0, 0.0).unwrap().total, 0.7);
        assert!(matches!(
            total_loss(1.0, -1e-3, 0.0, 0.1, 0.1),
            Err(Error::Internal(_))
        ));
        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.1, 0.1).is_err());
    }

    #[test]
    fn segment_check() {
        assert!(check_segments(8, 4).is_ok());
        assert!(matches!(check_segments(8, 3), Err(Error::Config(_))));
        assert!(check_segments(8, 0).is_err());
    }

    #[test]
    fn two_segment_interleave() {
        // D = 2, S = 2: channels [a1, a2] and [b1, b2]
        let mut g = Graph::new();
        let xs = g.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap());
        let xt = g.constant(Tensor::new(vec![1, 2, 1], vec![10.0, 20.0]).unwrap());
        let (ms, mt) = interleave_segments(&mut g, xs, xt, 2).unwrap();
        assert_eq!(g.value(ms).data(), &[1.0, 20.0]);
        assert_eq!(g.value(mt).data(), &[10.0, 2.0]);
    }

    #[test]
    fn orthogonal_conv_features_zero_everything() {
        // identity kernel, features orthogonal at every patch
        let mut g = Graph::new();
        let k = g.constant(Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let xs = g.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 0.0]).unwrap());
        let xt = g.constant(Tensor::new(vec![1, 2, 1], vec![0.0, 1.0]).unwrap());
        let out = cdsa(&mut g, xs, xt, k, true).unwrap();
        assert_eq!(g.value(out.w_spatial).data(), &[0.0]);
        assert!(g.value(out.x_s_mod).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(out.l_sp).item().unwrap(), 0.0);
    }

    #[test]
    fn inference_is_identity() {
        let mut rng = SplitMix64::new(3);
        let mut store = ParamStore::new();
        let ap = AlignParams::new(&mut store, 4, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xs = g.constant(Tensor::randn(vec![2, 4, 3], &mut rng));
        let xt = g.constant(Tensor::randn(vec![2, 4, 3], &mut rng));
        let sp = cdsa(&mut g, xs, xt, p.id(ap.spatial_kernel), false).unwrap();
        let ch = cdca(&mut g, &p, &ap, xs, xt, false).unwrap();
        assert_eq!(sp.x_s_mod, xs);
        assert_eq!(ch.f_t_mod, xt);
        assert!(g.value(ch.l_ch).item().unwrap() > 0.0);
    }

    #[test]
    fn alpha_gradcheck() {
        let mut rng = SplitMix64::new(8);
        let mut store = ParamStore::new();
        let ap = AlignParams::new(&mut store, 4, 2, &mut rng).unwrap();
        let xs = Tensor::randn(vec![2, 4, 3], &mut rng).with_requires_grad(true);
        let xt = Tensor::randn(vec![2, 4, 3], &mut rng).with_requires_grad(true);
        let rep = gradcheck(
            &[xs, xt],
            |g, ids| {
                let p = store.bind(g, false);
                let out = cdca(g, &p, &ap, ids[0], ids[1], true)?;
                let a = g.sum_all(out.alpha)?;
                g.add(a, out.l_ch)
            },
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel < 1e-5, "{rep:?}");
    }
}
