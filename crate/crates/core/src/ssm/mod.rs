//! Selective-scan (Mamba-style) sequence blocks over patch tokens.
//!
//! Block layout, on `x[B×L×D]`:
//!
//! ```text
//!   u  = SiLU(dwconv(in_proj(x)))          B×L×Di
//!   Δ  = softplus(up(down(u)) + Δ_bias)     B×L×Di
//!   y  = scan(u, Δ, −exp(a_log), b_proj(u), c_proj(u), skip)
//!   x' = x + out_proj(y ⊙ SiLU(gate_proj(x)))
//! ```

pub mod scan;

use crate::error::{dim_err, Result};
use crate::params::{init_uniform, Bound, Linear, ParamKey, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, NodeId, Tensor};

/// Width of the depthwise convolution inside each block.
pub const BLOCK_CONV_WIDTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsmDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
}

impl SsmDims {
    /// Standard expansion: `Di = 2·D`, `rank = ⌈D/16⌉`.
    pub fn standard(d_model: usize, d_state: usize) -> Self {
        Self {
            d_model,
            d_inner: 2 * d_model,
            d_state,
            dt_rank: d_model.div_ceil(16),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SsmBlockParams {
    pub dims: SsmDims,
    pub in_proj: Linear,
    pub gate_proj: Linear,
    pub conv_kernel: ParamKey,
    pub conv_bias: ParamKey,
    pub delta_down: Linear,
    pub delta_up: Linear,
    pub delta_bias: ParamKey,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub a_log: ParamKey,
    pub skip_d: ParamKey,
    pub out_proj: Linear,
}

impl SsmBlockParams {
    pub fn new(store: &mut ParamStore, name: &str, dims: SsmDims, rng: &mut SplitMix64) -> Self {
        let SsmDims {
            d_model,
            d_inner,
            d_state,
            dt_rank,
        } = dims;
        let in_proj = Linear::new(
            store,
            &format!("{name}.in_proj"),
            d_model,
            d_inner,
            true,
            rng,
        );
        let gate_proj = Linear::new(
            store,
            &format!("{name}.gate_proj"),
            d_model,
            d_inner,
            true,
            rng,
        );
        let conv_kernel = store.add(
            format!("{name}.conv.w"),
            init_uniform(vec![d_inner, BLOCK_CONV_WIDTH], BLOCK_CONV_WIDTH, rng),
        );
        let conv_bias = store.add(
            format!("{name}.conv.b"),
            init_uniform(vec![d_inner, 1], BLOCK_CONV_WIDTH, rng),
        );
        let delta_down = Linear::new(
            store,
            &format!("{name}.delta_down"),
            d_inner,
            dt_rank,
            false,
            rng,
        );
        let delta_up = Linear::new(
            store,
            &format!("{name}.delta_up"),
            dt_rank,
            d_inner,
            false,
            rng,
        );
        // softplus(bias) log-uniform in [1e-3, 0.1]
        let delta_bias = store.add(
            format!("{name}.delta_bias"),
            Tensor::from_fn(vec![d_inner], |_| {
                let dt = (rng.uniform(0.001f64.ln(), 0.1f64.ln())).exp();
                dt.exp_m1().ln()
            }),
        );
        let b_proj = Linear::new(
            store,
            &format!("{name}.b_proj"),
            d_inner,
            d_state,
            false,
            rng,
        );
        let c_proj = Linear::new(
            store,
            &format!("{name}.c_proj"),
            d_inner,
            d_state,
            false,
            rng,
        );
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::from_fn(vec![d_inner, d_state], |i| {
                ((i % d_state) as f64 + 1.0).ln()
            }),
        );
        let skip_d = store.add(format!("{name}.skip_d"), Tensor::ones(vec![d_inner]));
        let out_proj = Linear::new(
            store,
            &format!("{name}.out_proj"),
            d_inner,
            d_model,
            true,
            rng,
        );
        Self {
            dims,
            in_proj,
            gate_proj,
            conv_kernel,
            conv_bias,
            delta_down,
            delta_up,
            delta_bias,
            b_proj,
            c_proj,
            a_log,
            skip_d,
            out_proj,
        }
    }

    pub fn linears(&self) -> [&Linear; 7] {
        [
            &self.in_proj,
            &self.gate_proj,
            &self.delta_down,
            &self.delta_up,
            &self.b_proj,
            &self.c_proj,
            &self.out_proj,
        ]
    }

    /// Closed-form parameter count.
    pub fn num_params(&self) -> usize {
        let SsmDims {
            d_model: d,
            d_inner: di,
            d_state: n,
            dt_rank: r,
        } = self.dims;
        // in/gate proj + conv + delta low-rank + delta bias + b/c proj + a_log + skip + out proj
        2 * (d * di + di)
            + di * BLOCK_CONV_WIDTH
            + di
            + 2 * di * r
            + di
            + 2 * di * n
            + di * n
            + di
            + di * d
            + d
    }

    /// Multiply-adds for one forward over `tokens = B·L` positions.
    pub fn macs(&self, tokens: usize) -> u64 {
        let SsmDims {
            d_inner: di,
            d_state: n,
            ..
        } = self.dims;
        let linear: u64 = self.linears().iter().map(|l| l.macs(tokens)).sum();
        let conv = (tokens * di * BLOCK_CONV_WIDTH) as u64;
        // per state element: decay, input and readout products
        let scan = (tokens * di * n * 3) as u64;
        linear + conv + scan
    }
}

/// One residual block on `x[B×L×D]`.
pub fn mamba_block(g: &mut Graph, p: &Bound, blk: &SsmBlockParams, x: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != blk.dims.d_model {
        return Err(dim_err!(
            "mamba block of width {} applied to {:?}",
            blk.dims.d_model,
            shape
        ));
    }
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let di = blk.dims.d_inner;
    let xf = g.reshape(x, vec![b * l, d])?;

    let u = blk.in_proj.forward(g, p, xf)?;
    let u = g.reshape(u, vec![b, l, di])?;
    let ut = g.transpose_last(u)?;
    let conv = g.dwconv1d(ut, p.id(blk.conv_kernel))?;
    let conv = g.add(conv, p.id(blk.conv_bias))?;
    let conv = g.transpose_last(conv)?;
    let u = g.silu(conv);
    let uf = g.reshape(u, vec![b * l, di])?;

    let dt = blk.delta_down.forward(g, p, uf)?;
    let dt = blk.delta_up.forward(g, p, dt)?;
    let dt = g.add(dt, p.id(blk.delta_bias))?;
    let dt = g.softplus(dt);
    let dt = g.reshape(dt, vec![b, l, di])?;

    let bs = blk.b_proj.forward(g, p, uf)?;
    let bs = g.reshape(bs, vec![b, l, blk.dims.d_state])?;
    let cs = blk.c_proj.forward(g, p, uf)?;
    let cs = g.reshape(cs, vec![b, l, blk.dims.d_state])?;
    let a = g.exp(p.id(blk.a_log));
    let a = g.neg(a);

    let y = g.selective_scan(u, dt, a, bs, cs, p.id(blk.skip_d))?;
    let yf = g.reshape(y, vec![b * l, di])?;
    let gate = blk.gate_proj.forward(g, p, xf)?;
    let gate = g.silu(gate);
    let yg = g.mul(yf, gate)?;
    let out = blk.out_proj.forward(g, p, yg)?;
    let out = g.reshape(out, vec![b, l, d])?;
    g.add(x, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck, random_projection};

    /// Step-by-step interpreter written independently of `scan_forward`:
    /// one channel at a time, state as a fresh vector per step.
    pub(crate) fn naive_scan(
        x: &Tensor,
        delta: &Tensor,
        a: &Tensor,
        b: &Tensor,
        c: &Tensor,
        skip: &Tensor,
    ) -> Tensor {
        let (bn, l, dn) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = a.shape()[1];
        let mut y = Tensor::zeros(vec![bn, l, dn]);
        for bi in 0..bn {
            for d in 0..dn {
                let mut h = vec![0.0; n];
                for t in 0..l {
                    let dt = delta.at(&[bi, t, d]);
                    let xv = x.at(&[bi, t, d]);
                    h = (0..n)
                        .map(|k| (dt * a.at(&[d, k])).exp() * h[k] + dt * b.at(&[bi, t, k]) * xv)
                        .collect();
                    let out: f64 =
                        (0..n).map(|k| c.at(&[bi, t, k]) * h[k]).sum::<f64>() + skip.at(&[d]) * xv;
                    y.data_mut()[(bi * l + t) * dn + d] = out;
                }
            }
        }
        y
    }

    fn scan_inputs(rng: &mut SplitMix64, b: usize, l: usize, d: usize, n: usize) -> Vec<Tensor> {
        vec![
            Tensor::randn(vec![b, l, d], rng),
            Tensor::uniform(vec![b, l, d], 0.05, 0.8, rng),
            Tensor::uniform(vec![d, n], -2.0, -0.1, rng),
            Tensor::randn(vec![b, l, n], rng),
            Tensor::randn(vec![b, l, n], rng),
            Tensor::randn(vec![d], rng),
        ]
    }

    fn run_scan(inputs: &[Tensor]) -> Tensor {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = g
            .selective_scan(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5])
            .unwrap();
        g.value(y).clone()
    }

    #[test]
    fn near_integrator_limit_is_cumulative_sum() {
        let l = 6;
        let x = Tensor::new(vec![1, l, 1], vec![1.0, -2.0, 0.5, 3.0, 0.25, -1.0]).unwrap();
        let inputs = vec![
            x.clone(),
            Tensor::ones(vec![1, l, 1]),
            Tensor::full(vec![1, 1], -1e-12),
            Tensor::ones(vec![1, l, 1]),
            Tensor::ones(vec![1, l, 1]),
            Tensor::zeros(vec![1]),
        ];
        let y = run_scan(&inputs);
        let mut acc = 0.0;
        for t in 0..l {
            acc += x.data()[t];
            assert!((y.data()[t] - acc).abs() < 1e-9);
        }
    }

    #[test]
    fn single_step_closed_form() {
        let mut rng = SplitMix64::new(3);
        let inp = scan_inputs(&mut rng, 1, 1, 2, 3);
        let y = run_scan(&inp);
        for d in 0..2 {
            let dt = inp[1].data()[d];
            let xv = inp[0].data()[d];
            let expect: f64 = (0..3)
                .map(|k| inp[4].data()[k] * dt * inp[3].data()[k] * xv)
                .sum::<f64>()
                + inp[5].data()[d] * xv;
            assert!((y.data()[d] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_interpreter_and_gradcheck() {
        for seed in 0..5 {
            let mut rng = SplitMix64::new(seed);
            let inp = scan_inputs(&mut rng, 1, 6, 2, 3);
            let y = run_scan(&inp);
            let oracle = naive_scan(&inp[0], &inp[1], &inp[2], &inp[3], &inp[4], &inp[5]);
            assert!(y.max_abs_diff(&oracle) < 1e-10);

            let grad_inputs: Vec<Tensor> = inp
                .into_iter()
                .map(|t| t.with_requires_grad(true))
                .collect();
            let rep = gradcheck(
                &grad_inputs,
                |g, ids| {
                    let y = g.selective_scan(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5])?;
                    random_projection(g, y, 77)
                },
                1e-5,
            )
            .unwrap();
            assert!(rep.max_rel < 1e-5, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let mut rng = SplitMix64::new(1);
        let mut inp = scan_inputs(&mut rng, 1, 3, 2, 2);
        inp[1].data_mut()[4] = 0.0;
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inp.iter().map(|t| g.constant(t.clone())).collect();
        let err = g
            .selective_scan(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5])
            .unwrap_err();
        assert!(matches!(err, crate::Error::Domain(_)));
    }

    fn block(d: usize, n: usize, seed: u64) -> (ParamStore, SsmBlockParams) {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        let blk = SsmBlockParams::new(&mut store, "blk", SsmDims::standard(d, n), &mut rng);
        (store, blk)
    }

    #[test]
    fn zero_out_proj_is_identity() {
        let (mut store, blk) = block(8, 4, 5);
        for key in [blk.out_proj.w, blk.out_proj.b.unwrap()] {
            store
                .get_mut(key)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let mut rng = SplitMix64::new(6);
        let x = Tensor::randn(vec![2, 5, 8], &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let y = mamba_block(&mut g, &p, &blk, xi).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_delta() {
        let (mut store, blk) = block(8, 4, 9);
        let biases = [
            blk.in_proj.b.unwrap(),
            blk.gate_proj.b.unwrap(),
            blk.out_proj.b.unwrap(),
            blk.conv_bias,
        ];
        for key in biases {
            store
                .get_mut(key)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xi = g.constant(Tensor::zeros(vec![1, 7, 8]));
        let y = mamba_block(&mut g, &p, &blk, xi).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_form_param_count() {
        let (store, blk) = block(32, 16, 1);
        assert_eq!(store.num_scalars(), blk.num_params());
    }

    #[test]
    fn block_is_causal_and_differentiable() {
        let (store, blk) = block(4, 3, 2);
        let mut rng = SplitMix64::new(4);
        let x = Tensor::randn(vec![1, 8, 4], &mut rng);
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let xi = g.constant(x.clone());
            let y = mamba_block(&mut g, &p, &blk, xi).unwrap();
            g.value(y).clone()
        };
        let base = eval(&x);
        let mut pert = x.clone();
        // perturb position 5; the width-3 conv looks one step ahead, so outputs
        // up to t = 3 must be untouched
        for d in 0..4 {
            pert.data_mut()[5 * 4 + d] += 1.0;
        }
        let moved = eval(&pert);
        for t in 0..4 {
            for d in 0..4 {
                assert_eq!(base.at(&[0, t, d]), moved.at(&[0, t, d]), "t={t}");
            }
        }

        let rep = gradcheck(
            &[x.with_requires_grad(true)],
            |g, ids| {
                let p = store.bind(g, false);
                let y = mamba_block(g, &p, &blk, ids[0])?;
                random_projection(g, y, 3)
            },
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel < 1e-5, "{rep:?}");
    }
}
