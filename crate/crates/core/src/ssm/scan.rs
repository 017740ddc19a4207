//! Selective-scan recurrence and its analytic reverse pass.
//!
//! Per batch row `b` and channel `d`, with state `h₀ = 0`:
//!
//! ```text
//!   Ā_t = exp(Δ_t · A_d)        (zero-order hold)
//!   B̄_t = Δ_t · B_t             (Euler)
//!   h_t = Ā_t ⊙ h_{t-1} + B̄_t · x_t
//!   y_t = ⟨C_t, h_t⟩ + skip_d · x_t
//! ```
//!
//! Cost is `O(B · L · D · N)`; all hidden states are kept for the backward
//! sweep.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// Borrowed flat inputs, laid out as in [`crate::tensor::Graph::selective_scan`].
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a> {
    pub x: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub skip: &'a [f64],
}

#[derive(Debug, Clone, Default)]
pub struct ScanGrads {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub skip: Vec<f64>,
}

/// Forward recurrence. `states` receives `h_t` for every `(b, t, d)` as a
/// `B×L×D×N` block; `y` receives the `B×L×D` output.
pub fn scan_forward(dims: &ScanDims, inp: ScanInputs<'_>, states: &mut [f64], y: &mut [f64]) {
    let ScanDims {
        batch,
        len,
        channels,
        state,
    } = *dims;
    let mut h = vec![0.0; channels * state];
    for bi in 0..batch {
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..len {
            let row = bi * len + t;
            let bt = &inp.b[row * state..(row + 1) * state];
            let ct = &inp.c[row * state..(row + 1) * state];
            for d in 0..channels {
                let e = row * channels + d;
                let (xv, dt) = (inp.x[e], inp.delta[e]);
                let hd = &mut h[d * state..(d + 1) * state];
                let ad = &inp.a[d * state..(d + 1) * state];
                let mut acc = 0.0;
                for n in 0..state {
                    hd[n] = (dt * ad[n]).exp() * hd[n] + dt * bt[n] * xv;
                    acc += ct[n] * hd[n];
                }
                states[e * state..(e + 1) * state].copy_from_slice(hd);
                y[e] = acc + inp.skip[d] * xv;
            }
        }
    }
}

/// Reverse sweep given the upstream gradient `gy[B×L×D]`.
pub fn scan_backward(
    dims: &ScanDims,
    inp: ScanInputs<'_>,
    states: &[f64],
    gy: &[f64],
) -> ScanGrads {
    let ScanDims {
        batch,
        len,
        channels,
        state,
    } = *dims;
    let mut g = ScanGrads {
        x: vec![0.0; inp.x.len()],
        delta: vec![0.0; inp.delta.len()],
        a: vec![0.0; inp.a.len()],
        b: vec![0.0; inp.b.len()],
        c: vec![0.0; inp.c.len()],
        skip: vec![0.0; inp.skip.len()],
    };
    // carried dL/dh_t from step t+1, per (d, n)
    let mut dh = vec![0.0; channels * state];
    for bi in 0..batch {
        dh.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..len).rev() {
            let row = bi * len + t;
            for d in 0..channels {
                let e = row * channels + d;
                let (xv, dt, dy) = (inp.x[e], inp.delta[e], gy[e]);
                g.skip[d] += dy * xv;
                let mut gx = inp.skip[d] * dy;
                let mut gdt = 0.0;
                let h_t = &states[e * state..(e + 1) * state];
                for n in 0..state {
                    let an = inp.a[d * state + n];
                    let bn = inp.b[row * state + n];
                    g.c[row * state + n] += dy * h_t[n];
                    let dhn = dh[d * state + n] + dy * inp.c[row * state + n];
                    let abar = (dt * an).exp();
                    let h_prev = if t == 0 {
                        0.0
                    } else {
                        states[(e - channels) * state + n]
                    };
                    let dabar = dhn * h_prev;
                    gdt += dabar * abar * an + dhn * bn * xv;
                    g.a[d * state + n] += dabar * abar * dt;
                    g.b[row * state + n] += dhn * dt * xv;
                    gx += dhn * dt * bn;
                    dh[d * state + n] = dhn * abar;
                }
                g.x[e] += gx;
                g.delta[e] += gdt;
            }
        }
    }
    g
}
