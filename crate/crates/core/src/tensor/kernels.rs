//! Raw slice kernels shared by the graph ops.

use crate::error::{dim_err, Result};

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Numpy-style broadcast of two shapes (right-aligned, each dim equal or 1).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err!("shapes {a:?} and {b:?} do not broadcast")),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out_shape`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let offset = out_shape.len() - shape.len();
    let mut strides = vec![0; out_shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Access pattern for a binary op between two broadcast-compatible shapes.
#[derive(Debug, Clone)]
pub enum Broadcast {
    Same,
    /// Right operand has one element.
    Scalar,
    /// Right operand's shape is a suffix of the left's.
    Trailing(usize),
    General {
        out_shape: Vec<usize>,
        a_strides: Vec<usize>,
        b_strides: Vec<usize>,
    },
}

impl Broadcast {
    pub fn plan(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
        let out = broadcast_shape(a, b)?;
        let na: usize = a.iter().product();
        let nb: usize = b.iter().product();
        let plan = if a == b {
            Broadcast::Same
        } else if nb == 1 && out.as_slice() == a {
            Broadcast::Scalar
        } else if out.as_slice() == a && a.ends_with(b) && nb > 0 && na % nb == 0 {
            Broadcast::Trailing(nb)
        } else {
            Broadcast::General {
                a_strides: broadcast_strides(a, &out),
                b_strides: broadcast_strides(b, &out),
                out_shape: out.clone(),
            }
        };
        Ok((out, plan))
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element.
    pub fn for_each(&self, out_len: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Broadcast::Same => (0..out_len).for_each(|i| f(i, i, i)),
            Broadcast::Scalar => (0..out_len).for_each(|i| f(i, i, 0)),
            Broadcast::Trailing(nb) => (0..out_len).for_each(|i| f(i, i, i % nb)),
            Broadcast::General {
                out_shape,
                a_strides,
                b_strides,
            } => {
                let rank = out_shape.len();
                let mut idx = vec![0usize; rank];
                let (mut ia, mut ib) = (0usize, 0usize);
                for o in 0..out_len {
                    f(o, ia, ib);
                    for ax in (0..rank).rev() {
                        idx[ax] += 1;
                        ia += a_strides[ax];
                        ib += b_strides[ax];
                        if idx[ax] < out_shape[ax] {
                            break;
                        }
                        ia -= a_strides[ax] * out_shape[ax];
                        ib -= b_strides[ax] * out_shape[ax];
                        idx[ax] = 0;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(
            broadcast_shape(&[2, 3, 4], &[2, 1, 4]).unwrap(),
            vec![2, 3, 4]
        );
        assert_eq!(broadcast_shape(&[2, 3], &[]).unwrap(), vec![2, 3]);
        assert!(broadcast_shape(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn general_plan_matches_manual_indexing() {
        let (out, plan) = Broadcast::plan(&[2, 3, 4], &[2, 1, 4]).unwrap();
        assert_eq!(out, vec![2, 3, 4]);
        let mut seen = Vec::new();
        plan.for_each(24, |o, a, b| seen.push((o, a, b)));
        for (o, a, b) in seen {
            let (i, j, k) = (o / 12, (o / 4) % 3, o % 4);
            assert_eq!(a, o);
            assert_eq!(b, i * 4 + k, "at {i},{j},{k}");
        }
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul_acc(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }
}
