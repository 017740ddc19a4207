//! Named parameter storage and small reusable layers.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey(usize);

/// Ordered collection of learnable tensors. Order is insertion order and is
/// the order used in checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamKey {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate param {name}"
        );
        self.entries.push((name, t.with_requires_grad(true)));
        ParamKey(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, key: ParamKey) -> &Tensor {
        &self.entries[key.0].1
    }

    pub fn get_mut(&mut self, key: ParamKey) -> &mut Tensor {
        &mut self.entries[key.0].1
    }

    pub fn name(&self, key: ParamKey) -> &str {
        &self.entries[key.0].0
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> {
        (0..self.entries.len()).map(ParamKey)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap(),
                )
            })
            .collect()
    }

    /// Overwrites values from a checkpoint. Names, order and shapes must
    /// match exactly.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Version(format!(
                "checkpoint holds {} tensors, model expects {}",
                named.len(),
                self.entries.len()
            )));
        }
        for ((name, t), (want, cur)) in named.iter().zip(self.entries.iter_mut()) {
            if name != want || t.shape() != cur.shape() {
                return Err(Error::Version(format!(
                    "checkpoint tensor `{name}` {:?} does not match model tensor `{want}` {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
            cur.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|(_, t)| {
                let leaf = Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap();
                g.leaf(leaf.with_requires_grad(trainable))
            })
            .collect();
        Bound { ids }
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    /// Handles for leaves already in a graph, in store order.
    pub fn from_ids(ids: Vec<NodeId>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn id(&self, key: ParamKey) -> NodeId {
        self.ids[key.0]
    }

    /// Gradient of every parameter after `g.backward`, zeros where none
    /// reached it.
    pub fn grads(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.ids
            .iter()
            .map(|&id| match g.grad(id) {
                Some(gr) => gr.to_vec(),
                None => vec![0.0; g.value(id).numel()],
            })
            .collect()
    }
}

/// Uniform in `±1/√fan_in`.
pub fn init_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut SplitMix64) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Affine map `x·W + b` on row-major 2-D input.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamKey,
    pub b: Option<ParamKey>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            init_uniform(vec![fan_in, fan_out], fan_in, rng),
        );
        let b = bias.then(|| {
            store.add(
                format!("{name}.b"),
                init_uniform(vec![fan_out], fan_in, rng),
            )
        });
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, p.id(self.w))?;
        match self.b {
            Some(b) => g.add(y, p.id(b)),
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + if self.b.is_some() { self.fan_out } else { 0 }
    }

    /// Multiply-adds for `rows` input rows.
    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.fan_in * self.fan_out) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_named_checks_names_and_shapes() {
        let mut rng = SplitMix64::new(1);
        let mut a = ParamStore::new();
        Linear::new(&mut a, "fc", 3, 4, true, &mut rng);
        let saved = a.to_named();
        let mut b = ParamStore::new();
        Linear::new(&mut b, "fc", 3, 4, true, &mut rng);
        assert_ne!(a, b);
        b.load_named(&saved).unwrap();
        assert_eq!(a.to_named(), b.to_named());

        let mut wrong = ParamStore::new();
        Linear::new(&mut wrong, "fc", 3, 5, true, &mut rng);
        assert!(matches!(wrong.load_named(&saved), Err(Error::Version(_))));
        assert_eq!(a.num_scalars(), 16);
    }
}
