use std::io::{Read, Write};

use indexmap::IndexMap;

use super::{Gradients, Graph, NodeId, Tensor, TensorError};

/// Ordered collection of named parameter tensors. `requires_grad` on each
/// tensor doubles as its trainable flag.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: IndexMap<String, Tensor>,
}

/// Leaf nodes created for a [`ParamSet`] on one graph.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    ids: IndexMap<String, NodeId>,
}

impl BoundParams {
    /// Names already recorded on a graph, e.g. leaves created by a checker.
    pub fn from_nodes(nodes: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        BoundParams {
            ids: nodes.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<NodeId, TensorError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, TensorError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Moves every parameter of `other` in, prefixing names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet) {
        for (k, v) in other.params {
            self.params.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Parameters whose names start with `prefix`, with the prefix removed.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.values_mut().for_each(|t| t.requires_grad = trainable);
    }

    /// Records one leaf per parameter whose name starts with `prefix`
    /// (all of them for an empty prefix).
    pub fn bind_prefix(&self, g: &mut Graph, prefix: &str) -> BoundParams {
        self.bind_where(g, |name| name.starts_with(prefix))
    }

    /// Records one leaf per parameter whose name satisfies `keep`.
    pub fn bind_where(&self, g: &mut Graph, keep: impl Fn(&str) -> bool) -> BoundParams {
        let ids = self
            .params
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, t)| {
                let mut leaf = Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap();
                leaf.requires_grad = t.requires_grad;
                (k.clone(), g.leaf(leaf))
            })
            .collect();
        BoundParams { ids }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        self.bind_prefix(g, "")
    }

    /// Records every parameter as a constant leaf (inference only).
    pub fn bind_constants(&self, g: &mut Graph) -> BoundParams {
        let ids = self
            .params
            .iter()
            .map(|(k, t)| {
                let leaf = Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap();
                (k.clone(), g.constant(leaf))
            })
            .collect();
        BoundParams { ids }
    }

    /// Adds graph gradients into each trainable parameter's `grad` buffer.
    pub fn accumulate_grads(&mut self, bound: &BoundParams, grads: &Gradients) {
        for (name, id) in bound.iter() {
            if let Some(t) = self.params.get_mut(name) {
                if !t.requires_grad {
                    continue;
                }
                match grads.get(id) {
                    Some(d) => t.accumulate_grad(d),
                    None => {
                        if t.grad.is_none() {
                            t.grad = Some(vec![0.0; t.len()]);
                        }
                    }
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Named records (values only, no trainable flags): u32 count, then per
    /// record u32 name length, UTF-8 name and an `AUT1` tensor block.
    pub fn write_records<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_records<R: Read>(r: &mut R) -> Result<Self, TensorError> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut params = IndexMap::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let len = u32::from_le_bytes(b4) as usize;
            if len > 4096 {
                return Err(TensorError::Format(format!("parameter name of {len} bytes")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| TensorError::Format("parameter name is not UTF-8".into()))?;
            // trainability is a training-time choice; loaded tensors start trainable
            let t = Tensor::read_from(r)?.with_grad(true);
            params.insert(name, t);
        }
        Ok(ParamSet { params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let mut p = ParamSet::new();
        p.insert("a.w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        p.insert("b", Tensor::scalar(-0.5));
        let mut bytes = Vec::new();
        p.write_records(&mut bytes).unwrap();
        let back = ParamSet::read_records(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.iter().map(|(k, _)| k).collect::<Vec<_>>(), vec!["a.w", "b"]);
        assert_eq!(back.get("a.w").unwrap().data(), p.get("a.w").unwrap().data());
    }

    #[test]
    fn frozen_params_collect_no_grad() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::full(vec![2], 1.0).with_grad(true));
        p.insert("frozen", Tensor::full(vec![2], 1.0));
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let s = g.add(b.get("w").unwrap(), b.get("frozen").unwrap()).unwrap();
        let s = g.sum(s);
        let grads = g.backward(s).unwrap();
        p.accumulate_grads(&b, &grads);
        p.accumulate_grads(&b, &grads);
        assert_eq!(p.get("w").unwrap().grad.as_deref(), Some(&[2.0, 2.0][..]));
        assert!(p.get("frozen").unwrap().grad.is_none());
    }
}
