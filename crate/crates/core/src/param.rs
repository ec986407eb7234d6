//! Named trainable parameters.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::rng::{self, StreamRng};
use crate::{Error, Real, Result, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Accumulated gradient; `None` until the first backward pass reaches it.
    pub grad: Option<Tensor<F>>,
    /// Frozen parameters are never touched by the optimizer.
    pub frozen: bool,
}

/// Ordered collection of parameters, addressed by [`ParamId`] or by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: BTreeMap<String, ParamId>,
}

/// Parameter initialisation helper carrying the RNG and default scale.
pub struct Init<'a> {
    pub rng: &'a mut StreamRng,
    pub std: f64,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Registers a parameter. Panics on duplicate names, which can only come
    /// from a wiring bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        let id = ParamId(self.params.len());
        let prev = self.by_name.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            frozen: false,
        });
        id
    }

    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], init: &mut Init<'_>) -> ParamId {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = F::of(rng::normal(init.rng) * init.std);
        }
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, F::one()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    /// FNV-1a over names and value bits of the parameters under `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            eat(p.name.as_bytes());
            for v in p.value.data() {
                eat(&Real::to_f64(*v).to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    frozen: p.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn snapshot(&self) -> Vec<Tensor<F>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor<F>]) {
        assert_eq!(values.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value.clone_from(v);
        }
    }

    /// Copies values for every name present in both stores; returns the
    /// number of parameters copied.
    pub fn copy_shared_from(&mut self, other: &ParamStore<F>) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(src) = other.by_name(&p.name) {
                if src.value.shape() != p.value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "copy_shared_from",
                        lhs: p.value.shape().to_vec(),
                        rhs: src.value.shape().to_vec(),
                    });
                }
                p.value.clone_from(&src.value);
                n += 1;
            }
        }
        Ok(n)
    }

    /// Replaces values from `(name, tensor)` records. Every parameter must be
    /// covered exactly once.
    pub fn load_named(&mut self, records: Vec<(String, Tensor<F>)>) -> Result<()> {
        let mut missing: BTreeMap<&str, ()> = self.names().map(|n| (n, ())).collect();
        let mut extra = Vec::new();
        for (name, _) in &records {
            match self.by_name.get(name) {
                Some(_) => {
                    missing.remove(name.as_str());
                }
                None => extra.push(name.clone()),
            }
        }
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::CheckpointMismatch {
                missing: missing.keys().map(|s| s.to_string()).collect(),
                extra,
            });
        }
        for (name, value) in records {
            let id = self.by_name[&name];
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_named",
                    lhs: p.value.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            p.value = value;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn checksum_tracks_prefix_only() {
        let mut s = ParamStore::<f32>::new();
        s.add_zeros("lm.a", &[2]);
        let b = s.add_zeros("vlm.b", &[2]);
        let lm = s.checksum("lm.");
        s.get_mut(b).value.data_mut()[0] = 1.0;
        assert_eq!(lm, s.checksum("lm."));
        assert_ne!(s.checksum(""), {
            let mut t = s.clone();
            t.get_mut(b).value.data_mut()[0] = 2.0;
            t.checksum("")
        });
    }

    #[test]
    fn load_named_reports_missing_and_extra() {
        let mut s = ParamStore::<f32>::new();
        s.add_zeros("a", &[1]);
        s.add_zeros("b", &[1]);
        let err = s
            .load_named(vec![("a".into(), Tensor::zeros(&[1])), ("c".into(), Tensor::zeros(&[1]))])
            .unwrap_err();
        assert_eq!(
            err,
            Error::CheckpointMismatch {
                missing: vec!["b".into()],
                extra: vec!["c".into()]
            }
        );
    }
}
