use std::collections::BTreeMap;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Index of a non-trainable state buffer (batchnorm running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct Buffer<F> {
    pub name: String,
    pub value: Tensor<F>,
}

/// Named, ordered parameter collection of one model plus its state buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    buffers: Vec<Buffer<F>>,
    index: BTreeMap<String, usize>,
}

/// True when `name` lies under the dotted `prefix` (`""` matches everything).
pub fn name_matches(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || name == prefix
        || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<F>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<F> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<F> {
        &mut self.buffers[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn params(&self) -> &[Parameter<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<F>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<F>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<F>] {
        &mut self.buffers
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor<F>) {
        let p = &mut self.params[id.0];
        if p.trainable {
            p.grad.add_assign(g);
        }
    }

    /// Sets the trainable flag of every parameter under any of `prefixes`.
    /// Returns how many parameters changed flag.
    pub fn set_trainable<S: AsRef<str>>(&mut self, prefixes: &[S], flag: bool) -> Result<usize> {
        for prefix in prefixes {
            let prefix = prefix.as_ref();
            if !self.params.iter().any(|p| name_matches(&p.name, prefix)) {
                return Err(Error::UnknownModule(prefix.to_string()));
            }
        }
        let mut changed = 0;
        for p in &mut self.params {
            if prefixes.iter().any(|pre| name_matches(&p.name, pre.as_ref())) {
                if p.trainable != flag {
                    changed += 1;
                }
                p.trainable = flag;
                if !flag {
                    p.grad.fill(F::zero());
                }
            }
        }
        Ok(changed)
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.as_str())
            .collect()
    }

    /// Global L2 norm of all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g.f64() * g.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn first_non_finite_grad(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| !p.grad.all_finite())
            .map(|p| p.name.as_str())
    }

    /// Copy of the store in another precision (values and buffers; grads reset).
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                    trainable: p.trainable,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Raw bytes of every parameter value under `prefix`, in store order.
    pub fn snapshot(&self, prefix: &str) -> Vec<(String, Vec<u8>)> {
        self.params
            .iter()
            .filter(|p| name_matches(&p.name, prefix))
            .map(|p| {
                let bytes = p
                    .value
                    .data()
                    .iter()
                    .flat_map(|v| v.f64().to_le_bytes())
                    .collect();
                (p.name.clone(), bytes)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        for n in [
            "text_encoder.embedding",
            "text_encoder2.w",
            "ref_encoder.conv.0.weight",
            "ref_encoder.global_head.proj.weight",
            "ref_encoder.local_head.proj.weight",
        ] {
            s.add(n, Tensor::zeros(&[2]));
        }
        s
    }

    #[test]
    fn prefix_respects_path_components() {
        assert!(name_matches("text_encoder.embedding", "text_encoder"));
        assert!(!name_matches("text_encoder2.w", "text_encoder"));
        assert!(name_matches("anything", ""));
    }

    #[test]
    fn set_trainable_counts_and_rejects_unknown() {
        let mut s = store();
        assert_eq!(s.set_trainable(&["text_encoder"], false).unwrap(), 1);
        assert_eq!(s.set_trainable(&["text_encoder"], false).unwrap(), 0);
        assert!(matches!(
            s.set_trainable(&["decoder"], false),
            Err(Error::UnknownModule(_))
        ));
    }

    #[test]
    fn encoder_minus_global_head() {
        let mut s = store();
        s.set_trainable(&["ref_encoder"], false).unwrap();
        s.set_trainable(&["ref_encoder.global_head"], true).unwrap();
        let enc: Vec<_> = s
            .params()
            .iter()
            .filter(|p| p.name.starts_with("ref_encoder") && p.trainable)
            .map(|p| p.name.clone())
            .collect();
        assert_eq!(enc, vec!["ref_encoder.global_head.proj.weight".to_string()]);
    }

    #[test]
    fn frozen_parameters_ignore_gradients() {
        let mut s = store();
        let id = s.id("text_encoder.embedding").unwrap();
        s.set_trainable(&["text_encoder"], false).unwrap();
        s.accumulate(id, &Tensor::full(&[2], 1.0));
        assert_eq!(s.get(id).grad.data(), &[0.0, 0.0]);
    }
}
