use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{GradError, Graph, Result, Tensor, Var};

/// Ordered collection of named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its slot index.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies every tensor into `g` as a parameter leaf, in slot order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Copies every tensor into `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Gradients of the leaves produced by [`ParamSet::bind`].
    pub fn grads(&self, g: &Graph, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Overwrites values from a checkpoint whose names and shapes match exactly.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.tensors.len() != self.tensors.len() {
            return Err(GradError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                ckpt.tensors.len()
            )));
        }
        let mut loaded = Vec::with_capacity(self.tensors.len());
        for ((name, current), entry) in self.names.iter().zip(&self.tensors).zip(&ckpt.tensors) {
            if &entry.name != name {
                return Err(GradError::Checkpoint(format!(
                    "expected tensor `{name}`, found `{}`",
                    entry.name
                )));
            }
            if entry.shape != current.shape() {
                return Err(GradError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    entry.shape,
                    current.shape()
                )));
            }
            loaded.push(Tensor::new(entry.shape.clone(), entry.data.clone())?);
        }
        self.tensors = loaded;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = Checkpoint::load(path)?;
        self.load_checkpoint(&ckpt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON file of named tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::matrix(2, 2, vec![0.1, -0.2, 1e-17, 3.0]).unwrap());
        p.insert("b", Tensor::row(vec![std::f64::consts::PI, -1.0 / 3.0]));
        p
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("ndgrad-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.json");
        let p = sample();
        p.save(&path).unwrap();
        let mut q = sample();
        q.tensors_mut()[0].data_mut()[0] = 9.0;
        q.load(&path).unwrap();
        assert_eq!(p, q);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn load_rejects_wrong_names_and_shapes() {
        let p = sample();
        let mut ckpt = p.to_checkpoint();
        ckpt.tensors[1].name = "bias".into();
        assert!(sample().load_checkpoint(&ckpt).is_err());

        let mut ckpt = p.to_checkpoint();
        ckpt.tensors[0].shape = vec![4, 1];
        let err = sample().load_checkpoint(&ckpt).unwrap_err();
        assert!(err.to_string().contains("shape"));
    }
}
