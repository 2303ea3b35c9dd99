use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// A named parameter block: row-major data with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub type TensorMap = BTreeMap<String, Tensor>;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: alloc::vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: alloc::vec![data.len()], data }
    }

    /// Looks `name` up and checks its shape.
    pub fn fetch<'a>(map: &'a TensorMap, name: &str, shape: &[usize]) -> Result<&'a Tensor> {
        let t = map
            .get(name)
            .ok_or_else(|| invalid(alloc::format!("checkpoint is missing tensor `{name}`")))?;
        if t.shape != shape {
            return Err(invalid(alloc::format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape, shape
            )));
        }
        Ok(t)
    }
}

/// Export and import of parameters (and optimizer state) as named tensors.
pub trait Checkpointable {
    fn save_tensors(&self, prefix: &str, out: &mut TensorMap);
    fn load_tensors(&mut self, prefix: &str, map: &TensorMap) -> Result<()>;
}
