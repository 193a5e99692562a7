//! Named-tensor JSON format for weights and golden activations.
//!
//! ```json
//! {"tensors": [{"name": "layers.0.wq", "shape": [64, 64], "values": [0.1, ...]}]}
//! ```
//!
//! Values are row-major decimals printed with shortest round-trip precision,
//! so a save/load cycle reproduces every `f64` bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::hyperattention::Params;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            values,
        }
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self::new(name, vec![m.rows, m.cols], m.data.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TensorFile {
    pub tensors: Vec<NamedTensor>,
}

pub fn collect_params(p: &impl Params, prefix: &str) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    p.visit(prefix, &mut |name, shape, values| {
        out.push(NamedTensor::new(name, shape.to_vec(), values.to_vec()))
    });
    out
}

/// Overwrites every parameter of `p` from `tensors`, matched by name and shape.
pub fn load_params(p: &mut impl Params, prefix: &str, tensors: &[NamedTensor]) -> Result<()> {
    let mut err = None;
    p.visit_mut(prefix, &mut |name, shape, values| {
        if err.is_some() {
            return;
        }
        match tensors.iter().find(|t| t.name == name) {
            None => err = Some(Error::InvalidConfig(format!("missing tensor {name}"))),
            Some(t) if t.shape != shape || t.values.len() != values.len() => {
                err = Some(shape_err(name, shape, &t.shape));
            }
            Some(t) => values.copy_from_slice(&t.values),
        }
    });
    err.map_or(Ok(()), Err)
}

pub fn to_json(tensors: &[NamedTensor]) -> Result<String> {
    Ok(serde_json::to_string(&TensorFile {
        tensors: tensors.to_vec(),
    })?)
}

pub fn from_json(text: &str) -> Result<Vec<NamedTensor>> {
    let file: TensorFile = serde_json::from_str(text)?;
    for t in &file.tensors {
        if t.shape.iter().product::<usize>() != t.values.len() {
            return Err(shape_err(&t.name, &t.shape, &[t.values.len()]));
        }
    }
    Ok(file.tensors)
}

pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    std::fs::write(path, to_json(tensors)?)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    from_json(&std::fs::read_to_string(path)?)
}
