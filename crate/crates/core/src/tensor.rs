//! Dense tensors with explicit storage dtype.
//!
//! Checkpoints store 32-bit floats; gradient and Hessian paths work in
//! 64-bit and truncate when they write back. Both widths share one type
//! so the checkpoint codec and the parameter maps stay uniform.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// Header tag, matching the safetensors dtype vocabulary.
    pub fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Dtype> {
        match tag {
            "F32" => Some(Dtype::F32),
            "F64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// A dense row-major tensor. All values are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Storage,
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        check_len(&shape, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: String::new(),
                index: i,
            });
        }
        Ok(Tensor {
            shape,
            data: Storage::F32(data),
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        check_len(&shape, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: String::new(),
                index: i,
            });
        }
        Ok(Tensor {
            shape,
            data: Storage::F64(data),
        })
    }

    pub fn zeros(shape: Vec<usize>, dtype: Dtype) -> Tensor {
        let n = shape.iter().product();
        match dtype {
            Dtype::F32 => Tensor {
                shape,
                data: Storage::F32(vec![0.0; n]),
            },
            Dtype::F64 => Tensor {
                shape,
                data: Storage::F64(vec![0.0; n]),
            },
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            Storage::F32(_) => Dtype::F32,
            Storage::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Strict view; errors if the tensor is not F32 storage.
    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            Storage::F32(v) => Ok(v),
            Storage::F64(_) => Err(Error::DtypeMismatch {
                name: String::new(),
                expected: "F32",
                found: "F64",
            }),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            Storage::F64(v) => Ok(v),
            Storage::F32(_) => Err(Error::DtypeMismatch {
                name: String::new(),
                expected: "F64",
                found: "F32",
            }),
        }
    }

    /// Widening copy; exact for F32 storage.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }

    /// Little-endian raw bytes, the exact payload written to checkpoints.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            Storage::F32(v) => {
                let mut out = Vec::with_capacity(v.len() * 4);
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                out
            }
            Storage::F64(v) => {
                let mut out = Vec::with_capacity(v.len() * 8);
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                out
            }
        }
    }

    pub fn from_le_bytes(shape: Vec<usize>, dtype: Dtype, bytes: &[u8]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if bytes.len() != n * dtype.byte_size() {
            return Err(Error::ShapeByteMismatch {
                name: String::new(),
                shape,
                expected: (n * dtype.byte_size()) as u64,
                actual: bytes.len() as u64,
            });
        }
        match dtype {
            Dtype::F32 => {
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Tensor::from_f32(shape, data)
            }
            Dtype::F64 => {
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| {
                        f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                    })
                    .collect();
                Tensor::from_f64(shape, data)
            }
        }
    }

    /// Bit-level equality: same dtype, same shape, identical raw bytes.
    /// Distinguishes 0.0 from -0.0, unlike PartialEq on floats.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape || self.dtype() != other.dtype() {
            return false;
        }
        match (&self.data, &other.data) {
            (Storage::F32(a), Storage::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Storage::F64(a), Storage::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let want: usize = shape.iter().product();
    if want != len {
        return Err(Error::ShapeMismatch {
            name: String::new(),
            left: shape.to_vec(),
            right: vec![len],
        });
    }
    Ok(())
}
