//! Self-describing checkpoint container: named `f64` arrays plus string
//! metadata, stored in the safetensors format.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use partwarp_autodiff::Tensor;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn fail(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.into(), reason: reason.into() }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(&String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(name, t)| (name, t.data().iter().flat_map(|v| v.to_le_bytes()).collect(), t.shape().to_vec()))
            .collect();
        let mut views = Vec::with_capacity(bytes.len());
        for (name, data, shape) in &bytes {
            let view = TensorView::new(Dtype::F64, shape.clone(), data)
                .map_err(|e| Error::InvalidArgument(format!("tensor {name}: {e}")))?;
            views.push((name.as_str(), view));
        }
        let info: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, Some(info)).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn from_bytes(buffer: &[u8], path: &Path) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(buffer).map_err(|e| fail(path, e.to_string()))?;
        let metadata = header.metadata().clone().unwrap_or_default().into_iter().collect();
        let st = SafeTensors::deserialize(buffer).map_err(|e| fail(path, e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(fail(path, format!("tensor {name} has dtype {:?}, expected F64", view.dtype())));
            }
            let data = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(name, Tensor::new(view.shape().to_vec(), data));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buffer = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buffer, path)
    }

    pub fn meta(&self, key: &str, path: &Path) -> Result<&str> {
        self.metadata.get(key).map(String::as_str).ok_or_else(|| fail(path, format!("missing metadata `{key}`")))
    }

    pub fn take(&mut self, name: &str, path: &Path) -> Result<Tensor> {
        self.tensors.remove(name).ok_or_else(|| fail(path, format!("missing tensor `{name}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits_and_metadata() {
        let mut ck = Checkpoint::default();
        ck.metadata.insert("step".into(), "12".into());
        ck.tensors.insert("a".into(), Tensor::new([2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]));
        ck.tensors.insert("s".into(), Tensor::scalar(0.1));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back.metadata, ck.metadata);
        for (k, t) in &ck.tensors {
            let b = &back.tensors[k];
            assert_eq!(b.shape(), t.shape());
            assert!(b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn garbage_is_a_checkpoint_error() {
        let err = Checkpoint::from_bytes(b"not a checkpoint", Path::new("x")).unwrap_err();
        assert_eq!(err.class(), "checkpoint");
    }
}
