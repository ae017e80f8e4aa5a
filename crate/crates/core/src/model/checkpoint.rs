use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::bundle::{read_bundle, write_bundle, TensorSource};
use crate::model::weights::{tensor_layout, ModelWeights};
use crate::model::Model;

/// Saves config and weights as a tensor bundle at `path` (the manifest;
/// the blob goes next to it with a `.bin` extension).
pub fn save_checkpoint(model: &Model, path: &Path, metadata: BTreeMap<String, serde_json::Value>) -> Result<()> {
    let layout = tensor_layout(&model.config);
    let slices = model.weights.slices();
    let tensors: Vec<TensorSource<'_>> = layout
        .into_iter()
        .zip(slices)
        .map(|((name, shape), data)| TensorSource { name, shape, data })
        .collect();
    write_bundle(path, Some(&model.config), metadata, &tensors)
}

/// Loads a checkpoint written by [`save_checkpoint`]. Tensors not part of
/// the model layout are ignored.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let (manifest, mut tensors) = read_bundle(path)?;
    let config = manifest
        .config
        .ok_or_else(|| Error::corrupt(path, "manifest has no model config"))?;
    config
        .validate()
        .map_err(|e| Error::corrupt(path, format!("invalid config: {e}")))?;
    let mut ordered = Vec::new();
    for (name, shape) in tensor_layout(&config) {
        let (got_shape, data) = tensors
            .remove(&name)
            .ok_or_else(|| Error::corrupt(path, format!("missing tensor {name}")))?;
        if got_shape != shape {
            return Err(Error::corrupt(
                path,
                format!("{name}: shape {got_shape:?}, config implies {shape:?}"),
            ));
        }
        ordered.push(data);
    }
    let weights = ModelWeights::from_tensors(&config, ordered).map_err(|e| Error::corrupt(path, e.to_string()))?;
    Ok(Model { config, weights })
}
