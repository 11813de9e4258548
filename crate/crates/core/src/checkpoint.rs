//! Weight files in safetensors format.
//!
//! Every parameter is stored as an f64 tensor under its hierarchical name
//! (`vgg.block1.conv1.weight`, `fusion.dam.inject.level3.bias`,
//! `sdf.enc2.conv1.bn.running_var`, ...). The header metadata carries the
//! network configuration and variant as JSON so a file can rebuild its own
//! model.

use crate::config::NetworkConfig;
use crate::engine::{Rmmdf, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

const FORMAT: &str = "rmmdf";

fn fmt_err(e: impl std::fmt::Display) -> Error {
    Error::Format(e.to_string())
}

/// A checkpoint read into memory.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub variant: Variant,
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: HashMap<String, String>,
}

/// Writes every parameter of `model` to `path` through a temporary file
/// in the same directory, so readers never see a partial file.
pub fn save(model: &Rmmdf, path: &Path, extra: &[(&str, String)]) -> Result<()> {
    let store = model.store();
    let bytes: Vec<(String, Shape, Vec<u8>)> = store
        .ids()
        .map(|id| {
            let t = store.get(id);
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (store.name(id).to_string(), t.shape(), raw)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, raw)| Ok((name.as_str(), TensorView::new(Dtype::F64, shape.dims().to_vec(), raw).map_err(fmt_err)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("config".to_string(), serde_json::to_string(model.config()).map_err(fmt_err)?);
    meta.insert("variant".to_string(), serde_json::to_string(&model.variant()).map_err(fmt_err)?);
    for (k, v) in extra {
        meta.insert(k.to_string(), v.clone());
    }
    let buffer = safetensors::serialize(views, &Some(meta)).map_err(fmt_err)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, buffer).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let buffer = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&buffer).map_err(fmt_err)?;
    let metadata = header.metadata().clone().unwrap_or_default();
    if metadata.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::Format(format!("{} is not a model checkpoint", path.display())));
    }
    let field = |key: &str| {
        metadata
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))
    };
    let config: NetworkConfig = serde_json::from_str(field("config")?).map_err(fmt_err)?;
    let variant: Variant = serde_json::from_str(field("variant")?).map_err(fmt_err)?;
    let st = SafeTensors::deserialize(&buffer).map_err(fmt_err)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::Format(format!("tensor `{name}` is {:?}, expected F64", view.dtype())));
        }
        let dims = view.shape();
        if dims.len() != 4 {
            return Err(Error::Format(format!("tensor `{name}` has rank {}, expected 4", dims.len())));
        }
        let data = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name, Tensor::from_vec(Shape::new(dims[0], dims[1], dims[2], dims[3]), data)?);
    }
    Ok(Checkpoint {
        config,
        variant,
        tensors,
        metadata,
    })
}

/// Copies the checkpoint into `model`. Names and shapes must match exactly;
/// the error names the first offending parameter in model order, then any
/// name the model does not have.
pub fn apply_strict(model: &mut Rmmdf, ckpt: &Checkpoint) -> Result<()> {
    let store = model.store();
    let mut updates = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.name(id);
        let t = ckpt.tensors.get(name).ok_or_else(|| Error::CheckpointMismatch {
            name: name.to_string(),
            reason: "missing from checkpoint".into(),
        })?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::CheckpointMismatch {
                name: name.to_string(),
                reason: format!("checkpoint has {}, model expects {}", t.shape(), store.get(id).shape()),
            });
        }
        updates.push((id, t.clone()));
    }
    if let Some(extra) = ckpt.tensors.keys().find(|n| store.find(n).is_none()) {
        return Err(Error::CheckpointMismatch {
            name: extra.clone(),
            reason: "not a parameter of this model".into(),
        });
    }
    let store = model.store_mut();
    for (id, t) in updates {
        store.set(id, t)?;
    }
    Ok(())
}

pub fn load_into(model: &mut Rmmdf, path: &Path) -> Result<()> {
    apply_strict(model, &read(path)?)
}

/// Rebuilds the model recorded in the file.
pub fn load(path: &Path) -> Result<Rmmdf> {
    let ckpt = read(path)?;
    let mut model = Rmmdf::new(ckpt.config.clone(), ckpt.variant, 0)?;
    apply_strict(&mut model, &ckpt)?;
    Ok(model)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartialLoad {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
}

/// Initialization hook for externally trained weights: copies every tensor
/// whose name and shape match a model parameter and reports the rest.
/// Accepts any safetensors file with f64 or f32 rank-4 tensors.
pub fn load_pretrained(model: &mut Rmmdf, path: &Path) -> Result<PartialLoad> {
    let buffer = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&buffer).map_err(fmt_err)?;
    let mut report = PartialLoad::default();
    let mut names: Vec<(String, TensorView<'_>)> = st.tensors();
    names.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, view) in names {
        let data: Vec<f64> = match view.dtype() {
            Dtype::F64 => view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            Dtype::F32 => view.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
            _ => {
                report.skipped.push(name);
                continue;
            }
        };
        let target = model.store().find(&name);
        match (target, view.shape()) {
            (Some(id), &[n, c, h, w]) if model.store().get(id).shape() == Shape::new(n, c, h, w) => {
                model.store_mut().set(id, Tensor::from_vec(Shape::new(n, c, h, w), data)?)?;
                report.loaded.push(name);
            }
            _ => report.skipped.push(name),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> NetworkConfig {
        NetworkConfig::micro(32, 1, 2)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let model = Rmmdf::new(micro(), Variant::FULL, 9).unwrap();
        save(&model, &path, &[("iteration", "12".into())]).unwrap();
        assert!(!path.with_extension("tmp").exists());
        let back = load(&path).unwrap();
        assert!(model.store().bit_identical(back.store()));
        assert_eq!(read(&path).unwrap().metadata["iteration"], "12");
    }

    #[test]
    fn mismatch_names_first_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        save(&Rmmdf::new(micro(), Variant::FULL, 1).unwrap(), &path, &[]).unwrap();
        let mut wider = Rmmdf::new(NetworkConfig::micro(32, 2, 2), Variant::FULL, 1).unwrap();
        match load_into(&mut wider, &path) {
            Err(Error::CheckpointMismatch { name, .. }) => assert_eq!(name, wider.store().name(wider.store().ids().next().unwrap())),
            other => panic!("unexpected {other:?}"),
        }
        let mut smaller = Rmmdf::new(micro(), Variant::DRM, 1).unwrap();
        match load_into(&mut smaller, &path) {
            Err(Error::CheckpointMismatch { name, reason }) => {
                assert!(name.starts_with("fusion.dam") || name.starts_with("sdf."), "{name}");
                assert!(reason.contains("not a parameter"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pretrained_hook_loads_matching_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        let donor = Rmmdf::new(micro(), Variant::VGG_ONLY, 4).unwrap();
        save(&donor, &path, &[]).unwrap();
        let mut full = Rmmdf::new(micro(), Variant::FULL, 5).unwrap();
        let report = load_pretrained(&mut full, &path).unwrap();
        assert!(report.skipped.is_empty());
        assert_eq!(report.loaded.len(), donor.store().len());
        assert!(report.loaded.iter().all(|n| n.starts_with("vgg.")));
        let id = full.store().find("vgg.block2.conv1.weight").unwrap();
        let did = donor.store().find("vgg.block2.conv1.weight").unwrap();
        assert_eq!(full.store().get(id), donor.store().get(did));

        let wide = dir.path().join("wide.safetensors");
        save(&Rmmdf::new(NetworkConfig::micro(32, 2, 2), Variant::VGG_ONLY, 4).unwrap(), &wide, &[]).unwrap();
        let report = load_pretrained(&mut full, &wide).unwrap();
        assert_eq!(report.loaded, vec!["vgg.head.bias".to_string()]);
        assert!(report.skipped.contains(&"vgg.block1.conv1.weight".to_string()));
    }

    #[test]
    fn foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(read(&path), Err(Error::Format(_))));
    }
}
