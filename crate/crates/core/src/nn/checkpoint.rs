//! Checkpoint directories: `manifest.json` plus one little-endian `f32`
//! blob per tensor, in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Network, NetworkSpec, NetworkVariant};
use super::tensor::{ParameterSet, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub element_type: String,
    pub spec: NetworkSpec,
    /// Hash of the backbone spec; trunks load only into matching backbones.
    pub spec_hash: String,
    /// Hash of the run configuration that produced the weights, when known.
    pub config_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn save<T: Scalar>(net: &Network<T>, dir: &Path, config_hash: Option<&str>) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(net.params().len());
    for (i, (name, t)) in net.params().iter().enumerate() {
        let file = format!("tensor_{i:04}.bin");
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in &t.data {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        element_type: "f32".into(),
        spec: net.spec().clone(),
        spec_hash: net.spec().backbone.hash(),
        config_hash: config_hash.map(str::to_string),
        tensors,
    };
    let path = dir.join(MANIFEST_NAME);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_NAME);
    if !path.is_file() {
        return Err(Error::NotFound(format!("checkpoint manifest {}", path.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.format_version != FORMAT_VERSION || manifest.element_type != "f32" {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{}: format {} / {} is not supported",
            path.display(),
            manifest.format_version,
            manifest.element_type
        )));
    }
    if manifest.spec_hash != manifest.spec.backbone.hash() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{}: recorded spec hash does not match its backbone",
            path.display()
        )));
    }
    Ok(manifest)
}

fn read_tensors(dir: &Path, manifest: &CheckpointManifest) -> Result<ParameterSet<f32>> {
    let mut params = ParameterSet::new();
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let n: usize = entry.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{}: {} bytes, expected {} for shape {:?}",
                path.display(),
                bytes.len(),
                n * 4,
                entry.shape
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if params.slot(&entry.name).is_some() {
            return Err(Error::IncompatibleCheckpoint(format!("duplicate tensor {}", entry.name)));
        }
        params.push(
            entry.name.clone(),
            Tensor {
                shape: entry.shape.clone(),
                data,
            },
        );
    }
    if !params.all_finite() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{}: non-finite parameter values",
            dir.display()
        )));
    }
    Ok(params)
}

/// Restores the full network stored in `dir`.
pub fn load(dir: &Path) -> Result<Network<f32>> {
    let manifest = load_manifest(dir)?;
    let mut net = Network::build(&manifest.spec, 0)?;
    net.set_params(read_tensors(dir, &manifest)?)
        .map_err(|e| Error::IncompatibleCheckpoint(format!("{}: {e}", dir.display())))?;
    Ok(net)
}

/// Builds `target` from `seed` and overwrites its trunk with the trunk
/// stored in `dir`. Heads keep their fresh initialization.
pub fn load_trunk_only(dir: &Path, target: &NetworkSpec, seed: u64) -> Result<Network<f32>> {
    let manifest = load_manifest(dir)?;
    let want = target.backbone.hash();
    if manifest.spec_hash != want {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{}: trunk spec hash {} does not match target {}",
            dir.display(),
            manifest.spec_hash,
            want
        )));
    }
    let source = read_tensors(dir, &manifest)?;
    let mut net = Network::build(target, seed)?;
    let names: Vec<String> = net
        .params()
        .names()
        .iter()
        .filter(|n| n.starts_with("trunk."))
        .cloned()
        .collect();
    for name in names {
        let src = source.get(&name).ok_or_else(|| {
            Error::IncompatibleCheckpoint(format!("{}: missing trunk tensor {name}", dir.display()))
        })?;
        let slot = net.params().slot(&name).expect("name from own layout");
        let dst = net.params_mut().tensor_mut(slot);
        if dst.shape != src.shape {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{name}: shape {:?} vs {:?}",
                src.shape, dst.shape
            )));
        }
        dst.data.copy_from_slice(&src.data);
    }
    Ok(net)
}

/// Trunk-only transfer into a network with the source backbone and a new
/// head wiring.
pub fn transfer_weights(dir: &Path, target: NetworkVariant, seed: u64) -> Result<Network<f32>> {
    let manifest = load_manifest(dir)?;
    let spec = NetworkSpec {
        backbone: manifest.spec.backbone,
        variant: target,
    };
    load_trunk_only(dir, &spec, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BackboneSpec;

    fn spec(variant: NetworkVariant) -> NetworkSpec {
        NetworkSpec {
            backbone: BackboneSpec {
                input_channels: 4,
                widths: vec![8, 16],
                dilations: vec![1, 2],
                strides: vec![2, 1],
                se_ratio: 4,
                input_size: 16,
                norm_groups: 4,
            },
            variant,
        }
    }

    #[test]
    fn save_load_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::<f32>::build(&spec(NetworkVariant::Siamese), 9).unwrap();
        let manifest = save(&net, dir.path(), Some("abc")).unwrap();
        assert_eq!(manifest.tensors.len(), net.params().len());
        let back = load(dir.path()).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.spec(), net.spec());
        assert_eq!(load_manifest(dir.path()).unwrap().config_hash.as_deref(), Some("abc"));
    }

    #[test]
    fn trunk_transfer_copies_trunk_only() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::<f32>::build(&spec(NetworkVariant::Disentangle), 9).unwrap();
        let manifest = save(&net, dir.path(), None).unwrap();
        let target = transfer_weights(dir.path(), NetworkVariant::Planes { classes: 4 }, 5).unwrap();
        for (name, t) in target.params().iter() {
            if name.starts_with("trunk.") {
                assert_eq!(t, net.params().get(name).unwrap());
            } else {
                assert!(manifest.tensors.iter().all(|e| e.name != name), "{name}");
            }
        }
        let fresh = Network::<f32>::build(target.spec(), 5).unwrap();
        assert_eq!(
            target.params().get("head.plane.weight"),
            fresh.params().get("head.plane.weight")
        );
    }

    #[test]
    fn mismatched_trunk_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::<f32>::build(&spec(NetworkVariant::Siamese), 1).unwrap();
        save(&net, dir.path(), None).unwrap();
        let mut other = spec(NetworkVariant::Planes { classes: 3 });
        other.backbone.widths = vec![8, 8];
        let err = load_trunk_only(dir.path(), &other, 0).unwrap_err();
        assert!(matches!(err, Error::IncompatibleCheckpoint(_)), "{err}");
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::NotFound(_))));
    }
}
