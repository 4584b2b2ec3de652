//! Versioned binary container for checkpoints, datasets, and posterior
//! approximations, plus the SHA-256 fingerprints that tie pipeline stages
//! together.
//!
//! Layout: 8-byte magic, u32 version, u32 section count, then sections of
//! `[u32 name length][name][u64 payload length][payload]`. Numeric payloads
//! are little-endian; structured payloads are JSON.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::CorruptionReport;
use crate::diffmodels::{Dataset, Example, ModelSpec, ParameterVector};
use crate::error::{CoreError, Result};
use crate::posterior::PosteriorApprox;

const MAGIC: &[u8; 8] = b"RPRCONT\0";
const VERSION: u32 = 1;

/// Ordered named sections with a magic/version header.
#[derive(Debug, Clone, Default)]
pub struct Container {
    sections: Vec<(String, Vec<u8>)>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn add(&mut self, name: &str, payload: Vec<u8>) {
        self.sections.push((name.to_string(), payload));
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.add(name, serde_json::to_vec_pretty(value)?);
        Ok(())
    }

    pub fn add_f64s(&mut self, name: &str, values: &[f64]) {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.add(name, bytes);
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
    }

    pub fn require(&self, name: &str, path: &Path) -> Result<&[u8]> {
        self.get(name).ok_or_else(|| CoreError::Container {
            message: format!("missing section {name} in {}", path.display()),
        })
    }

    pub fn get_json<T: DeserializeOwned>(&self, name: &str, path: &Path) -> Result<T> {
        Ok(serde_json::from_slice(self.require(name, path)?)?)
    }

    pub fn get_f64s(&self, name: &str, path: &Path) -> Result<Vec<f64>> {
        let bytes = self.require(name, path)?;
        if bytes.len() % 8 != 0 {
            return Err(CoreError::Container {
                message: format!(
                    "section {name} length {} is not a multiple of 8",
                    bytes.len()
                ),
            });
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    /// Writes via a sibling temp file and rename, so partially written
    /// containers never appear under the final name.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let tmp = path.with_extension("tmp-write");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let need = |n: usize, at: usize| -> Result<()> {
            if bytes.len() < at + n {
                Err(CoreError::Container {
                    message: format!("{} truncated at offset {at}", path.display()),
                })
            } else {
                Ok(())
            }
        };
        need(8 + 4 + 4, 0)?;
        if &bytes[..8] != MAGIC {
            return Err(CoreError::Container {
                message: format!("{} is not a container (bad magic)", path.display()),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CoreError::Container {
                message: format!(
                    "{}: unsupported container version {version}",
                    path.display()
                ),
            });
        }
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let mut sections = Vec::with_capacity(count);
        let mut at = 16usize;
        for _ in 0..count {
            need(4, at)?;
            let name_len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
            at += 4;
            need(name_len, at)?;
            let name = String::from_utf8(bytes[at..at + name_len].to_vec()).map_err(|_| {
                CoreError::Container {
                    message: format!("{}: non-utf8 section name", path.display()),
                }
            })?;
            at += name_len;
            need(8, at)?;
            let payload_len = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
            at += 8;
            need(payload_len, at)?;
            sections.push((name, bytes[at..at + payload_len].to_vec()));
            at += payload_len;
        }
        Ok(Container { sections })
    }
}

/// A trained model with its provenance: spec, layout, parameters, the
/// optional posterior approximation, and the training manifest.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParameterVector,
    pub posterior: Option<PosteriorApprox>,
    pub manifest: serde_json::Value,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PosteriorMeta {
    n_train: usize,
    damping: f64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        c.add_json("model_spec", &self.spec)?;
        c.add_json("layout", &self.params.layout)?;
        c.add_f64s("params", &self.params.values);
        if let Some(post) = &self.posterior {
            c.add_f64s("fisher_diag", &post.fisher_diag);
            c.add_json(
                "posterior_meta",
                &PosteriorMeta {
                    n_train: post.n_train,
                    damping: post.damping,
                },
            )?;
        }
        c.add_json("manifest", &self.manifest)?;
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let spec: ModelSpec = c.get_json("model_spec", path)?;
        let layout = c.get_json("layout", path)?;
        let values = c.get_f64s("params", path)?;
        let params = ParameterVector::new(values, layout)?;
        let posterior = if c.get("fisher_diag").is_some() {
            let fisher_diag = c.get_f64s("fisher_diag", path)?;
            let meta: PosteriorMeta = c.get_json("posterior_meta", path)?;
            Some(PosteriorApprox::new(
                params.clone(),
                fisher_diag,
                meta.n_train,
                meta.damping,
            )?)
        } else {
            None
        };
        let manifest = c.get_json("manifest", path)?;
        Ok(Checkpoint {
            spec,
            params,
            posterior,
            manifest,
        })
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DatasetMeta {
    num_classes: usize,
    count: usize,
    dim: usize,
}

/// Saves a dataset (and the corruption report that produced it, when one
/// exists) as a container.
pub fn save_dataset(data: &Dataset, report: Option<&CorruptionReport>, path: &Path) -> Result<()> {
    let dim = data.examples().first().map_or(0, |e| e.input.len());
    let mut c = Container::new();
    c.add_json(
        "dataset_meta",
        &DatasetMeta {
            num_classes: data.num_classes(),
            count: data.len(),
            dim,
        },
    )?;
    let mut ids = Vec::with_capacity(data.len() * 8);
    let mut labels = Vec::with_capacity(data.len() * 4);
    let mut inputs = Vec::with_capacity(data.len() * dim * 8);
    for ex in data.examples() {
        if ex.input.len() != dim {
            return Err(CoreError::DimensionMismatch {
                axis: "input".into(),
                expected: dim,
                got: ex.input.len(),
            });
        }
        ids.extend_from_slice(&ex.id.to_le_bytes());
        labels.extend_from_slice(&(ex.label as u32).to_le_bytes());
        for v in &ex.input {
            inputs.extend_from_slice(&v.to_le_bytes());
        }
    }
    c.add("ids", ids);
    c.add("labels", labels);
    c.add("inputs", inputs);
    if let Some(mask) = data.corruption_mask() {
        c.add("corruption_mask", mask.iter().map(|&b| b as u8).collect());
    }
    if let Some(report) = report {
        c.add_json("corruption_report", report)?;
    }
    c.write(path)
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, Option<CorruptionReport>)> {
    let c = Container::read(path)?;
    let meta: DatasetMeta = c.get_json("dataset_meta", path)?;
    let ids = c.require("ids", path)?;
    let labels = c.require("labels", path)?;
    let inputs = c.get_f64s("inputs", path)?;
    if ids.len() != meta.count * 8
        || labels.len() != meta.count * 4
        || inputs.len() != meta.count * meta.dim
    {
        return Err(CoreError::Container {
            message: format!(
                "{}: section sizes disagree with dataset_meta",
                path.display()
            ),
        });
    }
    let mut examples = Vec::with_capacity(meta.count);
    for i in 0..meta.count {
        let id = u64::from_le_bytes(ids[i * 8..(i + 1) * 8].try_into().unwrap());
        let label = u32::from_le_bytes(labels[i * 4..(i + 1) * 4].try_into().unwrap()) as usize;
        let input = inputs[i * meta.dim..(i + 1) * meta.dim].to_vec();
        examples.push(Example::new(input, label, id));
    }
    let mut data = Dataset::new(examples, meta.num_classes)?;
    if let Some(mask) = c.get("corruption_mask") {
        data = data.with_mask(mask.iter().map(|&b| b != 0).collect())?;
    }
    let report = match c.get("corruption_report") {
        Some(bytes) => Some(serde_json::from_slice(bytes)?),
        None => None,
    };
    Ok((data, report))
}

/// SHA-256 over a canonical byte encoding of the dataset (ids, labels,
/// inputs, mask), as a hex string.
pub fn dataset_fingerprint(data: &Dataset) -> String {
    let mut hasher = Sha256::new();
    hasher.update((data.num_classes() as u64).to_le_bytes());
    hasher.update((data.len() as u64).to_le_bytes());
    for ex in data.examples() {
        hasher.update(ex.id.to_le_bytes());
        hasher.update((ex.label as u64).to_le_bytes());
        for v in &ex.input {
            hasher.update(v.to_le_bytes());
        }
    }
    if let Some(mask) = data.corruption_mask() {
        for &b in mask {
            hasher.update([b as u8]);
        }
    }
    hex(&hasher.finalize())
}

/// SHA-256 over the parameter values and layout.
pub fn params_fingerprint(params: &ParameterVector) -> String {
    let mut hasher = Sha256::new();
    for v in &params.values {
        hasher.update(v.to_le_bytes());
    }
    for entry in &params.layout {
        hasher.update(entry.name.as_bytes());
        for &s in &entry.shape {
            hasher.update((s as u64).to_le_bytes());
        }
    }
    hex(&hasher.finalize())
}

pub fn file_fingerprint(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Fingerprint of a set of example ids (used to pin a cause set).
pub fn id_set_fingerprint(ids: &BTreeSet<u64>) -> String {
    let mut hasher = Sha256::new();
    for id in ids {
        hasher.update(id.to_le_bytes());
    }
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
