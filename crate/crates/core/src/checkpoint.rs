//! Checkpoint directories: `tensors.bin` (raw little-endian) plus `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterBlock, AdapterKind, GateState};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SiteId, VisionTransformer};
use crate::tensor::{read_entry, BlobWriter, DType, TensorEntry};
use crate::train::RunConfig;

pub const TENSORS_FILE: &str = "tensors.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_TAG: &str = "gatelora-checkpoint";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterEntry {
    pub site: SiteId,
    pub kind: AdapterKind,
    pub rank: usize,
    pub alpha: f64,
    pub score: f64,
    pub tau: f64,
    pub trainable: bool,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunConfig>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub adapters: Vec<AdapterEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: VisionTransformer,
    pub run: Option<RunConfig>,
    /// Storage type per tensor name; preserved on re-save.
    pub dtypes: BTreeMap<String, DType>,
}

impl Checkpoint {
    /// Wrap an in-memory model, storing every tensor as `dtype`.
    pub fn new(model: VisionTransformer, run: Option<RunConfig>, dtype: DType) -> Self {
        let dtypes = model.named_tensors().into_iter().map(|(n, _)| (n, dtype)).collect();
        Self { model, run, dtypes }
    }

    fn dtype_of(&self, name: &str) -> DType {
        self.dtypes.get(name).copied().unwrap_or(DType::F32)
    }

    pub fn manifest_and_blob(&self) -> (Manifest, Vec<u8>) {
        let mut w = BlobWriter::new();
        for (name, t) in self.model.named_tensors() {
            w.push(&name, t, self.dtype_of(&name));
        }
        let (blob, tensors) = w.finish();
        let adapters = self
            .model
            .adapters
            .values()
            .map(|b| AdapterEntry {
                site: b.site,
                kind: b.kind,
                rank: b.rank(),
                alpha: b.alpha,
                score: b.gate.score,
                tau: b.gate.threshold,
                trainable: b.gate.trainable,
                active: b.gate.is_active(),
            })
            .collect();
        let manifest = Manifest {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            model: self.model.cfg.clone(),
            run: self.run.clone(),
            tensors,
            adapters,
        };
        (manifest, blob)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (manifest, blob) = self.manifest_and_blob();
        fs::write(dir.join(TENSORS_FILE), blob)?;
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", MANIFEST_FILE)))?;
        let blob = fs::read(dir.join(TENSORS_FILE))?;
        Self::from_parts(manifest, &blob)
    }

    pub fn from_parts(manifest: Manifest, blob: &[u8]) -> Result<Self> {
        if manifest.format != FORMAT_TAG || manifest.version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        manifest.model.validate()?;
        // The skeleton's random values are all overwritten below.
        let mut model = VisionTransformer::new(manifest.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut tensors = BTreeMap::new();
        let mut dtypes = BTreeMap::new();
        for e in &manifest.tensors {
            if tensors.insert(e.name.clone(), read_entry(blob, e)?).is_some() {
                return Err(Error::format(format!("duplicate tensor {}", e.name)));
            }
            dtypes.insert(e.name.clone(), e.dtype);
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::format(format!("manifest lacks tensor {name}")))
        };
        for a in &manifest.adapters {
            if a.site.layer >= model.cfg.layers {
                return Err(Error::format(format!("adapter at missing layer {}", a.site.layer)));
            }
            let magnitude = match a.kind {
                AdapterKind::Lora => None,
                AdapterKind::Dora => Some(take(&format!("adapters.{}.magnitude", a.site))?),
            };
            let blk = AdapterBlock {
                site: a.site,
                kind: a.kind,
                a: take(&format!("adapters.{}.a", a.site))?,
                b: take(&format!("adapters.{}.b", a.site))?,
                alpha: a.alpha,
                magnitude,
                gate: GateState {
                    score: a.score,
                    threshold: a.tau,
                    trainable: a.trainable,
                },
            };
            blk.validate()
                .map_err(|e| Error::format(format!("adapter {}: {e}", a.site)))?;
            let (m, n) = model.cfg.site_shape(a.site.kind);
            if blk.in_dim() != m || blk.out_dim() != n {
                return Err(Error::format(format!(
                    "adapter {} does not fit a {m}x{n} weight",
                    a.site
                )));
            }
            if blk.gate.is_active() != a.active {
                return Err(Error::format(format!(
                    "adapter {}: active flag disagrees with score",
                    a.site
                )));
            }
            model.adapters.insert(a.site, blk);
        }
        let names: Vec<String> = model
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !n.starts_with("adapters."))
            .collect();
        for name in names {
            let t = take(&name)?;
            let slot = model.tensor_mut(&name).expect("named tensor resolves");
            if slot.shape() != t.shape() {
                return Err(Error::format(format!(
                    "tensor {name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::format(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            model,
            run: manifest.run,
            dtypes,
        })
    }

    /// A warning when the stored model configuration differs from `expected`.
    pub fn config_warning(&self, expected: &ModelConfig) -> Option<String> {
        (self.model.cfg != *expected).then(|| {
            format!(
                "checkpoint was built for {:?}, caller expects {:?}",
                self.model.cfg, expected
            )
        })
    }
}
