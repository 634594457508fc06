//! Per-node parameter arrays and their manifest + flat binary blob format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphSpec, Op};
use crate::tensor::PointwiseKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Weight,
    Bias,
    Scale,
    Shift,
}

impl TensorRole {
    fn as_str(self) -> &'static str {
        match self {
            TensorRole::Weight => "weight",
            TensorRole::Bias => "bias",
            TensorRole::Scale => "scale",
            TensorRole::Shift => "shift",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<(String, TensorRole), WeightTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub tensor: TensorRole,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        id: impl Into<String>,
        role: TensorRole,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<()> {
        let id = id.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "weights",
                format!("{id}/{}: shape {shape:?} vs {} values", role.as_str(), data.len()),
            ));
        }
        self.entries.insert((id, role), WeightTensor { shape, data });
        Ok(())
    }

    pub fn get(&self, id: &str, role: TensorRole) -> Option<&WeightTensor> {
        self.entries.get(&(id.to_string(), role))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorRole, &WeightTensor)> {
        self.entries.iter().map(|((id, r), t)| (id.as_str(), *r, t))
    }

    fn require(&self, id: &str, role: TensorRole) -> Result<&WeightTensor> {
        self.get(id, role).ok_or_else(|| Error::MissingWeights {
            id: id.to_string(),
            tensor: role.as_str(),
        })
    }

    /// Convolution weight and bias arrays.
    pub fn conv(&self, id: &str) -> Result<(&[f32], &[f32])> {
        Ok((
            &self.require(id, TensorRole::Weight)?.data,
            &self.require(id, TensorRole::Bias)?.data,
        ))
    }

    /// Folded batch-norm scale and shift.
    pub fn affine(&self, id: &str) -> Result<(&[f32], &[f32])> {
        Ok((
            &self.require(id, TensorRole::Scale)?.data,
            &self.require(id, TensorRole::Shift)?.data,
        ))
    }

    /// Checks that every conv and batch-norm node has correctly shaped entries.
    pub fn validate(&self, g: &GraphSpec) -> Result<()> {
        let shapes = g.shapes()?;
        for (i, n) in g.nodes().iter().enumerate() {
            match &n.op {
                Op::Conv(a) => {
                    let w = self.require(&n.id, TensorRole::Weight)?;
                    let b = self.require(&n.id, TensorRole::Bias)?;
                    let expect = vec![a.out_channels, a.in_channels, a.kernel_h, a.kernel_w];
                    if w.shape != expect || b.shape != vec![a.out_channels] {
                        return Err(Error::shape(
                            "weights",
                            format!(
                                "node '{}': weight {:?} / bias {:?}, expected {expect:?} / [{}]",
                                n.id, w.shape, b.shape, a.out_channels
                            ),
                        ));
                    }
                }
                Op::Pointwise(PointwiseKind::BatchNorm) => {
                    let c = shapes[i].channels;
                    for role in [TensorRole::Scale, TensorRole::Shift] {
                        let t = self.require(&n.id, role)?;
                        if t.shape != vec![c] {
                            return Err(Error::shape(
                                "weights",
                                format!("node '{}': {} {:?}, expected [{c}]", n.id, role.as_str(), t.shape),
                            ));
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Seeded random initialization for every parameterized node.
    ///
    /// Convolutions draw from a fan-in scaled uniform distribution so that
    /// activations stay of order one through deep stacks.
    pub fn random(g: &GraphSpec, seed: u64) -> Result<Self> {
        let shapes = g.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = WeightStore::new();
        for &i in g.order() {
            let n = g.node(i);
            match &n.op {
                Op::Conv(a) => {
                    let fan_in = (a.in_channels * a.kernel_h * a.kernel_w) as f32;
                    let bound = (6.0 / fan_in).sqrt();
                    let w = (0..a.weight_len())
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect();
                    let b = (0..a.out_channels)
                        .map(|_| rng.gen_range(-0.1..0.1))
                        .collect();
                    store.insert(
                        &n.id,
                        TensorRole::Weight,
                        vec![a.out_channels, a.in_channels, a.kernel_h, a.kernel_w],
                        w,
                    )?;
                    store.insert(&n.id, TensorRole::Bias, vec![a.out_channels], b)?;
                }
                Op::Pointwise(PointwiseKind::BatchNorm) => {
                    let c = shapes[i].channels;
                    let s = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
                    let t = (0..c).map(|_| rng.gen_range(-0.1..0.1)).collect();
                    store.insert(&n.id, TensorRole::Scale, vec![c], s)?;
                    store.insert(&n.id, TensorRole::Shift, vec![c], t)?;
                }
                _ => {}
            }
        }
        Ok(store)
    }

    /// Manifest plus little-endian f32 blob, entries in (id, role) order.
    pub fn to_manifest_and_blob(&self) -> (Manifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.entries.len());
        for ((id, role), t) in &self.entries {
            entries.push(ManifestEntry {
                id: id.clone(),
                tensor: *role,
                shape: t.shape.clone(),
                offset: blob.len() as u64,
                len: t.data.len() as u64,
            });
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        (Manifest { entries }, blob)
    }

    pub fn from_manifest_and_blob(manifest: &Manifest, blob: &[u8]) -> Result<Self> {
        let mut store = WeightStore::new();
        for e in &manifest.entries {
            let start = e.offset as usize;
            let end = start
                .checked_add(e.len as usize * 4)
                .filter(|&end| end <= blob.len())
                .ok_or_else(|| {
                    Error::Format(format!(
                        "entry {}/{} spans past the {}-byte blob",
                        e.id,
                        e.tensor.as_str(),
                        blob.len()
                    ))
                })?;
            if e.offset % 4 != 0 {
                return Err(Error::Format(format!(
                    "entry {}/{} has unaligned offset {}",
                    e.id,
                    e.tensor.as_str(),
                    e.offset
                )));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            store.insert(e.id.clone(), e.tensor, e.shape.clone(), data)?;
        }
        Ok(store)
    }

    pub fn save(&self, manifest_path: &Path, blob_path: &Path) -> Result<()> {
        let (manifest, blob) = self.to_manifest_and_blob();
        std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        std::fs::write(blob_path, blob)?;
        Ok(())
    }

    pub fn load(manifest_path: &Path, blob_path: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
        let blob = std::fs::read(blob_path)?;
        Self::from_manifest_and_blob(&manifest, &blob)
    }
}

/// The blob that accompanies a weights manifest: same path, `.bin` extension.
pub fn blob_path_for(manifest_path: &Path) -> std::path::PathBuf {
    manifest_path.with_extension("bin")
}
