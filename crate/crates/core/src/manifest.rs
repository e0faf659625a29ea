//! Component universe, row-major flattening and per-sample gradient records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use ndarray::ArrayViewD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Layer index reserved for the (layer-less) input embedding.
pub const EMBEDDING_LAYER: i32 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ComponentKind {
    Embedding,
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpGate,
    MlpUp,
    MlpDown,
}

impl ComponentKind {
    /// The seven per-layer kinds, in canonical order.
    pub const LAYER_KINDS: [ComponentKind; 7] = [
        ComponentKind::AttnQ,
        ComponentKind::AttnK,
        ComponentKind::AttnV,
        ComponentKind::AttnO,
        ComponentKind::MlpGate,
        ComponentKind::MlpUp,
        ComponentKind::MlpDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::Embedding => "embed",
            ComponentKind::AttnQ => "attn_q",
            ComponentKind::AttnK => "attn_k",
            ComponentKind::AttnV => "attn_v",
            ComponentKind::AttnO => "attn_o",
            ComponentKind::MlpGate => "mlp_gate",
            ComponentKind::MlpUp => "mlp_up",
            ComponentKind::MlpDown => "mlp_down",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        std::iter::once(ComponentKind::Embedding).chain(Self::LAYER_KINDS).find(|k| k.name() == s)
    }
}

/// Address of one component tensor. Ordering is lexicographic on
/// `(layer, kind)`, which puts the embedding first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentId {
    pub layer: i32,
    pub kind: ComponentKind,
}

impl ComponentId {
    pub fn embedding() -> Self {
        ComponentId { layer: EMBEDDING_LAYER, kind: ComponentKind::Embedding }
    }

    pub fn layer(layer: u32, kind: ComponentKind) -> Self {
        debug_assert!(kind != ComponentKind::Embedding);
        ComponentId { layer: layer as i32, kind }
    }

    pub fn is_embedding(&self) -> bool {
        self.kind == ComponentKind::Embedding
    }

    /// Parses the `Display` form (`embed`, `L3.attn_q`).
    pub fn parse(s: &str) -> Option<Self> {
        if s == "embed" {
            return Some(Self::embedding());
        }
        let rest = s.strip_prefix('L')?;
        let (layer, kind) = rest.split_once('.')?;
        let kind = ComponentKind::from_name(kind)?;
        if kind == ComponentKind::Embedding {
            return None;
        }
        Some(ComponentId::layer(layer.parse().ok()?, kind))
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_embedding() {
            f.write_str("embed")
        } else {
            write!(f, "L{}.{}", self.layer, self.kind.name())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub id: ComponentId,
    pub shape: Vec<usize>,
    pub param_count: usize,
}

/// The ordered component universe of a model. The order fixes the
/// concatenation order of flattened gradients everywhere downstream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentManifest {
    pub components: Vec<ComponentEntry>,
    pub total_params: usize,
    pub model_tag: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl ComponentManifest {
    pub fn new(model_tag: impl Into<String>, components: Vec<(ComponentId, Vec<usize>)>) -> Result<Self> {
        let components: Vec<ComponentEntry> = components
            .into_iter()
            .map(|(id, shape)| {
                let param_count = shape.iter().product();
                ComponentEntry { id, shape, param_count }
            })
            .collect();
        let total_params = components.iter().map(|c| c.param_count).sum();
        let manifest =
            ComponentManifest { components, total_params, model_tag: model_tag.into(), metadata: BTreeMap::new() };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Format("manifest has no components".into()));
        }
        let mut seen = BTreeSet::new();
        let mut embeddings = 0;
        for c in &self.components {
            if !seen.insert(c.id) {
                return Err(Error::DuplicateComponent(c.id));
            }
            if c.id.is_embedding() {
                embeddings += 1;
                if c.id.layer != EMBEDDING_LAYER {
                    return Err(Error::Format(format!("embedding must use layer {EMBEDDING_LAYER}")));
                }
            } else if c.id.layer < 0 {
                return Err(Error::Format(format!("{}: negative layer", c.id)));
            }
            if c.shape.is_empty() || c.shape.contains(&0) {
                return Err(Error::Format(format!("{}: shape {:?} must be nonempty and positive", c.id, c.shape)));
            }
            if c.param_count != c.shape.iter().product::<usize>() {
                return Err(Error::Format(format!("{}: param_count disagrees with shape", c.id)));
            }
        }
        if embeddings > 1 {
            return Err(Error::Format("more than one embedding component".into()));
        }
        if self.total_params != self.components.iter().map(|c| c.param_count).sum::<usize>() {
            return Err(Error::Format("total_params is not the sum of param counts".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ComponentId> + '_ {
        self.components.iter().map(|c| c.id)
    }

    pub fn index_of(&self, id: ComponentId) -> Option<usize> {
        self.components.iter().position(|c| c.id == id)
    }

    pub fn param_counts(&self) -> Vec<usize> {
        self.components.iter().map(|c| c.param_count).collect()
    }

    /// Start offset of every block in the concatenated vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.components
            .iter()
            .map(|c| {
                let o = acc;
                acc += c.param_count;
                o
            })
            .collect()
    }

    /// Hex SHA-256 over the ordered (id, shape) list. Tag and metadata are
    /// not part of the binding.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.components {
            h.update(c.id.layer.to_le_bytes());
            h.update([c.id.kind as u8]);
            h.update((c.shape.len() as u64).to_le_bytes());
            for &d in &c.shape {
                h.update((d as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: ComponentManifest = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Row-major vectorization of one component tensor, checked against its
/// manifest entry.
pub fn flatten_component<A: Copy>(tensor: ArrayViewD<'_, A>, entry: &ComponentEntry) -> Result<Vec<A>> {
    if tensor.shape() != entry.shape.as_slice() {
        return Err(Error::Format(format!(
            "{}: tensor shape {:?} does not match manifest shape {:?}",
            entry.id,
            tensor.shape(),
            entry.shape
        )));
    }
    // logical iteration order of ndarray is row-major regardless of memory layout
    Ok(tensor.iter().copied().collect())
}

/// One sample's flattened loss gradient, one block per manifest component.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord {
    pub sample_id: u64,
    pub blocks: Vec<Vec<f32>>,
}

impl GradientRecord {
    pub fn new(sample_id: u64, blocks: Vec<Vec<f32>>) -> Self {
        GradientRecord { sample_id, blocks }
    }

    pub fn zeros(sample_id: u64, manifest: &ComponentManifest) -> Self {
        let blocks = manifest.components.iter().map(|c| vec![0.0; c.param_count]).collect();
        GradientRecord { sample_id, blocks }
    }

    pub fn check(&self, manifest: &ComponentManifest) -> Result<()> {
        if self.blocks.len() != manifest.len() {
            return Err(Error::ManifestMismatch(format!(
                "sample {} has {} blocks, manifest has {} components",
                self.sample_id,
                self.blocks.len(),
                manifest.len()
            )));
        }
        for (block, entry) in self.blocks.iter().zip(&manifest.components) {
            if block.len() != entry.param_count {
                return Err(Error::ManifestMismatch(format!(
                    "sample {}: block {} has length {}, expected {}",
                    self.sample_id,
                    entry.id,
                    block.len(),
                    entry.param_count
                )));
            }
        }
        Ok(())
    }

    /// The full gradient vector: all blocks in manifest order.
    pub fn concat(&self) -> Vec<f32> {
        self.blocks.concat()
    }

    pub fn scale(&mut self, c: f32) {
        self.blocks.iter_mut().flatten().for_each(|v| *v *= c);
    }
}
