//! Reasoning in the component latent space: combining and transferring
//! component embeddings, attribute directions and principal components.

mod debias;
mod pca;
mod svm;

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

use crate::code::{CodeError, ComponentVectorsJson, FaceCode, LayeredCode};
use crate::geometry::ComponentId;
use crate::networks::{ModelConfig, NetworkError};

pub use debias::{debias_directions, Contingency, DebiasOptions, DebiasReport};
pub use pca::{pca_edit, pca_fit, PcaBasis};
pub use svm::{svm_solve, SvmOptions, SvmSolution};

#[derive(Debug, Error)]
pub enum ReasoningError {
    #[error("no input codes")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("labels must contain both classes (got {positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("degenerate direction: residual norm {0:e}")]
    Degenerate(f64),
    #[error("SVM solver did not converge after {iterations} iterations (KKT gap {gap:e}); the data may not be separable, set a box constraint C")]
    Diverged { iterations: usize, gap: f64 },
    #[error("cannot balance the contingency table: {0}")]
    Balancing(String),
    #[error("invalid layer range {start}..{end} for {layers} styled layers")]
    InvalidRange { start: usize, end: usize, layers: usize },
    #[error("index {index} out of range for {len} entries")]
    Index { index: usize, len: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

fn check_shapes(codes: &[&FaceCode]) -> Result<(), ReasoningError> {
    let first = codes.first().ok_or(ReasoningError::Empty)?;
    for c in codes {
        if !c.same_shape(first) {
            return Err(ReasoningError::Dimension(format!(
                "icon {:?}/embedding {} vs icon {:?}/embedding {}",
                c.icon.shape(),
                c.embedding_dim(),
                first.icon.shape(),
                first.embedding_dim()
            )));
        }
    }
    Ok(())
}

/// Per-component weighted sum of the sources' embeddings; the icon is
/// copied from `sources[base]`.
pub fn combine(sources: &[FaceCode], weights: &[[f64; 4]], base: usize) -> Result<FaceCode, ReasoningError> {
    let refs: Vec<&FaceCode> = sources.iter().collect();
    check_shapes(&refs)?;
    if weights.len() != sources.len() {
        return Err(ReasoningError::Dimension(format!(
            "{} weight rows for {} sources",
            weights.len(),
            sources.len()
        )));
    }
    if base >= sources.len() {
        return Err(ReasoningError::Index {
            index: base,
            len: sources.len(),
        });
    }
    let d = sources[0].embedding_dim();
    let mut out = FaceCode {
        icon: sources[base].icon.clone(),
        components: std::array::from_fn(|_| vec![0.0; d]),
    };
    for j in 0..4 {
        let total: f64 = weights.iter().map(|w| w[j]).sum();
        if (total - 1.0).abs() > 1e-9 {
            warn!("weights of {} sum to {total}, not 1", ComponentId::ALL[j]);
        }
        for (src, w) in sources.iter().zip(weights) {
            if w[j] == 0.0 {
                continue;
            }
            for (o, v) in out.components[j].iter_mut().zip(&src.components[j]) {
                *o += w[j] * v;
            }
        }
    }
    Ok(out)
}

/// Replace the embeddings of `components` in `target` with the reference's.
pub fn transfer_components(
    target: &FaceCode,
    reference: &FaceCode,
    components: &[ComponentId],
) -> Result<FaceCode, ReasoningError> {
    check_shapes(&[target, reference])?;
    if components.is_empty() {
        warn!("component transfer with no components is a no-op");
    }
    let mut out = target.clone();
    for &c in components {
        out.components[c.index()] = reference.components[c.index()].clone();
    }
    Ok(out)
}

/// Per-layer codes where the styled layers in `layers` take the reference's
/// embeddings for `components` and every other layer keeps the target's.
pub fn transfer_multilevel(
    target: &FaceCode,
    reference: &FaceCode,
    components: &[ComponentId],
    layers: Range<usize>,
    num_layers: usize,
) -> Result<LayeredCode, ReasoningError> {
    check_shapes(&[target, reference])?;
    if layers.start > layers.end || layers.end > num_layers {
        return Err(ReasoningError::InvalidRange {
            start: layers.start,
            end: layers.end,
            layers: num_layers,
        });
    }
    let swapped = transfer_components(target, reference, components)?;
    let mut out = LayeredCode::uniform(target, num_layers);
    for k in layers {
        out.layers[k] = swapped.components.clone();
    }
    Ok(out)
}

/// Named decoder layer groups for multi-level transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelRange {
    Coarse,
    Fine,
    All,
}

impl LevelRange {
    pub fn layers(self, config: &ModelConfig) -> Range<usize> {
        let n = config.num_styled_layers();
        let span = |v: Vec<usize>| match (v.first(), v.last()) {
            (Some(&a), Some(&b)) => a..b + 1,
            _ => n..n,
        };
        match self {
            LevelRange::Coarse => span(config.coarse_layers()),
            LevelRange::Fine => span(config.fine_layers()),
            LevelRange::All => 0..n,
        }
    }
}

impl std::str::FromStr for LevelRange {
    type Err = ReasoningError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coarse" => Ok(Self::Coarse),
            "fine" => Ok(Self::Fine),
            "all" => Ok(Self::All),
            other => Err(ReasoningError::Argument(format!("unknown level range `{other}` (coarse, fine, all)"))),
        }
    }
}

/// Add `alpha * v` to every component embedding; the icon is unchanged.
pub fn edit_attribute(code: &FaceCode, v: &AttributeDirection, alpha: f64) -> Result<FaceCode, ReasoningError> {
    if v.dim() != code.embedding_dim() {
        return Err(ReasoningError::Dimension(format!(
            "direction has length {} per component, code has {}",
            v.dim(),
            code.embedding_dim()
        )));
    }
    let mut out = code.clone();
    for (z, dv) in out.components.iter_mut().zip(&v.vectors) {
        for (a, b) in z.iter_mut().zip(dv) {
            *a += alpha * b;
        }
    }
    Ok(out)
}

/// Zero the embeddings of `components`.
pub fn intervene_zero(code: &FaceCode, components: &[ComponentId]) -> FaceCode {
    let mut out = code.clone();
    for &c in components {
        out.components[c.index()].iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectionMethod {
    MeanDiff,
    #[serde(rename = "SVM")]
    Svm,
    Rectified,
    Debiased,
}

/// Unit-length edit direction over the concatenated component embeddings.
/// Blocks of components outside `relevant` are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeDirection {
    pub name: String,
    pub vectors: [Vec<f64>; 4],
    pub relevant: BTreeSet<ComponentId>,
    pub method: DirectionMethod,
    /// Norm before normalisation.
    pub norm: f64,
    pub source_dataset_hash: Option<String>,
}

impl AttributeDirection {
    /// Mask `raw` (concatenated, length 4d) to `relevant` and normalise.
    pub fn from_concat(
        name: &str,
        raw: &[f64],
        relevant: &BTreeSet<ComponentId>,
        method: DirectionMethod,
    ) -> Result<Self, ReasoningError> {
        if !raw.len().is_multiple_of(4) || raw.is_empty() {
            return Err(ReasoningError::Dimension(format!("direction length {} is not 4d", raw.len())));
        }
        if relevant.is_empty() {
            return Err(ReasoningError::Argument("no relevant components".into()));
        }
        let d = raw.len() / 4;
        let vectors: [Vec<f64>; 4] = std::array::from_fn(|i| {
            if relevant.contains(&ComponentId::ALL[i]) {
                raw[i * d..(i + 1) * d].to_vec()
            } else {
                vec![0.0; d]
            }
        });
        let norm = vectors.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(ReasoningError::Degenerate(norm));
        }
        Ok(Self {
            name: name.to_string(),
            vectors: vectors.map(|b| b.into_iter().map(|v| v / norm).collect()),
            relevant: relevant.clone(),
            method,
            norm,
            source_dataset_hash: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn concat(&self) -> Vec<f64> {
        self.vectors.concat()
    }

    pub fn block_norm(&self, c: ComponentId) -> f64 {
        self.vectors[c.index()].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &AttributeDirection) -> f64 {
        dot(&self.concat(), &other.concat())
    }

    pub fn with_dataset_hash(mut self, hash: String) -> Self {
        self.source_dataset_hash = Some(hash);
        self
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(DirectionJson {
            name: self.name.clone(),
            method: self.method,
            relevant_components: self.relevant.iter().copied().collect(),
            vectors: ComponentVectorsJson::encode(&self.vectors),
            norm: self.norm,
            source_dataset_hash: self.source_dataset_hash.clone(),
        })
        .expect("direction serialises")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, ReasoningError> {
        let j: DirectionJson =
            serde_json::from_value(v.clone()).map_err(|e| ReasoningError::Argument(format!("direction JSON: {e}")))?;
        let vectors = j.vectors.decode()?;
        if vectors.iter().any(|b| b.len() != vectors[0].len()) {
            return Err(ReasoningError::Dimension("ragged direction blocks".into()));
        }
        let relevant: BTreeSet<ComponentId> = j.relevant_components.into_iter().collect();
        for c in ComponentId::ALL {
            if !relevant.contains(&c) && vectors[c.index()].iter().any(|v| *v != 0.0) {
                return Err(ReasoningError::Argument(format!("block {c} is outside the relevant set but nonzero")));
            }
        }
        Ok(Self {
            name: j.name,
            vectors,
            relevant,
            method: j.method,
            norm: j.norm,
            source_dataset_hash: j.source_dataset_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ReasoningError> {
        let text = serde_json::to_string_pretty(&self.to_json()).expect("direction serialises");
        std::fs::write(path, text).map_err(CodeError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReasoningError> {
        let text = std::fs::read_to_string(path).map_err(CodeError::from)?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ReasoningError::Argument(format!("direction JSON: {e}")))?;
        Self::from_json(&v)
    }
}

#[derive(Serialize, Deserialize)]
struct DirectionJson {
    name: String,
    method: DirectionMethod,
    relevant_components: Vec<ComponentId>,
    vectors: ComponentVectorsJson,
    norm: f64,
    #[serde(default)]
    source_dataset_hash: Option<String>,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_labels(codes: &[FaceCode], labels: &[i8]) -> Result<(), ReasoningError> {
    if codes.len() != labels.len() {
        return Err(ReasoningError::Dimension(format!("{} codes but {} labels", codes.len(), labels.len())));
    }
    let refs: Vec<&FaceCode> = codes.iter().collect();
    check_shapes(&refs)?;
    let positives = labels.iter().filter(|&&l| l > 0).count();
    let negatives = labels.iter().filter(|&&l| l < 0).count();
    if positives == 0 || negatives == 0 || positives + negatives != labels.len() {
        return Err(ReasoningError::SingleClass { positives, negatives });
    }
    Ok(())
}

/// `(1/n) sum_i y_i z_i` over the concatenated embeddings, masked and normalised.
pub fn direction_meandiff(
    name: &str,
    codes: &[FaceCode],
    labels: &[i8],
    relevant: &BTreeSet<ComponentId>,
) -> Result<AttributeDirection, ReasoningError> {
    check_labels(codes, labels)?;
    let n = codes.len() as f64;
    let mut raw = vec![0.0; 4 * codes[0].embedding_dim()];
    for (c, &y) in codes.iter().zip(labels) {
        for (r, v) in raw.iter_mut().zip(c.concat()) {
            *r += y as f64 * v / n;
        }
    }
    AttributeDirection::from_concat(name, &raw, relevant, DirectionMethod::MeanDiff)
}

/// Normal of the maximum-margin hyperplane between the classes, computed on
/// the concatenated embeddings then masked to `relevant`.
pub fn direction_svm(
    name: &str,
    codes: &[FaceCode],
    labels: &[i8],
    relevant: &BTreeSet<ComponentId>,
    options: &SvmOptions,
) -> Result<AttributeDirection, ReasoningError> {
    check_labels(codes, labels)?;
    let x: Vec<Vec<f64>> = codes.iter().map(|c| c.concat()).collect();
    let sol = svm_solve(&x, labels, options)?;
    AttributeDirection::from_concat(name, &sol.w, relevant, DirectionMethod::Svm)
}

/// Remove the component of `v` along the unit direction `cond`.
pub fn rectify_direction(v: &AttributeDirection, cond: &AttributeDirection) -> Result<AttributeDirection, ReasoningError> {
    if v.dim() != cond.dim() {
        return Err(ReasoningError::Dimension(format!("{} vs {}", v.dim(), cond.dim())));
    }
    let a = v.concat();
    let b = cond.concat();
    let p = dot(&a, &b);
    let raw: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - p * y).collect();
    let residual = dot(&raw, &raw).sqrt();
    if residual < 1e-8 {
        return Err(ReasoningError::Degenerate(residual));
    }
    let mut out = AttributeDirection::from_concat(&v.name, &raw, &v.relevant, DirectionMethod::Rectified)?;
    out.source_dataset_hash = v.source_dataset_hash.clone();
    Ok(out)
}

/// SHA-256 over the concatenated embeddings, identifying a sample set.
pub fn dataset_hash(codes: &[FaceCode]) -> String {
    let mut h = Sha256::new();
    for c in codes {
        for v in c.concat() {
            h.update(v.to_le_bytes());
        }
    }
    crate::networks::config::hex(&h.finalize())
}

/// All four components.
pub fn all_components() -> BTreeSet<ComponentId> {
    ComponentId::ALL.into_iter().collect()
}
