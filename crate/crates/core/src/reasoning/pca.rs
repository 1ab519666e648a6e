use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::ReasoningError;
use crate::code::{decode_f64s, encode_f64s, CodeError, FaceCode};
use crate::geometry::ComponentId;

/// Principal directions of one component's embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub component: ComponentId,
    pub mean: Vec<f64>,
    /// Orthonormal rows.
    pub directions: Vec<Vec<f64>>,
    /// Non-increasing sample variances along `directions`.
    pub variances: Vec<f64>,
}

/// Top-`k` eigenpairs of the sample covariance (divisor `n - 1`) of the
/// `comp` embeddings. `k` may equal the embedding size but must be below `n`.
pub fn pca_fit(codes: &[FaceCode], comp: ComponentId, k: usize) -> Result<PcaBasis, ReasoningError> {
    let n = codes.len();
    if n == 0 {
        return Err(ReasoningError::Empty);
    }
    let d = codes[0].embedding_dim();
    if codes.iter().any(|c| c.embedding_dim() != d) {
        return Err(ReasoningError::Dimension("codes differ in embedding size".into()));
    }
    if k == 0 || k >= n || k > d {
        return Err(ReasoningError::Argument(format!(
            "need 1 <= k < n and k <= d, got k={k}, n={n}, d={d}"
        )));
    }
    let mut mean = vec![0.0; d];
    for c in codes {
        for (m, v) in mean.iter_mut().zip(c.component(comp)) {
            *m += v / n as f64;
        }
    }
    let centred = DMatrix::from_fn(n, d, |i, j| codes[i].component(comp)[j] - mean[j]);
    let cov = (centred.transpose() * &centred) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let directions = order[..k]
        .iter()
        .map(|&i| {
            let col = eig.eigenvectors.column(i);
            // fix the sign so the largest-magnitude entry is positive
            let pivot = col.iter().copied().fold(0.0f64, |p, v| if v.abs() > p.abs() { v } else { p });
            let s = if pivot < 0.0 { -1.0 } else { 1.0 };
            col.iter().map(|v| s * v).collect()
        })
        .collect();
    let variances = order[..k].iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    Ok(PcaBasis {
        component: comp,
        mean,
        directions,
        variances,
    })
}

/// Move `comp`'s embedding by `delta` standard deviations along direction `index`.
pub fn pca_edit(code: &FaceCode, basis: &PcaBasis, index: usize, delta: f64) -> Result<FaceCode, ReasoningError> {
    let dir = basis.directions.get(index).ok_or(ReasoningError::Index {
        index,
        len: basis.directions.len(),
    })?;
    if dir.len() != code.embedding_dim() {
        return Err(ReasoningError::Dimension(format!(
            "basis has size {}, code has {}",
            dir.len(),
            code.embedding_dim()
        )));
    }
    let step = delta * basis.variances[index].sqrt();
    let mut out = code.clone();
    for (z, u) in out.component_mut(basis.component).iter_mut().zip(dir) {
        *z += step * u;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct PcaJson {
    component: ComponentId,
    mean: String,
    directions: Vec<String>,
    variances: Vec<f64>,
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.directions.len()
    }

    /// Coordinates of `v` in the basis, relative to the mean.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.directions
            .iter()
            .map(|u| u.iter().zip(v).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (u, c) in self.directions.iter().zip(coords) {
            for (o, a) in out.iter_mut().zip(u) {
                *o += c * a;
            }
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(PcaJson {
            component: self.component,
            mean: encode_f64s(&self.mean),
            directions: self.directions.iter().map(|d| encode_f64s(d)).collect(),
            variances: self.variances.clone(),
        })
        .expect("basis serialises")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, ReasoningError> {
        let j: PcaJson = serde_json::from_value(v.clone()).map_err(CodeError::from)?;
        let mean = decode_f64s(&j.mean)?;
        let directions = j.directions.iter().map(|d| decode_f64s(d)).collect::<Result<Vec<_>, _>>()?;
        if directions.len() != j.variances.len() || directions.iter().any(|d| d.len() != mean.len()) {
            return Err(ReasoningError::Dimension("inconsistent PCA basis".into()));
        }
        Ok(Self {
            component: j.component,
            mean,
            directions,
            variances: j.variances,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ReasoningError> {
        let text = serde_json::to_string_pretty(&self.to_json()).expect("basis serialises");
        std::fs::write(path, text).map_err(CodeError::from)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ReasoningError> {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).map_err(CodeError::from)?).map_err(CodeError::from)?;
        Self::from_json(&v)
    }
}
