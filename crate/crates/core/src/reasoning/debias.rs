use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use super::{check_labels, direction_svm, dot, AttributeDirection, DirectionMethod, ReasoningError, SvmOptions};
use crate::code::FaceCode;
use crate::geometry::ComponentId;
use crate::networks::FaceModel;

/// 2x2 counts indexed by `[attribute][confound]`, where index 0 is the
/// negative label and index 1 the positive one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Contingency(pub [[usize; 2]; 2]);

impl Contingency {
    pub fn count(attr: &[i8], confound: &[i8]) -> Self {
        let mut cells = [[0; 2]; 2];
        for (&a, &c) in attr.iter().zip(confound) {
            cells[(a > 0) as usize][(c > 0) as usize] += 1;
        }
        Self(cells)
    }

    pub fn max(&self) -> usize {
        self.0.iter().flatten().copied().max().unwrap_or(0)
    }

    pub fn min(&self) -> usize {
        self.0.iter().flatten().copied().min().unwrap_or(0)
    }

    /// Largest over smallest cell; infinite with an empty cell.
    pub fn ratio(&self) -> f64 {
        match self.min() {
            0 => f64::INFINITY,
            m => self.max() as f64 / m as f64,
        }
    }
}

impl fmt::Display for Contingency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [[nn, np], [pn, pp]] = self.0;
        writeln!(f, "{:>12} {:>10} {:>10}", "", "conf -1", "conf +1")?;
        writeln!(f, "{:>12} {nn:>10} {np:>10}", "attr -1")?;
        write!(f, "{:>12} {pn:>10} {pp:>10}", "attr +1")
    }
}

#[derive(Debug, Clone)]
pub struct DebiasOptions {
    pub name: String,
    /// Components the virtual-sample edits may touch.
    pub edit_components: BTreeSet<ComponentId>,
    /// Support of the initial and recomputed directions.
    pub relevant: BTreeSet<ComponentId>,
    pub svm: SvmOptions,
}

#[derive(Debug, Clone)]
pub struct DebiasReport {
    pub before: Contingency,
    pub after: Contingency,
    pub virtual_samples: usize,
    /// The synthesised codes with their (attribute, confound) labels.
    pub virtual_codes: Vec<FaceCode>,
    pub virtual_labels: Vec<(i8, i8)>,
    /// Direction fitted on the original samples.
    pub biased: AttributeDirection,
    pub debiased: AttributeDirection,
}

/// Balance the attribute x confound table with virtual samples and refit the
/// attribute direction on the balanced set.
///
/// Each deficit cell `(a, c)` is filled up to the largest cell count by
/// taking samples from `(-a, c)` in order and moving their projection on the
/// edit direction to the mean projection of class `a`. The edit direction is
/// the biased direction restricted to `edit_components`, so the confound's
/// blocks are copied unchanged. With a model, the edited codes are decoded
/// and re-encoded before refitting.
pub fn debias_directions(
    model: Option<&FaceModel>,
    codes: &[FaceCode],
    attribute: &[i8],
    confound: &[i8],
    options: &DebiasOptions,
) -> Result<DebiasReport, ReasoningError> {
    check_labels(codes, attribute)?;
    if confound.len() != codes.len() || confound.iter().any(|&c| c != 1 && c != -1) {
        return Err(ReasoningError::Dimension("confound labels must be ±1, one per code".into()));
    }
    let before = Contingency::count(attribute, confound);
    let biased = direction_svm(&options.name, codes, attribute, &options.relevant, &options.svm)?;
    let target = before.max();
    for c in 0..2 {
        for a in 0..2 {
            if before.0[a][c] < target && before.0[1 - a][c] == 0 {
                return Err(ReasoningError::Balancing(format!(
                    "cell (attr {}, confound {}) needs {} samples but its confound row is empty\n{before}",
                    sign(a),
                    sign(c),
                    target - before.0[a][c]
                )));
            }
        }
    }
    if before.min() == target {
        let mut debiased = biased.clone();
        debiased.method = DirectionMethod::Debiased;
        return Ok(DebiasReport {
            before,
            after: before,
            virtual_samples: 0,
            virtual_codes: Vec::new(),
            virtual_labels: Vec::new(),
            biased,
            debiased,
        });
    }

    let edit_dir = AttributeDirection::from_concat(
        &options.name,
        &biased.concat(),
        &options.edit_components,
        DirectionMethod::Svm,
    )?;
    let v = edit_dir.concat();
    let proj: Vec<f64> = codes.iter().map(|z| dot(&z.concat(), &v)).collect();
    let mut class_mean = [0.0; 2];
    for a in 0..2 {
        let members: Vec<f64> = (0..codes.len()).filter(|&i| (attribute[i] > 0) as usize == a).map(|i| proj[i]).collect();
        class_mean[a] = members.iter().sum::<f64>() / members.len() as f64;
    }

    let mut virt = Vec::new();
    let mut virt_attr = Vec::new();
    let mut virt_conf = Vec::new();
    for c in 0..2 {
        for a in 0..2 {
            let deficit = target - before.0[a][c];
            if deficit == 0 {
                continue;
            }
            let donors: Vec<usize> = (0..codes.len())
                .filter(|&i| (attribute[i] > 0) as usize == 1 - a && (confound[i] > 0) as usize == c)
                .collect();
            for k in 0..deficit {
                let i = donors[k % donors.len()];
                let alpha = class_mean[a] - proj[i];
                virt.push(super::edit_attribute(&codes[i], &edit_dir, alpha)?);
                virt_attr.push(sign(a));
                virt_conf.push(sign(c));
            }
        }
    }
    if let Some(model) = model {
        let images = model.decode_batch(&virt)?;
        let refs: Vec<_> = images.iter().collect();
        virt = model.encode_batch(&refs)?;
    }
    let virtual_samples = virt.len();
    let mut all = codes.to_vec();
    all.extend(virt.iter().cloned());
    let mut all_attr = attribute.to_vec();
    all_attr.extend(&virt_attr);
    let mut all_conf = confound.to_vec();
    all_conf.extend(&virt_conf);
    let after = Contingency::count(&all_attr, &all_conf);
    let mut debiased = direction_svm(&options.name, &all, &all_attr, &options.relevant, &options.svm)?;
    debiased.method = DirectionMethod::Debiased;
    Ok(DebiasReport {
        before,
        after,
        virtual_samples,
        virtual_codes: virt,
        virtual_labels: virt_attr.into_iter().zip(virt_conf).collect(),
        biased,
        debiased,
    })
}

fn sign(i: usize) -> i8 {
    if i == 1 {
        1
    } else {
        -1
    }
}
