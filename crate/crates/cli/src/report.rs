//! Model files and kernel-weight summaries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mkl_core::regfam::PRUNE_THRESHOLD;
use mkl_core::solver::MklModel;

use crate::config::parse_json;
use crate::CliError;

pub const MODEL_FORMAT: &str = "mkl-model/1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub selected_c: Option<f64>,
    /// Elastic-net mixing actually used for the final fit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv_score: Option<f64>,
    pub outer_iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clamped: Vec<usize>,
    /// Final negative log marginal likelihood for Bayes fits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub kernel_labels: Vec<String>,
    pub metadata: Metadata,
    pub model: MklModel,
}

impl ModelFile {
    pub fn new(model: MklModel, kernel_labels: Vec<String>, metadata: Metadata) -> Self {
        Self { format: MODEL_FORMAT.into(), kernel_labels, metadata, model }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let file: ModelFile = parse_json(&text, path)?;
        if file.format != MODEL_FORMAT {
            return Err(CliError::Config(format!("{}: unsupported model format '{}'", path.display(), file.format)));
        }
        let m = &file.model;
        if m.weights.len() != m.kernels.len() || m.weights.len() != file.kernel_labels.len() {
            return Err(CliError::Config(format!(
                "{}: {} weights, {} kernels, {} labels",
                path.display(),
                m.weights.len(),
                m.kernels.len(),
                file.kernel_labels.len()
            )));
        }
        if m.fitted.len() != m.alpha.len() {
            return Err(CliError::Config(format!("{}: alpha and fitted lengths differ", path.display())));
        }
        Ok(file)
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        let mut s = serde_json::to_string_pretty(self).map_err(mkl_core::MklError::from)?;
        s.push('\n');
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    Family,
    Parameter,
}

impl std::str::FromStr for GroupKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "family" => Ok(GroupKey::Family),
            "parameter" | "gamma" => Ok(GroupKey::Parameter),
            other => Err(format!("unknown grouping key '{other}' (use family or parameter)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEntry {
    pub index: usize,
    pub label: String,
    pub family: String,
    pub parameter: Option<f64>,
    pub weight: f64,
    /// 1 for the largest weight; ties keep bank order.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parameter: Option<f64>,
    pub count: usize,
    pub nonzero: usize,
    pub sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub kernels: Vec<KernelEntry>,
    pub nonzero: usize,
    pub total_weight: f64,
    pub groups: Vec<Group>,
}

pub fn weight_report(file: &ModelFile, keys: &[GroupKey]) -> WeightReport {
    let m = &file.model;
    let mut kernels: Vec<KernelEntry> = m
        .kernels
        .iter()
        .zip(m.weights.iter())
        .enumerate()
        .map(|(index, (info, &weight))| {
            let (family, parameter) = match &info.descriptor {
                Some(d) => (d.kind.family_name().to_string(), d.kind.gamma()),
                None => ("precomputed".to_string(), None),
            };
            KernelEntry { index, label: file.kernel_labels[index].clone(), family, parameter, weight, rank: 0 }
        })
        .collect();
    kernels.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.index.cmp(&b.index)));
    for (r, k) in kernels.iter_mut().enumerate() {
        k.rank = r + 1;
    }
    let nonzero = kernels.iter().filter(|k| k.weight >= PRUNE_THRESHOLD).count();
    let total_weight = m.weights.iter().sum();

    let mut groups: Vec<Group> = Vec::new();
    let mut by_index: Vec<&KernelEntry> = kernels.iter().collect();
    by_index.sort_by_key(|k| k.index);
    for k in by_index {
        let family = keys.contains(&GroupKey::Family).then(|| k.family.clone());
        let parameter = if keys.contains(&GroupKey::Parameter) { k.parameter } else { None };
        let pos = groups.iter().position(|g| g.family == family && g.parameter.map(f64::to_bits) == parameter.map(f64::to_bits));
        let g = match pos {
            Some(i) => &mut groups[i],
            None => {
                groups.push(Group { family, parameter, count: 0, nonzero: 0, sum: 0.0 });
                groups.last_mut().expect("just pushed")
            }
        };
        g.count += 1;
        g.sum += k.weight;
        if k.weight >= PRUNE_THRESHOLD {
            g.nonzero += 1;
        }
    }
    WeightReport { kernels, nonzero, total_weight, groups }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mkl_core::gram::KernelDescriptor;
    use mkl_core::regfam::{Family, KernelWeights, RegularizerSpec};
    use mkl_core::solver::{KernelInfo, LossSpec, ModelKind};

    fn model_with(weights: Vec<f64>, descs: Vec<Option<KernelDescriptor>>) -> ModelFile {
        let labels = descs.iter().enumerate().map(|(i, d)| d.as_ref().map_or(format!("k{i}"), KernelDescriptor::label)).collect();
        let model = MklModel {
            alpha: vec![0.0],
            bias: 0.0,
            weights: KernelWeights::new(weights).unwrap(),
            kind: ModelKind::Regularized { regularizer: RegularizerSpec::kernel_weight(Family::BlockOneNorm, 1.0).unwrap() },
            loss: LossSpec::squared(1.0).unwrap(),
            kernels: descs.into_iter().map(|descriptor| KernelInfo { descriptor, scale: 1.0 }).collect(),
            fitted: vec![0.0],
            training: None,
            fingerprint: None,
        };
        ModelFile::new(model, labels, Metadata::default())
    }

    #[test]
    fn ranks_and_threshold() {
        let f = model_with(vec![0.2, 5e-11, 0.7, 0.0], vec![None, None, None, None]);
        let r = weight_report(&f, &[GroupKey::Family]);
        assert_eq!(r.nonzero, 2);
        assert_eq!(r.kernels[0].index, 2);
        assert_eq!(r.kernels[0].rank, 1);
        assert_eq!(r.kernels.iter().map(|k| k.index).collect::<Vec<_>>(), vec![2, 0, 1, 3]);
        assert_eq!(r.groups.len(), 1);
        assert_eq!(r.groups[0].nonzero, 2);
    }

    #[test]
    fn grouping_by_family_and_parameter() {
        let descs = vec![
            Some(KernelDescriptor::gaussian(0.5)),
            Some(KernelDescriptor::gaussian(1.0)),
            Some(KernelDescriptor::gaussian(0.5).with_features(vec![0])),
            Some(KernelDescriptor::linear()),
        ];
        let f = model_with(vec![0.1, 0.2, 0.3, 0.4], descs);
        let r = weight_report(&f, &[GroupKey::Family, GroupKey::Parameter]);
        assert_eq!(r.groups.len(), 3);
        assert_eq!(r.groups[0].count, 2);
        assert_eq!(r.groups[0].parameter, Some(0.5));
        let r = weight_report(&f, &[GroupKey::Family]);
        assert_eq!(r.groups.iter().map(|g| g.count).collect::<Vec<_>>(), vec![3, 1]);
    }
}
