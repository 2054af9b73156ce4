//! Pseudo-relevance feedback: pool the query-side evidence maps of the
//! top results into a mask, re-weight candidate matching tensors with it,
//! and re-rank with the frozen model.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::evalkit::{RetrievalRun, RunEntry};
use crate::explain::{explain_pair, normalize_map, CamNorm};
use crate::matchtensor::MatchTensor;
use crate::network::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Average,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrfConfig {
    /// How many top-ranked results are assumed relevant.
    pub depth: usize,
    pub mode: PoolMode,
}

impl Default for PrfConfig {
    fn default() -> Self {
        PrfConfig {
            depth: 5,
            mode: PoolMode::Average,
        }
    }
}

/// The pooled, max-normalized query mask: entries in [0,1], max entry 1
/// unless the pool was identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledQueryMask {
    pub values: Tensor,
    pub mode: PoolMode,
}

/// Elementwise mean or max of the query evidence maps, max-normalized.
pub fn pool_queries(maps: &[Tensor], mode: PoolMode) -> Result<PooledQueryMask> {
    let Some(first) = maps.first() else {
        return Err(CoreError::Config("no query maps to pool".to_string()));
    };
    if first.rank() != 2 {
        return Err(CoreError::Dimension("query maps must be 2D".to_string()));
    }
    let shape = first.shape().to_vec();
    let mut pooled = first.clone();
    for m in &maps[1..] {
        if m.shape() != shape {
            return Err(CoreError::Dimension(
                "query map shape mismatch".to_string(),
            ));
        }
        let pd = pooled.data_mut();
        for (acc, &v) in pd.iter_mut().zip(m.data()) {
            match mode {
                PoolMode::Average => *acc += v,
                PoolMode::Max => *acc = acc.max(v),
            }
        }
    }
    if mode == PoolMode::Average {
        pooled = pooled.scale(1.0 / maps.len() as f64);
    }
    Ok(PooledQueryMask {
        values: normalize_map(&pooled),
        mode,
    })
}

/// Scales every view entry by the mask at its query-side cell:
/// R'(i,j,k,l) = R(i,j,k,l) * mask(k,l).
pub fn apply_mask(t: &MatchTensor, mask: &PooledQueryMask) -> Result<MatchTensor> {
    let spatial = t.spatial_shape().to_vec();
    if mask.values.shape() != [spatial[2], spatial[3]] {
        return Err(CoreError::Dimension(
            "mask shape does not match query grid".to_string(),
        ));
    }
    let cols = spatial[3];
    let cells = spatial[2] * cols;
    let mut out = t.clone();
    for view in out.views.iter_mut() {
        let data = view.values.data_mut();
        for (idx, v) in data.iter_mut().enumerate() {
            *v *= mask.values.data()[idx % cells];
        }
    }
    Ok(out)
}

/// Reorders the run by the supplied replacement scores (same id order as
/// `initial.entries()`), breaking ties by prior rank.
pub fn reorder_by_scores(initial: &RetrievalRun, scores: &[f64]) -> Result<RetrievalRun> {
    if scores.len() != initial.len() {
        return Err(CoreError::Dimension(
            "one score per initial entry required".to_string(),
        ));
    }
    let entries: Vec<RunEntry> = initial
        .entries()
        .iter()
        .zip(scores)
        .map(|(e, &s)| RunEntry {
            target_id: e.target_id.clone(),
            score: s,
        })
        .collect();
    // RetrievalRun's stable sort on prior-rank order realizes the
    // tie-break rule.
    RetrievalRun::new(&initial.query_id, entries)
}

/// Full feedback round: pool the top-`depth` query maps, mask every
/// candidate tensor, re-score with the frozen model, re-sort.
/// `tensor_for` resolves a ranked target id to its matching tensor.
pub fn rerank(
    model: &Model,
    initial: &RetrievalRun,
    cfg: &PrfConfig,
    tensor_for: &dyn Fn(&str) -> Result<MatchTensor>,
) -> Result<RetrievalRun> {
    let mask = feedback_mask(model, initial, cfg, tensor_for)?;
    let mut scores = Vec::with_capacity(initial.len());
    for e in initial.entries() {
        let masked = apply_mask(&tensor_for(&e.target_id)?, &mask)?;
        scores.push(model.score(&masked.to_input_tensor())?);
    }
    reorder_by_scores(initial, &scores)
}

/// Target evidence under the feedback mask: the aggregated map is
/// contracted against the pooled query mask instead of ones, so each
/// query cell contributes in proportion to its pooled evidence. With an
/// all-ones mask this is exactly the plain decoded target map.
pub fn weighted_target_evidence(
    aggregated: &crate::explain::AggregatedCam,
    mask: &PooledQueryMask,
) -> Result<Tensor> {
    let m = &aggregated.values;
    if m.rank() != 4 {
        return Err(CoreError::Dimension(
            "aggregated map must be 4D".to_string(),
        ));
    }
    if mask.values.shape() != &m.shape()[2..] {
        return Err(CoreError::Dimension(
            "mask shape does not match query grid".to_string(),
        ));
    }
    crate::tensor::contract_double(m, &mask.values, (2, 3), (0, 1))
}

/// Removes the mask's uniform component: subtracts the mean and clamps at
/// zero, so only above-average query cells carry weight. The uniform part
/// of a mask contributes nothing beyond the plain decode, so stripping it
/// sharpens the weighted target evidence. A constant mask (no information)
/// is returned unchanged.
pub fn emphasize_mask(mask: &PooledQueryMask) -> PooledQueryMask {
    let data = mask.values.data();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let out: Vec<f64> = data.iter().map(|&v| (v - mean).max(0.0)).collect();
    if out.iter().all(|&v| v == 0.0) {
        return mask.clone();
    }
    PooledQueryMask {
        values: Tensor::new(mask.values.shape().to_vec(), out)
            .expect("shape preserved"),
        mode: mask.mode,
    }
}

/// Pools the query evidence maps of the top-`depth` entries.
pub fn feedback_mask(
    model: &Model,
    initial: &RetrievalRun,
    cfg: &PrfConfig,
    tensor_for: &dyn Fn(&str) -> Result<MatchTensor>,
) -> Result<PooledQueryMask> {
    if cfg.depth == 0 {
        return Err(CoreError::Config("feedback depth must be >= 1".to_string()));
    }
    if cfg.depth > initial.len() {
        return Err(CoreError::Config({
            let mut s = String::from("feedback depth exceeds ranked list length ");
            s.push_str(&initial.len().to_string());
            s
        }));
    }
    let mut q_maps = Vec::with_capacity(cfg.depth);
    for e in &initial.entries()[..cfg.depth] {
        let t = tensor_for(&e.target_id)?;
        let ex = explain_pair(model, &t, CamNorm::PerLayerMax)?;
        q_maps.push(ex.query_map.values);
    }
    pool_queries(&q_maps, cfg.mode)
}
