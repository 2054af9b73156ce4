//! Multi-metric patch-correlation tensors.
//!
//! Every pair of target/query patches is scored under a set of similarity
//! metrics; each metric yields a 4D view `R(i,j,k,l)` and the views stack
//! into the order-5 matching tensor fed to the network, one view per
//! pseudo-image channel.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::patching::PatchGrid;
use crate::tensor::Tensor;

/// A patch-pair similarity metric. Distance-based metrics are mapped to
/// similarities via `s = 1/(1+d)` so every channel is bounded.
#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    /// Cosine of mean-centered patch vectors, in [-1,1].
    Cosine,
    /// `1/(1+d)` over the Euclidean distance, in (0,1].
    EuclideanSim,
    /// `1/(1+d)` over the Manhattan distance, in (0,1].
    ManhattanSim,
    /// `1/(1+d)` over a diagonal Mahalanobis distance; the per-component
    /// inverse variances come from a corpus estimate.
    MahalanobisSim { inv_var: Vec<f64> },
}

/// Tag used for configuration and serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Cosine,
    EuclideanSim,
    ManhattanSim,
    MahalanobisSim,
}

impl Metric {
    pub fn kind(&self) -> MetricKind {
        match self {
            Metric::Cosine => MetricKind::Cosine,
            Metric::EuclideanSim => MetricKind::EuclideanSim,
            Metric::ManhattanSim => MetricKind::ManhattanSim,
            Metric::MahalanobisSim { .. } => MetricKind::MahalanobisSim,
        }
    }

    /// The default view set: cosine plus the two plain distance channels.
    pub fn default_set() -> Vec<Metric> {
        alloc::vec![Metric::Cosine, Metric::EuclideanSim, Metric::ManhattanSim]
    }
}

impl MetricKind {
    pub fn tag(&self) -> u8 {
        match self {
            MetricKind::Cosine => 0,
            MetricKind::EuclideanSim => 1,
            MetricKind::ManhattanSim => 2,
            MetricKind::MahalanobisSim => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<MetricKind> {
        match tag {
            0 => Some(MetricKind::Cosine),
            1 => Some(MetricKind::EuclideanSim),
            2 => Some(MetricKind::ManhattanSim),
            3 => Some(MetricKind::MahalanobisSim),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Cosine => "cosine",
            MetricKind::EuclideanSim => "euclidean",
            MetricKind::ManhattanSim => "manhattan",
            MetricKind::MahalanobisSim => "mahalanobis",
        }
    }
}

/// Diagonal covariance estimate over a patch corpus, ridge-regularized,
/// inverted for Mahalanobis scoring.
pub fn estimate_inv_variances(patches: &[&[f64]], ridge: f64) -> Result<Vec<f64>> {
    let Some(first) = patches.first() else {
        return Err(CoreError::Config("empty patch corpus".to_string()));
    };
    let len = first.len();
    let n = patches.len() as f64;
    let mut mean = alloc::vec![0.0; len];
    for p in patches {
        if p.len() != len {
            return Err(CoreError::Dimension("ragged patch corpus".to_string()));
        }
        for (m, &v) in mean.iter_mut().zip(p.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = alloc::vec![0.0; len];
    for p in patches {
        for ((v, &x), &m) in var.iter_mut().zip(p.iter()).zip(mean.iter()) {
            *v += (x - m) * (x - m);
        }
    }
    Ok(var.iter().map(|&v| 1.0 / (v / n + ridge)).collect())
}

/// Scores one patch pair under one metric.
pub fn patch_similarity(p: &[f64], q: &[f64], metric: &Metric) -> Result<f64> {
    if p.len() != q.len() {
        return Err(CoreError::Dimension(
            "patch vectors differ in length".to_string(),
        ));
    }
    let score = match metric {
        Metric::Cosine => {
            let mp = p.iter().sum::<f64>() / p.len() as f64;
            let mq = q.iter().sum::<f64>() / q.len() as f64;
            let mut dot = 0.0;
            let mut np = 0.0;
            let mut nq = 0.0;
            for (&a, &b) in p.iter().zip(q.iter()) {
                let (a, b) = (a - mp, b - mq);
                dot += a * b;
                np += a * a;
                nq += b * b;
            }
            if np == 0.0 || nq == 0.0 {
                0.0
            } else {
                dot / (libm::sqrt(np) * libm::sqrt(nq))
            }
        }
        Metric::EuclideanSim => {
            let d2: f64 = p
                .iter()
                .zip(q.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            1.0 / (1.0 + libm::sqrt(d2))
        }
        Metric::ManhattanSim => {
            let d: f64 = p
                .iter()
                .zip(q.iter())
                .map(|(&a, &b)| libm::fabs(a - b))
                .sum();
            1.0 / (1.0 + d)
        }
        Metric::MahalanobisSim { inv_var } => {
            if inv_var.len() != p.len() {
                return Err(CoreError::Dimension(
                    "mahalanobis variance length mismatch".to_string(),
                ));
            }
            let d2: f64 = p
                .iter()
                .zip(q.iter())
                .zip(inv_var.iter())
                .map(|((&a, &b), &iv)| (a - b) * (a - b) * iv)
                .sum();
            1.0 / (1.0 + libm::sqrt(d2))
        }
    };
    Ok(score)
}

/// One metric's 4D correlation view, shape rows x cols x rows x cols with
/// (i,j) indexing target patches and (k,l) query patches.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTensor {
    pub metric: MetricKind,
    pub values: Tensor,
}

/// The order-5 matching tensor: one view per metric over a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchTensor {
    pub views: Vec<ViewTensor>,
    pub target_id: String,
    pub query_id: String,
}

impl MatchTensor {
    pub fn spatial_shape(&self) -> &[usize] {
        self.views[0].values.shape()
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    /// Packs the views into one channels-first rank-5 tensor
    /// [views, rows, cols, rows, cols] for the network.
    pub fn to_input_tensor(&self) -> Tensor {
        let spatial = self.spatial_shape().to_vec();
        let mut shape = alloc::vec![self.views.len()];
        shape.extend_from_slice(&spatial);
        let mut data = Vec::with_capacity(self.views.len() * self.views[0].values.len());
        for v in &self.views {
            data.extend_from_slice(v.values.data());
        }
        Tensor::new(shape, data).expect("views share one shape")
    }
}

/// Fills one metric view over all target/query patch pairs.
pub fn build_view(target: &PatchGrid, query: &PatchGrid, metric: &Metric) -> Result<ViewTensor> {
    if target.spec != query.spec || target.patch_len != query.patch_len {
        return Err(CoreError::Dimension(
            "target and query grids do not match".to_string(),
        ));
    }
    let (m, n) = (target.spec.rows, target.spec.cols);
    let mut values = Tensor::zeros(&[m, n, m, n]);
    {
        let out = values.data_mut();
        let mut idx = 0usize;
        for i in 0..m {
            for j in 0..n {
                let p = target.patch(i, j);
                for k in 0..m {
                    for l in 0..n {
                        out[idx] = patch_similarity(p, query.patch(k, l), metric)?;
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(ViewTensor {
        metric: metric.kind(),
        values,
    })
}

/// Builds the full multi-view matching tensor in the given metric order.
pub fn build_multiview(
    target: &PatchGrid,
    query: &PatchGrid,
    metrics: &[Metric],
    target_id: &str,
    query_id: &str,
) -> Result<MatchTensor> {
    if metrics.is_empty() {
        return Err(CoreError::Config("empty metric list".to_string()));
    }
    for (i, a) in metrics.iter().enumerate() {
        for b in &metrics[i + 1..] {
            if a.kind() == b.kind() {
                return Err(CoreError::Config("duplicate metric in list".to_string()));
            }
        }
    }
    let views = metrics
        .iter()
        .map(|mt| build_view(target, query, mt))
        .collect::<Result<Vec<_>>>()?;
    Ok(MatchTensor {
        views,
        target_id: target_id.to_string(),
        query_id: query_id.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::{decompose, GridSpec, Image};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(rng: &mut ChaCha8Rng, side: usize) -> Image {
        let pixels = (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect();
        Image::new(side, side, 1, pixels).unwrap()
    }

    #[test]
    fn identical_patches_score_channel_maximum() {
        let p = [0.1, 0.9, 0.4, 0.2];
        assert!((patch_similarity(&p, &p, &Metric::Cosine).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(patch_similarity(&p, &p, &Metric::EuclideanSim).unwrap(), 1.0);
        assert_eq!(patch_similarity(&p, &p, &Metric::ManhattanSim).unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_similarities() {
        // Mean-centered (1,0) and (0,1) are antiparallel: cosine -1.
        let p = [1.0, 0.0];
        let q = [0.0, 1.0];
        assert!(
            (patch_similarity(&p, &q, &Metric::Cosine).unwrap() - (-1.0)).abs() < 1e-12
        );
        assert!(
            (patch_similarity(&p, &q, &Metric::ManhattanSim).unwrap() - 1.0 / 3.0).abs() < 1e-12
        );
        // Orthogonal after centering: (1,0,0,-1)/.. vs (0,1,-1,0)/..
        let p = [1.0, 0.5, 0.5, 0.0];
        let q = [0.5, 1.0, 0.0, 0.5];
        assert!(patch_similarity(&p, &q, &Metric::Cosine).unwrap().abs() < 1e-12);
    }

    #[test]
    fn zero_centered_vector_scores_zero_cosine() {
        let constant = [0.5, 0.5, 0.5];
        let other = [0.1, 0.9, 0.3];
        assert_eq!(patch_similarity(&constant, &other, &Metric::Cosine).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_dimension_error() {
        assert!(patch_similarity(&[1.0], &[1.0, 2.0], &Metric::Cosine).is_err());
    }

    #[test]
    fn mahalanobis_diag_matches_hand_formula() {
        let inv_var = alloc::vec![4.0, 1.0];
        let m = Metric::MahalanobisSim { inv_var };
        let s = patch_similarity(&[1.0, 0.0], &[0.0, 1.0], &m).unwrap();
        // d = sqrt(1*4 + 1*1) = sqrt(5)
        assert!((s - 1.0 / (1.0 + libm::sqrt(5.0))).abs() < 1e-12);
    }

    #[test]
    fn view_diagonal_is_one_for_self_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = noise_image(&mut rng, 16);
        let grid = decompose(&img, GridSpec::new(4, 4).unwrap(), 16).unwrap();
        let view = build_view(&grid, &grid, &Metric::Cosine).unwrap();
        assert_eq!(view.values.shape(), &[4, 4, 4, 4]);
        for i in 0..4 {
            for j in 0..4 {
                assert!((view.values.at(&[i, j, i, j]) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_by_two_view_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let a = noise_image(&mut rng, 8);
        let b = noise_image(&mut rng, 8);
        let ga = decompose(&a, GridSpec::new(2, 2).unwrap(), 8).unwrap();
        let gb = decompose(&b, GridSpec::new(2, 2).unwrap(), 8).unwrap();
        for metric in Metric::default_set() {
            let view = build_view(&ga, &gb, &metric).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        for l in 0..2 {
                            let expect =
                                patch_similarity(ga.patch(i, j), gb.patch(k, l), &metric).unwrap();
                            assert_eq!(view.values.at(&[i, j, k, l]), expect);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn multiview_shape_and_singleton() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = noise_image(&mut rng, 28);
        let b = noise_image(&mut rng, 28);
        let ga = decompose(&a, GridSpec::new(14, 14).unwrap(), 28).unwrap();
        let gb = decompose(&b, GridSpec::new(14, 14).unwrap(), 28).unwrap();
        let mt = build_multiview(&ga, &gb, &Metric::default_set(), "t", "q").unwrap();
        assert_eq!(mt.view_count(), 3);
        assert_eq!(mt.spatial_shape(), &[14, 14, 14, 14]);
        assert_eq!(mt.to_input_tensor().shape(), &[3, 14, 14, 14, 14]);

        let single = build_multiview(&ga, &gb, &[Metric::Cosine], "t", "q").unwrap();
        let direct = build_view(&ga, &gb, &Metric::Cosine).unwrap();
        assert_eq!(single.views[0], direct);
    }

    #[test]
    fn multiview_rejects_empty_and_duplicate_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = noise_image(&mut rng, 8);
        let ga = decompose(&a, GridSpec::new(2, 2).unwrap(), 8).unwrap();
        assert!(build_multiview(&ga, &ga, &[], "t", "q").is_err());
        assert!(
            build_multiview(&ga, &ga, &[Metric::Cosine, Metric::Cosine], "t", "q").is_err()
        );
    }

    #[test]
    fn swapping_arguments_transposes_every_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = noise_image(&mut rng, 12);
        let b = noise_image(&mut rng, 12);
        let ga = decompose(&a, GridSpec::new(3, 3).unwrap(), 12).unwrap();
        let gb = decompose(&b, GridSpec::new(3, 3).unwrap(), 12).unwrap();
        for metric in Metric::default_set() {
            let ab = build_view(&ga, &gb, &metric).unwrap();
            let ba = build_view(&gb, &ga, &metric).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        for l in 0..3 {
                            assert_eq!(
                                ab.values.at(&[i, j, k, l]),
                                ba.values.at(&[k, l, i, j])
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn channel_ranges_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let a = noise_image(&mut rng, 12);
        let b = noise_image(&mut rng, 12);
        let ga = decompose(&a, GridSpec::new(3, 3).unwrap(), 12).unwrap();
        let gb = decompose(&b, GridSpec::new(3, 3).unwrap(), 12).unwrap();
        let cos = build_view(&ga, &gb, &Metric::Cosine).unwrap();
        assert!(cos.values.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        for metric in [Metric::EuclideanSim, Metric::ManhattanSim] {
            let v = build_view(&ga, &gb, &metric).unwrap();
            assert!(v.values.data().iter().all(|&s| s > 0.0 && s <= 1.0));
        }
    }
}
