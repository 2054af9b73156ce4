//! Retrieval and localization metrics: AP / mAP@k, thresholded IoU
//! curves, and the seeded query partition used for cross-validated runs.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::patching::GridSpec;
use crate::tensor::Tensor;

/// One ranked result: target id plus the model's relevance score.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub target_id: String,
    pub score: f64,
}

/// A query's ranked target list, scores non-increasing, ids unique.
/// Ties keep the order in which entries were supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub query_id: String,
    entries: Vec<RunEntry>,
}

impl RetrievalRun {
    /// Stable-sorts the entries by descending score.
    pub fn new(query_id: &str, mut entries: Vec<RunEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !e.score.is_finite() {
                return Err(CoreError::Contract("non-finite score".to_string()));
            }
            if !seen.insert(e.target_id.clone()) {
                return Err(CoreError::Contract(format_dup(&e.target_id)));
            }
        }
        entries.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        Ok(RetrievalRun {
            query_id: query_id.to_string(),
            entries,
        })
    }

    pub fn entries(&self) -> &[RunEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn format_dup(id: &str) -> String {
    let mut s = String::from("duplicate target id ");
    s.push_str(id);
    s
}

/// Definition-based average precision over the (optionally truncated)
/// list: mean of precision-at-r over relevant ranks r. `k = None` means
/// no truncation; the denominator is then the full relevant count, else
/// min(|relevant|, k). Rank-based, so any strictly increasing transform
/// of the scores leaves it unchanged.
pub fn average_precision(
    run: &RetrievalRun,
    relevant: &BTreeSet<String>,
    k: Option<usize>,
) -> Result<f64> {
    if relevant.is_empty() {
        return Err(CoreError::Config("empty relevant set".to_string()));
    }
    if k == Some(0) {
        return Err(CoreError::Config("truncation depth must be >= 1".to_string()));
    }
    let cutoff = k.unwrap_or(run.len()).min(run.len());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (idx, e) in run.entries[..cutoff].iter().enumerate() {
        if relevant.contains(&e.target_id) {
            hits += 1;
            sum += hits as f64 / (idx + 1) as f64;
        }
    }
    let denom = match k {
        Some(k) => relevant.len().min(k),
        None => relevant.len(),
    };
    Ok(sum / denom as f64)
}

/// Mean AP over queries; each run's relevant set is looked up by query id.
pub fn map_at_k(
    runs: &[RetrievalRun],
    relevant: &BTreeMap<String, BTreeSet<String>>,
    k: Option<usize>,
) -> Result<f64> {
    if runs.is_empty() {
        return Err(CoreError::Config("no runs to average".to_string()));
    }
    let mut sum = 0.0;
    for run in runs {
        let rel = relevant
            .get(&run.query_id)
            .ok_or_else(|| CoreError::Lookup({
                let mut s = String::from("no relevance set for query ");
                s.push_str(&run.query_id);
                s
            }))?;
        sum += average_precision(run, rel, k)?;
    }
    Ok(sum / runs.len() as f64)
}

/// Axis-aligned box in normalized [0,1] image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RoiBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&x0)
            && (0.0..=1.0).contains(&y0)
            && (0.0..=1.0).contains(&x1)
            && (0.0..=1.0).contains(&y1)
            && x0 < x1
            && y0 < y1;
        if !ok {
            return Err(CoreError::Config(
                "box must be within [0,1] with positive extent".to_string(),
            ));
        }
        Ok(RoiBox { x0, y0, x1, y1 })
    }
}

/// Region-of-interest annotation for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiAnnotation {
    pub image_id: String,
    pub regions: Vec<RoiBox>,
}

/// Rasterizes the annotation onto the patch grid: a cell belongs to the
/// RoI when some single box covers at least half of the cell's area.
/// Returned row-major, `true` = RoI cell.
pub fn rasterize_roi(ann: &RoiAnnotation, grid: GridSpec) -> Vec<bool> {
    let mut out = vec![false; grid.cells()];
    let ch = 1.0 / grid.rows as f64;
    let cw = 1.0 / grid.cols as f64;
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let (cy0, cy1) = (r as f64 * ch, (r + 1) as f64 * ch);
            let (cx0, cx1) = (c as f64 * cw, (c + 1) as f64 * cw);
            for b in &ann.regions {
                let ox = (b.x1.min(cx1) - b.x0.max(cx0)).max(0.0);
                let oy = (b.y1.min(cy1) - b.y0.max(cy0)).max(0.0);
                if ox * oy >= 0.5 * cw * ch {
                    out[r * grid.cols + c] = true;
                    break;
                }
            }
        }
    }
    out
}

fn check_normalized(p: &Tensor) -> Result<GridSpec> {
    if p.rank() != 2 {
        return Err(CoreError::Dimension("evidence map must be 2D".to_string()));
    }
    if p.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(CoreError::Contract(
            "evidence map must be max-normalized to [0,1]".to_string(),
        ));
    }
    GridSpec::new(p.shape()[0], p.shape()[1])
}

/// IoU between the thresholded map {cells with P > t} and the rasterized
/// RoI. Both masks empty → 1; otherwise intersection / union.
pub fn iou(p: &Tensor, ann: &RoiAnnotation, threshold: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(CoreError::Config("threshold must lie in [0,1)".to_string()));
    }
    let grid = check_normalized(p)?;
    let roi = rasterize_roi(ann, grid);
    let mut inter = 0usize;
    let mut union = 0usize;
    for (idx, &v) in p.data().iter().enumerate() {
        let pred = v > threshold;
        if pred || roi[idx] {
            union += 1;
        }
        if pred && roi[idx] {
            inter += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// IoU at thresholds 0.0, 0.1, ..., 0.9 and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct IouCurve {
    pub thresholds: [f64; 10],
    pub iou: [f64; 10],
    pub miou: f64,
}

pub fn miou(p: &Tensor, ann: &RoiAnnotation) -> Result<IouCurve> {
    let mut thresholds = [0.0; 10];
    let mut values = [0.0; 10];
    for i in 0..10 {
        thresholds[i] = i as f64 / 10.0;
        values[i] = iou(p, ann, thresholds[i])?;
    }
    let miou = values.iter().sum::<f64>() / 10.0;
    Ok(IouCurve {
        thresholds,
        iou: values,
        miou,
    })
}

/// Seeded partition of `count` query indices into `folds` disjoint groups
/// of near-equal size. Deterministic for a given (count, folds, seed).
pub fn kfold_split(count: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(CoreError::Config("need at least 2 folds".to_string()));
    }
    if count < folds {
        return Err(CoreError::Config(
            "fewer queries than folds".to_string(),
        ));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut out = vec![Vec::new(); folds];
    for (i, q) in idx.into_iter().enumerate() {
        out[i % folds].push(q);
    }
    for fold in &mut out {
        fold.sort_unstable();
    }
    Ok(out)
}

/// Mean and (population) standard deviation of a metric across folds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(CoreError::Config("no values to aggregate".to_string()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(Aggregate {
        mean,
        std: libm::sqrt(var),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn run(query: &str, ids_scores: &[(&str, f64)]) -> RetrievalRun {
        RetrievalRun::new(
            query,
            ids_scores
                .iter()
                .map(|(id, s)| RunEntry {
                    target_id: id.to_string(),
                    score: *s,
                })
                .collect(),
        )
        .unwrap()
    }

    fn rel(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn run_sorts_descending_with_stable_ties() {
        let r = run("q", &[("a", 0.2), ("b", 0.9), ("c", 0.5), ("d", 0.5)]);
        let ids: Vec<&str> = r.entries().iter().map(|e| e.target_id.as_str()).collect();
        assert_eq!(ids, ["b", "c", "d", "a"]);
        assert!(RetrievalRun::new(
            "q",
            vec![
                RunEntry { target_id: "x".into(), score: 0.1 },
                RunEntry { target_id: "x".into(), score: 0.2 },
            ],
        )
        .is_err());
    }

    #[test]
    fn perfect_ranking_gives_ap_one() {
        let r = run("q", &[("a", 0.9), ("b", 0.8), ("c", 0.1), ("d", 0.05)]);
        assert_eq!(average_precision(&r, &rel(&["a", "b"]), None).unwrap(), 1.0);
    }

    #[test]
    fn single_relevant_at_rank_two_gives_half() {
        let r = run("q", &[("a", 0.9), ("b", 0.8)]);
        assert_eq!(average_precision(&r, &rel(&["b"]), None).unwrap(), 0.5);
    }

    #[test]
    fn ap_matches_definitional_oracle_on_random_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..50 {
            let mut ids: Vec<usize> = (0..10).collect();
            ids.shuffle(&mut rng);
            let entries: Vec<(String, f64)> = ids
                .iter()
                .enumerate()
                .map(|(rank, id)| (id.to_string(), 1.0 - rank as f64 / 10.0))
                .collect();
            let refs: Vec<(&str, f64)> =
                entries.iter().map(|(id, s)| (id.as_str(), *s)).collect();
            let r = run("q", &refs);
            let relevant = rel(&["0", "1", "2"]);
            // Oracle: walk the ranked list, average precision at hits.
            let mut hits = 0;
            let mut acc = 0.0;
            for (i, e) in r.entries().iter().enumerate() {
                if relevant.contains(&e.target_id) {
                    hits += 1;
                    acc += hits as f64 / (i + 1) as f64;
                }
            }
            let oracle = acc / 3.0;
            let got = average_precision(&r, &relevant, None).unwrap();
            assert!((got - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn ap_is_invariant_to_monotone_score_transforms() {
        let r1 = run("q", &[("a", 0.9), ("b", 0.4), ("c", 0.3), ("d", 0.1)]);
        let r2 = run("q", &[("a", 900.0), ("b", 7.0), ("c", 6.5), ("d", 0.0)]);
        let relevant = rel(&["b", "d"]);
        assert_eq!(
            average_precision(&r1, &relevant, None).unwrap(),
            average_precision(&r2, &relevant, None).unwrap()
        );
    }

    #[test]
    fn map_at_infinity_equals_plain_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut runs = Vec::new();
        let mut relmap = BTreeMap::new();
        for q in 0..4 {
            let mut ids: Vec<usize> = (0..8).collect();
            ids.shuffle(&mut rng);
            let entries: Vec<(String, f64)> = ids
                .iter()
                .enumerate()
                .map(|(rank, id)| (id.to_string(), 1.0 / (rank + 1) as f64))
                .collect();
            let refs: Vec<(&str, f64)> =
                entries.iter().map(|(id, s)| (id.as_str(), *s)).collect();
            let qid = q.to_string();
            runs.push(run(&qid, &refs));
            relmap.insert(qid, rel(&["1", "3", "5"]));
        }
        let plain = map_at_k(&runs, &relmap, None).unwrap();
        let truncated = map_at_k(&runs, &relmap, Some(1_000_000)).unwrap();
        assert_eq!(plain, truncated);
    }

    #[test]
    fn perfect_queries_give_map_at_5_of_one() {
        let mut runs = Vec::new();
        let mut relmap = BTreeMap::new();
        for q in 0..3 {
            let qid = q.to_string();
            runs.push(run(
                &qid,
                &[("r1", 0.9), ("r2", 0.8), ("x1", 0.2), ("x2", 0.1)],
            ));
            relmap.insert(qid, rel(&["r1", "r2"]));
        }
        assert_eq!(map_at_k(&runs, &relmap, Some(5)).unwrap(), 1.0);
    }

    #[test]
    fn map_at_k_matches_hand_computed_mean() {
        // q0: relevant {a,b}, ranked a,x,b -> AP@2 = (1/1)/min(2,2) = 0.5
        // q1: relevant {c}, ranked x,c -> AP@2 = (1/2)/1 = 0.5
        let runs = vec![
            run("q0", &[("a", 0.9), ("x", 0.5), ("b", 0.2)]),
            run("q1", &[("x", 0.9), ("c", 0.5)]),
        ];
        let mut relmap = BTreeMap::new();
        relmap.insert("q0".to_string(), rel(&["a", "b"]));
        relmap.insert("q1".to_string(), rel(&["c"]));
        let got = map_at_k(&runs, &relmap, Some(2)).unwrap();
        assert!((got - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_relevant_set_is_config_error() {
        let r = run("q", &[("a", 0.9)]);
        assert!(average_precision(&r, &BTreeSet::new(), None).is_err());
    }

    fn ann(regions: &[(f64, f64, f64, f64)]) -> RoiAnnotation {
        RoiAnnotation {
            image_id: "img".to_string(),
            regions: regions
                .iter()
                .map(|&(x0, y0, x1, y1)| RoiBox::new(x0, y0, x1, y1).unwrap())
                .collect(),
        }
    }

    #[test]
    fn rasterize_half_coverage_rule() {
        // 4x4 grid; box covering the left half of column-1 cells only
        // reaches 50% of each cell it touches when it spans half a cell.
        let grid = GridSpec::new(4, 4).unwrap();
        let exact = rasterize_roi(&ann(&[(0.25, 0.0, 0.5, 0.25)]), grid);
        assert!(exact[1]); // full cell (0,1)
        let half = rasterize_roi(&ann(&[(0.25, 0.0, 0.375, 0.25)]), grid);
        assert!(half[1]); // covers exactly half -> counts
        let under = rasterize_roi(&ann(&[(0.25, 0.0, 0.35, 0.25)]), grid);
        assert!(!under[1]); // 40% -> excluded
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let grid_rows = 4;
        // P = 1 exactly on the rasterized box cells (top-left quadrant).
        let mut p = Tensor::zeros(&[grid_rows, grid_rows]);
        p.set(&[0, 0], 1.0);
        p.set(&[0, 1], 1.0);
        p.set(&[1, 0], 1.0);
        p.set(&[1, 1], 1.0);
        let a = ann(&[(0.0, 0.0, 0.5, 0.5)]);
        assert_eq!(iou(&p, &a, 0.5).unwrap(), 1.0);
        // Disjoint RoI in the bottom-right quadrant.
        let b = ann(&[(0.5, 0.5, 1.0, 1.0)]);
        assert_eq!(iou(&p, &b, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn iou_hand_counted_on_4x4() {
        // Predicted mask at t=0.4: cells with value > 0.4.
        let mut p = Tensor::zeros(&[4, 4]);
        p.set(&[0, 0], 1.0);
        p.set(&[0, 1], 0.5);
        p.set(&[2, 2], 0.45);
        p.set(&[3, 3], 0.2);
        // RoI: top-left quadrant = cells (0,0),(0,1),(1,0),(1,1).
        let a = ann(&[(0.0, 0.0, 0.5, 0.5)]);
        // pred = {(0,0),(0,1),(2,2)}; inter = 2, union = 5.
        assert!((iou(&p, &a, 0.4).unwrap() - 2.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn iou_rejects_unnormalized_map() {
        let p = Tensor::from_fn(&[4, 4], |_| 2.0);
        assert!(matches!(
            iou(&p, &ann(&[(0.0, 0.0, 0.5, 0.5)]), 0.1),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn raising_threshold_never_grows_the_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let p = Tensor::from_fn(&[5, 5], |_| rng.random_range(0.0..=1.0));
        let a = ann(&[(0.2, 0.2, 0.8, 0.8)]);
        let count = |t: f64| p.data().iter().filter(|&&v| v > t).count();
        for i in 0..9 {
            assert!(count(i as f64 / 10.0) >= count((i + 1) as f64 / 10.0));
            // iou stays defined at every threshold
            iou(&p, &a, i as f64 / 10.0).unwrap();
        }
    }

    #[test]
    fn miou_ideal_and_uniform_maps() {
        // P = 1 inside RoI, 0 outside -> IoU 1 at every threshold.
        let mut p = Tensor::zeros(&[4, 4]);
        for i in 0..2 {
            for j in 0..2 {
                p.set(&[i, j], 1.0);
            }
        }
        let a = ann(&[(0.0, 0.0, 0.5, 0.5)]);
        let curve = miou(&p, &a).unwrap();
        assert!(curve.iou.iter().all(|&v| v == 1.0));
        assert_eq!(curve.miou, 1.0);

        // Uniform P = 1 everywhere, RoI covering half the grid -> 0.5.
        let uniform = Tensor::ones(&[4, 4]);
        let half = ann(&[(0.0, 0.0, 1.0, 0.5)]);
        let curve = miou(&uniform, &half).unwrap();
        assert!(curve.iou.iter().all(|&v| v == 0.5));
        assert_eq!(curve.miou, 0.5);
    }

    #[test]
    fn miou_matches_per_threshold_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let p = Tensor::from_fn(&[6, 6], |_| rng.random_range(0.0..=1.0));
        let a = ann(&[(0.1, 0.3, 0.6, 0.9)]);
        let curve = miou(&p, &a).unwrap();
        let mut sum = 0.0;
        for i in 0..10 {
            let t = i as f64 / 10.0;
            let v = iou(&p, &a, t).unwrap();
            assert_eq!(curve.iou[i], v);
            sum += v;
        }
        assert!((curve.miou - sum / 10.0).abs() < 1e-12);
    }

    #[test]
    fn kfold_split_is_deterministic_and_partitions() {
        let a = kfold_split(23, 5, 7).unwrap();
        let b = kfold_split(23, 5, 7).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        for fold in &a {
            assert!(fold.len() == 4 || fold.len() == 5);
        }
        assert_ne!(a, kfold_split(23, 5, 8).unwrap());
        assert!(kfold_split(3, 4, 0).is_err());
        assert!(kfold_split(10, 1, 0).is_err());
    }

    #[test]
    fn mean_std_degenerate_and_hand_checked() {
        let a = mean_std(&[0.75, 0.75, 0.75]).unwrap();
        assert_eq!(a.mean, 0.75);
        assert_eq!(a.std, 0.0);
        let b = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!(b.mean, 2.0);
        assert_eq!(b.std, 1.0);
        assert!(mean_std(&[]).is_err());
    }
}
