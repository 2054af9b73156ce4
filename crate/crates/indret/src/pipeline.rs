//! End-to-end orchestration shared by the CLI and the test harnesses:
//! dataset generation and loading, tensor building, training, ranking,
//! explaining, feedback re-ranking, evaluation, and the gradient
//! self-check.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use indret_core::evalkit::{
    self, kfold_split, map_at_k, miou, RetrievalRun, RoiAnnotation, RunEntry,
};
use indret_core::explain::{explain_pair, heatmap_image, CamNorm, Upsample};
use indret_core::har::{har_apply, har_gradients, har_mask, HarParams};
use indret_core::matchtensor::{build_multiview, MatchTensor, Metric};
use indret_core::network::{
    train_with, EpochStats, Model, ModelConfig, TrainConfig, TrainPair,
};
use indret_core::patching::{decompose, GridSpec, PatchGrid};
use indret_core::prf::{apply_mask, feedback_mask, reorder_by_scores, PrfConfig};
use indret_core::synth::{self, SyntheticConfig};
use indret_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AppError, Result};
use crate::formats::manifest::{
    load_manifest, save_annotations, save_manifest, DatasetManifest, GridDims, ManifestImage,
    ManifestQuery,
};
use crate::formats::report::MetricReport;
use crate::imgio;
use crate::parallel::{ordered_map, parallel_grad_map};

/// Writes a synthetic corpus to `out_dir`: PNG images under `images/`,
/// plus `manifest.json` and `annotations.json`.
pub fn write_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let ds = synth::generate(cfg)?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut images = Vec::new();
    for img in &ds.images {
        let rel = format!("images/{}.png", img.id);
        imgio::save_gray(&out_dir.join(&rel), &img.image)?;
        images.push(ManifestImage {
            id: img.id.clone(),
            path: rel,
        });
    }
    let manifest = DatasetManifest {
        format_version: crate::formats::manifest::FORMAT_VERSION,
        resolution: cfg.image_side,
        grid: GridDims {
            rows: cfg.grid.rows,
            cols: cfg.grid.cols,
        },
        images,
        queries: ds
            .queries
            .iter()
            .map(|q| ManifestQuery {
                id: q.query_id.clone(),
                image_id: q.image_id.clone(),
                relevant: q.relevant.clone(),
            })
            .collect(),
        base_dir: out_dir.to_path_buf(),
    };
    let manifest_path = out_dir.join("manifest.json");
    save_manifest(&manifest_path, &manifest)?;
    let ann_path = out_dir.join("annotations.json");
    save_annotations(&ann_path, &ds.annotations())?;
    Ok((manifest_path, ann_path))
}

/// A manifest with every referenced image decoded and decomposed into its
/// patch grid.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub grids: BTreeMap<String, PatchGrid>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let grid = manifest.grid_spec()?;
        let mut grids = BTreeMap::new();
        for img in &manifest.images {
            let image = imgio::load_image(&manifest.base_dir.join(&img.path))?;
            let pg = decompose(&image, grid, manifest.resolution).map_err(AppError::Core)?;
            grids.insert(img.id.clone(), pg);
        }
        Ok(Dataset { manifest, grids })
    }

    pub fn grid(&self, id: &str) -> Result<&PatchGrid> {
        self.grids
            .get(id)
            .ok_or_else(|| AppError::Validation(format!("unknown image id {id}")))
    }

    pub fn query(&self, query_id: &str) -> Result<&ManifestQuery> {
        self.manifest
            .queries
            .iter()
            .find(|q| q.id == query_id)
            .ok_or_else(|| AppError::Validation(format!("unknown query id {query_id}")))
    }

    /// Candidate target ids for a query: every corpus image except the
    /// query's own, in id order.
    pub fn candidates(&self, query_id: &str) -> Result<Vec<String>> {
        let q = self.query(query_id)?;
        Ok(self
            .manifest
            .images
            .iter()
            .map(|i| i.id.clone())
            .filter(|id| *id != q.image_id)
            .collect())
    }

    /// Relevance sets keyed by query id.
    pub fn relevance(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.manifest
            .queries
            .iter()
            .map(|q| (q.id.clone(), q.relevant.iter().cloned().collect()))
            .collect()
    }

    pub fn build_tensor(
        &self,
        target_id: &str,
        query_image_id: &str,
        metrics: &[Metric],
    ) -> Result<MatchTensor> {
        build_multiview(
            self.grid(target_id)?,
            self.grid(query_image_id)?,
            metrics,
            target_id,
            query_image_id,
        )
        .map_err(AppError::Core)
    }
}

/// The default verification model: four blocks (8, 16, 16, 16 channels),
/// stride 2 in block two only, 3^4 kernels. Keeping the two deep blocks
/// at half resolution (instead of quarter) is what lets the decoded
/// evidence maps localize on small grids.
pub fn default_model_config(
    views: usize,
    grid: GridSpec,
    har_enabled: bool,
    seed: u64,
) -> ModelConfig {
    let mut cfg = ModelConfig::default_for(views, grid.rows, grid.cols);
    cfg.har_enabled = har_enabled;
    cfg.seed = seed;
    cfg
}

/// Builds balanced labeled pairs for the given training queries:
/// (query, relevant target) positives and an equal number of seeded
/// negatives drawn from distractors and other classes.
pub fn training_pairs(
    dataset: &Dataset,
    train_queries: &[String],
    metrics: &[Metric],
    seed: u64,
    pool: &rayon::ThreadPool,
) -> Result<Vec<TrainPair>> {
    let mut jobs: Vec<(String, String, bool)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for qid in train_queries {
        let q = dataset.query(qid)?;
        let positives: Vec<String> = q.relevant.clone();
        let negatives_pool: Vec<String> = dataset
            .candidates(qid)?
            .into_iter()
            .filter(|id| !q.relevant.contains(id))
            .collect();
        if negatives_pool.is_empty() {
            return Err(AppError::Validation(format!(
                "query {qid} has no negative candidates"
            )));
        }
        for t in &positives {
            jobs.push((t.clone(), q.image_id.clone(), true));
            let n = &negatives_pool[rng.random_range(0..negatives_pool.len())];
            jobs.push((n.clone(), q.image_id.clone(), false));
        }
    }
    let pairs = ordered_map(pool, jobs.len(), |i| {
        let (t, qi, relevant) = &jobs[i];
        let tensor = dataset.build_tensor(t, qi, metrics)?;
        Ok(TrainPair {
            input: tensor.to_input_tensor(),
            relevant: *relevant,
        })
    })?;
    Ok(pairs)
}

/// Trains a model on the pairs using the pool's parallel gradient mapper.
pub fn train_model(
    model: &mut Model,
    pairs: &[TrainPair],
    cfg: &TrainConfig,
    pool: &rayon::ThreadPool,
) -> Result<Vec<EpochStats>> {
    train_with(model, pairs, cfg, &|m: &Model, b: &[&TrainPair]| {
        parallel_grad_map(pool, m, b)
    })
    .map_err(AppError::Core)
}

/// Scores every candidate for the query and returns the ranked run.
pub fn rank_query(
    model: &Model,
    dataset: &Dataset,
    query_id: &str,
    metrics: &[Metric],
    pool: &rayon::ThreadPool,
) -> Result<RetrievalRun> {
    let q = dataset.query(query_id)?;
    let candidates = dataset.candidates(query_id)?;
    let scores = ordered_map(pool, candidates.len(), |i| {
        let tensor = dataset.build_tensor(&candidates[i], &q.image_id, metrics)?;
        model
            .score(&tensor.to_input_tensor())
            .map_err(AppError::Core)
    })?;
    let entries: Vec<RunEntry> = candidates
        .into_iter()
        .zip(scores)
        .map(|(target_id, score)| RunEntry { target_id, score })
        .collect();
    RetrievalRun::new(query_id, entries).map_err(AppError::Core)
}

/// One feedback round over an existing run, re-scoring in parallel.
pub fn prf_rerank(
    model: &Model,
    dataset: &Dataset,
    run: &RetrievalRun,
    cfg: &PrfConfig,
    metrics: &[Metric],
    pool: &rayon::ThreadPool,
) -> Result<RetrievalRun> {
    let q = dataset.query(&run.query_id)?;
    let lookup = |target_id: &str| dataset
        .build_tensor(target_id, &q.image_id, metrics)
        .map_err(|e| indret_core::CoreError::Lookup(e.to_string()));
    let mask = feedback_mask(model, run, cfg, &lookup).map_err(AppError::Core)?;
    let entries = run.entries();
    let scores = ordered_map(pool, entries.len(), |i| {
        let tensor = dataset.build_tensor(&entries[i].target_id, &q.image_id, metrics)?;
        let masked = apply_mask(&tensor, &mask).map_err(AppError::Core)?;
        model
            .score(&masked.to_input_tensor())
            .map_err(AppError::Core)
    })?;
    reorder_by_scores(run, &scores).map_err(AppError::Core)
}

/// Everything the `explain` subcommand writes for one pair.
pub struct ExplainArtifacts {
    pub score: f64,
    pub target_map: Tensor,
    pub query_map: Tensor,
    pub target_norm: Tensor,
    pub query_norm: Tensor,
}

pub fn explain_to_files(
    model: &Model,
    tensor: &MatchTensor,
    out_dir: &Path,
    prefix: &str,
    norm: CamNorm,
    heatmap_side: usize,
) -> Result<ExplainArtifacts> {
    let ex = explain_pair(model, tensor, norm).map_err(AppError::Core)?;
    std::fs::create_dir_all(out_dir)?;
    crate::formats::mapcsv::save(
        &out_dir.join(format!("{prefix}_target.csv")),
        &ex.target_map.values,
    )?;
    crate::formats::mapcsv::save(
        &out_dir.join(format!("{prefix}_query.csv")),
        &ex.query_map.values,
    )?;
    let hm_t = heatmap_image(&ex.target_norm, heatmap_side, Upsample::Nearest)
        .map_err(AppError::Core)?;
    let hm_q = heatmap_image(&ex.query_norm, heatmap_side, Upsample::Nearest)
        .map_err(AppError::Core)?;
    imgio::save_gray(&out_dir.join(format!("{prefix}_target.png")), &hm_t)?;
    imgio::save_gray(&out_dir.join(format!("{prefix}_query.png")), &hm_q)?;
    Ok(ExplainArtifacts {
        score: ex.score.prob_relevant,
        target_map: ex.target_map.values,
        query_map: ex.query_map.values,
        target_norm: ex.target_norm,
        query_norm: ex.query_norm,
    })
}

/// Mean best-threshold IoU of decoded target evidence against the RoI
/// annotations, over every (query, relevant target) pair with an
/// annotation. Also returns the mean mIoU over the standard thresholds.
pub fn localization_scores(
    model: &Model,
    dataset: &Dataset,
    query_ids: &[String],
    annotations: &[RoiAnnotation],
    metrics: &[Metric],
    pool: &rayon::ThreadPool,
) -> Result<LocalizationScores> {
    let by_id: BTreeMap<&str, &RoiAnnotation> = annotations
        .iter()
        .map(|a| (a.image_id.as_str(), a))
        .collect();
    let mut jobs: Vec<(String, String, &RoiAnnotation)> = Vec::new();
    for qid in query_ids {
        let q = dataset.query(qid)?;
        for t in &q.relevant {
            if let Some(ann) = by_id.get(t.as_str()) {
                jobs.push((t.clone(), q.image_id.clone(), ann));
            }
        }
    }
    if jobs.is_empty() {
        return Err(AppError::Validation(
            "no annotated relevant targets to localize".into(),
        ));
    }
    let per_pair = ordered_map(pool, jobs.len(), |i| {
        let (t, qi, ann) = &jobs[i];
        let tensor = dataset.build_tensor(t, qi, metrics)?;
        let ex = explain_pair(model, &tensor, CamNorm::PerLayerMax).map_err(AppError::Core)?;
        let curve = miou(&ex.target_norm, ann).map_err(AppError::Core)?;
        let best = curve.iou.iter().cloned().fold(0.0, f64::max);
        Ok((best, curve.miou))
    })?;
    let n = per_pair.len() as f64;
    Ok(LocalizationScores {
        mean_best_iou: per_pair.iter().map(|p| p.0).sum::<f64>() / n,
        mean_miou: per_pair.iter().map(|p| p.1).sum::<f64>() / n,
        pairs: per_pair.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationScores {
    pub mean_best_iou: f64,
    pub mean_miou: f64,
    pub pairs: usize,
}

/// Ranks the given queries and assembles the retrieval metrics plus, when
/// annotations are supplied, the localization ones.
pub fn evaluate_queries(
    model: &Model,
    dataset: &Dataset,
    query_ids: &[String],
    annotations: Option<&[RoiAnnotation]>,
    metrics: &[Metric],
    pool: &rayon::ThreadPool,
) -> Result<(Vec<RetrievalRun>, MetricReport)> {
    let mut runs = Vec::with_capacity(query_ids.len());
    for qid in query_ids {
        runs.push(rank_query(model, dataset, qid, metrics, pool)?);
    }
    let report = metrics_for_runs(&runs, dataset, |r| {
        annotations
            .map(|anns| {
                localization_scores(model, dataset, &queries_of(r), anns, metrics, pool)
                    .map(|l| l.mean_miou)
            })
            .transpose()
    })?;
    Ok((runs, report))
}

fn queries_of(runs: &[RetrievalRun]) -> Vec<String> {
    runs.iter().map(|r| r.query_id.clone()).collect()
}

/// Retrieval metrics for precomputed runs; `miou_fn` may add a
/// localization metric.
pub fn metrics_for_runs(
    runs: &[RetrievalRun],
    dataset: &Dataset,
    miou_fn: impl FnOnce(&[RetrievalRun]) -> Result<Option<f64>>,
) -> Result<MetricReport> {
    let relevance = dataset.relevance();
    let mut report = MetricReport::new();
    report.insert("map", vec![map_at_k(runs, &relevance, None).map_err(AppError::Core)?])?;
    for k in [5usize, 10, 20] {
        report.insert(
            &format!("map@{k}"),
            vec![map_at_k(runs, &relevance, Some(k)).map_err(AppError::Core)?],
        )?;
    }
    if let Some(v) = miou_fn(runs)? {
        report.insert("miou", vec![v])?;
    }
    Ok(report)
}

/// Options shared by cross-validated evaluation.
pub struct KfoldOptions {
    pub folds: usize,
    pub seed: u64,
    pub metrics: Vec<Metric>,
    pub har_enabled: bool,
    pub train: TrainConfig,
}

/// K-fold harness: partitions queries by seed, trains on k-1 folds, and
/// evaluates retrieval (and localization when annotations are given) on
/// the held-out fold. Reports mean and std across folds.
pub fn kfold_harness(
    dataset: &Dataset,
    annotations: Option<&[RoiAnnotation]>,
    opts: &KfoldOptions,
    pool: &rayon::ThreadPool,
) -> Result<MetricReport> {
    let qids: Vec<String> = dataset.manifest.queries.iter().map(|q| q.id.clone()).collect();
    let folds = kfold_split(qids.len(), opts.folds, opts.seed).map_err(AppError::Core)?;
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (fi, fold) in folds.iter().enumerate() {
        let held_out: Vec<String> = fold.iter().map(|&i| qids[i].clone()).collect();
        let train_q: Vec<String> = qids
            .iter()
            .filter(|q| !held_out.contains(q))
            .cloned()
            .collect();
        let pairs = training_pairs(dataset, &train_q, &opts.metrics, opts.seed, pool)?;
        let grid = dataset.manifest.grid_spec()?;
        let mut model = Model::new(default_model_config(
            opts.metrics.len(),
            grid,
            opts.har_enabled,
            opts.seed.wrapping_add(fi as u64),
        ))
        .map_err(AppError::Core)?;
        train_model(&mut model, &pairs, &opts.train, pool)?;
        let (_, report) =
            evaluate_queries(&model, dataset, &held_out, annotations, &opts.metrics, pool)?;
        for (name, agg) in &report.aggregate {
            per_metric.entry(name.clone()).or_default().push(agg.mean);
        }
    }
    let mut report = MetricReport::new();
    for (name, values) in per_metric {
        report.insert(&name, values)?;
    }
    Ok(report)
}

/// Finite-difference check of the mask gradients over seeded random
/// configurations; returns the maximum relative error observed.
pub fn gradcheck(seed: u64, cases: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..cases {
        let spatial = [
            rng.random_range(2..=5usize),
            rng.random_range(2..=5usize),
            rng.random_range(2..=5usize),
            rng.random_range(2..=5usize),
        ];
        let params = HarParams {
            center: [
                rng.random_range(0.0..spatial[0] as f64),
                rng.random_range(0.0..spatial[1] as f64),
                rng.random_range(0.0..spatial[2] as f64),
                rng.random_range(0.0..spatial[3] as f64),
            ],
            mu: rng.random_range(0.0..20.0),
            sigma: rng.random_range(0.1..5.0),
        };
        let feature = Tensor::from_fn(&spatial, |_| rng.random_range(-1.0..1.0));
        let upstream = Tensor::from_fn(&spatial, |_| rng.random_range(-1.0..1.0));
        let analytic = har_gradients(&upstream, &feature, &params).map_err(AppError::Core)?;

        // Scalar objective L(params) = sum(upstream .* har_apply(F, mask)).
        let loss = |p: &HarParams| -> Result<f64> {
            let mask = har_mask(&spatial, p).map_err(AppError::Core)?;
            let out = har_apply(&feature, &mask).map_err(AppError::Core)?;
            Ok(out
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(o, u)| o * u)
                .sum())
        };
        let h = 1e-4;
        let mut check = |got: f64, plus: HarParams, minus: HarParams| -> Result<()> {
            let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
            let scale = fd.abs().max(got.abs()).max(1e-8);
            max_rel = max_rel.max((got - fd).abs() / scale);
            Ok(())
        };
        let mut p = params;
        p.mu += h;
        let mut m = params;
        m.mu -= h;
        check(analytic.d_mu, p, m)?;
        let mut p = params;
        p.sigma += h;
        let mut m = params;
        m.sigma -= h;
        check(analytic.d_sigma, p, m)?;
        for dim in 0..4 {
            let mut p = params;
            p.center[dim] += h;
            let mut m = params;
            m.center[dim] -= h;
            check(analytic.d_center[dim], p, m)?;
        }
    }
    Ok(max_rel)
}

/// Uniform-map IoU baseline for localization: a map that marks every cell
/// intersects the RoI in exactly the RoI's area fraction.
pub fn uniform_iou_baseline(grid: GridSpec, roi_cells: usize) -> f64 {
    roi_cells as f64 / grid.cells() as f64
}

/// Convenience wrapper for the evaluation of run files against a loaded
/// dataset without a model (retrieval metrics only).
pub fn evaluate_runs_only(runs: &[RetrievalRun], dataset: &Dataset) -> Result<MetricReport> {
    metrics_for_runs(runs, dataset, |_| Ok(None))
}

/// Mean IoU curve of stored evidence maps against annotations; used by
/// the `eval` subcommand when map CSVs are supplied.
pub fn miou_of_maps(
    maps: &[(String, Tensor)],
    annotations: &[RoiAnnotation],
) -> Result<evalkit::Aggregate> {
    let by_id: BTreeMap<&str, &RoiAnnotation> = annotations
        .iter()
        .map(|a| (a.image_id.as_str(), a))
        .collect();
    let mut values = Vec::new();
    for (id, map) in maps {
        let ann = by_id
            .get(id.as_str())
            .ok_or_else(|| AppError::Validation(format!("no annotation for image {id}")))?;
        values.push(miou(map, ann).map_err(AppError::Core)?.miou);
    }
    evalkit::mean_std(&values).map_err(AppError::Core)
}
