//! Command-line surface. Progress goes to stderr, machine-readable
//! summaries to stdout, results to files under `--out`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use indret_core::matchtensor::{estimate_inv_variances, Metric};
use indret_core::network::{Model, TrainConfig};
use indret_core::patching::GridSpec;
use indret_core::prf::{PoolMode, PrfConfig};
use indret_core::synth::SyntheticConfig;

use crate::config::{self, FileConfig};
use crate::error::{AppError, Result};
use crate::formats::{checkpoint, report, runfile, tensorfile};
use crate::parallel::make_pool;
use crate::pipeline::{self, Dataset};

#[derive(Parser)]
#[command(name = "indret", version, about = "Indicative image retrieval pipeline")]
pub struct Cli {
    /// TOML configuration file; explicit flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (1 = deterministic reference mode, 0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone)]
pub struct GridArgs {
    /// Patch grid as ROWSxCOLS, e.g. 7x7.
    #[arg(long)]
    pub grid: Option<String>,
    /// Working resolution (square) in pixels.
    #[arg(long)]
    pub side: Option<usize>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic planted-motif dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        relevant: Option<usize>,
        #[arg(long)]
        distractors: Option<usize>,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        jitter: Option<usize>,
        /// Give every image a shared background texture.
        #[arg(long)]
        correlated_background: bool,
        /// Motif block side in grid cells.
        #[arg(long)]
        motif_cells: Option<usize>,
    },
    /// Build and dump the matching tensor for one (target, query) pair.
    Tensor {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        target: String,
        /// Query image id.
        #[arg(long)]
        query: String,
        /// Comma-separated metric names
        /// (cosine,euclidean,manhattan,mahalanobis).
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the verification model on a dataset.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        target_val_loss: Option<f64>,
        /// Disable the hypersphere attention masks.
        #[arg(long)]
        no_har: bool,
        /// Comma-separated query ids to train on (default: all).
        #[arg(long)]
        queries: Option<String>,
    },
    /// Rank the corpus for each query and write a run file.
    Rank {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long)]
        queries: Option<String>,
    },
    /// Decode evidence maps and heatmaps for one pair.
    Explain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: String,
        /// Query image id.
        #[arg(long)]
        query: String,
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Average raw layer maps instead of max-normalizing them first.
        #[arg(long)]
        raw_cam: bool,
        /// Heatmap side in pixels (default: dataset resolution).
        #[arg(long)]
        heatmap_side: Option<usize>,
    },
    /// Re-rank a run with pseudo-relevance feedback.
    Prf {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long)]
        prf_depth: Option<usize>,
        /// avg | max
        #[arg(long)]
        prf_mode: Option<String>,
    },
    /// Score a run file (or run the k-fold harness) into a metric report.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Existing run file to score.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Run the full k-fold train/evaluate harness instead.
        #[arg(long)]
        kfold: Option<usize>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        no_har: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference self-check of the mask gradients.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
}

pub fn parse_grid(s: &str) -> Result<GridSpec> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| AppError::Config(format!("grid must look like 7x7, got {s}")))?;
    let rows = r
        .parse()
        .map_err(|_| AppError::Config(format!("bad grid rows in {s}")))?;
    let cols = c
        .parse()
        .map_err(|_| AppError::Config(format!("bad grid cols in {s}")))?;
    GridSpec::new(rows, cols).map_err(AppError::Core)
}

pub fn parse_metrics(names: &str, dataset: Option<&Dataset>) -> Result<Vec<Metric>> {
    let mut out = Vec::new();
    for name in names.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m = match name {
            "cosine" => Metric::Cosine,
            "euclidean" => Metric::EuclideanSim,
            "manhattan" => Metric::ManhattanSim,
            "mahalanobis" => {
                let ds = dataset.ok_or_else(|| {
                    AppError::Config("mahalanobis needs a dataset for its variances".into())
                })?;
                let patches: Vec<&[f64]> = ds
                    .grids
                    .values()
                    .flat_map(|g| g.patches().iter().map(|p| p.as_slice()))
                    .collect();
                Metric::MahalanobisSim {
                    inv_var: estimate_inv_variances(&patches, 1e-6)
                        .map_err(AppError::Core)?,
                }
            }
            other => {
                return Err(AppError::Config(format!("unknown metric {other}")))
            }
        };
        if out.iter().any(|m2: &Metric| m2.kind() == m.kind()) {
            return Err(AppError::Config(format!("duplicate metric {name}")));
        }
        out.push(m);
    }
    if out.is_empty() {
        return Err(AppError::Config("empty metric list".into()));
    }
    Ok(out)
}

fn metric_set(
    flag: &Option<String>,
    file: &FileConfig,
    dataset: Option<&Dataset>,
) -> Result<Vec<Metric>> {
    match (flag, &file.metrics) {
        (Some(s), _) => parse_metrics(s, dataset),
        (None, Some(list)) => parse_metrics(&list.join(","), dataset),
        (None, None) => Ok(Metric::default_set()),
    }
}

fn parse_prf_mode(s: &str) -> Result<PoolMode> {
    match s {
        "avg" => Ok(PoolMode::Average),
        "max" => Ok(PoolMode::Max),
        other => Err(AppError::Config(format!("prf mode must be avg or max, got {other}"))),
    }
}

fn parse_query_list(flag: &Option<String>, dataset: &Dataset) -> Result<Vec<String>> {
    match flag {
        None => Ok(dataset.manifest.queries.iter().map(|q| q.id.clone()).collect()),
        Some(list) => {
            let ids: Vec<String> = list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            for id in &ids {
                dataset.query(id)?;
            }
            if ids.is_empty() {
                return Err(AppError::Config("empty query list".into()));
            }
            Ok(ids)
        }
    }
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

/// Dispatches a parsed invocation. Returns the pipeline error for the
/// caller to map onto an exit status.
pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => config::load(p)?,
        None => FileConfig::default(),
    };
    let seed = config::pick(cli.seed, file.seed, 0);
    let threads = config::pick(cli.threads, file.threads, 1);
    let pool = make_pool(threads)?;

    match cli.command {
        Command::Synth {
            out,
            classes,
            relevant,
            distractors,
            grid,
            noise,
            jitter,
            correlated_background,
            motif_cells,
        } => {
            let defaults = SyntheticConfig::default();
            let grid_spec = match (&grid.grid, file.grid_rows.zip(file.grid_cols)) {
                (Some(s), _) => parse_grid(s)?,
                (None, Some((r, c))) => GridSpec::new(r, c).map_err(AppError::Core)?,
                (None, None) => defaults.grid,
            };
            let cfg = SyntheticConfig {
                classes: classes.unwrap_or(defaults.classes),
                relevant_per_class: relevant.unwrap_or(defaults.relevant_per_class),
                distractors: distractors.unwrap_or(defaults.distractors),
                grid: grid_spec,
                image_side: config::pick(grid.side, file.resolution, defaults.image_side),
                motif_cells: motif_cells.unwrap_or(defaults.motif_cells),
                noise_level: noise.unwrap_or(defaults.noise_level),
                jitter_cells: jitter.unwrap_or(defaults.jitter_cells),
                correlated_background,
                motif_anchor: None,
                seed,
            };
            std::fs::create_dir_all(&out)?;
            log(&format!(
                "generating {} classes into {}",
                cfg.classes,
                out.display()
            ));
            let (manifest_path, ann_path) = pipeline::write_synthetic(&cfg, &out)?;
            emit(serde_json::json!({
                "command": "synth",
                "manifest": manifest_path,
                "annotations": ann_path,
            }));
            Ok(())
        }
        Command::Tensor {
            manifest,
            target,
            query,
            metrics,
            out,
        } => {
            let dataset = Dataset::load(&manifest)?;
            let set = metric_set(&metrics, &file, Some(&dataset))?;
            let tensor = dataset.build_tensor(&target, &query, &set)?;
            tensorfile::save(&out, &tensor)?;
            emit(serde_json::json!({
                "command": "tensor",
                "out": out,
                "views": tensor.views.len(),
                "spatial": tensor.spatial_shape(),
            }));
            Ok(())
        }
        Command::Train {
            manifest,
            out,
            metrics,
            epochs,
            batch_size,
            learning_rate,
            target_val_loss,
            no_har,
            queries,
        } => {
            let dataset = Dataset::load(&manifest)?;
            let set = metric_set(&metrics, &file, Some(&dataset))?;
            let qids = parse_query_list(&queries, &dataset)?;
            let pairs = pipeline::training_pairs(&dataset, &qids, &set, seed, &pool)?;
            log(&format!("{} training pairs", pairs.len()));
            let defaults = TrainConfig::default();
            let cfg = TrainConfig {
                epochs: config::pick(epochs, file.epochs, defaults.epochs),
                batch_size: config::pick(batch_size, file.batch_size, defaults.batch_size),
                learning_rate: config::pick(
                    learning_rate,
                    file.learning_rate,
                    defaults.learning_rate,
                ),
                target_val_loss: target_val_loss.or(file.target_val_loss),
                seed,
                ..defaults
            };
            let har_enabled = !no_har && config::pick(None, file.har, true);
            let grid = dataset.manifest.grid_spec()?;
            let mut model = Model::new(pipeline::default_model_config(
                set.len(),
                grid,
                har_enabled,
                seed,
            ))
            .map_err(AppError::Core)?;
            let stats = pipeline::train_model(&mut model, &pairs, &cfg, &pool)?;
            for s in &stats {
                log(&format!(
                    "epoch {} lr {:.5} train_loss {:.4} val_loss {:.4} val_acc {:.3}",
                    s.epoch, s.learning_rate, s.train_loss, s.val_loss, s.val_accuracy
                ));
            }
            checkpoint::save(&out, &model)?;
            let last = stats.last();
            emit(serde_json::json!({
                "command": "train",
                "out": out,
                "epochs_run": stats.len(),
                "final_val_loss": last.map(|s| s.val_loss),
                "final_val_accuracy": last.map(|s| s.val_accuracy),
            }));
            Ok(())
        }
        Command::Rank {
            manifest,
            model,
            out,
            metrics,
            queries,
        } => {
            let dataset = Dataset::load(&manifest)?;
            let set = metric_set(&metrics, &file, Some(&dataset))?;
            let model = checkpoint::load(&model)?;
            let qids = parse_query_list(&queries, &dataset)?;
            let mut runs = Vec::with_capacity(qids.len());
            for qid in &qids {
                log(&format!("ranking {qid}"));
                runs.push(pipeline::rank_query(&model, &dataset, qid, &set, &pool)?);
            }
            runfile::save(&out, &runs)?;
            emit(serde_json::json!({
                "command": "rank",
                "out": out,
                "queries": qids.len(),
            }));
            Ok(())
        }
        Command::Explain {
            manifest,
            model,
            target,
            query,
            metrics,
            out,
            raw_cam,
            heatmap_side,
        } => {
            let dataset = Dataset::load(&manifest)?;
            let set = metric_set(&metrics, &file, Some(&dataset))?;
            let model = checkpoint::load(&model)?;
            let tensor = dataset.build_tensor(&target, &query, &set)?;
            let norm = if raw_cam {
                indret_core::explain::CamNorm::Raw
            } else {
                indret_core::explain::CamNorm::PerLayerMax
            };
            let side = heatmap_side.unwrap_or(dataset.manifest.resolution);
            let prefix = format!("{target}_vs_{query}");
            let art = pipeline::explain_to_files(&model, &tensor, &out, &prefix, norm, side)?;
            emit(serde_json::json!({
                "command": "explain",
                "out": out,
                "prefix": prefix,
                "score": art.score,
            }));
            Ok(())
        }
        Command::Prf {
            manifest,
            model,
            run,
            out,
            metrics,
            prf_depth,
            prf_mode,
        } => {
            let dataset = Dataset::load(&manifest)?;
            let set = metric_set(&metrics, &file, Some(&dataset))?;
            let model = checkpoint::load(&model)?;
            let runs = runfile::load(&run)?;
            let defaults = PrfConfig::default();
            let mode = match (&prf_mode, &file.prf_mode) {
                (Some(s), _) => parse_prf_mode(s)?,
                (None, Some(s)) => parse_prf_mode(s)?,
                (None, None) => defaults.mode,
            };
            let cfg = PrfConfig {
                depth: config::pick(prf_depth, file.prf_depth, defaults.depth),
                mode,
            };
            let mut reranked = Vec::with_capacity(runs.len());
            for r in &runs {
                log(&format!("feedback round for {}", r.query_id));
                reranked.push(pipeline::prf_rerank(&model, &dataset, r, &cfg, &set, &pool)?);
            }
            runfile::save(&out, &reranked)?;
            emit(serde_json::json!({
                "command": "prf",
                "out": out,
                "depth": cfg.depth,
                "queries": reranked.len(),
            }));
            Ok(())
        }
        Command::Eval {
            manifest,
            run,
            kfold,
            annotations,
            metrics,
            epochs,
            no_har,
            out,
        } => {
            let dataset = Dataset::load(&manifest)?;
            let anns = annotations
                .as_deref()
                .map(crate::formats::manifest::load_annotations)
                .transpose()?;
            let report_value = match (run, kfold) {
                (Some(run_path), None) => {
                    let runs = runfile::load(&run_path)?;
                    pipeline::evaluate_runs_only(&runs, &dataset)?
                }
                (None, Some(k)) => {
                    let set = metric_set(&metrics, &file, Some(&dataset))?;
                    let defaults = TrainConfig::default();
                    let opts = pipeline::KfoldOptions {
                        folds: k,
                        seed,
                        metrics: set,
                        har_enabled: !no_har && config::pick(None, file.har, true),
                        train: TrainConfig {
                            epochs: config::pick(epochs, file.epochs, defaults.epochs),
                            seed,
                            target_val_loss: file.target_val_loss,
                            ..defaults
                        },
                    };
                    pipeline::kfold_harness(&dataset, anns.as_deref(), &opts, &pool)?
                }
                _ => {
                    return Err(AppError::Config(
                        "eval needs exactly one of --run or --kfold".into(),
                    ))
                }
            };
            if let Some(path) = &out {
                report::save(path, &report_value)?;
            }
            log(&report_value.to_table());
            emit(serde_json::to_value(&report_value).map_err(|e| {
                AppError::Persistence(e.to_string())
            })?);
            Ok(())
        }
        Command::Gradcheck { cases } => {
            let max_rel = pipeline::gradcheck(seed, cases)?;
            emit(serde_json::json!({
                "command": "gradcheck",
                "cases": cases,
                "max_relative_error": max_rel,
            }));
            if max_rel >= 1e-4 {
                return Err(AppError::Validation(format!(
                    "gradient check failed: max relative error {max_rel:.3e}"
                )));
            }
            Ok(())
        }
    }
}

/// Entry point used by `main`: parse, dispatch, map errors to exit codes
/// (2 = usage, 1 = runtime failure with a category tag).
pub fn main_entry<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout with success status.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            1
        }
    }
}

#[allow(unused)]
fn _unused_path_helper(_: &Path) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("7x7").unwrap();
        assert_eq!((g.rows, g.cols), (7, 7));
        assert!(parse_grid("7").is_err());
        assert!(parse_grid("1x7").is_err());
    }

    #[test]
    fn metric_parsing() {
        let set = parse_metrics("cosine,euclidean", None).unwrap();
        assert_eq!(set.len(), 2);
        assert!(parse_metrics("cosine,cosine", None).is_err());
        assert!(parse_metrics("sprocket", None).is_err());
        assert!(parse_metrics("", None).is_err());
        assert!(parse_metrics("mahalanobis", None).is_err()); // needs dataset
    }

    #[test]
    fn prf_mode_parsing() {
        assert_eq!(parse_prf_mode("avg").unwrap(), PoolMode::Average);
        assert_eq!(parse_prf_mode("max").unwrap(), PoolMode::Max);
        assert!(parse_prf_mode("median").is_err());
    }
}
