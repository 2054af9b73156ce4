//! Deterministic planted-motif corpus generator. Each query class gets a
//! distinctive high-contrast texture planted at a known cell block over a
//! noise background; relevant targets share the motif, distractors only
//! the background statistics. Region annotations are the planted boxes.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::evalkit::{RoiAnnotation, RoiBox};
use crate::patching::{GridSpec, Image};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    /// Number of query classes; one query image per class.
    pub classes: usize,
    /// Relevant targets generated per class.
    pub relevant_per_class: usize,
    /// Motif-free noise images added to the corpus.
    pub distractors: usize,
    pub grid: GridSpec,
    /// Square image side in pixels; must be divisible by the grid.
    pub image_side: usize,
    /// Motif block side, in grid cells.
    pub motif_cells: usize,
    /// Half-width of the uniform pixel noise around mid-gray, in [0,1].
    pub noise_level: f64,
    /// Maximum motif translation in cells applied to relevant targets.
    pub jitter_cells: usize,
    /// When set, every image shares one fixed low-contrast background
    /// texture under its noise, so distractors correlate with queries in
    /// non-motif regions.
    pub correlated_background: bool,
    /// Fixed motif cell position (row, col) shared by all classes; `None`
    /// draws a seeded position per class. Jitter still applies.
    pub motif_anchor: Option<(usize, usize)>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 20,
            relevant_per_class: 8,
            distractors: 20,
            grid: GridSpec { rows: 7, cols: 7 },
            image_side: 112,
            motif_cells: 2,
            noise_level: 0.1,
            jitter_cells: 0,
            correlated_background: false,
            motif_anchor: None,
            seed: 0,
        }
    }
}

/// One generated image plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: String,
    pub image: Image,
    /// Query class the planted motif belongs to; None for distractors.
    pub class: Option<usize>,
    /// Planted motif box in normalized coordinates, if any.
    pub roi: Option<RoiBox>,
}

/// A query and the ids of its relevant targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticQuery {
    pub query_id: String,
    pub image_id: String,
    pub relevant: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub images: Vec<SyntheticImage>,
    pub queries: Vec<SyntheticQuery>,
}

impl SyntheticDataset {
    pub fn image(&self, id: &str) -> Result<&SyntheticImage> {
        self.images
            .iter()
            .find(|img| img.id == id)
            .ok_or_else(|| CoreError::Lookup(format!("unknown image id {id}")))
    }

    /// Annotations for every image carrying a motif.
    pub fn annotations(&self) -> Vec<RoiAnnotation> {
        self.images
            .iter()
            .filter_map(|img| {
                img.roi.map(|b| RoiAnnotation {
                    image_id: img.id.clone(),
                    regions: vec![b],
                })
            })
            .collect()
    }
}

/// Class texture value at motif-local pixel (lx, ly): a deterministic
/// binary block texture, values 0 or 1. The block size varies with the
/// class and the per-block bit comes from an integer hash of
/// (class, block), so no two classes share a texture (in particular, no
/// class is another's polarity flip).
fn motif_value(class: usize, lx: usize, ly: usize) -> f64 {
    let period = 2 + class % 5;
    let mut h = (class as u64)
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((lx / period) as u64)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
        .wrapping_add((ly / period) as u64)
        .wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    ((h >> 17) & 1) as f64
}

/// Shared low-contrast background texture in [0.35, 0.65].
fn background_value(x: usize, y: usize, side: usize) -> f64 {
    let px = 2.max(side / 32);
    0.5 + 0.15 * (((x / px + 2 * (y / px)) % 3) as f64 - 1.0)
}

fn validate(cfg: &SyntheticConfig) -> Result<()> {
    if cfg.classes == 0 || cfg.relevant_per_class == 0 {
        return Err(CoreError::Config(
            "need at least one class and one relevant target".to_string(),
        ));
    }
    if cfg.motif_cells == 0
        || cfg.motif_cells > cfg.grid.rows
        || cfg.motif_cells > cfg.grid.cols
    {
        return Err(CoreError::Config(
            "motif must fit inside the grid".to_string(),
        ));
    }
    if cfg.image_side % cfg.grid.rows != 0 || cfg.image_side % cfg.grid.cols != 0 {
        return Err(CoreError::Config(
            "image side must be divisible by the grid".to_string(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.noise_level) {
        return Err(CoreError::Config("noise level must be in [0,1]".to_string()));
    }
    if let Some((r, c)) = cfg.motif_anchor {
        if r + cfg.motif_cells > cfg.grid.rows || c + cfg.motif_cells > cfg.grid.cols {
            return Err(CoreError::Config(
                "motif anchor pushes the motif off the grid".to_string(),
            ));
        }
    }
    let max_jitter = cfg
        .grid
        .rows
        .min(cfg.grid.cols)
        .saturating_sub(cfg.motif_cells);
    if cfg.jitter_cells > max_jitter {
        return Err(CoreError::Config(
            "jitter would push the motif off the grid".to_string(),
        ));
    }
    Ok(())
}

fn render(
    cfg: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
    motif: Option<(usize, usize, usize)>, // (class, cell row, cell col)
) -> (Image, Option<RoiBox>) {
    let side = cfg.image_side;
    let ch = side / cfg.grid.rows;
    let cw = side / cfg.grid.cols;
    let mut px = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let base = if cfg.correlated_background {
                background_value(x, y, side)
            } else {
                0.5
            };
            let noise = if cfg.noise_level > 0.0 {
                rng.random_range(-cfg.noise_level..=cfg.noise_level)
            } else {
                0.0
            };
            px[y * side + x] = (base + noise).clamp(0.0, 1.0);
        }
    }
    let roi = motif.map(|(class, r0, c0)| {
        let (y0, x0) = (r0 * ch, c0 * cw);
        let extent = cfg.motif_cells;
        for ly in 0..extent * ch {
            for lx in 0..extent * cw {
                px[(y0 + ly) * side + (x0 + lx)] = motif_value(class, lx, ly);
            }
        }
        RoiBox::new(
            x0 as f64 / side as f64,
            y0 as f64 / side as f64,
            (x0 + extent * cw) as f64 / side as f64,
            (y0 + extent * ch) as f64 / side as f64,
        )
        .expect("motif box is grid-aligned and in bounds")
    });
    (
        Image::new(side, side, 1, px).expect("generated pixels are clamped"),
        roi,
    )
}

/// Generates the full corpus. Pure function of the config (including its
/// seed): repeated calls yield identical pixels.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_r = cfg.grid.rows - cfg.motif_cells;
    let max_c = cfg.grid.cols - cfg.motif_cells;
    let mut images = Vec::new();
    let mut queries = Vec::new();
    for class in 0..cfg.classes {
        let (r0, c0) = match cfg.motif_anchor {
            Some(anchor) => anchor,
            None => (rng.random_range(0..=max_r), rng.random_range(0..=max_c)),
        };
        let qid = format!("q{class:02}");
        let query_image_id = format!("{qid}_query");
        let (img, roi) = render(cfg, &mut rng, Some((class, r0, c0)));
        images.push(SyntheticImage {
            id: query_image_id.clone(),
            image: img,
            class: Some(class),
            roi,
        });
        let mut relevant = Vec::new();
        for t in 0..cfg.relevant_per_class {
            let jr = jittered(&mut rng, r0, cfg.jitter_cells, max_r);
            let jc = jittered(&mut rng, c0, cfg.jitter_cells, max_c);
            let id = format!("{qid}_rel{t:02}");
            let (img, roi) = render(cfg, &mut rng, Some((class, jr, jc)));
            images.push(SyntheticImage {
                id: id.clone(),
                image: img,
                class: Some(class),
                roi,
            });
            relevant.push(id);
        }
        queries.push(SyntheticQuery {
            query_id: qid,
            image_id: query_image_id,
            relevant,
        });
    }
    for d in 0..cfg.distractors {
        let (img, _) = render(cfg, &mut rng, None);
        images.push(SyntheticImage {
            id: format!("d{d:02}"),
            image: img,
            class: None,
            roi: None,
        });
    }
    Ok(SyntheticDataset {
        config: *cfg,
        images,
        queries,
    })
}

fn jittered(rng: &mut ChaCha8Rng, base: usize, jitter: usize, max: usize) -> usize {
    if jitter == 0 {
        return base;
    }
    let lo = base.saturating_sub(jitter);
    let hi = (base + jitter).min(max);
    rng.random_range(lo..=hi)
}
