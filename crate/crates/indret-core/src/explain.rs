//! Evidence decoding: per-layer Grad-CAM on the 4D activations, average
//! aggregation, and contraction into per-patch contribution maps for the
//! target (P) and query (Q) images.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::matchtensor::MatchTensor;
use crate::network::{Model, Phase, RELEVANT_CLASS};
use crate::patching::Image;
use crate::tensor::{contract_double, rescale_nd, Tensor};

/// One layer's saliency map, rescaled to the matching tensor's spatial
/// shape. Entries are non-negative (post-ReLU).
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    pub layer: usize,
    pub values: Tensor,
}

/// Arithmetic mean of the contributing per-layer maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedCam {
    pub values: Tensor,
    pub layer_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapRole {
    Target,
    Query,
}

/// Per-patch evidence scores for one side of the pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionMap {
    pub role: MapRole,
    pub values: Tensor,
}

/// Whether per-layer maps are max-normalized to [0,1] before averaging.
/// Normalized is the default; Raw averages the maps as-is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CamNorm {
    #[default]
    PerLayerMax,
    Raw,
}

/// Grad-CAM for one block: channel weights are the spatial mean of the
/// class-logit gradient on the block's retained activation; the weighted
/// channel sum is rectified and rescaled to the input's spatial shape.
pub fn gradcam_layer(
    model: &Model,
    input: &Tensor,
    layer: usize,
    target_class: usize,
) -> Result<CamMap> {
    let maps = gradcam_all_layers(model, input, target_class)?;
    maps.into_iter()
        .find(|m| m.layer == layer)
        .ok_or_else(|| CoreError::Lookup("unknown layer id".to_string()))
}

/// One forward and one backward pass yield the CAM of every block.
pub fn gradcam_all_layers(
    model: &Model,
    input: &Tensor,
    target_class: usize,
) -> Result<Vec<CamMap>> {
    if target_class > 1 {
        return Err(CoreError::Lookup("class id out of range".to_string()));
    }
    let fwd = model.build_forward(input, Phase::Eval)?;
    let mut tape = fwd.tape;
    let score = tape.pick(fwd.logits_id, target_class)?;
    let grads = tape.backward(score)?;
    let spatial = model.config.input_spatial;
    let mut out = Vec::with_capacity(fwd.block_acts.len());
    for (layer, &act_id) in fwd.block_acts.iter().enumerate() {
        let act = tape.value(act_id);
        let grad = grads.get(&tape, act_id);
        let channels = act.shape()[0];
        let n = act.len() / channels;
        let mut map = Tensor::zeros(&act.shape()[1..]);
        {
            let md = map.data_mut();
            for c in 0..channels {
                let weight =
                    grad.data()[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64;
                if weight == 0.0 {
                    continue;
                }
                let a = &act.data()[c * n..(c + 1) * n];
                for i in 0..n {
                    md[i] += weight * a[i];
                }
            }
        }
        let rectified = map.relu();
        let values = rescale_nd(&rectified, &spatial)?;
        out.push(CamMap { layer, values });
    }
    Ok(out)
}

/// Eq.-style average pooling over layers, optionally max-normalizing each
/// map first so low-magnitude deep layers still contribute.
pub fn aggregate_cams(maps: &[CamMap], norm: CamNorm) -> Result<AggregatedCam> {
    let Some(first) = maps.first() else {
        return Err(CoreError::Config("no CAM maps to aggregate".to_string()));
    };
    let shape = first.values.shape().to_vec();
    let mut acc = Tensor::zeros(&shape);
    for m in maps {
        if m.values.shape() != shape {
            return Err(CoreError::Dimension("CAM shape mismatch".to_string()));
        }
        let contribution = match norm {
            CamNorm::Raw => m.values.clone(),
            CamNorm::PerLayerMax => {
                let max = m.values.max_value();
                if max > 0.0 {
                    m.values.scale(1.0 / max)
                } else {
                    m.values.clone()
                }
            }
        };
        acc = acc.add(&contribution)?;
    }
    Ok(AggregatedCam {
        values: acc.scale(1.0 / maps.len() as f64),
        layer_count: maps.len(),
    })
}

/// Contracts the aggregated CAM into its two patch maps:
/// P(i,j) sums over the query modes, Q(k,l) over the target modes.
pub fn decode(aggregated: &AggregatedCam) -> Result<(ContributionMap, ContributionMap)> {
    let m = &aggregated.values;
    if m.rank() != 4 {
        return Err(CoreError::Dimension(
            "aggregated CAM must be 4D".to_string(),
        ));
    }
    let ones_q = Tensor::ones(&[m.shape()[2], m.shape()[3]]);
    let ones_t = Tensor::ones(&[m.shape()[0], m.shape()[1]]);
    let p = contract_double(m, &ones_q, (2, 3), (0, 1))?;
    let q = contract_double(m, &ones_t, (0, 1), (0, 1))?;
    Ok((
        ContributionMap {
            role: MapRole::Target,
            values: p,
        },
        ContributionMap {
            role: MapRole::Query,
            values: q,
        },
    ))
}

/// Max-normalizes a contribution map to [0,1]; an all-zero map stays zero.
pub fn normalize_map(map: &Tensor) -> Tensor {
    let max = map.max_value();
    if max > 0.0 {
        map.scale(1.0 / max)
    } else {
        map.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Upsample {
    #[default]
    Nearest,
    Bilinear,
}

/// Renders a normalized m x n map as a grayscale image of the given side,
/// nearest-neighbor per grid cell by default so patch boundaries stay
/// legible.
pub fn heatmap_image(map: &Tensor, side: usize, mode: Upsample) -> Result<Image> {
    if map.rank() != 2 {
        return Err(CoreError::Dimension("heatmap source must be 2D".to_string()));
    }
    let (rows, cols) = (map.shape()[0], map.shape()[1]);
    let pixels = match mode {
        Upsample::Nearest => {
            let mut px = Vec::with_capacity(side * side);
            for y in 0..side {
                let r = y * rows / side;
                for x in 0..side {
                    let c = x * cols / side;
                    px.push(map.at(&[r, c]).clamp(0.0, 1.0));
                }
            }
            px
        }
        Upsample::Bilinear => {
            let small = Image::new(cols, rows, 1, map.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
            small.resize(side, side).pixels
        }
    };
    Image::new(side, side, 1, pixels)
}

/// Everything `explain_pair` produces for one (target, query) pair.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub score: crate::network::ClassScore,
    pub cams: Vec<CamMap>,
    pub aggregated: AggregatedCam,
    /// Raw contribution maps (mass-conserving).
    pub target_map: ContributionMap,
    pub query_map: ContributionMap,
    /// Max-normalized [0,1] versions of the maps.
    pub target_norm: Tensor,
    pub query_norm: Tensor,
}

/// Full evidence pipeline for one pair: forward, Grad-CAM on every block,
/// aggregate, decode, normalize.
pub fn explain_pair(model: &Model, pair: &MatchTensor, norm: CamNorm) -> Result<Explanation> {
    let input = pair.to_input_tensor();
    let (score, _) = model.forward(&input)?;
    let cams = gradcam_all_layers(model, &input, RELEVANT_CLASS)?;
    let aggregated = aggregate_cams(&cams, norm)?;
    let (target_map, query_map) = decode(&aggregated)?;
    let target_norm = normalize_map(&target_map.values);
    let query_norm = normalize_map(&query_map.values);
    Ok(Explanation {
        score,
        cams,
        aggregated,
        target_map,
        query_map,
        target_norm,
        query_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn agg(values: Tensor) -> AggregatedCam {
        AggregatedCam {
            values,
            layer_count: 1,
        }
    }

    #[test]
    fn decode_all_ones_counts_cells() {
        let m = agg(Tensor::ones(&[14, 14, 14, 14]));
        let (p, q) = decode(&m).unwrap();
        assert!(p.values.data().iter().all(|&v| v == 196.0));
        assert!(q.values.data().iter().all(|&v| v == 196.0));
    }

    #[test]
    fn decode_point_mass_localizes() {
        let mut t = Tensor::zeros(&[8, 8, 8, 8]);
        t.set(&[2, 3, 5, 7], 4.25);
        let (p, q) = decode(&agg(t)).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let expect_p = if (i, j) == (2, 3) { 4.25 } else { 0.0 };
                let expect_q = if (i, j) == (5, 7) { 4.25 } else { 0.0 };
                assert_eq!(p.values.at(&[i, j]), expect_p);
                assert_eq!(q.values.at(&[i, j]), expect_q);
            }
        }
    }

    #[test]
    fn decode_matches_quadruple_loop_and_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let t = Tensor::from_fn(&[4, 4, 4, 4], |_| rng.random_range(0.0..1.0));
        let (p, q) = decode(&agg(t.clone())).unwrap();
        let mut total = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let mut sp = 0.0;
                let mut sq = 0.0;
                for k in 0..4 {
                    for l in 0..4 {
                        sp += t.at(&[i, j, k, l]);
                        sq += t.at(&[k, l, i, j]);
                    }
                }
                assert!((p.values.at(&[i, j]) - sp).abs() < 1e-12);
                assert!((q.values.at(&[i, j]) - sq).abs() < 1e-12);
                total += sp;
            }
        }
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
        assert!(rel(p.values.sum(), total) < 1e-9);
        assert!(rel(q.values.sum(), total) < 1e-9);
        assert!(rel(t.sum(), total) < 1e-9);
    }

    #[test]
    fn aggregate_single_map_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let values = Tensor::from_fn(&[3, 3, 3, 3], |_| rng.random_range(0.0..1.0));
        let maps = vec![CamMap {
            layer: 0,
            values: values.clone(),
        }];
        let out = aggregate_cams(&maps, CamNorm::Raw).unwrap();
        assert_eq!(out.values, values);
    }

    #[test]
    fn aggregate_is_linear_in_raw_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a = Tensor::from_fn(&[2, 2, 2, 2], |_| rng.random_range(0.0..1.0));
        let maps = vec![
            CamMap { layer: 0, values: a.clone() },
            CamMap { layer: 1, values: a.scale(2.0) },
        ];
        let out = aggregate_cams(&maps, CamNorm::Raw).unwrap();
        for i in 0..a.len() {
            assert!((out.values.data()[i] - 1.5 * a.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_matches_loop_mean_and_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut maps: Vec<CamMap> = (0..5)
            .map(|layer| CamMap {
                layer,
                values: Tensor::from_fn(&[3, 3, 3, 3], |_| rng.random_range(0.0..1.0)),
            })
            .collect();
        let out = aggregate_cams(&maps, CamNorm::Raw).unwrap();
        for e in 0..81 {
            let mean: f64 = maps.iter().map(|m| m.values.data()[e]).sum::<f64>() / 5.0;
            assert!((out.values.data()[e] - mean).abs() < 1e-12);
        }
        maps.reverse();
        maps.swap(1, 3);
        let out2 = aggregate_cams(&maps, CamNorm::Raw).unwrap();
        for e in 0..81 {
            assert!((out.values.data()[e] - out2.values.data()[e]).abs() < 1e-12);
        }
        assert!(aggregate_cams(&[], CamNorm::Raw).is_err());
    }

    #[test]
    fn heatmap_of_zero_map_is_black_and_max_hits_one() {
        let zero = Tensor::zeros(&[4, 4]);
        let img = heatmap_image(&normalize_map(&zero), 16, Upsample::Nearest).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 0.0));

        let mut m = Tensor::zeros(&[4, 4]);
        m.set(&[1, 2], 0.3);
        m.set(&[3, 3], 0.6);
        let norm = normalize_map(&m);
        let img = heatmap_image(&norm, 16, Upsample::Nearest).unwrap();
        assert_eq!(img.pixels.iter().cloned().fold(0.0, f64::max), 1.0);
    }

    mod with_model {
        use super::*;
        use crate::matchtensor::{build_multiview, Metric};
        use crate::network::{
            train, BlockConfig, Model, ModelConfig, TrainConfig, TrainPair,
        };
        use crate::patching::{decompose, GridSpec, Image};

        fn mini_model(seed: u64) -> Model {
            Model::new(ModelConfig {
                input_channels: 3,
                input_spatial: [4, 4, 4, 4],
                blocks: vec![
                    BlockConfig { channels: 4, stride: 1 },
                    BlockConfig { channels: 8, stride: 1 },
                ],
                kernel: 3,
                har_enabled: true,
                seed,
            })
            .unwrap()
        }

        /// 4x4-grid pair images over noise, optionally sharing a bright
        /// checkerboard motif at grid cell (3,3).
        fn motif_pair(rng: &mut ChaCha8Rng, with_motif: bool) -> crate::matchtensor::MatchTensor {
            let side = 16; // 4x4 cells of 4x4 pixels
            let mut make = |motif: bool| {
                let mut px = vec![0.0; side * side];
                for p in px.iter_mut() {
                    *p = rng.random_range(0.0..0.15);
                }
                if motif {
                    for y in 12..16 {
                        for x in 12..16 {
                            px[y * side + x] = if (x + y) % 2 == 0 { 1.0 } else { 0.0 };
                        }
                    }
                }
                Image::new(side, side, 1, px).unwrap()
            };
            let a = make(true && with_motif);
            let b = make(with_motif);
            let ga = decompose(&a, GridSpec::new(4, 4).unwrap(), 16).unwrap();
            let gb = decompose(&b, GridSpec::new(4, 4).unwrap(), 16).unwrap();
            build_multiview(&ga, &gb, &Metric::default_set(), "t", "q").unwrap()
        }

        #[test]
        fn gradcam_unknown_layer_is_lookup_error() {
            let model = mini_model(1);
            let input = Tensor::zeros(&[3, 4, 4, 4, 4]);
            assert!(matches!(
                gradcam_layer(&model, &input, 9, 1),
                Err(CoreError::Lookup(_))
            ));
        }

        #[test]
        fn gradcam_maps_are_nonnegative_and_input_shaped() {
            let model = mini_model(2);
            let mut rng = ChaCha8Rng::seed_from_u64(40);
            let pair = motif_pair(&mut rng, true);
            let maps = gradcam_all_layers(&model, &pair.to_input_tensor(), 1).unwrap();
            assert_eq!(maps.len(), 2);
            for m in &maps {
                assert_eq!(m.values.shape(), &[4, 4, 4, 4]);
                assert!(m.values.data().iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn trained_model_localizes_planted_motif() {
            let mut rng = ChaCha8Rng::seed_from_u64(50);
            let mut pairs = Vec::new();
            for _ in 0..10 {
                pairs.push(TrainPair {
                    input: motif_pair(&mut rng, true).to_input_tensor(),
                    relevant: true,
                });
                pairs.push(TrainPair {
                    input: motif_pair(&mut rng, false).to_input_tensor(),
                    relevant: false,
                });
            }
            let mut model = mini_model(3);
            let cfg = TrainConfig {
                epochs: 40,
                batch_size: 5,
                learning_rate: 0.02,
                target_val_loss: Some(0.02),
                seed: 4,
                ..TrainConfig::default()
            };
            train(&mut model, &pairs, &cfg).unwrap();

            let probe = motif_pair(&mut rng, true);
            let ex = explain_pair(&model, &probe, CamNorm::PerLayerMax).unwrap();
            // Mass conservation through decode.
            let total = ex.aggregated.values.sum();
            assert!((ex.target_map.values.sum() - total).abs() <= 1e-9 * total.abs().max(1.0));
            assert!((ex.query_map.values.sum() - total).abs() <= 1e-9 * total.abs().max(1.0));
            // The planted motif lives at cell (3,3) in both images.
            let argmax = |t: &Tensor| {
                let mut best = (0usize, 0usize);
                let mut bv = f64::NEG_INFINITY;
                for i in 0..4 {
                    for j in 0..4 {
                        if t.at(&[i, j]) > bv {
                            bv = t.at(&[i, j]);
                            best = (i, j);
                        }
                    }
                }
                best
            };
            assert_eq!(argmax(&ex.target_map.values), (3, 3));
            assert_eq!(argmax(&ex.query_map.values), (3, 3));
        }
    }
}
