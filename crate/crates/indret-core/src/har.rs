//! Hypersphere attention regulation: a learnable Gaussian mask over the
//! squared distance of each 4D coordinate to a learnable center, applied
//! as a multiplicative residual on a layer's feature map.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Lower clamp for sigma; the mask amplitude diverges as sigma -> 0.
pub const SIGMA_MIN: f64 = 1e-3;

/// The six learnable scalars of one attention mask: a 4D center plus the
/// Gaussian's mu and sigma.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarParams {
    pub center: [f64; 4],
    pub mu: f64,
    pub sigma: f64,
}

impl HarParams {
    /// Default initialization for a layer of the given spatial shape:
    /// center at the middle, mu at zero, sigma a quarter of the diagonal.
    pub fn init_for_shape(spatial: &[usize; 4]) -> Self {
        let center = [
            (spatial[0] as f64 - 1.0) / 2.0,
            (spatial[1] as f64 - 1.0) / 2.0,
            (spatial[2] as f64 - 1.0) / 2.0,
            (spatial[3] as f64 - 1.0) / 2.0,
        ];
        let diag = libm::sqrt(
            spatial.iter().map(|&e| ((e - 1) as f64) * ((e - 1) as f64)).sum::<f64>(),
        );
        HarParams {
            center,
            mu: 0.0,
            sigma: (diag / 4.0).max(SIGMA_MIN),
        }
    }

    pub fn to_array(self) -> [f64; 6] {
        [
            self.center[0],
            self.center[1],
            self.center[2],
            self.center[3],
            self.mu,
            self.sigma,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        HarParams {
            center: [a[0], a[1], a[2], a[3]],
            mu: a[4],
            sigma: a[5],
        }
    }

    /// Clamps sigma away from the singularity at zero.
    pub fn clamped(mut self) -> Self {
        if self.sigma < SIGMA_MIN {
            self.sigma = SIGMA_MIN;
        }
        self
    }
}

/// Squared distance from an integer lattice point to the center.
#[inline]
fn sq_dist(idx: &[usize], center: &[f64; 4]) -> f64 {
    let mut d = 0.0;
    for m in 0..4 {
        let diff = idx[m] as f64 - center[m];
        d += diff * diff;
    }
    d
}

#[inline]
fn gaussian(d: f64, mu: f64, sigma: f64) -> f64 {
    let z = (d - mu) / sigma;
    libm::exp(-0.5 * z * z) / (libm::sqrt(2.0 * core::f64::consts::PI) * sigma)
}

/// Evaluates the mask over a 4D index lattice.
pub fn har_mask(layer_shape: &[usize; 4], params: &HarParams) -> Result<Tensor> {
    if params.sigma <= 0.0 {
        return Err(CoreError::Parameter(
            "har sigma must be positive".to_string(),
        ));
    }
    Ok(Tensor::from_fn(layer_shape, |idx| {
        gaussian(sq_dist(idx, &params.center), params.mu, params.sigma)
    }))
}

/// Multiplicative-residual application: `F ⊙ Θ + F`.
///
/// `feature` is either the 4D spatial tensor itself or a rank-5
/// channels-first tensor whose trailing four modes match the mask.
pub fn har_apply(feature: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if mask.rank() != 4 {
        return Err(CoreError::Dimension("har mask must be 4D".to_string()));
    }
    let spatial_ok = match feature.rank() {
        4 => feature.shape() == mask.shape(),
        5 => &feature.shape()[1..] == mask.shape(),
        _ => false,
    };
    if !spatial_ok {
        return Err(CoreError::Dimension(
            "feature spatial shape does not match har mask".to_string(),
        ));
    }
    let spatial_len = mask.len();
    let data: Vec<f64> = feature
        .data()
        .iter()
        .enumerate()
        .map(|(i, &f)| f * (1.0 + mask.data()[i % spatial_len]))
        .collect();
    Tensor::new(feature.shape().to_vec(), data)
}

/// Gradients of a scalar loss with respect to the mask parameters and the
/// feature map, given the upstream gradient on the har output.
#[derive(Debug, Clone, PartialEq)]
pub struct HarGradients {
    pub d_mu: f64,
    pub d_sigma: f64,
    pub d_center: [f64; 4],
    pub d_feature: Tensor,
}

/// Backward pass through `har_apply` with the mask expanded analytically.
///
/// With the output `F̂ = F ⊙ Θ + F`, the gradient on the mask is the
/// channel-summed `upstream ⊙ F`; parameter gradients then follow from the
/// Gaussian closed forms over the squared distance d:
///   d/dmu    = 1/σ² Σ g (d−μ) Θ
///   d/dsigma = 1/σ³ Σ g ((d−μ)²−σ²) Θ
///   d/dc_m   = 2/σ² Σ g (d−μ)(x_m−c_m) Θ
pub fn har_gradients(
    upstream: &Tensor,
    feature: &Tensor,
    params: &HarParams,
) -> Result<HarGradients> {
    if upstream.shape() != feature.shape() {
        return Err(CoreError::Dimension(
            "upstream and feature shapes differ".to_string(),
        ));
    }
    let spatial: [usize; 4] = match feature.rank() {
        4 => feature.shape().try_into().unwrap(),
        5 => feature.shape()[1..].try_into().unwrap(),
        _ => {
            return Err(CoreError::Dimension(
                "har feature must be rank 4 or 5".to_string(),
            ))
        }
    };
    let mask = har_mask(&spatial, params)?;
    let spatial_len = mask.len();
    let channels = feature.len() / spatial_len;

    // Mask gradient, channel-summed.
    let mut g_mask = Tensor::zeros(&spatial);
    {
        let gm = g_mask.data_mut();
        for c in 0..channels {
            let base = c * spatial_len;
            for i in 0..spatial_len {
                gm[i] += upstream.data()[base + i] * feature.data()[base + i];
            }
        }
    }

    let sigma = params.sigma;
    let mu = params.mu;
    let mut d_mu = 0.0;
    let mut d_sigma = 0.0;
    let mut d_center = [0.0; 4];
    let mut idx = [0usize; 4];
    for i in 0..spatial_len {
        let g = g_mask.data()[i];
        let theta = mask.data()[i];
        let d = sq_dist(&idx, &params.center);
        let dm = d - mu;
        d_mu += g * dm * theta;
        d_sigma += g * (dm * dm - sigma * sigma) * theta;
        for m in 0..4 {
            d_center[m] += g * dm * (idx[m] as f64 - params.center[m]) * theta;
        }
        crate::tensor::increment_index(&mut idx, &spatial);
    }
    d_mu /= sigma * sigma;
    d_sigma /= sigma * sigma * sigma;
    for c in d_center.iter_mut() {
        *c *= 2.0 / (sigma * sigma);
    }

    // Feature gradient: upstream ⊙ (1 + Θ), mask broadcast across channels.
    let d_feature = Tensor::new(
        feature.shape().to_vec(),
        upstream
            .data()
            .iter()
            .enumerate()
            .map(|(i, &g)| g * (1.0 + mask.data()[i % spatial_len]))
            .collect(),
    )?;

    Ok(HarGradients {
        d_mu,
        d_sigma,
        d_center,
        d_feature,
    })
}
