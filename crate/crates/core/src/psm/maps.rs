//! Eq. 3–5: alpha weights, the prior self-activation map, and fusion.

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarMap};
use crate::tensor::{Scalar, TensorData};

/// A prior self-activation map: values in [0,1] at the input resolution.
#[derive(Clone, Debug)]
pub struct PSMap {
    pub values: ScalarMap,
    pub depth: usize,
    /// Free-form provenance string (checkpoint id, image id).
    pub provenance: String,
}

/// Per-pixel clustering features: channel 0 is the PSM, channels 1..=3 are
/// the beta-scaled raw RGB channels (Eq. 5). Stored pixel-major.
#[derive(Clone, Debug)]
pub struct FusedMap {
    h: usize,
    w: usize,
    pub beta: f64,
    data: Vec<f64>,
}

pub const FUSED_DIM: usize = 4;

impl FusedMap {
    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn feature(&self, r: usize, c: usize) -> &[f64] {
        let base = (r * self.w + c) * FUSED_DIM;
        &self.data[base..base + FUSED_DIM]
    }

    /// Flat pixel-major feature array (length h·w·4) for clustering.
    pub fn features(&self) -> &[f64] {
        &self.data
    }
}

fn feature_shape(t: &TensorData<impl Scalar>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [k, h, w] => Ok((*k, *h, *w)),
        [1, k, h, w] => Ok((*k, *h, *w)),
        other => Err(Error::shape_mismatch(
            "feature tensor",
            "[K,h,w] or [1,K,h,w]",
            format!("{other:?}"),
        )),
    }
}

/// Eq. 4: α_k = global average of ∂z/∂A^k over the feature map positions.
pub fn compute_alpha<S: Scalar>(grads: &TensorData<S>) -> Result<Vec<f64>> {
    let (k, h, w) = feature_shape(grads)?;
    let hw = h * w;
    let data = grads.data();
    Ok((0..k)
        .map(|ki| {
            let mut acc = 0.0;
            for &v in &data[ki * hw..(ki + 1) * hw] {
                acc += v.to_f64();
            }
            acc / hw as f64
        })
        .collect())
}

/// The pre-rescale, pre-upsample Eq. 3 map: ReLU(Σ_k α_k A^k) at tap
/// resolution. Exposed separately so tests can oracle it directly.
pub fn weighted_activation_map<S: Scalar>(
    features: &TensorData<S>,
    alpha: &[f64],
) -> Result<ScalarMap> {
    let (k, h, w) = feature_shape(features)?;
    if alpha.len() != k {
        return Err(Error::shape_mismatch(
            "weighted_activation_map",
            format!("alpha of length {k}"),
            format!("{}", alpha.len()),
        ));
    }
    let hw = h * w;
    let data = features.data();
    let mut out = vec![0f32; hw];
    for (ki, &a) in alpha.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(&data[ki * hw..(ki + 1) * hw]) {
            *o += (a * v.to_f64()) as f32;
        }
    }
    for o in &mut out {
        *o = o.max(0.0);
    }
    Grid::from_vec(h, w, out)
}

/// Bilinear upsampling (align_corners = false, edge-clamped), the standard
/// image-resize convention.
pub fn bilinear_upsample(src: &ScalarMap, th: usize, tw: usize) -> ScalarMap {
    let (sh, sw) = (src.h(), src.w());
    if sh == th && sw == tw {
        return src.clone();
    }
    let mut out = ScalarMap::filled(th, tw, 0.0);
    let ry = sh as f64 / th as f64;
    let rx = sw as f64 / tw as f64;
    for y in 0..th {
        let sy = ((y as f64 + 0.5) * ry - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = sy - y0 as f64;
        for x in 0..tw {
            let sx = ((x as f64 + 0.5) * rx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = sx - x0 as f64;
            let v00 = src.at(y0, x0) as f64;
            let v01 = src.at(y0, x1) as f64;
            let v10 = src.at(y1, x0) as f64;
            let v11 = src.at(y1, x1) as f64;
            let v = v00 * (1.0 - fy) * (1.0 - fx)
                + v01 * (1.0 - fy) * fx
                + v10 * fy * (1.0 - fx)
                + v11 * fy * fx;
            out.set(y, x, v as f32);
        }
    }
    out
}

/// Eq. 3 end to end: ReLU(Σ α_k A^k), bilinear upsample to (H,W), then
/// min-max rescale into [0,1]. A constant map rescales to all zeros.
pub fn compute_psm<S: Scalar>(
    features: &TensorData<S>,
    alpha: &[f64],
    target_hw: (usize, usize),
    depth: usize,
    provenance: impl Into<String>,
) -> Result<PSMap> {
    let raw = weighted_activation_map(features, alpha)?;
    let mut up = bilinear_upsample(&raw, target_hw.0, target_hw.1);
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in up.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let inv = 1.0 / (hi - lo);
        for v in up.data_mut() {
            *v = (*v - lo) * inv;
        }
    } else {
        for v in up.data_mut() {
            *v = 0.0;
        }
    }
    Ok(PSMap {
        values: up,
        depth,
        provenance: provenance.into(),
    })
}

/// Eq. 5: per-pixel feature (psm, β·r, β·g, β·b). `raw` must be `[1,3,H,W]`
/// in [0,1] and spatially match the PSM.
pub fn fuse<S: Scalar>(psm: &PSMap, raw: &TensorData<S>, beta: f64) -> Result<FusedMap> {
    if beta < 0.0 {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    let (h, w) = (psm.values.h(), psm.values.w());
    match raw.shape() {
        [1, 3, rh, rw] if *rh == h && *rw == w => {}
        other => {
            return Err(Error::shape_mismatch(
                "fuse",
                format!("[1,3,{h},{w}]"),
                format!("{other:?}"),
            ))
        }
    }
    let hw = h * w;
    let rawd = raw.data();
    let mut data = vec![0f64; hw * FUSED_DIM];
    for i in 0..hw {
        data[i * FUSED_DIM] = psm.values.data()[i] as f64;
        for ch in 0..3 {
            data[i * FUSED_DIM + 1 + ch] = beta * rawd[ch * hw + i].to_f64();
        }
    }
    Ok(FusedMap {
        h,
        w,
        beta,
        data,
    })
}
