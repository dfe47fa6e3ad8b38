//! Report overlays: heat ramps for PSMs, label tints for masks, red/green
//! dots for two-class points (red = positive, green = negative).

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{InstanceMask, LabelMap, Point, ScalarMap, IGNORE_LABEL};
use crate::imageio;
use crate::tensor::TensorData;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderKind {
    Psm,
    Mask,
    Voronoi,
    Points,
}

impl RenderKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "psm" => Ok(RenderKind::Psm),
            "mask" => Ok(RenderKind::Mask),
            "voronoi" => Ok(RenderKind::Voronoi),
            "points" => Ok(RenderKind::Points),
            other => Err(Error::InvalidArgument(format!(
                "unknown render kind `{other}` (expected psm|mask|voronoi|points)"
            ))),
        }
    }
}

/// Interleaved RGB8 canvas, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Canvas {
    pub h: usize,
    pub w: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(h: usize, w: usize, fill: [u8; 3]) -> Self {
        let mut rgb = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            rgb.extend_from_slice(&fill);
        }
        Canvas { h, w, rgb }
    }

    /// Converts a [1,3,H,W] tensor in [0,1] to an RGB8 canvas.
    pub fn from_tensor<S: crate::tensor::Scalar>(t: &TensorData<S>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, 3, h, w] => (*h, *w),
            other => {
                return Err(Error::shape_mismatch(
                    "canvas",
                    "[1,3,H,W]",
                    format!("{other:?}"),
                ))
            }
        };
        let data = t.data();
        let hw = h * w;
        let mut rgb = vec![0u8; hw * 3];
        for i in 0..hw {
            for ch in 0..3 {
                let v = data[ch * hw + i].to_f64().clamp(0.0, 1.0);
                rgb[i * 3 + ch] = (v * 255.0).round() as u8;
            }
        }
        Ok(Canvas { h, w, rgb })
    }

    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let base = (r * self.w + c) * 3;
        [self.rgb[base], self.rgb[base + 1], self.rgb[base + 2]]
    }

    fn set(&mut self, r: usize, c: usize, px: [u8; 3]) {
        let base = (r * self.w + c) * 3;
        self.rgb[base..base + 3].copy_from_slice(&px);
    }

    fn blend(&mut self, r: usize, c: usize, color: [u8; 3], alpha: f64) {
        let base = (r * self.w + c) * 3;
        for ch in 0..3 {
            let v = self.rgb[base + ch] as f64 * (1.0 - alpha) + color[ch] as f64 * alpha;
            self.rgb[base + ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        imageio::save_rgb8(path, self.h, self.w, &self.rgb)
    }
}

fn check_size(what: &str, base: &Canvas, h: usize, w: usize) -> Result<()> {
    if base.h != h || base.w != w {
        return Err(Error::shape_mismatch(
            what,
            format!("{}x{}", base.h, base.w),
            format!("{h}x{w}"),
        ));
    }
    Ok(())
}

/// Black → red → yellow → white heat ramp.
fn heat(v: f64) -> [u8; 3] {
    let r = (3.0 * v).clamp(0.0, 1.0);
    let g = (3.0 * v - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * v - 2.0).clamp(0.0, 1.0);
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

/// Class/instance tint palette (class 1 red, class 2 green, then cycling).
const PALETTE: [[u8; 3]; 6] = [
    [230, 40, 40],
    [40, 200, 70],
    [60, 90, 230],
    [240, 170, 40],
    [170, 60, 220],
    [40, 200, 200],
];

fn palette(idx: usize) -> [u8; 3] {
    PALETTE[idx % PALETTE.len()]
}

/// Heat-map overlay with value-proportional opacity: a constant-0 map leaves
/// the base untouched.
pub fn render_psm(base: &Canvas, psm: &ScalarMap) -> Result<Canvas> {
    check_size("render psm", base, psm.h(), psm.w())?;
    let mut out = base.clone();
    for r in 0..psm.h() {
        for c in 0..psm.w() {
            let v = (psm.at(r, c) as f64).clamp(0.0, 1.0);
            if v > 0.0 {
                out.blend(r, c, heat(v), 0.7 * v);
            }
        }
    }
    Ok(out)
}

/// Label tint: background and ignore stay untouched, classes get palette
/// colors.
pub fn render_label_tint(base: &Canvas, mask: &LabelMap) -> Result<Canvas> {
    check_size("render mask", base, mask.h(), mask.w())?;
    let mut out = base.clone();
    for r in 0..mask.h() {
        for c in 0..mask.w() {
            let v = mask.at(r, c);
            if v != 0 && v != IGNORE_LABEL {
                out.blend(r, c, palette(v as usize - 1), 0.55);
            }
        }
    }
    Ok(out)
}

/// Instance tint: each instance id cycles through the palette.
pub fn render_instance_tint(base: &Canvas, mask: &InstanceMask) -> Result<Canvas> {
    check_size("render instances", base, mask.h(), mask.w())?;
    let mut out = base.clone();
    for r in 0..mask.h() {
        for c in 0..mask.w() {
            let v = mask.at(r, c);
            if v != 0 {
                out.blend(r, c, palette(v as usize - 1), 0.55);
            }
        }
    }
    Ok(out)
}

/// Voronoi overlay: seed disks (label 1) red, supervised background/ridge
/// (label 0) blue, ignore untouched — an all-ignore map renders as the pure
/// base image.
pub fn render_voronoi(base: &Canvas, vor: &LabelMap) -> Result<Canvas> {
    check_size("render voronoi", base, vor.h(), vor.w())?;
    let mut out = base.clone();
    for r in 0..vor.h() {
        for c in 0..vor.w() {
            match vor.at(r, c) {
                1 => out.blend(r, c, [230, 40, 40], 0.6),
                0 => out.blend(r, c, [60, 90, 230], 0.45),
                _ => {}
            }
        }
    }
    Ok(out)
}

/// Dot markers: radius-2 blended disk per point with a pure class-color
/// center pixel (the pixel-probe anchor). Class 1 pure red, class 2 pure
/// green.
pub fn render_points(base: &Canvas, points: &[Point]) -> Result<Canvas> {
    let mut out = base.clone();
    let (h, w) = (base.h as i64, base.w as i64);
    for p in points {
        let pr = p.row.round() as i64;
        let pc = p.col.round() as i64;
        if pr < 0 || pr >= h || pc < 0 || pc >= w {
            return Err(Error::InvalidArgument(format!(
                "point ({}, {}) lies outside a {}x{} base image",
                p.row, p.col, base.h, base.w
            )));
        }
        let color = match p.class {
            1 => [255u8, 0, 0],
            2 => [0u8, 255, 0],
            other => palette(other as usize),
        };
        for dr in -2i64..=2 {
            for dc in -2i64..=2 {
                let (r, c) = (pr + dr, pc + dc);
                if r < 0 || r >= h || c < 0 || c >= w || dr * dr + dc * dc > 4 {
                    continue;
                }
                out.blend(r as usize, c as usize, color, 0.6);
            }
        }
        out.set(pr as usize, pc as usize, color);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn gray_base(h: usize, w: usize) -> Canvas {
        Canvas::new(h, w, [120, 120, 120])
    }

    #[test]
    fn constant_zero_psm_leaves_base_untouched() {
        let base = gray_base(8, 8);
        let psm = ScalarMap::filled(8, 8, 0.0);
        let out = render_psm(&base, &psm).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn hot_pixel_blends_toward_white() {
        let base = gray_base(4, 4);
        let mut psm = ScalarMap::filled(4, 4, 0.0);
        psm.set(1, 2, 1.0);
        let out = render_psm(&base, &psm).unwrap();
        let px = out.pixel(1, 2);
        // 0.3·120 + 0.7·255 = 214.5 on every channel
        assert_eq!(px, [215, 215, 215]);
        assert_eq!(out.pixel(0, 0), [120, 120, 120]);
    }

    #[test]
    fn all_ignore_voronoi_renders_pure_base() {
        let base = gray_base(6, 6);
        let vor = LabelMap::filled(6, 6, IGNORE_LABEL);
        let out = render_voronoi(&base, &vor).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn single_class1_point_probe() {
        let base = gray_base(16, 16);
        let pts = vec![Point {
            row: 5.0,
            col: 9.0,
            class: 1,
            score: 1.0,
        }];
        let out = render_points(&base, &pts).unwrap();
        assert_eq!(out.pixel(5, 9), [255, 0, 0]);
        let pure_red = (0..16)
            .flat_map(|r| (0..16).map(move |c| (r, c)))
            .filter(|&(r, c)| out.pixel(r, c) == [255, 0, 0])
            .count();
        assert_eq!(pure_red, 1, "exactly one pure-red probe pixel");

        let pts2 = vec![Point {
            row: 5.0,
            col: 9.0,
            class: 2,
            score: 1.0,
        }];
        let out2 = render_points(&base, &pts2).unwrap();
        assert_eq!(out2.pixel(5, 9), [0, 255, 0]);
    }

    #[test]
    fn label_tint_touches_only_labeled_pixels() {
        let base = gray_base(5, 5);
        let mut mask = LabelMap::filled(5, 5, 0);
        mask.set(2, 2, 1);
        mask.set(3, 3, IGNORE_LABEL);
        let out = render_label_tint(&base, &mask).unwrap();
        assert_ne!(out.pixel(2, 2), [120, 120, 120]);
        assert_eq!(out.pixel(3, 3), [120, 120, 120]);
        assert_eq!(out.pixel(0, 0), [120, 120, 120]);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let base = gray_base(4, 4);
        let psm = ScalarMap::filled(4, 5, 0.0);
        assert!(render_psm(&base, &psm).is_err());
        let mask: LabelMap = Grid::filled(5, 4, 0);
        assert!(render_label_tint(&base, &mask).is_err());
        let out_of_bounds = vec![Point {
            row: 9.0,
            col: 0.0,
            class: 1,
            score: 1.0,
        }];
        assert!(render_points(&base, &out_of_bounds).is_err());
    }
}
