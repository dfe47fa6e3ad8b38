//! Deterministic histology-like synthetic data: elliptical "nuclei" in two
//! stain colors on a pale background, with instance masks and center points.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{InstanceMask, Point};
use crate::imageio;

/// How generated cells may interact spatially. Only disjoint placement is
/// implemented; the field exists so configs state the policy explicitly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OverlapPolicy {
    #[default]
    None,
}

impl OverlapPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(OverlapPolicy::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown overlap policy `{other}` (expected none)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    /// Square image side in pixels.
    pub size: usize,
    pub cells_min: usize,
    pub cells_max: usize,
    /// Ellipse semi-axis range, in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Probability a cell is class 1 (positive, brown); the rest are
    /// class 2 (negative, purple).
    pub class_mix: f64,
    pub color_pos: [f64; 3],
    pub color_neg: [f64; 3],
    pub color_bg: [f64; 3],
    /// Additive uniform per-pixel noise amplitude.
    pub noise: f64,
    pub overlap: OverlapPolicy,
    /// Minimum |mean fg intensity − mean bg intensity| per image.
    pub contrast_floor: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            cells_min: 3,
            cells_max: 8,
            radius_min: 3.0,
            radius_max: 5.0,
            class_mix: 0.5,
            color_pos: [0.47, 0.30, 0.16], // DAB-like brown
            color_neg: [0.36, 0.21, 0.50], // hematoxylin-like purple
            color_bg: [0.93, 0.88, 0.91],  // pale stroma
            noise: 0.03,
            overlap: OverlapPolicy::None,
            contrast_floor: 0.15,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius_min < 2.0 {
            return Err(Error::InvalidArgument(format!(
                "radius_min must be >= 2, got {}",
                self.radius_min
            )));
        }
        if self.radius_max < self.radius_min {
            return Err(Error::InvalidArgument(format!(
                "radius range inverted: {}..{}",
                self.radius_min, self.radius_max
            )));
        }
        if self.cells_min < 1 || self.cells_max < self.cells_min {
            return Err(Error::InvalidArgument(format!(
                "cell count range invalid: {}..{}",
                self.cells_min, self.cells_max
            )));
        }
        if (self.size as f64) < 4.0 * (self.radius_max + 2.0) {
            return Err(Error::InvalidArgument(format!(
                "size {} too small for radius_max {}",
                self.size, self.radius_max
            )));
        }
        if !(0.0..=1.0).contains(&self.class_mix) {
            return Err(Error::InvalidArgument(format!(
                "class_mix must lie in [0,1], got {}",
                self.class_mix
            )));
        }
        if self.noise < 0.0 || self.contrast_floor < 0.0 {
            return Err(Error::InvalidArgument(
                "noise and contrast_floor must be nonnegative".to_string(),
            ));
        }
        Ok(())
    }
}

/// One generated image, fully in memory. `rgb` is the same quantized RGB8
/// buffer the PNG writer receives, so files and in-memory data agree.
pub struct SynthSample {
    pub rgb: Vec<u8>,
    pub mask: InstanceMask,
    pub points: Vec<Point>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub points: String,
    pub seed: u64,
}

struct Cell {
    cy: f64,
    cx: f64,
    a: f64, // major semi-axis
    b: f64,
    theta: f64,
    class: u8,
    color: [f64; 3],
}

/// Elliptical membership: < 1 inside, 1 on the boundary.
fn ellipse_u(cell: &Cell, r: f64, c: f64) -> f64 {
    let dy = r - cell.cy;
    let dx = c - cell.cx;
    let (sin, cos) = cell.theta.sin_cos();
    let lon = (dx * cos + dy * sin) / cell.a;
    let lat = (-dx * sin + dy * cos) / cell.b;
    lon * lon + lat * lat
}

/// Interior fraction over which cell color ramps down to the background.
/// Wide enough that the boundary step stays gentler than the chromatin
/// texture inside the cell; the ramp sits entirely inside the mask.
const SOFT_EDGE: f64 = 0.5;
/// Placement attempts per requested cell before giving up on it.
const MAX_ATTEMPTS: usize = 200;
/// Relative amplitude of the chromatin-like intensity texture inside cells.
const CHROMATIN: f64 = 0.1;
/// Chromatin blob pitch in pixels. Blobs must span a few pixels: texture
/// finer than the downsampling of early conv stages just averages away.
const CHROMATIN_SCALE: usize = 3;

/// Deterministic hash noise in [-1, 1], independent of draw order.
fn hash_noise(seed: u64, r: u64, c: u64) -> f64 {
    let mut x = seed
        ^ r.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ c.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^= x >> 33;
    x = x.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    x ^= x >> 33;
    (x >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Smooth blobby value noise in [-1, 1]: hash noise on a coarse grid,
/// bilinearly interpolated at pixel resolution.
fn blob_noise(seed: u64, r: usize, c: usize) -> f64 {
    let s = CHROMATIN_SCALE;
    let (gr, gc) = ((r / s) as u64, (c / s) as u64);
    let (fr, fc) = ((r % s) as f64 / s as f64, (c % s) as f64 / s as f64);
    let v00 = hash_noise(seed, gr, gc);
    let v01 = hash_noise(seed, gr, gc + 1);
    let v10 = hash_noise(seed, gr + 1, gc);
    let v11 = hash_noise(seed, gr + 1, gc + 1);
    let top = v00 * (1.0 - fc) + v01 * fc;
    let bot = v10 * (1.0 - fc) + v11 * fc;
    top * (1.0 - fr) + bot * fr
}

pub fn derive_seed(base: u64, index: u64) -> u64 {
    base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

/// Renders one image from config and image index; deterministic in
/// `derive_seed(cfg.seed, index)` alone.
pub fn generate_image(cfg: &SynthConfig, index: u64) -> Result<SynthSample> {
    cfg.validate()?;
    let seed = derive_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.size;

    let target = rng.random_range(cfg.cells_min..=cfg.cells_max);
    let mut cells: Vec<Cell> = Vec::with_capacity(target);
    for _ in 0..target {
        for _attempt in 0..MAX_ATTEMPTS {
            let a = rng.random_range(cfg.radius_min..=cfg.radius_max);
            let b = rng.random_range(cfg.radius_min..=a.max(cfg.radius_min + 1e-9));
            let margin = a + 1.5;
            let cy = rng.random_range(margin..size as f64 - margin);
            let cx = rng.random_range(margin..size as f64 - margin);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            // disjoint policy: keep a >1 px gap between major circles
            let fits = cells
                .iter()
                .all(|o| ((cy - o.cy).powi(2) + (cx - o.cx).powi(2)).sqrt() > a + o.a + 1.0);
            if !fits {
                continue;
            }
            let class = if rng.random_bool(cfg.class_mix) { 1u8 } else { 2u8 };
            let base = if class == 1 { cfg.color_pos } else { cfg.color_neg };
            let mut color = [0.0; 3];
            for (ci, v) in color.iter_mut().enumerate() {
                *v = base[ci] + rng.random_range(-0.05..0.05);
            }
            cells.push(Cell {
                cy,
                cx,
                a,
                b,
                theta,
                class,
                color,
            });
            break;
        }
    }

    let mut mask = InstanceMask::filled(size, size, 0);
    let mut rgbf = vec![0f64; 3 * size * size];
    for r in 0..size {
        for c in 0..size {
            for ch in 0..3 {
                rgbf[(r * size + c) * 3 + ch] = cfg.color_bg[ch];
            }
        }
    }
    for (i, cell) in cells.iter().enumerate() {
        let id = (i + 1) as u16;
        let r0 = (cell.cy - cell.a - 1.0).floor().max(0.0) as usize;
        let r1 = ((cell.cy + cell.a + 1.0).ceil() as usize).min(size - 1);
        let c0 = (cell.cx - cell.a - 1.0).floor().max(0.0) as usize;
        let c1 = ((cell.cx + cell.a + 1.0).ceil() as usize).min(size - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let u = ellipse_u(cell, r as f64, c as f64);
                if u <= 1.0 {
                    mask.set(r, c, id);
                    let alpha = ((1.0 - u) / SOFT_EDGE).clamp(0.0, 1.0);
                    // chromatin texture: blobby intensity modulation
                    let tex = 1.0 + CHROMATIN * blob_noise(seed, r, c);
                    for ch in 0..3 {
                        let px = &mut rgbf[(r * size + c) * 3 + ch];
                        *px = *px * (1.0 - alpha) + cell.color[ch] * tex * alpha;
                    }
                }
            }
        }
    }
    // one noise pass over the whole frame, row-major, 3 draws per pixel
    if cfg.noise > 0.0 {
        for v in rgbf.iter_mut() {
            *v += rng.random_range(-cfg.noise..cfg.noise);
        }
    }
    let rgb: Vec<u8> = rgbf
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();

    let points: Vec<Point> = cells
        .iter()
        .map(|cell| Point {
            row: cell.cy,
            col: cell.cx,
            class: cell.class,
            score: 1.0,
        })
        .collect();
    for (i, p) in points.iter().enumerate() {
        debug_assert_eq!(
            mask.at(p.row.round() as usize, p.col.round() as usize),
            (i + 1) as u16,
            "center point escaped its own component"
        );
    }

    // contrast floor: clustering needs fg/bg separation to have any signal
    let intensity = |i: usize| {
        (rgb[i * 3] as f64 + rgb[i * 3 + 1] as f64 + rgb[i * 3 + 2] as f64) / (3.0 * 255.0)
    };
    let (mut fg_sum, mut fg_n, mut bg_sum, mut bg_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..size * size {
        if mask.data()[i] != 0 {
            fg_sum += intensity(i);
            fg_n += 1;
        } else {
            bg_sum += intensity(i);
            bg_n += 1;
        }
    }
    if fg_n > 0 && bg_n > 0 {
        let gap = (fg_sum / fg_n as f64 - bg_sum / bg_n as f64).abs();
        if gap < cfg.contrast_floor {
            return Err(Error::InvalidArgument(format!(
                "configured colors give fg/bg contrast {gap:.3} below floor {}",
                cfg.contrast_floor
            )));
        }
    }

    Ok(SynthSample {
        rgb,
        mask,
        points,
        seed,
    })
}

fn entry_names(i: usize) -> (String, String, String) {
    (
        format!("img_{i:05}.png"),
        format!("mask_{i:05}.png"),
        format!("points_{i:05}.csv"),
    )
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Generates `n_images` samples in parallel (per-image derived seeds keep
/// the output independent of scheduling) and writes images, masks, point
/// CSVs, and a manifest. Byte-identical across runs for one seed.
pub fn generate_dataset(
    cfg: &SynthConfig,
    n_images: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    if n_images < 1 {
        return Err(Error::InvalidArgument("n_images must be >= 1".to_string()));
    }
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let samples: Vec<SynthSample> = (0..n_images as u64)
        .into_par_iter()
        .map(|i| generate_image(cfg, i))
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(n_images);
    let mut manifest = String::new();
    writeln!(manifest, "psm-synth v1").unwrap();
    writeln!(manifest, "size = {}", cfg.size).unwrap();
    writeln!(manifest, "images = {n_images}").unwrap();
    writeln!(manifest, "base_seed = {}", cfg.seed).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let (img, mask, points) = entry_names(i);
        imageio::save_rgb8(dir.join(&img), cfg.size, cfg.size, &s.rgb)?;
        imageio::save_instance_mask(dir.join(&mask), &s.mask)?;
        imageio::save_points_csv(dir.join(&points), &s.points)?;
        writeln!(manifest, "{img} {mask} {points} {}", s.seed).unwrap();
        entries.push(ManifestEntry {
            image: img,
            mask,
            points,
            seed: s.seed,
        });
    }
    std::fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(entries)
}

/// Reads a dataset manifest back; paths stay relative to `dir`.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("psm-synth v1") => {}
        other => {
            return Err(Error::format(
                "manifest",
                format!("unexpected header {other:?} in {}", path.display()),
            ))
        }
    }
    let mut entries = Vec::new();
    for line in lines {
        if line.contains('=') || line.trim().is_empty() {
            continue; // key = value metadata
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::format(
                "manifest",
                format!("expected `img mask points seed`, got `{line}`"),
            ));
        }
        entries.push(ManifestEntry {
            image: fields[0].to_string(),
            mask: fields[1].to_string(),
            points: fields[2].to_string(),
            seed: fields[3]
                .parse()
                .map_err(|e| Error::format("manifest", format!("bad seed: {e}")))?,
        });
    }
    if entries.is_empty() {
        return Err(Error::format("manifest", "no entries".to_string()));
    }
    Ok(entries)
}

/// Resolved absolute paths for one manifest entry.
pub fn entry_paths(dir: impl AsRef<Path>, e: &ManifestEntry) -> (PathBuf, PathBuf, PathBuf) {
    let d = dir.as_ref();
    (d.join(&e.image), d.join(&e.mask), d.join(&e.points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::label_components;
    use tempfile::tempdir;

    #[test]
    fn datasets_are_byte_identical_across_runs() {
        let cfg = SynthConfig::default();
        let (d1, d2) = (tempdir().unwrap(), tempdir().unwrap());
        let e1 = generate_dataset(&cfg, 4, d1.path()).unwrap();
        let e2 = generate_dataset(&cfg, 4, d2.path()).unwrap();
        assert_eq!(e1, e2);
        let mut names: Vec<String> = std::fs::read_dir(d1.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names.len(), 3 * 4 + 1);
        for name in names {
            let a = std::fs::read(d1.path().join(&name)).unwrap();
            let b = std::fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let cfg = SynthConfig::default();
        let dir = tempdir().unwrap();
        let written = generate_dataset(&cfg, 3, dir.path()).unwrap();
        let read = read_manifest(dir.path()).unwrap();
        assert_eq!(written, read);
    }

    #[test]
    fn class_mix_one_yields_no_negative_points() {
        let cfg = SynthConfig {
            class_mix: 1.0,
            ..SynthConfig::default()
        };
        for i in 0..10 {
            let s = generate_image(&cfg, i).unwrap();
            assert!(!s.points.is_empty());
            assert!(s.points.iter().all(|p| p.class == 1));
        }
    }

    #[test]
    fn mean_cell_count_near_range_midpoint() {
        let cfg = SynthConfig::default();
        let total: usize = (0..100)
            .map(|i| generate_image(&cfg, i).unwrap().points.len())
            .sum();
        let mean = total as f64 / 100.0;
        let mid = (cfg.cells_min + cfg.cells_max) as f64 / 2.0;
        assert!(
            (mean - mid).abs() <= 0.1 * mid,
            "mean count {mean} vs midpoint {mid}"
        );
    }

    #[test]
    fn points_inside_own_component_and_components_disjoint() {
        let cfg = SynthConfig::default();
        for i in 0..20 {
            let s = generate_image(&cfg, i).unwrap();
            for (k, p) in s.points.iter().enumerate() {
                let id = s.mask.at(p.row.round() as usize, p.col.round() as usize);
                assert_eq!(id, (k + 1) as u16);
            }
            // each instance id forms its own 4-connected component: the
            // component count over all foreground equals the cell count
            let (_, n) =
                label_components(s.mask.h(), s.mask.w(), |i| s.mask.data()[i] != 0).unwrap();
            assert_eq!(n, s.points.len());
            // and no pixel belongs to two cells by construction of ids
            let max_id = *s.mask.data().iter().max().unwrap();
            assert_eq!(max_id as usize, s.points.len());
        }
    }

    #[test]
    fn contrast_floor_enforced() {
        let cfg = SynthConfig::default();
        let s = generate_image(&cfg, 0).unwrap();
        let fg: Vec<f64> = (0..cfg.size * cfg.size)
            .filter(|&i| s.mask.data()[i] != 0)
            .map(|i| (s.rgb[i * 3] as f64 + s.rgb[i * 3 + 1] as f64 + s.rgb[i * 3 + 2] as f64) / 765.0)
            .collect();
        let bg: Vec<f64> = (0..cfg.size * cfg.size)
            .filter(|&i| s.mask.data()[i] == 0)
            .map(|i| (s.rgb[i * 3] as f64 + s.rgb[i * 3 + 1] as f64 + s.rgb[i * 3 + 2] as f64) / 765.0)
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&fg) - mean(&bg)).abs() >= cfg.contrast_floor);

        // colors that collapse onto the background violate the floor
        let bad = SynthConfig {
            color_pos: [0.93, 0.88, 0.91],
            color_neg: [0.93, 0.88, 0.91],
            ..SynthConfig::default()
        };
        assert!(generate_image(&bad, 0).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let mut cfg = SynthConfig {
            radius_min: 1.0,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.radius_min = 5.0;
        cfg.radius_max = 3.0;
        assert!(cfg.validate().is_err());
        cfg = SynthConfig {
            size: 16,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(SynthConfig::default().validate().is_ok());
    }
}
