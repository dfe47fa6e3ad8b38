//! Voronoi label maps (§2.3): component centroids become foreground seeds,
//! discrete Voronoi ridges become background, everything else is ignored.

use crate::error::{Error, Result};
use crate::grid::{label_components, LabelMap, Point, IGNORE_LABEL};

#[derive(Clone, Debug)]
pub struct VoronoiLabelMap {
    /// 0 = ridge (background), 1 = seed disk (foreground), 255 = ignore.
    pub labels: LabelMap,
    /// Component centroids, in row-major discovery order. `score` carries the
    /// component pixel count.
    pub seeds: Vec<Point>,
}

pub struct VoronoiOutcome {
    pub map: VoronoiLabelMap,
    pub warnings: Vec<String>,
}

/// 4-connected components of foreground (label ∉ {0, 255}) → centroids.
fn component_centroids(mask: &LabelMap) -> Result<Vec<Point>> {
    let (h, w) = (mask.h(), mask.w());
    let (cc, n) = label_components(h, w, |i| {
        let v = mask.data()[i];
        v != 0 && v != IGNORE_LABEL
    })?;
    let mut sum_r = vec![0f64; n];
    let mut sum_c = vec![0f64; n];
    let mut count = vec![0usize; n];
    for r in 0..h {
        for c in 0..w {
            let id = cc.at(r, c);
            if id > 0 {
                sum_r[id as usize - 1] += r as f64;
                sum_c[id as usize - 1] += c as f64;
                count[id as usize - 1] += 1;
            }
        }
    }
    Ok((0..n)
        .map(|i| Point {
            row: sum_r[i] / count[i] as f64,
            col: sum_c[i] / count[i] as f64,
            class: 1,
            score: count[i] as f32,
        })
        .collect())
}

fn sq_dist_to(r: usize, c: usize, seed: &Point) -> f64 {
    let dr = r as f64 - seed.row;
    let dc = c as f64 - seed.col;
    dr * dr + dc * dc
}

/// Nearest-seed index per pixel; ties go to the lowest seed index.
fn nearest_regions(h: usize, w: usize, seeds: &[Point]) -> Vec<usize> {
    let mut regions = vec![0usize; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut best = 0usize;
            let mut best_d = sq_dist_to(r, c, &seeds[0]);
            for (s, seed) in seeds.iter().enumerate().skip(1) {
                let d = sq_dist_to(r, c, seed);
                if d < best_d {
                    best_d = d;
                    best = s;
                }
            }
            regions[r * w + c] = best;
        }
    }
    regions
}

/// Two nearest seeds of a ridge pixel must be this close to equidistant.
pub const RIDGE_GAP: f64 = 1.5;

/// Derives the Voronoi supervision map from a pseudo mask (Eq. 8's I_vor).
///
/// Seeds are the centroids of the mask's 4-connected foreground components.
/// A pixel becomes background (0) when some 4-neighbor falls in a different
/// nearest-seed region *and* its two nearest seeds are within [`RIDGE_GAP`]
/// of equidistant (the discrete ridge condition; without the distance test a
/// pixel bordering a razor-thin sliver of another region would be marked
/// despite sitting well inside its own cell). A pixel becomes foreground (1)
/// when it lies within `seed_disk_radius` of exactly one seed — disks
/// overwrite ridge pixels — and ignore (255) otherwise. A mask with no
/// foreground yields an all-ignore map plus a warning rather than an error.
pub fn voronoi_labels(mask: &LabelMap, seed_disk_radius: usize) -> Result<VoronoiOutcome> {
    if seed_disk_radius == 0 {
        return Err(Error::InvalidArgument(
            "seed_disk_radius must be at least 1".to_string(),
        ));
    }
    let (h, w) = (mask.h(), mask.w());
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput("voronoi_labels on empty mask".to_string()));
    }
    let seeds = component_centroids(mask)?;
    let mut warnings = Vec::new();
    if seeds.is_empty() {
        warnings.push("no foreground components; emitting all-ignore Voronoi map".to_string());
        return Ok(VoronoiOutcome {
            map: VoronoiLabelMap {
                labels: LabelMap::filled(h, w, IGNORE_LABEL),
                seeds,
            },
            warnings,
        });
    }
    let regions = nearest_regions(h, w, &seeds);
    let mut labels = LabelMap::filled(h, w, IGNORE_LABEL);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let here = regions[i];
            let borders = (r > 0 && regions[i - w] != here)
                || (r + 1 < h && regions[i + w] != here)
                || (c > 0 && regions[i - 1] != here)
                || (c + 1 < w && regions[i + 1] != here);
            if borders {
                let mut d1 = f64::INFINITY;
                let mut d2 = f64::INFINITY;
                for s in &seeds {
                    let d = sq_dist_to(r, c, s).sqrt();
                    if d < d1 {
                        d2 = d1;
                        d1 = d;
                    } else if d < d2 {
                        d2 = d;
                    }
                }
                if d2 - d1 < RIDGE_GAP {
                    labels.data_mut()[i] = 0;
                }
            }
        }
    }
    let radius_sq = (seed_disk_radius * seed_disk_radius) as f64;
    for r in 0..h {
        for c in 0..w {
            let covering = seeds
                .iter()
                .filter(|s| sq_dist_to(r, c, s) <= radius_sq)
                .count();
            if covering == 1 {
                labels.set(r, c, 1);
            }
        }
    }
    Ok(VoronoiOutcome {
        map: VoronoiLabelMap { labels, seeds },
        warnings,
    })
}
