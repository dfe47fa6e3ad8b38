//! Cross-checks the clustering, Voronoi, and AJI implementations against
//! independent brute-force oracles on small random inputs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use psm_core::grid::{InstanceMask, LabelMap, IGNORE_LABEL};
use psm_core::metrics::aji;
use psm_core::psm::{kmeans_restarts, voronoi_labels, RIDGE_GAP};

// ---------------------------------------------------------------------
// K-Means vs the exhaustive two-cluster optimum.

/// Objective of the best split over all 2^n assignments of n points into
/// two clusters (centroid = mean of each nonempty side).
fn exhaustive_two_cluster_objective(points: &[f64], dim: usize) -> f64 {
    let n = points.len() / dim;
    let mut best = f64::INFINITY;
    for mask in 0..(1u32 << n) {
        let mut sums = [vec![0f64; dim], vec![0f64; dim]];
        let mut counts = [0usize; 2];
        for i in 0..n {
            let side = ((mask >> i) & 1) as usize;
            counts[side] += 1;
            for d in 0..dim {
                sums[side][d] += points[i * dim + d];
            }
        }
        let mut obj = 0.0;
        for i in 0..n {
            let side = ((mask >> i) & 1) as usize;
            for d in 0..dim {
                let mean = sums[side][d] / counts[side] as f64;
                let diff = points[i * dim + d] - mean;
                obj += diff * diff;
            }
        }
        if obj < best {
            best = obj;
        }
    }
    best
}

#[test]
fn kmeans_matches_exhaustive_two_cluster_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    for trial in 0..100u64 {
        let n = rng.random_range(2..=8usize);
        let dim = rng.random_range(1..=3usize);
        let points: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();

        let best = exhaustive_two_cluster_objective(&points, dim);
        let km = kmeans_restarts(&points, dim, 2, trial, 200, 0.0, 64).unwrap();

        let tol = 1e-9 * best.max(1.0);
        assert!(
            (km.objective - best).abs() <= tol,
            "trial {trial}: kmeans objective {} vs exhaustive optimum {best}",
            km.objective
        );
    }
}

// ---------------------------------------------------------------------
// Voronoi supervision vs a from-scratch reimplementation.

/// 4-connected components in raster discovery order, BFS.
fn brute_components(mask: &LabelMap) -> Vec<Vec<usize>> {
    let (h, w) = (mask.h(), mask.w());
    let fg = |i: usize| {
        let v = mask.data()[i];
        v != 0 && v != IGNORE_LABEL
    };
    let mut comp_of = vec![usize::MAX; h * w];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for start in 0..h * w {
        if comp_of[start] != usize::MAX || !fg(start) {
            continue;
        }
        let id = comps.len();
        let mut queue = std::collections::VecDeque::from([start]);
        comp_of[start] = id;
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            pixels.push(i);
            let (r, c) = (i / w, i % w);
            let mut push = |j: usize, comp_of: &mut Vec<usize>| {
                if comp_of[j] == usize::MAX && fg(j) {
                    comp_of[j] = id;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                push(i - w, &mut comp_of);
            }
            if r + 1 < h {
                push(i + w, &mut comp_of);
            }
            if c > 0 {
                push(i - 1, &mut comp_of);
            }
            if c + 1 < w {
                push(i + 1, &mut comp_of);
            }
        }
        comps.push(pixels);
    }
    comps
}

/// Independent rebuild of the Voronoi label rule: per-pixel distances to
/// every seed, ridge where the nearest-region changes hands within
/// `RIDGE_GAP`, foreground where exactly one seed disk covers the pixel.
fn brute_voronoi(mask: &LabelMap, radius: usize) -> (LabelMap, Vec<(f64, f64)>) {
    let (h, w) = (mask.h(), mask.w());
    let mut seeds = Vec::new();
    for pixels in brute_components(mask) {
        // raster-order accumulation, matching the production sum order
        let mut sorted = pixels.clone();
        sorted.sort_unstable();
        let (mut sr, mut sc) = (0f64, 0f64);
        for &i in &sorted {
            sr += (i / w) as f64;
            sc += (i % w) as f64;
        }
        let n = pixels.len() as f64;
        seeds.push((sr / n, sc / n));
    }

    let mut labels = LabelMap::filled(h, w, IGNORE_LABEL);
    if seeds.is_empty() {
        return (labels, seeds);
    }

    let sq = |r: usize, c: usize, s: &(f64, f64)| {
        let dr = r as f64 - s.0;
        let dc = c as f64 - s.1;
        dr * dr + dc * dc
    };
    let region = |r: usize, c: usize| {
        let mut best = 0usize;
        let mut best_d = sq(r, c, &seeds[0]);
        for (i, s) in seeds.iter().enumerate().skip(1) {
            let d = sq(r, c, s);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    };

    for r in 0..h {
        for c in 0..w {
            let here = region(r, c);
            let mut borders = false;
            if r > 0 && region(r - 1, c) != here {
                borders = true;
            }
            if r + 1 < h && region(r + 1, c) != here {
                borders = true;
            }
            if c > 0 && region(r, c - 1) != here {
                borders = true;
            }
            if c + 1 < w && region(r, c + 1) != here {
                borders = true;
            }
            if borders {
                let mut dists: Vec<f64> = seeds.iter().map(|s| sq(r, c, s).sqrt()).collect();
                dists.sort_by(f64::total_cmp);
                if dists[1] - dists[0] < RIDGE_GAP {
                    labels.set(r, c, 0);
                }
            }
        }
    }
    let rsq = (radius * radius) as f64;
    for r in 0..h {
        for c in 0..w {
            let covering = seeds.iter().filter(|s| sq(r, c, s) <= rsq).count();
            if covering == 1 {
                labels.set(r, c, 1);
            }
        }
    }
    (labels, seeds)
}

/// Up to five small disks of foreground; overlaps merge, so the component
/// count never exceeds the blob count.
fn random_blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, max_blobs: usize) -> LabelMap {
    let mut mask = LabelMap::filled(h, w, 0);
    let blobs = rng.random_range(0..=max_blobs);
    for _ in 0..blobs {
        let cr = rng.random_range(0..h) as i64;
        let cc = rng.random_range(0..w) as i64;
        let rad = rng.random_range(0..=2i64);
        for r in (cr - rad).max(0)..=(cr + rad).min(h as i64 - 1) {
            for c in (cc - rad).max(0)..=(cc + rad).min(w as i64 - 1) {
                if (r - cr).pow(2) + (c - cc).pow(2) <= rad * rad {
                    mask.set(r as usize, c as usize, 1);
                }
            }
        }
    }
    mask
}

#[test]
fn voronoi_matches_brute_force_nearest_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let mut nonempty = 0;
    for trial in 0..100 {
        let mask = random_blob_mask(&mut rng, 32, 32, 5);
        let radius = rng.random_range(1..=3usize);

        let got = voronoi_labels(&mask, radius).unwrap();
        let (want_labels, want_seeds) = brute_voronoi(&mask, radius);

        assert_eq!(got.map.seeds.len(), want_seeds.len(), "trial {trial}");
        for (s, (wr, wc)) in got.map.seeds.iter().zip(&want_seeds) {
            assert_eq!(s.row, *wr, "trial {trial}");
            assert_eq!(s.col, *wc, "trial {trial}");
        }
        assert_eq!(
            got.map.labels.data(),
            want_labels.data(),
            "trial {trial} (radius {radius})"
        );
        if !want_seeds.is_empty() {
            nonempty += 1;
            assert!(got.warnings.is_empty(), "trial {trial}");
        }
    }
    assert!(nonempty >= 80, "mask sampler degenerated: {nonempty}/100");
}

// ---------------------------------------------------------------------
// AJI vs a from-definition accumulation oracle.

/// Literal AJI accumulation over instance pixel sets: every ground-truth
/// instance (first-pixel order) picks its best-IoU prediction, intersections
/// sum into C and unions into U, and instances never picked contribute their
/// full area to U.
fn aji_oracle(pred: &InstanceMask, gt: &InstanceMask) -> f64 {
    use std::collections::{BTreeMap, HashSet};

    // id -> pixel set, iterated in order of first appearance
    fn instances(m: &InstanceMask) -> Vec<(u16, HashSet<usize>)> {
        let mut order = Vec::new();
        let mut sets: BTreeMap<u16, HashSet<usize>> = BTreeMap::new();
        for (i, &v) in m.data().iter().enumerate() {
            if v != 0 {
                if !sets.contains_key(&v) {
                    order.push(v);
                }
                sets.entry(v).or_default().insert(i);
            }
        }
        order.into_iter().map(|id| (id, sets[&id].clone())).collect()
    }

    let gts = instances(gt);
    let preds = instances(pred);
    let mut c = 0usize;
    let mut u = 0usize;
    let mut used = vec![false; preds.len()];
    for (_, gset) in &gts {
        let mut best: Option<(f64, usize, usize)> = None; // (iou, inter, pred idx)
        for (pi, (_, pset)) in preds.iter().enumerate() {
            let inter = gset.intersection(pset).count();
            if inter == 0 {
                continue;
            }
            let union = gset.len() + pset.len() - inter;
            let iou = inter as f64 / union as f64;
            let better = match best {
                None => true,
                Some((biou, bi, _)) => iou > biou || (iou == biou && inter > bi),
            };
            if better {
                best = Some((iou, inter, pi));
            }
        }
        match best {
            Some((_, inter, pi)) => {
                c += inter;
                u += gset.len() + preds[pi].1.len() - inter;
                used[pi] = true;
            }
            None => u += gset.len(),
        }
    }
    for (pi, (_, pset)) in preds.iter().enumerate() {
        if !used[pi] {
            u += pset.len();
        }
    }
    c as f64 / u as f64
}

/// Scatters up to `max` rectangles with ids 1..; later rectangles overwrite
/// earlier ones, so some ids may end up partial or absent.
fn random_instances(rng: &mut ChaCha8Rng, h: usize, w: usize, max: usize) -> InstanceMask {
    let mut m = InstanceMask::filled(h, w, 0);
    let count = rng.random_range(0..=max);
    for id in 1..=count {
        let r0 = rng.random_range(0..h);
        let c0 = rng.random_range(0..w);
        let rh = rng.random_range(1..=4usize);
        let rw = rng.random_range(1..=4usize);
        for r in r0..(r0 + rh).min(h) {
            for c in c0..(c0 + rw).min(w) {
                m.set(r, c, id as u16);
            }
        }
    }
    m
}

#[test]
fn aji_matches_definition_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let mut done = 0;
    while done < 200 {
        let h = rng.random_range(10..=16usize);
        let w = rng.random_range(10..=16usize);
        let gt = random_instances(&mut rng, h, w, 4);
        if gt.data().iter().all(|&v| v == 0) {
            continue; // AJI is undefined without ground truth
        }
        let pred = random_instances(&mut rng, h, w, 4);

        let got = aji(&pred, &gt).unwrap();
        let want = aji_oracle(&pred, &gt);
        assert!(
            (got - want).abs() <= 1e-12,
            "trial {done}: aji {got} vs oracle {want}"
        );
        done += 1;
    }
}
