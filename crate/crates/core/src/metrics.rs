//! §3.1 evaluation formulas: pixel IoU/F1, AJI, object-level Dice,
//! point-matching precision/recall/F1, and MP/MN counting errors.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::{Grid, InstanceMask, LabelMap, Point, IGNORE_LABEL};

pub type BinaryMask = Grid<bool>;

pub fn instance_to_binary(m: &InstanceMask) -> BinaryMask {
    Grid::from_vec(m.h(), m.w(), m.data().iter().map(|&v| v != 0).collect()).unwrap()
}

pub fn label_to_binary(m: &LabelMap) -> BinaryMask {
    Grid::from_vec(
        m.h(),
        m.w(),
        m.data().iter().map(|&v| v != 0 && v != IGNORE_LABEL).collect(),
    )
    .unwrap()
}

/// IoU = TP/(TP+FP+FN) and F1 = 2TP/(2TP+FP+FN). Two empty masks compare as
/// a perfect match, (1,1), by convention.
pub fn pixel_iou_f1(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    if !pred.same_size(gt) {
        return Err(Error::shape_mismatch(
            "pixel_iou_f1",
            format!("{}x{}", gt.h(), gt.w()),
            format!("{}x{}", pred.h(), pred.w()),
        ));
    }
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fneg == 0 {
        return Ok((1.0, 1.0));
    }
    let iou = tp as f64 / (tp + fp + fneg) as f64;
    let f1 = 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
    Ok((iou, f1))
}

/// Instance inventory: ids ordered by first pixel (row-major) with areas,
/// plus pairwise overlap counts between the two masks. First-pixel order is
/// a property of the geometry, not the labels, which keeps every tie-break
/// below invariant under instance relabeling.
struct Overlaps {
    gt_ids: Vec<u16>,
    pred_ids: Vec<u16>,
    gt_area: HashMap<u16, usize>,
    pred_area: HashMap<u16, usize>,
    inter: HashMap<(u16, u16), usize>,
}

fn overlaps(pred: &InstanceMask, gt: &InstanceMask) -> Result<Overlaps> {
    if !pred.same_size(gt) {
        return Err(Error::shape_mismatch(
            "instance metrics",
            format!("{}x{}", gt.h(), gt.w()),
            format!("{}x{}", pred.h(), pred.w()),
        ));
    }
    let mut gt_area = HashMap::new();
    let mut pred_area = HashMap::new();
    let mut inter = HashMap::new();
    let mut gt_ids = Vec::new();
    let mut pred_ids = Vec::new();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g != 0 {
            gt_area.entry(g).or_insert_with(|| {
                gt_ids.push(g);
                0
            });
            *gt_area.get_mut(&g).unwrap() += 1;
        }
        if p != 0 {
            pred_area.entry(p).or_insert_with(|| {
                pred_ids.push(p);
                0
            });
            *pred_area.get_mut(&p).unwrap() += 1;
        }
        if p != 0 && g != 0 {
            *inter.entry((g, p)).or_insert(0) += 1;
        }
    }
    Ok(Overlaps {
        gt_ids,
        pred_ids,
        gt_area,
        pred_area,
        inter,
    })
}

/// Aggregated Jaccard Index. Every gt instance selects the pred instance of
/// maximal IoU (ties by larger intersection, then earlier first pixel) and
/// contributes that pair's intersection to C and union to U; gt instances
/// overlapping nothing add their area to U, as does every pred instance no
/// gt selected. Returns C/U.
pub fn aji(pred: &InstanceMask, gt: &InstanceMask) -> Result<f64> {
    let ov = overlaps(pred, gt)?;
    if ov.gt_ids.is_empty() {
        return Err(Error::UndefinedMetric(
            "AJI needs at least one ground-truth instance".to_string(),
        ));
    }
    let mut c = 0u64;
    let mut u = 0u64;
    let mut selected: HashMap<u16, bool> = HashMap::new();
    for &g in &ov.gt_ids {
        let ga = ov.gt_area[&g];
        let mut best: Option<(f64, usize, u16)> = None; // (iou, inter, pred id)
        for &p in &ov.pred_ids {
            if let Some(&i) = ov.inter.get(&(g, p)) {
                let iou = i as f64 / (ga + ov.pred_area[&p] - i) as f64;
                let better = match best {
                    None => true,
                    Some((biou, bi, _)) => iou > biou || (iou == biou && i > bi),
                };
                if better {
                    best = Some((iou, i, p));
                }
            }
        }
        match best {
            Some((_, i, p)) => {
                c += i as u64;
                u += (ga + ov.pred_area[&p] - i) as u64;
                selected.insert(p, true);
            }
            None => u += ga as u64,
        }
    }
    for &p in &ov.pred_ids {
        if !selected.contains_key(&p) {
            u += ov.pred_area[&p] as u64;
        }
    }
    Ok(c as f64 / u as f64)
}

/// Symmetric object-level Dice: the gt-side mean of each gt instance's Dice
/// with its maximal-overlap pred (overlap ties toward the smaller partner,
/// i.e. the higher Dice, then earlier first pixel; zero when nothing
/// overlaps), averaged with the mirrored pred-side mean. An empty pred side
/// scores 0.
pub fn dice_object(pred: &InstanceMask, gt: &InstanceMask) -> Result<f64> {
    let ov = overlaps(pred, gt)?;
    if ov.gt_ids.is_empty() {
        return Err(Error::UndefinedMetric(
            "object Dice needs at least one ground-truth instance".to_string(),
        ));
    }
    let side = |ids: &[u16],
                areas: &HashMap<u16, usize>,
                other_ids: &[u16],
                other_areas: &HashMap<u16, usize>,
                pair: &dyn Fn(u16, u16) -> (u16, u16)| {
        if ids.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for &a in ids {
            let mut best: Option<(usize, usize)> = None; // (inter, partner area)
            for &b in other_ids {
                if let Some(&i) = ov.inter.get(&pair(a, b)) {
                    let area = other_areas[&b];
                    let better = match best {
                        None => true,
                        Some((bi, barea)) => i > bi || (i == bi && area < barea),
                    };
                    if better {
                        best = Some((i, area));
                    }
                }
            }
            if let Some((i, barea)) = best {
                total += 2.0 * i as f64 / (areas[&a] + barea) as f64;
            }
        }
        total / ids.len() as f64
    };
    let gt_side = side(
        &ov.gt_ids,
        &ov.gt_area,
        &ov.pred_ids,
        &ov.pred_area,
        &|g, p| (g, p),
    );
    let pred_side = side(
        &ov.pred_ids,
        &ov.pred_area,
        &ov.gt_ids,
        &ov.gt_area,
        &|p, g| (g, p),
    );
    Ok(0.5 * (gt_side + pred_side))
}

#[derive(Clone, Debug, Default)]
pub struct MatchResult {
    /// (gt index, pred index, distance), in match order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

fn prf(tp: usize, n_pred: usize, n_gt: usize) -> (f64, f64, f64) {
    let p = if n_pred == 0 {
        1.0 // vacuous precision: nothing predicted, nothing wrong
    } else {
        tp as f64 / n_pred as f64
    };
    let r = if n_gt == 0 {
        1.0 // vacuous recall: nothing to find
    } else {
        tp as f64 / n_gt as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

fn finish_match(
    mut pairs: Vec<(usize, usize, f64)>,
    n_pred: usize,
    n_gt: usize,
) -> (MatchResult, f64, f64, f64) {
    pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut gt_used = vec![false; n_gt];
    let mut pred_used = vec![false; n_pred];
    for &(g, p, _) in &pairs {
        gt_used[g] = true;
        pred_used[p] = true;
    }
    let unmatched_gt = (0..n_gt).filter(|&i| !gt_used[i]).collect();
    let unmatched_pred = (0..n_pred).filter(|&i| !pred_used[i]).collect();
    let (p, r, f1) = prf(pairs.len(), n_pred, n_gt);
    (
        MatchResult {
            pairs,
            unmatched_gt,
            unmatched_pred,
        },
        p,
        r,
        f1,
    )
}

fn candidate_pairs(pred: &[Point], gt: &[Point], radius: f64) -> Vec<(f64, usize, usize)> {
    let mut cands = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            if p.class != g.class {
                continue;
            }
            let d = p.dist(g);
            if d <= radius {
                cands.push((d, gi, pi));
            }
        }
    }
    // deterministic greedy order: distance, then gt index, then pred index
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cands
}

/// One-to-one greedy matching by ascending distance among same-class pairs
/// within `radius` (ties broken by gt index then pred index), then P/R/F1
/// from the resulting TP/FP/FN. Conventions: P=1 with no predictions, R=1
/// with no ground truth (so two empty sets score P=R=F1=1).
pub fn match_points(
    pred: &[Point],
    gt: &[Point],
    radius: f64,
) -> Result<(MatchResult, f64, f64, f64)> {
    if radius <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "match radius must be positive, got {radius}"
        )));
    }
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut pairs = Vec::new();
    for (d, gi, pi) in candidate_pairs(pred, gt, radius) {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            pairs.push((gi, pi, d));
        }
    }
    Ok(finish_match(pairs, pred.len(), gt.len()))
}

/// Exhaustive optimal matcher for small sets: maximizes matched pairs, then
/// minimizes total distance for determinism. Exponential — rejected above
/// `max_points` per set. Used as the greedy matcher's oracle and behind the
/// CLI's `--optimal` flag.
pub fn match_points_optimal(
    pred: &[Point],
    gt: &[Point],
    radius: f64,
    max_points: usize,
) -> Result<(MatchResult, f64, f64, f64)> {
    if radius <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "match radius must be positive, got {radius}"
        )));
    }
    if pred.len() > max_points || gt.len() > max_points {
        return Err(Error::InvalidArgument(format!(
            "optimal matching capped at {max_points} points per set, got {} pred / {} gt",
            pred.len(),
            gt.len()
        )));
    }
    let mut per_gt: Vec<Vec<(usize, f64)>> = vec![Vec::new(); gt.len()];
    for (d, gi, pi) in candidate_pairs(pred, gt, radius) {
        per_gt[gi].push((pi, d));
    }
    struct Best {
        tp: usize,
        dist: f64,
        pairs: Vec<(usize, usize, f64)>,
    }
    fn search(
        gi: usize,
        per_gt: &[Vec<(usize, f64)>],
        pred_used: &mut Vec<bool>,
        current: &mut Vec<(usize, usize, f64)>,
        dist: f64,
        best: &mut Best,
    ) {
        if gi == per_gt.len() {
            let tp = current.len();
            if tp > best.tp || (tp == best.tp && dist < best.dist) {
                best.tp = tp;
                best.dist = dist;
                best.pairs = current.clone();
            }
            return;
        }
        // bound: even matching every remaining gt cannot beat the best
        if current.len() + (per_gt.len() - gi) < best.tp {
            return;
        }
        for &(pi, d) in &per_gt[gi] {
            if !pred_used[pi] {
                pred_used[pi] = true;
                current.push((gi, pi, d));
                search(gi + 1, per_gt, pred_used, current, dist + d, best);
                current.pop();
                pred_used[pi] = false;
            }
        }
        search(gi + 1, per_gt, pred_used, current, dist, best);
    }
    let mut best = Best {
        tp: 0,
        dist: f64::INFINITY,
        pairs: Vec::new(),
    };
    let mut pred_used = vec![false; pred.len()];
    let mut current = Vec::new();
    search(0, &per_gt, &mut pred_used, &mut current, 0.0, &mut best);
    Ok(finish_match(best.pairs, pred.len(), gt.len()))
}

/// MP/MN: mean absolute error of per-image positive (class 1) and negative
/// (class 2) point counts.
pub fn counting_errors(preds: &[Vec<Point>], gts: &[Vec<Point>]) -> Result<(f64, f64)> {
    if preds.len() != gts.len() {
        return Err(Error::shape_mismatch(
            "counting_errors",
            format!("{} images", gts.len()),
            format!("{}", preds.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("counting_errors image list".to_string()));
    }
    let count = |pts: &[Point], class: u8| pts.iter().filter(|p| p.class == class).count() as f64;
    let (mut mp, mut mn) = (0.0, 0.0);
    for (p, g) in preds.iter().zip(gts) {
        mp += (count(p, 1) - count(g, 1)).abs();
        mn += (count(p, 2) - count(g, 2)).abs();
    }
    let n = preds.len() as f64;
    Ok((mp / n, mn / n))
}
