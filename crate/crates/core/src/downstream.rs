//! Downstream training and inference: the Voronoi partial loss (Eq. 8),
//! pseudo-mask detection training, local-extremum detection (Eq. 7), and
//! score-map instancing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{label_components, InstanceMask, LabelMap, Point, ScalarMap, IGNORE_LABEL};
use crate::nn::{Adam, ScoreNet};
use crate::tensor::{Graph, Scalar, TensorData, Var};

/// Connected components below this area are dropped during instancing.
pub const MIN_AREA: usize = 4;

/// Eq. 8 in-graph, so gradients flow into `pred` (shape `[1,1,H,W]`):
/// `L = −λ·mean_{vor-labeled} [y ln p + (1−y) ln(1−p)] − mean_{sg==0} ln(1−p)`.
/// Ignore pixels contribute to neither term; it is an error only when *both*
/// terms are empty (nothing to train on).
pub fn loss_partial_ce_graph<S: Scalar>(
    g: &mut Graph<S>,
    pred: Var,
    vor: &LabelMap,
    sg: &LabelMap,
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    let hw = vor.h() * vor.w();
    match g.shape(pred) {
        [1, 1, h, w] if h * w == hw && vor.same_size(sg) => {}
        other => {
            return Err(Error::shape_mismatch(
                "loss_partial_ce",
                format!("[1,1,{},{}] prediction with matching maps", vor.h(), vor.w()),
                format!("{other:?}"),
            ))
        }
    }
    let mut vor_targets = vec![S::zero(); hw];
    let mut vor_weights = vec![S::zero(); hw];
    let mut vor_count = 0usize;
    for (i, &v) in vor.data().iter().enumerate() {
        match v {
            0 => {
                vor_weights[i] = S::one();
                vor_count += 1;
            }
            1 => {
                vor_targets[i] = S::one();
                vor_weights[i] = S::one();
                vor_count += 1;
            }
            _ => {}
        }
    }
    let sg_targets = vec![S::zero(); hw];
    let mut sg_weights = vec![S::zero(); hw];
    let mut sg_count = 0usize;
    for (i, &v) in sg.data().iter().enumerate() {
        if v == 0 {
            sg_weights[i] = S::one();
            sg_count += 1;
        }
    }
    if vor_count == 0 && sg_count == 0 {
        return Err(Error::NoSupervision(
            "no Voronoi-labeled and no pseudo-mask-background pixels".to_string(),
        ));
    }
    let vor_term = g.masked_bce_mean(pred, &vor_targets, &vor_weights)?;
    let vor_term = g.scale(vor_term, S::from_f64(lambda));
    let sg_term = g.masked_bce_mean(pred, &sg_targets, &sg_weights)?;
    g.add(vor_term, sg_term)
}

/// Eq. 8 on a plain score map (no gradients); convenience for evaluation.
pub fn loss_partial_ce(pred: &ScalarMap, vor: &LabelMap, sg: &LabelMap, lambda: f64) -> Result<f64> {
    let mut g: Graph<f64> = Graph::new();
    let data: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let p = g.leaf(TensorData::new(vec![1, 1, pred.h(), pred.w()], data)?, false);
    let loss = loss_partial_ce_graph(&mut g, p, vor, sg, lambda)?;
    Ok(g.value(loss).data()[0])
}

pub struct TrainReport {
    /// Mean loss per epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
    pub warnings: Vec<String>,
}

fn check_training_inputs<S: Scalar>(
    images: &[TensorData<S>],
    masks_len: usize,
    what: &str,
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::EmptyInput(format!("{what} training set")));
    }
    if images.len() != masks_len {
        return Err(Error::shape_mismatch(
            what,
            format!("{} label maps", images.len()),
            format!("{masks_len}"),
        ));
    }
    Ok(())
}

/// One optimization step shared by both trainers: forward in train mode,
/// apply `loss_fn`, backprop, fold batch stats, Adam step.
fn train_step<S: Scalar>(
    net: &mut ScoreNet<S>,
    adam: &mut Adam,
    image: &TensorData<S>,
    loss_fn: impl FnOnce(&mut Graph<S>, Var) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g);
    let x = g.leaf(image.clone(), false);
    let mut stats = Vec::new();
    let pred = net.forward(&mut g, &bound, x, true, &mut stats)?;
    let loss = loss_fn(&mut g, pred)?;
    let loss_val = g.value(loss).data()[0].to_f64();
    g.backward(loss)?;
    let vars = net.bound_vars(&bound);
    let grads: Vec<TensorData<S>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("bound parameter gradient"))
        .collect();
    net.apply_bn_updates(&stats);
    adam.step(&mut net.params_mut(), &grads)?;
    Ok(loss_val)
}

/// Trains the segmentation net (1 class) with the Eq. 8 partial loss.
/// Deterministic per seed; images are visited in a seeded shuffled order
/// each epoch, one image per step.
pub fn train_segmentation<S: Scalar>(
    net: &mut ScoreNet<S>,
    images: &[TensorData<S>],
    vor: &[LabelMap],
    sg: &[LabelMap],
    lambda: f64,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainReport> {
    check_training_inputs(images, vor.len(), "segmentation")?;
    check_training_inputs(images, sg.len(), "segmentation")?;
    if net.classes() != 1 {
        return Err(Error::InvalidArgument(format!(
            "segmentation expects a 1-class net, got {}",
            net.classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(lr);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            loss_sum += train_step(net, &mut adam, &images[i], |g, pred| {
                loss_partial_ce_graph(g, pred, &vor[i], &sg[i], lambda)
            })
            .map_err(|e| e.in_stage(format!("train-seg image {i}")))?;
        }
        epoch_losses.push(loss_sum / images.len() as f64);
    }
    Ok(TrainReport {
        epoch_losses,
        warnings: Vec::new(),
    })
}

/// Per-class dense BCE targets/weights from a pseudo mask: channel `c` is
/// positive where `mask == c+1`, negative at other non-ignore labels, and
/// unweighted at ignore pixels.
fn detection_targets<S: Scalar>(mask: &LabelMap, classes: usize) -> (Vec<S>, Vec<S>, usize) {
    let hw = mask.h() * mask.w();
    let mut targets = vec![S::zero(); classes * hw];
    let mut weights = vec![S::zero(); classes * hw];
    let mut labeled = 0usize;
    for (i, &v) in mask.data().iter().enumerate() {
        if v == IGNORE_LABEL {
            continue;
        }
        labeled += 1;
        for c in 0..classes {
            weights[c * hw + i] = S::one();
            if v as usize == c + 1 {
                targets[c * hw + i] = S::one();
            }
        }
    }
    (targets, weights, labeled)
}

/// Trains the detection net on pseudo masks: dense per-class cross-entropy
/// over non-ignore pixels. A class that never appears positive anywhere
/// yields a warning (its head still trains on negatives); masks with no
/// supervision at all are an error.
pub fn train_detection<S: Scalar>(
    net: &mut ScoreNet<S>,
    images: &[TensorData<S>],
    masks: &[LabelMap],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainReport> {
    check_training_inputs(images, masks.len(), "detection")?;
    let classes = net.classes();
    let mut warnings = Vec::new();
    let mut seen = vec![false; classes + 1];
    let mut any_labeled = false;
    for m in masks {
        for &v in m.data() {
            if v != IGNORE_LABEL {
                any_labeled = true;
                if (v as usize) < seen.len() {
                    seen[v as usize] = true;
                }
            }
        }
    }
    if !any_labeled {
        return Err(Error::NoSupervision(
            "all detection masks are fully ignore".to_string(),
        ));
    }
    for c in 1..=classes {
        if !seen[c] {
            warnings.push(format!(
                "class {c} absent from every mask; its head trains on negatives only"
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(lr);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let (targets, weights, labeled) = detection_targets::<S>(&masks[i], classes);
            if labeled == 0 {
                continue;
            }
            loss_sum += train_step(net, &mut adam, &images[i], |g, pred| {
                g.masked_bce_mean(pred, &targets, &weights)
            })
            .map_err(|e| e.in_stage(format!("train-det image {i}")))?;
        }
        epoch_losses.push(loss_sum / images.len() as f64);
    }
    Ok(TrainReport {
        epoch_losses,
        warnings,
    })
}

/// Splits a `[1,C,H,W]` (or `[C,H,W]`) score tensor into per-class maps.
pub fn score_tensor_to_maps<S: Scalar>(t: &TensorData<S>) -> Result<Vec<ScalarMap>> {
    let (c, h, w) = match t.shape() {
        [1, c, h, w] => (*c, *h, *w),
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::shape_mismatch(
                "score tensor",
                "[1,C,H,W] or [C,H,W]",
                format!("{other:?}"),
            ))
        }
    };
    let hw = h * w;
    (0..c)
        .map(|ch| {
            ScalarMap::from_vec(
                h,
                w,
                t.data()[ch * hw..(ch + 1) * hw]
                    .iter()
                    .map(|&v| v.to_f64() as f32)
                    .collect(),
            )
        })
        .collect()
}

/// Eq. 7 local-extremum search over each class channel. A pixel is detected
/// when it strictly exceeds every other pixel of the square window of the
/// given radius (clipped at the borders) and reaches `min_score`; plateaus
/// yield nothing. With `tie_break` the strictness is relaxed to ≥ and the
/// lexicographically first pixel of a tied window wins.
pub fn local_extremum_detect(
    channels: &[ScalarMap],
    window_radius: usize,
    min_score: f32,
    tie_break: bool,
) -> Result<Vec<Point>> {
    if window_radius == 0 {
        return Err(Error::InvalidArgument(
            "window_radius must be >= 1".to_string(),
        ));
    }
    let mut points = Vec::new();
    for (ch, map) in channels.iter().enumerate() {
        let (h, w) = (map.h(), map.w());
        for r in 0..h {
            for c in 0..w {
                let p = map.at(r, c);
                if p < min_score {
                    continue;
                }
                let r0 = r.saturating_sub(window_radius);
                let r1 = (r + window_radius).min(h - 1);
                let c0 = c.saturating_sub(window_radius);
                let c1 = (c + window_radius).min(w - 1);
                let mut is_peak = true;
                'window: for i in r0..=r1 {
                    for j in c0..=c1 {
                        if (i, j) == (r, c) {
                            continue;
                        }
                        let q = map.at(i, j);
                        let beaten = if tie_break {
                            q > p || (q == p && (i, j) < (r, c))
                        } else {
                            q >= p
                        };
                        if beaten {
                            is_peak = false;
                            break 'window;
                        }
                    }
                }
                if is_peak {
                    points.push(Point {
                        row: r as f64,
                        col: c as f64,
                        class: (ch + 1) as u8,
                        score: p,
                    });
                }
            }
        }
    }
    Ok(points)
}

/// Binarizes a 1-class score map at `threshold` and labels 4-connected
/// components as instances; components under [`MIN_AREA`] pixels are dropped
/// and the survivors renumbered consecutively from 1.
pub fn segment_infer(score: &ScalarMap, threshold: f32) -> Result<InstanceMask> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0,1), got {threshold}"
        )));
    }
    let (h, w) = (score.h(), score.w());
    let (cc, n) = label_components(h, w, |i| score.data()[i] > threshold)?;
    let mut area = vec![0usize; n + 1];
    for &id in cc.data() {
        area[id as usize] += 1;
    }
    let mut renumber = vec![0u16; n + 1];
    let mut next = 0u16;
    for id in 1..=n {
        if area[id] >= MIN_AREA {
            next += 1;
            renumber[id] = next;
        }
    }
    let mut out = InstanceMask::filled(h, w, 0);
    for (o, &id) in out.data_mut().iter_mut().zip(cc.data()) {
        *o = renumber[id as usize];
    }
    Ok(out)
}
