//! Cluster-to-pseudo-mask rules (§2.2): which of the three K-Means piles is
//! foreground, background, or — for detection — which stain class.

use crate::error::{Error, Result};
use crate::grid::{LabelMap, IGNORE_LABEL};
use crate::psm::maps::{FusedMap, FUSED_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskTask {
    Segmentation,
    /// Two-class detection (BCData-style positive/negative cells).
    MulticlassDetection,
}

impl MaskTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "seg" => Ok(MaskTask::Segmentation),
            "det" => Ok(MaskTask::MulticlassDetection),
            other => Err(Error::InvalidArgument(format!(
                "unknown task `{other}` (expected seg|det)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MaskTask::Segmentation => "seg",
            MaskTask::MulticlassDetection => "det",
        }
    }
}

/// What to do with the middle-PSM cluster in segmentation. The paper never
/// says; background is the default, ignore is exposed as a config choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MiddleCluster {
    #[default]
    Background,
    Ignore,
}

impl MiddleCluster {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "background" => Ok(MiddleCluster::Background),
            "ignore" => Ok(MiddleCluster::Ignore),
            other => Err(Error::InvalidArgument(format!(
                "unknown middle-cluster policy `{other}` (expected background|ignore)"
            ))),
        }
    }
}

pub struct PseudoMaskOutcome {
    pub mask: LabelMap,
    pub warnings: Vec<String>,
}

/// Converts a K=3 cluster assignment over all pixels into a pseudo mask.
///
/// Segmentation: the cluster with the highest mean PSM becomes foreground
/// (1); the rest background (0) — or the middle cluster becomes ignore under
/// [`MiddleCluster::Ignore`]. Detection: the lowest-mean-PSM cluster becomes
/// background; the remaining two become classes 1 and 2 ordered by mean
/// (red − blue) intensity, class 1 (positive) being the browner/redder one.
/// The output is invariant under permutations of the cluster indices.
pub fn clusters_to_mask(
    assignments: &[usize],
    fused: &FusedMap,
    task: MaskTask,
    middle: MiddleCluster,
) -> Result<PseudoMaskOutcome> {
    let (h, w) = (fused.h(), fused.w());
    let hw = h * w;
    if assignments.len() != hw {
        return Err(Error::shape_mismatch(
            "clusters_to_mask",
            format!("{hw} assignments"),
            format!("{}", assignments.len()),
        ));
    }
    const K: usize = 3;
    if let Some(&bad) = assignments.iter().find(|&&a| a >= K) {
        return Err(Error::InvalidArgument(format!(
            "cluster index {bad} out of range for K={K}"
        )));
    }
    let mut warnings = Vec::new();
    let features = fused.features();
    let mut psm_sum = [0f64; K];
    let mut rb_sum = [0f64; K];
    let mut count = [0usize; K];
    for (i, &a) in assignments.iter().enumerate() {
        let f = &features[i * FUSED_DIM..(i + 1) * FUSED_DIM];
        psm_sum[a] += f[0];
        rb_sum[a] += f[1] - f[3];
        count[a] += 1;
    }
    let nonempty: Vec<usize> = (0..K).filter(|&c| count[c] > 0).collect();
    if nonempty.len() < 2 {
        warnings.push(format!(
            "degenerate clustering: {} nonempty cluster(s); emitting all-background mask",
            nonempty.len()
        ));
        return Ok(PseudoMaskOutcome {
            mask: LabelMap::filled(h, w, 0),
            warnings,
        });
    }
    let psm_mean = |c: usize| psm_sum[c] / count[c] as f64;

    let mut labels = vec![0u8; K];
    match task {
        MaskTask::Segmentation => {
            // highest mean PSM → foreground; ties on the lower cluster index
            let fg = *nonempty
                .iter()
                .max_by(|&&a, &&b| {
                    psm_mean(a)
                        .partial_cmp(&psm_mean(b))
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .unwrap();
            labels[fg] = 1;
            if middle == MiddleCluster::Ignore && nonempty.len() == 3 {
                let mid = *nonempty
                    .iter()
                    .filter(|&&c| c != fg)
                    .max_by(|&&a, &&b| psm_mean(a).partial_cmp(&psm_mean(b)).unwrap().then(b.cmp(&a)))
                    .unwrap();
                labels[mid] = IGNORE_LABEL;
            }
        }
        MaskTask::MulticlassDetection => {
            if nonempty.len() < 3 {
                warnings.push(
                    "detection expects 3 nonempty clusters; merging into background + one class"
                        .to_string(),
                );
            }
            let bg = *nonempty
                .iter()
                .min_by(|&&a, &&b| {
                    psm_mean(a)
                        .partial_cmp(&psm_mean(b))
                        .unwrap()
                        .then(a.cmp(&b))
                })
                .unwrap();
            let rest: Vec<usize> = nonempty.iter().copied().filter(|&c| c != bg).collect();
            match rest.len() {
                1 => labels[rest[0]] = 1,
                2 => {
                    let rb = |c: usize| rb_sum[c] / count[c] as f64;
                    let (a, b) = (rest[0], rest[1]);
                    if rb(a) == rb(b) {
                        warnings.push(
                            "class ordering tie on (red − blue); falling back to cluster index order"
                                .to_string(),
                        );
                    }
                    // higher (red − blue) → class 1 (positive / brown stain)
                    let (pos, neg) = if rb(a) > rb(b) || (rb(a) == rb(b) && a < b) {
                        (a, b)
                    } else {
                        (b, a)
                    };
                    labels[pos] = 1;
                    labels[neg] = 2;
                }
                _ => unreachable!("nonempty >= 2 checked above"),
            }
        }
    }

    let mut mask = LabelMap::filled(h, w, 0);
    for (i, &a) in assignments.iter().enumerate() {
        mask.data_mut()[i] = labels[a];
    }
    Ok(PseudoMaskOutcome { mask, warnings })
}
