//! Prior self-activation maps and the semantic clustering module:
//! Eq. 3–4 (gradient-weighted activation maps), Eq. 5 (fusion with the raw
//! image), Eq. 6 (K-Means pseudo masks), and Voronoi label derivation.

mod kmeans;
mod maps;
mod mask;
mod voronoi;

pub use kmeans::{kmeans, kmeans_restarts, KMeansResult};
pub use maps::{
    bilinear_upsample, compute_alpha, compute_psm, fuse, weighted_activation_map, FusedMap,
    PSMap, FUSED_DIM,
};
pub use mask::{clusters_to_mask, MaskTask, MiddleCluster, PseudoMaskOutcome};
pub use voronoi::{voronoi_labels, VoronoiLabelMap, VoronoiOutcome, RIDGE_GAP};
