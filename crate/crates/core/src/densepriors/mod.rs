//! Dense inference: full-resolution scores by shift-and-stitch, per-pixel
//! posteriors, the image-level prior, and the three smoothing priors
//! (superpixel majority vote, box objectness, segment objectness).

mod dense;
mod posteriors;
mod proposals;
mod superpixels;

pub use dense::{dense_scores, dense_scores_with, reflect_pad, DenseMode};
pub use posteriors::{apply_ilp, argmax_labels, image_prior, pixel_posteriors, ImagePrior, ProbMaps, WeightedMaps};
pub use proposals::{
    load_proposals, naive_proposals, objectness_map, parse_proposals, smooth_proposals, ObjectnessMap, Proposal,
    ProposalKind, ProposalSet, Region, ThresholdSet,
};
pub use superpixels::{felzenszwalb_segment, smooth_sppxl, SuperpixelPartition};
