//! The test-time pipeline: dense scores, posteriors, then the configured
//! priors applied in the fixed order base → ILP → smoothing.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::aggregation::{aggregate_maps, Aggregator, DEFAULT_LSE_R};
use crate::densepriors::{
    apply_ilp, argmax_labels, dense_scores_with, felzenszwalb_segment, image_prior, objectness_map,
    pixel_posteriors, smooth_proposals, smooth_sppxl, DenseMode, ImagePrior, ObjectnessMap, ProbMaps, ProposalKind,
    ProposalSet, ThresholdSet, WeightedMaps,
};
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::segnet::{forward, Mode, NetworkParams, NetworkSpec, ScoreMaps};
use crate::synthgen::normalize_image;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PriorSelection {
    None,
    Ilp,
    #[default]
    IlpSppxl,
    IlpBoxes,
    IlpSegments,
}

impl PriorSelection {
    pub const ALL: [PriorSelection; 5] = [
        PriorSelection::None,
        PriorSelection::Ilp,
        PriorSelection::IlpSppxl,
        PriorSelection::IlpBoxes,
        PriorSelection::IlpSegments,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PriorSelection::None => "none",
            PriorSelection::Ilp => "ilp",
            PriorSelection::IlpSppxl => "ilp+sppxl",
            PriorSelection::IlpBoxes => "ilp+bb",
            PriorSelection::IlpSegments => "ilp+seg",
        }
    }

    pub fn uses_ilp(self) -> bool {
        self != PriorSelection::None
    }

    /// The proposal kind this selection consumes, if any.
    pub fn proposal_kind(self) -> Option<ProposalKind> {
        match self {
            PriorSelection::IlpBoxes => Some(ProposalKind::Boxes),
            PriorSelection::IlpSegments => Some(ProposalKind::Masks),
            _ => None,
        }
    }
}

impl fmt::Display for PriorSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PriorSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PriorSelection::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown prior selection {s:?} (none, ilp, ilp+sppxl, ilp+bb, ilp+seg)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub prior: PriorSelection,
    /// Sharpness of the LSE used for the image-level prior.
    pub lse_r: f64,
    pub felzenszwalb_k: f64,
    pub felzenszwalb_min_size: usize,
    pub dense_mode: DenseMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            prior: PriorSelection::default(),
            lse_r: DEFAULT_LSE_R,
            felzenszwalb_k: 200.0,
            felzenszwalb_min_size: 20,
            dense_mode: DenseMode::ShiftAndStitch,
        }
    }
}

/// Intermediate results of one image, reusable across threshold settings.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub prior: PriorSelection,
    pub scores: ScoreMaps,
    pub probs: ProbMaps,
    pub image_prior: Option<ImagePrior>,
    pub weighted: Option<WeightedMaps>,
    pub objectness: Option<ObjectnessMap>,
    sppxl_mask: Option<LabelMask>,
}

impl Prepared {
    /// Final mask. Thresholds are needed only by the proposal priors.
    pub fn labels(&self, thresholds: Option<&ThresholdSet>) -> Result<LabelMask> {
        match self.prior {
            PriorSelection::None => argmax_labels(&self.probs.0),
            PriorSelection::Ilp => argmax_labels(&self.weighted_maps()?.0),
            PriorSelection::IlpSppxl => Ok(self.sppxl_mask.clone().expect("prepared with superpixels")),
            PriorSelection::IlpBoxes | PriorSelection::IlpSegments => {
                let t = thresholds.ok_or_else(|| Error::invalid("proposal priors need class thresholds"))?;
                let obj = self.objectness.as_ref().expect("prepared with objectness");
                smooth_proposals(self.weighted_maps()?, obj, t)
            }
        }
    }

    pub fn weighted_maps(&self) -> Result<&WeightedMaps> {
        self.weighted.as_ref().ok_or_else(|| Error::invalid("no image-level prior at this stage"))
    }
}

/// Runs everything up to the threshold-dependent step for an RGB image with
/// values in `[0, 1]`.
pub fn prepare(
    image: &Tensor,
    params: &NetworkParams,
    spec: &NetworkSpec,
    cfg: &InferenceConfig,
    proposals: Option<&ProposalSet>,
) -> Result<Prepared> {
    let scores = dense_scores_with(&normalize_image(image)?, params, spec, cfg.dense_mode)?;
    prepare_from_scores(image, scores, cfg, proposals)
}

/// The part of [`prepare`] after dense scoring, for callers that evaluate
/// several prior selections on the same scores.
pub fn prepare_from_scores(
    image: &Tensor,
    scores: ScoreMaps,
    cfg: &InferenceConfig,
    proposals: Option<&ProposalSet>,
) -> Result<Prepared> {
    let (_, h, w) = image.dims3()?;
    if (scores.height(), scores.width()) != (h, w) {
        return Err(Error::shape(format!(
            "scores are {}x{}, image is {h}x{w}",
            scores.height(),
            scores.width()
        )));
    }
    if let Some(kind) = cfg.prior.proposal_kind() {
        match proposals {
            None => return Err(Error::invalid(format!("prior {} needs a proposal set", cfg.prior))),
            Some(p) if p.kind != kind => {
                return Err(Error::invalid(format!("prior {} needs {kind:?} proposals, got {:?}", cfg.prior, p.kind)))
            }
            _ => {}
        }
    }
    let probs = pixel_posteriors(&scores)?;
    let (image_prior, weighted) = if cfg.prior.uses_ilp() {
        let prior = image_prior(&scores, cfg.lse_r)?;
        let weighted = apply_ilp(&probs, &prior)?;
        (Some(prior), Some(weighted))
    } else {
        (None, None)
    };
    let sppxl_mask = match (cfg.prior, &weighted) {
        (PriorSelection::IlpSppxl, Some(wm)) => {
            let partition = felzenszwalb_segment(image, cfg.felzenszwalb_k, cfg.felzenszwalb_min_size)?;
            Some(smooth_sppxl(&argmax_labels(&wm.0)?, &partition)?)
        }
        _ => None,
    };
    let objectness = match (cfg.prior.proposal_kind(), proposals) {
        (Some(_), Some(p)) => Some(objectness_map(p, h, w)?),
        _ => None,
    };
    Ok(Prepared { prior: cfg.prior, scores, probs, image_prior, weighted, objectness, sppxl_mask })
}

pub fn infer(
    image: &Tensor,
    params: &NetworkParams,
    spec: &NetworkSpec,
    cfg: &InferenceConfig,
    proposals: Option<&ProposalSet>,
    thresholds: Option<&ThresholdSet>,
) -> Result<LabelMask> {
    prepare(image, params, spec, cfg, proposals)?.labels(thresholds)
}

/// Image-level prediction: the class with the highest aggregated score over
/// the whole (normalized) image.
pub fn classify(image: &Tensor, params: &NetworkParams, spec: &NetworkSpec, aggregator: Aggregator) -> Result<usize> {
    let maps = forward(&normalize_image(image)?, params, spec, Mode::Eval)?;
    Ok(aggregate_maps(maps.tensor(), aggregator)?.argmax())
}

pub const PROB_MAPS_MAGIC: &[u8; 8] = b"MILPROB1";

/// Header of eight little-endian u64 words (magic, planes, height, width, four
/// zero words), then the planes as little-endian f64, plane-major.
pub fn write_prob_maps<W: Write>(mut out: W, probs: &ProbMaps) -> Result<()> {
    let (k, h, w) = probs.0.dims3()?;
    out.write_all(PROB_MAPS_MAGIC)?;
    for v in [k as u64, h as u64, w as u64, 0, 0, 0, 0] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in probs.0.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_prob_maps<R: Read>(mut input: R) -> Result<ProbMaps> {
    let mut header = [0u8; 64];
    input.read_exact(&mut header).map_err(|_| Error::format("truncated probability map header"))?;
    if &header[..8] != PROB_MAPS_MAGIC {
        return Err(Error::format("not a probability map file"));
    }
    let word = |i: usize| u64::from_le_bytes(header[i * 8..i * 8 + 8].try_into().unwrap()) as usize;
    let (k, h, w) = (word(1), word(2), word(3));
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != k * h * w * 8 {
        return Err(Error::format(format!("expected {} bytes of planes, found {}", k * h * w * 8, body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(ProbMaps(Tensor::from_vec(&[k, h, w], data)?))
}

pub fn save_prob_maps(path: &Path, probs: &ProbMaps) -> Result<()> {
    let mut buf = Vec::new();
    write_prob_maps(&mut buf, probs)?;
    std::fs::write(path, buf)?;
    Ok(())
}
