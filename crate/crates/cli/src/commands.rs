//! One function per subcommand. Paths in the config are resolved against the
//! output directory unless absolute.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use milseg::densepriors::{load_proposals, naive_proposals, ProposalSet, ThresholdSet};
use milseg::evalmetrics::{grid_search_thresholds, ClassConfusion, GridItem};
use milseg::inference::{prepare, save_prob_maps, PriorSelection};
use milseg::pnm;
use milseg::segnet::{build_network_scaled, load_checkpoint, save_checkpoint, NetworkParams, NetworkSpec};
use milseg::training::train as train_network;
use milseg::verify::{run_all, SuiteOptions, SuiteResult, TOLERANCE};

use crate::dataset::{self, VAL_INDEX_OFFSET};
use crate::report::{self, LOSS_LOG_HEADER};
use crate::{CliError, RunConfig};

fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes the parsed configuration next to the run outputs.
pub fn echo_config(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let path = out.join("config.txt");
    fs::write(&path, cfg.to_text()).map_err(|e| CliError::io(&path, e))
}

/// Writes `<out>/train` and `<out>/val` in the dataset layout.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let classes = cfg.foreground_classes + 1;
    if cfg.image_size < milseg::synthgen::MIN_IMAGE_SIZE || classes > 255 {
        return Err(CliError::Usage(format!(
            "image_size must be at least {} and foreground_classes at most 254",
            milseg::synthgen::MIN_IMAGE_SIZE
        )));
    }
    create_dir(out)?;
    let train = dataset::synthesize(classes, cfg.train_per_class, cfg.image_size, cfg.data_seed, 0);
    dataset::write_dataset(&out.join("train"), &train, cfg.data_seed, "train")?;
    let val = dataset::synthesize(classes, cfg.val_per_class, cfg.image_size, cfg.data_seed, VAL_INDEX_OFFSET);
    dataset::write_dataset(&out.join("val"), &val, cfg.data_seed, "val")?;
    echo_config(cfg, out)
}

#[derive(Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub examples_seen: u64,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainSummary, CliError> {
    let samples = dataset::read_dataset(data)?;
    if samples.is_empty() {
        return Err(CliError::Io(format!("dataset {} is empty", data.display())));
    }
    if let Some(bad) = samples.iter().find(|s| s.label > cfg.foreground_classes) {
        return Err(CliError::Usage(format!(
            "dataset has label {} but the config has {} foreground classes",
            bad.label, cfg.foreground_classes
        )));
    }
    let spec = cfg.network_spec()?;
    let training = cfg.training_config()?;
    let mut params = build_network_scaled(&spec, cfg.init_gain)?;
    create_dir(out)?;
    echo_config(cfg, out)?;

    let log_path = resolve(out, &cfg.loss_log);
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    writeln!(log, "{LOSS_LOG_HEADER}").map_err(|e| CliError::io(&log_path, e))?;
    let mut write_err = None;
    let mut final_loss = None;
    let labeled: Vec<_> = samples.iter().map(|s| s.labeled()).collect();
    let result = train_network(&labeled, &spec, &mut params, &training, |r| {
        final_loss = Some(r.mean_loss);
        if write_err.is_none() {
            write_err = writeln!(log, "{}", report::loss_line(r)).err();
        }
    });
    if let Some(e) = write_err {
        return Err(CliError::io(&log_path, e));
    }
    // On divergence the parameters still hold the last good step.
    let checkpoint = resolve(out, &cfg.checkpoint);
    save_checkpoint(&checkpoint, &spec, &params)?;
    let state = result.map_err(|e| match e {
        milseg::Error::NonFinite(m) => CliError::Verification(format!(
            "{m}; last good parameters saved to {}",
            checkpoint.display()
        )),
        other => other.into(),
    })?;
    Ok(TrainSummary { steps: state.steps, examples_seen: state.examples_seen, final_loss, checkpoint })
}

fn same_architecture(a: &NetworkSpec, b: &NetworkSpec) -> bool {
    let layout = |s: &NetworkSpec| -> Vec<(usize, usize, usize, Option<usize>)> {
        s.stem
            .iter()
            .map(|st| (st.conv.in_channels, st.conv.out_channels, st.conv.kernel, st.pool))
            .chain(s.head.iter().map(|c| (c.in_channels, c.out_channels, c.kernel, None)))
            .collect()
    };
    a.foreground_classes == b.foreground_classes && layout(a) == layout(b)
}

/// Loads a checkpoint and checks it against the configured architecture.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(NetworkSpec, NetworkParams), CliError> {
    let (spec, params) = load_checkpoint(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if !same_architecture(&spec, &cfg.network_spec()?) {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not match the configured network ({} foreground classes in checkpoint)",
            path.display(),
            spec.foreground_classes
        )));
    }
    Ok((spec, params))
}

/// Where proposals come from when a proposal prior is selected.
#[derive(Clone, Debug)]
pub enum ProposalSource {
    None,
    /// One file for every image, or a directory holding `<stem>.txt` per image.
    Path(PathBuf),
    Naive(usize),
}

impl ProposalSource {
    fn for_image(&self, image: &milseg::Tensor, stem: &str) -> Result<Option<ProposalSet>, CliError> {
        match self {
            ProposalSource::None => Ok(None),
            ProposalSource::Naive(n) => Ok(Some(naive_proposals(image, *n)?)),
            ProposalSource::Path(p) if p.is_dir() => Ok(Some(load_proposals(&p.join(format!("{stem}.txt")))?)),
            ProposalSource::Path(p) => Ok(Some(load_proposals(p)?)),
        }
    }
}

/// `.ppm` files of a directory in name order, or the single given file.
pub fn list_images(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !input.is_dir() {
        return if input.is_file() {
            Ok(vec![input.to_path_buf()])
        } else {
            Err(CliError::Io(format!("{} does not exist", input.display())))
        };
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| CliError::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    Ok(files)
}

fn stem_of(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

pub struct InferOptions<'a> {
    pub checkpoint: &'a Path,
    pub inputs: &'a [PathBuf],
    pub proposals: ProposalSource,
    pub thresholds: ThresholdSet,
    pub dump_probs: bool,
}

/// Writes `<out>/<stem>.pgm` per input image (and `<stem>.probs` on request).
pub fn infer(cfg: &RunConfig, opts: &InferOptions<'_>, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let (spec, params) = load_model(cfg, opts.checkpoint)?;
    let inference = cfg.inference_config()?;
    if inference.prior.proposal_kind().is_some() && matches!(opts.proposals, ProposalSource::None) {
        return Err(CliError::Usage(format!(
            "prior {} needs proposals: pass --proposals or --naive-proposals",
            inference.prior
        )));
    }
    let mut images = Vec::new();
    for input in opts.inputs {
        images.extend(list_images(input)?);
    }
    if images.is_empty() {
        return Err(CliError::Io("no input images".into()));
    }
    create_dir(out)?;
    let mut written = Vec::new();
    for path in images {
        let image = pnm::read_image(&path)?;
        let stem = stem_of(&path);
        let proposals = if inference.prior.proposal_kind().is_some() {
            opts.proposals.for_image(&image, &stem)?
        } else {
            None
        };
        let prepared = prepare(&image, &params, &spec, &inference, proposals.as_ref())?;
        let mask = prepared.labels(Some(&opts.thresholds))?;
        let mask_path = out.join(format!("{stem}.pgm"));
        pnm::write_mask(&mask_path, &mask)?;
        if opts.dump_probs {
            save_prob_maps(&out.join(format!("{stem}.probs")), &prepared.probs)?;
        }
        written.push(mask_path);
    }
    Ok(written)
}

fn mask_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let dir = if dir.join("masks").is_dir() { dir.join("masks") } else { dir.to_path_buf() };
    let mut files: Vec<(String, PathBuf)> = fs::read_dir(&dir)
        .map_err(|e| CliError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .map(|p| (stem_of(&p), p))
        .collect();
    files.sort();
    Ok(files)
}

/// Pairs prediction and ground-truth masks by file name and scores them.
pub fn eval(
    cfg: &RunConfig,
    pred: &Path,
    gt: &Path,
    thresholds: Option<&ThresholdSet>,
    metrics_path: &Path,
) -> Result<serde_json::Value, CliError> {
    let preds = mask_files(pred)?;
    let gts = mask_files(gt)?;
    let pred_names: Vec<&String> = preds.iter().map(|(n, _)| n).collect();
    let gt_names: Vec<&String> = gts.iter().map(|(n, _)| n).collect();
    if pred_names != gt_names {
        let missing_pred: Vec<&str> = gt_names.iter().filter(|n| !pred_names.contains(n)).map(|s| s.as_str()).collect();
        let missing_gt: Vec<&str> = pred_names.iter().filter(|n| !gt_names.contains(n)).map(|s| s.as_str()).collect();
        return Err(CliError::Io(format!(
            "unpaired masks: no prediction for [{}], no ground truth for [{}]",
            missing_pred.join(", "),
            missing_gt.join(", ")
        )));
    }
    if preds.is_empty() {
        return Err(CliError::Io("no masks to evaluate".into()));
    }
    let read = |files: &[(String, PathBuf)]| -> Result<Vec<_>, CliError> {
        files.iter().map(|(_, p)| Ok(pnm::read_mask(p)?)).collect()
    };
    let (p, g) = (read(&preds)?, read(&gts)?);
    let classes = p.iter().chain(&g).map(|m| m.max_label() as usize + 1).max().unwrap_or(1).max(cfg.foreground_classes + 1);
    let conf = ClassConfusion::from_masks(&p, &g, classes)?;
    let value = report::metrics_json(&conf, thresholds)?;
    report::write_json(metrics_path, &value)?;
    Ok(value)
}

/// Searches per-class thresholds for the configured proposal prior on a
/// validation split and writes `<out>/thresholds.json`.
pub fn gridsearch(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    proposals: &ProposalSource,
    out: &Path,
) -> Result<ThresholdSet, CliError> {
    let (spec, params) = load_model(cfg, checkpoint)?;
    let mut inference = cfg.inference_config()?;
    if inference.prior.proposal_kind().is_none() {
        inference.prior = PriorSelection::IlpBoxes;
    }
    let samples = dataset::read_dataset(data)?;
    if samples.is_empty() {
        return Err(CliError::Io(format!("validation set {} is empty", data.display())));
    }
    let source = match proposals {
        ProposalSource::None => ProposalSource::Naive(cfg.naive_proposals.max(1)),
        other => other.clone(),
    };
    let mut prepared = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let set = source.for_image(&s.image, &format!("{i:05}"))?;
        prepared.push(prepare(&s.image, &params, &spec, &inference, set.as_ref())?);
    }
    let items: Vec<GridItem<'_>> = prepared
        .iter()
        .zip(&samples)
        .map(|(p, s)| GridItem {
            weighted: p.weighted.as_ref().expect("ilp stage present"),
            objectness: p.objectness.as_ref().expect("proposal stage present"),
            ground_truth: s.ground_truth(),
        })
        .collect();
    let thresholds = grid_search_thresholds(&items, &cfg.threshold_grid)?;
    create_dir(out)?;
    report::write_thresholds(&out.join("thresholds.json"), &thresholds)?;
    Ok(thresholds)
}

/// Runs every finite-difference suite; fails if any exceeds the tolerance.
pub fn gradcheck(cfg: &RunConfig) -> Result<Vec<SuiteResult>, CliError> {
    let opts = SuiteOptions { seed: cfg.seed, instances: cfg.gradcheck_instances.max(1), ..Default::default() };
    let results = run_all(&opts)?;
    Ok(results)
}

pub fn gradcheck_failures(results: &[SuiteResult]) -> Vec<&SuiteResult> {
    results.iter().filter(|r| !r.passed(TOLERANCE)).collect()
}
