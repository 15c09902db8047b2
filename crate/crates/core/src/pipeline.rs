//! The four operational commands: dataset generation, training,
//! evaluation and the cost benchmark. Every artifact records the exact run
//! configuration and the build version.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::autodiff::{checkpoint, Tape};
use crate::boxes::{read_jsonl, write_jsonl, BoxRecord, LesionBox};
use crate::config::{RunConfig, VERSION};
use crate::cost::{bench, default_grid, to_csv, CostReport, DEFAULT_BYTES_PER_SCALAR};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, Scan};
use crate::model::Detector;
use crate::optim::Optimizer;
use crate::synth::{derive_seed, generate_volume_with_id, read_volume, write_volume};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const GT_FILE: &str = "gt.jsonl";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (expected train, val or test)")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

// ---- generation -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeEntry {
    pub split: Split,
    pub id: String,
    pub seed: u64,
    /// Relative to the dataset directory.
    pub file: String,
    pub sha256: String,
    pub lesions: usize,
    pub distractors: usize,
    pub gt_boxes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub config: RunConfig,
    pub volumes: Vec<VolumeEntry>,
    /// SHA-256 of each split's ground-truth file, in split order.
    pub gt_sha256: Vec<(Split, String)>,
}

impl Manifest {
    pub fn read(data_dir: &Path) -> Result<Self> {
        let path = data_dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

/// Writes every split of the configured dataset under `out_dir`.
pub fn cmd_gen(cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut volumes = Vec::new();
    let mut gt_sha256 = Vec::new();
    for split in Split::ALL {
        let count = match split {
            Split::Train => cfg.data.train,
            Split::Val => cfg.data.val,
            Split::Test => cfg.data.test,
        };
        let dir = out_dir.join(split.name());
        create_dir(&dir)?;
        let mut records = Vec::new();
        for i in 0..count {
            let seed = derive_seed(cfg.seed, &[split.stream(), i as u64]);
            let id = format!("{split}-{i:04}");
            let v = generate_volume_with_id(seed, &cfg.data.synth, id.clone())?;
            let file = format!("{split}/{id}.vol");
            let path = out_dir.join(&file);
            write_volume(&path, &id, &v.voxels)?;
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            records.extend(v.gt_boxes.iter().map(|b| BoxRecord::from_box(&id, b, false)));
            volumes.push(VolumeEntry {
                split,
                id,
                seed,
                file,
                sha256: sha256_hex(&bytes),
                lesions: v.lesions.len(),
                distractors: v.distractors.len(),
                gt_boxes: v.gt_boxes.len(),
            });
        }
        let gt_path = dir.join(GT_FILE);
        write_jsonl(&gt_path, &records)?;
        let bytes = fs::read(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
        gt_sha256.push((split, sha256_hex(&bytes)));
        info!("{split}: {count} volumes, {} ground-truth boxes", records.len());
    }
    let manifest = Manifest {
        version: VERSION.to_string(),
        config: cfg.clone(),
        volumes,
        gt_sha256,
    };
    let path = out_dir.join(MANIFEST);
    write_file(&path, (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())?;
    Ok(manifest)
}

/// A volume with its ground truth, ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct LoadedVolume {
    pub id: String,
    pub voxels: Tensor,
    pub gt: Vec<LesionBox>,
}

impl LoadedVolume {
    pub fn gt_on(&self, slice: usize) -> Vec<LesionBox> {
        self.gt.iter().filter(|b| b.slice == slice).copied().collect()
    }
}

/// Loads one split, verifying every checksum recorded in the manifest.
pub fn load_split(data_dir: &Path, split: Split) -> Result<Vec<LoadedVolume>> {
    let manifest = Manifest::read(data_dir)?;
    let gt_path = data_dir.join(split.name()).join(GT_FILE);
    let gt_bytes = fs::read(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    if let Some((_, want)) = manifest.gt_sha256.iter().find(|(s, _)| *s == split) {
        if sha256_hex(&gt_bytes) != *want {
            return Err(Error::format(&gt_path, "checksum does not match the manifest"));
        }
    }
    let records = read_jsonl(&gt_path)?;
    let mut out = Vec::new();
    for e in manifest.volumes.iter().filter(|e| e.split == split) {
        let path = data_dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(Error::format(&path, "checksum does not match the manifest"));
        }
        let (id, voxels) = read_volume(&path)?;
        if id != e.id {
            return Err(Error::format(&path, format!("volume id `{id}` but manifest says `{}`", e.id)));
        }
        let gt = records.iter().filter(|r| r.volume_id == id).map(BoxRecord::to_box).collect();
        out.push(LoadedVolume { id, voxels, gt });
    }
    Ok(out)
}

// ---- training ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub volume: String,
    pub slice: usize,
    pub loss: f64,
    pub classification: f64,
    pub regression: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub final_epoch_mean_loss: f64,
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("checkpoint-epoch{epoch:03}.ckpt"))
}

fn log_header(cfg: &RunConfig) -> String {
    json!({ "version": VERSION, "config": cfg }).to_string()
}

/// Keeps the header and the records of epochs before `epoch`.
fn truncated_log(path: &Path, cfg: &RunConfig, epoch: usize) -> Result<String> {
    let mut out = log_header(cfg) + "\n";
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let rec: StepRecord = serde_json::from_str(line).map_err(|e| Error::format(path, e.to_string()))?;
            if rec.epoch < epoch {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Trains on in-memory volumes; `resume` continues from a checkpoint written
/// by an earlier call with the same configuration.
pub fn train(cfg: &RunConfig, volumes: &[LoadedVolume], run_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    if volumes.is_empty() {
        return Err(Error::Config("no training volumes".into()));
    }
    create_dir(run_dir)?;
    let mut det = Detector::new(cfg.model.clone(), derive_seed(cfg.seed, &[100]))?;
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &det.params);
    let mut start_epoch = 0;
    if let Some(path) = resume {
        let ck = checkpoint::read(path)?;
        checkpoint::load_into(&mut det.params, &ck)?;
        let meta = |k: &str| ck.meta.get(k).and_then(|v| v.as_u64());
        let (Some(epoch), Some(step)) = (meta("epoch"), meta("optimizer_step")) else {
            return Err(Error::format(path, "checkpoint lacks epoch / optimizer_step metadata"));
        };
        opt = Optimizer::restore(cfg.optimizer.clone(), &det.params, step, |n| ck.get(n).cloned())?;
        start_epoch = epoch as usize;
    }
    let log_path = run_dir.join(TRAIN_LOG);
    let mut log = truncated_log(&log_path, cfg, start_epoch)?;
    write_file(&run_dir.join("config.json"), cfg.to_json().as_bytes())?;

    let mut last = checkpoint_path(run_dir, start_epoch);
    let mut mean = f64::NAN;
    for epoch in start_epoch..cfg.train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[200, epoch as u64]));
        let mut order: Vec<usize> = (0..volumes.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for vi in order {
            let vol = &volumes[vi];
            let depth = vol.voxels.shape()[0];
            let mut slices = index::sample(&mut rng, depth, cfg.train.slices_per_volume).into_vec();
            slices.sort_unstable();
            for t in slices {
                let diverged = |detail: String| Error::Diverged {
                    step: opt.step + 1,
                    volume: vol.id.clone(),
                    slice: t,
                    detail,
                };
                let non_finite = |e: Error, pass: &str| match e {
                    Error::NonFinite { op } => diverged(format!("non-finite value from `{op}` in the {pass} pass")),
                    e => e,
                };
                let mut tape = Tape::new();
                let l = det
                    .loss(&mut tape, &vol.voxels, t, &vol.gt_on(t))
                    .map_err(|e| non_finite(e, "forward"))?;
                let v = |x| tape.value(x).data()[0];
                let (lt, lc, lr) = (v(l.total), v(l.classification), v(l.regression));
                if !(lt.is_finite() && lc.is_finite() && lr.is_finite()) {
                    return Err(diverged(format!("total = {lt}, classification = {lc}, regression = {lr}")));
                }
                tape.backward(l.total, &mut det.params).map_err(|e| non_finite(e, "backward"))?;
                if let Some(p) = det.params.iter().find(|p| p.grad.data().iter().any(|g| !g.is_finite())) {
                    return Err(diverged(format!("non-finite gradient in `{}` (loss {lt})", p.name)));
                }
                opt.update(&mut det.params)?;
                let rec = StepRecord {
                    epoch,
                    step: opt.step,
                    volume: vol.id.clone(),
                    slice: t,
                    loss: lt,
                    classification: lc,
                    regression: lr,
                };
                log.push_str(&serde_json::to_string(&rec)?);
                log.push('\n');
                total += lt;
                count += 1;
            }
        }
        mean = total / count as f64;
        info!("epoch {epoch}: mean loss {mean:.5} over {count} steps");
        last = checkpoint_path(run_dir, epoch + 1);
        let meta = json!({
            "version": VERSION,
            "config": cfg,
            "epoch": epoch + 1,
            "optimizer_step": opt.step,
        });
        let state = opt.state_entries(&det.params);
        let mut tensors = checkpoint::store_entries(&det.params);
        tensors.extend(state.iter().map(|(n, t)| (n.as_str(), *t)));
        checkpoint::write(&last, &tensors, &meta)?;
        write_file(&log_path, log.as_bytes())?;
    }
    write_file(&log_path, log.as_bytes())?;
    Ok(TrainSummary {
        checkpoint: last,
        steps: opt.step,
        final_epoch_mean_loss: mean,
    })
}

pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, run_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let volumes = load_split(data_dir, Split::Train)?;
    train(cfg, &volumes, run_dir, resume)
}

/// Per-step losses of a training log, header skipped.
pub fn read_train_log(run_dir: &Path) -> Result<Vec<StepRecord>> {
    let path = run_dir.join(TRAIN_LOG);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(&path, e.to_string())))
        .collect()
}

// ---- evaluation -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub version: String,
    pub config: RunConfig,
    pub checkpoint_sha256: String,
    pub split: Split,
    pub metrics: EvalReport,
    pub detections: usize,
}

/// Config embedded in a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<RunConfig> {
    let ck = checkpoint::read(path)?;
    let v = ck
        .meta
        .get("config")
        .cloned()
        .ok_or_else(|| Error::format(path, "checkpoint has no embedded config"))?;
    serde_json::from_value(v).map_err(|e| Error::format(path, format!("embedded config: {e}")))
}

pub fn load_detector(cfg: &RunConfig, path: &Path) -> Result<Detector> {
    let ck = checkpoint::read(path)?;
    let mut det = Detector::new(cfg.model.clone(), 0)?;
    checkpoint::load_into(&mut det.params, &ck)?;
    Ok(det)
}

/// Scores per-volume predictions against the volumes' ground truth.
pub fn score(volumes: &[LoadedVolume], preds: &[Vec<LesionBox>]) -> Result<EvalReport> {
    let scans: Vec<Scan> = volumes
        .iter()
        .zip(preds)
        .map(|(v, p)| Scan::new(p.clone(), v.gt.clone()))
        .collect();
    evaluate(&scans)
}

/// Runs the detector over every slice of `split` and writes
/// `eval-{split}.json` and `detections-{split}.jsonl` into `out_dir`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_file: &Path, data_dir: &Path, split: Split, out_dir: &Path) -> Result<EvalOutput> {
    cfg.validate()?;
    let det = load_detector(cfg, checkpoint_file)?;
    let volumes = load_split(data_dir, split)?;
    let mut preds = Vec::with_capacity(volumes.len());
    let mut records = Vec::new();
    for v in &volumes {
        let boxes = det.detect_volume(&v.voxels)?;
        records.extend(boxes.iter().map(|b| BoxRecord::from_box(&v.id, b, true)));
        preds.push(boxes);
    }
    let metrics = score(&volumes, &preds)?;
    let ck_bytes = fs::read(checkpoint_file).map_err(|e| Error::io(checkpoint_file, e))?;
    let out = EvalOutput {
        version: VERSION.to_string(),
        config: cfg.clone(),
        checkpoint_sha256: sha256_hex(&ck_bytes),
        split,
        metrics,
        detections: records.len(),
    };
    create_dir(out_dir)?;
    write_jsonl(&out_dir.join(format!("detections-{split}.jsonl")), &records)?;
    let path = out_dir.join(format!("eval-{split}.json"));
    write_file(&path, (serde_json::to_string_pretty(&out)? + "\n").as_bytes())?;
    info!(
        "{split}: mAP@0.5 {:.4}, average sensitivity {:.4}",
        out.metrics.map50, out.metrics.average_sensitivity
    );
    Ok(out)
}

// ---- cost benchmark ---------------------------------------------------

/// Writes `cost.csv` (provenance in `#` comment lines) and `cost.json`.
pub fn cmd_bench(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<CostReport>> {
    let rows = bench(&default_grid(), DEFAULT_BYTES_PER_SCALAR)?;
    create_dir(out_dir)?;
    let config_line = serde_json::to_string(cfg)?;
    let mut csv = format!("# version: {VERSION}\n# config: {config_line}\n").into_bytes();
    csv.write_all(to_csv(&rows)?.as_bytes()).map_err(|e| Error::io(out_dir, e))?;
    write_file(&out_dir.join("cost.csv"), &csv)?;
    let doc = json!({ "version": VERSION, "config": cfg, "rows": rows });
    write_file(&out_dir.join("cost.json"), (serde_json::to_string_pretty(&doc)? + "\n").as_bytes())?;
    Ok(rows)
}
