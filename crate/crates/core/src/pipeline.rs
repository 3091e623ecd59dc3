//! Scene-directory commands behind the CLI: synth, annotate, fit, eval and
//! validate. Each command is a plain function so examples and tests can run
//! it without spawning the binary.
//!
//! A scene directory looks like
//!
//! ```text
//! rig.json  topology.json  model.json  ground_truth.jsonl  [hands.jsonl]
//! detections/{view}.jsonl
//! masks/{view}/{frame:06}.pgm
//! out/
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confidence::{self, ConfidenceConfig, FrameDetections};
use crate::error::{Error, Result};
use crate::evaluation::{self, ActionLabel};
use crate::fitting::{self, FitConfig, FitRecord};
use crate::geometry::Rig;
use crate::io;
use crate::kinematics::{self, CapsuleModel};
use crate::silhouette::SilhouetteMask;
use crate::skeleton::{AnnotationRecord, Part, SkeletonSet3D, SkeletonTopology};
use crate::synth::{self, SynthConfig};
use crate::triangulation;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub confidence: ConfidenceConfig,
    pub fit: FitConfig,
    pub synth: Option<SynthConfig>,
    /// Output directory for annotate and fit; `out/` inside the scene when unset.
    pub out_dir: Option<PathBuf>,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            confidence: ConfidenceConfig::default(),
            fit: FitConfig::default(),
            synth: None,
            out_dir: None,
            workers: 1,
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config. Unreadable or malformed files are config errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be ≥ 1".into()));
        }
        self.confidence.validate()?;
        self.fit.validate()?;
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(())
    }

    pub fn synth_or_default(&self) -> SynthConfig {
        self.synth.clone().unwrap_or_default()
    }

    /// Runs `f` on a thread pool with `workers` threads.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", self.workers)))?;
        pool.install(f)
    }
}

/// Process exit code for an error: 2 for configuration problems, 3 for bad
/// or missing inputs, 4 for numeric failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::NonFiniteLoss { .. } | Error::DegenerateDepth { .. } => 4,
        _ => 3,
    }
}

/// File names inside a scene directory.
#[derive(Debug, Clone)]
pub struct SceneLayout {
    pub root: PathBuf,
}

impl SceneLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn rig(&self) -> PathBuf {
        self.root.join("rig.json")
    }

    pub fn topology(&self) -> PathBuf {
        self.root.join("topology.json")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }

    pub fn ground_truth(&self) -> PathBuf {
        self.root.join("ground_truth.jsonl")
    }

    /// Optional precomputed hand keypoints.
    pub fn hands(&self) -> PathBuf {
        self.root.join("hands.jsonl")
    }

    pub fn detections_dir(&self) -> PathBuf {
        self.root.join("detections")
    }

    pub fn detections(&self, view: &str) -> PathBuf {
        self.detections_dir().join(format!("{view}.jsonl"))
    }

    pub fn mask(&self, view: &str, frame: i64) -> PathBuf {
        self.root.join("masks").join(view).join(format!("{frame:06}.pgm"))
    }

    pub fn default_out(&self) -> PathBuf {
        self.root.join("out")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
    pub output_hashes: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, f64>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &str, cfg: &PipelineConfig) -> Self {
        Self {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config: serde_json::to_value(cfg).unwrap_or_default(),
            ..Default::default()
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.input_hashes
            .insert(path.display().to_string(), io::sha256_file(path)?);
        Ok(())
    }

    fn output(&mut self, stage: &str, path: &Path) -> Result<()> {
        self.output_hashes
            .insert(path.display().to_string(), io::sha256_file(path)?);
        self.outputs.insert(stage.to_string(), path.display().to_string());
        Ok(())
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.timings_ms
            .insert(stage.to_string(), start.elapsed().as_secs_f64() * 1e3);
        out
    }

    fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.manifest.json", self.command));
        io::write_json_atomic(&path, self)?;
        Ok(path)
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::input(path, format!("{what} not found")))
    }
}

fn load_topology(path: &Path) -> Result<Arc<SkeletonTopology>> {
    require(path, "topology")?;
    Ok(Arc::new(SkeletonTopology::load(path)?))
}

fn load_rig(path: &Path) -> Result<Rig> {
    require(path, "rig")?;
    Rig::load(path)
}

fn load_annotations(path: &Path, topology: &Arc<SkeletonTopology>) -> Result<Vec<SkeletonSet3D>> {
    require(path, "annotations")?;
    let records: Vec<AnnotationRecord> = io::read_jsonl(path)?;
    records
        .iter()
        .map(|r| SkeletonSet3D::from_record(topology.clone(), r).map_err(|e| Error::input(path, e.to_string())))
        .collect()
}

fn write_annotations(path: &Path, sets: &[SkeletonSet3D]) -> Result<()> {
    let records: Vec<AnnotationRecord> = sets.iter().map(|s| s.to_record()).collect();
    io::write_jsonl_atomic(path, &records)
}

/// Writes a complete synthetic scene into `dir` and returns the generated
/// ground truth.
pub fn cmd_synth(dir: &Path, cfg: &PipelineConfig) -> Result<synth::GroundTruthScene> {
    cfg.validate()?;
    let scfg = cfg.synth_or_default();
    let layout = SceneLayout::new(dir);
    let mut manifest = RunManifest::new("synth", cfg);
    let scene = manifest.time("generate", || synth::generate_scene(&scfg))?;
    let detections = manifest.time("observe", || synth::observe(&scene, &scfg))?;

    manifest.time("write", || {
        ensure_dir(dir)?;
        ensure_dir(&layout.detections_dir())?;
        scene.rig.save(&layout.rig())?;
        scene.model.topology().save(&layout.topology())?;
        scene.model.save(&layout.model(), "topology.json")?;
        for (view, frames) in scene.rig.views.iter().zip(&detections) {
            io::write_jsonl_atomic(&layout.detections(view.id()), frames)?;
        }
        for masks in &scene.masks_per_frame_view {
            for m in masks {
                let path = layout.mask(&m.view_id, m.frame);
                ensure_dir(path.parent().expect("mask path has a parent"))?;
                io::write_atomic(&path, &m.to_pgm())?;
            }
        }
        write_annotations(&layout.ground_truth(), &scene.joints_per_frame)
    })?;
    for (stage, path) in [
        ("rig", layout.rig()),
        ("topology", layout.topology()),
        ("model", layout.model()),
        ("ground_truth", layout.ground_truth()),
    ] {
        manifest.output(stage, &path)?;
    }
    for view in &scene.rig.views {
        manifest.output(&format!("detections/{}", view.id()), &layout.detections(view.id()))?;
    }
    manifest.write(dir)?;
    log::info!(
        "synth: {} views, {} frames written to {}",
        scene.rig.len(),
        scene.joints_per_frame.len(),
        dir.display()
    );
    Ok(scene)
}

/// Confidence processing, triangulation and body/hand merge for every frame
/// of a scene. Returns the annotated sets in frame order.
pub fn annotate_scene(scene: &Path, cfg: &PipelineConfig) -> Result<Vec<SkeletonSet3D>> {
    let layout = SceneLayout::new(scene);
    let rig = load_rig(&layout.rig())?;
    let topology = load_topology(&layout.topology())?;
    let raw = load_detections(&layout, &rig)?;
    let hands = load_hands(&layout, &topology)?;
    annotate_frames(&rig, &topology, &raw, hands.as_ref(), &cfg.confidence)
}

fn load_detections(layout: &SceneLayout, rig: &Rig) -> Result<Vec<Vec<FrameDetections>>> {
    rig.views
        .iter()
        .map(|view| {
            let path = layout.detections(view.id());
            require(&path, "detections")?;
            let frames = FrameDetections::load_jsonl(&path)?;
            if let Some(f) = frames.iter().find(|f| f.view_id != view.id()) {
                return Err(Error::input(
                    &path,
                    format!("frame {} is labelled with view {}", f.frame, f.view_id),
                ));
            }
            Ok(frames)
        })
        .collect()
}

fn load_hands(
    layout: &SceneLayout,
    topology: &Arc<SkeletonTopology>,
) -> Result<Option<BTreeMap<i64, SkeletonSet3D>>> {
    let path = layout.hands();
    if !path.exists() {
        return Ok(None);
    }
    let sets = load_annotations(&path, topology)?;
    Ok(Some(sets.into_iter().map(|s| (s.frame, s)).collect()))
}

/// The in-memory part of `annotate`: per-view confidence processing, then
/// per-frame triangulation (in parallel) and merge.
pub fn annotate_frames(
    rig: &Rig,
    topology: &Arc<SkeletonTopology>,
    detections: &[Vec<FrameDetections>],
    hands: Option<&BTreeMap<i64, SkeletonSet3D>>,
    cfg: &ConfidenceConfig,
) -> Result<Vec<SkeletonSet3D>> {
    let processed: Vec<Vec<FrameDetections>> = rig
        .views
        .par_iter()
        .zip(detections.par_iter())
        .map(|(view, frames)| confidence::process_view_sequence(frames, view, topology.len(), cfg))
        .collect::<Result<_>>()?;

    let frames: BTreeSet<i64> = processed.iter().flatten().map(|f| f.frame).collect();
    let frames: Vec<i64> = frames.into_iter().collect();
    let by_view: Vec<BTreeMap<i64, &FrameDetections>> = processed
        .iter()
        .map(|v| v.iter().map(|f| (f.frame, f)).collect())
        .collect();

    Ok(frames
        .par_iter()
        .map(|&frame| {
            let dets: Vec<FrameDetections> = by_view
                .iter()
                .filter_map(|v| v.get(&frame).map(|f| (*f).clone()))
                .collect();
            annotate_one(rig, topology, &dets, hands.and_then(|h| h.get(&frame)), frame)
        })
        .collect())
}

fn annotate_one(
    rig: &Rig,
    topology: &Arc<SkeletonTopology>,
    dets: &[FrameDetections],
    hands: Option<&SkeletonSet3D>,
    frame: i64,
) -> SkeletonSet3D {
    let attempt = || -> Result<SkeletonSet3D> {
        let full = triangulation::triangulate_frame(rig, dets, topology)?;
        let body = full.restricted_to(&[Part::Body]);
        let hand_set = match hands {
            Some(h) => h.restricted_to(&[Part::LeftHand, Part::RightHand]),
            None => full.restricted_to(&[Part::LeftHand, Part::RightHand]),
        };
        triangulation::merge_keypoints(&body, &hand_set)
    };
    attempt().unwrap_or_else(|e| {
        log::warn!("frame {frame}: {e}; writing an all-invalid frame");
        SkeletonSet3D::empty(topology.clone(), frame)
    })
}

/// `annotate`: writes `annotations.jsonl` and a run manifest into the output
/// directory and returns the annotation path.
pub fn cmd_annotate(scene: &Path, cfg: &PipelineConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let layout = SceneLayout::new(scene);
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| layout.default_out());
    let mut manifest = RunManifest::new("annotate", cfg);

    let rig = manifest.time("load", || load_rig(&layout.rig()))?;
    let topology = load_topology(&layout.topology())?;
    let raw = manifest.time("load", || load_detections(&layout, &rig))?;
    let hands = load_hands(&layout, &topology)?;
    manifest.input(&layout.rig())?;
    manifest.input(&layout.topology())?;
    for view in &rig.views {
        manifest.input(&layout.detections(view.id()))?;
    }
    if hands.is_some() {
        manifest.input(&layout.hands())?;
    }

    let sets = manifest.time("triangulate_and_merge", || {
        annotate_frames(&rig, &topology, &raw, hands.as_ref(), &cfg.confidence)
    })?;
    ensure_dir(&out_dir)?;
    let path = out_dir.join("annotations.jsonl");
    manifest.time("write", || write_annotations(&path, &sets))?;
    manifest.output("annotations", &path)?;
    manifest.write(&out_dir)?;
    let valid: usize = sets.iter().map(|s| s.joints.iter().filter(|j| j.valid).count()).sum();
    log::info!(
        "annotate: {} frames, {valid}/{} joints valid",
        sets.len(),
        sets.len() * topology.len()
    );
    Ok(path)
}

fn load_masks(layout: &SceneLayout, rig: &Rig, frames: &[i64]) -> Result<Vec<Vec<SilhouetteMask>>> {
    frames
        .par_iter()
        .map(|&frame| {
            rig.views
                .iter()
                .map(|view| {
                    let path = layout.mask(view.id(), frame);
                    if !path.is_file() {
                        return Err(Error::input(&path, "masks required by lambda_mask > 0 are missing"));
                    }
                    let mask = SilhouetteMask::load_pgm(&path, view.id(), frame)?;
                    if mask.width != view.width() as usize || mask.height != view.height() as usize {
                        return Err(Error::input(
                            &path,
                            format!(
                                "mask is {}×{}, view crop is {}×{}",
                                mask.width,
                                mask.height,
                                view.width(),
                                view.height()
                            ),
                        ));
                    }
                    Ok(mask)
                })
                .collect()
        })
        .collect()
}

/// Summary of a `fit` run.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub frames: usize,
    pub converged: usize,
    pub failed: usize,
    pub params_path: PathBuf,
    pub joints_path: PathBuf,
}

/// `fit`: fits the scene's capsule model to each annotated frame, writing
/// `fit.jsonl` (parameters) and `fit_joints.jsonl` (posed joints, in the
/// annotation format so `eval` can read them).
pub fn cmd_fit(scene: &Path, annotations: Option<&Path>, cfg: &PipelineConfig) -> Result<FitSummary> {
    cfg.validate()?;
    let layout = SceneLayout::new(scene);
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| layout.default_out());
    let ann_path = annotations
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_dir.join("annotations.jsonl"));
    let mut manifest = RunManifest::new("fit", cfg);

    let topology = load_topology(&layout.topology())?;
    require(&layout.model(), "model")?;
    let model = CapsuleModel::load(&layout.model(), topology.clone())?;
    let targets = load_annotations(&ann_path, &topology)?;
    if targets.windows(2).any(|w| w[0].frame >= w[1].frame) {
        return Err(Error::input(&ann_path, "frames are not strictly increasing"));
    }
    let frames: Vec<i64> = targets.iter().map(|t| t.frame).collect();
    let use_masks = cfg.fit.lambda_mask > 0.0 && !targets.is_empty();
    let (rig, masks) = if use_masks {
        let rig = load_rig(&layout.rig())?;
        let masks = manifest.time("load_masks", || load_masks(&layout, &rig, &frames))?;
        manifest.input(&layout.rig())?;
        (rig, masks)
    } else {
        (Rig::new(Vec::new()), Vec::new())
    };
    manifest.input(&layout.topology())?;
    manifest.input(&layout.model())?;
    manifest.input(&ann_path)?;

    let fits = manifest.time("fit", || fitting::fit_sequence(&model, &targets, &masks, &rig, &cfg.fit))?;

    let mut records = Vec::with_capacity(fits.len());
    let mut posed = Vec::with_capacity(fits.len());
    for fit in &fits {
        records.push(fit.to_record());
        let set = if fit.error.is_none() {
            let x = kinematics::forward_kinematics(&model, &fit.params)?;
            SkeletonSet3D::from_positions(topology.clone(), fit.frame, &x)?
        } else {
            SkeletonSet3D::empty(topology.clone(), fit.frame)
        };
        posed.push(set);
    }
    ensure_dir(&out_dir)?;
    let params_path = out_dir.join("fit.jsonl");
    let joints_path = out_dir.join("fit_joints.jsonl");
    manifest.time("write", || {
        io::write_jsonl_atomic(&params_path, &records)?;
        write_annotations(&joints_path, &posed)
    })?;
    manifest.output("fit", &params_path)?;
    manifest.output("fit_joints", &joints_path)?;
    manifest.write(&out_dir)?;

    let summary = FitSummary {
        frames: fits.len(),
        converged: fits.iter().filter(|f| f.converged).count(),
        failed: fits.iter().filter(|f| f.error.is_some()).count(),
        params_path,
        joints_path,
    };
    log::info!(
        "fit: {}/{} frames converged, {} failed",
        summary.converged, summary.frames, summary.failed
    );
    Ok(summary)
}

/// Reads a fit JSONL file back into parameter records.
pub fn load_fit(path: &Path) -> Result<Vec<FitRecord>> {
    require(path, "fit output")?;
    io::read_jsonl(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointSubset {
    All,
    Hand,
    Body,
}

impl JointSubset {
    pub fn parts(self) -> &'static [Part] {
        match self {
            JointSubset::All => &[Part::Body, Part::LeftHand, Part::RightHand],
            JointSubset::Hand => &[Part::LeftHand, Part::RightHand],
            JointSubset::Body => &[Part::Body],
        }
    }
}

impl FromStr for JointSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(JointSubset::All),
            "hand" => Ok(JointSubset::Hand),
            "body" => Ok(JointSubset::Body),
            other => Err(Error::Config(format!("unknown joint subset {other:?} (all, hand, body)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub frame: i64,
    pub valid_joints: usize,
    pub mpjpe: f64,
    /// NaN when the valid joints do not admit an alignment.
    pub pa_mpjpe: f64,
}

/// Per-frame MPJPE and PA-MPJPE over the joints of `subset` valid in both
/// prediction and ground truth. Frames are matched by index; a ground-truth
/// frame missing from the prediction is an error.
pub fn evaluate_sets(
    pred: &[SkeletonSet3D],
    gt: &[SkeletonSet3D],
    subset: JointSubset,
) -> Result<Vec<FrameMetrics>> {
    let by_frame: BTreeMap<i64, &SkeletonSet3D> = pred.iter().map(|p| (p.frame, p)).collect();
    gt.iter()
        .map(|g| {
            let p = by_frame
                .get(&g.frame)
                .ok_or_else(|| Error::DimensionMismatch(format!("prediction lacks frame {}", g.frame)))?;
            if p.joints.len() != g.joints.len() {
                return Err(Error::TopologyMismatch(format!("frame {}: joint counts differ", g.frame)));
            }
            let parts = subset.parts();
            let valid: Vec<bool> = (0..g.joints.len())
                .map(|i| p.joints[i].valid && g.joints[i].valid && parts.contains(&g.topology.part(i)))
                .collect();
            let (xp, xg) = (p.positions(), g.positions());
            let mpjpe = evaluation::mpjpe(&xp, &xg, &valid)?;
            let pa_mpjpe = match evaluation::pa_mpjpe(&xp, &xg, &valid) {
                Ok(v) => v,
                Err(Error::DegenerateConfiguration(_)) => f64::NAN,
                Err(e) => return Err(e),
            };
            Ok(FrameMetrics {
                frame: g.frame,
                valid_joints: valid.iter().filter(|v| **v).count(),
                mpjpe,
                pa_mpjpe,
            })
        })
        .collect()
}

fn fmt_metric(v: f64) -> String {
    if v.is_finite() {
        format!("{}", io::round_sig(v))
    } else {
        "nan".to_string()
    }
}

fn mean_finite(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn metrics_csv(rows: &[FrameMetrics]) -> String {
    let mut out = String::from("frame,valid_joints,mpjpe_mm,pa_mpjpe_mm\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.frame,
            r.valid_joints,
            fmt_metric(r.mpjpe),
            fmt_metric(r.pa_mpjpe)
        ));
    }
    out.push_str(&format!(
        "mean,{},{},{}\n",
        rows.iter().map(|r| r.valid_joints).sum::<usize>(),
        fmt_metric(mean_finite(rows.iter().map(|r| r.mpjpe))),
        fmt_metric(mean_finite(rows.iter().map(|r| r.pa_mpjpe)))
    ));
    out
}

/// Reads `truth,prediction` label pairs; a header line is allowed.
pub fn load_label_pairs(path: &Path) -> Result<Vec<(ActionLabel, ActionLabel)>> {
    let text = io::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("truth")) {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (truth, pred) = line
            .split_once(',')
            .ok_or_else(|| parse_err("expected truth,prediction".into()))?;
        let truth: ActionLabel = truth.trim().parse().map_err(|e: Error| parse_err(e.to_string()))?;
        let pred: ActionLabel = pred.trim().parse().map_err(|e: Error| parse_err(e.to_string()))?;
        pairs.push((truth, pred));
    }
    Ok(pairs)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub subset: JointSubset,
    /// Defaults to `topology.json` beside the ground-truth file.
    pub topology: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Defaults to the prediction's directory.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<FrameMetrics>,
    pub metrics_path: PathBuf,
    pub accuracy: Option<f64>,
}

/// `eval`: writes `metrics_{subset}.csv`, plus `confusion.csv` and
/// `confusion.svg` when a label file is given.
pub fn cmd_eval(pred: &Path, gt: &Path, opts: &EvalOptions, cfg: &PipelineConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let topo_path = opts
        .topology
        .clone()
        .unwrap_or_else(|| gt.parent().unwrap_or(Path::new(".")).join("topology.json"));
    let topology = load_topology(&topo_path)?;
    let mut manifest = RunManifest::new("eval", cfg);
    let pred_sets = load_annotations(pred, &topology)?;
    let gt_sets = load_annotations(gt, &topology)?;
    manifest.input(pred)?;
    manifest.input(gt)?;
    let rows = manifest.time("metrics", || evaluate_sets(&pred_sets, &gt_sets, opts.subset))?;

    let out_dir = opts
        .out_dir
        .clone()
        .unwrap_or_else(|| pred.parent().unwrap_or(Path::new(".")).to_path_buf());
    ensure_dir(&out_dir)?;
    let suffix = match opts.subset {
        JointSubset::All => "all",
        JointSubset::Hand => "hand",
        JointSubset::Body => "body",
    };
    let metrics_path = out_dir.join(format!("metrics_{suffix}.csv"));
    io::write_atomic(&metrics_path, metrics_csv(&rows).as_bytes())?;
    manifest.output("metrics", &metrics_path)?;

    let mut accuracy = None;
    if let Some(labels) = &opts.labels {
        let pairs = load_label_pairs(labels)?;
        manifest.input(labels)?;
        let (matrix, acc) = evaluation::confusion_and_accuracy(&pairs)?;
        let csv = out_dir.join("confusion.csv");
        let svg = out_dir.join("confusion.svg");
        io::write_atomic(&csv, matrix.to_csv().as_bytes())?;
        io::write_atomic(&svg, matrix.to_svg().as_bytes())?;
        manifest.output("confusion_csv", &csv)?;
        manifest.output("confusion_svg", &svg)?;
        accuracy = Some(acc);
    }
    manifest.write(&out_dir)?;
    Ok(EvalReport {
        rows,
        metrics_path,
        accuracy,
    })
}

/// `validate`: every problem found in a scene directory, or an empty list.
pub fn cmd_validate(scene: &Path) -> Vec<String> {
    let layout = SceneLayout::new(scene);
    let mut problems = Vec::new();
    let mut note = |e: Error| problems.push(e.to_string());

    let rig = load_rig(&layout.rig()).map_err(&mut note).ok();
    let topology = load_topology(&layout.topology()).map_err(&mut note).ok();
    if let Some(topology) = &topology {
        if layout.model().exists() {
            if let Err(e) = CapsuleModel::load(&layout.model(), topology.clone()) {
                note(e);
            }
        }
        if layout.ground_truth().exists() {
            if let Err(e) = load_annotations(&layout.ground_truth(), topology) {
                note(e);
            }
        }
    }
    if let (Some(rig), Some(topology)) = (&rig, &topology) {
        match load_detections(&layout, rig) {
            Ok(per_view) => {
                for (view, frames) in rig.views.iter().zip(&per_view) {
                    if let Err(e) = confidence::process_view_sequence(
                        frames,
                        view,
                        topology.len(),
                        &ConfidenceConfig::default(),
                    ) {
                        note(Error::input(layout.detections(view.id()), e.to_string()));
                    }
                    for f in frames {
                        let path = layout.mask(view.id(), f.frame);
                        if path.exists() {
                            match SilhouetteMask::load_pgm(&path, view.id(), f.frame) {
                                Ok(m) if m.width != view.width() as usize || m.height != view.height() as usize => {
                                    note(Error::input(&path, "mask size differs from the view crop"))
                                }
                                Ok(_) => {}
                                Err(e) => note(e),
                            }
                        }
                    }
                }
            }
            Err(e) => note(e),
        }
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PipelineConfig {
        PipelineConfig {
            synth: Some(SynthConfig {
                view_count: 3,
                sequence_length: 3,
                rng_seed: 5,
                ..SynthConfig::default().noiseless()
            }),
            confidence: ConfidenceConfig {
                median_window: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::input("a", "b")), 3);
        assert_eq!(
            exit_code(&Error::NonFiniteLoss {
                iteration: 1,
                detail: String::new()
            }),
            4
        );
    }

    #[test]
    fn unknown_config_fields_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"workers": 2, "bogus": 1}"#).unwrap();
        assert!(matches!(PipelineConfig::load(&path), Err(Error::Config(_))));
        fs::write(&path, r#"{"workers": 2, "fit": {"lambda_mask": 0}}"#).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.workers, 2);
        assert_eq!(cfg.fit.lambda_mask, 0.0);
        assert_eq!(cfg.fit.lambda_joint, 1.0);
    }

    #[test]
    fn synth_then_validate_then_annotate() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let scene = cmd_synth(dir.path(), &cfg).unwrap();
        assert_eq!(cmd_validate(dir.path()), Vec::<String>::new());
        let sets = annotate_scene(dir.path(), &cfg).unwrap();
        assert_eq!(sets.len(), 3);
        for (a, g) in sets.iter().zip(&scene.joints_per_frame) {
            for (ja, jg) in a.joints.iter().zip(&g.joints) {
                assert!(ja.valid);
                assert!((ja.position - jg.position).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn missing_rig_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_annotate(dir.path(), &tiny()).unwrap_err();
        assert_eq!(exit_code(&err), 3);
        assert!(err.to_string().contains("rig.json"));
    }

    #[test]
    fn labels_parse_with_header_and_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        fs::write(&path, "truth,prediction\npick_up,put_down\nscrew,screw\n").unwrap();
        let pairs = load_label_pairs(&path).unwrap();
        assert_eq!(pairs, vec![(ActionLabel::PickUp, ActionLabel::PutDown), (ActionLabel::Screw, ActionLabel::Screw)]);
        fs::write(&path, "pick_up,put_down\nhammer,screw\n").unwrap();
        match load_label_pairs(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn metrics_csv_has_mean_row() {
        let rows = vec![
            FrameMetrics { frame: 0, valid_joints: 3, mpjpe: 1.0, pa_mpjpe: 0.5 },
            FrameMetrics { frame: 1, valid_joints: 3, mpjpe: 3.0, pa_mpjpe: f64::NAN },
        ];
        let csv = metrics_csv(&rows);
        assert_eq!(
            csv,
            "frame,valid_joints,mpjpe_mm,pa_mpjpe_mm\n0,3,1,0.5\n1,3,3,nan\nmean,6,2,0.5\n"
        );
    }
}
