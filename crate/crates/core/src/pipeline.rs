//! Map worker, prediction worker and fuser wired into one stream runner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, TrySendError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusedSceneGraph, FusionError, GraphDocument};
use crate::neighbor_graph::{GraphConfig, NeighborGraph, RecomputePlan, SubgraphSnapshot};
use crate::scene_map::{FrameUpdate, MapError, SceneMap, SegmentId};
use crate::spn::{IncrementalPredictor, Prediction, RecomputeStats, Spn, SpnError};

/// Environment variable naming a TOML configuration file.
pub const CONFIG_ENV: &str = "SGF_CONFIG";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Spn(#[from] SpnError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("prediction worker stopped unexpectedly")]
    Worker,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerMode {
    /// Predictions run inline after every frame.
    #[default]
    Sync,
    /// Predictions run on a second thread behind a bounded queue.
    Async,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub graph: GraphConfig,
    pub mode: WorkerMode,
    /// Snapshots (and predictions) that may wait in each queue.
    pub queue_capacity: usize,
    /// Reuse cached features across passes.
    pub use_cache: bool,
    /// Predicate index of `same part`.
    pub same_part: usize,
    /// Seed of the per-segment point sampling.
    pub seed: u64,
    pub graph_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            graph: GraphConfig::desk(),
            mode: WorkerMode::Sync,
            queue_capacity: 4,
            use_cache: true,
            same_part: 1,
            seed: 0,
            graph_path: None,
            report_path: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// The file named by [`CONFIG_ENV`], or the defaults when it is unset.
    pub fn from_env() -> Result<Self, PipelineError> {
        match std::env::var_os(CONFIG_ENV) {
            Some(path) => Self::load(Path::new(&path)),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let g = &self.graph;
        let bad = |m: &str| Err(PipelineError::Config(m.to_owned()));
        if !(g.proximity_threshold.is_finite() && g.proximity_threshold >= 0.0) {
            return bad("proximity_threshold must be finite and non-negative");
        }
        if !(g.resize_ratio.is_finite() && g.resize_ratio >= 0.0) {
            return bad("resize_ratio must be finite and non-negative");
        }
        if g.stale_frames == 0 {
            return bad("stale_frames must be positive");
        }
        if g.min_segment_points == 0 || g.sample_points == 0 {
            return bad("min_segment_points and sample_points must be positive");
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be positive");
        }
        Ok(())
    }

    fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            sample_seed: self.seed,
            ..self.graph.clone()
        }
    }
}

/// Mean and 95th percentile of one stage, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub samples: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

impl StageLatency {
    pub fn from_samples(samples: &[Duration]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let rank = ((0.95 * ms.len() as f64).ceil() as usize).max(1);
        Self {
            samples: ms.len(),
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p95_ms: ms[rank - 1],
        }
    }
}

/// Feature computations summed over all prediction passes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecomputeTotals {
    pub passes: usize,
    /// Node features computed per layer, encoder first.
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
    pub node_classifications: usize,
    pub edge_classifications: usize,
    /// Passes whose counted computations differed from their plan.
    pub plan_mismatches: usize,
}

impl RecomputeTotals {
    fn record(&mut self, plan: &RecomputePlan, stats: &RecomputeStats) {
        self.passes += 1;
        add_into(&mut self.nodes, &stats.nodes);
        add_into(&mut self.edges, &stats.edges);
        self.node_classifications += stats.node_classifications;
        self.edge_classifications += stats.edge_classifications;
        self.plan_mismatches += usize::from(!stats.matches_plan(plan));
    }

    /// Average computations per pass and layer.
    pub fn averages(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.passes.max(1) as f64;
        (
            self.nodes.iter().map(|&c| c as f64 / n).collect(),
            self.edges.iter().map(|&c| c as f64 / n).collect(),
        )
    }
}

fn add_into(acc: &mut Vec<usize>, v: &[usize]) {
    if acc.len() < v.len() {
        acc.resize(v.len(), 0);
    }
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub frames: usize,
    pub stages: BTreeMap<String, StageLatency>,
    pub recompute: RecomputeTotals,
    /// Snapshots folded into a pending one because the queue was full.
    pub coalesced: usize,
}

impl LatencyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable table of the stages and recomputation counts.
    pub fn render(&self) -> String {
        let mut out = format!(
            "frames: {}\n{:<16} {:>8} {:>10} {:>10}\n",
            self.frames, "stage", "samples", "mean ms", "p95 ms"
        );
        for (name, s) in &self.stages {
            out.push_str(&format!(
                "{:<16} {:>8} {:>10.3} {:>10.3}\n",
                name, s.samples, s.mean_ms, s.p95_ms
            ));
        }
        let (nodes, edges) = self.recompute.averages();
        out.push_str(&format!("passes: {}\n", self.recompute.passes));
        for (l, n) in nodes.iter().enumerate() {
            let e = edges.get(l).copied().unwrap_or(0.0);
            out.push_str(&format!("layer {l}: {n:.2} node / {e:.2} edge computations per pass\n"));
        }
        out.push_str(&format!(
            "plan mismatches: {}\ncoalesced snapshots: {}\n",
            self.recompute.plan_mismatches, self.coalesced
        ));
        out
    }
}

#[derive(Default)]
struct Samples(BTreeMap<&'static str, Vec<Duration>>);

impl Samples {
    fn push(&mut self, stage: &'static str, d: Duration) {
        self.0.entry(stage).or_default().push(d);
    }

    fn record_pass(&mut self, stats: &RecomputeStats, total: Duration) {
        let t = &stats.timings;
        self.push("node_encoding", t.node_encoding);
        self.push("edge_encoding", t.edge_encoding);
        self.push("gnn", t.layers.iter().sum());
        self.push("classification", t.classification);
        self.push("prediction", total);
    }

    fn summarize(&self) -> BTreeMap<String, StageLatency> {
        self.0
            .iter()
            .map(|(k, v)| ((*k).to_owned(), StageLatency::from_samples(v)))
            .collect()
    }
}

/// Final state of a run.
#[derive(Debug)]
pub struct PipelineOutput {
    pub fused: FusedSceneGraph,
    pub map: SceneMap,
    pub graph: NeighborGraph,
    pub report: LatencyReport,
}

impl PipelineOutput {
    pub fn document(&self) -> GraphDocument {
        self.fused.export(|id| self.map.get(id).and_then(|s| s.properties()))
    }
}

/// Map-side state: scene map, neighbor graph and fused graph.
struct MapWorker {
    map: SceneMap,
    graph: NeighborGraph,
    fused: FusedSceneGraph,
    samples: Samples,
    recompute: RecomputeTotals,
    frames: usize,
}

impl MapWorker {
    fn new(cfg: &PipelineConfig) -> Self {
        Self {
            map: SceneMap::new(),
            graph: NeighborGraph::new(cfg.graph_config()),
            fused: FusedSceneGraph::new(cfg.same_part),
            samples: Samples::default(),
            recompute: RecomputeTotals::default(),
            frames: 0,
        }
    }

    /// Applies one frame and returns the snapshot of the flagged segments,
    /// if any.
    fn step(&mut self, update: &FrameUpdate) -> Result<Option<SubgraphSnapshot>, PipelineError> {
        let start = Instant::now();
        let outcome = self.map.apply_frame(update)?;
        let mapped = Instant::now();
        self.samples.push("segmentation", mapped - start);

        let (touched, _) = self.graph.sync_with_map(&self.map, &outcome);
        let threshold = self.graph.config.proximity_threshold;
        self.graph.maintain_edges(&touched, threshold);
        self.graph.maybe_full_sweep(update.frame);
        let flagged = self.graph.flag_for_prediction(update.frame);
        let snapshot = (!flagged.is_empty()).then(|| self.graph.snapshot(&self.map, &flagged, update.frame));
        self.refresh();
        self.samples.push("graph", mapped.elapsed());
        self.frames += 1;
        Ok(snapshot)
    }

    /// Snapshot covering everything not yet predicted at its current size,
    /// plus the pending topology journal.
    fn drain_snapshot(&mut self) -> SubgraphSnapshot {
        let frame = self.map.frame();
        let mut flagged = self.graph.flag_for_prediction(frame);
        flagged.extend(self.graph.changed_since_prediction());
        self.graph.snapshot(&self.map, &flagged, frame)
    }

    fn refresh(&mut self) {
        self.fused.retain_live(self.graph.topology());
        let ids: Vec<SegmentId> = self.graph.topology().nodes().collect();
        for id in ids {
            if let Some(seg) = self.map.get(id) {
                self.fused.set_size(id, seg.len());
            }
        }
    }

    fn fuse(&mut self, result: PassResult) -> Result<(), PipelineError> {
        let (prediction, plan, stats, elapsed) = result?;
        self.samples.record_pass(&stats, elapsed);
        self.recompute.record(&plan, &stats);
        let start = Instant::now();
        self.fused.apply_prediction(&prediction, self.graph.topology())?;
        self.samples.push("fusion", start.elapsed());
        Ok(())
    }

    fn finish(mut self, coalesced: usize) -> PipelineOutput {
        self.refresh();
        let report = LatencyReport {
            frames: self.frames,
            stages: self.samples.summarize(),
            recompute: self.recompute,
            coalesced,
        };
        PipelineOutput {
            fused: self.fused,
            map: self.map,
            graph: self.graph,
            report,
        }
    }
}

type PassResult = Result<(Prediction, RecomputePlan, RecomputeStats, Duration), PipelineError>;

fn run_pass(predictor: &mut IncrementalPredictor, snapshot: &SubgraphSnapshot) -> PassResult {
    let start = Instant::now();
    let (p, plan, stats) = predictor.predict(snapshot)?;
    Ok((p, plan, stats, start.elapsed()))
}

fn predictor(spn: Arc<Spn>, cfg: &PipelineConfig) -> IncrementalPredictor {
    let p = IncrementalPredictor::new(spn);
    if cfg.use_cache {
        p
    } else {
        p.without_cache()
    }
}

/// Runs a stream through the map worker, the prediction worker and the
/// fuser, then drains: every segment not yet predicted at its final size
/// gets one more prediction before the output is returned.
pub fn run_pipeline(
    frames: &[FrameUpdate],
    spn: Arc<Spn>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    match cfg.mode {
        WorkerMode::Sync => run_sync(frames, spn, cfg),
        WorkerMode::Async => run_async(frames, spn, cfg),
    }
}

fn run_sync(frames: &[FrameUpdate], spn: Arc<Spn>, cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    let mut worker = MapWorker::new(cfg);
    let mut predictor = predictor(spn, cfg);
    for update in frames {
        if let Some(snapshot) = worker.step(update)? {
            let result = run_pass(&mut predictor, &snapshot);
            worker.fuse(result)?;
        }
    }
    let last = worker.drain_snapshot();
    if !last.is_empty() {
        let result = run_pass(&mut predictor, &last);
        worker.fuse(result)?;
    }
    Ok(worker.finish(0))
}

fn run_async(frames: &[FrameUpdate], spn: Arc<Spn>, cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    let (snap_tx, snap_rx) = bounded::<SubgraphSnapshot>(cfg.queue_capacity);
    let (pred_tx, pred_rx) = bounded::<PassResult>(cfg.queue_capacity);
    let mut predictor = predictor(spn, cfg);
    std::thread::scope(|scope| {
        scope.spawn(move || {
            for snapshot in snap_rx {
                let result = run_pass(&mut predictor, &snapshot);
                let failed = result.is_err();
                if pred_tx.send(result).is_err() || failed {
                    break;
                }
            }
        });

        let mut worker = MapWorker::new(cfg);
        let mut pending: Option<SubgraphSnapshot> = None;
        let mut coalesced = 0;
        for update in frames {
            if let Some(snapshot) = worker.step(update)? {
                pending = Some(match pending.take() {
                    Some(mut p) => {
                        p.coalesce(snapshot);
                        coalesced += 1;
                        p
                    }
                    None => snapshot,
                });
            }
            if let Some(p) = pending.take() {
                match snap_tx.try_send(p) {
                    Ok(()) => {}
                    Err(TrySendError::Full(p)) => pending = Some(p),
                    Err(TrySendError::Disconnected(_)) => return Err(drain_error(&pred_rx)),
                }
            }
            while let Ok(result) = pred_rx.try_recv() {
                worker.fuse(result)?;
            }
        }

        // drain barrier: flush the pending snapshot plus a final one, then
        // wait for every prediction
        let last = worker.drain_snapshot();
        let mut queue: Vec<SubgraphSnapshot> = pending.into_iter().collect();
        if !last.is_empty() {
            queue.push(last);
        }
        for mut snapshot in queue {
            loop {
                match snap_tx.try_send(snapshot) {
                    Ok(()) => break,
                    // a full queue guarantees a result is on its way
                    Err(TrySendError::Full(s)) => {
                        snapshot = s;
                        let result = pred_rx.recv().map_err(|_| PipelineError::Worker)?;
                        worker.fuse(result)?;
                    }
                    Err(TrySendError::Disconnected(_)) => return Err(drain_error(&pred_rx)),
                }
            }
        }
        drop(snap_tx);
        for result in pred_rx.iter() {
            worker.fuse(result)?;
        }
        Ok(worker.finish(coalesced))
    })
}

fn drain_error(rx: &crossbeam_channel::Receiver<PassResult>) -> PipelineError {
    rx.iter().find_map(|r| r.err()).unwrap_or(PipelineError::Worker)
}
