//! Stage orchestration. Each stage reads the artifacts of the stages it
//! depends on from the output directory and writes its own, finishing with a
//! `<stage>.json` fragment that marks it complete. The report merges the
//! fragments.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use super::config::{ExperimentConfig, Stage};
use super::io::{export_embeddings, load_checkpoint, save_checkpoint, FormatError};
use crate::cluster::{
    ami, ari, block_cluster_similarity, cluster_accuracy, davies_bouldin, minibatch_kmeans, nmi, silhouette,
    ClusterError, KmeansConfig,
};
use crate::data::{generate_blobs, DataError, Dataset};
use crate::encoder::{
    encode_dataset, mim_pretrain, per_block_reconstruction_probe, relative_improvement, Collect, EncoderError,
    EncoderParams,
};
use crate::heads::HeadError;
use crate::numerics::{l2_normalize_rows_clamped, Matrix, RngStream};
use crate::params::count;
use crate::probe::{knn_probe, linear_probe, low_shot_split, ProbeDataset, ProbeError};
use crate::queue::SupportQueue;
use crate::trainer::{init_heads_phase, refine_epochs, EpochLog, RefineLog, RefineState, StepLog, TrainError};

pub const ENCODER_PRETRAINED: &str = "encoder_pretrained.mrfc";
pub const ENCODER_REFINED: &str = "encoder_refined.mrfc";
pub const ENCODER_EMA: &str = "encoder_ema.mrfc";
pub const HEADS_INIT: &str = "heads_init.mrfc";
pub const REFINE_STATE: &str = "refine_state.mrfc";
pub const REPORT: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Numerical,
    Other,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} needs the output of stage {needs}, which is neither complete nor scheduled")]
    MissingInput { stage: &'static str, needs: &'static str },
    #[error("stage {stage}: {source}")]
    Format { stage: String, source: FormatError },
    #[error("stage {stage}: {message}")]
    Stage { stage: &'static str, kind: FailureKind, message: String },
    #[error("{0}")]
    Io(String),
    #[error("{failed} of {total} gradient checks failed")]
    GradcheckFailed { failed: usize, total: usize },
}

impl HarnessError {
    /// 2 for configuration problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::MissingInput { .. } => 2,
            HarnessError::Stage { kind: FailureKind::Config, .. } => 2,
            HarnessError::Stage { kind: FailureKind::Numerical, .. } | HarnessError::GradcheckFailed { .. } => 3,
            _ => 1,
        }
    }
}

pub trait Classify: Display {
    fn kind(&self) -> FailureKind;
}

impl Classify for EncoderError {
    fn kind(&self) -> FailureKind {
        match self {
            EncoderError::BadConfig(_) | EncoderError::DegenerateMask { .. } => FailureKind::Config,
            EncoderError::NonFiniteLoss { .. } => FailureKind::Numerical,
            _ => FailureKind::Other,
        }
    }
}

impl Classify for HeadError {
    fn kind(&self) -> FailureKind {
        match self {
            HeadError::BadConfig(_) => FailureKind::Config,
            _ => FailureKind::Other,
        }
    }
}

impl Classify for ProbeError {
    fn kind(&self) -> FailureKind {
        match self {
            ProbeError::BadConfig(_) | ProbeError::TooFewNeighbors { .. } | ProbeError::ClassTooSmall { .. } => {
                FailureKind::Config
            }
            ProbeError::Encoder(e) => e.kind(),
            _ => FailureKind::Other,
        }
    }
}

impl Classify for TrainError {
    fn kind(&self) -> FailureKind {
        match self {
            TrainError::BadConfig(_) | TrainError::BadIndex { .. } => FailureKind::Config,
            TrainError::NonFiniteLoss { .. } => FailureKind::Numerical,
            TrainError::Encoder(e) => e.kind(),
            TrainError::Head(e) => e.kind(),
            TrainError::Probe(e) => e.kind(),
            _ => FailureKind::Other,
        }
    }
}

impl Classify for ClusterError {
    fn kind(&self) -> FailureKind {
        match self {
            ClusterError::BadConfig(_) | ClusterError::TooFewRows { .. } => FailureKind::Config,
            _ => FailureKind::Other,
        }
    }
}

impl Classify for DataError {
    fn kind(&self) -> FailureKind {
        FailureKind::Config
    }
}

fn at<E: Classify>(stage: Stage) -> impl Fn(E) -> HarnessError {
    move |e| HarnessError::Stage { stage: stage.name(), kind: e.kind(), message: e.to_string() }
}

fn fmt_at(stage: Stage) -> impl Fn(FormatError) -> HarnessError {
    move |source| HarnessError::Format { stage: stage.name().to_string(), source }
}

/// Refinement state plus the logs produced so far.
#[derive(Serialize, Deserialize)]
struct RefineCheckpoint {
    state: RefineState,
    init_log: Vec<EpochLog>,
    log: RefineLog,
}

#[derive(Serialize)]
struct RefineCheckpointRef<'a> {
    state: &'a RefineState,
    init_log: &'a [EpochLog],
    log: &'a RefineLog,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

impl Experiment {
    /// Validates the config and creates the output directory.
    pub fn new(config: ExperimentConfig, dir: impl Into<PathBuf>) -> Result<Self, HarnessError> {
        config.validate().map_err(HarnessError::Config)?;
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { config, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn fragment_path(&self, stage: Stage) -> PathBuf {
        self.path(&format!("{}.json", stage.name()))
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.fragment_path(stage).exists()
    }

    pub fn fragment(&self, stage: Stage) -> Result<Value, HarnessError> {
        let p = self.fragment_path(stage);
        let text = fs::read_to_string(&p).map_err(|e| HarnessError::Io(format!("{}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Io(format!("{}: {e}", p.display())))
    }

    fn rng(&self, stage: Stage) -> RngStream {
        RngStream::new(self.config.seed).split(stage.stream())
    }

    /// Train and evaluation splits of the configured dataset.
    pub fn data(&self) -> Result<(Dataset, Dataset), HarnessError> {
        let mut cfg = self.config.data.clone();
        cfg.seed = self.config.data_seed();
        let data = generate_blobs(&cfg).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(data.split(self.config.train_fraction, cfg.seed))
    }

    fn write(&self, name: &str, text: &str) -> Result<(), HarnessError> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| HarnessError::Io(format!("{}: {e}", p.display())))
    }

    fn write_json(&self, name: &str, value: &Value) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
        self.write(name, &(text + "\n"))
    }

    fn meta(&self, stage: Stage) -> Value {
        json!({ "stage": stage.name(), "seed": self.config.seed })
    }

    fn load_encoder(&self, name: &str, stage: Stage) -> Result<EncoderParams, HarnessError> {
        Ok(load_checkpoint::<EncoderParams>(&self.path(name), "encoder").map_err(fmt_at(stage))?.object)
    }

    /// The refined encoder used downstream, if refinement has completed.
    fn refined_encoder(&self, stage: Stage) -> Result<Option<EncoderParams>, HarnessError> {
        if !self.is_complete(Stage::Refine) {
            return Ok(None);
        }
        let name = if self.config.eval_ema { ENCODER_EMA } else { ENCODER_REFINED };
        self.load_encoder(name, stage).map(Some)
    }

    fn check_inputs(&self, stage: Stage, scheduled: &[Stage]) -> Result<(), HarnessError> {
        for &dep in stage.inputs() {
            if !self.is_complete(dep) && !scheduled.contains(&dep) {
                return Err(HarnessError::MissingInput { stage: stage.name(), needs: dep.name() });
            }
        }
        Ok(())
    }

    /// Runs one stage from persisted inputs, replacing any earlier result.
    pub fn run_stage(&self, stage: Stage) -> Result<Value, HarnessError> {
        self.check_inputs(stage, &[])?;
        let body = match stage {
            Stage::Pretrain => self.pretrain()?,
            Stage::AnalyzeBlocks => self.analyze_blocks()?,
            Stage::InitHeads => self.init_heads()?,
            Stage::Refine => self.refine(None)?,
            Stage::Probe => self.probe()?,
            Stage::Cluster => self.cluster()?,
        };
        let mut fragment = self.meta(stage);
        fragment.as_object_mut().expect("object").extend(body.as_object().expect("object").clone());
        if let Some(path) = first_null(&fragment, String::new()) {
            return Err(HarnessError::Stage {
                stage: stage.name(),
                kind: FailureKind::Numerical,
                message: format!("non-finite value at {path}"),
            });
        }
        self.write_json(&format!("{}.json", stage.name()), &fragment)?;
        Ok(fragment)
    }

    /// Runs the configured stages in dependency order up to `through`,
    /// skipping completed ones, then writes the report.
    pub fn run(&self, through: Option<Stage>) -> Result<Value, HarnessError> {
        let mut scheduled = self.config.stages.clone();
        scheduled.sort();
        if let Some(last) = through {
            if !scheduled.contains(&last) {
                return Err(HarnessError::Config(format!("stage {} is not in the configured stages", last.name())));
            }
            scheduled.retain(|&s| s <= last);
        }
        for &s in &scheduled {
            self.check_inputs(s, &scheduled)?;
        }
        for &s in &scheduled {
            if !self.is_complete(s) {
                self.run_stage(s)?;
            }
        }
        self.report()
    }

    /// Merges completed stage fragments into `report.json`.
    pub fn report(&self) -> Result<Value, HarnessError> {
        let mut config = self.config.clone();
        config.out_dir = PathBuf::new();
        config.data.seed = config.data_seed();
        config.data_seed = Some(config.data.seed);
        let mut stages = Map::new();
        for s in Stage::ALL {
            if self.is_complete(s) {
                stages.insert(s.name().to_string(), self.fragment(s)?);
            }
        }
        let summary = summarize(&stages);
        let report = json!({
            "seed": self.config.seed,
            "config": serde_json::to_value(&config).expect("config serializes"),
            "stages": stages,
            "summary": summary,
        });
        self.write_json(REPORT, &report)?;
        Ok(report)
    }

    fn pretrain(&self) -> Result<Value, HarnessError> {
        let stage = Stage::Pretrain;
        let (train, _) = self.data()?;
        let rng = self.rng(stage);
        let enc_cfg = self.config.encoder.config_for(&train.layout);
        let enc = EncoderParams::new(enc_cfg, &mut rng.split(1)).map_err(at(stage))?;
        let out = mim_pretrain(enc, &self.config.pretrain, &train, &mut rng.split(2)).map_err(at(stage))?;
        save_checkpoint(&self.path(ENCODER_PRETRAINED), "encoder", &self.meta(stage), &out.encoder)
            .map_err(fmt_at(stage))?;
        let mut csv = String::from("epoch,loss\n");
        for (e, l) in out.loss_curve.iter().enumerate() {
            csv.push_str(&format!("{e},{l}\n"));
        }
        self.write("pretrain_loss.csv", &csv)?;
        Ok(json!({
            "loss_curve": out.loss_curve,
            "encoder_params": count(&out.encoder),
            "decoder_params": count(&out.decoder),
        }))
    }

    fn analyze_blocks(&self) -> Result<Value, HarnessError> {
        let stage = Stage::AnalyzeBlocks;
        let (train, test) = self.data()?;
        let enc = self.load_encoder(ENCODER_PRETRAINED, stage)?;
        let tr = features(&enc, &train, stage)?;
        let te = features(&enc, &test, stage)?;
        let knn = per_block(&tr, &te, &train, &test, |ds| knn_probe(ds, &self.config.analyze.knn), stage)?;
        let mut out = json!({
            "knn_per_block": knn,
            "knn_relative_improvement": relative_improvement(&knn).map_err(at(stage))?,
        });
        if self.config.analyze.reconstruction {
            let losses = per_block_reconstruction_probe(&enc, &self.config.pretrain, &train, &self.rng(stage))
                .map_err(at(stage))?;
            let negated: Vec<f64> = losses.iter().map(|l| -l).collect();
            out["reconstruction_loss_per_block"] = json!(losses);
            out["reconstruction_relative_improvement"] = json!(relative_improvement(&negated).map_err(at(stage))?);
        }
        Ok(out)
    }

    fn ensemble_rng(&self) -> RngStream {
        // init_heads and refine share one stream so that running them as two
        // stages equals a single uninterrupted refinement run
        self.rng(Stage::InitHeads)
    }

    fn init_heads(&self) -> Result<Value, HarnessError> {
        let stage = Stage::InitHeads;
        let (train, _) = self.data()?;
        let enc = self.load_encoder(ENCODER_PRETRAINED, stage)?;
        let ensemble = self.config.heads.ensemble(enc.depth(), enc.width());
        let rng = self.ensemble_rng();
        let mut state = RefineState::new(enc, &ensemble, &self.config.refine, &rng.split(1)).map_err(at(stage))?;
        let init_log = init_heads_phase(&mut state, &train, &self.config.refine, &rng.split(2)).map_err(at(stage))?;
        let ck = RefineCheckpointRef { state: &state, init_log: &init_log, log: &RefineLog::default() };
        save_checkpoint(&self.path(HEADS_INIT), "refine_state", &self.meta(stage), &ck).map_err(fmt_at(stage))?;
        let stale = self.path(REFINE_STATE);
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| HarnessError::Io(format!("{}: {e}", stale.display())))?;
        }
        Ok(json!({
            "attach": state.attach,
            "queue_fill": state.queues.iter().map(SupportQueue::filled).collect::<Vec<_>>(),
            "epochs": init_log,
        }))
    }

    /// `stop_after` abandons the run after that many total epochs, leaving
    /// only the epoch checkpoint behind (used to exercise resumption).
    fn refine(&self, stop_after: Option<usize>) -> Result<Value, HarnessError> {
        let stage = Stage::Refine;
        let (train, _) = self.data()?;
        // an unfinished run resumes from its last epoch checkpoint
        let resume = !self.is_complete(stage) && self.path(REFINE_STATE).exists();
        let source = if resume { REFINE_STATE } else { HEADS_INIT };
        let ck = load_checkpoint::<RefineCheckpoint>(&self.path(source), "refine_state").map_err(fmt_at(stage))?.object;
        let RefineCheckpoint { mut state, init_log, mut log } = ck;
        let cfg = &self.config.refine;
        let state_path = self.path(REFINE_STATE);
        let meta = self.meta(stage);
        let mut on_epoch = |s: &RefineState, e: &EpochLog, steps: &[StepLog]| {
            log.steps.extend_from_slice(steps);
            log.epochs.push(e.clone());
            let ck = RefineCheckpointRef { state: s, init_log: &init_log, log: &log };
            save_checkpoint(&state_path, "refine_state", &meta, &ck).map_err(|e| TrainError::Callback(e.to_string()))?;
            match stop_after {
                Some(n) if s.epoch >= n => Err(TrainError::Callback(format!("stopped after epoch {n}"))),
                _ => Ok(()),
            }
        };
        refine_epochs(&mut state, &train, cfg, &self.ensemble_rng().split(3), &mut on_epoch).map_err(at(stage))?;
        save_checkpoint(&self.path(ENCODER_REFINED), "encoder", &meta, &state.encoder).map_err(fmt_at(stage))?;
        save_checkpoint(&self.path(ENCODER_EMA), "encoder", &meta, &state.ema.shadow).map_err(fmt_at(stage))?;
        for (i, q) in state.queues.iter().enumerate() {
            export_queue(&self.path(&format!("queue_head{i}.mrfe")), q).map_err(fmt_at(stage))?;
        }
        self.write("refine_log.csv", &refine_csv(&log, state.heads.len()))?;
        Ok(json!({
            "attach": state.attach,
            "steps": state.step,
            "init_epochs": init_log,
            "epochs": log.epochs,
        }))
    }

    fn encoders(&self, stage: Stage) -> Result<Vec<(&'static str, EncoderParams)>, HarnessError> {
        let mut out = vec![("pre", self.load_encoder(ENCODER_PRETRAINED, stage)?)];
        if let Some(post) = self.refined_encoder(stage)? {
            out.push(("post", post));
        }
        Ok(out)
    }

    fn probe(&self) -> Result<Value, HarnessError> {
        let stage = Stage::Probe;
        let cfg = &self.config.probe;
        let (train, test) = self.data()?;
        let mut out = Map::new();
        for (tag, enc) in self.encoders(stage)? {
            let tr = features(&enc, &train, stage)?;
            let te = features(&enc, &test, stage)?;
            let knn = per_block(&tr, &te, &train, &test, |ds| knn_probe(ds, &cfg.knn), stage)?;
            let (final_tr, final_te) = (tr.last().expect("depth >= 1"), te.last().expect("depth >= 1"));
            let ds = ProbeDataset::new(final_tr.clone(), train.labels.clone(), final_te.clone(), test.labels.clone())
                .map_err(at(stage))?;
            let linear = linear_probe(&ds, &cfg.linear).map_err(at(stage))?;
            let mut low_shot = Map::new();
            for &n in &cfg.low_shot {
                let runs = (0..cfg.low_shot_seeds)
                    .map(|s| {
                        let split = low_shot_split(final_te, &test.labels, n, self.low_shot_seed(s))?;
                        linear_probe(&split, &cfg.linear)
                    })
                    .collect::<Result<Vec<f64>, _>>()
                    .map_err(at(stage))?;
                let mean = runs.iter().sum::<f64>() / runs.len().max(1) as f64;
                low_shot.insert(n.to_string(), json!({ "mean": mean, "runs": runs }));
            }
            for (split, x, data) in [("train", final_tr, &train), ("test", final_te, &test)] {
                let labels: Vec<i32> = data.labels.iter().map(|&l| l as i32).collect();
                export_embeddings(&self.path(&format!("embeddings_{tag}_{split}.mrfe")), x, Some(&labels))
                    .map_err(fmt_at(stage))?;
            }
            out.insert(
                tag.to_string(),
                json!({
                    "knn_per_block": knn,
                    "knn_relative_improvement": relative_improvement(&knn).map_err(at(stage))?,
                    "knn_final": knn.last(),
                    "knn_best_block": argmax(&knn) + 1,
                    "linear": linear,
                    "low_shot": low_shot,
                }),
            );
        }
        Ok(Value::Object(out))
    }

    fn low_shot_seed(&self, s: usize) -> u64 {
        self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(s as u64)
    }

    fn cluster(&self) -> Result<Value, HarnessError> {
        let stage = Stage::Cluster;
        let cfg = &self.config.cluster;
        let (_, test) = self.data()?;
        let truth: Vec<usize> = test.labels.iter().map(|&l| l as usize).collect();
        let kmeans = KmeansConfig { seed: self.config.seed, ..cfg.kmeans.clone() };
        let mut out = Map::new();
        for (tag, enc) in self.encoders(stage)? {
            let blocks: Vec<Matrix> = features(&enc, &test, stage)?.iter().map(|m| l2_normalize_rows_clamped(m).0).collect();
            let mut entry = cluster_metrics(blocks.last().expect("depth >= 1"), &truth, &kmeans).map_err(at(stage))?;
            if cfg.per_block {
                let mut labels = Vec::new();
                let mut acc = Vec::new();
                let mut sil = Vec::new();
                for x in &blocks {
                    let c = minibatch_kmeans(x, &kmeans).map_err(at(stage))?;
                    acc.push(cluster_accuracy(&c.labels, &truth).map_err(at(stage))?);
                    sil.push(silhouette(x, &truth).map_err(at(stage))?);
                    labels.push(c.labels);
                }
                entry["ACC_per_block"] = json!(acc);
                entry["SIL_per_block"] = json!(sil);
                entry["block_similarity"] = json!(block_cluster_similarity(&labels).map_err(at(stage))?);
            }
            out.insert(tag.to_string(), entry);
        }
        Ok(Value::Object(out))
    }
}

/// Class-summary features after every block.
fn features(enc: &EncoderParams, data: &Dataset, stage: Stage) -> Result<Vec<Matrix>, HarnessError> {
    encode_dataset(enc, data, Collect::PerBlock, 256).map_err(at(stage))
}

fn per_block(
    tr: &[Matrix],
    te: &[Matrix],
    train: &Dataset,
    test: &Dataset,
    probe: impl Fn(&ProbeDataset) -> Result<f64, ProbeError>,
    stage: Stage,
) -> Result<Vec<f64>, HarnessError> {
    tr.iter()
        .zip(te)
        .map(|(a, b)| probe(&ProbeDataset::new(a.clone(), train.labels.clone(), b.clone(), test.labels.clone())?))
        .collect::<Result<_, _>>()
        .map_err(at(stage))
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// k-means on row-normalized features, scored against `truth`. NMI, AMI and
/// ARI are scaled to percent like ACC and SIL; DBS is unscaled. SIL and DBS
/// measure separation of the true classes.
pub fn cluster_metrics(x: &Matrix, truth: &[usize], kmeans: &KmeansConfig) -> Result<Value, ClusterError> {
    let c = minibatch_kmeans(x, kmeans)?;
    Ok(json!({
        "ACC": cluster_accuracy(&c.labels, truth)?,
        "NMI": 100.0 * nmi(&c.labels, truth)?,
        "AMI": 100.0 * ami(&c.labels, truth)?,
        "ARI": 100.0 * ari(&c.labels, truth)?,
        "SIL": silhouette(x, truth)?,
        "DBS": davies_bouldin(x, truth)?,
        "inertia": c.inertia,
    }))
}

pub fn export_queue(path: &Path, queue: &SupportQueue) -> Result<(), FormatError> {
    let (entries, labels) = queue.snapshot();
    let labels: Option<Vec<i32>> = labels.iter().map(|l| l.map(|v| v as i32)).collect();
    export_embeddings(path, &entries, labels.as_deref())
}

fn refine_csv(log: &RefineLog, heads: usize) -> String {
    let mut header = vec!["step".to_string(), "epoch".to_string(), "lr".to_string()];
    for kind in ["loss", "weight", "nn_swap"] {
        header.extend((0..heads).map(|h| format!("{kind}_{h}")));
    }
    let mut out = header.join(",") + "\n";
    for s in &log.steps {
        let mut row = vec![s.step.to_string(), s.epoch.to_string(), s.lr.to_string()];
        for v in s.losses.iter().chain(&s.weights).chain(&s.nn_swap) {
            row.push(v.to_string());
        }
        out.push_str(&(row.join(",") + "\n"));
    }
    out
}

/// JSON pointer of the first null, which is what non-finite floats become.
fn first_null(v: &Value, path: String) -> Option<String> {
    match v {
        Value::Null => Some(path),
        Value::Array(items) => items.iter().enumerate().find_map(|(i, x)| first_null(x, format!("{path}/{i}"))),
        Value::Object(map) => map.iter().find_map(|(k, x)| first_null(x, format!("{path}/{k}"))),
        _ => None,
    }
}

/// Headline numbers pulled out of the fragments.
fn summarize(stages: &Map<String, Value>) -> Value {
    let mut s = Map::new();
    if let Some(p) = stages.get("probe") {
        for tag in ["pre", "post"] {
            if let Some(e) = p.get(tag) {
                s.insert(format!("knn_final_{tag}"), e["knn_final"].clone());
                s.insert(format!("knn_best_block_{tag}"), e["knn_best_block"].clone());
                let best = e["knn_per_block"].as_array().map(|v| v.iter().filter_map(Value::as_f64).fold(f64::MIN, f64::max));
                s.insert(format!("knn_max_{tag}"), json!(best));
                s.insert(format!("linear_{tag}"), e["linear"].clone());
            }
        }
    }
    if let Some(c) = stages.get("cluster") {
        for tag in ["pre", "post"] {
            if let Some(e) = c.get(tag) {
                for m in ["ACC", "NMI", "AMI", "ARI", "SIL", "DBS"] {
                    s.insert(format!("{m}_{tag}"), e[m].clone());
                }
            }
        }
    }
    Value::Object(s)
}
