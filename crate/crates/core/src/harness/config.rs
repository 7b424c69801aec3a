//! Experiment configuration, read from TOML. Every field has a default, so an
//! empty file runs the desk-scale pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::KmeansConfig;
use crate::data::{BlobDatasetConfig, DataLayout};
use crate::encoder::{BlockKind, EncoderConfig, InputLayout, MimConfig};
use crate::heads::{EnsembleConfig, HeadConfig};
use crate::probe::{KnnConfig, LinearProbeConfig};
use crate::queue::QueueConfig;
use crate::trainer::RefineConfig;
use crate::views::ViewsConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    AnalyzeBlocks,
    InitHeads,
    Refine,
    Probe,
    Cluster,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Pretrain, Stage::AnalyzeBlocks, Stage::InitHeads, Stage::Refine, Stage::Probe, Stage::Cluster];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::AnalyzeBlocks => "analyze_blocks",
            Stage::InitHeads => "init_heads",
            Stage::Refine => "refine",
            Stage::Probe => "probe",
            Stage::Cluster => "cluster",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        let name = name.replace('-', "_");
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Stages whose artifacts this one reads.
    pub fn inputs(self) -> &'static [Stage] {
        match self {
            Stage::Pretrain => &[],
            Stage::AnalyzeBlocks | Stage::InitHeads => &[Stage::Pretrain],
            Stage::Refine => &[Stage::InitHeads],
            Stage::Probe | Stage::Cluster => &[Stage::Pretrain],
        }
    }

    /// Stage number used to derive its random stream from the global seed.
    pub fn stream(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub depth: usize,
    pub width: usize,
    pub mlp_hidden: usize,
    pub block_kind: BlockKind,
    pub patch_size: usize,
    /// Token length when the data are vectors.
    pub token_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { depth: 8, width: 64, mlp_hidden: 128, block_kind: BlockKind::ResidualMlp, patch_size: 4, token_dim: 4 }
    }
}

impl EncoderSection {
    pub fn config_for(&self, layout: &DataLayout) -> EncoderConfig {
        EncoderConfig {
            depth: self.depth,
            width: self.width,
            mlp_hidden: self.mlp_hidden,
            block_kind: self.block_kind,
            layout: InputLayout::for_data(layout, self.patch_size, self.token_dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeSection {
    /// Also train the per-block reconstruction decoders (the slow part).
    pub reconstruction: bool,
    pub knn: KnnConfig,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self { reconstruction: true, knn: KnnConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadsSection {
    /// 1-based blocks carrying a head; empty means the last third.
    pub attach: Vec<usize>,
    pub projector_hidden: usize,
    pub bottleneck: usize,
    pub predictor_hidden: usize,
}

impl Default for HeadsSection {
    fn default() -> Self {
        Self { attach: Vec::new(), projector_hidden: 128, bottleneck: 32, predictor_hidden: 128 }
    }
}

impl HeadsSection {
    pub fn ensemble(&self, depth: usize, width: usize) -> EnsembleConfig {
        let head = HeadConfig::with_dims(width, self.projector_hidden, self.bottleneck, self.predictor_hidden);
        if self.attach.is_empty() {
            EnsembleConfig::last_third(depth, head)
        } else {
            EnsembleConfig::at_blocks(self.attach.clone(), head)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSection {
    pub knn: KnnConfig,
    pub linear: LinearProbeConfig,
    /// Training examples per class for the low-shot probes.
    pub low_shot: Vec<usize>,
    pub low_shot_seeds: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self { knn: KnnConfig::default(), linear: LinearProbeConfig::default(), low_shot: vec![1, 2, 5], low_shot_seeds: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSection {
    pub kmeans: KmeansConfig,
    /// Cluster every block's features to compare partitions across blocks.
    pub per_block: bool,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self { kmeans: KmeansConfig { restarts: 10, ..Default::default() }, per_block: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub stages: Vec<Stage>,
    /// Dataset seed; the global seed when absent.
    pub data_seed: Option<u64>,
    pub train_fraction: f64,
    /// Downstream evaluation uses the EMA encoder rather than the live one.
    pub eval_ema: bool,
    pub data: BlobDatasetConfig,
    pub encoder: EncoderSection,
    pub pretrain: MimConfig,
    pub analyze: AnalyzeSection,
    pub heads: HeadsSection,
    pub refine: RefineConfig,
    pub probe: ProbeSection,
    pub cluster: ClusterSection,
}

/// Desk-scale refinement: full-scale optimizer, loss and schedule settings
/// with budgets shrunk to a 1.6k-image dataset.
pub fn desk_refine() -> RefineConfig {
    RefineConfig {
        epochs: 8,
        batch_size: 32,
        peak_lr: 2e-3,
        warmup_epochs: 1,
        ema_momentum: 0.99,
        queue: QueueConfig { capacity: 2048, top_k: 20 },
        views: ViewsConfig { n_local: 4, ..Default::default() },
        init_epochs: 3,
        ..Default::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            stages: Stage::ALL.to_vec(),
            data_seed: None,
            train_fraction: 0.5,
            eval_ema: true,
            data: BlobDatasetConfig::default(),
            encoder: EncoderSection::default(),
            pretrain: MimConfig { epochs: 20, decoder_depth: 1, ..Default::default() },
            analyze: AnalyzeSection::default(),
            heads: HeadsSection::default(),
            refine: desk_refine(),
            probe: ProbeSection::default(),
            cluster: ClusterSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Keys in `text` override the defaults one leaf at a time, so a partial
    /// section keeps the desk values of the fields it leaves out.
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let user: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| e.to_string())?;
        merge(&mut merged, user.clone());
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| e.to_string())?;
        // nested sections ignore unknown keys while deserializing, so any key
        // that does not survive a round trip was not a config field
        let known = toml::Table::try_from(&cfg).map_err(|e| e.to_string())?;
        match unknown_key(&user, &known, "") {
            Some(k) => Err(format!("unknown config key `{k}`")),
            None => Ok(cfg),
        }
    }

    pub fn to_toml(&self) -> Result<String, String> {
        toml::to_string(self).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// Checks every section that can be checked without running anything.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        let mut seen = Vec::new();
        for &s in &self.stages {
            if seen.contains(&s) {
                return Err(format!("stage {} listed twice", s.name()));
            }
            seen.push(s);
        }
        self.data.validate().map_err(|e| e.to_string())?;
        let enc = self.encoder.config_for(&self.data.layout());
        enc.validate().map_err(|e| e.to_string())?;
        self.pretrain.validate().map_err(|e| e.to_string())?;
        self.heads.ensemble(enc.depth, enc.width).validate(enc.depth).map_err(|e| e.to_string())?;
        self.refine.validate(enc.depth).map_err(|e| e.to_string())?;
        self.analyze.knn.validate().map_err(|e| e.to_string())?;
        self.probe.knn.validate().map_err(|e| e.to_string())?;
        if self.cluster.kmeans.k < 2 || self.cluster.kmeans.restarts == 0 || self.cluster.kmeans.batch_size == 0 {
            return Err("kmeans needs k >= 2, restarts >= 1 and batch_size >= 1".into());
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn unknown_key(user: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    user.iter().find_map(|(k, v)| {
        let path = format!("{prefix}{k}");
        match (known.get(k), v) {
            (None, _) => Some(path),
            (Some(toml::Value::Table(kt)), toml::Value::Table(ut)) => unknown_key(ut, kt, &format!("{path}.")),
            _ => None,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 17;
        cfg.data_seed = Some(4);
        cfg.stages = vec![Stage::Pretrain, Stage::Probe];
        cfg.heads.attach = vec![8];
        cfg.refine.peak_lr = 3.25e-4;
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 3\n[refine]\nepochs = 2\n[refine.queue]\ntop_k = 1\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.refine.epochs, 2);
        assert_eq!(cfg.refine.queue.top_k, 1);
        assert_eq!(cfg.refine.queue.capacity, 2048);
        assert_eq!(cfg.refine.batch_size, 32);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml("stages = [\"pretrain\", \"nope\"]").is_err());
        assert!(ExperimentConfig::from_toml("seed = \"x\"").is_err());
        assert!(ExperimentConfig::from_toml("sede = 3").is_err());
        let err = ExperimentConfig::from_toml("[refine.queue]\ncapacty = 3").unwrap_err();
        assert!(err.contains("refine.queue.capacty"), "{err}");
        assert!(ExperimentConfig::from_toml("data_seed = 4\n[refine.queue]\ncapacity = 64").is_ok());
        let mut cfg = ExperimentConfig::default();
        cfg.train_fraction = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.stages = vec![Stage::Pretrain, Stage::Pretrain];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.refine.freeze_blocks = 8;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_names() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()), Some(s));
        }
        assert_eq!(Stage::parse("analyze-blocks"), Some(Stage::AnalyzeBlocks));
        assert_eq!(Stage::parse("x"), None);
    }
}
