//! Pipeline configuration: a TOML file with an explicit schema.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fieldasr_core::detect::{TrainConfig, TrainingConfig};
use fieldasr_core::engines::{EngineKind, EngineSpec};
use fieldasr_core::filter::{Criterion, FilterParams};
use fieldasr_core::synthgen::CorpusSpec;
use fieldasr_core::tune::TuneMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Manifest that `split` partitions.
    pub manifest: PathBuf,
    /// Directory that relative audio paths resolve against; `synth` writes here.
    pub audio_root: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { manifest: "corpus/truth.jsonl".into(), audio_root: "corpus".into(), out_dir: "run".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub test_stops: usize,
    pub validation_stops: usize,
    pub test_utterance_limit: usize,
    pub race_balance: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { test_stops: 20, validation_stops: 8, test_utterance_limit: 60, race_balance: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignSection {
    pub mfa: String,
    pub w2v2: String,
    pub transcribers: Vec<String>,
    pub max_chunk_s: f64,
}

impl Default for AlignSection {
    fn default() -> Self {
        Self {
            mfa: "mfa".into(),
            w2v2: "w2v2".into(),
            transcribers: vec!["asr".into()],
            max_chunk_s: fieldasr_core::align::DEFAULT_MAX_CHUNK_S,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub criterion: Criterion,
    pub params: FilterParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub vad: String,
    pub sampling: TrainingConfig,
    pub training: TrainConfig,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self { vad: "vad".into(), sampling: TrainingConfig::default(), training: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneSection {
    pub transcriber: String,
    pub budget: usize,
    pub init_samples: usize,
    pub mode: TuneMode,
}

impl Default for TuneSection {
    fn default() -> Self {
        Self { transcriber: "asr".into(), budget: 20, init_samples: 5, mode: TuneMode::Gp }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranscribeSection {
    pub transcriber: String,
}

impl Default for TranscribeSection {
    fn default() -> Self {
        Self { transcriber: "asr".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub jobs: usize,
    pub paths: Paths,
    pub synth: CorpusSpec,
    pub split: SplitSection,
    pub align: AlignSection,
    pub filter: FilterSection,
    pub detector: DetectorSection,
    pub tune: TuneSection,
    pub transcribe: TranscribeSection,
    pub engines: Vec<EngineSpec>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            paths: Paths::default(),
            synth: CorpusSpec::default(),
            split: SplitSection::default(),
            align: AlignSection::default(),
            filter: FilterSection::default(),
            detector: DetectorSection::default(),
            tune: TuneSection::default(),
            transcribe: TranscribeSection::default(),
            engines: Vec::new(),
        }
    }
}

/// Flags that override config keys one for one.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    pub criterion: Option<Criterion>,
    pub out: Option<PathBuf>,
}

/// A loaded config with its directory and fingerprint.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: PipelineConfig,
    /// Directory relative paths in the config resolve against.
    pub base: PathBuf,
    pub hash: String,
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.out_dir)
    }

    pub fn audio_root(&self) -> PathBuf {
        self.resolve(&self.config.paths.audio_root)
    }

    /// Seed for one named source of randomness.
    pub fn sub_seed(&self, name: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        h.update(name.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

/// Hash of the effective config. The output directory and thread count do
/// not change results, so they are left out.
pub fn config_hash(config: &PipelineConfig) -> String {
    let mut c = config.clone();
    c.paths.out_dir = PathBuf::new();
    c.jobs = 0;
    let json = serde_json::to_string(&c).expect("config serializes");
    format!("{:x}", Sha256::digest(json.as_bytes()))
}

fn expect_engine(config: &PipelineConfig, name: &str, kind: EngineKind, key: &str) -> Result<()> {
    match config.engines.iter().find(|e| e.name == name) {
        None => bail!("unknown engine {name:?} referenced by {key}"),
        Some(e) if e.kind != kind => bail!("engine {name:?} referenced by {key} is a {:?}, expected {kind:?}", e.kind),
        Some(_) => Ok(()),
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        let mut names = std::collections::BTreeSet::new();
        for e in &self.engines {
            if !names.insert(e.name.as_str()) {
                bail!("duplicate engine name {:?}", e.name);
            }
        }
        self.filter.params.validate()?;
        Ok(())
    }

    /// Engines a subcommand needs must exist with the right kind.
    pub fn require(&self, refs: &[(&str, EngineKind, &str)]) -> Result<()> {
        for (name, kind, key) in refs {
            expect_engine(self, name, *kind, key)?;
        }
        Ok(())
    }
}

pub fn load(path: &Path, o: &Overrides) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut config: PipelineConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if let Some(j) = o.jobs {
        config.jobs = j;
    }
    if let Some(s) = o.seed {
        config.seed = s;
    }
    if let Some(c) = o.criterion {
        config.filter.criterion = c;
    }
    if let Some(out) = &o.out {
        config.paths.out_dir = out.clone();
    }
    config.validate()?;
    // Absolute, so paths handed to subprocess engines resolve the same way
    // in the child.
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let base = std::path::absolute(parent).with_context(|| format!("resolving {}", parent.display()))?;
    let hash = config_hash(&config);
    Ok(Loaded { config, base, hash })
}
