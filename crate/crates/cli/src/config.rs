//! Command-line flags, the optional JSON config file, and their merge.
//!
//! Precedence is flags, then the config file, then built-in defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use chainmpq_core::backend::HttpBackend;
use chainmpq_core::heatmap::DEFAULT_CELL_PIXELS;
use chainmpq_core::{Backend, ChainConfig, FusionMode, MockBackend, RelationLexicon};
use clap::{Args, ValueEnum};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
pub enum Fusion {
    #[serde(alias = "eq6-literal")]
    #[value(alias = "eq6-literal")]
    Eq6,
    #[serde(alias = "scaled-average")]
    #[value(alias = "scaled-average")]
    Scaled,
}

impl From<Fusion> for FusionMode {
    fn from(f: Fusion) -> Self {
        match f {
            Fusion::Eq6 => FusionMode::Eq6Literal,
            Fusion::Scaled => FusionMode::ScaledAverage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// keyword-guided visual token enhancement
    Enhancement,
    /// the four perspective questions (keeps only the relationship question)
    Multi,
    /// attention masks carried between steps
    Interleaved,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Model backend.
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Scene file for the mock backend.
    #[arg(long, value_name = "PATH")]
    pub scene: Option<PathBuf>,
    /// Server root for the HTTP backend.
    #[arg(long, value_name = "URL")]
    pub endpoint: Option<String>,
    /// Per-request timeout in seconds (HTTP backend).
    #[arg(long, value_name = "SECS")]
    pub timeout: Option<f64>,
    /// Retries after a timeout, connection failure or 5xx (HTTP backend).
    #[arg(long, value_name = "N")]
    pub retries: Option<u32>,
    /// Relation lexicon JSON (`{"spatial_phrases": [...]}`).
    #[arg(long, value_name = "PATH")]
    pub lexicon: Option<PathBuf>,
    /// Bias strength.
    #[arg(long, value_name = "F")]
    pub lambda: Option<f64>,
    /// Upper bound on kept visual tokens.
    #[arg(long, value_name = "N")]
    pub k_max: Option<usize>,
    /// Decoder layers averaged for keyword attention.
    #[arg(long, value_name = "N")]
    pub n_layers: Option<usize>,
    /// How recorded masks combine.
    #[arg(long, value_enum)]
    pub fusion: Option<Fusion>,
    /// Disable one chain component; repeatable.
    #[arg(long, value_enum, value_name = "NAME")]
    pub ablate: Vec<Ablation>,
    /// Keep per-step aggregated attention in the transcript (needed for heatmap).
    #[arg(long)]
    pub keep_attention: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for bench and sweep.
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    /// JSON config file; flags win over its values.
    #[arg(long, value_name = "PATH", env = "CHAINMPQ_CONFIG")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend: Option<BackendKind>,
    pub scene: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub timeout_secs: Option<f64>,
    pub retries: Option<u32>,
    pub lexicon: Option<PathBuf>,
    pub chain: Option<ChainConfig>,
    #[serde(default)]
    pub ablate: Vec<Ablation>,
    pub output_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub heatmap: Option<HeatmapFileConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapFileConfig {
    pub cell_pixels: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut cfg: FileConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid config file {}", path.display()))?;
        // Relative paths inside the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.scene, &mut cfg.lexicon, &mut cfg.output_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub enum BackendSource {
    Mock(PathBuf),
    Http {
        endpoint: String,
        timeout: Duration,
        retries: u32,
    },
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone)]
pub struct CliConfig {
    pub source: BackendSource,
    pub lexicon: Option<PathBuf>,
    pub chain: ChainConfig,
    pub output_dir: PathBuf,
    pub jobs: usize,
    pub cell_pixels: usize,
}

pub const DEFAULT_OUTPUT_DIR: &str = "chainmpq-out";

impl CliConfig {
    pub fn resolve(args: &CommonArgs, cell_pixels: Option<usize>) -> Result<Self> {
        let file = match &args.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };

        let scene = args.scene.clone().or(file.scene);
        let endpoint = args.endpoint.clone().or(file.endpoint);
        let kind = match args.backend.or(file.backend) {
            Some(k) => k,
            None if endpoint.is_some() && scene.is_none() => BackendKind::Http,
            None => BackendKind::Mock,
        };
        let source = match (kind, scene, endpoint) {
            (_, Some(_), Some(_)) => {
                bail!("both a scene file and an endpoint are configured; keep exactly one backend source")
            }
            (BackendKind::Mock, Some(scene), None) => BackendSource::Mock(scene),
            (BackendKind::Mock, None, _) => bail!("the mock backend needs --scene PATH"),
            (BackendKind::Http, None, Some(endpoint)) => {
                let secs = args
                    .timeout
                    .or(file.timeout_secs)
                    .unwrap_or(HttpBackend::DEFAULT_TIMEOUT.as_secs_f64());
                if !(secs > 0.0 && secs.is_finite()) {
                    bail!("timeout must be a positive number of seconds, got {secs}");
                }
                BackendSource::Http {
                    endpoint,
                    timeout: Duration::from_secs_f64(secs),
                    retries: args.retries.or(file.retries).unwrap_or(2),
                }
            }
            (BackendKind::Http, _, None) => bail!("the http backend needs --endpoint URL"),
        };

        let mut chain = file.chain.unwrap_or_default();
        if let Some(v) = args.lambda {
            chain.lambda = v;
        }
        if let Some(v) = args.k_max {
            chain.k_max = v;
        }
        if let Some(v) = args.n_layers {
            chain.n_layers = v;
        }
        if let Some(f) = args.fusion {
            chain.fusion_mode = f.into();
        }
        if args.keep_attention {
            chain.keep_attention = true;
        }
        for a in file.ablate.iter().chain(&args.ablate) {
            match a {
                Ablation::Enhancement => chain.enhance_enabled = false,
                Ablation::Multi => chain.multi_perspective_enabled = false,
                Ablation::Interleaved => chain.visual_memory_enabled = false,
            }
        }
        chain.validate()?;

        let jobs = args.jobs.or(file.jobs).unwrap_or(1);
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        let cell_pixels = cell_pixels
            .or(file.heatmap.and_then(|h| h.cell_pixels))
            .unwrap_or(DEFAULT_CELL_PIXELS);
        if cell_pixels == 0 {
            bail!("cell pixels must be at least 1");
        }

        Ok(Self {
            source,
            lexicon: args.lexicon.clone().or(file.lexicon),
            chain,
            output_dir: args
                .out
                .clone()
                .or(file.output_dir)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR)),
            jobs,
            cell_pixels,
        })
    }

    pub fn lexicon(&self) -> Result<RelationLexicon> {
        match &self.lexicon {
            Some(p) => RelationLexicon::from_json_file(p)
                .with_context(|| format!("cannot load lexicon {}", p.display())),
            None => Ok(RelationLexicon::default()),
        }
    }

    pub fn backend(&self) -> Result<Box<dyn Backend>> {
        Ok(match &self.source {
            BackendSource::Mock(scene) => {
                let mock = MockBackend::from_file(scene)
                    .with_context(|| format!("cannot load scene file {}", scene.display()))?;
                Box::new(mock.with_lexicon(self.lexicon()?))
            }
            BackendSource::Http {
                endpoint,
                timeout,
                retries,
            } => Box::new(HttpBackend::new(endpoint.clone(), *timeout, *retries)?),
        })
    }

    /// The scene id to use when `--image` is omitted: the only scene in the file.
    pub fn default_image(&self) -> Result<String> {
        match &self.source {
            BackendSource::Mock(scene) => {
                let scenes = chainmpq_core::SceneSpec::load_all(scene)?;
                match scenes.as_slice() {
                    [only] => Ok(only.id.clone()),
                    _ => bail!(
                        "{} holds {} scenes; pick one with --image",
                        scene.display(),
                        scenes.len()
                    ),
                }
            }
            BackendSource::Http { .. } => bail!("--image is required with the http backend"),
        }
    }
}
