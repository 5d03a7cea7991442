//! Run configuration: a plain `key = value` file plus per-key overrides.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use crate::cluster::ClusterParams;
use crate::error::{Error, Result};
use crate::gateway::GatewayConfig;
use crate::refine::PerturbParams;
use crate::render::RenderOptions;
use crate::semantic::SimilarityRule;
use crate::views::ScoreMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationMode {
    #[default]
    Category,
    Similarity,
}

/// Every knob of a run. Relative paths in a config file resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub scene: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
    /// One text embedding per vocabulary entry, for similarity mode.
    pub text_embeddings: Option<PathBuf>,
    /// Category names, one per line; needed when the sidecar carries no vocabulary.
    pub vocab: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub mock_script: Option<PathBuf>,
    pub gt_labels: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Name matched against the `scene` field of question files; defaults to the scene file stem.
    pub scene_name: Option<String>,

    pub mode: ActivationMode,
    pub similarity_rule: SimilarityRule,
    pub tau: f64,
    pub k: usize,
    pub min_cluster_size: usize,
    pub min_samples: usize,
    /// `None` means `0.05 x` the scene-bounds diagonal.
    pub eps: Option<f64>,
    pub visibility_threshold: f64,
    pub shift: f64,
    pub dolly: f64,
    pub focal_zoom: bool,
    pub score_mode: ScoreMode,

    pub max_calls: Option<u64>,
    pub max_tokens: Option<u64>,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub max_images: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: None,
            cameras: None,
            sidecar: None,
            text_embeddings: None,
            vocab: None,
            prompts: None,
            mock_script: None,
            gt_labels: None,
            out_dir: PathBuf::from("runs"),
            scene_name: None,
            mode: ActivationMode::Category,
            similarity_rule: SimilarityRule::Sum,
            tau: 0.6,
            k: 3,
            min_cluster_size: 10,
            min_samples: 5,
            eps: None,
            visibility_threshold: 0.5,
            shift: 0.15,
            dolly: 0.25,
            focal_zoom: false,
            score_mode: ScoreMode::Visibility,
            max_calls: None,
            max_tokens: None,
            max_retries: 3,
            max_in_flight: 4,
            max_images: 16,
        }
    }
}

/// Every key accepted by [`RunConfig::set`].
pub const KEYS: [&str; 27] = [
    "scene",
    "cameras",
    "sidecar",
    "text_embeddings",
    "vocab",
    "prompts",
    "mock_script",
    "gt_labels",
    "out_dir",
    "scene_name",
    "mode",
    "similarity_rule",
    "tau",
    "k",
    "min_cluster_size",
    "min_samples",
    "eps",
    "visibility_threshold",
    "shift",
    "dolly",
    "focal_zoom",
    "score_mode",
    "max_calls",
    "max_tokens",
    "max_retries",
    "max_in_flight",
    "max_images",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Validation(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Validation(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() || value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

impl RunConfig {
    /// Sets one key. Relative paths are joined onto `base` when given.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<()> {
        let value = value.trim();
        let path = |v: &str| -> Option<PathBuf> {
            if v.is_empty() {
                return None;
            }
            let p = PathBuf::from(v);
            Some(match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            })
        };
        match key {
            "scene" => self.scene = path(value),
            "cameras" => self.cameras = path(value),
            "sidecar" => self.sidecar = path(value),
            "text_embeddings" => self.text_embeddings = path(value),
            "vocab" => self.vocab = path(value),
            "prompts" => self.prompts = path(value),
            "mock_script" => self.mock_script = path(value),
            "gt_labels" => self.gt_labels = path(value),
            "out_dir" => self.out_dir = path(value).unwrap_or_else(|| PathBuf::from("runs")),
            "scene_name" => self.scene_name = Some(value.to_string()).filter(|v| !v.is_empty()),
            "mode" => {
                self.mode = match value {
                    "category" => ActivationMode::Category,
                    "similarity" => ActivationMode::Similarity,
                    _ => {
                        return Err(Error::Validation(format!(
                            "mode: expected category or similarity, got {value:?}"
                        )))
                    }
                }
            }
            "similarity_rule" => {
                self.similarity_rule = match value {
                    "sum" => SimilarityRule::Sum,
                    "per_category" => SimilarityRule::PerCategory,
                    _ => {
                        return Err(Error::Validation(format!(
                            "similarity_rule: expected sum or per_category, got {value:?}"
                        )))
                    }
                }
            }
            "tau" => self.tau = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "min_cluster_size" => self.min_cluster_size = num(key, value)?,
            "min_samples" => self.min_samples = num(key, value)?,
            "eps" => self.eps = optional(key, value)?,
            "visibility_threshold" => self.visibility_threshold = num(key, value)?,
            "shift" => self.shift = num(key, value)?,
            "dolly" => self.dolly = num(key, value)?,
            "focal_zoom" => self.focal_zoom = flag(key, value)?,
            "score_mode" => self.score_mode = value.parse()?,
            "max_calls" => self.max_calls = optional(key, value)?,
            "max_tokens" => self.max_tokens = optional(key, value)?,
            "max_retries" => self.max_retries = num(key, value)?,
            "max_in_flight" => self.max_in_flight = num(key, value)?,
            "max_images" => self.max_images = num(key, value)?,
            _ => return Err(Error::Validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: i + 1,
                column: 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key = value, got {line:?}")))?;
            cfg.set(key.trim(), value, base).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, path.parent())
    }

    /// Numeric ranges and the existence of every referenced file.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !self.tau.is_finite() {
            return bad(format!("tau {} is not finite", self.tau));
        }
        if !(1..=16).contains(&self.k) {
            return bad(format!("k {} outside 1..=16", self.k));
        }
        if self.min_cluster_size < 2 {
            return bad(format!("min_cluster_size {} below 2", self.min_cluster_size));
        }
        if self.min_samples < 1 {
            return bad("min_samples must be at least 1".into());
        }
        if let Some(e) = self.eps {
            if !(e >= 0.0 && e.is_finite()) {
                return bad(format!("eps {e} must be finite and >= 0"));
            }
        }
        if !(self.visibility_threshold > 0.0 && self.visibility_threshold < 1.0) {
            return bad(format!(
                "visibility_threshold {} outside (0, 1)",
                self.visibility_threshold
            ));
        }
        PerturbParams {
            shift: self.shift,
            dolly: self.dolly,
            focal_zoom: self.focal_zoom,
        }
        .validate()?;
        if self.max_calls == Some(0) || self.max_tokens == Some(0) {
            return bad("budgets must be positive when set".into());
        }
        if self.max_in_flight == 0 || self.max_images == 0 {
            return bad("max_in_flight and max_images must be positive".into());
        }
        for (key, p) in [
            ("scene", &self.scene),
            ("cameras", &self.cameras),
            ("sidecar", &self.sidecar),
            ("text_embeddings", &self.text_embeddings),
            ("vocab", &self.vocab),
            ("prompts", &self.prompts),
            ("mock_script", &self.mock_script),
            ("gt_labels", &self.gt_labels),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return bad(format!("{key}: {} does not exist", p.display()));
                }
            }
        }
        Ok(())
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            visibility_threshold: self.visibility_threshold,
            ..Default::default()
        }
    }

    pub fn perturb_params(&self) -> PerturbParams {
        PerturbParams {
            shift: self.shift,
            dolly: self.dolly,
            focal_zoom: self.focal_zoom,
        }
    }

    /// Cluster parameters, with `eps` defaulting to `0.05 x bounds_diagonal`.
    pub fn cluster_params(&self, bounds_diagonal: f64) -> ClusterParams {
        ClusterParams {
            min_cluster_size: self.min_cluster_size,
            min_samples: self.min_samples,
            merge_eps: self.eps.unwrap_or(0.05 * bounds_diagonal),
        }
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            max_retries: self.max_retries,
            max_images: self.max_images,
            max_calls: self.max_calls,
            max_tokens: self.max_tokens,
            max_in_flight: self.max_in_flight,
            backoff_base: if self.mock_script.is_some() {
                Duration::ZERO
            } else {
                GatewayConfig::default().backoff_base
            },
        }
    }

    /// `key = value` text that parses back to this configuration.
    pub fn to_text(&self) -> String {
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let o = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_else(|| "none".into());
        let mode = match self.mode {
            ActivationMode::Category => "category",
            ActivationMode::Similarity => "similarity",
        };
        let rule = match self.similarity_rule {
            SimilarityRule::Sum => "sum",
            SimilarityRule::PerCategory => "per_category",
        };
        let score = match self.score_mode {
            ScoreMode::Visibility => "visibility",
            ScoreMode::Volume => "volume",
        };
        [
            ("scene", p(&self.scene)),
            ("cameras", p(&self.cameras)),
            ("sidecar", p(&self.sidecar)),
            ("text_embeddings", p(&self.text_embeddings)),
            ("vocab", p(&self.vocab)),
            ("prompts", p(&self.prompts)),
            ("mock_script", p(&self.mock_script)),
            ("gt_labels", p(&self.gt_labels)),
            ("out_dir", self.out_dir.display().to_string()),
            ("scene_name", self.scene_name.clone().unwrap_or_default()),
            ("mode", mode.into()),
            ("similarity_rule", rule.into()),
            ("tau", self.tau.to_string()),
            ("k", self.k.to_string()),
            ("min_cluster_size", self.min_cluster_size.to_string()),
            ("min_samples", self.min_samples.to_string()),
            ("eps", self.eps.map(|e| e.to_string()).unwrap_or_else(|| "none".into())),
            ("visibility_threshold", self.visibility_threshold.to_string()),
            ("shift", self.shift.to_string()),
            ("dolly", self.dolly.to_string()),
            ("focal_zoom", self.focal_zoom.to_string()),
            ("score_mode", score.into()),
            ("max_calls", o(self.max_calls)),
            ("max_tokens", o(self.max_tokens)),
            ("max_retries", self.max_retries.to_string()),
            ("max_in_flight", self.max_in_flight.to_string()),
            ("max_images", self.max_images.to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
    }
}
