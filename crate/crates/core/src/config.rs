//! The TOML run configuration.
//!
//! ```toml
//! [endpoints]
//! mode = "mock"            # or "http"
//! judge = "http"           # or "chat": judge through the chat model
//! chat_url = "http://127.0.0.1:8000/v1/chat/completions"
//! grounder_url = "http://127.0.0.1:8001"
//! segmenter_url = "http://127.0.0.1:8002"
//! judge_url = "http://127.0.0.1:8003"
//! timeout_ms = 60000
//! max_retries = 2
//!
//! [loop]
//! max_rounds = 5
//! overlay_mode = "fresh"
//!
//! [pipeline]
//! rho = 0.75
//! seed = 7
//!
//! [render]
//! mask_alpha = 128
//!
//! [prompts]
//! attribute_phrase = "as indicated by the {color} {shape}"
//!
//! [mock]
//! chat_script = ["It is 3."]
//! grounder = { "green cylinder" = [[0.7, 0.4]] }
//! ```
//!
//! Every table and key is optional. `[render]` applies to both the loop
//! and the pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backends::{
    BackendEndpoints, Backends, ChatJudge, FixtureGrounder, HttpBackends, Judge, MockJudge, ScriptedChat, StubSegmenter,
};
use crate::dataset::PipelineConfig;
use crate::loop_engine::LoopConfig;
use crate::prompts::PromptTemplates;
use crate::render::{Point, RenderStyle};

/// Environment variable naming the config file when no path is given.
pub const CONFIG_ENV: &str = "MIRROR_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("config does not parse: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    #[default]
    Http,
    Mock,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeMode {
    #[default]
    Http,
    Chat,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointsConfig {
    pub mode: BackendMode,
    pub judge: JudgeMode,
    #[serde(flatten)]
    pub http: BackendEndpoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityFixture {
    pub needle: String,
    pub logic: u8,
    pub visual: u8,
}

/// Fixtures for `mode = "mock"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub chat_script: Vec<String>,
    /// Restart the chat script when it runs out.
    pub cycle: bool,
    /// Anchor to normalized `[x, y]` points.
    pub grounder: BTreeMap<String, Vec<[f64; 2]>>,
    pub segment_square: u32,
    /// Scores handed out in order before the built-in rule takes over.
    pub judge_scores: Vec<u8>,
    pub judge_alignments: Vec<bool>,
    pub consistency: bool,
    pub quality: Vec<QualityFixture>,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            chat_script: Vec::new(),
            cycle: false,
            grounder: BTreeMap::new(),
            segment_square: 8,
            judge_scores: Vec::new(),
            judge_alignments: Vec::new(),
            consistency: true,
            quality: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub endpoints: EndpointsConfig,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub pipeline: PipelineConfig,
    pub render: Option<RenderStyle>,
    pub prompts: PromptTemplates,
    pub mock: MockConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_toml_str(&text)
    }

    /// Loads `path`, else the file named by `MIRROR_CONFIG`, else defaults.
    /// Returns the path that was used.
    pub fn resolve(path: Option<&Path>) -> Result<(Self, Option<PathBuf>), ConfigError> {
        let chosen = path.map(Path::to_path_buf).or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        match chosen {
            Some(p) => Ok((Self::load(&p)?, Some(p))),
            None => Ok((Config::default(), None)),
        }
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        self.loop_config().check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.pipeline_config().check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.endpoints.mode == BackendMode::Http {
            self.endpoints.http.check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        for (anchor, points) in &self.mock.grounder {
            if let Some(p) = points.iter().find(|[x, y]| !Point::new(*x, *y).in_unit_square()) {
                return Err(ConfigError::Invalid(format!("mock point {p:?} for `{anchor}` is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn loop_config(&self) -> LoopConfig {
        let mut cfg = self.loop_cfg.clone();
        if let Some(r) = &self.render {
            cfg.render = *r;
        }
        cfg
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let mut cfg = self.pipeline.clone();
        if let Some(r) = &self.render {
            cfg.render = *r;
        }
        cfg
    }

    /// Backends for the configured mode. Mock backends are fresh on every
    /// call, so each call replays the chat script from the top.
    pub fn backends(&self) -> Result<Backends, ConfigError> {
        let mut backends = match self.endpoints.mode {
            BackendMode::Http => {
                let http = Arc::new(HttpBackends::new(self.endpoints.http.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?);
                Backends { chat: http.clone(), grounder: http.clone(), segmenter: http.clone(), judge: http }
            }
            BackendMode::Mock => {
                let m = &self.mock;
                let mut chat = ScriptedChat::new(m.chat_script.clone());
                if m.cycle {
                    chat = chat.cycling();
                }
                let grounder = m.grounder.iter().fold(FixtureGrounder::new(), |g, (anchor, pts)| {
                    g.with(anchor.clone(), pts.iter().map(|[x, y]| Point::new(*x, *y)).collect())
                });
                let judge = m.quality.iter().fold(
                    MockJudge::new()
                        .with_scores(m.judge_scores.iter().copied())
                        .with_alignments(m.judge_alignments.iter().map(|b| Value::Bool(*b)))
                        .default_consistency(Value::Bool(m.consistency)),
                    |j, q| j.with_quality(q.needle.clone(), q.logic, q.visual),
                );
                Backends {
                    chat: Arc::new(chat),
                    grounder: Arc::new(grounder),
                    segmenter: Arc::new(StubSegmenter::square(m.segment_square)),
                    judge: Arc::new(judge),
                }
            }
        };
        if self.endpoints.judge == JudgeMode::Chat {
            let judge: Arc<dyn Judge> = Arc::new(ChatJudge::new(backends.chat.clone(), self.prompts.clone()));
            backends.judge = judge;
        }
        Ok(backends)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{chat, ground, ChatMessage, Role};
    use crate::loop_engine::ImageHistory;
    use crate::render::OverlayMode;

    const SAMPLE: &str = r#"
[endpoints]
mode = "mock"
timeout_ms = 500

[loop]
max_rounds = 3
overlay_mode = "cumulative"
image_history = "all"

[pipeline]
rho = 0.5
seed = 11
dense_domains = ["ocr"]

[render]
mask_alpha = 200

[prompts]
attribute_phrase = "see the {color} {shape}"

[mock]
chat_script = ["It is 3."]
grounder = { "green cylinder" = [[0.7, 0.4]] }
judge_scores = [3, 10]
"#;

    #[test]
    fn parses_every_section() {
        let cfg = Config::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.endpoints.mode, BackendMode::Mock);
        assert_eq!(cfg.endpoints.http.timeout_ms, 500);
        let l = cfg.loop_config();
        assert_eq!((l.max_rounds, l.overlay_mode, l.image_history), (3, OverlayMode::Cumulative, ImageHistory::All));
        assert_eq!(l.render.mask_alpha, 200);
        let p = cfg.pipeline_config();
        assert_eq!((p.rho, p.seed, p.render.mask_alpha), (0.5, 11, 200));
        assert_eq!(cfg.prompts.attribute_phrase, "see the {color} {shape}");
        assert_eq!(cfg.prompts.loop_grounding_failed, PromptTemplates::default().loop_grounding_failed);

        let b = cfg.backends().unwrap();
        assert_eq!(chat(b.chat.as_ref(), &[ChatMessage::text(Role::User, "q")]).unwrap().text, "It is 3.");
        assert_eq!(ground(b.grounder.as_ref(), &[], "green cylinder").unwrap(), vec![Point::new(0.7, 0.4)]);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(Config::from_toml_str("[pipeline]\nrho = 2.0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(Config::from_toml_str("[loop]\nmax_rounds = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(Config::from_toml_str("[loop]\nmax_rounds = \"x\""), Err(ConfigError::Parse(_))));
        assert!(matches!(
            Config::from_toml_str("[endpoints]\nmode = \"mock\"\n[mock]\ngrounder = { a = [[1.5, 0.0]] }"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = Config::from_toml_str(SAMPLE).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(Config::from_toml_str(&text).unwrap(), cfg);
    }
}
