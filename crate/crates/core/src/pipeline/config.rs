use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::ContrastiveConfig;
use crate::data::FilterConfig;
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::relevance::{SelectionConfig, SelectionScope};
use crate::world::PretrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Crm,
    Clm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub crm_steps: usize,
    pub clm_steps: usize,
    pub phase_order: Vec<Phase>,
    /// Optimize the combined objective in a single phase instead of running
    /// the phases one after the other.
    pub joint: bool,
    pub train_projection: bool,
    /// Decoding budget of the soft anchor.
    pub anchor_max_tokens: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 0.05,
            crm_steps: 300,
            clm_steps: 200,
            phase_order: vec![Phase::Crm, Phase::Clm],
            joint: false,
            train_projection: true,
            anchor_max_tokens: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub max_caption_tokens: usize,
    pub max_question_tokens: usize,
    pub max_answer_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_caption_tokens: 12,
            max_question_tokens: 10,
            max_answer_tokens: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub num_images: usize,
    pub samples_per_image: usize,
    pub initial_count: usize,
    pub final_count: usize,
    pub selection_fraction: f64,
    pub selection_scope: SelectionScope,
    pub enable_crm: bool,
    pub enable_clm: bool,
    pub filter: FilterConfig,
    pub contrastive: ContrastiveConfig,
    pub model: ModelDims,
    pub generation: GenerationConfig,
    pub pretrain: PretrainConfig,
    pub training: TrainingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            num_images: 200,
            samples_per_image: 5,
            initial_count: 1000,
            final_count: 50,
            selection_fraction: 0.10,
            selection_scope: SelectionScope::Global,
            enable_crm: true,
            enable_clm: true,
            filter: FilterConfig::default(),
            contrastive: ContrastiveConfig::default(),
            model: ModelDims::default(),
            generation: GenerationConfig::default(),
            pretrain: PretrainConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_images", self.num_images),
            ("samples_per_image", self.samples_per_image),
            ("initial_count", self.initial_count),
            ("final_count", self.final_count),
        ];
        for (name, n) in counts {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.initial_count > self.num_images * self.samples_per_image {
            return Err(Error::Config(format!(
                "initial_count {} exceeds num_images * samples_per_image = {}",
                self.initial_count,
                self.num_images * self.samples_per_image
            )));
        }
        SelectionConfig::new(self.selection_fraction)?;
        self.filter.validate()?;
        self.contrastive.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        let g = &self.generation;
        if g.max_caption_tokens == 0 || g.max_question_tokens == 0 || g.max_answer_tokens == 0 {
            return Err(Error::Config("generation budgets must be >= 1".into()));
        }
        let t = &self.training;
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", t.learning_rate)));
        }
        if t.anchor_max_tokens == 0 {
            return Err(Error::Config("anchor_max_tokens must be >= 1".into()));
        }
        for (i, p) in t.phase_order.iter().enumerate() {
            if t.phase_order[..i].contains(p) {
                return Err(Error::Config(format!("phase {p:?} listed twice in phase_order")));
            }
        }
        for p in [Phase::Crm, Phase::Clm] {
            if self.phase_enabled(p) && !t.phase_order.contains(&p) {
                return Err(Error::Config(format!("enabled phase {p:?} missing from phase_order")));
            }
        }
        Ok(())
    }

    pub fn phase_enabled(&self, phase: Phase) -> bool {
        match phase {
            Phase::Crm => self.enable_crm,
            Phase::Clm => self.enable_clm,
        }
    }

    /// Enabled phases in training order.
    pub fn effective_phases(&self) -> Vec<Phase> {
        self.training
            .phase_order
            .iter()
            .copied()
            .filter(|p| self.phase_enabled(*p))
            .collect()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = PipelineConfig::from_toml_str("seed = 7\n[training]\ncrm_steps = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.training.crm_steps, 3);
        assert_eq!(cfg.num_images, 200);
    }

    #[test]
    fn rejects_invalid() {
        assert!(PipelineConfig::from_toml_str("num_images = 0").is_err());
        assert!(PipelineConfig::from_toml_str("selection_fraction = 0.0").is_err());
        assert!(PipelineConfig::from_toml_str("selection_fraction = 1.5").is_err());
        assert!(PipelineConfig::from_toml_str("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml_str("initial_count = 5000").is_err());
        assert!(PipelineConfig::from_toml_str("[training]\nphase_order = [\"crm\", \"crm\", \"clm\"]").is_err());
        assert!(PipelineConfig::from_toml_str("[training]\nphase_order = [\"crm\"]").is_err());
    }

    #[test]
    fn phase_order_only_needs_enabled_phases() {
        let cfg = PipelineConfig::from_toml_str("enable_crm = false\n[training]\nphase_order = [\"clm\"]").unwrap();
        assert_eq!(cfg.effective_phases(), vec![Phase::Clm]);
        let cfg = PipelineConfig::from_toml_str("[training]\nphase_order = [\"clm\", \"crm\"]").unwrap();
        assert_eq!(cfg.effective_phases(), vec![Phase::Clm, Phase::Crm]);
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.contrastive.temperature = 0.2;
        assert_ne!(a.hash(), b.hash());
    }
}
