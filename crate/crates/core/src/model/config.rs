use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Transformer,
    Gru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CausalLMConfig {
    /// Filled in from the vocabulary when a model is built.
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_mult: usize,
    /// Longest token sequence the model accepts.
    pub block: usize,
    pub backbone: BackboneKind,
    /// Hidden width of the ILQL and value head MLPs.
    pub head_hidden: usize,
    /// Start the LM head at zero, which makes an untrained model uniform.
    pub zero_lm_head: bool,
    pub init_std: f64,
}

impl Default for CausalLMConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            dim: 64,
            layers: 2,
            heads: 2,
            mlp_mult: 4,
            block: 64,
            backbone: BackboneKind::Transformer,
            head_hidden: 64,
            zero_lm_head: true,
            init_std: 0.02,
        }
    }
}

impl CausalLMConfig {
    /// A smaller network that trains in seconds on one CPU core.
    pub fn desk() -> Self {
        Self { dim: 32, head_hidden: 32, block: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.mlp_mult == 0 || self.head_hidden == 0 {
            errs.push("model dim, layers, heads, mlp_mult, head_hidden must be positive".to_string());
        } else if self.backbone == BackboneKind::Transformer && self.dim % self.heads != 0 {
            errs.push(format!("model dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.block < 2 {
            errs.push(format!("model block must be at least 2, got {}", self.block));
        }
        if !(self.init_std > 0.0) {
            errs.push(format!("init_std must be positive, got {}", self.init_std));
        }
        errs
    }
}
