use crate::error::{config_err, Result};

/// Shape and seed of the toy decoder-only model.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub ffn_hidden_dim: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 64, embed_dim: 64, num_layers: 6, ffn_hidden_dim: 128, num_heads: 2, max_seq_len: 64, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("ffn_hidden_dim", self.ffn_hidden_dim),
            ("num_heads", self.num_heads),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(config_err(format!("{name} must be at least 1")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(config_err(format!("embed_dim {} is not divisible by num_heads {}", self.embed_dim, self.num_heads)));
        }
        if self.ffn_hidden_dim < self.embed_dim {
            return Err(config_err(format!("ffn_hidden_dim {} is smaller than embed_dim {}", self.ffn_hidden_dim, self.embed_dim)));
        }
        if self.max_seq_len < 2 {
            return Err(config_err("max_seq_len must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn num_parameters(&self) -> usize {
        let d = self.embed_dim;
        let f = self.ffn_hidden_dim;
        let per_layer = 2 * d + 4 * d * d + 3 * f * d;
        self.vocab_size * d * 2 + self.max_seq_len * d + d + self.num_layers * per_layer
    }

    /// `key=value` lines, used by the checkpoint header.
    pub fn to_kv(&self) -> String {
        format!(
            "vocab_size={}\nembed_dim={}\nnum_layers={}\nffn_hidden_dim={}\nnum_heads={}\nmax_seq_len={}\nseed={}\n",
            self.vocab_size, self.embed_dim, self.num_layers, self.ffn_hidden_dim, self.num_heads, self.max_seq_len, self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| config_err(format!("bad config line {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field by name. Unknown keys are a configuration error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse = |v: &str| v.parse::<u64>().map_err(|_| config_err(format!("model.{key}: expected an integer, got {v:?}")));
        let n = parse(value)?;
        match key {
            "vocab_size" => self.vocab_size = n as usize,
            "embed_dim" => self.embed_dim = n as usize,
            "num_layers" => self.num_layers = n as usize,
            "ffn_hidden_dim" => self.ffn_hidden_dim = n as usize,
            "num_heads" => self.num_heads = n as usize,
            "max_seq_len" => self.max_seq_len = n as usize,
            "seed" => self.seed = n,
            _ => return Err(config_err(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }
}
