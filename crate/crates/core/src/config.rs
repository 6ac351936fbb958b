use serde::{Deserialize, Serialize};

use crate::error::{Result, SrmError};
use crate::mixing::MixerKind;
use crate::tokenizer;

/// How the structured mixers of a layer are arranged into heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// First half of the heads row-repeat, second half column-repeat.
    Mixed,
    /// Every head holds a row- and a column-repeat mixer whose outputs are
    /// linearly combined.
    Combined,
    RowOnly,
    ColumnOnly,
}

impl HeadMode {
    pub const ALL: [HeadMode; 4] = [HeadMode::Mixed, HeadMode::Combined, HeadMode::RowOnly, HeadMode::ColumnOnly];
}

fn default_vocab() -> usize {
    tokenizer::VOCAB_SIZE
}
fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn four() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    /// Zero means a single non-headed mixer of width `d_model`.
    pub n_heads: usize,
    pub n_ctx: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub head_mode: HeadMode,
    /// Heads slice one shared input projection instead of owning one each.
    #[serde(default)]
    pub head_parallel: bool,
    #[serde(default = "yes")]
    pub use_projections: bool,
    #[serde(default = "yes")]
    pub decay_enabled: bool,
    #[serde(default)]
    pub diag_const_enabled: bool,
    #[serde(default = "one")]
    pub kernel_size: usize,
    #[serde(default = "four")]
    pub ff_expansion: usize,
}

impl SrmConfig {
    /// Mixed heads with decay and projections, the best-training arrangement.
    pub fn mixed(d_model: usize, n_layers: usize, n_heads: usize, n_ctx: usize) -> Self {
        SrmConfig {
            d_model,
            n_layers,
            n_heads,
            n_ctx,
            vocab_size: tokenizer::VOCAB_SIZE,
            head_mode: HeadMode::Mixed,
            head_parallel: false,
            use_projections: true,
            decay_enabled: true,
            diag_const_enabled: false,
            kernel_size: 1,
            ff_expansion: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_ctx", self.n_ctx),
            ("vocab_size", self.vocab_size),
            ("kernel_size", self.kernel_size),
            ("ff_expansion", self.ff_expansion),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(SrmError::config(field, "must be positive"));
            }
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            return Err(SrmError::config(
                "n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if self.head_mode == HeadMode::Mixed && (self.n_heads == 0 || self.n_heads % 2 != 0) {
            return Err(SrmError::config("n_heads", "mixed heads need a positive even head count"));
        }
        if self.kernel_size > self.head_dim() {
            return Err(SrmError::config(
                "kernel_size",
                format!("kernel of {} exceeds head_dim {}", self.kernel_size, self.head_dim()),
            ));
        }
        Ok(())
    }

    /// Number of heads actually instantiated (one when non-headed).
    #[inline]
    pub fn heads(&self) -> usize {
        self.n_heads.max(1)
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads()
    }

    #[inline]
    pub fn ff_dim(&self) -> usize {
        self.ff_expansion * self.d_model
    }

    /// Mixer kinds of each head; a combined head owns a row and a column mixer.
    pub fn head_kinds(&self, head: usize) -> &'static [MixerKind] {
        use MixerKind::*;
        match self.head_mode {
            HeadMode::Mixed => {
                if head < self.heads() / 2 {
                    &[RowRepeat]
                } else {
                    &[ColumnRepeat]
                }
            }
            HeadMode::Combined => &[RowRepeat, ColumnRepeat],
            HeadMode::RowOnly => &[RowRepeat],
            HeadMode::ColumnOnly => &[ColumnRepeat],
        }
    }

    #[inline]
    pub fn mixers_per_head(&self) -> usize {
        if self.head_mode == HeadMode::Combined {
            2
        } else {
            1
        }
    }

    /// Recurrent state scalars held per layer per sample.
    pub fn cache_scalars_per_layer(&self) -> usize {
        self.heads() * self.mixers_per_head() * self.kernel_size * self.head_dim()
    }

    pub fn cache_scalars_per_sample(&self) -> usize {
        self.n_layers * self.cache_scalars_per_layer()
    }

    /// Trainable scalar count; matches the tensors a model allocates.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let dh = self.head_dim();
        let per_filter = self.n_ctx
            + usize::from(self.decay_enabled)
            + usize::from(self.diag_const_enabled);
        let per_mixer = self.kernel_size * per_filter + self.n_ctx * dh;
        let mut layer = 2 * d;
        layer += self.heads() * self.mixers_per_head() * per_mixer;
        if self.head_mode == HeadMode::Combined {
            layer += 2 * self.heads();
        }
        if self.use_projections {
            layer += 2 * d * d;
        }
        layer += 2 * self.ff_dim() * d + self.ff_dim() + d;
        2 * self.vocab_size * d + d + self.n_layers * layer
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SrmConfig = toml::from_str(s).map_err(|e| toml_error(&e, s))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Name the key whose value `e` points at, as `table.key`, or the table when
/// the error covers a whole table.
pub(crate) fn toml_error(e: &toml::de::Error, source: &str) -> SrmError {
    let field = e
        .span()
        .map(|span| {
            let start = span.start.min(source.len());
            let line_start = source[..start].rfind('\n').map_or(0, |i| i + 1);
            let line = source[line_start..].lines().next().unwrap_or("");
            let table = source[..line_start]
                .lines()
                .rev()
                .map(str::trim)
                .find(|l| l.starts_with('[') && l.ends_with(']'))
                .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim());
            match line.split_once('=') {
                Some((key, _)) => match table {
                    Some(t) => format!("{t}.{}", key.trim()),
                    None => key.trim().to_string(),
                },
                None if line.trim().starts_with('[') => line.trim().trim_matches(|c| c == '[' || c == ']').trim().to_string(),
                None => format!("at byte {start}"),
            }
        })
        .unwrap_or_else(|| "<document>".into());
    SrmError::config(field, e.message().to_string())
}
