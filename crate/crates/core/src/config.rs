use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the reference branch is gated before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatingMode {
    /// Ungated reference attention.
    Vanilla,
    /// One learned scalar gate shared by every token.
    Global,
    /// Per-token gate from the full source/reference cosine-similarity matrix.
    Explicit,
    /// Per-token gate from queries against summarized reference keys.
    Aicg,
}

impl GatingMode {
    pub const ALL: [GatingMode; 4] = [Self::Vanilla, Self::Global, Self::Explicit, Self::Aicg];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Global => "global",
            Self::Explicit => "explicit",
            Self::Aicg => "aicg",
        }
    }
}

/// Where a per-token gate multiplies the attention branch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatePlacement {
    /// On the `to_out` output, immediately before `zero_linear`.
    #[default]
    BeforeZeroLinear,
    /// On the raw attention output, before `to_out`.
    BeforeToOut,
}

impl GatePlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BeforeZeroLinear => "before-zero-linear",
            Self::BeforeToOut => "before-to-out",
        }
    }
}

/// What the implicit gate averages before the sigmoid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Mean of the pre-softmax query/summary scores.
    #[default]
    Logits,
    /// Mean of the row-stochastic score map. Every row of that map averages
    /// to exactly `1/M`, so the resulting gate is the constant `σ(1/M)`.
    SoftmaxOutput,
}

impl AggregationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Logits => "logits",
            Self::SoftmaxOutput => "softmax-output",
        }
    }
}

macro_rules! str_enum {
    ($ty:ty, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config {
                        field: stringify!($ty),
                        reason: format!(
                            "unknown value `{other}`, expected one of: {}",
                            [$($name),+].join(", ")
                        ),
                    }),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

str_enum!(GatingMode,
    "vanilla" => GatingMode::Vanilla,
    "global" => GatingMode::Global,
    "explicit" => GatingMode::Explicit,
    "aicg" => GatingMode::Aicg,
);
str_enum!(GatePlacement,
    "before-zero-linear" => GatePlacement::BeforeZeroLinear,
    "before-to-out" => GatePlacement::BeforeToOut,
);
str_enum!(AggregationMode,
    "logits" => AggregationMode::Logits,
    "softmax-output" => AggregationMode::SoftmaxOutput,
);

/// Shapes and switches for one reference-attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub l_src: usize,
    pub l_ref: usize,
    /// Model width.
    pub d: usize,
    pub heads: usize,
    /// Number of summary tokens.
    pub m: usize,
    pub gating_mode: GatingMode,
    pub gate_placement: GatePlacement,
    pub aggregation_mode: AggregationMode,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            l_src: 4096,
            l_ref: 4096,
            d: 1024,
            heads: 1,
            m: 16,
            gating_mode: GatingMode::Aicg,
            gate_placement: GatePlacement::BeforeZeroLinear,
            aggregation_mode: AggregationMode::Logits,
        }
    }
}

impl AttnConfig {
    /// Convenience constructor with default placement and aggregation.
    pub fn new(
        l_src: usize,
        l_ref: usize,
        d: usize,
        heads: usize,
        m: usize,
        gating_mode: GatingMode,
    ) -> Self {
        Self {
            l_src,
            l_ref,
            d,
            heads,
            m,
            gating_mode,
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: GatingMode) -> Self {
        self.gating_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("l_src", self.l_src),
            ("l_ref", self.l_ref),
            ("d", self.d),
            ("heads", self.heads),
            ("m", self.m),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    field,
                    reason: "must be at least 1".into(),
                });
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config {
                field: "heads",
                reason: format!("d = {} is not divisible by heads = {}", self.d, self.heads),
            });
        }
        Ok(())
    }

    /// Per-head width `d / heads`.
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}
