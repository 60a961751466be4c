use embckpt_core::payload::RowCodec;
use embckpt_core::policy::{expected_failures, select_bitwidth, FailureModel};
use embckpt_core::quant::{AdaptiveConfig, RangeMethod};
use embckpt_core::{BitWidth, PolicyKind};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeChoice {
    Symmetric,
    Asymmetric,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantSetting {
    /// Rows are stored as raw f32.
    Off,
    /// Uniform per-row quantization. Without an explicit bit width, the width
    /// is chosen from the failure model.
    Uniform { method: RangeChoice, bitwidth: Option<BitWidth> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    /// Batches trained between two checkpoint triggers.
    pub checkpoint_interval: u64,
    pub policy: PolicyKind,
    pub quant: QuantSetting,
    pub failure_model: FailureModel,
    /// Replaces the per-width adaptive search defaults for 2, 3 and 4 bits.
    pub adaptive_override: Option<AdaptiveConfig>,
    /// Rows per pipeline chunk. `usize::MAX` sends each table as one chunk.
    pub chunk_rows: usize,
    pub workers: usize,
    /// Number of newest checkpoints retained (plus their dependencies).
    pub keep_last: usize,
    /// Fall back to an older checkpoint when the newest fails verification.
    pub restore_fallback: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            checkpoint_interval: 100,
            policy: PolicyKind::Intermittent,
            quant: QuantSetting::Uniform { method: RangeChoice::Adaptive, bitwidth: None },
            failure_model: FailureModel { p: 0.001, nodes: 64, expected_duration_hours: 100.0 },
            adaptive_override: None,
            chunk_rows: 256,
            workers: 4,
            keep_last: 1,
            restore_fallback: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be at least 1".into()));
        }
        if self.chunk_rows == 0 {
            return Err(Error::Config("chunk_rows must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.keep_last == 0 {
            return Err(Error::Config("keep_last must be at least 1".into()));
        }
        FailureModel::new(
            self.failure_model.p,
            self.failure_model.nodes,
            self.failure_model.expected_duration_hours,
        )?;
        Ok(())
    }

    /// Bit width used before any resume has happened.
    pub fn selected_bitwidth(&self) -> Option<BitWidth> {
        match self.quant {
            QuantSetting::Off => None,
            QuantSetting::Uniform { bitwidth: Some(n), .. } => Some(n),
            QuantSetting::Uniform { bitwidth: None, .. } => {
                Some(select_bitwidth(expected_failures(&self.failure_model)))
            }
        }
    }

    pub fn codec(&self, bitwidth: Option<BitWidth>) -> RowCodec {
        match (self.quant, bitwidth) {
            (QuantSetting::Off, _) | (_, None) => RowCodec::Fp32,
            (QuantSetting::Uniform { method, .. }, Some(n)) => RowCodec::Uniform {
                bitwidth: n,
                method: match method {
                    RangeChoice::Symmetric => RangeMethod::Symmetric,
                    RangeChoice::Asymmetric => RangeMethod::Asymmetric,
                    RangeChoice::Adaptive if n == BitWidth::B8 => RangeMethod::Adaptive(None),
                    RangeChoice::Adaptive => RangeMethod::Adaptive(self.adaptive_override),
                },
            },
        }
    }
}
