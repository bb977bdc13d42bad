//! Pipeline configuration and the shipped presets.
//!
//! Configurations are TOML documents whose keys mirror [`UarchConfig`]:
//!
//! ```toml
//! preset_name = "ibex-like"
//! pipeline_depth = 3
//! mul_latency = 2
//! mem_latency = 1
//! alignment_splitting = true
//! branch_taken_penalty = 2
//! forwarding = "full"          # "full" | "alu-only" | "none"
//! unforwarded = ["mul"]        # consumer classes that read operands at decode
//!
//! [div_latency]
//! kind = "data-dependent"      # or kind = "fixed" with cycles = <n>
//!
//! [data_cache]                 # optional, direct-mapped
//! lines = 64
//! line_size = 16
//! hit_cycles = 1
//! miss_cycles = 4
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::UarchError;
use crate::isa::Mnemonic;

/// Execute-stage latency of divisions and remainders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DivLatency {
    Fixed {
        cycles: u32,
    },
    /// `2 + max(1, bitlen(|dividend|) - bitlen(|divisor|))`.
    DataDependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Forwarding {
    /// Results bypass to the execute stage; load data is usable in the cycle
    /// it returns.
    Full,
    /// Load data reaches the execute stage one cycle late (load-use stall).
    AluOnly,
    /// Operands are read from the register file only.
    None,
}

/// Coarse instruction classes used by hazard rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstClass {
    Alu,
    Mul,
    Div,
    Load,
    Store,
    Branch,
    Jump,
}

impl InstClass {
    pub fn of(m: Mnemonic) -> InstClass {
        if m.is_mul() {
            InstClass::Mul
        } else if m.is_div() {
            InstClass::Div
        } else if m.is_load() {
            InstClass::Load
        } else if m.is_store() {
            InstClass::Store
        } else if m.is_branch() {
            InstClass::Branch
        } else if m.is_jump() {
            InstClass::Jump
        } else {
            InstClass::Alu
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub lines: u32,
    pub line_size: u32,
    pub hit_cycles: u32,
    pub miss_cycles: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UarchConfig {
    pub preset_name: String,
    pub pipeline_depth: u8,
    pub div_latency: DivLatency,
    pub mul_latency: u32,
    pub mem_latency: u32,
    /// Loads that straddle a word boundary take two bus accesses.
    pub alignment_splitting: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_cache: Option<CacheConfig>,
    pub branch_taken_penalty: u32,
    pub forwarding: Forwarding,
    /// Consumer classes whose operands are read from the register file in
    /// decode, bypassing forwarding.
    #[serde(default)]
    pub unforwarded: Vec<InstClass>,
}

impl Default for UarchConfig {
    /// Five stages with every timing leak disabled.
    fn default() -> Self {
        UarchConfig {
            preset_name: "no-leak".into(),
            pipeline_depth: 5,
            div_latency: DivLatency::Fixed { cycles: 1 },
            mul_latency: 1,
            mem_latency: 1,
            alignment_splitting: false,
            data_cache: None,
            branch_taken_penalty: 0,
            forwarding: Forwarding::Full,
            unforwarded: Vec::new(),
        }
    }
}

pub const PRESET_NAMES: [&str; 3] = ["ibex-like", "cva6-like", "no-leak"];

pub fn preset(name: &str) -> Result<UarchConfig, UarchError> {
    let config = match name {
        "ibex-like" => UarchConfig {
            preset_name: name.into(),
            pipeline_depth: 3,
            div_latency: DivLatency::DataDependent,
            mul_latency: 2,
            mem_latency: 1,
            alignment_splitting: true,
            data_cache: None,
            branch_taken_penalty: 2,
            forwarding: Forwarding::Full,
            unforwarded: vec![InstClass::Mul],
        },
        "cva6-like" => UarchConfig {
            preset_name: name.into(),
            pipeline_depth: 6,
            div_latency: DivLatency::DataDependent,
            mul_latency: 2,
            mem_latency: 1,
            alignment_splitting: false,
            data_cache: None,
            branch_taken_penalty: 2,
            forwarding: Forwarding::AluOnly,
            unforwarded: vec![InstClass::Branch, InstClass::Jump],
        },
        "no-leak" => UarchConfig::default(),
        _ => return Err(UarchError::UnknownPreset(name.to_string())),
    };
    Ok(config)
}

impl UarchConfig {
    pub fn validate(&self) -> Result<(), UarchError> {
        let bad = |msg: String| Err(UarchError::InvalidConfig(msg));
        if !(3..=8).contains(&self.pipeline_depth) {
            return bad(format!("pipeline_depth {} outside 3..=8", self.pipeline_depth));
        }
        if self.mul_latency == 0 || self.mem_latency == 0 {
            return bad("latencies must be at least 1".into());
        }
        if let DivLatency::Fixed { cycles: 0 } = self.div_latency {
            return bad("div latency must be at least 1".into());
        }
        if let Some(c) = &self.data_cache {
            if !c.lines.is_power_of_two() || !c.line_size.is_power_of_two() {
                return bad("cache lines and line_size must be powers of two".into());
            }
            if c.line_size < 4 {
                return bad("cache line_size must be at least 4 bytes".into());
            }
            if c.hit_cycles == 0 || c.miss_cycles == 0 {
                return bad("cache latencies must be at least 1".into());
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, UarchError> {
        let config: UarchConfig = toml::from_str(text).map_err(|e| UarchError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, UarchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UarchError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Resolves a preset name or, failing that, a config file path.
    pub fn resolve(name_or_path: &str) -> Result<Self, UarchError> {
        match preset(name_or_path) {
            Ok(c) => Ok(c),
            Err(_) if Path::new(name_or_path).is_file() => Self::load(Path::new(name_or_path)),
            Err(e) => Err(e),
        }
    }

    /// Execute-stage latency of `m` given its operand values.
    pub fn exec_latency(&self, m: Mnemonic, rs1: u32, rs2: u32) -> u32 {
        if m.is_mul() {
            return self.mul_latency;
        }
        if !m.is_div() {
            return 1;
        }
        match self.div_latency {
            DivLatency::Fixed { cycles } => cycles,
            DivLatency::DataDependent => {
                let (dividend, divisor) = match m {
                    Mnemonic::Div | Mnemonic::Rem => {
                        ((rs1 as i32).unsigned_abs(), (rs2 as i32).unsigned_abs())
                    }
                    _ => (rs1, rs2),
                };
                let bitlen = |v: u32| 32 - v.leading_zeros();
                2 + bitlen(dividend).saturating_sub(bitlen(divisor)).max(1)
            }
        }
    }
}
