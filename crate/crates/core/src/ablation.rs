//! Switches that disable or replace individual components.

use core::fmt;
use core::str::FromStr;

use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    NoSemanticEmbedding,
    NoGlobalToken,
    NoStrictMasking,
    SoftMask,
    NoSemanticToken,
    NoStagewise,
    NoFreqBranch,
    NoGate,
    SharedMoe,
    NoDecoupleGate,
    NoSpatialRouter,
    NoDcCorrection,
    NoDualBranch,
    NoFreqLoss,
    NoMaskOverload,
    NoBaseLoss,
}

impl Variant {
    pub const ALL: [Variant; 16] = [
        Variant::NoSemanticEmbedding,
        Variant::NoGlobalToken,
        Variant::NoStrictMasking,
        Variant::SoftMask,
        Variant::NoSemanticToken,
        Variant::NoStagewise,
        Variant::NoFreqBranch,
        Variant::NoGate,
        Variant::SharedMoe,
        Variant::NoDecoupleGate,
        Variant::NoSpatialRouter,
        Variant::NoDcCorrection,
        Variant::NoDualBranch,
        Variant::NoFreqLoss,
        Variant::NoMaskOverload,
        Variant::NoBaseLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoSemanticEmbedding => "no_semantic_embedding",
            Variant::NoGlobalToken => "no_global_token",
            Variant::NoStrictMasking => "no_strict_masking",
            Variant::SoftMask => "soft_mask",
            Variant::NoSemanticToken => "no_semantic_token",
            Variant::NoStagewise => "no_stagewise",
            Variant::NoFreqBranch => "no_freq_branch",
            Variant::NoGate => "no_gate",
            Variant::SharedMoe => "shared_moe",
            Variant::NoDecoupleGate => "no_decouple_gate",
            Variant::NoSpatialRouter => "no_spatial_router",
            Variant::NoDcCorrection => "no_dc_correction",
            Variant::NoDualBranch => "no_dual_branch",
            Variant::NoFreqLoss => "no_freq_loss",
            Variant::NoMaskOverload => "no_mask_overload",
            Variant::NoBaseLoss => "no_base_loss",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Invalid(alloc::format!("unknown ablation variant {s:?}")))
    }
}

/// Resolved component switches; the default is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_semantic_embedding: bool,
    pub no_global_token: bool,
    pub no_strict_masking: bool,
    pub soft_mask: bool,
    pub no_semantic_token: bool,
    pub no_stagewise: bool,
    pub no_freq_branch: bool,
    pub no_gate: bool,
    pub shared_moe: bool,
    pub no_decouple_gate: bool,
    pub no_spatial_router: bool,
    pub no_dc_correction: bool,
    pub no_dual_branch: bool,
    pub no_freq_loss: bool,
    pub no_mask_overload: bool,
    pub no_base_loss: bool,
}

impl Ablation {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn with(mut self, v: Variant) -> Self {
        match v {
            Variant::NoSemanticEmbedding => self.no_semantic_embedding = true,
            Variant::NoGlobalToken => self.no_global_token = true,
            Variant::NoStrictMasking => self.no_strict_masking = true,
            Variant::SoftMask => self.soft_mask = true,
            Variant::NoSemanticToken => self.no_semantic_token = true,
            Variant::NoStagewise => self.no_stagewise = true,
            Variant::NoFreqBranch => self.no_freq_branch = true,
            Variant::NoGate => self.no_gate = true,
            Variant::SharedMoe => self.shared_moe = true,
            Variant::NoDecoupleGate => self.no_decouple_gate = true,
            Variant::NoSpatialRouter => self.no_spatial_router = true,
            Variant::NoDcCorrection => self.no_dc_correction = true,
            Variant::NoDualBranch => self.no_dual_branch = true,
            Variant::NoFreqLoss => self.no_freq_loss = true,
            Variant::NoMaskOverload => self.no_mask_overload = true,
            Variant::NoBaseLoss => self.no_base_loss = true,
        }
        self
    }

    pub fn from_variant(v: Variant) -> Self {
        Self::default().with(v)
    }

    /// Every switch that is on.
    pub fn active(&self) -> alloc::vec::Vec<Variant> {
        Variant::ALL.iter().copied().filter(|v| self.with(*v) == *self).collect()
    }
}
