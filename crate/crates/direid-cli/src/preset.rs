//! The ablation presets: each row of the component study as a
//! one-command reproduction.

use clap::ValueEnum;

/// Which ablation configuration to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// The complete pipeline: both stages, learned attention, fused
    /// features.
    Full,
    /// Skip the decomposition stage entirely (random content encoder,
    /// no attention cue).
    NoDil,
    /// Single-branch content encoder instead of the multi-scale one.
    NoMultiScale,
    /// Full training, but attention weights forced to one.
    NoAttention,
    /// Full training, evaluated on the invariant feature alone.
    FInvOnly,
    /// Full training, evaluated on the weighted sensitive feature
    /// alone.
    FSenOnly,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::NoDil => "no-dil",
            Preset::NoMultiScale => "no-multi-scale",
            Preset::NoAttention => "no-attention",
            Preset::FInvOnly => "f-inv-only",
            Preset::FSenOnly => "f-sen-only",
        }
    }
}
