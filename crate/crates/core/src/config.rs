//! Hyperparameters and ablation switches.
//!
//! A [`FusionConfig`] can be built from defaults, from JSON, or from flat
//! `key = value` text (one assignment per line, `#` starts a comment).
//! Recognized keys:
//!
//! ```text
//! widths        comma-separated channel widths, one per scale (8,16,32)
//! scales        optional; must equal the number of widths
//! priors        prior tokens per scale (8)
//! heads         attention heads (4)
//! tau top_k blend kernel groups          routing and dynamic convolution
//! cwmc.window cwmc.stride cwmc.pad cwmc.kernels
//! loss.intensity loss.gradient loss.ssim loss.struct
//! ddcb_mode     full | restormer_stand_in | concat_prior
//! scfb_mode     full | single_branch | plain_conv
//! apg_mode      full | proposal_only | history_only
//! d0_mode       separate | shared | frozen
//! train.steps train.batch_size train.lr train.warmup train.seed
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::window_count;

macro_rules! switch {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            #[default]
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

switch!(
    /// Local branch of each encoder scale.
    DdcbMode { Full => "full", RestormerStandIn => "restormer_stand_in", ConcatPrior => "concat_prior" }
);
switch!(
    /// Per-scale cross-modal fusion variant.
    ScfbMode { Full => "full", SingleBranch => "single_branch", PlainConv => "plain_conv" }
);
switch!(
    /// Which terms feed the prior update.
    ApgMode { Full => "full", ProposalOnly => "proposal_only", HistoryOnly => "history_only" }
);
switch!(
    /// How the initial prior tokens are owned.
    D0Mode { Separate => "separate", Shared => "shared", Frozen => "frozen" }
);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CwmcConfig {
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
    pub kernels: usize,
}

impl Default for CwmcConfig {
    fn default() -> Self {
        Self {
            window: 4,
            stride: 2,
            pad: 1,
            kernels: 4,
        }
    }
}

impl CwmcConfig {
    pub fn windows(&self, cin: usize) -> Result<usize> {
        window_count(cin, self.window, self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub intensity: f64,
    pub gradient: f64,
    pub ssim: f64,
    #[serde(rename = "struct")]
    pub structure: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            intensity: 4.0,
            gradient: 24.0,
            ssim: 0.5,
            structure: 4.5,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            intensity: 0.0,
            gradient: 0.0,
            ssim: 0.0,
            structure: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("intensity", self.intensity),
            ("gradient", self.gradient),
            ("ssim", self.ssim),
            ("struct", self.structure),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight `{name}` must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of steps spent in linear warm-up.
    pub warmup: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            batch_size: 4,
            lr: 2e-3,
            warmup: 0.1,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub widths: Vec<usize>,
    pub priors: usize,
    pub heads: usize,
    pub tau: f64,
    pub top_k: usize,
    pub blend: f64,
    pub kernel: usize,
    pub groups: usize,
    pub cwmc: CwmcConfig,
    pub loss: LossWeights,
    pub ddcb_mode: DdcbMode,
    pub scfb_mode: ScfbMode,
    pub apg_mode: ApgMode,
    pub d0_mode: D0Mode,
    pub train: TrainConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32],
            priors: 8,
            heads: 4,
            tau: 1.0,
            top_k: 2,
            blend: 0.5,
            kernel: 3,
            groups: 1,
            cwmc: CwmcConfig::default(),
            loss: LossWeights::default(),
            ddcb_mode: DdcbMode::default(),
            scfb_mode: ScfbMode::default(),
            apg_mode: ApgMode::default(),
            d0_mode: D0Mode::default(),
            train: TrainConfig::default(),
        }
    }
}

impl FusionConfig {
    /// Two scales of width 4/8 with four prior tokens, for fast gradient checks.
    pub fn toy() -> Self {
        Self {
            widths: vec![4, 8],
            priors: 4,
            heads: 2,
            ..Self::default()
        }
    }

    pub fn scales(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.widths.is_empty() {
            return bad("at least one scale is required".into());
        }
        if self.widths[0] == 0 || self.widths.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("widths must be positive and strictly increasing, got {:?}", self.widths));
        }
        if self.priors == 0 {
            return bad("priors must be at least 1".into());
        }
        if self.heads == 0 {
            return bad("heads must be at least 1".into());
        }
        if let Some(c) = self.widths.iter().find(|&&c| c % self.heads != 0) {
            return bad(format!("width {c} is not divisible by {} heads", self.heads));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.top_k == 0 || self.top_k > self.priors {
            return bad(format!("top_k must lie in 1..={}, got {}", self.priors, self.top_k));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return bad(format!("blend must lie in [0, 1], got {}", self.blend));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel size must be odd, got {}", self.kernel));
        }
        if self.groups == 0 {
            return bad("groups must be at least 1".into());
        }
        if let Some(c) = self.widths.iter().find(|&&c| c % self.groups != 0) {
            return bad(format!("width {c} is not divisible by {} groups", self.groups));
        }
        if self.cwmc.kernels == 0 {
            return bad("cwmc.kernels must be at least 1".into());
        }
        for &c in &self.widths {
            self.cwmc.windows(2 * c)?;
        }
        self.loss.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", t.lr));
        }
        if !(0.0..1.0).contains(&t.warmup) {
            return bad(format!("train.warmup must lie in [0, 1), got {}", t.warmup));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
        }
        match key {
            "widths" => {
                self.widths = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?;
            }
            "scales" => {
                let s: usize = num(key, value)?;
                if s != self.widths.len() {
                    return Err(Error::Config(format!(
                        "scales = {s} disagrees with {} configured widths",
                        self.widths.len()
                    )));
                }
            }
            "priors" => self.priors = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "blend" => self.blend = num(key, value)?,
            "kernel" => self.kernel = num(key, value)?,
            "groups" => self.groups = num(key, value)?,
            "cwmc.window" => self.cwmc.window = num(key, value)?,
            "cwmc.stride" => self.cwmc.stride = num(key, value)?,
            "cwmc.pad" => self.cwmc.pad = num(key, value)?,
            "cwmc.kernels" => self.cwmc.kernels = num(key, value)?,
            "loss.intensity" => self.loss.intensity = num(key, value)?,
            "loss.gradient" => self.loss.gradient = num(key, value)?,
            "loss.ssim" => self.loss.ssim = num(key, value)?,
            "loss.struct" => self.loss.structure = num(key, value)?,
            "ddcb_mode" => self.ddcb_mode = value.parse()?,
            "scfb_mode" => self.scfb_mode = value.parse()?,
            "apg_mode" => self.apg_mode = value.parse()?,
            "d0_mode" => self.d0_mode = value.parse()?,
            "train.steps" => self.train.steps = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.lr" => self.train.lr = num(key, value)?,
            "train.warmup" => self.train.warmup = num(key, value)?,
            "train.seed" => self.train.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical JSON (fixed field order, no whitespace).
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("malformed configuration JSON: {e}")))
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        FusionConfig::default().validate().unwrap();
        FusionConfig::toy().validate().unwrap();
        assert_eq!(FusionConfig::default().scales(), 3);
    }

    #[test]
    fn text_overrides_and_comments() {
        let cfg = FusionConfig::from_text(
            "# toy run\nwidths = 4, 8\nscales=2\npriors = 4 # fewer tokens\nheads=2\nscfb_mode = single_branch\nloss.struct = 1.5\n",
        )
        .unwrap();
        assert_eq!(cfg.widths, vec![4, 8]);
        assert_eq!(cfg.priors, 4);
        assert_eq!(cfg.scfb_mode, ScfbMode::SingleBranch);
        assert_eq!(cfg.loss.structure, 1.5);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "nonsense = 1",
            "apg_mode = sideways",
            "widths = 16, 8",
            "top_k = 9",
            "tau = 0",
            "blend = 1.5",
            "widths = 8,16\nscales = 3",
            "no equals sign",
        ] {
            assert!(matches!(FusionConfig::from_text(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = FusionConfig::toy();
        cfg.d0_mode = D0Mode::Shared;
        let back = FusionConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.to_json().contains("\"d0_mode\":\"shared\""));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in DdcbMode::ALL {
            assert_eq!(m.as_str().parse::<DdcbMode>().unwrap(), *m);
        }
        for m in ApgMode::ALL {
            assert_eq!(m.to_string().parse::<ApgMode>().unwrap(), *m);
        }
    }
}
