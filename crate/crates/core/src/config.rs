//! Training configuration, read from and written to TOML.
//!
//! Every section and key is optional in the file and falls back to the
//! default shown by [`TrainConfig::default`]; unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gapbridge::ObjectiveWeights;

/// Which parts of the method are active for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Raw style codes, no registration network, adversarial and contrastive
    /// terms plus the (unregistered) alignment loss.
    Baseline,
    /// Registration kept, prototype quantisation bypassed.
    RegOnly,
    /// The discriminator judges the unwarped output, so the field predictor
    /// gets no adversarial gradient.
    NoAdversarial,
    /// Registration loss without the NMI similarity term.
    NoNmi,
    /// One free style vector shared by every image.
    LearnableVector,
    /// Reference-image style at evaluation instead of the aggregator.
    DirectEncoding,
    /// The field predictor sees the generated image instead of the source.
    GenRegistration,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::Baseline,
        Ablation::RegOnly,
        Ablation::NoAdversarial,
        Ablation::NoNmi,
        Ablation::LearnableVector,
        Ablation::DirectEncoding,
        Ablation::GenRegistration,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::RegOnly => "reg_only",
            Ablation::NoAdversarial => "no_adversarial",
            Ablation::NoNmi => "no_nmi",
            Ablation::LearnableVector => "learnable_vector",
            Ablation::DirectEncoding => "direct_encoding",
            Ablation::GenRegistration => "gen_registration",
            Ablation::Full => "full",
        }
    }

    pub fn uses_registration(self) -> bool {
        self != Ablation::Baseline
    }

    pub fn uses_bank(self) -> bool {
        !matches!(
            self,
            Ablation::Baseline | Ablation::RegOnly | Ablation::LearnableVector
        )
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

/// Image the contrastive loss anchors generated features to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentAnchor {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Adversarial terms in `reg_only` mode.
    pub reg_only_adversarial: bool,
    /// Epoch checkpoints retained besides `last`; 0 keeps all.
    pub keep_checkpoints: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 4,
            seed: 7,
            ablation: Ablation::Full,
            reg_only_adversarial: true,
            keep_checkpoints: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr_d: f64,
    pub lr_gr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            lr_d: 2e-4,
            lr_gr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleSection {
    pub prototypes: usize,
    pub tau: f64,
    pub momentum: f64,
}

impl Default for StyleSection {
    fn default() -> Self {
        Self {
            prototypes: 16,
            tau: 0.1,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub gamma_nmi: f64,
    pub lambda_cont: f64,
    pub lambda_align: f64,
    pub lambda_reg: f64,
    pub lambda_smooth: f64,
    /// Weight of the aggregator's distillation towards the training-time style.
    pub lambda_distill: f64,
    pub nmi_bins: usize,
    /// Histogram transition width (bins) of the NMI inside the registration
    /// loss. Wider than the metric's so the field gets a usable gradient.
    pub nmi_ramp: f64,
    pub nce_temperature: f64,
    pub nce_patches: usize,
    pub content_anchor: ContentAnchor,
    pub perceptual_seed: u64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            gamma_nmi: 1.01,
            lambda_cont: 1.0,
            lambda_align: 1.0,
            lambda_reg: 1.0,
            lambda_smooth: 1.0,
            lambda_distill: 1.0,
            nmi_bins: 32,
            nmi_ramp: crate::gapbridge::LOSS_NMI_RAMP,
            nce_temperature: 0.07,
            nce_patches: 128,
            content_anchor: ContentAnchor::Source,
            perceptual_seed: crate::gapbridge::DEFAULT_PERCEPTUAL_SEED,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub run: RunSection,
    pub optim: OptimSection,
    pub style: StyleSection,
    pub loss: LossSection,
}

impl TrainConfig {
    pub fn with_ablation(ablation: Ablation) -> Self {
        let mut c = Self::default();
        c.run.ablation = ablation;
        c
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            cont: self.loss.lambda_cont,
            align: self.loss.lambda_align,
            reg: self.loss.lambda_reg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let r = &self.run;
        if r.epochs == 0 || r.batch_size == 0 {
            return bad(format!(
                "epochs and batch_size must be positive, got {} and {}",
                r.epochs, r.batch_size
            ));
        }
        if r.seed > i64::MAX as u64 || self.loss.perceptual_seed > i64::MAX as u64 {
            return bad("seeds must not exceed i64::MAX".into());
        }
        let o = &self.optim;
        for (name, v) in [("lr_d", o.lr_d), ("lr_gr", o.lr_gr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", o.beta1), ("beta2", o.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        let s = &self.style;
        if s.prototypes == 0 || !(s.tau > 0.0) || !(0.0..=1.0).contains(&s.momentum) {
            return bad(format!(
                "style: need prototypes >= 1, tau > 0, momentum in [0, 1]; got {}, {}, {}",
                s.prototypes, s.tau, s.momentum
            ));
        }
        let l = &self.loss;
        for (name, v) in [
            ("lambda_cont", l.lambda_cont),
            ("lambda_align", l.lambda_align),
            ("lambda_reg", l.lambda_reg),
            ("lambda_smooth", l.lambda_smooth),
            ("lambda_distill", l.lambda_distill),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(l.gamma_nmi > 1.0) {
            return bad(format!("gamma_nmi must exceed 1, got {}", l.gamma_nmi));
        }
        if !(l.nmi_ramp > 0.0 && l.nmi_ramp <= 1.0) {
            return bad(format!("nmi_ramp must lie in (0, 1], got {}", l.nmi_ramp));
        }
        if l.nmi_bins < 2 || l.nce_patches == 0 || !(l.nce_temperature > 0.0) {
            return bad(format!(
                "need nmi_bins >= 2, nce_patches >= 1, nce_temperature > 0; got {}, {}, {}",
                l.nmi_bins, l.nce_patches, l.nce_temperature
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.run.epochs, 60);
        assert_eq!(c.style.prototypes, 16);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = TrainConfig::from_toml("[run]\nablation = \"no_nmi\"\nepochs = 5\n").unwrap();
        assert_eq!(c.run.ablation, Ablation::NoNmi);
        assert_eq!(c.run.epochs, 5);
        assert_eq!(c.loss, LossSection::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(TrainConfig::from_toml("[loss]\nlambda_cnt = 1.0\n").is_err());
        assert!(TrainConfig::from_toml("[loss]\nlambda_cont = -1.0\n").is_err());
        assert!(TrainConfig::from_toml("[run]\nablation = \"mystery\"\n").is_err());
        assert!(TrainConfig::from_toml("[loss]\ngamma_nmi = 1.0\n").is_err());
    }

    #[test]
    fn ablation_names_parse() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
    }
}
