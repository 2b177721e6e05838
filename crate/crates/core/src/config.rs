//! Experiment configuration and method variants.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{check_seed_budget, ClassSchedule, DomainSpec};
use crate::model::DEFAULT_FEATURES;
use crate::{Error, Result};

/// A domain given either by built-in name or spelled out in full.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum DomainRef {
    Named(String),
    Custom(DomainSpec),
}

// Not derived: an untagged enum buffers its input, and buffered maps lose the
// string-to-integer key conversion the palette needs.
impl<'de> Deserialize<'de> for DomainRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(n) => Ok(DomainRef::Named(n)),
            v => DomainSpec::deserialize(v)
                .map(DomainRef::Custom)
                .map_err(D::Error::custom),
        }
    }
}

impl DomainRef {
    pub fn resolve(&self, field: &str) -> Result<DomainSpec> {
        match self {
            DomainRef::Custom(d) => Ok(d.clone()),
            DomainRef::Named(n) => builtin_domain(n).ok_or_else(|| {
                Error::config(
                    field,
                    format!(
                        "unknown domain `{n}` (built-in: {})",
                        BUILTIN_DOMAINS.join(", ")
                    ),
                )
            }),
        }
    }
}

pub const BUILTIN_DOMAINS: [&str; 4] = ["dayville", "duskton", "nightburg", "fogmouth"];

pub fn builtin_domain(name: &str) -> Option<DomainSpec> {
    match name {
        "dayville" => Some(DomainSpec::dayville()),
        "duskton" => Some(DomainSpec::duskton()),
        "nightburg" => Some(DomainSpec::nightburg()),
        "fogmouth" => Some(DomainSpec::fogmouth()),
        _ => None,
    }
}

/// Which of the four objectives are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub ce_n: bool,
    pub ce_o: bool,
    pub lws_n: bool,
    pub kd_o: bool,
}

impl LossMask {
    pub const ALL: LossMask = LossMask {
        ce_n: true,
        ce_o: true,
        lws_n: true,
        kd_o: true,
    };
    pub const CE_N: LossMask = LossMask {
        ce_n: true,
        ce_o: false,
        lws_n: false,
        kd_o: false,
    };

    fn bits(&self) -> String {
        [self.ce_n, self.ce_o, self.lws_n, self.kd_o]
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }
}

/// A training recipe. Canonical names: `full`, `ft`, `ft_selfstyle`,
/// `no_kd_o`, `no_style`, and `mask:XXXX` where the four bits switch
/// `ce_n ce_o lws_n kd_o`. A `+plcur` suffix adds the current style to the
/// pseudo-labelling views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub losses: LossMask,
    /// Fourier stylization of training views. Off means every view is the
    /// raw image.
    pub stylize: bool,
    pub pseudo_with_current: bool,
    name: String,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        let (base, plcur) = match s.strip_suffix("+plcur") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let (losses, stylize) = match base {
            "full" => (LossMask::ALL, true),
            "ft" => (LossMask::CE_N, false),
            "ft_selfstyle" => (LossMask::CE_N, true),
            "no_kd_o" => (
                LossMask {
                    kd_o: false,
                    ..LossMask::ALL
                },
                true,
            ),
            "no_style" => (LossMask::ALL, false),
            _ => {
                let bits = base
                    .strip_prefix("mask:")
                    .filter(|b| b.len() == 4 && b.chars().all(|c| c == '0' || c == '1'))
                    .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}`")))?;
                let b: Vec<bool> = bits.chars().map(|c| c == '1').collect();
                (
                    LossMask {
                        ce_n: b[0],
                        ce_o: b[1],
                        lws_n: b[2],
                        kd_o: b[3],
                    },
                    true,
                )
            }
        };
        if !losses.ce_n {
            return Err(Error::config(
                "variant",
                "the current-step cross-entropy cannot be switched off",
            ));
        }
        Ok(Self {
            losses,
            stylize,
            pseudo_with_current: plcur,
            name: s.to_string(),
        })
    }

    pub fn full() -> Self {
        Self::parse("full").unwrap()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Mask form of the loss selection, e.g. `1011`.
    pub fn mask_bits(&self) -> String {
        self.losses.bits()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Loss weights for the old-domain CE, the pseudo-label term and the
/// distillation term. The current-step CE always has weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub ce_o: f64,
    pub lws_n: f64,
    pub kd_o: f64,
}

impl Lambdas {
    pub fn from_array(l: [f64; 3]) -> Self {
        Self {
            ce_o: l[0],
            lws_n: l[1],
            kd_o: l[2],
        }
    }

    /// Weights with switched-off terms zeroed.
    pub fn masked(&self, mask: LossMask) -> Self {
        Self {
            ce_o: if mask.ce_o { self.ce_o } else { 0.0 },
            lws_n: if mask.lws_n { self.lws_n } else { 0.0 },
            kd_o: if mask.kd_o { self.kd_o } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schedule: ClassSchedule,
    pub domain_sequence: Vec<DomainRef>,
    pub external_domain: DomainRef,
    pub h: usize,
    pub w: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta: f64,
    pub tau: f64,
    pub topk_frac: f64,
    pub lambdas: [f64; 3],
    pub seed: u64,
    pub variant: String,
    pub output_dir: PathBuf,
}

const KEYS: [&str; 16] = [
    "schedule",
    "domain_sequence",
    "external_domain",
    "h",
    "w",
    "n_train",
    "n_eval",
    "epochs",
    "lr",
    "beta",
    "tau",
    "topk_frac",
    "lambdas",
    "seed",
    "variant",
    "output_dir",
];

impl Default for ExperimentConfig {
    /// The reference benchmark: three domains, three class splits, 64x64.
    fn default() -> Self {
        Self {
            schedule: ClassSchedule::three_way(),
            domain_sequence: ["dayville", "duskton", "nightburg"]
                .map(|n| DomainRef::Named(n.into()))
                .to_vec(),
            external_domain: DomainRef::Named("fogmouth".into()),
            h: 64,
            w: 64,
            n_train: 200,
            n_eval: 50,
            epochs: 15,
            lr: 0.1,
            beta: 0.01,
            tau: 0.9,
            topk_frac: 0.66,
            lambdas: [10.0, 10.0, 10.0],
            seed: 1234,
            variant: "full".into(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::config("$", format!("invalid JSON at line {}: {e}", e.line())))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::config("$", "expected a JSON object"))?;
        for k in obj.keys() {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::config(k.as_str(), "unknown key"));
            }
        }
        for k in KEYS {
            if !obj.contains_key(k) {
                return Err(Error::config(k, "missing key"));
            }
        }
        for k in KEYS {
            let field = obj[k].clone();
            let res = match k {
                "schedule" => serde_json::from_value::<ClassSchedule>(field).map(drop),
                "domain_sequence" => serde_json::from_value::<Vec<DomainRef>>(field).map(drop),
                "external_domain" => serde_json::from_value::<DomainRef>(field).map(drop),
                _ => Ok(()),
            };
            res.map_err(|e| Error::config(k, e.to_string()))?;
        }
        let cfg: Self =
            serde_json::from_value(value).map_err(|e| Error::config("$", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.schedule.check_covers_scene_classes()?;
        if self.domain_sequence.len() != self.schedule.num_steps() {
            return Err(Error::config(
                "domain_sequence",
                format!(
                    "{} domains for {} class sets",
                    self.domain_sequence.len(),
                    self.schedule.num_steps()
                ),
            ));
        }
        let domains = self.domains()?;
        for (i, d) in domains.iter().enumerate() {
            d.validate(&self.schedule, &format!("domain_sequence[{i}]"))?;
        }
        self.external()?
            .validate(&self.schedule, "external_domain")?;
        for (name, v) in [("h", self.h), ("w", self.w)] {
            if v < 32 || !v.is_power_of_two() {
                return Err(Error::config(
                    name,
                    format!("{v} is not a power of two >= 32"),
                ));
            }
        }
        for (name, v) in [
            ("n_train", self.n_train),
            ("n_eval", self.n_eval),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        check_seed_budget(self.schedule.num_steps(), self.n_train, self.n_eval)
            .map_err(|e| Error::config("n_train", e.to_string()))?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be a positive finite number"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::config(
                "beta",
                format!("{} is outside (0, 1)", self.beta),
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config(
                "tau",
                format!("{} is outside (0, 1]", self.tau),
            ));
        }
        if !(0.0..=1.0).contains(&self.topk_frac) {
            return Err(Error::config(
                "topk_frac",
                format!("{} is outside [0, 1]", self.topk_frac),
            ));
        }
        for (i, l) in self.lambdas.iter().enumerate() {
            if !(*l >= 0.0 && l.is_finite()) {
                return Err(Error::config(
                    format!("lambdas[{i}]"),
                    format!("{l} is not a finite value >= 0"),
                ));
            }
        }
        Variant::parse(&self.variant)?;
        Ok(())
    }

    pub fn domains(&self) -> Result<Vec<DomainSpec>> {
        self.domain_sequence
            .iter()
            .enumerate()
            .map(|(i, d)| d.resolve(&format!("domain_sequence[{i}]")))
            .collect()
    }

    pub fn external(&self) -> Result<DomainSpec> {
        self.external_domain.resolve("external_domain")
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(&self.variant)
    }

    pub fn lambdas(&self) -> Lambdas {
        Lambdas::from_array(self.lambdas)
    }

    pub fn features(&self) -> usize {
        DEFAULT_FEATURES
    }
}
