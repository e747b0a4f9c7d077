//! Declarative run specs (TOML) and the bundled presets.

use std::collections::BTreeMap;

use panelkit::panel::{Direction, VariableTransform};
use panelkit::twfe::Dim;
use panelkit::{PanelColumn, PanelDataset};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

const DERIVE: &str = include_str!("../presets/derive.toml");

/// Bundled presets: name, description, model block.
pub const PRESETS: [(&str, &str, &str); 5] = [
    ("model1", "unemployment rate on active mines, two-way FE", include_str!("../presets/model1.toml")),
    ("models", "Models 1-6, two-way FE", include_str!("../presets/models.toml")),
    ("spatial", "Model 1 as SEM, SLM and SARAR", include_str!("../presets/spatial.toml")),
    ("htt", "Model 1 with one and two smooth factors", include_str!("../presets/htt.toml")),
    ("grouped", "Model 1 with typology-specific slopes", include_str!("../presets/grouped.toml")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    Coal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Twfe,
    Slm,
    Sem,
    Sarar,
    Htt,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Self::Twfe => "TWFE",
            Self::Slm => "SLM",
            Self::Sem => "SEM",
            Self::Sarar => "SARAR",
            Self::Htt => "HTT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimName {
    Entity,
    Year,
}

impl From<DimName> for Dim {
    fn from(d: DimName) -> Dim {
        match d {
            DimName::Entity => Dim::Entity,
            DimName::Year => Dim::Year,
        }
    }
}

fn default_coal() -> String {
    "active_mines".into()
}

fn default_seed() -> u64 {
    20220101
}

fn default_sims() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Variable whose positive values mark a coal county.
    #[serde(default = "default_coal")]
    pub coal_variable: String,
    #[serde(default)]
    pub subset: Option<Subset>,
    /// Estimation window, applied after deriving variables.
    #[serde(default)]
    pub years: Option<[i32; 2]>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Simulation draws for spatial impact standard errors.
    #[serde(default = "default_sims")]
    pub sims: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self { coal_variable: default_coal(), subset: None, years: None, seed: default_seed(), sims: default_sims() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeriveKind {
    Diff { name: String, source: String },
    Lag { name: String, source: String, k: usize },
    Lead { name: String, source: String, k: usize },
    Log { name: String, source: String },
    Ratio { name: String, num: String, den: String },
    IndicatorRatio { name: String, num: String, den: String, theta: f64 },
    Threshold {
        name: String,
        source: String,
        theta: f64,
        #[serde(default)]
        below: bool,
    },
    Interaction { name: String, a: String, b: String },
}

impl DeriveKind {
    pub fn name(&self) -> &str {
        match self {
            Self::Diff { name, .. }
            | Self::Lag { name, .. }
            | Self::Lead { name, .. }
            | Self::Log { name, .. }
            | Self::Ratio { name, .. }
            | Self::IndicatorRatio { name, .. }
            | Self::Threshold { name, .. }
            | Self::Interaction { name, .. } => name,
        }
    }

    fn transform(&self) -> Option<VariableTransform> {
        Some(match self {
            Self::Diff { source, .. } => VariableTransform::FirstDifference(source.clone()),
            Self::Lag { source, k, .. } => VariableTransform::Lag(source.clone(), *k),
            Self::Lead { source, k, .. } => VariableTransform::Lead(source.clone(), *k),
            Self::Log { source, .. } => VariableTransform::Log(source.clone()),
            Self::IndicatorRatio { num, den, theta, .. } => {
                VariableTransform::IndicatorRatio { num: num.clone(), den: den.clone(), theta: *theta }
            }
            Self::Threshold { source, theta, below, .. } => VariableTransform::Indicator {
                var: source.clone(),
                theta: *theta,
                direction: if *below { Direction::Below } else { Direction::AtLeast },
            },
            Self::Interaction { a, b, .. } => VariableTransform::Interaction(a.clone(), b.clone()),
            Self::Ratio { .. } => return None,
        })
    }

    /// Compute the column and insert it into the panel.
    pub fn apply(&self, panel: &mut PanelDataset) -> panelkit::Result<()> {
        let col = match (self, self.transform()) {
            (_, Some(t)) => panel.transform(&t)?,
            (Self::Ratio { num, den, .. }, None) => ratio(panel, num, den)?,
            _ => unreachable!("only ratio lacks a core transform"),
        };
        panel.insert_column(self.name(), col)
    }
}

/// `num / den`, masked where either side is missing or the denominator is zero.
fn ratio(panel: &PanelDataset, num: &str, den: &str) -> panelkit::Result<PanelColumn> {
    let (a, b) = (panel.column(num)?, panel.column(den)?);
    let mut values = Vec::with_capacity(a.len());
    let mut missing = Vec::with_capacity(a.len());
    for c in 0..a.len() {
        match (a.get(c), b.get(c)) {
            (Some(x), Some(y)) if y != 0.0 => {
                values.push(x / y);
                missing.push(false);
            }
            _ => {
                values.push(f64::NAN);
                missing.push(true);
            }
        }
    }
    Ok(PanelColumn::new(values, missing))
}

fn default_dims() -> Vec<DimName> {
    vec![DimName::Entity, DimName::Year]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub estimator: Estimator,
    pub dependent: String,
    pub regressors: Vec<String>,
    #[serde(default = "default_dims")]
    pub fe: Vec<DimName>,
    #[serde(default = "default_dims")]
    pub cluster: Vec<DimName>,
    #[serde(default)]
    pub subset: Option<Subset>,
    /// Number of smooth factors (HTT only).
    #[serde(default)]
    pub factors: Option<usize>,
    /// Fixed smoothing penalty (HTT only); chosen by GCV when absent.
    #[serde(default)]
    pub kappa: Option<f64>,
    /// `fips,type` labels file for grouped slopes.
    #[serde(default)]
    pub groups: Option<String>,
    /// Regressors that get one slope per group.
    #[serde(default)]
    pub grouped: Vec<String>,
    /// Horizon for the coefficient-plot table, overriding the name-based default.
    #[serde(default)]
    pub horizons: BTreeMap<String, i32>,
}

impl ModelEntry {
    /// Event-time horizon of a term: explicit entry, else `lK_` prefix = K, `fK_` = -K,
    /// else 0. Group prefixes (`Type 3:`) are ignored.
    pub fn horizon(&self, term: &str) -> i32 {
        let base = term.rsplit(':').next().unwrap_or(term);
        if let Some(&h) = self.horizons.get(base) {
            return h;
        }
        let digits = |s: &str| -> Option<i32> {
            let end = s.find('_')?;
            s[..end].parse().ok()
        };
        match base.as_bytes().first() {
            Some(b'l') => digits(&base[1..]).unwrap_or(0),
            Some(b'f') => digits(&base[1..]).map(|k| -k).unwrap_or(0),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default)]
    pub settings: Settings,
    #[serde(default, rename = "derive")]
    pub derives: Vec<DeriveKind>,
    #[serde(default, rename = "model")]
    pub models: Vec<ModelEntry>,
}

impl RunSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: RunSpec = toml::from_str(text).map_err(|e| CliError::Spec(e.to_string()))?;
        spec.check()?;
        Ok(spec)
    }

    /// The shared derivation block followed by the preset's models.
    pub fn preset(name: &str) -> Result<Self> {
        let (_, _, body) = PRESETS
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| CliError::Spec(format!("unknown preset `{name}`")))?;
        Self::parse(&format!("{DERIVE}\n{body}"))
    }

    fn check(&self) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        for m in &self.models {
            if !names.insert(&m.name) {
                return Err(CliError::Spec(format!("duplicate model name `{}`", m.name)));
            }
            if m.factors.is_some() && m.estimator != Estimator::Htt {
                return Err(CliError::Spec(format!("model `{}`: `factors` applies to htt only", m.name)));
            }
            if m.groups.is_some() != !m.grouped.is_empty() {
                return Err(CliError::Spec(format!("model `{}`: `groups` and `grouped` go together", m.name)));
            }
        }
        Ok(())
    }

    /// Apply derivations in order.
    pub fn derive(&self, panel: &mut PanelDataset) -> Result<()> {
        for d in &self.derives {
            d.apply(panel).map_err(CliError::Validation)?;
        }
        Ok(())
    }

    /// Serialized form recorded in the run manifest.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run spec serializes")
    }
}
