//! Run configuration: a TOML document whose `[game]` table holds every
//! primitive of the game and whose other tables hold solver, simulation and
//! Nash-gap settings.
//!
//! Matrices are written as arrays of rows (`A0 = [[-1, -1], [1, 0]]`), a
//! bare number stands for a 1×1 matrix, and vectors are flat arrays.

use mmlqg::{GameParameters64, Mat64, MinorType, PopulationMode, Vector64};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

/// A dense matrix in row-major nested form.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixValue(pub Vec<Vec<f64>>);

impl MatrixValue {
    pub fn from_mat(m: &Mat64) -> Self {
        MatrixValue(m.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    pub fn to_mat(&self, name: &str) -> Result<Mat64, ConfigError> {
        let rows = self.0.len();
        let cols = self.0.first().map_or(0, Vec::len);
        if let Some(bad) = self.0.iter().position(|r| r.len() != cols) {
            return Err(ConfigError(format!(
                "matrix {name}: row {bad} has {} entries, expected {cols}",
                self.0[bad].len()
            )));
        }
        Ok(Mat64::from_row_iterator(rows, cols, self.0.iter().flatten().copied()))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MatrixRepr {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl<'de> Deserialize<'de> for MatrixValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = MatrixRepr::deserialize(d).map_err(|e: D::Error| {
            if e.to_string().contains("untagged") {
                serde::de::Error::custom("expected a number or an array of rows")
            } else {
                e
            }
        })?;
        match repr {
            MatrixRepr::Scalar(x) => Ok(MatrixValue(vec![vec![x]])),
            MatrixRepr::Rows(r) => Ok(MatrixValue(r)),
        }
    }
}

impl Serialize for MatrixValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeConfig {
    #[serde(rename = "A")]
    pub a: MatrixValue,
    #[serde(rename = "B")]
    pub b: MatrixValue,
    #[serde(rename = "L1")]
    pub l1: MatrixValue,
    #[serde(rename = "L2")]
    pub l2: MatrixValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    pub rho: f64,
    pub eta0: Vec<f64>,
    pub eta: Vec<f64>,
    /// Type distribution; uniform when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<Vec<f64>>,
    #[serde(rename = "A0")]
    pub a0: MatrixValue,
    #[serde(rename = "B0")]
    pub b0: MatrixValue,
    #[serde(rename = "D0")]
    pub d0: MatrixValue,
    #[serde(rename = "G")]
    pub g: MatrixValue,
    #[serde(rename = "D")]
    pub d: MatrixValue,
    #[serde(rename = "Q0")]
    pub q0: MatrixValue,
    #[serde(rename = "R0")]
    pub r0: MatrixValue,
    #[serde(rename = "Q")]
    pub q: MatrixValue,
    #[serde(rename = "R")]
    pub r: MatrixValue,
    #[serde(rename = "H0")]
    pub h0: MatrixValue,
    #[serde(rename = "H1")]
    pub h1: MatrixValue,
    #[serde(rename = "H2")]
    pub h2: MatrixValue,
    #[serde(rename = "L0")]
    pub l0: MatrixValue,
    pub sigma_v0: MatrixValue,
    pub sigma_v: MatrixValue,
    /// Initial-state covariance; zero when omitted.
    #[serde(rename = "Sigma_init", default, skip_serializing_if = "Option::is_none")]
    pub sigma_init: Option<MatrixValue>,
    pub types: Vec<TypeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    pub care_tol: f64,
    pub care_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = mmlqg::FixedPointOptions::<f64>::default();
        SolverConfig {
            tol: o.tol,
            max_iter: o.max_iter,
            damping: o.damping,
            care_tol: o.care_tol,
            care_max_iter: o.care_max_iter,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> mmlqg::FixedPointOptions<f64> {
        mmlqg::FixedPointOptions {
            damping: self.damping,
            tol: self.tol,
            max_iter: self.max_iter,
            care_tol: self.care_tol,
            care_max_iter: self.care_max_iter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopulationConfig {
    Proportional,
    Sampled,
}

impl From<PopulationConfig> for PopulationMode {
    fn from(p: PopulationConfig) -> Self {
        match p {
            PopulationConfig::Proportional => PopulationMode::Proportional,
            PopulationConfig::Sampled => PopulationMode::Sampled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    /// Number of minor agents.
    pub n: usize,
    pub dt: f64,
    pub horizon: f64,
    /// Realizations written by `simulate`, one directory per path when
    /// more than one.
    pub paths: usize,
    pub stationary_gains: bool,
    pub population: PopulationConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n: 100,
            dt: 0.01,
            horizon: 25.0,
            paths: 1,
            stationary_gains: false,
            population: PopulationConfig::Proportional,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NashGapConfig {
    pub n_schedule: Vec<usize>,
    pub paths: usize,
    /// Index of the deviating minor agent.
    pub agent: usize,
    pub gain_scales: Vec<f64>,
    pub offset_shifts: Vec<f64>,
}

impl Default for NashGapConfig {
    fn default() -> Self {
        NashGapConfig {
            n_schedule: vec![5, 20, 50, 100],
            paths: 500,
            agent: 0,
            gain_scales: vec![0.5, 0.9, 1.1, 1.5],
            offset_shifts: vec![-0.03, -0.01, 0.01, 0.03],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub game: GameConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub nash_gap: NashGapConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Rewrites serde's backquoted messages into `missing field: X` and
/// `unknown key: X` forms.
fn tidy_message(msg: &str) -> String {
    let quoted = |rest: &str| rest.split('`').nth(1).map(str::to_owned);
    if let Some(rest) = msg.strip_prefix("missing field ") {
        if let Some(name) = quoted(rest) {
            return format!("missing field: {name}");
        }
    }
    if let Some(rest) = msg.strip_prefix("unknown field ") {
        if let Some(name) = quoted(rest) {
            return format!("unknown key: {name}");
        }
    }
    if let Some(rest) = msg.strip_prefix("unknown variant ") {
        if let Some(name) = quoted(rest) {
            return format!("unknown value: {name}");
        }
    }
    msg.trim().to_owned()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(tidy_message(e.message())))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable as TOML")
    }

    /// The built-in two-dimensional scenario with 100 minor agents.
    pub fn reference_scenario() -> Self {
        RunConfig {
            seed: 0,
            out: default_out(),
            game: GameConfig::from_params(&GameParameters64::reference_scenario()),
            solver: SolverConfig::default(),
            simulation: SimulationConfig::default(),
            nash_gap: NashGapConfig::default(),
        }
    }

    pub fn params(&self) -> Result<GameParameters64, ConfigError> {
        self.game.to_params()
    }
}

impl GameConfig {
    pub fn from_params(p: &GameParameters64) -> Self {
        let m = MatrixValue::from_mat;
        GameConfig {
            rho: p.rho,
            eta0: p.eta0.iter().copied().collect(),
            eta: p.eta.iter().copied().collect(),
            pi: Some(p.pi.clone()),
            a0: m(&p.a0),
            b0: m(&p.b0),
            d0: m(&p.d0),
            g: m(&p.g),
            d: m(&p.d),
            q0: m(&p.q0),
            r0: m(&p.r0),
            q: m(&p.q),
            r: m(&p.r),
            h0: m(&p.h0),
            h1: m(&p.h1),
            h2: m(&p.h2),
            l0: m(&p.l0),
            sigma_v0: m(&p.sigma_v0),
            sigma_v: m(&p.sigma_v),
            sigma_init: Some(m(&p.sigma_init)),
            types: p
                .types
                .iter()
                .map(|t| TypeConfig { a: m(&t.a), b: m(&t.b), l1: m(&t.l1), l2: m(&t.l2) })
                .collect(),
        }
    }

    pub fn to_params(&self) -> Result<GameParameters64, ConfigError> {
        if self.types.is_empty() {
            return Err(ConfigError("types: at least one minor agent type is required".into()));
        }
        let a0 = self.a0.to_mat("A0")?;
        let n = a0.nrows();
        let k = self.types.len();
        let types = self
            .types
            .iter()
            .enumerate()
            .map(|(i, t)| {
                Ok(MinorType {
                    a: t.a.to_mat(&format!("types[{i}].A"))?,
                    b: t.b.to_mat(&format!("types[{i}].B"))?,
                    l1: t.l1.to_mat(&format!("types[{i}].L1"))?,
                    l2: t.l2.to_mat(&format!("types[{i}].L2"))?,
                })
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        let p = GameParameters64 {
            a0,
            b0: self.b0.to_mat("B0")?,
            d0: self.d0.to_mat("D0")?,
            types,
            g: self.g.to_mat("G")?,
            d: self.d.to_mat("D")?,
            q0: self.q0.to_mat("Q0")?,
            r0: self.r0.to_mat("R0")?,
            q: self.q.to_mat("Q")?,
            r: self.r.to_mat("R")?,
            h0: self.h0.to_mat("H0")?,
            h1: self.h1.to_mat("H1")?,
            h2: self.h2.to_mat("H2")?,
            eta0: Vector64::from_vec(self.eta0.clone()),
            eta: Vector64::from_vec(self.eta.clone()),
            rho: self.rho,
            l0: self.l0.to_mat("L0")?,
            sigma_v0: self.sigma_v0.to_mat("sigma_v0")?,
            sigma_v: self.sigma_v.to_mat("sigma_v")?,
            pi: self.pi.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]),
            sigma_init: match &self.sigma_init {
                Some(s) => s.to_mat("Sigma_init")?,
                None => Mat64::zeros(n, n),
            },
        };
        p.check_dimensions().map_err(|e| ConfigError(e.to_string()))?;
        Ok(p)
    }
}
