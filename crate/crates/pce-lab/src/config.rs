//! TOML scenario files.
//!
//! ```toml
//! [ou]
//! kappa = "1"            # matrices: rows separated by ';', entries by spaces
//! theta = "0"
//! sigma = "1"
//! x0 = "0"               # optional, defaults to theta
//!
//! [market]
//! Pi = "1"
//! times = [0.0, 0.5]     # entry times of insiders 1..N
//!
//! [agent.0]              # the uninformed agent
//! gamma = 3
//! omega = "1/3"          # numbers may be written as fractions
//!
//! [agent.1]
//! gamma = 3
//! omega = "1/3"
//! C = "1"
//! D = "1"
//! ```
//!
//! A `[limit]` section instead describes a family of dyadic markets; see
//! [`LimitSection`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::Deserialize;

use crate::gaussian::OuParams;
use crate::limit::{LimitSpec, Profile, StudyConfig, TimeChange};
use crate::market::{AgentSpec, InsiderSignal, MarketScenario};
use crate::{Mat, PceError, Vector};

/// Why a config file was rejected.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    /// Unreadable file, bad TOML or malformed values.
    Parse(String),
    /// Well-formed but violates scenario invariants.
    Validation(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse(m) => write!(f, "parse error: {m}"),
            ConfigError::Validation(m) => write!(f, "validation failed: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn parse_err(section: &str, key: &str, msg: impl fmt::Display) -> ConfigError {
    ConfigError::Parse(format!("[{section}] {key}: {msg}"))
}

/// A scalar written as a number or as a string such as `"1/3"` or `"-2.5e-1"`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Number {
    Float(f64),
    Int(i64),
    Text(String),
}

impl Number {
    fn value(&self) -> Result<f64, String> {
        match self {
            Number::Float(v) => Ok(*v),
            Number::Int(v) => Ok(*v as f64),
            Number::Text(s) => parse_scalar(s),
        }
    }
}

/// Parses `"a"` or `"a/b"`.
pub fn parse_scalar(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let bad = || format!("'{s}' is not a number");
    match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            if d == 0.0 {
                return Err(format!("'{s}' divides by zero"));
            }
            Ok(n / d)
        }
        None => s.parse().map_err(|_| bad()),
    }
}

/// Parses a row-major matrix `"a b; c d"`.
pub fn parse_matrix(s: &str) -> Result<Mat, String> {
    let rows: Vec<Vec<f64>> = s
        .split(';')
        .map(|r| {
            r.split_whitespace()
                .map(parse_scalar)
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let ncols = rows.first().map_or(0, Vec::len);
    if ncols == 0 {
        return Err("empty matrix".into());
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(format!(
                "row {} has {} entries, expected {ncols}",
                i + 1,
                r.len()
            ));
        }
    }
    Ok(Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Parses a vector written as one row `"a b"` or one column `"a; b"`.
pub fn parse_vector(s: &str) -> Result<Vector, String> {
    let m = parse_matrix(s)?;
    if m.nrows() == 1 || m.ncols() == 1 {
        Ok(Vector::from_iterator(m.len(), m.iter().copied()))
    } else {
        Err(format!(
            "expected a vector, got a {}x{} matrix",
            m.nrows(),
            m.ncols()
        ))
    }
}

/// A matrix written as a string or, for 1x1, a bare number. Strings always
/// go through the matrix parser, whichever variant serde picked.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MatrixText {
    Number(Number),
    Text(String),
}

impl MatrixText {
    fn matrix(&self) -> Result<Mat, String> {
        match self {
            MatrixText::Text(s) | MatrixText::Number(Number::Text(s)) => parse_matrix(s),
            MatrixText::Number(n) => Ok(Mat::from_element(1, 1, n.value()?)),
        }
    }
    fn vector(&self) -> Result<Vector, String> {
        match self {
            MatrixText::Text(s) | MatrixText::Number(Number::Text(s)) => parse_vector(s),
            MatrixText::Number(n) => Ok(Vector::from_element(1, n.value()?)),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuSection {
    pub kappa: MatrixText,
    pub theta: MatrixText,
    pub sigma: MatrixText,
    pub x0: Option<MatrixText>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    #[serde(rename = "Pi")]
    pub pi: MatrixText,
    pub times: Vec<Number>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    pub gamma: Number,
    pub omega: Number,
    /// Accepted for readability; always recomputed as `omega / gamma`.
    pub alpha: Option<Number>,
    #[serde(rename = "C")]
    pub c: Option<MatrixText>,
    #[serde(rename = "D")]
    pub d: Option<MatrixText>,
}

/// A positive function of time: a number, or `{ scale, exponent }` for
/// `scale * (1 - t)^(-exponent)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ProfileText {
    Const(Number),
    Power { scale: Number, exponent: Number },
}

impl ProfileText {
    fn profile(&self) -> Result<Profile, String> {
        Ok(match self {
            ProfileText::Const(c) => Profile::Const(c.value()?),
            ProfileText::Power { scale, exponent } => Profile::Power {
                scale: scale.value()?,
                exponent: exponent.value()?,
            },
        })
    }
}

/// Dyadic-market family and study settings.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitSection {
    pub id: Option<String>,
    /// `"identity"` or `"concave"`.
    pub tau: Option<String>,
    pub gamma: ProfileText,
    pub p: ProfileText,
    pub omega: ProfileText,
    pub gamma0: Number,
    pub omega0: Number,
    #[serde(rename = "C_I")]
    pub c_i: MatrixText,
    #[serde(rename = "D_Z")]
    pub d_z: MatrixText,
    pub levels: Vec<u32>,
    pub mc_levels: Option<Vec<u32>>,
    pub samples: Option<usize>,
    pub energy_samples: Option<usize>,
    pub grid_level: Option<u32>,
    pub t_probe: Option<f64>,
    pub t_cap: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub ou: OuSection,
    pub market: Option<MarketSection>,
    #[serde(default)]
    pub agent: BTreeMap<String, AgentSection>,
    pub limit: Option<LimitSection>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn ou(&self) -> Result<(OuParams, Vector), ConfigError> {
        let s = &self.ou;
        let kappa = s.kappa.matrix().map_err(|e| parse_err("ou", "kappa", e))?;
        let theta = s.theta.vector().map_err(|e| parse_err("ou", "theta", e))?;
        let sigma = s.sigma.matrix().map_err(|e| parse_err("ou", "sigma", e))?;
        let x0 = match &s.x0 {
            Some(v) => v.vector().map_err(|e| parse_err("ou", "x0", e))?,
            None => theta.clone(),
        };
        if x0.len() != theta.len() {
            return Err(parse_err(
                "ou",
                "x0",
                format!("length {} differs from theta", x0.len()),
            ));
        }
        let ou =
            OuParams::new(kappa, theta, sigma).map_err(|e| parse_err("ou", "kappa/sigma", e))?;
        Ok((ou, x0))
    }

    /// The market scenario, validated.
    pub fn scenario(&self) -> Result<MarketScenario, ConfigError> {
        let (ou, x0) = self.ou()?;
        let market = self
            .market
            .as_ref()
            .ok_or_else(|| ConfigError::Parse("missing [market] section".into()))?;
        let pi = market
            .pi
            .vector()
            .map_err(|e| parse_err("market", "Pi", e))?;
        let times: Vec<f64> = market
            .times
            .iter()
            .map(Number::value)
            .collect::<Result<_, _>>()
            .map_err(|e| parse_err("market", "times", e))?;
        let mut agents = Vec::new();
        for (id, key) in (0..=times.len()).map(|k| (k, k.to_string())) {
            let section = format!("agent.{key}");
            let a = self
                .agent
                .get(&key)
                .ok_or_else(|| ConfigError::Parse(format!("missing [{section}] section")))?;
            let gamma = a
                .gamma
                .value()
                .map_err(|e| parse_err(&section, "gamma", e))?;
            let omega = a
                .omega
                .value()
                .map_err(|e| parse_err(&section, "omega", e))?;
            if let Some(al) = &a.alpha {
                al.value().map_err(|e| parse_err(&section, "alpha", e))?;
            }
            let signal = if id == 0 {
                if a.c.is_some() || a.d.is_some() {
                    return Err(parse_err(
                        &section,
                        "C/D",
                        "the uninformed agent has no signal",
                    ));
                }
                None
            } else {
                let c =
                    a.c.as_ref()
                        .ok_or_else(|| parse_err(&section, "C", "missing"))?
                        .matrix()
                        .map_err(|e| parse_err(&section, "C", e))?;
                let d =
                    a.d.as_ref()
                        .ok_or_else(|| parse_err(&section, "D", "missing"))?
                        .matrix()
                        .map_err(|e| parse_err(&section, "D", e))?;
                Some(InsiderSignal {
                    time: times[id - 1],
                    c,
                    d,
                })
            };
            agents.push(AgentSpec {
                id,
                gamma,
                omega,
                signal,
            });
        }
        if let Some(extra) = self
            .agent
            .keys()
            .find(|k| k.parse::<usize>().map_or(true, |i| i > times.len()))
        {
            return Err(ConfigError::Parse(format!(
                "[agent.{extra}] does not match any of the {} entry times",
                times.len()
            )));
        }
        let s = MarketScenario { ou, x0, pi, agents };
        s.validated().map_err(|v| {
            ConfigError::Validation(
                v.iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("\n"),
            )
        })
    }

    /// The limit family and study settings, validated.
    pub fn limit(&self) -> Result<(LimitSpec, StudyConfig), ConfigError> {
        let (ou, x0) = self.ou()?;
        let l = self
            .limit
            .as_ref()
            .ok_or_else(|| ConfigError::Parse("missing [limit] section".into()))?;
        let sec = "limit";
        let tau = match l.tau.as_deref().unwrap_or("identity") {
            "identity" => TimeChange::Identity,
            "concave" => TimeChange::Concave,
            other => {
                return Err(parse_err(
                    sec,
                    "tau",
                    format!("unknown time change '{other}'"),
                ))
            }
        };
        let profile = |key: &str, p: &ProfileText| p.profile().map_err(|e| parse_err(sec, key, e));
        let d = ou.dim();
        let spec = LimitSpec {
            id: l.id.clone().unwrap_or_else(|| "limit".into()),
            tau,
            gamma: profile("gamma", &l.gamma)?,
            p: profile("p", &l.p)?,
            omega: profile("omega", &l.omega)?,
            gamma0: l.gamma0.value().map_err(|e| parse_err(sec, "gamma0", e))?,
            omega0: l.omega0.value().map_err(|e| parse_err(sec, "omega0", e))?,
            c_i: l.c_i.matrix().map_err(|e| parse_err(sec, "C_I", e))?,
            d_z: l.d_z.matrix().map_err(|e| parse_err(sec, "D_Z", e))?,
            ou,
            x0,
            pi: Vector::from_element(d, 1.0),
            n_range: l.levels.clone(),
        };
        spec.validate().map_err(|e| match e {
            PceError::InvalidSpec(m) => ConfigError::Validation(m),
            other => ConfigError::Parse(format!("[limit] {other}")),
        })?;
        let base = StudyConfig::default();
        let cfg = StudyConfig {
            samples: l.samples.unwrap_or(base.samples),
            energy_samples: l.energy_samples.unwrap_or(base.energy_samples),
            grid_level: l.grid_level.unwrap_or(base.grid_level),
            t_probe: l.t_probe.unwrap_or(base.t_probe),
            t_cap: l.t_cap.unwrap_or(base.t_cap),
            mc_levels: l.mc_levels.clone().unwrap_or(base.mc_levels),
            ..base
        };
        if cfg.mc_levels.iter().any(|&n| n > cfg.grid_level) {
            return Err(ConfigError::Validation(format!(
                "Monte Carlo levels {:?} exceed the grid level {}",
                cfg.mc_levels, cfg.grid_level
            )));
        }
        Ok((spec, cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_SIGNAL: &str = r#"
[ou]
kappa = 1
theta = 0
sigma = 1

[market]
Pi = 1
times = [0, "1/2"]

[agent.0]
gamma = 3
omega = "1/3"

[agent.1]
gamma = 3
omega = "1/3"
C = "1"
D = "1"

[agent.2]
gamma = 3
omega = "1/3"
alpha = "1/9"
C = "1"
D = "2"
"#;

    #[test]
    fn parses_the_two_signal_market() {
        let s = ConfigFile::parse(TWO_SIGNAL).unwrap().scenario().unwrap();
        assert_eq!(s, MarketScenario::two_signal_example());
    }

    #[test]
    fn matrices_and_fractions() {
        let m = parse_matrix("1 1/2; -3e-1 4").unwrap();
        assert_eq!(m, Mat::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 4.0]));
        assert!(parse_matrix("1 2; 3").unwrap_err().contains("row 2"));
        assert!(parse_scalar("1/0").is_err());
        assert_eq!(
            parse_vector("1; 2").unwrap(),
            Vector::from_vec(vec![1.0, 2.0])
        );
    }

    #[test]
    fn malformed_matrix_names_its_section() {
        let text = TWO_SIGNAL.replace("D = \"2\"", "D = \"2 1; 3\"");
        match ConfigFile::parse(&text).unwrap().scenario() {
            Err(ConfigError::Parse(m)) => assert!(m.contains("[agent.2] D"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn toml_errors_carry_line_numbers() {
        let text = TWO_SIGNAL.replace(
            "gamma = 3\nomega = \"1/3\"\n\n[agent.1]",
            "gamma = = 3\n\n[agent.1]",
        );
        match ConfigFile::parse(&text) {
            Err(ConfigError::Parse(m)) => assert!(m.contains("line"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weight_violation_is_a_validation_error() {
        let text = TWO_SIGNAL.replacen("omega = \"1/3\"", "omega = \"1/2\"", 1);
        assert!(matches!(
            ConfigFile::parse(&text).unwrap().scenario(),
            Err(ConfigError::Validation(_))
        ));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = TWO_SIGNAL.replace("[market]", "[market]\nrate = 0");
        assert!(matches!(
            ConfigFile::parse(&text),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn limit_section_round_trip() {
        let text = r#"
[ou]
kappa = 1
theta = 0
sigma = 1

[limit]
id = "power"
tau = "identity"
gamma = 0.4
omega = 0.4
p = { scale = 1, exponent = 0.75 }
gamma0 = 1
omega0 = 0.1
C_I = 1
D_Z = 1
levels = [4, 6]
samples = 100
"#;
        let (spec, cfg) = ConfigFile::parse(text).unwrap().limit().unwrap();
        assert_eq!(spec.id, "power");
        assert_eq!(
            spec.p,
            Profile::Power {
                scale: 1.0,
                exponent: 0.75
            }
        );
        assert_eq!(cfg.samples, 100);
        assert_eq!(spec.n_range, vec![4, 6]);
    }
}
