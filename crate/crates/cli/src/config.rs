//! Experiment configuration: defaults, a flat `key=value` file, and flag
//! overrides, resolved in that order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    OdeConvergence,
    SdeMoments,
    SdeParareal,
    Selftest,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::OdeConvergence => "ode-convergence",
            Experiment::SdeMoments => "sde-moments",
            Experiment::SdeParareal => "sde-parareal",
            Experiment::Selftest => "selftest",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        [
            Experiment::OdeConvergence,
            Experiment::SdeMoments,
            Experiment::SdeParareal,
            Experiment::Selftest,
        ]
        .into_iter()
        .find(|e| e.name() == s)
        .ok_or_else(|| CliError::Config(format!("unknown experiment {s:?}")))
    }
}

/// Every key accepted in a config file, in the order they are written.
pub const KEYS: [&str; 17] = [
    "experiment",
    "alpha",
    "delta",
    "beta",
    "alpha_bar",
    "zeta_perturb",
    "dt",
    "n_slabs",
    "iters",
    "t_final",
    "particles",
    "inner_dt",
    "sigma",
    "seed",
    "reps",
    "workers",
    "out_dir",
];

/// Unresolved `key -> value` settings.
pub type RawConfig = BTreeMap<String, String>;

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; unknown and repeated keys are errors.
pub fn parse_config_text(text: &str) -> Result<RawConfig, CliError> {
    let mut raw = RawConfig::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key=value", i + 1)))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(CliError::Config(format!("line {}: unknown key {key:?}", i + 1)));
        }
        if raw.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(CliError::Config(format!("line {}: repeated key {key:?}", i + 1)));
        }
    }
    Ok(raw)
}

/// A fully resolved experiment configuration.
///
/// `alpha` and `delta` are paired entry by entry; the ODE experiment sweeps
/// every pair against every `beta`. The SDE experiments take a single
/// `alpha` and ignore `delta` and `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub alpha: Vec<f64>,
    pub delta: Vec<f64>,
    pub beta: Vec<f64>,
    /// Reduced-model rate; `alpha (1 + zeta_perturb)` when unset.
    pub alpha_bar: Option<f64>,
    pub zeta_perturb: f64,
    pub dt: f64,
    pub n_slabs: usize,
    pub iters: usize,
    pub t_final: f64,
    pub particles: usize,
    pub inner_dt: f64,
    pub sigma: Vec<f64>,
    pub seed: u64,
    pub reps: usize,
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let ode = matches!(experiment, Experiment::OdeConvergence | Experiment::Selftest);
        Self {
            experiment,
            alpha: if ode { vec![-1.0, -1.0] } else { vec![1.0] },
            delta: vec![-1.0, -5.0],
            beta: vec![0.0, 1e-4, 1e-2, 1e-1, 1.0, 2.0],
            alpha_bar: None,
            zeta_perturb: 1.0,
            dt: 1.0,
            n_slabs: 10,
            iters: 10,
            t_final: 10.0,
            particles: 100_000,
            inner_dt: 0.02,
            sigma: match experiment {
                Experiment::SdeParareal => vec![0.5],
                _ => vec![0.1, 0.5, 1.0],
            },
            seed: 0,
            reps: 20,
            workers: 1,
            out_dir: PathBuf::from("."),
        }
    }

    /// Defaults overridden by `raw`. `iters` follows `n_slabs` unless set.
    pub fn resolve(experiment: Experiment, raw: &RawConfig) -> Result<Self, CliError> {
        let mut c = Self::defaults(experiment);
        for (key, value) in raw {
            let v = value.as_str();
            match key.as_str() {
                "experiment" => {}
                "alpha" => c.alpha = parse_list(key, v)?,
                "delta" => c.delta = parse_list(key, v)?,
                "beta" => c.beta = parse_list(key, v)?,
                "alpha_bar" => c.alpha_bar = if v.is_empty() { None } else { Some(parse(key, v)?) },
                "zeta_perturb" => c.zeta_perturb = parse(key, v)?,
                "dt" => c.dt = parse(key, v)?,
                "n_slabs" => c.n_slabs = parse(key, v)?,
                "iters" => c.iters = parse(key, v)?,
                "t_final" => c.t_final = parse(key, v)?,
                "particles" => c.particles = parse(key, v)?,
                "inner_dt" => c.inner_dt = parse(key, v)?,
                "sigma" => c.sigma = parse_list(key, v)?,
                "seed" => c.seed = parse(key, v)?,
                "reps" => c.reps = parse(key, v)?,
                "workers" => c.workers = parse(key, v)?,
                "out_dir" => c.out_dir = PathBuf::from(v),
                other => return Err(CliError::Config(format!("unknown key {other:?}"))),
            }
        }
        if !raw.contains_key("iters") {
            c.iters = c.n_slabs;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let finite = |name: &str, v: &[f64]| -> Result<(), CliError> {
            match v.iter().find(|x| !x.is_finite()) {
                Some(x) => Err(CliError::Config(format!("{name}: {x} is not finite"))),
                None => Ok(()),
            }
        };
        finite("alpha", &self.alpha)?;
        finite("delta", &self.delta)?;
        finite("beta", &self.beta)?;
        finite("sigma", &self.sigma)?;
        finite("alpha_bar", self.alpha_bar.as_slice())?;
        finite("zeta_perturb", &[self.zeta_perturb])?;
        if self.n_slabs == 0 {
            return bad("n_slabs must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        match self.experiment {
            Experiment::OdeConvergence => {
                if self.alpha.is_empty() || self.alpha.len() != self.delta.len() {
                    return bad(format!(
                        "alpha and delta must be non-empty lists of equal length, got {} and {}",
                        self.alpha.len(),
                        self.delta.len()
                    ));
                }
                if self.beta.is_empty() {
                    return bad("beta must list at least one value".into());
                }
                if !(self.dt > 0.0 && self.dt.is_finite()) {
                    return bad(format!("dt must be positive, got {}", self.dt));
                }
            }
            Experiment::SdeMoments | Experiment::SdeParareal => {
                if self.alpha.len() != 1 {
                    return bad(format!("SDE experiments take a single alpha, got {}", self.alpha.len()));
                }
                if self.sigma.is_empty() || self.sigma.iter().any(|s| *s < 0.0) {
                    return bad("sigma must list nonnegative values".into());
                }
                if self.particles < 2 {
                    return bad("particles must be at least 2".into());
                }
                if !(self.t_final > 0.0 && self.t_final.is_finite()) {
                    return bad(format!("t_final must be positive, got {}", self.t_final));
                }
                if !(self.inner_dt > 0.0 && self.inner_dt.is_finite()) {
                    return bad(format!("inner_dt must be positive, got {}", self.inner_dt));
                }
                let span = if self.experiment == Experiment::SdeParareal {
                    self.t_final / self.n_slabs as f64
                } else {
                    self.t_final
                };
                whole_steps(span, self.inner_dt)?;
                if self.experiment == Experiment::SdeParareal && self.reps == 0 {
                    return bad("reps must be at least 1".into());
                }
            }
            Experiment::Selftest => {}
        }
        Ok(())
    }

    /// `key=value` lines that [`parse_config_text`] and [`Self::resolve`]
    /// turn back into `self`.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let values = [
            self.experiment.to_string(),
            list(&self.alpha),
            list(&self.delta),
            list(&self.beta),
            self.alpha_bar.map(|a| a.to_string()).unwrap_or_default(),
            self.zeta_perturb.to_string(),
            self.dt.to_string(),
            self.n_slabs.to_string(),
            self.iters.to_string(),
            self.t_final.to_string(),
            self.particles.to_string(),
            self.inner_dt.to_string(),
            list(&self.sigma),
            self.seed.to_string(),
            self.reps.to_string(),
            self.workers.to_string(),
            self.out_dir.display().to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

/// Number of `step`s in `span`, which must be a whole multiple of it.
pub fn whole_steps(span: f64, step: f64) -> Result<usize, CliError> {
    let n = (span / step).round();
    if n < 1.0 || (n * step - span).abs() > 1e-9 * span {
        return Err(CliError::Config(format!(
            "time span {span} is not a whole multiple of inner_dt {step}"
        )));
    }
    Ok(n as usize)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        let mut raw = RawConfig::new();
        raw.insert("alpha".into(), "-0.3".into());
        raw.insert("delta".into(), "-7.25".into());
        raw.insert("alpha_bar".into(), "0.1".into());
        raw.insert("n_slabs".into(), "7".into());
        let c = ExperimentConfig::resolve(Experiment::OdeConvergence, &raw).unwrap();
        assert_eq!(c.iters, 7);
        let text = c.to_text();
        let back = ExperimentConfig::resolve(Experiment::OdeConvergence, &parse_config_text(&text).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn defaults_round_trip() {
        for e in [Experiment::OdeConvergence, Experiment::SdeMoments, Experiment::SdeParareal, Experiment::Selftest] {
            let c = ExperimentConfig::resolve(e, &RawConfig::new()).unwrap();
            assert_eq!(c, ExperimentConfig::defaults(e));
            let back = ExperimentConfig::resolve(e, &parse_config_text(&c.to_text()).unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn file_errors() {
        assert!(parse_config_text("# comment\n\nseed = 4\n").is_ok());
        assert!(parse_config_text("seed 4").is_err());
        assert!(parse_config_text("speed=4").is_err());
        assert!(parse_config_text("seed=4\nseed=5").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let bad = |k: &str, v: &str, e| {
            let mut raw = RawConfig::new();
            raw.insert(k.into(), v.into());
            matches!(ExperimentConfig::resolve(e, &raw), Err(CliError::Config(_)))
        };
        assert!(bad("dt", "0", Experiment::OdeConvergence));
        assert!(bad("alpha", "-1", Experiment::OdeConvergence));
        assert!(bad("inner_dt", "0.03", Experiment::SdeParareal));
        assert!(bad("particles", "1", Experiment::SdeMoments));
        assert!(bad("seed", "-1", Experiment::SdeMoments));
        assert!(bad("sigma", "nan", Experiment::SdeMoments));
        assert!(bad("workers", "0", Experiment::Selftest));
    }
}
