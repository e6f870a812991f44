use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fou::HistoryPolicy;
use crate::mc::Scenario;
use crate::merton::{UtilityConfig, UtilitySpec};

/// Settings for the L² / Var(φ) scaling ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub eps_list: Vec<f64>,
    /// Δt = ε / steps_per_eps, so every rung resolves the factor's time scale equally.
    pub steps_per_eps: f64,
    /// Stationary paths per ε for ‖η‖₂, ‖κ‖₂, ‖I‖₂.
    pub n_paths: usize,
    /// Independent histories per ε for Var(φ₀).
    pub n_histories: usize,
    /// History span for φ₀ (time units).
    pub phi_history: f64,
    pub slope_tol: f64,
    pub level_tol: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            eps_list: vec![0.5, 0.2, 0.1, 0.05, 0.02, 0.01],
            steps_per_eps: 20.0,
            n_paths: 4000,
            n_histories: 400,
            phi_history: 100.0,
            slope_tol: 0.15,
            level_tol: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimalityConfig {
    pub eps_list: Vec<f64>,
    pub n_paths: usize,
    /// Size of the canned perturbations π̃¹ (fraction of wealth).
    pub c: f64,
    pub omega: u64,
}

impl Default for OptimalityConfig {
    fn default() -> Self {
        OptimalityConfig {
            eps_list: vec![1.0, 0.1, 0.01],
            n_paths: 20_000,
            c: 5.0,
            omega: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Table1,
    Scaling,
    Optimality,
    Properties,
}

/// One experiment, fully serialisable; its JSON and SHA-256 head every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub scenario: Scenario,
    pub utility: UtilityConfig,
    pub n_paths: usize,
    pub seed: u64,
    pub omegas: Vec<u64>,
    pub eps_list: Vec<f64>,
    pub crn: bool,
    pub scaling: ScalingConfig,
    pub optimality: OptimalityConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::Table1,
            scenario: Scenario::baseline(),
            utility: UtilityConfig::Power { gamma: 0.4 },
            n_paths: 100_000,
            seed: 2019,
            omegas: vec![1, 2, 3],
            eps_list: vec![1.0, 0.1, 0.01],
            crn: true,
            scaling: ScalingConfig::default(),
            optimality: OptimalityConfig::default(),
        }
    }
}

fn check_eps(name: &str, list: &[f64]) -> Result<()> {
    if list.is_empty() {
        return Err(Error::Config(format!("{name} is empty")));
    }
    if let Some(e) = list.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
        return Err(Error::Config(format!("{name} entries must be positive, got {e}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// 500k paths, Δt = 1e-3 and M = (T/Δt)^{1.5}.
    pub fn paper_scale(mut self) -> Self {
        self.n_paths = 500_000;
        self.scenario.dt = 1e-3;
        self.scenario.history = HistoryPolicy::PaperScale;
        self
    }

    /// Checks every module precondition up front; the error names the violated one.
    pub fn validate(&self) -> Result<UtilitySpec> {
        self.scenario.validate()?;
        let u = self.utility.build()?;
        if let Some(g) = u.power_gamma() {
            if g != self.scenario.gamma {
                return Err(Error::Config(format!(
                    "utility gamma {g} differs from scenario gamma {}",
                    self.scenario.gamma
                )));
            }
        }
        if self.n_paths < 2 {
            return Err(Error::Config(format!("n_paths must be >= 2, got {}", self.n_paths)));
        }
        if self.omegas.is_empty() {
            return Err(Error::Config("omegas is empty".into()));
        }
        check_eps("eps_list", &self.eps_list)?;
        check_eps("scaling.eps_list", &self.scaling.eps_list)?;
        check_eps("optimality.eps_list", &self.optimality.eps_list)?;
        let s = &self.scaling;
        if !(s.steps_per_eps >= 1.0) || s.n_paths < 2 || s.n_histories < 2 || !(s.phi_history > 0.0) {
            return Err(Error::Config(
                "scaling needs steps_per_eps >= 1, n_paths >= 2, n_histories >= 2 and phi_history > 0".into(),
            ));
        }
        if self.optimality.n_paths < 2 || !self.optimality.c.is_finite() {
            return Err(Error::Config("optimality needs n_paths >= 2 and a finite c".into()));
        }
        Ok(u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_hash_are_stable() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        let mut d = c.clone();
        d.seed += 1;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn partial_json_fills_defaults_and_rejects_unknown_fields() {
        let c = ExperimentConfig::from_json(r#"{"seed": 7, "scenario": {"rho": 0.3}}"#).unwrap();
        assert_eq!((c.seed, c.scenario.rho, c.scenario.gamma), (7, 0.3, 0.4));
        assert!(ExperimentConfig::from_json(r#"{"sede": 7}"#).is_err());
        let m = ExperimentConfig::from_json(r#"{"scenario": {"model": {"id": "constant", "lambda": 0.5, "sigma": 0.2}}}"#).unwrap();
        assert!(m.scenario.model.is_constant());
    }

    #[test]
    fn validation_names_the_violation() {
        let mut c = ExperimentConfig::default();
        c.scenario.rho = 1.2;
        assert!(c.validate().unwrap_err().to_string().contains("rho"));
        let mut c = ExperimentConfig::default();
        c.utility = UtilityConfig::Power { gamma: 0.5 };
        assert!(c.validate().unwrap_err().to_string().contains("gamma"));
        let mut c = ExperimentConfig::default();
        c.eps_list = vec![0.1, -1.0];
        assert!(c.validate().unwrap_err().to_string().contains("eps_list"));
        assert!(ExperimentConfig::default().validate().is_ok());
        assert_eq!(ExperimentConfig::default().paper_scale().n_paths, 500_000);
    }
}
