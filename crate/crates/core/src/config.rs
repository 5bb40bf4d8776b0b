//! JSON run configuration shared by the command line tool and the tests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::families::{
    lip_budget_mu, lip_budget_nabcd, lip_budget_rho, make_mu_polynomial_bounds, make_rho_bounds, LipBudget, MuParams,
    NabcdGamma, NabcdParams, RhoParams,
};
use crate::hypotheses::HypothesisSettings;
use crate::lab::{make_r4_example, make_test_perturbation, R4Example, ValidationSettings};
use crate::norm::NormSpec;
use crate::sampling;
use crate::scalar::ScalarFn;
use crate::solver::{GridSpec, Problem, SolverSettings};
use crate::trichotomy::BoundFamily;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FamilyConfig {
    /// `rho(t) = t`.
    Exponential {
        a: f64,
        b: f64,
        c: f64,
        d: f64,
        #[serde(rename = "D")]
        big_d: f64,
        eps: f64,
    },
    Rho(RhoParams),
    /// `mu(t) = t`.
    Polynomial {
        a: f64,
        b: f64,
        c: f64,
        d: f64,
        #[serde(rename = "D")]
        big_d: f64,
        eps: f64,
    },
    MuPolynomial(MuParams),
}

impl FamilyConfig {
    fn rho(&self) -> Option<RhoParams> {
        match *self {
            FamilyConfig::Exponential { a, b, c, d, big_d, eps } => Some(RhoParams::exponential(a, b, c, d, big_d, eps)),
            FamilyConfig::Rho(p) => Some(p),
            _ => None,
        }
    }

    fn mu(&self) -> Option<MuParams> {
        match *self {
            FamilyConfig::Polynomial { a, b, c, d, big_d, eps } => Some(MuParams::polynomial(a, b, c, d, big_d, eps)),
            FamilyConfig::MuPolynomial(p) => Some(p),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetKind {
    Zero,
    Rho,
    Nabcd,
    Mu,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub budget: BudgetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Constant `gamma`. For the `nabcd` budget an absent value selects the
    /// canonical choice anchored at `gamma_anchor`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_anchor: Option<f64>,
}

fn default_seed() -> u64 {
    sampling::DEFAULT_SEED
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub family: FamilyConfig,
    pub perturbation: PerturbationConfig,
    /// Required: the grid fixes the artifact layout.
    pub grid: GridSpec,
    #[serde(default)]
    pub norm: NormSpec,
    #[serde(default)]
    pub hypotheses: HypothesisSettings,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub validation: ValidationSettings,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hypotheses;
        let v = &self.validation;
        let tols = [
            ("hypotheses.sigma.quad_tol", h.sigma.quad_tol),
            ("hypotheses.sigma.conv_tol", h.sigma.conv_tol),
            ("hypotheses.omega.quad_tol", h.omega.quad_tol),
            ("hypotheses.omega.conv_tol", h.omega.conv_tol),
            ("hypotheses.limits.tol", h.limits.tol),
            ("solver.tol", self.solver.tol),
            ("validation.ode_tol", v.ode_tol),
            ("validation.floor", v.floor),
            ("validation.growth_tol", v.growth_tol),
        ];
        for (name, t) in tols {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        self.grid.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.norm.validate().map_err(|e| Error::Config(e.to_string()))?;
        let p = &self.perturbation;
        if p.budget != BudgetKind::Zero && p.delta.is_none() {
            return Err(Error::Config("perturbation.delta is required".into()));
        }
        let compatible = match p.budget {
            BudgetKind::Zero => true,
            BudgetKind::Rho | BudgetKind::Nabcd => self.family.rho().is_some(),
            BudgetKind::Mu => self.family.mu().is_some(),
        };
        if !compatible {
            return Err(Error::Config(format!("budget {:?} does not match the chosen family", p.budget)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON without `output_dir`.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Value::Object(m) = &mut v {
            m.remove("output_dir");
        }
        Ok(sha256_hex(canonical_json(&v).as_bytes()))
    }

    pub fn bounds(&self) -> Result<BoundFamily> {
        if let Some(p) = self.family.rho() {
            make_rho_bounds(&p)
        } else {
            make_mu_polynomial_bounds(&self.family.mu().expect("mu family"))
        }
    }

    pub fn budget(&self) -> Result<LipBudget> {
        let p = &self.perturbation;
        let delta = p.delta.unwrap_or(0.0);
        let gamma = p.gamma.unwrap_or(1.0);
        match p.budget {
            BudgetKind::Zero => Ok(LipBudget::zero()),
            BudgetKind::Rho => lip_budget_rho(&self.family.rho().expect("validated"), delta, gamma),
            BudgetKind::Mu => lip_budget_mu(&self.family.mu().expect("validated"), delta, gamma),
            BudgetKind::Nabcd => {
                let np = NabcdParams::from_rho(&self.family.rho().expect("validated"));
                let g = match p.gamma {
                    Some(c) => NabcdGamma::Function(ScalarFn::constant(c)),
                    None => NabcdGamma::RemarkDefault {
                        anchor: p.gamma_anchor.unwrap_or(0.0),
                    },
                };
                lip_budget_nabcd(&np, delta, g)
            }
        }
    }

    /// The four-dimensional example system. Only the `rho` families have one.
    pub fn example(&self) -> Result<R4Example> {
        let p = self.family.rho().ok_or_else(|| {
            Error::Config("polynomial families support hypothesis checks only; no example system is attached".into())
        })?;
        make_r4_example(&NabcdParams::from_rho(&p))
    }

    pub fn problem(&self) -> Result<Problem> {
        let ex = self.example()?;
        let budget = self.budget()?;
        let f = make_test_perturbation(budget, 4).perturbation;
        Problem::new(ex.op, ex.chart, self.bounds()?, f, self.norm)
    }

    pub fn solver_settings(&self) -> SolverSettings {
        self.solver
    }

    pub fn validation_settings(&self) -> ValidationSettings {
        ValidationSettings {
            seed: self.seed,
            ..self.validation
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    fn walk(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                Value::Object(keys.into_iter().map(|k| (k.clone(), walk(&m[k]))).collect())
            }
            Value::Array(a) => Value::Array(a.iter().map(walk).collect()),
            other => other.clone(),
        }
    }
    walk(v).to_string()
}
