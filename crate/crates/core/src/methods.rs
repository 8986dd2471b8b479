//! The regime-estimation methods compared in simulation studies.

use serde::{Deserialize, Serialize};

use crate::data::{standardize_outcomes, Dataset};
use crate::error::{Error, Result};
use crate::irl::{estimate_lambda, greedy_regime, tuned_composite_regime, CompositeSpec};
use crate::policy::{DissimilaritySpec, PrioritizedPolicy};
use crate::qreg::{Engine, FeatureBasis};
use crate::regime::{sample_simplex, CandidateClass, Regime};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Prioritized,
    /// Q-learning for one outcome (zero-based index).
    QLearn { outcome: usize },
    /// Q-learning for the unweighted mean of the outcomes.
    CompositeAverage,
    /// Q-learning for the composite whose weights are estimated from the
    /// prioritized regime.
    TunedComposite,
    Fixed { actions: Vec<usize> },
}

impl Method {
    pub const TABLE: [Method; 4] = [
        Method::Prioritized,
        Method::QLearn { outcome: 0 },
        Method::CompositeAverage,
        Method::TunedComposite,
    ];

    pub fn name(&self) -> String {
        match self {
            Method::Prioritized => "prioritized".into(),
            Method::QLearn { outcome } => format!("qlearn_y{}", outcome + 1),
            Method::CompositeAverage => "composite_average".into(),
            Method::TunedComposite => "tuned_composite".into(),
            Method::Fixed { actions } => {
                let codes: Vec<String> = actions.iter().map(usize::to_string).collect();
                format!("fixed_{}", codes.join("_"))
            }
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    /// Accepts `prioritized`, `qlearn` (first outcome), `qlearn_y<l>`,
    /// `qlearn_per_outcome`, `composite_average`, `tuned_composite`, and
    /// `fixed:<a1>,<a2>,...` or `fixed_<a1>_<a2>...` with action codes.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "prioritized" => return Ok(Method::Prioritized),
            "qlearn" | "qlearn_per_outcome" => return Ok(Method::QLearn { outcome: 0 }),
            "composite_average" | "composite" => return Ok(Method::CompositeAverage),
            "tuned_composite" | "tuned" => return Ok(Method::TunedComposite),
            _ => {}
        }
        if let Some(l) = s.strip_prefix("qlearn_y") {
            let l: usize = l.parse().map_err(|_| Error::invalid(format!("bad method `{s}`")))?;
            if l == 0 {
                return Err(Error::invalid("outcomes are numbered from 1"));
            }
            return Ok(Method::QLearn { outcome: l - 1 });
        }
        let rest = s.strip_prefix("fixed:").or_else(|| s.strip_prefix("fixed_"));
        if let Some(rest) = rest {
            let actions = rest
                .split([',', '_'])
                .map(|a| a.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::invalid(format!("bad fixed regime `{s}`")))?;
            if actions.is_empty() {
                return Err(Error::invalid("fixed regime needs at least one action"));
            }
            return Ok(Method::Fixed { actions });
        }
        Err(Error::invalid(format!(
            "unknown method `{s}` (expected prioritized, qlearn_y<l>, composite_average, tuned_composite or fixed:<codes>)"
        )))
    }
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let methods = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Method>>>()?;
    if methods.is_empty() {
        return Err(Error::invalid("no methods given"));
    }
    Ok(methods)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub basis: FeatureBasis,
    pub engine: Engine,
    pub n_lambda: usize,
    pub simplex_seed: u64,
    pub spec: DissimilaritySpec,
}

#[derive(Debug, Clone)]
pub struct FittedMethod {
    pub method: Method,
    pub regime: Regime,
    /// λ̂ of the prioritized regime, for methods that use it.
    pub lambda: Option<CompositeSpec>,
}

pub fn fit_prioritized(data: &Dataset, settings: &FitSettings) -> Result<Regime> {
    let weights = sample_simplex(settings.n_lambda, data.p_y(), settings.simplex_seed)?;
    let class = CandidateClass::new(weights, data.layout.n_actions[0])?;
    let policy = PrioritizedPolicy::fit(data, &settings.basis, &settings.engine, class, settings.spec.clone())?;
    Ok(policy.into_regime("prioritized"))
}

/// Fits every requested method on `data`. The prioritized regime is fit at
/// most once and shared with the tuned composite.
pub fn fit_methods(methods: &[Method], data: &Dataset, settings: &FitSettings) -> Result<Vec<FittedMethod>> {
    let needs_prioritized = methods
        .iter()
        .any(|m| matches!(m, Method::Prioritized | Method::TunedComposite));
    let prioritized = if needs_prioritized {
        Some(fit_prioritized(data, settings)?)
    } else {
        None
    };
    let mut lambda_cache: Option<(Dataset, CompositeSpec)> = None;
    let mut out = Vec::with_capacity(methods.len());
    for method in methods {
        let fitted = match method {
            Method::Prioritized => FittedMethod {
                method: method.clone(),
                regime: prioritized.clone().expect("fit above"),
                lambda: None,
            },
            Method::QLearn { outcome } => {
                if *outcome >= data.p_y() {
                    return Err(Error::invalid(format!("{} targets a missing outcome", method.name())));
                }
                let mut w = vec![0.0; data.p_y()];
                w[*outcome] = 1.0;
                FittedMethod {
                    method: method.clone(),
                    regime: greedy_regime(data, &w, &settings.basis, &settings.engine, method.name())?,
                    lambda: None,
                }
            }
            Method::CompositeAverage => {
                let p = data.p_y() as f64;
                let w = vec![1.0 / p; data.p_y()];
                FittedMethod {
                    method: method.clone(),
                    regime: greedy_regime(data, &w, &settings.basis, &settings.engine, method.name())?,
                    lambda: None,
                }
            }
            Method::TunedComposite => {
                if lambda_cache.is_none() {
                    let std = standardize_outcomes(data);
                    let lambda = estimate_lambda(
                        &std,
                        prioritized.as_ref().expect("fit above"),
                        &settings.basis,
                        &settings.engine,
                    )?;
                    lambda_cache = Some((std, lambda));
                }
                let (std, lambda) = lambda_cache.as_ref().unwrap();
                FittedMethod {
                    method: method.clone(),
                    regime: tuned_composite_regime(std, lambda, &settings.basis, &settings.engine)?,
                    lambda: Some(lambda.clone()),
                }
            }
            Method::Fixed { actions } => {
                if actions.len() != data.stages() {
                    return Err(Error::invalid(format!(
                        "{} has {} actions for {} stages",
                        method.name(),
                        actions.len(),
                        data.stages()
                    )));
                }
                if let Some((k, a)) = actions
                    .iter()
                    .enumerate()
                    .find(|(k, a)| **a >= data.layout.n_actions[*k])
                {
                    return Err(Error::invalid(format!("action code {a} out of range at stage {}", k + 1)));
                }
                FittedMethod {
                    method: method.clone(),
                    regime: Regime::fixed(method.name(), actions),
                    lambda: None,
                }
            }
        };
        out.push(fitted);
    }
    Ok(out)
}
