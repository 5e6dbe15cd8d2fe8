//! Scenario files: a manifold model, a Morse function from the built-in
//! catalog and the stage configurations, parsed from JSON and validated.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::connections::ConnectionConfig;
use crate::flow::FlowConfig;
use crate::geometry::{ManifoldModel, RoundSphere, TorusOfRevolution};
use crate::morse::{AmbientQuadratic, CosSum, Landscape, MorseConfig, MorseFunction, MorseSystem, StandardQuadratic};
use crate::{Error, Result};

/// Function names understood by [`Scenario::system`].
pub const FUNCTION_CATALOG: [&str; 5] =
    ["cos_sum", "torus_height", "sphere_height", "peanut_height", "standard_model_k"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Standard { dim: usize, index: usize },
    FlatTorus { periods: Vec<f64> },
    TorusOfRevolution { major: f64, minor: f64 },
    RoundSphere {
        radius: f64,
        /// Polar axis of the coordinate chart; defaults to a tilted axis.
        #[serde(default)]
        axis: Option<[f64; 3]>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSpec {
    pub name: String,
    #[serde(default)]
    pub params: Map<String, Value>,
}

/// An `m`-fold cyclic covering along one periodic coordinate, with the
/// characters `κ` to twist by (all of `0..m` when omitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoveringSpec {
    pub coordinate: usize,
    pub m: u32,
    #[serde(default)]
    pub kappas: Option<Vec<u32>>,
}

impl CoveringSpec {
    pub fn kappas(&self) -> Vec<u32> {
        self.kappas.clone().unwrap_or_else(|| (0..self.m).collect())
    }
}

fn default_density() -> usize {
    16
}

fn default_quadrature() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub model: ModelSpec,
    pub function: FunctionSpec,
    #[serde(default = "default_density")]
    pub grid_density: usize,
    #[serde(default)]
    pub morse: MorseConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub connections: ConnectionConfig,
    #[serde(default)]
    pub covering: Vec<CoveringSpec>,
    /// Form names from the de Rham catalog; empty means the default battery.
    #[serde(default)]
    pub forms: Vec<String>,
    #[serde(default = "default_quadrature")]
    pub quadrature: usize,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidScenario(msg.into())
}

fn param_f64(params: &Map<String, Value>, key: &str, default: f64) -> Result<f64> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| invalid(format!("parameter {key} must be a finite number"))),
    }
}

fn param_vec(params: &Map<String, Value>, key: &str, default: &[f64]) -> Result<Vec<f64>> {
    match params.get(key) {
        None => Ok(default.to_vec()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_f64().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| invalid(format!("parameter {key} must be an array of finite numbers"))),
        Some(_) => Err(invalid(format!("parameter {key} must be an array"))),
    }
}

fn direction(params: &Map<String, Value>, default: [f64; 3]) -> Result<Vector3<f64>> {
    let d = param_vec(params, "direction", &default)?;
    if d.len() != 3 {
        return Err(invalid("direction must have three components"));
    }
    let v = Vector3::new(d[0], d[1], d[2]);
    if v.norm() == 0.0 {
        return Err(invalid("direction must be nonzero"));
    }
    Ok(v)
}

fn positive(x: f64, what: &str) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{what} must be positive and finite")))
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut s: Scenario = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        s.connections.flow = s.flow;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Bundled scenario by name: `torus`, `peanut`, `round_sphere` or
    /// `upright_torus`.
    pub fn builtin(name: &str) -> Result<Self> {
        let text = match name {
            "torus" => include_str!("../../../scenarios/torus.json"),
            "peanut" => include_str!("../../../scenarios/peanut.json"),
            "round_sphere" => include_str!("../../../scenarios/round_sphere.json"),
            "upright_torus" => include_str!("../../../scenarios/upright_torus.json"),
            other => return Err(invalid(format!("unknown bundled scenario {other}"))),
        };
        Self::from_json(text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(invalid("empty scenario name"));
        }
        if !FUNCTION_CATALOG.contains(&self.function.name.as_str()) {
            return Err(invalid(format!("unknown function {}", self.function.name)));
        }
        if self.grid_density == 0 || self.grid_density > 4096 {
            return Err(invalid("grid_density must be in 1..=4096"));
        }
        if self.quadrature < 8 || self.quadrature > 1 << 16 {
            return Err(invalid("quadrature must be in 8..=65536"));
        }
        self.flow.validate().map_err(|e| invalid(e.to_string()))?;
        let c = &self.connections;
        if c.scan_resolution < 4 || c.scan_resolution > 1 << 16 {
            return Err(invalid("scan_resolution must be in 4..=65536"));
        }
        for (v, what) in [
            (c.root_tol, "root_tol"),
            (c.slope_tol, "slope_tol"),
            (c.dedupe_tol, "dedupe_tol"),
            (c.capture_radius, "capture_radius"),
            (c.seed_radius, "seed_radius"),
            (c.scan_radius, "scan_radius"),
        ] {
            positive(v, what)?;
        }
        let m = &self.morse;
        for (v, what) in [
            (m.newton_tol, "newton_tol"),
            (m.degeneracy_tol, "degeneracy_tol"),
            (m.merge_radius, "merge_radius"),
            (m.chart_tol, "chart_tol"),
            (m.chart_radius_max, "chart_radius_max"),
            (m.chart_radius_min, "chart_radius_min"),
            (m.value_cluster_tol, "value_cluster_tol"),
            (m.standard_box, "standard_box"),
        ] {
            positive(v, what)?;
        }
        if m.max_newton_iter == 0 || m.max_newton_iter > 10_000 {
            return Err(invalid("max_newton_iter must be in 1..=10000"));
        }
        match &self.model {
            ModelSpec::Standard { dim, index } => {
                if *dim == 0 || *dim > 16 || index > dim {
                    return Err(invalid("standard model needs 1 <= dim <= 16 and index <= dim"));
                }
            }
            ModelSpec::FlatTorus { periods } => {
                if periods.is_empty() || periods.len() > 16 {
                    return Err(invalid("flat torus needs 1..=16 periods"));
                }
                for p in periods {
                    positive(*p, "period")?;
                }
            }
            ModelSpec::TorusOfRevolution { major, minor } => {
                positive(*major, "major radius")?;
                positive(*minor, "minor radius")?;
                if minor >= major {
                    return Err(invalid("minor radius must be below the major radius"));
                }
            }
            ModelSpec::RoundSphere { radius, axis } => {
                positive(*radius, "radius")?;
                if let Some(a) = axis {
                    if a.iter().any(|x| !x.is_finite()) || a.iter().all(|x| *x == 0.0) {
                        return Err(invalid("axis must be finite and nonzero"));
                    }
                }
            }
        }
        let dim = self.model_dim();
        for c in &self.covering {
            if c.m == 0 || c.m > 64 {
                return Err(invalid("covering modulus must be in 1..=64"));
            }
            if c.coordinate >= dim {
                return Err(invalid("covering coordinate out of range"));
            }
            if c.kappas().iter().any(|k| *k >= c.m) {
                return Err(invalid("covering characters must lie in 0..m"));
            }
            if !matches!(self.model, ModelSpec::FlatTorus { .. }) {
                return Err(invalid("coverings are supported on flat tori only"));
            }
        }
        // Build once to surface parameter and compatibility errors.
        self.function_for(&self.model_for()?)?;
        Ok(())
    }

    fn model_dim(&self) -> usize {
        match &self.model {
            ModelSpec::Standard { dim, .. } => *dim,
            ModelSpec::FlatTorus { periods } => periods.len(),
            _ => 2,
        }
    }

    fn model_for(&self) -> Result<ManifoldModel> {
        Ok(match &self.model {
            ModelSpec::Standard { dim, index } => ManifoldModel::standard(*dim, *index)?,
            ModelSpec::FlatTorus { periods } => ManifoldModel::flat_torus(periods.clone())?,
            ModelSpec::TorusOfRevolution { major, minor } => {
                ManifoldModel::embedded(Arc::new(TorusOfRevolution { major: *major, minor: *minor }))
            }
            ModelSpec::RoundSphere { radius, axis } => {
                let sphere = match axis {
                    Some(a) => RoundSphere::with_axis(*radius, Vector3::new(a[0], a[1], a[2])),
                    None => RoundSphere::new(*radius),
                };
                ManifoldModel::embedded(Arc::new(sphere))
            }
        })
    }

    fn function_for(&self, model: &ManifoldModel) -> Result<Arc<dyn MorseFunction>> {
        let p = &self.function.params;
        let name = self.function.name.as_str();
        let mismatch = || invalid(format!("function {name} does not fit model {:?}", self.model));
        Ok(match (name, &self.model) {
            ("cos_sum", ModelSpec::FlatTorus { periods }) => {
                let amplitudes = param_vec(p, "amplitudes", &vec![1.0; periods.len()])?;
                if amplitudes.len() != periods.len() || amplitudes.iter().any(|a| *a == 0.0) {
                    return Err(invalid("cos_sum needs one nonzero amplitude per period"));
                }
                if periods.iter().any(|q| (q - 2.0 * std::f64::consts::PI).abs() > 1e-12) {
                    return Err(invalid("cos_sum needs periods 2π"));
                }
                Arc::new(CosSum { amplitudes })
            }
            ("standard_model_k", ModelSpec::Standard { dim, index }) => {
                Arc::new(StandardQuadratic { dim: *dim, index: *index })
            }
            ("torus_height", ModelSpec::TorusOfRevolution { .. }) => Arc::new(AmbientQuadratic {
                name: name.into(),
                embedding: model.embedding().ok_or_else(mismatch)?.clone(),
                linear: direction(p, [1.0, 0.0, 0.0])?,
                quadratic: Matrix3::zeros(),
            }),
            ("sphere_height", ModelSpec::RoundSphere { .. }) => Arc::new(AmbientQuadratic {
                name: name.into(),
                embedding: model.embedding().ok_or_else(mismatch)?.clone(),
                linear: direction(p, [0.0, 0.0, 1.0])?,
                quadratic: Matrix3::zeros(),
            }),
            ("peanut_height", ModelSpec::RoundSphere { .. }) => {
                // h = z + a x²: two maxima, one saddle, one minimum for a > 1/2.
                let a = param_f64(p, "a", 1.0)?;
                if a <= 0.5 {
                    return Err(invalid("peanut_height needs a > 1/2"));
                }
                Arc::new(AmbientQuadratic {
                    name: name.into(),
                    embedding: model.embedding().ok_or_else(mismatch)?.clone(),
                    linear: Vector3::new(0.0, 0.0, 1.0),
                    quadratic: Matrix3::from_diagonal(&Vector3::new(2.0 * a, 0.0, 0.0)),
                })
            }
            _ => return Err(mismatch()),
        })
    }

    pub fn system(&self) -> Result<MorseSystem> {
        let model = self.model_for()?;
        let func = self.function_for(&model)?;
        Ok(MorseSystem::new(model, func))
    }

    pub fn landscape(&self) -> Result<Landscape> {
        Landscape::analyze(self.system()?, self.grid_density, &self.morse)
    }

    /// Same scenario with both flow tolerances replaced.
    pub fn with_flow_tol(mut self, tol: f64) -> Result<Self> {
        positive(tol, "flow tolerance")?;
        self.flow = self.flow.with_tol(tol);
        self.connections.flow = self.flow;
        self.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse() {
        for name in ["torus", "peanut", "round_sphere", "upright_torus"] {
            let s = Scenario::builtin(name).unwrap();
            assert!(s.system().is_ok(), "{name}");
        }
    }

    #[test]
    fn unknown_function_is_rejected() {
        let text = r#"{"name":"x","model":{"kind":"flat_torus","periods":[6.283185307179586,6.283185307179586]},
            "function":{"name":"nope"}}"#;
        let err = Scenario::from_json(text).unwrap_err();
        assert!(err.to_string().contains("unknown function"), "{err}");
    }

    #[test]
    fn incompatible_model_is_rejected() {
        let text = r#"{"name":"x","model":{"kind":"standard","dim":2,"index":1},"function":{"name":"cos_sum"}}"#;
        assert!(matches!(Scenario::from_json(text), Err(Error::InvalidScenario(_))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{"name":"x","model":{"kind":"standard","dim":2,"index":1},
            "function":{"name":"standard_model_k"},"bogus":1}"#;
        assert!(Scenario::from_json(text).is_err());
    }

    #[test]
    fn peanut_census() {
        let land = Scenario::builtin("peanut").unwrap().landscape().unwrap();
        let idx: Vec<usize> = land.points.iter().map(|p| p.index).collect();
        assert_eq!(idx, vec![2, 2, 1, 0]);
    }
}
