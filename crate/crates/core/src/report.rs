//! Pipeline runner behind the `morseflow` binary: runs a scenario up to a
//! stage, collects embedded assertions and error objects, and renders the
//! versioned JSON report plus CSV sidecars.

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::complex::{betti, betti_twisted, build_complex, build_cover_complex, verify_d2, verify_d2_twisted, GeometricComplex, Representation};
use crate::connections::{find_all_connections, ConnectionDb};
use crate::derham::{battery_names, form_by_name, DerhamConfig, DerhamContext};
use crate::morse::Landscape;
use crate::perturb::{perturb_demo, DemoParams};
use crate::scenario::Scenario;
use crate::strata::enumerate_broken;
use crate::Error;

pub const SCHEMA_VERSION: u64 = 1;

/// Chain-map residual above which the `integrate` stage fails.
pub const CHAIN_MAP_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Critical,
    Connections,
    Complex,
    Betti,
    Integrate,
    PerturbDemo,
    All,
}

impl Stage {
    fn rank(self) -> u8 {
        match self {
            Stage::Critical => 0,
            Stage::Connections => 1,
            Stage::Complex | Stage::Betti => 2,
            Stage::Integrate => 3,
            Stage::All => 4,
            Stage::PerturbDemo => 5,
        }
    }

    fn includes(self, other: Stage) -> bool {
        match self {
            Stage::All => other != Stage::PerturbDemo,
            Stage::Integrate => matches!(other, Stage::Critical | Stage::Connections | Stage::Integrate),
            s => other.rank() <= s.rank() && other != Stage::Integrate,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Critical => "critical",
            Stage::Connections => "connections",
            Stage::Complex => "complex",
            Stage::Betti => "betti",
            Stage::Integrate => "integrate",
            Stage::PerturbDemo => "perturb-demo",
            Stage::All => "all",
        }
    }
}

/// Per-run options that are not part of the scenario.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: u64,
    /// Single form for `integrate`; the scenario's list or the default
    /// battery otherwise.
    pub form: Option<String>,
    pub degree: Option<usize>,
    pub quadrature: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    AssertionFailed,
    ValidationFailed,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::ValidationFailed => 2,
            Status::AssertionFailed => 3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: Value,
}

/// A finished run: the JSON report and the sidecar files to write next to it.
#[derive(Debug, Clone)]
pub struct Report {
    pub status: Status,
    pub json: Value,
    /// `(relative path, contents)`.
    pub sidecars: Vec<(String, String)>,
}

impl Report {
    pub fn exit_code(&self) -> i32 {
        self.status.exit_code()
    }

    pub fn render(&self) -> String {
        render_json(&self.json)
    }
}

/// Errors that stem from the input rather than from the computation.
pub fn is_validation_error(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidScenario(_) | Error::Precondition(_) | Error::NotTopDegree { .. } | Error::AlphaTooLarge { .. }
    )
}

/// Machine-readable error object.
pub fn error_object(e: &Error) -> Value {
    let mut obj = Map::new();
    obj.insert("kind".into(), json!(e.kind()));
    obj.insert("message".into(), json!(e.to_string()));
    match e {
        Error::NonTransversalSuspected { from, to, theta } => {
            obj.insert("from".into(), json!(from));
            obj.insert("to".into(), json!(to));
            obj.insert("theta".into(), json!(theta));
        }
        Error::StuckOnStableManifold { id } | Error::ChartTooSmall { id } | Error::IndexZero { id } => {
            obj.insert("id".into(), json!(id));
        }
        Error::MissingPair { from, to } | Error::MissingDeck { from, to } => {
            obj.insert("from".into(), json!(from));
            obj.insert("to".into(), json!(to));
        }
        _ => {}
    }
    Value::Object(obj)
}

struct Builder {
    body: Map<String, Value>,
    assertions: Vec<Assertion>,
    errors: Vec<Value>,
    sidecars: Vec<(String, String)>,
    validation: bool,
}

impl Builder {
    fn new(stage: Stage, scenario: Option<&str>, seed: u64) -> Self {
        let mut body = Map::new();
        body.insert("schema".into(), json!(SCHEMA_VERSION));
        body.insert("tool".into(), json!("morseflow"));
        body.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        body.insert("stage".into(), json!(stage.name()));
        body.insert("scenario".into(), json!(scenario));
        body.insert("seed".into(), json!(seed));
        Self { body, assertions: Vec::new(), errors: Vec::new(), sidecars: Vec::new(), validation: false }
    }

    fn assert(&mut self, name: impl Into<String>, passed: bool, detail: Value) {
        self.assertions.push(Assertion { name: name.into(), passed, detail });
    }

    fn fail(&mut self, e: &Error) {
        self.validation |= is_validation_error(e);
        self.errors.push(error_object(e));
    }

    fn finish(mut self) -> Report {
        let failed = self.assertions.iter().any(|a| !a.passed) || !self.errors.is_empty();
        let status = if self.validation {
            Status::ValidationFailed
        } else if failed {
            Status::AssertionFailed
        } else {
            Status::Ok
        };
        self.body.insert("assertions".into(), serde_json::to_value(&self.assertions).expect("serializable"));
        self.body.insert("errors".into(), Value::Array(self.errors));
        self.body.insert("status".into(), serde_json::to_value(status).expect("serializable"));
        Report { status, json: Value::Object(self.body), sidecars: self.sidecars }
    }
}

/// Report for an input that could not even be loaded.
pub fn validation_failure(stage: Stage, seed: u64, e: &Error) -> Report {
    let mut b = Builder::new(stage, None, seed);
    b.fail(e);
    b.validation = true;
    b.finish()
}

/// Run `scenario` up to `stage`.
pub fn run_scenario(stage: Stage, scenario: &Scenario, opts: &RunOptions) -> Report {
    let mut b = Builder::new(stage, Some(&scenario.name), opts.seed);
    if let Err(e) = pipeline(&mut b, stage, scenario, opts) {
        b.fail(&e);
    }
    b.finish()
}

fn pipeline(b: &mut Builder, stage: Stage, sc: &Scenario, opts: &RunOptions) -> crate::Result<()> {
    if let Some(form) = &opts.form {
        if stage != Stage::Integrate {
            return Err(Error::Precondition(format!("--form {form} only applies to the integrate stage")));
        }
    }
    let land = sc.landscape()?;
    b.body.insert("critical_points".into(), critical_json(&land));
    b.body.insert("ladder".into(), serde_json::to_value(&land.ladder).expect("serializable"));
    if !stage.includes(Stage::Connections) {
        return Ok(());
    }
    log::info!("searching connections for {}", sc.name);
    let db = find_all_connections(&land, &sc.connections)?;
    connections_json(b, &land, &db);
    let cx = build_complex(&land, &db)?;
    if stage.includes(Stage::Complex) {
        complex_json(b, sc, &land, &db, &cx)?;
    }
    if stage.includes(Stage::Integrate) {
        integrate_json(b, sc, &land, &db, &cx, opts)?;
    }
    Ok(())
}

fn critical_json(land: &Landscape) -> Value {
    Value::Array(
        land.points
            .iter()
            .map(|p| {
                json!({
                    "id": p.id,
                    "index": p.index,
                    "value": p.value,
                    "coords": p.coords,
                    "chart_radius": p.chart_radius,
                })
            })
            .collect(),
    )
}

fn pair_file(from: &str, to: &str) -> String {
    format!("connections/{from}__{to}.csv")
}

fn connections_json(b: &mut Builder, land: &Landscape, db: &ConnectionDb) {
    let mut pairs = Vec::new();
    for pair in &db.pairs {
        let file = pair_file(&pair.from, &pair.to);
        let signs: Vec<i32> = pair.trajectories.iter().map(|t| t.sign).collect();
        let decks: Vec<&Vec<i64>> = pair.trajectories.iter().map(|t| &t.deck).collect();
        pairs.push(json!({
            "from": pair.from,
            "to": pair.to,
            "count": pair.trajectories.len(),
            "signs": signs,
            "decks": decks,
            "incidence": pair.incidence(),
            "csv": file,
        }));
        b.sidecars.push((file, pair_csv(land, pair)));
    }
    b.body.insert("connections".into(), Value::Array(pairs));
}

/// Samples of every trajectory of a pair: rows `trajectory, s, x1..xn, h`.
fn pair_csv(land: &Landscape, pair: &crate::connections::PairConnections) -> String {
    let n = land.sys.dim();
    let mut out = String::from("trajectory,s");
    for i in 1..=n {
        let _ = write!(out, ",x{i}");
    }
    out.push_str(",h\n");
    for (t, traj) in pair.trajectories.iter().enumerate() {
        for (s, p) in &traj.samples {
            let _ = write!(out, "{t},{}", float(*s));
            for x in p {
                let _ = write!(out, ",{}", float(*x));
            }
            let _ = writeln!(out, ",{}", float(land.sys.h(p)));
        }
    }
    out
}

fn complex_json(b: &mut Builder, sc: &Scenario, land: &Landscape, db: &ConnectionDb, cx: &GeometricComplex) -> crate::Result<()> {
    let d2 = verify_d2(cx);
    b.assert("d2_zero", d2 == 0, json!({ "residual": d2 }));
    let mut twisted = Vec::new();
    for cov in &sc.covering {
        for kappa in cov.kappas() {
            let rep = Representation { m: cov.m, kappa, coordinate: cov.coordinate };
            let tc = build_cover_complex(db, cx, rep)?;
            let nonzero = verify_d2_twisted(&tc);
            b.assert(format!("d2_zero_twisted_m{}_k{}", cov.m, kappa), nonzero == 0, json!({ "nonzero_entries": nonzero }));
            twisted.push(json!({ "m": cov.m, "kappa": kappa, "betti": betti_twisted(&tc), "d2_nonzero_entries": nonzero }));
        }
    }
    let mut strata = Vec::new();
    for v in &land.points {
        for w in &land.points {
            if v.index <= w.index {
                continue;
            }
            let lattice = enumerate_broken(land, db, &v.id, &w.id)?;
            if lattice.is_empty() {
                continue;
            }
            let expected = v.index as i64 - w.index as i64 - 1;
            let top = lattice.strata.iter().filter(|s| s.codim == 0).map(|s| s.dim).max().unwrap_or(-1);
            let valid = lattice.validate().is_ok();
            b.assert(format!("strata_dim_{}_{}", v.id, w.id), top == expected && valid, json!({ "dim": top, "expected": expected }));
            strata.push(json!({
                "from": v.id,
                "to": w.id,
                "dim": top,
                "codim_histogram": lattice.codim_histogram(),
                "lattice": lattice,
            }));
        }
    }
    b.body.insert(
        "complex".into(),
        json!({
            "generators": cx.generators,
            "incidence": cx.incidence,
            "betti": betti(cx),
            "euler_characteristic": cx.euler_characteristic(),
            "d2_residual": d2,
            "twisted": twisted,
        }),
    );
    b.body.insert("strata".into(), Value::Array(strata));
    Ok(())
}

fn integrate_json(
    b: &mut Builder,
    sc: &Scenario,
    land: &Landscape,
    db: &ConnectionDb,
    cx: &GeometricComplex,
    opts: &RunOptions,
) -> crate::Result<()> {
    let names: Vec<String> = match &opts.form {
        Some(f) => vec![f.clone()],
        None if !sc.forms.is_empty() => sc.forms.clone(),
        None => battery_names(land).into_iter().map(String::from).collect(),
    };
    let resolution = opts.quadrature.unwrap_or(sc.quadrature);
    let cfg = DerhamConfig { resolution, ..Default::default() };
    let ctx = DerhamContext::new(land, db, cfg, sc.connections);
    let top = cx.top_degree();
    let mut out = Vec::new();
    for name in names {
        let form = form_by_name(land, &name)?;
        if let Some(q) = opts.degree {
            if q != form.degree {
                return Err(Error::Precondition(format!("form {name} has degree {}, not {q}", form.degree)));
            }
        }
        let ints = ctx.int_map(cx, &form, resolution)?;
        let residual = if form.degree < top {
            let chk = ctx.chain_map_residual(cx, &form, resolution)?;
            b.assert(
                format!("chain_map_{name}"),
                chk.residual < CHAIN_MAP_TOLERANCE,
                json!({ "residual": chk.residual, "tolerance": CHAIN_MAP_TOLERANCE }),
            );
            json!({ "value": chk.residual, "lhs": chk.lhs, "rhs": chk.rhs, "error_estimate": chk.error_estimate })
        } else {
            Value::Null
        };
        out.push(json!({
            "form": name,
            "degree": form.degree,
            "resolution": resolution,
            "generators": cx.generators[form.degree],
            "values": ints.iter().map(|i| i.value).collect::<Vec<_>>(),
            "error_estimates": ints.iter().map(|i| i.error_estimate).collect::<Vec<_>>(),
            "residual": residual,
        }));
    }
    b.body.insert("integrate".into(), Value::Array(out));
    Ok(())
}

/// The model-box perturbation demonstration.
pub fn run_perturb(params: DemoParams) -> Report {
    let mut b = Builder::new(Stage::PerturbDemo, None, params.seed);
    match perturb_demo(params) {
        Ok(r) => {
            b.assert("beta_integral", (r.beta_integral - r.alpha).abs() < 1e-10, json!({ "integral": r.beta_integral, "alpha": r.alpha }));
            b.assert("flow_displacement", r.displacement_error < 1e-8, json!({ "error": r.displacement_error }));
            b.assert("gradient_identity", r.gradient_identity_error < 1e-10, json!({ "error": r.gradient_identity_error }));
            b.assert(
                "unperturbed_not_transversal",
                !r.unperturbed.transversal && r.unperturbed.margin_value() < 1e-6,
                json!({ "margin": r.unperturbed.margin }),
            );
            b.assert("perturbed_transversal", r.perturbed.transversal, json!({ "margin": r.perturbed.margin }));
            b.body.insert("perturbation".into(), serde_json::to_value(&r).expect("serializable"));
        }
        Err(e) => b.fail(&e),
    }
    b.finish()
}

/// A float with 17 significant digits.
pub fn float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "null".into()
    }
}

/// Pretty JSON with every float written with 17 significant digits.
pub fn render_json(v: &Value) -> String {
    let mut out = String::new();
    write_value(v, 0, &mut out);
    out.push('\n');
    out
}

fn write_value(v: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&float(n.as_f64().unwrap_or(f64::NAN)));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            if items.iter().all(|x| matches!(x, Value::Number(_) | Value::Null | Value::Bool(_))) {
                out.push('[');
                for (i, x) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_value(x, indent, out);
                }
                out.push(']');
                return;
            }
            out.push_str("[\n");
            for (i, x) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_value(x, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            for (i, (k, x)) in map.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_value(x, indent + 1, out);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_carry_seventeen_digits() {
        let v = json!({ "a": 0.1, "b": [1, 2.5], "c": "x", "d": null, "e": [] });
        let s = render_json(&v);
        assert!(s.contains("1.0000000000000001e-1"), "{s}");
        assert!(s.contains("[1, 2.5000000000000000e0]"));
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["a"].as_f64(), Some(0.1));
        assert_eq!(float(f64::INFINITY), "null");
    }

    #[test]
    fn stages_nest() {
        assert!(Stage::All.includes(Stage::Integrate));
        assert!(Stage::Betti.includes(Stage::Complex));
        assert!(!Stage::Complex.includes(Stage::Integrate));
        assert!(Stage::Integrate.includes(Stage::Connections));
        assert!(!Stage::Integrate.includes(Stage::Complex));
        assert!(!Stage::Critical.includes(Stage::Connections));
    }

    #[test]
    fn torus_betti_report() {
        let sc = Scenario::builtin("torus").unwrap();
        let r = run_scenario(Stage::Betti, &sc, &RunOptions::default());
        assert_eq!(r.exit_code(), 0, "{}", r.render());
        assert_eq!(r.json["complex"]["betti"], json!([1, 2, 1]));
        assert_eq!(r.json["schema"], json!(1));
        assert!(r.sidecars.iter().any(|(p, _)| p == "connections/c0_0__c1_0.csv"));
    }

    #[test]
    fn upright_torus_fails_with_exit_three() {
        let sc = Scenario::builtin("upright_torus").unwrap();
        let r = run_scenario(Stage::Connections, &sc, &RunOptions::default());
        assert_eq!(r.exit_code(), 3);
        assert_eq!(r.json["errors"][0]["kind"], json!("NonTransversalSuspected"));
    }
}
