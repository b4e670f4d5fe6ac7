//! Config-driven runs: strict JSON scenario files, validation with field
//! paths, and the artifacts each command produces.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::base_capacity::{base_capacity_paths, cobb_douglas_k, quadratic_offset_c, BaseCapacitySpec};
use crate::dp::{build_lattice, dp_solve, oracle_gap, DpConfig, OracleConfig};
use crate::error::{invalid, FuelError, Result};
use crate::estimate::{Estimate, McConfig};
use crate::eval::{build_plan, kkt_report, net_profit, tracking_cost, Dynamics, FirmSpec, KktConfig, OuterPaths, PlanModifier};
use crate::paths::{make_grid, simulate_fuel, simulate_shock, FuelModel, PathEnsemble, ShockModel, TimeGrid};
use crate::policy::{admissibility_report, allocation_weights, nfirm_policy, InvestmentPlan};
use crate::profit::ProfitModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioTag {
    BankGeneral,
    Quadratic,
    CobbSingle,
    CobbNfirm,
}

/// Built-in deviations from the closed-form plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Perturbation {
    /// Firm 0 holds an extra `0.1 theta0` from the first step on.
    EarlyOverinvestment,
    /// Base capacities inflated by half, clamped by the fuel.
    FuelOvershoot,
    /// Never invest.
    Frozen,
}

impl Perturbation {
    pub fn modifier(self, theta0: f64) -> PlanModifier {
        match self {
            Perturbation::EarlyOverinvestment => PlanModifier::ExtraJump { firm: 0, amount: 0.1 * theta0 },
            Perturbation::FuelOvershoot => PlanModifier::ScaledBase { factor: 1.5 },
            Perturbation::Frozen => PlanModifier::Frozen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirmConfig {
    /// Cobb-Douglas exponent; absent for the tracking problem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_max: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloConfig {
    pub n_paths: usize,
    pub inner_paths: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Outer states per checked time in condition 1.
    pub states: usize,
    pub taus: Vec<f64>,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        let k = KktConfig::default();
        MonteCarloConfig {
            n_paths: 4096,
            inner_paths: k.inner_paths,
            seed: 1,
            tolerance: k.tolerance,
            states: k.states,
            taus: k.taus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpSection {
    /// Lattice steps; the scenario grid's horizon is kept.
    pub n_steps: Option<usize>,
    pub fuel_levels: usize,
    pub rel_tol: f64,
    pub memory_budget_bytes: u64,
}

impl Default for DpSection {
    fn default() -> Self {
        let o = OracleConfig::default();
        DpSection { n_steps: None, fuel_levels: o.fuel_levels, rel_tol: o.rel_tol, memory_budget_bytes: o.memory_budget_bytes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: String,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { directory: "out".into(), formats: vec![Format::Json, Format::Csv] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioTag,
    pub shock: ShockModel,
    pub fuel: FuelModel,
    pub discount: f64,
    pub firms: Vec<FirmConfig>,
    pub grid: GridConfig,
    #[serde(default)]
    pub mc: MonteCarloConfig,
    #[serde(default)]
    pub dp: DpSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<Perturbation>,
    #[serde(default)]
    pub outputs: OutputConfig,
}

/// Parses a config, reporting syntax and schema errors as `line:column: message`.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    serde_json::from_str(text).map_err(|e| invalid(format!("{}:{}: {}", e.line(), e.column(), e)))
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| FuelError::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        FuelError::InvalidArgument(m) => invalid(format!("{}:{m}", path.display())),
        other => other,
    })
}

fn field<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        FuelError::InvalidArgument(m) => invalid(format!("{name}: {m}")),
        other => other,
    })
}

impl ScenarioConfig {
    /// Checks every parameter domain before anything is simulated.
    pub fn validate(&self) -> Result<()> {
        field("shock", self.shock.validate())?;
        field("fuel", self.fuel.validate())?;
        field("grid", make_grid(self.grid.t_max, self.grid.n_steps).map(|_| ()))?;
        if !(self.discount.is_finite() && self.discount > 0.0) {
            return Err(invalid(format!("discount: must be > 0, got {}", self.discount)));
        }
        if self.firms.is_empty() {
            return Err(invalid("firms: need at least one firm"));
        }
        let quadratic = self.scenario == ScenarioTag::Quadratic;
        for (i, f) in self.firms.iter().enumerate() {
            if !(f.y.is_finite() && f.y > 0.0) {
                return Err(invalid(format!("firms[{i}].y: must be > 0, got {}", f.y)));
            }
            match (quadratic, f.alpha) {
                (true, Some(_)) => return Err(invalid(format!("firms[{i}].alpha: not used by the tracking problem"))),
                (false, None) => return Err(invalid(format!("firms[{i}].alpha: required"))),
                (false, Some(alpha)) => field(&format!("firms[{i}].alpha"), ProfitModel::CobbDouglas { alpha }.validate())?,
                (true, None) => {}
            }
        }
        let geometric = self.shock.is_geometric();
        let n = self.firms.len();
        let shape = match self.scenario {
            ScenarioTag::Quadratic => (!geometric && n == 1).then_some(()).ok_or("needs an arithmetic shock and one firm"),
            ScenarioTag::CobbSingle => (geometric && n == 1 && matches!(self.fuel, FuelModel::Constant { .. }))
                .then_some(())
                .ok_or("needs a geometric shock, one firm and a constant fuel"),
            ScenarioTag::BankGeneral => (geometric && n == 1).then_some(()).ok_or("needs a geometric shock and one firm"),
            ScenarioTag::CobbNfirm => (geometric && n >= 2).then_some(()).ok_or("needs a geometric shock and at least two firms"),
        };
        shape.map_err(|m| invalid(format!("scenario: {m}")))?;
        let theta0 = self.fuel.theta0();
        let sum_y: f64 = self.firms.iter().map(|f| f.y).sum();
        if sum_y >= theta0 {
            return Err(FuelError::InfeasibleInitialization(format!(
                "firms: sum of y = {sum_y} must be below fuel.theta0 = {theta0}"
            )));
        }
        let mc = &self.mc;
        if mc.n_paths < 2 {
            return Err(invalid(format!("mc.n_paths: need at least 2, got {}", mc.n_paths)));
        }
        if mc.inner_paths < 2 {
            return Err(invalid(format!("mc.inner_paths: need at least 2, got {}", mc.inner_paths)));
        }
        if !(mc.tolerance > 0.0) {
            return Err(invalid(format!("mc.tolerance: must be > 0, got {}", mc.tolerance)));
        }
        if mc.states < 2 {
            return Err(invalid(format!("mc.states: need at least 2, got {}", mc.states)));
        }
        let grid = self.time_grid()?;
        for (i, &tau) in mc.taus.iter().enumerate() {
            if grid.node_index(tau).is_none() {
                return Err(invalid(format!("mc.taus[{i}]: {tau} is not a grid node")));
            }
        }
        if self.dp.fuel_levels < 2 {
            return Err(invalid(format!("dp.fuel_levels: need at least 2, got {}", self.dp.fuel_levels)));
        }
        if !(self.dp.rel_tol >= 0.0) {
            return Err(invalid(format!("dp.rel_tol: must be >= 0, got {}", self.dp.rel_tol)));
        }
        if let Some(0) = self.dp.n_steps {
            return Err(invalid("dp.n_steps: must be positive"));
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        make_grid(self.grid.t_max, self.grid.n_steps)
    }

    pub fn profits(&self) -> Vec<ProfitModel> {
        self.firms
            .iter()
            .map(|f| match f.alpha {
                Some(alpha) => ProfitModel::CobbDouglas { alpha },
                None => ProfitModel::QuadraticTracking,
            })
            .collect()
    }

    /// Closed-form base capacities: `k X` with `k` from the negative root,
    /// or `W - sigma / sqrt(2 delta)` for the tracking problem.
    pub fn bases(&self) -> Result<Vec<BaseCapacitySpec>> {
        let delta = self.discount;
        let sigma = self.shock.sigma();
        self.firms
            .iter()
            .map(|f| match f.alpha {
                Some(alpha) => Ok(BaseCapacitySpec::ScaledShock { k: cobb_douglas_k(alpha, self.shock.log_drift(), sigma, delta)? }),
                None => Ok(BaseCapacitySpec::ShiftedBrownian { c: sigma / (2.0 * delta).sqrt() }),
            })
            .collect()
    }

    /// Markov description of the (possibly perturbed) closed-form plan.
    pub fn dynamics(&self) -> Result<Dynamics> {
        let firms = self
            .profits()
            .into_iter()
            .zip(self.bases()?)
            .zip(&self.firms)
            .map(|((profit, base), f)| FirmSpec { profit, base, y: f.y })
            .collect();
        let d = Dynamics::new(self.shock, self.fuel, firms, self.discount)?;
        match self.perturb {
            Some(p) => d.with_modifier(p.modifier(self.fuel.theta0())),
            None => Ok(d),
        }
    }

    fn kkt_config(&self) -> KktConfig {
        KktConfig {
            inner_paths: self.mc.inner_paths,
            tolerance: self.mc.tolerance,
            taus: self.mc.taus.clone(),
            states: self.mc.states,
            seed: self.mc.seed,
        }
    }
}

/// One output file, held in memory until written.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub format: Format,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub artifacts: Vec<Artifact>,
    /// Whether every verdict the command computes passed.
    pub verdict: bool,
}

impl RunOutcome {
    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    /// Writes the artifacts whose format is requested, creating `dir`.
    pub fn write(&self, dir: &Path, formats: &[Format]) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for a in self.artifacts.iter().filter(|a| formats.contains(&a.format)) {
            let path = dir.join(&a.name);
            std::fs::write(&path, &a.bytes)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Pretty JSON with sorted keys and shortest round-trip floats.
pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let v = serde_json::to_value(value).map_err(|e| invalid(e.to_string()))?;
    let mut bytes = serde_json::to_vec_pretty(&v).map_err(|e| invalid(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn json_artifact<T: Serialize>(name: &str, value: &T) -> Result<Artifact> {
    Ok(Artifact { name: name.into(), format: Format::Json, bytes: to_json(value)? })
}

fn csv_artifact(name: &str, e: &PathEnsemble) -> Result<Artifact> {
    let mut bytes = Vec::new();
    e.write_csv(&mut bytes)?;
    Ok(Artifact { name: name.into(), format: Format::Csv, bytes })
}

fn plan_artifacts(plan: &InvestmentPlan) -> Result<Vec<Artifact>> {
    if plan.n_firms() == 1 {
        return Ok(vec![csv_artifact("policy.csv", plan.firm(0))?]);
    }
    (0..plan.n_firms()).map(|i| csv_artifact(&format!("policy_{i}.csv"), plan.firm(i))).collect()
}

fn objective(cfg: &ScenarioConfig, plan: &InvestmentPlan, shock: &PathEnsemble) -> Result<serde_json::Value> {
    if cfg.scenario == ScenarioTag::Quadratic {
        let cost = tracking_cost(plan, shock, cfg.discount)?;
        Ok(json!({ "tracking_cost": cost }))
    } else {
        let p = net_profit(plan, shock, &cfg.profits(), cfg.discount, &cfg.shock)?;
        Ok(json!({ "net_profit": p }))
    }
}

/// Simulates the shock and fuel, applies the closed-form policy on the
/// grid nodes, and reports its objective and admissibility.
pub fn simulate(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let grid = cfg.time_grid()?;
    let seed = cfg.mc.seed;
    let shock = simulate_shock(&cfg.shock, &grid, cfg.mc.n_paths, seed)?;
    let theta = simulate_fuel(&cfg.fuel, &grid, cfg.mc.n_paths, seed)?;
    let bases = cfg.bases()?;
    let ls = bases.iter().map(|b| base_capacity_paths(b, &cfg.shock, &shock)).collect::<Result<Vec<_>>>()?;
    let ks: Vec<f64> = bases
        .iter()
        .map(|b| match *b {
            BaseCapacitySpec::ScaledShock { k } => k,
            BaseCapacitySpec::ShiftedBrownian { .. } => 1.0,
        })
        .collect();
    let y: Vec<f64> = cfg.firms.iter().map(|f| f.y).collect();
    let plan = nfirm_policy(&ls, &allocation_weights(&ks)?, &theta, &y)?;
    let adm = admissibility_report(&plan, &theta)?;
    let mut summary = objective(cfg, &plan, &shock)?;
    summary["admissible"] = json!(adm.admissible());
    summary["scenario"] = json!(cfg.scenario);
    let mut artifacts = vec![json_artifact("profit.json", &summary)?];
    artifacts.extend(plan_artifacts(&plan)?);
    artifacts.push(csv_artifact("shock.csv", &shock)?);
    artifacts.push(csv_artifact("fuel.csv", &theta)?);
    Ok(RunOutcome { artifacts, verdict: adm.admissible() })
}

/// Runs the Kuhn-Tucker verifier on the configured scenario.
pub fn verify_kkt(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let grid = cfg.time_grid()?;
    let dynamics = cfg.dynamics()?;
    let outer = OuterPaths::simulate(&dynamics, &grid, cfg.mc.n_paths, cfg.mc.seed)?;
    let report = kkt_report(tag_name(cfg.scenario), &dynamics, &outer, &cfg.kkt_config())?;
    let plan = build_plan(&dynamics, &outer)?.plan;
    let mut summary = objective(cfg, &plan, &outer.shock)?;
    summary["scenario"] = json!(cfg.scenario);
    let mut artifacts = vec![json_artifact("kkt.json", &report)?, json_artifact("profit.json", &summary)?];
    artifacts.extend(plan_artifacts(&plan)?);
    Ok(RunOutcome { artifacts, verdict: report.verdict })
}

fn dp_grid(cfg: &ScenarioConfig) -> Result<TimeGrid> {
    make_grid(cfg.grid.t_max, cfg.dp.n_steps.unwrap_or(cfg.grid.n_steps))
}

/// Solves the lattice dynamic program.
pub fn solve_dp(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let grid = dp_grid(cfg)?;
    let lattice = build_lattice(&cfg.shock, &grid)?;
    let y: Vec<f64> = cfg.firms.iter().map(|f| f.y).collect();
    let dcfg = DpConfig { fuel_levels: cfg.dp.fuel_levels, memory_budget_bytes: cfg.dp.memory_budget_bytes };
    let sol = dp_solve(&lattice, &cfg.fuel, &cfg.profits(), &y, cfg.discount, &dcfg)?;
    let summary = json!({
        "scenario": cfg.scenario,
        "value": sol.value,
        "orientation": sol.orientation,
        "fuel_grid": sol.policy.fuel_grid(),
        "n_steps": grid.n_steps(),
        "up_probability": lattice.p(),
    });
    let mut table = Vec::new();
    sol.policy.write_csv(&mut table)?;
    Ok(RunOutcome {
        artifacts: vec![
            json_artifact("dp.json", &summary)?,
            Artifact { name: "dp_policy.csv".into(), format: Format::Csv, bytes: table },
        ],
        verdict: true,
    })
}

/// Monte Carlo calibration of the tracking offset against `1 / sqrt(2 delta)`.
pub fn calibrate_c(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let mc = McConfig::new(cfg.mc.n_paths, cfg.time_grid()?, cfg.mc.seed);
    let est: Estimate = quadratic_offset_c(cfg.discount, &mc)?;
    let closed = (2.0 * cfg.discount).sqrt().recip();
    let pass = est.within(closed, cfg.mc.tolerance);
    let summary = json!({
        "delta": cfg.discount,
        "estimate": est,
        "closed_form": closed,
        "tolerance": cfg.mc.tolerance,
        "pass": pass,
    });
    Ok(RunOutcome { artifacts: vec![json_artifact("offset.json", &summary)?], verdict: pass })
}

/// Oracle gap between the dynamic program and the closed-form policy.
pub fn compare(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let grid = dp_grid(cfg)?;
    let ocfg = OracleConfig {
        fuel_levels: cfg.dp.fuel_levels,
        n_paths: cfg.mc.n_paths,
        seed: cfg.mc.seed,
        rel_tol: cfg.dp.rel_tol,
        memory_budget_bytes: cfg.dp.memory_budget_bytes,
    };
    let gap = oracle_gap(&cfg.dynamics()?, &grid, &ocfg)?;
    let mut summary = serde_json::to_value(&gap).map_err(|e| invalid(e.to_string()))?;
    summary["scenario"] = json!(cfg.scenario);
    summary["rel_tol"] = json!(cfg.dp.rel_tol);
    Ok(RunOutcome { artifacts: vec![json_artifact("oracle_gap.json", &summary)?], verdict: gap.pass })
}

fn tag_name(tag: ScenarioTag) -> &'static str {
    match tag {
        ScenarioTag::BankGeneral => "bank-general",
        ScenarioTag::Quadratic => "quadratic",
        ScenarioTag::CobbSingle => "cobb-single",
        ScenarioTag::CobbNfirm => "cobb-nfirm",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "scenario": "cobb-single",
        "shock": {"kind": "geometric-brownian", "x0": 1.0, "mu": 0.0, "sigma": 0.3},
        "fuel": {"kind": "constant", "theta0": 1.6},
        "discount": 1.0,
        "firms": [{"alpha": 0.5, "y": 0.2}],
        "grid": {"t_max": 4.0, "n_steps": 40},
        "mc": {"n_paths": 64, "inner_paths": 8, "states": 8, "taus": [0.0, 1.0]}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.mc.seed, 1);
        assert_eq!(cfg.outputs.directory, "out");
        assert_eq!(cfg.dp.fuel_levels, 101);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let text = MINIMAL.replace("\"discount\"", "\"discont\"");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("discont"), "{err}");
        assert!(err.contains("5:"), "{err}");
        let text = MINIMAL.replace("\"mu\": 0.0", "\"mu\": 0.0, \"drift\": 1");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn bad_alpha_names_field_and_interval() {
        let text = MINIMAL.replace("\"alpha\": 0.5", "\"alpha\": 1.5");
        let err = parse_config(&text).unwrap().validate().unwrap_err().to_string();
        assert!(err.contains("firms[0].alpha") && err.contains("(0, 1)"), "{err}");
    }

    #[test]
    fn scenario_shape_is_checked() {
        let text = MINIMAL.replace("\"constant\", \"theta0\": 1.6", "\"affine\", \"theta0\": 1.6, \"rate\": 0.1");
        let err = parse_config(&text).unwrap().validate().unwrap_err().to_string();
        assert!(err.starts_with("invalid argument: scenario:"), "{err}");
        let text = MINIMAL.replace("\"y\": 0.2", "\"y\": 2.0");
        assert!(matches!(parse_config(&text).unwrap().validate(), Err(FuelError::InfeasibleInitialization(_))));
    }

    #[test]
    fn json_keys_are_sorted() {
        let bytes = to_json(&json!({"b": 1.5, "a": {"d": 0.1, "c": 2}})).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.find("\"a\"").unwrap() < text.find("\"b\"").unwrap());
        assert!(text.find("\"c\"").unwrap() < text.find("\"d\"").unwrap());
        assert!(text.contains("0.1"));
    }

    #[test]
    fn simulate_and_verify_produce_expected_files() {
        let cfg = parse_config(MINIMAL).unwrap();
        let sim = simulate(&cfg).unwrap();
        for name in ["profit.json", "policy.csv", "shock.csv", "fuel.csv"] {
            assert!(sim.artifact(name).is_some(), "{name}");
        }
        assert!(sim.verdict);
        let kkt = verify_kkt(&cfg).unwrap();
        for name in ["kkt.json", "profit.json", "policy.csv"] {
            assert!(kkt.artifact(name).is_some(), "{name}");
        }
        let again = verify_kkt(&cfg).unwrap();
        assert_eq!(kkt.artifact("kkt.json"), again.artifact("kkt.json"));
    }
}
