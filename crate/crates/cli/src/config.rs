//! Scenario files: which system to build, where to start, and what to run.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use uniflow::analysis::Section;
use uniflow::model::{ActiveSet, ControlledSystem, MechSystem, State};
use uniflow::systems::{lookup, Params, RegistryEntry};
use uniflow::SimConfig64;

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub system: SystemSpec,
    pub initial: InitialSpec,
    #[serde(default)]
    pub sim: SimConfig64,
    /// Spacing of the regular rows in the trajectory CSV.
    #[serde(default = "default_sample_dt")]
    pub sample_dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derivative: Option<DerivativeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisSpec>,
}

fn default_sample_dt() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    #[serde(default)]
    pub params: Params,
    /// Parameters treated as inputs `u`; `u_k` is added to the parameter's
    /// configured value.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    #[serde(default)]
    pub t: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    /// Active constraint indices.
    #[serde(default)]
    pub mode: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub u: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSet {
    /// Every unit vector of the `(δt, δx, δu)` layout.
    Basis,
    /// `count` Gaussian directions drawn with `--seed`.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Directions {
    Named(DirectionSet),
    Explicit(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivativeSpec {
    pub directions: Directions,
    #[serde(default = "default_count")]
    pub count: usize,
    /// Most transitions allowed at one simultaneous event.
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    /// Step sizes of the one-sided difference quotients used by `--validate`.
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
}

fn default_count() -> usize {
    16
}

fn default_k_max() -> usize {
    3
}

fn default_alphas() -> Vec<f64> {
    vec![1e-4, 1e-5, 1e-6]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SectionSpec {
    /// `q̇_k = 0` crossed downward.
    Apex { coordinate: usize },
    /// `x_k = value`, crossed with `x_k` decreasing.
    Coordinate { index: usize, value: f64 },
    /// `normal·x + offset = 0`, crossed with the left side decreasing.
    Affine { normal: Vec<f64>, offset: f64 },
}

/// Piecewise-linear map given directly: selection `i` is used where
/// `regions[i]·v` is largest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlMapSpec {
    pub matrices: Vec<Vec<Vec<f64>>>,
    pub regions: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Initial states are `x₀ + s·direction`.
    pub direction: Vec<f64>,
    pub range: [f64; 2],
    pub count: usize,
    /// Index into the final state `x = (q, q̇)` reported per run.
    pub outcome: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section: Option<SectionSpec>,
    /// Newton-refine the initial state to a fixed point before testing.
    #[serde(default)]
    pub refine: bool,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Weight `W` of the contraction norm; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<Vec<Vec<f64>>>,
    /// Search diagonal weights when the identity-weighted test is inconclusive.
    #[serde(default)]
    pub search_weight: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pl_map: Option<PlMapSpec>,
    #[serde(default)]
    pub controllability: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

fn default_margin() -> f64 {
    1e-9
}

fn schema(msg: impl Into<String>) -> Failure {
    Failure::schema(msg)
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| schema(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ScenarioConfig = serde_json::from_str(&text).map_err(|e| schema(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn entry(&self) -> Result<&'static RegistryEntry, Failure> {
        lookup(&self.system.name).ok_or_else(|| schema(format!("unknown system {:?}", self.system.name)))
    }

    /// Fills registry defaults into `system.params` and zero inputs into
    /// `initial.u`, so that the dumped file pins every value.
    pub fn resolve(&mut self) -> Result<(), Failure> {
        let entry = self.entry()?;
        let defaults = (entry.defaults)();
        if let Some(k) = self.system.params.keys().find(|k| !defaults.contains_key(*k)) {
            return Err(schema(format!("unknown parameter {k:?} for {}", entry.name)));
        }
        for (k, v) in defaults {
            self.system.params.entry(k).or_insert(v);
        }
        if self.initial.u.is_empty() {
            self.initial.u = vec![0.0; self.system.inputs.len()];
        }
        Ok(())
    }

    /// Structural checks that need the built system.
    pub fn validate(&self, sys: &dyn MechSystem<f64>) -> Result<(), Failure> {
        self.sim.validate().map_err(|e| schema(e.to_string()))?;
        let d = sys.dof();
        let n = sys.n_constraints();
        let n2 = 2 * d;
        if self.initial.q.len() != d || self.initial.qd.len() != d {
            return Err(schema(format!("{} has {d} coordinates", self.system.name)));
        }
        if let Some(&j) = self.initial.mode.iter().find(|&&j| j >= n) {
            return Err(schema(format!("mode index {j} out of range ({n} constraints)")));
        }
        if let Some(k) = self.system.inputs.iter().find(|k| !self.system.params.contains_key(*k)) {
            return Err(schema(format!("input {k:?} is not a parameter of {}", self.system.name)));
        }
        if self.initial.u.len() != self.system.inputs.len() {
            return Err(schema("initial.u must have one entry per input"));
        }
        if !(self.sample_dt > 0.0) {
            return Err(schema("sample_dt must be positive"));
        }
        if let Some(dspec) = &self.derivative {
            let len = 1 + n2 + self.system.inputs.len();
            if let Directions::Explicit(dirs) = &dspec.directions {
                if dirs.iter().any(|v| v.len() != len) {
                    return Err(schema(format!("directions must have length {len} (δt, δq, δq̇, δu)")));
                }
            }
            if dspec.alphas.iter().any(|&a| !(a > 0.0)) {
                return Err(schema("alphas must be positive"));
            }
        }
        if let Some(a) = &self.analysis {
            if let Some(SectionSpec::Apex { coordinate: k }) = &a.section {
                if *k >= d {
                    return Err(schema("apex coordinate out of range"));
                }
            }
            if let Some(SectionSpec::Coordinate { index, .. }) = &a.section {
                if *index >= n2 {
                    return Err(schema("section index out of range"));
                }
            }
            if let Some(SectionSpec::Affine { normal, .. }) = &a.section {
                if normal.len() != n2 {
                    return Err(schema(format!("section normal must have length {n2}")));
                }
            }
            if let Some(pl) = &a.pl_map {
                pl_matrices(pl)?;
            }
            if let Some(w) = &a.weight {
                square(w, "weight")?;
            }
            if a.controllability && self.system.inputs.is_empty() {
                return Err(schema("controllability needs system.inputs"));
            }
            if let Some(s) = &a.sweep {
                if s.direction.len() != n2 || s.outcome >= n2 || s.count < 2 || !(s.range[0] < s.range[1]) {
                    return Err(schema(format!("sweep needs a length-{n2} direction, outcome < {n2}, count >= 2 and an increasing range")));
                }
            }
        }
        Ok(())
    }

    pub fn initial_state(&self) -> State<f64> {
        State::from_slices(
            self.initial.t,
            &self.initial.q,
            &self.initial.qd,
            ActiveSet::from_indices(self.initial.mode.iter().copied()),
        )
    }

    pub fn u(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.initial.u)
    }

    pub fn section(&self, spec: &SectionSpec, dof: usize) -> Section<f64> {
        match spec {
            SectionSpec::Apex { coordinate } => Section::apex(dof, *coordinate),
            SectionSpec::Coordinate { index, value } => Section::coordinate(format!("x{index}"), *index, *value),
            SectionSpec::Affine { normal, offset } => {
                Section::affine("affine", DVector::from_column_slice(normal), *offset)
            }
        }
    }
}

pub fn square(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, Failure> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(schema(format!("{what} must be a non-empty square matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

pub fn pl_matrices(pl: &PlMapSpec) -> Result<(Vec<DMatrix<f64>>, Vec<DVector<f64>>), Failure> {
    let mats = pl.matrices.iter().map(|m| square(m, "pl_map matrix")).collect::<Result<Vec<_>, _>>()?;
    let n = mats[0].nrows();
    if mats.iter().any(|m| m.nrows() != n) {
        return Err(schema("pl_map matrices must share one size"));
    }
    if pl.regions.len() != mats.len() || pl.regions.iter().any(|r| r.len() != n) {
        return Err(schema("pl_map needs one length-n region vector per matrix"));
    }
    Ok((mats, pl.regions.iter().map(|r| DVector::from_column_slice(r)).collect()))
}

/// Registry system whose inputs perturb named parameters.
pub struct ParamInputs {
    entry: &'static RegistryEntry,
    params: Params,
    names: Vec<String>,
    base: Box<dyn MechSystem<f64>>,
}

impl ParamInputs {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, Failure> {
        let entry = cfg.entry()?;
        let base = (entry.build)(&cfg.system.params).map_err(|e| Failure::model(e.to_string()))?;
        Ok(ParamInputs { entry, params: cfg.system.params.clone(), names: cfg.system.inputs.clone(), base })
    }

    pub fn base(&self) -> &dyn MechSystem<f64> {
        &*self.base
    }

    fn build(&self, u: &DVector<f64>) -> Result<Box<dyn MechSystem<f64>>, uniflow::ModelError> {
        let mut p = self.params.clone();
        for (name, du) in self.names.iter().zip(u.iter()) {
            *p.get_mut(name).expect("inputs are validated against params") += du;
        }
        (self.entry.build)(&p)
    }

    /// The system at input `u`, or the model error its parameters raise.
    pub fn at(&self, u: &DVector<f64>) -> Result<Box<dyn MechSystem<f64>>, Failure> {
        self.build(u).map_err(|e| Failure::model(e.to_string()))
    }
}

impl ControlledSystem<f64> for ParamInputs {
    fn n_inputs(&self) -> usize {
        self.names.len()
    }

    fn with_input<'a>(&'a self, u: &DVector<f64>) -> Box<dyn MechSystem<f64> + 'a> {
        match self.build(u) {
            Ok(s) => s,
            Err(e) => {
                // Only reachable through difference quotients that step a
                // parameter out of its valid range.
                log::warn!("input {u} gives an invalid system ({e}); using the nominal one");
                (self.entry.build)(&self.params).expect("nominal parameters were validated")
            }
        }
    }
}
