use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::Serialize;
use uniflow::analysis::{
    controllability_test, instability_eigenvector_test, iterate_growth, poincare_bderivative, refine_fixed_point,
    search_diagonal_weight, stability_contraction_test, ContractionReport, ControllabilityVerdict, FixedPointOptions,
    InstabilityReport, PiecewiseLinear, PlMap, StabilityVerdict,
};
use uniflow::model::ActiveSet;
use uniflow::sensitivity::{b_derivative_controlled, finite_difference_direction, SensitivityConfig, Transition};
use uniflow::sim::{flow, ActivationVerdict, DeactivationVerdict, HybridTrajectory};
use uniflow::systems::registry;
use uniflow::Termination;

use crate::config::{pl_matrices, square, DirectionSet, Directions, ParamInputs, ScenarioConfig};
use crate::output::{num, rows, vec, word, write_atomic, write_json};
use crate::sweep::{kink_metrics, run_sweep, KinkMetrics, SweepPoint};
use crate::{exit, termination_code, Failure};

#[derive(Clone, Debug)]
pub struct Options {
    pub out: PathBuf,
    pub validate: bool,
    pub seed: u64,
}

/// Loads, resolves and validates a scenario.
pub fn prepare(path: &Path) -> Result<(ScenarioConfig, ParamInputs), Failure> {
    let mut cfg = ScenarioConfig::load(path)?;
    cfg.resolve()?;
    let inputs = ParamInputs::new(&cfg)?;
    cfg.validate(inputs.base())?;
    Ok((cfg, inputs))
}

pub fn dump_config(path: &Path) -> Result<String, Failure> {
    let (cfg, _) = prepare(path)?;
    Ok(crate::output::to_json(&cfg))
}

pub fn list_systems() -> String {
    let mut s = String::new();
    for e in registry() {
        let defaults = (e.defaults)();
        let sys = (e.build)(&defaults).expect("registry defaults build");
        s += &format!("{:<18} dof {}  constraints {}  {}\n", e.name, sys.dof(), sys.n_constraints(), e.description);
        let params: Vec<String> = defaults.iter().map(|(k, v)| format!("{k}={v}")).collect();
        s += &format!("{:<18} {}\n", "", params.join(" "));
    }
    s
}

#[derive(Serialize)]
struct TerminationReport {
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    constraint: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    events: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    accumulation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<String>,
}

impl TerminationReport {
    fn new(t: &Termination<f64>) -> Self {
        let mut r =
            TerminationReport { kind: t.label(), t: None, constraint: None, events: None, accumulation: None, detail: None };
        match t {
            Termination::TimeReached => {}
            Termination::Stopped { t } => r.t = Some(*t),
            Termination::ZenoGuard { constraint, t, events, accumulation } => {
                r.t = Some(*t);
                r.constraint = Some(*constraint);
                r.events = Some(*events);
                r.accumulation = *accumulation;
            }
            Termination::Grazing { constraint, t, detail } => {
                r.t = Some(*t);
                r.constraint = Some(*constraint);
                r.detail = Some(detail.clone());
            }
            Termination::ModelError { t, message } => {
                r.t = Some(*t);
                r.detail = Some(message.clone());
            }
        }
        r
    }

    fn describe(&self) -> String {
        let mut s = self.kind.to_string();
        if let Some(c) = self.constraint {
            s += &format!(" on constraint {c}");
        }
        if let Some(t) = self.t {
            s += &format!(" at t = {t:e}");
        }
        if let Some(d) = &self.detail {
            s += &format!(": {d}");
        }
        s
    }
}

#[derive(Serialize)]
struct EventReport {
    t: f64,
    kind: &'static str,
    mode_before: Vec<usize>,
    mode_after: Vec<usize>,
    activated: Vec<usize>,
    deactivated: Vec<usize>,
    released: Vec<usize>,
    admissible: bool,
    activation_verdicts: Vec<ActivationVerdict<f64>>,
    deactivation_verdicts: Vec<DeactivationVerdict<f64>>,
    pre: Vec<f64>,
    post: Vec<f64>,
}

#[derive(Serialize)]
struct EventsFile {
    system: String,
    termination: TerminationReport,
    admissible: bool,
    word: Vec<Vec<usize>>,
    eta: Vec<Option<usize>>,
    events: Vec<EventReport>,
}

fn events_file(cfg: &ScenarioConfig, tr: &HybridTrajectory<f64>) -> EventsFile {
    EventsFile {
        system: cfg.system.name.clone(),
        termination: TerminationReport::new(&tr.termination),
        admissible: tr.admissible(),
        word: word(&tr.word()),
        eta: tr.eta(),
        events: tr
            .events
            .iter()
            .map(|e| EventReport {
                t: e.t,
                kind: if e.activated.is_empty() { "deactivation" } else { "activation" },
                mode_before: e.mode_before.to_vec(),
                mode_after: e.mode_after.to_vec(),
                activated: e.activated.to_vec(),
                deactivated: e.deactivated.to_vec(),
                released: e.released.to_vec(),
                admissible: e.admissible,
                activation_verdicts: e.activation_verdicts.clone(),
                deactivation_verdicts: e.deactivation_verdicts.clone(),
                pre: vec(&e.pre),
                post: vec(&e.post),
            })
            .collect(),
    }
}

/// Regular samples every `dt` plus one row per event holding the
/// pre-event state.
pub fn trajectory_csv(tr: &HybridTrajectory<f64>, dt: f64) -> Result<Vec<u8>, Failure> {
    let d = tr.initial.dof();
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|i| format!("q_{i}")));
    header.extend((0..d).map(|i| format!("qd_{i}")));
    header.extend(["mode_bitmask".to_string(), "event".to_string()]);
    let mut rows_out: Vec<(f64, Vec<f64>, ActiveSet, bool)> = Vec::new();
    let t_end = tr.t_end();
    let mut k = 0usize;
    loop {
        let t = tr.t0 + dt * k as f64;
        if t > t_end + 1e-12 * dt {
            break;
        }
        let t = t.min(t_end);
        if let (Some(x), Some(m)) = (tr.state_at(t), tr.mode_at(t)) {
            rows_out.push((t, vec(&x), m, false));
        } else if k == 0 {
            rows_out.push((t, vec(&tr.initial.x()), tr.initial.mode, false));
        }
        k += 1;
    }
    for e in &tr.events {
        rows_out.push((e.t, vec(&e.pre), e.mode_before, true));
    }
    // Stable sort keeps a sample ahead of an event at the same instant.
    rows_out.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Failure::io(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (t, x, m, ev) in rows_out {
        let mut rec = vec![num(t)];
        rec.extend(x.iter().map(|&v| num(v)));
        rec.push(m.bits().to_string());
        rec.push(u8::from(ev).to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Failure::io(e.to_string()))
}

pub fn simulate(cfg: &ScenarioConfig, inputs: &ParamInputs, opts: &Options) -> Result<i32, Failure> {
    let sys = inputs.at(&cfg.u())?;
    let tr = flow(&*sys, &cfg.initial_state(), &cfg.sim)?;
    write_atomic(&opts.out, "trajectory.csv", &trajectory_csv(&tr, cfg.sample_dt)?)?;
    let ev = events_file(cfg, &tr);
    let code = termination_code(&tr.termination);
    if code != exit::OK {
        eprintln!("simulation stopped: {}", ev.termination.describe());
    }
    write_json(&opts.out, "events.json", &ev)?;
    Ok(code)
}

#[derive(Serialize)]
struct SelectionReport {
    word: Vec<Vec<usize>>,
    eta: Vec<usize>,
    transitions: Vec<Transition>,
    time_jac: Vec<f64>,
    state_jac: Vec<Vec<f64>>,
    input_jac: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct Validation {
    alphas: Vec<f64>,
    residuals: Vec<f64>,
    best: f64,
}

#[derive(Serialize)]
struct DirectionReport {
    direction: Vec<f64>,
    selection: usize,
    tie: bool,
    image: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    validation: Option<Validation>,
}

#[derive(Serialize)]
struct Basepoint {
    t0: f64,
    t_end: f64,
    x0: Vec<f64>,
    x_end: Vec<f64>,
    u: Vec<f64>,
}

#[derive(Serialize)]
struct BDerivFile {
    basepoint: Basepoint,
    realized_word: Vec<Vec<usize>>,
    orthogonality_violation: bool,
    warnings: Vec<String>,
    selections: Vec<SelectionReport>,
    directions: Vec<DirectionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_validation_residual: Option<f64>,
}

fn directions(spec: &Directions, count: usize, len: usize, seed: u64) -> Vec<DVector<f64>> {
    match spec {
        Directions::Named(DirectionSet::Basis) => (0..len)
            .map(|k| {
                let mut v = DVector::zeros(len);
                v[k] = 1.0;
                v
            })
            .collect(),
        Directions::Named(DirectionSet::Random) => {
            let mut rng = StdRng::seed_from_u64(seed);
            (0..count)
                .map(|_| DVector::from_fn(len, |_, _| rng.gen_range(-1.0..1.0)).normalize())
                .collect()
        }
        Directions::Explicit(v) => v.iter().map(|d| DVector::from_column_slice(d)).collect(),
    }
}

/// Writes the termination report and returns the failure for an
/// irregular base trajectory.
fn inadmissible(out: &Path, tr: &HybridTrajectory<f64>) -> Failure {
    let t = TerminationReport::new(&tr.termination);
    let msg = format!("trajectory is not admissible: {}", t.describe());
    if let Err(e) = write_json(out, "diagnostic.json", &t) {
        log::error!("{e}");
    }
    Failure::new(exit::GRAZING, msg)
}

pub fn bderiv(cfg: &ScenarioConfig, inputs: &ParamInputs, opts: &Options) -> Result<i32, Failure> {
    let dspec = cfg.derivative.as_ref().ok_or_else(|| Failure::schema("bderiv needs a derivative section"))?;
    let u = cfg.u();
    let x0 = cfg.initial_state();
    let sys = inputs.at(&u)?;
    let tr = flow(&*sys, &x0, &cfg.sim)?;
    if !tr.termination.is_regular() {
        return Err(inadmissible(&opts.out, &tr));
    }
    let scfg = SensitivityConfig { k_max: dspec.k_max, ..SensitivityConfig::from_sim(&cfg.sim) };
    let bd = b_derivative_controlled(inputs, &u, &tr, &scfg)?;
    let dirs = directions(&dspec.directions, dspec.count, bd.dir_len(), opts.seed);
    let reports = dirs
        .par_iter()
        .map(|dir| {
            let m = bd.membership(dir)?;
            let image = bd.apply(dir)?;
            let validation = if opts.validate {
                let scale = image.norm().max(1.0);
                let residuals = dspec
                    .alphas
                    .iter()
                    .map(|&a| {
                        let fd = finite_difference_direction(inputs, &u, &x0, &cfg.sim, dir, a)?;
                        Ok((fd - &image).norm() / scale)
                    })
                    .collect::<Result<Vec<f64>, Failure>>()?;
                let best = residuals.iter().copied().fold(f64::INFINITY, f64::min);
                Some(Validation { alphas: dspec.alphas.clone(), residuals, best })
            } else {
                None
            };
            Ok(DirectionReport { direction: vec(dir), selection: m.selection, tie: m.tie, image: vec(&image), validation })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let max_res = opts
        .validate
        .then(|| reports.iter().filter_map(|r| r.validation.as_ref()).map(|v| v.best).fold(0.0, f64::max));
    if let Some(r) = max_res {
        if r > 1e-5 {
            eprintln!("warning: finite-difference residual {r:e} exceeds 1e-5");
        }
    }
    let file = BDerivFile {
        basepoint: Basepoint { t0: bd.t0, t_end: bd.t_end, x0: vec(&x0.x()), x_end: vec(&tr.final_state.x()), u: vec(&u) },
        realized_word: word(&bd.realized_word),
        orthogonality_violation: bd.orthogonality_violation,
        warnings: bd.warnings.clone(),
        selections: bd
            .selections
            .iter()
            .map(|s| SelectionReport {
                word: word(&s.word),
                eta: s.eta.clone(),
                transitions: s.transitions.clone(),
                time_jac: vec(&s.time_jac),
                state_jac: rows(&s.state_jac),
                input_jac: rows(&s.input_jac),
            })
            .collect(),
        directions: reports,
        max_validation_residual: max_res,
    };
    write_json(&opts.out, "bderiv.json", &file)?;
    Ok(exit::OK)
}

#[derive(Serialize)]
struct WitnessGrowth {
    selection: usize,
    eigenvalue: f64,
    eigenvector: Vec<f64>,
    /// `‖P(v_{k+1})‖ / ‖v_k‖` for five steps from `1e-6·ν`.
    growth: Vec<f64>,
}

#[derive(Serialize)]
struct StabilityReport {
    contraction: ContractionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight: Option<Vec<Vec<f64>>>,
    instability: InstabilityReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    witness: Option<WitnessGrowth>,
    verdict: StabilityVerdict,
}

fn stability(
    map: &dyn PiecewiseLinear<f64>,
    weight: Option<DMatrix<f64>>,
    search: bool,
    margin: f64,
) -> Result<StabilityReport, Failure> {
    let mut contraction = stability_contraction_test(map, weight.as_ref(), margin)?;
    let mut used = weight;
    if contraction.verdict == StabilityVerdict::Inconclusive && search {
        let (w, _) = search_diagonal_weight(map.matrices(), 200);
        let r = stability_contraction_test(map, Some(&w), margin)?;
        if r.verdict == StabilityVerdict::Stable {
            contraction = r;
            used = Some(w);
        }
    }
    let instability = instability_eigenvector_test(map, margin);
    let witness = instability.witness.as_ref().map(|w| {
        let v0 = DVector::from_column_slice(&w.eigenvector) * 1e-6;
        WitnessGrowth {
            selection: w.selection,
            eigenvalue: w.eigenvalue,
            eigenvector: w.eigenvector.clone(),
            growth: iterate_growth(map, &v0, 5),
        }
    });
    let verdict = if contraction.verdict == StabilityVerdict::Stable {
        StabilityVerdict::Stable
    } else {
        instability.verdict
    };
    Ok(StabilityReport { contraction, weight: used.as_ref().map(rows), instability, witness, verdict })
}

#[derive(Serialize)]
struct PoincareReport {
    section: String,
    refined: bool,
    fixed_point: Vec<f64>,
    image: Vec<f64>,
    period: f64,
    fixed_point_residual: f64,
    frame: Vec<Vec<f64>>,
    selections: Vec<Vec<Vec<f64>>>,
    selection_words: Vec<Vec<Vec<usize>>>,
    /// Selections grouped by equal matrices.
    distinct: Vec<Vec<usize>>,
    warnings: Vec<String>,
    stability: StabilityReport,
}

#[derive(Serialize)]
struct ControllabilityFile {
    verdict: ControllabilityVerdict,
    inputs: Vec<String>,
    subblocks: Vec<Vec<Vec<f64>>>,
    min_singular_values: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    determinants: Option<Vec<f64>>,
    words: Vec<Vec<Vec<usize>>>,
}

#[derive(Serialize)]
struct SweepReport {
    file: &'static str,
    points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    kink: Option<KinkMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    slope_difference: Option<f64>,
}

#[derive(Serialize, Default)]
struct AnalyzeFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    poincare: Option<PoincareReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pl_map: Option<StabilityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    controllability: Option<ControllabilityFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<SweepReport>,
}

pub fn sweep_csv(points: &[SweepPoint]) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Failure::io(e.to_string());
    w.write_record(["s", "outcome", "events", "word", "termination"]).map_err(csv_err)?;
    for p in points {
        w.write_record([num(p.s), num(p.outcome), p.events.to_string(), p.word.clone(), p.termination.clone()])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Failure::io(e.to_string()))
}

pub fn analyze(cfg: &ScenarioConfig, inputs: &ParamInputs, opts: &Options) -> Result<i32, Failure> {
    let spec = cfg.analysis.as_ref().ok_or_else(|| Failure::schema("analyze needs an analysis section"))?;
    let u = cfg.u();
    let x0 = cfg.initial_state();
    let sys = inputs.at(&u)?;
    let weight = spec.weight.as_ref().map(|w| square(w, "weight")).transpose()?;
    let mut report = AnalyzeFile::default();

    if let Some(sec_spec) = &spec.section {
        let section = cfg.section(sec_spec, sys.dof());
        let point = if spec.refine {
            refine_fixed_point(&*sys, &section, &x0, &cfg.sim, &FixedPointOptions::default())?
        } else {
            x0.clone()
        };
        let pd = poincare_bderivative(&*sys, &section, &point, &cfg.sim, spec.k_max)?;
        let w = weight.clone().filter(|w| w.nrows() == pd.frame.ncols());
        if weight.is_some() && w.is_none() {
            return Err(Failure::schema(format!("weight must be {0}x{0} for this section", pd.frame.ncols())));
        }
        let st = stability(&pd, w, spec.search_weight, spec.margin)?;
        report.poincare = Some(PoincareReport {
            section: section.name.clone(),
            refined: spec.refine,
            fixed_point: vec(&pd.point.x()),
            image: vec(&pd.image.x()),
            period: pd.period,
            fixed_point_residual: pd.fixed_point_residual(),
            frame: rows(&pd.frame),
            selections: pd.selections.iter().map(rows).collect(),
            selection_words: pd.flow.selections.iter().map(|s| word(&s.word)).collect(),
            distinct: pd.distinct_selections(1e-6),
            warnings: pd.flow.warnings.clone(),
            stability: st,
        });
    }

    if let Some(pl) = &spec.pl_map {
        let (mats, regions) = pl_matrices(pl)?;
        let map = PlMap::new(mats, move |v: &DVector<f64>| {
            let scores = regions.iter().map(|r| r.dot(v));
            scores.enumerate().fold((0, f64::NEG_INFINITY), |b, (i, s)| if s > b.1 { (i, s) } else { b }).0
        });
        let w = weight.clone().filter(|w| w.nrows() == map.dim());
        report.pl_map = Some(stability(&map, w, spec.search_weight, spec.margin)?);
    }

    if spec.controllability {
        let r = controllability_test(inputs, &x0, &u, &cfg.sim, spec.k_max)?;
        report.controllability = Some(ControllabilityFile {
            verdict: r.verdict,
            inputs: cfg.system.inputs.clone(),
            subblocks: r.subblocks.iter().map(rows).collect(),
            min_singular_values: r.min_singular_values.clone(),
            determinants: r.determinants.clone(),
            words: r.flow.selections.iter().map(|s| word(&s.word)).collect(),
        });
    }

    if let Some(sw) = &spec.sweep {
        let dir = DVector::from_column_slice(&sw.direction);
        let points = run_sweep(&*sys, &x0, &dir, sw.range, sw.count, sw.outcome, &cfg.sim);
        write_atomic(&opts.out, "sweep.csv", &sweep_csv(&points)?)?;
        let s: Vec<f64> = points.iter().map(|p| p.s).collect();
        let y: Vec<f64> = points.iter().map(|p| p.outcome).collect();
        let kink = kink_metrics(&s, &y);
        report.sweep = Some(SweepReport {
            file: "sweep.csv",
            points: points.len(),
            slope_difference: kink.as_ref().map(|k| k.slope_difference()),
            kink,
        });
    }

    write_json(&opts.out, "report.json", &report)?;
    Ok(exit::OK)
}
