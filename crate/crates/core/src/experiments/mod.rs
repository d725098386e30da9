//! Experiment orchestration: one validated config in, CSV tables, plot data
//! and a JSON report out.

pub mod config;
pub mod output;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{ExperimentConfig, ExperimentKind};
pub use output::{emit_plot_data, write_atomic, Artifact, Curve, Table};

use crate::coherent::{ehrenfest_experiment, EhrenfestParams};
use crate::damping::{fit_slope, mollify, multiplication_matrix, MollifierSpec};
use crate::error::{Error, Result};
use crate::estimates::{
    default_modified_grids, diagonalization_scaling, filtered_average_check, frequency_mixing_scan, modified_resolvent_check,
    theorem31_check, Envelope, Theorem31Params, Theorem31Variant, WeightFunction, WeightKind,
};
use crate::evolution::evolve;
use crate::geometry::{gcc_check, GccSampling, ManifoldModel, PhasePoint};
use crate::linalg::{self, C64};
use crate::operators::{assemble, OperatorBundle, StateVector};
use crate::spectra::{scan_imaginary_axis, spectrum};
use config::VariantTag;
use output::Cell;

pub const ENV_OUTPUT_DIR: &str = "DAMPWAVE_OUTPUT_DIR";
pub const ENV_WORKERS: &str = "DAMPWAVE_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CheckVerdict {
    Pass,
    Fail,
    Info,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub verdict: CheckVerdict,
    pub value: Option<f64>,
    pub detail: String,
}

impl Check {
    fn pass_if(name: &str, ok: bool, value: f64, detail: impl Into<String>) -> Self {
        let verdict = if ok { CheckVerdict::Pass } else { CheckVerdict::Fail };
        Check { name: name.into(), verdict, value: Some(value), detail: detail.into() }
    }

    fn info(name: &str, value: f64, detail: impl Into<String>) -> Self {
        Check { name: name.into(), verdict: CheckVerdict::Info, value: Some(value), detail: detail.into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Fingerprint {
    pub crate_version: String,
    pub precision: String,
    pub target: String,
}

impl Fingerprint {
    fn current() -> Self {
        Fingerprint {
            crate_version: env!("CARGO_PKG_VERSION").into(),
            precision: "f64 (IEEE 754 binary64), complex128 LAPACK".into(),
            target: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub environment: Fingerprint,
    pub artifacts: Vec<Artifact>,
    pub checks: Vec<Check>,
    pub fitted: BTreeMap<String, f64>,
    pub wall_clock_seconds: f64,
    #[serde(skip)]
    pub curves: Vec<Curve>,
}

impl ExperimentReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.verdict != CheckVerdict::Fail)
    }

    /// 0 when no check failed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.all_passed() {
            0
        } else {
            1
        }
    }
}

/// Exit status for an error raised before or during a run.
pub fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::Infeasible(_) => 3,
        _ => 1,
    }
}

/// Environment overrides for the output directory and worker count.
pub fn apply_env_overrides(cfg: &mut ExperimentConfig) -> Result<()> {
    if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
        if !dir.is_empty() {
            cfg.output_dir = PathBuf::from(dir);
        }
    }
    if let Ok(w) = std::env::var(ENV_WORKERS) {
        cfg.workers = w
            .trim()
            .parse()
            .map_err(|_| Error::Config { path: ENV_WORKERS.into(), msg: format!("expected a positive integer, got `{w}`") })?;
    }
    Ok(())
}

#[derive(Default)]
struct Outcome {
    tables: Vec<Table>,
    curves: Vec<Curve>,
    checks: Vec<Check>,
    fitted: BTreeMap<String, f64>,
}

/// Validates, dispatches, writes every table and curve under the output
/// directory, and writes `report.json` last.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let out = match cfg.kind {
        ExperimentKind::Spectrum => run_spectrum(cfg)?,
        ExperimentKind::Scan => run_scan(cfg)?,
        ExperimentKind::Evolve => run_evolve(cfg)?,
        ExperimentKind::AvgEstimate => run_avg_estimate(cfg)?,
        ExperimentKind::Theorem31 => run_theorem31(cfg)?,
        ExperimentKind::Ehrenfest => run_ehrenfest(cfg)?,
        ExperimentKind::Mollify => run_mollify(cfg)?,
        ExperimentKind::Gcc => run_gcc(cfg)?,
        ExperimentKind::MixScan => run_mix_scan(cfg)?,
        ExperimentKind::DiagSuite => run_diag_suite(cfg)?,
    };
    let dir = &cfg.output_dir;
    let mut artifacts = Vec::new();
    for t in &out.tables {
        let t = t.clone().meta("kind", cfg.kind.tag()).meta("seed", cfg.seed).meta("manifold", describe_model(cfg));
        artifacts.push(write_atomic(&dir.join(format!("{}.csv", t.name)), &t.to_csv()?)?);
    }
    artifacts.extend(emit_plot_data(dir, cfg.kind.tag(), &out.curves)?);
    let report = ExperimentReport {
        config: cfg.clone(),
        environment: Fingerprint::current(),
        artifacts,
        checks: out.checks,
        fitted: out.fitted,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        curves: out.curves,
    };
    let json = serde_json::to_vec_pretty(&report).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    write_atomic(&dir.join("report.json"), &json)?;
    Ok(report)
}

pub fn report_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("report.json")
}

fn describe_model(cfg: &ExperimentConfig) -> String {
    format!("{:?} K={} m={}", cfg.manifold.kind, cfg.manifold.cutoff, cfg.m).to_lowercase()
}

fn random_state(model: &ManifoldModel, bundle: &OperatorBundle, rng: &mut rand_chacha::ChaCha8Rng) -> Result<StateVector> {
    let n = model.n_modes();
    let mut u = linalg::random_cvec(rng, n).to_vec();
    let v = linalg::random_cvec(rng, n).to_vec();
    if !bundle.formulation.tag().ends_with("_m") {
        // the `+` spaces carry no zero-mode first component
        u[model.zero_index()] = C64::new(0.0, 0.0);
    }
    bundle.state_from_components(&u, &v)
}

fn weight_function(kind: &WeightKind) -> Result<WeightFunction> {
    match kind {
        WeightKind::Ramp => Ok(WeightFunction::ramp()),
        WeightKind::Bump { length } => WeightFunction::bump(*length),
        WeightKind::PsiMin { l } => WeightFunction::psi_min(*l),
        WeightKind::Table { t, v } => WeightFunction::table(t.clone(), v.clone()),
    }
}

fn run_spectrum(cfg: &ExperimentConfig) -> Result<Outcome> {
    let model = cfg.model()?;
    let b = cfg.profile()?;
    let bundle = assemble(&model, &b, cfg.m, cfg.spectrum.formulation)?;
    let sp = spectrum(&bundle)?;
    let mut ev = sp.eigenvalues();
    ev.sort_by(|a, c| a.im.total_cmp(&c.im).then(a.re.total_cmp(&c.re)));
    let mut t = Table::new("eigenvalues", &["re", "im"]).meta("formulation", cfg.spectrum.formulation.tag());
    for z in &ev {
        t.push(vec![z.re.into(), z.im.into()]);
    }
    let mut out = Outcome::default();
    let upper = ev.iter().filter(|z| z.im > 0.0).count();
    out.checks.push(Check::info("eigenvalue_count", ev.len() as f64, format!("{} modes, {upper} with Im > 0", model.n_modes())));
    let sup = b.sup;
    let max_re = sp.max_real();
    let min_re = sp.min_real();
    if cfg.m > 0.0 && !b.is_zero() {
        out.checks.push(Check::pass_if("max_re_negative", max_re < 0.0, max_re, "nontrivial damping, m > 0"));
    } else {
        out.checks.push(Check::info("max_re", max_re, "no strict decay expected"));
    }
    let tol = 1e-9 * (1.0 + sup);
    out.checks.push(Check::pass_if("re_above_minus_sup_b", min_re >= -sup - tol, min_re, format!("sup b = {sup}")));
    let nonreal_min = ev.iter().filter(|z| z.im.abs() > 1e-9).map(|z| z.re).fold(f64::INFINITY, f64::min);
    out.checks.push(Check::pass_if(
        "nonreal_re_above_minus_half_sup_b",
        nonreal_min >= -sup / 2.0 - 1e-9,
        nonreal_min,
        "over eigenvalues with |Im| > 1e-9",
    ));
    out.checks.push(Check::info("max_condition", sp.max_condition(), "eigenvector condition number"));
    out.curves.push(Curve::new("eigenvalues", "re", "im", ev.iter().map(|z| (z.re, z.im)).collect()));
    out.fitted.insert("max_re".into(), max_re);
    out.tables.push(t);
    Ok(out)
}

fn run_scan(cfg: &ExperimentConfig) -> Result<Outcome> {
    let model = cfg.model()?;
    let b = cfg.profile()?;
    let p = &cfg.scan;
    let bundle = assemble(&model, &b, cfg.m, p.formulation)?;
    let s_max = p.s_max.unwrap_or(1.2 * bundle.max_lambda());
    let n = p.points;
    let grid: Vec<f64> = (0..n).map(|j| -s_max + 2.0 * s_max * j as f64 / (n - 1) as f64).collect();
    let scan = scan_imaginary_axis(&bundle, &grid, p.refine)?;
    let mut t = Table::new("scan", &["s", "resolvent_norm", "flagged"]).meta("formulation", p.formulation.tag());
    for ((s, v), f) in scan.s.iter().zip(&scan.values).zip(&scan.flagged) {
        t.push(vec![(*s).into(), (*v).into(), (*f).into()]);
    }
    let mut peaks = Table::new("scan_peaks", &["s", "resolvent_norm"]);
    for (s, v) in &scan.peaks {
        peaks.push(vec![(*s).into(), (*v).into()]);
    }
    let mut asym: f64 = 0.0;
    for j in 0..n / 2 {
        let (a, c) = (scan.values[j], scan.values[n - 1 - j]);
        if a.is_finite() && c.is_finite() {
            asym = asym.max((a - c).abs() / a.max(c));
        }
    }
    let mut out = Outcome::default();
    out.checks.push(Check::pass_if("symmetric_in_s", asym <= 1e-8, asym, "max relative |R(is) - R(-is)|"));
    out.checks.push(Check::info("certified_lower", scan.certified_lower, "largest evaluated resolvent norm"));
    out.fitted.insert("certified_lower".into(), scan.certified_lower);
    out.fitted.insert("upper_bound".into(), scan.upper_bound);
    out.curves.push(Curve::new("scan", "s", "resolvent_norm", scan.s.iter().cloned().zip(scan.values.iter().cloned()).collect()).log_y());
    out.tables.push(t);
    out.tables.push(peaks);
    Ok(out)
}

fn run_evolve(cfg: &ExperimentConfig) -> Result<Outcome> {
    let model = cfg.model()?;
    let b = cfg.profile()?;
    let p = &cfg.evolve;
    let bundle = assemble(&model, &b, cfg.m, p.formulation)?;
    let mut rng = linalg::rng(cfg.seed);
    let mut t = Table::new("energy", &["state", "t", "energy", "cumulative_dissipation"]).meta("formulation", p.formulation.tag());
    let mut out = Outcome::default();
    let (mut worst_res, mut worst_inc): (f64, f64) = (0.0, f64::NEG_INFINITY);
    for i in 0..p.states {
        let u0 = random_state(&model, &bundle, &mut rng)?;
        let tr = evolve(&bundle, &u0, p.t)?;
        let e0 = tr.energy[0];
        worst_res = worst_res.max(tr.dissipation_residual() / e0);
        worst_inc = worst_inc.max(tr.max_energy_increase() / e0);
        let last = tr.times.len() - 1;
        let picks: Vec<usize> = (0..p.samples).map(|j| (j * last) / (p.samples - 1)).collect();
        for j in &picks {
            t.push(vec![i.into(), tr.times[*j].into(), tr.energy[*j].into(), tr.cumulative_dissipation[*j].into()]);
        }
        if i == 0 {
            out.curves.push(Curve::new(
                "energy_state0",
                "t",
                "E(t)/E(0)",
                picks.iter().map(|j| (tr.times[*j], tr.energy[*j] / e0)).collect(),
            ));
        }
    }
    out.checks.push(Check::pass_if("dissipation_identity", worst_res <= 1e-8, worst_res, "max |E(T)-E(0)+int rate| / E(0)"));
    out.checks.push(Check::pass_if("energy_nonincreasing", worst_inc <= 1e-12, worst_inc, "max step increase / E(0)"));
    out.tables.push(t);
    Ok(out)
}

fn run_avg_estimate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let model = cfg.model()?;
    let b = cfg.profile()?;
    let p = &cfg.avg_estimate;
    let bundle = assemble(&model, &b, cfg.m, crate::operators::Formulation::PM)?;
    let s_max = 1.2 * bundle.max_lambda();
    let n = p.scan_points;
    let grid: Vec<f64> = (0..n).map(|j| -s_max + 2.0 * s_max * j as f64 / (n - 1) as f64).collect();
    let scan = scan_imaginary_axis(&bundle, &grid, true)?;
    let env = Envelope::from_scan(&scan)?;
    let (alphas, taus) = default_modified_grids(&bundle);
    let modified = modified_resolvent_check(&bundle, &env, p.eps, &alphas, &taus)?;
    let c0 = p.c0.unwrap_or(modified.c0);
    let psi = weight_function(&p.weight)?;
    let mut rng = linalg::rng(cfg.seed);
    let u0 = random_state(&model, &bundle, &mut rng)?;
    let mut t = Table::new("avg_estimate", &["T", "lhs", "rhs", "error_bar", "verdict"]).meta("C0", output::fmt_f64(c0));
    let mut out = Outcome::default();
    let mut pts = Vec::new();
    for tt in &p.t {
        let r = filtered_average_check(&model, &bundle, &env, p.eps, &psi, *tt, &u0, c0, p.horizon)?;
        let rep = &r.report;
        t.push(vec![(*tt).into(), rep.lhs.into(), rep.rhs.into(), rep.error_bar.into(), if rep.passed() { "PASS" } else { "FAIL" }.into()]);
        out.checks.push(Check::pass_if(&format!("filtered_average_T{tt}"), rep.passed(), rep.slack, "rhs - lhs"));
        pts.push((*tt, rep.lhs / rep.rhs.max(f64::MIN_POSITIVE)));
    }
    out.fitted.insert("C0".into(), c0);
    out.fitted.insert("modified_resolvent_C0".into(), modified.c0);
    out.curves.push(Curve::new("avg_estimate_ratio", "T", "lhs/rhs", pts));
    out.tables.push(t);
    Ok(out)
}

fn variant(tag: VariantTag, p: &config::Theorem31Config) -> Theorem31Variant {
    match tag {
        VariantTag::Averaged => Theorem31Variant::Averaged,
        VariantTag::Pointwise => Theorem31Variant::Pointwise { theta: p.theta },
        VariantTag::PointwiseOpt => Theorem31Variant::PointwiseOpt { delta: p.delta },
    }
}

/// Ratio of the largest to the smallest fitted constant; 1 when all vanish.
pub fn c0_spread(values: &[f64]) -> f64 {
    let hi = values.iter().cloned().fold(0.0, f64::max);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if hi == 0.0 {
        1.0
    } else if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn run_theorem31(cfg: &ExperimentConfig) -> Result<Outcome> {
    let b = cfg.profile()?;
    let p = &cfg.theorem31;
    let weight = weight_function(&p.weight)?;
    let mut t =
        Table::new("theorem31", &["h", "variant", "cutoff", "G", "lhs", "rhs", "main_term", "remainder_factor", "fitted_C0", "verdict"]);
    let mut out = Outcome::default();
    let mut fitted: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for h in &p.hs {
        let cutoff = match p.cutoff_scale {
            Some(c) => (c / h).ceil() as usize,
            None => cfg.manifold.cutoff,
        };
        let model = ManifoldModel::new(cfg.manifold.kind, cutoff)?;
        let bundle = assemble(&model, &b, cfg.m, crate::operators::Formulation::PM)?;
        let mut rng = linalg::rng(cfg.seed);
        let u0 = random_state(&model, &bundle, &mut rng)?;
        for tag in &p.variants {
            let v = variant(*tag, p);
            let params = Theorem31Params {
                h: *h,
                eps: p.eps,
                t_h: p.t_h,
                weight: weight.clone(),
                variant: v,
                rule: p.rule,
                density: p.density,
                c0: None,
            };
            let r = theorem31_check(&model, &bundle, &u0, &params)?;
            let rep = &r.report;
            t.push(vec![
                (*h).into(),
                v.tag().into(),
                cutoff.into(),
                r.g.value.into(),
                rep.lhs.into(),
                rep.rhs.into(),
                r.main_term.into(),
                r.remainder_factor.into(),
                r.fitted_c0.into(),
                if rep.passed() { "PASS" } else { "FAIL" }.into(),
            ]);
            out.checks.push(Check::pass_if(
                &format!("{}_h{h}", v.tag()),
                rep.passed() && r.fitted_c0.is_finite(),
                r.fitted_c0,
                "fitted C0",
            ));
            fitted.entry(v.tag()).or_default().push((*h, r.fitted_c0));
        }
    }
    for (name, pts) in fitted {
        let vals: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let spread = c0_spread(&vals);
        out.checks.push(Check::pass_if(
            &format!("{name}_c0_stable"),
            spread <= p.max_c0_ratio,
            spread,
            format!("max/min fitted C0 across h, limit {}", p.max_c0_ratio),
        ));
        out.fitted.insert(format!("{name}_c0_max"), vals.iter().cloned().fold(0.0, f64::max));
        out.curves.push(Curve::new(&format!("theorem31_{name}_c0"), "h", "fitted_C0", pts));
    }
    out.tables.push(t);
    Ok(out)
}

fn run_ehrenfest(cfg: &ExperimentConfig) -> Result<Outcome> {
    let model = cfg.model()?;
    let b = cfg.profile()?;
    let e = &cfg.ehrenfest;
    let params = EhrenfestParams {
        m: cfg.m,
        center: PhasePoint::new(e.x0, e.xi0),
        mu: e.mu,
        hs: e.hs.clone(),
        window: e.window,
        nu: e.nu,
        density: e.density,
        delta: e.delta,
        c0: e.c0,
        mass_floor: e.mass_floor,
        check_a_picture: e.check_a_picture,
        workers: cfg.workers,
    };
    let rep = ehrenfest_experiment(&model, &b, &params)?;
    let mut header: Vec<&str> = crate::coherent::EhrenfestReport::csv_header().to_vec();
    header.extend(["classical_energy", "eps", "slack", "dropped_mass", "blocks_propagated"]);
    let mut t = Table::new("ehrenfest", &header).meta("mu", e.mu).meta("delta", e.delta);
    let mut out = Outcome::default();
    for (row, vals) in rep.rows.iter().zip(rep.csv_rows()) {
        let mut cells: Vec<Cell> = vals.iter().map(|v| (*v).into()).collect();
        cells.extend([
            row.classical_energy.into(),
            row.eps.into(),
            row.slack.into(),
            row.dropped_mass.into(),
            row.blocks_propagated.into(),
        ]);
        t.push(cells);
        let h = row.h;
        out.checks.push(Check::pass_if(&format!("r_in_range_h{h}"), row.r >= 0.0 && row.r <= 1.0 + 1e-9, row.r, "0 <= r <= 1"));
        out.checks.push(Check::pass_if(
            &format!("g_dominates_implied_h{h}"),
            row.g.value >= row.g_lower_implied * (1.0 - 1e-9),
            row.g.value - row.g_lower_implied,
            "measured G(h) minus implied lower bound",
        ));
        if let Some(ra) = row.r_a_picture {
            out.checks.push(Check::pass_if(&format!("a_picture_h{h}"), (ra - row.r).abs() <= 1e-10, (ra - row.r).abs(), "|r_A - r_P|"));
        }
        if let Some(pc) = &row.perturbation {
            out.checks.push(Check::pass_if(&format!("mollifier_gap_h{h}"), pc.holds, pc.gap, format!("bound {}", pc.bound)));
        }
        out.checks.push(Check::info(&format!("g_over_log_h{h}"), row.g.value / (1.0 / h).ln(), "G(h) / log(1/h)"));
    }
    let lg = |r: &crate::coherent::EhrenfestRow| (1.0 / r.h).ln();
    out.curves.push(Curve::new("ehrenfest_g", "log(1/h)", "G(h)", rep.rows.iter().map(|r| (lg(r), r.g.value)).collect()));
    out.curves.push(Curve::new(
        "ehrenfest_implied",
        "log(1/h)",
        "implied_lower_bound",
        rep.rows.iter().map(|r| (lg(r), r.g_lower_implied)).collect(),
    ));
    out.tables.push(t);
    Ok(out)
}

fn run_mollify(cfg: &ExperimentConfig) -> Result<Outcome> {
    let b = cfg.profile()?;
    let p = &cfg.mollify;
    let mut t =
        Table::new("mollify", &["eps", "sup_error", "eps_max_gradient", "omega_kappa_eps", "normalized_error", "dilation_violations"])
            .meta("kappa", p.kappa);
    let mut out = Outcome::default();
    let (mut errs, mut grads) = (Vec::new(), Vec::new());
    let mut violations = 0usize;
    for eps in &p.eps {
        let m = mollify(&b, MollifierSpec { eps: *eps })?;
        let r = &m.report;
        let w = b.modulus.eval(p.kappa * eps);
        let norm = if w > 0.0 { r.sup_error / w } else { f64::NAN };
        t.push(vec![(*eps).into(), r.sup_error.into(), (eps * r.max_gradient).into(), w.into(), norm.into(), r.dilation_violations.into()]);
        violations += r.dilation_violations;
        if w > 0.0 {
            errs.push((*eps, norm));
        }
        grads.push((*eps, eps * r.max_gradient));
    }
    out.checks.push(Check::pass_if(
        "zero_set_dilation",
        violations == 0,
        violations as f64,
        "grid points within eps of {b=0} with b_eps != 0",
    ));
    let spread = |v: &[(f64, f64)]| {
        let hi = v.iter().map(|p| p.1).fold(0.0, f64::max);
        let lo = v.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        hi / lo
    };
    if errs.len() == p.eps.len() && errs.iter().all(|e| e.1 > 0.0) {
        let s = spread(&errs);
        out.checks.push(Check::pass_if("error_over_modulus_bounded", s <= p.max_ratio, s, "max/min of sup error / omega(kappa eps)"));
    } else {
        out.checks.push(Check::info("error_over_modulus_bounded", f64::NAN, "modulus or error vanishes; ratio undefined"));
    }
    if grads.iter().all(|g| g.1 > 0.0) {
        let s = spread(&grads);
        out.checks.push(Check::pass_if("scaled_gradient_bounded", s <= p.max_ratio, s, "max/min of eps * sup |grad b_eps|"));
    } else {
        out.checks.push(Check::info("scaled_gradient_bounded", f64::NAN, "gradient vanishes for some eps"));
    }
    out.curves.push(Curve::new("mollify_error", "eps", "sup_error/omega", errs).log_y());
    out.curves.push(Curve::new("mollify_gradient", "eps", "eps*max_gradient", grads));
    out.tables.push(t);
    Ok(out)
}

fn run_gcc(cfg: &ExperimentConfig) -> Result<Outcome> {
    let model = cfg.model()?;
    let b = cfg.profile()?;
    let p = &cfg.gcc;
    let inside = |x: [f64; 2]| b.eval(x) > p.threshold;
    let v = gcc_check(&model, &inside, p.horizon, GccSampling { n_x: p.n_x, n_theta: p.n_theta, step: p.step })?;
    let mut t =
        Table::new("gcc", &["holds", "horizon", "orbits_sampled", "orbits_missed", "witness_x", "witness_y", "witness_xi", "witness_eta"]);
    let w = v.witness.unwrap_or(PhasePoint::new([f64::NAN; 2], [f64::NAN; 2]));
    t.push(vec![
        v.pass.into(),
        v.horizon.into(),
        v.orbits_sampled.into(),
        v.orbits_missed.into(),
        w.x[0].into(),
        w.x[1].into(),
        w.xi[0].into(),
        w.xi[1].into(),
    ]);
    let mut out = Outcome::default();
    out.checks.push(Check::info("gcc_holds", if v.pass { 1.0 } else { 0.0 }, v.note.clone()));
    out.tables.push(t);
    Ok(out)
}

fn run_mix_scan(cfg: &ExperimentConfig) -> Result<Outcome> {
    let model = cfg.model()?;
    let b = cfg.profile()?;
    let p = &cfg.mix_scan;
    let mult = multiplication_matrix(&model, &b)?;
    let scan = frequency_mixing_scan(&model, &mult, cfg.m, &p.levels, &p.pair, None)?;
    let mut t = Table::new("mix_scan", &["k", "separation", "bandwidth", "off_shell", "on_shell"]);
    for l in &scan.levels {
        t.push(vec![l.k.into(), l.separation.into(), l.bandwidth.into(), l.off_shell.into(), l.on_shell.into()]);
    }
    let mut out = Outcome::default();
    out.checks.push(Check::info("decay_exponent", scan.decay_exponent, "-slope of log off_shell against log 2^k"));
    out.fitted.insert("decay_exponent".into(), scan.decay_exponent);
    out.curves.push(
        Curve::new("mix_scan", "2^k", "off_shell", scan.levels.iter().map(|l| (2f64.powi(l.k as i32), l.off_shell)).collect()).log_y(),
    );
    out.tables.push(t);
    Ok(out)
}

fn run_diag_suite(cfg: &ExperimentConfig) -> Result<Outcome> {
    let model = cfg.model()?;
    let b = cfg.profile()?;
    let p = &cfg.diag_suite;
    let s = diagonalization_scaling(&model, &b, cfg.m, p.nu, &p.hs, p.t)?;
    let mut t = Table::new("diag_suite", &["h", "t", "e1", "e2"]).meta("nu", p.nu);
    for d in &s.points {
        t.push(vec![d.h.into(), d.t.into(), d.e1.into(), d.e2.into()]);
    }
    let mut out = Outcome::default();
    let nan = f64::NAN;
    out.checks.push(Check::info("e2_exponent", s.e2_exponent.unwrap_or(nan), "log-log slope of e2 against h"));
    out.checks.push(Check::info("e1_exponent", s.e1_exponent.unwrap_or(nan), "log-log slope of e1 against h"));
    if let Some(x) = s.e2_exponent {
        out.fitted.insert("e2_exponent".into(), x);
    }
    if let Some(x) = s.e1_exponent {
        out.fitted.insert("e1_exponent".into(), x);
    }
    out.curves.push(Curve::new("diag_e2", "h", "e2", s.points.iter().map(|d| (d.h, d.e2)).collect()).log_y());
    out.curves.push(Curve::new("diag_e1", "h", "e1", s.points.iter().map(|d| (d.h, d.e1)).collect()).log_y());
    out.tables.push(t);
    Ok(out)
}

/// Least-squares slope, re-exported for callers fitting report curves.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.0 > 0.0 && p.1 > 0.0).map(|p| (p.0.ln(), p.1.ln())).collect();
    fit_slope(&pts)
}

/// Reads a config file; a missing file is a configuration error.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config { path: path.display().to_string(), msg: e.to_string() })?;
    ExperimentConfig::from_toml(&text)
}
