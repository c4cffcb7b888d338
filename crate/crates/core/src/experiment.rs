//! Experiment configuration and the drivers behind the command-line tool:
//! run a list of checks on one or more designs, simulate samples and
//! estimate from them.
//!
//! A configuration is a JSON document. Unknown keys are rejected and every
//! output row carries a hash of the effective configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::choiceprob::{binary_choice_prob, choice_prob, IntegrationSpec};
use crate::controlfn::{avg_over_w, lar_report, verify_thm5, TriangularDgp};
use crate::distributions::{Dists, EtaDist};
use crate::error::{Error, Result};
use crate::estimate::{
    estimate_mean_coeff_ratio, local_linear_fit, panel_diag_estimator, panel_direction,
    simulate_cross_section, simulate_panel, CrossSectionSample, KernelConfig, PanelSample,
};
use crate::identities::{
    binary_prob_grad, choice_prob_jacobian, cor3_check, default_grid, hessian_check, index_check,
    slot_name, thm4_check, berry_deriv_check, verify_thm1, verify_thm2, weighted_avg_derivative,
    WeightFn,
};
use crate::model::{Family, ModelSpec, UtilityModel};
use crate::numeric::unsigned_angle;
use crate::panel::{
    default_diag_grid, default_pairs, thm10_gap, thm11_gap, thm7_lhs, thm8_check,
    thm9_recover_beta, verify_thm7, PanelDgp,
};
use crate::report::{CheckContext, Criterion, DerivativeReport, Metadata, Row, Status, Tolerance};

/// The checks an experiment can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckName {
    Thm1,
    Thm2,
    Cor3,
    Hessian,
    Index,
    Thm4,
    Berry,
    Wavg,
    Thm5,
    Cor6,
    Lar,
    Thm7,
    Thm8,
    Thm9,
    Thm10,
    Thm11,
}

impl CheckName {
    pub const ALL: [CheckName; 16] = [
        CheckName::Thm1,
        CheckName::Thm2,
        CheckName::Cor3,
        CheckName::Hessian,
        CheckName::Index,
        CheckName::Thm4,
        CheckName::Berry,
        CheckName::Wavg,
        CheckName::Thm5,
        CheckName::Cor6,
        CheckName::Lar,
        CheckName::Thm7,
        CheckName::Thm8,
        CheckName::Thm9,
        CheckName::Thm10,
        CheckName::Thm11,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CheckName::Thm1 => "thm1",
            CheckName::Thm2 => "thm2",
            CheckName::Cor3 => "cor3",
            CheckName::Hessian => "hessian",
            CheckName::Index => "index",
            CheckName::Thm4 => "thm4",
            CheckName::Berry => "berry",
            CheckName::Wavg => "wavg",
            CheckName::Thm5 => "thm5",
            CheckName::Cor6 => "cor6",
            CheckName::Lar => "lar",
            CheckName::Thm7 => "thm7",
            CheckName::Thm8 => "thm8",
            CheckName::Thm9 => "thm9",
            CheckName::Thm10 => "thm10",
            CheckName::Thm11 => "thm11",
        }
    }
}

impl fmt::Display for CheckName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckName::ALL
            .iter()
            .find(|c| c.as_str() == s.trim())
            .copied()
            .ok_or_else(|| Error::config("checks", format!("unknown check `{}`", s.trim())))
    }
}

/// Parses a comma-separated check list.
pub fn parse_check_list(s: &str) -> Result<Vec<CheckName>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(CheckName::from_str)
        .collect()
}

/// Evaluation points. Missing entries fall back to per-check defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grids {
    /// Covariate grid for thm1, thm2, index and thm5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<Vec<f64>>>,
    /// Single evaluation points for thm4, berry, cor6 and lar.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    /// Control values for thm5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<f64>>,
    /// Diagonal points for thm7, thm8 and thm9.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diag: Option<Vec<Vec<f64>>>,
    /// Off-diagonal `(X1, X2)` pairs for thm10 and thm11.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<(f64, f64)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WavgOptions {
    pub weight: WeightFn,
    pub x_law: EtaDist,
    pub draws: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavg: Option<WavgOptions>,
    /// Kernel bandwidth on `δ` for thm11; a rule of thumb when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thm11_bandwidth: Option<f64>,
    /// Angle bound for thm9; defaults depend on the integration method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thm9_angle_tol: Option<f64>,
}

/// A model with its heterogeneity law or data-generating process and the
/// checks to run on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Design {
    /// Appended to report labels as `label/name`.
    pub name: String,
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dists: Option<Dists>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triangular: Option<TriangularDgp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panel: Option<PanelDgp>,
    /// Replaces the experiment-wide integration settings (the seed is
    /// always the experiment seed).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integration: Option<IntegrationSpec>,
    pub checks: Vec<CheckName>,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub options: CheckOptions,
}

/// Sample size and evaluation points for `simulate` and `estimate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSpec {
    pub n: usize,
    /// Law of `X` for cross-section samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_law: Option<EtaDist>,
    /// Local-linear evaluation points for cross-section samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    /// Denominator component of the coefficient ratios at the origin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_reference: Option<usize>,
    /// Diagonal points for panel samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diag_points: Option<Vec<Vec<f64>>>,
    /// Bound on the angle between the recovered and true panel direction.
    #[serde(default = "default_angle_bound")]
    pub angle_bound: f64,
}

fn default_angle_bound() -> f64 {
    0.1
}

fn default_out() -> String {
    "out".into()
}

/// A complete experiment. The top-level model, distributions and checks
/// form the primary design; `designs` adds further ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dists: Option<Dists>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triangular: Option<TriangularDgp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panel: Option<PanelDgp>,
    pub integration: IntegrationSpec,
    #[serde(default)]
    pub checks: Vec<CheckName>,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub options: CheckOptions,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub designs: Vec<Design>,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimation: Option<EstimationSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerance: Tolerance,
    #[serde(default = "default_out")]
    pub out: String,
}

/// Command-line overrides applied on top of a configuration file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub draws: Option<usize>,
    /// Restricts every design to these checks; a listed check that no
    /// design configures runs on the primary design.
    pub checks: Option<Vec<CheckName>>,
    /// Relative tolerance.
    pub tolerance: Option<f64>,
    pub out: Option<String>,
}

impl ExperimentConfig {
    /// Parses a configuration, reporting the path of the offending field on
    /// failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "(root)".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = o.draws {
            self.integration.draws = d;
            for des in &mut self.designs {
                if let Some(i) = &mut des.integration {
                    i.draws = d;
                }
            }
        }
        if let Some(list) = &o.checks {
            let keep: BTreeSet<CheckName> = list.iter().copied().collect();
            let configured: BTreeSet<CheckName> = self
                .checks
                .iter()
                .chain(self.designs.iter().flat_map(|d| d.checks.iter()))
                .copied()
                .collect();
            self.checks.retain(|c| keep.contains(c));
            for c in list {
                if !configured.contains(c) && !self.checks.contains(c) {
                    self.checks.push(*c);
                }
            }
            for des in &mut self.designs {
                des.checks.retain(|c| keep.contains(c));
            }
        }
        if let Some(r) = o.tolerance {
            self.tolerance.rel = r;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.integration.validate()?;
        self.kernel.validate()?;
        let t = &self.tolerance;
        if !(t.abs >= 0.0 && t.rel >= 0.0 && t.k_se >= 0.0) {
            return Err(Error::config("tolerance", "entries must be nonnegative"));
        }
        let mut names = BTreeSet::new();
        for d in &self.designs {
            if d.name.is_empty() || d.name.contains([',', '/', '\n']) {
                return Err(Error::config(
                    "designs.name",
                    "must be nonempty without commas or slashes",
                ));
            }
            if !names.insert(d.name.as_str()) {
                return Err(Error::config("designs.name", format!("duplicate `{}`", d.name)));
            }
            if let Some(i) = &d.integration {
                i.validate()?;
            }
        }
        if let Some(e) = &self.estimation {
            if e.n == 0 {
                return Err(Error::config("estimation.n", "must be positive"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization, truncated to 16 hex digits.
    /// The output directory is left out.
    pub fn hash(&self) -> String {
        let mut canon = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = canon.as_object_mut() {
            obj.remove("out");
        }
        let canon = canon.to_string();
        let digest = Sha256::digest(canon.as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// The primary design followed by the additional ones.
    pub fn all_designs(&self) -> Vec<Design> {
        let mut v = vec![Design {
            name: String::new(),
            model: self.model.clone(),
            dists: self.dists.clone(),
            triangular: self.triangular.clone(),
            panel: self.panel.clone(),
            integration: None,
            checks: self.checks.clone(),
            grids: self.grids.clone(),
            options: self.options.clone(),
        }];
        v.extend(self.designs.iter().cloned());
        v
    }

    fn context(&self, design: &Design, hash: &str) -> CheckContext {
        let mut integ = design
            .integration
            .clone()
            .unwrap_or_else(|| self.integration.clone());
        integ.seed = self.seed;
        CheckContext::new(integ)
            .with_tolerance(self.tolerance)
            .with_hash(hash)
    }
}

fn need<'a, T>(v: &'a Option<T>, what: &str, check: CheckName) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::config(what, format!("required by check `{check}`")))
}

fn points_or_origin(grids: &Grids, model: &UtilityModel) -> Vec<Vec<f64>> {
    grids
        .points
        .clone()
        .unwrap_or_else(|| vec![vec![0.0; model.x_len()]])
}

/// Runs one check on one design. Several reports come back when the check
/// is evaluated at several points.
pub fn run_check(
    check: CheckName,
    design: &Design,
    model: &UtilityModel,
    ctx: &CheckContext,
) -> Result<Vec<DerivativeReport>> {
    let g = &design.grids;
    let x_grid = || g.x.clone().unwrap_or_else(|| default_grid(model.x_len()));
    let diag = || g.diag.clone().unwrap_or_else(|| default_diag_grid(model.x_len()));
    let pairs = || g.pairs.clone().unwrap_or_else(|| default_pairs(0.0));
    let one = |r: Result<DerivativeReport>| r.map(|r| vec![r]);
    match check {
        CheckName::Thm1 => one(verify_thm1(model, need(&design.dists, "dists", check)?, &x_grid(), ctx)),
        CheckName::Thm2 => one(verify_thm2(model, need(&design.dists, "dists", check)?, &x_grid(), ctx)),
        CheckName::Cor3 => one(cor3_check(model, need(&design.dists, "dists", check)?, ctx)),
        CheckName::Hessian => one(hessian_check(model, need(&design.dists, "dists", check)?, ctx)),
        CheckName::Index => one(index_check(model, need(&design.dists, "dists", check)?, &x_grid(), ctx)),
        CheckName::Thm4 => {
            let dists = need(&design.dists, "dists", check)?;
            points_or_origin(g, model)
                .iter()
                .map(|x| thm4_check(model, dists, x, ctx))
                .collect()
        }
        CheckName::Berry => {
            let dists = need(&design.dists, "dists", check)?;
            points_or_origin(g, model)
                .iter()
                .map(|x| berry_deriv_check(model, dists, x, ctx))
                .collect()
        }
        CheckName::Wavg => {
            let dists = need(&design.dists, "dists", check)?;
            let w = need(&design.options.wavg, "options.wavg", check)?;
            one(weighted_avg_derivative(model, dists, &w.weight, &w.x_law, w.draws, ctx))
        }
        CheckName::Thm5 => {
            let dgp = need(&design.triangular, "triangular", check)?;
            let w = g.w.clone().unwrap_or_else(|| vec![-1.0, 0.0, 1.0]);
            one(verify_thm5(dgp, model, &x_grid(), &w, ctx))
        }
        CheckName::Cor6 => {
            let dgp = need(&design.triangular, "triangular", check)?;
            points_or_origin(g, model)
                .iter()
                .map(|x| avg_over_w(dgp, model, x, ctx))
                .collect()
        }
        CheckName::Lar => {
            let dgp = need(&design.triangular, "triangular", check)?;
            points_or_origin(g, model)
                .iter()
                .map(|x| lar_report(dgp, model, x, ctx))
                .collect()
        }
        CheckName::Thm7 => one(verify_thm7(need(&design.panel, "panel", check)?, model, &diag(), ctx)),
        CheckName::Thm8 => one(thm8_check(need(&design.panel, "panel", check)?, model, &diag(), ctx)),
        CheckName::Thm9 => {
            let dgp = need(&design.panel, "panel", check)?;
            let rec = thm9_recover_beta(dgp, model, &diag(), ctx, design.options.thm9_angle_tol)?;
            Ok(vec![rec.report])
        }
        CheckName::Thm10 => one(thm10_gap(need(&design.panel, "panel", check)?, model, &pairs(), ctx)),
        CheckName::Thm11 => one(thm11_gap(
            need(&design.panel, "panel", check)?,
            model,
            &pairs(),
            ctx,
            design.options.thm11_bandwidth,
        )),
    }
}

/// Errors that reject the configuration itself rather than a check result.
pub fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config { .. }
            | Error::Dimension { .. }
            | Error::WrongFamily { .. }
            | Error::Unsupported(_)
            | Error::UnsupportedMethod(_)
    )
}

fn with_name(mut rep: DerivativeReport, name: &str) -> DerivativeReport {
    if !name.is_empty() {
        rep.label = format!("{}/{name}", rep.label);
    }
    rep
}

/// Runs every selected check on every design in order. Configuration
/// errors abort; a violated precondition or refused identification turns
/// into a report without a verdict; any other failure of a check becomes a
/// failing report.
pub fn run_verify(cfg: &ExperimentConfig) -> Result<Vec<DerivativeReport>> {
    cfg.validate()?;
    let hash = cfg.hash();
    let mut out = Vec::new();
    for design in cfg.all_designs() {
        if design.checks.is_empty() {
            continue;
        }
        let model = design.model.build()?;
        let ctx = cfg.context(&design, &hash);
        for &check in &design.checks {
            let reps = match run_check(check, &design, &model, &ctx) {
                Ok(r) => r,
                Err(e) if is_config_error(&e) => return Err(e),
                Err(e) => {
                    let mut rep = ctx.report(check.as_str());
                    rep.status = match e {
                        Error::Precondition(_) | Error::Identification(_) => {
                            Status::PreconditionFailed(e.to_string())
                        }
                        _ => Status::Fail,
                    };
                    rep.note(e.to_string());
                    vec![rep]
                }
            };
            out.extend(reps.into_iter().map(|r| with_name(r, &design.name)));
        }
    }
    Ok(out)
}

/// A simulated sample of the primary design.
#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    CrossSection(CrossSectionSample),
    Panel(PanelSample),
}

impl Sample {
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        match self {
            Sample::CrossSection(s) => s.write_csv(out),
            Sample::Panel(s) => s.write_csv(out),
        }
    }

    pub fn file_name(&self) -> &'static str {
        match self {
            Sample::CrossSection(_) => "sample.csv",
            Sample::Panel(_) => "panel_sample.csv",
        }
    }
}

/// Simulates the primary design: a panel sample when a panel process is
/// configured, otherwise a cross-section sample from `estimation.x_law`.
pub fn run_simulate(cfg: &ExperimentConfig) -> Result<Sample> {
    cfg.validate()?;
    let est = cfg
        .estimation
        .as_ref()
        .ok_or_else(|| Error::config("estimation", "required to simulate"))?;
    let model = cfg.model.build()?;
    let hash = cfg.hash();
    if let Some(dgp) = &cfg.panel {
        let mut s = simulate_panel(dgp, &model, est.n, cfg.seed)?;
        s.config_hash = hash;
        return Ok(Sample::Panel(s));
    }
    let dists = cfg
        .dists
        .as_ref()
        .ok_or_else(|| Error::config("dists", "required to simulate a cross section"))?;
    let x_law = est
        .x_law
        .as_ref()
        .ok_or_else(|| Error::config("estimation.x_law", "required to simulate a cross section"))?;
    let mut s = simulate_cross_section(&model, dists, x_law, est.n, cfg.seed)?;
    s.config_hash = hash;
    Ok(Sample::CrossSection(s))
}

fn est_meta(cfg: &ExperimentConfig, hash: &str, n: usize) -> Metadata {
    Metadata {
        config_hash: hash.to_string(),
        seed: cfg.seed,
        draws: n,
    }
}

/// Simulates the primary design and estimates from the sample. Rows compare
/// estimates with population values computed from the known design; they
/// are informational except for the panel direction, which must lie within
/// `estimation.angle_bound` of the truth when the truth is a fixed
/// coefficient vector.
pub fn run_estimate(cfg: &ExperimentConfig) -> Result<Vec<DerivativeReport>> {
    let sample = run_simulate(cfg)?;
    let est = cfg.estimation.as_ref().expect("checked by run_simulate");
    let model = cfg.model.build()?;
    let hash = cfg.hash();
    let mut integ = cfg.integration.clone();
    integ.seed = cfg.seed;
    let meta = est_meta(cfg, &hash, est.n);
    match sample {
        Sample::CrossSection(s) => {
            let dists = cfg.dists.as_ref().expect("checked by run_simulate");
            estimate_cross_section(&s, &model, dists, est, &cfg.kernel, &integ, cfg.seed, meta)
        }
        Sample::Panel(s) => {
            let dgp = cfg.panel.as_ref().expect("checked by run_simulate");
            estimate_panel(&s, &model, dgp, est, &cfg.kernel, &integ, meta)
        }
    }
}

/// Population level and Jacobian at `x`, one row per response.
fn population_truth(
    model: &UtilityModel,
    dists: &Dists,
    x: &[f64],
    integ: &IntegrationSpec,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if model.is_binary() {
        let p = binary_choice_prob(model, dists, x, integ)?;
        let g = binary_prob_grad(model, dists, x, integ)?;
        Ok((p.value, g.value))
    } else {
        let p = choice_prob(model, dists, x, integ)?;
        let g = choice_prob_jacobian(model, dists, x, integ)?;
        Ok((p.value, g.value))
    }
}

#[allow(clippy::too_many_arguments)]
fn estimate_cross_section(
    s: &CrossSectionSample,
    model: &UtilityModel,
    dists: &Dists,
    est: &EstimationSpec,
    kcfg: &KernelConfig,
    integ: &IntegrationSpec,
    seed: u64,
    meta: Metadata,
) -> Result<Vec<DerivativeReport>> {
    let points = est
        .points
        .clone()
        .unwrap_or_else(|| vec![vec![0.0; model.x_len()]]);
    let mut fits = DerivativeReport::new("est_local_linear", meta.clone());
    fits.note("local-linear kernel estimates; rhs is the population value of the design");
    for x0 in &points {
        let fit = local_linear_fit(s, x0, kcfg)?;
        let (level, jac) = population_truth(model, dists, x0, integ)?;
        for (j, f) in fit.iter().enumerate() {
            let resp = if model.is_binary() { "P".to_string() } else { format!("P{}", j + 1) };
            fits.push(Row::new(x0, resp.clone(), f.level, level[j], f.level_se, Criterion::Info));
            for (c, (v, se)) in f.slope.iter().zip(&f.slope_se).enumerate() {
                let comp = format!("d{resp}/d{}", slot_name(model, c));
                fits.push(Row::new(x0, comp, *v, jac[j][c], *se, Criterion::Info));
            }
        }
    }
    let mut out = vec![fits.finish()];
    if let (true, Some(r)) = (model.is_binary(), est.ratio_reference) {
        let e = estimate_mean_coeff_ratio(s, kcfg, r, seed)?;
        let origin = vec![0.0; model.x_len()];
        let (_, jac) = population_truth(model, dists, &origin, integ)?;
        let mut rep = DerivativeReport::new("est_ratio", meta);
        rep.note("bootstrap normal intervals; lhs/rhs are estimated and population ratios");
        for (c, ci) in e.ratios.iter().enumerate() {
            let comp = format!("ratio_{}", c + 1);
            match ci {
                Some(ci) => {
                    let truth = jac[0][c] / jac[0][r];
                    rep.push(Row::new(&origin, comp.clone(), ci.value, truth, ci.se, Criterion::Info));
                    let covered = if ci.covers(truth) { 1.0 } else { 0.0 };
                    rep.push(Row::new(&origin, format!("{comp}_covered"), covered, 1.0, 0.0, Criterion::Info));
                }
                None if c != r => rep.note(format!("{comp} not reported: unstable reference slope")),
                None => {}
            }
        }
        out.push(rep.finish());
    }
    Ok(out)
}

fn true_direction(model: &UtilityModel, dgp: &PanelDgp) -> Option<Vec<f64>> {
    if !dgp.eta_is_constant() {
        return None;
    }
    match model.family() {
        Family::BinaryRc => Some(dgp.eta_mean.clone()),
        _ => None,
    }
}

fn estimate_panel(
    s: &PanelSample,
    model: &UtilityModel,
    dgp: &PanelDgp,
    est: &EstimationSpec,
    kcfg: &KernelConfig,
    integ: &IntegrationSpec,
    meta: Metadata,
) -> Result<Vec<DerivativeReport>> {
    let points = est
        .diag_points
        .clone()
        .unwrap_or_else(|| default_diag_grid(model.x_len()));
    let mut rep = DerivativeReport::new("est_panel", meta);
    rep.note("diagonal local-linear slopes in X2 of E[Y2 - Y1 | X1, X2]");
    let has_truth = model.is_binary() && model.is_additive();
    let mut fits = Vec::new();
    for x in &points {
        let fit = panel_diag_estimator(s, x, kcfg)?;
        let truth = if has_truth {
            Some(thm7_lhs(dgp, model, x, integ)?.value)
        } else {
            None
        };
        for (j, (row, se)) in fit.slope.iter().zip(&fit.slope_se).enumerate() {
            for (c, (v, e)) in row.iter().zip(se).enumerate() {
                let comp = if model.is_binary() {
                    format!("d{}", slot_name(model, c))
                } else {
                    format!("dP{}/d{}", j + 1, slot_name(model, c))
                };
                let rhs = truth.as_ref().map_or(0.0, |t| t[j][c]);
                rep.push(Row::new(x, comp, *v, rhs, *e, Criterion::Info));
            }
        }
        fits.push(fit);
    }
    if !has_truth {
        rep.note("no population slopes for this family; rhs is zero");
    }
    if let (Some(dir), Some(beta)) = (panel_direction(&fits), true_direction(model, dgp)) {
        let angle = unsigned_angle(&dir, &beta);
        rep.push(Row::new(&[], "direction_angle", angle, 0.0, 0.0, Criterion::AtMost(est.angle_bound)));
    }
    Ok(vec![rep.finish()])
}

/// Runs `f` on a worker pool capped at `threads` workers (all cores when
/// `None`). Results do not depend on the cap.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::config("threads", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"family": "binary_rc", "dims": {"alternatives": 2, "covariates": 2}},
        "dists": {"eta": {"normal": {"mean": [1, -2], "cov": [[1, 0], [0, 1]]}},
                  "noise": {"logistic_diff": {"xi": 0}}},
        "integration": {"method": "gauss_hermite", "nodes_per_dim": 12},
        "checks": ["cor3"]
    }"#;

    #[test]
    fn unknown_keys_are_rejected_with_a_path() {
        let bad = MINIMAL.replace("\"nodes_per_dim\"", "\"nodes\"");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "integration.nodes"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = MINIMAL.replace("\"cor3\"", "\"cor4\"");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "checks[0]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hash_tracks_overrides() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut b = cfg.clone();
        assert_eq!(cfg.hash(), b.hash());
        b.apply(&Overrides {
            seed: Some(9),
            ..Default::default()
        });
        assert_ne!(cfg.hash(), b.hash());
        assert_eq!(cfg.hash().len(), 16);
        let mut c = cfg.clone();
        c.apply(&Overrides {
            out: Some("elsewhere".into()),
            ..Default::default()
        });
        assert_eq!(cfg.hash(), c.hash());
    }

    #[test]
    fn check_lists_parse() {
        assert_eq!(
            parse_check_list("thm1, cor3,thm11").unwrap(),
            vec![CheckName::Thm1, CheckName::Cor3, CheckName::Thm11]
        );
        assert!(parse_check_list("thm12").is_err());
    }

    #[test]
    fn minimal_config_runs() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let reps = run_verify(&cfg).unwrap();
        assert_eq!(reps.len(), 1);
        assert!(reps[0].passed());
        assert_eq!(reps[0].meta.config_hash, cfg.hash());
    }
}
