//! Scenario documents and the batch experiment runner.
//!
//! A scenario is a plain-text document, one `key = value` per line, with
//! `#` starting a comment and dotted keys for grouping:
//!
//! ```text
//! name = lqg_scalar
//! grid.horizon = 1
//! grid.steps = 10000
//! model.state_dim = 1
//! model.a = constant [0]
//! model.b2 = constant [1, 0]
//! cost.q = constant [1]
//! noise = wiener 2
//! law = separated
//! experiments = cost_vs_predicted, causality
//! ```
//!
//! Value grammar:
//!
//! - matrices: `[a, b; c, d]` (rows split by `;`, entries by `,`); a
//!   single row or column is accepted where a vector is expected
//! - schedules: `constant [..]`, `poly [..] | [..]` (coefficients by
//!   ascending power of t), `table t0: [..] t1: [..]`
//! - noise: `wiener N`, `wiener_drift N <drift>`, `poisson r1 r2 ..`,
//!   `gbm <sigma>`, `gbm_drift <sigma> <mu>`, `step_change`, and
//!   `composite(a; b; ..)` for stacked independent blocks
//! - initial state: `deterministic [..]` or `gaussian [..]` (covariance)
//! - law: `zero`, `state_feedback`, `separated`, `change_point`
//!
//! Parsing never stops at the first problem: every malformed line,
//! unknown key, bad value, and semantic inconsistency is collected into
//! one validation error that names the offending keys. [`run_scenario`]
//! executes the requested experiments in their declared order and writes
//! a machine-readable report plus one illustrative trajectory; reruns of
//! the same document produce byte-identical reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::closed_loop::{
    causality_check, separated_law_kernel, solve_closed_loop, CausalityReport,
};
use crate::error::{Error, Result, ValidationIssue};
use crate::experiments::{
    change_point_accuracy_check, compare_costs_paired, control_cancellation_check, estimate_cost,
    ito_identity_check, predicted_full_information_cost, predicted_separated_cost,
    sigma_invariance_check, CancellationReport, ChangePointAccuracyReport, CostEstimate,
    CostOrdering, CovarianceInvarianceReport, ItoIdentityReport, PairedCostComparison,
};
use crate::grid::TimeGrid;
use crate::law::ControlLaw;
use crate::model::{CostSpec, InitialState, SystemModel};
use crate::noise::{sample_noise, NoiseSpec};
use crate::schedule::{MatrixSchedule, ScheduleRule};
use crate::synthesis::{solve_estimator, solve_regulator, EstimatorSolution, RegulatorSolution};

type ParseResult<T> = std::result::Result<T, String>;

/// Statistical experiments need this many paths before a pass/fail call
/// is considered meaningful; below it they report insufficient power.
pub const POWER_FLOOR: usize = 100;

/// Pathwise audits (exact identities checked path by path) cap their
/// ensemble here; extra paths add runtime without adding evidence.
const AUDIT_PATH_CAP: usize = 100;

/// Feedback law selected by a scenario document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LawChoice {
    Zero,
    StateFeedback,
    Separated,
    ChangePoint,
}

impl LawChoice {
    pub fn name(self) -> &'static str {
        match self {
            LawChoice::Zero => "zero",
            LawChoice::StateFeedback => "state_feedback",
            LawChoice::Separated => "separated",
            LawChoice::ChangePoint => "change_point",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "zero" => Some(LawChoice::Zero),
            "state_feedback" => Some(LawChoice::StateFeedback),
            "separated" => Some(LawChoice::Separated),
            "change_point" => Some(LawChoice::ChangePoint),
            _ => None,
        }
    }
}

/// Experiments the runner knows how to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentChoice {
    /// Monte Carlo cost of the scenario law against its closed-form
    /// prediction, within three standard errors plus a discretization
    /// allowance.
    CostVsPredicted,
    /// The scenario law against the same law with gains scaled by
    /// 1 +/- delta, paired on common noise; the synthesized gains must
    /// win both comparisons.
    SeparationMargin,
    /// The estimation error must not move when the control law changes.
    Cancellation,
    /// Terminal error covariance compared across laws on disjoint seed
    /// ranges.
    CovarianceInvariance,
    /// Pathwise value identity: exact jump terms, first-order decay of
    /// the integration residual under grid refinement.
    ItoIdentity,
    /// Resampling noise after a cut must not change the realized prefix.
    Causality,
    /// Posterior-mean change-point filter against direct Bayes
    /// quadrature on the same closed-loop records.
    ChangePointAccuracy,
}

impl ExperimentChoice {
    pub const ALL: [ExperimentChoice; 7] = [
        ExperimentChoice::CostVsPredicted,
        ExperimentChoice::SeparationMargin,
        ExperimentChoice::Cancellation,
        ExperimentChoice::CovarianceInvariance,
        ExperimentChoice::ItoIdentity,
        ExperimentChoice::Causality,
        ExperimentChoice::ChangePointAccuracy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentChoice::CostVsPredicted => "cost_vs_predicted",
            ExperimentChoice::SeparationMargin => "separation_margin",
            ExperimentChoice::Cancellation => "cancellation",
            ExperimentChoice::CovarianceInvariance => "covariance_invariance",
            ExperimentChoice::ItoIdentity => "ito_identity",
            ExperimentChoice::Causality => "causality",
            ExperimentChoice::ChangePointAccuracy => "change_point_accuracy",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s)
    }

    /// True for experiments whose verdict rests on standard errors.
    fn is_statistical(self) -> bool {
        matches!(
            self,
            ExperimentChoice::CostVsPredicted
                | ExperimentChoice::SeparationMargin
                | ExperimentChoice::CovarianceInvariance
        )
    }
}

fn default_experiments() -> Vec<ExperimentChoice> {
    vec![
        ExperimentChoice::CostVsPredicted,
        ExperimentChoice::SeparationMargin,
        ExperimentChoice::Cancellation,
        ExperimentChoice::CovarianceInvariance,
        ExperimentChoice::ItoIdentity,
        ExperimentChoice::Causality,
    ]
}

/// Pass thresholds for the exact pathwise audits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tolerances {
    /// Largest allowed movement of the estimation error across laws.
    pub cancellation: f64,
    /// Relative mismatch allowed in the pathwise value identity.
    pub ito_mismatch: f64,
    /// RMS gap allowed between the change-point filter and quadrature.
    pub change_point_rms: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            cancellation: 1e-10,
            ito_mismatch: 1e-2,
            change_point_rms: 5e-3,
        }
    }
}

/// A fully parsed scenario: everything [`run_scenario`] needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub grid: TimeGrid,
    pub model: SystemModel,
    pub cost: CostSpec,
    pub noise: NoiseSpec,
    pub law: LawChoice,
    /// Gain scale applied to the scenario law (1 = the synthesized law).
    pub detune: f64,
    pub experiments: Vec<ExperimentChoice>,
    pub paths: usize,
    pub seed: u64,
    /// Relative gain perturbation used by the separation-margin study.
    pub delta: f64,
    /// Grid coarsening factor for the value-identity decay study.
    pub refine_factor: usize,
    pub tolerances: Tolerances,
    pub out_dir: PathBuf,
}

// ---------------------------------------------------------------------------
// Document parsing
// ---------------------------------------------------------------------------

fn split_document(
    text: &str,
) -> (BTreeMap<String, (String, usize)>, Vec<ValidationIssue>) {
    let mut values: BTreeMap<String, (String, usize)> = BTreeMap::new();
    let mut issues = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            issues.push(ValidationIssue::new(
                format!("line {line_no}"),
                "expected `key = value`",
            ));
            continue;
        };
        let key = key.trim();
        if key.is_empty() {
            issues.push(ValidationIssue::new(
                format!("line {line_no}"),
                "empty key before `=`",
            ));
            continue;
        }
        if let Some((_, first_line)) = values.get(key) {
            issues.push(ValidationIssue::new(
                key,
                format!("defined more than once (lines {first_line} and {line_no})"),
            ));
            continue;
        }
        values.insert(key.to_string(), (value.trim().to_string(), line_no));
    }
    (values, issues)
}

struct Extractor {
    values: BTreeMap<String, (String, usize)>,
    taken: BTreeSet<String>,
    issues: Vec<ValidationIssue>,
}

impl Extractor {
    fn new(values: BTreeMap<String, (String, usize)>) -> Self {
        Extractor {
            values,
            taken: BTreeSet::new(),
            issues: Vec::new(),
        }
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.taken.insert(key.to_string());
        self.values.get(key).map(|(v, _)| v.clone())
    }

    fn required<T>(
        &mut self,
        key: &str,
        what: &str,
        parse: impl FnOnce(&str) -> ParseResult<T>,
    ) -> Option<T> {
        match self.take(key) {
            None => {
                self.issues
                    .push(ValidationIssue::new(key, format!("missing ({what})")));
                None
            }
            Some(text) => match parse(&text) {
                Ok(v) => Some(v),
                Err(e) => {
                    self.issues.push(ValidationIssue::new(key, e));
                    None
                }
            },
        }
    }

    fn optional<T>(
        &mut self,
        key: &str,
        default: T,
        parse: impl FnOnce(&str) -> ParseResult<T>,
    ) -> T {
        match self.take(key) {
            None => default,
            Some(text) => match parse(&text) {
                Ok(v) => v,
                Err(e) => {
                    self.issues.push(ValidationIssue::new(key, e));
                    default
                }
            },
        }
    }

    /// Field-level issues plus one issue per key that no extractor asked
    /// for, so typos surface instead of being silently ignored.
    fn finish(mut self) -> Vec<ValidationIssue> {
        for (key, (_, line)) in &self.values {
            if !self.taken.contains(key) {
                self.issues
                    .push(ValidationIssue::new(key, format!("unknown key (line {line})")));
            }
        }
        self.issues
    }
}

fn parse_f64_text(s: &str) -> ParseResult<f64> {
    let t = s.trim();
    let v: f64 = t.parse().map_err(|_| format!("bad number `{t}`"))?;
    if !v.is_finite() {
        return Err(format!("number `{t}` is not finite"));
    }
    Ok(v)
}

fn parse_pos_f64_text(s: &str) -> ParseResult<f64> {
    let v = parse_f64_text(s)?;
    if v <= 0.0 {
        return Err(format!("must be positive (got {v})"));
    }
    Ok(v)
}

fn parse_usize_text(s: &str) -> ParseResult<usize> {
    let t = s.trim();
    t.parse().map_err(|_| format!("bad integer `{t}`"))
}

fn parse_pos_usize_text(s: &str) -> ParseResult<usize> {
    let v = parse_usize_text(s)?;
    if v == 0 {
        return Err("must be at least 1".into());
    }
    Ok(v)
}

fn parse_u64_text(s: &str) -> ParseResult<u64> {
    let t = s.trim();
    t.parse().map_err(|_| format!("bad integer `{t}`"))
}

fn parse_bool_text(s: &str) -> ParseResult<bool> {
    match s.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got `{other}`")),
    }
}

fn parse_matrix_text(s: &str) -> ParseResult<DMatrix<f64>> {
    let s = s.trim();
    let inner = s
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| "expected a bracketed matrix like [1, 0; 0, 1]".to_string())?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for row in inner.split(';') {
        let mut entries = Vec::new();
        for tok in row.split(',') {
            let tok = tok.trim();
            if tok.is_empty() {
                return Err("empty matrix entry".into());
            }
            entries.push(parse_f64_text(tok)?);
        }
        rows.push(entries);
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("matrix rows have different lengths".into());
    }
    let nrows = rows.len();
    Ok(DMatrix::from_row_iterator(
        nrows,
        ncols,
        rows.into_iter().flatten(),
    ))
}

/// A vector is a matrix with one row or one column.
fn parse_vector_text(s: &str) -> ParseResult<DVector<f64>> {
    let m = parse_matrix_text(s)?;
    if m.nrows() == 1 || m.ncols() == 1 {
        Ok(DVector::from_iterator(m.len(), m.iter().copied()))
    } else {
        Err(format!("expected a vector, got a {}x{} matrix", m.nrows(), m.ncols()))
    }
}

fn split_first_word(s: &str) -> (&str, &str) {
    let s = s.trim_start();
    match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], s[i..].trim_start()),
        None => (s, ""),
    }
}

fn parse_schedule_text(s: &str) -> ParseResult<MatrixSchedule> {
    let (word, rest) = split_first_word(s);
    match word {
        "constant" => parse_matrix_text(rest).map(MatrixSchedule::constant),
        "poly" => {
            let coeffs = rest
                .split('|')
                .map(parse_matrix_text)
                .collect::<ParseResult<Vec<_>>>()?;
            MatrixSchedule::polynomial(coeffs).map_err(|e| e.to_string())
        }
        "table" => {
            let knots = parse_table_knots(rest)?;
            MatrixSchedule::table(knots).map_err(|e| e.to_string())
        }
        other => Err(format!(
            "unknown schedule form `{other}` (expected constant, poly, or table)"
        )),
    }
}

fn parse_table_knots(rest: &str) -> ParseResult<Vec<(f64, DMatrix<f64>)>> {
    let mut knots = Vec::new();
    let mut cursor = rest.trim();
    while !cursor.is_empty() {
        let colon = cursor
            .find(':')
            .ok_or_else(|| "table knots look like `t: [matrix]`".to_string())?;
        let t = parse_f64_text(&cursor[..colon])?;
        let after = cursor[colon + 1..].trim_start();
        if !after.starts_with('[') {
            return Err("knot value must be a bracketed matrix".into());
        }
        let close = after
            .find(']')
            .ok_or_else(|| "unbalanced `[` in a table knot".to_string())?;
        knots.push((t, parse_matrix_text(&after[..=close])?));
        cursor = after[close + 1..].trim_start();
    }
    if knots.is_empty() {
        return Err("table needs at least one knot".into());
    }
    Ok(knots)
}

fn parse_noise_text(s: &str) -> ParseResult<NoiseSpec> {
    let s = s.trim();
    if let Some(rest) = s.strip_prefix("composite") {
        let rest = rest.trim();
        let inner = rest
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| "composite needs parentheses: composite(a; b)".to_string())?;
        let mut parts = Vec::new();
        let mut depth = 0usize;
        let mut start = 0usize;
        for (i, ch) in inner.char_indices() {
            match ch {
                '(' => depth += 1,
                ')' => {
                    depth = depth
                        .checked_sub(1)
                        .ok_or_else(|| "unbalanced parentheses".to_string())?;
                }
                ';' if depth == 0 => {
                    parts.push(&inner[start..i]);
                    start = i + 1;
                }
                _ => {}
            }
        }
        if depth != 0 {
            return Err("unbalanced parentheses".into());
        }
        parts.push(&inner[start..]);
        let blocks = parts
            .into_iter()
            .map(parse_noise_text)
            .collect::<ParseResult<Vec<_>>>()?;
        return Ok(NoiseSpec::Composite(blocks));
    }
    let tokens: Vec<&str> = s.split_whitespace().collect();
    match tokens.as_slice() {
        ["wiener", d] => Ok(NoiseSpec::Wiener {
            dim: parse_pos_usize_text(d)?,
        }),
        ["wiener_drift", d, drift] => Ok(NoiseSpec::WienerWithDrift {
            dim: parse_pos_usize_text(d)?,
            drift: parse_f64_text(drift)?,
        }),
        ["poisson", rates @ ..] if !rates.is_empty() => Ok(NoiseSpec::CompensatedPoisson {
            rates: rates
                .iter()
                .map(|r| parse_f64_text(r))
                .collect::<ParseResult<Vec<_>>>()?,
        }),
        ["gbm", sigma] => Ok(NoiseSpec::GbmMartingale {
            sigma: parse_f64_text(sigma)?,
        }),
        ["gbm_drift", sigma, mu] => Ok(NoiseSpec::GbmWithDrift {
            sigma: parse_f64_text(sigma)?,
            mu: parse_f64_text(mu)?,
        }),
        ["step_change"] => Ok(NoiseSpec::StepChange),
        [] => Err("empty noise description".into()),
        _ => Err(format!(
            "unknown noise form `{s}` (wiener N, wiener_drift N mu, poisson r.., \
             gbm s, gbm_drift s mu, step_change, composite(..))"
        )),
    }
}

fn parse_initial_text(s: &str) -> ParseResult<InitialState> {
    let (word, rest) = split_first_word(s);
    match word {
        "deterministic" => parse_vector_text(rest).map(InitialState::Deterministic),
        "gaussian" => parse_matrix_text(rest).map(|p0| InitialState::Gaussian { p0 }),
        other => Err(format!(
            "unknown initial-state form `{other}` (expected deterministic or gaussian)"
        )),
    }
}

fn parse_law_text(s: &str) -> ParseResult<LawChoice> {
    let t = s.trim();
    LawChoice::from_name(t).ok_or_else(|| {
        format!("unknown law `{t}` (zero, state_feedback, separated, change_point)")
    })
}

fn parse_experiments_text(s: &str) -> ParseResult<Vec<ExperimentChoice>> {
    let mut chosen = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err("empty experiment name in the list".into());
        }
        let exp = ExperimentChoice::from_name(part).ok_or_else(|| {
            let known: Vec<&str> = ExperimentChoice::ALL.iter().map(|e| e.name()).collect();
            format!("unknown experiment `{part}` (known: {})", known.join(", "))
        })?;
        chosen.push(exp);
    }
    if chosen.is_empty() {
        return Err("need at least one experiment".into());
    }
    Ok(chosen)
}

impl Scenario {
    /// Parse a scenario document, collecting every problem before
    /// reporting. On failure the returned [`Error::Validation`] lists one
    /// issue per offending key.
    pub fn parse(text: &str) -> Result<Scenario> {
        let (values, mut issues) = split_document(text);
        let mut ex = Extractor::new(values);

        let name = ex.required("name", "scenario name", |s| {
            let s = s.trim();
            if s.is_empty() {
                Err("must not be empty".into())
            } else {
                Ok(s.to_string())
            }
        });
        let horizon = ex.optional("grid.horizon", 1.0, parse_pos_f64_text);
        let steps = ex.optional("grid.steps", 10_000, parse_pos_usize_text);

        let state_dim = ex.required("model.state_dim", "state dimension", parse_pos_usize_text);
        let control_dim =
            ex.required("model.control_dim", "control dimension", parse_pos_usize_text);
        let obs_dim = ex.required("model.obs_dim", "observation dimension", parse_pos_usize_text);
        let noise_dim = ex.required("model.noise_dim", "noise dimension", parse_pos_usize_text);
        let a = ex.required("model.a", "drift schedule", parse_schedule_text);
        let b1 = ex.required("model.b1", "control schedule", parse_schedule_text);
        let b2 = ex.required("model.b2", "state noise schedule", parse_schedule_text);
        let c = ex.required("model.c", "observation schedule", parse_schedule_text);
        let d = ex.required("model.d", "observation noise schedule", parse_schedule_text);
        let initial = ex.required("model.initial", "initial state law", parse_initial_text);
        let independent = ex.optional("model.independent_noise", true, parse_bool_text);

        let q = ex.required("cost.q", "running state weight", parse_schedule_text);
        let r = ex.required("cost.r", "running control weight", parse_schedule_text);
        let s = ex.required("cost.s", "terminal weight matrix", parse_matrix_text);

        let noise = ex.required("noise", "noise description", parse_noise_text);
        let law = ex.required("law", "feedback law", parse_law_text);
        let detune = ex.optional("law.detune", 1.0, parse_pos_f64_text);
        let experiments = ex.optional("experiments", default_experiments(), parse_experiments_text);
        let paths = ex.optional("paths", 10_000, parse_pos_usize_text);
        let seed = ex.optional("seed", 1, parse_u64_text);
        let delta = ex.optional("detune.delta", 0.2, parse_pos_f64_text);
        let refine_factor = ex.optional("ito.refine_factor", 10, parse_pos_usize_text);
        let tolerances = Tolerances {
            cancellation: ex.optional(
                "tolerances.cancellation",
                Tolerances::default().cancellation,
                parse_pos_f64_text,
            ),
            ito_mismatch: ex.optional(
                "tolerances.ito_mismatch",
                Tolerances::default().ito_mismatch,
                parse_pos_f64_text,
            ),
            change_point_rms: ex.optional(
                "tolerances.change_point_rms",
                Tolerances::default().change_point_rms,
                parse_pos_f64_text,
            ),
        };
        let out_dir = ex.optional("out", PathBuf::from("out"), |s| {
            let s = s.trim();
            if s.is_empty() {
                Err("must not be empty".into())
            } else {
                Ok(PathBuf::from(s))
            }
        });

        issues.extend(ex.finish());

        let grid = match TimeGrid::new(horizon, steps) {
            Ok(g) => Some(g),
            Err(e) => {
                issues.push(ValidationIssue::new("grid", e.to_string()));
                None
            }
        };
        let model = match (
            state_dim, control_dim, obs_dim, noise_dim, a, b1, b2, c, d, initial,
        ) {
            (
                Some(state_dim),
                Some(control_dim),
                Some(obs_dim),
                Some(noise_dim),
                Some(a),
                Some(b1),
                Some(b2),
                Some(c),
                Some(d),
                Some(initial),
            ) => Some(SystemModel {
                state_dim,
                control_dim,
                obs_dim,
                noise_dim,
                a,
                b1,
                b2,
                c,
                d,
                initial,
                require_independent_noise: independent,
            }),
            _ => None,
        };
        let cost = match (q, r, s) {
            (Some(q), Some(r), Some(s)) => Some(CostSpec { q, r, s }),
            _ => None,
        };

        // Semantic checks on whatever pieces parsed, kept aside: when the
        // whole scenario assembles, `semantic_issues` re-derives them all;
        // when it cannot, these stop one bad key from hiding unrelated
        // problems.
        let mut partial = Vec::new();
        if let Some(grid) = &grid {
            if let Some(model) = &model {
                if let Err(e) = model.validate(grid) {
                    partial.push(ValidationIssue::new("model", e.to_string()));
                }
            }
            if let (Some(cost), Some(n), Some(m)) = (&cost, state_dim, control_dim) {
                partial.extend(cost_validation_issue(cost, grid, n, m));
            }
        }
        if let Some(noise) = &noise {
            if let Err(e) = noise.validate() {
                partial.push(ValidationIssue::new("noise", e.to_string()));
            }
        }

        let candidate = match (name, grid, model, cost, noise, law) {
            (Some(name), Some(grid), Some(model), Some(cost), Some(noise), Some(law)) => {
                Some(Scenario {
                    name,
                    grid,
                    model,
                    cost,
                    noise,
                    law,
                    detune,
                    experiments,
                    paths,
                    seed,
                    delta,
                    refine_factor,
                    tolerances,
                    out_dir,
                })
            }
            _ => None,
        };

        match &candidate {
            Some(sc) => issues.extend(sc.semantic_issues()),
            None => issues.extend(partial),
        }
        if issues.is_empty() {
            Ok(candidate.expect("no issues implies every field parsed"))
        } else {
            Err(Error::Validation { issues })
        }
    }

    /// Consistency problems beyond per-field syntax: model and cost
    /// validity on the grid, noise dimensions, and the structural
    /// assumptions of the selected law and experiments. Empty means
    /// runnable.
    pub fn semantic_issues(&self) -> Vec<ValidationIssue> {
        let mut issues = Vec::new();
        if self.name.trim().is_empty() {
            issues.push(ValidationIssue::new("name", "must not be empty"));
        }
        if let Err(e) = self.model.validate(&self.grid) {
            issues.push(ValidationIssue::new("model", e.to_string()));
        }
        issues.extend(cost_validation_issue(
            &self.cost,
            &self.grid,
            self.model.state_dim,
            self.model.control_dim,
        ));
        if let Err(e) = self.noise.validate() {
            issues.push(ValidationIssue::new("noise", e.to_string()));
        } else if self.noise.dim() != self.model.noise_dim {
            issues.push(ValidationIssue::new(
                "noise",
                format!(
                    "drives {} components but model.noise_dim is {}",
                    self.noise.dim(),
                    self.model.noise_dim
                ),
            ));
        }

        let wants_change_point = self.law == LawChoice::ChangePoint
            || self
                .experiments
                .contains(&ExperimentChoice::ChangePointAccuracy);
        if wants_change_point {
            issues.extend(change_point_structure_issues(&self.model, &self.grid));
        }

        let wants_prediction = self.experiments.iter().any(|e| {
            matches!(
                e,
                ExperimentChoice::CostVsPredicted | ExperimentChoice::SeparationMargin
            )
        });
        if wants_prediction {
            if !matches!(self.law, LawChoice::Separated | LawChoice::StateFeedback) {
                issues.push(ValidationIssue::new(
                    "experiments",
                    "cost_vs_predicted and separation_margin need law = separated or state_feedback",
                ));
            }
            if self.detune != 1.0 {
                issues.push(ValidationIssue::new(
                    "law.detune",
                    "must be 1 when cost_vs_predicted or separation_margin run \
                     (the baseline is the synthesized law)",
                ));
            }
        }
        if self.experiments.contains(&ExperimentChoice::ItoIdentity) {
            if self.refine_factor < 2 {
                issues.push(ValidationIssue::new(
                    "ito.refine_factor",
                    "must be at least 2",
                ));
            } else if self.grid.steps() % self.refine_factor != 0 {
                issues.push(ValidationIssue::new(
                    "ito.refine_factor",
                    format!("must divide grid.steps ({})", self.grid.steps()),
                ));
            }
        }

        let mut seen = BTreeSet::new();
        for e in &self.experiments {
            if !seen.insert(e.name()) {
                issues.push(ValidationIssue::new(
                    "experiments",
                    format!("`{}` listed more than once", e.name()),
                ));
            }
        }
        if self.experiments.is_empty() {
            issues.push(ValidationIssue::new(
                "experiments",
                "need at least one experiment",
            ));
        }
        if self.experiments.iter().any(|e| e.is_statistical()) && self.paths < 2 {
            issues.push(ValidationIssue::new(
                "paths",
                "statistical experiments need at least 2 paths",
            ));
        }
        if self.paths == 0 {
            issues.push(ValidationIssue::new("paths", "must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            issues.push(ValidationIssue::new(
                "detune.delta",
                "must lie strictly between 0 and 1",
            ));
        }
        if !(self.detune > 0.0 && self.detune.is_finite()) {
            issues.push(ValidationIssue::new("law.detune", "must be positive and finite"));
        }
        for (key, value) in [
            ("tolerances.cancellation", self.tolerances.cancellation),
            ("tolerances.ito_mismatch", self.tolerances.ito_mismatch),
            (
                "tolerances.change_point_rms",
                self.tolerances.change_point_rms,
            ),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                issues.push(ValidationIssue::new(key, "must be positive and finite"));
            }
        }
        issues
    }

    /// Errors out with the full issue list when the scenario is not
    /// runnable.
    pub fn validate(&self) -> Result<()> {
        let issues = self.semantic_issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation { issues })
        }
    }

    /// Canonical document for this scenario: every key explicit, values
    /// in the same grammar [`Scenario::parse`] reads. Parsing the result
    /// reproduces the scenario exactly.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        let mut line = |key: &str, value: String| {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        };
        line("name", self.name.clone());
        line("grid.horizon", fmt_f64(self.grid.horizon()));
        line("grid.steps", self.grid.steps().to_string());
        line("model.state_dim", self.model.state_dim.to_string());
        line("model.control_dim", self.model.control_dim.to_string());
        line("model.obs_dim", self.model.obs_dim.to_string());
        line("model.noise_dim", self.model.noise_dim.to_string());
        line("model.a", fmt_schedule(&self.model.a));
        line("model.b1", fmt_schedule(&self.model.b1));
        line("model.b2", fmt_schedule(&self.model.b2));
        line("model.c", fmt_schedule(&self.model.c));
        line("model.d", fmt_schedule(&self.model.d));
        line("model.initial", fmt_initial(&self.model.initial));
        line(
            "model.independent_noise",
            self.model.require_independent_noise.to_string(),
        );
        line("cost.q", fmt_schedule(&self.cost.q));
        line("cost.r", fmt_schedule(&self.cost.r));
        line("cost.s", fmt_matrix(&self.cost.s));
        line("noise", fmt_noise(&self.noise));
        line("law", self.law.name().to_string());
        line("law.detune", fmt_f64(self.detune));
        line(
            "experiments",
            self.experiments
                .iter()
                .map(|e| e.name())
                .collect::<Vec<_>>()
                .join(", "),
        );
        line("paths", self.paths.to_string());
        line("seed", self.seed.to_string());
        line("detune.delta", fmt_f64(self.delta));
        line("ito.refine_factor", self.refine_factor.to_string());
        line(
            "tolerances.cancellation",
            fmt_f64(self.tolerances.cancellation),
        );
        line(
            "tolerances.ito_mismatch",
            fmt_f64(self.tolerances.ito_mismatch),
        );
        line(
            "tolerances.change_point_rms",
            fmt_f64(self.tolerances.change_point_rms),
        );
        line("out", self.out_dir.display().to_string());
        out
    }

    /// The concrete feedback law this scenario puts in the loop.
    fn control_law(
        &self,
        regulator: &RegulatorSolution,
        estimator: &EstimatorSolution,
    ) -> Result<ControlLaw> {
        Ok(match self.law {
            LawChoice::Zero => ControlLaw::Zero,
            LawChoice::StateFeedback => ControlLaw::StateFeedback {
                gain: regulator.detuned(self.detune).gain_schedule(),
            },
            LawChoice::Separated => ControlLaw::SeparatedLqg {
                regulator: regulator.detuned(self.detune),
                estimator: estimator.clone(),
            },
            LawChoice::ChangePoint => ControlLaw::ChangePointLqg {
                sigma: change_point_sigma(&self.model)?,
                gain: regulator.detuned(self.detune).gain_schedule(),
            },
        })
    }
}

/// Cost validation with the issue attributed to the weight the message
/// names, so a non-PSD Q reads as a `cost.q` problem.
fn cost_validation_issue(
    cost: &CostSpec,
    grid: &TimeGrid,
    state_dim: usize,
    control_dim: usize,
) -> Option<ValidationIssue> {
    match cost.validate(grid, state_dim, control_dim) {
        Ok(_) => None,
        Err(e) => {
            let text = e.to_string();
            let key = if text.contains("weight Q") {
                "cost.q"
            } else if text.contains("weight R") {
                "cost.r"
            } else if text.contains("weight S") {
                "cost.s"
            } else {
                "cost"
            };
            Some(ValidationIssue::new(key, text))
        }
    }
}

/// Observation noise level for the change-point filter, read off the
/// (validated constant, scalar) D schedule.
fn change_point_sigma(model: &SystemModel) -> Result<f64> {
    let d = model.d.eval(0.0);
    let s2 = (&d * d.transpose())[(0, 0)];
    if s2 > 0.0 {
        Ok(s2.sqrt())
    } else {
        Err(Error::InvalidArgument {
            arg: "model.d",
            reason: "the change-point filter needs positive observation noise".into(),
        })
    }
}

/// The posterior-mean filter hardwires the scalar structure
/// dx = u dt + dv, dy = x dt + sigma dw; reject models that deviate.
/// Schedules are checked at sampled times, which catches configuration
/// mistakes rather than adversarial time dependence.
fn change_point_structure_issues(
    model: &SystemModel,
    grid: &TimeGrid,
) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    for (key, dim) in [
        ("model.state_dim", model.state_dim),
        ("model.control_dim", model.control_dim),
        ("model.obs_dim", model.obs_dim),
    ] {
        if dim != 1 {
            issues.push(ValidationIssue::new(
                key,
                "the change-point filter is scalar (dimension 1 required)",
            ));
        }
    }
    let samples = [0.0, 0.5 * grid.horizon(), grid.horizon()];
    for (key, schedule, want, role) in [
        ("model.a", &model.a, 0.0, "zero drift"),
        ("model.b1", &model.b1, 1.0, "unit control channel"),
        ("model.c", &model.c, 1.0, "unit observation map"),
    ] {
        if schedule.shape() == (1, 1)
            && samples.iter().any(|&t| schedule.eval(t)[(0, 0)] != want)
        {
            issues.push(ValidationIssue::new(
                key,
                format!("the change-point filter assumes {role} ({want} everywhere)"),
            ));
        }
    }
    if model.obs_dim == 1 && model.d.shape().0 == 1 {
        let d0 = model.d.eval(samples[0]);
        if samples[1..].iter().any(|&t| model.d.eval(t) != d0) {
            issues.push(ValidationIssue::new(
                "model.d",
                "must be constant in time for the change-point filter",
            ));
        } else if (&d0 * d0.transpose())[(0, 0)] <= 0.0 {
            issues.push(ValidationIssue::new(
                "model.d",
                "the change-point filter needs positive observation noise",
            ));
        }
    }
    issues
}

// ---------------------------------------------------------------------------
// Canonical value formatting (inverse of the parsers above)
// ---------------------------------------------------------------------------

/// Display for f64 prints the shortest decimal that parses back to the
/// same bits, so documents round-trip exactly.
fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .map(|j| fmt_f64(m[(i, j)]))
                .collect::<Vec<_>>()
                .join(", ")
        })
        .collect();
    format!("[{}]", rows.join("; "))
}

fn fmt_schedule(s: &MatrixSchedule) -> String {
    match s.rule() {
        ScheduleRule::Constant(m) => format!("constant {}", fmt_matrix(m)),
        ScheduleRule::Polynomial(coeffs) => {
            let parts: Vec<String> = coeffs.iter().map(fmt_matrix).collect();
            format!("poly {}", parts.join(" | "))
        }
        ScheduleRule::Table(knots) => {
            let parts: Vec<String> = knots
                .iter()
                .map(|(t, m)| format!("{}: {}", fmt_f64(*t), fmt_matrix(m)))
                .collect();
            format!("table {}", parts.join(" "))
        }
    }
}

fn fmt_noise(spec: &NoiseSpec) -> String {
    match spec {
        NoiseSpec::Wiener { dim } => format!("wiener {dim}"),
        NoiseSpec::WienerWithDrift { dim, drift } => {
            format!("wiener_drift {dim} {}", fmt_f64(*drift))
        }
        NoiseSpec::CompensatedPoisson { rates } => {
            let parts: Vec<String> = rates.iter().map(|r| fmt_f64(*r)).collect();
            format!("poisson {}", parts.join(" "))
        }
        NoiseSpec::GbmMartingale { sigma } => format!("gbm {}", fmt_f64(*sigma)),
        NoiseSpec::GbmWithDrift { sigma, mu } => {
            format!("gbm_drift {} {}", fmt_f64(*sigma), fmt_f64(*mu))
        }
        NoiseSpec::StepChange => "step_change".to_string(),
        NoiseSpec::Composite(parts) => {
            let inner: Vec<String> = parts.iter().map(fmt_noise).collect();
            format!("composite({})", inner.join("; "))
        }
    }
}

fn fmt_initial(initial: &InitialState) -> String {
    match initial {
        InitialState::Deterministic(v) => {
            let parts: Vec<String> = v.iter().map(|x| fmt_f64(*x)).collect();
            format!("deterministic [{}]", parts.join(", "))
        }
        InitialState::Gaussian { p0 } => format!("gaussian {}", fmt_matrix(p0)),
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

const PRESET_LQG_SCALAR: &str = "\
# Scalar integrator benchmark: state noise on the first channel,
# observation noise on the second, certainty-equivalence output feedback.
name = lqg_scalar
grid.horizon = 1
grid.steps = 10000
model.state_dim = 1
model.control_dim = 1
model.obs_dim = 1
model.noise_dim = 2
model.a = constant [0]
model.b1 = constant [1]
model.b2 = constant [1, 0]
model.c = constant [1]
model.d = constant [0, 1]
model.initial = deterministic [1]
cost.q = constant [1]
cost.r = constant [1]
cost.s = [0]
noise = wiener 2
law = separated
experiments = cost_vs_predicted, separation_margin, cancellation, covariance_invariance, ito_identity, causality
paths = 10000
seed = 1
";

const PRESET_SHIRYAEV_STEP: &str = "\
# Step-change disturbance behind unit observation noise: the
# posterior-mean filter drives the loop and is audited against direct
# Bayes quadrature on the same records.
name = shiryaev_step
grid.horizon = 1
grid.steps = 10000
model.state_dim = 1
model.control_dim = 1
model.obs_dim = 1
model.noise_dim = 2
model.a = constant [0]
model.b1 = constant [1]
model.b2 = constant [1, 0]
model.c = constant [1]
model.d = constant [0, 1]
model.initial = deterministic [0]
cost.q = constant [1]
cost.r = constant [1]
cost.s = [0]
noise = composite(step_change; wiener 1)
law = change_point
experiments = change_point_accuracy, causality
paths = 100
seed = 1
";

pub const PRESET_NAMES: [&str; 2] = ["lqg_scalar", "shiryaev_step"];

/// The document text for a named preset.
pub fn preset_document(name: &str) -> Option<&'static str> {
    match name {
        "lqg_scalar" => Some(PRESET_LQG_SCALAR),
        "shiryaev_step" => Some(PRESET_SHIRYAEV_STEP),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

/// Outcome of one experiment or of a whole scenario. Statistical
/// experiments degrade to `InsufficientPower` instead of guessing when
/// the ensemble is too small to call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    InsufficientPower,
}

impl Verdict {
    fn combine(self, other: Verdict) -> Verdict {
        match (self, other) {
            (Verdict::Fail, _) | (_, Verdict::Fail) => Verdict::Fail,
            (Verdict::InsufficientPower, _) | (_, Verdict::InsufficientPower) => {
                Verdict::InsufficientPower
            }
            _ => Verdict::Pass,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentOutcome {
    pub name: String,
    pub verdict: Verdict,
    /// Human-readable reason, present exactly when the verdict is Fail.
    pub failure: Option<String>,
    pub detail: ExperimentDetail,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentDetail {
    CostVsPredicted {
        predicted: f64,
        gap: f64,
        budget: f64,
        estimate: CostEstimate,
    },
    SeparationMargin {
        delta: f64,
        upward: PairedCostComparison,
        downward: PairedCostComparison,
    },
    Cancellation(CancellationReport),
    CovarianceInvariance(CovarianceInvarianceReport),
    ItoIdentity(ItoIdentityReport),
    Causality(CausalityReport),
    ChangePointAccuracy(ChangePointAccuracyReport),
}

/// Everything `report.json` holds. Contains no clocks, hostnames, or
/// other run-environment detail: rerunning a scenario must reproduce the
/// report byte for byte.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub law: String,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub experiments: Vec<ExperimentOutcome>,
    pub overall: Verdict,
}

/// Execute a scenario's experiments in their declared order and write
/// the artifacts into its output directory:
///
/// - `report.json`: the [`ScenarioReport`], deterministically serialized
/// - `state.csv`, `observation.csv`, `control.csv`: one closed-loop
///   trajectory under the scenario law at the configured seed
/// - `FAILED`: present only when the overall verdict is Fail, naming
///   each failed experiment
///
/// Statistical experiments use the full path budget; exact pathwise
/// audits cap theirs at 100 paths, where more repetition stops adding
/// evidence. The overall verdict is the worst of the individual ones
/// (Fail over InsufficientPower over Pass).
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioReport> {
    scenario.validate()?;
    fs::create_dir_all(&scenario.out_dir).map_err(|e| Error::Io {
        path: scenario.out_dir.display().to_string(),
        source: e,
    })?;

    let regulator = solve_regulator(&scenario.model, &scenario.cost, &scenario.grid)?;
    let estimator = solve_estimator(&scenario.model, &scenario.grid)?;
    let law = scenario.control_law(&regulator, &estimator)?;

    let mut outcomes = Vec::with_capacity(scenario.experiments.len());
    for &choice in &scenario.experiments {
        outcomes.push(run_experiment(scenario, &regulator, &estimator, &law, choice)?);
    }
    let overall = outcomes
        .iter()
        .fold(Verdict::Pass, |acc, o| acc.combine(o.verdict));

    let draw = sample_noise(&scenario.noise, &scenario.grid, scenario.seed);
    let run = solve_closed_loop(&scenario.model, &scenario.grid, &draw, &law)?;
    run.state
        .save_csv("state", &scenario.out_dir.join("state.csv"))?;
    run.observation
        .save_csv("observation", &scenario.out_dir.join("observation.csv"))?;
    run.control
        .save_csv("control", &scenario.out_dir.join("control.csv"))?;

    let report = ScenarioReport {
        name: scenario.name.clone(),
        law: scenario.law.name().to_string(),
        horizon: scenario.grid.horizon(),
        steps: scenario.grid.steps(),
        paths: scenario.paths,
        seed: scenario.seed,
        experiments: outcomes,
        overall,
    };
    let json = serde_json::to_string_pretty(&report)
        .expect("report serialization has no failing states");
    let report_path = scenario.out_dir.join("report.json");
    fs::write(&report_path, json + "\n").map_err(|e| Error::Io {
        path: report_path.display().to_string(),
        source: e,
    })?;

    if overall == Verdict::Fail {
        let mut lines = String::new();
        for o in &report.experiments {
            if o.verdict == Verdict::Fail {
                let why = o.failure.as_deref().unwrap_or("failed");
                lines.push_str(&format!("{}: {}\n", o.name, why));
            }
        }
        let marker = scenario.out_dir.join("FAILED");
        fs::write(&marker, lines).map_err(|e| Error::Io {
            path: marker.display().to_string(),
            source: e,
        })?;
    }
    Ok(report)
}

fn run_experiment(
    scenario: &Scenario,
    regulator: &RegulatorSolution,
    estimator: &EstimatorSolution,
    law: &ControlLaw,
    choice: ExperimentChoice,
) -> Result<ExperimentOutcome> {
    let model = &scenario.model;
    let grid = &scenario.grid;
    let noise = &scenario.noise;
    let cost = &scenario.cost;
    let paths = scenario.paths;
    let seed = scenario.seed;
    let audit_paths = paths.min(AUDIT_PATH_CAP);

    let (verdict, failure, detail) = match choice {
        ExperimentChoice::CostVsPredicted => {
            let predicted = match scenario.law {
                LawChoice::Separated => {
                    predicted_separated_cost(model, cost, regulator, estimator)?
                }
                LawChoice::StateFeedback => predicted_full_information_cost(model, regulator)?,
                _ => unreachable!("validation pins the law for cost_vs_predicted"),
            };
            let estimate = estimate_cost(model, grid, noise, law, cost, paths, seed)?;
            let gap = (estimate.mean - predicted).abs();
            let budget = 3.0 * estimate.std_error + 5.0 * grid.dt() * (1.0 + predicted.abs());
            let pass = gap <= budget;
            let verdict = if paths < POWER_FLOOR {
                Verdict::InsufficientPower
            } else if pass {
                Verdict::Pass
            } else {
                Verdict::Fail
            };
            let failure = (verdict == Verdict::Fail).then(|| {
                format!(
                    "realized cost {:.6} sits {gap:.3e} from the predicted {predicted:.6} \
                     (budget {budget:.3e})",
                    estimate.mean
                )
            });
            (
                verdict,
                failure,
                ExperimentDetail::CostVsPredicted {
                    predicted,
                    gap,
                    budget,
                    estimate,
                },
            )
        }
        ExperimentChoice::SeparationMargin => {
            let up = perturbed_law(scenario, regulator, estimator, 1.0 + scenario.delta);
            let down = perturbed_law(scenario, regulator, estimator, 1.0 - scenario.delta);
            let upward = compare_costs_paired(model, grid, noise, law, &up, cost, paths, seed)?;
            let downward = compare_costs_paired(model, grid, noise, law, &down, cost, paths, seed)?;
            let any_worse = upward.ordering == CostOrdering::AlternativeBetter
                || downward.ordering == CostOrdering::AlternativeBetter;
            let both_win = upward.ordering == CostOrdering::BaselineBetter
                && downward.ordering == CostOrdering::BaselineBetter;
            let verdict = if any_worse {
                Verdict::Fail
            } else if paths < POWER_FLOOR || !both_win {
                Verdict::InsufficientPower
            } else {
                Verdict::Pass
            };
            let failure = (verdict == Verdict::Fail).then(|| {
                format!(
                    "a gain detuned by {:.0}% beat the synthesized law at 3 standard errors",
                    scenario.delta * 100.0
                )
            });
            (
                verdict,
                failure,
                ExperimentDetail::SeparationMargin {
                    delta: scenario.delta,
                    upward,
                    downward,
                },
            )
        }
        ExperimentChoice::Cancellation => {
            let laws = cancellation_laws(scenario, regulator, estimator)?;
            let report = control_cancellation_check(
                model,
                grid,
                noise,
                estimator,
                &laws,
                audit_paths,
                scenario.tolerances.cancellation,
                seed,
            )?;
            let verdict = if report.pass { Verdict::Pass } else { Verdict::Fail };
            let failure = (!report.pass).then(|| {
                format!(
                    "the estimation error moved by {:.3e} across laws (tolerance {:.3e})",
                    report.max_gap, report.tolerance
                )
            });
            (verdict, failure, ExperimentDetail::Cancellation(report))
        }
        ExperimentChoice::CovarianceInvariance => {
            let laws = covariance_laws(regulator, estimator);
            let report =
                sigma_invariance_check(model, grid, noise, estimator, &laws, paths, seed)?;
            let verdict = if paths < POWER_FLOOR {
                Verdict::InsufficientPower
            } else if report.pass {
                Verdict::Pass
            } else {
                Verdict::Fail
            };
            let failure = (verdict == Verdict::Fail).then(|| {
                "terminal error covariance differed across laws beyond 3 standard errors"
                    .to_string()
            });
            (
                verdict,
                failure,
                ExperimentDetail::CovarianceInvariance(report),
            )
        }
        ExperimentChoice::ItoIdentity => {
            // The audit reruns the loop on a coarsened grid, so it needs a
            // law that is meaningful on both; the tabulated regulator gain
            // (interpolated in t) is, unlike the grid-bound filter laws.
            let audit_law = ControlLaw::StateFeedback {
                gain: regulator.gain_schedule(),
            };
            let report = ito_identity_check(
                model,
                cost,
                regulator,
                noise,
                &audit_law,
                audit_paths,
                scenario.refine_factor,
                scenario.tolerances.ito_mismatch,
                seed,
            )?;
            let verdict = if report.pass { Verdict::Pass } else { Verdict::Fail };
            let failure = (!report.pass).then(|| {
                format!(
                    "value identity audit failed: max relative mismatch {:.3e} \
                     (tolerance {:.3e}), decay ratio {:.2} (needed {:.2}), \
                     max jump expansion residual {:.3e}, max bookkeeping gap {:.3e}",
                    report.max_relative_mismatch,
                    report.tolerance,
                    report.median_decay_ratio,
                    report.refine_factor as f64 / 3.0,
                    report.max_f_delta,
                    report.max_jump_bookkeeping_gap
                )
            });
            (verdict, failure, ExperimentDetail::ItoIdentity(report))
        }
        ExperimentChoice::Causality => {
            let cut = grid.steps() / 2;
            let report = causality_check(model, grid, noise, law, audit_paths, cut, seed)?;
            let verdict = if report.pass { Verdict::Pass } else { Verdict::Fail };
            let failure = (!report.pass).then(|| {
                if report.max_prefix_deviation > 0.0 {
                    format!(
                        "the realized prefix moved by {:.3e} when post-cut noise was resampled",
                        report.max_prefix_deviation
                    )
                } else {
                    "resampling after the cut never changed the noise record, \
                     so the check was vacuous"
                        .to_string()
                }
            });
            (verdict, failure, ExperimentDetail::Causality(report))
        }
        ExperimentChoice::ChangePointAccuracy => {
            let sigma = change_point_sigma(model)?;
            let report = change_point_accuracy_check(
                model,
                grid,
                noise,
                sigma,
                law,
                audit_paths,
                scenario.tolerances.change_point_rms,
                seed,
            )?;
            let verdict = if report.pass { Verdict::Pass } else { Verdict::Fail };
            let failure = (!report.pass).then(|| {
                format!(
                    "filter vs quadrature RMS reached {:.3e} (tolerance {:.3e})",
                    report.max_rms_gap, report.tolerance
                )
            });
            (
                verdict,
                failure,
                ExperimentDetail::ChangePointAccuracy(report),
            )
        }
    };

    Ok(ExperimentOutcome {
        name: choice.name().to_string(),
        verdict,
        failure,
        detail,
    })
}

/// The scenario law with its gains scaled by `factor`, holding the
/// rest of the loop (the filter in particular) fixed.
fn perturbed_law(
    scenario: &Scenario,
    regulator: &RegulatorSolution,
    estimator: &EstimatorSolution,
    factor: f64,
) -> ControlLaw {
    match scenario.law {
        LawChoice::Separated => ControlLaw::SeparatedLqg {
            regulator: regulator.detuned(factor),
            estimator: estimator.clone(),
        },
        _ => ControlLaw::StateFeedback {
            gain: regulator.detuned(factor).gain_schedule(),
        },
    }
}

/// The law family the cancellation audit sweeps: open loop, detuned
/// state feedback, the separated law, the same law unrolled into its
/// affine-in-observations form, and a delayed copy. The unrolled form
/// costs O(steps^2) per path, so it joins only on grids where that stays
/// cheap.
fn cancellation_laws(
    scenario: &Scenario,
    regulator: &RegulatorSolution,
    estimator: &EstimatorSolution,
) -> Result<Vec<(String, ControlLaw)>> {
    let separated = ControlLaw::SeparatedLqg {
        regulator: regulator.clone(),
        estimator: estimator.clone(),
    };
    let mut laws = vec![
        ("zero".to_string(), ControlLaw::Zero),
        (
            "state_feedback_detuned".to_string(),
            ControlLaw::StateFeedback {
                gain: regulator.detuned(0.8).gain_schedule(),
            },
        ),
        ("separated".to_string(), separated.clone()),
        (
            "delayed_separated".to_string(),
            ControlLaw::Delayed {
                inner: Box::new(separated),
                delay: 2.0 * scenario.grid.dt(),
            },
        ),
    ];
    if scenario.grid.steps() <= 2000 {
        let (offset, kernel) =
            separated_law_kernel(&scenario.model, &scenario.grid, regulator, estimator)?;
        laws.insert(
            2,
            (
                "affine_in_observations".to_string(),
                ControlLaw::KernelFeedback { offset, kernel },
            ),
        );
    }
    Ok(laws)
}

fn covariance_laws(
    regulator: &RegulatorSolution,
    estimator: &EstimatorSolution,
) -> Vec<(String, ControlLaw)> {
    vec![
        ("zero".to_string(), ControlLaw::Zero),
        (
            "state_feedback_detuned".to_string(),
            ControlLaw::StateFeedback {
                gain: regulator.detuned(0.8).gain_schedule(),
            },
        ),
        (
            "separated".to_string(),
            ControlLaw::SeparatedLqg {
                regulator: regulator.clone(),
                estimator: estimator.clone(),
            },
        ),
    ]
}
