//! TSR, VTSR and VCR over joined scores, per-category breakdowns, threshold
//! verdicts, ablation contributions, and report rendering.
//!
//! Counts are kept as exact fractions; thresholds are compared by
//! cross-multiplication, never on rounded decimals.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::harness::HarnessCondition;
use crate::scoring::{ScoreValue, ScoredTask};
use crate::task::TaskCategory;

/// `numerator / denominator` with a non-zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fraction {
    pub numerator: u32,
    pub denominator: u32,
}

impl Fraction {
    pub fn new(numerator: u32, denominator: u32) -> Self {
        assert!(denominator > 0, "fraction with zero denominator");
        Fraction { numerator, denominator }
    }

    pub fn value(self) -> f64 {
        f64::from(self.numerator) / f64::from(self.denominator)
    }

    /// Value in thousandths, rounded half up (the three-decimal figure
    /// printed in reports).
    pub fn milli(self) -> i64 {
        let n = i64::from(self.numerator) * 2000 + i64::from(self.denominator);
        n / (2 * i64::from(self.denominator))
    }

    pub fn rounded3(self) -> f64 {
        self.milli() as f64 / 1000.0
    }
}

impl Ord for Fraction {
    fn cmp(&self, other: &Self) -> Ordering {
        let lhs = u64::from(self.numerator) * u64::from(other.denominator);
        let rhs = u64::from(other.numerator) * u64::from(self.denominator);
        lhs.cmp(&rhs).then(self.denominator.cmp(&other.denominator))
    }
}

impl PartialOrd for Fraction {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Fraction {
    /// Exact `self ≥ other` on the rational values.
    pub fn at_least(self, other: Fraction) -> bool {
        u64::from(self.numerator) * u64::from(other.denominator)
            >= u64::from(other.numerator) * u64::from(self.denominator)
    }

    pub fn same_value(self, other: Fraction) -> bool {
        u64::from(self.numerator) * u64::from(other.denominator)
            == u64::from(other.numerator) * u64::from(self.denominator)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ({}/{})", self.rounded3(), self.numerator, self.denominator)
    }
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr {
            numerator: u32,
            denominator: u32,
            value: f64,
        }
        Repr {
            numerator: self.numerator,
            denominator: self.denominator,
            value: self.rounded3(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            numerator: u32,
            denominator: u32,
        }
        let r = Repr::deserialize(d)?;
        if r.denominator == 0 {
            return Err(serde::de::Error::custom("zero denominator"));
        }
        Ok(Fraction::new(r.numerator, r.denominator))
    }
}

/// Which categories count toward a metric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scope {
    categories: BTreeSet<TaskCategory>,
}

impl Scope {
    pub fn t1_t5() -> Self {
        Scope {
            categories: TaskCategory::ALL[..5].iter().copied().collect(),
        }
    }

    pub fn t1_t6() -> Self {
        Scope {
            categories: TaskCategory::ALL.iter().copied().collect(),
        }
    }

    pub fn only(category: TaskCategory) -> Self {
        Scope {
            categories: [category].into_iter().collect(),
        }
    }

    pub fn contains(&self, category: TaskCategory) -> bool {
        self.categories.contains(&category)
    }

    pub fn categories(&self) -> impl Iterator<Item = TaskCategory> + '_ {
        self.categories.iter().copied()
    }

    pub fn label(&self) -> String {
        let cats: Vec<_> = self.categories.iter().collect();
        match cats.as_slice() {
            [] => "none".to_string(),
            [one] => one.to_string(),
            [first, .., last] if cats.len() == (**last as usize - **first as usize + 1) => {
                format!("{first}–{last}")
            }
            _ => cats.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
        }
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('–', "-").as_str() {
            "t1-t5" => Ok(Scope::t1_t5()),
            "t1-t6" | "all" => Ok(Scope::t1_t6()),
            other => other
                .parse::<TaskCategory>()
                .map(Scope::only)
                .map_err(|_| format!("unknown scope `{s}` (expected t1-t5, t1-t6 or a single category)")),
        }
    }
}

impl Serialize for Scope {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.categories.iter().collect::<Vec<_>>().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Scope {
            categories: Vec::<TaskCategory>::deserialize(d)?.into_iter().collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tsr_min: Fraction,
    pub vtsr_min: Fraction,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tsr_min: Fraction::new(13, 20),
            vtsr_min: Fraction::new(4, 5),
        }
    }
}

impl Thresholds {
    pub fn met(&self, tsr: Fraction, vtsr: Fraction) -> bool {
        tsr.at_least(self.tsr_min) && vtsr.at_least(self.vtsr_min)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("no scored tasks in scope {0}")]
    NoScoredTasks(String),
}

fn scored_in_scope<'a>(scores: &'a [ScoredTask], scope: &'a Scope) -> impl Iterator<Item = &'a ScoredTask> {
    scores
        .iter()
        .filter(move |s| s.score.is_scored() && scope.contains(s.category))
}

fn rate(scores: &[ScoredTask], scope: &Scope, hit: impl Fn(ScoreValue) -> bool) -> Result<Fraction, MetricError> {
    let (mut num, mut den) = (0u32, 0u32);
    for s in scored_in_scope(scores, scope) {
        den += 1;
        if hit(s.score) {
            num += 1;
        }
    }
    if den == 0 {
        return Err(MetricError::NoScoredTasks(scope.label()));
    }
    Ok(Fraction::new(num, den))
}

/// Share of scored tasks with score 2.
pub fn compute_tsr(scores: &[ScoredTask], scope: &Scope) -> Result<Fraction, MetricError> {
    rate(scores, scope, |v| v == ScoreValue::Two)
}

/// Share of scored tasks with score ≥ 1.
pub fn compute_vtsr(scores: &[ScoredTask], scope: &Scope) -> Result<Fraction, MetricError> {
    rate(scores, scope, |v| matches!(v, ScoreValue::One | ScoreValue::Two))
}

/// Verification catch rate. `Undefined` (no task below 2) is a distinct
/// value from a zero rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Vcr {
    Defined(Fraction),
    Undefined,
}

impl fmt::Display for Vcr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Vcr::Defined(fr) => fr.fmt(f),
            Vcr::Undefined => f.write_str("n/a (0 eligible)"),
        }
    }
}

/// Among scored tasks with score < 2, the share whose run retried at least
/// once. Tasks with unknown retry counts count as not retried.
pub fn compute_vcr(scores: &[ScoredTask], scope: &Scope) -> Vcr {
    let (mut num, mut den) = (0u32, 0u32);
    for s in scored_in_scope(scores, scope).filter(|s| s.score != ScoreValue::Two) {
        den += 1;
        if s.retry_count.unwrap_or(0) > 0 {
            num += 1;
        }
    }
    if den == 0 {
        Vcr::Undefined
    } else {
        Vcr::Defined(Fraction::new(num, den))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub tsr: Fraction,
    pub vtsr: Fraction,
}

/// Per-category TSR/VTSR for every category in scope with scored tasks.
pub fn category_breakdown(
    scores: &[ScoredTask],
    scope: &Scope,
) -> Result<BTreeMap<TaskCategory, CategoryMetrics>, MetricError> {
    let mut out = BTreeMap::new();
    for cat in scope.categories() {
        let one = Scope::only(cat);
        if let (Ok(tsr), Ok(vtsr)) = (compute_tsr(scores, &one), compute_vtsr(scores, &one)) {
            out.insert(cat, CategoryMetrics { tsr, vtsr });
        }
    }
    if out.is_empty() {
        return Err(MetricError::NoScoredTasks(scope.label()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub condition: HarnessCondition,
    pub scope: Scope,
    pub tsr: Fraction,
    pub vtsr: Fraction,
    /// Present for pipeline-family conditions only.
    pub vcr: Option<Vcr>,
    pub per_category: BTreeMap<TaskCategory, CategoryMetrics>,
    pub threshold_met: bool,
    pub thresholds: Thresholds,
}

/// Report for one (model, condition) out of a mixed score list.
pub fn build_report(
    model: &str,
    condition: HarnessCondition,
    scores: &[ScoredTask],
    scope: &Scope,
) -> Result<MetricsReport, MetricError> {
    let mine: Vec<ScoredTask> = scores
        .iter()
        .filter(|s| s.model == model && s.condition == condition)
        .cloned()
        .collect();
    let tsr = compute_tsr(&mine, scope)?;
    let vtsr = compute_vtsr(&mine, scope)?;
    let thresholds = Thresholds::default();
    Ok(MetricsReport {
        model: model.to_string(),
        condition,
        scope: scope.clone(),
        tsr,
        vtsr,
        vcr: condition.is_pipeline_family().then(|| compute_vcr(&mine, scope)),
        per_category: category_breakdown(&mine, scope)?,
        threshold_met: thresholds.met(tsr, vtsr),
        thresholds,
    })
}

/// Reports for every (model, condition) pair present, sorted by model then
/// condition. Pairs with no scored task in scope are skipped.
pub fn build_reports(scores: &[ScoredTask], scope: &Scope) -> Vec<MetricsReport> {
    let pairs: BTreeSet<(String, HarnessCondition)> = scores.iter().map(|s| (s.model.clone(), s.condition)).collect();
    pairs
        .into_iter()
        .filter_map(|(m, c)| build_report(&m, c, scores, scope).ok())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationContribution {
    pub name: String,
    pub ablated_tsr: f64,
    /// `full − ablated`, on three-decimal figures.
    pub drop: f64,
    /// `drop / (full − baseline)` in percent; `None` when undefined.
    pub pct_of_gain: Option<f64>,
    /// Removing the stage raised TSR.
    pub reversed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub baseline_tsr: f64,
    pub full_tsr: f64,
    pub total_gain: f64,
    /// The full pipeline did not beat the baseline, so no share of gain
    /// can be attributed.
    pub gain_undefined: bool,
    pub ablations: Vec<AblationContribution>,
}

/// Stage contributions on the three-decimal TSR figures as reported, so a
/// drop of 0.041 against a gain of 0.166 gives 24.7%.
pub fn contribution_analysis(
    baseline: Fraction,
    full: Fraction,
    ablations: &BTreeMap<String, Fraction>,
) -> ContributionReport {
    let gain = full.milli() - baseline.milli();
    let gain_undefined = gain <= 0;
    let ablations = ablations
        .iter()
        .map(|(name, &ablated)| {
            let drop = full.milli() - ablated.milli();
            let reversed = drop < 0;
            AblationContribution {
                name: name.clone(),
                ablated_tsr: ablated.rounded3(),
                drop: drop as f64 / 1000.0,
                pct_of_gain: (!gain_undefined && !reversed).then(|| drop as f64 / gain as f64 * 100.0),
                reversed,
            }
        })
        .collect();
    ContributionReport {
        baseline_tsr: baseline.rounded3(),
        full_tsr: full.rounded3(),
        total_gain: gain as f64 / 1000.0,
        gain_undefined,
        ablations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format `{other}` (expected text or json)")),
        }
    }
}

fn mark(met: bool) -> &'static str {
    if met {
        "✓"
    } else {
        "×"
    }
}

/// Renders reports as fixed-layout text tables or as JSON. Empty input
/// renders as an empty document.
pub fn render_report(reports: &[MetricsReport], format: ReportFormat) -> String {
    if reports.is_empty() {
        return String::new();
    }
    if format == ReportFormat::Json {
        let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
        s.push('\n');
        return s;
    }

    let mut out = String::new();
    let mut scopes: Vec<String> = reports.iter().map(|r| r.scope.label()).collect();
    scopes.dedup();
    let _ = writeln!(out, "Scope: {}", scopes.join(", "));
    let _ = writeln!(out, "| Model | Condition | TSR / VTSR Met | VCR |");
    let _ = writeln!(out, "|---|---|---|---|");
    for r in reports {
        let vcr = r.vcr.map_or_else(|| "—".to_string(), |v| v.to_string());
        let _ = writeln!(
            out,
            "| {} | {} | {} / {} {} | {} |",
            r.model,
            r.condition,
            r.tsr,
            r.vtsr,
            mark(r.threshold_met),
            vcr
        );
    }

    let cats: BTreeSet<TaskCategory> = reports.iter().flat_map(|r| r.per_category.keys().copied()).collect();
    let _ = writeln!(out, "\nCategory TSR");
    let header: Vec<String> = cats.iter().map(ToString::to_string).collect();
    let _ = writeln!(out, "| Model | Condition | {} |", header.join(" | "));
    let _ = writeln!(out, "|---|---|{}", "---|".repeat(cats.len()));
    for r in reports {
        let cells: Vec<String> = cats
            .iter()
            .map(|c| {
                r.per_category
                    .get(c)
                    .map_or_else(|| "—".to_string(), |m| m.tsr.to_string())
            })
            .collect();
        let _ = writeln!(out, "| {} | {} | {} |", r.model, r.condition, cells.join(" | "));
    }
    out
}

pub fn render_contributions(report: &ContributionReport, format: ReportFormat) -> String {
    if format == ReportFormat::Json {
        let mut s = serde_json::to_string_pretty(report).expect("contribution report serializes");
        s.push('\n');
        return s;
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Baseline TSR {:.3} → full TSR {:.3} (total gain {:+.3})",
        report.baseline_tsr, report.full_tsr, report.total_gain
    );
    let _ = writeln!(
        out,
        "| Removed Stage | Resulting TSR | TSR Change vs. Full | % of Total Gain |"
    );
    let _ = writeln!(out, "|---|---|---|---|");
    for a in &report.ablations {
        let change = format!("{:+.3}", -a.drop).replace('-', "−");
        let change = if a.reversed {
            format!("{change} (reversed)")
        } else {
            change
        };
        let pct = a.pct_of_gain.map_or_else(|| "n/a".to_string(), |p| format!("{p:.1}%"));
        let _ = writeln!(out, "| {} | {:.3} | {} | {} |", a.name, a.ablated_tsr, change, pct);
    }
    out
}
