//! Subgroup WER tables and a random-intercept regression of utterance WER on
//! role, race and gender, with the stop as the grouping factor.
//!
//! The model is `y = Xβ + Zb + ε` with `b ~ N(0, λσ²)` per stop and
//! `ε ~ N(0, σ²)`. For a fixed ratio `λ` the covariance of stop `i` is
//! `σ²(I + λJ)`, whose inverse is `I − c·J` with `c = λ / (1 + nλ)`, so GLS
//! needs only per-stop sums. `λ` maximizes the restricted log-likelihood,
//! profiled over `β` and `σ²`.

use std::collections::BTreeMap;
use std::io::{BufRead, Read};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::corpus::{Gender, Race, SpeakerRole, StopRecord, Utterance};
use crate::metrics::WerScore;

pub const COEFFICIENTS: [&str; 4] = ["intercept", "role_officer", "race_black", "gender_female"];
pub const LOG_LAMBDA_RANGE: (f64, f64) = (-10.0, 10.0);
pub const LAMBDA_TOLERANCE: f64 = 1e-6;
const COARSE_GRID: usize = 201;
pub const ESTIMATOR_LABEL: &str = "REML random intercept (stop), normal-approximation z test";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub stop_id: String,
    pub utt_id: String,
    pub wer: f64,
    pub role: SpeakerRole,
    pub race: Race,
    pub gender: Gender,
    #[serde(default)]
    pub degenerate: bool,
}

impl EvalRow {
    /// Demographics come from the officer for officer speech and from the
    /// driver otherwise.
    pub fn from_utterance(stop: &StopRecord, utt: &Utterance, score: &WerScore) -> Self {
        let (race, gender) = if utt.speaker_role.is_officer() {
            (stop.officer_race, stop.officer_gender)
        } else {
            (stop.driver_race, stop.driver_gender)
        };
        Self {
            stop_id: stop.stop_id.clone(),
            utt_id: utt.id.clone(),
            wer: score.value,
            role: utt.speaker_role,
            race,
            gender,
            degenerate: score.degenerate,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("need at least 2 stops, got {0}")]
    TooFewStops(usize),
    #[error("design matrix is rank deficient (rank {rank} of {cols})")]
    RankDeficient { rank: usize, cols: usize },
    #[error("row {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupField {
    Role,
    Race,
    Gender,
    Stop,
}

fn role_label(r: SpeakerRole) -> &'static str {
    match r {
        SpeakerRole::PrimaryOfficer | SpeakerRole::SecondaryOfficer => "officer",
        SpeakerRole::CommunityMember => "community",
        SpeakerRole::Dispatch => "dispatch",
        SpeakerRole::Unknown => "unknown",
    }
}

fn race_label(r: Race) -> &'static str {
    match r {
        Race::Black => "black",
        Race::White => "white",
        Race::Hispanic => "hispanic",
        Race::Other => "other",
        Race::Unknown => "unknown",
    }
}

fn gender_label(g: Gender) -> &'static str {
    match g {
        Gender::Male => "male",
        Gender::Female => "female",
        Gender::Unknown => "unknown",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub group: Vec<String>,
    pub count: usize,
    pub mean_wer: f64,
}

/// Mean per-utterance WER for each combination of the grouping fields,
/// ordered by group label.
pub fn subgroup_table(rows: &[EvalRow], grouping: &[GroupField]) -> Vec<SubgroupRow> {
    let mut acc: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = grouping
            .iter()
            .map(|f| match f {
                GroupField::Role => role_label(r.role).to_string(),
                GroupField::Race => race_label(r.race).to_string(),
                GroupField::Gender => gender_label(r.gender).to_string(),
                GroupField::Stop => r.stop_id.clone(),
            })
            .collect();
        acc.entry(key).or_default().push(r.wer);
    }
    acc.into_iter()
        .map(|(group, mut v)| {
            // Sorted summation keeps the mean independent of row order.
            v.sort_by(f64::total_cmp);
            SubgroupRow { group, count: v.len(), mean_wer: v.iter().sum::<f64>() / v.len() as f64 }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusions {
    pub degenerate: usize,
    pub role: usize,
    pub race: usize,
    pub gender: usize,
}

impl Exclusions {
    pub fn total(&self) -> usize {
        self.degenerate + self.role + self.race + self.gender
    }
}

/// Rows grouped by stop with dummy-coded covariates.
#[derive(Debug, Clone)]
pub struct Design {
    pub stop_ids: Vec<String>,
    pub x: Vec<DMatrix<f64>>,
    pub y: Vec<DVector<f64>>,
    pub excluded: Exclusions,
}

impl Design {
    pub fn from_rows(rows: &[EvalRow]) -> Self {
        let mut groups: BTreeMap<&str, Vec<[f64; 5]>> = BTreeMap::new();
        let mut excluded = Exclusions::default();
        for r in rows {
            if r.degenerate {
                excluded.degenerate += 1;
                continue;
            }
            let role = match r.role {
                SpeakerRole::PrimaryOfficer | SpeakerRole::SecondaryOfficer => 1.0,
                SpeakerRole::CommunityMember => 0.0,
                _ => {
                    excluded.role += 1;
                    continue;
                }
            };
            let race = match r.race {
                Race::Black => 1.0,
                Race::White => 0.0,
                _ => {
                    excluded.race += 1;
                    continue;
                }
            };
            let gender = match r.gender {
                Gender::Female => 1.0,
                Gender::Male => 0.0,
                Gender::Unknown => {
                    excluded.gender += 1;
                    continue;
                }
            };
            groups.entry(&r.stop_id).or_default().push([1.0, role, race, gender, r.wer]);
        }
        let mut d = Design { stop_ids: Vec::new(), x: Vec::new(), y: Vec::new(), excluded };
        for (id, g) in groups {
            d.stop_ids.push(id.to_string());
            d.x.push(DMatrix::from_fn(g.len(), 4, |i, j| g[i][j]));
            d.y.push(DVector::from_iterator(g.len(), g.iter().map(|r| r[4])));
        }
        d
    }

    pub fn n(&self) -> usize {
        self.y.iter().map(|y| y.len()).sum()
    }

    pub fn p(&self) -> usize {
        4
    }

    fn stacked_x(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, self.p());
        let mut row = 0;
        for x in &self.x {
            out.rows_mut(row, x.nrows()).copy_from(x);
            row += x.nrows();
        }
        out
    }

    pub fn rank(&self) -> usize {
        let x = self.stacked_x();
        let scale = x.abs().max().max(1.0);
        x.svd(false, false).rank(1e-10 * scale * (self.n() as f64).sqrt())
    }
}

/// GLS quantities at one variance ratio.
#[derive(Debug, Clone)]
pub struct GlsFit {
    pub lambda: f64,
    pub beta: DVector<f64>,
    pub xtvx: DMatrix<f64>,
    /// Weighted residual sum of squares `rᵀ(I + λZZᵀ)⁻¹r`.
    pub rss: f64,
    pub log_det_h: f64,
}

pub fn gls_at(d: &Design, lambda: f64) -> Option<GlsFit> {
    let p = d.p();
    let mut xtvx = DMatrix::<f64>::zeros(p, p);
    let mut xtvy = DVector::<f64>::zeros(p);
    let mut log_det_h = 0.0;
    for (x, y) in d.x.iter().zip(&d.y) {
        let n = y.len() as f64;
        let c = lambda / (1.0 + n * lambda);
        let s = x.row_sum().transpose();
        let t = y.sum();
        xtvx += x.transpose() * x - c * &s * s.transpose();
        xtvy += x.transpose() * y - c * t * &s;
        log_det_h += (n * lambda).ln_1p();
    }
    let beta = xtvx.clone().cholesky()?.solve(&xtvy);
    let mut rss = 0.0;
    for (x, y) in d.x.iter().zip(&d.y) {
        let n = y.len() as f64;
        let c = lambda / (1.0 + n * lambda);
        let r = y - x * &beta;
        rss += r.norm_squared() - c * r.sum().powi(2);
    }
    Some(GlsFit { lambda, beta, xtvx, rss, log_det_h })
}

/// Profiled restricted log-likelihood at `λ`, up to an additive constant.
pub fn restricted_loglik(d: &Design, lambda: f64) -> f64 {
    let Some(f) = gls_at(d, lambda) else { return f64::NEG_INFINITY };
    let dof = (d.n() - d.p()) as f64;
    let log_det_xtvx = f.xtvx.determinant().ln();
    -0.5 * (dof * (f.rss / dof).ln() + f.log_det_h + log_det_xtvx + dof)
}

/// Maximize `f` on `[lo, hi]`: coarse grid, then golden-section search in
/// the bracket around the best grid point.
fn maximize_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let step = (hi - lo) / (COARSE_GRID - 1) as f64;
    let grid: Vec<f64> = (0..COARSE_GRID).map(|i| f(lo + step * i as f64)).collect();
    let best = (0..COARSE_GRID).fold(0, |b, i| if grid[i] > grid[b] { i } else { b });
    let mut a = lo + step * best.saturating_sub(1) as f64;
    let mut b = lo + step * (best + 1).min(COARSE_GRID - 1) as f64;
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while (b - a) > tol * (1.0 + a.abs().max(b.abs())) {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    let mid = 0.5 * (a + b);
    [(mid, f(mid)), (lo + step * best as f64, grid[best])]
        .into_iter()
        .fold((mid, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub coefficients: BTreeMap<String, f64>,
    pub standard_errors: BTreeMap<String, f64>,
    pub significance: BTreeMap<String, bool>,
    pub sigma2_stop: f64,
    pub sigma2_residual: f64,
    pub lambda: f64,
    pub restricted_loglik: f64,
    pub rows_used: usize,
    pub stops: usize,
    pub excluded: Exclusions,
    pub estimator: String,
}

impl RegressionResult {
    pub fn coefficient(&self, name: &str) -> f64 {
        self.coefficients[name]
    }
}

fn result_from(d: &Design, f: &GlsFit, loglik: f64) -> Result<RegressionResult, EvalError> {
    let dof = (d.n() - d.p()) as f64;
    let sigma2 = f.rss / dof;
    let cov = f
        .xtvx
        .clone()
        .try_inverse()
        .ok_or(EvalError::RankDeficient { rank: d.rank(), cols: d.p() })?
        * sigma2;
    let z_crit = Normal::standard().inverse_cdf(0.975);
    let mut out = RegressionResult {
        coefficients: BTreeMap::new(),
        standard_errors: BTreeMap::new(),
        significance: BTreeMap::new(),
        sigma2_stop: f.lambda * sigma2,
        sigma2_residual: sigma2,
        lambda: f.lambda,
        restricted_loglik: loglik,
        rows_used: d.n(),
        stops: d.stop_ids.len(),
        excluded: d.excluded.clone(),
        estimator: ESTIMATOR_LABEL.to_string(),
    };
    for (k, name) in COEFFICIENTS.iter().enumerate() {
        let se = cov[(k, k)].max(0.0).sqrt();
        out.coefficients.insert(name.to_string(), f.beta[k]);
        out.standard_errors.insert(name.to_string(), se);
        out.significance.insert(name.to_string(), se > 0.0 && (f.beta[k] / se).abs() > z_crit);
    }
    Ok(out)
}

fn check(d: &Design) -> Result<(), EvalError> {
    if d.stop_ids.len() < 2 {
        return Err(EvalError::TooFewStops(d.stop_ids.len()));
    }
    let rank = d.rank();
    if rank < d.p() || d.n() <= d.p() {
        return Err(EvalError::RankDeficient { rank, cols: d.p() });
    }
    Ok(())
}

/// Fit at a fixed variance ratio; `λ = 0` is ordinary least squares.
pub fn fit_at_lambda(rows: &[EvalRow], lambda: f64) -> Result<RegressionResult, EvalError> {
    let d = Design::from_rows(rows);
    check(&d)?;
    let f = gls_at(&d, lambda).ok_or(EvalError::RankDeficient { rank: d.rank(), cols: d.p() })?;
    result_from(&d, &f, restricted_loglik(&d, lambda))
}

pub fn fit_mixed_effects(rows: &[EvalRow]) -> Result<RegressionResult, EvalError> {
    let d = Design::from_rows(rows);
    check(&d)?;
    let (lo, hi) = LOG_LAMBDA_RANGE;
    let theta = maximize_1d(|t| restricted_loglik(&d, t.exp()), lo, hi, LAMBDA_TOLERANCE);
    let lambda = theta.exp();
    let f = gls_at(&d, lambda).ok_or(EvalError::RankDeficient { rank: d.rank(), cols: d.p() })?;
    result_from(&d, &f, restricted_loglik(&d, lambda))
}

fn stars(r: &RegressionResult, name: &str) -> String {
    let v = r.coefficient(name);
    let s = format!("{v:.3}");
    let s = s.replacen("0.", ".", 1);
    if r.significance[name] { format!("{s}*") } else { s }
}

/// Plain-text report: coefficients (starred when significant) then the
/// role × race subgroup WERs in percent with utterance counts in brackets.
pub fn render_report(reg: Option<&RegressionResult>, rows: &[EvalRow]) -> String {
    let mut out = String::new();
    if let Some(r) = reg {
        out.push_str(&format!("{:<20}{:>10}\n", "", "coef"));
        for (label, name) in [("Role [Officer]", "role_officer"), ("Race [Black]", "race_black"), ("Gender [F]", "gender_female")] {
            out.push_str(&format!("{label:<20}{:>10}\n", stars(r, name)));
        }
        out.push_str(&format!(
            "sigma2 stop {:.4}, residual {:.4}; {} rows, {} stops, {} excluded\n",
            r.sigma2_stop,
            r.sigma2_residual,
            r.rows_used,
            r.stops,
            r.excluded.total()
        ));
        out.push_str(&format!("estimator: {}\n", r.estimator));
    }
    for g in subgroup_table(rows, &[GroupField::Role, GroupField::Race]) {
        let role = match g.group[0].as_str() {
            "officer" => "Off.",
            "community" => "CM",
            other => other,
        };
        let mut race = g.group[1].clone();
        race[..1].make_ascii_uppercase();
        let label = format!("{role} {race} [{}]", g.count);
        out.push_str(&format!("{label:<20}{:>10.2}\n", 100.0 * g.mean_wer));
    }
    out
}

/// Rows from JSON lines.
pub fn read_rows_jsonl<R: BufRead>(reader: R) -> Result<Vec<EvalRow>, EvalError> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: EvalRow =
            serde_json::from_str(&line).map_err(|e| EvalError::Parse { line: i + 1, message: e.to_string() })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Rows from CSV with a header naming `stop_id, utt_id, wer, role, race,
/// gender` and optionally `degenerate`.
pub fn read_rows_csv<R: Read>(reader: R) -> Result<Vec<EvalRow>, EvalError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let row: EvalRow = rec.map_err(|e: csv::Error| EvalError::Parse { line: i + 2, message: e.to_string() })?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(stop: &str, wer: f64, role: SpeakerRole, race: Race, gender: Gender) -> EvalRow {
        EvalRow { stop_id: stop.into(), utt_id: format!("{stop}-{wer}"), wer, role, race, gender, degenerate: false }
    }

    #[test]
    fn subgroup_mean_and_count() {
        let rows = vec![
            row("a", 0.2, SpeakerRole::PrimaryOfficer, Race::Black, Gender::Male),
            row("b", 0.4, SpeakerRole::SecondaryOfficer, Race::Black, Gender::Female),
        ];
        let t = subgroup_table(&rows, &[GroupField::Role]);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].count, 2);
        assert!((t[0].mean_wer - 0.3).abs() < 1e-12);
        assert!(subgroup_table(&[], &[GroupField::Role]).is_empty());
    }

    #[test]
    fn singleton_groups() {
        let rows = vec![
            row("a", 0.1, SpeakerRole::PrimaryOfficer, Race::Black, Gender::Male),
            row("a", 0.2, SpeakerRole::PrimaryOfficer, Race::White, Gender::Male),
            row("a", 0.3, SpeakerRole::CommunityMember, Race::Black, Gender::Male),
            row("a", 0.4, SpeakerRole::CommunityMember, Race::White, Gender::Male),
        ];
        let t = subgroup_table(&rows, &[GroupField::Role, GroupField::Race]);
        assert_eq!(t.len(), 4);
        let mut means: Vec<f64> = t.iter().map(|g| g.mean_wer).collect();
        means.sort_by(f64::total_cmp);
        assert_eq!(means, vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn one_stop_is_rejected() {
        let rows: Vec<EvalRow> = (0..10)
            .map(|i| {
                row("a", i as f64 / 10.0, SpeakerRole::PrimaryOfficer, [Race::Black, Race::White][i % 2], Gender::Male)
            })
            .collect();
        assert!(matches!(fit_mixed_effects(&rows), Err(EvalError::TooFewStops(1))));
    }

    #[test]
    fn constant_covariate_is_rank_deficient() {
        let rows: Vec<EvalRow> = (0..20)
            .map(|i| {
                row(["a", "b"][i % 2], i as f64 / 20.0, SpeakerRole::PrimaryOfficer, [Race::Black, Race::White][i / 10], Gender::Male)
            })
            .collect();
        assert!(matches!(fit_mixed_effects(&rows), Err(EvalError::RankDeficient { .. })));
    }

    #[test]
    fn excluded_levels_are_counted() {
        let mut rows = vec![
            row("a", 0.1, SpeakerRole::Dispatch, Race::Black, Gender::Male),
            row("a", 0.1, SpeakerRole::PrimaryOfficer, Race::Hispanic, Gender::Male),
            row("a", 0.1, SpeakerRole::PrimaryOfficer, Race::Black, Gender::Unknown),
        ];
        rows.push(EvalRow { degenerate: true, ..rows[0].clone() });
        let d = Design::from_rows(&rows);
        assert_eq!(d.excluded, Exclusions { degenerate: 1, role: 1, race: 1, gender: 1 });
        assert_eq!(d.n(), 0);
    }

    #[test]
    fn csv_and_jsonl_agree() {
        let csv = "stop_id,utt_id,wer,role,race,gender\ns1,u1,0.25,primary_officer,black,female\n";
        let jsonl = r#"{"stop_id":"s1","utt_id":"u1","wer":0.25,"role":"primary_officer","race":"black","gender":"female"}"#;
        let a = read_rows_csv(csv.as_bytes()).unwrap();
        let b = read_rows_jsonl(jsonl.as_bytes()).unwrap();
        assert_eq!(a, b);
        assert!(read_rows_csv("stop_id,utt_id,wer,role,race,gender\ns,u,x,a,b,c\n".as_bytes()).is_err());
    }
}
