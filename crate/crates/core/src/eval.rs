//! Correlation metrics between predictions and mean opinion scores, MOS
//! aggregation, score-file IO, and a benchmark runner over prediction files.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

/// Predictions whose ids are missing from the MOS file beyond this fraction
/// abort the benchmark.
pub const MAX_MISSING_FRACTION: f64 = 0.5;

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(arg_err!("length mismatch: {} vs {}", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(arg_err!("correlation needs at least 2 samples, got {}", a.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(arg_err!("correlation inputs must be finite"));
    }
    Ok(())
}

fn pearson_unchecked(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("correlation of a constant sequence".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing the mean of their positions.
pub fn fractional_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman: Pearson correlation of fractional ranks.
pub fn srcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos)?;
    pearson_unchecked(&fractional_ranks(pred), &fractional_ranks(mos))
}

/// Pearson correlation on raw values.
pub fn plcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos)?;
    pearson_unchecked(pred, mos)
}

/// Kendall tau-b.
pub fn krcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos)?;
    let n = pred.len();
    let (mut conc, mut disc, mut tie_a, mut tie_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = pred[i] - pred[j];
            let db = mos[i] - mos[j];
            if da == 0.0 {
                tie_a += 1;
            }
            if db == 0.0 {
                tie_b += 1;
            }
            let s = da * db;
            if s > 0.0 {
                conc += 1;
            } else if s < 0.0 {
                disc += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    let denom = (((pairs - tie_a) * (pairs - tie_b)) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Undefined("Kendall tau of an all-tied sequence".into()));
    }
    Ok((conc - disc) as f64 / denom)
}

/// Four-parameter logistic `b2 + (b1 - b2) / (1 + exp(-(x - b3) / |b4|))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Logistic {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
}

impl Logistic {
    pub fn eval(&self, x: f64) -> f64 {
        self.b2 + (self.b1 - self.b2) / (1.0 + (-(x - self.b3) / self.b4.abs()).exp())
    }

    fn from_params(p: [f64; 4]) -> Self {
        Self {
            b1: p[0],
            b2: p[1],
            b3: p[2],
            b4: p[3],
        }
    }

    /// Least-squares fit mapping `x` onto `y` by damped Gauss-Newton
    /// (Levenberg-Marquardt) from the usual data-driven start.
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        check_pair(x, y)?;
        let n = x.len() as f64;
        let (ymax, ymin) = y.iter().fold((f64::MIN, f64::MAX), |(a, b), &v| (a.max(v), b.min(v)));
        let xmean = x.iter().sum::<f64>() / n;
        let xstd = (x.iter().map(|v| (v - xmean).powi(2)).sum::<f64>() / n).sqrt();
        let mut p = [ymax, ymin, xmean, if xstd > 0.0 { xstd } else { 1.0 }];
        let sse = |p: &[f64; 4]| -> f64 {
            let f = Logistic::from_params(*p);
            x.iter().zip(y).map(|(a, b)| (f.eval(*a) - b).powi(2)).sum()
        };
        let mut err = sse(&p);
        let mut lambda = 1e-3;
        for _ in 0..200 {
            let f = Logistic::from_params(p);
            let mut jtj = [[0.0; 4]; 4];
            let mut jtr = [0.0; 4];
            for (&xi, &yi) in x.iter().zip(y) {
                let s4 = p[3].abs();
                let e = (-(xi - p[2]) / s4).exp();
                let sig = 1.0 / (1.0 + e);
                let d = p[0] - p[1];
                let dsig = sig * sig * e;
                let j = [
                    sig,
                    1.0 - sig,
                    -d * dsig / s4,
                    -d * dsig * (xi - p[2]) / (s4 * s4) * p[3].signum(),
                ];
                let r = yi - f.eval(xi);
                for a in 0..4 {
                    jtr[a] += j[a] * r;
                    for b in 0..4 {
                        jtj[a][b] += j[a] * j[b];
                    }
                }
            }
            let mut improved = false;
            while lambda < 1e12 {
                let mut m = jtj;
                for (a, row) in m.iter_mut().enumerate() {
                    row[a] += lambda * (1.0 + row[a]);
                }
                let Some(step) = solve4(m, jtr) else {
                    lambda *= 10.0;
                    continue;
                };
                let cand = [0, 1, 2, 3].map(|a| p[a] + step[a]);
                let e = sse(&cand);
                if e.is_finite() && e < err {
                    let done = (err - e) <= 1e-15 * err.max(1e-300);
                    p = cand;
                    err = e;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = !done;
                    break;
                }
                lambda *= 10.0;
            }
            if !improved {
                break;
            }
        }
        if p.iter().any(|v| !v.is_finite()) || p[3] == 0.0 {
            return Err(Error::Numeric("logistic fit diverged".into()));
        }
        Ok(Logistic::from_params(p))
    }
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for c in 0..4 {
        let piv = (c..4).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..4 {
            let f = a[r][c] / a[c][c];
            for k in c..4 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 4];
    for c in (0..4).rev() {
        let s: f64 = (c + 1..4).map(|k| a[c][k] * x[k]).sum();
        x[c] = (b[c] - s) / a[c][c];
    }
    Some(x)
}

/// How predictions are mapped before the linear correlation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlccMode {
    #[default]
    Raw,
    Logistic,
}

pub fn plcc_with(pred: &[f64], mos: &[f64], mode: PlccMode) -> Result<f64> {
    match mode {
        PlccMode::Raw => plcc(pred, mos),
        PlccMode::Logistic => {
            let f = Logistic::fit(pred, mos)?;
            let mapped: Vec<f64> = pred.iter().map(|&x| f.eval(x)).collect();
            plcc(&mapped, mos)
        }
    }
}

/// Annotator scores lie on the half-point grid 1.0, 1.5, ..., 5.0.
pub fn is_valid_rating(v: f64) -> bool {
    (1.0..=5.0).contains(&v) && (v * 2.0).fract() == 0.0
}

/// Mean rating per video.
pub fn aggregate_mos(annotations: &BTreeMap<String, Vec<f64>>) -> Result<BTreeMap<String, f64>> {
    annotations
        .iter()
        .map(|(id, scores)| {
            if scores.is_empty() {
                return Err(Error::Data(format!("video {id} has no ratings")));
            }
            if let Some(bad) = scores.iter().find(|v| !is_valid_rating(**v)) {
                return Err(Error::Data(format!("video {id}: rating {bad} is off the 1-5 half-point scale")));
            }
            Ok((id.clone(), scores.iter().sum::<f64>() / scores.len() as f64))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub video_id: String,
    pub pred: f64,
    pub mos: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    video_id: String,
    score: f64,
}

#[derive(Debug, Deserialize)]
struct AnnotationRow {
    video_id: String,
    #[allow(dead_code)]
    annotator_id: String,
    score: f64,
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

/// Reads `video_id,score` rows; ids must be unique and scores finite.
pub fn read_scores(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut rdr = reader(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: ScoreRow = row?;
        if !r.score.is_finite() {
            return Err(Error::Data(format!("{}: non-finite score for {}", path.display(), r.video_id)));
        }
        if !seen.insert(r.video_id.clone()) {
            return Err(Error::Data(format!("{}: duplicate id {}", path.display(), r.video_id)));
        }
        out.push((r.video_id, r.score));
    }
    Ok(out)
}

pub fn write_scores(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["video_id", "score"])?;
    for (id, s) in rows {
        w.write_record([id.as_str(), &format!("{s}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a MOS file: either `video_id,score` or per-annotator
/// `video_id,annotator_id,score` rows, which are averaged.
pub fn read_mos(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().any(|h| h == "annotator_id") {
        let mut ann: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for row in rdr.deserialize() {
            let r: AnnotationRow = row?;
            ann.entry(r.video_id).or_default().push(r.score);
        }
        aggregate_mos(&ann)
    } else {
        let rows = read_scores(path)?;
        let mut out = BTreeMap::new();
        for (id, s) in rows {
            if !(1.0..=5.0).contains(&s) {
                return Err(Error::Data(format!("{}: MOS {s} for {id} outside [1, 5]", path.display())));
            }
            out.insert(id, s);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub srcc: f64,
    pub plcc: f64,
    pub krcc: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub methods: BTreeMap<String, MethodMetrics>,
    /// Method names by descending SRCC.
    pub ranking: Vec<String>,
    pub plcc_mode: PlccMode,
    pub warnings: Vec<String>,
}

impl BenchmarkReport {
    /// Aligned plain-text table in ranking order.
    pub fn to_table(&self) -> String {
        let width = self.ranking.iter().map(String::len).max().unwrap_or(0).max(6);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>7}  {:>7}  {:>5}", "method", "SRCC", "PLCC", "KRCC", "n");
        for name in &self.ranking {
            let m = &self.methods[name];
            let _ = writeln!(
                s,
                "{:<width$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>5}",
                name, m.srcc, m.plcc, m.krcc, m.n
            );
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

/// Metrics for one method's predictions against MOS, plus ids not found.
pub fn evaluate_method(
    preds: &[(String, f64)],
    mos: &BTreeMap<String, f64>,
    mode: PlccMode,
) -> Result<(MethodMetrics, Vec<String>)> {
    let mut p = Vec::with_capacity(preds.len());
    let mut y = Vec::with_capacity(preds.len());
    let mut missing = Vec::new();
    for (id, s) in preds {
        match mos.get(id) {
            Some(m) => {
                p.push(*s);
                y.push(*m);
            }
            None => missing.push(id.clone()),
        }
    }
    if !preds.is_empty() && missing.len() as f64 > MAX_MISSING_FRACTION * preds.len() as f64 {
        return Err(Error::Data(format!(
            "{} of {} predicted ids have no MOS",
            missing.len(),
            preds.len()
        )));
    }
    let metrics = MethodMetrics {
        srcc: srcc(&p, &y)?,
        plcc: plcc_with(&p, &y, mode)?,
        krcc: krcc(&p, &y)?,
        n: p.len(),
    };
    Ok((metrics, missing))
}

/// Method name for a prediction file: its stem.
pub fn method_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Evaluates named prediction sets against MOS.
pub fn benchmark(
    methods: &[(String, Vec<(String, f64)>)],
    mos: &BTreeMap<String, f64>,
    mode: PlccMode,
) -> Result<BenchmarkReport> {
    if methods.is_empty() {
        return Err(arg_err!("no prediction sets given"));
    }
    let mut names = HashSet::new();
    for (n, _) in methods {
        if !names.insert(n) {
            return Err(arg_err!("duplicate method name {n}"));
        }
    }
    let results = methods
        .par_iter()
        .map(|(name, preds)| {
            evaluate_method(preds, mos, mode)
                .map(|r| (name.clone(), r))
                .map_err(|e| match e {
                    Error::Data(m) => Error::Data(format!("{name}: {m}")),
                    Error::Undefined(m) => Error::Undefined(format!("{name}: {m}")),
                    other => other,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = BenchmarkReport {
        methods: BTreeMap::new(),
        ranking: Vec::new(),
        plcc_mode: mode,
        warnings: Vec::new(),
    };
    for (name, (m, missing)) in results {
        for id in missing {
            report.warnings.push(format!("{name}: no MOS for {id}"));
        }
        report.methods.insert(name.clone(), m);
        report.ranking.push(name);
    }
    report.ranking.sort_by(|a, b| {
        report.methods[b]
            .srcc
            .total_cmp(&report.methods[a].srcc)
            .then_with(|| a.cmp(b))
    });
    Ok(report)
}

/// Reads prediction files and a MOS file and evaluates every method.
pub fn run_benchmark(pred_files: &[PathBuf], mos_file: &Path, mode: PlccMode) -> Result<BenchmarkReport> {
    let mos = read_mos(mos_file)?;
    let methods = pred_files
        .iter()
        .map(|p| Ok((method_name(p), read_scores(p)?)))
        .collect::<Result<Vec<_>>>()?;
    benchmark(&methods, &mos, mode)
}
