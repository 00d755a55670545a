//! Evidence-efficiency diagnostics and standard classification metrics.
//!
//! The central object is the K-curve: for one bag, the true-class
//! probability obtained when only the top-K ranked tiles are revealed
//! (hard 0/1 masks), recorded over an ascending K grid that always ends
//! at the full bag. Two scalars derive from it: MSK, the smallest grid K
//! whose probability reaches a threshold tau (absent when never reached,
//! never imputed), and AUKC, the trapezoidal area under the curve over
//! the revealed fraction kappa = K/N, extended left of the first grid
//! point as a constant.
//!
//! Classification quality is summarized by rank-statistic AUC with tie
//! averaging (equal to the pairwise win count), argmax accuracy, and
//! macro-averaged F1.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("k-curve is invalid: {0}")]
    BadCurve(String),
    #[error("metric inputs are empty")]
    EmptyInput,
    #[error("input lengths differ: {0} labels vs {1} values")]
    LengthMismatch(usize, usize),
    #[error("AUC is undefined when only one class is present")]
    SingleClass,
    #[error("scores must be finite, found {0}")]
    BadScore(f64),
    #[error("label {0} is out of range for {1} classes")]
    LabelOutOfRange(usize, usize),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// True-class probability as a function of revealed top-ranked tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct KCurve {
    slide_id: String,
    n_tiles: usize,
    ks: Vec<usize>,
    p_y: Vec<f64>,
}

impl KCurve {
    /// Validates the grid: strictly ascending, within `1..=n_tiles`,
    /// ending at `n_tiles` (so the curve covers kappa = 1), one
    /// probability in `[0, 1]` per grid point.
    pub fn new(
        slide_id: impl Into<String>,
        n_tiles: usize,
        ks: Vec<usize>,
        p_y: Vec<f64>,
    ) -> Result<Self, MetricsError> {
        let fail = |msg: String| Err(MetricsError::BadCurve(msg));
        if ks.is_empty() {
            return fail("empty K grid".into());
        }
        if ks.len() != p_y.len() {
            return fail(format!("{} grid points but {} probabilities", ks.len(), p_y.len()));
        }
        if ks[0] == 0 {
            return fail("K grid must start at 1 or above".into());
        }
        for w in ks.windows(2) {
            if w[1] <= w[0] {
                return fail(format!("K grid not strictly ascending at {} -> {}", w[0], w[1]));
            }
        }
        if *ks.last().unwrap() != n_tiles {
            return fail(format!(
                "K grid must end at the bag size {n_tiles}, ends at {}",
                ks.last().unwrap()
            ));
        }
        for &p in &p_y {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("probability {p} outside [0, 1]"));
            }
        }
        Ok(KCurve {
            slide_id: slide_id.into(),
            n_tiles,
            ks,
            p_y,
        })
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn n_tiles(&self) -> usize {
        self.n_tiles
    }

    pub fn ks(&self) -> &[usize] {
        &self.ks
    }

    pub fn p_y(&self) -> &[f64] {
        &self.p_y
    }

    /// Revealed fraction for each grid point.
    pub fn kappas(&self) -> Vec<f64> {
        self.ks.iter().map(|&k| k as f64 / self.n_tiles as f64).collect()
    }

    /// Curve value at an arbitrary kappa in `[0, 1]`: constant left of
    /// the first grid point, linear between points.
    pub fn interpolate(&self, kappa: f64) -> f64 {
        let xs = self.kappas();
        if kappa <= xs[0] {
            return self.p_y[0];
        }
        for i in 1..xs.len() {
            if kappa <= xs[i] {
                let t = (kappa - xs[i - 1]) / (xs[i] - xs[i - 1]);
                return self.p_y[i - 1] + t * (self.p_y[i] - self.p_y[i - 1]);
            }
        }
        *self.p_y.last().unwrap()
    }
}

/// Default K grid: every count up to `dense_max`, then geometric steps
/// (ratio 1.5) up to the bag size, which is always included.
pub fn k_grid(n_tiles: usize, dense_max: usize) -> Vec<usize> {
    assert!(n_tiles >= 1, "bag must have tiles");
    assert!(dense_max >= 1, "dense region must be nonempty");
    let mut ks: Vec<usize> = (1..=n_tiles.min(dense_max)).collect();
    let mut k = dense_max;
    while k < n_tiles {
        k = ((k as f64) * 1.5).ceil() as usize;
        ks.push(k.min(n_tiles));
    }
    ks.dedup();
    ks
}

/// The default dense region covers every K the reference experiments
/// report as typical minimal-sufficient counts.
pub const DEFAULT_DENSE_K: usize = 16;

pub fn default_k_grid(n_tiles: usize) -> Vec<usize> {
    k_grid(n_tiles, DEFAULT_DENSE_K)
}

/// Minimal sufficient K: the smallest grid K whose probability reaches
/// `tau`. `None` when the curve never gets there; callers must report
/// that case separately rather than substituting a value.
pub fn msk(curve: &KCurve, tau: f64) -> Option<usize> {
    assert!(tau > 0.0 && tau < 1.0, "threshold must be in (0, 1)");
    curve
        .ks
        .iter()
        .zip(&curve.p_y)
        .find(|(_, &p)| p >= tau)
        .map(|(&k, _)| k)
}

/// Area under the K-curve over kappa in [0, 1]: constant-left extension
/// up to the first grid point, then trapezoids. Stays in [0, 1] because
/// the curve does.
pub fn aukc(curve: &KCurve) -> f64 {
    let xs = curve.kappas();
    let ps = &curve.p_y;
    let mut area = ps[0] * xs[0];
    for i in 1..xs.len() {
        area += 0.5 * (ps[i - 1] + ps[i]) * (xs[i] - xs[i - 1]);
    }
    area
}

/// Binary AUC from the rank statistic with tie averaging. Labels must be
/// 0 or 1; higher scores should indicate class 1. Numerator and
/// denominator are exact in f64, so the result equals the pairwise
/// win-count definition bit for bit.
pub fn auc_binary(labels: &[usize], scores: &[f64]) -> Result<f64, MetricsError> {
    if labels.len() != scores.len() {
        return Err(MetricsError::LengthMismatch(labels.len(), scores.len()));
    }
    if labels.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    for &l in labels {
        if l > 1 {
            return Err(MetricsError::LabelOutOfRange(l, 2));
        }
    }
    for &s in scores {
        if !s.is_finite() {
            return Err(MetricsError::BadScore(s));
        }
    }
    let n = labels.len();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks; tied scores share the mean rank of their block.
        let rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        i = j;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let numerator = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(numerator / (n_pos as f64 * n_neg as f64))
}

/// Multiclass AUC: macro average of one-vs-rest binary AUCs, skipping
/// classes absent from the labels. Errors if no class has both
/// positives and negatives.
pub fn auc_macro(labels: &[usize], probs: &[Vec<f64>], num_classes: usize) -> Result<f64, MetricsError> {
    if labels.len() != probs.len() {
        return Err(MetricsError::LengthMismatch(labels.len(), probs.len()));
    }
    if labels.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    for &l in labels {
        if l >= num_classes {
            return Err(MetricsError::LabelOutOfRange(l, num_classes));
        }
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..num_classes {
        let onevr: Vec<usize> = labels.iter().map(|&l| usize::from(l == c)).collect();
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        match auc_binary(&onevr, &scores) {
            Ok(a) => {
                total += a;
                counted += 1;
            }
            Err(MetricsError::SingleClass) => continue,
            Err(e) => return Err(e),
        }
    }
    if counted == 0 {
        return Err(MetricsError::SingleClass);
    }
    Ok(total / counted as f64)
}

/// Argmax class of one probability row, lowest index winning ties.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(labels: &[usize], preds: &[usize]) -> Result<f64, MetricsError> {
    if labels.len() != preds.len() {
        return Err(MetricsError::LengthMismatch(labels.len(), preds.len()));
    }
    if labels.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let hits = labels.iter().zip(preds).filter(|(l, p)| l == p).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Macro F1 over the classes that appear in the labels. Per class,
/// precision or recall with an empty denominator counts as zero.
pub fn macro_f1(labels: &[usize], preds: &[usize], num_classes: usize) -> Result<f64, MetricsError> {
    if labels.len() != preds.len() {
        return Err(MetricsError::LengthMismatch(labels.len(), preds.len()));
    }
    if labels.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    for &l in labels.iter().chain(preds.iter()) {
        if l >= num_classes {
            return Err(MetricsError::LabelOutOfRange(l, num_classes));
        }
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..num_classes {
        let tp = labels.iter().zip(preds).filter(|(&l, &p)| l == c && p == c).count() as f64;
        let fp = labels.iter().zip(preds).filter(|(&l, &p)| l != c && p == c).count() as f64;
        let fn_ = labels.iter().zip(preds).filter(|(&l, &p)| l == c && p != c).count() as f64;
        if tp + fn_ == 0.0 {
            continue; // class absent from labels
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = tp / (tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += f1;
        counted += 1;
    }
    Ok(total / counted as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub auc: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub n: usize,
}

/// AUC (binary from class-1 probability, multiclass macro one-vs-rest),
/// argmax accuracy, and macro F1 from per-sample probability rows.
pub fn classification_metrics(
    labels: &[usize],
    probs: &[Vec<f64>],
    num_classes: usize,
) -> Result<ClassificationMetrics, MetricsError> {
    if labels.len() != probs.len() {
        return Err(MetricsError::LengthMismatch(labels.len(), probs.len()));
    }
    if labels.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let auc = if num_classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        auc_binary(labels, &scores)?
    } else {
        auc_macro(labels, probs, num_classes)?
    };
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    Ok(ClassificationMetrics {
        auc,
        accuracy: accuracy(labels, &preds)?,
        macro_f1: macro_f1(labels, &preds, num_classes)?,
        n: labels.len(),
    })
}

/// One slide's evidence diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideEvidenceRow {
    pub slide_id: String,
    /// Absent when the curve never reaches tau.
    pub msk: Option<usize>,
    pub aukc: f64,
    /// p_y(full) - p_y(keep): confidence lost by discarding unselected tiles.
    pub suff_gap: f64,
    pub p_drop: f64,
    pub contig: f64,
    pub mean_z: f64,
    /// Set when the gates carried no mass and contiguity defaulted to 0.
    pub degenerate_gates: bool,
}

/// Dataset-level aggregation. Slides that never reach tau are excluded
/// from the MSK mean and surface as `non_sufficient_rate`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceSummary {
    pub slides: usize,
    pub mean_msk: Option<f64>,
    pub sufficient: usize,
    pub non_sufficient_rate: f64,
    pub mean_aukc: f64,
    pub std_aukc: f64,
    pub mean_suff_gap: f64,
    pub std_suff_gap: f64,
    pub mean_p_drop: f64,
    pub std_p_drop: f64,
    pub mean_contig: f64,
    pub std_contig: f64,
    pub mean_z: f64,
    pub std_z: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize(rows: &[SlideEvidenceRow]) -> Result<EvidenceSummary, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let msks: Vec<f64> = rows.iter().filter_map(|r| r.msk.map(|k| k as f64)).collect();
    let collect = |f: fn(&SlideEvidenceRow) -> f64| -> (f64, f64) {
        let vals: Vec<f64> = rows.iter().map(f).collect();
        mean_std(&vals)
    };
    let (mean_aukc, std_aukc) = collect(|r| r.aukc);
    let (mean_suff_gap, std_suff_gap) = collect(|r| r.suff_gap);
    let (mean_p_drop, std_p_drop) = collect(|r| r.p_drop);
    let (mean_contig, std_contig) = collect(|r| r.contig);
    let (mean_z, std_z) = collect(|r| r.mean_z);
    Ok(EvidenceSummary {
        slides: rows.len(),
        mean_msk: if msks.is_empty() { None } else { Some(mean_std(&msks).0) },
        sufficient: msks.len(),
        non_sufficient_rate: (rows.len() - msks.len()) as f64 / rows.len() as f64,
        mean_aukc,
        std_aukc,
        mean_suff_gap,
        std_suff_gap,
        mean_p_drop,
        std_p_drop,
        mean_contig,
        std_contig,
        mean_z,
        std_z,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Per-slide CSV: `slide_id,msk,aukc,suff_gap,p_drop,contig,mean_z`,
/// with an empty msk field for slides that never reach tau.
pub fn per_slide_csv(rows: &[SlideEvidenceRow]) -> String {
    let mut out = String::from("slide_id,msk,aukc,suff_gap,p_drop,contig,mean_z\n");
    for r in rows {
        let msk = r.msk.map(|k| k.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.slide_id, msk, r.aukc, r.suff_gap, r.p_drop, r.contig, r.mean_z
        );
    }
    out
}

pub fn summary_csv(s: &EvidenceSummary) -> String {
    let mut out = String::from("metric,mean,std\n");
    let _ = writeln!(out, "msk,{},", fmt_opt(s.mean_msk));
    let _ = writeln!(out, "non_sufficient_rate,{:.6},", s.non_sufficient_rate);
    let _ = writeln!(out, "aukc,{:.6},{:.6}", s.mean_aukc, s.std_aukc);
    let _ = writeln!(out, "suff_gap,{:.6},{:.6}", s.mean_suff_gap, s.std_suff_gap);
    let _ = writeln!(out, "p_drop,{:.6},{:.6}", s.mean_p_drop, s.std_p_drop);
    let _ = writeln!(out, "contig,{:.6},{:.6}", s.mean_contig, s.std_contig);
    let _ = writeln!(out, "mean_z,{:.6},{:.6}", s.mean_z, s.std_z);
    out
}

/// One K-curve as CSV rows `k,kappa,p_y`.
pub fn kcurve_csv(curve: &KCurve) -> String {
    let mut out = String::from("k,kappa,p_y\n");
    for (i, &k) in curve.ks().iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6}",
            k,
            k as f64 / curve.n_tiles() as f64,
            curve.p_y()[i]
        );
    }
    out
}

pub fn write_text(path: &Path, content: &str) -> Result<(), MetricsError> {
    fs::write(path, content).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}
