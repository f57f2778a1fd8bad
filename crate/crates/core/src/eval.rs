//! Evaluation metrics: ROC/AUC, EER, DeLong's paired test, regression
//! metrics, character error rate and report rendering.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::tensor::Rng;

fn split_classes(scores: &[f64], labels: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::LabelMismatch);
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass {
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    Ok((pos, neg))
}

/// Mann-Whitney kernel: 1 if the positive outranks, 1/2 on ties.
#[inline]
fn psi(x: f64, y: f64) -> f64 {
    if x > y {
        1.0
    } else if x == y {
        0.5
    } else {
        0.0
    }
}

/// AUC by counting concordant positive/negative pairs (ties count half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = split_classes(scores, labels)?;
    let total: f64 = pos.iter().map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>()).sum();
    Ok(total / (pos.len() * neg.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC vertices from (0,0) to (1,1), one per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = split_classes(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut pts = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / nn,
            tpr: tp as f64 / np,
        });
    }
    Ok(pts)
}

pub fn trapezoidal_auc(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EerPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub eer: f64,
}

/// Operating point where sensitivity equals specificity, interpolating
/// linearly along the ROC segment that crosses the diagonal `tpr = 1 - fpr`.
pub fn eer_point(scores: &[f64], labels: &[bool]) -> Result<EerPoint> {
    let curve = roc_curve(scores, labels)?;
    let d = |p: &RocPoint| p.tpr + p.fpr - 1.0;
    let k = curve.iter().position(|p| d(p) >= 0.0).expect("last ROC point is (1,1)");
    let hi = curve[k];
    let (sens, thr) = if d(&hi) == 0.0 {
        (hi.tpr, hi.threshold)
    } else {
        let lo = curve[k - 1];
        let lam = -d(&lo) / (d(&hi) - d(&lo));
        let tpr = lo.tpr + lam * (hi.tpr - lo.tpr);
        let fpr = lo.fpr + lam * (hi.fpr - lo.fpr);
        // Symmetrize the rounding residue so sens and spec agree exactly.
        ((tpr + 1.0 - fpr) / 2.0, hi.threshold)
    };
    Ok(EerPoint {
        threshold: thr,
        sensitivity: sens,
        specificity: sens,
        eer: 1.0 - sens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DeLongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p_value: f64,
    pub variance: f64,
    /// Variance of the AUC difference was zero while the AUCs differ.
    pub degenerate: bool,
}

fn structural_components(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let v10 = pos
        .iter()
        .map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64)
        .collect();
    let v01 = neg
        .iter()
        .map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64)
        .collect();
    (v10, v01)
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1) as f64
}

fn two_sided_p(z: f64) -> f64 {
    statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// DeLong's test for two correlated AUCs computed on the same labels.
pub fn delong_test(a: &[f64], b: &[f64], labels: &[bool]) -> Result<DeLongResult> {
    if a.len() != b.len() {
        return Err(Error::LabelMismatch);
    }
    let (pa, na) = split_classes(a, labels)?;
    let (pb, nb) = split_classes(b, labels)?;
    let (v10a, v01a) = structural_components(&pa, &na);
    let (v10b, v01b) = structural_components(&pb, &nb);
    let auc_a = v10a.iter().sum::<f64>() / pa.len() as f64;
    let auc_b = v10b.iter().sum::<f64>() / pb.len() as f64;
    let s10 = cov(&v10a, &v10a) + cov(&v10b, &v10b) - 2.0 * cov(&v10a, &v10b);
    let s01 = cov(&v01a, &v01a) + cov(&v01b, &v01b) - 2.0 * cov(&v01a, &v01b);
    let variance = (s10 / pa.len() as f64 + s01 / na.len() as f64).max(0.0);
    let diff = auc_a - auc_b;
    let (z, p_value, degenerate) = if diff == 0.0 {
        (0.0, 1.0, false)
    } else if variance <= 0.0 {
        (diff.signum() * f64::INFINITY, 0.0, true)
    } else {
        let z = diff / variance.sqrt();
        (z, two_sided_p(z), false)
    };
    Ok(DeLongResult {
        auc_a,
        auc_b,
        z,
        p_value,
        variance,
        degenerate,
    })
}

/// Stratified paired bootstrap test of `AUC(a) - AUC(b)`: the observed
/// difference divided by its bootstrap standard deviation, referred to N(0,1).
pub fn paired_bootstrap_test(a: &[f64], b: &[f64], labels: &[bool], resamples: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LabelMismatch);
    }
    let (pa, na) = split_classes(a, labels)?;
    let (pb, nb) = split_classes(b, labels)?;
    let (np, nn) = (pa.len(), na.len());
    // d[i][j] = psi_a - psi_b for each positive/negative pair.
    let d: Vec<f64> = (0..np)
        .flat_map(|i| {
            let (pa, na, pb, nb) = (&pa, &na, &pb, &nb);
            (0..nn).map(move |j| psi(pa[i], na[j]) - psi(pb[i], nb[j]))
        })
        .collect();
    let observed = d.iter().sum::<f64>() / (np * nn) as f64;
    let chunks = 64usize;
    let per = resamples.div_ceil(chunks);
    let diffs: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = Rng::new(seed).derive(c as u64);
            let count = per.min(resamples.saturating_sub(c * per));
            let d = &d;
            let mut wp = vec![0u32; np];
            let mut wn = vec![0u32; nn];
            (0..count)
                .map(move |_| {
                    wp.iter_mut().for_each(|w| *w = 0);
                    wn.iter_mut().for_each(|w| *w = 0);
                    for _ in 0..np {
                        wp[rng.int_range(0, np - 1)] += 1;
                    }
                    for _ in 0..nn {
                        wn[rng.int_range(0, nn - 1)] += 1;
                    }
                    let mut s = 0.0;
                    for i in 0..np {
                        if wp[i] == 0 {
                            continue;
                        }
                        let row = &d[i * nn..(i + 1) * nn];
                        let inner: f64 = row.iter().zip(&wn).map(|(v, &w)| v * w as f64).sum();
                        s += wp[i] as f64 * inner;
                    }
                    s / (np * nn) as f64
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
    if observed == 0.0 {
        return Ok(1.0);
    }
    if var <= 0.0 {
        return Ok(0.0);
    }
    Ok(two_sided_p(observed / var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub pcc: f64,
}

pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<RegressionMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::LabelMismatch);
    }
    let n = pred.len() as f64;
    let rmse = (pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n).sqrt();
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let sp = cov(pred, pred);
    let st = cov(truth, truth);
    if pred.len() < 2 || sp <= 0.0 || st <= 0.0 {
        return Err(Error::UndefinedPcc);
    }
    let pcc = cov(pred, truth) / (sp * st).sqrt();
    Ok(RegressionMetrics { rmse, mae, pcc })
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate: edits from `reference` to `hypothesis` divided by
/// the reference length. Can exceed 1.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    cer_symbols(&r, &h)
}

pub fn cer_symbols<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Session-level metrics for one arm on one split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub arm: String,
    pub split: String,
    pub task: TaskKind,
    pub sessions: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// Classification metrics from session scores and binary labels.
pub fn classification_report(arm: &str, split: &str, scores: &[f64], labels: &[bool]) -> Result<MetricsReport> {
    let a = auc(scores, labels)?;
    let e = eer_point(scores, labels)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("auc".to_string(), a);
    metrics.insert("eer".to_string(), e.eer);
    metrics.insert("sensitivity".to_string(), e.sensitivity);
    metrics.insert("specificity".to_string(), e.specificity);
    Ok(MetricsReport {
        arm: arm.into(),
        split: split.into(),
        task: TaskKind::Classification,
        sessions: scores.len(),
        metrics,
    })
}

pub fn regression_report(arm: &str, split: &str, pred: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    let m = regression_metrics(pred, truth)?;
    let metrics = [("rmse", m.rmse), ("mae", m.mae), ("pcc", m.pcc)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    Ok(MetricsReport {
        arm: arm.into(),
        split: split.into(),
        task: TaskKind::Regression,
        sessions: pred.len(),
        metrics,
    })
}

/// `arm,task,metric,dev,test` table with two-decimal values.
pub fn render_side_by_side(pairs: &[(&MetricsReport, &MetricsReport)]) -> String {
    let mut out = String::from("arm,task,metric,dev,test\n");
    for (dev, test) in pairs {
        for (k, v) in &dev.metrics {
            let t = test.metrics.get(k).map_or(String::from("NA"), |t| format!("{t:.2}"));
            out.push_str(&format!("{},{},{},{:.2},{}\n", dev.arm, dev.task.as_str(), k, v, t));
        }
    }
    out
}

/// `session_id,label,score` rows; scores at full precision.
pub fn render_scores(rows: &[(String, f64, f64)]) -> String {
    let mut out = String::from("session_id,label,score\n");
    for (id, label, score) in rows {
        out.push_str(&format!("{id},{label},{score:?}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_auc() {
        let s = [0.9, 0.4, 0.5, 0.1];
        let l = [true, true, false, false];
        assert_eq!(auc(&s, &l).unwrap(), 0.75);
        assert_eq!(trapezoidal_auc(&roc_curve(&s, &l).unwrap()), 0.75);
    }

    #[test]
    fn auc_all_tied_is_half() {
        assert_eq!(auc(&[1.0; 4], &[true, false, true, false]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(Error::SingleClass { positives: 2, negatives: 0 })
        ));
        assert!(matches!(auc(&[0.1], &[true, false]), Err(Error::LabelMismatch)));
    }

    #[test]
    fn separable_eer() {
        let e = eer_point(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!((e.sensitivity, e.specificity), (1.0, 1.0));
        assert_eq!(e.eer, 0.0);
    }

    #[test]
    fn inverted_eer() {
        let e = eer_point(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]).unwrap();
        assert_eq!(e.sensitivity, 0.0);
    }

    #[test]
    fn eer_interpolates() {
        // ROC: (0,0) (0,1/2) (1/2,1/2) (1/2,1) (1,1); crosses the diagonal
        // on the vertical segment at fpr=1/2... no: at (0.5,0.5) d = 0.
        let e = eer_point(&[4.0, 3.0, 2.0, 1.0], &[true, false, true, false]).unwrap();
        assert_eq!(e.sensitivity, 0.5);
        // Three positives, one negative: (0,1/3)(0,2/3)(1,2/3)(1,1).
        let e = eer_point(&[4.0, 3.0, 2.0, 1.0], &[true, true, false, true]).unwrap();
        assert!((e.sensitivity - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn delong_identical_is_one() {
        let s = [0.3, 0.8, 0.5, 0.2, 0.9];
        let l = [false, true, true, false, false];
        let r = delong_test(&s, &s, &l).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.z, 0.0);
    }

    #[test]
    fn regression_cases() {
        let m = regression_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 5.0]).unwrap();
        assert!((m.rmse - (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((m.mae - 2.0 / 3.0).abs() < 1e-12);
        assert!(m.pcc > 0.9);
        assert!(matches!(regression_metrics(&[1.0, 1.0], &[0.0, 2.0]), Err(Error::UndefinedPcc)));
    }

    #[test]
    fn cer_cases() {
        assert_eq!(cer("a", "abcd").unwrap(), 3.0);
        assert_eq!(cer("abcd", "abcd").unwrap(), 0.0);
        assert_eq!(cer("abcd", "").unwrap(), 1.0);
        assert!(matches!(cer("", "x"), Err(Error::EmptyReference)));
    }

    #[test]
    fn side_by_side_table() {
        let d = classification_report("tl1", "dev", &[0.9, 0.1], &[true, false]).unwrap();
        let t = classification_report("tl1", "test", &[0.1, 0.9], &[true, false]).unwrap();
        let csv = render_side_by_side(&[(&d, &t)]);
        assert!(csv.contains("tl1,cls,auc,1.00,0.00"));
    }
}
