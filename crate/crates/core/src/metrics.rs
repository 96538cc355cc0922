//! Verification metrics, ROC/AUC and result export.
//!
//! Rates follow the usual confusion-matrix definitions: TPR = TP/(TP+FN),
//! FPR = FP/(TN+FP), ACC and WA as percentages with WA = (TP/P + TN/N)/2 *
//! 100. Rates whose denominator is empty return `None` rather than a silent
//! zero. The decision threshold for reported ACC/WA is 0.5 on the
//! positive-class probability; a score equal to the threshold counts as a
//! positive prediction.

use std::fs;
use std::path::Path;

use crate::data::Relation;
use crate::error::{CfilError, Result};

/// Confusion counts at one decision threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_positive: u64,
    pub true_negative: u64,
    pub false_positive: u64,
    pub false_negative: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_positive + self.true_negative + self.false_positive + self.false_negative
    }

    /// P = TP + FN.
    pub fn positives(&self) -> u64 {
        self.true_positive + self.false_negative
    }

    /// N = TN + FP.
    pub fn negatives(&self) -> u64 {
        self.true_negative + self.false_positive
    }

    /// Pool counts from another evaluation.
    pub fn absorb(&mut self, other: &ConfusionCounts) {
        self.true_positive += other.true_positive;
        self.true_negative += other.true_negative;
        self.false_positive += other.false_positive;
        self.false_negative += other.false_negative;
    }
}

/// Count predictions at `threshold`; predict positive iff score >= threshold.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionCounts> {
    if scores.len() != labels.len() {
        return Err(CfilError::Input(format!(
            "confusion: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CfilError::Input(format!(
            "confusion: threshold {threshold} outside [0, 1]"
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(CfilError::Input(format!(
            "confusion: score {bad} outside [0, 1]"
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => c.true_positive += 1,
            (true, false) => c.false_positive += 1,
            (false, true) => c.false_negative += 1,
            (false, false) => c.true_negative += 1,
        }
    }
    Ok(c)
}

/// TP / (TP + FN); None when there are no positives.
pub fn tpr(c: &ConfusionCounts) -> Option<f64> {
    let p = c.positives();
    (p > 0).then(|| c.true_positive as f64 / p as f64)
}

/// FP / (TN + FP); None when there are no negatives.
pub fn fpr(c: &ConfusionCounts) -> Option<f64> {
    let n = c.negatives();
    (n > 0).then(|| c.false_positive as f64 / n as f64)
}

/// (TP + TN) / (P + N) * 100; None on an empty evaluation.
pub fn accuracy_percent(c: &ConfusionCounts) -> Option<f64> {
    let t = c.total();
    (t > 0).then(|| (c.true_positive + c.true_negative) as f64 / t as f64 * 100.0)
}

/// (TP/P + TN/N) / 2 * 100; None when either class is empty.
pub fn weighted_accuracy_percent(c: &ConfusionCounts) -> Option<f64> {
    let (p, n) = (c.positives(), c.negatives());
    (p > 0 && n > 0).then(|| {
        0.5 * (c.true_positive as f64 / p as f64 + c.true_negative as f64 / n as f64) * 100.0
    })
}

/// One ROC point. The first point of a curve has no achievable threshold
/// (nothing predicted positive); it is recorded with threshold 1.0 and the
/// convention is documented rather than stored out of range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC points sorted by descending threshold: the above-everything sentinel
/// first (0, 0), one point per distinct score, then the threshold-0 corner
/// (1, 1). FPR and TPR are nondecreasing along the list.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(CfilError::Input(format!(
            "roc_curve: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let n = labels.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return Err(CfilError::Input(
            "roc_curve undefined: labels contain a single class".into(),
        ));
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(CfilError::Input(format!(
            "roc_curve: score {bad} outside [0, 1]"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut points = vec![RocPoint {
        threshold: 1.0,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        // Absorb the whole tie group before emitting a point.
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            tpr: tp as f64 / p,
            fpr: fp as f64 / n,
        });
    }
    if points.last().map(|pt| pt.threshold) != Some(0.0) {
        points.push(RocPoint {
            threshold: 0.0,
            tpr: 1.0,
            fpr: 1.0,
        });
    }
    Ok(points)
}

/// Trapezoidal area under the (fpr, tpr) polyline.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) * 0.5)
        .sum()
}

/// Evaluation of one fold: overall and per-relation counts at 0.5, the ROC
/// point list, and its AUC.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub fold: u8,
    pub counts: ConfusionCounts,
    pub per_relation: Vec<(Relation, ConfusionCounts)>,
    pub roc: Vec<RocPoint>,
    pub auc: f64,
}

impl EvalReport {
    pub fn relation_accuracy(&self, relation: Relation) -> Option<f64> {
        self.per_relation
            .iter()
            .find(|(r, _)| *r == relation)
            .and_then(|(_, c)| accuracy_percent(c))
    }

    /// Mean of the per-relation accuracies present.
    pub fn mva(&self) -> Option<f64> {
        let accs: Vec<f64> = self
            .per_relation
            .iter()
            .filter_map(|(_, c)| accuracy_percent(c))
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn wa(&self) -> Option<f64> {
        weighted_accuracy_percent(&self.counts)
    }
}

/// Cross-fold summary: per-relation fold means, MVA over relations, and WA
/// from counts pooled across folds.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub folds: Vec<u8>,
    pub per_relation_mean: Vec<(Relation, f64)>,
    pub mva: f64,
    pub wa_pooled: f64,
}

/// Combine per-fold reports. All reports must cover the same relation set.
pub fn aggregate(reports: &[EvalReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(CfilError::Aggregation("no reports to aggregate".into()));
    }
    let relations: Vec<Relation> = reports[0].per_relation.iter().map(|(r, _)| *r).collect();
    for rep in &reports[1..] {
        let rs: Vec<Relation> = rep.per_relation.iter().map(|(r, _)| *r).collect();
        if rs != relations {
            return Err(CfilError::Aggregation(format!(
                "relation sets differ across folds: {:?} vs {:?}",
                relations, rs
            )));
        }
    }

    let mut per_relation_mean = Vec::with_capacity(relations.len());
    for &relation in &relations {
        let mut acc = 0.0;
        for rep in reports {
            acc += rep.relation_accuracy(relation).ok_or_else(|| {
                CfilError::Aggregation(format!(
                    "relation {relation} has no samples in fold {}",
                    rep.fold
                ))
            })?;
        }
        per_relation_mean.push((relation, acc / reports.len() as f64));
    }
    let mva = per_relation_mean.iter().map(|(_, a)| a).sum::<f64>()
        / per_relation_mean.len().max(1) as f64;

    let mut pooled = ConfusionCounts::default();
    for rep in reports {
        pooled.absorb(&rep.counts);
    }
    let wa_pooled = weighted_accuracy_percent(&pooled).ok_or_else(|| {
        CfilError::Aggregation("pooled counts have an empty class; WA undefined".into())
    })?;

    Ok(AggregateReport {
        folds: reports.iter().map(|r| r.fold).collect(),
        per_relation_mean,
        mva,
        wa_pooled,
    })
}

fn metric_or_na(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "undefined".to_string(),
    }
}

/// Write `roc.csv`, `report.csv` and `roc.svg` into `dir`. Output bytes are
/// a pure function of the report.
pub fn export(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| CfilError::io(dir, e))?;

    let mut roc = String::from("threshold,fpr,tpr\n");
    for pt in &report.roc {
        roc.push_str(&format!("{},{},{}\n", pt.threshold, pt.fpr, pt.tpr));
    }
    let roc_path = dir.join("roc.csv");
    fs::write(&roc_path, roc).map_err(|e| CfilError::io(&roc_path, e))?;

    let mut rep = String::from("metric,name,value\n");
    rep.push_str(&format!("fold,overall,{}\n", report.fold));
    rep.push_str(&format!("count,tp,{}\n", report.counts.true_positive));
    rep.push_str(&format!("count,tn,{}\n", report.counts.true_negative));
    rep.push_str(&format!("count,fp,{}\n", report.counts.false_positive));
    rep.push_str(&format!("count,fn,{}\n", report.counts.false_negative));
    for (relation, counts) in &report.per_relation {
        rep.push_str(&format!(
            "accuracy,{relation},{}\n",
            metric_or_na(accuracy_percent(counts))
        ));
    }
    rep.push_str(&format!("mva,overall,{}\n", metric_or_na(report.mva())));
    rep.push_str(&format!("wa,overall,{}\n", metric_or_na(report.wa())));
    rep.push_str(&format!("auc,overall,{}\n", report.auc));
    let rep_path = dir.join("report.csv");
    fs::write(&rep_path, rep).map_err(|e| CfilError::io(&rep_path, e))?;

    let svg_path = dir.join("roc.svg");
    fs::write(&svg_path, roc_svg(report)).map_err(|e| CfilError::io(&svg_path, e))
}

/// Self-contained SVG of the ROC polyline with the chance diagonal.
fn roc_svg(report: &EvalReport) -> String {
    let (w, h, m) = (420.0, 420.0, 40.0);
    let plot = w - 2.0 * m;
    let x = |fpr: f64| m + fpr * plot;
    let y = |tpr: f64| h - m - tpr * plot;
    let mut path = String::new();
    for (i, pt) in report.roc.iter().enumerate() {
        let cmd = if i == 0 { 'M' } else { 'L' };
        path.push_str(&format!("{cmd}{:.2} {:.2} ", x(pt.fpr), y(pt.tpr)));
    }
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<rect x=\"{m}\" y=\"{m}\" width=\"{p}\" height=\"{p}\" fill=\"none\" stroke=\"#888\"/>\n",
            "<line x1=\"{m}\" y1=\"{yb}\" x2=\"{xr}\" y2=\"{m}\" stroke=\"#bbb\" stroke-dasharray=\"4 4\"/>\n",
            "<path d=\"{path}\" fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"2\"/>\n",
            "<text x=\"{tx}\" y=\"{ty}\" font-family=\"monospace\" font-size=\"14\">",
            "fold {fold} auc {auc:.6}</text>\n",
            "<text x=\"{lx}\" y=\"{lyy}\" font-family=\"monospace\" font-size=\"12\">fpr</text>\n",
            "<text x=\"8\" y=\"{m}\" font-family=\"monospace\" font-size=\"12\">tpr</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        m = m,
        p = plot,
        yb = h - m,
        xr = w - m,
        path = path.trim_end(),
        tx = m,
        ty = h - 12.0,
        fold = report.fold,
        auc = report.auc,
        lx = w / 2.0,
        lyy = h - 12.0,
    )
}

/// Parse a `roc.csv` produced by [`export`] back into points.
pub fn parse_roc_csv(text: &str) -> Result<Vec<RocPoint>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "threshold,fpr,tpr")) => {}
        _ => {
            return Err(CfilError::Parse {
                line: 1,
                message: "expected header 'threshold,fpr,tpr'".into(),
            })
        }
    }
    let mut points = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(CfilError::Parse {
                line: idx + 1,
                message: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| CfilError::Parse {
                line: idx + 1,
                message: format!("bad float '{s}'"),
            })
        };
        points.push(RocPoint {
            threshold: parse(fields[0])?,
            fpr: parse(fields[1])?,
            tpr: parse(fields[2])?,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    /// Brute-force Mann-Whitney statistic: fraction of positive/negative
    /// score pairs correctly ordered, ties counting one half.
    fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
        let mut won = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, (&sp, &lp)) in scores.iter().zip(labels).enumerate() {
            if !lp {
                continue;
            }
            for (j, (&sn, &ln)) in scores.iter().zip(labels).enumerate() {
                if ln || i == j {
                    continue;
                }
                pairs += 1.0;
                if sp > sn {
                    won += 1.0;
                } else if sp == sn {
                    won += 0.5;
                }
            }
        }
        won / pairs
    }

    #[test]
    fn confusion_enumeration_example() {
        let c = confusion(&[0.9, 0.4, 0.6, 0.2], &[true, true, false, false], 0.5).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                true_positive: 1,
                false_negative: 1,
                false_positive: 1,
                true_negative: 1
            }
        );
    }

    #[test]
    fn confusion_degenerate_scorers() {
        let labels = [true, true, false, false];
        let perfect = confusion(&[0.9, 0.8, 0.1, 0.2], &labels, 0.5).unwrap();
        assert_eq!(perfect.false_positive, 0);
        assert_eq!(perfect.false_negative, 0);

        let all_one = confusion(&[1.0; 4], &labels, 0.5).unwrap();
        assert_eq!(all_one.true_negative, 0);
        assert_eq!(all_one.false_positive, 2);
    }

    #[test]
    fn threshold_tie_counts_positive() {
        let c = confusion(&[0.5], &[true], 0.5).unwrap();
        assert_eq!(c.true_positive, 1);
    }

    #[test]
    fn rates_hand_substituted() {
        let c = ConfusionCounts {
            true_positive: 3,
            false_negative: 1,
            false_positive: 2,
            true_negative: 4,
        };
        assert!((tpr(&c).unwrap() - 0.75).abs() < 1e-12);
        assert!((fpr(&c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((accuracy_percent(&c).unwrap() - 70.0).abs() < 1e-12);
        assert!((weighted_accuracy_percent(&c).unwrap() - (0.75 + 4.0 / 6.0) * 50.0).abs() < 1e-12);
        // The substituted value: 70.8333...%
        assert!((weighted_accuracy_percent(&c).unwrap() - 70.8333).abs() < 1e-3);
    }

    #[test]
    fn undefined_rates_are_none_not_zero() {
        let no_pos = ConfusionCounts {
            true_negative: 5,
            false_positive: 1,
            ..Default::default()
        };
        assert_eq!(tpr(&no_pos), None);
        assert!(fpr(&no_pos).is_some());
        assert_eq!(weighted_accuracy_percent(&no_pos), None);
        assert_eq!(accuracy_percent(&ConfusionCounts::default()), None);
    }

    #[test]
    fn acc_equals_wa_when_balanced() {
        let mut rng = SeededRng::new(31);
        for _ in 0..200 {
            let p = 1 + rng.below(40);
            let tp = rng.below(p + 1);
            let tn = rng.below(p + 1);
            let c = ConfusionCounts {
                true_positive: tp,
                false_negative: p - tp,
                true_negative: tn,
                false_positive: p - tn,
            };
            let acc = accuracy_percent(&c).unwrap();
            let wa = weighted_accuracy_percent(&c).unwrap();
            assert!((acc - wa).abs() < 1e-9, "P=N must force ACC == WA");
        }
    }

    #[test]
    fn all_correct_is_hundred() {
        let c = ConfusionCounts {
            true_positive: 7,
            true_negative: 3,
            ..Default::default()
        };
        assert_eq!(accuracy_percent(&c), Some(100.0));
        assert_eq!(weighted_accuracy_percent(&c), Some(100.0));
    }

    #[test]
    fn roc_perfect_and_degenerate() {
        let labels = [true, true, false, false];
        let pts = roc_curve(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap();
        assert!((auc(&pts) - 1.0).abs() < 1e-12);

        let flat = roc_curve(&[0.5; 4], &labels).unwrap();
        assert!((auc(&flat) - 0.5).abs() < 1e-12);
        // Single diagonal segment: sentinel, one tie-group point, corner.
        assert_eq!(flat.len(), 3);
    }

    #[test]
    fn roc_worked_example() {
        let pts = roc_curve(&[0.9, 0.4, 0.6, 0.2], &[true, true, false, false]).unwrap();
        assert!((auc(&pts) - 0.75).abs() < 1e-12);
        // Monotone in both axes as threshold decreases.
        for w in pts.windows(2) {
            assert!(w[1].threshold <= w[0].threshold);
            assert!(w[1].fpr >= w[0].fpr);
            assert!(w[1].tpr >= w[0].tpr);
        }
        assert_eq!(pts[0].tpr, 0.0);
        assert_eq!(pts[0].fpr, 0.0);
        assert_eq!(pts.last().unwrap().tpr, 1.0);
        assert_eq!(pts.last().unwrap().fpr, 1.0);
    }

    #[test]
    fn roc_single_class_rejected() {
        assert!(roc_curve(&[0.1, 0.9], &[true, true]).is_err());
    }

    #[test]
    fn auc_matches_mann_whitney_on_random_sets() {
        let mut rng = SeededRng::new(1312);
        for trial in 0..40 {
            let n = 2 + rng.below(199) as usize;
            let mut scores = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                // Quantized scores produce plenty of ties.
                scores.push((rng.below(21) as f64) / 20.0);
                labels.push(rng.below(2) == 1);
            }
            if !labels.contains(&true) || !labels.contains(&false) {
                continue;
            }
            let pts = roc_curve(&scores, &labels).unwrap();
            let a = auc(&pts);
            let mw = mann_whitney(&scores, &labels);
            assert!((a - mw).abs() < 1e-9, "trial {trial}: auc {a} vs mw {mw}");
        }
    }

    fn toy_report(fold: u8, tp: u64, tn: u64, fp: u64, fn_: u64) -> EvalReport {
        let counts = ConfusionCounts {
            true_positive: tp,
            true_negative: tn,
            false_positive: fp,
            false_negative: fn_,
        };
        EvalReport {
            fold,
            counts,
            per_relation: Relation::ALL.iter().map(|&r| (r, counts)).collect(),
            roc: vec![
                RocPoint { threshold: 1.0, tpr: 0.0, fpr: 0.0 },
                RocPoint { threshold: 0.0, tpr: 1.0, fpr: 1.0 },
            ],
            auc: 0.5,
        }
    }

    #[test]
    fn aggregate_identical_folds_is_identity() {
        let rep = toy_report(1, 8, 6, 2, 4);
        let agg = aggregate(&[rep.clone(), toy_report(2, 8, 6, 2, 4)]).unwrap();
        assert!((agg.mva - rep.mva().unwrap()).abs() < 1e-12);
        assert!((agg.wa_pooled - rep.wa().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn aggregate_means_relations() {
        // Fold accuracies 80 and 100 -> mean 90.
        let a = toy_report(1, 8, 8, 2, 2); // acc 80%
        let b = toy_report(2, 10, 10, 0, 0); // acc 100%
        let agg = aggregate(&[a, b]).unwrap();
        for (_, acc) in &agg.per_relation_mean {
            assert!((acc - 90.0).abs() < 1e-12);
        }
        assert!((agg.mva - 90.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_wa_differs_from_mean_of_fold_was_under_imbalance() {
        // Fold 1: many positives, fold 2: many negatives.
        let a = toy_report(1, 90, 5, 5, 10); // P=100, N=10
        let b = toy_report(2, 5, 50, 50, 5); // P=10,  N=100
        let mean_of_was = (a.wa().unwrap() + b.wa().unwrap()) / 2.0;
        let agg = aggregate(&[a, b]).unwrap();
        assert!(
            (agg.wa_pooled - mean_of_was).abs() > 0.5,
            "pooled {} vs mean-of-folds {mean_of_was}",
            agg.wa_pooled
        );
        // Pooled definition: P = 110, TP = 95; N = 110, TN = 55.
        let expect = 0.5 * (95.0 / 110.0 + 55.0 / 110.0) * 100.0;
        assert!((agg.wa_pooled - expect).abs() < 1e-9);
    }

    #[test]
    fn aggregate_rejects_mismatched_relations() {
        let a = toy_report(1, 1, 1, 1, 1);
        let mut b = toy_report(2, 1, 1, 1, 1);
        b.per_relation.pop();
        assert!(matches!(
            aggregate(&[a, b]),
            Err(CfilError::Aggregation(_))
        ));
    }

    #[test]
    fn export_is_byte_stable_and_reloadable() {
        let dir = tempfile::tempdir().unwrap();
        let scores = [0.9, 0.4, 0.6, 0.2, 0.55, 0.15];
        let labels = [true, true, false, false, true, false];
        let roc = roc_curve(&scores, &labels).unwrap();
        let report = EvalReport {
            fold: 3,
            counts: confusion(&scores, &labels, 0.5).unwrap(),
            per_relation: vec![(Relation::FatherSon, confusion(&scores, &labels, 0.5).unwrap())],
            auc: auc(&roc),
            roc,
        };
        export(&report, dir.path()).unwrap();
        let roc_a = fs::read(dir.path().join("roc.csv")).unwrap();
        let rep_a = fs::read(dir.path().join("report.csv")).unwrap();
        let svg_a = fs::read(dir.path().join("roc.svg")).unwrap();
        export(&report, dir.path()).unwrap();
        assert_eq!(roc_a, fs::read(dir.path().join("roc.csv")).unwrap());
        assert_eq!(rep_a, fs::read(dir.path().join("report.csv")).unwrap());
        assert_eq!(svg_a, fs::read(dir.path().join("roc.svg")).unwrap());

        // Row count = points + header; reload reproduces the AUC exactly.
        let text = String::from_utf8(roc_a).unwrap();
        assert_eq!(text.lines().count(), report.roc.len() + 1);
        let parsed = parse_roc_csv(&text).unwrap();
        assert!((auc(&parsed) - report.auc).abs() < 1e-9);
    }
}
