//! Confusion matrices, macro-averaged one-vs-rest scores, ROC/AUC and the
//! paired t-test used to compare cross-validation runs.
//!
//! Ratios with a zero denominator contribute 0 to the macro mean and are
//! reported in the `warnings` list instead of producing NaN.

use serde::{Deserialize, Serialize};

use crate::error::{CmusError, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self) -> String {
        let c = self.classes();
        let mut s = String::from("true\\pred");
        for j in 0..c {
            s.push_str(&format!(",{j}"));
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion_matrix(truths: &[usize], preds: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truths.len() != preds.len() {
        return Err(CmusError::Contract(format!(
            "{} truths but {} predictions",
            truths.len(),
            preds.len()
        )));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truths.iter().zip(preds) {
        if t >= classes || p >= classes {
            return Err(CmusError::Contract(format!(
                "label pair ({t}, {p}) out of range for {classes} classes"
            )));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub acc: f64,
    pub pre: f64,
    pub rec: f64,
    pub spe: f64,
    pub f1: f64,
    pub per_class: Vec<ClassScores>,
    pub warnings: Vec<String>,
}

fn ratio(num: u64, den: u64, what: &str, class: usize, warnings: &mut Vec<String>) -> f64 {
    if den == 0 {
        warnings.push(format!("{what} undefined for class {class}"));
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn macro_scores(cm: &ConfusionMatrix) -> Result<MacroScores> {
    let total = cm.total();
    if total == 0 || cm.classes() == 0 {
        return Err(CmusError::Contract("empty confusion matrix".into()));
    }
    let c = cm.classes();
    let mut warnings = Vec::new();
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.counts[k][k];
        let support: u64 = cm.counts[k].iter().sum();
        let predicted: u64 = (0..c).map(|i| cm.counts[i][k]).sum();
        let fn_ = support - tp;
        let fp = predicted - tp;
        let tn = total - tp - fn_ - fp;
        let precision = ratio(tp, tp + fp, "precision", k, &mut warnings);
        let recall = ratio(tp, tp + fn_, "recall", k, &mut warnings);
        let specificity = ratio(tn, tn + fp, "specificity", k, &mut warnings);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            warnings.push(format!("f1 undefined for class {k}"));
            0.0
        };
        per_class.push(ClassScores {
            class: k,
            precision,
            recall,
            specificity,
            f1,
            support,
        });
    }
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    Ok(MacroScores {
        acc: cm.trace() as f64 / total as f64,
        pre: mean(|s| s.precision),
        rec: mean(|s| s.recall),
        spe: mean(|s| s.specificity),
        f1: mean(|s| s.f1),
        per_class,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: usize,
    /// `(false positive rate, true positive rate)` from `(0,0)` to `(1,1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub macro_auc: f64,
    pub curves: Vec<RocCurve>,
    pub skipped: Vec<usize>,
}

/// ROC points and trapezoidal area for one binary problem. Records with equal
/// scores enter in a single threshold step. Requires at least one positive and
/// one negative.
pub fn binary_roc(positive: &[bool], scores: &[f64]) -> (Vec<(f64, f64)>, f64) {
    let p = positive.iter().filter(|&&b| b).count() as f64;
    let n = positive.len() as f64 - p;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((fp / n, tp / p));
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    (points, auc)
}

/// One-vs-rest ROC per class and the macro mean of the per-class AUCs.
pub fn roc_auc_macro(truths: &[usize], scores: &[Vec<f64>]) -> Result<AucReport> {
    if truths.len() != scores.len() || truths.is_empty() {
        return Err(CmusError::Contract(format!(
            "{} truths for {} score rows",
            truths.len(),
            scores.len()
        )));
    }
    let c = scores[0].len();
    for (i, row) in scores.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.len() != c || (s - 1.0).abs() > 1e-6 {
            return Err(CmusError::Contract(format!(
                "score row {i} does not hold {c} probabilities summing to 1"
            )));
        }
        if truths[i] >= c {
            return Err(CmusError::Contract(format!("label {} out of range", truths[i])));
        }
    }
    let mut curves = Vec::new();
    let mut skipped = Vec::new();
    for k in 0..c {
        let pos: Vec<bool> = truths.iter().map(|&t| t == k).collect();
        let np = pos.iter().filter(|&&b| b).count();
        if np == 0 || np == pos.len() {
            skipped.push(k);
            continue;
        }
        let col: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let (points, auc) = binary_roc(&pos, &col);
        curves.push(RocCurve {
            class: k,
            points,
            auc,
        });
    }
    if curves.is_empty() {
        return Err(CmusError::Contract(
            "no class has both positive and negative records".into(),
        ));
    }
    let macro_auc = curves.iter().map(|c| c.auc).sum::<f64>() / curves.len() as f64;
    Ok(AucReport {
        macro_auc,
        curves,
        skipped,
    })
}

pub fn roc_csv(curves: &[RocCurve]) -> String {
    let mut s = String::from("class,fpr,tpr\n");
    for c in curves {
        for (f, t) in &c.points {
            s.push_str(&format!("{},{f},{t}\n", c.class));
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
}

/// Paired two-sided Student t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(CmusError::Contract(format!(
            "paired samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(CmusError::Contract("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    let df = n - 1;
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, df, p: 1.0 }
        } else {
            TTest {
                t: f64::INFINITY.copysign(mean),
                df,
                p: 0.0,
            }
        });
    }
    let t = mean / (sd / nf.sqrt());
    Ok(TTest {
        t,
        df,
        p: student_t_two_sided_p(t, df as f64),
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9.
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Everything computed for one evaluated fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold_id: usize,
    pub acc: f64,
    pub auc: f64,
    pub pre: f64,
    pub rec: f64,
    pub spe: f64,
    pub f1: f64,
    pub per_class: Vec<ClassScores>,
    pub confusion: ConfusionMatrix,
    pub roc: Vec<RocCurve>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Acc => self.acc,
            Metric::Auc => self.auc,
            Metric::Pre => self.pre,
            Metric::Rec => self.rec,
            Metric::Spe => self.spe,
            Metric::F1 => self.f1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Acc,
    Auc,
    Pre,
    Rec,
    Spe,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Acc,
        Metric::Auc,
        Metric::Pre,
        Metric::Rec,
        Metric::Spe,
        Metric::F1,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Acc => "ACC",
            Metric::Auc => "AUC",
            Metric::Pre => "PRE",
            Metric::Rec => "REC",
            Metric::Spe => "SPE",
            Metric::F1 => "F1",
        }
    }
}

/// Scores one fold from true labels, predicted labels and class
/// probabilities.
pub fn evaluate(
    fold_id: usize,
    truths: &[usize],
    preds: &[usize],
    probs: &[Vec<f64>],
    classes: usize,
) -> Result<EvalReport> {
    let cm = confusion_matrix(truths, preds, classes)?;
    let scores = macro_scores(&cm)?;
    let auc = roc_auc_macro(truths, probs)?;
    let mut warnings = scores.warnings;
    for k in &auc.skipped {
        warnings.push(format!("auc skipped for class {k}"));
    }
    Ok(EvalReport {
        fold_id,
        acc: scores.acc,
        auc: auc.macro_auc,
        pre: scores.pre,
        rec: scores.rec,
        spe: scores.spe,
        f1: scores.f1,
        per_class: scores.per_class,
        confusion: cm,
        roc: auc.curves,
        warnings,
    })
}
