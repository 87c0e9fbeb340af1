//! Reference implementations written directly from the defining formulas,
//! sharing no code with the library.

/// Result of the literal bag aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct SmilOracle {
    pub central: usize,
    pub retained: Vec<bool>,
    pub weights: Vec<(usize, f64)>,
    pub feature: Vec<f64>,
}

pub const EPS: f64 = 1e-8;

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

/// Central instance = smallest sum of distances to the others (first on
/// ties); mean distance over unordered pairs; keep instances within
/// `t` times the mean of the centre; weight the kept ones by normalized
/// inverse distance; add their weighted sum to the centre.
pub fn smil_literal(points: &[Vec<f64>], t: f64) -> SmilOracle {
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i < j {
                d[i][j] = dist(&points[i], &points[j]);
            } else if i > j {
                d[i][j] = d[j][i];
            }
        }
    }
    let mut central = 0;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            if j != i {
                s += d[i][j];
            }
        }
        if s < best {
            best = s;
            central = i;
        }
    }
    let mut retained = vec![false; n];
    retained[central] = true;
    let mut feature = points[central].clone();
    if n < 2 {
        return SmilOracle {
            central,
            retained,
            weights: vec![],
            feature,
        };
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += d[i][j];
        }
    }
    let nf = n as f64;
    let mean = 2.0 / (nf * (nf - 1.0)) * total;
    let mut kept = vec![];
    for i in 0..n {
        if i != central && d[central][i] <= t * mean {
            retained[i] = true;
            kept.push(i);
        }
    }
    let mut weights = vec![];
    if !kept.is_empty() {
        let tiny = kept.iter().all(|&i| d[central][i] < EPS);
        let inv: Vec<f64> = kept
            .iter()
            .map(|&i| if tiny { 1.0 } else { 1.0 / d[central][i].max(EPS) })
            .collect();
        let mut z = 0.0;
        for v in &inv {
            z += v;
        }
        for (k, &i) in kept.iter().enumerate() {
            let w = if tiny { 1.0 / kept.len() as f64 } else { inv[k] / z };
            weights.push((i, w));
            for c in 0..feature.len() {
                feature[c] += w * points[i][c];
            }
        }
    }
    SmilOracle {
        central,
        retained,
        weights,
        feature,
    }
}

/// Row-major `x W + b` with `W` stored `in x out`.
pub fn affine(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let inp = x.len();
    (0..out)
        .map(|j| {
            let mut s = 0.0;
            for i in 0..inp {
                s += x[i] * w[i * out + j];
            }
            s + b[j]
        })
        .collect()
}

/// Projections of one attention block, each `d x d` row-major plus bias.
pub struct AttnWeights<'a> {
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
}

/// One query vector attending over `tokens` with `heads` heads; returns the
/// concatenated head outputs and per-head weights.
pub fn attention_literal(
    query: &[f64],
    tokens: &[Vec<f64>],
    p: &AttnWeights,
    heads: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = query.len();
    let dh = d / heads;
    let q = affine(query, p.wq, p.bq, d);
    let k: Vec<Vec<f64>> = tokens.iter().map(|t| affine(t, p.wk, p.bk, d)).collect();
    let v: Vec<Vec<f64>> = tokens.iter().map(|t| affine(t, p.wv, p.bv, d)).collect();
    let mut out = vec![0.0; d];
    let mut all = vec![];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let scores: Vec<f64> = k
            .iter()
            .map(|kr| cols.clone().map(|c| q[c] * kr[c]).sum::<f64>() / (dh as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|x| x / z).collect();
        for c in cols {
            out[c] = a.iter().zip(&v).map(|(ai, vr)| ai * vr[c]).sum();
        }
        all.push(a);
    }
    (out, all)
}

/// Per-class one-vs-rest counts by walking the records.
pub struct Counts {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
    pub tn: f64,
}

pub fn count_class(truths: &[usize], preds: &[usize], k: usize) -> Counts {
    let mut c = Counts {
        tp: 0.0,
        fp: 0.0,
        fn_: 0.0,
        tn: 0.0,
    };
    for (&t, &p) in truths.iter().zip(preds) {
        match (t == k, p == k) {
            (true, true) => c.tp += 1.0,
            (false, true) => c.fp += 1.0,
            (true, false) => c.fn_ += 1.0,
            (false, false) => c.tn += 1.0,
        }
    }
    c
}

/// `(acc, pre, rec, spe, f1)` macro-averaged, zero for empty denominators.
pub fn macro_by_counting(truths: &[usize], preds: &[usize], classes: usize) -> [f64; 5] {
    let frac = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let correct = truths.iter().zip(preds).filter(|(t, p)| t == p).count() as f64;
    let mut sums = [0.0; 4];
    for k in 0..classes {
        let c = count_class(truths, preds, k);
        let pre = frac(c.tp, c.tp + c.fp);
        let rec = frac(c.tp, c.tp + c.fn_);
        let spe = frac(c.tn, c.tn + c.fp);
        let f1 = frac(2.0 * pre * rec, pre + rec);
        sums[0] += pre;
        sums[1] += rec;
        sums[2] += spe;
        sums[3] += f1;
    }
    let k = classes as f64;
    [
        correct / truths.len() as f64,
        sums[0] / k,
        sums[1] / k,
        sums[2] / k,
        sums[3] / k,
    ]
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn concordant_auc(positive: &[bool], scores: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

/// Two Adam steps on a single scalar parameter, written out term by term.
pub fn adam_two_steps(w0: f64, g: [f64; 2], lr: f64, wd: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut w = w0;
    let (mut m, mut v) = (0.0, 0.0);
    for (t, gt) in g.iter().enumerate() {
        let t = (t + 1) as f64;
        w *= 1.0 - lr * wd;
        m = b1 * m + (1.0 - b1) * gt;
        v = b2 * v + (1.0 - b2) * gt * gt;
        let mh = m / (1.0 - b1.powf(t));
        let vh = v / (1.0 - b2.powf(t));
        w -= lr * mh / (vh.sqrt() + eps);
    }
    w
}

/// Column means of a token matrix: rows summed in order, then divided.
pub fn column_mean(tokens: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; tokens[0].len()];
    for row in tokens {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= tokens.len() as f64;
    }
    out
}

/// Student t survival function by Simpson integration of the density, an
/// independent route to the two-sided p-value.
pub fn t_two_sided_by_quadrature(t: f64, df: f64) -> f64 {
    let ln_norm = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let density = |x: f64| (ln_norm - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    // P(0 <= T <= |t|) on a fine grid; the tail is 1/2 minus that.
    let n = 20_000;
    let h = t.abs() / n as f64;
    let mut s = density(0.0) + density(t.abs());
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * density(i as f64 * h);
    }
    2.0 * (0.5 - s * h / 3.0)
}

/// Lanczos approximation (g = 7, nine terms).
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
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
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}
