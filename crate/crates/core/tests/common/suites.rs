//! Measurement routines shared by the integration tests and the acceptance
//! runner. Each returns numbers; callers decide what passes.

use std::time::{Duration, Instant};

use cmus_core::cmsa::{attention_var, cmsa_fuse_var, AttentionParams, CmsaParams};
use cmus_core::diffcore::{central_difference, grad_check_many, ParamId, ParamStore, Tape, Tensor, Var};
use cmus_core::model::{CmusModel, ModelConfig, PatientRecord, RawDims};
use cmus_core::smil::{aggregate_bag, aggregate_var, Bag};
use cmus_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::{dist, smil_literal};

pub const GRAD_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradRow {
    pub name: &'static str,
    pub trials: usize,
    pub worst: f64,
    /// Draws rejected for lying too close to a selection boundary.
    pub resampled: usize,
    /// Largest analytic gradient on coordinates whose true gradient is 0.
    pub inert: f64,
}

impl GradRow {
    pub fn new(name: &'static str, trials: u64) -> Self {
        GradRow {
            name,
            trials: trials as usize,
            worst: 0.0,
            resampled: 0,
            inert: 0.0,
        }
    }

    fn record(&mut self, worst: f64, inert: f64) {
        self.worst = self.worst.max(worst);
        self.inert = self.inert.max(inert);
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..r * c).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(vec![r, c], data).unwrap()
}

/// Tensor whose entries have magnitude in `[lo, hi)` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..r * c)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(vec![r, c], data).unwrap()
}

/// `sum(out * r)` for a fixed random `r`, giving every output coordinate a
/// distinct weight in the scalar loss.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(out, rv)?;
    Ok(tape.sum(p))
}

fn projector(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Tensor {
    rand_tensor(rng, shape.0, shape.1, -1.0, 1.0)
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One random instance of a primitive check: inputs and the scalar function.
fn primitive_case(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Build) {
    let t = |rng: &mut ChaCha8Rng, r, c| rand_tensor(rng, r, c, -2.0, 2.0);
    match name {
        "matmul" => {
            let r = projector(rng, (2, 4));
            (vec![t(rng, 2, 3), t(rng, 3, 4)], Box::new(move |tp, v| {
                let o = tp.matmul(v[0], v[1])?;
                project(tp, o, &r)
            }))
        }
        "matmul_t" => {
            let r = projector(rng, (2, 4));
            (vec![t(rng, 2, 3), t(rng, 4, 3)], Box::new(move |tp, v| {
                let o = tp.matmul_t(v[0], v[1])?;
                project(tp, o, &r)
            }))
        }
        "add_bias" => {
            let r = projector(rng, (3, 4));
            (vec![t(rng, 3, 4), t(rng, 1, 4)], Box::new(move |tp, v| {
                let o = tp.add_bias(v[0], v[1])?;
                project(tp, o, &r)
            }))
        }
        "linear" => {
            let r = projector(rng, (2, 4));
            (vec![t(rng, 2, 3), t(rng, 3, 4), t(rng, 1, 4)], Box::new(move |tp, v| {
                let o = tp.linear(v[0], v[1], v[2])?;
                project(tp, o, &r)
            }))
        }
        "add" | "sub" | "mul" => {
            let r = projector(rng, (3, 4));
            let which = name.to_string();
            (vec![t(rng, 3, 4), t(rng, 3, 4)], Box::new(move |tp, v| {
                let o = match which.as_str() {
                    "add" => tp.add(v[0], v[1])?,
                    "sub" => tp.sub(v[0], v[1])?,
                    _ => tp.mul(v[0], v[1])?,
                };
                project(tp, o, &r)
            }))
        }
        "div" => {
            let r = projector(rng, (1, 1));
            (
                vec![t(rng, 1, 1), away_from_zero(rng, 1, 1, 0.5, 2.0)],
                Box::new(move |tp, v| {
                    let o = tp.div(v[0], v[1])?;
                    project(tp, o, &r)
                }),
            )
        }
        "scale" => {
            let r = projector(rng, (3, 4));
            let c = rng.random_range(-3.0..3.0);
            (vec![t(rng, 3, 4)], Box::new(move |tp, v| {
                let o = tp.scale(v[0], c);
                project(tp, o, &r)
            }))
        }
        "mul_scalar" => {
            let r = projector(rng, (3, 4));
            (vec![t(rng, 3, 4), t(rng, 1, 1)], Box::new(move |tp, v| {
                let o = tp.mul_scalar(v[0], v[1])?;
                project(tp, o, &r)
            }))
        }
        "relu" => {
            let r = projector(rng, (3, 4));
            (vec![away_from_zero(rng, 3, 4, 0.05, 2.0)], Box::new(move |tp, v| {
                let o = tp.relu(v[0]);
                project(tp, o, &r)
            }))
        }
        "sqrt" => {
            let r = projector(rng, (3, 4));
            (vec![rand_tensor(rng, 3, 4, 0.5, 2.0)], Box::new(move |tp, v| {
                let o = tp.sqrt(v[0]);
                project(tp, o, &r)
            }))
        }
        "recip" => {
            let r = projector(rng, (3, 4));
            (vec![away_from_zero(rng, 3, 4, 0.5, 2.0)], Box::new(move |tp, v| {
                let o = tp.recip(v[0]);
                project(tp, o, &r)
            }))
        }
        "sum" => {
            let r = projector(rng, (1, 1));
            (vec![t(rng, 3, 4)], Box::new(move |tp, v| {
                let o = tp.sum(v[0]);
                project(tp, o, &r)
            }))
        }
        "mean_rows" => {
            let r = projector(rng, (1, 4));
            (vec![t(rng, 3, 4)], Box::new(move |tp, v| {
                let o = tp.mean_rows(v[0]);
                project(tp, o, &r)
            }))
        }
        "concat_cols" => {
            let r = projector(rng, (2, 5));
            (vec![t(rng, 2, 3), t(rng, 2, 2)], Box::new(move |tp, v| {
                let o = tp.concat_cols(&[v[0], v[1]])?;
                project(tp, o, &r)
            }))
        }
        "concat_rows" => {
            let r = projector(rng, (3, 3));
            (vec![t(rng, 2, 3), t(rng, 1, 3)], Box::new(move |tp, v| {
                let o = tp.concat_rows(&[v[0], v[1]])?;
                project(tp, o, &r)
            }))
        }
        "slice_cols" => {
            let r = projector(rng, (3, 3));
            (vec![t(rng, 3, 5)], Box::new(move |tp, v| {
                let o = tp.slice_cols(v[0], 1, 4)?;
                project(tp, o, &r)
            }))
        }
        "row" => {
            let r = projector(rng, (1, 4));
            (vec![t(rng, 3, 4)], Box::new(move |tp, v| {
                let o = tp.row(v[0], 1)?;
                project(tp, o, &r)
            }))
        }
        "element" => {
            let r = projector(rng, (1, 1));
            (vec![t(rng, 3, 4)], Box::new(move |tp, v| {
                let o = tp.element(v[0], 5)?;
                project(tp, o, &r)
            }))
        }
        "softmax_rows" => {
            let r = projector(rng, (3, 4));
            (vec![t(rng, 3, 4)], Box::new(move |tp, v| {
                let o = tp.softmax_rows(v[0]);
                project(tp, o, &r)
            }))
        }
        "cross_entropy" => {
            let label = rng.random_range(0..5);
            (vec![t(rng, 1, 5)], Box::new(move |tp, v| tp.cross_entropy(v[0], label)))
        }
        other => panic!("no case for {other}"),
    }
}

pub const PRIMITIVES: [&str; 22] = [
    "matmul",
    "matmul_t",
    "add_bias",
    "linear",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "mul_scalar",
    "relu",
    "sqrt",
    "recip",
    "sum",
    "mean_rows",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "row",
    "element",
    "softmax_rows",
    "cross_entropy",
];

pub fn check_primitive(name: &'static str, trials: u64) -> GradRow {
    let mut row = GradRow::new(name, trials);
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (xs, f) = primitive_case(name, &mut rng);
        let rep = grad_check_many(|tp, v| f(tp, v), &xs, GRAD_STEP).unwrap();
        row.record(rep.max_rel_error, 0.0);
    }
    row
}

fn attention_inputs(
    rng: &mut ChaCha8Rng,
    d: usize,
    heads: usize,
) -> (ParamStore, AttentionParams) {
    let mut store = ParamStore::new();
    let p = AttentionParams::register(&mut store, "a", d, heads, false, rng).unwrap();
    // Non-zero biases so their gradients are exercised.
    for id in p.ids() {
        let t = store.get_mut(id);
        if t.rows() == 1 {
            for v in t.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    (store, p)
}

/// Finite-difference check over the tensors not flagged `inert`. Flagged
/// tensors have an identically zero true gradient (a key bias only shifts
/// every score of a softmax row equally), so their analytic gradient is
/// compared against 0 instead of against rounding noise. Returns the worst
/// relative error and the largest inert gradient magnitude.
pub fn check_split<F>(f: F, xs: &[Tensor], inert: &[bool]) -> (f64, f64)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let live: Vec<Tensor> = xs
        .iter()
        .zip(inert)
        .filter(|(_, &z)| !z)
        .map(|(t, _)| t.clone())
        .collect();
    let rep = grad_check_many(
        |tp, v| {
            let mut it = v.iter();
            let all: Vec<Var> = xs
                .iter()
                .zip(inert)
                .map(|(t, &z)| if z { tp.constant(t.clone()) } else { *it.next().unwrap() })
                .collect();
            f(tp, &all)
        },
        &live,
        GRAD_STEP,
    )
    .unwrap();
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let inert_max = vars
        .iter()
        .zip(inert)
        .filter(|(_, &z)| z)
        .flat_map(|(&v, _)| tape.grad(v).into_data())
        .fold(0.0, |m: f64, g| m.max(g.abs()));
    (rep.max_rel_error, inert_max)
}

/// Multi-head cross-attention: query, tokens and all projections.
pub fn check_attention(trials: u64) -> GradRow {
    let mut row = GradRow::new("cross_attention", trials);
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, p) = attention_inputs(&mut rng, 8, 2);
        let r = projector(&mut rng, (1, 8));
        let mut xs = vec![rand_tensor(&mut rng, 1, 8, -1.0, 1.0), rand_tensor(&mut rng, 3, 8, -1.0, 1.0)];
        xs.extend(store.values());
        let mut inert = vec![false; xs.len()];
        inert[2 + p.bk.0] = true;
        let (w, z) = check_split(
            |tp, v| {
                let out = attention_var(tp, &v[2..], &p, v[0], v[1])?.output;
                project(tp, out, &r)
            },
            &xs,
            &inert,
        );
        row.record(w, z);
    }
    row
}

/// Both attention branches with their residual means.
pub fn check_cmsa(trials: u64) -> GradRow {
    let mut row = GradRow::new("cmsa_fuse", trials);
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = CmsaParams::register(&mut store, 8, 2, false, &mut rng).unwrap();
        let r1 = projector(&mut rng, (1, 8));
        let r2 = projector(&mut rng, (1, 8));
        let mut xs = vec![
            rand_tensor(&mut rng, 1, 8, -1.0, 1.0),
            rand_tensor(&mut rng, 2, 8, -1.0, 1.0),
            rand_tensor(&mut rng, 2, 8, -1.0, 1.0),
        ];
        xs.extend(store.values());
        let mut inert = vec![false; xs.len()];
        inert[3 + p.om.bk.0] = true;
        inert[3 + p.im.bk.0] = true;
        let (w, z) = check_split(
            |tp, v| {
                let (a, b) = cmsa_fuse_var(tp, &v[3..], &p, v[0], v[1], v[2])?;
                let la = project(tp, a, &r1)?;
                let lb = project(tp, b, &r2)?;
                tp.add(la, lb)
            },
            &xs,
            &inert,
        );
        row.record(w, z);
    }
    row
}

/// Smallest gap between the two lowest distance sums, and between any
/// centre distance and the retention cutoff, in units of the mean pairwise
/// distance. Small gaps mean a finite difference step could change the
/// selection.
pub fn selection_margin(points: &[Vec<f64>], t: f64) -> f64 {
    let n = points.len();
    let sums: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| dist(&points[i], &points[j])).sum())
        .collect();
    let mut sorted = sums.clone();
    sorted.sort_by(f64::total_cmp);
    let c = (0..n).min_by(|&a, &b| sums[a].total_cmp(&sums[b])).unwrap();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += dist(&points[i], &points[j]);
        }
    }
    let cutoff = t * 2.0 * total / (n as f64 * (n as f64 - 1.0));
    let mut margin = sorted[1] - sorted[0];
    for i in (0..n).filter(|&i| i != c) {
        margin = margin.min((dist(&points[c], &points[i]) - cutoff).abs());
    }
    margin / (cutoff / t)
}

/// Differentiable bag aggregation, with and without weight detachment.
pub fn check_smil(trials: u64) -> GradRow {
    let mut row = GradRow::new("smil", trials);
    let mut seed = 0u64;
    let mut done = 0;
    while done < trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        seed += 1;
        let n = rng.random_range(3..=6);
        let x = rand_tensor(&mut rng, n, 3, -2.0, 2.0);
        let points: Vec<Vec<f64>> = (0..n).map(|i| x.row_slice(i).to_vec()).collect();
        if selection_margin(&points, 1.5) < 1e-3 {
            row.resampled += 1;
            continue;
        }
        let r = projector(&mut rng, (1, 3));
        let rep = grad_check_many(
            |tp, v| {
                let (out, _) = aggregate_var(tp, v[0], 1.5, false)?;
                project(tp, out, &r)
            },
            std::slice::from_ref(&x),
            GRAD_STEP,
        )
        .unwrap();
        row.record(rep.max_rel_error, 0.0);
        done += 1;
    }
    row
}

/// With detached weights the gradient of `r . f'` is `r` on the central row,
/// `w_i r` on retained rows and zero elsewhere. Returns the largest absolute
/// deviation from that closed form.
pub fn smil_detached_deviation(trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=8);
        let x = rand_tensor(&mut rng, n, 3, -2.0, 2.0);
        let r = projector(&mut rng, (1, 3));
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (out, diag) = aggregate_var(&mut tape, xv, 1.5, true).unwrap();
        let l = project(&mut tape, out, &r).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(xv);
        let mut coef = vec![0.0; n];
        coef[diag.central_index] = 1.0;
        for &(i, w) in &diag.weights {
            coef[i] = w;
        }
        for i in 0..n {
            for c in 0..3 {
                worst = worst.max((g.get(i, c) - coef[i] * r.data()[c]).abs());
            }
        }
    }
    worst
}

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        dim: 8,
        heads: 2,
        raw_dims: RawDims {
            om: 4,
            im: 4,
            tem: 4,
        },
        seed,
        ..ModelConfig::default()
    }
}

pub fn tiny_record(rng: &mut ChaCha8Rng) -> PatientRecord {
    let tem = rand_tensor(rng, 3, 4, -2.0, 2.0);
    PatientRecord {
        id: "tiny".into(),
        label: rng.random_range(0..3),
        om: rand_tensor(rng, 2, 4, -2.0, 2.0),
        im: rand_tensor(rng, 2, 4, -2.0, 2.0),
        tem: Bag::from_tensor(tem).unwrap(),
    }
}

/// Whole-model check on the total weighted loss with respect to every
/// parameter; key biases are held to an exact zero as in [`check_split`].
/// A draw is rejected when any perturbation changes the SMIL central
/// instance, the retained set, or the sign of any ReLU input.
pub fn check_full_model(trials: u64) -> GradRow {
    let mut row = GradRow::new("full_model", trials);
    let mut seed = 0u64;
    let mut done = 0;
    while done < trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = CmusModel::new(tiny_config(seed)).unwrap();
        seed += 1;
        let rec = tiny_record(&mut rng);
        let params = model.params().values();
        // Loss plus every discrete choice the forward pass made.
        let eval = |xs: &[Tensor]| -> (f64, (usize, Vec<bool>, Vec<bool>)) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
            let (l, _) = model.loss_var(&mut tape, &vars, &rec).unwrap();
            let fv = model.forward_var(&mut tape, &vars, &rec).unwrap();
            let diag = fv.smil.unwrap();
            let value = tape.value(l).item();
            (value, (diag.central_index, diag.retained, tape.relu_pattern()))
        };
        let (_, choices) = eval(&params);
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
        let (l, _) = model.loss_var(&mut tape, &vars, &rec).unwrap();
        tape.backward(l).unwrap();
        let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

        let mut work = params.clone();
        let mut boundary = false;
        let (mut local, mut inert): (f64, f64) = (0.0, 0.0);
        'outer: for ti in 0..work.len() {
            if model.params().name(ParamId(ti)).ends_with(".bk") {
                inert = grads[ti].data().iter().fold(inert, |m, g| m.max(g.abs()));
                continue;
            }
            for ci in 0..work[ti].len() {
                let orig = work[ti].data()[ci];
                let mut same_piece = true;
                let mut at = |offset: f64| -> Result<f64> {
                    work[ti].data_mut()[ci] = orig + offset;
                    let (v, c) = eval(&work);
                    same_piece &= c == choices;
                    Ok(v)
                };
                let numeric = central_difference(&mut at, GRAD_STEP).unwrap();
                work[ti].data_mut()[ci] = orig;
                if !same_piece {
                    boundary = true;
                    break 'outer;
                }
                let a = grads[ti].data()[ci];
                let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                local = local.max(err);
            }
        }
        if boundary {
            row.resampled += 1;
            continue;
        }
        row.record(local, inert);
        done += 1;
    }
    row
}

pub fn gradient_suite(trials: u64) -> Vec<GradRow> {
    let mut rows: Vec<GradRow> = PRIMITIVES.iter().map(|&p| check_primitive(p, trials)).collect();
    rows.push(check_attention(trials));
    rows.push(check_cmsa(trials));
    rows.push(check_smil(trials));
    rows.push(check_full_model(trials));
    rows
}

#[derive(Clone, Debug, Default)]
pub struct GridResult {
    pub bags: usize,
    pub mismatches: usize,
    pub first_mismatch: Option<Vec<(i32, i32)>>,
    pub elapsed: Duration,
}

fn grid_points() -> Vec<(i32, i32)> {
    let mut p = Vec::with_capacity(49);
    for x in -3..=3 {
        for y in -3..=3 {
            p.push((x, y));
        }
    }
    p
}

fn compare_bag(pts: &[(i32, i32)], res: &mut GridResult) {
    let rows: Vec<Vec<f64>> = pts.iter().map(|&(x, y)| vec![x as f64, y as f64]).collect();
    let bag = Bag::new(&rows).unwrap();
    let (f, diag) = aggregate_bag(&bag, 1.5).unwrap();
    let o = smil_literal(&rows, 1.5);
    let same = diag.central_index == o.central
        && diag.retained == o.retained
        && diag.weights.len() == o.weights.len()
        && diag
            .weights
            .iter()
            .zip(&o.weights)
            .all(|(a, b)| a.0 == b.0 && a.1.to_bits() == b.1.to_bits())
        && f.iter().zip(&o.feature).all(|(a, b)| a.to_bits() == b.to_bits());
    res.bags += 1;
    if !same {
        res.mismatches += 1;
        res.first_mismatch.get_or_insert_with(|| pts.to_vec());
    }
}

/// Every ordered bag of up to `ordered_max` points and every multiset of
/// `ordered_max + 1 ..= n_max` points from the 7x7 integer grid.
pub fn smil_grid(ordered_max: usize, n_max: usize) -> GridResult {
    let start = Instant::now();
    let pts = grid_points();
    let mut res = GridResult::default();
    let mut idx: Vec<usize> = Vec::new();
    for n in 1..=ordered_max {
        idx.clear();
        idx.resize(n, 0);
        loop {
            let bag: Vec<(i32, i32)> = idx.iter().map(|&i| pts[i]).collect();
            compare_bag(&bag, &mut res);
            if !advance_ordered(&mut idx, pts.len()) {
                break;
            }
        }
    }
    for n in ordered_max + 1..=n_max {
        idx.clear();
        idx.resize(n, 0);
        loop {
            let bag: Vec<(i32, i32)> = idx.iter().map(|&i| pts[i]).collect();
            compare_bag(&bag, &mut res);
            if !advance_multiset(&mut idx, pts.len()) {
                break;
            }
        }
    }
    res.elapsed = start.elapsed();
    res
}

fn advance_ordered(idx: &mut [usize], base: usize) -> bool {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < base {
            return true;
        }
        idx[i] = 0;
    }
    false
}

/// Next non-decreasing index sequence.
fn advance_multiset(idx: &mut [usize], base: usize) -> bool {
    let n = idx.len();
    for i in (0..n).rev() {
        if idx[i] + 1 < base {
            let v = idx[i] + 1;
            for slot in &mut idx[i..] {
                *slot = v;
            }
            return true;
        }
    }
    false
}

#[derive(Clone, Debug, Default)]
pub struct AttentionInvariants {
    /// Largest `|sum of a head's weights - 1|`.
    pub weight_sum: f64,
    /// Largest output change when the key/value tokens are permuted.
    pub permutation: f64,
    /// Largest deviation from the literal per-head computation.
    pub oracle: f64,
    /// Zeroed CMSA parameters reproduce the token means bit for bit.
    pub zero_passthrough: bool,
}

pub fn attention_invariants(trials: u64) -> AttentionInvariants {
    use cmus_core::cmsa::{cmsa_fuse, cross_attention_heads, ModalityFeature, ModalityId};

    use super::oracles::{attention_literal, column_mean, AttnWeights};

    let mut out = AttentionInvariants {
        zero_passthrough: true,
        ..Default::default()
    };
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = [1, 2, 4][seed as usize % 3];
        let d = 8;
        let len = rng.random_range(1..=6);
        let (store, p) = attention_inputs(&mut rng, d, heads);
        let query = rand_tensor(&mut rng, 1, d, -2.0, 2.0);
        let tokens = rand_tensor(&mut rng, len, d, -2.0, 2.0);
        let qf = ModalityFeature::new(ModalityId::Tem, query.clone()).unwrap();
        let kf = ModalityFeature::new(ModalityId::Om, tokens.clone()).unwrap();
        let a = cross_attention_heads(&qf, &kf, &store, &p).unwrap();
        for w in &a.weights {
            out.weight_sum = out.weight_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        }

        let mut perm: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| tokens.row_slice(i).to_vec()).collect();
        let pf = ModalityFeature::new(ModalityId::Om, Tensor::from_rows(&rows).unwrap()).unwrap();
        let b = cross_attention_heads(&qf, &pf, &store, &p).unwrap();
        for (x, y) in a.output.iter().zip(&b.output) {
            out.permutation = out.permutation.max((x - y).abs());
        }

        let token_rows: Vec<Vec<f64>> = (0..len).map(|i| tokens.row_slice(i).to_vec()).collect();
        let w = AttnWeights {
            wq: store.get(p.wq).data(),
            bq: store.get(p.bq).data(),
            wk: store.get(p.wk).data(),
            bk: store.get(p.bk).data(),
            wv: store.get(p.wv).data(),
            bv: store.get(p.bv).data(),
        };
        let (lit, lit_w) = attention_literal(query.data(), &token_rows, &w, heads);
        for (x, y) in a.output.iter().zip(&lit) {
            out.oracle = out.oracle.max((x - y).abs());
        }
        for (hw, lw) in a.weights.iter().zip(&lit_w) {
            for (x, y) in hw.iter().zip(lw) {
                out.oracle = out.oracle.max((x - y).abs());
            }
        }

        let mut zstore = ParamStore::new();
        let cp = CmsaParams::register(&mut zstore, d, heads, false, &mut rng).unwrap();
        cp.om.zero(&mut zstore);
        cp.im.zero(&mut zstore);
        let im_rows: Vec<Vec<f64>> = (0..len + 1)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let imf = ModalityFeature::new(ModalityId::Im, Tensor::from_rows(&im_rows).unwrap()).unwrap();
        let (fo, fi) = cmsa_fuse(query.data(), &kf, &imf, &zstore, &cp).unwrap();
        out.zero_passthrough &= fo == column_mean(&token_rows) && fi == column_mean(&im_rows);
    }
    out
}

/// Largest gap between `roc_auc_macro` on two-class problems and the
/// concordant-pair estimator, over every labelling (both classes present) of
/// every record count from 2 to `max_records`. Scores are drawn from five
/// levels so ties are common. Returns the number of instances and the gap.
pub fn auc_sweep(max_records: usize) -> (usize, f64) {
    use cmus_core::metrics::roc_auc_macro;

    use super::oracles::concordant_auc;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for n in 2..=max_records {
        for mask in 1..(1u32 << n) - 1 {
            let truths: Vec<usize> = (0..n).map(|i| (mask >> i & 1) as usize).collect();
            let pos: Vec<bool> = truths.iter().map(|&t| t == 1).collect();
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
            let rows: Vec<Vec<f64>> = s.iter().map(|&x| vec![1.0 - x, x]).collect();
            let auc = roc_auc_macro(&truths, &rows).unwrap().macro_auc;
            worst = worst.max((auc - concordant_auc(&pos, &s)).abs());
            cases += 1;
        }
    }
    (cases, worst)
}
