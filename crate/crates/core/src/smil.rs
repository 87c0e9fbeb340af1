//! Sparse multi-instance aggregation of a bag of instance features.
//!
//! The bag is reduced to one vector in four steps: pick the central instance
//! (minimum summed Euclidean distance to the others), compute the mean
//! pairwise distance `D̄`, drop every instance farther than `t·D̄` from the
//! centre, and add the survivors to the centre with normalized
//! inverse-distance weights.
//!
//! Indices are 0-based throughout.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{CmusError, Result};

pub const DEFAULT_THRESHOLD: f64 = 1.5;

/// Distances below this are clamped before inversion.
pub const DISTANCE_EPSILON: f64 = 1e-8;

/// Ordered instance features of one patient, stored as an `n x d` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    instances: Tensor,
}

impl Bag {
    pub fn new(instances: &[Vec<f64>]) -> Result<Self> {
        if instances.is_empty() {
            return Err(CmusError::Contract("a bag needs at least one instance".into()));
        }
        Ok(Bag {
            instances: Tensor::from_rows(instances)?,
        })
    }

    pub fn from_tensor(instances: Tensor) -> Result<Self> {
        if instances.shape().len() != 2 {
            return Err(CmusError::Dimension(format!(
                "bag tensor must be n x d, got {:?}",
                instances.shape()
            )));
        }
        Ok(Bag { instances })
    }

    pub fn len(&self) -> usize {
        self.instances.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.instances.cols()
    }

    pub fn instance(&self, i: usize) -> &[f64] {
        self.instances.row_slice(i)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.instances
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmilDiagnostics {
    pub central_index: usize,
    pub mean_distance: f64,
    pub retained: Vec<bool>,
    /// `(instance index, weight)` for each retained non-central instance.
    pub weights: Vec<(usize, f64)>,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |s, (x, y)| s + (x - y) * (x - y))
        .sqrt()
}

/// Symmetric `n x n` matrix of Euclidean distances between instances.
pub fn pairwise_distances(bag: &Bag) -> Tensor {
    distances_of(&bag.instances)
}

fn distances_of(rows: &Tensor) -> Tensor {
    let n = rows.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(rows.row_slice(i), rows.row_slice(j));
            out.data_mut()[i * n + j] = d;
            out.data_mut()[j * n + i] = d;
        }
    }
    out
}

/// Central index (lowest index on ties) and mean pairwise distance.
pub fn central_and_mean(dist: &Tensor) -> (usize, f64) {
    let n = dist.rows();
    let mut central = 0;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let s = dist.row_slice(i).iter().fold(0.0, |acc, v| acc + v);
        if s < best {
            best = s;
            central = i;
        }
    }
    if n < 2 {
        return (central, 0.0);
    }
    let mut total = 0.0;
    for i in 0..n - 1 {
        for j in i + 1..n {
            total += dist.get(i, j);
        }
    }
    let nf = n as f64;
    (central, 2.0 / (nf * (nf - 1.0)) * total)
}

struct Selection {
    central: usize,
    mean_distance: f64,
    retained: Vec<bool>,
    /// Retained non-central indices with their distance to the centre.
    members: Vec<(usize, f64)>,
}

fn select(dist: &Tensor, threshold: f64) -> Selection {
    let n = dist.rows();
    let (central, mean_distance) = central_and_mean(dist);
    let cutoff = threshold * mean_distance;
    let mut retained = vec![false; n];
    retained[central] = true;
    let mut members = Vec::new();
    for i in 0..n {
        if i == central {
            continue;
        }
        let d = dist.get(central, i);
        if d <= cutoff {
            retained[i] = true;
            members.push((i, d));
        }
    }
    Selection {
        central,
        mean_distance,
        retained,
        members,
    }
}

/// Normalized `1 / max(d, eps)` weights; uniform if every distance is below eps.
fn inverse_distance_weights(distances: &[f64]) -> Vec<f64> {
    if distances.iter().all(|&d| d < DISTANCE_EPSILON) {
        let m = distances.len() as f64;
        return vec![1.0 / m; distances.len()];
    }
    let inv: Vec<f64> = distances
        .iter()
        .map(|&d| 1.0 / d.max(DISTANCE_EPSILON))
        .collect();
    let total = inv.iter().fold(0.0, |s, v| s + v);
    inv.into_iter().map(|v| v / total).collect()
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(CmusError::Contract(format!(
            "threshold {threshold} must be positive"
        )));
    }
    Ok(())
}

/// Aggregates `bag` into a single feature vector.
pub fn aggregate_bag(bag: &Bag, threshold: f64) -> Result<(Vec<f64>, SmilDiagnostics)> {
    check_threshold(threshold)?;
    let dist = pairwise_distances(bag);
    let sel = select(&dist, threshold);
    let dists: Vec<f64> = sel.members.iter().map(|&(_, d)| d).collect();
    let mut out = bag.instance(sel.central).to_vec();
    let mut weights = Vec::with_capacity(dists.len());
    if !dists.is_empty() {
        for (&(i, _), w) in sel.members.iter().zip(inverse_distance_weights(&dists)) {
            for (o, x) in out.iter_mut().zip(bag.instance(i)) {
                *o += w * x;
            }
            weights.push((i, w));
        }
    }
    Ok((
        out,
        SmilDiagnostics {
            central_index: sel.central,
            mean_distance: sel.mean_distance,
            retained: sel.retained,
            weights,
        },
    ))
}

/// Differentiable aggregation of the rows of `instances` (`n x d`).
///
/// The central index and retained set are fixed from the forward values.
/// Gradients flow through the weighted sum and, unless `detach_weights` is
/// set, through the weight normalization as well.
pub fn aggregate_var(
    tape: &mut Tape,
    instances: Var,
    threshold: f64,
    detach_weights: bool,
) -> Result<(Var, SmilDiagnostics)> {
    check_threshold(threshold)?;
    let dist = distances_of(tape.value(instances));
    let sel = select(&dist, threshold);
    let centre = tape.row(instances, sel.central)?;
    let mut diag = SmilDiagnostics {
        central_index: sel.central,
        mean_distance: sel.mean_distance,
        retained: sel.retained,
        weights: Vec::new(),
    };
    if sel.members.is_empty() {
        return Ok((centre, diag));
    }

    let rows: Vec<Var> = sel
        .members
        .iter()
        .map(|&(i, _)| tape.row(instances, i))
        .collect::<Result<_>>()?;
    let all_tiny = sel.members.iter().all(|&(_, d)| d < DISTANCE_EPSILON);

    let weights: Vec<Var> = if detach_weights || all_tiny {
        let dists: Vec<f64> = sel.members.iter().map(|&(_, d)| d).collect();
        inverse_distance_weights(&dists)
            .into_iter()
            .map(|w| tape.constant(Tensor::scalar(w)))
            .collect()
    } else {
        let mut inv = Vec::with_capacity(rows.len());
        for (&row, &(_, d)) in rows.iter().zip(&sel.members) {
            if d < DISTANCE_EPSILON {
                inv.push(tape.constant(Tensor::scalar(1.0 / DISTANCE_EPSILON)));
            } else {
                let diff = tape.sub(centre, row)?;
                let sq = tape.mul(diff, diff)?;
                let s = tape.sum(sq);
                let dv = tape.sqrt(s);
                inv.push(tape.recip(dv));
            }
        }
        let mut total = inv[0];
        for &v in &inv[1..] {
            total = tape.add(total, v)?;
        }
        inv.iter()
            .map(|&v| tape.div(v, total))
            .collect::<Result<_>>()?
    };

    let mut out = centre;
    for ((&row, &w), &(i, _)) in rows.iter().zip(&weights).zip(&sel.members) {
        let scaled = tape.mul_scalar(row, w)?;
        out = tape.add(out, scaled)?;
        diag.weights.push((i, tape.value(w).item()));
    }
    Ok((out, diag))
}
