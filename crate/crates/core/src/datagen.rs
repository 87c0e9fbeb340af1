//! Synthetic multi-modal patients and the on-disk manifest format.
//!
//! Every modality draws its tokens from isotropic Gaussian blobs around
//! per-class means. A modality's separability `s` is the distance between
//! class means in units of the token noise standard deviation; `s = 0` makes
//! the modality pure noise. TEM instances are drawn around a per-patient
//! mean that sits `patient_spread` away from the class mean (zero by
//! default), and a bag may carry one displaced outlier instance.
//!
//! # Manifest layout
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/tensors/00000.om.f32
//! <dir>/tensors/00000.im.f32
//! <dir>/tensors/00000.tem00.f32 ...
//! ```
//!
//! `manifest.json` is
//! `{"version":1,"classes":[..],"patients":[{"id","label","om":{"shape","file"},"im":{..},"tem":[{..},..]}]}`
//! with `file` relative to the manifest directory. Tensor files are raw
//! little-endian IEEE-754 binary32, row-major, no header.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{CmusError, Result};
use crate::model::{ModalityId, PatientRecord, RawDims};
use crate::smil::Bag;

/// How class means are laid out in each modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassStructure {
    /// Equidistant means: every pair of classes is `s` apart.
    Isotropic,
    /// Modality OM separates class 0 from the rest, IM class 1, TEM class 2;
    /// the remaining classes share a mean in that modality.
    Complementary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    pub om: f64,
    pub im: f64,
    pub tem: f64,
}

impl Separability {
    pub fn uniform(s: f64) -> Self {
        Separability { om: s, im: s, tem: s }
    }

    pub fn get(&self, m: ModalityId) -> f64 {
        match m {
            ModalityId::Om => self.om,
            ModalityId::Im => self.im,
            ModalityId::Tem => self.tem,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub class_names: Vec<String>,
    pub patients_per_class: usize,
    pub raw_dims: RawDims,
    /// Tokens per patient for OM and IM.
    pub tokens: usize,
    pub bag_min: usize,
    pub bag_max: usize,
    pub separability: Separability,
    pub structure: ClassStructure,
    /// Standard deviation of the patient's TEM mean around the class mean.
    pub patient_spread: f64,
    /// Standard deviation of TEM instances around the patient mean; the unit
    /// in which TEM separability is measured.
    pub instance_spread: f64,
    pub outlier_rate: f64,
    pub outlier_scale: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::disease()
    }
}

impl TaskSpec {
    /// Three-class disease task: 30 patients per class, 4 OM/IM tokens,
    /// 6 to 12 TEM instances (mean 9), separability 2.5 everywhere.
    pub fn disease() -> Self {
        TaskSpec {
            class_names: vec!["IgAN".into(), "MN".into(), "LN".into()],
            patients_per_class: 30,
            raw_dims: RawDims {
                om: 16,
                im: 16,
                tem: 16,
            },
            tokens: 4,
            bag_min: 6,
            bag_max: 12,
            separability: Separability::uniform(2.5),
            structure: ClassStructure::Isotropic,
            patient_spread: 0.0,
            instance_spread: 1.0,
            outlier_rate: 0.0,
            outlier_scale: 10.0,
            seed: 0,
        }
    }

    /// Each modality carries information about a different class only.
    /// OM and IM average four tokens and TEM about nine instances, so TEM gets
    /// the lower separability to keep the three sources comparably useful.
    pub fn complementary() -> Self {
        TaskSpec {
            patients_per_class: 60,
            separability: Separability {
                om: 2.0,
                im: 2.0,
                tem: 1.5,
            },
            structure: ClassStructure::Complementary,
            ..TaskSpec::disease()
        }
    }

    /// Three-stage staging task, harder than the disease task.
    pub fn mn_staging() -> Self {
        TaskSpec {
            class_names: vec!["MN-I".into(), "MN-II".into(), "MN-III".into()],
            separability: Separability::uniform(1.5),
            ..TaskSpec::disease()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "disease" | "default" => Ok(TaskSpec::disease()),
            "complementary" => Ok(TaskSpec::complementary()),
            "mn_staging" => Ok(TaskSpec::mn_staging()),
            other => Err(CmusError::Config(format!("unknown task preset '{other}'"))),
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_count();
        let bad = |m: String| Err(CmusError::Config(m));
        if c < 2 {
            return bad(format!("need at least two classes, got {c}"));
        }
        if self.patients_per_class == 0 {
            return bad("patients_per_class must be positive".into());
        }
        if self.tokens == 0 {
            return bad("tokens must be positive".into());
        }
        if self.bag_min == 0 || self.bag_max < self.bag_min {
            return bad(format!(
                "bag size range [{}, {}] is invalid",
                self.bag_min, self.bag_max
            ));
        }
        for m in [ModalityId::Om, ModalityId::Im, ModalityId::Tem] {
            let s = self.separability.get(m);
            if !(s >= 0.0) || !s.is_finite() {
                return bad(format!("{m} separability {s} must be >= 0"));
            }
            let raw = self.raw_dims.get(m);
            if raw < c {
                return bad(format!("{m} raw dimension {raw} is below the class count {c}"));
            }
        }
        if self.structure == ClassStructure::Complementary && c != 3 {
            return bad("the complementary structure needs exactly three classes".into());
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return bad(format!("outlier_rate {} outside [0, 1]", self.outlier_rate));
        }
        if !(self.outlier_scale > 1.0) {
            return bad(format!("outlier_scale {} must exceed 1", self.outlier_scale));
        }
        if !(self.instance_spread > 0.0) || !(self.patient_spread >= 0.0) {
            return bad("instance_spread must be positive and patient_spread non-negative".into());
        }
        Ok(())
    }
}

/// Records plus class names.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub records: Vec<PatientRecord>,
}

impl Dataset {
    pub fn raw_dims(&self) -> Option<RawDims> {
        self.records.first().map(|r| RawDims {
            om: r.om.cols(),
            im: r.im.cols(),
            tem: r.tem.dim(),
        })
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `count` orthonormal directions in `dim` dimensions (Gram-Schmidt).
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = normal_vec(rng, dim);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn class_means(
    rng: &mut ChaCha8Rng,
    spec: &TaskSpec,
    modality: ModalityId,
    index: usize,
) -> Vec<Vec<f64>> {
    let c = spec.class_count();
    let dim = spec.raw_dims.get(modality);
    let s = spec.separability.get(modality);
    match spec.structure {
        ClassStructure::Isotropic => orthonormal(rng, c, dim)
            .into_iter()
            .map(|u| u.into_iter().map(|x| x * s / std::f64::consts::SQRT_2).collect())
            .collect(),
        ClassStructure::Complementary => {
            let u = orthonormal(rng, 1, dim).remove(0);
            let target = index % c;
            (0..c)
                .map(|k| {
                    if k == target {
                        u.iter().map(|x| x * s).collect()
                    } else {
                        vec![0.0; dim]
                    }
                })
                .collect()
        }
    }
}

fn noisy(rng: &mut ChaCha8Rng, mean: &[f64], sd: f64) -> Vec<f64> {
    mean.iter()
        .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Deterministic synthetic dataset; records are grouped by class.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let om_means = class_means(&mut rng, spec, ModalityId::Om, 0);
    let im_means = class_means(&mut rng, spec, ModalityId::Im, 1);
    let tem_means = class_means(&mut rng, spec, ModalityId::Tem, 2);
    let tem_dim = spec.raw_dims.tem;
    // Expected distance of an instance from its patient mean.
    let dispersion = spec.instance_spread * (tem_dim as f64).sqrt();

    let mut records = Vec::with_capacity(spec.class_count() * spec.patients_per_class);
    for label in 0..spec.class_count() {
        for _ in 0..spec.patients_per_class {
            let id = format!("p{:04}", records.len());
            let tokens = |rng: &mut ChaCha8Rng, mean: &[f64]| -> Result<Tensor> {
                let rows: Vec<Vec<f64>> = (0..spec.tokens).map(|_| noisy(rng, mean, 1.0)).collect();
                Tensor::from_rows(&rows)
            };
            let om = tokens(&mut rng, &om_means[label])?;
            let im = tokens(&mut rng, &im_means[label])?;

            let patient_mean = noisy(&mut rng, &tem_means[label], spec.patient_spread);
            let n = rng.random_range(spec.bag_min..=spec.bag_max);
            let mut instances: Vec<Vec<f64>> = (0..n)
                .map(|_| noisy(&mut rng, &patient_mean, spec.instance_spread))
                .collect();
            if rng.random::<f64>() < spec.outlier_rate {
                let which = rng.random_range(0..n);
                let dir = orthonormal(&mut rng, 1, tem_dim).remove(0);
                let shift = spec.outlier_scale * dispersion;
                instances[which]
                    .iter_mut()
                    .zip(&dir)
                    .for_each(|(x, d)| *x += shift * d);
            }
            records.push(PatientRecord {
                id,
                label,
                om,
                im,
                tem: Bag::new(&instances)?,
            });
        }
    }
    Ok(Dataset {
        classes: spec.class_names.clone(),
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorRef {
    shape: Vec<usize>,
    file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestPatient {
    id: String,
    label: usize,
    om: TensorRef,
    im: TensorRef,
    tem: Vec<TensorRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    classes: Vec<String>,
    patients: Vec<ManifestPatient>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const TENSOR_DIR: &str = "tensors";

fn write_f32(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| CmusError::io(path, e))
}

/// Writes `manifest.json` and one float32 file per tensor under `dir`.
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<()> {
    let tensor_dir = dir.join(TENSOR_DIR);
    std::fs::create_dir_all(&tensor_dir).map_err(|e| CmusError::io(&tensor_dir, e))?;
    let mut patients = Vec::with_capacity(dataset.records.len());
    for (idx, rec) in dataset.records.iter().enumerate() {
        let put = |name: String, t: &[f64], shape: Vec<usize>| -> Result<TensorRef> {
            let rel = format!("{TENSOR_DIR}/{name}");
            write_f32(&dir.join(&rel), t)?;
            Ok(TensorRef { shape, file: rel })
        };
        let om = put(format!("{idx:05}.om.f32"), rec.om.data(), vec![rec.om.rows(), rec.om.cols()])?;
        let im = put(format!("{idx:05}.im.f32"), rec.im.data(), vec![rec.im.rows(), rec.im.cols()])?;
        let mut tem = Vec::with_capacity(rec.tem.len());
        for j in 0..rec.tem.len() {
            let inst = rec.tem.instance(j);
            tem.push(put(format!("{idx:05}.tem{j:02}.f32"), inst, vec![inst.len()])?);
        }
        patients.push(ManifestPatient {
            id: rec.id.clone(),
            label: rec.label,
            om,
            im,
            tem,
        });
    }
    let manifest = Manifest {
        version: 1,
        classes: dataset.classes.clone(),
        patients,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CmusError::InvalidValue(format!("manifest serialization: {e}")))?;
    std::fs::write(&path, text).map_err(|e| CmusError::io(&path, e))
}

fn read_f32(dir: &Path, r: &TensorRef) -> Result<Vec<f64>> {
    let path: PathBuf = dir.join(&r.file);
    if !path.is_file() {
        return Err(CmusError::MissingFile(path));
    }
    let bytes = std::fs::read(&path).map_err(|e| CmusError::io(&path, e))?;
    let expected: usize = r.shape.iter().product();
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(CmusError::ShapeMismatch {
            path,
            expected,
            found: bytes.len() / 4,
        });
    }
    let mut out = Vec::with_capacity(expected);
    for (index, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(CmusError::NonFinite { path, index });
        }
        out.push(v as f64);
    }
    Ok(out)
}

/// Loads a dataset written by [`write_manifest`] (or by any tool following
/// the same layout).
pub fn read_manifest(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CmusError::io(&path, e))?;
    let malformed = |message: String| CmusError::MalformedManifest {
        path: path.clone(),
        message,
    };
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if manifest.version != 1 {
        return Err(malformed(format!("unsupported version {}", manifest.version)));
    }
    let classes = manifest.classes.len();
    let mut records = Vec::with_capacity(manifest.patients.len());
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut ids = std::collections::HashSet::new();
    for p in &manifest.patients {
        if !ids.insert(p.id.as_str()) {
            return Err(malformed(format!("duplicate patient id {}", p.id)));
        }
        if p.label >= classes {
            return Err(malformed(format!(
                "patient {} has label {} but only {classes} classes",
                p.id, p.label
            )));
        }
        let matrix = |r: &TensorRef| -> Result<Tensor> {
            if r.shape.len() != 2 || r.shape.contains(&0) {
                return Err(malformed(format!(
                    "patient {}: {} must have a two-dimensional shape",
                    p.id, r.file
                )));
            }
            Tensor::new(r.shape.clone(), read_f32(dir, r)?)
        };
        let om = matrix(&p.om)?;
        let im = matrix(&p.im)?;
        if p.tem.is_empty() {
            return Err(malformed(format!("patient {} has an empty TEM bag", p.id)));
        }
        let mut instances = Vec::with_capacity(p.tem.len());
        for r in &p.tem {
            if r.shape.len() != 1 || r.shape[0] == 0 {
                return Err(malformed(format!(
                    "patient {}: TEM instance {} must be a non-empty vector",
                    p.id, r.file
                )));
            }
            instances.push(read_f32(dir, r)?);
        }
        let tem = Bag::new(&instances).map_err(|e| malformed(format!("patient {}: {e}", p.id)))?;
        let these = (om.cols(), im.cols(), tem.dim());
        match dims {
            None => dims = Some(these),
            Some(d) if d != these => {
                return Err(malformed(format!(
                    "patient {} has feature widths {these:?}, earlier patients {d:?}",
                    p.id
                )))
            }
            _ => {}
        }
        records.push(PatientRecord {
            id: p.id.clone(),
            label: p.label,
            om,
            im,
            tem,
        });
    }
    Ok(Dataset {
        classes: manifest.classes,
        records,
    })
}
