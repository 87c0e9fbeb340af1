//! The end-to-end classifier: per-modality encoders, bag aggregation,
//! cross-modal fusion, a two-layer classifier over the fused vector and one
//! auxiliary linear head per modality feeding the weighted loss.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::cmsa::ModalityId;
use crate::cmsa::{
    attention_var, fusion_variant_var, AttentionParams, FusionInputs, FusionParams, FusionVariant,
};
use crate::diffcore::{
    adam_step, cosine_lr, xavier_uniform, AdamConfig, LrSchedule, OptimizerState, ParamId,
    ParamStore, Tape, Tensor, Var,
};
use crate::error::{CmusError, Result};
use crate::smil::{self, Bag, SmilDiagnostics};

/// `(alpha, beta, gamma)` for the OM, IM and TEM auxiliary losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub om: f64,
    pub im: f64,
    pub tem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            om: 0.3,
            im: 0.5,
            tem: 0.2,
        }
    }
}

impl LossWeights {
    pub fn new(om: f64, im: f64, tem: f64) -> Self {
        LossWeights { om, im, tem }
    }

    pub fn get(&self, m: ModalityId) -> f64 {
        match m {
            ModalityId::Om => self.om,
            ModalityId::Im => self.im,
            ModalityId::Tem => self.tem,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.om, self.im, self.tem];
        if ws.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(CmusError::Config(format!(
                "loss weights {ws:?} must be non-negative"
            )));
        }
        let total = self.om + self.im + self.tem;
        if (total - 1.0).abs() > 1e-9 {
            return Err(CmusError::Config(format!(
                "loss weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Which modalities a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask {
    pub om: bool,
    pub im: bool,
    pub tem: bool,
}

impl Default for ModalityMask {
    fn default() -> Self {
        ModalityMask::ALL
    }
}

impl ModalityMask {
    pub const ALL: ModalityMask = ModalityMask {
        om: true,
        im: true,
        tem: true,
    };

    pub fn only(modalities: &[ModalityId]) -> Self {
        let mut m = ModalityMask {
            om: false,
            im: false,
            tem: false,
        };
        for &id in modalities {
            match id {
                ModalityId::Om => m.om = true,
                ModalityId::Im => m.im = true,
                ModalityId::Tem => m.tem = true,
            }
        }
        m
    }

    pub fn contains(&self, m: ModalityId) -> bool {
        match m {
            ModalityId::Om => self.om,
            ModalityId::Im => self.im,
            ModalityId::Tem => self.tem,
        }
    }

    /// Active modalities in fusion (OM, TEM, IM) order.
    pub fn active(&self) -> Vec<ModalityId> {
        ModalityId::FUSION_ORDER
            .into_iter()
            .filter(|&m| self.contains(m))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.active().len()
    }

    /// The seven non-empty subsets, singletons first.
    pub fn all_combinations() -> Vec<ModalityMask> {
        use ModalityId::*;
        [
            vec![Om],
            vec![Im],
            vec![Tem],
            vec![Om, Im],
            vec![Om, Tem],
            vec![Im, Tem],
            vec![Om, Im, Tem],
        ]
        .iter()
        .map(|s| ModalityMask::only(s))
        .collect()
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [ModalityId::Om, ModalityId::Im, ModalityId::Tem]
            .into_iter()
            .filter(|&m| self.contains(m))
            .map(|m| m.as_str())
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for ModalityMask {
    type Err = CmusError;

    fn from_str(s: &str) -> Result<Self> {
        let ids = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(ModalityId::from_str)
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(CmusError::Config("modality mask must not be empty".into()));
        }
        Ok(ModalityMask::only(&ids))
    }
}

/// Raw input feature width per modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDims {
    pub om: usize,
    pub im: usize,
    pub tem: usize,
}

impl RawDims {
    pub fn get(&self, m: ModalityId) -> usize {
        match m {
            ModalityId::Om => self.om,
            ModalityId::Im => self.im,
            ModalityId::Tem => self.tem,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub heads: usize,
    pub threshold: f64,
    pub loss_weights: LossWeights,
    /// When false the objective is the fusion loss alone.
    pub weighted_loss: bool,
    /// When false the bag is mean-pooled instead of SMIL-aggregated.
    pub smil: bool,
    pub fusion: FusionVariant,
    pub modalities: ModalityMask,
    pub raw_dims: RawDims,
    pub detach_weights: bool,
    pub output_projection: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 3,
            dim: 64,
            heads: 4,
            threshold: smil::DEFAULT_THRESHOLD,
            loss_weights: LossWeights::default(),
            weighted_loss: true,
            smil: true,
            fusion: FusionVariant::Cmsa,
            modalities: ModalityMask::ALL,
            raw_dims: RawDims {
                om: 16,
                im: 16,
                tem: 16,
            },
            detach_weights: false,
            output_projection: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CmusError::Config("need at least two classes".into()));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(CmusError::Config(format!(
                "dimension {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(self.threshold > 0.0) {
            return Err(CmusError::Config(format!(
                "SMIL threshold {} must be positive",
                self.threshold
            )));
        }
        if self.weighted_loss {
            self.loss_weights.validate()?;
        }
        let n = self.modalities.count();
        if n == 0 {
            return Err(CmusError::Config("modality mask must not be empty".into()));
        }
        if n < 3 && !matches!(self.fusion, FusionVariant::None | FusionVariant::Cmsa) {
            return Err(CmusError::Config(format!(
                "fusion variant {} needs all three modalities",
                self.fusion
            )));
        }
        for m in self.modalities.active() {
            if self.raw_dims.get(m) == 0 {
                return Err(CmusError::Config(format!("{m} raw dimension is zero")));
            }
        }
        Ok(())
    }
}

/// One patient: OM and IM token matrices (`L x raw`) and a TEM bag.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub label: usize,
    pub om: Tensor,
    pub im: Tensor,
    pub tem: Bag,
}

impl PatientRecord {
    pub fn raw(&self, m: ModalityId) -> &Tensor {
        match m {
            ModalityId::Om => &self.om,
            ModalityId::Im => &self.im,
            ModalityId::Tem => self.tem.as_tensor(),
        }
    }
}

/// Two affine layers with a rectifier in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            w1: store.register(format!("{prefix}.w1"), xavier_uniform(input, hidden, rng))?,
            b1: store.register(format!("{prefix}.b1"), Tensor::zeros(&[1, hidden]))?,
            w2: store.register(format!("{prefix}.w2"), xavier_uniform(hidden, output, rng))?,
            b2: store.register(format!("{prefix}.b2"), Tensor::zeros(&[1, output]))?,
        })
    }

    fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        let h = tape.linear(x, bound[self.w1.0], bound[self.b1.0])?;
        let h = tape.relu(h);
        tape.linear(h, bound[self.w2.0], bound[self.b2.0])
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Encoder {
    Identity,
    Mlp(Mlp),
}

#[derive(Clone, Debug, PartialEq)]
enum FusionHead {
    /// All three modalities.
    Full(FusionParams),
    /// TEM plus one coarse modality; `branch` is the CMSA branch when the
    /// configured variant is CMSA, otherwise features are concatenated.
    TemPair {
        other: ModalityId,
        branch: Option<AttentionParams>,
    },
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct LinearHead {
    w: ParamId,
    b: ParamId,
}

/// Learnable model plus the structural metadata that maps parameters to
/// submodules.
#[derive(Clone, Debug)]
pub struct CmusModel {
    config: ModelConfig,
    params: ParamStore,
    encoders: Vec<(ModalityId, Encoder)>,
    fusion: FusionHead,
    classifier: Mlp,
    aux: Vec<(ModalityId, LinearHead)>,
}

/// Differentiable forward outputs.
pub struct ForwardVars {
    pub logits: Var,
    pub aux: Vec<(ModalityId, Var)>,
    pub fused: Var,
    pub smil: Option<SmilDiagnostics>,
}

/// Detached forward outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub aux_logits: Vec<(ModalityId, Vec<f64>)>,
    pub fused: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub total: f64,
    pub fusion: f64,
    pub om: Option<f64>,
    pub im: Option<f64>,
    pub tem: Option<f64>,
}

impl CmusModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let active = config.modalities.active();

        let mut encoders = Vec::with_capacity(active.len());
        for &m in &active {
            let raw = config.raw_dims.get(m);
            let enc = if raw == d {
                Encoder::Identity
            } else {
                Encoder::Mlp(Mlp::register(
                    &mut store,
                    &format!("encoder.{}", m.as_str()),
                    raw,
                    d,
                    d,
                    &mut rng,
                )?)
            };
            encoders.push((m, enc));
        }

        let has_tem = config.modalities.tem;
        let fusion = match active.len() {
            3 => FusionHead::Full(FusionParams::register(
                config.fusion,
                &mut store,
                d,
                config.heads,
                config.output_projection,
                &mut rng,
            )?),
            2 if has_tem => {
                let other = active
                    .iter()
                    .copied()
                    .find(|&m| m != ModalityId::Tem)
                    .expect("two active modalities");
                let branch = if config.fusion == FusionVariant::Cmsa {
                    Some(AttentionParams::register(
                        &mut store,
                        &format!("cmsa.{}", other.as_str()),
                        d,
                        config.heads,
                        config.output_projection,
                        &mut rng,
                    )?)
                } else {
                    None
                };
                FusionHead::TemPair { other, branch }
            }
            _ => FusionHead::Concat,
        };

        let fused_dim = active.len() * d;
        let classifier = Mlp::register(
            &mut store,
            "classifier",
            fused_dim,
            d,
            config.num_classes,
            &mut rng,
        )?;

        let mut aux = Vec::new();
        if config.weighted_loss {
            for &m in &active {
                let w = store.register(
                    format!("aux.{}.w", m.as_str()),
                    xavier_uniform(d, config.num_classes, &mut rng),
                )?;
                let b = store.register(
                    format!("aux.{}.b", m.as_str()),
                    Tensor::zeros(&[1, config.num_classes]),
                )?;
                aux.push((m, LinearHead { w, b }));
            }
        }

        Ok(CmusModel {
            config,
            params: store,
            encoders,
            fusion,
            classifier,
            aux,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zeroes the final classifier layer so every class gets the same logit.
    pub fn zero_classifier_output(&mut self) {
        for id in [self.classifier.w2, self.classifier.b2] {
            self.params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }

    fn check_record(&self, rec: &PatientRecord) -> Result<()> {
        for m in self.config.modalities.active() {
            let raw = rec.raw(m);
            let want = self.config.raw_dims.get(m);
            if raw.cols() != want {
                return Err(CmusError::Config(format!(
                    "{m} features of patient {} have width {}, model expects {want}",
                    rec.id,
                    raw.cols()
                )));
            }
        }
        if rec.label >= self.config.num_classes {
            return Err(CmusError::Contract(format!(
                "label {} of patient {} out of range for {} classes",
                rec.label, rec.id, self.config.num_classes
            )));
        }
        Ok(())
    }

    /// Builds the forward graph on `tape` using `bound` (one Var per
    /// parameter, in registration order).
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        rec: &PatientRecord,
    ) -> Result<ForwardVars> {
        self.check_record(rec)?;
        let mut tokens: Vec<(ModalityId, Var)> = Vec::with_capacity(3);
        let mut smil_diag = None;
        for (m, enc) in &self.encoders {
            let x = tape.constant(rec.raw(*m).clone());
            let mut h = match enc {
                Encoder::Identity => x,
                Encoder::Mlp(mlp) => mlp.forward(tape, bound, x)?,
            };
            if *m == ModalityId::Tem && self.config.smil {
                let (agg, diag) = smil::aggregate_var(
                    tape,
                    h,
                    self.config.threshold,
                    self.config.detach_weights,
                )?;
                h = agg;
                smil_diag = Some(diag);
            }
            tokens.push((*m, h));
        }
        let get = |m: ModalityId| {
            tokens
                .iter()
                .find(|(id, _)| *id == m)
                .map(|(_, v)| *v)
                .expect("active modality encoded")
        };

        let features: Vec<(ModalityId, Var)> = match &self.fusion {
            FusionHead::Full(params) => {
                let inputs = FusionInputs {
                    om: get(ModalityId::Om),
                    tem: get(ModalityId::Tem),
                    im: get(ModalityId::Im),
                };
                let out = fusion_variant_var(tape, bound, params, inputs)?;
                vec![
                    (ModalityId::Om, out.om),
                    (ModalityId::Tem, out.tem),
                    (ModalityId::Im, out.im),
                ]
            }
            FusionHead::TemPair { other, branch } => {
                let tem = tape.mean_rows(get(ModalityId::Tem));
                let other_tokens = get(*other);
                let pooled = tape.mean_rows(other_tokens);
                let f_other = match branch {
                    Some(p) => {
                        let a = attention_var(tape, bound, p, tem, other_tokens)?.output;
                        tape.add(a, pooled)?
                    }
                    None => pooled,
                };
                let mut v = vec![(ModalityId::Tem, tem), (*other, f_other)];
                v.sort_by_key(|(m, _)| ModalityId::FUSION_ORDER.iter().position(|x| x == m));
                v
            }
            FusionHead::Concat => tokens
                .iter()
                .map(|&(m, t)| (m, tape.mean_rows(t)))
                .collect(),
        };

        let fused = if features.len() == 1 {
            features[0].1
        } else {
            let parts: Vec<Var> = features.iter().map(|&(_, v)| v).collect();
            tape.concat_cols(&parts)?
        };
        let logits = self.classifier.forward(tape, bound, fused)?;
        let mut aux = Vec::with_capacity(self.aux.len());
        for (m, head) in &self.aux {
            let f = features
                .iter()
                .find(|(id, _)| id == m)
                .map(|&(_, v)| v)
                .expect("aux head for active modality");
            aux.push((*m, tape.linear(f, bound[head.w.0], bound[head.b.0])?));
        }
        Ok(ForwardVars {
            logits,
            aux,
            fused,
            smil: smil_diag,
        })
    }

    /// Total loss of one record on the tape, plus its components.
    pub fn loss_var(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        rec: &PatientRecord,
    ) -> Result<(Var, LossVars)> {
        let fv = self.forward_var(tape, bound, rec)?;
        let weights = self.config.weighted_loss.then_some(self.config.loss_weights);
        loss_terms(tape, fv.logits, &fv.aux, rec.label, weights.as_ref())
    }

    pub fn forward(&self, rec: &PatientRecord) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constants(&mut tape);
        let fv = self.forward_var(&mut tape, &bound, rec)?;
        Ok(ForwardOutput {
            logits: tape.value(fv.logits).data().to_vec(),
            aux_logits: fv
                .aux
                .iter()
                .map(|&(m, v)| (m, tape.value(v).data().to_vec()))
                .collect(),
            fused: tape.value(fv.fused).data().to_vec(),
        })
    }

    /// Class probabilities from the fusion classifier.
    pub fn predict_proba(&self, rec: &PatientRecord) -> Result<Vec<f64>> {
        let out = self.forward(rec)?;
        crate::diffcore::softmax(&out.logits)
    }

    pub fn predict(&self, rec: &PatientRecord) -> Result<usize> {
        Ok(argmax(&self.predict_proba(rec)?))
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Per-record loss components on a tape.
pub struct LossVars {
    pub fusion: Var,
    pub aux: Vec<(ModalityId, Var)>,
}

/// `alpha L_OM + beta L_IM + gamma L_TEM + L_fusion`, or `L_fusion` alone
/// when `weights` is `None`. Missing auxiliary terms are skipped.
fn loss_terms(
    tape: &mut Tape,
    logits: Var,
    aux: &[(ModalityId, Var)],
    label: usize,
    weights: Option<&LossWeights>,
) -> Result<(Var, LossVars)> {
    let fusion = tape.cross_entropy(logits, label)?;
    let mut parts = Vec::new();
    let mut aux_losses = Vec::new();
    if let Some(w) = weights {
        for m in [ModalityId::Om, ModalityId::Im, ModalityId::Tem] {
            if let Some(&(_, l)) = aux.iter().find(|(id, _)| *id == m) {
                let ce = tape.cross_entropy(l, label)?;
                aux_losses.push((m, ce));
                parts.push(tape.scale(ce, w.get(m)));
            }
        }
    }
    let mut total: Option<Var> = None;
    for p in parts.into_iter().chain(std::iter::once(fusion)) {
        total = Some(match total {
            Some(t) => tape.add(t, p)?,
            None => p,
        });
    }
    Ok((
        total.expect("fusion term present"),
        LossVars {
            fusion,
            aux: aux_losses,
        },
    ))
}

/// Categorical cross-entropy of each head and the weighted total.
pub fn compute_losses(
    logits: &[f64],
    aux_logits: &[(ModalityId, Vec<f64>)],
    label: usize,
    weights: &LossWeights,
) -> Result<Losses> {
    weights.validate()?;
    if label >= logits.len() {
        return Err(CmusError::Contract(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::row(logits.to_vec()));
    let aux: Vec<(ModalityId, Var)> = aux_logits
        .iter()
        .map(|(m, v)| (*m, tape.constant(Tensor::row(v.clone()))))
        .collect();
    let (total, parts) = loss_terms(&mut tape, l, &aux, label, Some(weights))?;
    let get = |m: ModalityId| {
        parts
            .aux
            .iter()
            .find(|(id, _)| *id == m)
            .map(|&(_, v)| tape.value(v).item())
    };
    Ok(Losses {
        total: tape.value(total).item(),
        fusion: tape.value(parts.fusion).item(),
        om: get(ModalityId::Om),
        im: get(ModalityId::Im),
        tem: get(ModalityId::Tem),
    })
}

/// One optimizer step on the mean total loss of `batch`. Returns the loss
/// before the update.
pub fn train_step(
    model: &mut CmusModel,
    batch: &[&PatientRecord],
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(CmusError::Contract("empty training batch".into()));
    }
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut sum: Option<Var> = None;
    for rec in batch {
        let (l, _) = model.loss_var(&mut tape, &bound, rec)?;
        sum = Some(match sum {
            Some(s) => tape.add(s, l)?,
            None => l,
        });
    }
    let mean = tape.scale(sum.expect("non-empty batch"), 1.0 / batch.len() as f64);
    let loss = tape.value(mean).item();
    if !loss.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|r| r.id.as_str()).collect();
        return Err(CmusError::Divergence(format!(
            "loss is {loss} on batch [{}]",
            ids.join(", ")
        )));
    }
    tape.backward(mean)?;
    let grads: Vec<Tensor> = bound.iter().map(|&v| tape.grad(v)).collect();
    adam_step(&mut model.params, &grads, opt, lr)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 4,
            lr0: 5e-5,
            weight_decay: 5e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CmusError::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr0 > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(CmusError::Config(format!(
                "learning rate {} / weight decay {} out of range",
                self.lr0, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Mean training loss per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_losses: Vec<f64>,
}

/// Trains `model` on `records` with Adam and a per-epoch cosine schedule.
/// Records are reshuffled every epoch from `cfg.seed`.
pub fn fit(model: &mut CmusModel, records: &[PatientRecord], cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(CmusError::Contract("no training records".into()));
    }
    let adam = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut opt = OptimizerState::new(&model.params, adam);
    let sched = LrSchedule::new(cfg.lr0, cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, &sched)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PatientRecord> = chunk.iter().map(|&i| &records[i]).collect();
            total += train_step(model, &batch, &mut opt, lr)?;
            batches += 1;
        }
        history.epoch_losses.push(total / batches as f64);
    }
    Ok(history)
}

/// Mean total loss over `records` without updating anything.
pub fn mean_loss(model: &CmusModel, records: &[PatientRecord]) -> Result<f64> {
    let mut total = 0.0;
    for rec in records {
        let mut tape = Tape::new();
        let bound = model.params.bind_constants(&mut tape);
        let (l, _) = model.loss_var(&mut tape, &bound, rec)?;
        total += tape.value(l).item();
    }
    Ok(total / records.len().max(1) as f64)
}

const CHECKPOINT_FORMAT: &str = "cmus-checkpoint";

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<StoredParam>,
}

impl CmusModel {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&ck)
            .map_err(|e| CmusError::InvalidValue(format!("checkpoint serialization: {e}")))
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)
            .map_err(|e| CmusError::Config(format!("checkpoint is not valid JSON: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != 1 {
            return Err(CmusError::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut model = CmusModel::new(ck.config)?;
        if ck.params.len() != model.params.len() {
            return Err(CmusError::Config(format!(
                "checkpoint has {} tensors, model needs {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        for (slot, stored) in model.params.iter_mut().zip(ck.params) {
            if slot.name != stored.name || slot.value.shape() != stored.shape.as_slice() {
                return Err(CmusError::Config(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    stored.name,
                    stored.shape,
                    slot.name,
                    slot.value.shape()
                )));
            }
            slot.value = Tensor::new(stored.shape, stored.data)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?).map_err(|e| CmusError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CmusError::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }
}
