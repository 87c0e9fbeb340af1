//! Cross-modal scale attention and the baseline fusion variants.
//!
//! The aggregated fine-scale feature is projected to a single query token
//! that attends, head by head, over the token features of a coarse-scale
//! modality. Head outputs are concatenated without an output projection
//! (unless enabled) and added back onto the pooled modality feature.
//!
//! With a single key/value token the softmax is identically 1 and the query
//! has no effect; the attention only becomes informative with `L > 1` tokens.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{xavier_uniform, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{CmusError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityId {
    Om,
    Im,
    Tem,
}

impl ModalityId {
    /// Fusion concatenation order.
    pub const FUSION_ORDER: [ModalityId; 3] = [ModalityId::Om, ModalityId::Tem, ModalityId::Im];

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityId::Om => "om",
            ModalityId::Im => "im",
            ModalityId::Tem => "tem",
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str().to_uppercase())
    }
}

impl FromStr for ModalityId {
    type Err = CmusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "om" => Ok(ModalityId::Om),
            "im" => Ok(ModalityId::Im),
            "tem" => Ok(ModalityId::Tem),
            other => Err(CmusError::Config(format!("unknown modality '{other}'"))),
        }
    }
}

/// `L x d` token matrix of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeature {
    pub modality: ModalityId,
    pub tokens: Tensor,
}

impl ModalityFeature {
    pub fn new(modality: ModalityId, tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(CmusError::Dimension(format!(
                "{modality} tokens must be L x d, got {:?}",
                tokens.shape()
            )));
        }
        Ok(ModalityFeature { modality, tokens })
    }

    pub fn single(modality: ModalityId, v: Vec<f64>) -> Self {
        ModalityFeature {
            modality,
            tokens: Tensor::row(v),
        }
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Token mean.
    pub fn pooled(&self) -> Vec<f64> {
        let mut tape = Tape::new();
        let t = tape.constant(self.tokens.clone());
        let m = tape.mean_rows(t);
        tape.value(m).data().to_vec()
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(CmusError::Config(format!(
            "dimension {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Q/K/V projections (with bias) of one attention block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub dim: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub output: Option<(ParamId, ParamId)>,
}

impl AttentionParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        output_projection: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        let mut pair = |store: &mut ParamStore, name: &str| -> Result<(ParamId, ParamId)> {
            let w = store.register(format!("{prefix}.w{name}"), xavier_uniform(dim, dim, rng))?;
            let b = store.register(format!("{prefix}.b{name}"), Tensor::zeros(&[1, dim]))?;
            Ok((w, b))
        };
        let (wq, bq) = pair(store, "q")?;
        let (wk, bk) = pair(store, "k")?;
        let (wv, bv) = pair(store, "v")?;
        let output = if output_projection {
            Some(pair(store, "o")?)
        } else {
            None
        };
        Ok(AttentionParams {
            dim,
            heads,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            output,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.wq, self.bq, self.wk, self.bk, self.wv, self.bv];
        if let Some((w, b)) = self.output {
            ids.extend([w, b]);
        }
        ids
    }

    /// Sets every projection weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in self.ids() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Output of one attention block with the per-head attention weights
/// (`heads x queries x keys`).
pub struct AttentionVar {
    pub output: Var,
    pub weights: Vec<Tensor>,
}

/// Multi-head scaled dot-product attention of `queries` (`Lq x d`) over
/// `kv` (`L x d`). Heads are contiguous column blocks of width `d / h`.
pub fn attention_var(
    tape: &mut Tape,
    bound: &[Var],
    p: &AttentionParams,
    queries: Var,
    kv: Var,
) -> Result<AttentionVar> {
    check_heads(p.dim, p.heads)?;
    for (what, v) in [("query", queries), ("key/value", kv)] {
        if tape.value(v).cols() != p.dim {
            return Err(CmusError::Dimension(format!(
                "{what} width {} does not match attention dimension {}",
                tape.value(v).cols(),
                p.dim
            )));
        }
    }
    let q = tape.linear(queries, bound[p.wq.0], bound[p.bq.0])?;
    let k = tape.linear(kv, bound[p.wk.0], bound[p.bk.0])?;
    let v = tape.linear(kv, bound[p.wv.0], bound[p.bv.0])?;
    let dh = p.dim / p.heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scaled = tape.scale(scores, inv_sqrt);
        let attn = tape.softmax_rows(scaled);
        weights.push(tape.value(attn).clone());
        heads.push(tape.matmul(attn, vh)?);
    }
    let mut output = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    if let Some((w, b)) = p.output {
        output = tape.linear(output, bound[w.0], bound[b.0])?;
    }
    Ok(AttentionVar { output, weights })
}

/// Result of [`cross_attention_heads`]: the `d`-vector and, per head, the
/// attention distribution over the key/value tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub output: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

/// Single-token query attending over every token of `kv_feat`.
pub fn cross_attention_heads(
    query_feat: &ModalityFeature,
    kv_feat: &ModalityFeature,
    store: &ParamStore,
    params: &AttentionParams,
) -> Result<CrossAttention> {
    if query_feat.tokens.rows() != 1 {
        return Err(CmusError::Contract(format!(
            "cross-attention query must be one token, got {}",
            query_feat.tokens.rows()
        )));
    }
    let mut tape = Tape::new();
    let bound = store.bind_constants(&mut tape);
    let q = tape.constant(query_feat.tokens.clone());
    let kv = tape.constant(kv_feat.tokens.clone());
    let out = attention_var(&mut tape, &bound, params, q, kv)?;
    Ok(CrossAttention {
        output: tape.value(out.output).data().to_vec(),
        weights: out.weights.into_iter().map(|w| w.into_data()).collect(),
    })
}

/// The two attention branches of the fusion module, one per coarse modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmsaParams {
    pub om: AttentionParams,
    pub im: AttentionParams,
}

impl CmsaParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        heads: usize,
        output_projection: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(CmsaParams {
            om: AttentionParams::register(store, "cmsa.om", dim, heads, output_projection, rng)?,
            im: AttentionParams::register(store, "cmsa.im", dim, heads, output_projection, rng)?,
        })
    }
}

/// `attn(query, tokens) + mean(tokens)` for one branch.
pub fn cmsa_branch_var(
    tape: &mut Tape,
    bound: &[Var],
    p: &AttentionParams,
    query: Var,
    tokens: Var,
) -> Result<Var> {
    let attended = attention_var(tape, bound, p, query, tokens)?.output;
    let pooled = tape.mean_rows(tokens);
    tape.add(attended, pooled)
}

/// Returns `(f'_OM, f'_IM)` as `1 x d` rows.
pub fn cmsa_fuse_var(
    tape: &mut Tape,
    bound: &[Var],
    params: &CmsaParams,
    tem: Var,
    om_tokens: Var,
    im_tokens: Var,
) -> Result<(Var, Var)> {
    let om = cmsa_branch_var(tape, bound, &params.om, tem, om_tokens)?;
    let im = cmsa_branch_var(tape, bound, &params.im, tem, im_tokens)?;
    Ok((om, im))
}

pub fn cmsa_fuse(
    tem_feat: &[f64],
    om_feat: &ModalityFeature,
    im_feat: &ModalityFeature,
    store: &ParamStore,
    params: &CmsaParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = store.bind_constants(&mut tape);
    let tem = tape.constant(Tensor::row(tem_feat.to_vec()));
    let om = tape.constant(om_feat.tokens.clone());
    let im = tape.constant(im_feat.tokens.clone());
    let (a, b) = cmsa_fuse_var(&mut tape, &bound, params, tem, om, im)?;
    Ok((tape.value(a).data().to_vec(), tape.value(b).data().to_vec()))
}

/// Feature-fusion strategies compared in the attention ablation.
///
/// The three baselines are simplified re-implementations of the mechanisms
/// they are named after.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Concatenate pooled features.
    None,
    /// Per-modality self-attention (plus residual) before pooling.
    SelfAttention,
    /// One learned gate per modality, softmax-normalized across modalities.
    ModalityAttention,
    /// Cross-attention in both directions for every modality pair, averaged.
    BidirectionalCross,
    /// Fine-scale query over coarse-scale tokens with residual.
    Cmsa,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 5] = [
        FusionVariant::None,
        FusionVariant::SelfAttention,
        FusionVariant::ModalityAttention,
        FusionVariant::BidirectionalCross,
        FusionVariant::Cmsa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionVariant::None => "none",
            FusionVariant::SelfAttention => "self_attention",
            FusionVariant::ModalityAttention => "modality_attention",
            FusionVariant::BidirectionalCross => "bidirectional_cross",
            FusionVariant::Cmsa => "cmsa",
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionVariant {
    type Err = CmusError;

    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim())
            .ok_or_else(|| CmusError::Config(format!("unknown fusion variant '{s}'")))
    }
}

/// Learnable state of a fusion variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FusionParams {
    None,
    SelfAttention {
        om: AttentionParams,
        tem: AttentionParams,
        im: AttentionParams,
    },
    ModalityAttention {
        gates: ParamId,
    },
    /// Keyed by `(query modality, key/value modality)`.
    BidirectionalCross {
        pairs: Vec<(ModalityId, ModalityId, AttentionParams)>,
    },
    Cmsa(CmsaParams),
}

impl FusionParams {
    pub fn register<R: Rng + ?Sized>(
        variant: FusionVariant,
        store: &mut ParamStore,
        dim: usize,
        heads: usize,
        output_projection: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(match variant {
            FusionVariant::None => FusionParams::None,
            FusionVariant::SelfAttention => {
                let mut reg = |m: ModalityId| {
                    AttentionParams::register(
                        store,
                        &format!("self_attn.{}", m.as_str()),
                        dim,
                        heads,
                        output_projection,
                        rng,
                    )
                };
                FusionParams::SelfAttention {
                    om: reg(ModalityId::Om)?,
                    tem: reg(ModalityId::Tem)?,
                    im: reg(ModalityId::Im)?,
                }
            }
            FusionVariant::ModalityAttention => FusionParams::ModalityAttention {
                gates: store.register("modality_gates", Tensor::zeros(&[1, 3]))?,
            },
            FusionVariant::BidirectionalCross => {
                let mut pairs = Vec::with_capacity(6);
                for q in ModalityId::FUSION_ORDER {
                    for kv in ModalityId::FUSION_ORDER {
                        if q == kv {
                            continue;
                        }
                        let p = AttentionParams::register(
                            store,
                            &format!("bicross.{}_{}", q.as_str(), kv.as_str()),
                            dim,
                            heads,
                            output_projection,
                            rng,
                        )?;
                        pairs.push((q, kv, p));
                    }
                }
                FusionParams::BidirectionalCross { pairs }
            }
            FusionVariant::Cmsa => {
                FusionParams::Cmsa(CmsaParams::register(store, dim, heads, output_projection, rng)?)
            }
        })
    }

    pub fn variant(&self) -> FusionVariant {
        match self {
            FusionParams::None => FusionVariant::None,
            FusionParams::SelfAttention { .. } => FusionVariant::SelfAttention,
            FusionParams::ModalityAttention { .. } => FusionVariant::ModalityAttention,
            FusionParams::BidirectionalCross { .. } => FusionVariant::BidirectionalCross,
            FusionParams::Cmsa(_) => FusionVariant::Cmsa,
        }
    }
}

/// Token matrices of the three modalities on a tape. `tem` is either the
/// aggregated single token or the raw bag rows.
#[derive(Clone, Copy, Debug)]
pub struct FusionInputs {
    pub om: Var,
    pub tem: Var,
    pub im: Var,
}

/// Per-modality fused features (`1 x d` each) and their concatenation in
/// OM, TEM, IM order (`1 x 3d`).
#[derive(Clone, Copy, Debug)]
pub struct FusedVars {
    pub om: Var,
    pub tem: Var,
    pub im: Var,
    pub fused: Var,
}

impl FusionInputs {
    fn get(&self, m: ModalityId) -> Var {
        match m {
            ModalityId::Om => self.om,
            ModalityId::Im => self.im,
            ModalityId::Tem => self.tem,
        }
    }
}

pub fn fusion_variant_var(
    tape: &mut Tape,
    bound: &[Var],
    params: &FusionParams,
    inputs: FusionInputs,
) -> Result<FusedVars> {
    let pooled = |tape: &mut Tape, v: Var| tape.mean_rows(v);
    let (om, tem, im) = match params {
        FusionParams::None => (
            pooled(tape, inputs.om),
            pooled(tape, inputs.tem),
            pooled(tape, inputs.im),
        ),
        FusionParams::SelfAttention { om, tem, im } => {
            let mut run = |p: &AttentionParams, x: Var| -> Result<Var> {
                let a = attention_var(tape, bound, p, x, x)?.output;
                let r = tape.add(a, x)?;
                Ok(tape.mean_rows(r))
            };
            (run(om, inputs.om)?, run(tem, inputs.tem)?, run(im, inputs.im)?)
        }
        FusionParams::ModalityAttention { gates } => {
            let g = tape.softmax_rows(bound[gates.0]);
            let mut out = Vec::with_capacity(3);
            for (i, m) in ModalityId::FUSION_ORDER.into_iter().enumerate() {
                let p = pooled(tape, inputs.get(m));
                let gi = tape.element(g, i)?;
                out.push(tape.mul_scalar(p, gi)?);
            }
            (out[0], out[1], out[2])
        }
        FusionParams::BidirectionalCross { pairs } => {
            let mut out = Vec::with_capacity(3);
            for target in ModalityId::FUSION_ORDER {
                let tokens = inputs.get(target);
                let mut acc: Option<Var> = None;
                let mut count = 0;
                for (q, kv, p) in pairs.iter().filter(|(_, kv, _)| *kv == target) {
                    debug_assert_eq!(*kv, target);
                    let query = pooled(tape, inputs.get(*q));
                    let a = attention_var(tape, bound, p, query, tokens)?.output;
                    acc = Some(match acc {
                        Some(s) => tape.add(s, a)?,
                        None => a,
                    });
                    count += 1;
                }
                let base = pooled(tape, tokens);
                let mean = match acc {
                    Some(s) => tape.scale(s, 1.0 / count as f64),
                    None => return Err(CmusError::Config("bidirectional fusion without pairs".into())),
                };
                out.push(tape.add(base, mean)?);
            }
            (out[0], out[1], out[2])
        }
        FusionParams::Cmsa(p) => {
            let query = pooled(tape, inputs.tem);
            let (om, im) = cmsa_fuse_var(tape, bound, p, query, inputs.om, inputs.im)?;
            (om, query, im)
        }
    };
    let fused = tape.concat_cols(&[om, tem, im])?;
    Ok(FusedVars { om, tem, im, fused })
}

/// Detached evaluation of a fusion variant; returns the `3d` fused vector.
pub fn fusion_variant_apply(
    om: &ModalityFeature,
    tem: &ModalityFeature,
    im: &ModalityFeature,
    store: &ParamStore,
    params: &FusionParams,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = store.bind_constants(&mut tape);
    let inputs = FusionInputs {
        om: tape.constant(om.tokens.clone()),
        tem: tape.constant(tem.tokens.clone()),
        im: tape.constant(im.tokens.clone()),
    };
    let out = fusion_variant_var(&mut tape, &bound, params, inputs)?;
    Ok(tape.value(out.fused).data().to_vec())
}
