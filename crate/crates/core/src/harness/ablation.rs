//! Ablation suites: each row is a full cross-validation run on one shared
//! fold split, compared to a reference row with paired t-tests.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelSettings};
use super::cv::{cv_on_dataset, late_fusion_on_dataset, load_dataset, with_jobs, CvSummary};
use crate::cmsa::FusionVariant;
use crate::error::{CmusError, Result};
use crate::model::{LossWeights, ModalityId, ModalityMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    ModalityCombos,
    AttentionVariants,
    LossWeights,
    LateFusion,
    ModuleToggles,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::ModalityCombos,
        Suite::AttentionVariants,
        Suite::LossWeights,
        Suite::LateFusion,
        Suite::ModuleToggles,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::ModalityCombos => "modality_combos",
            Suite::AttentionVariants => "attention_variants",
            Suite::LossWeights => "loss_weights",
            Suite::LateFusion => "late_fusion",
            Suite::ModuleToggles => "module_toggles",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = CmusError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| CmusError::Config(format!("unknown suite '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellKind {
    Model(ModelSettings),
    MajorityVote(ModelSettings),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub kind: CellKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: Suite,
    pub reference: String,
    pub rows: Vec<CvSummary>,
}

/// The 36 weightings on a 0.1 simplex grid with every weight at least 0.1,
/// ordered by OM weight, then IM weight.
pub fn loss_weight_grid() -> Vec<LossWeights> {
    let mut out = Vec::with_capacity(36);
    for a in 1..=8u32 {
        for b in 1..=(9 - a) {
            let c = 10 - a - b;
            out.push(LossWeights::new(
                a as f64 / 10.0,
                b as f64 / 10.0,
                c as f64 / 10.0,
            ));
        }
    }
    out
}

fn mask_name(mask: ModalityMask) -> String {
    [ModalityId::Om, ModalityId::Im, ModalityId::Tem]
        .into_iter()
        .filter(|&m| mask.contains(m))
        .map(|m| m.to_string())
        .collect::<Vec<_>>()
        .join("+")
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Rows of a suite and the index of its reference row.
pub fn suite_cells(suite: Suite, base: &ModelSettings) -> (Vec<Cell>, usize) {
    let model = |name: String, s: ModelSettings| Cell {
        name,
        kind: CellKind::Model(s),
    };
    match suite {
        Suite::ModalityCombos => {
            let cells: Vec<Cell> = ModalityMask::all_combinations()
                .into_iter()
                .map(|mask| {
                    let fusion = if mask.count() == 3 {
                        base.fusion
                    } else {
                        match base.fusion {
                            FusionVariant::Cmsa => FusionVariant::Cmsa,
                            _ => FusionVariant::None,
                        }
                    };
                    model(
                        mask_name(mask),
                        ModelSettings {
                            modalities: mask,
                            fusion,
                            ..base.clone()
                        },
                    )
                })
                .collect();
            let r = cells.len() - 1;
            (cells, r)
        }
        Suite::AttentionVariants => {
            let cells: Vec<Cell> = FusionVariant::ALL
                .into_iter()
                .map(|v| {
                    model(
                        v.as_str().to_string(),
                        ModelSettings {
                            fusion: v,
                            modalities: ModalityMask::ALL,
                            ..base.clone()
                        },
                    )
                })
                .collect();
            let r = FusionVariant::ALL
                .iter()
                .position(|&v| v == FusionVariant::Cmsa)
                .unwrap_or(0);
            (cells, r)
        }
        Suite::LossWeights => {
            let grid = loss_weight_grid();
            let reference = LossWeights::default();
            let r = grid.iter().position(|w| *w == reference).unwrap_or(0);
            let cells = grid
                .into_iter()
                .map(|w| {
                    model(
                        format!("{}/{}/{}", w.om, w.im, w.tem),
                        ModelSettings {
                            loss_weights: w,
                            weighted_loss: true,
                            ..base.clone()
                        },
                    )
                })
                .collect();
            (cells, r)
        }
        Suite::LateFusion => (
            vec![
                model("early fusion".into(), base.clone()),
                Cell {
                    name: "majority vote".into(),
                    kind: CellKind::MajorityVote(base.clone()),
                },
            ],
            0,
        ),
        Suite::ModuleToggles => {
            let mut cells = Vec::with_capacity(8);
            for smil in [false, true] {
                for cmsa in [false, true] {
                    for wl in [false, true] {
                        cells.push(model(
                            format!("SMIL {} CMSA {} WL {}", on_off(smil), on_off(cmsa), on_off(wl)),
                            ModelSettings {
                                smil,
                                fusion: if cmsa {
                                    FusionVariant::Cmsa
                                } else {
                                    FusionVariant::None
                                },
                                weighted_loss: wl,
                                modalities: ModalityMask::ALL,
                                ..base.clone()
                            },
                        ));
                    }
                }
            }
            (cells, 7)
        }
    }
}

/// Runs every row of `suite` on the dataset of `cfg`. Rows and folds share
/// one worker pool of `jobs` threads.
pub fn run_ablation_suite(suite: Suite, cfg: &ExperimentConfig, jobs: usize) -> Result<AblationTable> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.task)?;
    let (cells, r) = suite_cells(suite, &cfg.model);
    let mut rows = with_jobs(jobs, || {
        cells
            .par_iter()
            .map(|c| match &c.kind {
                CellKind::Model(s) => cv_on_dataset(cfg, s, &ds, &c.name),
                CellKind::MajorityVote(s) => late_fusion_on_dataset(cfg, s, &ds, &c.name),
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let reference = rows[r].clone();
    for (i, row) in rows.iter_mut().enumerate() {
        if i != r {
            row.compare_to(&reference)?;
        }
    }
    Ok(AblationTable {
        suite,
        reference: reference.name,
        rows,
    })
}
