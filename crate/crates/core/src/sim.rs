//! Seeded Monte-Carlo panels with known ground truth.
//!
//! Every cell gets a latent true label and a difficulty. Model `m` votes the
//! truth with probability `1 - clamp(difficulty + skill_offset[m])`; wrong
//! votes are spread evenly over the other labels. Confidence follows
//! `clamp(slope * P(correct) + bias + noise + category_shift)` on the unit
//! interval, mapped onto the declared scale.
//!
//! Truth, votes, confidences and synthetic human codes each draw from their
//! own substream, so changing the confidence model leaves the votes intact.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{
    CellKey, ConfidenceScale, DecisionCell, PanelDataset, ReferenceLabels, RosterEntry, VoteRecord,
};
use crate::rng::{substream, DEFAULT_SEED};
use crate::triage::{Adjudication, AdjudicationSource, Tier, TriagePlan};

const TRUTH_STREAM: u64 = 0;
const VOTE_STREAM: u64 = 1;
const CONFIDENCE_STREAM: u64 = 2;
const HUMAN_STREAM: u64 = 3;

/// Seed of the bundled replication corpus.
pub const REPLICATION_SEED: u64 = DEFAULT_SEED;

pub const GROUND_TRUTH_HEADER: &str = "item_id,category_id,true_label";

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
}

/// Cells are "hard" with a per-category probability drawn uniformly from
/// `[hard_share_min, hard_share_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyModel {
    pub easy: f64,
    pub hard: f64,
    pub hard_share_min: f64,
    pub hard_share_max: f64,
}

impl DifficultyModel {
    pub fn constant(d: f64) -> Self {
        DifficultyModel {
            easy: d,
            hard: d,
            hard_share_min: 0.0,
            hard_share_max: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceModel {
    pub slope: f64,
    /// Positive values make the panel overconfident.
    pub bias: f64,
    /// Per-vote Gaussian noise on the unit scale.
    pub noise_sd: f64,
    /// Sd of a per-category offset shared by all votes in a category.
    pub category_shift_sd: f64,
    /// Round raw confidences to whole scale points.
    pub integer: bool,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        ConfidenceModel {
            slope: 1.0,
            bias: 0.0,
            noise_sd: 0.0,
            category_shift_sd: 0.0,
            integer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dataset_id: String,
    pub n_items: usize,
    pub n_categories: usize,
    pub n_models: usize,
    pub label_count: usize,
    #[serde(default)]
    pub scale: ConfidenceScale,
    /// Probability that a cell's true label is not label 0.
    pub prevalence: f64,
    pub difficulty: DifficultyModel,
    /// One per model; negative values make a model stronger.
    pub skill_offsets: Vec<f64>,
    #[serde(default)]
    pub group_tags: Option<Vec<String>>,
    #[serde(default)]
    pub confidence: ConfidenceModel,
    /// One synthetic human coder per entry, each with this error rate.
    #[serde(default)]
    pub human_error_rates: Vec<f64>,
    pub seed: u64,
}

impl SimConfig {
    /// Binary panel with no skill differences, no difficulty mixture and
    /// a calibrated, noiseless confidence map.
    pub fn basic(
        n_items: usize,
        n_categories: usize,
        n_models: usize,
        difficulty: f64,
        seed: u64,
    ) -> Self {
        SimConfig {
            dataset_id: "synthetic".into(),
            n_items,
            n_categories,
            n_models,
            label_count: 2,
            scale: ConfidenceScale::default(),
            prevalence: 0.5,
            difficulty: DifficultyModel::constant(difficulty),
            skill_offsets: vec![0.0; n_models],
            group_tags: None,
            confidence: ConfidenceModel::default(),
            human_error_rates: Vec::new(),
            seed,
        }
    }

    /// 71 items x 10 categories x 8 models. Five strong models and three
    /// weak ones: hard cells split the panel without flipping the majority.
    pub fn replication() -> Self {
        SimConfig {
            dataset_id: "replication".into(),
            n_items: 71,
            n_categories: 10,
            n_models: 8,
            label_count: 2,
            scale: ConfidenceScale::default(),
            prevalence: 0.3,
            difficulty: DifficultyModel {
                easy: 0.02,
                hard: 0.9,
                hard_share_min: 0.35,
                hard_share_max: 0.8,
            },
            skill_offsets: vec![-0.87, -0.87, 0.0, 0.0, -0.87, -0.87, 0.0, -0.87],
            group_tags: Some(
                [
                    "direct", "direct", "direct", "direct", "cot", "cot", "cot", "cot",
                ]
                .map(String::from)
                .to_vec(),
            ),
            confidence: ConfidenceModel {
                slope: 1.0,
                bias: 0.15,
                noise_sd: 0.12,
                category_shift_sd: 0.05,
                integer: true,
            },
            human_error_rates: vec![0.08, 0.08],
            seed: REPLICATION_SEED,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::Config(m));
        if self.n_items == 0 || self.n_categories == 0 {
            return err("need at least one item and one category".into());
        }
        if self.n_models < 2 {
            return err(format!("need at least 2 models, got {}", self.n_models));
        }
        if self.label_count < 2 {
            return err(format!("need at least 2 labels, got {}", self.label_count));
        }
        if self.skill_offsets.len() != self.n_models {
            return err(format!(
                "{} skill offsets for {} models",
                self.skill_offsets.len(),
                self.n_models
            ));
        }
        if let Some(tags) = &self.group_tags {
            if tags.len() != self.n_models {
                return err(format!(
                    "{} group tags for {} models",
                    tags.len(),
                    self.n_models
                ));
            }
        }
        let unit = |name: &str, v: f64| -> Result<(), SimError> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(SimError::Config(format!("{name} = {v} is outside [0, 1]")))
            }
        };
        unit("prevalence", self.prevalence)?;
        unit("difficulty.easy", self.difficulty.easy)?;
        unit("difficulty.hard", self.difficulty.hard)?;
        unit("difficulty.hard_share_min", self.difficulty.hard_share_min)?;
        unit("difficulty.hard_share_max", self.difficulty.hard_share_max)?;
        if self.difficulty.hard_share_min > self.difficulty.hard_share_max {
            return err("hard_share_min exceeds hard_share_max".into());
        }
        for (m, &o) in self.skill_offsets.iter().enumerate() {
            if !(-1.0..=1.0).contains(&o) {
                return err(format!(
                    "skill offset of model {m} = {o} is outside [-1, 1]"
                ));
            }
        }
        for (h, &e) in self.human_error_rates.iter().enumerate() {
            unit(&format!("human_error_rates[{h}]"), e)?;
        }
        let c = &self.confidence;
        if !(c.slope.is_finite() && c.bias.is_finite()) {
            return err("confidence slope and bias must be finite".into());
        }
        if !(c.noise_sd >= 0.0 && c.category_shift_sd >= 0.0) {
            return err("confidence noise must be non-negative".into());
        }
        if self.scale.min.partial_cmp(&self.scale.max) != Some(std::cmp::Ordering::Less) {
            return err("confidence scale is empty".into());
        }
        Ok(())
    }

    pub fn model_id(&self, m: usize) -> String {
        format!("m{}", m + 1)
    }

    /// Probability that model `m` votes the truth at the given difficulty.
    pub fn p_correct(&self, m: usize, difficulty: f64) -> f64 {
        1.0 - (difficulty + self.skill_offsets[m]).clamp(0.0, 1.0)
    }
}

fn pad_width(n: usize) -> usize {
    n.to_string().len().max(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCell {
    pub item_id: String,
    pub category_id: String,
    pub true_label: usize,
    pub difficulty: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Canonical cell order.
    pub cells: Vec<TruthCell>,
}

impl GroundTruth {
    pub fn label(&self, key: &CellKey) -> Option<usize> {
        self.cells
            .binary_search_by(|c| {
                (c.item_id.as_str(), c.category_id.as_str())
                    .cmp(&(key.item_id.as_str(), key.category_id.as_str()))
            })
            .ok()
            .map(|i| self.cells[i].true_label)
    }

    pub fn labels(&self) -> BTreeMap<CellKey, usize> {
        self.cells
            .iter()
            .map(|c| {
                (
                    CellKey::new(c.item_id.clone(), c.category_id.clone()),
                    c.true_label,
                )
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(GROUND_TRUTH_HEADER);
        out.push('\n');
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{}\n",
                c.item_id, c.category_id, c.true_label
            ));
        }
        out
    }

    /// Expert labels for every cell, as a fully reviewed corpus would have.
    /// Green cells are marked as audits, others as full reviews.
    pub fn adjudications(&self, plan: &TriagePlan) -> Vec<Adjudication> {
        self.cells
            .iter()
            .map(|c| {
                let key = CellKey::new(c.item_id.clone(), c.category_id.clone());
                let source = match plan.tier_of(&key) {
                    Some(Tier::Green) => AdjudicationSource::Audit,
                    _ => AdjudicationSource::FullReview,
                };
                Adjudication {
                    item_id: c.item_id.clone(),
                    category_id: c.category_id.clone(),
                    expert_label: c.true_label,
                    source,
                    timestamp: String::new(),
                    adjudicator_id: "ground-truth".into(),
                }
            })
            .collect()
    }
}

/// Any label except `truth`, uniformly.
fn wrong_label(rng: &mut ChaCha8Rng, truth: usize, k: usize) -> usize {
    let j = rng.random_range(0..k - 1);
    if j >= truth {
        j + 1
    } else {
        j
    }
}

pub fn generate_panel(cfg: &SimConfig) -> Result<(PanelDataset, GroundTruth), SimError> {
    cfg.validate()?;
    let k = cfg.label_count;
    let iw = pad_width(cfg.n_items);
    let cw = pad_width(cfg.n_categories);
    let item_ids: Vec<String> = (1..=cfg.n_items).map(|i| format!("s{i:0iw$}")).collect();
    let cat_ids: Vec<String> = (1..=cfg.n_categories)
        .map(|c| format!("c{c:0cw$}"))
        .collect();

    let mut truth_rng = substream(cfg.seed, TRUTH_STREAM);
    let mut vote_rng = substream(cfg.seed, VOTE_STREAM);
    let mut conf_rng = substream(cfg.seed, CONFIDENCE_STREAM);
    let mut human_rng = substream(cfg.seed, HUMAN_STREAM);

    let d = &cfg.difficulty;
    let hard_share: Vec<f64> = (0..cfg.n_categories)
        .map(|_| {
            d.hard_share_min + (d.hard_share_max - d.hard_share_min) * truth_rng.random::<f64>()
        })
        .collect();
    let shift = Normal::new(0.0, cfg.confidence.category_shift_sd).expect("sd validated");
    let noise = Normal::new(0.0, cfg.confidence.noise_sd).expect("sd validated");
    let cat_shift: Vec<f64> = (0..cfg.n_categories)
        .map(|_| shift.sample(&mut conf_rng))
        .collect();

    let span = cfg.scale.max - cfg.scale.min;
    let mut cells = Vec::with_capacity(cfg.n_items * cfg.n_categories);
    let mut truth = GroundTruth::default();
    let mut reference = ReferenceLabels::default();

    for item in &item_ids {
        for (c, cat) in cat_ids.iter().enumerate() {
            let true_label = if truth_rng.random::<f64>() < cfg.prevalence {
                if k == 2 {
                    1
                } else {
                    truth_rng.random_range(1..k)
                }
            } else {
                0
            };
            let difficulty = if truth_rng.random::<f64>() < hard_share[c] {
                d.hard
            } else {
                d.easy
            };
            let votes = (0..cfg.n_models)
                .map(|m| {
                    let p = cfg.p_correct(m, difficulty);
                    let vote = if vote_rng.random::<f64>() < p {
                        true_label
                    } else {
                        wrong_label(&mut vote_rng, true_label, k)
                    };
                    let conf = &cfg.confidence;
                    let unit =
                        (conf.slope * p + conf.bias + cat_shift[c] + noise.sample(&mut conf_rng))
                            .clamp(0.0, 1.0);
                    let mut raw = cfg.scale.min + span * unit;
                    if conf.integer {
                        raw = raw.round().clamp(cfg.scale.min, cfg.scale.max);
                    }
                    VoteRecord {
                        model_id: cfg.model_id(m),
                        vote,
                        confidence_raw: raw,
                        group_tag: cfg.group_tags.as_ref().map(|t| t[m].clone()),
                    }
                })
                .collect();
            for (h, &err) in cfg.human_error_rates.iter().enumerate() {
                let label = if human_rng.random::<f64>() < err {
                    wrong_label(&mut human_rng, true_label, k)
                } else {
                    true_label
                };
                reference.insert(
                    &format!("coder{}", h + 1),
                    CellKey::new(item.clone(), cat.clone()),
                    label,
                );
            }
            truth.cells.push(TruthCell {
                item_id: item.clone(),
                category_id: cat.clone(),
                true_label,
                difficulty,
            });
            cells.push(DecisionCell {
                item_id: item.clone(),
                category_id: cat.clone(),
                votes,
            });
        }
    }
    let labels = if k == 2 {
        vec!["no".to_string(), "yes".to_string()]
    } else {
        (0..k).map(|l| format!("label{l}")).collect()
    };
    let roster = (0..cfg.n_models)
        .map(|m| RosterEntry {
            model_id: cfg.model_id(m),
            group_tag: cfg.group_tags.as_ref().map(|t| t[m].clone()),
        })
        .collect();
    let mut ds = PanelDataset {
        dataset_id: cfg.dataset_id.clone(),
        labels,
        scale: cfg.scale,
        cells,
        roster,
        reference,
    };
    ds.canonicalize();
    Ok((ds, truth))
}

/// The bundled fixed-seed corpus: 710 cells, 5,680 votes, two synthetic
/// human coders stored as reference labels.
pub fn replication_corpus() -> (PanelDataset, GroundTruth) {
    generate_panel(&SimConfig::replication()).expect("replication config is valid")
}
