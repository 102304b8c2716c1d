use std::collections::hash_map::Entry;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::metrics::{group_report, MissingnessGroupReport};
use super::split::subject_disjoint_split;
use super::train::{prepare_inputs, train_prepared, ModelInput};
use super::{Dataset, Toggles, TrainConfig};
use crate::clip::{ClipMeta, MissingnessGroup};
use crate::error::Result;

/// All eight component combinations, baseline first and full model last.
pub const ABLATION_ORDER: [Toggles; 8] = [
    Toggles::new(false, false, false),
    Toggles::new(true, false, false),
    Toggles::new(false, true, false),
    Toggles::new(false, false, true),
    Toggles::new(true, true, false),
    Toggles::new(true, false, true),
    Toggles::new(false, true, true),
    Toggles::new(true, true, true),
];

pub fn variant_name(t: Toggles) -> &'static str {
    match (t.placeholders, t.prior_lora, t.advanced_objective) {
        (false, false, false) => "baseline + CE",
        (true, false, false) => "+ placeholders",
        (false, true, false) => "+ Prior-LoRA",
        (false, false, true) => "+ advanced objective",
        (true, true, false) => "+ placeholders + Prior-LoRA",
        (true, false, true) => "+ placeholders + advanced objective",
        (false, true, true) => "+ Prior-LoRA + advanced objective",
        (true, true, true) => "full",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: MissingnessGroup,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub toggles: Toggles,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub groups: Vec<GroupAccuracy>,
    pub frozen_checksum_preserved: bool,
}

impl AblationRow {
    pub fn group(&self, group: MissingnessGroup) -> &GroupAccuracy {
        self.groups.iter().find(|g| g.group == group).expect("every group is reported")
    }
}

/// One seed of the grid, plus the full model against its no-placeholder twin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    /// A = full model, B = full model without placeholders.
    pub diagnostic: MissingnessGroupReport,
}

impl AblationRun {
    pub fn row(&self, toggles: Toggles) -> &AblationRow {
        self.rows.iter().find(|r| r.toggles == toggles).expect("all toggles present")
    }

    pub fn full(&self) -> &AblationRow {
        self.row(Toggles::new(true, true, true))
    }

    /// Whether no row beats the full model's accuracy.
    pub fn full_is_best(&self) -> bool {
        let full = self.full().accuracy;
        self.rows.iter().all(|r| r.accuracy <= full)
    }
}

pub fn run_ablation(base: &TrainConfig) -> Result<AblationRun> {
    base.validate()?;
    let dataset = base.load_data()?;
    run_ablation_on(base, &dataset)
}

/// Trains every toggle combination with `base`'s seed, split and recipe.
pub fn run_ablation_on(base: &TrainConfig, dataset: &Dataset) -> Result<AblationRun> {
    base.validate()?;
    let split = subject_disjoint_split(&dataset.metas, base.train_fraction, base.seed)?;
    let labels = dataset.labels();
    let eval_metas: Vec<ClipMeta> = split.eval.iter().map(|&i| dataset.metas[i].clone()).collect();
    // frozen-only inputs depend on (placeholders, prior_lora) alone
    let mut inputs: HashMap<(bool, bool), Vec<ModelInput>> = HashMap::new();
    let mut rows = Vec::with_capacity(8);
    let mut preds = HashMap::new();
    for toggles in ABLATION_ORDER {
        let config = base.with_toggles(toggles);
        let model = config.build_model()?;
        let key = (toggles.placeholders, toggles.prior_lora);
        if let Entry::Vacant(slot) = inputs.entry(key) {
            slot.insert(prepare_inputs(&model, &dataset.with_placeholders(toggles.placeholders).clips)?);
        }
        let out = train_prepared(&config, model, &inputs[&key], &labels, split.clone())?;
        let per_group = group_report(&eval_metas, &out.eval_predictions, &out.eval_predictions)?;
        rows.push(AblationRow {
            variant: variant_name(toggles).to_string(),
            toggles,
            accuracy: out.eval_report.accuracy,
            weighted_f1: out.eval_report.weighted_f1,
            groups: per_group
                .groups
                .iter()
                .map(|g| GroupAccuracy {
                    group: g.group,
                    count: g.count,
                    accuracy: g.accuracy_a,
                })
                .collect(),
            frozen_checksum_preserved: out.checksum_before == out.checksum_after,
        });
        preds.insert(toggles, out.eval_predictions);
    }
    let diagnostic = group_report(
        &eval_metas,
        &preds[&Toggles::new(true, true, true)],
        &preds[&Toggles::new(false, true, true)],
    )?;
    Ok(AblationRun {
        seed: base.seed,
        rows,
        diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn order_covers_every_combination_once() {
        let set: HashSet<Toggles> = ABLATION_ORDER.iter().copied().collect();
        assert_eq!(set.len(), 8);
        assert_eq!(ABLATION_ORDER[0], Toggles::new(false, false, false));
        assert_eq!(ABLATION_ORDER[7], Toggles::default());
        let names: HashSet<&str> = ABLATION_ORDER.iter().map(|&t| variant_name(t)).collect();
        assert_eq!(names.len(), 8);
    }

    #[test]
    fn baseline_is_head_only_cross_entropy() {
        let cfg = TrainConfig::default().with_toggles(ABLATION_ORDER[0]);
        assert!(!cfg.build_model().unwrap().has_adapters());
        let loss = cfg.objective();
        assert_eq!((loss.lambda_kl, loss.w_ufce, loss.w_ce, loss.w_henn), (0.0, 0.0, 1.0, 0.0));
    }
}
