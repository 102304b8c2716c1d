use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clip::ClipMeta;
use crate::error::{Error, Result};
use crate::rng::{domain, keyed};

/// Clip indices of each partition plus the subjects behind them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub train_subjects: Vec<String>,
    pub eval_subjects: Vec<String>,
}

/// Assigns whole subjects to the training side; `round(train_frac · S)` of
/// them, kept within `[1, S − 1]`.
pub fn subject_disjoint_split(metas: &[ClipMeta], train_frac: f64, seed: u64) -> Result<Split> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::invalid(format!("train fraction {train_frac} must lie in (0, 1)")));
    }
    let mut subjects: Vec<String> = metas.iter().map(|m| m.subject_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if subjects.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 subjects, found {}", subjects.len())));
    }
    subjects.shuffle(&mut keyed(seed, &[domain::SPLIT]));
    let n_train = ((train_frac * subjects.len() as f64).round() as usize).clamp(1, subjects.len() - 1);
    let eval_subjects = subjects.split_off(n_train);
    let mut train_subjects = subjects;
    train_subjects.sort();
    let mut eval_subjects = eval_subjects;
    eval_subjects.sort();
    let train_set: BTreeSet<&str> = train_subjects.iter().map(String::as_str).collect();
    let (train, eval) = (0..metas.len()).partition(|&i| train_set.contains(metas[i].subject_id.as_str()));
    Ok(Split {
        train,
        eval,
        train_subjects,
        eval_subjects,
    })
}
