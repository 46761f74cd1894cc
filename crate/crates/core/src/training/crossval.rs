//! K-fold cross-validation: one model per fold, each patient predicted once
//! by the model that held it out.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluate::PatientMasks;
use crate::model::{Model, ModelSpec};
use crate::quantify::map_prediction_to_source;
use crate::volume_io::{save_mask, Dataset, LabelMask};

use super::folds::{make_folds, FoldSplit};
use super::trainer::{train_fold_cases, CaseStore, TrainConfig, TrainHistory};

pub struct FoldResult {
    pub split: FoldSplit,
    pub history: TrainHistory,
    pub weights_path: PathBuf,
    pub accessed: BTreeSet<String>,
}

pub struct CrossValOutcome {
    pub folds: Vec<FoldResult>,
    /// Patient id → (fold, predicted mask on the source grid).
    pub predictions: BTreeMap<String, (usize, LabelMask)>,
}

impl CrossValOutcome {
    /// Pairs each prediction with its reference mask for evaluation.
    pub fn patient_masks(&self, data: &Dataset) -> Result<Vec<PatientMasks>> {
        self.predictions
            .iter()
            .map(|(id, (fold, pred))| {
                let (vol, reference) = data.load_pair(id)?;
                Ok(PatientMasks {
                    patient_id: id.clone(),
                    predicted: pred.clone(),
                    reference,
                    spacing: vol.spacing(),
                    fold: Some(*fold),
                })
            })
            .collect()
    }
}

pub fn fold_weights_name(k: usize) -> String {
    format!("fold{k}.weights")
}

/// Runs every fold in `folds` and writes, under `out_dir`:
/// `fold{k}.weights`, `fold{k}_history.csv`, `folds.json`, and one
/// `predictions/{id}.mask` per patient.
pub fn cross_validate_splits(
    data: &Dataset,
    folds: Vec<FoldSplit>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
) -> Result<CrossValOutcome> {
    let out_dir = out_dir.as_ref();
    let pred_dir = out_dir.join("predictions");
    fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
    let folds_json =
        serde_json::to_string_pretty(&folds).map_err(|e| Error::data(e.to_string()))?;
    let folds_path = out_dir.join("folds.json");
    fs::write(&folds_path, folds_json).map_err(|e| Error::io(&folds_path, e))?;

    let store = CaseStore::load(data, &data.ids(), spec.image_size())?;
    let mut results = Vec::new();
    let mut predictions = BTreeMap::new();
    for split in folds {
        let k = split.fold_index;
        let outcome = train_fold_cases(&split, &store, spec, cfg)?;
        if let Some(leak) = split
            .test_ids
            .iter()
            .find(|id| outcome.accessed.contains(*id))
        {
            return Err(Error::data(format!(
                "fold {k} touched held-out patient {leak} during training"
            )));
        }
        let weights_path = out_dir.join(fold_weights_name(k));
        outcome.model.save(&weights_path)?;
        outcome
            .history
            .write_csv(out_dir.join(format!("fold{k}_history.csv")))?;
        let model = Model::load(&weights_path)?;
        for id in &split.test_ids {
            let case = store.get(id)?;
            let planes = model.predict_planes(&case.prepared, cfg.batch_size)?;
            let p = &case.prepared;
            let mask = map_prediction_to_source(&planes, p.size, p.crop_box, p.source_shape)?
                .with_spacing(case.spacing)?;
            save_mask(&mask, pred_dir.join(format!("{id}.mask")))?;
            if predictions.insert(id.clone(), (k, mask)).is_some() {
                return Err(Error::data(format!(
                    "patient {id} predicted by more than one fold"
                )));
            }
        }
        store.take_access_log();
        results.push(FoldResult {
            split,
            history: outcome.history,
            weights_path,
            accessed: outcome.accessed,
        });
    }
    let missing = data
        .ids()
        .into_iter()
        .find(|id| !predictions.contains_key(id));
    if let Some(id) = missing {
        return Err(Error::data(format!("patient {id} was never predicted")));
    }
    Ok(CrossValOutcome {
        folds: results,
        predictions,
    })
}

pub fn cross_validate(
    data: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
) -> Result<CrossValOutcome> {
    let folds = make_folds(&data.ids(), cfg.folds, cfg.val_size, cfg.seed)?;
    cross_validate_splits(data, folds, spec, cfg, out_dir)
}
