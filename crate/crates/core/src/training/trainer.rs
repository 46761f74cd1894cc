//! The epoch loop: augmented mini-batches, SGD, validation, plateau
//! schedule and best-epoch selection.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_value, Configurable};
use crate::error::{Error, Result};
use crate::model::{batch_tensor, Model, ModelSpec, SampleKind, SampleSource};
use crate::nn::{Mode, Session};
use crate::preprocess::{augment, AugmentParams, PreparedVolume, SliceWindow};
use crate::volume_io::{Dataset, Spacing};

use super::folds::FoldSplit;
use super::loss::LossKind;
use super::optim::{sgd_step, Plateau, PlateauConfig, SgdConfig, SgdState};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub stop_lr: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Hard cap independent of the learning-rate stop rule.
    pub max_epochs: usize,
    /// Training samples drawn per epoch after shuffling; 0 uses all.
    pub samples_per_epoch: usize,
    pub augment: bool,
    pub folds: usize,
    pub val_size: usize,
    /// Threads preparing (augmenting) samples; results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-6,
            batch_size: 32,
            plateau_factor: 0.1,
            plateau_patience: 10,
            stop_lr: 1e-7,
            loss: LossKind::Rmi,
            seed: 0,
            max_epochs: 500,
            samples_per_epoch: 0,
            augment: true,
            folds: 5,
            val_size: 32,
            workers: 1,
        }
    }
}

impl Configurable for TrainConfig {
    const SECTION: &'static str = "train";

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr0" => self.lr0 = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "plateau_factor" => self.plateau_factor = parse_value(key, value)?,
            "plateau_patience" => self.plateau_patience = parse_value(key, value)?,
            "stop_lr" => self.stop_lr = parse_value(key, value)?,
            "loss" => self.loss = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "samples_per_epoch" => self.samples_per_epoch = parse_value(key, value)?,
            "augment" => self.augment = parse_value(key, value)?,
            "folds" => self.folds = parse_value(key, value)?,
            "val_size" => self.val_size = parse_value(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            _ => return Err(Error::config(format!("unknown key train.{key}"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config("plateau_factor must lie in (0, 1)"));
        }
        if !(self.stop_lr < self.lr0 && self.lr0 > 0.0) {
            return Err(Error::config("need 0 < stop_lr < lr0"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.plateau_patience == 0 {
            return Err(Error::config(
                "batch_size, max_epochs and plateau_patience must be at least 1",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config(
                "momentum must lie in [0, 1) and weight_decay be non-negative",
            ));
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            factor: self.plateau_factor,
            patience: self.plateau_patience,
            stop_lr: self.stop_lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epochs at whose end the learning rate was cut.
    pub reductions: Vec<usize>,
    pub best_epoch: usize,
    pub stopped_by_lr: bool,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,train_loss,val_loss,lr";

impl TrainHistory {
    /// `lr` is the rate used during that epoch.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_CSV_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One patient prepared at the model's resolution, with label planes in
/// window space.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub id: String,
    pub prepared: PreparedVolume,
    pub labels: Vec<Vec<u8>>,
    pub spacing: Spacing,
}

/// Prepared cases keyed by patient id, recording every id handed out.
#[derive(Default)]
pub struct CaseStore {
    cases: BTreeMap<String, PreparedCase>,
    log: RefCell<BTreeSet<String>>,
}

impl CaseStore {
    pub fn load(data: &Dataset, ids: &[String], image_size: usize) -> Result<Self> {
        let mut cases = BTreeMap::new();
        for id in ids {
            let (vol, mask) = data.load_pair(id)?;
            let prepared = PreparedVolume::new(&vol, image_size)?;
            let labels = (0..prepared.depth())
                .map(|z| prepared.label_slice(&mask, z))
                .collect::<Result<_>>()?;
            cases.insert(
                id.clone(),
                PreparedCase {
                    id: id.clone(),
                    prepared,
                    labels,
                    spacing: vol.spacing(),
                },
            );
        }
        Ok(Self {
            cases,
            log: RefCell::default(),
        })
    }

    pub fn get(&self, id: &str) -> Result<&PreparedCase> {
        self.log.borrow_mut().insert(id.to_owned());
        self.cases
            .get(id)
            .ok_or_else(|| Error::data(format!("unknown patient {id}")))
    }

    /// Ids handed out since the last call.
    pub fn take_access_log(&self) -> BTreeSet<String> {
        std::mem::take(&mut self.log.borrow_mut())
    }
}

/// `(case, sample start)` pairs covering `cases`.
fn sample_index(cases: &[&PreparedCase], kind: SampleKind) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ci, c) in cases.iter().enumerate() {
        let src = SampleSource {
            prepared: &c.prepared,
            labels: Some(&c.labels),
        };
        out.extend(src.sample_starts(kind).into_iter().map(|z| (ci, z)));
    }
    out
}

fn sample_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | position as u64);
    rng
}

/// Planes and targets of one (optionally augmented) sample.
fn build_sample(
    case: &PreparedCase,
    kind: SampleKind,
    start: usize,
    aug: Option<ChaCha8Rng>,
) -> Result<(Vec<f32>, Vec<u8>)> {
    let src = SampleSource {
        prepared: &case.prepared,
        labels: Some(&case.labels),
    };
    let planes = src.planes(kind, start)?;
    let targets = src.targets(kind, start)?;
    let Some(mut rng) = aug else {
        return Ok((planes.concat(), targets.concat()));
    };
    let s = case.prepared.size;
    let window = SliceWindow {
        pixels: crate::tensor::Tensor::from_vec(&[planes.len(), s, s], planes.concat()),
        target_index: start,
        crop_box: case.prepared.crop_box,
        scale: case.prepared.scale(),
    };
    let labels: Vec<Vec<u8>> = targets.iter().map(|t| t.to_vec()).collect();
    let (w, l) = augment(&window, &labels, &AugmentParams::sample(&mut rng))?;
    Ok((w.pixels.into_data(), l.concat()))
}

fn build_batch(
    cases: &[&PreparedCase],
    kind: SampleKind,
    items: &[(usize, usize)],
    rngs: Option<Vec<ChaCha8Rng>>,
    workers: usize,
) -> Result<(crate::tensor::Tensor<f32>, Vec<u8>)> {
    let mut rngs: Vec<Option<ChaCha8Rng>> = match rngs {
        Some(r) => r.into_iter().map(Some).collect(),
        None => vec![None; items.len()],
    };
    let jobs: Vec<_> = items
        .iter()
        .zip(rngs.iter_mut())
        .map(|(&(c, z), r)| (c, z, r.take()))
        .collect();
    let built: Vec<Result<(Vec<f32>, Vec<u8>)>> = if workers > 1 && jobs.len() > 1 {
        let per = jobs.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .chunks(per)
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|(c, z, r)| build_sample(cases[*c], kind, *z, r.clone()))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sample worker panicked"))
                .collect()
        })
    } else {
        jobs.into_iter()
            .map(|(c, z, r)| build_sample(cases[c], kind, z, r))
            .collect()
    };
    let mut data = Vec::new();
    let mut target = Vec::new();
    let mut planes = 0;
    for b in built {
        let (d, t) = b?;
        planes = d.len() / (cases[0].prepared.size * cases[0].prepared.size);
        data.extend(d);
        target.extend(t);
    }
    Ok((
        batch_tensor(kind, items.len(), planes, cases[0].prepared.size, data),
        target,
    ))
}

fn with_context(err: Error, ctx: &str) -> Error {
    match err {
        Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
        other => other,
    }
}

/// Mean loss over `items` in eval mode without augmentation.
pub fn evaluate_loss(
    model: &Model,
    cases: &[&PreparedCase],
    items: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<f64> {
    let kind = model.spec.sample_kind();
    let mut sum = 0.0;
    for batch in items.chunks(cfg.batch_size) {
        let (input, target) = build_batch(cases, kind, batch, None, cfg.workers)?;
        let s = Session::new(&model.store, Mode::Eval, false);
        let logits = model.spec.logits(&s, &input)?;
        sum += cfg.loss.compute(&logits, &target)?.1.total * batch.len() as f64;
    }
    Ok(sum / items.len() as f64)
}

pub struct FoldOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model,
    pub history: TrainHistory,
    /// Patient ids whose data the trainer read.
    pub accessed: BTreeSet<String>,
}

/// Trains `spec` on `train_ids`, monitoring `val_ids`. Test ids are never
/// requested from the store.
pub fn train_fold_cases(
    split: &FoldSplit,
    store: &CaseStore,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<FoldOutcome> {
    train_fold_cases_with(split, store, spec, cfg, &mut |_| {})
}

/// [`train_fold_cases`] reporting each finished epoch to `on_epoch`.
pub fn train_fold_cases_with(
    split: &FoldSplit,
    store: &CaseStore,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FoldOutcome> {
    cfg.validate()?;
    if split.train_ids.is_empty() || split.val_ids.is_empty() {
        return Err(Error::data(
            "training needs non-empty train and validation sets",
        ));
    }
    store.take_access_log();
    let train: Vec<&PreparedCase> = split
        .train_ids
        .iter()
        .map(|id| store.get(id))
        .collect::<Result<_>>()?;
    let val: Vec<&PreparedCase> = split
        .val_ids
        .iter()
        .map(|id| store.get(id))
        .collect::<Result<_>>()?;
    let kind = spec.sample_kind();
    let train_items = sample_index(&train, kind);
    let val_items = sample_index(&val, kind);

    let mut model = Model::init(spec.clone(), cfg.seed)?;
    let mut best = model.clone();
    let mut velocity = SgdState::default();
    let mut plateau = Plateau::new(cfg.lr0, cfg.plateau());
    let mut history = TrainHistory::default();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);

    for epoch in 1..=cfg.max_epochs {
        let lr = plateau.lr;
        let mut order = train_items.clone();
        order.shuffle(&mut shuffle_rng);
        if cfg.samples_per_epoch > 0 {
            order.truncate(cfg.samples_per_epoch);
        }
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let ctx = format!("epoch {epoch} batch {b}");
            let rngs = cfg.augment.then(|| {
                (0..batch.len())
                    .map(|i| sample_rng(cfg.seed, epoch, b * cfg.batch_size + i))
                    .collect()
            });
            let (input, target) = build_batch(&train, kind, batch, rngs, cfg.workers)
                .map_err(|e| with_context(e, &ctx))?;
            let (grads, bn, value) = {
                let s = Session::new(&model.store, Mode::Train, true);
                let logits = model
                    .spec
                    .logits(&s, &input)
                    .map_err(|e| with_context(e, &ctx))?;
                let (loss, parts) = cfg
                    .loss
                    .compute(&logits, &target)
                    .map_err(|e| with_context(e, &ctx))?;
                let mut g = loss.backward();
                (s.named_grads(&mut g), s.take_bn_updates(), parts.total)
            };
            let sgd = SgdConfig {
                lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            };
            sgd_step(&mut model.store, &grads, &mut velocity, sgd)
                .map_err(|e| with_context(e, &ctx))?;
            model.store.apply_bn_updates(&bn);
            loss_sum += value * batch.len() as f64;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_loss = evaluate_loss(&model, &val, &val_items, cfg)
            .map_err(|e| with_context(e, &format!("epoch {epoch} validation")))?;
        let step = plateau
            .update(val_loss)
            .map_err(|e| with_context(e, &format!("epoch {epoch}")))?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        on_epoch(&record);
        history.records.push(record);
        if step.improved {
            best = model.clone();
            history.best_epoch = epoch;
        }
        if step.reduced {
            history.reductions.push(epoch);
        }
        if step.stop {
            history.stopped_by_lr = true;
            break;
        }
    }
    Ok(FoldOutcome {
        model: best,
        history,
        accessed: store.take_access_log(),
    })
}

pub fn train_fold(
    split: &FoldSplit,
    data: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<FoldOutcome> {
    let ids: Vec<String> = split
        .train_ids
        .iter()
        .chain(&split.val_ids)
        .cloned()
        .collect();
    let store = CaseStore::load(data, &ids, spec.image_size())?;
    train_fold_cases(split, &store, spec, cfg)
}
