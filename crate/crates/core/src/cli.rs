//! Command-line front end. Every subcommand resolves its configuration as
//! defaults, then the `--config` file, then `--set` pairs, then dedicated
//! flags (later wins), and records the result in `run_meta.json`.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 data, 4 numeric.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::baselines::{matched_base_channels, UnetConfig, UnetDims};
use crate::bench::{compare_csv, compare_models, run_suite, LabelledCase};
use crate::config::{parse_key_values, read_key_values, Configurable, KeyValues};
use crate::error::{Error, Result};
use crate::evaluate::{build_report, PatientMasks};
use crate::model::{Model, ModelSpec};
use crate::network::NetworkConfig;
use crate::preprocess::PreparedVolume;
use crate::quantify::{quantify, reports_to_csv};
use crate::synthdata::{generate_cohort, PhantomSpec};
use crate::training::{cross_validate, make_folds, train_fold, FoldSplit, TrainConfig};
use crate::volume_io::{load_mask_any, load_volume, save_mask, Dataset, Spacing};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io { .. } | Error::Format { .. } | Error::Data(_) => EXIT_DATA,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "pneumoseg",
    version,
    about = "Pneumonia lesion segmentation and quantification on chest CT"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Accelerated,
    Portable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ours,
    Unet2d,
    Unet3d,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` file, e.g. `train.lr0 = 0.001`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides one config entry; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Device::Portable)]
    pub device: Device,
    /// Threads for sample preparation.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ModelKind::Ours)]
    pub model: ModelKind,
    /// Resize target; applies to whichever model is selected.
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a deterministic phantom cohort.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one fold of the split protocol.
    Train {
        /// Cohort manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Train every fold and predict each held-out patient once.
    Crossval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Segment one volume.
    Predict {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Lesion volumes (and burden when a lung field is known) as CSV.
    Quantify {
        #[arg(long)]
        mask: PathBuf,
        /// Mask whose lung field defines the lung volume.
        #[arg(long)]
        lung: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        id: Option<String>,
        /// dz,dy,dx in mm when the mask header carries no spacing.
        #[arg(long, value_parser = parse_spacing)]
        spacing: Option<Spacing>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare predicted masks against references, matched by file name.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `folds.json` from a crossval run, for per-fold statistics.
        #[arg(long)]
        folds: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Inference time and peak memory per model and slice count.
    Bench {
        /// Trained weight files; untrained width-matched models otherwise.
        #[arg(long)]
        weights: Vec<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ModelKind::Ours, ModelKind::Unet2d, ModelKind::Unet3d])]
        models: Vec<ModelKind>,
        #[arg(long, value_delimiter = ',', default_values_t = [16, 120, 500])]
        slices: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long)]
        image_size: Option<usize>,
        /// Labelled cohort for the per-class Dice comparison table.
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_spacing(s: &str) -> std::result::Result<Spacing, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [dz, dy, dx] => Spacing::new(dz, dy, dx).map_err(|e| e.to_string()),
        _ => Err("expected dz,dy,dx".into()),
    }
}

/// Config file entries overlaid with `--set` pairs.
fn key_values(common: &Common) -> Result<KeyValues> {
    let mut kv = match &common.config {
        Some(p) => read_key_values(p).map_err(|e| match e {
            Error::Io { path, source } => Error::config(format!("{}: {source}", path.display())),
            other => other,
        })?,
        None => KeyValues::new(),
    };
    let overrides = parse_key_values(&common.set.join("\n"))?;
    kv.extend(overrides);
    for key in kv.keys() {
        let section = key.split('.').next().unwrap_or("");
        if !["network", "unet", "train"].contains(&section) || !key.contains('.') {
            return Err(Error::config(format!("unknown config key {key}")));
        }
    }
    Ok(kv)
}

fn train_config(common: &Common, kv: &KeyValues) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    cfg.apply(kv)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w.max(1);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_spec(kind: ModelKind, image_size: Option<usize>, kv: &KeyValues) -> Result<ModelSpec> {
    let mut net = NetworkConfig::default();
    let mut unet = UnetConfig::default();
    net.apply(kv)?;
    unet.apply(kv)?;
    if let Some(s) = image_size {
        net.image_size = s;
        unet.image_size = s;
        net.validate()?;
        unet.validate()?;
    }
    Ok(match kind {
        ModelKind::Ours => ModelSpec::Ours(net),
        ModelKind::Unet2d => ModelSpec::Unet2d(unet),
        ModelKind::Unet3d => ModelSpec::Unet3d(unet),
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::data(e.to_string()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn write_text(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write_text(
        path,
        serde_json::to_string_pretty(value).map_err(|e| Error::data(e.to_string()))? + "\n",
    )
}

/// Directory that receives `run_meta.json` for an output path.
fn meta_dir(out: &Path, out_is_dir: bool) -> PathBuf {
    if out_is_dir {
        out.to_path_buf()
    } else {
        out.parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf()
    }
}

fn write_run_meta(
    dir: &Path,
    command: &str,
    common: &Common,
    paths: serde_json::Value,
    resolved: serde_json::Value,
) -> Result<()> {
    let meta = json!({
        "command": command,
        "config_file": common.config,
        "overrides": common.set,
        "paths": paths,
        "seed": common.seed,
        "device": {
            "requested": common.device,
            "used": Device::Portable,
            "note": "this build has no accelerated backend; portable CPU kernels are always used",
        },
        "resolved": resolved,
        "code_version": {
            "package": env!("CARGO_PKG_VERSION"),
            "revision": env!("PNEUMOSEG_GIT_REV"),
        },
    });
    write_json(&dir.join("run_meta.json"), &meta)
}

fn cmd_synth(n: usize, out: &Path, common: &Common) -> Result<()> {
    key_values(common)?;
    let seed = common.seed.unwrap_or(0);
    let base = PhantomSpec::base();
    generate_cohort(n, &base, seed, out)?;
    write_run_meta(
        out,
        "synth",
        common,
        json!({ "out": out }),
        json!({ "n": n, "seed": seed, "base_phantom": format!("{base:?}") }),
    )
}

fn cmd_train(
    data: &Path,
    out: &Path,
    fold: usize,
    model: &ModelArgs,
    common: &Common,
) -> Result<()> {
    let kv = key_values(common)?;
    let cfg = train_config(common, &kv)?;
    let spec = model_spec(model.model, model.image_size, &kv)?;
    let ds = Dataset::load(data)?;
    let folds = make_folds(&ds.ids(), cfg.folds, cfg.val_size, cfg.seed)?;
    let split: &FoldSplit = folds
        .get(fold)
        .ok_or_else(|| Error::config(format!("fold {fold} out of range (0..{})", folds.len())))?;
    let outcome = train_fold(split, &ds, &spec, &cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    outcome.model.save(out.join("model.weights"))?;
    outcome.history.write_csv(out.join("history.csv"))?;
    write_json(&out.join("split.json"), &to_json(split)?)?;
    write_run_meta(
        out,
        "train",
        common,
        json!({ "data": data, "out": out }),
        json!({ "model": to_json(&spec)?, "train": to_json(&cfg)?, "fold": fold }),
    )
}

fn cmd_crossval(data: &Path, out: &Path, model: &ModelArgs, common: &Common) -> Result<()> {
    let kv = key_values(common)?;
    let cfg = train_config(common, &kv)?;
    let spec = model_spec(model.model, model.image_size, &kv)?;
    let ds = Dataset::load(data)?;
    let outcome = cross_validate(&ds, &spec, &cfg, out)?;
    build_report(&outcome.patient_masks(&ds)?)?.write(out.join("evaluation"))?;
    write_run_meta(
        out,
        "crossval",
        common,
        json!({ "data": data, "out": out }),
        json!({ "model": to_json(&spec)?, "train": to_json(&cfg)? }),
    )
}

fn cmd_predict(
    weights: &Path,
    volume: &Path,
    out: &Path,
    batch: usize,
    common: &Common,
) -> Result<()> {
    key_values(common)?;
    let model = Model::load(weights)?;
    let vol = load_volume(volume)?;
    let mask = model.predict_volume(&vol, batch.max(1))?;
    ensure_parent(out)?;
    save_mask(&mask, out)?;
    write_run_meta(
        &meta_dir(out, false),
        "predict",
        common,
        json!({ "weights": weights, "volume": volume, "out": out }),
        json!({ "model": to_json(&model.spec)?, "batch": batch }),
    )
}

fn cmd_quantify(
    mask: &Path,
    lung: Option<&Path>,
    out: &Path,
    id: Option<&str>,
    spacing: Option<Spacing>,
    common: &Common,
) -> Result<()> {
    key_values(common)?;
    let m = load_mask_any(mask)?;
    let lung_mask = lung.map(load_mask_any).transpose()?;
    let spacing = spacing
        .or(m.spacing())
        .ok_or_else(|| Error::config("mask carries no spacing; pass --spacing dz,dy,dx"))?;
    let id = id.map(str::to_owned).unwrap_or_else(|| stem(mask));
    let report = quantify(&id, &m, lung_mask.as_ref(), spacing)?;
    write_text(out, reports_to_csv(&[report]))?;
    write_run_meta(
        &meta_dir(out, false),
        "quantify",
        common,
        json!({ "mask": mask, "lung": lung, "out": out }),
        json!({ "spacing": spacing.as_array(), "patient_id": id }),
    )
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn mask_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mask"))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_evaluate(
    pred: &Path,
    gt: &Path,
    out: &Path,
    folds: Option<&Path>,
    common: &Common,
) -> Result<()> {
    key_values(common)?;
    let fold_of = match folds {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let splits: Vec<FoldSplit> =
                serde_json::from_str(&text).map_err(|e| Error::format(p, e.to_string()))?;
            splits
                .into_iter()
                .flat_map(|s| s.test_ids.into_iter().map(move |id| (id, s.fold_index)))
                .collect()
        }
        None => std::collections::BTreeMap::new(),
    };
    let mut patients = Vec::new();
    for p in mask_files(pred)? {
        let id = stem(&p);
        let gt_path = gt.join(p.file_name().expect("listed files have names"));
        if !gt_path.is_file() {
            return Err(Error::data(format!(
                "no reference mask for {id} in {}",
                gt.display()
            )));
        }
        let reference = load_mask_any(&gt_path)?;
        let predicted = load_mask_any(&p)?;
        let spacing = reference
            .spacing()
            .or(predicted.spacing())
            .ok_or_else(|| Error::data(format!("{id}: neither mask records voxel spacing")))?;
        patients.push(PatientMasks {
            fold: fold_of.get(&id).copied(),
            patient_id: id,
            predicted,
            reference,
            spacing,
        });
    }
    if patients.is_empty() {
        return Err(Error::data(format!("no .mask files in {}", pred.display())));
    }
    build_report(&patients)?.write(out)?;
    write_run_meta(
        out,
        "evaluate",
        common,
        json!({ "pred": pred, "gt": gt, "out": out, "folds": folds }),
        json!({}),
    )
}

/// Untrained models whose parameter counts are matched to ours.
fn bench_models(
    kinds: &[ModelKind],
    image_size: Option<usize>,
    kv: &KeyValues,
    seed: u64,
) -> Result<Vec<Model>> {
    let ours = model_spec(ModelKind::Ours, image_size, kv)?;
    let target = Model::init(ours.clone(), seed)?.store.num_params();
    let explicit_width = kv.contains_key("unet.base_channels");
    kinds
        .iter()
        .map(|&k| {
            let mut spec = model_spec(k, image_size, kv)?;
            if !explicit_width {
                if let ModelSpec::Unet2d(c) | ModelSpec::Unet3d(c) = &mut spec {
                    let dims = if k == ModelKind::Unet2d {
                        UnetDims::Two
                    } else {
                        UnetDims::Three
                    };
                    c.base_channels = matched_base_channels(c, dims, target);
                }
            }
            Model::init(spec, seed)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    weights: &[PathBuf],
    kinds: &[ModelKind],
    slices: &[usize],
    reps: usize,
    batch: usize,
    image_size: Option<usize>,
    test_data: Option<&Path>,
    out: &Path,
    common: &Common,
) -> Result<()> {
    let kv = key_values(common)?;
    let models = if weights.is_empty() {
        bench_models(kinds, image_size, &kv, common.seed.unwrap_or(0))?
    } else {
        weights
            .iter()
            .map(Model::load)
            .collect::<Result<Vec<_>>>()?
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let suite = run_suite(&models, slices, reps, batch);
    write_json(&out.join("bench.json"), &to_json(&suite)?)?;
    if let Some(td) = test_data {
        let ds = Dataset::load(td)?;
        let sizes: std::collections::BTreeSet<usize> =
            models.iter().map(|m| m.spec.image_size()).collect();
        if sizes.len() != 1 {
            return Err(Error::config("compared models must share one image size"));
        }
        let size = *sizes.iter().next().expect("non-empty");
        let mut cases = Vec::new();
        for id in ds.ids() {
            let (vol, mask) = ds.load_pair(&id)?;
            cases.push((PreparedVolume::new(&vol, size)?, mask));
        }
        let labelled: Vec<LabelledCase> = cases
            .iter()
            .map(|(p, m)| LabelledCase {
                prepared: p,
                reference: m,
            })
            .collect();
        let rows = compare_models(&models, &labelled, reps, batch)?;
        write_text(&out.join("compare.csv"), compare_csv(&rows))?;
        write_json(&out.join("compare.json"), &to_json(&rows)?)?;
    }
    let specs: Vec<serde_json::Value> = models
        .iter()
        .map(|m| to_json(&m.spec))
        .collect::<Result<_>>()?;
    write_run_meta(
        out,
        "bench",
        common,
        json!({ "weights": weights, "test_data": test_data, "out": out }),
        json!({ "models": specs, "slices": slices, "repetitions": reps, "batch": batch }),
    )
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { n, out, common } => cmd_synth(*n, out, common),
        Command::Train {
            data,
            out,
            fold,
            model,
            common,
        } => cmd_train(data, out, *fold, model, common),
        Command::Crossval {
            data,
            out,
            model,
            common,
        } => cmd_crossval(data, out, model, common),
        Command::Predict {
            weights,
            volume,
            out,
            batch,
            common,
        } => cmd_predict(weights, volume, out, *batch, common),
        Command::Quantify {
            mask,
            lung,
            out,
            id,
            spacing,
            common,
        } => cmd_quantify(mask, lung.as_deref(), out, id.as_deref(), *spacing, common),
        Command::Evaluate {
            pred,
            gt,
            out,
            folds,
            common,
        } => cmd_evaluate(pred, gt, out, folds.as_deref(), common),
        Command::Bench {
            weights,
            models,
            slices,
            reps,
            batch,
            image_size,
            test_data,
            out,
            common,
        } => cmd_bench(
            weights,
            models,
            slices,
            *reps,
            *batch,
            *image_size,
            test_data.as_deref(),
            out,
            common,
        ),
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code. Messages go to stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Error::config("x")), EXIT_USAGE);
        assert_eq!(exit_code(&Error::data("x")), EXIT_DATA);
        assert_eq!(exit_code(&Error::numeric("x")), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::format("f", "x")), EXIT_DATA);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["pneumoseg", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["pneumoseg", "synth", "--out", "x"]), EXIT_USAGE);
        assert_eq!(run(["pneumoseg", "--help"]), EXIT_OK);
    }

    #[test]
    fn flags_override_file_and_set() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.cfg");
        fs::write(
            &cfg_path,
            "train.seed = 3\ntrain.lr0 = 0.5\nnetwork.image_size = 32\n",
        )
        .unwrap();
        let common = Common {
            config: Some(cfg_path),
            set: vec!["train.lr0 = 0.25".into()],
            seed: Some(9),
            device: Device::Portable,
            workers: Some(2),
        };
        let kv = key_values(&common).unwrap();
        let cfg = train_config(&common, &kv).unwrap();
        assert_eq!((cfg.seed, cfg.lr0, cfg.workers), (9, 0.25, 2));
        assert_eq!(
            model_spec(ModelKind::Ours, None, &kv).unwrap().image_size(),
            32
        );
        assert_eq!(
            model_spec(ModelKind::Ours, Some(48), &kv)
                .unwrap()
                .image_size(),
            48
        );
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let common = Common {
            config: None,
            set: vec!["bogus = 1".into()],
            seed: None,
            device: Device::Portable,
            workers: None,
        };
        assert!(matches!(key_values(&common), Err(Error::Config(_))));
        let common = Common {
            set: vec!["train.nope = 1".into()],
            ..common
        };
        let kv = key_values(&common).unwrap();
        assert!(matches!(train_config(&common, &kv), Err(Error::Config(_))));
    }

    #[test]
    fn spacing_flag_parses_three_values() {
        assert_eq!(
            parse_spacing("1.25,0.7,0.7").unwrap().as_array(),
            [1.25, 0.7, 0.7]
        );
        assert!(parse_spacing("1,2").is_err());
        assert!(parse_spacing("1,2,-3").is_err());
    }
}
