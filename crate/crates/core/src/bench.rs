//! Inference timing and peak-memory harness, and the side-by-side model
//! comparison table.
//!
//! Peak memory comes from [`TrackingAllocator`], which a binary opts into
//! with `#[global_allocator]`. Without it, memory is reported as absent.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::evaluate::dice;
use crate::model::Model;
use crate::preprocess::PreparedVolume;
use crate::quantify::map_prediction_to_source;
use crate::synthdata::{generate_phantom, PhantomSpec};
use crate::volume_io::{Class, LabelMask};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// System allocator that tracks live and peak heap bytes.
pub struct TrackingAllocator;

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
            ACTIVE.store(true, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size
                    - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

pub fn tracking_active() -> bool {
    ACTIVE.load(Ordering::Relaxed)
}

/// Runs `f` and returns its result with the peak heap growth above the
/// level at entry, or `None` when tracking is not installed.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, Option<usize>) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let r = f();
    let peak = PEAK.load(Ordering::Relaxed);
    (r, tracking_active().then(|| peak.saturating_sub(base)))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    /// Benchmarks assume nothing else loads the machine.
    pub exclusive: bool,
}

impl MachineInfo {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            exclusive: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub n_slices: usize,
    pub image_size: usize,
    pub num_params: usize,
    pub batch_size: usize,
    /// Device class the times were measured on.
    pub device: String,
    /// Median inference wall time in seconds, preprocessing excluded.
    pub wall_time_s: f64,
    pub times_s: Vec<f64>,
    /// Median absolute deviation of `times_s` over the median.
    pub relative_mad: f64,
    pub peak_memory_bytes: Option<usize>,
    /// Background, GGO and high-opacity Dice when a labelled test set was
    /// supplied.
    pub dice: Option<[f64; 3]>,
    pub machine: MachineInfo,
    pub note: String,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A phantom of `n_slices` slices prepared at the model's resolution.
pub fn synthetic_input(n_slices: usize, image_size: usize) -> Result<PreparedVolume> {
    if n_slices == 0 {
        return Err(Error::data("benchmark needs at least one slice"));
    }
    let mut spec = PhantomSpec::base();
    spec.shape[0] = n_slices;
    let zc = (n_slices as f64 - 1.0) / 2.0;
    spec.body.center[0] = zc;
    for lung in &mut spec.lungs {
        lung.center[0] = zc;
        lung.radii[0] = lung.radii[0].max(0.6 * n_slices as f64);
    }
    PreparedVolume::new(&generate_phantom(&spec)?.volume, image_size)
}

/// Median inference time over `repetitions` runs after one warm-up, plus
/// peak heap growth during a separate run.
pub fn benchmark(
    model: &Model,
    n_slices: usize,
    repetitions: usize,
    batch_size: usize,
) -> Result<BenchReport> {
    if repetitions == 0 {
        return Err(Error::config("repetitions must be at least 1"));
    }
    let input = synthetic_input(n_slices, model.spec.image_size())?;
    model.predict_planes(&input, batch_size)?;
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        model.predict_planes(&input, batch_size)?;
        times.push(t.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
    }
    let (res, peak) = measure_peak(|| model.predict_planes(&input, batch_size).map(drop));
    res?;
    let wall = median(&times);
    let deviations: Vec<f64> = times.iter().map(|t| (t - wall).abs()).collect();
    Ok(BenchReport {
        model: model.spec.name().into(),
        n_slices,
        image_size: model.spec.image_size(),
        num_params: model.store.num_params(),
        batch_size,
        device: "portable-cpu".into(),
        wall_time_s: wall,
        times_s: times,
        relative_mad: median(&deviations) / wall,
        peak_memory_bytes: peak,
        dice: None,
        machine: MachineInfo::current(),
        note: "inference only; cropping, normalization and resizing excluded".into(),
    })
}

/// Mean per-patient Dice for each class.
pub fn class_dice(pairs: &[(LabelMask, LabelMask)]) -> Result<[f64; 3]> {
    if pairs.is_empty() {
        return Err(Error::data("no test cases"));
    }
    let mut out = [0.0; 3];
    for (pred, gt) in pairs {
        for class in Class::ALL {
            out[class.code() as usize] += dice(pred, gt, class.code())? / pairs.len() as f64;
        }
    }
    Ok(out)
}

pub struct LabelledCase<'a> {
    pub prepared: &'a PreparedVolume,
    pub reference: &'a LabelMask,
}

/// One report row per model: Dice on `cases` plus the 16-slice compute
/// columns.
pub fn compare_models(
    models: &[Model],
    cases: &[LabelledCase],
    repetitions: usize,
    batch_size: usize,
) -> Result<Vec<BenchReport>> {
    if models.is_empty() {
        return Err(Error::data("missing model"));
    }
    models
        .iter()
        .map(|m| {
            let mut pairs = Vec::with_capacity(cases.len());
            for c in cases {
                if c.prepared.size != m.spec.image_size() {
                    return Err(Error::data(format!(
                        "{} expects image size {}",
                        m.spec.name(),
                        m.spec.image_size()
                    )));
                }
                let planes = m.predict_planes(c.prepared, batch_size)?;
                let p = c.prepared;
                pairs.push((
                    map_prediction_to_source(&planes, p.size, p.crop_box, p.source_shape)?,
                    c.reference.clone(),
                ));
            }
            let mut report = benchmark(m, 16, repetitions, batch_size)?;
            report.dice = Some(class_dice(&pairs)?);
            Ok(report)
        })
        .collect()
}

/// Outcome of one benchmark cell; failures are recorded, not raised.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchEntry {
    pub model: String,
    pub n_slices: usize,
    pub report: Option<BenchReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchSuite {
    pub machine: MachineInfo,
    pub entries: Vec<BenchEntry>,
}

/// Runs every (model, slice count) pair serially.
pub fn run_suite(
    models: &[Model],
    slice_counts: &[usize],
    repetitions: usize,
    batch_size: usize,
) -> BenchSuite {
    let mut entries = Vec::new();
    for m in models {
        for &n in slice_counts {
            let (report, error) = match benchmark(m, n, repetitions, batch_size) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            entries.push(BenchEntry {
                model: m.spec.name().into(),
                n_slices: n,
                report,
                error,
            });
        }
    }
    BenchSuite {
        machine: MachineInfo::current(),
        entries,
    }
}

pub const COMPARE_CSV_HEADER: &str = "model,dice_bg,dice_ggo,dice_high,time_s,memory_bytes";

pub fn compare_csv(rows: &[BenchReport]) -> String {
    let mut out = format!("{COMPARE_CSV_HEADER}\n");
    for r in rows {
        let d = r.dice.unwrap_or([f64::NAN; 3]);
        let mem = r
            .peak_memory_bytes
            .map(|m| m.to_string())
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.model, d[0], d[1], d[2], r.wall_time_s, mem
        );
    }
    out
}
