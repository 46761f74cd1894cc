//! Agreement statistics between reference and automatic segmentations.

use std::fs;
use std::path::Path;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::plots;
use crate::quantify::{quantify, QuantReport};
use crate::volume_io::{Class, LabelMask, Spacing};

/// Significance level used to annotate p-values.
pub const ALPHA: f64 = 0.05;
/// Largest sample evaluated with the exact signed-rank distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// `2TP / (2TP + FP + FN)` over voxels of `class_code`; 1.0 when the class is
/// absent from both masks.
pub fn dice(pred: &LabelMask, gt: &LabelMask, class_code: u8) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::data(format!(
            "shape mismatch: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Class::from_code(class_code)?;
    Ok(dice_labels(pred.labels(), gt.labels(), class_code))
}

pub fn dice_labels(pred: &[u8], gt: &[u8], class_code: u8) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == class_code, g == class_code) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    dice_from_counts(tp, fp, fneg)
}

pub fn dice_from_counts(tp: usize, fp: usize, fneg: usize) -> f64 {
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Mean Dice over lesion classes present in either mask (1.0 when neither
/// mask has a lesion).
pub fn lesion_dice(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    let mut scores = Vec::new();
    for class in Class::LESIONS {
        if pred.count(class) + gt.count(class) > 0 {
            scores.push(dice(pred, gt, class.code())?);
        }
    }
    Ok(if scores.is_empty() {
        1.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    })
}

/// Average (fractional) ranks, 1-based.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Correlation {
    pub rho: f64,
    pub p: f64,
}

/// Spearman rank correlation with a two-sided t-approximation p-value.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::data(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::data("spearman needs at least 3 pairs"));
    }
    let rho = pearson(&average_ranks(xs), &average_ranks(ys))
        .ok_or_else(|| Error::data("constant input: rank correlation undefined"))?;
    let df = xs.len() as f64 - 2.0;
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::numeric(e.to_string()))?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Correlation { rho, p })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    /// `(mean, difference)` per pair.
    pub points: Vec<(f64, f64)>,
}

/// Differences `xs − ys`, their mean, and limits `bias ± 1.96·sd` (n − 1).
pub fn bland_altman(xs: &[f64], ys: &[f64]) -> Result<BlandAltman> {
    if xs.len() != ys.len() {
        return Err(Error::data(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::data("bland-altman needs at least 2 pairs"));
    }
    let diffs: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let bias = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - bias).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let points = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| ((x + y) / 2.0, x - y))
        .collect();
    Ok(BlandAltman {
        bias,
        sd,
        loa_low: bias - 1.96 * sd,
        loa_high: bias + 1.96 * sd,
        points,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Wilcoxon {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub p: f64,
    pub exact: bool,
}

/// Paired signed-rank test, two-sided.
///
/// Zero differences are dropped and tied `|d|` share average ranks. Up to
/// [`WILCOXON_EXACT_MAX_N`] pairs the null distribution is enumerated
/// exactly (over the observed, possibly tied, ranks); above that a normal
/// approximation with tie and continuity corrections is used.
pub fn wilcoxon_signed_rank(xs: &[f64], ys: &[f64]) -> Result<Wilcoxon> {
    if xs.len() != ys.len() {
        return Err(Error::data(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    let diffs: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::data("all differences are zero"));
    }
    let n = diffs.len();
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();

    if n <= WILCOXON_EXACT_MAX_N {
        // ranks are multiples of 1/2, so doubled ranks are integers
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0f64; total + 1];
        counts[0] = 1.0;
        let mut reach = 0;
        for &r in &doubled {
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let w2 = (w_plus * 2.0).round() as usize;
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
        let p = (2.0 * lower.min(upper)).min(1.0);
        return Ok(Wilcoxon {
            w_plus,
            n,
            p,
            exact: true,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let diff = w_plus - mean;
    let z = if diff == 0.0 {
        0.0
    } else {
        (diff.abs() - 0.5).max(0.0) / var.sqrt()
    };
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::numeric(e.to_string()))?;
    let p = (2.0 * (1.0 - normal.cdf(z))).min(1.0);
    Ok(Wilcoxon {
        w_plus,
        n,
        p,
        exact: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample sd; absent for a single value.
    pub sd: Option<f64>,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Self { mean, sd })
    }
}

/// Agreement statistics for one volume type; fields are absent when the
/// statistic is undefined for the data (too few pairs, constant input, all
/// differences zero).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VolumeAgreement {
    pub volume_type: String,
    pub spearman: Option<Correlation>,
    pub bland_altman: Option<BlandAltmanSummary>,
    pub wilcoxon_p: Option<f64>,
    /// `wilcoxon_p < 0.05`.
    pub wilcoxon_significant: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BlandAltmanSummary {
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatientRow {
    pub patient_id: String,
    pub dice_ggo: f64,
    pub dice_high_opacity: f64,
    pub dice_lesion: f64,
    pub reference: QuantReport,
    pub automatic: QuantReport,
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_patients: usize,
    pub dice_ggo: Option<MeanSd>,
    pub dice_high_opacity: Option<MeanSd>,
    /// Patient-level lesion DSC, mean ± sd across patients.
    pub dice_lesion: Option<MeanSd>,
    /// Mean lesion DSC per fold, then mean ± sd across folds.
    pub dice_lesion_across_folds: Option<MeanSd>,
    pub volumes: Vec<VolumeAgreement>,
    pub significance_level: f64,
    #[serde(skip)]
    pub rows: Vec<PatientRow>,
}

/// One patient's automatic and reference masks.
#[derive(Clone, Debug)]
pub struct PatientMasks {
    pub patient_id: String,
    pub predicted: LabelMask,
    pub reference: LabelMask,
    pub spacing: Spacing,
    pub fold: Option<usize>,
}

pub const VOLUME_TYPES: [&str; 3] = ["ggo", "high_opacity", "pneumonia"];

fn agreement(volume_type: &str, reference: &[f64], automatic: &[f64]) -> VolumeAgreement {
    let ba = bland_altman(automatic, reference)
        .ok()
        .map(|b| BlandAltmanSummary {
            bias: b.bias,
            loa_low: b.loa_low,
            loa_high: b.loa_high,
        });
    let wp = wilcoxon_signed_rank(automatic, reference).ok().map(|w| w.p);
    VolumeAgreement {
        volume_type: volume_type.to_owned(),
        spearman: spearman(reference, automatic).ok(),
        bland_altman: ba,
        wilcoxon_p: wp,
        wilcoxon_significant: wp.map(|p| p < ALPHA),
    }
}

fn volume_series(rows: &[PatientRow], kind: &str) -> (Vec<f64>, Vec<f64>) {
    let pick = |q: &QuantReport| match kind {
        "ggo" => q.ggo_ml,
        "high_opacity" => q.high_opacity_ml,
        _ => q.total_pneumonia_ml,
    };
    rows.iter()
        .map(|r| (pick(&r.reference), pick(&r.automatic)))
        .unzip()
}

pub fn build_report(patients: &[PatientMasks]) -> Result<EvalReport> {
    let mut seen = std::collections::HashSet::new();
    let mut rows = Vec::with_capacity(patients.len());
    for p in patients {
        if !seen.insert(p.patient_id.as_str()) {
            return Err(Error::data(format!("duplicate patient {}", p.patient_id)));
        }
        if p.predicted.shape() != p.reference.shape() {
            return Err(Error::data(format!(
                "patient {}: mask shapes differ",
                p.patient_id
            )));
        }
        rows.push(PatientRow {
            patient_id: p.patient_id.clone(),
            dice_ggo: dice(&p.predicted, &p.reference, Class::Ggo.code())?,
            dice_high_opacity: dice(&p.predicted, &p.reference, Class::HighOpacity.code())?,
            dice_lesion: lesion_dice(&p.predicted, &p.reference)?,
            // the reference lung field serves both so burden is comparable
            reference: quantify(&p.patient_id, &p.reference, None, p.spacing)?,
            automatic: quantify(
                &p.patient_id,
                &p.predicted,
                p.reference.lung().is_some().then_some(&p.reference),
                p.spacing,
            )?,
            fold: p.fold,
        });
    }
    let collect = |f: fn(&PatientRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let folds: std::collections::BTreeMap<usize, Vec<f64>> = rows
        .iter()
        .filter_map(|r| r.fold.map(|f| (f, r.dice_lesion)))
        .fold(Default::default(), |mut m, (f, d)| {
            m.entry(f).or_insert_with(Vec::new).push(d);
            m
        });
    let fold_means: Vec<f64> = folds
        .values()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let volumes = VOLUME_TYPES
        .iter()
        .map(|&kind| {
            let (reference, automatic) = volume_series(&rows, kind);
            agreement(kind, &reference, &automatic)
        })
        .collect();
    Ok(EvalReport {
        n_patients: rows.len(),
        dice_ggo: MeanSd::of(&collect(|r| r.dice_ggo)),
        dice_high_opacity: MeanSd::of(&collect(|r| r.dice_high_opacity)),
        dice_lesion: MeanSd::of(&collect(|r| r.dice_lesion)),
        dice_lesion_across_folds: MeanSd::of(&fold_means),
        volumes,
        significance_level: ALPHA,
        rows,
    })
}

impl EvalReport {
    pub fn report_csv(&self) -> String {
        let mut out = String::from(
            "patient_id,fold,dice_ggo,dice_high,dice_lesion,ref_ggo_ml,auto_ggo_ml,ref_high_ml,auto_high_ml,ref_pneumonia_ml,auto_pneumonia_ml,ref_burden_pct,auto_burden_pct\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.patient_id,
                r.fold.map(|f| f.to_string()).unwrap_or_default(),
                r.dice_ggo,
                r.dice_high_opacity,
                r.dice_lesion,
                r.reference.ggo_ml,
                r.automatic.ggo_ml,
                r.reference.high_opacity_ml,
                r.automatic.high_opacity_ml,
                r.reference.total_pneumonia_ml,
                r.automatic.total_pneumonia_ml,
                opt(r.reference.burden_pct),
                opt(r.automatic.burden_pct),
            ));
        }
        out
    }

    /// Writes `report.csv`, `summary.json`, `ba_points.csv`,
    /// `scatter_points.csv` and SVG plots into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write("report.csv", self.report_csv())?;
        write(
            "summary.json",
            serde_json::to_string_pretty(self).map_err(|e| Error::data(e.to_string()))?,
        )?;
        let mut ba = String::from("volume_type,mean_ml,diff_ml\n");
        let mut scatter = String::from("volume_type,patient_id,reference_ml,automatic_ml\n");
        for kind in VOLUME_TYPES {
            let (reference, automatic) = volume_series(&self.rows, kind);
            for ((r, a), row) in reference.iter().zip(&automatic).zip(&self.rows) {
                ba.push_str(&format!("{kind},{},{}\n", (a + r) / 2.0, a - r));
                scatter.push_str(&format!("{kind},{},{r},{a}\n", row.patient_id));
            }
            write(
                &format!("scatter_{kind}.svg"),
                plots::scatter_svg(&format!("{kind} volume (mL)"), &reference, &automatic),
            )?;
            if let Ok(b) = bland_altman(&automatic, &reference) {
                write(
                    &format!("ba_{kind}.svg"),
                    plots::bland_altman_svg(&format!("{kind} volume (mL)"), &b),
                )?;
            }
        }
        write("ba_points.csv", ba)?;
        write("scatter_points.csv", scatter)
    }
}
