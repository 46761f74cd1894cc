//! Lesion volumes and pneumonia burden in physical units.
//!
//! Total pneumonia volume is GGO + high-opacity. The high-opacity class also
//! carries pleural effusion, so the total overestimates pneumonia whenever
//! effusion is present.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::preprocess::{nearest_index, CropBox};
use crate::volume_io::{voxel_volume_ml, Class, LabelMask, Shape3, Spacing};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantReport {
    pub patient_id: String,
    pub ggo_ml: f64,
    pub high_opacity_ml: f64,
    pub total_pneumonia_ml: f64,
    pub lung_ml: Option<f64>,
    pub burden_pct: Option<f64>,
}

pub const QUANT_CSV_HEADER: &str = "patient_id,ggo_ml,high_ml,pneumonia_ml,lung_ml,burden_pct";

impl QuantReport {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.patient_id,
            self.ggo_ml,
            self.high_opacity_ml,
            self.total_pneumonia_ml,
            opt(self.lung_ml),
            opt(self.burden_pct)
        )
    }
}

pub fn reports_to_csv(reports: &[QuantReport]) -> String {
    let mut out = String::from(QUANT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Voxels of `class_code` times the voxel volume.
pub fn class_volume(mask: &LabelMask, class_code: u8, spacing: Spacing) -> Result<f64> {
    let class = Class::from_code(class_code)?;
    Ok(mask.count(class) as f64 * voxel_volume_ml(spacing)?)
}

/// `100 · (ggo + high-opacity) / lung`, using the mask's lung field.
pub fn pneumonia_burden(mask: &LabelMask, spacing: Spacing) -> Result<f64> {
    let lung_ml = lung_volume(mask, spacing)?
        .ok_or_else(|| Error::data("pneumonia burden needs a lung mask"))?;
    let lesion_ml = class_volume(mask, Class::Ggo.code(), spacing)?
        + class_volume(mask, Class::HighOpacity.code(), spacing)?;
    burden_from_volumes(lesion_ml, lung_ml)
}

pub fn burden_from_volumes(pneumonia_ml: f64, lung_ml: f64) -> Result<f64> {
    if !(lung_ml > 0.0) {
        return Err(Error::data("empty lung mask"));
    }
    Ok(100.0 * pneumonia_ml / lung_ml)
}

fn lung_volume(mask: &LabelMask, spacing: Spacing) -> Result<Option<f64>> {
    let Some(lung) = mask.lung() else {
        return Ok(None);
    };
    let n = lung.iter().filter(|&&b| b).count();
    if n == 0 {
        return Err(Error::data("empty lung mask"));
    }
    Ok(Some(n as f64 * voxel_volume_ml(spacing)?))
}

/// Volumes for one patient; burden only when `lung` (or the mask's own lung
/// field) is available.
pub fn quantify(
    patient_id: &str,
    mask: &LabelMask,
    lung: Option<&LabelMask>,
    spacing: Spacing,
) -> Result<QuantReport> {
    let ggo_ml = class_volume(mask, Class::Ggo.code(), spacing)?;
    let high_opacity_ml = class_volume(mask, Class::HighOpacity.code(), spacing)?;
    let total = ggo_ml + high_opacity_ml;
    let lung_source = match lung {
        Some(l) => {
            if l.shape() != mask.shape() {
                return Err(Error::data("lung mask shape mismatch"));
            }
            Some(l)
        }
        None => mask.lung().is_some().then_some(mask),
    };
    let lung_ml = match lung_source {
        Some(l) => lung_volume(l, spacing)?,
        None => None,
    };
    let burden_pct = lung_ml.map(|l| burden_from_volumes(total, l)).transpose()?;
    Ok(QuantReport {
        patient_id: patient_id.to_owned(),
        ggo_ml,
        high_opacity_ml,
        total_pneumonia_ml: total,
        lung_ml,
        burden_pct,
    })
}

/// Maps per-slice predictions made in `size × size` window space back onto
/// the source voxel grid: nearest-neighbour inverse resize inside
/// `crop_box`, background elsewhere.
pub fn map_prediction_to_source(
    pred: &[Vec<u8>],
    size: usize,
    crop_box: CropBox,
    source_shape: Shape3,
) -> Result<LabelMask> {
    let [d, h, w] = source_shape;
    if !crop_box.fits(h, w) {
        return Err(Error::data(format!(
            "crop box {crop_box:?} inconsistent with source shape {source_shape:?}"
        )));
    }
    if pred.len() != d || pred.iter().any(|p| p.len() != size * size) {
        return Err(Error::data(
            "prediction planes inconsistent with source depth or window size",
        ));
    }
    let (ch, cw) = (crop_box.height(), crop_box.width());
    let rows: Vec<usize> = (0..ch).map(|y| nearest_index(y, size, ch)).collect();
    let cols: Vec<usize> = (0..cw).map(|x| nearest_index(x, size, cw)).collect();
    let mut labels = vec![0u8; d * h * w];
    for (z, plane) in pred.iter().enumerate() {
        for (y, &sy) in rows.iter().enumerate() {
            let dst = &mut labels[(z * h + crop_box.row0 + y) * w..][..w];
            for (x, &sx) in cols.iter().enumerate() {
                dst[crop_box.col0 + x] = plane[sy * size + sx];
            }
        }
    }
    LabelMask::new(source_shape, labels, None)
}
