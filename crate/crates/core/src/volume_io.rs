//! CT volumes, label masks, their on-disk container, and dataset manifests.
//!
//! # Container layout
//!
//! Every file starts with a 128-byte little-endian header:
//!
//! | offset | size | field                                          |
//! |--------|------|------------------------------------------------|
//! | 0      | 4    | magic `PSEG`                                   |
//! | 4      | 2    | format version (`1`)                           |
//! | 6      | 1    | kind: `1` volume, `2` label mask               |
//! | 7      | 1    | dtype: `1` i16, `2` u8                         |
//! | 8      | 12   | shape as 3 × u32 (slices, rows, cols)          |
//! | 20     | 24   | spacing as 3 × f64 mm (dz, dy, dx); masks may store zeros |
//! | 44     | 1    | flags: bit 0 set when a lung plane follows     |
//! | 45     | 3    | reserved, zero                                 |
//! | 48     | 64   | patient id, UTF-8, NUL padded                  |
//! | 112    | 16   | reserved, zero                                 |
//!
//! Volumes follow with `slices·rows·cols` i16 HU values. Masks follow with
//! the same number of u8 class codes and, when flagged, one u8 (0/1) per
//! voxel for the lung mask. Voxels are slice-major.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PSEG";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 128;
pub const HU_MIN: i16 = -3024;
pub const HU_MAX: i16 = 3071;
const PATIENT_ID_LEN: usize = 64;

const KIND_VOLUME: u8 = 1;
const KIND_MASK: u8 = 2;
const DTYPE_I16: u8 = 1;
const DTYPE_U8: u8 = 2;
const FLAG_LUNG: u8 = 1;

/// `(slices, rows, cols)`.
pub type Shape3 = [usize; 3];

/// Physical voxel size in millimetres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spacing {
    pub dz: f64,
    pub dy: f64,
    pub dx: f64,
}

impl Spacing {
    pub fn new(dz: f64, dy: f64, dx: f64) -> Result<Self> {
        let s = Spacing { dz, dy, dx };
        s.validate()?;
        Ok(s)
    }

    pub fn isotropic(mm: f64) -> Result<Self> {
        Self::new(mm, mm, mm)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.dz, self.dy, self.dx]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(())
        } else {
            Err(Error::data(format!(
                "non-positive spacing ({}, {}, {})",
                self.dz, self.dy, self.dx
            )))
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dz, self.dy, self.dx]
    }
}

/// Millilitres per voxel: `dz·dy·dx / 1000`.
pub fn voxel_volume_ml(spacing: Spacing) -> Result<f64> {
    spacing.validate()?;
    Ok(spacing.dz * spacing.dy * spacing.dx / 1000.0)
}

/// Lesion classes carried by label masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Ggo = 1,
    HighOpacity = 2,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Background, Class::Ggo, Class::HighOpacity];
    pub const LESIONS: [Class; 2] = [Class::Ggo, Class::HighOpacity];
    pub const COUNT: usize = 3;

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Class::Background),
            1 => Ok(Class::Ggo),
            2 => Ok(Class::HighOpacity),
            c => Err(Error::data(format!("unknown class code {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::Ggo => "ggo",
            Class::HighOpacity => "high_opacity",
        }
    }
}

fn check_shape(shape: Shape3) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::data(format!(
            "all dimensions must be >= 1, got {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::data("volume too large"))
}

/// A CT scan in Hounsfield units, slice-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    patient_id: String,
    shape: Shape3,
    spacing: Spacing,
    voxels: Vec<i16>,
}

impl CtVolume {
    pub fn new(
        patient_id: impl Into<String>,
        shape: Shape3,
        spacing: Spacing,
        voxels: Vec<i16>,
    ) -> Result<Self> {
        let patient_id = patient_id.into();
        let n = check_shape(shape)?;
        spacing.validate()?;
        if voxels.len() != n {
            return Err(Error::data(format!(
                "expected {n} voxels for shape {shape:?}, got {}",
                voxels.len()
            )));
        }
        if let Some(v) = voxels.iter().find(|&&v| !(HU_MIN..=HU_MAX).contains(&v)) {
            return Err(Error::data(format!(
                "HU out of range: {v} not in [{HU_MIN}, {HU_MAX}]"
            )));
        }
        check_patient_id(&patient_id)?;
        Ok(Self {
            patient_id,
            shape,
            spacing,
            voxels,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn slice(&self, z: usize) -> &[i16] {
        let plane = self.shape[1] * self.shape[2];
        &self.voxels[z * plane..(z + 1) * plane]
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> i16 {
        self.voxels[(z * self.shape[1] + y) * self.shape[2] + x]
    }
}

/// Per-voxel classes plus an optional lung-field mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    shape: Shape3,
    labels: Vec<u8>,
    lung: Option<Vec<bool>>,
    spacing: Option<Spacing>,
}

impl LabelMask {
    pub fn new(shape: Shape3, labels: Vec<u8>, lung: Option<Vec<bool>>) -> Result<Self> {
        let n = check_shape(shape)?;
        if labels.len() != n {
            return Err(Error::data(format!(
                "expected {n} labels for shape {shape:?}, got {}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c > 2) {
            return Err(Error::data(format!("unknown class code {bad}")));
        }
        if let Some(l) = &lung {
            if l.len() != n {
                return Err(Error::data(format!(
                    "lung mask has {} voxels, expected {n}",
                    l.len()
                )));
            }
        }
        Ok(Self {
            shape,
            labels,
            lung,
            spacing: None,
        })
    }

    pub fn background(shape: Shape3) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(shape, vec![0; n], None)
    }

    /// Attaches the physical spacing stored alongside the labels on disk.
    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        spacing.validate()?;
        self.spacing = Some(spacing);
        Ok(self)
    }

    pub fn with_lung(mut self, lung: Vec<bool>) -> Result<Self> {
        if lung.len() != self.labels.len() {
            return Err(Error::data("lung mask size mismatch"));
        }
        self.lung = Some(lung);
        Ok(self)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn lung(&self) -> Option<&[bool]> {
        self.lung.as_deref()
    }

    pub fn spacing(&self) -> Option<Spacing> {
        self.spacing
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let plane = self.shape[1] * self.shape[2];
        &self.labels[z * plane..(z + 1) * plane]
    }

    pub fn count(&self, class: Class) -> usize {
        let code = class.code();
        self.labels.iter().filter(|&&c| c == code).count()
    }
}

fn check_patient_id(id: &str) -> Result<()> {
    if id.len() > PATIENT_ID_LEN || id.contains(['\0', '\t', '\n', '\r']) {
        return Err(Error::data(format!(
            "patient id {id:?} must be at most {PATIENT_ID_LEN} bytes without NUL, tab or newline"
        )));
    }
    Ok(())
}

struct Header {
    kind: u8,
    dtype: u8,
    shape: Shape3,
    spacing: [f64; 3],
    flags: u8,
    patient_id: String,
}

impl Header {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(MAGIC);
        h[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        h[6] = self.kind;
        h[7] = self.dtype;
        for (i, &d) in self.shape.iter().enumerate() {
            h[8 + 4 * i..12 + 4 * i].copy_from_slice(&(d as u32).to_le_bytes());
        }
        for (i, &s) in self.spacing.iter().enumerate() {
            h[20 + 8 * i..28 + 8 * i].copy_from_slice(&s.to_le_bytes());
        }
        h[44] = self.flags;
        h[48..48 + self.patient_id.len()].copy_from_slice(self.patient_id.as_bytes());
        h
    }

    fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(path, "truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::format(path, "bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported format version {version}"),
            ));
        }
        let u32_at =
            |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let id_bytes = &bytes[48..48 + PATIENT_ID_LEN];
        let id_end = id_bytes
            .iter()
            .position(|&b| b == 0)
            .unwrap_or(PATIENT_ID_LEN);
        let patient_id = std::str::from_utf8(&id_bytes[..id_end])
            .map_err(|_| Error::format(path, "patient id is not UTF-8"))?
            .to_owned();
        Ok(Header {
            kind: bytes[6],
            dtype: bytes[7],
            shape: [u32_at(8), u32_at(12), u32_at(16)],
            spacing: [f64_at(20), f64_at(28), f64_at(36)],
            flags: bytes[44],
            patient_id,
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn body<'a>(path: &Path, bytes: &'a [u8], expected: usize) -> Result<&'a [u8]> {
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} data bytes, found {}", body.len()),
        ));
    }
    Ok(body)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<CtVolume> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let h = Header::decode(path, &bytes)?;
    if h.kind != KIND_VOLUME || h.dtype != DTYPE_I16 {
        return Err(Error::format(path, "not an i16 CT volume"));
    }
    let n = check_shape(h.shape).map_err(|e| Error::format(path, e.to_string()))?;
    let [dz, dy, dx] = h.spacing;
    let spacing = Spacing { dz, dy, dx };
    spacing.validate()?;
    let data = body(path, &bytes, n * 2)?;
    let voxels = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    CtVolume::new(h.patient_id, h.shape, spacing, voxels)
}

pub fn save_volume(volume: &CtVolume, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        kind: KIND_VOLUME,
        dtype: DTYPE_I16,
        shape: volume.shape,
        spacing: volume.spacing.as_array(),
        flags: 0,
        patient_id: volume.patient_id.clone(),
    };
    let mut bytes = Vec::with_capacity(HEADER_LEN + volume.voxels.len() * 2);
    bytes.extend_from_slice(&header.encode());
    for v in &volume.voxels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path.as_ref(), &bytes)
}

/// Loads a mask and checks it against the paired volume's shape.
pub fn load_mask(path: impl AsRef<Path>, expected_shape: Shape3) -> Result<LabelMask> {
    let path = path.as_ref();
    let mask = load_mask_any(path)?;
    if mask.shape != expected_shape {
        return Err(Error::data(format!(
            "shape mismatch: mask {:?} vs expected {expected_shape:?}",
            mask.shape
        )));
    }
    Ok(mask)
}

/// Loads a mask without a shape expectation.
pub fn load_mask_any(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let h = Header::decode(path, &bytes)?;
    if h.kind != KIND_MASK || h.dtype != DTYPE_U8 {
        return Err(Error::format(path, "not a u8 label mask"));
    }
    let n = check_shape(h.shape).map_err(|e| Error::format(path, e.to_string()))?;
    let has_lung = h.flags & FLAG_LUNG != 0;
    let data = body(path, &bytes, if has_lung { 2 * n } else { n })?;
    let labels = data[..n].to_vec();
    let lung = if has_lung {
        let plane = &data[n..];
        if plane.iter().any(|&b| b > 1) {
            return Err(Error::format(path, "lung plane must hold 0/1"));
        }
        Some(plane.iter().map(|&b| b == 1).collect())
    } else {
        None
    };
    let mut mask = LabelMask::new(h.shape, labels, lung)?;
    if h.spacing != [0.0; 3] {
        let [dz, dy, dx] = h.spacing;
        mask = mask.with_spacing(Spacing::new(dz, dy, dx)?)?;
    }
    Ok(mask)
}

pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        kind: KIND_MASK,
        dtype: DTYPE_U8,
        shape: mask.shape,
        spacing: mask.spacing.map(|s| s.as_array()).unwrap_or([0.0; 3]),
        flags: if mask.lung.is_some() { FLAG_LUNG } else { 0 },
        patient_id: String::new(),
    };
    let n = mask.labels.len();
    let mut bytes = Vec::with_capacity(HEADER_LEN + 2 * n);
    bytes.extend_from_slice(&header.encode());
    bytes.extend_from_slice(&mask.labels);
    if let Some(lung) = &mask.lung {
        bytes.extend(lung.iter().map(|&b| b as u8));
    }
    write_file(path.as_ref(), &bytes)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetRecord {
    pub patient_id: String,
    pub volume_path: PathBuf,
    pub mask_path: PathBuf,
}

/// A cohort described by a tab-separated manifest
/// (`patient_id<TAB>volume_path<TAB>mask_path`). Relative paths resolve
/// against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub manifest_path: PathBuf,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref().to_path_buf();
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let base = manifest_path
            .parent()
            .unwrap_or(Path::new(""))
            .to_path_buf();
        let mut records = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, vol, mask] = fields[..] else {
                return Err(Error::format(
                    &manifest_path,
                    format!("line {}: expected 3 tab-separated fields", lineno + 1),
                ));
            };
            if !seen.insert(id.to_owned()) {
                return Err(Error::data(format!(
                    "duplicate patient id {id:?} in manifest"
                )));
            }
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            let record = DatasetRecord {
                patient_id: id.to_owned(),
                volume_path: resolve(vol),
                mask_path: resolve(mask),
            };
            for p in [&record.volume_path, &record.mask_path] {
                if !p.is_file() {
                    return Err(Error::data(format!(
                        "manifest references missing file {}",
                        p.display()
                    )));
                }
            }
            records.push(record);
        }
        Ok(Self {
            records,
            manifest_path,
        })
    }

    /// Writes the manifest with paths relative to its directory when possible.
    pub fn save(&self) -> Result<()> {
        let base = self.manifest_path.parent().unwrap_or(Path::new(""));
        let mut out = String::new();
        for r in &self.records {
            let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                r.patient_id,
                rel(&r.volume_path),
                rel(&r.mask_path)
            ));
        }
        fs::write(&self.manifest_path, out).map_err(|e| Error::io(&self.manifest_path, e))
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.patient_id.clone()).collect()
    }

    pub fn record(&self, id: &str) -> Option<&DatasetRecord> {
        self.records.iter().find(|r| r.patient_id == id)
    }

    /// Loads a patient's volume and mask, checking their shapes agree.
    pub fn load_pair(&self, id: &str) -> Result<(CtVolume, LabelMask)> {
        let r = self
            .record(id)
            .ok_or_else(|| Error::data(format!("unknown patient id {id:?}")))?;
        let vol = load_volume(&r.volume_path)?;
        let mask = load_mask(&r.mask_path, vol.shape())?;
        Ok((vol, mask))
    }
}
