//! Deterministic lung phantoms with exactly known lesion geometry.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume_io::{
    save_mask, save_volume, voxel_volume_ml, Class, CtVolume, Dataset, DatasetRecord, LabelMask,
    Shape3, Spacing, HU_MAX, HU_MIN,
};

pub const AIR_HU: f64 = -1000.0;
pub const SOFT_TISSUE_HU: f64 = 40.0;
pub const LUNG_HU: f64 = -850.0;
pub const GGO_BAND: (f64, f64) = (-700.0, -400.0);
pub const HIGH_OPACITY_BAND: (f64, f64) = (-50.0, 100.0);

/// Axis-aligned ellipsoid in voxel coordinates `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum()
    }

    /// Points on the surface, used for containment checks.
    fn surface_points(&self, n: usize) -> impl Iterator<Item = [f64; 3]> + '_ {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..n).map(move |i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            let dir = [z, r * t.sin(), r * t.cos()];
            [
                self.center[0] + self.radii[0] * dir[0],
                self.center[1] + self.radii[1] * dir[1],
                self.center[2] + self.radii[2] * dir[2],
            ]
        })
    }

    /// Whether `self` lies inside `outer` (checked on a dense surface sample
    /// plus the centre).
    pub fn inside(&self, outer: &Ellipsoid) -> bool {
        outer.contains(self.center) && self.surface_points(400).all(|p| outer.contains(p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionSpec {
    pub class: Class,
    pub shape: Ellipsoid,
    /// Noiseless HU of the lesion, inside the class band.
    pub hu: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub patient_id: String,
    pub shape: Shape3,
    pub spacing: Spacing,
    pub body: Ellipsoid,
    pub lungs: [Ellipsoid; 2],
    pub lesions: Vec<LesionSpec>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// 16×64×64 phantom: body over rows 10..=54 and cols 8..=56, two lungs,
    /// no lesions.
    pub fn base() -> Self {
        let shape = [16, 64, 64];
        let zc = 7.5;
        Self {
            patient_id: "phantom".into(),
            shape,
            spacing: Spacing {
                dz: 1.25,
                dy: 0.7,
                dx: 0.7,
            },
            body: Ellipsoid {
                center: [zc, 32.0, 32.0],
                radii: [100.0, 22.0, 24.0],
            },
            lungs: [
                Ellipsoid {
                    center: [zc, 31.0, 21.0],
                    radii: [9.5, 15.0, 9.0],
                },
                Ellipsoid {
                    center: [zc, 31.0, 43.0],
                    radii: [9.5, 15.0, 9.0],
                },
            ],
            lesions: Vec::new(),
            noise_sd: 20.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spacing.validate()?;
        if self.noise_sd < 0.0 || !self.noise_sd.is_finite() {
            return Err(Error::data("noise sd must be finite and >= 0"));
        }
        for (i, l) in self.lesions.iter().enumerate() {
            let band = match l.class {
                Class::Ggo => GGO_BAND,
                Class::HighOpacity => HIGH_OPACITY_BAND,
                Class::Background => {
                    return Err(Error::data(format!("lesion {i} has background class")))
                }
            };
            if !(l.hu > band.0 && l.hu < band.1) {
                return Err(Error::data(format!(
                    "lesion {i} HU {} outside its class band {band:?}",
                    l.hu
                )));
            }
            if !self.lungs.iter().any(|lung| l.shape.inside(lung)) {
                return Err(Error::data(format!(
                    "lesion {i} is not containable in a lung"
                )));
            }
        }
        Ok(())
    }
}

/// Volumes measured while voxelizing, in millilitres.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnalyticVolumes {
    pub ggo_ml: f64,
    pub high_opacity_ml: f64,
    pub lung_ml: f64,
}

impl AnalyticVolumes {
    pub fn pneumonia_ml(&self) -> f64 {
        self.ggo_ml + self.high_opacity_ml
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: CtVolume,
    pub mask: LabelMask,
    pub truth: AnalyticVolumes,
}

/// Voxelizes `spec` (voxel centres at integer coordinates) and adds
/// Gaussian HU noise.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let [d, h, w] = spec.shape;
    let n = d * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::data(e.to_string()))?;
    let mut hu = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut lung = Vec::with_capacity(n);
    let mut counts = [0usize; 3];
    let mut lung_count = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let mut value = if spec.body.contains(p) {
                    SOFT_TISSUE_HU
                } else {
                    AIR_HU
                };
                let in_lung = spec.lungs.iter().any(|l| l.contains(p));
                let mut class = Class::Background;
                if in_lung {
                    value = LUNG_HU;
                    lung_count += 1;
                }
                // later lesions win where they overlap
                for lesion in &spec.lesions {
                    if lesion.shape.contains(p) {
                        value = lesion.hu;
                        class = lesion.class;
                    }
                }
                counts[class as usize] += 1;
                let noisy = if spec.noise_sd > 0.0 {
                    value + noise.sample(&mut rng)
                } else {
                    value
                };
                hu.push(noisy.round().clamp(f64::from(HU_MIN), f64::from(HU_MAX)) as i16);
                labels.push(class.code());
                lung.push(in_lung);
            }
        }
    }
    let vml = voxel_volume_ml(spec.spacing)?;
    let truth = AnalyticVolumes {
        ggo_ml: counts[Class::Ggo as usize] as f64 * vml,
        high_opacity_ml: counts[Class::HighOpacity as usize] as f64 * vml,
        lung_ml: lung_count as f64 * vml,
    };
    let volume = CtVolume::new(spec.patient_id.clone(), spec.shape, spec.spacing, hu)?;
    let mask = LabelMask::new(spec.shape, labels, Some(lung))?.with_spacing(spec.spacing)?;
    Ok(Phantom {
        volume,
        mask,
        truth,
    })
}

/// Draws a lesion of `class` fully inside one of the lungs.
fn random_lesion(
    rng: &mut impl Rng,
    lungs: &[Ellipsoid; 2],
    class: Class,
    size_scale: f64,
) -> Option<LesionSpec> {
    let band = match class {
        Class::Ggo => GGO_BAND,
        _ => HIGH_OPACITY_BAND,
    };
    let margin = (band.1 - band.0) * 0.1;
    let hu = rng.gen_range(band.0 + margin..band.1 - margin).round();
    for _ in 0..200 {
        let lung = lungs[rng.gen_range(0..2)];
        let radii = [
            rng.gen_range(2.0..3.5) * size_scale.sqrt(),
            rng.gen_range(3.0..6.5) * size_scale,
            rng.gen_range(2.5..5.0) * size_scale,
        ];
        let center = [
            lung.center[0] + rng.gen_range(-0.5..0.5) * lung.radii[0],
            lung.center[1] + rng.gen_range(-0.6..0.6) * lung.radii[1],
            lung.center[2] + rng.gen_range(-0.5..0.5) * lung.radii[2],
        ];
        let shape = Ellipsoid { center, radii };
        // keep a one-voxel rim of parenchyma around each lesion
        let shrunk = Ellipsoid {
            center: lung.center,
            radii: lung.radii.map(|r| r - 1.0),
        };
        if shape.inside(&shrunk) {
            return Some(LesionSpec { class, shape, hu });
        }
    }
    None
}

/// A jittered variant of `base` with 1–3 GGO lesions and, for most
/// patients, 0–2 high-opacity lesions.
pub fn jittered_spec(base: &PhantomSpec, rng: &mut impl Rng, patient_id: String) -> PhantomSpec {
    let mut spec = base.clone();
    spec.patient_id = patient_id;
    spec.seed = rng.gen();
    spec.body.radii[1] += rng.gen_range(-1.5..1.5);
    spec.body.radii[2] += rng.gen_range(-1.5..1.5);
    for lung in &mut spec.lungs {
        lung.radii[1] += rng.gen_range(-1.5..1.5);
        lung.radii[2] += rng.gen_range(-1.0..1.0);
        lung.center[1] += rng.gen_range(-1.0..1.0);
    }
    // scale spreads total lesion burden over more than an order of magnitude
    let size_scale = rng.gen_range(0.65..1.35);
    let n_ggo = rng.gen_range(1..=3);
    let n_high = if rng.gen_bool(0.7) {
        rng.gen_range(1..=2)
    } else {
        0
    };
    spec.lesions = (0..n_ggo)
        .map(|_| Class::Ggo)
        .chain((0..n_high).map(|_| Class::HighOpacity))
        .filter_map(|class| random_lesion(rng, &spec.lungs, class, size_scale))
        .collect();
    spec
}

/// Writes `n` phantoms, their manifest (`manifest.tsv`) and the analytic
/// volumes (`truth.csv`) into `out_dir`.
pub fn generate_cohort(
    n: usize,
    base: &PhantomSpec,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::data("cohort size must be >= 1"));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut truth_csv = String::from("patient_id,ggo_ml,high_ml,pneumonia_ml,lung_ml\n");
    for i in 0..n {
        let id = format!("phantom_{i:03}");
        let spec = jittered_spec(base, &mut rng, id.clone());
        let ph = generate_phantom(&spec)?;
        let record = DatasetRecord {
            patient_id: id.clone(),
            volume_path: out_dir.join(format!("{id}.vol")),
            mask_path: out_dir.join(format!("{id}.mask")),
        };
        save_volume(&ph.volume, &record.volume_path)?;
        save_mask(&ph.mask, &record.mask_path)?;
        let t = ph.truth;
        truth_csv.push_str(&format!(
            "{id},{},{},{},{}\n",
            t.ggo_ml,
            t.high_opacity_ml,
            t.pneumonia_ml(),
            t.lung_ml
        ));
        records.push(record);
    }
    let truth_path = out_dir.join("truth.csv");
    fs::write(&truth_path, truth_csv).map_err(|e| Error::io(&truth_path, e))?;
    let ds = Dataset {
        records,
        manifest_path: out_dir.join("manifest.tsv"),
    };
    ds.save()?;
    Ok(ds)
}

/// Reads `truth.csv` written by [`generate_cohort`].
pub fn load_truth(path: impl AsRef<Path>) -> Result<Vec<(String, AnalyticVolumes)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format(path, format!("bad row {line:?}")))
            };
            Ok((
                f[0].to_owned(),
                AnalyticVolumes {
                    ggo_ml: num(1)?,
                    high_opacity_ml: num(2)?,
                    lung_ml: num(4)?,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_lesions(seed: u64) -> PhantomSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        jittered_spec(&PhantomSpec::base(), &mut rng, "p".into())
    }

    #[test]
    fn lesion_free_phantom() {
        let ph = generate_phantom(&PhantomSpec::base()).unwrap();
        assert_eq!(ph.truth.ggo_ml, 0.0);
        assert_eq!(ph.truth.high_opacity_ml, 0.0);
        assert!(ph.truth.lung_ml > 0.0);
        assert!(ph.mask.labels().iter().all(|&c| c == 0));
        assert!(ph.mask.lung().unwrap().iter().any(|&b| b));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = with_lesions(3);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn analytic_volume_matches_label_count() {
        for seed in 0..5 {
            let ph = generate_phantom(&with_lesions(seed)).unwrap();
            let vml = voxel_volume_ml(ph.volume.spacing()).unwrap();
            assert_eq!(ph.truth.ggo_ml, ph.mask.count(Class::Ggo) as f64 * vml);
            assert_eq!(
                ph.truth.high_opacity_ml,
                ph.mask.count(Class::HighOpacity) as f64 * vml
            );
        }
    }

    #[test]
    fn noiseless_hu_matches_class_bands() {
        for seed in 0..5 {
            let mut spec = with_lesions(seed);
            spec.noise_sd = 0.0;
            let ph = generate_phantom(&spec).unwrap();
            let lung = ph.mask.lung().unwrap();
            for ((&hu, &c), &in_lung) in ph.volume.voxels().iter().zip(ph.mask.labels()).zip(lung) {
                let hu = f64::from(hu);
                match Class::from_code(c).unwrap() {
                    Class::Ggo => assert!(hu > GGO_BAND.0 && hu < GGO_BAND.1),
                    Class::HighOpacity => {
                        assert!(hu > HIGH_OPACITY_BAND.0 && hu < HIGH_OPACITY_BAND.1)
                    }
                    Class::Background if in_lung => assert_eq!(hu, LUNG_HU),
                    Class::Background => assert!(hu == AIR_HU || hu == SOFT_TISSUE_HU),
                }
                if c != 0 {
                    assert!(in_lung, "lesion voxel outside the lung mask");
                }
            }
        }
    }

    #[test]
    fn rejects_uncontainable_lesion() {
        let mut spec = PhantomSpec::base();
        spec.lesions.push(LesionSpec {
            class: Class::Ggo,
            shape: Ellipsoid {
                center: [7.5, 32.0, 32.0],
                radii: [3.0, 3.0, 3.0],
            },
            hu: -600.0,
        });
        assert!(generate_phantom(&spec)
            .unwrap_err()
            .to_string()
            .contains("not containable"));
    }

    #[test]
    fn cohort_on_disk_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = generate_cohort(10, &PhantomSpec::base(), 7, a.path()).unwrap();
        generate_cohort(10, &PhantomSpec::base(), 7, b.path()).unwrap();
        assert_eq!(ds.records.len(), 10);
        let manifest = fs::read_to_string(a.path().join("manifest.tsv")).unwrap();
        assert_eq!(manifest.lines().count(), 10);
        for name in [
            "manifest.tsv",
            "truth.csv",
            "phantom_004.vol",
            "phantom_009.mask",
        ] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
        let reloaded = Dataset::load(a.path().join("manifest.tsv")).unwrap();
        let ids: std::collections::HashSet<_> = reloaded.ids().into_iter().collect();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn cohort_lesion_burden_spans_an_order_of_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let totals: Vec<f64> = (0..40)
            .map(|i| {
                generate_phantom(&jittered_spec(
                    &PhantomSpec::base(),
                    &mut rng,
                    format!("p{i}"),
                ))
                .unwrap()
            })
            .map(|p| p.truth.pneumonia_ml())
            .collect();
        let min = totals.iter().copied().fold(f64::INFINITY, f64::min);
        let max = totals.iter().copied().fold(0.0, f64::max);
        assert!(min > 0.0 && max / min >= 10.0, "min {min} max {max}");
    }
}
