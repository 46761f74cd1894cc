//! One interface over the three segmentation models: how each consumes a
//! prepared volume, produces logits, and persists its weights.

use std::path::Path;

use crate::autograd::Var;
use crate::baselines::{init_unet, unet_forward, UnetConfig, UnetDims};
use crate::error::{Error, Result};
use crate::network::{
    argmax_classes, forward, init_store, NetworkConfig, NetworkParams, NETWORK_FORMAT,
};
use crate::nn::{load_weights, save_weights, ParamStore, Session};
use crate::preprocess::PreparedVolume;
use crate::quantify::map_prediction_to_source;
use crate::tensor::{Real, Tensor};
use crate::volume_io::{CtVolume, LabelMask};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum ModelSpec {
    /// The dual-branch ConvLSTM attention network.
    Ours(NetworkConfig),
    Unet2d(UnetConfig),
    Unet3d(UnetConfig),
}

/// What one training or inference sample covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    /// 11-slice window labelled at its centre slice.
    Window,
    /// One slice.
    Slice,
    /// `depth` consecutive slices, all labelled.
    Chunk(usize),
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Ours(_) => "ours",
            ModelSpec::Unet2d(_) => "unet2d",
            ModelSpec::Unet3d(_) => "unet3d",
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            ModelSpec::Ours(c) => c.image_size,
            ModelSpec::Unet2d(c) | ModelSpec::Unet3d(c) => c.image_size,
        }
    }

    pub fn sample_kind(&self) -> SampleKind {
        match self {
            ModelSpec::Ours(_) => SampleKind::Window,
            ModelSpec::Unet2d(_) => SampleKind::Slice,
            ModelSpec::Unet3d(c) => SampleKind::Chunk(c.chunk_depth),
        }
    }

    pub fn init<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        match self {
            ModelSpec::Ours(c) => init_store(c, seed),
            ModelSpec::Unet2d(c) => init_unet(c, UnetDims::Two, seed),
            ModelSpec::Unet3d(c) => init_unet(c, UnetDims::Three, seed),
        }
    }

    /// Logits for a batch built by [`SampleSource::input`]: the fused
    /// output for our network, the decoder output for the baselines.
    pub fn logits<T: Real>(&self, s: &Session<T>, input: &Tensor<T>) -> Result<Var<T>> {
        match self {
            ModelSpec::Ours(c) => Ok(forward(s, c, input)?.s_out),
            ModelSpec::Unet2d(c) => unet_forward(s, c, UnetDims::Two, input),
            ModelSpec::Unet3d(c) => unet_forward(s, c, UnetDims::Three, input),
        }
    }

    fn format(&self) -> &'static str {
        match self {
            ModelSpec::Ours(_) => NETWORK_FORMAT,
            ModelSpec::Unet2d(_) => "pneumoseg-unet2d",
            ModelSpec::Unet3d(_) => "pneumoseg-unet3d",
        }
    }
}

/// A model specification with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore<f32>,
}

impl Model {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let store = spec.init(seed)?;
        Ok(Self { spec, store })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let config = match &self.spec {
            ModelSpec::Ours(c) => serde_json::to_value(c),
            ModelSpec::Unet2d(c) | ModelSpec::Unet3d(c) => serde_json::to_value(c),
        }
        .map_err(|e| Error::data(e.to_string()))?;
        save_weights(
            &self.store,
            &serde_json::json!({ "format": self.spec.format(), "config": config }),
            path,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (store, meta) = load_weights::<f32>(path)?;
        let bad = |e: serde_json::Error| Error::format(path, format!("bad config block: {e}"));
        let config = meta["config"].clone();
        let spec = match meta["format"].as_str() {
            Some(NETWORK_FORMAT) => ModelSpec::Ours(serde_json::from_value(config).map_err(bad)?),
            Some("pneumoseg-unet2d") => {
                ModelSpec::Unet2d(serde_json::from_value(config).map_err(bad)?)
            }
            Some("pneumoseg-unet3d") => {
                ModelSpec::Unet3d(serde_json::from_value(config).map_err(bad)?)
            }
            _ => return Err(Error::format(path, "unknown model format")),
        };
        let reference = spec
            .init::<f32>(0)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let same = |a: &std::collections::BTreeMap<String, Tensor<f32>>,
                    b: &std::collections::BTreeMap<String, Tensor<f32>>| {
            a.len() == b.len()
                && a.iter()
                    .all(|(k, t)| b.get(k).is_some_and(|u| u.shape() == t.shape()))
        };
        if !same(&reference.params, &store.params) || !same(&reference.buffers, &store.buffers) {
            return Err(Error::format(
                path,
                "tensors do not match the stored config",
            ));
        }
        Ok(Self { spec, store })
    }

    pub fn as_network(&self) -> Option<NetworkParams> {
        match &self.spec {
            ModelSpec::Ours(c) => Some(NetworkParams {
                config: c.clone(),
                store: self.store.clone(),
            }),
            _ => None,
        }
    }

    /// Per-slice label planes for a whole prepared volume, in window space.
    pub fn predict_planes(
        &self,
        prepared: &PreparedVolume,
        batch_size: usize,
    ) -> Result<Vec<Vec<u8>>> {
        let source = SampleSource {
            prepared,
            labels: None,
        };
        let kind = self.spec.sample_kind();
        let depth = prepared.depth();
        let mut planes = vec![Vec::new(); depth];
        let starts = source.sample_starts(kind);
        let batch = match kind {
            SampleKind::Chunk(_) => 1,
            _ => batch_size.max(1),
        };
        for group in starts.chunks(batch) {
            let input = source.input(kind, group)?;
            let s = Session::inference(&self.store);
            let logits = self.spec.logits(&s, &input)?;
            let out = argmax_classes(&chunk_to_planes(logits.value(), kind));
            let mut out = out.into_iter();
            for &z in group {
                match kind {
                    SampleKind::Chunk(d) => {
                        for dz in 0..d {
                            let plane = out.next().expect("one plane per chunk slice");
                            if z + dz < depth {
                                planes[z + dz] = plane;
                            }
                        }
                    }
                    _ => planes[z] = out.next().expect("one plane per sample"),
                }
            }
        }
        Ok(planes)
    }

    pub fn predict_volume(&self, volume: &CtVolume, batch_size: usize) -> Result<LabelMask> {
        let prepared = PreparedVolume::new(volume, self.spec.image_size())?;
        let planes = self.predict_planes(&prepared, batch_size)?;
        map_prediction_to_source(
            &planes,
            prepared.size,
            prepared.crop_box,
            prepared.source_shape,
        )?
        .with_spacing(volume.spacing())
    }
}

/// `[N, C, D, H, W]` logits rearranged as `[N·D, C, H, W]`; other kinds pass
/// through.
pub fn chunk_to_planes<T: Real>(logits: &Tensor<T>, kind: SampleKind) -> Tensor<T> {
    let SampleKind::Chunk(_) = kind else {
        return logits.clone();
    };
    let s = logits.shape();
    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let p = h * w;
    let mut out = Vec::with_capacity(logits.numel());
    for i in 0..n {
        for z in 0..d {
            for ch in 0..c {
                out.extend_from_slice(&logits.data()[((i * c + ch) * d + z) * p..][..p]);
            }
        }
    }
    Tensor::from_vec(&[n * d, c, h, w], out)
}

/// A prepared volume (and optionally its label planes in window space)
/// viewed as model samples.
pub struct SampleSource<'a> {
    pub prepared: &'a PreparedVolume,
    pub labels: Option<&'a [Vec<u8>]>,
}

impl SampleSource<'_> {
    /// Start slice of every sample covering the volume. Chunks tile from the
    /// bottom; the last one is shifted down to stay inside the volume.
    pub fn sample_starts(&self, kind: SampleKind) -> Vec<usize> {
        let depth = self.prepared.depth();
        match kind {
            SampleKind::Window | SampleKind::Slice => (0..depth).collect(),
            SampleKind::Chunk(d) => {
                let mut starts: Vec<usize> = (0..depth / d).map(|i| i * d).collect();
                if !depth.is_multiple_of(d) || starts.is_empty() {
                    starts.push(depth.saturating_sub(d));
                }
                starts
            }
        }
    }

    /// Image planes of one sample, bottom to top (edge-replicated for
    /// windows and for chunks deeper than the volume).
    pub fn planes(&self, kind: SampleKind, start: usize) -> Result<Vec<&[f32]>> {
        let depth = self.prepared.depth();
        let idx: Vec<usize> = match kind {
            SampleKind::Window => crate::preprocess::window_indices(start, depth).to_vec(),
            SampleKind::Slice => vec![start],
            SampleKind::Chunk(d) => (start..start + d).map(|z| z.min(depth - 1)).collect(),
        };
        if start >= depth {
            return Err(Error::data(format!(
                "sample start {start} outside depth {depth}"
            )));
        }
        Ok(idx
            .into_iter()
            .map(|z| self.prepared.slices[z].as_slice())
            .collect())
    }

    /// Label planes of one sample.
    pub fn targets(&self, kind: SampleKind, start: usize) -> Result<Vec<&[u8]>> {
        let labels = self
            .labels
            .ok_or_else(|| Error::data("sample source has no labels"))?;
        let depth = labels.len();
        Ok(match kind {
            SampleKind::Window | SampleKind::Slice => vec![labels[start].as_slice()],
            SampleKind::Chunk(d) => (start..start + d)
                .map(|z| labels[z.min(depth - 1)].as_slice())
                .collect(),
        })
    }

    /// Batched model input for samples starting at `starts`.
    pub fn input(&self, kind: SampleKind, starts: &[usize]) -> Result<Tensor<f32>> {
        let s = self.prepared.size;
        let mut data = Vec::new();
        let mut planes_per = 0;
        for &z in starts {
            let planes = self.planes(kind, z)?;
            planes_per = planes.len();
            for p in planes {
                data.extend_from_slice(p);
            }
        }
        Ok(batch_tensor(kind, starts.len(), planes_per, s, data))
    }
}

/// Shapes flat sample planes as the model input tensor.
pub fn batch_tensor(
    kind: SampleKind,
    n: usize,
    planes: usize,
    size: usize,
    data: Vec<f32>,
) -> Tensor<f32> {
    match kind {
        SampleKind::Window | SampleKind::Slice => Tensor::from_vec(&[n, planes, size, size], data),
        SampleKind::Chunk(_) => Tensor::from_vec(&[n, 1, planes, size, size], data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_phantom, PhantomSpec};

    fn small_specs() -> Vec<ModelSpec> {
        let net = NetworkConfig {
            dense_layers: 1,
            dense_growth: 2,
            lstm_hidden: 2,
            head_channels: 2,
            image_size: 16,
            ..NetworkConfig::default()
        };
        let unet = UnetConfig {
            base_channels: 2,
            levels: 1,
            image_size: 16,
            chunk_depth: 4,
            ..UnetConfig::default()
        };
        vec![
            ModelSpec::Ours(net),
            ModelSpec::Unet2d(unet.clone()),
            ModelSpec::Unet3d(unet),
        ]
    }

    #[test]
    fn every_model_predicts_full_volumes_and_round_trips() {
        let ph = generate_phantom(&PhantomSpec {
            shape: [10, 64, 64],
            ..PhantomSpec::base()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        for spec in small_specs() {
            let m = Model::init(spec.clone(), 3).unwrap();
            let mask = m.predict_volume(&ph.volume, 4).unwrap();
            assert_eq!(mask.shape(), ph.volume.shape());
            let p = dir.path().join(format!("{}.weights", spec.name()));
            m.save(&p).unwrap();
            assert_eq!(Model::load(&p).unwrap(), m);
        }
    }

    #[test]
    fn chunk_starts_cover_volume() {
        let ph = generate_phantom(&PhantomSpec {
            shape: [10, 64, 64],
            ..PhantomSpec::base()
        })
        .unwrap();
        let prepared = PreparedVolume::new(&ph.volume, 8).unwrap();
        let src = SampleSource {
            prepared: &prepared,
            labels: None,
        };
        assert_eq!(src.sample_starts(SampleKind::Chunk(4)), vec![0, 4, 6]);
        assert_eq!(src.sample_starts(SampleKind::Chunk(16)), vec![0]);
        assert_eq!(src.planes(SampleKind::Chunk(16), 0).unwrap().len(), 16);
    }

    #[test]
    fn network_weights_load_as_model() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_specs().remove(0);
        let ModelSpec::Ours(cfg) = &spec else {
            unreachable!()
        };
        let net = crate::network::init_params(cfg, 2, None).unwrap();
        net.save(dir.path().join("n")).unwrap();
        let m = Model::load(dir.path().join("n")).unwrap();
        assert_eq!(m.as_network().unwrap(), net);
    }
}
