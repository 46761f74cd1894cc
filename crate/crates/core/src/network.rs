//! Dual-branch segmentation network.
//!
//! The main branch sees only the target slice: a densely connected block
//! followed by a segmentation head. The attention branch runs a ConvLSTM
//! over the whole 11-slice window (bottom to top) and feeds its final
//! hidden state to a second segmentation head and to a sigmoid attention
//! head. The two logit maps are blended per pixel:
//! `s_out = s_main · α + s_attn · (1 − α)`.

use std::path::Path;

use crate::autograd::Var;
use crate::config::{parse_value, Configurable};
use crate::error::{Error, Result};
use crate::nn::{load_weights, save_weights, Initializer, Mode, ParamStore, Session};
use crate::ops;
use crate::preprocess::{PreparedVolume, SliceWindow, DEFAULT_IMAGE_SIZE, WINDOW_LEN};
use crate::quantify::map_prediction_to_source;
use crate::tensor::{Real, Tensor};
use crate::volume_io::{CtVolume, LabelMask};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkConfig {
    pub num_classes: usize,
    /// Channels per slice.
    pub in_channels: usize,
    pub window_len: usize,
    pub dense_layers: usize,
    pub dense_growth: usize,
    pub lstm_hidden: usize,
    pub head_channels: usize,
    pub leaky_slope: f64,
    /// Side length windows are resized to. The layers themselves accept any
    /// size; this records what the weights were trained at.
    pub image_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            in_channels: 1,
            window_len: WINDOW_LEN,
            dense_layers: 4,
            dense_growth: 16,
            lstm_hidden: 32,
            head_channels: 64,
            leaky_slope: 0.01,
            image_size: DEFAULT_IMAGE_SIZE,
        }
    }
}

impl NetworkConfig {
    pub fn dense_out_channels(&self) -> usize {
        self.in_channels + self.dense_layers * self.dense_growth
    }
}

impl Configurable for NetworkConfig {
    const SECTION: &'static str = "network";

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "in_channels" => self.in_channels = parse_value(key, value)?,
            "window_len" => self.window_len = parse_value(key, value)?,
            "dense_layers" => self.dense_layers = parse_value(key, value)?,
            "dense_growth" => self.dense_growth = parse_value(key, value)?,
            "lstm_hidden" => self.lstm_hidden = parse_value(key, value)?,
            "head_channels" => self.head_channels = parse_value(key, value)?,
            "leaky_slope" => self.leaky_slope = parse_value(key, value)?,
            "image_size" => self.image_size = parse_value(key, value)?,
            _ => return Err(Error::config(format!("unknown key network.{key}"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.window_len != WINDOW_LEN {
            return Err(Error::config(format!("window_len must be {WINDOW_LEN}")));
        }
        let widths = [
            self.num_classes,
            self.in_channels,
            self.dense_layers,
            self.dense_growth,
            self.lstm_hidden,
            self.head_channels,
            self.image_size,
        ];
        if widths.contains(&0) {
            return Err(Error::config(
                "channel counts and image size must be at least 1",
            ));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::config("leaky_slope must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Parameter names of a segmentation head under `prefix`.
fn init_head<T: Real>(
    init: &mut Initializer,
    store: &mut ParamStore<T>,
    prefix: &str,
    cin: usize,
    hc: usize,
    cout: usize,
) {
    init.conv(
        store,
        &format!("{prefix}.block1.conv"),
        &[hc, cin, 3, 3],
        false,
    );
    init.batch_norm(store, &format!("{prefix}.block1.bn"), hc);
    init.conv(
        store,
        &format!("{prefix}.block2.conv"),
        &[hc, hc, 3, 3],
        false,
    );
    init.batch_norm(store, &format!("{prefix}.block2.bn"), hc);
    init.conv(store, &format!("{prefix}.out"), &[cout, hc, 1, 1], true);
}

/// Trained (or freshly initialized) weights together with their config.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub store: ParamStore<f32>,
}

pub fn init_store<T: Real>(cfg: &NetworkConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::default();
    let mut init = Initializer::new(seed, cfg.leaky_slope);
    let g = cfg.dense_growth;
    for i in 0..cfg.dense_layers {
        let cin = cfg.in_channels + i * g;
        init.batch_norm(&mut store, &format!("dense.{i}.bn"), cin);
        init.conv(
            &mut store,
            &format!("dense.{i}.conv"),
            &[g, cin, 3, 3],
            true,
        );
    }
    let (hc, c, h) = (cfg.head_channels, cfg.num_classes, cfg.lstm_hidden);
    init_head(
        &mut init,
        &mut store,
        "main_head",
        cfg.dense_out_channels(),
        hc,
        c,
    );
    init.conv(&mut store, "lstm.stem", &[h, cfg.in_channels, 1, 1], true);
    init.conv(&mut store, "lstm.gates", &[4 * h, 2 * h, 3, 3], true);
    init_head(&mut init, &mut store, "attn_seg_head", h, hc, c);
    init_head(&mut init, &mut store, "attn_head", h, hc, 1);
    Ok(store)
}

/// Kaiming-initialized parameters. With `pretrained`, the dense block is
/// copied from that weight file instead, shape for shape.
pub fn init_params(
    cfg: &NetworkConfig,
    seed: u64,
    pretrained: Option<&Path>,
) -> Result<NetworkParams> {
    let mut store = init_store::<f32>(cfg, seed)?;
    if let Some(path) = pretrained {
        let (src, _) = load_weights::<f32>(path)?;
        for (name, t) in store.params.iter_mut().chain(store.buffers.iter_mut()) {
            if !name.starts_with("dense.") {
                continue;
            }
            let from = src.params.get(name).or_else(|| src.buffers.get(name));
            let from = from.ok_or_else(|| Error::data(format!("pretrained file lacks {name}")))?;
            if from.shape() != t.shape() {
                return Err(Error::data(format!(
                    "pretrained shape mismatch for {name}: {:?} vs {:?}",
                    from.shape(),
                    t.shape()
                )));
            }
            *t = from.clone();
        }
    }
    Ok(NetworkParams {
        config: cfg.clone(),
        store,
    })
}

pub const NETWORK_FORMAT: &str = "pneumoseg-network";

impl NetworkParams {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({ "format": NETWORK_FORMAT, "config": self.config });
        save_weights(&self.store, &meta, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (store, meta) = load_weights::<f32>(path)?;
        if meta.get("format").and_then(|v| v.as_str()) != Some(NETWORK_FORMAT) {
            return Err(Error::format(path, "not a network weight file"));
        }
        let config: NetworkConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::format(path, format!("bad config block: {e}")))?;
        let params = Self { config, store };
        params
            .check_shapes()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(params)
    }

    /// Every expected tensor present with the config's shape, nothing extra,
    /// everything finite.
    pub fn check_shapes(&self) -> Result<()> {
        let reference = init_store::<f32>(&self.config, 0)?;
        for (expected, actual) in [
            (&reference.params, &self.store.params),
            (&reference.buffers, &self.store.buffers),
        ] {
            if expected.len() != actual.len() {
                return Err(Error::data("tensor set does not match the config"));
            }
            for (name, t) in expected {
                match actual.get(name) {
                    Some(a) if a.shape() == t.shape() => {}
                    _ => return Err(Error::data(format!("tensor {name} missing or misshapen"))),
                }
            }
        }
        if !self.store.all_finite() {
            return Err(Error::numeric("non-finite parameter"));
        }
        Ok(())
    }

    /// Gradient-free forward pass over a batch of windows.
    pub fn forward(&self, windows: &Tensor<f32>, mode: Mode) -> Result<ForwardOutput<f32>> {
        let s = Session::new(&self.store, mode, false);
        forward(&s, &self.config, windows)
    }
}

pub struct ForwardOutput<T: Real> {
    /// `[N, classes, H, W]`.
    pub s_main: Var<T>,
    pub s_attn: Var<T>,
    /// `[N, 1, H, W]`, in (0, 1).
    pub alpha: Var<T>,
    pub s_out: Var<T>,
}

fn finite<T: Real>(layer: &str, v: Var<T>) -> Result<Var<T>> {
    if v.value().all_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(format!("non-finite activations in {layer}")))
    }
}

/// Two conv-BN-LeakyReLU blocks then a 1×1 projection, as logits.
pub fn seg_head<T: Real>(s: &Session<T>, prefix: &str, x: &Var<T>, slope: f64) -> Result<Var<T>> {
    let y = s.conv_bn_act(&format!("{prefix}.block1"), x, slope)?;
    let y = s.conv_bn_act(&format!("{prefix}.block2"), &y, slope)?;
    s.conv(&format!("{prefix}.out"), &y)
}

pub fn attn_head<T: Real>(s: &Session<T>, prefix: &str, x: &Var<T>, slope: f64) -> Result<Var<T>> {
    Ok(ops::sigmoid(&seg_head(s, prefix, x, slope)?))
}

/// One ConvLSTM update without peepholes. `weight` maps `[x, h]` to the
/// stacked gates `i, f, o, g`.
pub fn conv_lstm_step<T: Real>(
    x: &Var<T>,
    h: &Var<T>,
    c: &Var<T>,
    weight: &Var<T>,
    bias: &Var<T>,
) -> Result<(Var<T>, Var<T>)> {
    if !x.value().all_finite() {
        return Err(Error::numeric("non-finite ConvLSTM input"));
    }
    let hidden = h.shape()[1];
    if weight.shape()[0] != 4 * hidden || weight.shape()[1] != x.shape()[1] + hidden {
        return Err(Error::data(format!(
            "ConvLSTM kernel {:?} does not fit hidden size {hidden}",
            weight.shape()
        )));
    }
    let gates = ops::conv(&ops::concat_channels(&[x, h]), weight, Some(bias));
    let i = ops::sigmoid(&ops::narrow_channels(&gates, 0, hidden));
    let f = ops::sigmoid(&ops::narrow_channels(&gates, hidden, hidden));
    let o = ops::sigmoid(&ops::narrow_channels(&gates, 2 * hidden, hidden));
    let g = ops::tanh(&ops::narrow_channels(&gates, 3 * hidden, hidden));
    let c_next = ops::add(&ops::mul(&f, c), &ops::mul(&i, &g));
    let h_next = ops::mul(&o, &ops::tanh(&c_next));
    Ok((h_next, c_next))
}

fn dense_block<T: Real>(s: &Session<T>, cfg: &NetworkConfig, x: &Var<T>) -> Result<Var<T>> {
    let mut features = x.clone();
    for i in 0..cfg.dense_layers {
        let y = s.batch_norm(&format!("dense.{i}.bn"), &features)?;
        let y = ops::leaky_relu(&y, cfg.leaky_slope);
        let y = s.conv(&format!("dense.{i}.conv"), &y)?;
        features = ops::concat_channels(&[&features, &y]);
    }
    finite("dense block", features)
}

/// Runs both branches over `windows` (`[N, window_len · in_channels, H, W]`,
/// slices bottom to top).
pub fn forward<T: Real>(
    s: &Session<T>,
    cfg: &NetworkConfig,
    windows: &Tensor<T>,
) -> Result<ForwardOutput<T>> {
    let shape = windows.shape();
    let cin = cfg.in_channels;
    if shape.len() != 4 || shape[1] != cfg.window_len * cin {
        return Err(Error::data(format!(
            "expected windows [N, {}, H, W], got {shape:?}",
            cfg.window_len * cin
        )));
    }
    if !windows.all_finite() {
        return Err(Error::numeric("non-finite input window"));
    }
    let (n, height, width) = (shape[0], shape[2], shape[3]);
    let input = Var::constant(windows.clone());
    let slope = cfg.leaky_slope;

    let center = ops::narrow_channels(&input, (cfg.window_len / 2) * cin, cin);
    let features = dense_block(s, cfg, &center)?;
    let s_main = finite("main_head", seg_head(s, "main_head", &features, slope)?)?;

    let hidden = cfg.lstm_hidden;
    let state = Var::constant(Tensor::zeros(&[n, hidden, height, width]));
    let (mut h, mut c) = (state.clone(), state);
    let (gw, gb) = (s.param("lstm.gates.weight")?, s.param("lstm.gates.bias")?);
    for t in 0..cfg.window_len {
        let x = s.conv("lstm.stem", &ops::narrow_channels(&input, t * cin, cin))?;
        (h, c) = conv_lstm_step(&x, &h, &c, &gw, &gb)?;
    }
    let h = finite("ConvLSTM", h)?;
    let s_attn = finite("attn_seg_head", seg_head(s, "attn_seg_head", &h, slope)?)?;
    let alpha = finite("attn_head", attn_head(s, "attn_head", &h, slope)?)?;
    let s_out = ops::attention_fuse(&s_main, &s_attn, &alpha);
    Ok(ForwardOutput {
        s_main,
        s_attn,
        alpha,
        s_out,
    })
}

/// Per-sample argmax planes of `[N, C, H, W]` logits; ties go to the lower
/// class code.
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Vec<Vec<u8>> {
    let (n, c, p) = logits.ncp();
    let v = logits.data();
    (0..n)
        .map(|i| {
            (0..p)
                .map(|j| {
                    let mut best = 0;
                    for k in 1..c {
                        if v[(i * c + k) * p + j] > v[(i * c + best) * p + j] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

/// Stacks windows into one `[N, 11, S, S]` batch.
pub fn stack_windows(windows: &[&SliceWindow]) -> Result<Tensor<f32>> {
    let first = windows
        .first()
        .ok_or_else(|| Error::data("empty window batch"))?;
    let shape = first.pixels.shape().to_vec();
    let mut data = Vec::with_capacity(windows.len() * first.pixels.numel());
    for w in windows {
        if w.pixels.shape() != shape.as_slice() {
            return Err(Error::data("windows in a batch must share a shape"));
        }
        data.extend_from_slice(w.pixels.data());
    }
    Ok(Tensor::from_vec(
        &[windows.len(), shape[0], shape[1], shape[2]],
        data,
    ))
}

pub fn predict_slice(window: &SliceWindow, params: &NetworkParams) -> Result<Vec<u8>> {
    let out = params.forward(&stack_windows(&[window])?, Mode::Eval)?;
    Ok(argmax_classes(out.s_out.value()).swap_remove(0))
}

/// Labels every slice of `volume` at `params.config.image_size` and maps the
/// result back onto the source grid.
pub fn predict_volume(
    volume: &CtVolume,
    params: &NetworkParams,
    batch_size: usize,
) -> Result<LabelMask> {
    let prepared = PreparedVolume::new(volume, params.config.image_size)?;
    predict_prepared(&prepared, params, batch_size)?.with_spacing(volume.spacing())
}

pub fn predict_prepared(
    prepared: &PreparedVolume,
    params: &NetworkParams,
    batch_size: usize,
) -> Result<LabelMask> {
    let depth = prepared.depth();
    let mut planes = Vec::with_capacity(depth);
    for start in (0..depth).step_by(batch_size.max(1)) {
        let windows: Vec<SliceWindow> = (start..(start + batch_size.max(1)).min(depth))
            .map(|z| prepared.window(z))
            .collect::<Result<_>>()?;
        let refs: Vec<&SliceWindow> = windows.iter().collect();
        let out = params.forward(&stack_windows(&refs)?, Mode::Eval)?;
        planes.extend(argmax_classes(out.s_out.value()));
    }
    map_prediction_to_source(
        &planes,
        prepared.size,
        prepared.crop_box,
        prepared.source_shape,
    )
}
