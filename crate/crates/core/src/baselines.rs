//! Encoder-decoder baselines: a 2-D Unet over single slices and a 3-D Unet
//! over slice chunks.

use crate::autograd::Var;
use crate::config::{parse_value, Configurable};
use crate::error::{Error, Result};
use crate::nn::{Initializer, ParamStore, Session};
use crate::ops;
use crate::preprocess::DEFAULT_IMAGE_SIZE;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UnetConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    /// Channels at the first level; doubled per level.
    pub base_channels: usize,
    /// Number of 2× downsamplings.
    pub levels: usize,
    pub leaky_slope: f64,
    pub image_size: usize,
    /// Slices per chunk (3-D only).
    pub chunk_depth: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            in_channels: 1,
            base_channels: 16,
            levels: 2,
            leaky_slope: 0.01,
            image_size: DEFAULT_IMAGE_SIZE,
            chunk_depth: 16,
        }
    }
}

impl Configurable for UnetConfig {
    const SECTION: &'static str = "unet";

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "in_channels" => self.in_channels = parse_value(key, value)?,
            "base_channels" => self.base_channels = parse_value(key, value)?,
            "levels" => self.levels = parse_value(key, value)?,
            "leaky_slope" => self.leaky_slope = parse_value(key, value)?,
            "image_size" => self.image_size = parse_value(key, value)?,
            "chunk_depth" => self.chunk_depth = parse_value(key, value)?,
            _ => return Err(Error::config(format!("unknown key unet.{key}"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if [
            self.num_classes,
            self.in_channels,
            self.base_channels,
            self.image_size,
            self.chunk_depth,
        ]
        .contains(&0)
        {
            return Err(Error::config("unet widths and sizes must be at least 1"));
        }
        let m = 1usize << self.levels;
        if !self.image_size.is_multiple_of(m) {
            return Err(Error::config(format!(
                "image_size must be divisible by {m}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum UnetDims {
    Two,
    Three,
}

impl UnetDims {
    fn kernel(self, cout: usize, cin: usize) -> Vec<usize> {
        match self {
            UnetDims::Two => vec![cout, cin, 3, 3],
            UnetDims::Three => vec![cout, cin, 3, 3, 3],
        }
    }

    fn pointwise(self, cout: usize, cin: usize) -> Vec<usize> {
        match self {
            UnetDims::Two => vec![cout, cin, 1, 1],
            UnetDims::Three => vec![cout, cin, 1, 1, 1],
        }
    }

    fn factor(self) -> (usize, usize, usize) {
        match self {
            UnetDims::Two => (1, 2, 2),
            UnetDims::Three => (2, 2, 2),
        }
    }
}

fn width(cfg: &UnetConfig, level: usize) -> usize {
    cfg.base_channels << level
}

fn init_double<T: Real>(
    init: &mut Initializer,
    store: &mut ParamStore<T>,
    dims: UnetDims,
    name: &str,
    cin: usize,
    cout: usize,
) {
    for (i, c) in [(1, cin), (2, cout)] {
        init.conv(
            store,
            &format!("{name}.block{i}.conv"),
            &dims.kernel(cout, c),
            false,
        );
        init.batch_norm(store, &format!("{name}.block{i}.bn"), cout);
    }
}

pub fn init_unet<T: Real>(cfg: &UnetConfig, dims: UnetDims, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::default();
    let mut init = Initializer::new(seed, cfg.leaky_slope);
    let mut cin = cfg.in_channels;
    for l in 0..=cfg.levels {
        init_double(
            &mut init,
            &mut store,
            dims,
            &format!("enc{l}"),
            cin,
            width(cfg, l),
        );
        cin = width(cfg, l);
    }
    for l in (0..cfg.levels).rev() {
        init_double(
            &mut init,
            &mut store,
            dims,
            &format!("dec{l}"),
            width(cfg, l + 1) + width(cfg, l),
            width(cfg, l),
        );
    }
    init.conv(
        &mut store,
        "out",
        &dims.pointwise(cfg.num_classes, width(cfg, 0)),
        true,
    );
    Ok(store)
}

fn double<T: Real>(s: &Session<T>, name: &str, x: &Var<T>, slope: f64) -> Result<Var<T>> {
    let y = s.conv_bn_act(&format!("{name}.block1"), x, slope)?;
    s.conv_bn_act(&format!("{name}.block2"), &y, slope)
}

/// Logits for `[N, C, H, W]` slices (2-D) or `[N, C, D, H, W]` chunks (3-D).
pub fn unet_forward<T: Real>(
    s: &Session<T>,
    cfg: &UnetConfig,
    dims: UnetDims,
    input: &Tensor<T>,
) -> Result<Var<T>> {
    let shape = input.shape();
    let rank = match dims {
        UnetDims::Two => 4,
        UnetDims::Three => 5,
    };
    if shape.len() != rank || shape[1] != cfg.in_channels {
        return Err(Error::data(format!(
            "unet input shape {shape:?} does not match the config"
        )));
    }
    let (fd, fh, fw) = dims.factor();
    let m = 1usize << cfg.levels;
    let spatial = &shape[2..];
    let divisible = spatial.iter().rev().take(2).all(|&e| e % m == 0)
        && (dims == UnetDims::Two || spatial[0].is_multiple_of(m));
    if !divisible {
        return Err(Error::data(format!(
            "unet spatial extent {spatial:?} must be divisible by {m}"
        )));
    }
    if !input.all_finite() {
        return Err(Error::numeric("non-finite unet input"));
    }
    let x = Var::constant(input.clone());
    let pool = |v: &Var<T>| {
        if rank == 4 {
            ops::max_pool(v, (1, fh, fw))
        } else {
            ops::max_pool(v, (fd, fh, fw))
        }
    };
    let mut skips = Vec::new();
    let mut y = x;
    for l in 0..=cfg.levels {
        y = double(s, &format!("enc{l}"), &y, cfg.leaky_slope)?;
        if l < cfg.levels {
            skips.push(y.clone());
            y = pool(&y);
        }
    }
    for l in (0..cfg.levels).rev() {
        let up = ops::upsample_nearest(&y, (fd, fh, fw));
        let skip = skips.pop().expect("one skip per level");
        y = double(
            s,
            &format!("dec{l}"),
            &ops::concat_channels(&[&up, &skip]),
            cfg.leaky_slope,
        )?;
    }
    let logits = s.conv("out", &y)?;
    if !logits.value().all_finite() {
        return Err(Error::numeric("non-finite activations in unet output"));
    }
    Ok(logits)
}

/// Smallest-error base width so the parameter count lands near `target`.
pub fn matched_base_channels(cfg: &UnetConfig, dims: UnetDims, target: usize) -> usize {
    (1..=256)
        .min_by_key(|&b| {
            let c = UnetConfig {
                base_channels: b,
                ..cfg.clone()
            };
            let n = init_unet::<f32>(&c, dims, 0)
                .map(|s| s.num_params())
                .unwrap_or(usize::MAX);
            (n as f64 / target as f64).ln().abs().mul_add(1e6, 0.0) as u64
        })
        .unwrap_or(cfg.base_channels)
}
