//! Segmentation losses over class logits.
//!
//! Both losses evaluate in f64 whatever the network precision and compute
//! their logit gradient eagerly; the returned variable replays it scaled by
//! the upstream gradient.

use nalgebra::SMatrix;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ridge added to both covariance matrices before inversion / log-det.
pub const RMI_EPS: f64 = 1e-5;
/// Region side; region vectors have `RMI_RADIUS²` entries.
pub const RMI_RADIUS: usize = 3;
pub const RMI_POOL: usize = 3;
/// Downsample only when the pooled map keeps at least this many pixels per
/// side.
pub const RMI_MIN_POOLED: usize = 6;
/// Weight of the cross-entropy term; the region term gets `1 − RMI_CE_WEIGHT`.
pub const RMI_CE_WEIGHT: f64 = 0.5;

const D: usize = RMI_RADIUS * RMI_RADIUS;
type Mat = SMatrix<f64, D, D>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Rmi,
    CeDice,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmi" => Ok(LossKind::Rmi),
            "ce_dice" => Ok(LossKind::CeDice),
            _ => Err(Error::config(format!("unknown loss {s:?} (rmi | ce_dice)"))),
        }
    }
}

/// Scalar loss value with its components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    /// Mean pixel cross-entropy.
    pub ce: f64,
    /// Region mutual-information term (`rmi`) or mean Dice complement
    /// (`ce_dice`).
    pub aux: f64,
}

impl LossKind {
    pub fn compute<T: Real>(self, logits: &Var<T>, target: &[u8]) -> Result<(Var<T>, LossParts)> {
        match self {
            LossKind::Rmi => rmi_loss(logits, target),
            LossKind::CeDice => ce_dice_loss(logits, target),
        }
    }
}

/// Logits viewed as a stack of `H × W` class maps, one per image (2-D
/// batches) or per image slice (3-D batches).
struct Layout {
    n: usize,
    c: usize,
    depth: usize,
    h: usize,
    w: usize,
}

impl Layout {
    fn of(shape: &[usize], target_len: usize) -> Result<Self> {
        let (n, c, depth, h, w) = match *shape {
            [n, c, h, w] => (n, c, 1, h, w),
            [n, c, d, h, w] => (n, c, d, h, w),
            _ => {
                return Err(Error::data(format!(
                    "loss expects [N, C, (D,) H, W] logits, got {shape:?}"
                )))
            }
        };
        if c < 2 {
            return Err(Error::data("loss needs at least two classes"));
        }
        if target_len != n * depth * h * w {
            return Err(Error::data(format!(
                "target has {target_len} labels, logits cover {}",
                n * depth * h * w
            )));
        }
        Ok(Self { n, c, depth, h, w })
    }

    fn images(&self) -> usize {
        self.n * self.depth
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Start of the `(image, class)` plane in the logits buffer.
    fn logit_base(&self, image: usize, class: usize) -> usize {
        let (i, d) = (image / self.depth, image % self.depth);
        ((i * self.c + class) * self.depth + d) * self.plane()
    }
}

/// Softmax probabilities in the logits' layout.
fn softmax<T: Real>(logits: &[T], l: &Layout) -> Vec<f64> {
    let mut p = vec![0.0; logits.len()];
    for img in 0..l.images() {
        for j in 0..l.plane() {
            let at = |c| l.logit_base(img, c) + j;
            let m = (0..l.c)
                .map(|c| logits[at(c)].f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..l.c).map(|c| (logits[at(c)].f64() - m).exp()).sum();
            for c in 0..l.c {
                p[at(c)] = (logits[at(c)].f64() - m).exp() / z;
            }
        }
    }
    p
}

/// Mean cross-entropy, accumulating `weight · dCE/dlogit` into `grad`.
fn cross_entropy<T: Real>(
    logits: &[T],
    probs: &[f64],
    target: &[u8],
    l: &Layout,
    weight: f64,
    grad: &mut [f64],
) -> f64 {
    let total = target.len() as f64;
    let mut ce = 0.0;
    for img in 0..l.images() {
        for j in 0..l.plane() {
            let y = target[img * l.plane() + j] as usize;
            let at = |c| l.logit_base(img, c) + j;
            let m = (0..l.c)
                .map(|c| logits[at(c)].f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = m
                + (0..l.c)
                    .map(|c| (logits[at(c)].f64() - m).exp())
                    .sum::<f64>()
                    .ln();
            ce += lse - logits[at(y)].f64();
            for c in 0..l.c {
                let onehot = if c == y { 1.0 } else { 0.0 };
                grad[at(c)] += weight * (probs[at(c)] - onehot) / total;
            }
        }
    }
    ce / total
}

/// Turns a gradient with respect to probabilities into one with respect to
/// logits (softmax Jacobian), adding it to `grad`.
fn softmax_backward(probs: &[f64], dprob: &[f64], l: &Layout, grad: &mut [f64]) {
    for img in 0..l.images() {
        for j in 0..l.plane() {
            let at = |c| l.logit_base(img, c) + j;
            let dot: f64 = (0..l.c).map(|c| probs[at(c)] * dprob[at(c)]).sum();
            for c in 0..l.c {
                grad[at(c)] += probs[at(c)] * (dprob[at(c)] - dot);
            }
        }
    }
}

fn validate_target(target: &[u8], classes: usize) -> Result<()> {
    match target.iter().find(|&&y| y as usize >= classes) {
        Some(y) => Err(Error::data(format!("label {y} outside 0..{classes}"))),
        None => Ok(()),
    }
}

fn replay<T: Real>(logits: &Var<T>, value: f64, grad: Vec<f64>) -> Var<T> {
    let g = Tensor::from_vec(logits.shape(), grad.into_iter().map(T::of).collect());
    Var::from_op(
        Tensor::scalar(T::of(value)),
        vec![logits.clone()],
        move |up, _| {
            let s = up.data()[0];
            vec![Some(g.map(|v| v * s))]
        },
    )
}

/// Pixel cross-entropy plus the mean over classes of `1 − soft Dice`, with
/// +1 smoothing so an absent class predicted absent scores Dice 1.
pub fn ce_dice_loss<T: Real>(logits: &Var<T>, target: &[u8]) -> Result<(Var<T>, LossParts)> {
    let l = Layout::of(logits.shape(), target.len())?;
    validate_target(target, l.c)?;
    let x = logits.value().data();
    let probs = softmax(x, &l);
    let mut grad = vec![0.0; x.len()];
    let ce = cross_entropy(x, &probs, target, &l, 1.0, &mut grad);

    let mut dprob = vec![0.0; x.len()];
    let mut dice_loss = 0.0;
    for c in 0..l.c {
        let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
        for img in 0..l.images() {
            let base = l.logit_base(img, c);
            for j in 0..l.plane() {
                let y = f64::from(u8::from(target[img * l.plane() + j] as usize == c));
                inter += probs[base + j] * y;
                psum += probs[base + j];
                ysum += y;
            }
        }
        let (num, den) = (2.0 * inter + 1.0, psum + ysum + 1.0);
        dice_loss += (1.0 - num / den) / l.c as f64;
        for img in 0..l.images() {
            let base = l.logit_base(img, c);
            for j in 0..l.plane() {
                let y = f64::from(u8::from(target[img * l.plane() + j] as usize == c));
                dprob[base + j] = -(2.0 * y * den - num) / (den * den) / l.c as f64;
            }
        }
    }
    softmax_backward(&probs, &dprob, &l, &mut grad);
    let total = ce + dice_loss;
    Ok((
        replay(logits, total, grad),
        LossParts {
            total,
            ce,
            aux: dice_loss,
        },
    ))
}

/// Average-pools by `f` (remainder rows/cols dropped); `f == 1` copies.
fn pool(map: &[f64], h: usize, w: usize, f: usize) -> (Vec<f64>, usize, usize) {
    let (hp, wp) = (h / f, w / f);
    let mut out = vec![0.0; hp * wp];
    for y in 0..hp * f {
        for x in 0..wp * f {
            out[(y / f) * wp + x / f] += map[y * w + x];
        }
    }
    let inv = 1.0 / (f * f) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    (out, hp, wp)
}

/// Centered `D × N` region vectors of a `hp × wp` map.
fn regions(map: &[f64], hp: usize, wp: usize) -> Vec<[f64; D]> {
    let (rh, rw) = (hp + 1 - RMI_RADIUS, wp + 1 - RMI_RADIUS);
    let mut cols = Vec::with_capacity(rh * rw);
    for y in 0..rh {
        for x in 0..rw {
            let mut v = [0.0; D];
            for dy in 0..RMI_RADIUS {
                for dx in 0..RMI_RADIUS {
                    v[dy * RMI_RADIUS + dx] = map[(y + dy) * wp + x + dx];
                }
            }
            cols.push(v);
        }
    }
    let n = cols.len() as f64;
    for k in 0..D {
        let mean = cols.iter().map(|v| v[k]).sum::<f64>() / n;
        cols.iter_mut().for_each(|v| v[k] -= mean);
    }
    cols
}

fn cross_cov(a: &[[f64; D]], b: &[[f64; D]]) -> Mat {
    let n = a.len() as f64;
    Mat::from_fn(|i, j| a.iter().zip(b).map(|(u, v)| u[i] * v[j]).sum::<f64>() / n)
}

/// `0.5 · logdet(V) / D` for one class map, where `V` is the label-region
/// covariance conditioned on the prediction regions (both ridge-regularized),
/// together with the gradient with respect to the pooled probability map.
fn region_term(prob: &[f64], label: &[f64], hp: usize, wp: usize) -> Result<(f64, Vec<f64>)> {
    let p = regions(prob, hp, wp);
    let y = regions(label, hp, wp);
    let n = p.len() as f64;
    let eye = Mat::identity() * RMI_EPS;
    let sp = cross_cov(&p, &p) + eye;
    let sl = cross_cov(&y, &y);
    let b = cross_cov(&y, &p);
    let sp_inv = sp
        .cholesky()
        .ok_or_else(|| Error::numeric("prediction covariance not positive definite"))?
        .inverse();
    let a = sp_inv * b.transpose();
    let v = sl - b * a + eye;
    let v = (v + v.transpose()) * 0.5;
    let chol = v
        .cholesky()
        .ok_or_else(|| Error::numeric("conditional label covariance not positive definite"))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    if !logdet.is_finite() {
        return Err(Error::numeric("non-finite region log-determinant"));
    }
    let scale = 0.5 / D as f64;
    let g = chol.inverse() * scale;
    let d_b = -2.0 * g * a.transpose();
    let d_s = a * g * a.transpose();
    // dP = (2 dS P + dBᵀ L) / N, then undo the centering
    let mut dp: Vec<[f64; D]> = p
        .iter()
        .zip(&y)
        .map(|(pc, yc)| {
            let mut out = [0.0; D];
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..D {
                    acc += 2.0 * d_s[(i, k)] * pc[k] + d_b[(k, i)] * yc[k];
                }
                *o = acc / n;
            }
            out
        })
        .collect();
    for k in 0..D {
        let mean = dp.iter().map(|v| v[k]).sum::<f64>() / n;
        dp.iter_mut().for_each(|v| v[k] -= mean);
    }
    let rw = wp + 1 - RMI_RADIUS;
    let mut dmap = vec![0.0; hp * wp];
    for (col, v) in dp.iter().enumerate() {
        let (y0, x0) = (col / rw, col % rw);
        for dy in 0..RMI_RADIUS {
            for dx in 0..RMI_RADIUS {
                dmap[(y0 + dy) * wp + x0 + dx] += v[dy * RMI_RADIUS + dx];
            }
        }
    }
    Ok((scale * logdet, dmap))
}

/// Cross-entropy blended with the region mutual-information term.
///
/// Per class and image, probabilities and one-hot labels are average-pooled
/// by 3 when the map stays at least 6 pixels wide, unfolded into 3×3 region
/// vectors, and scored by `0.5 · logdet` of the posterior label covariance
/// (divided by the region size). The region term sums over classes and
/// averages over images; it is a negative quantity that falls as prediction
/// regions explain label regions.
pub fn rmi_loss<T: Real>(logits: &Var<T>, target: &[u8]) -> Result<(Var<T>, LossParts)> {
    let l = Layout::of(logits.shape(), target.len())?;
    validate_target(target, l.c)?;
    if l.h < RMI_RADIUS || l.w < RMI_RADIUS {
        return Err(Error::data(format!(
            "region loss needs maps of at least {RMI_RADIUS}×{RMI_RADIUS}"
        )));
    }
    let x = logits.value().data();
    let probs = softmax(x, &l);
    let mut grad = vec![0.0; x.len()];
    let ce = cross_entropy(x, &probs, target, &l, RMI_CE_WEIGHT, &mut grad);

    let f = if l.h.min(l.w) / RMI_POOL >= RMI_MIN_POOLED {
        RMI_POOL
    } else {
        1
    };
    let region_weight = (1.0 - RMI_CE_WEIGHT) / l.images() as f64;
    let mut dprob = vec![0.0; x.len()];
    let mut region = 0.0;
    for img in 0..l.images() {
        let labels = &target[img * l.plane()..(img + 1) * l.plane()];
        for c in 0..l.c {
            let base = l.logit_base(img, c);
            let onehot: Vec<f64> = labels
                .iter()
                .map(|&y| f64::from(u8::from(y as usize == c)))
                .collect();
            let (pp, hp, wp) = pool(&probs[base..base + l.plane()], l.h, l.w, f);
            let (yp, _, _) = pool(&onehot, l.h, l.w, f);
            let (term, dpool) = region_term(&pp, &yp, hp, wp)?;
            region += term / l.images() as f64;
            let inv = region_weight / (f * f) as f64;
            for yy in 0..hp * f {
                for xx in 0..wp * f {
                    dprob[base + yy * l.w + xx] += inv * dpool[(yy / f) * wp + xx / f];
                }
            }
        }
    }
    softmax_backward(&probs, &dprob, &l, &mut grad);
    let total = RMI_CE_WEIGHT * ce + (1.0 - RMI_CE_WEIGHT) * region;
    if !total.is_finite() {
        return Err(Error::numeric("non-finite loss"));
    }
    Ok((
        replay(logits, total, grad),
        LossParts {
            total,
            ce,
            aux: region,
        },
    ))
}
