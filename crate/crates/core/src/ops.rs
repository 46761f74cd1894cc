//! Differentiable operations on [`Var`]s.
//!
//! Feature maps are laid out `[N, C, H, W]` (planar) or `[N, C, D, H, W]`
//! (volumetric). Convolutions are stride 1 with "same" zero padding.

use crate::autograd::Var;
use crate::tensor::{gemm, Real, Tensor};

type Dims3 = (usize, usize, usize);

fn spatial(shape: &[usize]) -> Dims3 {
    match shape.len() {
        4 => (1, shape[2], shape[3]),
        5 => (shape[2], shape[3], shape[4]),
        n => panic!("expected a 4-D or 5-D feature map, got rank {n}"),
    }
}

fn kernel_dims(shape: &[usize]) -> Dims3 {
    match shape.len() {
        4 => (1, shape[2], shape[3]),
        5 => (shape[2], shape[3], shape[4]),
        n => panic!("expected a 4-D or 5-D kernel, got rank {n}"),
    }
}

fn valid_range(len: usize, pad: usize, offset: usize) -> (usize, usize) {
    // output positions o with 0 <= o + offset - pad < len
    let lo = pad.saturating_sub(offset).min(len);
    let hi = (len + pad).saturating_sub(offset).min(len).max(lo);
    (lo, hi)
}

fn im2col<T: Real>(x: &[T], channels: usize, sp: Dims3, k: Dims3, cols: &mut [T]) {
    let (d, h, w) = sp;
    let (kd, kh, kw) = k;
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let p = d * h * w;
    let mut row = 0;
    for ci in 0..channels {
        let xc = &x[ci * p..(ci + 1) * p];
        for a in 0..kd {
            let (z_lo, z_hi) = valid_range(d, pd, a);
            for b in 0..kh {
                let (y_lo, y_hi) = valid_range(h, ph, b);
                for c in 0..kw {
                    let (x_lo, x_hi) = valid_range(w, pw, c);
                    let out = &mut cols[row * p..(row + 1) * p];
                    row += 1;
                    for z in 0..d {
                        for y in 0..h {
                            let o = &mut out[(z * h + y) * w..(z * h + y + 1) * w];
                            if z < z_lo || z >= z_hi || y < y_lo || y >= y_hi {
                                o.fill(T::zero());
                                continue;
                            }
                            let iz = z + a - pd;
                            let iy = y + b - ph;
                            let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            o[..x_lo].fill(T::zero());
                            o[x_hi..].fill(T::zero());
                            o[x_lo..x_hi].copy_from_slice(&src[x_lo + c - pw..x_hi + c - pw]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], channels: usize, sp: Dims3, k: Dims3, x: &mut [T]) {
    let (d, h, w) = sp;
    let (kd, kh, kw) = k;
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let p = d * h * w;
    let mut row = 0;
    for ci in 0..channels {
        let xc = &mut x[ci * p..(ci + 1) * p];
        for a in 0..kd {
            let (z_lo, z_hi) = valid_range(d, pd, a);
            for b in 0..kh {
                let (y_lo, y_hi) = valid_range(h, ph, b);
                for c in 0..kw {
                    let (x_lo, x_hi) = valid_range(w, pw, c);
                    let src = &cols[row * p..(row + 1) * p];
                    row += 1;
                    for z in z_lo..z_hi {
                        for y in y_lo..y_hi {
                            let iz = z + a - pd;
                            let iy = y + b - ph;
                            let s = &src[(z * h + y) * w..(z * h + y + 1) * w];
                            let dst = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            for ox in x_lo..x_hi {
                                dst[ox + c - pw] += s[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution. Kernel extents must be odd.
pub fn conv<T: Real>(x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Var<T> {
    let xs = x.shape().to_vec();
    let ws = weight.shape().to_vec();
    assert_eq!(xs.len(), ws.len(), "kernel rank must match input rank");
    let (n, cin, p) = x.value().ncp();
    assert_eq!(
        ws[1], cin,
        "conv expects {} input channels, got {cin}",
        ws[1]
    );
    let cout = ws[0];
    let sp = spatial(&xs);
    let k = kernel_dims(&ws);
    assert!(
        k.0 % 2 == 1 && k.1 % 2 == 1 && k.2 % 2 == 1,
        "kernel extents must be odd"
    );
    let ck = cin * k.0 * k.1 * k.2;
    let pointwise = k == (1, 1, 1);

    let mut out_shape = xs.clone();
    out_shape[1] = cout;
    let mut out = vec![T::zero(); n * cout * p];
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ck * p]
    };
    let xv = x.value().data();
    let wv = weight.value().data();
    for i in 0..n {
        let xi = &xv[i * cin * p..(i + 1) * cin * p];
        let rhs: &[T] = if pointwise {
            xi
        } else {
            im2col(xi, cin, sp, k, &mut cols);
            &cols
        };
        gemm(
            cout,
            ck,
            p,
            wv,
            false,
            rhs,
            false,
            T::zero(),
            &mut out[i * cout * p..(i + 1) * cout * p],
        );
    }
    if let Some(b) = bias {
        assert_eq!(b.shape(), [cout], "bias length must equal output channels");
        let bv = b.value().data();
        for i in 0..n {
            for (co, &bc) in bv.iter().enumerate() {
                for v in &mut out[(i * cout + co) * p..(i * cout + co + 1) * p] {
                    *v += bc;
                }
            }
        }
    }

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Var::from_op(Tensor::from_vec(&out_shape, out), parents, move |g, ps| {
        let gv = g.data();
        let xv = ps[0].value().data();
        let wv = ps[1].value().data();
        let mut dx = ps[0].requires_grad().then(|| vec![T::zero(); n * cin * p]);
        let mut dw = ps[1].requires_grad().then(|| vec![T::zero(); cout * ck]);
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); ck * p]
        };
        let mut dcols = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); ck * p]
        };
        for i in 0..n {
            let gi = &gv[i * cout * p..(i + 1) * cout * p];
            let xi = &xv[i * cin * p..(i + 1) * cin * p];
            if let Some(dw) = dw.as_mut() {
                let rhs: &[T] = if pointwise {
                    xi
                } else {
                    im2col(xi, cin, sp, k, &mut cols);
                    &cols
                };
                gemm(cout, p, ck, gi, false, rhs, true, T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dxi = &mut dx[i * cin * p..(i + 1) * cin * p];
                if pointwise {
                    gemm(ck, cout, p, wv, true, gi, false, T::one(), dxi);
                } else {
                    gemm(ck, cout, p, wv, true, gi, false, T::zero(), &mut dcols);
                    col2im(&dcols, cin, sp, k, dxi);
                }
            }
        }
        let mut grads = vec![
            dx.map(|d| Tensor::from_vec(ps[0].shape(), d)),
            dw.map(|d| Tensor::from_vec(ps[1].shape(), d)),
        ];
        if ps.len() == 3 {
            let mut db = vec![T::zero(); cout];
            for i in 0..n {
                for (co, acc) in db.iter_mut().enumerate() {
                    *acc += gv[(i * cout + co) * p..(i * cout + co + 1) * p]
                        .iter()
                        .copied()
                        .sum();
                }
            }
            grads.push(Some(Tensor::from_vec(&[cout], db)));
        }
        grads
    })
}

/// Batch statistics observed by a training-mode [`batch_norm`] call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n − 1) variance, the quantity folded into running statistics.
    pub var: Vec<T>,
}

/// Per-channel batch normalization.
///
/// With `running = None` the batch statistics normalize the input and are
/// returned; otherwise the supplied running `(mean, var)` are used.
pub fn batch_norm<T: Real>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    running: Option<(&Tensor<T>, &Tensor<T>)>,
    eps: f64,
) -> (Var<T>, Option<BatchStats<T>>) {
    let (n, c, p) = x.value().ncp();
    let m = n * p;
    let xv = x.value().data();
    let (mean, var_biased, stats) = match running {
        Some((rm, rv)) => (rm.data().to_vec(), rv.data().to_vec(), None),
        None => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for i in 0..n {
                    s += xv[(i * c + ch) * p..(i * c + ch + 1) * p]
                        .iter()
                        .map(|v| v.f64())
                        .sum::<f64>();
                }
                let mu = s / m as f64;
                let mut ss = 0.0f64;
                for i in 0..n {
                    ss += xv[(i * c + ch) * p..(i * c + ch + 1) * p]
                        .iter()
                        .map(|v| (v.f64() - mu).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = T::of(mu);
                var[ch] = T::of(ss / m as f64);
            }
            let unbiased = var
                .iter()
                .map(|&v| {
                    if m > 1 {
                        v * T::of(m as f64 / (m - 1) as f64)
                    } else {
                        v
                    }
                })
                .collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
    };
    let train = stats.is_some();
    let invstd: Vec<T> = var_biased
        .iter()
        .map(|&v| T::one() / (v + T::of(eps)).sqrt())
        .collect();
    let gv = gamma.value().data();
    let bv = beta.value().data();
    let mut out = vec![T::zero(); xv.len()];
    for i in 0..n {
        for ch in 0..c {
            let r = (i * c + ch) * p..(i * c + ch + 1) * p;
            let (mu, is, g, b) = (mean[ch], invstd[ch], gv[ch], bv[ch]);
            for (o, &v) in out[r.clone()].iter_mut().zip(&xv[r]) {
                *o = (v - mu) * is * g + b;
            }
        }
    }
    let y = Var::from_op(
        Tensor::from_vec(x.shape(), out),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g, ps| {
            let gv = g.data();
            let xv = ps[0].value().data();
            let gamma = ps[1].value().data();
            let mut dx = vec![T::zero(); xv.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ch in 0..c {
                let (mu, is) = (mean[ch], invstd[ch]);
                let mut sum_dy = 0.0f64;
                let mut sum_dy_xhat = 0.0f64;
                for i in 0..n {
                    let r = (i * c + ch) * p..(i * c + ch + 1) * p;
                    for (&dy, &v) in gv[r.clone()].iter().zip(&xv[r]) {
                        sum_dy += dy.f64();
                        sum_dy_xhat += dy.f64() * ((v - mu) * is).f64();
                    }
                }
                dgamma[ch] = T::of(sum_dy_xhat);
                dbeta[ch] = T::of(sum_dy);
                let scale = gamma[ch] * is;
                let (mean_dy, mean_dy_xhat) =
                    (T::of(sum_dy / m as f64), T::of(sum_dy_xhat / m as f64));
                for i in 0..n {
                    let r = (i * c + ch) * p..(i * c + ch + 1) * p;
                    for ((d, &dy), &v) in dx[r.clone()].iter_mut().zip(&gv[r.clone()]).zip(&xv[r]) {
                        *d = if train {
                            let xhat = (v - mu) * is;
                            scale * (dy - mean_dy - xhat * mean_dy_xhat)
                        } else {
                            scale * dy
                        };
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(ps[0].shape(), dx)),
                Some(Tensor::from_vec(&[c], dgamma)),
                Some(Tensor::from_vec(&[c], dbeta)),
            ]
        },
    );
    (y, stats)
}

fn unary<T: Real>(x: &Var<T>, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<T> {
    let y = x.value().map(f);
    // df(input, output) -> local derivative
    let yc = y.clone();
    Var::from_op(y, vec![x.clone()], move |g, ps| {
        let xv = ps[0].value().data();
        let d: Vec<T> = g
            .data()
            .iter()
            .zip(xv)
            .zip(yc.data())
            .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
            .collect();
        vec![Some(Tensor::from_vec(g.shape(), d))]
    })
}

pub fn leaky_relu<T: Real>(x: &Var<T>, slope: f64) -> Var<T> {
    let s = T::of(slope);
    unary(
        x,
        move |v| if v > T::zero() { v } else { v * s },
        move |v, _| if v > T::zero() { T::one() } else { s },
    )
}

pub fn sigmoid<T: Real>(x: &Var<T>) -> Var<T> {
    unary(x, sigmoid_scalar, |_, y| y * (T::one() - y))
}

pub fn tanh<T: Real>(x: &Var<T>) -> Var<T> {
    unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
}

pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn add<T: Real>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let y = a.value().zip_map(b.value(), |x, y| x + y);
    Var::from_op(y, vec![a.clone(), b.clone()], |g, _| {
        vec![Some(g.clone()), Some(g.clone())]
    })
}

pub fn mul<T: Real>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let y = a.value().zip_map(b.value(), |x, y| x * y);
    Var::from_op(y, vec![a.clone(), b.clone()], |g, ps| {
        vec![
            Some(g.zip_map(ps[1].value(), |gi, bi| gi * bi)),
            Some(g.zip_map(ps[0].value(), |gi, ai| gi * ai)),
        ]
    })
}

/// `main · alpha + attn · (1 − alpha)` with `alpha` broadcast over channels.
pub fn attention_fuse<T: Real>(main: &Var<T>, attn: &Var<T>, alpha: &Var<T>) -> Var<T> {
    assert_eq!(
        main.shape(),
        attn.shape(),
        "branch logits must agree in shape"
    );
    let (n, c, p) = main.value().ncp();
    let (an, ac, ap) = alpha.value().ncp();
    assert!(
        an == n && ac == 1 && ap == p,
        "alpha must be [N, 1, spatial..]"
    );
    let mv = main.value().data();
    let sv = attn.value().data();
    let av = alpha.value().data();
    let mut out = vec![T::zero(); mv.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * p;
            for j in 0..p {
                let a = av[i * p + j];
                out[base + j] = mv[base + j] * a + sv[base + j] * (T::one() - a);
            }
        }
    }
    Var::from_op(
        Tensor::from_vec(main.shape(), out),
        vec![main.clone(), attn.clone(), alpha.clone()],
        move |g, ps| {
            let gv = g.data();
            let mv = ps[0].value().data();
            let sv = ps[1].value().data();
            let av = ps[2].value().data();
            let mut dm = vec![T::zero(); gv.len()];
            let mut ds = vec![T::zero(); gv.len()];
            let mut da = vec![T::zero(); n * p];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * p;
                    for j in 0..p {
                        let a = av[i * p + j];
                        let gi = gv[base + j];
                        dm[base + j] = gi * a;
                        ds[base + j] = gi * (T::one() - a);
                        da[i * p + j] += gi * (mv[base + j] - sv[base + j]);
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(ps[0].shape(), dm)),
                Some(Tensor::from_vec(ps[1].shape(), ds)),
                Some(Tensor::from_vec(ps[2].shape(), da)),
            ]
        },
    )
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(xs: &[&Var<T>]) -> Var<T> {
    assert!(!xs.is_empty());
    let (n, _, p) = xs[0].value().ncp();
    let chans: Vec<usize> = xs.iter().map(|x| x.shape()[1]).collect();
    for x in xs {
        assert_eq!(x.shape()[0], n);
        assert_eq!(
            &x.shape()[2..],
            &xs[0].shape()[2..],
            "spatial extents must agree"
        );
    }
    let total: usize = chans.iter().sum();
    let mut shape = xs[0].shape().to_vec();
    shape[1] = total;
    let mut out = Vec::with_capacity(n * total * p);
    for i in 0..n {
        for (x, &c) in xs.iter().zip(&chans) {
            out.extend_from_slice(&x.value().data()[i * c * p..(i + 1) * c * p]);
        }
    }
    Var::from_op(
        Tensor::from_vec(&shape, out),
        xs.iter().map(|&x| x.clone()).collect(),
        move |g, ps| {
            let gv = g.data();
            let mut grads: Vec<Vec<T>> = chans
                .iter()
                .map(|&c| Vec::with_capacity(n * c * p))
                .collect();
            for i in 0..n {
                let mut off = i * total * p;
                for (gr, &c) in grads.iter_mut().zip(&chans) {
                    gr.extend_from_slice(&gv[off..off + c * p]);
                    off += c * p;
                }
            }
            grads
                .into_iter()
                .zip(ps)
                .map(|(gr, p)| Some(Tensor::from_vec(p.shape(), gr)))
                .collect()
        },
    )
}

/// Channels `start .. start + len`.
pub fn narrow_channels<T: Real>(x: &Var<T>, start: usize, len: usize) -> Var<T> {
    let (n, c, p) = x.value().ncp();
    assert!(start + len <= c, "channel range out of bounds");
    let mut shape = x.shape().to_vec();
    shape[1] = len;
    let xv = x.value().data();
    let mut out = Vec::with_capacity(n * len * p);
    for i in 0..n {
        out.extend_from_slice(&xv[(i * c + start) * p..(i * c + start + len) * p]);
    }
    Var::from_op(
        Tensor::from_vec(&shape, out),
        vec![x.clone()],
        move |g, ps| {
            let mut d = vec![T::zero(); n * c * p];
            let gv = g.data();
            for i in 0..n {
                d[(i * c + start) * p..(i * c + start + len) * p]
                    .copy_from_slice(&gv[i * len * p..(i + 1) * len * p]);
            }
            vec![Some(Tensor::from_vec(ps[0].shape(), d))]
        },
    )
}

/// Non-overlapping max pooling with per-axis window `(d, h, w)`; extents
/// must be divisible by the window. Planar inputs use `d = 1`.
pub fn max_pool<T: Real>(x: &Var<T>, window: Dims3) -> Var<T> {
    let (n, c, _) = x.value().ncp();
    let (d, h, w) = spatial(x.shape());
    let (wd, wh, ww) = window;
    assert!(
        d % wd == 0 && h % wh == 0 && w % ww == 0,
        "extents must be divisible by the pool window"
    );
    let (od, oh, ow) = (d / wd, h / wh, w / ww);
    let mut shape = x.shape().to_vec();
    let rank = shape.len();
    shape[rank - 2] = oh;
    shape[rank - 1] = ow;
    if rank == 5 {
        shape[2] = od;
    }
    let xv = x.value().data();
    let (ip, op) = (d * h * w, od * oh * ow);
    let mut out = vec![T::zero(); n * c * op];
    let mut argmax = vec![0usize; n * c * op];
    for nc in 0..n * c {
        let src = &xv[nc * ip..(nc + 1) * ip];
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut at = 0;
                    for a in 0..wd {
                        for b in 0..wh {
                            for cc in 0..ww {
                                let idx = ((z * wd + a) * h + y * wh + b) * w + xx * ww + cc;
                                if src[idx] > best || (a == 0 && b == 0 && cc == 0) {
                                    best = src[idx];
                                    at = idx;
                                }
                            }
                        }
                    }
                    let o = nc * op + (z * oh + y) * ow + xx;
                    out[o] = best;
                    argmax[o] = nc * ip + at;
                }
            }
        }
    }
    Var::from_op(
        Tensor::from_vec(&shape, out),
        vec![x.clone()],
        move |g, ps| {
            let mut d = vec![T::zero(); ps[0].value().numel()];
            for (&gi, &at) in g.data().iter().zip(&argmax) {
                d[at] += gi;
            }
            vec![Some(Tensor::from_vec(ps[0].shape(), d))]
        },
    )
}

/// Nearest-neighbour upsampling by integer factors `(d, h, w)`.
pub fn upsample_nearest<T: Real>(x: &Var<T>, factor: Dims3) -> Var<T> {
    let (n, c, _) = x.value().ncp();
    let (d, h, w) = spatial(x.shape());
    let (fd, fh, fw) = factor;
    let (od, oh, ow) = (d * fd, h * fh, w * fw);
    let mut shape = x.shape().to_vec();
    let rank = shape.len();
    shape[rank - 2] = oh;
    shape[rank - 1] = ow;
    if rank == 5 {
        shape[2] = od;
    }
    let (ip, op) = (d * h * w, od * oh * ow);
    let xv = x.value().data();
    let mut out = vec![T::zero(); n * c * op];
    for nc in 0..n * c {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    out[nc * op + (z * oh + y) * ow + xx] =
                        xv[nc * ip + ((z / fd) * h + y / fh) * w + xx / fw];
                }
            }
        }
    }
    Var::from_op(
        Tensor::from_vec(&shape, out),
        vec![x.clone()],
        move |g, ps| {
            let gv = g.data();
            let mut dx = vec![T::zero(); n * c * ip];
            for nc in 0..n * c {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[nc * ip + ((z / fd) * h + y / fh) * w + xx / fw] +=
                                gv[nc * op + (z * oh + y) * ow + xx];
                        }
                    }
                }
            }
            vec![Some(Tensor::from_vec(ps[0].shape(), dx))]
        },
    )
}
