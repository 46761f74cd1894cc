//! Data preparation: body crop, resize, HU clipping with min-max scaling,
//! augmentation, and 11-slice context windows.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume_io::{CtVolume, LabelMask};

pub const HU_CLIP_LOW: f32 = -1024.0;
pub const HU_CLIP_HIGH: f32 = 600.0;
/// Voxels strictly above this HU count as body when cropping.
pub const BODY_THRESHOLD_HU: i16 = -500;
pub const CONTEXT_RADIUS: usize = 5;
pub const WINDOW_LEN: usize = 2 * CONTEXT_RADIUS + 1;
pub const DEFAULT_IMAGE_SIZE: usize = 256;

/// Half-open in-plane bounding box `rows row0..row1`, `cols col0..col1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CropBox {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl CropBox {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            row0: 0,
            row1: rows,
            col0: 0,
            col1: cols,
        }
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }

    pub fn fits(&self, rows: usize, cols: usize) -> bool {
        self.row0 < self.row1 && self.col0 < self.col1 && self.row1 <= rows && self.col1 <= cols
    }
}

/// Tight in-plane box around the largest 6-connected body component.
pub fn body_crop(volume: &CtVolume) -> Result<(CropBox, CtVolume)> {
    let [d, h, w] = volume.shape();
    let vox = volume.voxels();
    let body: Vec<bool> = vox.iter().map(|&v| v > BODY_THRESHOLD_HU).collect();
    let mut comp = vec![u32::MAX; body.len()];
    let mut best: Option<(usize, CropBox)> = None;
    let mut queue = VecDeque::new();
    let mut next_label = 0u32;
    for start in 0..body.len() {
        if !body[start] || comp[start] != u32::MAX {
            continue;
        }
        let label = next_label;
        next_label += 1;
        comp[start] = label;
        queue.push_back(start);
        let mut size = 0usize;
        let mut bb = CropBox {
            row0: usize::MAX,
            row1: 0,
            col0: usize::MAX,
            col1: 0,
        };
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, rem) = (i / (h * w), i % (h * w));
            let (y, x) = (rem / w, rem % w);
            bb.row0 = bb.row0.min(y);
            bb.row1 = bb.row1.max(y + 1);
            bb.col0 = bb.col0.min(x);
            bb.col1 = bb.col1.max(x + 1);
            let mut visit = |j: usize| {
                if body[j] && comp[j] == u32::MAX {
                    comp[j] = label;
                    queue.push_back(j);
                }
            };
            if z > 0 {
                visit(i - h * w);
            }
            if z + 1 < d {
                visit(i + h * w);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, bb));
        }
    }
    let (_, bb) =
        best.ok_or_else(|| Error::data("no body found: no voxel above the body threshold"))?;
    Ok((bb, crop_volume(volume, bb)?))
}

pub fn crop_volume(volume: &CtVolume, bb: CropBox) -> Result<CtVolume> {
    let [d, h, w] = volume.shape();
    if !bb.fits(h, w) {
        return Err(Error::data(format!(
            "crop box {bb:?} does not fit a {h}x{w} plane"
        )));
    }
    let mut out = Vec::with_capacity(d * bb.height() * bb.width());
    for z in 0..d {
        let plane = volume.slice(z);
        for y in bb.row0..bb.row1 {
            out.extend_from_slice(&plane[y * w + bb.col0..y * w + bb.col1]);
        }
    }
    CtVolume::new(
        volume.patient_id(),
        [d, bb.height(), bb.width()],
        volume.spacing(),
        out,
    )
}

pub fn crop_labels(plane: &[u8], cols: usize, bb: CropBox) -> Vec<u8> {
    let mut out = Vec::with_capacity(bb.height() * bb.width());
    for y in bb.row0..bb.row1 {
        out.extend_from_slice(&plane[y * cols + bb.col0..y * cols + bb.col1]);
    }
    out
}

/// `(clip(hu, −1024, 600) + 1024) / 1624`.
pub fn normalize_hu(hu: f32) -> f32 {
    (hu.clamp(HU_CLIP_LOW, HU_CLIP_HIGH) - HU_CLIP_LOW) / (HU_CLIP_HIGH - HU_CLIP_LOW)
}

pub fn normalize_slice(slice: &[i16]) -> Vec<f32> {
    slice.iter().map(|&v| normalize_hu(f32::from(v))).collect()
}

/// Inverse of the min-max scaling (valid on the clipped range).
pub fn denormalize(v: f32) -> f32 {
    v * (HU_CLIP_HIGH - HU_CLIP_LOW) + HU_CLIP_LOW
}

fn check_resize_dims(rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Result<()> {
    if rows < 2 || cols < 2 || out_rows == 0 || out_cols == 0 {
        return Err(Error::data(format!(
            "degenerate resize {rows}x{cols} -> {out_rows}x{out_cols}"
        )));
    }
    Ok(())
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(
    src: &[f32],
    rows: usize,
    cols: usize,
    out_rows: usize,
    out_cols: usize,
) -> Result<Vec<f32>> {
    check_resize_dims(rows, cols, out_rows, out_cols)?;
    if (rows, cols) == (out_rows, out_cols) {
        return Ok(src.to_vec());
    }
    let sy = rows as f32 / out_rows as f32;
    let sx = cols as f32 / out_cols as f32;
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for oy in 0..out_rows {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (rows - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(rows - 1);
        let ty = fy - y0 as f32;
        for ox in 0..out_cols {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (cols - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cols - 1);
            let tx = fx - x0 as f32;
            let top = src[y0 * cols + x0] * (1.0 - tx) + src[y0 * cols + x1] * tx;
            let bottom = src[y1 * cols + x0] * (1.0 - tx) + src[y1 * cols + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    Ok(out)
}

/// Source index sampled by nearest-neighbour resizing from `len` to `out_len`.
pub fn nearest_index(o: usize, len: usize, out_len: usize) -> usize {
    (((o as f64 + 0.5) * len as f64 / out_len as f64).floor() as usize).min(len - 1)
}

pub fn resize_nearest<V: Copy>(
    src: &[V],
    rows: usize,
    cols: usize,
    out_rows: usize,
    out_cols: usize,
) -> Result<Vec<V>> {
    check_resize_dims(rows, cols, out_rows, out_cols)?;
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for oy in 0..out_rows {
        let y = nearest_index(oy, rows, out_rows);
        for ox in 0..out_cols {
            out.push(src[y * cols + nearest_index(ox, cols, out_cols)]);
        }
    }
    Ok(out)
}

/// Resizes an image slice (bilinear) or a label slice (nearest) to
/// `size × size`.
pub fn resize_image(slice: &[f32], rows: usize, cols: usize, size: usize) -> Result<Vec<f32>> {
    resize_bilinear(slice, rows, cols, size, size)
}

pub fn resize_labels(slice: &[u8], rows: usize, cols: usize, size: usize) -> Result<Vec<u8>> {
    resize_nearest(slice, rows, cols, size, size)
}

/// The target slice with its ±5 context slices, normalized to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SliceWindow {
    /// `[11, size, size]`, bottom to top.
    pub pixels: Tensor<f32>,
    pub target_index: usize,
    pub crop_box: CropBox,
    /// Source-to-window resize factors `(sy, sx)`.
    pub scale: (f32, f32),
}

impl SliceWindow {
    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn center(&self) -> &[f32] {
        let p = self.size() * self.size();
        &self.pixels.data()[CONTEXT_RADIUS * p..(CONTEXT_RADIUS + 1) * p]
    }
}

/// Volume indices of the window around `index`, edge-replicated.
pub fn window_indices(index: usize, depth: usize) -> [usize; WINDOW_LEN] {
    let mut out = [0; WINDOW_LEN];
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = (index + k).saturating_sub(CONTEXT_RADIUS).min(depth - 1);
    }
    out
}

/// A volume cropped, normalized and resized once, ready for window
/// extraction.
#[derive(Clone, Debug)]
pub struct PreparedVolume {
    pub crop_box: CropBox,
    pub source_shape: [usize; 3],
    pub size: usize,
    /// One `size × size` plane per source slice.
    pub slices: Vec<Vec<f32>>,
}

impl PreparedVolume {
    pub fn new(volume: &CtVolume, size: usize) -> Result<Self> {
        let (crop_box, cropped) = body_crop(volume)?;
        Self::with_crop(volume, &cropped, crop_box, size)
    }

    fn with_crop(
        volume: &CtVolume,
        cropped: &CtVolume,
        crop_box: CropBox,
        size: usize,
    ) -> Result<Self> {
        let [d, h, w] = cropped.shape();
        let slices = (0..d)
            .map(|z| resize_image(&normalize_slice(cropped.slice(z)), h, w, size))
            .collect::<Result<_>>()?;
        Ok(Self {
            crop_box,
            source_shape: volume.shape(),
            size,
            slices,
        })
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn scale(&self) -> (f32, f32) {
        (
            self.size as f32 / self.crop_box.height() as f32,
            self.size as f32 / self.crop_box.width() as f32,
        )
    }

    pub fn window(&self, index: usize) -> Result<SliceWindow> {
        if index >= self.depth() {
            return Err(Error::data(format!(
                "slice index {index} out of range for depth {}",
                self.depth()
            )));
        }
        let p = self.size * self.size;
        let mut data = Vec::with_capacity(WINDOW_LEN * p);
        for z in window_indices(index, self.depth()) {
            data.extend_from_slice(&self.slices[z]);
        }
        Ok(SliceWindow {
            pixels: Tensor::from_vec(&[WINDOW_LEN, self.size, self.size], data),
            target_index: index,
            crop_box: self.crop_box,
            scale: self.scale(),
        })
    }

    /// The mask's slice `index`, cropped and nearest-resized like the image.
    pub fn label_slice(&self, mask: &LabelMask, index: usize) -> Result<Vec<u8>> {
        let [_, _, w] = mask.shape();
        let cropped = crop_labels(mask.slice(index), w, self.crop_box);
        resize_labels(
            &cropped,
            self.crop_box.height(),
            self.crop_box.width(),
            self.size,
        )
    }
}

pub fn make_windows(volume: &CtVolume, indices: &[usize], size: usize) -> Result<Vec<SliceWindow>> {
    let prepared = PreparedVolume::new(volume, size)?;
    indices.iter().map(|&i| prepared.window(i)).collect()
}

/// Random affine augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f32,
    /// `(tx, ty)`: columns, rows.
    pub translate_px: (f32, f32),
    pub scale: f32,
}

pub const ROTATION_RANGE_DEG: (f32, f32) = (-10.0, 10.0);
pub const TRANSLATE_RANGE_PX: (f32, f32) = (-10.0, 10.0);
pub const SCALE_RANGE: (f32, f32) = (0.9, 1.05);

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation_deg: 0.0,
        translate_px: (0.0, 0.0),
        scale: 1.0,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            rotation_deg: rng.gen_range(ROTATION_RANGE_DEG.0..=ROTATION_RANGE_DEG.1),
            translate_px: (
                rng.gen_range(TRANSLATE_RANGE_PX.0..=TRANSLATE_RANGE_PX.1),
                rng.gen_range(TRANSLATE_RANGE_PX.0..=TRANSLATE_RANGE_PX.1),
            ),
            scale: rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let within = |v: f32, (lo, hi): (f32, f32)| v.is_finite() && v >= lo && v <= hi;
        if within(self.rotation_deg, ROTATION_RANGE_DEG)
            && within(self.translate_px.0, TRANSLATE_RANGE_PX)
            && within(self.translate_px.1, TRANSLATE_RANGE_PX)
            && within(self.scale, SCALE_RANGE)
        {
            Ok(())
        } else {
            Err(Error::data(format!(
                "augmentation parameters out of range: {self:?}"
            )))
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Maps an output pixel centre back to input coordinates:
    /// rotation about the centre, then translation, then scaling about the
    /// centre, inverted.
    fn inverse(&self, size: usize) -> impl Fn(f32, f32) -> (f32, f32) {
        let c = (size as f32 - 1.0) / 2.0;
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let (tx, ty) = self.translate_px;
        let s = self.scale;
        move |y, x| {
            let (u, v) = ((x - c) / s - tx, (y - c) / s - ty);
            // inverse rotation
            let xr = cos * u + sin * v;
            let yr = -sin * u + cos * v;
            (yr + c, xr + c)
        }
    }
}

fn warp_bilinear(src: &[f32], size: usize, map: &impl Fn(f32, f32) -> (f32, f32)) -> Vec<f32> {
    let sample = |y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
            0.0
        } else {
            src[y as usize * size + x as usize]
        }
    };
    let mut out = Vec::with_capacity(size * size);
    for oy in 0..size {
        for ox in 0..size {
            let (fy, fx) = map(oy as f32, ox as f32);
            let (y0, x0) = (fy.floor(), fx.floor());
            let (ty, tx) = (fy - y0, fx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let top = sample(y0, x0) * (1.0 - tx) + sample(y0, x0 + 1) * tx;
            let bottom = sample(y0 + 1, x0) * (1.0 - tx) + sample(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn warp_nearest(src: &[u8], size: usize, map: &impl Fn(f32, f32) -> (f32, f32)) -> Vec<u8> {
    let mut out = Vec::with_capacity(size * size);
    for oy in 0..size {
        for ox in 0..size {
            let (fy, fx) = map(oy as f32, ox as f32);
            let (y, x) = (fy.round(), fx.round());
            out.push(
                if y < 0.0 || x < 0.0 || y >= size as f32 || x >= size as f32 {
                    0
                } else {
                    src[y as usize * size + x as usize]
                },
            );
        }
    }
    out
}

/// Applies one affine transform to every window slice (bilinear) and every
/// label plane (nearest). Out-of-frame pixels become 0.
pub fn augment(
    window: &SliceWindow,
    labels: &[Vec<u8>],
    params: &AugmentParams,
) -> Result<(SliceWindow, Vec<Vec<u8>>)> {
    params.validate()?;
    let size = window.size();
    for l in labels {
        if l.len() != size * size {
            return Err(Error::data("label plane does not match window size"));
        }
    }
    if params.is_identity() {
        return Ok((window.clone(), labels.to_vec()));
    }
    let map = params.inverse(size);
    let p = size * size;
    let mut data = Vec::with_capacity(window.pixels.numel());
    for plane in window.pixels.data().chunks(p) {
        data.extend(
            warp_bilinear(plane, size, &map)
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0)),
        );
    }
    let out = SliceWindow {
        pixels: Tensor::from_vec(window.pixels.shape(), data),
        ..window.clone()
    };
    let labels = labels.iter().map(|l| warp_nearest(l, size, &map)).collect();
    Ok((out, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::Spacing;

    fn volume(shape: [usize; 3], f: impl Fn(usize, usize, usize) -> i16) -> CtVolume {
        let mut v = Vec::new();
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    v.push(f(z, y, x));
                }
            }
        }
        CtVolume::new("t", shape, Spacing::isotropic(1.0).unwrap(), v).unwrap()
    }

    /// Independent oracle: bounding box of all voxels above threshold.
    fn brute_force_box(vol: &CtVolume) -> CropBox {
        let [d, h, w] = vol.shape();
        let mut bb = CropBox {
            row0: h,
            row1: 0,
            col0: w,
            col1: 0,
        };
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if vol.get(z, y, x) > BODY_THRESHOLD_HU {
                        bb.row0 = bb.row0.min(y);
                        bb.row1 = bb.row1.max(y + 1);
                        bb.col0 = bb.col0.min(x);
                        bb.col1 = bb.col1.max(x + 1);
                    }
                }
            }
        }
        bb
    }

    #[test]
    fn crops_body_ellipsoid() {
        // rows 10..=54, cols 8..=56
        let (cy, cx, ry, rx) = (32.0, 32.0, 22.0, 24.0);
        let vol = volume([16, 64, 64], |_, y, x| {
            let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
            if dy * dy + dx * dx <= 1.0 {
                40
            } else {
                -1000
            }
        });
        let (bb, cropped) = body_crop(&vol).unwrap();
        assert_eq!(bb, brute_force_box(&vol));
        assert_eq!(
            bb,
            CropBox {
                row0: 10,
                row1: 55,
                col0: 8,
                col1: 57
            }
        );
        assert_eq!(cropped.shape(), [16, 45, 49]);
    }

    #[test]
    fn crop_ignores_smaller_components() {
        let vol = volume([2, 20, 20], |_, y, x| {
            if (5..15).contains(&y) && (5..15).contains(&x) || (y == 0 && x == 19) {
                0
            } else {
                -1000
            }
        });
        let (bb, _) = body_crop(&vol).unwrap();
        assert_eq!(
            bb,
            CropBox {
                row0: 5,
                row1: 15,
                col0: 5,
                col1: 15
            }
        );
    }

    #[test]
    fn crop_degenerate_inputs() {
        let air = volume([2, 4, 4], |_, _, _| -1000);
        assert!(body_crop(&air)
            .unwrap_err()
            .to_string()
            .contains("no body found"));
        let water = volume([2, 4, 5], |_, _, _| 0);
        assert_eq!(body_crop(&water).unwrap().0, CropBox::full(4, 5));
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(
            normalize_slice(&[-1024, 600, -2000, -212]),
            vec![0.0, 1.0, 0.0, 0.5]
        );
    }

    #[test]
    fn resize_examples() {
        let src: Vec<f32> = (0..256 * 256).map(|i| (i % 97) as f32).collect();
        assert_eq!(resize_image(&src, 256, 256, 256).unwrap(), src);
        let constant = vec![0.3f32; 512 * 512];
        assert!(resize_image(&constant, 512, 512, 256)
            .unwrap()
            .iter()
            .all(|&v| (v - 0.3).abs() < 1e-6));
        let labels: Vec<u8> = (0..40 * 30)
            .map(|i| if i % 7 < 3 { 0 } else { 2 })
            .collect();
        let out = resize_labels(&labels, 40, 30, 256).unwrap();
        assert!(out.iter().all(|&c| c == 0 || c == 2));
        assert!(out.contains(&0) && out.contains(&2));
        assert!(resize_image(&[1.0], 1, 1, 256).is_err());
    }

    #[test]
    fn window_boundary_policy() {
        assert_eq!(window_indices(8, 16), [3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13]);
        assert_eq!(window_indices(0, 16), [0, 0, 0, 0, 0, 0, 1, 2, 3, 4, 5]);
        assert_eq!(window_indices(15, 16)[6..], [15; 5]);
    }

    #[test]
    fn windows_from_volume() {
        let vol = volume([16, 12, 12], |z, _, _| z as i16 * 10);
        let ws = make_windows(&vol, &[0, 8, 15], 8).unwrap();
        assert_eq!(ws.len(), 3);
        for w in &ws {
            assert_eq!(w.pixels.shape(), [11, 8, 8]);
            assert!(w.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // slice 3 sits first in the window of target 8
        assert_eq!(ws[1].pixels.data()[0], normalize_hu(30.0));
        assert!(make_windows(&vol, &[16], 8)
            .unwrap_err()
            .to_string()
            .contains("out of range"));
    }

    fn blob(size: usize) -> Vec<f32> {
        let c = (size as f32 - 1.0) / 2.0;
        (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f32 - c, (i % size) as f32 - c);
                (-(y * y + (x - 4.0) * (x - 4.0)) / 60.0).exp()
            })
            .collect()
    }

    fn single_window(planes: Vec<f32>, size: usize) -> SliceWindow {
        let reps: Vec<f32> = (0..WINDOW_LEN).flat_map(|_| planes.clone()).collect();
        SliceWindow {
            pixels: Tensor::from_vec(&[WINDOW_LEN, size, size], reps),
            target_index: 0,
            crop_box: CropBox::full(size, size),
            scale: (1.0, 1.0),
        }
    }

    #[test]
    fn identity_augmentation_is_exact() {
        let w = single_window(blob(32), 32);
        let labels = vec![(0..32 * 32).map(|i| (i % 3) as u8).collect::<Vec<_>>()];
        let (out, out_labels) = augment(&w, &labels, &AugmentParams::IDENTITY).unwrap();
        assert_eq!(out, w);
        assert_eq!(out_labels, labels);
    }

    #[test]
    fn rotation_round_trip_is_close_to_identity() {
        let w = single_window(blob(48), 48);
        let rot = |deg| AugmentParams {
            rotation_deg: deg,
            ..AugmentParams::IDENTITY
        };
        let (a, _) = augment(&w, &[], &rot(10.0)).unwrap();
        let (b, _) = augment(&a, &[], &rot(-10.0)).unwrap();
        let max = w
            .pixels
            .data()
            .iter()
            .zip(b.pixels.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max);
        assert!(max < 0.05, "max abs diff {max}");
    }

    #[test]
    fn translation_moves_impulse() {
        let size = 32;
        let mut plane = vec![0.0f32; size * size];
        plane[12 * size + 5] = 1.0;
        let w = single_window(plane, size);
        let mut lab = vec![0u8; size * size];
        lab[12 * size + 5] = 2;
        let t = AugmentParams {
            translate_px: (10.0, 0.0),
            ..AugmentParams::IDENTITY
        };
        let (out, labels) = augment(&w, &[lab], &t).unwrap();
        let center = out.center();
        let peak = center
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 12 * size + 15);
        assert!((center[peak] - 1.0).abs() < 1e-6);
        assert_eq!(labels[0][12 * size + 15], 2);
    }

    #[test]
    fn augment_rejects_out_of_range() {
        let w = single_window(blob(8), 8);
        let bad = AugmentParams {
            scale: 1.2,
            ..AugmentParams::IDENTITY
        };
        assert!(augment(&w, &[], &bad).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::SeedableRng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn windows_are_bounded_and_full_length(depth in 1usize..20, seed in any::<u64>(), size in 2usize..10) {
                use rand::Rng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let vals: Vec<i16> = (0..depth * 9 * 7).map(|_| rng.gen_range(-3024..=3071)).collect();
                // keep at least one body voxel
                let mut vals = vals;
                vals[0] = 100;
                let vol = CtVolume::new("p", [depth, 9, 7], Spacing::isotropic(1.0).unwrap(), vals).unwrap();
                let idx: Vec<usize> = (0..depth).collect();
                for w in make_windows(&vol, &idx, size).unwrap() {
                    prop_assert_eq!(w.pixels.shape(), &[WINDOW_LEN, size, size][..]);
                    prop_assert!(w.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }

            #[test]
            fn label_warps_never_invent_classes(seed in any::<u64>()) {
                use rand::Rng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let size = 16;
                let present: u8 = rng.gen_range(1..3);
                let lab: Vec<u8> = (0..size * size).map(|_| if rng.gen_bool(0.3) { present } else { 0 }).collect();
                let params = AugmentParams::sample(&mut rng);
                let (_, out) = augment(&single_window(vec![0.5; size * size], size), &[lab], &params).unwrap();
                prop_assert!(out[0].iter().all(|&c| c == 0 || c == present));
            }

            #[test]
            fn normalization_inverts_on_clip_range(v in 0.0f32..=1.0) {
                let back = normalize_hu(denormalize(v));
                prop_assert!((back - v).abs() < 1e-6);
            }
        }
    }
}
