//! Mid-slice PNG rendering: grayscale anatomy with a label overlay in
//! three planes, and heatmaps of activation maps.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::data::{LabelMap, Modality, TumorRegion, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Overlay colours of classes 1..3: NCR/NET red, ED green, ET yellow.
pub const CLASS_COLORS: [[u8; 3]; 3] = [[255, 0, 0], [0, 255, 0], [255, 255, 0]];
/// Opacity of the label overlay.
pub const OVERLAY_ALPHA: f64 = 0.5;
/// Heatmaps are upscaled with nearest-neighbour until at least this wide.
pub const HEATMAP_MIN_SIDE: u32 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }

    /// Image size and the voxel index of pixel `(x, y)` at the mid slice.
    /// Axial fixes the last axis, coronal the second, sagittal the first.
    fn layout(self, dims: [usize; 3]) -> (usize, usize, impl Fn(usize, usize) -> usize) {
        let [h, w, d] = dims;
        let (mh, mw, md) = (h / 2, w / 2, d / 2);
        let (cols, rows) = match self {
            Plane::Axial => (w, h),
            Plane::Coronal => (d, h),
            Plane::Sagittal => (d, w),
        };
        let at = move |x: usize, y: usize| match self {
            Plane::Axial => (y * w + x) * d + md,
            Plane::Coronal => (y * w + mw) * d + x,
            Plane::Sagittal => (mh * w + y) * d + x,
        };
        (cols, rows, at)
    }
}

fn gray_levels(v: &Volume) -> Vec<u8> {
    let (lo, hi) = v
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = hi - lo;
    v.data
        .iter()
        .map(|&x| if span > 0.0 { ((x - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Mid slice of `base` in `plane`, with `labels` blended on top.
pub fn overlay_slice(base: &Volume, labels: Option<&LabelMap>, plane: Plane) -> Result<RgbImage> {
    if let Some(l) = labels {
        if l.dims != base.dims {
            return Err(Error::shape(format!("labels {:?} vs volume {:?}", l.dims, base.dims)));
        }
    }
    let gray = gray_levels(base);
    let (cols, rows, at) = plane.layout(base.dims);
    let mut img = RgbImage::new(cols as u32, rows as u32);
    for y in 0..rows {
        for x in 0..cols {
            let i = at(x, y);
            let g = gray[i];
            let mut px = [g; 3];
            if let Some(class) = labels.map(|l| l.data[i]).filter(|&c| c > 0) {
                let color = CLASS_COLORS[(class as usize - 1).min(2)];
                for (p, c) in px.iter_mut().zip(color) {
                    *p = ((1.0 - OVERLAY_ALPHA) * *p as f64 + OVERLAY_ALPHA * c as f64).round() as u8;
                }
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}

/// Blue to red through cyan, green and yellow.
pub fn heat_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f64| ((1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Axial mid slice of a `[c, h, w, d]` map, averaged over channels and
/// scaled by its own maximum.
pub fn heatmap(map: &Tensor) -> Result<RgbImage> {
    if map.shape().len() != 4 {
        return Err(Error::shape(format!("heatmap needs [c,h,w,d], got {:?}", map.shape())));
    }
    let dims = map.spatial();
    let c = map.channels();
    let n = map.voxels();
    let mean: Vec<f64> = (0..n)
        .map(|v| (0..c).map(|k| map.data()[k * n + v]).sum::<f64>() / c as f64)
        .collect();
    let (cols, rows, at) = Plane::Axial.layout(dims);
    let slice: Vec<f64> = (0..rows).flat_map(|y| (0..cols).map(move |x| (x, y))).map(|(x, y)| mean[at(x, y)]).collect();
    let peak = slice.iter().cloned().fold(0.0, f64::max);
    let scale = (HEATMAP_MIN_SIDE as usize).div_ceil(cols.min(rows).max(1)).max(1);
    let mut img = RgbImage::new((cols * scale) as u32, (rows * scale) as u32);
    for (px_x, px_y, px) in img.enumerate_pixels_mut() {
        let (x, y) = (px_x as usize / scale, px_y as usize / scale);
        let v = slice[y * cols + x];
        *px = Rgb(heat_color(if peak > 0.0 { v / peak } else { 0.0 }));
    }
    Ok(img)
}

fn save(img: &RgbImage, path: PathBuf) -> Result<PathBuf> {
    img.save(&path).map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    Ok(path)
}

/// Writes `{prefix}_{plane}.png` for the three planes.
pub fn write_overlays(dir: &Path, prefix: &str, base: &Volume, labels: Option<&LabelMap>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    Plane::ALL
        .iter()
        .map(|&p| save(&overlay_slice(base, labels, p)?, dir.join(format!("{prefix}_{}.png", p.name()))))
        .collect()
}

/// Writes one heatmap per (modality, region): `activations[m][r]`.
pub fn write_activation_maps(dir: &Path, prefix: &str, activations: &[Vec<Tensor>]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (m, row) in Modality::ALL.iter().zip(activations) {
        for (r, map) in TumorRegion::ALL.iter().zip(row) {
            let name = format!("{prefix}_act_{}_{}.png", m.suffix(), r.slug());
            out.push(save(&heatmap(map)?, dir.join(name))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume() -> Volume {
        let dims = [6, 5, 4];
        Volume {
            dims,
            data: (0..120).map(|i| (i % 17) as f64).collect(),
        }
    }

    #[test]
    fn background_overlay_is_grayscale_base() {
        let v = volume();
        let bg = LabelMap::zeros(v.dims);
        for p in Plane::ALL {
            let plain = overlay_slice(&v, None, p).unwrap();
            let over = overlay_slice(&v, Some(&bg), p).unwrap();
            assert_eq!(plain, over);
            assert!(plain.pixels().all(|px| px[0] == px[1] && px[1] == px[2]));
        }
    }

    #[test]
    fn plane_sizes_and_colors() {
        let v = volume();
        let mut l = LabelMap::zeros(v.dims);
        l.data[(3 * 5 + 2) * 4 + 2] = 3;
        let ax = overlay_slice(&v, Some(&l), Plane::Axial).unwrap();
        assert_eq!(ax.dimensions(), (5, 6));
        let px = ax.get_pixel(2, 3);
        assert!(px[0] > px[2] && px[1] > px[2]);
        assert_eq!(overlay_slice(&v, None, Plane::Coronal).unwrap().dimensions(), (4, 6));
        assert_eq!(overlay_slice(&v, None, Plane::Sagittal).unwrap().dimensions(), (4, 5));
    }

    #[test]
    fn heat_ramp_endpoints() {
        assert_eq!(heat_color(0.0), [0, 0, 128]);
        assert_eq!(heat_color(1.0), [128, 0, 0]);
        let img = heatmap(&Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64)).unwrap();
        assert_eq!(img.dimensions(), (64, 64));
    }
}
