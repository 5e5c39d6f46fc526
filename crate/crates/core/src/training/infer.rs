use crate::data::LabelMap;
use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;

/// Mean of the softmax fields over all 8 axis-flip combinations, each
/// flipped back before averaging. Without `enabled`, a single forward.
pub fn tta_infer(model: &Model, input: &Tensor, enabled: bool) -> Result<Tensor> {
    if !enabled {
        return model.predict(input);
    }
    let mut acc: Option<Tensor> = None;
    for mask in 0..8u8 {
        let axes = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
        let p = model.predict(&input.flip_spatial(axes))?.flip_spatial(axes);
        match &mut acc {
            Some(a) => a.add_assign(&p),
            None => acc = Some(p),
        }
    }
    let mut out = acc.expect("eight passes");
    out.scale_in_place(1.0 / 8.0);
    Ok(out)
}

pub fn predict_labels(probs: &Tensor) -> LabelMap {
    LabelMap {
        dims: probs.spatial(),
        data: probs.argmax_channels(),
    }
}

/// Window origins covering `n` with stride `win / 2`; the last window is
/// flush with the end.
pub fn window_starts(n: usize, win: usize) -> Vec<usize> {
    if n <= win {
        return vec![0];
    }
    let stride = (win / 2).max(1);
    let mut s: Vec<usize> = (0..=n - win).step_by(stride).collect();
    if *s.last().expect("nonempty") != n - win {
        s.push(n - win);
    }
    s
}

fn crop(x: &Tensor, origin: [usize; 3], size: [usize; 3]) -> Tensor {
    let [_, w, d] = x.spatial();
    let c = x.channels();
    let mut out = Tensor::zeros(&[c, size[0], size[1], size[2]]);
    for ci in 0..c {
        let src = x.channel(ci);
        let dst = out.channel_mut(ci);
        for i in 0..size[0] {
            for j in 0..size[1] {
                let s = ((origin[0] + i) * w + origin[1] + j) * d + origin[2];
                let t = (i * size[1] + j) * size[2];
                dst[t..t + size[2]].copy_from_slice(&src[s..s + size[2]]);
            }
        }
    }
    out
}

fn pad_to(x: &Tensor, dims: [usize; 3]) -> Tensor {
    let [h, w, d] = x.spatial();
    if [h, w, d] == dims {
        return x.clone();
    }
    let c = x.channels();
    let mut out = Tensor::zeros(&[c, dims[0], dims[1], dims[2]]);
    for ci in 0..c {
        let src = x.channel(ci);
        let dst = out.channel_mut(ci);
        for i in 0..h {
            for j in 0..w {
                let s = (i * w + j) * d;
                let t = (i * dims[1] + j) * dims[2];
                dst[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

/// The `window`-sized block centred in `x`, zero-padded where `x` is
/// smaller.
pub fn center_window(x: &Tensor, window: [usize; 3]) -> Tensor {
    let dims = x.spatial();
    let padded = pad_to(x, [0, 1, 2].map(|i| dims[i].max(window[i])));
    let p = padded.spatial();
    crop(&padded, [0, 1, 2].map(|i| (p[i] - window[i]) / 2), window)
}

/// Tiled inference with `window`-sized patches at 50% overlap; overlapping
/// probabilities are summed and renormalised per voxel, which equals their
/// mean. Inputs smaller
/// than the window are zero-padded.
pub fn sliding_window(model: &Model, input: &Tensor, window: [usize; 3], tta: bool) -> Result<Tensor> {
    let dims = input.spatial();
    let padded_dims = [0, 1, 2].map(|i| dims[i].max(window[i]));
    let x = pad_to(input, padded_dims);
    let starts: Vec<Vec<usize>> = (0..3).map(|i| window_starts(padded_dims[i], window[i])).collect();
    let n: usize = padded_dims.iter().product();
    let mut acc: Option<Tensor> = None;
    for &a in &starts[0] {
        for &b in &starts[1] {
            for &c in &starts[2] {
                let patch = crop(&x, [a, b, c], window);
                let p = tta_infer(model, &patch, tta)?;
                let k = p.channels();
                let acc = acc.get_or_insert_with(|| Tensor::zeros(&[k, padded_dims[0], padded_dims[1], padded_dims[2]]));
                for ci in 0..k {
                    let src = p.channel(ci);
                    let dst = acc.channel_mut(ci);
                    for i in 0..window[0] {
                        for j in 0..window[1] {
                            let t = ((a + i) * padded_dims[1] + b + j) * padded_dims[2] + c;
                            let s = (i * window[1] + j) * window[2];
                            for (o, v) in dst[t..t + window[2]].iter_mut().zip(&src[s..s + window[2]]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut acc = acc.expect("at least one window");
    let k = acc.channels();
    for v in 0..n {
        let s: f64 = (0..k).map(|ci| acc.data()[ci * n + v]).sum();
        for ci in 0..k {
            acc.data_mut()[ci * n + v] /= s;
        }
    }
    Ok(crop(&acc, [0, 0, 0], dims))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_origins() {
        assert_eq!(window_starts(32, 32), vec![0]);
        assert_eq!(window_starts(20, 32), vec![0]);
        assert_eq!(window_starts(64, 32), vec![0, 16, 32]);
        assert_eq!(window_starts(70, 32), vec![0, 16, 32, 38]);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let x = Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64);
        let p = pad_to(&x, [4, 6, 5]);
        assert_eq!(crop(&p, [0, 0, 0], [3, 4, 5]), x);
    }
}
