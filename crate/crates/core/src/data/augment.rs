use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabelMap, ModalVolume, MultiModalCase, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub crop_size: [usize; 3],
    pub flip_prob: f64,
    pub intensity_shift_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub seed: u64,
}

impl AugmentPolicy {
    /// Crop only; every other transform is the identity.
    pub fn identity(crop_size: [usize; 3]) -> Self {
        AugmentPolicy {
            crop_size,
            flip_prob: 0.0,
            intensity_shift_range: [0.0, 0.0],
            scale_range: [1.0, 1.0],
            seed: 0,
        }
    }

    /// Training-time policy: flips with probability 0.5, shift in
    /// [-0.1, 0.1], scale in [0.9, 1.1].
    pub fn standard(crop_size: [usize; 3], seed: u64) -> Self {
        AugmentPolicy {
            crop_size,
            flip_prob: 0.5,
            intensity_shift_range: [-0.1, 0.1],
            scale_range: [0.9, 1.1],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size.iter().any(|&c| c == 0 || c % 16 != 0) {
            return Err(Error::Config(format!(
                "crop size {:?} must be positive multiples of 16",
                self.crop_size
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} not in [0, 1]", self.flip_prob)));
        }
        for (name, r) in [
            ("intensity_shift_range", self.intensity_shift_range),
            ("scale_range", self.scale_range),
        ] {
            if !(r[0] <= r[1]) {
                return Err(Error::Config(format!("{name} {r:?} is not ordered")));
            }
        }
        Ok(())
    }
}

/// Concrete geometric + photometric transform drawn from a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub offset: [usize; 3],
    pub flips: [bool; 3],
    pub scale: f64,
    pub shifts: [f64; 4],
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * rng.gen::<f64>()
}

impl AugmentDraw {
    pub fn sample<R: Rng>(policy: &AugmentPolicy, dims: [usize; 3], rng: &mut R) -> Result<Self> {
        if (0..3).any(|i| policy.crop_size[i] > dims[i]) {
            return Err(Error::CropTooLarge {
                crop: policy.crop_size,
                dims,
            });
        }
        let offset = [0, 1, 2].map(|i| rng.gen_range(0..=dims[i] - policy.crop_size[i]));
        let flips = [0, 1, 2].map(|_| rng.gen::<f64>() < policy.flip_prob);
        let scale = uniform(rng, policy.scale_range);
        let shifts = [0, 1, 2, 3].map(|_| uniform(rng, policy.intensity_shift_range));
        Ok(AugmentDraw {
            offset,
            flips,
            scale,
            shifts,
        })
    }
}

/// Crops then flips a row-major grid.
fn crop_flip<T: Copy>(src: &[T], dims: [usize; 3], offset: [usize; 3], crop: [usize; 3], flips: [bool; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(crop.iter().product());
    for h in 0..crop[0] {
        let sh = offset[0] + if flips[0] { crop[0] - 1 - h } else { h };
        for w in 0..crop[1] {
            let sw = offset[1] + if flips[1] { crop[1] - 1 - w } else { w };
            for d in 0..crop[2] {
                let sd = offset[2] + if flips[2] { crop[2] - 1 - d } else { d };
                out.push(src[(sh * dims[1] + sw) * dims[2] + sd]);
            }
        }
    }
    out
}

/// Applies a drawn transform: crop, flips, global scale, per-modality shift.
/// Labels follow the same crop and flips and are never interpolated.
pub fn apply_draw(case: &MultiModalCase, crop: [usize; 3], draw: &AugmentDraw) -> MultiModalCase {
    let dims = case.dims();
    let volumes = [0, 1, 2, 3].map(|i| {
        let v = &case.volumes[i];
        let data: Vec<f64> = crop_flip(&v.voxels.data, dims, draw.offset, crop, draw.flips)
            .into_iter()
            .map(|x| draw.scale * x + draw.shifts[i])
            .collect();
        ModalVolume {
            modality: v.modality,
            voxels: Volume { dims: crop, data },
            brain_mask: crop_flip(&v.brain_mask, dims, draw.offset, crop, draw.flips),
        }
    });
    let labels = case.labels.as_ref().map(|l| LabelMap {
        dims: crop,
        data: crop_flip(&l.data, dims, draw.offset, crop, draw.flips),
    });
    MultiModalCase {
        case_id: case.case_id.clone(),
        volumes,
        labels,
    }
}

pub fn augment_case<R: Rng>(case: &MultiModalCase, policy: &AugmentPolicy, rng: &mut R) -> Result<MultiModalCase> {
    let draw = AugmentDraw::sample(policy, case.dims(), rng)?;
    Ok(apply_draw(case, policy.crop_size, &draw))
}
