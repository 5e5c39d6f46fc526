//! Multi-modal case ingestion, normalisation, augmentation and synthetic
//! phantoms.

mod augment;
mod dataset;
pub mod nifti;
mod phantom;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use augment::{apply_draw, augment_case, AugmentDraw, AugmentPolicy};
pub use dataset::{
    load_case, read_label_volume, read_manifest, save_case, write_label_volume, write_manifest, CaseLoader,
    LabelPolicy,
};
pub use phantom::{generate_phantom, IntensityProfile, PhantomProfiles, PhantomSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to the standard deviation when normalising intensities.
pub const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Modality {
    Flair,
    T1c,
    T1,
    T2,
}

impl Modality {
    /// Canonical order used for every concatenation.
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1c, Modality::T1, Modality::T2];

    /// Filename suffix in the BraTS layout.
    pub fn suffix(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1c => "t1ce",
            Modality::T1 => "t1",
            Modality::T2 => "t2",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Flair => "Flair",
            Modality::T1c => "T1c",
            Modality::T1 => "T1",
            Modality::T2 => "T2",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Internal class indices: 0 BG, 1 NCR/NET, 2 ED, 3 ET.
pub const NUM_CLASSES: usize = 4;

/// Tumour sub-regions that get prototypes and expert maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TumorRegion {
    NcrNet,
    Edema,
    Enhancing,
}

impl TumorRegion {
    pub const ALL: [TumorRegion; 3] = [TumorRegion::NcrNet, TumorRegion::Edema, TumorRegion::Enhancing];

    /// Channel of this region in a 4-class probability field.
    pub fn class_index(self) -> usize {
        match self {
            TumorRegion::NcrNet => 1,
            TumorRegion::Edema => 2,
            TumorRegion::Enhancing => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TumorRegion::NcrNet => "NCR/NET",
            TumorRegion::Edema => "ED",
            TumorRegion::Enhancing => "ET",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            TumorRegion::NcrNet => "ncr",
            TumorRegion::Edema => "ed",
            TumorRegion::Enhancing => "et",
        }
    }
}

/// BraTS raw label to internal class.
pub fn remap_raw_label(raw: i64) -> Result<u8> {
    match raw {
        0 => Ok(0),
        1 => Ok(1),
        2 => Ok(2),
        4 => Ok(3),
        other => Err(Error::LabelDomain(other)),
    }
}

/// Internal class back to the BraTS raw label.
pub fn export_label(class: u8) -> u8 {
    match class {
        3 => 4,
        c => c,
    }
}

/// Scalar grid in row-major `(h, w, d)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Integer class grid, same layout as [`Volume`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn zeros(dims: [usize; 3]) -> Self {
        LabelMap {
            dims,
            data: vec![0; dims.iter().product()],
        }
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }

    /// `[4, h, w, d]` one-hot encoding.
    pub fn one_hot(&self) -> Tensor {
        let n = self.data.len();
        let mut t = Tensor::zeros(&[NUM_CLASSES, self.dims[0], self.dims[1], self.dims[2]]);
        let d = t.data_mut();
        for (v, &c) in self.data.iter().enumerate() {
            d[c as usize * n + v] = 1.0;
        }
        t
    }

    /// Nearest-neighbour resampling to `target` (half-pixel centres).
    pub fn resize_nearest(&self, target: [usize; 3]) -> LabelMap {
        if target == self.dims {
            return self.clone();
        }
        let pick = |o: usize, n_in: usize, n_out: usize| {
            (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
        };
        let mut out = LabelMap::zeros(target);
        for h in 0..target[0] {
            let sh = pick(h, self.dims[0], target[0]);
            for w in 0..target[1] {
                let sw = pick(w, self.dims[1], target[1]);
                for d in 0..target[2] {
                    let sd = pick(d, self.dims[2], target[2]);
                    out.data[(h * target[1] + w) * target[2] + d] =
                        self.data[(sh * self.dims[1] + sw) * self.dims[2] + sd];
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalVolume {
    pub modality: Modality,
    pub voxels: Volume,
    /// Skull-stripped brain region: nonzero raw intensity.
    pub brain_mask: Vec<bool>,
}

impl ModalVolume {
    /// Wraps raw intensities, deriving the brain mask from nonzero voxels.
    pub fn from_raw(modality: Modality, voxels: Volume) -> Self {
        let brain_mask = voxels.data.iter().map(|&v| v != 0.0).collect();
        ModalVolume {
            modality,
            voxels,
            brain_mask,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.voxels.dims
    }

    /// Mean and population variance over the brain mask.
    pub fn mask_moments(&self) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self
            .voxels
            .data
            .iter()
            .zip(&self.brain_mask)
            .filter_map(|(&v, &m)| m.then_some(v))
            .collect();
        if vals.is_empty() {
            return None;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some((mean, var))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalCase {
    pub case_id: String,
    /// Indexed by [`Modality::index`].
    pub volumes: [ModalVolume; 4],
    pub labels: Option<LabelMap>,
}

impl MultiModalCase {
    pub fn new(case_id: impl Into<String>, volumes: [ModalVolume; 4], labels: Option<LabelMap>) -> Result<Self> {
        let dims = volumes[0].dims();
        for (i, v) in volumes.iter().enumerate() {
            if v.modality != Modality::ALL[i] {
                return Err(Error::shape(format!(
                    "volume slot {i} holds {} instead of {}",
                    v.modality,
                    Modality::ALL[i]
                )));
            }
            if v.dims() != dims || v.brain_mask.len() != v.voxels.len() {
                return Err(Error::shape(format!(
                    "{} volume has dims {:?}, expected {:?}",
                    v.modality,
                    v.dims(),
                    dims
                )));
            }
        }
        if let Some(l) = &labels {
            if l.dims != dims {
                return Err(Error::shape(format!(
                    "labels have dims {:?}, expected {:?}",
                    l.dims, dims
                )));
            }
        }
        Ok(MultiModalCase {
            case_id: case_id.into(),
            volumes,
            labels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.volumes[0].dims()
    }

    pub fn volume(&self, m: Modality) -> &ModalVolume {
        &self.volumes[m.index()]
    }

    /// Stacks the four modalities into a `[4, h, w, d]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let dims = self.dims();
        let mut data = Vec::with_capacity(4 * self.volumes[0].voxels.len());
        for v in &self.volumes {
            data.extend_from_slice(&v.voxels.data);
        }
        Tensor::from_vec(&[4, dims[0], dims[1], dims[2]], data).expect("case tensor")
    }
}

/// Standardises every modality to zero mean and unit (population) variance
/// inside its brain mask; voxels outside the mask become 0.
pub fn normalize_case(case: &MultiModalCase) -> Result<MultiModalCase> {
    let mut out = case.clone();
    for v in out.volumes.iter_mut() {
        let (mean, var) = v.mask_moments().ok_or(Error::EmptyBrainMask(v.modality))?;
        let denom = var.sqrt() + NORMALIZE_EPS;
        for (x, &m) in v.voxels.data.iter_mut().zip(&v.brain_mask) {
            *x = if m { (*x - mean) / denom } else { 0.0 };
        }
    }
    Ok(out)
}
