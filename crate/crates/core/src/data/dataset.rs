use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nifti::{self, DataType, NiftiVolume};
use super::{
    augment_case, export_label, normalize_case, remap_raw_label, AugmentPolicy, LabelMap,
    ModalVolume, Modality, MultiModalCase, Volume,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelPolicy {
    Require,
    Optional,
}

const SEG_SUFFIX: &str = "seg";

fn stem(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

fn find_volume(dir: &Path, suffix: &str) -> Result<Option<PathBuf>> {
    let tail = format!("_{suffix}");
    let mut hits = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if stem(name).is_some_and(|s| s.ends_with(&tail)) {
            hits.push(entry.path());
        }
    }
    hits.sort();
    match hits.len() {
        0 => Ok(None),
        1 => Ok(hits.pop()),
        _ => Err(Error::Format {
            path: dir.to_path_buf(),
            message: format!("several files end with {tail}"),
        }),
    }
}

/// Reads one BraTS-layout case directory. Modalities are identified by
/// filename suffix only.
pub fn load_case(dir: &Path, policy: LabelPolicy) -> Result<MultiModalCase> {
    let case_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("case")
        .to_string();
    load_case_inner(dir, policy, &case_id).map_err(|e| e.with_case(case_id.clone()))
}

fn load_case_inner(dir: &Path, policy: LabelPolicy, case_id: &str) -> Result<MultiModalCase> {
    let mut dims: Option<[usize; 3]> = None;
    let mut check_dims = |d: [usize; 3], what: &str| -> Result<()> {
        match dims {
            None => {
                dims = Some(d);
                Ok(())
            }
            Some(expected) if expected == d => Ok(()),
            Some(expected) => Err(Error::shape(format!(
                "{what} has dims {d:?}, expected {expected:?}"
            ))),
        }
    };
    let mut vols = Vec::with_capacity(4);
    for m in Modality::ALL {
        let path = find_volume(dir, m.suffix())?.ok_or(Error::MissingModality(m))?;
        let v = nifti::read(&path)?;
        check_dims(v.dims, m.name())?;
        vols.push(ModalVolume::from_raw(
            m,
            Volume {
                dims: v.dims,
                data: v.data,
            },
        ));
    }
    let labels = match find_volume(dir, SEG_SUFFIX)? {
        Some(path) => {
            let labels = read_label_volume(&path)?;
            check_dims(labels.dims, "label volume")?;
            Some(labels)
        }
        None if policy == LabelPolicy::Require => {
            return Err(Error::Format {
                path: dir.to_path_buf(),
                message: "label volume (_seg) required but missing".into(),
            })
        }
        None => None,
    };
    let volumes: [ModalVolume; 4] = vols.try_into().expect("four modalities");
    MultiModalCase::new(case_id, volumes, labels)
}

/// Writes a case in the BraTS layout: `<id>_<suffix>.nii.gz` per modality
/// (float32) and `<id>_seg.nii.gz` (uint8, raw labels) when labelled.
pub fn save_case(dir: &Path, case: &MultiModalCase) -> Result<()> {
    fs::create_dir_all(dir)?;
    for v in &case.volumes {
        let path = dir.join(format!("{}_{}.nii.gz", case.case_id, v.modality.suffix()));
        nifti::write(
            &path,
            &NiftiVolume {
                dims: v.dims(),
                spacing: [1.0; 3],
                data: v.voxels.data.clone(),
            },
            DataType::F32,
        )?;
    }
    if let Some(labels) = &case.labels {
        write_label_volume(
            &dir.join(format!("{}_{SEG_SUFFIX}.nii.gz", case.case_id)),
            labels,
        )?;
    }
    Ok(())
}

/// Reads a volume of BraTS raw labels {0, 1, 2, 4} as internal classes.
pub fn read_label_volume(path: &Path) -> Result<LabelMap> {
    let v = nifti::read(path)?;
    let data = v
        .data
        .iter()
        .map(|&x| {
            if x.fract() != 0.0 {
                return Err(Error::LabelDomain(x as i64));
            }
            remap_raw_label(x as i64)
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(LabelMap { dims: v.dims, data })
}

/// Writes internal labels as BraTS raw labels {0, 1, 2, 4}.
pub fn write_label_volume(path: &Path, labels: &LabelMap) -> Result<()> {
    nifti::write(
        path,
        &NiftiVolume {
            dims: labels.dims,
            spacing: [1.0; 3],
            data: labels.data.iter().map(|&c| export_label(c) as f64).collect(),
        },
        DataType::U8,
    )
}

/// Case directories listed one per line; relative entries resolve against
/// the manifest's own directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

pub fn write_manifest(path: &Path, entries: &[PathBuf]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.to_string_lossy());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Loads, normalises and augments cases on background workers.
///
/// Worker `i` handles cases `i, i + workers, ...` and owns an RNG seeded
/// with `base_seed + i + epoch`; results come back in manifest order.
pub struct CaseLoader {
    pub paths: Vec<PathBuf>,
    pub policy: AugmentPolicy,
    pub workers: usize,
    pub base_seed: u64,
    pub queue_depth: usize,
}

impl CaseLoader {
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<MultiModalCase>> {
        let workers = self.workers.max(1);
        let n = self.paths.len();
        let mut receivers = Vec::with_capacity(workers);
        for w in 0..workers {
            let (tx, rx) = mpsc::sync_channel(self.queue_depth.max(1));
            let paths: Vec<PathBuf> = self.paths.iter().skip(w).step_by(workers).cloned().collect();
            let mut policy = self.policy.clone();
            let seed = self.base_seed + w as u64 + epoch;
            policy.seed = seed;
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for p in paths {
                    let item = load_case(&p, LabelPolicy::Require)
                        .and_then(|c| normalize_case(&c))
                        .and_then(|c| augment_case(&c, &policy, &mut rng));
                    if tx.send(item).is_err() {
                        return;
                    }
                }
            });
            receivers.push(rx);
        }
        (0..n).map(move |i| {
            receivers[i % workers]
                .recv()
                .unwrap_or_else(|_| Err(Error::Verification("loader worker exited".into())))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};

    #[test]
    fn save_then_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::desk([16, 16, 16], 3);
        let case = generate_phantom(&spec, "p0").unwrap();
        let cdir = dir.path().join("p0");
        save_case(&cdir, &case).unwrap();
        assert_eq!(fs::read_dir(&cdir).unwrap().count(), 5);
        let back = load_case(&cdir, LabelPolicy::Require).unwrap();
        assert_eq!(back.labels, case.labels);
        for (a, b) in back.volumes.iter().zip(&case.volumes) {
            for (x, y) in a.voxels.data.iter().zip(&b.voxels.data) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn missing_modality_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let case = generate_phantom(&PhantomSpec::desk([16, 16, 16], 1), "p").unwrap();
        let cdir = dir.path().join("p");
        save_case(&cdir, &case).unwrap();
        fs::remove_file(cdir.join("p_t1ce.nii.gz")).unwrap();
        let err = load_case(&cdir, LabelPolicy::Optional).unwrap_err();
        assert_eq!(err.code(), "E_MISSING_MODALITY");
        assert!(err.to_string().contains("T1c"));
    }

    #[test]
    fn label_four_maps_to_three() {
        let dir = tempfile::tempdir().unwrap();
        let case = generate_phantom(&PhantomSpec::desk([16, 16, 16], 2), "p").unwrap();
        let cdir = dir.path().join("p");
        save_case(&cdir, &case).unwrap();
        let raw = nifti::read(&cdir.join("p_seg.nii.gz")).unwrap();
        let raw4 = raw.data.iter().filter(|&&v| v == 4.0).count();
        assert!(raw4 > 0);
        assert!(raw.data.iter().all(|&v| v != 3.0));
        let back = load_case(&cdir, LabelPolicy::Require).unwrap();
        assert_eq!(back.labels.unwrap().count(3), raw4);
    }

    #[test]
    fn unknown_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let case = generate_phantom(&PhantomSpec::desk([16, 16, 16], 2), "p").unwrap();
        let cdir = dir.path().join("p");
        save_case(&cdir, &case).unwrap();
        let mut raw = nifti::read(&cdir.join("p_seg.nii.gz")).unwrap();
        raw.data[0] = 7.0;
        nifti::write(&cdir.join("p_seg.nii.gz"), &raw, DataType::U8).unwrap();
        let err = load_case(&cdir, LabelPolicy::Require).unwrap_err();
        assert_eq!(err.code(), "E_LABEL_DOMAIN");
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("manifest.txt");
        write_manifest(&m, &[PathBuf::from("a"), PathBuf::from("/abs/b")]).unwrap();
        let back = read_manifest(&m).unwrap();
        assert_eq!(back, vec![dir.path().join("a"), PathBuf::from("/abs/b")]);
    }
}
