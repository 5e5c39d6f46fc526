//! Region composition, Dice overlap and 95th-percentile surface distance.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalRegion {
    Tc,
    Et,
    Wt,
}

impl EvalRegion {
    /// Report order.
    pub const ALL: [EvalRegion; 3] = [EvalRegion::Tc, EvalRegion::Et, EvalRegion::Wt];

    pub fn contains(self, class: u8) -> bool {
        match self {
            EvalRegion::Wt => matches!(class, 1..=3),
            EvalRegion::Tc => matches!(class, 1 | 3),
            EvalRegion::Et => class == 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalRegion::Tc => "TC",
            EvalRegion::Et => "ET",
            EvalRegion::Wt => "WT",
        }
    }
}

impl fmt::Display for EvalRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
    pub spacing: [f64; 3],
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], data: Vec<bool>, spacing: [f64; 3]) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!("mask of {} voxels for dims {dims:?}", data.len())));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Range(format!("voxel spacing {spacing:?}")));
        }
        Ok(BinaryMask { dims, data, spacing })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Length of the diagonal between the first and last voxel centres.
    pub fn diagonal(&self) -> f64 {
        (0..3)
            .map(|i| ((self.dims[i].saturating_sub(1)) as f64 * self.spacing[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Mask voxels with at least one 6-neighbour outside the mask (grid
    /// borders count as outside).
    pub fn surface(&self) -> Vec<bool> {
        let [h, w, d] = self.dims;
        let at = |i: usize, j: usize, k: usize| self.data[(i * w + j) * d + k];
        let mut out = vec![false; self.data.len()];
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    if !at(i, j, k) {
                        continue;
                    }
                    let border = i == 0 || j == 0 || k == 0 || i + 1 == h || j + 1 == w || k + 1 == d;
                    out[(i * w + j) * d + k] = border
                        || !at(i - 1, j, k)
                        || !at(i + 1, j, k)
                        || !at(i, j - 1, k)
                        || !at(i, j + 1, k)
                        || !at(i, j, k - 1)
                        || !at(i, j, k + 1);
                }
            }
        }
        out
    }
}

fn check_labels(labels: &LabelMap) -> Result<()> {
    match labels.data.iter().find(|&&c| c > 3) {
        Some(&c) => Err(Error::LabelDomain(c as i64)),
        None => Ok(()),
    }
}

pub fn region_mask(labels: &LabelMap, region: EvalRegion, spacing: [f64; 3]) -> Result<BinaryMask> {
    check_labels(labels)?;
    BinaryMask::new(
        labels.dims,
        labels.data.iter().map(|&c| region.contains(c)).collect(),
        spacing,
    )
}

/// WT, TC and ET masks, in that order.
pub fn compose_regions(labels: &LabelMap, spacing: [f64; 3]) -> Result<[BinaryMask; 3]> {
    Ok([
        region_mask(labels, EvalRegion::Wt, spacing)?,
        region_mask(labels, EvalRegion::Tc, spacing)?,
        region_mask(labels, EvalRegion::Et, spacing)?,
    ])
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims != b.dims || a.spacing != b.spacing {
        return Err(Error::shape(format!(
            "masks {:?}@{:?} and {:?}@{:?}",
            a.dims, a.spacing, b.dims, b.spacing
        )));
    }
    Ok(())
}

/// `2|a∩b| / (|a|+|b|)`, 1 when both are empty.
pub fn dice_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_pair(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Squared distance transform along one line: `out[p] = min_q f[q] + w (p-q)²`
/// (lower envelope of parabolas). Infinite entries are not sites.
fn edt_line(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + w * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + w * (p * p) as f64;
                    let s = (fq - fp) / (2.0 * w * (q - p) as f64);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let dq = p as f64 - q as f64;
        *o = f[q] + w * dq * dq;
    }
}

/// Exact squared Euclidean distance (in mm²) from every voxel to the
/// nearest `true` voxel of `sites`; infinite when there is none.
pub fn squared_distance_transform(sites: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [h, w, d] = dims;
    let mut g: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let strides = [w * d, d, 1];
    for (axis, &n) in dims.iter().enumerate() {
        let wgt = spacing[axis] * spacing[axis];
        let stride = strides[axis];
        for base in 0..h * w * d {
            // Enumerate line starts: index with coordinate 0 along `axis`.
            let coord = (base / stride) % n;
            if coord != 0 {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|t| g[base + t * stride]));
            out.resize(n, 0.0);
            edt_line(&line, wgt, &mut out, &mut v, &mut z);
            for t in 0..n {
                g[base + t * stride] = out[t];
            }
        }
    }
    g
}

/// Linear-interpolation percentile of unsorted values, `q` in [0, 100].
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Surface-to-surface distances from `a` to `b` followed by `b` to `a`.
pub fn pooled_surface_distances(a: &BinaryMask, b: &BinaryMask) -> Vec<f64> {
    let sa = a.surface();
    let sb = b.surface();
    let da = squared_distance_transform(&sa, a.dims, a.spacing);
    let db = squared_distance_transform(&sb, b.dims, b.spacing);
    let mut out = Vec::new();
    out.extend(sa.iter().zip(&db).filter(|(&s, _)| s).map(|(_, &d)| d.sqrt()));
    out.extend(sb.iter().zip(&da).filter(|(&s, _)| s).map(|(_, &d)| d.sqrt()));
    out
}

/// Symmetric 95th-percentile surface distance in mm. Both empty gives 0;
/// one empty gives `penalty` (default: the grid diagonal).
pub fn hd95(a: &BinaryMask, b: &BinaryMask, penalty: Option<f64>) -> Result<f64> {
    check_pair(a, b)?;
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(penalty.unwrap_or_else(|| a.diagonal())),
        _ => {}
    }
    let mut d = pooled_surface_distances(a, b);
    Ok(percentile(&mut d, 95.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub region: EvalRegion,
    pub dice: f64,
    pub hd95: f64,
}

/// Scores in TC, ET, WT order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub case_id: String,
    pub scores: Vec<RegionScore>,
}

impl RegionReport {
    pub fn get(&self, region: EvalRegion) -> &RegionScore {
        self.scores.iter().find(|s| s.region == region).expect("all regions scored")
    }

    pub fn mean_dice(&self) -> f64 {
        self.scores.iter().map(|s| s.dice).sum::<f64>() / self.scores.len() as f64
    }
}

pub fn evaluate_case(
    case_id: &str,
    pred: &LabelMap,
    truth: &LabelMap,
    spacing: [f64; 3],
    penalty: Option<f64>,
) -> Result<RegionReport> {
    if pred.dims != truth.dims {
        return Err(Error::shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.dims, truth.dims
        )));
    }
    let scores = EvalRegion::ALL
        .iter()
        .map(|&r| {
            let a = region_mask(pred, r, spacing)?;
            let b = region_mask(truth, r, spacing)?;
            Ok(RegionScore {
                region: r,
                dice: dice_score(&a, &b)?,
                hd95: hd95(&a, &b, penalty)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RegionReport {
        case_id: case_id.to_string(),
        scores,
    })
}

/// Per-region means over cases, TC/ET/WT order.
pub fn summarize(reports: &[RegionReport]) -> Vec<RegionScore> {
    EvalRegion::ALL
        .iter()
        .map(|&r| {
            let n = reports.len().max(1) as f64;
            RegionScore {
                region: r,
                dice: reports.iter().map(|c| c.get(r).dice).sum::<f64>() / n,
                hd95: reports.iter().map(|c| c.get(r).hd95).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Mean Dice of each foreground class (NCR/NET, ED, ET) taken separately,
/// averaged over the three classes.
pub fn class_dice(pred: &LabelMap, truth: &LabelMap) -> Result<[f64; 3]> {
    if pred.dims != truth.dims {
        return Err(Error::shape("class dice needs equal dims"));
    }
    let mut out = [0.0; 3];
    for (i, c) in [1u8, 2, 3].into_iter().enumerate() {
        let a = BinaryMask::new(pred.dims, pred.data.iter().map(|&x| x == c).collect(), [1.0; 3])?;
        let b = BinaryMask::new(truth.dims, truth.data.iter().map(|&x| x == c).collect(), [1.0; 3])?;
        out[i] = dice_score(&a, &b)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> BinaryMask {
        let mut data = vec![false; dims.iter().product()];
        for p in on {
            data[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] = true;
        }
        BinaryMask::new(dims, data, [1.0; 3]).unwrap()
    }

    #[test]
    fn region_counts_on_tiny_grid() {
        let labels = LabelMap {
            dims: [2, 2, 2],
            data: vec![0, 1, 2, 3, 0, 0, 0, 0],
        };
        let [wt, tc, et] = compose_regions(&labels, [1.0; 3]).unwrap();
        assert_eq!((wt.count(), tc.count(), et.count()), (3, 2, 1));
        let bad = LabelMap {
            dims: [1, 1, 1],
            data: vec![4],
        };
        assert!(matches!(compose_regions(&bad, [1.0; 3]), Err(Error::LabelDomain(4))));
    }

    #[test]
    fn dice_cases() {
        let d = [1, 1, 8];
        let a = mask(d, &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]]);
        let b = mask(d, &[[0, 0, 2], [0, 0, 3], [0, 0, 4], [0, 0, 5]]);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let c = mask(d, &[[0, 0, 7]]);
        assert_eq!(dice_score(&a, &c).unwrap(), 0.0);
        let e = mask(d, &[]);
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn hd95_cases() {
        let d = [4, 4, 4];
        let a = mask(d, &[[0, 0, 0]]);
        let b = mask(d, &[[0, 0, 3]]);
        assert_eq!(hd95(&a, &b, None).unwrap(), 3.0);
        assert_eq!(hd95(&a, &a, None).unwrap(), 0.0);
        let e = mask([32; 3], &[]);
        let f = mask([32; 3], &[[3, 3, 3]]);
        let p = hd95(&e, &f, None).unwrap();
        assert!((p - 31.0 * 3f64.sqrt()).abs() < 1e-12);
        assert!((p - 53.6936).abs() < 1e-4);
        assert_eq!(hd95(&e, &e, None).unwrap(), 0.0);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let dims = [5, 4, 6];
        let spacing = [1.0, 2.0, 0.5];
        let sites: Vec<bool> = (0..120).map(|i| i % 17 == 3 || i == 50).collect();
        let dt = squared_distance_transform(&sites, dims, spacing);
        let coord = |i: usize| [i / 24, (i / 6) % 4, i % 6];
        for i in 0..120 {
            let p = coord(i);
            let best = (0..120)
                .filter(|&j| sites[j])
                .map(|j| {
                    let q = coord(j);
                    (0..3).map(|a| ((p[a] as f64 - q[a] as f64) * spacing[a]).powi(2)).sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((dt[i] - best).abs() < 1e-9, "voxel {i}: {} vs {best}", dt[i]);
        }
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile(&mut v, 50.0), 2.0);
        assert!((percentile(&mut v, 95.0) - 3.8).abs() < 1e-12);
    }

    #[test]
    fn identical_labels_score_perfectly() {
        let labels = LabelMap {
            dims: [4, 4, 4],
            data: (0..64).map(|i| (i % 4) as u8).collect(),
        };
        let r = evaluate_case("c", &labels, &labels, [1.0; 3], None).unwrap();
        for s in &r.scores {
            assert_eq!((s.dice, s.hd95), (1.0, 0.0));
        }
    }
}
