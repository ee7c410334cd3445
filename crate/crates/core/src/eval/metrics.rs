//! Region similarity J (mask IoU) and contour accuracy F (boundary F-measure).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{mask_iou, BinaryMask};

/// Boundary tolerance as a fraction of the image diagonal.
pub const BOUNDARY_TOLERANCE: f64 = 0.008;

fn check_pair(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("no frames to evaluate".into()));
    }
    Ok(())
}

/// Mean per-frame mask IoU.
pub fn region_j(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<f64> {
    check_pair(pred, gt)?;
    let total = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| mask_iou(p, g))
        .sum::<Result<f64>>()?;
    Ok(total / pred.len() as f64)
}

/// Mean per-frame boundary F-measure.
pub fn contour_f(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<f64> {
    check_pair(pred, gt)?;
    let total = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| boundary_f(p, g))
        .sum::<Result<f64>>()?;
    Ok(total / pred.len() as f64)
}

/// One-pixel boundary of a mask: a pixel is on the boundary when it differs
/// from its right, lower or lower-right neighbour. The last row compares only
/// to the right, the last column only downwards.
pub fn boundary_map(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(h, w, |x, y| {
        let v = mask.get(x, y);
        let last_col = x + 1 == w;
        let last_row = y + 1 == h;
        match (last_col, last_row) {
            (true, true) => false,
            (false, true) => v != mask.get(x + 1, y),
            (true, false) => v != mask.get(x, y + 1),
            (false, false) => {
                v != mask.get(x + 1, y) || v != mask.get(x, y + 1) || v != mask.get(x + 1, y + 1)
            }
        }
    })
}

/// Matching radius in pixels for a `width × height` frame.
pub fn tolerance_radius(width: u32, height: u32) -> u32 {
    let diag = f64::from(width).hypot(f64::from(height));
    (BOUNDARY_TOLERANCE * diag).ceil() as u32
}

/// Every pixel within Euclidean distance `r` of a set pixel.
pub fn dilate_disk(mask: &BinaryMask, r: u32) -> BinaryMask {
    let (w, h) = mask.dims();
    let r = i64::from(r);
    let offsets: Vec<(i64, i64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let mut out = BinaryMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (i64::from(x) + dx, i64::from(y) + dy);
                if nx >= 0 && ny >= 0 && nx < i64::from(w) && ny < i64::from(h) {
                    out.set(nx as u32, ny as u32, true);
                }
            }
        }
    }
    out
}

/// Boundary F-measure of one frame.
///
/// Both boundaries empty scores 1; exactly one empty scores 0.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.dims(),
            actual: pred.dims(),
        });
    }
    let (w, h) = gt.dims();
    let r = tolerance_radius(w, h);
    let pb = boundary_map(pred);
    let gb = boundary_map(gt);
    let (n_pred, n_gt) = (pb.area(), gb.area());
    let (precision, recall) = match (n_pred, n_gt) {
        (0, 0) => (1.0, 1.0),
        (0, _) => (1.0, 0.0),
        (_, 0) => (0.0, 1.0),
        _ => {
            let gd = dilate_disk(&gb, r);
            let pd = dilate_disk(&pb, r);
            let pred_hit = count_and(&pb, &gd);
            let gt_hit = count_and(&gb, &pd);
            (pred_hit as f64 / n_pred as f64, gt_hit as f64 / n_gt as f64)
        }
    };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

fn count_and(a: &BinaryMask, b: &BinaryMask) -> u64 {
    a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub frames: usize,
    pub j: f64,
    pub f: f64,
}

/// Per-object scores and their dataset means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub objects: Vec<ObjectScore>,
    pub j: f64,
    pub f: f64,
    #[serde(rename = "j&f")]
    pub jf: f64,
    /// Means per annotator group, when objects carry groups.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupMean>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub group: String,
    pub objects: usize,
    pub j: f64,
    pub f: f64,
    #[serde(rename = "j&f")]
    pub jf: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MetricReport {
    /// Plain means over objects, or with `per_group`, the mean of per-group means.
    pub fn from_objects(objects: Vec<ObjectScore>, per_group: bool) -> Result<Self> {
        if objects.is_empty() {
            return Err(Error::InvalidInput("no objects were scored".into()));
        }
        let mut names: Vec<String> = objects.iter().filter_map(|o| o.group.clone()).collect();
        names.sort();
        names.dedup();
        let groups: Vec<GroupMean> = names
            .into_iter()
            .map(|g| {
                let members: Vec<&ObjectScore> = objects.iter().filter(|o| o.group.as_deref() == Some(&g)).collect();
                let j = mean(members.iter().map(|o| o.j));
                let f = mean(members.iter().map(|o| o.f));
                GroupMean {
                    group: g,
                    objects: members.len(),
                    j,
                    f,
                    jf: (j + f) / 2.0,
                }
            })
            .collect();
        let (j, f) = if per_group && !groups.is_empty() {
            (mean(groups.iter().map(|g| g.j)), mean(groups.iter().map(|g| g.f)))
        } else {
            (mean(objects.iter().map(|o| o.j)), mean(objects.iter().map(|o| o.f)))
        };
        Ok(MetricReport {
            objects,
            j,
            f,
            jf: (j + f) / 2.0,
            groups,
        })
    }

    /// The audio-task names for the same numbers.
    pub fn m_j(&self) -> f64 {
        self.j
    }

    pub fn m_f(&self) -> f64 {
        self.f
    }
}

/// J and F of one object over its frames.
pub fn score_object(id: impl Into<String>, group: Option<String>, pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<ObjectScore> {
    Ok(ObjectScore {
        id: id.into(),
        group,
        frames: gt.len(),
        j: region_j(pred, gt)?,
        f: contour_f(pred, gt)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: u32, w: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> BinaryMask {
        BinaryMask::from_fn(h, w, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    #[test]
    fn j_examples() {
        let full = BinaryMask::from_fn(10, 10, |_, _| true);
        let left = rect(10, 10, 0, 0, 5, 10);
        let empty = BinaryMask::empty(10, 10);
        assert_eq!(region_j(&[full.clone()], &[full.clone()]).unwrap(), 1.0);
        assert_eq!(region_j(&[empty.clone()], &[full.clone()]).unwrap(), 0.0);
        assert_eq!(region_j(&[left.clone(), full.clone()], &[full.clone(), full.clone()]).unwrap(), 0.75);
        assert!(region_j(&[left], &[]).is_err());
    }

    #[test]
    fn boundary_of_square() {
        let m = rect(6, 6, 1, 1, 4, 4);
        let b = boundary_map(&m);
        // inside pixels adjacent to the right/bottom edge, and outside pixels
        // on the top/left that see the square to their lower right
        let expected = [
            (0, 0), (1, 0), (2, 0), (3, 0),
            (0, 1), (3, 1), (0, 2), (3, 2),
            (0, 3), (1, 3), (2, 3), (3, 3),
        ];
        let got: Vec<(u32, u32)> = (0..6).flat_map(|y| (0..6).map(move |x| (x, y))).filter(|&(x, y)| b.get(x, y)).collect();
        let mut want: Vec<(u32, u32)> = expected.to_vec();
        want.sort_by_key(|&(x, y)| (y, x));
        assert_eq!(got, want);
    }

    #[test]
    fn f_examples() {
        let a = rect(100, 100, 20, 20, 60, 60);
        assert_eq!(boundary_f(&a, &a).unwrap(), 1.0);
        let far = rect(100, 100, 70, 70, 90, 90);
        assert_eq!(boundary_f(&far, &a).unwrap(), 0.0);
        let empty = BinaryMask::empty(100, 100);
        assert_eq!(boundary_f(&empty, &empty).unwrap(), 1.0);
        assert_eq!(boundary_f(&empty, &a).unwrap(), 0.0);
        assert_eq!(boundary_f(&a, &empty).unwrap(), 0.0);
        // 0.008 * hypot(100, 100) = 1.13, so shifts of 2 px stay within tolerance
        assert_eq!(tolerance_radius(100, 100), 2);
        let shifted = rect(100, 100, 22, 20, 62, 60);
        assert_eq!(boundary_f(&shifted, &a).unwrap(), 1.0);
    }

    #[test]
    fn report_means() {
        let objs = vec![
            ObjectScore { id: "a".into(), group: Some("1".into()), frames: 1, j: 1.0, f: 0.5 },
            ObjectScore { id: "b".into(), group: Some("1".into()), frames: 1, j: 0.0, f: 0.5 },
            ObjectScore { id: "c".into(), group: Some("2".into()), frames: 1, j: 1.0, f: 1.0 },
        ];
        let pooled = MetricReport::from_objects(objs.clone(), false).unwrap();
        assert!((pooled.j - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(pooled.jf, (pooled.j + pooled.f) / 2.0);
        let grouped = MetricReport::from_objects(objs, true).unwrap();
        assert_eq!(grouped.j, 0.75);
        assert_eq!(grouped.f, 0.75);
        assert_eq!(grouped.groups.len(), 2);
        assert!(MetricReport::from_objects(vec![], false).is_err());
    }
}
