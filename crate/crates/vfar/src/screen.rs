//! Functional outlier screening with the bagplot: bivariate Tukey halfspace
//! depth on the first two principal component scores, a bag from the 50%
//! deepest points, and an inflated fence.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::FunctionalSample;
use crate::fpca::{fpca_univariate, FpcaError};

#[derive(Debug, Error)]
pub enum ScreenError {
    #[error("need at least {required} curves for depth screening, found {found}")]
    TooFewCurves { required: usize, found: usize },
    #[error("fence factor {0} must exceed 1")]
    InvalidFenceFactor(f64),
    #[error(transparent)]
    Fpca(#[from] FpcaError),
}

/// Outcome of bagplot screening for one functional sample.
///
/// `degenerate` marks the case where every score pair coincides: no fence can
/// be formed, all depths are equal, and nothing is flagged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutlierReport {
    pub flags: Vec<bool>,
    pub depths: Vec<f64>,
    pub scores2d: Vec<(f64, f64)>,
    pub fence_factor: f64,
    pub degenerate: bool,
}

impl OutlierReport {
    pub fn flagged_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Normalized Tukey halfspace depth of `query` in `points`: the minimum over
/// all closed halfplanes through the query of the fraction of points they
/// contain. Exact angular-sweep computation in O(n log n).
pub fn halfspace_depth(points: &[(f64, f64)], query: (f64, f64)) -> f64 {
    let n = points.len();
    if n == 0 {
        return 0.0;
    }
    let mut coincident = 0usize;
    let mut angles: Vec<f64> = Vec::with_capacity(n);
    for &(x, y) in points {
        let dx = x - query.0;
        let dy = y - query.1;
        if dx == 0.0 && dy == 0.0 {
            coincident += 1;
        } else {
            angles.push(dy.atan2(dx));
        }
    }
    if angles.is_empty() {
        return 1.0;
    }
    angles.sort_by(f64::total_cmp);
    let m = angles.len();
    // The closed-halfplane minimum is m minus the largest number of points in
    // an open half-circle; candidate arcs start at each data angle.
    let mut max_open = 0usize;
    let mut hi = 0usize;
    for lo in 0..m {
        if hi < lo {
            hi = lo;
        }
        // Count angles in [angles[lo], angles[lo] + pi), wrapping once.
        while hi < lo + m {
            let a = if hi < m {
                angles[hi]
            } else {
                angles[hi - m] + 2.0 * std::f64::consts::PI
            };
            if a - angles[lo] < std::f64::consts::PI {
                hi += 1;
            } else {
                break;
            }
        }
        max_open = max_open.max(hi - lo);
    }
    (coincident + m - max_open) as f64 / n as f64
}

/// Convex hull (counter-clockwise, no collinear interior vertices) by the
/// monotone chain construction. Degenerate inputs return a segment or point.
fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| -> f64 {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 3 {
        // All points collinear; keep the extreme pair.
        let first = *pts.first().unwrap();
        let last = *pts.last().unwrap();
        return vec![first, last];
    }
    lower
}

/// Point-in-convex-region test with a small inclusive tolerance; handles the
/// degenerate hulls (segment, single point) produced by collinear bags.
fn inside_hull(hull: &[(f64, f64)], p: (f64, f64), tol: f64) -> bool {
    match hull.len() {
        0 => false,
        1 => {
            let d = ((p.0 - hull[0].0).powi(2) + (p.1 - hull[0].1).powi(2)).sqrt();
            d <= tol
        }
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let (abx, aby) = (b.0 - a.0, b.1 - a.1);
            let len2 = abx * abx + aby * aby;
            let s = if len2 > 0.0 {
                (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (a.0 + s * abx, a.1 + s * aby);
            ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt() <= tol
        }
        _ => {
            for i in 0..hull.len() {
                let a = hull[i];
                let b = hull[(i + 1) % hull.len()];
                let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                if cross < -tol {
                    return false;
                }
            }
            true
        }
    }
}

/// Screens a functional sample: FPCA scores on the first two components,
/// halfspace depths, a bag from the 50% deepest points, and a fence obtained
/// by scaling the bag about the deepest point by `fence_factor`. Points
/// outside the fence are flagged.
pub fn functional_bagplot_flags(
    sample: &FunctionalSample,
    fence_factor: f64,
) -> Result<OutlierReport, ScreenError> {
    if fence_factor <= 1.0 {
        return Err(ScreenError::InvalidFenceFactor(fence_factor));
    }
    let n = sample.len();
    if n < 10 {
        return Err(ScreenError::TooFewCurves {
            required: 10,
            found: n,
        });
    }
    let model = fpca_univariate(sample)?;
    let scores2d: Vec<(f64, f64)> = (0..n)
        .map(|i| (model.scores[(i, 0)], model.scores[(i, 1)]))
        .collect();

    let first = scores2d[0];
    if scores2d
        .iter()
        .all(|&(x, y)| x == first.0 && y == first.1)
    {
        return Ok(OutlierReport {
            flags: vec![false; n],
            depths: vec![1.0; n],
            scores2d,
            fence_factor,
            degenerate: true,
        });
    }

    let depths: Vec<f64> = scores2d
        .par_iter()
        .map(|&p| halfspace_depth(&scores2d, p))
        .collect();

    // Tukey median: deepest point, ties broken by smallest index.
    let mut median_idx = 0;
    for i in 1..n {
        if depths[i] > depths[median_idx] {
            median_idx = i;
        }
    }
    let median = scores2d[median_idx];

    // Bag: convex hull of the 50% deepest points.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| depths[b].total_cmp(&depths[a]).then(a.cmp(&b)));
    let bag_size = n.div_ceil(2);
    let bag_points: Vec<(f64, f64)> = order[..bag_size].iter().map(|&i| scores2d[i]).collect();
    let bag = convex_hull(&bag_points);

    // Fence: the bag inflated about the median.
    let fence: Vec<(f64, f64)> = bag
        .iter()
        .map(|&(x, y)| {
            (
                median.0 + fence_factor * (x - median.0),
                median.1 + fence_factor * (y - median.1),
            )
        })
        .collect();

    let scale = scores2d
        .iter()
        .map(|&(x, y)| x.abs().max(y.abs()))
        .fold(0.0_f64, f64::max);
    let tol = 1e-9 * (1.0 + scale);
    let flags: Vec<bool> = scores2d
        .iter()
        .map(|&p| !inside_hull(&fence, p, tol))
        .collect();

    Ok(OutlierReport {
        flags,
        depths,
        scores2d,
        fence_factor,
        degenerate: false,
    })
}

/// Cycles flagged in any of the given reports; a cycle failing in one process
/// is removed from the joint analysis entirely.
pub fn flagged_cycles(reports: &[(&FunctionalSample, &OutlierReport)]) -> Vec<u64> {
    let mut flagged: Vec<u64> = reports
        .iter()
        .flat_map(|(sample, report)| {
            sample
                .cycle_indices
                .iter()
                .zip(&report.flags)
                .filter(|(_, &f)| f)
                .map(|(&c, _)| c)
        })
        .collect();
    flagged.sort_unstable();
    flagged.dedup();
    flagged
}
