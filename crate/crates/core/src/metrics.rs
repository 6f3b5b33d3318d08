//! Point disparity: distance from every point to the closest point of any
//! other submap, with summary statistics and plot-ready exports.

use std::io::Write;
use std::path::Path;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 100;

/// Histogram range is `[0, p]` with `p` this percentile of the disparities.
pub const HISTOGRAM_PERCENTILE: f64 = 99.5;

/// Euclidean distance; the one formula used by the index and the oracle.
pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges, m.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Counts scaled so the histogram integrates to one over the binned points.
    pub density: Vec<f64>,
    /// Points above the last edge.
    pub overflow: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityStats {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityReport {
    /// Submap of each point, parallel to `per_point`.
    pub submap: Vec<usize>,
    pub points: Vec<[f64; 3]>,
    /// Nonnegative, m.
    pub per_point: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    pub histogram: Histogram,
}

impl DisparityReport {
    pub fn stats(&self) -> DisparityStats {
        DisparityStats {
            count: self.per_point.len(),
            median: self.median,
            mean: self.mean,
            histogram: self.histogram.clone(),
        }
    }
}

fn to_array(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Nearest-neighbor distance of `q` in `tree` over `points`, exact with
/// respect to [`distance`]: the index proposes a radius and every point
/// inside it is re-measured.
fn nearest(tree: &ImmutableKdTree<f64, 3>, points: &[[f64; 3]], q: &[f64; 3]) -> f64 {
    let best = tree.query(q).nearest_one::<SquaredEuclidean<f64>>().execute();
    let radius = best.distance * (1.0 + 1e-9) + f64::MIN_POSITIVE;
    let candidates = tree.query(q).within::<SquaredEuclidean<f64>>(radius).execute();
    let mut d = distance(q, &points[best.item as usize]);
    for c in candidates {
        d = d.min(distance(q, &points[c.item as usize]));
    }
    d
}

/// Disparity of every point against the union of all other submaps.
pub fn point_disparity(submaps: &[Vec<Vector3<f64>>]) -> Result<DisparityReport> {
    if submaps.len() < 2 || submaps.iter().any(Vec::is_empty) {
        return Err(Error::TooFewSubmaps);
    }
    let arrays: Vec<Vec<[f64; 3]>> = submaps.iter().map(|s| s.iter().map(to_array).collect()).collect();
    let trees: Vec<ImmutableKdTree<f64, 3>> = arrays
        .iter()
        .map(|a| {
            ImmutableKdTree::new_from_slice(a).map_err(|e| Error::InsufficientData(format!("spatial index: {e:?}")))
        })
        .collect::<Result<_>>()?;
    let mut submap = Vec::new();
    let mut points = Vec::new();
    let mut per_point = Vec::new();
    for (i, pts) in arrays.iter().enumerate() {
        for p in pts {
            let d = arrays
                .iter()
                .zip(&trees)
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, (a, t))| nearest(t, a, p))
                .fold(f64::INFINITY, f64::min);
            submap.push(i);
            points.push(*p);
            per_point.push(d);
        }
    }
    let stats = summarize(&per_point, DEFAULT_BINS)?;
    Ok(DisparityReport {
        submap,
        points,
        per_point,
        median: stats.median,
        mean: stats.mean,
        histogram: stats.histogram,
    })
}

/// Median with the midpoint rule for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Linear-interpolation percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Median, mean and a unit-area histogram over `[0, p99.5]`.
pub fn summarize(per_point: &[f64], bins: usize) -> Result<DisparityStats> {
    if per_point.is_empty() {
        return Err(Error::EmptyReport);
    }
    let bins = bins.max(1);
    let mut upper = percentile(per_point, HISTOGRAM_PERCENTILE).expect("nonempty");
    if !(upper > 0.0) {
        upper = 1.0;
    }
    let width = upper / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|k| k as f64 * width).collect();
    let mut counts = vec![0usize; bins];
    let mut overflow = 0;
    for &d in per_point {
        if d > upper {
            overflow += 1;
        } else {
            let k = ((d / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
    }
    let binned: usize = counts.iter().sum();
    let density = counts
        .iter()
        .map(|c| {
            if binned > 0 {
                *c as f64 / (binned as f64 * width)
            } else {
                0.0
            }
        })
        .collect();
    Ok(DisparityStats {
        count: per_point.len(),
        median: median(per_point).expect("nonempty"),
        mean: per_point.iter().sum::<f64>() / per_point.len() as f64,
        histogram: Histogram {
            edges,
            counts,
            density,
            overflow,
        },
    })
}

/// One row per point: `submap,x,y,z,disparity`.
pub fn write_csv<W: Write>(report: &DisparityReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["submap", "x", "y", "z", "disparity"])?;
    for ((s, p), d) in report.submap.iter().zip(&report.points).zip(&report.per_point) {
        w.write_record([
            s.to_string(),
            format!("{:.9}", p[0]),
            format!("{:.9}", p[1]),
            format!("{:.9}", p[2]),
            format!("{:.9}", d),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(report: &DisparityReport, path: &Path) -> Result<()> {
    write_csv(report, std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(submaps: &[Vec<Vector3<f64>>]) -> Vec<f64> {
        let mut out = Vec::new();
        for (i, s) in submaps.iter().enumerate() {
            for p in s {
                let mut best = f64::INFINITY;
                for (j, o) in submaps.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    for q in o {
                        best = best.min(distance(&to_array(p), &to_array(q)));
                    }
                }
                out.push(best);
            }
        }
        out
    }

    #[test]
    fn identical_sets_have_zero_disparity() {
        let pts: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 0.5 * i as f64, 1.0)).collect();
        let r = point_disparity(&[pts.clone(), pts]).unwrap();
        assert!(r.per_point.iter().all(|d| *d == 0.0));
        assert_eq!(r.median, 0.0);
        assert_eq!(r.histogram.counts[0], 20);
        assert_eq!(r.histogram.counts.iter().filter(|c| **c > 0).count(), 1);
    }

    #[test]
    fn rigid_offset_is_recovered() {
        let d = 0.1;
        let a: Vec<_> = (0..5)
            .flat_map(|i| (0..5).map(move |j| Vector3::new(i as f64, j as f64, 0.0)))
            .collect();
        let b: Vec<_> = a.iter().map(|p| p + Vector3::new(0.0, 0.0, d)).collect();
        let r = point_disparity(&[a, b]).unwrap();
        assert!(r.per_point.iter().all(|x| (x - d).abs() < 1e-15));
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let submaps: Vec<Vec<Vector3<f64>>> = (0..3)
                .map(|_| {
                    (0..rng.random_range(1..200))
                        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
                        .collect()
                })
                .collect();
            let r = point_disparity(&submaps).unwrap();
            assert_eq!(r.per_point, brute_force(&submaps));
        }
    }

    #[test]
    fn too_few_submaps() {
        assert!(matches!(
            point_disparity(&[vec![Vector3::zeros()]]),
            Err(Error::TooFewSubmaps)
        ));
        assert!(matches!(
            point_disparity(&[vec![Vector3::zeros()], vec![]]),
            Err(Error::TooFewSubmaps)
        ));
        assert!(matches!(summarize(&[], 10), Err(Error::EmptyReport)));
    }

    #[test]
    fn even_median_uses_midpoint() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(summarize(&[1.0, 2.0, 3.0, 4.0], 4).unwrap().median, 2.5);
    }

    #[test]
    fn histogram_has_unit_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..1.0f64).powi(2)).collect();
        let s = summarize(&v, 37).unwrap();
        let w = s.histogram.edges[1] - s.histogram.edges[0];
        let area: f64 = s.histogram.density.iter().map(|d| d * w).sum();
        assert!((area - 1.0).abs() < 1e-12);
        assert_eq!(s.histogram.counts.iter().sum::<usize>() + s.histogram.overflow, 1000);
    }

    #[test]
    fn csv_layout() {
        let pts = vec![Vector3::new(1.0, 2.0, 3.0)];
        let r = point_disparity(&[pts.clone(), pts]).unwrap();
        let mut buf = Vec::new();
        write_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("submap,x,y,z,disparity"));
        assert_eq!(lines.next(), Some("0,1.000000000,2.000000000,3.000000000,0.000000000"));
    }
}
