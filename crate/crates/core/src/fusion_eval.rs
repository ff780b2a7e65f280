//! Depth filtering by round-trip reprojection, multi-view fusion into an
//! oriented point cloud, and the point-cloud metrics.

use diffcore::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, MvpsError, Result};
use crate::geometry::{icp_align, Camera, IcpConfig, Vec3};
use crate::io::OrientedPointCloud;
use crate::plane_sweep::ViewPrediction;
use crate::spatial::NearestIndex;

/// Default F-score threshold: 1 mm on an object of roughly 100 mm radius,
/// expressed for objects scaled into the unit sphere.
pub const DEFAULT_THRESHOLD: f64 = 0.01;

/// Largest relative depth spread of four taps still treated as one surface.
const SURFACE_SPREAD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub pixel_thresh: f64,
    pub rel_depth_thresh: f64,
    pub min_consistent_views: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            pixel_thresh: 1.0,
            rel_depth_thresh: 0.01,
            min_consistent_views: 1,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_thresh >= 0.0 && self.rel_depth_thresh >= 0.0) {
            return Err(config("filter thresholds must be non-negative"));
        }
        Ok(())
    }
}

/// A depth map with its mask and camera.
#[derive(Clone, Copy, Debug)]
pub struct DepthView<'a> {
    /// `[H, W]`.
    pub depth: &'a Tensor<f32>,
    pub mask: &'a [bool],
    pub camera: &'a Camera,
}

impl<'a> DepthView<'a> {
    pub fn new(pred: &'a ViewPrediction, camera: &'a Camera) -> Self {
        Self {
            depth: &pred.depth,
            mask: &pred.mask,
            camera,
        }
    }

    fn at(&self, x: usize, y: usize) -> Option<f64> {
        let w = self.camera.size.1;
        let i = y * w + x;
        let d = self.depth.data()[i] as f64;
        (self.mask[i] && d > 0.0).then_some(d)
    }

    /// Depth at a continuous position: bilinear when the four taps are
    /// masked and lie on one surface, else the closest masked tap.
    fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let (h, w) = self.camera.size;
        if !self.camera.contains(u, v) {
            return None;
        }
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let taps = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)].map(|(x, y)| self.at(x, y));
        if let [Some(a), Some(b), Some(c), Some(d)] = taps {
            let lo = a.min(b).min(c).min(d);
            let hi = a.max(b).max(c).max(d);
            if hi - lo <= SURFACE_SPREAD * lo {
                let top = a * (1.0 - fx) + b * fx;
                let bot = c * (1.0 - fx) + d * fx;
                return Some(top * (1.0 - fy) + bot * fy);
            }
        }
        let weights = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
        taps.iter()
            .zip(weights)
            .filter_map(|(t, wt)| t.map(|d| (d, wt)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(d, _)| d)
    }
}

/// Reprojected source depth `d_r` if the reference pixel passes the
/// round-trip test against `src`.
pub fn round_trip(reference: &DepthView, src: &DepthView, x: usize, y: usize, d_o: f64, cfg: &FilterConfig) -> Option<f64> {
    let p = reference.camera.lift(x as f64, y as f64, d_o).ok()?;
    let (us, vs, _) = src.camera.project(&p).ok()?;
    let d_s = src.sample(us, vs)?;
    let q = src.camera.lift(us, vs, d_s).ok()?;
    let (ur, vr, d_r) = reference.camera.project(&q).ok()?;
    let dist = ((ur - x as f64).powi(2) + (vr - y as f64).powi(2)).sqrt();
    (dist < cfg.pixel_thresh && (d_o - d_r).abs() / d_o < cfg.rel_depth_thresh).then_some(d_r)
}

/// Filtering outcome for one reference view.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterResult {
    pub keep: Vec<bool>,
    /// Consistent reprojected source depths per pixel.
    pub estimates: Vec<Vec<f64>>,
}

impl FilterResult {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

pub fn geometric_filter(reference: &DepthView, sources: &[DepthView], cfg: &FilterConfig) -> FilterResult {
    let (h, w) = reference.camera.size;
    let (keep, estimates): (Vec<bool>, Vec<Vec<f64>>) = (0..h * w)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let Some(d_o) = reference.at(x, y) else {
                return (false, Vec::new());
            };
            let est: Vec<f64> = sources
                .iter()
                .filter_map(|s| round_trip(reference, s, x, y, d_o, cfg))
                .collect();
            (est.len() >= cfg.min_consistent_views, est)
        })
        .unzip();
    FilterResult { keep, estimates }
}

/// Mean of the reference depth and its consistent estimates.
pub fn fuse_depths(d_o: f64, estimates: &[f64]) -> f64 {
    (d_o + estimates.iter().sum::<f64>()) / (1 + estimates.len()) as f64
}

/// Kept pixels of one view with fused depths and camera-frame normals.
#[derive(Clone, Debug)]
pub struct FusedView {
    pub camera: Camera,
    pub keep: Vec<bool>,
    pub depth: Vec<f64>,
    /// `[3, H, W]`.
    pub normal: Tensor<f32>,
}

/// Lifts every kept pixel and rotates its normal into the world frame.
pub fn lift_to_cloud(views: &[FusedView]) -> Result<OrientedPointCloud> {
    let mut cloud = OrientedPointCloud::default();
    for v in views {
        let (h, w) = v.camera.size;
        let plane = h * w;
        let n = v.normal.data();
        for i in (0..plane).filter(|&i| v.keep[i]) {
            cloud.points.push(v.camera.lift((i % w) as f64, (i / w) as f64, v.depth[i])?);
            let nc = Vec3::new(n[i] as f64, n[plane + i] as f64, n[2 * plane + i] as f64);
            let nw = v.camera.r * nc;
            let len = nw.norm();
            cloud.normals.push(if len > 0.0 { nw / len } else { nw });
        }
    }
    Ok(cloud)
}

/// Pixel counts from [`fuse_views`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FuseStats {
    pub masked: usize,
    pub kept: usize,
}

/// Filters each view against its `sources`, fuses and lifts the survivors.
pub fn fuse_views(
    preds: &[ViewPrediction],
    cameras: &[Camera],
    sources: &[Vec<usize>],
    cfg: &FilterConfig,
) -> Result<(OrientedPointCloud, FuseStats)> {
    cfg.validate()?;
    if preds.len() != cameras.len() || preds.len() != sources.len() {
        return Err(config("predictions, cameras and source lists differ in length"));
    }
    let dviews: Vec<DepthView> = preds.iter().zip(cameras).map(|(p, c)| DepthView::new(p, c)).collect();
    let mut fused = Vec::with_capacity(preds.len());
    let mut stats = FuseStats::default();
    for (i, refv) in dviews.iter().enumerate() {
        let srcs: Vec<DepthView> = sources[i].iter().map(|&j| dviews[j]).collect();
        let res = geometric_filter(refv, &srcs, cfg);
        stats.masked += preds[i].mask.iter().filter(|&&m| m).count();
        stats.kept += res.kept();
        let depth = res
            .keep
            .iter()
            .enumerate()
            .map(|(p, &k)| match k {
                true => fuse_depths(preds[i].depth.data()[p] as f64, &res.estimates[p]),
                false => 0.0,
            })
            .collect();
        fused.push(FusedView {
            camera: cameras[i].clone(),
            keep: res.keep,
            depth,
            normal: preds[i].normal.clone(),
        });
    }
    let cloud = lift_to_cloud(&fused)?;
    if cloud.is_empty() {
        return Err(MvpsError::Empty("fused point cloud"));
    }
    Ok((cloud, stats))
}

/// Cloud of every masked pixel of the given depth and normal maps.
pub fn depth_cloud(depths: &[&Tensor<f32>], normals: &[&Tensor<f32>], masks: &[&[bool]], cameras: &[Camera]) -> Result<OrientedPointCloud> {
    let views: Vec<FusedView> = depths
        .iter()
        .zip(normals)
        .zip(masks)
        .zip(cameras)
        .map(|(((d, n), m), c)| FusedView {
            camera: c.clone(),
            keep: m.to_vec(),
            depth: d.data().iter().map(|&v| v as f64).collect(),
            normal: (*n).clone(),
        })
        .collect();
    lift_to_cloud(&views)
}

fn mean_nearest(from: &[Vec3], to: &NearestIndex) -> f64 {
    let d: Vec<f64> = from.par_iter().map(|p| to.nearest(p).1).collect();
    d.iter().sum::<f64>() / d.len() as f64
}

fn nonempty(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(MvpsError::Empty("point set"));
    }
    Ok(())
}

/// Mean nearest-neighbour distance from `a` to `b` plus from `b` to `a`.
pub fn chamfer_l1(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    nonempty(a, b)?;
    Ok(mean_nearest(a, &NearestIndex::new(b)) + mean_nearest(b, &NearestIndex::new(a)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

fn fraction_within(from: &[Vec3], to: &NearestIndex, d: f64) -> f64 {
    let n = from.par_iter().filter(|p| to.nearest(p).1 < d).count();
    n as f64 / from.len() as f64
}

/// Precision of `pred` against `gt`, recall of `gt` against `pred`, and
/// their harmonic mean at distance `d`.
pub fn fscore(pred: &[Vec3], gt: &[Vec3], d: f64) -> Result<FScore> {
    nonempty(pred, gt)?;
    if !(d > 0.0) {
        return Err(config(format!("F-score threshold must be positive, got {d}")));
    }
    let precision = fraction_within(pred, &NearestIndex::new(gt), d);
    let recall = fraction_within(gt, &NearestIndex::new(pred), d);
    let fscore = match precision + recall {
        s if s > 0.0 => 2.0 * precision * recall / s,
        _ => 0.0,
    };
    Ok(FScore {
        precision,
        recall,
        fscore,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub chamfer_l1: f64,
    pub fscore: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold_d: f64,
    pub icp_applied: bool,
    pub pred_points: usize,
    pub gt_points: usize,
}

impl MetricsReport {
    /// One `key=value` per line.
    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("report serialises");
        let mut out = String::new();
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                out.push_str(&format!("{k}={v}\n"));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

/// Metrics of `pred` against `gt`, optionally after aligning `pred` to
/// `gt` with ICP.
pub fn evaluate(pred: &[Vec3], gt: &[Vec3], threshold_d: f64, align: bool) -> Result<MetricsReport> {
    nonempty(pred, gt)?;
    let aligned: Vec<Vec3> = match align {
        true => {
            let t = icp_align(pred, gt, &IcpConfig::default())?;
            pred.iter().map(|p| t.apply(p)).collect()
        }
        false => pred.to_vec(),
    };
    let f = fscore(&aligned, gt, threshold_d)?;
    Ok(MetricsReport {
        chamfer_l1: chamfer_l1(&aligned, gt)?,
        fscore: f.fscore,
        precision: f.precision,
        recall: f.recall,
        threshold_d,
        icp_applied: align,
        pred_points: pred.len(),
        gt_points: gt.len(),
    })
}

/// Drops points whose z lies below `z_min`.
pub fn crop_z(cloud: &OrientedPointCloud, z_min: f64) -> OrientedPointCloud {
    let (points, normals) = cloud
        .points
        .iter()
        .zip(&cloud.normals)
        .filter(|(p, _)| p.z >= z_min)
        .map(|(p, n)| (*p, *n))
        .unzip();
    OrientedPointCloud { points, normals }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chamfer_of_two_points() {
        let a = [Vec3::zeros()];
        let b = [Vec3::new(1.0, 0.0, 0.0)];
        assert_eq!(chamfer_l1(&a, &b).unwrap(), 2.0);
        assert!(chamfer_l1(&a, &[]).is_err());
    }

    #[test]
    fn fscore_far_apart_is_zero() {
        let f = fscore(&[Vec3::zeros()], &[Vec3::new(2.0, 0.0, 0.0)], 1.0).unwrap();
        assert_eq!((f.precision, f.recall, f.fscore), (0.0, 0.0, 0.0));
    }

    #[test]
    fn fusion_is_a_mean() {
        assert!((fuse_depths(10.0, &[10.02]) - 10.01).abs() < 1e-12);
        assert_eq!(fuse_depths(7.5, &[]), 7.5);
    }

    #[test]
    fn report_lines() {
        let r = evaluate(&[Vec3::zeros(), Vec3::x()], &[Vec3::zeros(), Vec3::x()], 0.1, false).unwrap();
        let text = r.to_text();
        assert!(text.contains("chamfer_l1=0.0\n") && text.contains("fscore=1.0\n"));
        assert_eq!(text.lines().count(), 8);
    }
}
