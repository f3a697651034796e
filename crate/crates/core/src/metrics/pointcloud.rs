//! Pointmap reconstruction metrics: accuracy, completion and normal
//! consistency after similarity alignment.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::{mean, MetricError};
use crate::pose::{icp_refine, umeyama, GeometryError, IcpConfig, Similarity};
use crate::spatial::KdTree;
use crate::tracks::median;

pub const DEFAULT_NORMAL_NEIGHBOURS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudAlignment {
    /// No alignment.
    None,
    /// Umeyama similarity from index-matched points (clouds must have equal
    /// length).
    Similarity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloudOptions {
    pub alignment: CloudAlignment,
    pub icp: bool,
    pub icp_config: IcpConfig,
    pub normal_neighbours: usize,
}

impl Default for CloudOptions {
    fn default() -> Self {
        Self {
            alignment: CloudAlignment::Similarity,
            icp: false,
            icp_config: IcpConfig::default(),
            normal_neighbours: DEFAULT_NORMAL_NEIGHBOURS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudScores {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
    pub nc_mean: f64,
    pub nc_median: f64,
}

/// Unit normal of the least-variance direction of the `k` nearest points
/// (including the point itself).
pub fn estimate_normals(cloud: &[Vector3<f64>], tree: &KdTree, k: usize) -> Vec<Vector3<f64>> {
    let k = k.min(cloud.len()).max(1);
    cloud
        .iter()
        .map(|p| {
            let nb = tree.k_nearest(p, k);
            plane_normal(nb.iter().map(|&j| cloud[j]))
        })
        .collect()
}

pub(crate) fn plane_normal(points: impl Iterator<Item = Vector3<f64>> + Clone) -> Vector3<f64> {
    let n = points.clone().count().max(1) as f64;
    let c = points.clone().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cov = points.fold(Matrix3::zeros(), |a, p| a + (p - c) * (p - c).transpose());
    let eig = SymmetricEigen::new(cov);
    let i = eig.eigenvalues.imin();
    eig.eigenvectors.column(i).into_owned()
}

fn nn_stats(from: &[Vector3<f64>], to_tree: &KdTree) -> (Vec<f64>, Vec<usize>) {
    from.iter()
        .map(|p| {
            let (j, d2) = to_tree.nearest(p);
            (d2.sqrt(), j)
        })
        .unzip()
}

fn med(v: &[f64]) -> f64 {
    let mut c = v.to_vec();
    median(&mut c)
}

/// Aligns `pred` onto `gt` per `opts`, returning the transform used.
pub fn align_cloud(pred: &[Vector3<f64>], gt: &[Vector3<f64>], opts: &CloudOptions) -> Result<Similarity, MetricError> {
    let mut s = match opts.alignment {
        CloudAlignment::None => Similarity::identity(),
        CloudAlignment::Similarity => {
            if pred.len() != gt.len() {
                return Err(MetricError::LengthMismatch {
                    what: "matched clouds",
                    left: pred.len(),
                    right: gt.len(),
                });
            }
            umeyama(pred, gt, true)?
        }
    };
    if opts.icp {
        s = icp_refine(pred, gt, s, &opts.icp_config)?;
    }
    Ok(s)
}

/// Accuracy (pred to gt nearest-neighbour distance), completion (gt to
/// pred) and normal consistency (mean of |cos| between a point's normal and
/// its nearest neighbour's normal, averaged over both directions).
pub fn pointmap_metrics(pred: &[Vector3<f64>], gt: &[Vector3<f64>], opts: &CloudOptions) -> Result<CloudScores, MetricError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(GeometryError::DegenerateConfiguration("empty point cloud".into()).into());
    }
    let s = align_cloud(pred, gt, opts)?;
    let pred: Vec<Vector3<f64>> = pred.iter().map(|p| s.apply(p)).collect();
    let pred_tree = KdTree::new(&pred);
    let gt_tree = KdTree::new(gt);
    let (acc, acc_nn) = nn_stats(&pred, &gt_tree);
    let (comp, comp_nn) = nn_stats(gt, &pred_tree);

    let k = opts.normal_neighbours;
    let n_pred = estimate_normals(&pred, &pred_tree, k);
    let n_gt = estimate_normals(gt, &gt_tree, k);
    let nc_acc: Vec<f64> = acc_nn.iter().enumerate().map(|(i, &j)| n_pred[i].dot(&n_gt[j]).abs()).collect();
    let nc_comp: Vec<f64> = comp_nn.iter().enumerate().map(|(i, &j)| n_gt[i].dot(&n_pred[j]).abs()).collect();

    Ok(CloudScores {
        acc_mean: mean(&acc),
        acc_median: med(&acc),
        comp_mean: mean(&comp),
        comp_median: med(&comp),
        nc_mean: 0.5 * (mean(&nc_acc) + mean(&nc_comp)),
        nc_median: 0.5 * (med(&nc_acc) + med(&nc_comp)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bumpy(n: usize) -> Vec<Vector3<f64>> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                // Irrational jitter avoids equidistant neighbour ties.
                let (x, y) = (i as f64 * 0.1 + 0.013 * ((i * 7 + j * 3) as f64).sin(), j as f64 * 0.1 + 0.011 * ((i * 5 + j) as f64).cos());
                v.push(Vector3::new(x, y, 0.2 * (2.0 * x).sin() * (1.5 * y).cos()));
            }
        }
        v
    }

    #[test]
    fn identical_clouds() {
        let c = bumpy(10);
        let s = pointmap_metrics(&c, &c, &CloudOptions::default()).unwrap();
        assert!(s.acc_mean < 1e-12 && s.comp_mean < 1e-12);
        assert!((s.nc_mean - 1.0).abs() < 1e-9 && (s.nc_median - 1.0).abs() < 1e-9, "{s:?}");
    }

    #[test]
    fn scaled_cloud_aligns() {
        let c = bumpy(10);
        let p: Vec<Vector3<f64>> = c.iter().map(|x| x * 3.0).collect();
        let s = pointmap_metrics(&p, &c, &CloudOptions::default()).unwrap();
        assert!(s.acc_mean < 1e-9 && s.comp_mean < 1e-9);
    }

    #[test]
    fn offset_without_alignment() {
        let c = bumpy(8);
        let d = 0.01;
        let p: Vec<Vector3<f64>> = c.iter().map(|x| x + Vector3::new(0.0, 0.0, d)).collect();
        let opts = CloudOptions {
            alignment: CloudAlignment::None,
            ..Default::default()
        };
        let s = pointmap_metrics(&p, &c, &opts).unwrap();
        assert!((s.acc_mean - d).abs() < 1e-12, "{}", s.acc_mean);
    }

    #[test]
    fn icp_recovers_small_misalignment() {
        let c = bumpy(12);
        let g = crate::pose::exp_map(&crate::pose::PoseTangent::new(Vector3::new(0.0, 0.0, 0.02), Vector3::new(0.01, -0.005, 0.0)));
        let p: Vec<Vector3<f64>> = c.iter().map(|x| g.transform_point(x)).collect();
        let opts = CloudOptions {
            alignment: CloudAlignment::None,
            icp: true,
            icp_config: IcpConfig {
                max_iterations: 50,
                tolerance: 1e-12,
            },
            ..Default::default()
        };
        let plain = pointmap_metrics(&p, &c, &CloudOptions { icp: false, ..opts }).unwrap();
        let refined = pointmap_metrics(&p, &c, &opts).unwrap();
        assert!(refined.acc_mean < 0.5 * plain.acc_mean);
    }
}
