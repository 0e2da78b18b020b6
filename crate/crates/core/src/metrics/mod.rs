//! Visual fidelity (PSNR) and geometric accuracy (F-score over marching-cubes
//! point clouds).

mod mcubes;

pub use mcubes::{extract, Mesh};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::radiance::{RadianceGrid, Rgb};
use crate::trainer::Ensemble;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn mse(rendered: &[Rgb], reference: &[Rgb]) -> Result<f64> {
    if rendered.len() != reference.len() || rendered.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "image sizes differ or are empty: {} vs {}",
            rendered.len(),
            reference.len()
        )));
    }
    let sum: f64 = rendered
        .iter()
        .zip(reference)
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * rendered.len()) as f64)
}

/// `10·log10(1/MSE)` over all pixels and channels, capped at [`PSNR_CAP`].
pub fn psnr(rendered: &[Rgb], reference: &[Rgb]) -> Result<f64> {
    Ok(psnr_from_mse(mse(rendered, reference)?))
}

/// PSNR restricted to pixels where `mask` is set; the cap applies to an empty mask.
pub fn psnr_masked(rendered: &[Rgb], reference: &[Rgb], mask: &[bool]) -> Result<f64> {
    if mask.len() != rendered.len() {
        return Err(Error::InvalidArgument("mask size does not match image".into()));
    }
    let (a, b): (Vec<Rgb>, Vec<Rgb>) = rendered
        .iter()
        .zip(reference)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((a, b), _)| (*a, *b))
        .unzip();
    if a.is_empty() {
        return Ok(PSNR_CAP);
    }
    psnr(&a, &b)
}

/// Lattice of voxel centers of a grid: origin and spacing.
fn lattice(grid: &RadianceGrid) -> (Vec3, Vec3) {
    (grid.voxel_center(0, 0, 0), grid.voxel_size())
}

/// Isosurface of the activated density of one grid.
pub fn marching_cubes(grid: &RadianceGrid, iso: f64) -> Mesh {
    let field: Vec<f64> = (0..grid.voxel_count()).map(|i| grid.density(i)).collect();
    let (o, s) = lattice(grid);
    extract(&field, grid.resolution(), o, s, iso)
}

/// Isosurface of the member-mean activated density.
pub fn ensemble_mesh(ensemble: &Ensemble, iso: f64) -> Mesh {
    let g = &ensemble.members[0];
    let field: Vec<f64> = (0..g.voxel_count()).map(|i| ensemble.mean_density(i)).collect();
    let (o, s) = lattice(g);
    extract(&field, g.resolution(), o, s, iso)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub fscore: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold_d: f64,
}

/// Precision, recall and F-score at distance `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

struct SpatialHash<'a> {
    cell: f64,
    buckets: HashMap<(i64, i64, i64), Vec<usize>>,
    points: &'a [Vec3],
}

impl<'a> SpatialHash<'a> {
    fn new(points: &'a [Vec3], cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        SpatialHash { cell, buckets, points }
    }

    fn key(p: &Vec3, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Whether some stored point lies within `cell` of `p`.
    fn has_neighbor(&self, p: &Vec3) -> bool {
        let (kx, ky, kz) = Self::key(p, self.cell);
        let r2 = self.cell * self.cell;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(b) = self.buckets.get(&(kx + dx, ky + dy, kz + dz)) {
                        if b.iter().any(|i| (self.points[*i] - p).norm_squared() <= r2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

fn fraction_within(from: &[Vec3], to: &SpatialHash) -> f64 {
    from.iter().filter(|p| to.has_neighbor(p)).count() as f64 / from.len() as f64
}

pub fn fscore(model_points: &[Vec3], gt_points: &[Vec3], d: f64) -> Result<FScore> {
    if model_points.is_empty() || gt_points.is_empty() {
        return Err(Error::InvalidArgument("F-score needs two non-empty clouds".into()));
    }
    if !(d > 0.0) {
        return Err(Error::InvalidArgument(format!("distance threshold must be positive, got {d}")));
    }
    let precision = fraction_within(model_points, &SpatialHash::new(gt_points, d));
    let recall = fraction_within(gt_points, &SpatialHash::new(model_points, d));
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(FScore {
        precision,
        recall,
        fscore,
    })
}

/// F-score of a mesh's vertices; an empty mesh scores zero.
pub fn mesh_fscore(mesh: &Mesh, gt_points: &[Vec3], d: f64) -> Result<FScore> {
    if mesh.vertices.is_empty() {
        return Ok(FScore {
            precision: 0.0,
            recall: 0.0,
            fscore: 0.0,
        });
    }
    fscore(&mesh.vertices, gt_points, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;
    use crate::radiance::softplus_inv;
    use proptest::prelude::*;

    #[test]
    fn psnr_closed_forms() {
        let a = vec![[0.2, 0.4, 0.6]; 16];
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b: Vec<Rgb> = a.iter().map(|p| [p[0] + 0.1, p[1] - 0.1, p[2] + 0.1]).collect();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let checker: Vec<Rgb> = (0..16).map(|i| if i % 2 == 0 { [1.0; 3] } else { [0.0; 3] }).collect();
        let inverse: Vec<Rgb> = checker.iter().map(|p| [1.0 - p[0]; 3]).collect();
        assert_eq!(psnr(&checker, &inverse).unwrap(), 0.0);
        assert!(psnr(&a, &a[..3]).is_err());
    }

    #[test]
    fn masked_psnr_ignores_unmasked_pixels() {
        let a = vec![[0.5; 3]; 4];
        let mut b = a.clone();
        b[3] = [0.0; 3];
        assert_eq!(psnr_masked(&a, &b, &[true, true, true, false]).unwrap(), PSNR_CAP);
        assert!(psnr_masked(&a, &b, &[true; 4]).unwrap() < PSNR_CAP);
    }

    fn cloud(n: usize, offset: Vec3) -> Vec<Vec3> {
        (0..n)
            .map(|i| Vec3::new((i % 10) as f64 * 0.1, (i / 10) as f64 * 0.1, 0.0) + offset)
            .collect()
    }

    #[test]
    fn fscore_counting_cases() {
        let gt = cloud(100, Vec3::zeros());
        let d = 0.01;
        let same = fscore(&gt, &gt, d).unwrap();
        assert_eq!((same.precision, same.recall, same.fscore), (1.0, 1.0, 1.0));
        let far = fscore(&cloud(100, Vec3::new(0.0, 0.0, 2.0 * d)), &gt, d).unwrap();
        assert_eq!((far.precision, far.recall, far.fscore), (0.0, 0.0, 0.0));
        let mut model = gt.clone();
        model.extend(cloud(50, Vec3::new(10.0, 10.0, 10.0)));
        let f = fscore(&model, &gt, d).unwrap();
        assert!((f.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f.recall, 1.0);
        assert!((f.fscore - 0.8).abs() < 1e-12);
        assert!(fscore(&[], &gt, d).is_err());
        assert!(fscore(&gt, &gt, 0.0).is_err());
    }

    fn sphere_grid(res: usize, radius: f64) -> RadianceGrid {
        let b = Aabb::cube(Vec3::zeros(), 1.0).unwrap();
        let mut g = RadianceGrid::new([res; 3], b).unwrap();
        for iz in 0..res {
            for iy in 0..res {
                for ix in 0..res {
                    let p = g.voxel_center(ix, iy, iz);
                    // smooth radial profile: density 100 at the center falling linearly through 50 at `radius`
                    let dens = (100.0 * (1.0 - p.norm() / (2.0 * radius))).max(1e-6);
                    let i = g.index(ix, iy, iz);
                    g.set_voxel(i, softplus_inv(dens), [0.0; 3]);
                }
            }
        }
        g
    }

    #[test]
    fn sphere_mesh_is_accurate_and_genus_zero() {
        let g = sphere_grid(24, 0.6);
        let mesh = marching_cubes(&g, 50.0);
        assert!(!mesh.is_empty());
        let diag = g.voxel_size().norm();
        for v in &mesh.vertices {
            assert!((v.norm() - 0.6).abs() < diag);
            assert!(g.bounds().contains(v));
        }
        assert_eq!(mesh.euler_characteristic(), 2);
        assert!(mesh.is_closed());
    }

    #[test]
    fn constant_field_gives_empty_mesh() {
        let g = RadianceGrid::filled([6; 3], Aabb::cube(Vec3::zeros(), 1.0).unwrap(), 3.0, [0.0; 3]).unwrap();
        assert!(marching_cubes(&g, 5.0).is_empty());
    }

    #[test]
    fn two_separate_blobs_have_euler_four() {
        let n = 16;
        let mut field = vec![0.0; n * n * n];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let p = Vec3::new(x as f64, y as f64, z as f64);
                    let d1 = (p - Vec3::new(4.0, 7.5, 7.5)).norm();
                    let d2 = (p - Vec3::new(11.0, 7.5, 7.5)).norm();
                    field[x + n * (y + n * z)] = (3.0 - d1).max(3.0 - d2);
                }
            }
        }
        let m = extract(&field, [n; 3], Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), 0.0);
        assert_eq!(m.euler_characteristic(), 4);
        assert!(m.is_closed());
    }

    #[test]
    fn stl_has_expected_size() {
        let m = marching_cubes(&sphere_grid(10, 0.5), 50.0);
        let mut buf = Vec::new();
        m.write_stl(&mut buf).unwrap();
        assert_eq!(buf.len(), 84 + 50 * m.triangles.len());
    }

    proptest! {
        #[test]
        fn fscore_swaps_precision_and_recall(
            a in proptest::collection::vec(proptest::array::uniform3(-1.0f64..1.0), 1..40),
            b in proptest::collection::vec(proptest::array::uniform3(-1.0f64..1.0), 1..40),
            d in 0.05f64..0.5,
        ) {
            let a: Vec<Vec3> = a.into_iter().map(Vec3::from).collect();
            let b: Vec<Vec3> = b.into_iter().map(Vec3::from).collect();
            let ab = fscore(&a, &b, d).unwrap();
            let ba = fscore(&b, &a, d).unwrap();
            prop_assert_eq!(ab.precision, ba.recall);
            prop_assert_eq!(ab.recall, ba.precision);
            prop_assert!((ab.fscore - ba.fscore).abs() < 1e-15);
        }

        #[test]
        fn psnr_decreases_with_error(e1 in 0.001f64..0.4, gap in 0.001f64..0.4) {
            let a = vec![[0.5; 3]; 4];
            let b1 = vec![[0.5 + e1; 3]; 4];
            let b2 = vec![[0.5 + e1 + gap; 3]; 4];
            prop_assert!(psnr(&a, &b2).unwrap() < psnr(&a, &b1).unwrap());
        }
    }
}
