//! Lifting a masked image into a point cloud.
//!
//! Non-black pixels become 2-D points `(x, y)`, farthest point sampling keeps
//! `m` of them, and each survivor gets `z = (r + g + b) / 3`. Optionally the
//! pixel color is appended to give `(x, y, z, r, g, b)`.

mod cloud;
mod fps;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use cloud::{read_cloud, write_cloud, PointCloud, Provenance, CLOUD_MAGIC, CLOUD_VERSION};
pub use fps::{coverage_radius, fps, fps_reference, start_index, FpsSelection, FpsStart};

use crate::imaging::RgbImage;
use crate::{Error, Result};

/// A non-black pixel of a masked image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EligiblePixel {
    pub x: u32,
    pub y: u32,
    pub rgb: [u8; 3],
}

impl EligiblePixel {
    pub fn xy(&self) -> [f64; 2] {
        [self.x as f64, self.y as f64]
    }

    /// Channel mean, unrounded.
    pub fn intensity(&self) -> f32 {
        (self.rgb[0] as f32 + self.rgb[1] as f32 + self.rgb[2] as f32) / 3.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EligiblePixelSet {
    pub pixels: Vec<EligiblePixel>,
    pub width: usize,
    pub height: usize,
}

impl EligiblePixelSet {
    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.pixels.iter().map(EligiblePixel::xy).collect()
    }
}

/// Every non-black pixel, in row-major scan order.
pub fn extract_eligible(masked: &RgbImage) -> Result<EligiblePixelSet> {
    let mut pixels = Vec::new();
    for y in 0..masked.height() {
        for x in 0..masked.width() {
            let rgb = masked.pixel(x, y);
            if rgb != [0, 0, 0] {
                pixels.push(EligiblePixel { x: x as u32, y: y as u32, rgb });
            }
        }
    }
    if pixels.is_empty() {
        return Err(Error::EmptyForeground);
    }
    Ok(EligiblePixelSet { pixels, width: masked.width(), height: masked.height() })
}

/// `(x, y, (r + g + b) / 3)` per pixel; `z` is kept unrounded.
pub fn lift_to_3d(pixels: &[EligiblePixel]) -> PointCloud {
    let coords = pixels.iter().flat_map(|p| [p.x as f32, p.y as f32, p.intensity()]).collect();
    PointCloud::new(3, coords, false).expect("three columns")
}

/// Appends each point's source color: `(x, y, z) -> (x, y, z, r, g, b)`.
pub fn enrich_rgb(cloud: &PointCloud, pixels: &[EligiblePixel]) -> Result<PointCloud> {
    if cloud.dims() != 3 {
        return Err(Error::Contract(format!("enrich_rgb expects a 3-D cloud, got {} dims", cloud.dims())));
    }
    if cloud.len() != pixels.len() {
        return Err(Error::Contract(format!(
            "cloud/pixel alignment: {} points vs {} pixels",
            cloud.len(),
            pixels.len()
        )));
    }
    let coords = cloud
        .points()
        .zip(pixels)
        .flat_map(|(p, px)| [p[0], p[1], p[2], px.rgb[0] as f32, px.rgb[1] as f32, px.rgb[2] as f32])
        .collect();
    Ok(PointCloud::new(6, coords, cloud.is_normalized())?.with_provenance(cloud.provenance.clone()))
}

/// Centers `(x, y)` on the centroid and scales by the largest centroid distance
/// (unit disk); `z` and colors map affinely from `[0, 255]` to `[−1, 1]`.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_normalized() {
        return Err(Error::Contract("cloud is already normalized".into()));
    }
    let n = cloud.len().max(1) as f64;
    let (sx, sy) = cloud.points().fold((0.0, 0.0), |(a, b), p| (a + p[0] as f64, b + p[1] as f64));
    let (cx, cy) = (sx / n, sy / n);
    let radius = cloud
        .points()
        .map(|p| ((p[0] as f64 - cx).powi(2) + (p[1] as f64 - cy).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let scale = if radius > 0.0 { radius } else { 1.0 };
    let dims = cloud.dims();
    let coords = cloud
        .points()
        .flat_map(|p| {
            (0..dims).map(move |j| match j {
                0 => ((p[0] as f64 - cx) / scale) as f32,
                1 => ((p[1] as f64 - cy) / scale) as f32,
                _ => (p[j] as f64 / 127.5 - 1.0) as f32,
            })
        })
        .collect();
    Ok(PointCloud::new(dims, coords, true)?.with_provenance(cloud.provenance.clone()))
}

/// Point-cloud augmentation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudAugment {
    /// Random rotation of `(x, y)` about the z-axis.
    pub rotate: bool,
    /// Gaussian jitter standard deviation; 0 disables jitter.
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for CloudAugment {
    fn default() -> Self {
        Self { rotate: true, jitter_sigma: 0.02, jitter_clip: 0.05 }
    }
}

/// Rotates `(x, y)` by `angle` radians; other columns are untouched.
pub fn rotate_z(cloud: &PointCloud, angle: f64) -> PointCloud {
    let (s, c) = angle.sin_cos();
    let dims = cloud.dims();
    cloud.map_coords(|coords| {
        for p in coords.chunks_exact_mut(dims) {
            let (x, y) = (p[0] as f64, p[1] as f64);
            p[0] = (x * c - y * s) as f32;
            p[1] = (x * s + y * c) as f32;
        }
    })
}

/// Uniform rotation in `[0, 2π)` about the z-axis, then clipped Gaussian
/// jitter on `x, y, z`. Normalized clouds are clamped back into `[−1, 1]`.
pub fn augment_cloud(cloud: &PointCloud, aug: &CloudAugment, rng: &mut impl Rng) -> PointCloud {
    let mut out = if aug.rotate {
        rotate_z(cloud, rng.random_range(0.0..std::f64::consts::TAU))
    } else {
        cloud.clone()
    };
    if aug.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, aug.jitter_sigma).expect("positive sigma");
        let (dims, clamp) = (out.dims(), out.is_normalized());
        out = out.map_coords(|coords| {
            for p in coords.chunks_exact_mut(dims) {
                for v in &mut p[..3] {
                    let d: f64 = normal.sample(rng);
                    let mut nv = *v + d.clamp(-aug.jitter_clip, aug.jitter_clip) as f32;
                    if clamp {
                        nv = nv.clamp(-1.0, 1.0);
                    }
                    *v = nv;
                }
            }
        });
    }
    out
}

/// Number of points kept by [`ablate_points`]: `round(m · keep_fraction)`.
pub fn kept_count(m: usize, keep_fraction: f64) -> usize {
    (m as f64 * keep_fraction).round() as usize
}

/// Keeps a uniform random subset of `round(m · keep_fraction)` points, in their original order.
pub fn ablate_points(cloud: &PointCloud, keep_fraction: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Contract(format!("keep fraction must lie in (0, 1], got {keep_fraction}")));
    }
    let k = kept_count(cloud.len(), keep_fraction);
    if k == 0 {
        return Err(Error::Contract(format!(
            "keeping {keep_fraction} of {} points leaves none",
            cloud.len()
        )));
    }
    if k == cloud.len() {
        return Ok(cloud.clone());
    }
    let mut rows = index::sample(rng, cloud.len(), k).into_vec();
    rows.sort_unstable();
    Ok(cloud.select(&rows))
}

/// Sets the third column to zero.
pub fn zero_z(cloud: &PointCloud) -> PointCloud {
    let dims = cloud.dims();
    cloud.map_coords(|coords| coords.chunks_exact_mut(dims).for_each(|p| p[2] = 0.0))
}

/// Image-to-cloud conversion settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionConfig {
    pub points: usize,
    pub dims: usize,
    pub normalize: bool,
    pub start: FpsStart,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self { points: 1024, dims: 3, normalize: true, start: FpsStart::NearestCentroid }
    }
}

/// The full transformation: eligible pixels, farthest point sampling in 2-D,
/// z-lift, optional color enrichment and normalization.
pub fn image_to_cloud(masked: &RgbImage, cfg: &ConversionConfig, source: &str) -> Result<PointCloud> {
    if cfg.dims != 3 && cfg.dims != 6 {
        return Err(Error::Config(format!("cloud dims must be 3 or 6, got {}", cfg.dims)));
    }
    let eligible = extract_eligible(masked)?;
    let sel = fps(&eligible.coords(), cfg.points, cfg.start)?;
    let picked: Vec<EligiblePixel> = sel.indices.iter().map(|&i| eligible.pixels[i]).collect();
    let mut cloud = lift_to_3d(&picked);
    if cfg.dims == 6 {
        cloud = enrich_rgb(&cloud, &picked)?;
    }
    if cfg.normalize {
        cloud = normalize_cloud(&cloud)?;
    }
    Ok(cloud.with_provenance(Provenance { source: source.to_owned(), padded: sel.padded }))
}
