use std::path::Path;

use crate::{Error, Result};

/// Magic bytes of the on-disk cloud format.
pub const CLOUD_MAGIC: &[u8; 6] = b"SIMPC1";
pub const CLOUD_VERSION: u8 = 1;
const HEADER_LEN: usize = 6 + 1 + 1 + 4 + 1;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    /// Identifier of the source image.
    pub source: String,
    /// Number of trailing points that repeat earlier ones (sampling from a small foreground).
    pub padded: usize,
}

/// `m` points of 3 (`x, y, z`) or 6 (`x, y, z, r, g, b`) coordinates, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    dims: usize,
    coords: Vec<f32>,
    normalized: bool,
    pub provenance: Provenance,
}

impl PointCloud {
    pub fn new(dims: usize, coords: Vec<f32>, normalized: bool) -> Result<Self> {
        if dims != 3 && dims != 6 {
            return Err(Error::Contract(format!("point clouds have 3 or 6 dims, got {dims}")));
        }
        if coords.len() % dims != 0 {
            return Err(Error::dim("point cloud", dims, coords.len()));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud".into()));
        }
        Ok(Self { dims, coords, normalized, provenance: Provenance::default() })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Number of points.
    pub fn len(&self) -> usize {
        self.coords.len() / self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn coords(&self) -> &[f32] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f32> {
        self.coords
    }

    pub fn point(&self, i: usize) -> &[f32] {
        &self.coords[i * self.dims..(i + 1) * self.dims]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f32]> {
        self.coords.chunks_exact(self.dims)
    }

    /// New cloud with the given rows, in that order.
    pub fn select(&self, rows: &[usize]) -> PointCloud {
        let coords = rows.iter().flat_map(|&r| self.point(r).iter().copied()).collect();
        PointCloud { dims: self.dims, coords, normalized: self.normalized, provenance: self.provenance.clone() }
    }

    /// The `(x, y, z)` columns only.
    pub fn xyz(&self) -> PointCloud {
        if self.dims == 3 {
            return self.clone();
        }
        let coords = self.points().flat_map(|p| p[..3].iter().copied()).collect();
        PointCloud { dims: 3, coords, normalized: self.normalized, provenance: self.provenance.clone() }
    }

    pub(crate) fn map_coords(&self, f: impl FnOnce(&mut [f32])) -> PointCloud {
        let mut out = self.clone();
        f(&mut out.coords);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.coords.len() * 4);
        out.extend_from_slice(CLOUD_MAGIC);
        out.push(CLOUD_VERSION);
        out.push(self.dims as u8);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.push(self.normalized as u8);
        for v in &self.coords {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("truncated cloud header".into()));
        }
        if &bytes[..6] != CLOUD_MAGIC {
            return Err(Error::Format("bad cloud magic".into()));
        }
        if bytes[6] != CLOUD_VERSION {
            return Err(Error::Format(format!("unsupported cloud version {}", bytes[6])));
        }
        let dims = bytes[7] as usize;
        if dims != 3 && dims != 6 {
            return Err(Error::Format(format!("cloud dims must be 3 or 6, got {dims}")));
        }
        let m = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let normalized = match bytes[12] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad normalized flag {b}"))),
        };
        let body = &bytes[HEADER_LEN..];
        if body.len() != m * dims * 4 {
            return Err(Error::Format(format!(
                "cloud body holds {} bytes, header implies {}",
                body.len(),
                m * dims * 4
            )));
        }
        let coords = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        PointCloud::new(dims, coords, normalized).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, cloud.to_bytes()).map_err(Error::at_path(path))
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(Error::at_path(path))?;
    let source = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(PointCloud::from_bytes(&bytes)?.with_provenance(Provenance { source, padded: 0 }))
}
