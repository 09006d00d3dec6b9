//! Axis-aligned 3D scalar and label volumes in physical (mm) space.
//!
//! On disk a volume is a JSON header plus a raw little-endian payload stored next to it:
//!
//! ```json
//! { "dims": [nx, ny, nz], "spacing_mm": [sx, sy, sz], "origin_mm": [ox, oy, oz],
//!   "dtype": "f32" | "u16", "payload": "name.raw", "labels": { "aorta": 1 } }
//! ```
//!
//! Payload ordering is x-fastest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vector3;
use crate::real::Real;
use crate::Vec3;

/// Grid geometry shared by both volume kinds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<Self> {
        let g = Self { dims, spacing, origin };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("dims must be positive, got {:?}", self.dims)));
        }
        let s = self.spacing;
        if !(s.x > 0.0 && s.y > 0.0 && s.z > 0.0) || !s.is_finite() {
            return Err(Error::InvalidVolume(format!("spacing must be positive and finite, got {s:?}")));
        }
        if !self.origin.is_finite() {
            return Err(Error::InvalidVolume("origin must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    /// Continuous voxel index of a world point.
    #[inline]
    pub fn world_to_voxel<T: Real>(&self, p: Vector3<T>) -> Vector3<T> {
        (p - self.origin.cast()).component_div(self.spacing.cast())
    }

    #[inline]
    pub fn voxel_to_world<T: Real>(&self, idx: Vector3<T>) -> Vector3<T> {
        self.origin.cast() + idx.component_mul(self.spacing.cast())
    }

    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.voxel_to_world(Vec3::new(i as f64, j as f64, k as f64))
    }

    /// Nearest voxel to a world point, if it lies within the grid.
    pub fn nearest_voxel(&self, p: Vec3) -> Option<[usize; 3]> {
        let c = self.world_to_voxel(p);
        let mut out = [0usize; 3];
        for (a, o) in out.iter_mut().enumerate() {
            let r = c[a].round();
            if !(r >= 0.0 && r < self.dims[a] as f64) {
                return None;
            }
            *o = r as usize;
        }
        Some(out)
    }

    /// True when `p` lies inside the convex hull of voxel centres.
    pub fn contains(&self, p: Vec3) -> bool {
        let c = self.world_to_voxel(p);
        (0..3).all(|a| c[a] >= 0.0 && c[a] <= (self.dims[a] - 1) as f64)
    }

    /// World-space bounds of the voxel centres.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let hi = self.voxel_center(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        (self.origin, hi)
    }
}

/// Anything that can be probed for an intensity at a world point.
pub trait IntensityField: Sync {
    fn intensity(&self, p: Vec3) -> f64;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    pub grid: Grid,
    pub data: Vec<f32>,
    /// Returned for samples outside the grid.
    pub fill: f32,
}

impl ScalarVolume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite voxel value".into()));
        }
        Ok(Self { grid, data, fill: 0.0 })
    }

    pub fn filled(grid: Grid, value: f32) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()])
    }

    /// Builds a volume by evaluating `f` at every voxel centre.
    pub fn from_fn(grid: Grid, f: impl Fn(Vec3) -> f32 + Sync) -> Result<Self> {
        use rayon::prelude::*;
        grid.validate()?;
        let data: Vec<f32> = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let [i, j, k] = grid.unravel(idx);
                f(grid.voxel_center(i, j, k))
            })
            .collect();
        Self::new(grid, data)
    }

    pub fn with_fill(mut self, fill: f32) -> Self {
        self.fill = fill;
        self
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.linear_index(i, j, k)]
    }

    /// Trilinear interpolation of the eight surrounding voxels. Points outside the
    /// grid return the fill value.
    pub fn sample_trilinear<T: Real>(&self, p: Vector3<T>) -> T {
        let c = self.grid.world_to_voxel(p);
        let d = self.grid.dims;
        let fill = T::lit(self.fill as f64);
        let mut base = [0usize; 3];
        let mut frac = [T::zero(); 3];
        for a in 0..3 {
            let v = c[a];
            let hi = T::lit((d[a] - 1) as f64);
            if !(v >= T::zero() && v <= hi) {
                return fill;
            }
            if d[a] == 1 {
                continue;
            }
            let f = v.floor().min(hi - T::one());
            base[a] = f.to_usize().unwrap_or(0);
            frac[a] = v - f;
        }
        let step = [
            usize::from(d[0] > 1),
            if d[1] > 1 { d[0] } else { 0 },
            if d[2] > 1 { d[0] * d[1] } else { 0 },
        ];
        let i0 = self.grid.linear_index(base[0], base[1], base[2]);
        let v = |o: usize| T::lit(self.data[o] as f64);
        let [fx, fy, fz] = frac;
        let lerp = |a: T, b: T, t: T| a + (b - a) * t;
        let c00 = lerp(v(i0), v(i0 + step[0]), fx);
        let c10 = lerp(v(i0 + step[1]), v(i0 + step[1] + step[0]), fx);
        let c01 = lerp(v(i0 + step[2]), v(i0 + step[2] + step[0]), fx);
        let c11 = lerp(v(i0 + step[2] + step[1]), v(i0 + step[2] + step[1] + step[0]), fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }
}

impl IntensityField for ScalarVolume {
    #[inline]
    fn intensity(&self, p: Vec3) -> f64 {
        self.sample_trilinear(p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub grid: Grid,
    pub data: Vec<u16>,
    /// Name → id. Every id present in `data` must appear here (including background).
    pub labels: BTreeMap<String, u16>,
}

impl LabelVolume {
    pub fn new(grid: Grid, data: Vec<u16>, labels: BTreeMap<String, u16>) -> Result<Self> {
        let v = Self { grid, data, labels };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.data.len() != self.grid.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?}",
                self.data.len(),
                self.grid.dims
            )));
        }
        let known: std::collections::BTreeSet<u16> = self.labels.values().copied().collect();
        if let Some(bad) = self.data.iter().find(|id| !known.contains(id)) {
            return Err(Error::InvalidVolume(format!("label id {bad} missing from label table")));
        }
        Ok(())
    }

    pub fn id(&self, name: &str) -> Result<u16> {
        self.labels.get(name).copied().ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    /// Label at the voxel nearest to `p`; `None` outside the grid.
    pub fn label_at(&self, p: Vec3) -> Option<u16> {
        self.grid.nearest_voxel(p).map(|[i, j, k]| self.data[self.grid.linear_index(i, j, k)])
    }

    /// Linear indices of every voxel carrying `id`.
    pub fn voxels_with(&self, id: u16) -> Vec<usize> {
        self.data.iter().enumerate().filter(|(_, &v)| v == id).map(|(i, _)| i).collect()
    }
}

/// Either kind of volume, as returned by [`load_volume`].
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    Scalar(ScalarVolume),
    Label(LabelVolume),
}

impl AnyVolume {
    pub fn into_scalar(self) -> Result<ScalarVolume> {
        match self {
            AnyVolume::Scalar(v) => Ok(v),
            AnyVolume::Label(_) => Err(Error::InvalidVolume("expected an f32 volume, found u16 labels".into())),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            AnyVolume::Label(v) => Ok(v),
            AnyVolume::Scalar(_) => Err(Error::InvalidVolume("expected a u16 label volume, found f32".into())),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    dtype: String,
    payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<BTreeMap<String, u16>>,
}

fn payload_name(header_path: &Path) -> String {
    let stem = header_path.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    format!("{stem}.raw")
}

fn write_header(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let payload_path = dir.join(&header.payload);
    fs::write(&payload_path, payload).map_err(|e| Error::io(&payload_path, e))?;
    let text = serde_json::to_string_pretty(header)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_scalar(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        dims: vol.grid.dims,
        spacing_mm: vol.grid.spacing.to_array(),
        origin_mm: vol.grid.origin.to_array(),
        dtype: "f32".into(),
        payload: payload_name(path),
        labels: None,
    };
    let bytes: Vec<u8> = vol.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_header(path, &header, &bytes)
}

pub fn save_labels(vol: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        dims: vol.grid.dims,
        spacing_mm: vol.grid.spacing.to_array(),
        origin_mm: vol.grid.origin.to_array(),
        dtype: "u16".into(),
        payload: payload_name(path),
        labels: Some(vol.labels.clone()),
    };
    let bytes: Vec<u8> = vol.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_header(path, &header, &bytes)
}

pub fn save_volume(vol: &AnyVolume, path: impl AsRef<Path>) -> Result<()> {
    match vol {
        AnyVolume::Scalar(v) => save_scalar(v, path),
        AnyVolume::Label(v) => save_labels(v, path),
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::Header(e.to_string()))?;
    let grid = Grid {
        dims: header.dims,
        spacing: Vec3::from_array(header.spacing_mm),
        origin: Vec3::from_array(header.origin_mm),
    };
    grid.validate().map_err(|e| Error::Header(e.to_string()))?;
    let elem = match header.dtype.as_str() {
        "f32" => 4,
        "u16" => 2,
        other => return Err(Error::UnknownDtype(other.to_string())),
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let payload_path = dir.join(&header.payload);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected = grid.len() * elem;
    if bytes.len() != expected {
        return Err(Error::PayloadSize { expected, found: bytes.len() });
    }
    if elem == 4 {
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(AnyVolume::Scalar(ScalarVolume::new(grid, data)?))
    } else {
        let data = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        let labels = header.labels.ok_or_else(|| Error::Header("u16 volume without `labels` table".into()))?;
        Ok(AnyVolume::Label(LabelVolume::new(grid, data, labels)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(n: usize) -> Grid {
        Grid::new([n, n, n], Vec3::splat(1.0), Vec3::zeros()).unwrap()
    }

    #[test]
    fn constant_volume_samples_constant() {
        let v = ScalarVolume::filled(unit_grid(4), 7.0).unwrap();
        assert_eq!(v.sample_trilinear(Vec3::new(1.3, 2.7, 0.2)), 7.0);
    }

    #[test]
    fn voxel_centre_returns_voxel_value() {
        let g = unit_grid(4);
        let v = ScalarVolume::from_fn(g, |p| (p.x + 10.0 * p.y + 100.0 * p.z) as f32).unwrap();
        assert_eq!(v.sample_trilinear(Vec3::new(2.0, 1.0, 3.0)), 312.0);
        assert_eq!(v.sample_trilinear(Vec3::new(3.0, 3.0, 3.0)), v.at(3, 3, 3) as f64);
    }

    #[test]
    fn midpoint_of_x_field_is_exact() {
        let g = Grid::new([5, 3, 3], Vec3::new(2.0, 1.0, 1.0), Vec3::new(-3.0, 0.0, 0.0)).unwrap();
        let v = ScalarVolume::from_fn(g, |p| p.x as f32).unwrap();
        assert_eq!(v.sample_trilinear(Vec3::new(0.0, 1.0, 1.0)), 0.0);
        assert!((v.sample_trilinear(Vec3::new(2.0, 0.5, 1.5)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn outside_returns_fill() {
        let v = ScalarVolume::filled(unit_grid(3), 1.0).unwrap().with_fill(-5.0);
        assert_eq!(v.sample_trilinear(Vec3::new(-0.01, 1.0, 1.0)), -5.0);
        assert_eq!(v.sample_trilinear(Vec3::new(1.0, 2.01, 1.0)), -5.0);
        assert_eq!(v.sample_trilinear(Vec3::new(2.0, 2.0, 2.0)), 1.0);
    }

    #[test]
    fn world_voxel_examples() {
        let g = unit_grid(8);
        assert_eq!(g.world_to_voxel(Vec3::new(3.0, 4.0, 5.0)), Vec3::new(3.0, 4.0, 5.0));
        let g = Grid::new([8, 8, 8], Vec3::new(2.0, 1.0, 1.0), Vec3::new(10.0, 0.0, 0.0)).unwrap();
        assert_eq!(g.world_to_voxel(Vec3::new(14.0, 0.0, 0.0)), Vec3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new([0, 1, 1], Vec3::splat(1.0), Vec3::zeros()).is_err());
        assert!(Grid::new([1, 1, 1], Vec3::new(1.0, 0.0, 1.0), Vec3::zeros()).is_err());
        assert!(ScalarVolume::new(unit_grid(2), vec![0.0; 7]).is_err());
        assert!(ScalarVolume::new(unit_grid(1), vec![f32::NAN]).is_err());
    }

    #[test]
    fn payload_size_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let v = ScalarVolume::filled(unit_grid(2), 1.0).unwrap();
        let path = dir.path().join("v.json");
        save_scalar(&v, &path).unwrap();
        fs::write(dir.path().join("v.raw"), vec![0u8; 7 * 4]).unwrap();
        match load_volume(&path) {
            Err(Error::PayloadSize { expected: 32, found: 28 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_dtype_and_malformed_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.json");
        fs::write(&p, r#"{"dims":[1,1,1],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"f64","payload":"h.raw"}"#)
            .unwrap();
        assert!(matches!(load_volume(&p), Err(Error::UnknownDtype(_))));
        fs::write(&p, r#"{"dims":[1,1]}"#).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Header(_))));
    }

    #[test]
    fn label_id_absent_from_table_is_rejected() {
        let mut labels = BTreeMap::new();
        labels.insert("background".to_string(), 0u16);
        let err = LabelVolume::new(unit_grid(2), vec![0, 0, 0, 3, 0, 0, 0, 0], labels.clone());
        assert!(err.is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let ok = LabelVolume::new(unit_grid(2), vec![0; 8], labels).unwrap();
        save_labels(&ok, &p).unwrap();
        // Corrupt the payload so id 3 appears.
        let mut raw = fs::read(dir.path().join("m.raw")).unwrap();
        raw[6] = 3;
        fs::write(dir.path().join("m.raw"), raw).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::InvalidVolume(_))));
    }
}
