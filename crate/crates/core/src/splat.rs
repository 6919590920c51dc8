//! Gaussian-splat world map.
//!
//! Maps arrive as binary little-endian PLY in the usual 3DGS export layout: per-vertex
//! `x y z`, log-space `scale_0..2`, quaternion `rot_0..3` (w, x, y, z), logit
//! `opacity` and DC color `f_dc_0..2`. Loading applies the activations (exp, sigmoid,
//! normalize) and drops low-opacity floaters.
//!
//! For collision purposes every Gaussian is a hard ellipsoid: a position collides
//! with a splat when its Mahalanobis distance, computed with each axis scale inflated
//! by the robot radius, is within `sigma_gate`.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use bitvec::prelude::*;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::sigmoid;

pub const DEFAULT_OPACITY_FLOOR: f64 = 0.05;
pub const DEFAULT_SIGMA_GATE: f64 = 3.0;
pub const DEFAULT_ROBOT_RADIUS: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),
    #[error("vertex property {0:?} missing")]
    MissingProperty(String),
    #[error("PLY body truncated: need {expected} bytes, have {found}")]
    TruncatedBody { expected: usize, found: usize },
    #[error("splat {index}: {reason}")]
    InvalidSplat { index: usize, reason: String },
    #[error("map has no splats")]
    EmptyMap,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("bad occupancy dump: {0}")]
    BadOccupancyDump(String),
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSplat {
    pub mean: Vector3<f64>,
    /// Per-axis standard deviations (m), post-activation.
    pub scale: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub opacity: f64,
    /// Spherical-harmonic DC term.
    pub color: [f64; 3],
}

impl GaussianSplat {
    pub fn max_scale(&self) -> f64 {
        self.scale.max()
    }

    /// Mahalanobis distance of `p` with every axis scale inflated by `inflate`.
    pub fn mahalanobis(&self, p: &Vector3<f64>, inflate: f64) -> f64 {
        let local = self.orientation.inverse_transform_vector(&(p - self.mean));
        local.component_div(&self.scale.add_scalar(inflate)).norm()
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone)]
struct SpatialHash {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl SpatialHash {
    fn key(&self, p: &Vector3<f64>) -> [i64; 3] {
        [
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        ]
    }

    fn build(splats: &[GaussianSplat], cell: f64) -> Self {
        let mut hash = SpatialHash { cell, cells: HashMap::new() };
        for (i, s) in splats.iter().enumerate() {
            let k = hash.key(&s.mean);
            hash.cells.entry(k).or_default().push(i);
        }
        hash
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatMapOptions {
    pub opacity_floor: f64,
    /// Sizes the hash cells; queries work for any radius.
    pub robot_radius: f64,
}

impl Default for SplatMapOptions {
    fn default() -> Self {
        Self { opacity_floor: DEFAULT_OPACITY_FLOOR, robot_radius: DEFAULT_ROBOT_RADIUS }
    }
}

#[derive(Debug, Clone)]
pub struct SplatMap {
    splats: Vec<GaussianSplat>,
    index: SpatialHash,
    bounds: Option<Aabb>,
    max_scale: f64,
}

impl SplatMap {
    /// Indexes splats as given (no opacity filtering).
    pub fn new(splats: Vec<GaussianSplat>, robot_radius: f64) -> Self {
        let max_scale = splats.iter().map(|s| s.max_scale()).fold(0.0, f64::max);
        let cell = (2.0 * (max_scale + robot_radius)).max(1e-3);
        let bounds = splats.first().map(|first| {
            splats.iter().fold(Aabb { min: first.mean, max: first.mean }, |b, s| Aabb {
                min: b.min.inf(&s.mean),
                max: b.max.sup(&s.mean),
            })
        });
        let index = SpatialHash::build(&splats, cell);
        Self { splats, index, bounds, max_scale }
    }

    pub fn splats(&self) -> &[GaussianSplat] {
        &self.splats
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    /// Bounds of the splat means; `None` for an empty map.
    pub fn bounds(&self) -> Option<Aabb> {
        self.bounds
    }

    pub fn max_scale(&self) -> f64 {
        self.max_scale
    }

    pub fn cell_size(&self) -> f64 {
        self.index.cell
    }

    /// Indices (ascending) of splats whose mean is within `r` of `center`.
    pub fn query_radius(&self, center: &Vector3<f64>, r: f64) -> Vec<usize> {
        let Some(bounds) = self.bounds else {
            return Vec::new();
        };
        if !(r >= 0.0) {
            return Vec::new();
        }
        let lo = self.index.key(&(center.add_scalar(-r)).sup(&bounds.min));
        let hi = self.index.key(&(center.add_scalar(r)).inf(&bounds.max));
        let mut out = Vec::new();
        if (0..3).any(|i| lo[i] > hi[i]) {
            return out;
        }
        let span = (0..3).map(|i| (hi[i] - lo[i] + 1) as u128).product::<u128>();
        let r2 = r * r;
        let within = |i: &usize| (self.splats[*i].mean - center).norm_squared() <= r2;
        if span > self.index.cells.len() as u128 {
            // Sparse map relative to the query box: walk occupied cells instead.
            for (k, ids) in &self.index.cells {
                if (0..3).all(|i| k[i] >= lo[i] && k[i] <= hi[i]) {
                    out.extend(ids.iter().filter(|i| within(i)));
                }
            }
        } else {
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        if let Some(ids) = self.index.cells.get(&[x, y, z]) {
                            out.extend(ids.iter().filter(|i| within(i)));
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn collision_check(
        &self,
        position: &Vector3<f64>,
        robot_radius: f64,
        sigma_gate: f64,
        warn_margin: f64,
    ) -> CollisionReport {
        let reach = sigma_gate * (self.max_scale + robot_radius) + warn_margin.max(0.0);
        let mut report = CollisionReport::clear();
        let mut nearest_surface = f64::INFINITY;
        for i in self.query_radius(position, reach) {
            let s = &self.splats[i];
            let m = s.mahalanobis(position, robot_radius);
            if m < report.min_mahalanobis {
                report.min_mahalanobis = m;
                report.nearest_splat = Some(i);
            }
            let surface = if m <= sigma_gate { 0.0 } else { (position - s.mean).norm() * (1.0 - sigma_gate / m) };
            nearest_surface = nearest_surface.min(surface);
        }
        report.colliding = report.min_mahalanobis <= sigma_gate;
        report.alert_level = if report.colliding {
            AlertLevel::Critical
        } else if nearest_surface < warn_margin {
            AlertLevel::Warn
        } else {
            AlertLevel::None
        };
        report
    }

    pub fn build_occupancy(&self, voxel_size: f64, sigma_gate: f64, robot_radius: f64) -> Result<OccupancyGrid, SplatError> {
        let bounds = self.bounds.ok_or(SplatError::EmptyMap)?;
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(SplatError::InvalidParameter(format!("voxel_size {voxel_size}")));
        }
        if !(sigma_gate > 0.0 && robot_radius >= 0.0) {
            return Err(SplatError::InvalidParameter("sigma_gate must be > 0, robot_radius ≥ 0".into()));
        }
        let pad = 2.0 * (self.max_scale + robot_radius);
        let origin = bounds.min.add_scalar(-pad);
        let extent = bounds.max - bounds.min + Vector3::repeat(2.0 * pad);
        let dims = [0, 1, 2].map(|i| ((extent[i] / voxel_size).ceil() as usize).max(1));
        let mut grid = OccupancyGrid::empty(origin, voxel_size, dims);
        for s in &self.splats {
            let reach = sigma_gate * (s.max_scale() + robot_radius);
            let lo = grid.clamped_index(&s.mean.add_scalar(-reach));
            let hi = grid.clamped_index(&s.mean.add_scalar(reach));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let idx = [x, y, z];
                        if !grid.is_occupied(idx) && s.mahalanobis(&grid.center(idx), robot_radius) <= sigma_gate {
                            grid.set_occupied(idx, true);
                        }
                    }
                }
            }
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlertLevel {
    None,
    Warn,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub colliding: bool,
    /// Infinite when no splat is within reach.
    pub min_mahalanobis: f64,
    pub nearest_splat: Option<usize>,
    pub alert_level: AlertLevel,
}

impl CollisionReport {
    pub fn clear() -> Self {
        Self { colliding: false, min_mahalanobis: f64::INFINITY, nearest_splat: None, alert_level: AlertLevel::None }
    }
}

pub fn query_radius(map: &SplatMap, center: &Vector3<f64>, r: f64) -> Vec<usize> {
    map.query_radius(center, r)
}

pub fn collision_check(
    map: &SplatMap,
    position: &Vector3<f64>,
    robot_radius: f64,
    sigma_gate: f64,
    warn_margin: f64,
) -> CollisionReport {
    map.collision_check(position, robot_radius, sigma_gate, warn_margin)
}

pub fn build_occupancy(map: &SplatMap, voxel_size: f64, sigma_gate: f64, robot_radius: f64) -> Result<OccupancyGrid, SplatError> {
    map.build_occupancy(voxel_size, sigma_gate, robot_radius)
}

/// Voxel occupancy; voxel `[x, y, z]` has linear index `x + nx·(y + ny·z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    origin: Vector3<f64>,
    voxel_size: f64,
    dims: [usize; 3],
    occupied: BitVec<u8, Lsb0>,
}

pub const ZSOG_MAGIC: &[u8; 4] = b"ZSOG";

impl OccupancyGrid {
    pub fn empty(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3]) -> Self {
        assert!(voxel_size > 0.0 && dims.iter().all(|&d| d > 0));
        let n = dims[0] * dims[1] * dims[2];
        Self { origin, voxel_size, dims, occupied: bitvec![u8, Lsb0; 0; n] }
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.count_ones()
    }

    pub fn linear(&self, idx: [usize; 3]) -> usize {
        idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])
    }

    pub fn unlinear(&self, i: usize) -> [usize; 3] {
        [i % self.dims[0], (i / self.dims[0]) % self.dims[1], i / (self.dims[0] * self.dims[1])]
    }

    pub fn center(&self, idx: [usize; 3]) -> Vector3<f64> {
        self.origin + Vector3::new(idx[0] as f64 + 0.5, idx[1] as f64 + 0.5, idx[2] as f64 + 0.5) * self.voxel_size
    }

    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for i in 0..3 {
            let f = ((p[i] - self.origin[i]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[i] as f64) {
                return None;
            }
            idx[i] = f as usize;
        }
        Some(idx)
    }

    fn clamped_index(&self, p: &Vector3<f64>) -> [usize; 3] {
        [0, 1, 2].map(|i| {
            let f = ((p[i] - self.origin[i]) / self.voxel_size).floor();
            f.clamp(0.0, (self.dims[i] - 1) as f64) as usize
        })
    }

    pub fn is_occupied(&self, idx: [usize; 3]) -> bool {
        self.occupied[self.linear(idx)]
    }

    pub fn set_occupied(&mut self, idx: [usize; 3], value: bool) {
        let i = self.linear(idx);
        self.occupied.set(i, value);
    }

    /// True when `p` lies inside the grid in a free voxel.
    pub fn is_free_point(&self, p: &Vector3<f64>) -> bool {
        self.voxel_of(p).is_some_and(|idx| !self.is_occupied(idx))
    }

    /// Debug dump: magic, origin (3×f32), voxel size (f32), dims (3×u32), then
    /// occupancy bits packed LSB-first in linear voxel order.
    pub fn to_zsog_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.occupied.as_raw_slice().len());
        out.extend_from_slice(ZSOG_MAGIC);
        for v in self.origin.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(self.voxel_size as f32).to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(self.occupied.as_raw_slice());
        out
    }

    pub fn from_zsog_bytes(bytes: &[u8]) -> Result<Self, SplatError> {
        if bytes.len() < 32 || &bytes[0..4] != ZSOG_MAGIC {
            return Err(SplatError::BadOccupancyDump("missing ZSOG header".into()));
        }
        let f = |at: usize| f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as f64;
        let u = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        let origin = Vector3::new(f(4), f(8), f(12));
        let voxel_size = f(16);
        let dims = [u(20), u(24), u(28)];
        if !(voxel_size > 0.0) || dims.contains(&0) {
            return Err(SplatError::BadOccupancyDump("non-positive voxel size or dims".into()));
        }
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| SplatError::BadOccupancyDump("dims overflow".into()))?;
        let nbytes = n.div_ceil(8);
        if bytes.len() != 32 + nbytes {
            return Err(SplatError::BadOccupancyDump(format!("expected {} bytes, found {}", 32 + nbytes, bytes.len())));
        }
        let mut occupied = BitVec::<u8, Lsb0>::from_slice(&bytes[32..]);
        occupied.truncate(n);
        Ok(Self { origin, voxel_size, dims, occupied })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, ScalarType)>,
}

impl Element {
    fn stride(&self) -> usize {
        self.props.iter().map(|(_, t)| t.size()).sum()
    }
}

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "f_dc_0",
    "f_dc_1", "f_dc_2",
];

fn parse_header(bytes: &[u8]) -> Result<(Vec<Element>, usize), SplatError> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| SplatError::MalformedHeader("no end_header".into()))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| SplatError::MalformedHeader("header is not UTF-8".into()))?;
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
    if lines.next() != Some("ply") {
        return Err(SplatError::MalformedHeader("missing 'ply' signature".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _version] => {
                if *fmt != "binary_little_endian" {
                    return Err(SplatError::MalformedHeader(format!("unsupported format {fmt}")));
                }
                format_ok = true;
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| SplatError::MalformedHeader(format!("bad element count {count:?}")))?;
                elements.push(Element { name: name.to_string(), count, props: Vec::new() });
            }
            ["property", "list", ..] => {
                return Err(SplatError::MalformedHeader("list properties are not supported".into()));
            }
            ["property", ty, name] => {
                let ty = ScalarType::parse(ty).ok_or_else(|| SplatError::MalformedHeader(format!("unknown type {ty:?}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| SplatError::MalformedHeader("property before any element".into()))?
                    .props
                    .push((name.to_string(), ty));
            }
            _ => return Err(SplatError::MalformedHeader(format!("unexpected line {line:?}"))),
        }
    }
    if !format_ok {
        return Err(SplatError::MalformedHeader("missing format line".into()));
    }
    Ok((elements, end + END.len()))
}

/// Parses PLY bytes into activated splats, before opacity filtering.
pub fn parse_ply(bytes: &[u8]) -> Result<Vec<GaussianSplat>, SplatError> {
    let (elements, mut offset) = parse_header(bytes)?;
    let mut vertex = None;
    for e in &elements {
        if e.name == "vertex" {
            vertex = Some(e);
            break;
        }
        offset += e.count * e.stride();
    }
    let vertex = vertex.ok_or_else(|| SplatError::MalformedHeader("no vertex element".into()))?;
    let mut layout = [(0usize, ScalarType::F32); 14];
    for (slot, name) in REQUIRED.iter().enumerate() {
        let mut at = 0;
        let mut found = None;
        for (pname, ty) in &vertex.props {
            if pname == name {
                found = Some((at, *ty));
                break;
            }
            at += ty.size();
        }
        layout[slot] = found.ok_or_else(|| SplatError::MissingProperty(name.to_string()))?;
    }
    let stride = vertex.stride();
    let need = offset + vertex.count * stride;
    if bytes.len() < need {
        return Err(SplatError::TruncatedBody { expected: need, found: bytes.len() });
    }
    let mut splats = Vec::with_capacity(vertex.count);
    for index in 0..vertex.count {
        let row = &bytes[offset + index * stride..offset + (index + 1) * stride];
        let v: [f64; 14] = std::array::from_fn(|i| layout[i].1.read(&row[layout[i].0..]));
        if v.iter().any(|x| !x.is_finite()) {
            return Err(SplatError::InvalidSplat { index, reason: "non-finite property".into() });
        }
        let q = Quaternion::new(v[6], v[7], v[8], v[9]);
        if q.norm() == 0.0 {
            return Err(SplatError::InvalidSplat { index, reason: "zero quaternion".into() });
        }
        let scale = Vector3::new(v[3].exp(), v[4].exp(), v[5].exp());
        if !scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(SplatError::InvalidSplat { index, reason: "scale out of range".into() });
        }
        splats.push(GaussianSplat {
            mean: Vector3::new(v[0], v[1], v[2]),
            scale,
            orientation: UnitQuaternion::from_quaternion(q),
            opacity: sigmoid(v[10]),
            color: [v[11], v[12], v[13]],
        });
    }
    Ok(splats)
}

pub fn load_ply_with(path: impl AsRef<Path>, opts: SplatMapOptions) -> Result<SplatMap, SplatError> {
    let bytes = fs::read(path)?;
    let splats = parse_ply(&bytes)?;
    let kept = splats.into_iter().filter(|s| s.opacity >= opts.opacity_floor).collect();
    Ok(SplatMap::new(kept, opts.robot_radius))
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<SplatMap, SplatError> {
    load_ply_with(path, SplatMapOptions::default())
}

/// Writes splats in the 3DGS PLY layout, inverting the load-time activations.
pub fn write_ply(path: impl AsRef<Path>, splats: &[GaussianSplat]) -> Result<(), SplatError> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    write!(out, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n", splats.len())?;
    for name in REQUIRED.iter() {
        writeln!(out, "property float {name}")?;
    }
    out.write_all(b"end_header\n")?;
    for s in splats {
        let q = s.orientation.quaternion();
        let o = s.opacity.clamp(1e-7, 1.0 - 1e-7);
        let fields = [
            s.mean.x,
            s.mean.y,
            s.mean.z,
            s.scale.x.ln(),
            s.scale.y.ln(),
            s.scale.z.ln(),
            q.w,
            q.i,
            q.j,
            q.k,
            (o / (1.0 - o)).ln(),
            s.color[0],
            s.color[1],
            s.color[2],
        ];
        for f in fields {
            out.write_all(&(f as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}
