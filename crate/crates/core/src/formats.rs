//! On-disk formats: PGM images, camera files, voxel volumes and dataset
//! manifests.
//!
//! - Depth map: binary PGM (`P5`), maxval 65535, 16-bit big-endian samples,
//!   value = depth in millimeters, 0 = missing.
//! - Segmentation map: binary PGM (`P5`), maxval 255, labels 0..=K, 255 = void.
//! - Camera: text; line 1 `fx fy cx cy width height`, lines 2-4 rotation
//!   rows, line 5 translation in meters.
//! - Label volume: magic `SSCV`, u32 version=1, u32 X,Y,Z, f32 voxel_size,
//!   3 x f32 origin, then X*Y*Z label bytes, x fastest; little-endian scalars.
//! - Dense float volume: magic `SSCF`, u32 version=1, u32 C,X,Y,Z, then
//!   C*X*Y*Z f32 little-endian, channel fastest.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap, VoxelGridSpec};
use crate::volume::{DenseVolume, LabelVolume, SegmentationMap};

const SSCV_MAGIC: &[u8; 4] = b"SSCV";
const SSCF_MAGIC: &[u8; 4] = b"SSCF";
pub(crate) const FORMAT_VERSION: u32 = 1;

/// Hard cap on voxel counts read from headers, to fail fast on corrupt files.
const MAX_HEADER_ELEMENTS: u64 = 1 << 31;

/// Writes `bytes` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

// ---------------------------------------------------------------- PGM images

struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Scanner<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::parse(self.path, self.pos as u64, message)
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::parse(self.path, start as u64, "non-ASCII header token"))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let start_err_pos = self.pos;
        let tok = self.token()?;
        tok.parse::<usize>().map_err(|_| {
            Error::parse(self.path, start_err_pos as u64, format!("invalid {what}: {tok:?}"))
        })
    }
}

fn parse_pgm_header<'a>(scanner: &mut Scanner<'a>, expect_maxval: usize) -> Result<(usize, usize)> {
    let magic = scanner.token()?;
    if magic != "P5" {
        return Err(scanner.err(format!("expected PGM magic P5, got {magic:?}")));
    }
    let width = scanner.number("width")?;
    let height = scanner.number("height")?;
    let maxval = scanner.number("maxval")?;
    if maxval != expect_maxval {
        return Err(scanner.err(format!("expected maxval {expect_maxval}, got {maxval}")));
    }
    if width == 0 || height == 0 || (width as u64) * (height as u64) > MAX_HEADER_ELEMENTS {
        return Err(scanner.err(format!("implausible image size {width}x{height}")));
    }
    // Exactly one whitespace byte separates the header from the samples.
    if scanner.pos >= scanner.bytes.len() || !scanner.bytes[scanner.pos].is_ascii_whitespace() {
        return Err(scanner.err("missing whitespace after maxval"));
    }
    scanner.pos += 1;
    Ok((width, height))
}

/// Reads a 16-bit depth PGM; sample values are millimeters, 0 = missing.
pub fn read_depth_pgm(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut scanner = Scanner::new(&bytes, path);
    let (width, height) = parse_pgm_header(&mut scanner, 65535)?;
    let data_start = scanner.pos;
    let need = width * height * 2;
    let rest = &bytes[data_start..];
    if rest.len() != need {
        return Err(Error::parse(
            path,
            data_start as u64,
            format!("expected {need} sample bytes, found {}", rest.len()),
        ));
    }
    let mut depths = Vec::with_capacity(width * height);
    for (i, chunk) in rest.chunks_exact(2).enumerate() {
        let mm = u16::from_be_bytes([chunk[0], chunk[1]]);
        let m = mm as f32 / 1000.0;
        if m >= crate::geometry::MAX_DEPTH_M {
            return Err(Error::parse(
                path,
                (data_start + 2 * i) as u64,
                format!("depth {mm} mm exceeds the indoor bound"),
            ));
        }
        depths.push(m);
    }
    DepthMap::new(width, height, depths)
}

/// Writes a depth map as a 16-bit PGM, rounding meters to millimeters.
pub fn write_depth_pgm(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut out = Vec::with_capacity(32 + depth.width * depth.height * 2);
    out.extend_from_slice(format!("P5\n{} {}\n65535\n", depth.width, depth.height).as_bytes());
    for d in depth.data() {
        let mm = (f64::from(*d) * 1000.0).round() as u16;
        out.extend_from_slice(&mm.to_be_bytes());
    }
    write_atomic(path, &out)
}

/// Reads an 8-bit segmentation PGM (labels 0..=K, 255 = void).
pub fn read_segmentation_pgm(path: &Path) -> Result<SegmentationMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut scanner = Scanner::new(&bytes, path);
    let (width, height) = parse_pgm_header(&mut scanner, 255)?;
    let data_start = scanner.pos;
    let rest = &bytes[data_start..];
    if rest.len() != width * height {
        return Err(Error::parse(
            path,
            data_start as u64,
            format!("expected {} sample bytes, found {}", width * height, rest.len()),
        ));
    }
    SegmentationMap::new(width, height, rest.to_vec())
}

pub fn write_segmentation_pgm(path: &Path, seg: &SegmentationMap) -> Result<()> {
    let mut out = Vec::with_capacity(32 + seg.width * seg.height);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", seg.width, seg.height).as_bytes());
    out.extend_from_slice(seg.labels());
    write_atomic(path, &out)
}

// --------------------------------------------------------------- camera file

/// Reads intrinsics and camera-to-world pose from the 5-line text format.
pub fn read_camera(path: &Path) -> Result<(CameraIntrinsics, CameraPose)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0u64;
    let mut rows: Vec<(u64, Vec<f64>)> = Vec::new();
    for line in text.lines() {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut values = Vec::new();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| {
                Error::parse(path, line_offset, format!("invalid number {tok:?}"))
            })?;
            values.push(v);
        }
        rows.push((line_offset, values));
    }
    if rows.len() != 5 {
        return Err(Error::parse(
            path,
            0,
            format!("expected 5 lines (intrinsics, 3 rotation rows, translation), got {}", rows.len()),
        ));
    }
    let expect = [6usize, 3, 3, 3, 3];
    for (i, (line_offset, values)) in rows.iter().enumerate() {
        if values.len() != expect[i] {
            return Err(Error::parse(
                path,
                *line_offset,
                format!("line {} needs {} values, got {}", i + 1, expect[i], values.len()),
            ));
        }
    }
    let l0 = &rows[0].1;
    let (width, height) = (l0[4], l0[5]);
    if width.fract() != 0.0 || height.fract() != 0.0 || width < 1.0 || height < 1.0 {
        return Err(Error::parse(path, rows[0].0, format!("bad image size {width} x {height}")));
    }
    let intr = CameraIntrinsics::new(l0[0], l0[1], l0[2], l0[3], width as usize, height as usize)
        .map_err(|e| Error::parse(path, rows[0].0, e.to_string()))?;
    let rotation = Matrix3::new(
        rows[1].1[0], rows[1].1[1], rows[1].1[2],
        rows[2].1[0], rows[2].1[1], rows[2].1[2],
        rows[3].1[0], rows[3].1[1], rows[3].1[2],
    );
    let translation = Vector3::new(rows[4].1[0], rows[4].1[1], rows[4].1[2]);
    let pose = CameraPose::new(rotation, translation)
        .map_err(|e| Error::parse(path, rows[1].0, e.to_string()))?;
    Ok((intr, pose))
}

pub fn write_camera(path: &Path, intr: &CameraIntrinsics, pose: &CameraPose) -> Result<()> {
    let mut s = String::new();
    s.push_str(&format!(
        "{} {} {} {} {} {}\n",
        intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height
    ));
    for r in 0..3 {
        s.push_str(&format!(
            "{} {} {}\n",
            pose.rotation[(r, 0)],
            pose.rotation[(r, 1)],
            pose.rotation[(r, 2)]
        ));
    }
    s.push_str(&format!(
        "{} {} {}\n",
        pose.translation.x, pose.translation.y, pose.translation.z
    ));
    write_atomic(path, s.as_bytes())
}

// ------------------------------------------------------------- voxel volumes

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                self.path,
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub(crate) fn check_magic(cursor: &mut Cursor, magic: &[u8; 4]) -> Result<()> {
    let got = cursor.take(4, "magic")?;
    if got != magic {
        return Err(Error::parse(
            cursor.path,
            0,
            format!("bad magic {:?}, expected {:?}", got, magic),
        ));
    }
    let version = cursor.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::parse(
            cursor.path,
            4,
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    Ok(())
}

/// Reads a label volume (`SSCV`).
pub fn read_label_volume(path: &Path) -> Result<LabelVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor::new(&bytes, path);
    check_magic(&mut c, SSCV_MAGIC)?;
    let dims = [c.u32("X")? as usize, c.u32("Y")? as usize, c.u32("Z")? as usize];
    let voxel_size = c.f32("voxel_size")? as f64;
    let origin = [
        c.f32("origin.x")? as f64,
        c.f32("origin.y")? as f64,
        c.f32("origin.z")? as f64,
    ];
    let count = dims.iter().map(|&d| d as u64).product::<u64>();
    if count == 0 || count > MAX_HEADER_ELEMENTS {
        return Err(Error::parse(path, 8, format!("implausible dims {dims:?}")));
    }
    let spec = VoxelGridSpec::new(dims, voxel_size, origin)
        .map_err(|e| Error::parse(path, 8, e.to_string()))?;
    let labels = c.take(count as usize, "labels")?.to_vec();
    if c.pos != bytes.len() {
        return Err(Error::parse(path, c.pos as u64, "trailing bytes after label data"));
    }
    LabelVolume::new(spec, labels).map_err(|e| Error::parse(path, c.pos as u64, e.to_string()))
}

/// Writes a label volume (`SSCV`) atomically.
pub fn write_label_volume(path: &Path, vol: &LabelVolume) -> Result<()> {
    let spec = &vol.spec;
    let mut out = Vec::with_capacity(36 + vol.labels().len());
    out.extend_from_slice(SSCV_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in spec.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(spec.voxel_size as f32).to_le_bytes());
    for o in spec.origin {
        out.extend_from_slice(&(o as f32).to_le_bytes());
    }
    out.extend_from_slice(vol.labels());
    write_atomic(path, &out)
}

/// Reads a dense float volume (`SSCF`): channel count, dims and samples.
///
/// The format carries no grid placement; callers that need world coordinates
/// must supply the grid spec from elsewhere.
pub fn read_dense_volume(path: &Path) -> Result<(usize, [usize; 3], Vec<f32>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut header = [0u8; 24];
    reader
        .read_exact(&mut header)
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor::new(&header, path);
    check_magic(&mut c, SSCF_MAGIC)?;
    let channels = c.u32("C")? as usize;
    let dims = [c.u32("X")? as usize, c.u32("Y")? as usize, c.u32("Z")? as usize];
    let count = (channels as u64) * dims.iter().map(|&d| d as u64).product::<u64>();
    if count == 0 || count > MAX_HEADER_ELEMENTS {
        return Err(Error::parse(path, 8, format!("implausible shape C={channels}, dims {dims:?}")));
    }
    let mut raw = vec![0u8; count as usize * 4];
    reader.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::parse(path, 24 + raw.len() as u64, "trailing bytes after sample data"));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((channels, dims, data))
}

/// Writes a dense float volume (`SSCF`) atomically.
pub fn write_dense_volume(path: &Path, vol: &DenseVolume) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let emit = |r: std::io::Result<()>| r.map_err(|e| Error::io(&tmp, e));
        emit(w.write_all(SSCF_MAGIC))?;
        emit(w.write_all(&FORMAT_VERSION.to_le_bytes()))?;
        emit(w.write_all(&(vol.channels as u32).to_le_bytes()))?;
        for d in vol.spec.dims {
            emit(w.write_all(&(d as u32).to_le_bytes()))?;
        }
        for v in vol.data() {
            emit(w.write_all(&v.to_le_bytes()))?;
        }
        emit(w.flush())?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ------------------------------------------------------------------ manifest

/// One training/evaluation scene; paths are stored as written in the
/// manifest (usually relative to the manifest file).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub depth: PathBuf,
    pub camera: PathBuf,
    pub segmentation: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_labels: Option<PathBuf>,
}

/// A loaded dataset manifest; `dir` anchors the records' relative paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dir: PathBuf,
    pub records: Vec<SceneRecord>,
}

impl DatasetManifest {
    /// Loads and validates a manifest: ids unique, referenced files present.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<SceneRecord> = serde_json::from_str(&text).map_err(|e| Error::Json {
            context: format!("manifest {}", path.display()),
            source: e,
        })?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let manifest = Self { dir, records };
        for rec in &manifest.records {
            for p in [
                Some(manifest.depth_path(rec)),
                Some(manifest.camera_path(rec)),
                Some(manifest.segmentation_path(rec)),
                manifest.gt_labels_path(rec),
            ]
            .into_iter()
            .flatten()
            {
                if !p.is_file() {
                    return Err(Error::invalid(
                        format!("manifest scene {:?}", rec.id),
                        format!("referenced file {} does not exist", p.display()),
                    ));
                }
            }
        }
        let mut ids: Vec<&str> = manifest.records.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != manifest.records.len() {
            return Err(Error::invalid(
                format!("manifest {}", path.display()),
                "duplicate scene ids",
            ));
        }
        Ok(manifest)
    }

    pub fn save(path: &Path, records: &[SceneRecord]) -> Result<()> {
        let json = serde_json::to_string_pretty(records).map_err(|e| Error::Json {
            context: format!("manifest {}", path.display()),
            source: e,
        })?;
        write_atomic(path, json.as_bytes())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn depth_path(&self, rec: &SceneRecord) -> PathBuf {
        self.resolve(&rec.depth)
    }

    pub fn camera_path(&self, rec: &SceneRecord) -> PathBuf {
        self.resolve(&rec.camera)
    }

    pub fn segmentation_path(&self, rec: &SceneRecord) -> PathBuf {
        self.resolve(&rec.segmentation)
    }

    pub fn gt_labels_path(&self, rec: &SceneRecord) -> Option<PathBuf> {
        rec.gt_labels.as_deref().map(|p| self.resolve(p))
    }
}
