//! File formats: OFF meshes, XYZ point clouds, text voxel volumes, the
//! binary grid format, and the CSV / PGM / JSON-lines outputs of the CLI.
//!
//! Grid file layout (little-endian):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `RASF`                           |
//! | 4      | 4    | version, `u32` = 1                     |
//! | 8      | 2    | resolution R, `u16`                    |
//! | 10     | 2    | channels C, `u16`                      |
//! | 12     | 1    | precision: 4 = f32, 8 = f64            |
//! | 13     | 3    | reserved, zero                         |
//! | 16     | ...  | R·R·R·C values, `[ix][iy][iz][c]`      |
//!
//! An R = 16, C = 32 grid stored as f32 is `16 + 4·16³·32 = 524304` bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{TriMesh, VoxelVolume};
use crate::error::{invalid, parse_err, Error, Result};
use crate::field::{EmbeddingMatrix, FieldGrid};
use crate::geometry::{Point3, PointCloud};
use crate::pretrain::{EpochRecord, Matrix, TrainSample};

pub const GRID_MAGIC: &[u8; 4] = b"RASF";
pub const GRID_VERSION: u32 = 1;
pub const GRID_HEADER_LEN: usize = 16;

/// Strips a `#` comment and surrounding whitespace.
fn clean(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

/// Non-empty, comment-stripped lines with 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, clean(l)))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("invalid {what} {tok:?}")))
}

/// Parses an OFF mesh. Polygons with more than three corners are split
/// into a fan around their first corner.
pub fn parse_off(text: &str) -> Result<TriMesh> {
    let mut lines = content_lines(text);
    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("OFF") {
        return Err(parse_err(hline, "expected OFF header"));
    }
    // Counts may follow the keyword on the same line.
    let rest: Vec<&str> = toks.collect();
    let (cline, counts): (usize, Vec<&str>) = if rest.is_empty() {
        let (l, c) = lines.next().ok_or_else(|| parse_err(hline + 1, "missing counts line"))?;
        (l, c.split_whitespace().collect())
    } else {
        (hline, rest)
    };
    if counts.len() < 2 {
        return Err(parse_err(cline, "counts line needs vertex and face counts"));
    }
    let nv: usize = parse_num(counts[0], cline, "vertex count")?;
    let nf: usize = parse_num(counts[1], cline, "face count")?;

    let mut vertices = Vec::with_capacity(nv);
    for i in 0..nv {
        let (l, s) = lines
            .next()
            .ok_or_else(|| parse_err(cline, format!("expected {nv} vertices, found {i}")))?;
        let t: Vec<&str> = s.split_whitespace().collect();
        if t.len() < 3 {
            return Err(parse_err(l, "vertex needs three coordinates"));
        }
        let p = Point3::new(
            parse_num(t[0], l, "coordinate")?,
            parse_num(t[1], l, "coordinate")?,
            parse_num(t[2], l, "coordinate")?,
        )
        .map_err(|_| parse_err(l, "vertex is not finite"))?;
        vertices.push(p);
    }

    let mut faces = Vec::with_capacity(nf);
    for i in 0..nf {
        let (l, s) = lines
            .next()
            .ok_or_else(|| parse_err(cline, format!("expected {nf} faces, found {i}")))?;
        let t: Vec<&str> = s.split_whitespace().collect();
        let n: usize = parse_num(t[0], l, "face size")?;
        if n < 3 {
            return Err(parse_err(l, format!("face has {n} corners")));
        }
        if t.len() < n + 1 {
            return Err(parse_err(l, format!("face declares {n} corners but lists {}", t.len() - 1)));
        }
        let idx: Vec<usize> = t[1..=n]
            .iter()
            .map(|tok| parse_num(tok, l, "vertex index"))
            .collect::<Result<_>>()?;
        if let Some(&bad) = idx.iter().find(|&&v| v >= nv) {
            return Err(parse_err(l, format!("vertex index {bad} out of range (mesh has {nv})")));
        }
        for j in 1..n - 1 {
            let f = [idx[0], idx[j], idx[j + 1]];
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(parse_err(l, "face repeats a vertex"));
            }
            faces.push(f);
        }
    }
    TriMesh::new(vertices, faces)
}

/// Writes a triangle mesh as OFF.
pub fn write_off(mesh: &TriMesh) -> String {
    let mut s = format!("OFF\n{} {} 0\n", mesh.vertices().len(), mesh.faces().len());
    for v in mesh.vertices() {
        let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

/// Whitespace-separated rows of `x y z` or `x y z nx ny nz`.
pub fn parse_xyz(text: &str) -> Result<(PointCloud, Option<Vec<Point3>>)> {
    let mut pts = Vec::new();
    let mut normals = Vec::new();
    let mut width = None;
    for (l, s) in content_lines(text) {
        let v: Vec<f64> = s
            .split_whitespace()
            .map(|t| parse_num(t, l, "number"))
            .collect::<Result<_>>()?;
        if v.len() != 3 && v.len() != 6 {
            return Err(parse_err(l, format!("expected 3 or 6 columns, found {}", v.len())));
        }
        match width {
            None => width = Some(v.len()),
            Some(w) if w != v.len() => {
                return Err(parse_err(l, format!("expected {w} columns like earlier rows, found {}", v.len())))
            }
            _ => {}
        }
        pts.push(Point3::new(v[0], v[1], v[2]).map_err(|_| parse_err(l, "point is not finite"))?);
        if v.len() == 6 {
            normals.push(Point3::new(v[3], v[4], v[5]).map_err(|_| parse_err(l, "normal is not finite"))?);
        }
    }
    if pts.is_empty() {
        return Err(parse_err(1, "no points"));
    }
    let normals = (width == Some(6)).then_some(normals);
    Ok((PointCloud::new(pts)?, normals))
}

pub fn write_xyz(cloud: &PointCloud, normals: Option<&[Point3]>) -> String {
    let mut s = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        match normals {
            Some(n) => {
                let _ = writeln!(s, "{} {} {} {} {} {}", p.x, p.y, p.z, n[i].x, n[i].y, n[i].z);
            }
            None => {
                let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
            }
        }
    }
    s
}

/// `VOXN <N>` then `N²` rows of `N` characters `0`/`1`: one block of `N`
/// rows per z plane, one row per y, one character per x.
pub fn parse_voxels(text: &str) -> Result<VoxelVolume> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (hl, header) = lines.next().ok_or_else(|| parse_err(1, "empty voxel file"))?;
    let mut t = header.split_whitespace();
    if t.next() != Some("VOXN") {
        return Err(parse_err(hl, "expected VOXN header"));
    }
    let n: usize = parse_num(t.next().ok_or_else(|| parse_err(hl, "missing size"))?, hl, "size")?;
    if t.next().is_some() {
        return Err(parse_err(hl, "unexpected tokens after size"));
    }
    // Refuse to allocate more cells than the text could possibly describe.
    if !n.checked_pow(3).is_some_and(|cells| cells <= text.len()) {
        return Err(parse_err(hl, format!("size {n} exceeds the file contents")));
    }
    let mut vol = VoxelVolume::empty(n);
    for iz in 0..n {
        for iy in 0..n {
            let (l, row) = lines
                .next()
                .ok_or_else(|| parse_err(hl, format!("expected {} rows", n * n)))?;
            if row.len() != n {
                return Err(parse_err(l, format!("row has {} characters, expected {n}", row.len())));
            }
            for (ix, ch) in row.bytes().enumerate() {
                match ch {
                    b'0' => {}
                    b'1' => vol.set(ix, iy, iz, true),
                    _ => return Err(parse_err(l, format!("invalid voxel character {:?}", ch as char))),
                }
            }
        }
    }
    if let Some((l, extra)) = lines.find(|(_, s)| !s.trim().is_empty()) {
        return Err(parse_err(l, format!("unexpected trailing data {extra:?}")));
    }
    Ok(vol)
}

pub fn write_voxels(vol: &VoxelVolume) -> String {
    let n = vol.size();
    let mut s = String::with_capacity(8 + n * n * (n + 1));
    let _ = writeln!(s, "VOXN {n}");
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                s.push(if vol.get(ix, iy, iz) { '1' } else { '0' });
            }
            s.push('\n');
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Serialized size of a grid in bytes.
pub fn grid_file_len(resolution: usize, channels: usize, precision: Precision) -> usize {
    GRID_HEADER_LEN + resolution.pow(3) * channels * precision.tag() as usize
}

pub fn encode_grid(grid: &FieldGrid, precision: Precision) -> Result<Vec<u8>> {
    let dim = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| invalid(format!("{what} {v} does not fit the grid file header")))
    };
    let (r, c) = (dim(grid.resolution(), "resolution")?, dim(grid.channels(), "channel count")?);
    let mut out = Vec::with_capacity(grid_file_len(grid.resolution(), grid.channels(), precision));
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.extend_from_slice(&r.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    out.push(precision.tag());
    out.extend_from_slice(&[0, 0, 0]);
    match precision {
        Precision::F32 => grid
            .values()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Precision::F64 => grid
            .values()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes(b[at..at + 2].try_into().unwrap())
}

pub fn decode_grid(bytes: &[u8]) -> Result<(FieldGrid, Precision)> {
    if bytes.len() < GRID_HEADER_LEN {
        return Err(Error::Format(format!(
            "grid file truncated: {} bytes, header needs {GRID_HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..4] != GRID_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = u32_at(bytes, 4);
    if version != GRID_VERSION {
        return Err(Error::Format(format!("unsupported grid version {version}")));
    }
    let r = u16_at(bytes, 8) as usize;
    let c = u16_at(bytes, 10) as usize;
    let precision = match bytes[12] {
        4 => Precision::F32,
        8 => Precision::F64,
        t => return Err(Error::Format(format!("unknown precision tag {t}"))),
    };
    if bytes[13..16] != [0, 0, 0] {
        return Err(Error::Format("reserved header bytes must be zero".into()));
    }
    let expected = r
        .checked_pow(3)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(precision.tag() as usize))
        .and_then(|n| n.checked_add(GRID_HEADER_LEN))
        .ok_or_else(|| Error::Format("grid dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "grid file is {} bytes, expected {expected} for R={r} C={c}",
            bytes.len()
        )));
    }
    let body = &bytes[GRID_HEADER_LEN..];
    let values: Vec<f64> = match precision {
        Precision::F32 => body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        Precision::F64 => body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    };
    let grid = FieldGrid::from_values(r, c, values).map_err(|e| Error::Format(e.to_string()))?;
    Ok((grid, precision))
}

/// Writes `bytes` to a sibling temporary file and renames it into place,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn write_grid(path: &Path, grid: &FieldGrid, precision: Precision) -> Result<()> {
    write_atomic(path, &encode_grid(grid, precision)?)
}

pub fn read_grid(path: &Path) -> Result<FieldGrid> {
    Ok(decode_grid(&fs::read(path)?)?.0)
}

pub fn read_voxels(path: &Path) -> Result<VoxelVolume> {
    parse_voxels(&fs::read_to_string(path)?)
}

pub fn write_voxels_file(path: &Path, vol: &VoxelVolume) -> Result<()> {
    write_atomic(path, write_voxels(vol).as_bytes())
}

/// One comma-separated line per row, shortest round-trip float formatting.
pub fn rows_to_csv<'a>(rows: impl Iterator<Item = &'a [f64]>) -> String {
    let mut s = String::new();
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                s.push(',');
            }
            first = false;
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}

pub fn embedding_csv(m: &EmbeddingMatrix) -> String {
    rows_to_csv(m.iter_rows())
}

pub fn matrix_csv(m: &Matrix) -> String {
    rows_to_csv((0..m.rows).map(|r| m.row(r)))
}

/// Plain (P2) graymap, min-max scaled to 0..=255. Returns the image and the
/// `(min, max)` range used; a constant matrix maps to all zeros.
pub fn matrix_pgm(m: &Matrix) -> (String, (f64, f64)) {
    let lo = m.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut s = format!("P2\n{} {}\n255\n", m.cols, m.rows);
    for r in 0..m.rows {
        let px: Vec<String> = m
            .row(r)
            .iter()
            .map(|&v| {
                let g = if span > 0.0 { ((v - lo) / span * 255.0).round() } else { 0.0 };
                (g as u8).to_string()
            })
            .collect();
        s.push_str(&px.join(" "));
        s.push('\n');
    }
    (s, (lo, hi))
}

/// One JSON object per line: `epoch`, `lr`, `train_loss`, `eval_loss`.
pub fn report_jsonl(records: &[EpochRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("plain struct serializes"));
        s.push('\n');
    }
    s
}

pub const LABELS_FILE: &str = "labels.csv";

/// Dataset directory: `*.xyz` files read in name order, plus an optional
/// `labels.csv` of `file,label` rows.
pub fn read_dataset(dir: &Path) -> Result<Vec<(String, TrainSample)>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "xyz"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(invalid(format!("no .xyz files in {}", dir.display())));
    }
    let labels_path = dir.join(LABELS_FILE);
    let mut labels = std::collections::HashMap::new();
    if labels_path.exists() {
        let text = fs::read_to_string(&labels_path)?;
        for (l, line) in content_lines(&text) {
            let (name, label) = line
                .split_once(',')
                .ok_or_else(|| parse_err(l, "expected file,label"))?;
            if name == "file" {
                continue;
            }
            labels.insert(name.trim().to_string(), parse_num::<usize>(label.trim(), l, "label")?);
        }
    }
    files
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            let (cloud, normals) = parse_xyz(&fs::read_to_string(&p)?)?;
            let label = labels.get(&name).copied();
            Ok((name, TrainSample { cloud, normals, label }))
        })
        .collect()
}
