//! Point cloud file formats and the CSV report reader.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud};

const RECORD_BYTES: usize = 16;

/// Decodes KITTI-style scans: little-endian `f32` records `(x, y, z, intensity)`.
/// Intensity is discarded.
pub fn parse_lidar_bin(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::MalformedFile(format!(
            "{} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let points = bytes
        .chunks_exact(RECORD_BYTES)
        .map(|rec| {
            let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]) as f64;
            Point3::new(f(0), f(4), f(8))
        })
        .collect();
    PointCloud::new(points)
}

pub fn load_lidar_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_lidar_bin(&bytes)
}

/// Encodes with zero intensity. Coordinates are narrowed to `f32`.
pub fn encode_lidar_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in cloud.iter() {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_lidar_bin(cloud: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, encode_lidar_bin(cloud)).map_err(|e| Error::io(path, e))
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
    has_list: bool,
}

/// Parses an ASCII PLY file, returning the `x`, `y`, `z` properties of the
/// `vertex` element in file order. Other elements and properties are skipped.
pub fn parse_ply_ascii(bytes: &[u8]) -> Result<PointCloud> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::MalformedFile("PLY file is not UTF-8 text".into()))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::MalformedHeader("missing 'ply' magic".into())),
    }
    let mut format_seen = false;
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut ended = false;
    for (_, line) in lines.by_ref() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => {
                ended = true;
                break;
            }
            ["format", "ascii", _] => format_seen = true,
            ["format", other, ..] => return Err(Error::MalformedHeader(format!("unsupported format '{other}'"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::MalformedHeader(format!("bad element count '{count}'")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    has_list: false,
                });
            }
            ["property", "list", _, _, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::MalformedHeader("property before any element".into()))?;
                el.properties.push(name.to_string());
                el.has_list = true;
            }
            ["property", _ty, name] => {
                elements
                    .last_mut()
                    .ok_or_else(|| Error::MalformedHeader("property before any element".into()))?
                    .properties
                    .push(name.to_string());
            }
            _ => return Err(Error::MalformedHeader(format!("unrecognised header line '{line}'"))),
        }
    }
    if !ended {
        return Err(Error::MalformedHeader("missing end_header".into()));
    }
    if !format_seen {
        return Err(Error::MalformedHeader("missing format line".into()));
    }
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::MalformedHeader("no vertex element".into()))?;
    let vertex = &elements[vertex_pos];
    if vertex.has_list {
        return Err(Error::MalformedHeader("list properties on vertex are not supported".into()));
    }
    let col = |axis: &str| {
        vertex
            .properties
            .iter()
            .position(|p| p == axis)
            .ok_or_else(|| Error::MalformedHeader(format!("vertex has no '{axis}' property")))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
    let width = vertex.properties.len();

    let skip = elements[..vertex_pos].iter().fold(0usize, |a, e| a.saturating_add(e.count));
    for _ in 0..skip {
        if lines.next().is_none() {
            return Err(Error::MalformedFile("file ends before vertex data".into()));
        }
    }
    let mut points = Vec::with_capacity(vertex.count.min(1 << 20));
    for _ in 0..vertex.count {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| Error::MalformedFile(format!("expected {} vertices, found {}", vertex.count, points.len())))?;
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != width {
            return Err(Error::MalformedRecord {
                line: line_no,
                msg: format!("expected {width} values, found {}", fields.len()),
            });
        }
        let value = |c: usize| -> Result<f64> {
            fields[c].parse::<f64>().map_err(|_| Error::MalformedRecord {
                line: line_no,
                msg: format!("'{}' is not a number", fields[c]),
            })
        };
        points.push(Point3::new(value(cx)?, value(cy)?, value(cz)?));
    }
    PointCloud::new(points)
}

pub fn load_ply_ascii(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply_ascii(&bytes)
}

/// Shortest round-trip decimal, so a save/load cycle is bit-exact.
pub fn encode_ply_ascii(cloud: &PointCloud) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    );
    for p in cloud.iter() {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

pub fn save_ply_ascii(cloud: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, encode_ply_ascii(cloud)).map_err(|e| Error::io(path, e))
}

/// Loads `.bin` scans or `.ply` files by extension.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => load_ply_ascii(path),
        Some("bin") => load_lidar_bin(path),
        _ => Err(Error::MalformedFile(format!("{}: expected a .bin or .ply file", path.display()))),
    }
}

pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => save_lidar_bin(cloud, path),
        _ => save_ply_ascii(cloud, path),
    }
}

/// Creates missing parent directories.
pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn csv_to_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::MalformedFile(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::MalformedFile(e.to_string()))
}

/// Reads a report written by [`write_csv`] back into typed rows.
pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(Error::from)
}
