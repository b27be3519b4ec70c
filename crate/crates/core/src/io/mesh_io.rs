//! ASCII PLY/OBJ meshes and point clouds, plus a raw little-endian f32 dump.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::Vec3;

fn write_text(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ply_header(vertices: usize, faces: Option<usize>) -> String {
    let mut s = String::from("ply\nformat ascii 1.0\n");
    writeln!(s, "element vertex {vertices}").unwrap();
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if let Some(f) = faces {
        writeln!(s, "element face {f}").unwrap();
        s.push_str("property list uchar int vertex_indices\n");
    }
    s.push_str("end_header\n");
    s
}

pub fn write_ply(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut s = ply_header(mesh.vertices.len(), Some(mesh.triangles.len()));
    for v in &mesh.vertices {
        writeln!(s, "{:?} {:?} {:?}", v.x, v.y, v.z).unwrap();
    }
    for t in &mesh.triangles {
        writeln!(s, "3 {} {} {}", t[0], t[1], t[2]).unwrap();
    }
    write_text(path, s)
}

pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut s = String::new();
    for v in &mesh.vertices {
        writeln!(s, "v {:?} {:?} {:?}", v.x, v.y, v.z).unwrap();
    }
    for t in &mesh.triangles {
        writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
    }
    write_text(path, s)
}

/// Writes a mesh as PLY or OBJ depending on the file extension.
pub fn write_mesh(path: &Path, mesh: &TriMesh) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("obj") => write_obj(path, mesh),
        Some(e) if e.eq_ignore_ascii_case("ply") => write_ply(path, mesh),
        _ => Err(Error::Config(format!(
            "{}: mesh output must end in .ply or .obj",
            path.display()
        ))),
    }
}

pub fn write_points_ply(path: &Path, points: &[Vec3]) -> Result<()> {
    let mut s = ply_header(points.len(), None);
    for p in points {
        writeln!(s, "{:?} {:?} {:?}", p.x, p.y, p.z).unwrap();
    }
    write_text(path, s)
}

/// Reads the vertex positions of an ASCII PLY file whose first three vertex
/// properties are `x y z`. Faces and other elements are ignored.
pub fn read_points_ply(path: &Path) -> Result<Vec<Vec3>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Dataset(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("not a PLY file".into()));
    }
    let mut count = None;
    let mut ascii = false;
    let mut in_vertex = false;
    let mut props = Vec::new();
    let mut elements_before = false;
    for line in lines.by_ref() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "ascii", ..] => ascii = true,
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count".into()))?);
                in_vertex = true;
            }
            ["element", ..] => {
                if count.is_none() {
                    elements_before = true;
                }
                in_vertex = false;
            }
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    if !ascii {
        return Err(bad("only ASCII PLY is supported".into()));
    }
    if elements_before {
        return Err(bad("the vertex element must come first".into()));
    }
    let count = count.ok_or_else(|| bad("no vertex element".into()))?;
    if props.len() < 3 || props[..3] != ["x", "y", "z"] {
        return Err(bad("vertex properties must start with x y z".into()));
    }
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| bad("truncated vertex list".into()))?;
        let v: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad vertex coordinate".into()))?;
        if v.len() != 3 {
            return Err(bad("short vertex line".into()));
        }
        points.push(Vec3::new(v[0], v[1], v[2]));
    }
    Ok(points)
}

pub const RAW_MAGIC: &[u8; 8] = b"PGRAWF32";

/// Raw float planes: magic, then `width height channels` as u32 LE, then
/// `channels` planes of `width × height` little-endian f32 values.
pub fn write_raw_f32(path: &Path, width: usize, height: usize, planes: &[Vec<f64>]) -> Result<()> {
    if planes.iter().any(|p| p.len() != width * height) {
        return Err(Error::Dimension("raw plane size differs from width × height".into()));
    }
    let mut buf = Vec::with_capacity(20 + planes.len() * width * height * 4);
    buf.extend_from_slice(RAW_MAGIC);
    for v in [width, height, planes.len()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for plane in planes {
        for &v in plane {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_raw_f32(path: &Path) -> Result<(usize, usize, Vec<Vec<f32>>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let framing = |m: &str| Error::Framing(format!("{}: {m}", path.display()));
    if buf.len() < 20 || &buf[..8] != RAW_MAGIC {
        return Err(framing("missing raw float header"));
    }
    let u = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (u(8), u(12), u(16));
    if buf.len() != 20 + w * h * c * 4 {
        return Err(framing("payload size differs from header"));
    }
    let planes = (0..c)
        .map(|k| {
            (0..w * h)
                .map(|i| {
                    let o = 20 + (k * w * h + i) * 4;
                    f32::from_le_bytes(buf[o..o + 4].try_into().unwrap())
                })
                .collect()
        })
        .collect();
    Ok((w, h, planes))
}
