//! Plain-text point-cloud and mesh formats: ASCII PLY, OFF, and `x,y,z` CSV.
//! The format is chosen by file extension.

use nalgebra::Vector3;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Ply,
    Off,
    Csv,
}

fn format_of(path: &Path) -> Result<Format> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("ply") => Ok(Format::Ply),
        Some("off") => Ok(Format::Off),
        Some("csv") | Some("xyz") => Ok(Format::Csv),
        _ => Err(Error::format(path, "unsupported extension (expected .ply, .off or .csv)")),
    }
}

/// Vertices and triangle faces as parsed from disk. Polygons with more than
/// three corners are fan-triangulated.
pub type RawMesh = (Vec<Vector3<f64>>, Vec<[usize; 3]>);

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let vertices = match format_of(path)? {
        Format::Ply => parse_ply(path, &text)?.0,
        Format::Off => parse_off(path, &text)?.0,
        Format::Csv => parse_csv(path, &text)?,
    };
    PointCloud::new(vertices).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_mesh_file(path: impl AsRef<Path>) -> Result<RawMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    match format_of(path)? {
        Format::Ply => parse_ply(path, &text),
        Format::Off => parse_off(path, &text),
        Format::Csv => Err(Error::format(path, "CSV files carry no faces")),
    }
}

pub fn write_cloud(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    match format_of(path)? {
        Format::Ply => return write_ply(path, pc),
        Format::Off => {
            let _ = writeln!(out, "OFF\n{} 0 0", pc.len());
            for p in pc.points() {
                let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
            }
        }
        Format::Csv => {
            for p in pc.points() {
                let _ = writeln!(out, "{},{},{}", p.x, p.y, p.z);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes an ASCII PLY with shortest round-trip float formatting, so reading
/// the file back reproduces every coordinate exactly.
pub fn write_ply(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    let mut out = String::with_capacity(64 + 48 * pc.len());
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        pc.len()
    );
    for p in pc.points() {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_f64(path: &Path, tok: &str) -> Result<f64> {
    tok.parse()
        .map_err(|_| Error::format(path, format!("bad number `{tok}`")))
}

fn parse_usize(path: &Path, tok: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::format(path, format!("bad integer `{tok}`")))
}

fn fan(path: &Path, idx: &[usize], n_vertices: usize, faces: &mut Vec<[usize; 3]>) -> Result<()> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= n_vertices) {
        return Err(Error::format(path, format!("face index {bad} out of range")));
    }
    for k in 1..idx.len().saturating_sub(1) {
        faces.push([idx[0], idx[k], idx[k + 1]]);
    }
    Ok(())
}

fn parse_csv(path: &Path, text: &str) -> Result<Vec<Vector3<f64>>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if lineno == 0 && fields.first().is_some_and(|f| f.parse::<f64>().is_err()) {
            continue; // header row
        }
        if fields.len() != 3 {
            return Err(Error::format(path, format!("line {}: expected x,y,z", lineno + 1)));
        }
        out.push(Vector3::new(
            parse_f64(path, fields[0])?,
            parse_f64(path, fields[1])?,
            parse_f64(path, fields[2])?,
        ));
    }
    Ok(out)
}

fn parse_off(path: &Path, text: &str) -> Result<RawMesh> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let mut next = || tokens.next().ok_or_else(|| Error::format(path, "unexpected end of file"));

    // The header may be glued to the counts ("OFF3 4 0" is not valid, but
    // "OFF" followed by counts on the same line is).
    let head = next()?;
    let first_count = match head.strip_prefix("OFF") {
        Some("") => next()?,
        Some(rest) => rest,
        None => return Err(Error::format(path, "missing OFF header")),
    };
    let nv = parse_usize(path, first_count)?;
    let nf = parse_usize(path, next()?)?;
    let _ne = next()?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let x = parse_f64(path, next()?)?;
        let y = parse_f64(path, next()?)?;
        let z = parse_f64(path, next()?)?;
        vertices.push(Vector3::new(x, y, z));
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let k = parse_usize(path, next()?)?;
        let idx = (0..k)
            .map(|_| parse_usize(path, next()?))
            .collect::<Result<Vec<_>>>()?;
        fan(path, &idx, nv, &mut faces)?;
    }
    Ok((vertices, faces))
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

fn parse_ply(path: &Path, text: &str) -> Result<RawMesh> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::format(path, "missing `ply` magic"));
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, "header not terminated"))?
            .trim();
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(Error::format(path, format!("only ASCII PLY is supported, got {other}")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: parse_usize(path, count)?,
                properties: Vec::new(),
            }),
            ["property", .., name] => match elements.last_mut() {
                Some(el) => el.properties.push(name.to_string()),
                None => return Err(Error::format(path, "property before element")),
            },
            _ => return Err(Error::format(path, format!("unrecognised header line `{line}`"))),
        }
    }

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut body = lines.filter(|l| !l.trim().is_empty());
    for el in &elements {
        for _ in 0..el.count {
            let line = body
                .next()
                .ok_or_else(|| Error::format(path, format!("missing {} rows", el.name)))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            match el.name.as_str() {
                "vertex" => {
                    let col = |axis: &str| {
                        el.properties
                            .iter()
                            .position(|p| p == axis)
                            .ok_or_else(|| Error::format(path, format!("vertex has no `{axis}`")))
                    };
                    let (ix, iy, iz) = (col("x")?, col("y")?, col("z")?);
                    let get = |i: usize| {
                        toks.get(i)
                            .ok_or_else(|| Error::format(path, "short vertex row"))
                            .and_then(|t| parse_f64(path, t))
                    };
                    vertices.push(Vector3::new(get(ix)?, get(iy)?, get(iz)?));
                }
                "face" => {
                    let k = parse_usize(path, toks.first().copied().unwrap_or(""))?;
                    if toks.len() < k + 1 {
                        return Err(Error::format(path, "short face row"));
                    }
                    let idx = toks[1..=k]
                        .iter()
                        .map(|t| parse_usize(path, t))
                        .collect::<Result<Vec<_>>>()?;
                    faces.push(idx);
                }
                _ => {}
            }
        }
    }
    let mut tris = Vec::with_capacity(faces.len());
    for f in faces {
        fan(path, &f, vertices.len(), &mut tris)?;
    }
    Ok((vertices, tris))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("lkreg-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn ply_roundtrip_is_exact() {
        let pc = PointCloud::new(vec![
            Vector3::new(0.1, -2.0 / 3.0, 1e-17),
            Vector3::new(std::f64::consts::PI, 5.0, -0.0),
        ])
        .unwrap();
        for name in ["a.ply", "a.csv", "a.off"] {
            let path = tmp(name);
            write_cloud(&path, &pc).unwrap();
            assert_eq!(read_cloud(&path).unwrap(), pc, "{name}");
        }
    }

    #[test]
    fn off_mesh_with_quads() {
        let path = tmp("quad.off");
        fs::write(&path, "OFF\n# a unit square\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n").unwrap();
        let (v, f) = read_mesh_file(&path).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(f, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn ply_mesh_with_extra_properties() {
        let path = tmp("tri.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\ncomment x\nelement vertex 3\nproperty float nx\nproperty float x\nproperty float y\nproperty float z\n\
             element face 1\nproperty list uchar int vertex_indices\nend_header\n9 0 0 0\n9 1 0 0\n9 0 1 0\n3 0 1 2\n",
        )
        .unwrap();
        let (v, f) = read_mesh_file(&path).unwrap();
        assert_eq!(v[1], Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(f, vec![[0, 1, 2]]);
    }

    #[test]
    fn format_errors() {
        let path = tmp("bad.ply");
        fs::write(&path, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        assert!(matches!(read_cloud(&path), Err(Error::Format { .. })));
        let path = tmp("bad.off");
        fs::write(&path, "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n").unwrap();
        assert!(matches!(read_mesh_file(&path), Err(Error::Format { .. })));
        assert!(matches!(read_cloud(tmp("x.txt")), Err(Error::Io(_)) | Err(Error::Format { .. })));
    }

    #[test]
    fn csv_with_header() {
        let path = tmp("h.csv");
        fs::write(&path, "x,y,z\n1,2,3\n\n4,5,6\n").unwrap();
        assert_eq!(read_cloud(&path).unwrap().len(), 2);
    }
}
