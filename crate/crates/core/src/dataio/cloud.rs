//! PLY (ASCII and binary little-endian) and whitespace XYZ point files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

use super::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(Scalar, String),
    List(Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    /// Byte offset of the body.
    body: usize,
    /// Line number (1-based) of the first body line.
    body_line: usize,
}

fn parse_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(path, "PLY header is not terminated by end_header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| parse_err(path, "PLY header is not valid UTF-8"))?
            .trim_end_matches('\r')
            .trim();
        pos += end + 1;
        line_no += 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if line_no == 1 {
            if line != "ply" {
                return Err(parse_err(path, "missing `ply` magic line"));
            }
            continue;
        }
        match toks.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                format = Some(match toks.get(1).copied() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    other => return Err(parse_err(path, format!("unsupported PLY format {other:?}"))),
                });
            }
            Some("element") => {
                let (Some(name), Some(count)) = (toks.get(1), toks.get(2)) else {
                    return Err(parse_err(path, format!("header line {line_no}: malformed element")));
                };
                let count = count
                    .parse()
                    .map_err(|_| parse_err(path, format!("header line {line_no}: bad element count")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, format!("header line {line_no}: property before element")))?;
                let bad = || parse_err(path, format!("header line {line_no}: malformed property"));
                if toks.get(1) == Some(&"list") {
                    let c = toks.get(2).and_then(|t| Scalar::parse(t)).ok_or_else(bad)?;
                    let v = toks.get(3).and_then(|t| Scalar::parse(t)).ok_or_else(bad)?;
                    el.props.push(Property::List(c, v));
                } else {
                    let t = toks.get(1).and_then(|t| Scalar::parse(t)).ok_or_else(bad)?;
                    let name = toks.get(2).ok_or_else(bad)?;
                    el.props.push(Property::Scalar(t, name.to_string()));
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(parse_err(path, format!("header line {line_no}: unknown keyword `{other}`"))),
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| parse_err(path, "PLY header has no format line"))?,
        elements,
        body: pos,
        body_line: line_no + 1,
    })
}

fn xyz_columns(path: &Path, el: &Element) -> Result<[usize; 3]> {
    let find = |axis: &str| {
        el.props
            .iter()
            .position(|p| matches!(p, Property::Scalar(_, n) if n == axis))
            .ok_or_else(|| parse_err(path, format!("vertex element has no `{axis}` property")))
    };
    Ok([find("x")?, find("y")?, find("z")?])
}

fn check_point(path: &Path, row: usize, p: [f64; 3]) -> Result<Vec3> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(Vec3::new(p[0], p[1], p[2]))
    } else {
        Err(Error::BadRow {
            path: path.to_path_buf(),
            row,
            reason: "non-finite coordinate".into(),
        })
    }
}

fn read_ply(path: &Path, bytes: &[u8]) -> Result<Vec<Vec3>> {
    let header = parse_header(path, bytes)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(path, "no vertex element"))?;
    let cols = xyz_columns(path, &header.elements[vi])?;
    let body = &bytes[header.body..];
    let mut points = Vec::with_capacity(header.elements[vi].count);
    match header.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| parse_err(path, "PLY body is not valid UTF-8"))?;
            let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
            for (ei, el) in header.elements.iter().enumerate().take(vi + 1) {
                for _ in 0..el.count {
                    let (ln, line) = lines
                        .next()
                        .ok_or_else(|| parse_err(path, format!("truncated `{}` element", el.name)))?;
                    if ei < vi {
                        continue;
                    }
                    let row = header.body_line + ln;
                    let vals: Vec<&str> = line.split_whitespace().collect();
                    let mut p = [0.0; 3];
                    for (a, &c) in cols.iter().enumerate() {
                        p[a] = vals.get(c).and_then(|t| t.parse::<f64>().ok()).ok_or_else(|| Error::BadRow {
                            path: path.to_path_buf(),
                            row,
                            reason: format!("cannot read column {c}"),
                        })?;
                    }
                    points.push(check_point(path, row, p)?);
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut at = 0usize;
            let truncated = || parse_err(path, "truncated binary PLY body");
            for (ei, el) in header.elements.iter().enumerate().take(vi + 1) {
                for row in 0..el.count {
                    let mut p = [0.0; 3];
                    for (pi, prop) in el.props.iter().enumerate() {
                        match prop {
                            Property::Scalar(t, _) => {
                                let b = body.get(at..at + t.size()).ok_or_else(truncated)?;
                                if ei == vi {
                                    if let Some(a) = cols.iter().position(|&c| c == pi) {
                                        p[a] = t.read_le(b);
                                    }
                                }
                                at += t.size();
                            }
                            Property::List(ct, vt) => {
                                let b = body.get(at..at + ct.size()).ok_or_else(truncated)?;
                                let n = ct.read_le(b) as usize;
                                at += ct.size() + n * vt.size();
                            }
                        }
                    }
                    if ei == vi {
                        points.push(check_point(path, row + 1, p)?);
                    }
                }
            }
            if at > body.len() {
                return Err(truncated());
            }
        }
    }
    Ok(points)
}

fn read_xyz(path: &Path, text: &str) -> Result<Vec<Vec3>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = i + 1;
        let vals: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()).collect();
        if vals.len() < 3 {
            return Err(Error::BadRow {
                path: path.to_path_buf(),
                row,
                reason: format!("expected 3 coordinates, found {}", vals.len()),
            });
        }
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = vals[a].parse().map_err(|_| Error::BadRow {
                path: path.to_path_buf(),
                row,
                reason: format!("`{}` is not a number", vals[a]),
            })?;
        }
        points.push(check_point(path, row, p)?);
    }
    Ok(points)
}

/// Reads points from a `.ply` file or a whitespace-separated XYZ text file
/// (any other extension). Extra columns and PLY properties are ignored.
pub fn load_cloud(path: impl AsRef<Path>) -> Result<Vec<Vec3>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) || bytes.starts_with(b"ply\n") || bytes.starts_with(b"ply\r\n");
    let points = if is_ply {
        read_ply(path, &bytes)?
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| parse_err(path, "file is not valid UTF-8"))?;
        read_xyz(path, text)?
    };
    if points.is_empty() {
        return Err(parse_err(path, "no points"));
    }
    Ok(points)
}

fn ply_header(format: PlyFormat, vertices: usize, faces: Option<usize>) -> String {
    let mut h = String::from("ply\n");
    h.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    let _ = write!(h, "element vertex {vertices}\nproperty double x\nproperty double y\nproperty double z\n");
    if let Some(f) = faces {
        let _ = write!(h, "element face {f}\nproperty list uchar int vertex_indices\n");
    }
    h.push_str("end_header\n");
    h
}

/// Writes points with `f64` coordinates, so reading back is lossless.
pub fn save_ply(path: impl AsRef<Path>, points: &[Vec3], format: PlyFormat) -> Result<()> {
    let mut out = ply_header(format, points.len(), None).into_bytes();
    match format {
        PlyFormat::Ascii => {
            let mut body = String::new();
            for p in points {
                let _ = writeln!(body, "{} {} {}", p.x, p.y, p.z);
            }
            out.extend_from_slice(body.as_bytes());
        }
        PlyFormat::BinaryLittleEndian => {
            for p in points {
                for v in [p.x, p.y, p.z] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    write_atomic(path.as_ref(), &out)
}

pub fn save_xyz(path: impl AsRef<Path>, points: &[Vec3]) -> Result<()> {
    let mut body = String::new();
    for p in points {
        let _ = writeln!(body, "{} {} {}", p.x, p.y, p.z);
    }
    write_atomic(path.as_ref(), body.as_bytes())
}

/// ASCII PLY triangle mesh.
pub fn save_mesh_ply(path: impl AsRef<Path>, vertices: &[Vec3], triangles: &[[usize; 3]]) -> Result<()> {
    let mut s = ply_header(PlyFormat::Ascii, vertices.len(), Some(triangles.len()));
    for v in vertices {
        let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
    }
    for t in triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    write_atomic(path.as_ref(), s.as_bytes())
}

/// Reads the triangle list of an ASCII PLY mesh written by [`save_mesh_ply`].
pub fn load_mesh_ply(path: impl AsRef<Path>) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let header = parse_header(&path, &bytes)?;
    if header.format != PlyFormat::Ascii {
        return Err(parse_err(&path, "only ASCII meshes are supported"));
    }
    let vertices = read_ply(&path, &bytes)?;
    let nv = header.elements.iter().find(|e| e.name == "vertex").map_or(0, |e| e.count);
    let nf = header.elements.iter().find(|e| e.name == "face").map_or(0, |e| e.count);
    let text = std::str::from_utf8(&bytes[header.body..]).map_err(|_| parse_err(&path, "invalid UTF-8"))?;
    let mut faces = Vec::with_capacity(nf);
    for line in text.lines().filter(|l| !l.trim().is_empty()).skip(nv).take(nf) {
        let v: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(&path, format!("bad face line `{line}`"))))
            .collect::<Result<_>>()?;
        if v.len() != 4 || v[0] != 3 {
            return Err(parse_err(&path, format!("non-triangle face `{line}`")));
        }
        faces.push([v[1], v[2], v[3]]);
    }
    Ok((vertices, faces))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_points() -> Vec<Vec3> {
        vec![
            Vec3::new(0.1, -0.2, 0.3),
            Vec3::new(1.0 / 3.0, std::f64::consts::PI, -1e-300),
            Vec3::new(-0.0, 123456.789, 7e22),
        ]
    }

    #[test]
    fn xyz_three_points() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        std::fs::write(&path, "0 0 0\n1.5 2 3\n# comment\n\n-1 -2 -3.25 9 9\n").unwrap();
        let pts = load_cloud(&path).unwrap();
        assert_eq!(pts, vec![Vec3::zeros(), Vec3::new(1.5, 2.0, 3.0), Vec3::new(-1.0, -2.0, -3.25)]);
    }

    #[test]
    fn ply_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for (name, fmt) in [("a.ply", PlyFormat::Ascii), ("b.ply", PlyFormat::BinaryLittleEndian)] {
            let path = dir.path().join(name);
            save_ply(&path, &sample_points(), fmt).unwrap();
            let back = load_cloud(&path).unwrap();
            for (a, b) in back.iter().zip(sample_points()) {
                for k in 0..3 {
                    assert_eq!(a[k].to_bits(), b[k].to_bits());
                }
            }
        }
        let path = dir.path().join("c.xyz");
        save_xyz(&path, &sample_points()).unwrap();
        assert_eq!(load_cloud(&path).unwrap(), sample_points());
    }

    #[test]
    fn nan_row_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        std::fs::write(&path, "0 0 0\n1 2 3\n1 nan 3\n").unwrap();
        match load_cloud(&path) {
            Err(Error::BadRow { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        let path = dir.path().join("bad.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\nNaN 1 1\n",
        )
        .unwrap();
        match load_cloud(&path) {
            Err(Error::BadRow { row, .. }) => assert_eq!(row, 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn float_ply_with_extra_properties_and_faces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment test\nelement vertex 2\nproperty float x\nproperty uchar red\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n".to_vec();
        for (x, r, y, z) in [(1.0f32, 7u8, 2.0f32, 3.0f32), (-1.0, 9, 0.5, 0.25)] {
            bytes.extend_from_slice(&x.to_le_bytes());
            bytes.push(r);
            bytes.extend_from_slice(&y.to_le_bytes());
            bytes.extend_from_slice(&z.to_le_bytes());
        }
        bytes.push(3);
        for i in [0i32, 1, 1] {
            bytes.extend_from_slice(&i.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(load_cloud(&path).unwrap(), vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 0.25)]);
        std::fs::write(&path, &bytes[..bytes.len() - 20]).unwrap();
        assert!(load_cloud(&path).is_err());
    }

    #[test]
    fn empty_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.xyz");
        std::fs::write(&path, "# nothing\n").unwrap();
        assert!(load_cloud(&path).is_err());
        std::fs::write(&path, "1 2\n").unwrap();
        assert!(matches!(load_cloud(&path), Err(Error::BadRow { row: 1, .. })));
        assert!(load_cloud(dir.path().join("missing.xyz")).is_err());
    }

    #[test]
    fn mesh_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.ply");
        let v = sample_points();
        let f = vec![[0, 1, 2], [2, 1, 0]];
        save_mesh_ply(&path, &v, &f).unwrap();
        assert_eq!(load_mesh_ply(&path).unwrap(), (v, f));
    }
}
