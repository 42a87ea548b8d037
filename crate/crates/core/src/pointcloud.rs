//! Point cloud and trajectory containers with PLY and TUM text I/O.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Quaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{check_increasing, interpolate_sorted, Pose};

pub type Rgb8 = [u8; 3];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Option<Vec<Rgb8>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vector3<f64>>) -> Self {
        Self {
            positions,
            colors: None,
        }
    }

    pub fn with_colors(positions: Vec<Vector3<f64>>, colors: Vec<Rgb8>) -> Result<Self> {
        if colors.len() != positions.len() {
            return Err(Error::InvalidParameter(format!(
                "{} colors for {} points",
                colors.len(),
                positions.len()
            )));
        }
        Ok(Self {
            positions,
            colors: Some(colors),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
struct Property {
    name: String,
    ty: Scalar,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
    has_list: bool,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8], ctx: &str) -> Result<Header> {
    let mut offset = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[offset..];
        let Some(nl) = rest.iter().position(|&c| c == b'\n') else {
            return Err(Error::parse(ctx, format!("byte {offset}"), "unterminated header"));
        };
        let line = String::from_utf8_lossy(&rest[..nl]).trim_end_matches('\r').to_string();
        offset += nl + 1;
        let done = line.trim() == "end_header";
        lines.push(line);
        if done {
            break;
        }
    }
    if lines.first().map(|l| l.trim()) != Some("ply") {
        return Err(Error::parse(ctx, "line 1", "missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for (n, line) in lines.iter().enumerate().skip(1) {
        let loc = format!("line {}", n + 1);
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] | ["end_header"] => {}
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(Error::parse(ctx, loc, format!("unsupported format `{other}`"))),
                })
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::parse(ctx, &loc, format!("bad element count `{count}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    has_list: false,
                });
            }
            ["property", "list", ..] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(ctx, &loc, "property before element"))?;
                el.has_list = true;
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(ctx, &loc, "property before element"))?;
                let scalar = Scalar::parse(ty).ok_or_else(|| Error::UnsupportedProperty {
                    name: name.to_string(),
                    ty: ty.to_string(),
                })?;
                el.properties.push(Property {
                    name: name.to_string(),
                    ty: scalar,
                });
            }
            _ => return Err(Error::parse(ctx, loc, format!("unrecognized header line `{line}`"))),
        }
    }
    let format = format.ok_or_else(|| Error::parse(ctx, "header", "missing format line"))?;
    Ok(Header {
        format,
        elements,
        body_offset: offset,
    })
}

struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
}

fn vertex_layout(el: &Element) -> Result<VertexLayout> {
    let find = |n: &str| el.properties.iter().position(|p| p.name == n);
    let mut xyz = [0; 3];
    for (k, n) in ["x", "y", "z"].iter().enumerate() {
        let i =
            find(n).ok_or_else(|| Error::parse("PLY header", "element vertex", format!("missing property `{n}`")))?;
        let ty = el.properties[i].ty;
        if !matches!(ty, Scalar::F32 | Scalar::F64) {
            return Err(Error::UnsupportedProperty {
                name: n.to_string(),
                ty: format!("{ty:?}"),
            });
        }
        xyz[k] = i;
    }
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => {
            for &i in &[r, g, b] {
                if el.properties[i].ty != Scalar::U8 {
                    return Err(Error::UnsupportedProperty {
                        name: el.properties[i].name.clone(),
                        ty: format!("{:?}", el.properties[i].ty),
                    });
                }
            }
            Some([r, g, b])
        }
        _ => None,
    };
    Ok(VertexLayout { xyz, rgb })
}

/// Reads an ASCII or binary little-endian PLY file with float `x, y, z` and
/// optional `uchar red, green, blue` vertex properties.
pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes, &path.display().to_string())
}

pub fn parse_ply(bytes: &[u8], ctx: &str) -> Result<PointCloud> {
    let header = parse_header(bytes, ctx)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::parse(ctx, "header", "no vertex element"))?;
    let vertex = &header.elements[vi];
    if vertex.has_list {
        return Err(Error::UnsupportedProperty {
            name: "vertex".into(),
            ty: "list".into(),
        });
    }
    let layout = vertex_layout(vertex)?;
    let n = vertex.count;
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let mut positions = Vec::with_capacity(n);
    let mut colors = layout.rgb.map(|_| Vec::with_capacity(n));
    let body = &bytes[header.body_offset..];

    match header.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|e| {
                Error::parse(
                    ctx,
                    format!("byte {}", header.body_offset + e.valid_up_to()),
                    "invalid UTF-8",
                )
            })?;
            let header_lines = bytes[..header.body_offset].iter().filter(|&&c| c == b'\n').count();
            let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
            for el in &header.elements[..vi] {
                for _ in 0..el.count {
                    lines.next();
                }
            }
            let mut values = vec![0.0f64; vertex.properties.len()];
            for k in 0..n {
                let (ln, line) = lines
                    .next()
                    .ok_or_else(|| Error::parse(ctx, "end of file", format!("expected {n} vertices, found {k}")))?;
                let loc = format!("line {}", header_lines + ln + 1);
                let mut tok = line.split_whitespace();
                for (slot, prop) in values.iter_mut().zip(&vertex.properties) {
                    let t = tok.next().ok_or_else(|| Error::parse(ctx, &loc, "too few values"))?;
                    *slot = t
                        .parse::<f64>()
                        .map_err(|_| Error::parse(ctx, &loc, format!("bad value `{t}` for `{}`", prop.name)))?;
                }
                positions.push(read_xyz(&values, &vertex.properties, &layout));
                if let (Some(c), Some(rgb)) = (colors.as_mut(), layout.rgb) {
                    c.push(rgb.map(|i| values[i] as u8));
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut offset = 0usize;
            for el in &header.elements[..vi] {
                if el.has_list {
                    return Err(Error::UnsupportedProperty {
                        name: el.name.clone(),
                        ty: "list before vertex element".into(),
                    });
                }
                offset += el.count * el.properties.iter().map(|p| p.ty.size()).sum::<usize>();
            }
            let stride: usize = vertex.properties.iter().map(|p| p.ty.size()).sum();
            let offsets: Vec<usize> = vertex
                .properties
                .iter()
                .scan(0, |acc, p| {
                    let o = *acc;
                    *acc += p.ty.size();
                    Some(o)
                })
                .collect();
            let needed = offset + n * stride;
            if body.len() < needed {
                return Err(Error::parse(
                    ctx,
                    format!("byte {}", header.body_offset + body.len()),
                    format!("truncated vertex data: need {needed} bytes, have {}", body.len()),
                ));
            }
            let mut values = vec![0.0f64; vertex.properties.len()];
            for k in 0..n {
                let rec = &body[offset + k * stride..offset + (k + 1) * stride];
                for (i, prop) in vertex.properties.iter().enumerate() {
                    values[i] = prop.ty.read_le(&rec[offsets[i]..]);
                }
                positions.push(read_xyz(&values, &vertex.properties, &layout));
                if let (Some(c), Some(rgb)) = (colors.as_mut(), layout.rgb) {
                    c.push(rgb.map(|i| values[i] as u8));
                }
            }
        }
    }

    let bad: Vec<usize> = positions
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.iter().all(|c| c.is_finite()))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFinite(bad));
    }
    Ok(PointCloud { positions, colors })
}

fn read_xyz(values: &[f64], props: &[Property], layout: &VertexLayout) -> Vector3<f64> {
    // float properties are narrowed so ASCII and binary decode identically
    let get = |i: usize| match props[i].ty {
        Scalar::F32 => values[i] as f32 as f64,
        _ => values[i],
    };
    Vector3::new(get(layout.xyz[0]), get(layout.xyz[1]), get(layout.xyz[2]))
}

/// Writes `float x, y, z` and, when present, `uchar red, green, blue`.
pub fn save_ply(cloud: &PointCloud, path: impl AsRef<Path>, format: PlyFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ply(cloud, format)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_ply(cloud: &PointCloud, format: PlyFormat) -> Result<Vec<u8>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut out = BufWriter::new(Vec::new());
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let io = |e| Error::io("<memory>", e);
    write!(out, "ply\nformat {fmt} 1.0\nelement vertex {}\n", cloud.len()).map_err(io)?;
    out.write_all(b"property float x\nproperty float y\nproperty float z\n")
        .map_err(io)?;
    if cloud.colors.is_some() {
        out.write_all(b"property uchar red\nproperty uchar green\nproperty uchar blue\n")
            .map_err(io)?;
    }
    out.write_all(b"end_header\n").map_err(io)?;
    for (i, p) in cloud.positions.iter().enumerate() {
        let c = cloud.colors.as_ref().map(|c| c[i]);
        match format {
            PlyFormat::Ascii => {
                write!(out, "{} {} {}", p.x as f32, p.y as f32, p.z as f32).map_err(io)?;
                if let Some([r, g, b]) = c {
                    write!(out, " {r} {g} {b}").map_err(io)?;
                }
                out.write_all(b"\n").map_err(io)?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in [p.x, p.y, p.z] {
                    out.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
                }
                if let Some(rgb) = c {
                    out.write_all(&rgb).map_err(io)?;
                }
            }
        }
    }
    out.into_inner().map_err(|e| io(e.into_error()))
}

/// Time-ordered pose samples. Poses follow the TUM convention: the sensor
/// pose expressed in the world frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    samples: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self> {
        check_increasing(&samples)?;
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, Pose)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn start(&self) -> Option<f64> {
        self.samples.first().map(|s| s.0)
    }

    pub fn end(&self) -> Option<f64> {
        self.samples.last().map(|s| s.0)
    }

    pub fn interpolate(&self, t: f64) -> Result<Pose> {
        if self.samples.len() < 2 {
            return Err(Error::InvalidParameter("trajectory needs at least 2 samples".into()));
        }
        interpolate_sorted(&self.samples, t)
    }
}

/// Accepted quaternion norm deviation before a warning is logged.
pub const QUAT_WARN_TOLERANCE: f64 = 1e-3;
/// Quaternion norm deviation above which the line is rejected.
pub const QUAT_ERROR_TOLERANCE: f64 = 1e-1;

/// Reads `t tx ty tz qx qy qz qw` lines; `#` starts a comment line.
pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text, &path.display().to_string())
}

pub fn parse_trajectory(text: &str, ctx: &str) -> Result<Trajectory> {
    let mut samples: Vec<(f64, Pose)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let loc = format!("line {}", n + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::parse(
                ctx,
                loc,
                format!("expected 8 fields, found {}", fields.len()),
            ));
        }
        let mut v = [0.0f64; 8];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f
                .parse()
                .map_err(|_| Error::parse(ctx, &loc, format!("bad number `{f}`")))?;
            if !slot.is_finite() {
                return Err(Error::parse(ctx, &loc, format!("non-finite value `{f}`")));
            }
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        let norm = q.norm();
        let dev = (norm - 1.0).abs();
        if dev > QUAT_ERROR_TOLERANCE {
            return Err(Error::parse(ctx, &loc, format!("quaternion norm {norm} is not unit")));
        }
        if dev > QUAT_WARN_TOLERANCE {
            log::warn!("{ctx} {loc}: quaternion norm {norm} renormalized");
        }
        let t = Vector3::new(v[1], v[2], v[3]);
        // Already-unit quaternions are kept bit-exact.
        let pose = if dev <= 1e-12 {
            Pose::from_unit_parts(q, t)
        } else {
            Pose::from_unit_parts(q / norm, t)
        };
        if let Some((prev, _)) = samples.last() {
            if !(v[0] > *prev) {
                return Err(Error::NonMonotonic {
                    index: samples.len(),
                    time: v[0],
                });
            }
        }
        samples.push((v[0], pose));
    }
    Ok(Trajectory { samples })
}

pub fn encode_trajectory(traj: &Trajectory) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, p) in traj.samples() {
        let q = p.rotation().quaternion();
        let tr = p.translation();
        s.push_str(&format!(
            "{t} {} {} {} {} {} {} {}\n",
            tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w
        ));
    }
    s
}

pub fn save_trajectory(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_trajectory(traj)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_ascii_file() {
        let src = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        let c = parse_ply(src, "mem").unwrap();
        assert_eq!(c.positions, vec![Vector3::zeros()]);
        assert!(c.colors.is_none());
    }

    #[test]
    fn ascii_colors_in_file_order() {
        let src = b"ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n1 2 3 10 20 30\n4 5 6 40 50 60\n";
        let c = parse_ply(src, "mem").unwrap();
        assert_eq!(c.colors.unwrap(), vec![[10, 20, 30], [40, 50, 60]]);
        assert_eq!(c.positions[1], Vector3::new(4.0, 5.0, 6.0));
    }

    #[test]
    fn extra_properties_and_faces_are_skipped() {
        let src = b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float intensity\nproperty float y\nproperty double z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n1 9 2 3\n4 9 5 6\n3 0 1 1\n";
        let c = parse_ply(src, "mem").unwrap();
        assert_eq!(
            c.positions,
            vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(4.0, 5.0, 6.0)]
        );
    }

    #[test]
    fn ply_errors() {
        let short = b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        let e = parse_ply(short, "mem").unwrap_err();
        assert!(matches!(e, Error::Parse { .. }), "{e}");

        let bad = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 abc 0\n";
        let e = parse_ply(bad, "mem").unwrap_err();
        assert!(e.to_string().contains("line 8"), "{e}");

        let ty = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float128 x\nend_header\n";
        assert!(matches!(parse_ply(ty, "mem"), Err(Error::UnsupportedProperty { .. })));

        let int_xyz = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty int x\nproperty int y\nproperty int z\nend_header\n1 2 3\n";
        assert!(matches!(
            parse_ply(int_xyz, "mem"),
            Err(Error::UnsupportedProperty { .. })
        ));

        let empty = b"ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        assert!(matches!(parse_ply(empty, "mem"), Err(Error::EmptyCloud)));

        let nan = b"ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\nnan 0 0\n1 inf 0\n";
        match parse_ply(nan, "mem") {
            Err(Error::NonFinite(idx)) => assert_eq!(idx, vec![1, 2]),
            other => panic!("{other:?}"),
        }

        let big = b"ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n";
        assert!(parse_ply(big, "mem").is_err());
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let cloud = PointCloud::new(vec![Vector3::new(1.0, 2.0, 3.0); 4]);
        let mut bytes = encode_ply(&cloud, PlyFormat::BinaryLittleEndian).unwrap();
        bytes.truncate(bytes.len() - 5);
        let e = parse_ply(&bytes, "mem").unwrap_err();
        assert!(e.to_string().contains("byte"), "{e}");
    }

    #[test]
    fn empty_cloud_cannot_be_saved() {
        let dir = tempfile::tempdir().unwrap();
        let r = save_ply(&PointCloud::default(), dir.path().join("x.ply"), PlyFormat::Ascii);
        assert!(matches!(r, Err(Error::EmptyCloud)));
    }

    #[test]
    fn colored_cloud_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::with_colors(
            vec![
                Vector3::new(0.5, -1.25, 3.0),
                Vector3::new(1e3, 2.0, -7.5),
                Vector3::zeros(),
            ],
            vec![[1, 2, 3], [255, 0, 128], [9, 9, 9]],
        )
        .unwrap();
        for fmt in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let path = dir.path().join("c.ply");
            save_ply(&cloud, &path, fmt).unwrap();
            assert_eq!(load_ply(&path).unwrap(), cloud);
        }
    }

    #[test]
    fn trajectory_examples() {
        let t = parse_trajectory("# header\n0 0 0 0 0 0 0 1\n1 1 0 0 0 0 0 1\n", "mem").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(*t.samples()[1].1.translation(), Vector3::new(1.0, 0.0, 0.0));

        let e = parse_trajectory("0 0 0 0 0 0 1\n", "traj.txt").unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");

        let t = parse_trajectory("0 0 0 0 0 0 0 0.9995\n", "mem").unwrap();
        let q = t.samples()[0].1.rotation().quaternion();
        assert!((q.norm() - 1.0).abs() < 1e-12);

        assert!(parse_trajectory("0 0 0 0 0 0 0 0.8\n", "mem").is_err());
        assert!(matches!(
            parse_trajectory("1 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n", "mem"),
            Err(Error::NonMonotonic { .. })
        ));
    }

    fn f32_coord() -> impl Strategy<Value = f64> {
        (-1e4f32..1e4f32).prop_map(|v| v as f64)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ply_round_trip_is_lossless(
            pts in prop::collection::vec((f32_coord(), f32_coord(), f32_coord(), any::<[u8; 3]>()), 1..60),
            colored in any::<bool>(),
            binary in any::<bool>(),
        ) {
            let positions = pts.iter().map(|p| Vector3::new(p.0, p.1, p.2)).collect();
            let colors = colored.then(|| pts.iter().map(|p| p.3).collect());
            let cloud = PointCloud { positions, colors };
            let fmt = if binary { PlyFormat::BinaryLittleEndian } else { PlyFormat::Ascii };
            let bytes = encode_ply(&cloud, fmt).unwrap();
            let back = parse_ply(&bytes, "mem").unwrap();
            prop_assert_eq!(back.len(), cloud.len());
            prop_assert_eq!(back, cloud);
        }

        #[test]
        fn trajectory_round_trip_is_lossless(
            raw in prop::collection::vec((0.001f64..10.0, prop::array::uniform3(-100.0f64..100.0), prop::array::uniform3(-3.0f64..3.0)), 1..30),
        ) {
            let mut t = 1.7e9;
            let samples: Vec<(f64, Pose)> = raw.iter().map(|(dt, tr, w)| {
                t += dt;
                (t, Pose::from_axis_angle(Vector3::from(*w), Vector3::from(*tr)))
            }).collect();
            let traj = Trajectory::new(samples).unwrap();
            let back = parse_trajectory(&encode_trajectory(&traj), "mem").unwrap();
            prop_assert_eq!(back, traj);
        }
    }
}
