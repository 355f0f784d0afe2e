use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use super::{DataError, Result};
use crate::anchors::Box3D;
use crate::metrics::model_diameter;

/// Triangle mesh of one object class, millimetres, object frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub class_id: usize,
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    /// Per-vertex RGB in [0, 1]; empty when the model has no colour.
    pub colors: Vec<[f32; 3]>,
    pub diameter: f64,
    pub symmetric: bool,
}

impl Mesh {
    pub fn new(class_id: usize, vertices: Vec<Vector3<f64>>, faces: Vec<[u32; 3]>, colors: Vec<[f32; 3]>) -> Self {
        let diameter = model_diameter(&vertices);
        Self {
            class_id,
            vertices,
            faces,
            colors,
            diameter,
            symmetric: false,
        }
    }

    pub fn name(&self) -> String {
        format!("obj_{:06}", self.class_id)
    }

    /// Axis-aligned bounding box of the vertices.
    pub fn bounding_box(&self) -> Box3D {
        let pts: Vec<[f64; 3]> = self.vertices.iter().map(|v| [v.x, v.y, v.z]).collect();
        Box3D::from_points(&pts)
    }

    /// Centred cuboid with `extents` side lengths. Every face is split into
    /// `subdivisions x subdivisions` quads with its own vertices so faces can
    /// carry distinct colours.
    pub fn cuboid(class_id: usize, extents: [f64; 3], subdivisions: usize, face_colors: [[f32; 3]; 6]) -> Self {
        let n = subdivisions.max(1);
        let h = extents.map(|e| e / 2.0);
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        let mut colors = Vec::new();
        // (normal axis, sign, u axis, v axis) with u x v along the outward normal.
        let sides = [
            (0, 1.0, 1, 2),
            (0, -1.0, 2, 1),
            (1, 1.0, 2, 0),
            (1, -1.0, 0, 2),
            (2, 1.0, 0, 1),
            (2, -1.0, 1, 0),
        ];
        for (f, &(axis, sign, ua, va)) in sides.iter().enumerate() {
            let base = vertices.len() as u32;
            for j in 0..=n {
                for i in 0..=n {
                    let mut p = [0.0; 3];
                    p[axis] = sign * h[axis];
                    p[ua] = -h[ua] + extents[ua] * i as f64 / n as f64;
                    p[va] = -h[va] + extents[va] * j as f64 / n as f64;
                    vertices.push(Vector3::new(p[0], p[1], p[2]));
                    colors.push(face_colors[f]);
                }
            }
            let row = (n + 1) as u32;
            for j in 0..n as u32 {
                for i in 0..n as u32 {
                    let a = base + j * row + i;
                    faces.push([a, a + 1, a + row + 1]);
                    faces.push([a, a + row + 1, a + row]);
                }
            }
        }
        Self::new(class_id, vertices, faces, colors)
    }

    pub fn read_ply(path: &Path, class_id: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
        parse_ply(&bytes, class_id).map_err(|msg| DataError::Format {
            file: path.display().to_string(),
            key: "ply".into(),
            message: msg,
        })
    }

    /// Writes ASCII or binary little-endian PLY with float coordinates and, when
    /// present, uchar colours.
    pub fn write_ply(&self, path: &Path, ascii: bool) -> Result<()> {
        let mut out = Vec::new();
        let has_color = self.colors.len() == self.vertices.len() && !self.colors.is_empty();
        let format = if ascii { "ascii" } else { "binary_little_endian" };
        let _ = write!(out, "ply\nformat {format} 1.0\nelement vertex {}\n", self.vertices.len());
        out.extend_from_slice(b"property float x\nproperty float y\nproperty float z\n");
        if has_color {
            out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
        }
        let _ = write!(out, "element face {}\nproperty list uchar int vertex_indices\nend_header\n", self.faces.len());
        let to_u8 = |c: f32| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
        for (i, v) in self.vertices.iter().enumerate() {
            let rgb = has_color.then(|| self.colors[i].map(to_u8));
            if ascii {
                let _ = write!(out, "{} {} {}", v.x as f32, v.y as f32, v.z as f32);
                if let Some(c) = rgb {
                    let _ = write!(out, " {} {} {}", c[0], c[1], c[2]);
                }
                out.push(b'\n');
            } else {
                for c in [v.x, v.y, v.z] {
                    out.extend_from_slice(&(c as f32).to_le_bytes());
                }
                if let Some(c) = rgb {
                    out.extend_from_slice(&c);
                }
            }
        }
        for f in &self.faces {
            if ascii {
                let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
            } else {
                out.push(3);
                for &i in f {
                    out.extend_from_slice(&(i as i32).to_le_bytes());
                }
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        }
        fs::write(path, out).map_err(|e| DataError::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(format!("unknown property type `{other}`")),
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

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

fn parse_ply(bytes: &[u8], class_id: usize) -> std::result::Result<Mesh, String> {
    let header_end = bytes
        .windows(10)
        .position(|w| w == b"end_header")
        .ok_or("missing end_header")?;
    let mut body = header_end + 10;
    while body < bytes.len() && bytes[body] != b'\n' {
        body += 1;
    }
    body += 1;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| "header is not UTF-8")?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing ply magic".into());
    }
    let mut ascii = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => ascii = Some(true),
            ["format", "binary_little_endian", _] => ascii = Some(false),
            ["format", other, _] => return Err(format!("unsupported format `{other}`")),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| format!("bad element count `{count}`"))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, name] => elements
                .last_mut()
                .ok_or("property before element")?
                .props
                .push(Property::List(name.to_string(), Scalar::parse(ct)?, Scalar::parse(it)?)),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or("property before element")?
                .props
                .push(Property::Scalar(name.to_string(), Scalar::parse(ty)?)),
            _ => {}
        }
    }
    let ascii = ascii.ok_or("missing format line")?;
    let data = &bytes[body.min(bytes.len())..];
    let mut tokens = if ascii {
        Some(
            std::str::from_utf8(data)
                .map_err(|_| "ascii body is not UTF-8")?
                .split_whitespace(),
        )
    } else {
        None
    };
    let mut pos = 0usize;
    let mut next = |ty: Scalar| -> std::result::Result<f64, String> {
        match tokens.as_mut() {
            Some(t) => t
                .next()
                .ok_or_else(|| "unexpected end of data".to_string())?
                .parse::<f64>()
                .map_err(|e| e.to_string()),
            None => {
                let n = ty.size();
                if pos + n > data.len() {
                    return Err("unexpected end of data".into());
                }
                let v = ty.read(&data[pos..pos + n]);
                pos += n;
                Ok(v)
            }
        }
    };

    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut faces = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let mut scalars: Vec<(&str, f64)> = Vec::new();
            let mut list: Option<(&str, Vec<f64>)> = None;
            for p in &el.props {
                match p {
                    Property::Scalar(name, ty) => scalars.push((name, next(*ty)?)),
                    Property::List(name, ct, it) => {
                        let n = next(*ct)? as usize;
                        let items = (0..n).map(|_| next(*it)).collect::<std::result::Result<Vec<_>, _>>()?;
                        list = Some((name, items));
                    }
                }
            }
            let get = |key: &str| scalars.iter().find(|(n, _)| *n == key).map(|(_, v)| *v);
            match el.name.as_str() {
                "vertex" => {
                    let (x, y, z) = (get("x"), get("y"), get("z"));
                    let (Some(x), Some(y), Some(z)) = (x, y, z) else {
                        return Err("vertex without x, y, z".into());
                    };
                    vertices.push(Vector3::new(x, y, z));
                    if let (Some(r), Some(g), Some(b)) = (get("red"), get("green"), get("blue")) {
                        colors.push([r as f32 / 255.0, g as f32 / 255.0, b as f32 / 255.0]);
                    }
                }
                "face" => {
                    let Some((_, idx)) = list.filter(|(n, _)| *n == "vertex_indices" || *n == "vertex_index") else {
                        return Err("face without vertex_indices".into());
                    };
                    for k in 1..idx.len().saturating_sub(1) {
                        faces.push([idx[0] as u32, idx[k] as u32, idx[k + 1] as u32]);
                    }
                }
                _ => {}
            }
        }
    }
    if let Some(bad) = faces.iter().flatten().find(|&&i| i as usize >= vertices.len()) {
        return Err(format!("face index {bad} out of range"));
    }
    if colors.len() != vertices.len() {
        colors.clear();
    }
    Ok(Mesh::new(class_id, vertices, faces, colors))
}

#[cfg(test)]
mod tests {
    use super::*;

    const COLORS: [[f32; 3]; 6] = [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 1.0],
        [1.0, 0.0, 1.0],
    ];

    #[test]
    fn cuboid_geometry() {
        let m = Mesh::cuboid(1, [100.0, 60.0, 40.0], 2, COLORS);
        assert_eq!(m.vertices.len(), 6 * 9);
        assert_eq!(m.faces.len(), 6 * 8);
        let b = m.bounding_box();
        assert_eq!(b.corners[0], [-50.0, -30.0, -20.0]);
        assert_eq!(b.corners[7], [50.0, 30.0, 20.0]);
        let d = (100f64.powi(2) + 60f64.powi(2) + 40f64.powi(2)).sqrt();
        assert!((m.diameter - d).abs() < 1e-9);
        // Outward winding: the normal of every face points away from the centre.
        for f in &m.faces {
            let [a, b, c] = f.map(|i| m.vertices[i as usize]);
            let n = (b - a).cross(&(c - a));
            assert!(n.dot(&((a + b + c) / 3.0)) > 0.0);
        }
    }

    #[test]
    fn ply_roundtrip_both_formats() {
        let m = Mesh::cuboid(3, [80.0, 50.0, 30.0], 1, COLORS);
        let dir = tempfile::tempdir().unwrap();
        for ascii in [true, false] {
            let path = dir.path().join(format!("m{ascii}.ply"));
            m.write_ply(&path, ascii).unwrap();
            let back = Mesh::read_ply(&path, 3).unwrap();
            assert_eq!(back.vertices, m.vertices);
            assert_eq!(back.faces, m.faces);
            assert_eq!(back.colors, m.colors);
        }
    }

    #[test]
    fn ply_quads_are_triangulated() {
        let text = b"ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let m = parse_ply(text, 1).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(m.colors.is_empty());
    }

    #[test]
    fn ply_errors_are_reported() {
        assert!(parse_ply(b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n", 1).is_err());
        assert!(parse_ply(b"ply\nformat binary_big_endian 1.0\nend_header\n", 1).is_err());
        assert!(parse_ply(b"not a ply", 1).is_err());
    }
}
