//! Binary little-endian PLY point clouds.
//!
//! Reads the `vertex` element (x/y/z as float or double, optional uchar
//! red/green/blue) and skips any other fixed-size properties. Writes x/y/z as
//! float32 plus optional uchar rgb.

use std::io::{BufRead, Read, Write};

use nalgebra::Point3;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        Self { points, colors: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlyError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("header: {0}")]
    Header(String),
    #[error("non-finite coordinate at vertex {0}")]
    NonFinite(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
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

    fn read_f64(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

fn header_err(msg: impl Into<String>) -> PlyError {
    PlyError::Header(msg.into())
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Vec<Element>, PlyError> {
    let mut line = String::new();
    let mut next = |r: &mut R| -> Result<String, PlyError> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(header_err("unexpected end of header"));
        }
        Ok(line.trim_end().to_string())
    };
    if next(r)? != "ply" {
        return Err(header_err("missing 'ply' magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let l = next(r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => {
                return Err(header_err(format!("unsupported format '{other}'")));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| header_err(format!("bad element count '{count}'")))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => {
                let el = elements.last().ok_or_else(|| header_err("property before element"))?;
                if el.name == "vertex" || elements.iter().all(|e| e.name != "vertex") {
                    return Err(header_err("list properties before vertex data are unsupported"));
                }
            }
            ["property", ty, name] => {
                let s = Scalar::parse(ty).ok_or_else(|| header_err(format!("unknown type '{ty}'")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| header_err("property before element"))?
                    .props
                    .push((name.to_string(), s));
            }
            ["end_header"] => break,
            _ => return Err(header_err(format!("unrecognized header line '{l}'"))),
        }
    }
    Ok(elements)
}

pub fn read_ply<R: BufRead>(mut r: R) -> Result<PointCloud, PlyError> {
    let elements = read_header(&mut r)?;
    let mut skip_bytes = 0usize;
    for el in &elements {
        if el.name == "vertex" {
            return read_vertices(&mut r, el, skip_bytes);
        }
        skip_bytes += el.count * el.props.iter().map(|(_, s)| s.size()).sum::<usize>();
    }
    Err(header_err("no vertex element"))
}

fn read_vertices<R: Read>(r: &mut R, el: &Element, skip: usize) -> Result<PointCloud, PlyError> {
    std::io::copy(&mut r.take(skip as u64), &mut std::io::sink())?;
    let mut offsets = Vec::with_capacity(el.props.len());
    let mut stride = 0;
    for (_, s) in &el.props {
        offsets.push(stride);
        stride += s.size();
    }
    let find = |n: &str| el.props.iter().position(|(name, _)| name == n);
    let require = |n: &str| find(n).ok_or_else(|| header_err(format!("vertex lacks '{n}'")));
    let (x, y, z) = (require("x")?, require("y")?, require("z")?);
    for i in [x, y, z] {
        if !matches!(el.props[i].1, Scalar::F32 | Scalar::F64) {
            return Err(header_err("coordinates must be float or double"));
        }
    }
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b))
            if [r, g, b].iter().all(|&i| el.props[i].1 == Scalar::U8) =>
        {
            Some([r, g, b])
        }
        _ => None,
    };

    let mut buf = vec![0u8; stride * el.count];
    r.read_exact(&mut buf)?;
    let mut points = Vec::with_capacity(el.count);
    let mut colors = rgb.map(|_| Vec::with_capacity(el.count));
    for (v, rec) in buf.chunks_exact(stride.max(1)).take(el.count).enumerate() {
        let get = |i: usize| el.props[i].1.read_f64(&rec[offsets[i]..]);
        let p = Point3::new(get(x), get(y), get(z));
        if p.iter().any(|c| !c.is_finite()) {
            return Err(PlyError::NonFinite(v));
        }
        points.push(p);
        if let (Some(c), Some([ri, gi, bi])) = (colors.as_mut(), rgb) {
            c.push([rec[offsets[ri]], rec[offsets[gi]], rec[offsets[bi]]]);
        }
    }
    Ok(PointCloud { points, colors })
}

pub fn write_ply<W: Write>(mut w: W, cloud: &PointCloud) -> Result<(), PlyError> {
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", cloud.points.len())?;
    for c in ["x", "y", "z"] {
        writeln!(w, "property float {c}")?;
    }
    if cloud.colors.is_some() {
        for c in ["red", "green", "blue"] {
            writeln!(w, "property uchar {c}")?;
        }
    }
    writeln!(w, "end_header")?;
    let stride = if cloud.colors.is_some() { 15 } else { 12 };
    let mut out = Vec::with_capacity(stride * cloud.points.len());
    for (i, p) in cloud.points.iter().enumerate() {
        for c in p.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        if let Some(colors) = &cloud.colors {
            out.extend_from_slice(&colors[i]);
        }
    }
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_colors() {
        let cloud = PointCloud {
            points: vec![Point3::new(1.5, -2.0, 0.25), Point3::new(0.0, 3.0, 9.0)],
            colors: Some(vec![[1, 2, 3], [250, 128, 0]]),
        };
        let mut bytes = Vec::new();
        write_ply(&mut bytes, &cloud).unwrap();
        assert_eq!(read_ply(bytes.as_slice()).unwrap(), cloud);
    }

    #[test]
    fn reads_double_coords_and_extra_props() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment x\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nproperty float nx\nend_header\n".to_vec();
        for v in [1.0f64, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&7.0f32.to_le_bytes());
        let c = read_ply(bytes.as_slice()).unwrap();
        assert_eq!(c.points, vec![Point3::new(1.0, 2.0, 3.0)]);
        assert!(c.colors.is_none());
    }

    #[test]
    fn rejects_ascii_and_truncation() {
        let ascii = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(read_ply(&ascii[..]), Err(PlyError::Header(_))));
        let trunc = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n\0\0\0\0";
        assert!(matches!(read_ply(&trunc[..]), Err(PlyError::Io(_))));
    }
}
