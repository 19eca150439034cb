//! PLY reader/writer for the vertex subset used by the toolkit.
//!
//! Reading accepts ASCII, binary little-endian and binary big-endian files
//! with any scalar property types; list properties and non-vertex elements
//! are skipped. Writing emits `x,y,z:float32`, `red,green,blue:uint8` and,
//! when present, `label:uint8` and `saliency:float32`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::PointCloud;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PlyEncoding {
    #[default]
    BinaryLittleEndian,
    Ascii,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
    BinaryBe,
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

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }

    /// Full-scale value used when an integer color channel is normalized.
    fn int_max(self) -> f64 {
        match self {
            Scalar::I8 => i8::MAX as f64,
            Scalar::U8 => u8::MAX as f64,
            Scalar::I16 => i16::MAX as f64,
            Scalar::U16 => u16::MAX as f64,
            Scalar::I32 => i32::MAX as f64,
            Scalar::U32 => u32::MAX as f64,
            Scalar::F32 | Scalar::F64 => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    format: Format,
    elements: Vec<Element>,
}

fn parse_header<R: BufRead>(reader: &mut R, ctx: &str) -> Result<Header> {
    let mut line = String::new();
    let next_line = |reader: &mut R, line: &mut String| -> Result<bool> {
        line.clear();
        let n = reader
            .read_line(line)
            .map_err(|e| Error::parse(ctx, format!("header: {e}")))?;
        Ok(n > 0)
    };
    if !next_line(reader, &mut line)? || line.trim_end() != "ply" {
        return Err(Error::parse(ctx, "header: missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        if !next_line(reader, &mut line)? {
            return Err(Error::parse(ctx, "header: missing end_header"));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    "binary_big_endian" => Format::BinaryBe,
                    other => {
                        return Err(Error::parse(ctx, format!("header: unknown format '{other}'")))
                    }
                });
            }
            ["element", name, count] => {
                let count = count.parse().map_err(|_| {
                    Error::parse(ctx, format!("header: bad count '{count}' for element '{name}'"))
                })?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", count, item, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(ctx, "header: property before element"))?;
                let (Some(count), Some(item)) = (Scalar::parse(count), Scalar::parse(item)) else {
                    return Err(Error::parse(ctx, format!("header: bad list property in '{}'", el.name)));
                };
                el.properties.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(ctx, "header: property before element"))?;
                let ty = Scalar::parse(ty).ok_or_else(|| {
                    Error::parse(ctx, format!("header: unknown type '{ty}' for property '{name}'"))
                })?;
                el.properties.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            _ => {
                return Err(Error::parse(
                    ctx,
                    format!("header: unrecognized line '{}'", line.trim_end()),
                ))
            }
        }
    }
    let format = format.ok_or_else(|| Error::parse(ctx, "header: missing format line"))?;
    Ok(Header { format, elements })
}

/// Sequential value source over the body of a PLY file.
enum Body {
    Ascii { tokens: Vec<String>, pos: usize },
    Binary { bytes: Vec<u8>, pos: usize, big_endian: bool },
}

impl Body {
    fn read(&mut self, ty: Scalar, ctx: &str, what: &dyn Fn() -> String) -> Result<f64> {
        match self {
            Body::Ascii { tokens, pos } => {
                let tok = tokens
                    .get(*pos)
                    .ok_or_else(|| Error::parse(ctx, format!("{}: unexpected end of data", what())))?;
                *pos += 1;
                // A float token is the shortest text for an f32, so it must be read back as one.
                let v = if ty == Scalar::F32 {
                    tok.parse::<f32>().ok().map(f64::from)
                } else if ty.is_float() {
                    tok.parse::<f64>().ok()
                } else {
                    tok.parse::<i64>().ok().map(|v| v as f64)
                };
                v.ok_or_else(|| Error::parse(ctx, format!("{}: cannot parse '{tok}'", what())))
            }
            Body::Binary {
                bytes,
                pos,
                big_endian,
            } => {
                let n = ty.size();
                let raw = bytes
                    .get(*pos..*pos + n)
                    .ok_or_else(|| Error::parse(ctx, format!("{}: unexpected end of data", what())))?;
                *pos += n;
                let mut buf = [0u8; 8];
                buf[..n].copy_from_slice(raw);
                if *big_endian {
                    buf[..n].reverse();
                }
                Ok(match ty {
                    Scalar::I8 => buf[0] as i8 as f64,
                    Scalar::U8 => buf[0] as f64,
                    Scalar::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
                    Scalar::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
                    Scalar::I32 => i32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
                    Scalar::U32 => u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
                    Scalar::F32 => f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
                    Scalar::F64 => f64::from_le_bytes(buf),
                })
            }
        }
    }

    fn skip_element(&mut self, el: &Element, ctx: &str) -> Result<()> {
        for i in 0..el.count {
            let what = || format!("{} {i}", el.name);
            for p in &el.properties {
                match p {
                    Property::Scalar { ty, .. } => {
                        self.read(*ty, ctx, &what)?;
                    }
                    Property::List { count, item } => {
                        let n = self.read(*count, ctx, &what)?;
                        for _ in 0..n.max(0.0) as usize {
                            self.read(*item, ctx, &what)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reads a PLY vertex set into a [`PointCloud`].
pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply(BufReader::new(file), &path.display().to_string())
}

pub(crate) fn read_ply<R: BufRead>(mut reader: R, ctx: &str) -> Result<PointCloud> {
    let header = parse_header(&mut reader, ctx)?;
    let mut rest = Vec::new();
    reader
        .read_to_end(&mut rest)
        .map_err(|e| Error::parse(ctx, format!("body: {e}")))?;
    let mut body = match header.format {
        Format::Ascii => {
            let text = String::from_utf8(rest)
                .map_err(|_| Error::parse(ctx, "body: ASCII data is not valid UTF-8"))?;
            Body::Ascii {
                tokens: text.split_whitespace().map(str::to_owned).collect(),
                pos: 0,
            }
        }
        Format::BinaryLe | Format::BinaryBe => Body::Binary {
            bytes: rest,
            pos: 0,
            big_endian: header.format == Format::BinaryBe,
        },
    };

    let vertex = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::parse(ctx, "header: no 'vertex' element"))?;
    for el in &header.elements[..vertex] {
        body.skip_element(el, ctx)?;
    }
    let el = &header.elements[vertex];
    let find = |name: &str| {
        el.properties.iter().position(
            |p| matches!(p, Property::Scalar { name: n, .. } if n == name),
        )
    };
    let scalar_ty = |idx: usize| match &el.properties[idx] {
        Property::Scalar { ty, .. } => *ty,
        Property::List { .. } => unreachable!(),
    };
    let xyz = [find("x"), find("y"), find("z")];
    if xyz.iter().any(Option::is_none) {
        return Err(Error::parse(ctx, "vertex: missing x/y/z property"));
    }
    let xyz = xyz.map(Option::unwrap);
    let rgb = [find("red"), find("green"), find("blue")];
    let has_rgb = match rgb.iter().filter(|c| c.is_some()).count() {
        0 => false,
        3 => true,
        _ => return Err(Error::parse(ctx, "vertex: incomplete red/green/blue properties")),
    };
    let label = find("label");
    let saliency = find("saliency");

    let n = el.count;
    if n == 0 {
        return Err(Error::parse(ctx, "vertex: element has zero points"));
    }
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(if has_rgb { n } else { 0 });
    let mut mask = Vec::with_capacity(if label.is_some() { n } else { 0 });
    let mut sal = Vec::with_capacity(if saliency.is_some() { n } else { 0 });
    let mut row = vec![0.0; el.properties.len()];
    for i in 0..n {
        let what = || format!("vertex {i}");
        for (k, p) in el.properties.iter().enumerate() {
            match p {
                Property::Scalar { ty, .. } => row[k] = body.read(*ty, ctx, &what)?,
                Property::List { count, item } => {
                    let c = body.read(*count, ctx, &what)?;
                    for _ in 0..c.max(0.0) as usize {
                        body.read(*item, ctx, &what)?;
                    }
                }
            }
        }
        let p = [row[xyz[0]], row[xyz[1]], row[xyz[2]]];
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(ctx, format!("vertex {i}: non-finite coordinate")));
        }
        positions.push(p);
        if has_rgb {
            let mut c = [0.0; 3];
            for (a, idx) in rgb.iter().enumerate() {
                let idx = idx.unwrap();
                let v = row[idx] / scalar_ty(idx).int_max();
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::parse(ctx, format!("vertex {i}: color channel outside range")));
                }
                c[a] = v;
            }
            colors.push(c);
        }
        if let Some(idx) = label {
            let v = row[idx];
            if v != 0.0 && v != 1.0 {
                return Err(Error::parse(
                    ctx,
                    format!("vertex {i}: label value {v} outside {{0,1}}"),
                ));
            }
            mask.push(v as u8);
        }
        if let Some(idx) = saliency {
            let v = row[idx];
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::parse(ctx, format!("vertex {i}: saliency {v} outside [0,1]")));
            }
            sal.push(v);
        }
    }

    let mut cloud = PointCloud::new(positions, has_rgb.then_some(colors))?;
    if label.is_some() {
        cloud = cloud.with_mask(mask)?;
    }
    if saliency.is_some() {
        cloud = cloud.with_saliency(sal)?;
    }
    Ok(cloud)
}

fn color_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `cloud` to `path`. `color_override` replaces the written colors
/// without touching the cloud.
pub fn save_ply(
    cloud: &PointCloud,
    path: impl AsRef<Path>,
    color_override: Option<&[[f64; 3]]>,
    encoding: PlyEncoding,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(c) = color_override {
        if c.len() != cloud.len() {
            return Err(Error::shape(
                "save_ply",
                format!("{} override colors for {} points", c.len(), cloud.len()),
            ));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_ply(&mut w, cloud, color_override, encoding)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn write_ply<W: Write>(
    w: &mut W,
    cloud: &PointCloud,
    color_override: Option<&[[f64; 3]]>,
    encoding: PlyEncoding,
) -> std::io::Result<()> {
    let colors = color_override.unwrap_or(cloud.colors());
    let format = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply")?;
    writeln!(w, "format {format} 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for p in ["x", "y", "z"] {
        writeln!(w, "property float {p}")?;
    }
    for p in ["red", "green", "blue"] {
        writeln!(w, "property uchar {p}")?;
    }
    if cloud.gt_mask().is_some() {
        writeln!(w, "property uchar label")?;
    }
    if cloud.saliency().is_some() {
        writeln!(w, "property float saliency")?;
    }
    writeln!(w, "end_header")?;

    for i in 0..cloud.len() {
        let p = cloud.positions()[i].map(|v| v as f32);
        let c = colors[i].map(color_byte);
        let label = cloud.gt_mask().map(|m| m[i]);
        let sal = cloud.saliency().map(|s| s[i] as f32);
        match encoding {
            PlyEncoding::Ascii => {
                write!(w, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2])?;
                if let Some(l) = label {
                    write!(w, " {l}")?;
                }
                if let Some(s) = sal {
                    write!(w, " {s}")?;
                }
                writeln!(w)?;
            }
            PlyEncoding::BinaryLittleEndian => {
                for v in p {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(&c)?;
                if let Some(l) = label {
                    w.write_all(&[l])?;
                }
                if let Some(s) = sal {
                    w.write_all(&s.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}
