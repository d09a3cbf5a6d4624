//! File formats: PNG, raw f32 planes with JSON headers, 16-bit PGM and PLY.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GlsError, Result};
use crate::image::{Image, LabelMap};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 1- or 3-channel image in [0,1] as 8-bit PNG bytes.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    let cursor = std::io::Cursor::new(&mut bytes);
    let encoder = image::codecs::png::PngEncoder::new(cursor);
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(GlsError::InvalidParameter(format!("cannot encode {c}-channel image as png"))),
    };
    let data: Vec<u8> = img.data.iter().map(|v| quantize(*v)).collect();
    image::ImageEncoder::write_image(encoder, &data, img.width as u32, img.height as u32, color)?;
    Ok(bytes)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

pub fn encode_gray8_png(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(std::io::Cursor::new(&mut bytes));
    image::ImageEncoder::write_image(encoder, data, width as u32, height as u32, image::ExtendedColorType::L8)?;
    Ok(bytes)
}

/// Reads an 8-bit PNG as an RGB image in [0,1].
pub fn read_png_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| GlsError::load(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
    Image::from_vec(w as usize, h as usize, 3, data)
}

/// Reads an 8-bit grayscale PNG as booleans (nonzero = set).
pub fn read_png_mask(path: &Path) -> Result<crate::image::Mask> {
    let img = image::open(path).map_err(|e| GlsError::load(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let mut mask = crate::image::Mask::new(w as usize, h as usize);
    for (i, v) in img.as_raw().iter().enumerate() {
        mask.data[i] = *v > 127;
    }
    Ok(mask)
}

pub fn write_mask_png(path: &Path, mask: &crate::image::Mask) -> Result<()> {
    let data: Vec<u8> = mask.data.iter().map(|b| if *b { 255 } else { 0 }).collect();
    std::fs::write(path, encode_gray8_png(mask.width, mask.height, &data)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawHeader {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

/// Writes `<stem>.raw` (f32 LE, row-major, interleaved channels) and `<stem>.json`.
pub fn write_raw(stem: &Path, img: &Image) -> Result<()> {
    let header = RawHeader {
        width: img.width,
        height: img.height,
        channels: img.channels,
    };
    std::fs::write(stem.with_extension("json"), serde_json::to_vec(&header)?)?;
    let mut bytes = Vec::with_capacity(img.data.len() * 4);
    for v in &img.data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(stem.with_extension("raw"), bytes)?;
    Ok(())
}

pub fn read_raw(stem: &Path) -> Result<Image> {
    let header_path = stem.with_extension("json");
    let raw_path = stem.with_extension("raw");
    let header: RawHeader = serde_json::from_slice(&std::fs::read(&header_path).map_err(|e| GlsError::load(&header_path, e))?)
        .map_err(|e| GlsError::load(&header_path, e))?;
    let bytes = std::fs::read(&raw_path).map_err(|e| GlsError::load(&raw_path, e))?;
    let expected = header.width * header.height * header.channels * 4;
    if bytes.len() != expected {
        return Err(GlsError::load(&raw_path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Image::from_vec(header.width, header.height, header.channels, data)
}

/// Binary 16-bit PGM (big-endian samples, as the format requires).
pub fn write_pgm16(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{} {}\n65535\n", labels.width, labels.height)?;
    for v in &labels.data {
        out.write_all(&v.to_be_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_pgm16(path: &Path) -> Result<LabelMap> {
    let bytes = std::fs::read(path).map_err(|e| GlsError::load(path, e))?;
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(GlsError::load(path, "truncated pgm header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "P5" {
        return Err(GlsError::load(path, "not a binary pgm"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| GlsError::load(path, e));
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    let mut labels = LabelMap::new(w, h);
    let wide = maxval > 255;
    let need = w * h * if wide { 2 } else { 1 };
    if bytes.len() < pos + need {
        return Err(GlsError::load(path, "truncated pgm data"));
    }
    for i in 0..w * h {
        labels.data[i] = if wide {
            u16::from_be_bytes([bytes[pos + 2 * i], bytes[pos + 2 * i + 1]])
        } else {
            bytes[pos + i] as u16
        };
    }
    Ok(labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyType {
    U8,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn name(self) -> &'static str {
        match self {
            PlyType::U8 => "uchar",
            PlyType::U16 => "ushort",
            PlyType::I32 => "int",
            PlyType::U32 => "uint",
            PlyType::F32 => "float",
            PlyType::F64 => "double",
        }
    }

    fn parse(s: &str) -> Option<PlyType> {
        Some(match s {
            "uchar" | "uint8" | "char" | "int8" => PlyType::U8,
            "ushort" | "uint16" | "short" | "int16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::U8 => 1,
            PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn write(self, out: &mut impl Write, v: f64) -> std::io::Result<()> {
        match self {
            PlyType::U8 => out.write_all(&[v.round().clamp(0.0, 255.0) as u8]),
            PlyType::U16 => out.write_all(&(v.round().clamp(0.0, 65535.0) as u16).to_le_bytes()),
            PlyType::I32 => out.write_all(&(v.round() as i32).to_le_bytes()),
            PlyType::U32 => out.write_all(&(v.round() as u32).to_le_bytes()),
            PlyType::F32 => out.write_all(&(v as f32).to_le_bytes()),
            PlyType::F64 => out.write_all(&v.to_le_bytes()),
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            PlyType::U8 => b[0] as f64,
            PlyType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Vertex table plus triangles; polygons are fan-triangulated on read.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyData {
    pub properties: Vec<(String, PlyType)>,
    /// Row-major, one row of `properties.len()` values per vertex.
    pub vertices: Vec<f64>,
    pub faces: Vec<[u32; 3]>,
}

impl PlyData {
    pub fn vertex_count(&self) -> usize {
        if self.properties.is_empty() {
            0
        } else {
            self.vertices.len() / self.properties.len()
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.properties.iter().position(|(n, _)| n == name)?;
        let stride = self.properties.len();
        Some(self.vertices.iter().skip(k).step_by(stride).copied().collect())
    }
}

pub fn write_ply(path: &Path, ply: &PlyData) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_ply_to(&mut out, ply)?;
    out.flush()?;
    Ok(())
}

pub fn write_ply_to(out: &mut impl Write, ply: &PlyData) -> Result<()> {
    let n = ply.vertex_count();
    writeln!(out, "ply\nformat binary_little_endian 1.0\nelement vertex {n}")?;
    for (name, ty) in &ply.properties {
        writeln!(out, "property {} {name}", ty.name())?;
    }
    if !ply.faces.is_empty() {
        writeln!(out, "element face {}\nproperty list uchar int vertex_indices", ply.faces.len())?;
    }
    writeln!(out, "end_header")?;
    let stride = ply.properties.len();
    for row in ply.vertices.chunks(stride.max(1)) {
        for ((_, ty), v) in ply.properties.iter().zip(row) {
            ty.write(out, *v)?;
        }
    }
    for f in &ply.faces {
        out.write_all(&[3u8])?;
        for i in f {
            out.write_all(&(*i as i32).to_le_bytes())?;
        }
    }
    Ok(())
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, PlyType)>,
    list: Option<(PlyType, PlyType)>,
}

pub fn read_ply(path: &Path) -> Result<PlyData> {
    let file = File::open(path).map_err(|e| GlsError::load(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |msg: &str| GlsError::load(path, msg.to_string());
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim() != "ply" {
        return Err(bad("missing ply magic"));
    }
    let mut binary = true;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(bad("unterminated header"));
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", _] => binary = true,
            ["format", "ascii", _] => binary = false,
            ["format", ..] => return Err(bad("unsupported ply format")),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad("bad element count"))?,
                props: Vec::new(),
                list: None,
            }),
            ["property", "list", ct, it, _] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element"))?;
                let ct = PlyType::parse(ct).ok_or_else(|| bad("bad list type"))?;
                let it = PlyType::parse(it).ok_or_else(|| bad("bad list type"))?;
                el.list = Some((ct, it));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element"))?;
                el.props.push((name.to_string(), PlyType::parse(ty).ok_or_else(|| bad("bad property type"))?));
            }
            _ => {}
        }
    }
    let mut data = PlyData::default();
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    let mut pos = 0usize;
    let mut words = std::str::from_utf8(if binary { &[] } else { &rest[..] })
        .map_err(|_| bad("invalid ascii body"))?
        .split_whitespace();
    let mut next_value = |ty: PlyType, pos: &mut usize| -> Result<f64> {
        if binary {
            let s = ty.size();
            if *pos + s > rest.len() {
                return Err(bad("truncated body"));
            }
            let v = ty.read(&rest[*pos..*pos + s]);
            *pos += s;
            Ok(v)
        } else {
            words
                .next()
                .and_then(|w| w.parse::<f64>().ok())
                .ok_or_else(|| bad("truncated ascii body"))
        }
    };
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        if is_vertex {
            data.properties = el.props.clone();
        }
        for _ in 0..el.count {
            for (_, ty) in &el.props {
                let v = next_value(*ty, &mut pos)?;
                if is_vertex {
                    data.vertices.push(v);
                }
            }
            if let Some((ct, it)) = el.list {
                let n = next_value(ct, &mut pos)? as usize;
                let mut idx = Vec::with_capacity(n);
                for _ in 0..n {
                    idx.push(next_value(it, &mut pos)? as u32);
                }
                if is_face {
                    for k in 1..n.saturating_sub(1) {
                        data.faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
            }
        }
    }
    let nv = data.vertex_count() as u32;
    if data.faces.iter().any(|f| f.iter().any(|i| *i >= nv)) {
        return Err(bad("face index out of range"));
    }
    Ok(data)
}
