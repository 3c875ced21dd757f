//! Binary and text codecs: PPM/PGM images, coefficient vectors, bases,
//! OBJ meshes and landmark lists.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ColMatrix, CoefficientVector, MorphableBasis, EXPRESSION_DIM, LANDMARK_COUNT, SHAPE_DIM, TEXTURE_DIM};
use crate::render::{Image, LandmarkSet};

pub const COEFF_MAGIC: &[u8; 4] = b"RGCV";
pub const BASIS_MAGIC: &[u8; 4] = b"RGBM";
pub const BASIS_VERSION: u32 = 1;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_err(context: &str, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        context: context.to_string(),
        offset,
        message: message.into(),
    }
}

/// `round(255 x)` after clamping to `[0, 1]`.
pub fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    out
}

/// Netpbm header: magic, then whitespace-separated integers, comments
/// allowed, exactly one whitespace byte before the raster.
fn parse_netpbm_header(bytes: &[u8], magic: &[u8; 2], fields: usize, ctx: &str) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(parse_err(ctx, 0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut values = Vec::with_capacity(fields);
    while values.len() < fields {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(ctx, pos, "expected an unsigned integer"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        let v = text
            .parse::<usize>()
            .map_err(|_| parse_err(ctx, start, "integer out of range"))?;
        values.push(v);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_err(ctx, pos, "expected whitespace after the header"));
    }
    Ok((values, pos + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let ctx = "PPM";
    let (h, body) = parse_netpbm_header(bytes, b"P6", 3, ctx)?;
    let (w, hgt, maxval) = (h[0], h[1], h[2]);
    if maxval != 255 {
        return Err(parse_err(ctx, body - 1, format!("only maxval 255 is supported, got {maxval}")));
    }
    let need = 3 * w * hgt;
    if bytes.len() - body < need {
        return Err(parse_err(
            ctx,
            bytes.len(),
            format!("truncated raster: expected {need} bytes, found {}", bytes.len() - body),
        ));
    }
    let data = bytes[body..body + need].iter().map(|&b| b as f64 / 255.0).collect();
    Image::from_vec(w, hgt, data)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    write_bytes(path, &encode_ppm(image))
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_ppm(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse {
            context,
            offset,
            message,
        } => Error::Parse {
            context: format!("{} ({context})", path.display()),
            offset,
            message,
        },
        other => other,
    }
}

/// Boolean mask as a binary PGM (0 / 255).
pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    write_bytes(path, &out)
}

pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let bytes = read_bytes(path)?;
    let ctx = "PGM";
    let (h, body) = parse_netpbm_header(&bytes, b"P5", 3, ctx).map_err(|e| with_path(e, path))?;
    let need = h[0] * h[1];
    if bytes.len() - body < need {
        return Err(with_path(parse_err(ctx, bytes.len(), "truncated raster"), path));
    }
    Ok((h[0], h[1], bytes[body..body + need].iter().map(|&b| b > 127).collect()))
}

pub fn encode_coefficients(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * values.len());
    out.extend_from_slice(COEFF_MAGIC);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_coefficients(bytes: &[u8]) -> Result<Vec<f64>> {
    let ctx = "RGCV";
    if bytes.len() < 8 || &bytes[..4] != COEFF_MAGIC {
        return Err(parse_err(ctx, 0, "missing RGCV magic"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 8 + 4 * n {
        return Err(parse_err(ctx, bytes.len().min(8 + 4 * n), format!("expected {n} float32 values")));
    }
    Ok(bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect())
}

pub fn write_coefficients(path: &Path, c: &CoefficientVector) -> Result<()> {
    write_bytes(path, &encode_coefficients(c.as_slice()))
}

pub fn read_coefficients(path: &Path) -> Result<CoefficientVector> {
    let v = decode_coefficients(&read_bytes(path)?).map_err(|e| with_path(e, path))?;
    CoefficientVector::from_vec(v)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(parse_err("RGBM", self.bytes.len(), "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

/// Basis file: header (magic, version, vertex and triangle counts), f32
/// arrays (means, then column-major bases), u32 triangle and landmark
/// indices, and a trailing u64 generation seed.
pub fn encode_basis(b: &MorphableBasis) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BASIS_MAGIC);
    for v in [BASIS_VERSION, b.vertex_count as u32, b.triangles.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let floats = b
        .mean_geometry
        .iter()
        .chain(&b.mean_texture)
        .chain(b.shape_basis.as_col_major())
        .chain(b.expression_basis.as_col_major())
        .chain(b.texture_basis.as_col_major());
    for &v in floats {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &i in b.triangles.iter().flatten().chain(&b.landmark_indices) {
        out.extend_from_slice(&i.to_le_bytes());
    }
    out.extend_from_slice(&b.basis_seed.to_le_bytes());
    out
}

pub fn decode_basis(bytes: &[u8]) -> Result<MorphableBasis> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != BASIS_MAGIC {
        return Err(parse_err("RGBM", 0, "missing RGBM magic"));
    }
    let version = r.u32()?;
    if version != BASIS_VERSION {
        return Err(parse_err("RGBM", 4, format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let t = r.u32()? as usize;
    let rows = 3 * n;
    let mean_geometry = r.f32s(rows)?;
    let mean_texture = r.f32s(rows)?;
    let shape_basis = ColMatrix::from_col_major(rows, SHAPE_DIM, r.f32s(rows * SHAPE_DIM)?)?;
    let expression_basis = ColMatrix::from_col_major(rows, EXPRESSION_DIM, r.f32s(rows * EXPRESSION_DIM)?)?;
    let texture_basis = ColMatrix::from_col_major(rows, TEXTURE_DIM, r.f32s(rows * TEXTURE_DIM)?)?;
    let mut triangles = Vec::with_capacity(t);
    for _ in 0..t {
        triangles.push([r.u32()?, r.u32()?, r.u32()?]);
    }
    let landmark_indices = (0..LANDMARK_COUNT).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let basis_seed = if r.pos + 8 <= bytes.len() {
        u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"))
    } else {
        0
    };
    if r.pos != bytes.len() {
        return Err(parse_err("RGBM", r.pos, "trailing bytes after the basis"));
    }
    let basis = MorphableBasis {
        vertex_count: n,
        mean_geometry,
        mean_texture,
        shape_basis,
        expression_basis,
        texture_basis,
        triangles,
        landmark_indices,
        basis_seed,
    };
    basis.validate()?;
    Ok(basis)
}

pub fn write_basis(path: &Path, b: &MorphableBasis) -> Result<()> {
    write_bytes(path, &encode_basis(b))
}

pub fn read_basis(path: &Path) -> Result<MorphableBasis> {
    decode_basis(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

/// Rounds every stored value to `f32`, matching what the basis file keeps.
pub fn quantize_basis(b: &MorphableBasis) -> MorphableBasis {
    decode_basis(&encode_basis(b)).expect("encoded basis decodes")
}

/// OBJ with per-vertex colours (`v x y z r g b`) and 1-based faces.
pub fn encode_obj(geometry: &[f64], colors: &[f64], triangles: &[[u32; 3]]) -> Result<String> {
    if geometry.len() != colors.len() || !geometry.len().is_multiple_of(3) {
        return Err(Error::invalid("geometry and colours must both hold 3 values per vertex"));
    }
    let n = (geometry.len() / 3) as u32;
    if triangles.iter().flatten().any(|&i| i >= n) {
        return Err(Error::invalid("triangle index out of range"));
    }
    let mut s = String::new();
    for (p, c) in geometry.chunks_exact(3).zip(colors.chunks_exact(3)) {
        let f = |v: f64| v as f32;
        s.push_str(&format!(
            "v {} {} {} {} {} {}\n",
            f(p[0]),
            f(p[1]),
            f(p[2]),
            f(c[0]),
            f(c[1]),
            f(c[2])
        ));
    }
    for t in triangles {
        s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    Ok(s)
}

pub fn write_obj(path: &Path, geometry: &[f64], colors: &[f64], triangles: &[[u32; 3]]) -> Result<()> {
    write_bytes(path, encode_obj(geometry, colors, triangles)?.as_bytes())
}

/// Mesh read back from an OBJ: geometry, colours (zero when absent) and
/// 0-based triangles. Only `v` and triangular `f` records are understood.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjMesh {
    pub geometry: Vec<f64>,
    pub colors: Vec<f64>,
    pub triangles: Vec<[u32; 3]>,
}

pub fn decode_obj(text: &str) -> Result<ObjMesh> {
    let mut mesh = ObjMesh {
        geometry: Vec::new(),
        colors: Vec::new(),
        triangles: Vec::new(),
    };
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let mut it = line.split_whitespace();
        let bad = |m: &str| parse_err("OBJ", offset, m.to_string());
        match it.next() {
            Some("v") => {
                let vals = it
                    .map(|t| t.parse::<f64>().map_err(|_| bad("bad vertex number")))
                    .collect::<Result<Vec<_>>>()?;
                match vals.len() {
                    3 => {
                        mesh.geometry.extend_from_slice(&vals);
                        mesh.colors.extend_from_slice(&[0.0; 3]);
                    }
                    6 => {
                        mesh.geometry.extend_from_slice(&vals[..3]);
                        mesh.colors.extend_from_slice(&vals[3..]);
                    }
                    _ => return Err(bad("vertex needs 3 or 6 numbers")),
                }
            }
            Some("f") => {
                let idx = it
                    .map(|t| {
                        t.split('/')
                            .next()
                            .and_then(|i| i.parse::<u32>().ok())
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(|| bad("bad face index"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() != 3 {
                    return Err(bad("only triangular faces are supported"));
                }
                mesh.triangles.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
        offset += line.len();
    }
    Ok(mesh)
}

pub fn read_obj(path: &Path) -> Result<ObjMesh> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| with_path(parse_err("OBJ", e.utf8_error().valid_up_to(), "not UTF-8"), path))?;
    decode_obj(&text).map_err(|e| with_path(e, path))
}

/// One `x y` pair per line.
pub fn encode_landmarks(l: &LandmarkSet) -> String {
    l.points.iter().map(|p| format!("{} {}\n", p[0], p[1])).collect()
}

pub fn decode_landmarks(text: &str) -> Result<LandmarkSet> {
    let mut pts = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            let v = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| parse_err("landmarks", offset, "bad number"))?;
            if v.len() != 2 {
                return Err(parse_err("landmarks", offset, "expected two numbers per line"));
            }
            pts.push([v[0], v[1]]);
        }
        offset += line.len();
    }
    LandmarkSet::new(pts)
}

pub fn write_landmarks(path: &Path, l: &LandmarkSet) -> Result<()> {
    write_bytes(path, encode_landmarks(l).as_bytes())
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkSet> {
    let bytes = read_bytes(path)?;
    decode_landmarks(&String::from_utf8_lossy(&bytes)).map_err(|e| with_path(e, path))
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}
