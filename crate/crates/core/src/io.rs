//! File formats: a single-file NIfTI-1 subset (axis-aligned, u8/i16/f32,
//! optionally gzipped), `LUT256` tables, landmark CSV and key = value
//! configuration files. All writers go through a temporary file and a
//! rename.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::augment::IntensityLut;
use crate::error::{RegError, Result};
use crate::transform::DisplacementField;
use crate::volume::{GridSpec, LabelMap, LandmarkSet, Volume};

const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352;
const DT_U8: i16 = 2;
const DT_I16: i16 = 4;
const DT_F32: i16 = 16;
/// Displacement-vector intent code.
pub const INTENT_DISPVECT: i16 = 1006;

/// Header fields this crate reads or writes.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub intent_code: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub little_endian: bool,
}

/// A decoded file: grid, component count (1 for scalars, 3 for
/// displacement fields) and scaled values, component-major.
#[derive(Clone, Debug)]
pub struct NiftiData {
    pub header: NiftiHeader,
    pub grid: GridSpec,
    pub components: usize,
    pub data: Vec<f64>,
}

struct Bytes<'a> {
    buf: &'a [u8],
    le: bool,
}

impl Bytes<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        self.buf[at..at + N].try_into().expect("in bounds")
    }
    fn i16(&self, at: usize) -> i16 {
        let b = self.arr(at);
        if self.le { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }
    }
    fn f32(&self, at: usize) -> f32 {
        let b = self.arr(at);
        if self.le { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| RegError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| RegError::malformed(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header(path: &Path, buf: &[u8]) -> Result<NiftiHeader> {
    if buf.len() < HEADER_LEN {
        return Err(RegError::malformed(path, "shorter than a NIfTI-1 header"));
    }
    let le = if i32::from_le_bytes(buf[0..4].try_into().expect("4 bytes")) == HEADER_LEN as i32 {
        true
    } else if i32::from_be_bytes(buf[0..4].try_into().expect("4 bytes")) == HEADER_LEN as i32 {
        false
    } else {
        return Err(RegError::malformed(path, "sizeof_hdr is not 348"));
    };
    let b = Bytes { buf, le };
    if &buf[344..348] != b"n+1\0" {
        return Err(RegError::malformed(path, "magic is not n+1 (single-file NIfTI-1)"));
    }
    let dim: [i16; 8] = std::array::from_fn(|k| b.i16(40 + 2 * k));
    if !(1..=7).contains(&dim[0]) {
        return Err(RegError::malformed(path, format!("dim[0] = {} outside [1, 7]", dim[0])));
    }
    Ok(NiftiHeader {
        dim,
        intent_code: b.i16(68),
        datatype: b.i16(70),
        pixdim: std::array::from_fn(|k| b.f32(76 + 4 * k)),
        vox_offset: b.f32(108),
        scl_slope: b.f32(112),
        scl_inter: b.f32(116),
        qform_code: b.i16(252),
        sform_code: b.i16(254),
        quatern: std::array::from_fn(|k| b.f32(256 + 4 * k)),
        qoffset: std::array::from_fn(|k| b.f32(268 + 4 * k)),
        srow: std::array::from_fn(|r| std::array::from_fn(|c| b.f32(280 + 16 * r + 4 * c))),
        little_endian: le,
    })
}

/// Spacing and origin, rejecting anything but an axis-aligned, unflipped
/// orientation.
fn geometry(path: &Path, h: &NiftiHeader) -> Result<([f64; 3], [f64; 3])> {
    let spacing: [f64; 3] = std::array::from_fn(|a| h.pixdim[a + 1] as f64);
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(RegError::malformed(path, format!("pixdim {spacing:?} must be positive")));
    }
    if h.sform_code >= 1 {
        for (r, row) in h.srow.iter().enumerate() {
            for (c, &v) in row[..3].iter().enumerate() {
                if r != c && v != 0.0 {
                    return Err(RegError::UnsupportedOrientation(format!("sform row {r} has off-diagonal {v}")));
                }
                if r == c && !(v > 0.0) {
                    return Err(RegError::UnsupportedOrientation(format!("sform axis {r} is flipped or degenerate")));
                }
            }
        }
        return Ok((spacing, std::array::from_fn(|a| h.srow[a][3] as f64)));
    }
    if h.qform_code >= 1 {
        if h.quatern.iter().any(|&q| q != 0.0) {
            return Err(RegError::UnsupportedOrientation(format!("qform quaternion {:?}", h.quatern)));
        }
        if h.pixdim[0] < 0.0 {
            return Err(RegError::UnsupportedOrientation("qform flips the third axis".into()));
        }
        return Ok((spacing, h.qoffset.map(f64::from)));
    }
    Ok((spacing, [0.0; 3]))
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiData> {
    let path = path.as_ref();
    let buf = read_bytes(path)?;
    let header = parse_header(path, &buf)?;
    let h = &header;
    let bad = |why: String| RegError::malformed(path, why);
    let nd = h.dim[0] as usize;
    let extent: Vec<usize> = (1..=nd).map(|k| h.dim[k].max(0) as usize).collect();
    if extent.contains(&0) {
        return Err(bad(format!("zero extent in dim {:?}", h.dim)));
    }
    let (dims, components) = match nd {
        3 => ([extent[0], extent[1], extent[2]], 1),
        4 if extent[3] == 1 => ([extent[0], extent[1], extent[2]], 1),
        5 if extent[3] == 1 && (extent[4] == 1 || extent[4] == 3) => ([extent[0], extent[1], extent[2]], extent[4]),
        _ => return Err(bad(format!("unsupported layout dim = {:?}", h.dim))),
    };
    let width = match h.datatype {
        DT_U8 => 1,
        DT_I16 => 2,
        DT_F32 => 4,
        other => return Err(RegError::UnsupportedDatatype(other)),
    };
    if !(h.vox_offset >= VOX_OFFSET as f32) {
        return Err(bad(format!("vox_offset {} below 352", h.vox_offset)));
    }
    let (spacing, origin) = geometry(path, h)?;
    let grid = GridSpec::new(dims, spacing, origin)?;
    let count = grid.len() * components;
    let start = h.vox_offset as usize;
    let payload = buf
        .get(start..start + count * width)
        .ok_or_else(|| bad(format!("payload truncated: need {} bytes after offset {start}", count * width)))?;
    let b = Bytes {
        buf: payload,
        le: h.little_endian,
    };
    let scale = h.scl_slope != 0.0 && h.scl_slope.is_finite();
    let (slope, inter) = (h.scl_slope as f64, h.scl_inter as f64);
    let data = (0..count)
        .map(|i| {
            let raw = match h.datatype {
                DT_U8 => payload[i] as f64,
                DT_I16 => b.i16(2 * i) as f64,
                _ => b.f32(4 * i) as f64,
            };
            if scale { raw * slope + inter } else { raw }
        })
        .collect::<Vec<_>>();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite voxel values".into()));
    }
    Ok(NiftiData {
        header,
        grid,
        components,
        data,
    })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let n = read_nifti(path)?;
    if n.components != 1 {
        return Err(RegError::malformed(path, "expected a scalar volume, found a vector field"));
    }
    Volume::new(n.grid, n.data)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    LabelMap::from_volume(&read_volume(path)?)
}

pub fn read_displacement(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    let n = read_nifti(path)?;
    if n.components != 3 {
        return Err(RegError::malformed(path, "expected dim = [5, X, Y, Z, 1, 3]"));
    }
    let len = n.grid.len();
    let mut it = n.data.chunks_exact(len).map(<[f64]>::to_vec);
    let comps = std::array::from_fn(|_| it.next().expect("three components"));
    DisplacementField::new(n.grid, comps)
}

fn encode(grid: &GridSpec, components: usize, values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    h[38] = b'r';
    let mut dim = [1i16; 8];
    dim[0] = if components == 1 { 3 } else { 5 };
    for a in 0..3 {
        dim[a + 1] = grid.dims[a] as i16;
    }
    dim[5] = components as i16;
    for (k, d) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * k, *d);
    }
    if components == 3 {
        put_i16(&mut h, 68, INTENT_DISPVECT);
    }
    put_i16(&mut h, 70, DT_F32);
    put_i16(&mut h, 72, 32);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, grid.spacing[a] as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    // millimetres
    h[123] = 2;
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for a in 0..3 {
        put_f32(&mut h, 268 + 4 * a, grid.origin[a] as f32);
        put_f32(&mut h, 280 + 16 * a + 4 * a, grid.spacing[a] as f32);
        put_f32(&mut h, 280 + 16 * a + 12, grid.origin[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    for v in values {
        h.extend_from_slice(&(v as f32).to_le_bytes());
    }
    h
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Writes `bytes` next to `path` and renames over it.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let name = path
        .file_name()
        .ok_or_else(|| RegError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidInput, "no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        RegError::io(path, e)
    })
}

fn write_nifti_bytes(path: &Path, raw: Vec<u8>) -> Result<()> {
    if is_gz(path) {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).and_then(|_| enc.try_finish()).map_err(|e| RegError::io(path, e))?;
        write_atomic(path, &enc.finish().map_err(|e| RegError::io(path, e))?)
    } else {
        write_atomic(path, &raw)
    }
}

/// Writes 32-bit float data; gzip when the name ends in `.gz`.
pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    write_nifti_bytes(path.as_ref(), encode(vol.grid(), 1, vol.data().iter().copied()))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    write_volume(path, &labels.to_volume())
}

pub fn write_displacement(path: impl AsRef<Path>, d: &DisplacementField) -> Result<()> {
    let values = d.comps().iter().flat_map(|c| c.iter().copied());
    write_nifti_bytes(path.as_ref(), encode(d.grid(), 3, values))
}

const LUT_MAGIC: &str = "LUT256 1";

pub fn format_lut(lut: &IntensityLut) -> String {
    let mut s = String::with_capacity(1024);
    s.push_str(LUT_MAGIC);
    s.push('\n');
    for v in lut.table() {
        s.push_str(&v.to_string());
        s.push('\n');
    }
    s
}

pub fn parse_lut(path: &Path, text: &str) -> Result<IntensityLut> {
    let bad = |why: String| RegError::malformed(path, why);
    let body = text.strip_suffix('\n').ok_or_else(|| bad("missing final line feed".into()))?;
    let mut lines = body.split('\n');
    if lines.next() != Some(LUT_MAGIC) {
        return Err(bad(format!("first line must be `{LUT_MAGIC}`")));
    }
    let mut table = [0u8; 256];
    let mut n = 0;
    for (k, line) in lines.enumerate() {
        if k >= 256 {
            return Err(bad("more than 256 entries".into()));
        }
        let ok = !line.is_empty() && line.bytes().all(|c| c.is_ascii_digit()) && (line == "0" || !line.starts_with('0'));
        table[k] = ok
            .then(|| line.parse::<u8>().ok())
            .flatten()
            .ok_or_else(|| bad(format!("line {}: `{line}` is not an integer in [0, 255]", k + 2)))?;
        n += 1;
    }
    if n != 256 {
        return Err(bad(format!("expected 256 entries, found {n}")));
    }
    Ok(IntensityLut::new(table))
}

pub fn read_lut(path: impl AsRef<Path>) -> Result<IntensityLut> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| RegError::io(path, e))?;
    parse_lut(path, &text)
}

pub fn write_lut(path: impl AsRef<Path>, lut: &IntensityLut) -> Result<()> {
    write_atomic(path, format_lut(lut).as_bytes())
}

/// Shortest decimal that parses back to the same `f64`.
pub fn format_landmarks(set: &LandmarkSet) -> String {
    let mut s = String::from("x,y,z\n");
    for p in &set.points {
        s.push_str(&format!("{},{},{}\n", p[0], p[1], p[2]));
    }
    s
}

pub fn parse_landmarks(path: &Path, text: &str) -> Result<LandmarkSet> {
    let bad = |why: String| RegError::malformed(path, why);
    let body = text.strip_suffix('\n').ok_or_else(|| bad("missing final line feed".into()))?;
    let mut lines = body.split('\n');
    if lines.next() != Some("x,y,z") {
        return Err(bad("header must be `x,y,z`".into()));
    }
    let points = lines
        .enumerate()
        .map(|(k, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite())).collect();
            match parsed {
                Some(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
                _ => Err(bad(format!("line {}: `{line}` is not three finite numbers", k + 2))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LandmarkSet::new(points)
}

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| RegError::io(path, e))?;
    parse_landmarks(path, &text)
}

pub fn write_landmarks(path: impl AsRef<Path>, set: &LandmarkSet) -> Result<()> {
    write_atomic(path, format_landmarks(set).as_bytes())
}

/// `key = value` pairs in file order. Blank lines and lines starting with
/// `#` are skipped.
pub fn parse_config(path: &Path, text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(k, l)| {
            let (key, value) = l
                .split_once('=')
                .ok_or_else(|| RegError::malformed(path, format!("line {}: expected key = value", k + 1)))?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(RegError::malformed(path, format!("line {}: bad key `{key}`", k + 1)));
            }
            Ok((key.to_string(), value.trim().to_string()))
        })
        .collect()
}

pub fn read_config(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| RegError::io(path, e))?;
    parse_config(path, &text)
}
