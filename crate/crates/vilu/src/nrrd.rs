//! The NRRD subset used for images and label maps.
//!
//! Accepted: magic `NRRD0004`/`NRRD0005`, 2 or 3 dimensions, types
//! `short`, `float` and `uchar` (with their standard aliases), `raw` or
//! `gzip` encoding, either endianness, and axis-aligned `space directions`
//! (or plain `spacings`). Detached data files and every other field value
//! are rejected.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use vilu_core::data::{Geometry, LabelMap, Volume};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    Raw,
    Gzip,
}

impl std::str::FromStr for Encoding {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "raw" => Ok(Encoding::Raw),
            "gzip" | "gz" => Ok(Encoding::Gzip),
            _ => Err(format!("unknown encoding {s:?} (raw, gzip)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    Short(Vec<i16>),
    Float(Vec<f32>),
    Uchar(Vec<u8>),
}

impl Samples {
    fn type_name(&self) -> &'static str {
        match self {
            Samples::Short(_) => "short",
            Samples::Float(_) => "float",
            Samples::Uchar(_) => "uchar",
        }
    }

    fn len(&self) -> usize {
        match self {
            Samples::Short(v) => v.len(),
            Samples::Float(v) => v.len(),
            Samples::Uchar(v) => v.len(),
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            Samples::Short(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Samples::Float(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Samples::Uchar(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nrrd {
    pub geometry: Geometry,
    pub samples: Samples,
    pub encoding: Encoding,
    /// `key:=value` lines, in file order.
    pub key_values: Vec<(String, String)>,
}

impl Nrrd {
    pub fn key_value(&self, key: &str) -> Option<&str> {
        self.key_values.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Key marking images that already went through the clip window and
/// normalisation.
pub const INTENSITY_KEY: &str = "vilu_intensity";
pub const NORMALIZED: &str = "clip_normalized";

#[derive(Clone, Copy)]
enum Kind {
    Short,
    Float,
    Uchar,
}

impl Kind {
    fn parse(s: &str) -> Option<Kind> {
        match s {
            "short" | "short int" | "signed short" | "signed short int" | "int16" | "int16_t" => Some(Kind::Short),
            "float" => Some(Kind::Float),
            "uchar" | "unsigned char" | "uint8" | "uint8_t" => Some(Kind::Uchar),
            _ => None,
        }
    }

    fn bytes(self) -> usize {
        match self {
            Kind::Short => 2,
            Kind::Float => 4,
            Kind::Uchar => 1,
        }
    }
}

fn parse_vector(s: &str) -> Option<Vec<f64>> {
    let inner = s.trim().strip_prefix('(')?.strip_suffix(')')?;
    inner.split(',').map(|c| c.trim().parse().ok()).collect()
}

/// Splits `( a,b ) (c,d)` into its parenthesised groups.
fn vector_groups(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => start = Some(i),
            ')' => {
                if let Some(b) = start.take() {
                    out.push(&s[b..=i]);
                }
            }
            _ => {}
        }
    }
    out
}

/// Parses an in-memory NRRD file. `path` only labels errors.
pub fn parse(bytes: &[u8], path: &Path) -> Result<Nrrd> {
    let fmt = |d: String| Error::format(path, d);
    let magic = bytes.get(..8).ok_or_else(|| fmt("file shorter than the NRRD magic".into()))?;
    if magic != b"NRRD0004" && magic != b"NRRD0005" {
        return Err(fmt(format!("unsupported magic {:?}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 0;
    let mut fields: Vec<(String, String)> = Vec::new();
    let mut key_values = Vec::new();
    let mut first = true;
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt("header is not terminated by a blank line".into()))?;
        let raw = &bytes[pos..pos + end];
        pos += end + 1;
        let line = std::str::from_utf8(raw).map_err(|_| fmt("header is not UTF-8".into()))?;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if first {
            first = false;
            continue;
        }
        if line.is_empty() {
            break;
        }
        if line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once(":=") {
            key_values.push((k.to_string(), v.to_string()));
            continue;
        }
        let (k, v) = line
            .split_once(": ")
            .ok_or_else(|| fmt(format!("malformed header line {line:?}")))?;
        fields.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
    }
    let get = |k: &str| fields.iter().find(|(fk, _)| fk == k).map(|(_, v)| v.as_str());

    if get("data file").or(get("datafile")).is_some() {
        return Err(fmt("detached data files are not supported".into()));
    }
    let kind_s = get("type").ok_or_else(|| fmt("missing field \"type\"".into()))?;
    let kind = Kind::parse(kind_s).ok_or_else(|| fmt(format!("unsupported type {kind_s:?} (short, float, uchar)")))?;
    let dim: usize = get("dimension")
        .ok_or_else(|| fmt("missing field \"dimension\"".into()))?
        .parse()
        .map_err(|_| fmt("dimension is not an integer".into()))?;
    if !(2..=3).contains(&dim) {
        return Err(fmt(format!("dimension {dim} is not 2 or 3")));
    }
    let sizes: Vec<usize> = get("sizes")
        .ok_or_else(|| fmt("missing field \"sizes\"".into()))?
        .split_whitespace()
        .map(|s| s.parse().ok().filter(|&n: &usize| n > 0))
        .collect::<Option<_>>()
        .ok_or_else(|| fmt("sizes must be positive integers".into()))?;
    if sizes.len() != dim {
        return Err(fmt(format!("{} sizes for dimension {dim}", sizes.len())));
    }
    let encoding = match get("encoding").ok_or_else(|| fmt("missing field \"encoding\"".into()))? {
        "raw" => Encoding::Raw,
        "gzip" | "gz" => Encoding::Gzip,
        e => return Err(fmt(format!("unsupported encoding {e:?} (raw, gzip)"))),
    };
    let big_endian = match get("endian") {
        None | Some("little") => false,
        Some("big") => true,
        Some(e) => return Err(fmt(format!("unknown endian {e:?}"))),
    };

    let mut spacing = vec![1.0; dim];
    let mut flipped = vec![false; dim];
    if let Some(dirs) = get("space directions") {
        let groups = vector_groups(dirs);
        if groups.len() != dim {
            return Err(fmt(format!("space directions lists {} vectors for dimension {dim}", groups.len())));
        }
        for (axis, g) in groups.iter().enumerate() {
            let v = parse_vector(g).ok_or_else(|| fmt(format!("malformed direction {g:?}")))?;
            if v.len() != dim {
                return Err(Error::UnsupportedOrientation {
                    path: path.into(),
                    detail: format!("direction {g} has {} components for dimension {dim}", v.len()),
                });
            }
            let off_axis = v.iter().enumerate().any(|(j, &c)| j != axis && c != 0.0);
            if off_axis || v[axis] == 0.0 {
                return Err(Error::UnsupportedOrientation {
                    path: path.into(),
                    detail: format!("axis {axis} direction {g} is not axis-aligned"),
                });
            }
            spacing[axis] = v[axis].abs();
            flipped[axis] = v[axis] < 0.0;
        }
    } else if let Some(sp) = get("spacings") {
        let v: Vec<f64> = sp
            .split_whitespace()
            .map(|s| s.parse().ok())
            .collect::<Option<_>>()
            .ok_or_else(|| fmt(format!("malformed spacings {sp:?}")))?;
        if v.len() != dim {
            return Err(fmt(format!("{} spacings for dimension {dim}", v.len())));
        }
        spacing = v;
    }
    let origin = match get("space origin") {
        Some(o) => {
            let v = parse_vector(o).ok_or_else(|| fmt(format!("malformed space origin {o:?}")))?;
            if v.len() != dim {
                return Err(fmt(format!("space origin has {} components for dimension {dim}", v.len())));
            }
            v
        }
        None => vec![0.0; dim],
    };

    let n: usize = sizes.iter().product();
    let expected = n * kind.bytes();
    let body = &bytes[pos..];
    let payload = match encoding {
        Encoding::Raw => body.to_vec(),
        Encoding::Gzip => {
            let mut out = Vec::with_capacity(expected);
            GzDecoder::new(body)
                .read_to_end(&mut out)
                .map_err(|e| fmt(format!("gzip payload: {e}")))?;
            out
        }
    };
    if payload.len() != expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: payload.len(),
        });
    }
    let samples = match kind {
        Kind::Uchar => Samples::Uchar(payload),
        Kind::Short => Samples::Short(
            payload
                .chunks_exact(2)
                .map(|c| {
                    let b = [c[0], c[1]];
                    if big_endian {
                        i16::from_be_bytes(b)
                    } else {
                        i16::from_le_bytes(b)
                    }
                })
                .collect(),
        ),
        Kind::Float => Samples::Float(
            payload
                .chunks_exact(4)
                .map(|c| {
                    let b = [c[0], c[1], c[2], c[3]];
                    if big_endian {
                        f32::from_be_bytes(b)
                    } else {
                        f32::from_le_bytes(b)
                    }
                })
                .collect(),
        ),
    };
    let geometry = Geometry {
        shape: sizes,
        spacing,
        origin,
        flipped,
    };
    geometry.validate().map_err(|e| fmt(e.to_string()))?;
    Ok(Nrrd {
        geometry,
        samples,
        encoding,
        key_values,
    })
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Serialises to NRRD0004 with little-endian samples.
pub fn encode(geometry: &Geometry, samples: &Samples, encoding: Encoding, key_values: &[(&str, &str)]) -> Result<Vec<u8>> {
    if samples.len() != geometry.numel() {
        return Err(vilu_core::Error::Contract(format!(
            "{} samples for shape {:?}",
            samples.len(),
            geometry.shape
        ))
        .into());
    }
    let dim = geometry.rank();
    let sizes: Vec<String> = geometry.shape.iter().map(|n| n.to_string()).collect();
    let dirs: Vec<String> = (0..dim)
        .map(|axis| {
            let comps: Vec<String> = (0..dim)
                .map(|j| {
                    if j != axis {
                        "0".into()
                    } else if geometry.flipped[axis] {
                        fmt_num(-geometry.spacing[axis])
                    } else {
                        fmt_num(geometry.spacing[axis])
                    }
                })
                .collect();
            format!("({})", comps.join(","))
        })
        .collect();
    let origin: Vec<String> = geometry.origin.iter().map(|&v| fmt_num(v)).collect();
    let mut out = Vec::new();
    let header = format!(
        "NRRD0004\n# vilu\ntype: {}\ndimension: {dim}\nspace dimension: {dim}\nsizes: {}\nspace directions: {}\nspace origin: ({})\nendian: little\nencoding: {}\n\n",
        samples.type_name(),
        sizes.join(" "),
        dirs.join(" "),
        origin.join(","),
        match encoding {
            Encoding::Raw => "raw",
            Encoding::Gzip => "gzip",
        }
    );
    let (fixed, blank) = header.split_at(header.len() - 1);
    out.extend_from_slice(fixed.as_bytes());
    for (k, v) in key_values {
        if k.contains(":=") || k.contains('\n') || v.contains('\n') {
            return Err(vilu_core::Error::Contract(format!("invalid NRRD key/value {k:?}")).into());
        }
        out.extend_from_slice(format!("{k}:={v}\n").as_bytes());
    }
    out.extend_from_slice(blank.as_bytes());
    let payload = samples.to_le_bytes();
    match encoding {
        Encoding::Raw => out.extend_from_slice(&payload),
        Encoding::Gzip => {
            let mut enc = GzEncoder::new(out, Compression::default());
            enc.write_all(&payload).expect("in-memory write");
            out = enc.finish().expect("in-memory write");
        }
    }
    Ok(out)
}

pub fn read_nrrd(path: &Path) -> Result<Nrrd> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes, path)
}

pub fn write_nrrd(path: &Path, geometry: &Geometry, samples: &Samples, encoding: Encoding, key_values: &[(&str, &str)]) -> Result<()> {
    let bytes = encode(geometry, samples, encoding, key_values)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads any supported type as an image volume.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let n = read_nrrd(path)?;
    let data = match n.samples {
        Samples::Float(v) => v,
        Samples::Short(v) => v.into_iter().map(f32::from).collect(),
        Samples::Uchar(v) => v.into_iter().map(f32::from).collect(),
    };
    Volume::new(n.geometry, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads an integer-typed label map with values in `[0, num_classes)`.
pub fn read_labels(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let n = read_nrrd(path)?;
    let data = match n.samples {
        Samples::Uchar(v) => v,
        Samples::Short(v) => v
            .into_iter()
            .map(|x| u8::try_from(x).map_err(|_| Error::format(path, format!("label value {x} out of range"))))
            .collect::<Result<_>>()?,
        Samples::Float(_) => return Err(Error::format(path, "label maps must have an integer type")),
    };
    LabelMap::new(n.geometry, data, num_classes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_volume(path: &Path, v: &Volume, encoding: Encoding, key_values: &[(&str, &str)]) -> Result<()> {
    write_nrrd(path, &v.geometry, &Samples::Float(v.data.clone()), encoding, key_values)
}

pub fn write_labels(path: &Path, l: &LabelMap, encoding: Encoding) -> Result<()> {
    write_nrrd(path, &l.geometry, &Samples::Uchar(l.data.clone()), encoding, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("test.nrrd")
    }

    #[test]
    fn float_2x3_header_contract() {
        let mut f = b"NRRD0004\ntype: float\ndimension: 2\nsizes: 2 3\nendian: little\nencoding: raw\n\n".to_vec();
        for i in 0..6 {
            f.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let n = parse(&f, p()).unwrap();
        assert_eq!(n.geometry.shape, vec![2, 3]);
        assert_eq!(n.geometry.spacing, vec![1.0, 1.0]);
        assert_eq!(n.samples, Samples::Float(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
    }

    #[test]
    fn raw_payload_round_trips() {
        let g = Geometry {
            shape: vec![3, 2, 2],
            spacing: vec![0.5, 1.25, 3.0],
            origin: vec![-1.5, 0.0, 2.0],
            flipped: vec![true, false, false],
        };
        let s = Samples::Short((0..12).map(|i| i * 1000 - 4000).collect());
        let bytes = encode(&g, &s, Encoding::Raw, &[(INTENSITY_KEY, NORMALIZED)]).unwrap();
        let n = parse(&bytes, p()).unwrap();
        assert_eq!(n.geometry, g);
        assert_eq!(n.samples, s);
        assert_eq!(n.key_value(INTENSITY_KEY), Some(NORMALIZED));
        assert_eq!(encode(&n.geometry, &n.samples, Encoding::Raw, &[(INTENSITY_KEY, NORMALIZED)]).unwrap(), bytes);
        let z = parse(&encode(&g, &s, Encoding::Gzip, &[]).unwrap(), p()).unwrap();
        assert_eq!(z.samples, s);
        assert_eq!(z.encoding, Encoding::Gzip);
    }

    #[test]
    fn big_endian_short() {
        let mut f = b"NRRD0005\ntype: int16\ndimension: 2\nsizes: 2 1\nendian: big\nencoding: raw\n\n".to_vec();
        f.extend_from_slice(&(-2i16).to_be_bytes());
        f.extend_from_slice(&300i16.to_be_bytes());
        assert_eq!(parse(&f, p()).unwrap().samples, Samples::Short(vec![-2, 300]));
    }

    #[test]
    fn errors() {
        let head = |extra: &str| format!("NRRD0004\ntype: uchar\ndimension: 2\nsizes: 2 2\n{extra}\n").into_bytes();
        let mut oblique = head("space directions: (1,0.5) (0,1)\nencoding: raw\n");
        oblique.extend_from_slice(&[0; 4]);
        assert!(matches!(parse(&oblique, p()), Err(Error::UnsupportedOrientation { .. })));
        let mut bz = head("encoding: bzip2\n");
        bz.extend_from_slice(&[0; 4]);
        assert!(matches!(parse(&bz, p()), Err(Error::Format { .. })));
        let mut short = head("encoding: raw\n");
        short.extend_from_slice(&[0; 3]);
        assert!(matches!(parse(&short, p()), Err(Error::Truncated { expected: 4, found: 3, .. })));
        assert!(matches!(parse(b"P6\n", p()), Err(Error::Format { .. })));
        let mut dbl = b"NRRD0004\ntype: double\ndimension: 2\nsizes: 1 1\nencoding: raw\n\n".to_vec();
        dbl.extend_from_slice(&[0; 8]);
        assert!(matches!(parse(&dbl, p()), Err(Error::Format { .. })));
    }
}
