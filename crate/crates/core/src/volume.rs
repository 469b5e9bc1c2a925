//! Minimal multi-channel volume format.
//!
//! ```text
//! IVIMVOL 1
//! dims <X> <Y> <Z> <C>
//! kind <kind>
//! channel <name> <unit>        (C lines, in channel order)
//! meta <key> <value...>        (zero or more)
//! checksum <crc32 hex of all preceding header bytes>
//! end
//! <X*Y*Z*C little-endian f32, channel fastest, then x, y, z>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

pub const VOLUME_MAGIC: &str = "IVIMVOL";
pub const VOLUME_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a volume file (bad magic)")]
    BadMagic,
    #[error("unsupported volume format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed header line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("header checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("payload has {found} bytes, header implies {expected}")]
    PayloadLength { expected: usize, found: usize },
    #[error("volume shape error: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    pub unit: String,
}

impl Channel {
    pub fn new(name: impl Into<String>, unit: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            unit: unit.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    kind: String,
    channels: Vec<Channel>,
    meta: BTreeMap<String, String>,
    data: Vec<f32>,
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        kind: impl Into<String>,
        channels: Vec<Channel>,
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        let kind = kind.into();
        if dims.contains(&0) || channels.is_empty() {
            return Err(VolumeError::Shape(format!(
                "empty volume: dims {dims:?}, {} channels",
                channels.len()
            )));
        }
        if !is_token(&kind) {
            return Err(VolumeError::Shape(format!("kind {kind:?} must be a single token")));
        }
        for c in &channels {
            if !is_token(&c.name) || !is_token(&c.unit) {
                return Err(VolumeError::Shape(format!(
                    "channel name/unit must be single tokens: {:?} {:?}",
                    c.name, c.unit
                )));
            }
        }
        let expected = dims[0] * dims[1] * dims[2] * channels.len();
        if data.len() != expected {
            return Err(VolumeError::Shape(format!(
                "data has {} values, dims imply {expected}",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            kind,
            channels,
            meta: BTreeMap::new(),
            data,
        })
    }

    pub fn filled(dims: [usize; 3], kind: &str, channels: Vec<Channel>, value: f32) -> Result<Self, VolumeError> {
        let n = dims[0] * dims[1] * dims[2] * channels.len();
        Self::new(dims, kind, channels, vec![value; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    /// Metadata values may contain spaces but not newlines.
    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) -> Result<(), VolumeError> {
        let value = value.into();
        if !is_token(key) || value.contains('\n') || value.trim() != value || value.is_empty() {
            return Err(VolumeError::Shape(format!("invalid meta entry {key:?} = {value:?}")));
        }
        self.meta.insert(key.to_string(), value);
        Ok(())
    }

    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn voxel(&self, v: usize) -> &[f32] {
        let c = self.n_channels();
        &self.data[v * c..(v + 1) * c]
    }

    pub fn voxel_mut(&mut self, v: usize) -> &mut [f32] {
        let c = self.n_channels();
        &mut self.data[v * c..(v + 1) * c]
    }

    /// One channel as a flat x-fastest map.
    pub fn channel_map(&self, ch: usize) -> Vec<f32> {
        let c = self.n_channels();
        self.data.iter().skip(ch).step_by(c).copied().collect()
    }

    /// b-values recorded in the `b_values` metadata entry, for signal volumes.
    pub fn b_values(&self) -> Option<Vec<f64>> {
        self.meta
            .get("b_values")?
            .split(',')
            .map(|s| s.trim().parse::<f64>().ok())
            .collect()
    }

    pub fn set_b_values(&mut self, b: &[f64]) -> Result<(), VolumeError> {
        let s = b.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",");
        self.set_meta("b_values", s)
    }

    fn header_without_checksum(&self) -> String {
        let mut h = String::new();
        let [x, y, z] = self.dims;
        writeln!(h, "{VOLUME_MAGIC} {VOLUME_VERSION}").unwrap();
        writeln!(h, "dims {x} {y} {z} {}", self.n_channels()).unwrap();
        writeln!(h, "kind {}", self.kind).unwrap();
        for c in &self.channels {
            writeln!(h, "channel {} {}", c.name, c.unit).unwrap();
        }
        for (k, v) in &self.meta {
            writeln!(h, "meta {k} {v}").unwrap();
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let head = self.header_without_checksum();
        let crc = crc32fast::hash(head.as_bytes());
        let mut out = Vec::with_capacity(head.len() + 32 + self.data.len() * 4);
        out.extend_from_slice(head.as_bytes());
        out.extend_from_slice(format!("checksum {crc:08x}\nend\n").as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VolumeError> {
        let mut pos = 0usize;
        let mut lines: Vec<(usize, &str)> = Vec::new();
        let mut checksum: Option<(u32, usize)> = None;
        let mut lineno = 0;
        loop {
            lineno += 1;
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or(if lineno == 1 {
                    VolumeError::BadMagic
                } else {
                    VolumeError::Malformed {
                        line: lineno,
                        msg: "header not terminated by `end`".into(),
                    }
                })?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| {
                if lineno == 1 {
                    VolumeError::BadMagic
                } else {
                    VolumeError::Malformed {
                        line: lineno,
                        msg: "not UTF-8".into(),
                    }
                }
            })?;
            let start = pos;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("checksum ") {
                let v = u32::from_str_radix(rest.trim(), 16).map_err(|_| VolumeError::Malformed {
                    line: lineno,
                    msg: format!("bad checksum {rest:?}"),
                })?;
                checksum = Some((v, start));
                continue;
            }
            if checksum.is_some() {
                return Err(VolumeError::Malformed {
                    line: lineno,
                    msg: "content after checksum line".into(),
                });
            }
            lines.push((lineno, line));
        }
        let (stored, crc_end) = checksum.ok_or(VolumeError::Malformed {
            line: lineno,
            msg: "missing checksum line".into(),
        })?;

        let mut it = lines.into_iter();
        let (_, first) = it.next().ok_or(VolumeError::BadMagic)?;
        let mut parts = first.split(' ');
        if parts.next() != Some(VOLUME_MAGIC) {
            return Err(VolumeError::BadMagic);
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or(VolumeError::BadMagic)?;
        if version != VOLUME_VERSION {
            return Err(VolumeError::UnsupportedVersion(version));
        }
        let computed = crc32fast::hash(&bytes[..crc_end]);
        if computed != stored {
            return Err(VolumeError::ChecksumMismatch { stored, computed });
        }

        let mut dims: Option<[usize; 4]> = None;
        let mut kind: Option<String> = None;
        let mut channels = Vec::new();
        let mut meta = BTreeMap::new();
        for (line, text) in it {
            let bad = |msg: &str| VolumeError::Malformed {
                line,
                msg: msg.to_string(),
            };
            let (key, rest) = text.split_once(' ').ok_or_else(|| bad("expected `key value`"))?;
            match key {
                "dims" => {
                    let v: Vec<usize> = rest
                        .split(' ')
                        .map(|t| t.parse().map_err(|_| bad("bad dimension")))
                        .collect::<Result<_, _>>()?;
                    if v.len() != 4 {
                        return Err(bad("dims needs 4 values"));
                    }
                    dims = Some([v[0], v[1], v[2], v[3]]);
                }
                "kind" => kind = Some(rest.to_string()),
                "channel" => {
                    let (n, u) = rest.split_once(' ').ok_or_else(|| bad("channel needs name and unit"))?;
                    channels.push(Channel::new(n, u));
                }
                "meta" => {
                    let (k, v) = rest.split_once(' ').ok_or_else(|| bad("meta needs key and value"))?;
                    meta.insert(k.to_string(), v.to_string());
                }
                _ => return Err(bad(&format!("unknown header key {key:?}"))),
            }
        }
        let [x, y, z, c] = dims.ok_or(VolumeError::Malformed {
            line: 0,
            msg: "missing dims".into(),
        })?;
        if channels.len() != c {
            return Err(VolumeError::Malformed {
                line: 0,
                msg: format!("dims declare {c} channels, {} channel lines", channels.len()),
            });
        }
        let n = x
            .checked_mul(y)
            .and_then(|v| v.checked_mul(z))
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| VolumeError::Shape("dimension overflow".into()))?;
        let payload = &bytes[pos..];
        if payload.len() != n * 4 {
            return Err(VolumeError::PayloadLength {
                expected: n * 4,
                found: payload.len(),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut v = Self::new([x, y, z], kind.unwrap_or_default(), channels, data)?;
        v.meta = meta;
        Ok(v)
    }

    pub fn write(&self, path: &Path) -> Result<(), VolumeError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, VolumeError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// One row per voxel: `x,y,z,<channel...>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,z");
        for c in &self.channels {
            s.push(',');
            s.push_str(&c.name);
        }
        s.push('\n');
        let [nx, ny, nz] = self.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    write!(s, "{x},{y},{z}").unwrap();
                    for v in self.voxel(self.linear_index(x, y, z)) {
                        write!(s, ",{v}").unwrap();
                    }
                    s.push('\n');
                }
            }
        }
        s
    }

    /// Inverse of [`Volume::to_csv`]; dims are the coordinate maxima plus one and
    /// voxels missing from the table are NaN. Units are not carried by CSV.
    pub fn from_csv(text: &str, kind: &str) -> Result<Self, VolumeError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or(VolumeError::Malformed {
            line: 1,
            msg: "empty CSV".into(),
        })?;
        let cols: Vec<&str> = head.split(',').map(str::trim).collect();
        if cols.len() < 4 || cols[..3] != ["x", "y", "z"] {
            return Err(VolumeError::Malformed {
                line: 1,
                msg: "header must start with x,y,z and name at least one channel".into(),
            });
        }
        let channels: Vec<Channel> = cols[3..].iter().map(|n| Channel::new(*n, "-")).collect();
        let mut rows = Vec::new();
        for (i, line) in lines {
            let bad = |msg: &str| VolumeError::Malformed {
                line: i + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != cols.len() {
                return Err(bad("wrong field count"));
            }
            let mut xyz = [0usize; 3];
            for k in 0..3 {
                xyz[k] = f[k].parse().map_err(|_| bad("bad coordinate"))?;
            }
            let vals: Vec<f32> = f[3..]
                .iter()
                .map(|t| t.parse().map_err(|_| bad("bad value")))
                .collect::<Result<_, _>>()?;
            rows.push((xyz, vals));
        }
        let mut dims = [0usize; 3];
        for (xyz, _) in &rows {
            for k in 0..3 {
                dims[k] = dims[k].max(xyz[k] + 1);
            }
        }
        let mut vol = Self::filled(dims, kind, channels, f32::NAN)?;
        for (xyz, vals) in rows {
            let v = vol.linear_index(xyz[0], xyz[1], xyz[2]);
            vol.voxel_mut(v).copy_from_slice(&vals);
        }
        Ok(vol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Volume {
        let ch = vec![Channel::new("b0", "a.u."), Channel::new("b10", "a.u.")];
        let data = (0..2 * 3 * 1 * 2).map(|i| i as f32 * 0.5 - 1.0).collect();
        let mut v = Volume::new([2, 3, 1], "signal", ch, data).unwrap();
        v.set_b_values(&[0.0, 10.0]).unwrap();
        v.set_meta("seed", "42").unwrap();
        v
    }

    #[test]
    fn payload_size_and_layout() {
        let v = Volume::filled([2, 2, 1], "signal", (0..17).map(|i| Channel::new(format!("c{i}"), "u")).collect(), 1.0).unwrap();
        let bytes = v.to_bytes();
        let text = String::from_utf8_lossy(&bytes);
        let header_len = text.find("end\n").unwrap() + 4;
        assert_eq!(bytes.len() - header_len, 2 * 2 * 17 * 4);
        let s = sample();
        assert_eq!(s.voxel(s.linear_index(1, 2, 0)), &[4.0, 4.5]);
        assert_eq!(s.b_values(), Some(vec![0.0, 10.0]));
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        let i = bad.iter().position(|&b| b == b'k').unwrap(); // inside "kind"
        bad[i + 5] = b'X';
        assert!(matches!(Volume::from_bytes(&bad), Err(VolumeError::ChecksumMismatch { .. })));
        assert!(matches!(
            Volume::from_bytes(&bytes[..bytes.len() - 3]),
            Err(VolumeError::PayloadLength { .. })
        ));
        assert!(matches!(Volume::from_bytes(b"garbage"), Err(VolumeError::BadMagic)));
        let v2 = String::from_utf8_lossy(&bytes).replacen("IVIMVOL 1", "IVIMVOL 9", 1);
        assert!(matches!(Volume::from_bytes(v2.as_bytes()), Err(VolumeError::UnsupportedVersion(9))));
    }

    #[test]
    fn csv_round_trip() {
        let v = sample();
        let back = Volume::from_csv(&v.to_csv(), "signal").unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.data(), v.data());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Volume::new([1, 1, 1], "k", vec![Channel::new("a", "u")], vec![]).is_err());
        assert!(Volume::new([0, 1, 1], "k", vec![Channel::new("a", "u")], vec![]).is_err());
        assert!(Volume::new([1, 1, 1], "k", vec![Channel::new("a b", "u")], vec![0.0]).is_err());
    }

    proptest! {
        #[test]
        fn binary_round_trip_is_bit_exact(
            dims in (1usize..4, 1usize..4, 1usize..3),
            c in 1usize..5,
            seed in any::<u64>(),
        ) {
            let n = dims.0 * dims.1 * dims.2 * c;
            let mut state = seed;
            let data: Vec<f32> = (0..n).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((state >> 32) as u32)
            }).collect();
            let ch = (0..c).map(|i| Channel::new(format!("ch{i}"), "u")).collect();
            let mut v = Volume::new([dims.0, dims.1, dims.2], "test", ch, data).unwrap();
            v.set_meta("fingerprint", "abc def").unwrap();
            let back = Volume::from_bytes(&v.to_bytes()).unwrap();
            prop_assert_eq!(back.dims(), v.dims());
            prop_assert_eq!(back.meta(), v.meta());
            prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
