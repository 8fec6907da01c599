//! `HLE1` raster files.
//!
//! Layout: the 4 magic bytes `HLE1`, then little-endian `u32` height,
//! width, channels and dtype code (0 = i32, 1 = f32), then the row-major,
//! channel-interleaved payload. Several records may be concatenated in one
//! file; [`read_records`] returns them in order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::embed::{PixelFields, SemanticState};
use crate::error::{HleError, Result};
use crate::grid::{FieldGrid, InstanceMap, LabelMap, PanopticMap};

pub const MAGIC: &[u8; 4] = b"HLE1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    I32 = 0,
    F32 = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    I32(Vec<i32>),
    F32(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub payload: Payload,
}

impl Record {
    pub fn dtype(&self) -> DType {
        match self.payload {
            Payload::I32(_) => DType::I32,
            Payload::F32(_) => DType::F32,
        }
    }

    fn expected_len(&self) -> usize {
        self.height as usize * self.width as usize * self.channels as usize
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let len = match &self.payload {
            Payload::I32(v) => v.len(),
            Payload::F32(v) => v.len(),
        };
        if len != self.expected_len() {
            return Err(HleError::LengthMismatch { left: self.expected_len(), right: len });
        }
        let mut buf = Vec::with_capacity(20 + 4 * len);
        buf.extend_from_slice(MAGIC);
        for v in [self.height, self.width, self.channels, self.dtype() as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        match &self.payload {
            Payload::I32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            Payload::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads one record; `Ok(None)` at a clean end of input.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Self>> {
        let mut magic = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            let n = r.read(&mut magic[got..])?;
            if n == 0 {
                if got == 0 {
                    return Ok(None);
                }
                return Err(HleError::Format("truncated magic".into()));
            }
            got += n;
        }
        if &magic != MAGIC {
            return Err(HleError::Format(format!("bad magic {magic:?}")));
        }
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| HleError::Format("truncated header".into()))?;
        let word = |k: usize| u32::from_le_bytes(header[4 * k..4 * k + 4].try_into().unwrap());
        let (height, width, channels, code) = (word(0), word(1), word(2), word(3));
        let len = height as usize * width as usize * channels as usize;
        let mut bytes = vec![0u8; 4 * len];
        r.read_exact(&mut bytes).map_err(|_| HleError::Format("truncated payload".into()))?;
        let chunks = bytes.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());
        let payload = match code {
            0 => Payload::I32(chunks.map(i32::from_le_bytes).collect()),
            1 => Payload::F32(chunks.map(f32::from_le_bytes).collect()),
            other => return Err(HleError::Format(format!("unknown dtype code {other}"))),
        };
        Ok(Some(Self { height, width, channels, payload }))
    }

    fn ints(&self) -> Result<&[i32]> {
        match &self.payload {
            Payload::I32(v) => Ok(v),
            Payload::F32(_) => Err(HleError::Format("expected i32 payload".into())),
        }
    }

    fn floats(&self) -> Result<&[f32]> {
        match &self.payload {
            Payload::F32(v) => Ok(v),
            Payload::I32(_) => Err(HleError::Format("expected f32 payload".into())),
        }
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        r.write_to(&mut buf)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let bytes = fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let mut out = Vec::new();
    while let Some(r) = Record::read_from(&mut cursor)? {
        out.push(r);
    }
    Ok(out)
}

fn single(path: &Path) -> Result<Record> {
    let mut recs = read_records(path)?;
    if recs.len() != 1 {
        return Err(HleError::Format(format!("{}: expected 1 record, found {}", path.display(), recs.len())));
    }
    Ok(recs.remove(0))
}

fn int_record(height: usize, width: usize, data: impl Iterator<Item = u32>) -> Record {
    Record {
        height: height as u32,
        width: width as u32,
        channels: 1,
        payload: Payload::I32(data.map(|v| v as i32).collect()),
    }
}

fn to_unsigned(values: &[i32]) -> Result<Vec<u32>> {
    values
        .iter()
        .map(|&v| u32::try_from(v).map_err(|_| HleError::Format(format!("negative id {v}"))))
        .collect()
}

impl From<&LabelMap> for Record {
    fn from(m: &LabelMap) -> Self {
        int_record(m.height, m.width, m.data.iter().copied())
    }
}

impl From<&InstanceMap> for Record {
    fn from(m: &InstanceMap) -> Self {
        int_record(m.height, m.width, m.data.iter().copied())
    }
}

impl From<&FieldGrid> for Record {
    fn from(f: &FieldGrid) -> Self {
        Record {
            height: f.height as u32,
            width: f.width as u32,
            channels: f.channels as u32,
            payload: Payload::F32(f.data.iter().map(|&v| v as f32).collect()),
        }
    }
}

impl TryFrom<&Record> for LabelMap {
    type Error = HleError;
    fn try_from(r: &Record) -> Result<Self> {
        LabelMap::new(r.height as usize, r.width as usize, to_unsigned(r.ints()?)?)
    }
}

impl TryFrom<&Record> for InstanceMap {
    type Error = HleError;
    fn try_from(r: &Record) -> Result<Self> {
        InstanceMap::new(r.height as usize, r.width as usize, to_unsigned(r.ints()?)?)
    }
}

impl TryFrom<&Record> for FieldGrid {
    type Error = HleError;
    fn try_from(r: &Record) -> Result<Self> {
        let data = r.floats()?.iter().map(|&v| v as f64).collect();
        FieldGrid::new(r.height as usize, r.width as usize, r.channels as usize, data)
    }
}

pub fn write_labels(path: &Path, m: &LabelMap) -> Result<()> {
    write_records(path, &[m.into()])
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    LabelMap::try_from(&single(path)?)
}

pub fn write_instances(path: &Path, m: &InstanceMap) -> Result<()> {
    write_records(path, &[m.into()])
}

pub fn read_instances(path: &Path) -> Result<InstanceMap> {
    InstanceMap::try_from(&single(path)?)
}

pub fn write_field(path: &Path, f: &FieldGrid) -> Result<()> {
    write_records(path, &[f.into()])
}

pub fn read_field(path: &Path) -> Result<FieldGrid> {
    FieldGrid::try_from(&single(path)?)
}

/// Pixel fields as one grid with `D + 3` channels: embedding, sigma,
/// spatial sigma, seed.
pub fn write_pixel_fields(path: &Path, fields: &PixelFields) -> Result<()> {
    write_field(path, &fields.to_packed())
}

pub fn read_pixel_fields(path: &Path) -> Result<PixelFields> {
    PixelFields::from_packed(&read_field(path)?)
}

/// Semantic state as two records: the `|C| x 1 x D` means, then the
/// `|C| x 1 x 1` bandwidths.
pub fn write_state(path: &Path, state: &SemanticState) -> Result<()> {
    let k = state.num_classes();
    let means = FieldGrid::new(k, 1, state.dim(), state.mu_hat.clone())?;
    let sigmas = FieldGrid::new(k, 1, 1, state.sigma_sem.clone())?;
    write_records(path, &[(&means).into(), (&sigmas).into()])
}

pub fn read_state(path: &Path) -> Result<SemanticState> {
    let recs = read_records(path)?;
    if recs.len() != 2 {
        return Err(HleError::Format(format!("state file needs 2 records, found {}", recs.len())));
    }
    let means = FieldGrid::try_from(&recs[0])?;
    let sigmas = FieldGrid::try_from(&recs[1])?;
    SemanticState::new(means.channels, means.data, sigmas.data)
}

/// Writes the raster to `path` and the segment table to `<path>.segments`.
pub fn write_panoptic(path: &Path, map: &PanopticMap) -> Result<()> {
    write_records(path, &[int_record(map.height, map.width, map.data.iter().copied())])?;
    fs::write(segments_path(path), map.segments_to_text())?;
    Ok(())
}

pub fn read_panoptic(path: &Path) -> Result<PanopticMap> {
    let r = single(path)?;
    let data = to_unsigned(r.ints()?)?;
    let segments = PanopticMap::parse_segments(&fs::read_to_string(segments_path(path))?)?;
    let map = PanopticMap { height: r.height as usize, width: r.width as usize, data, segments };
    map.check()?;
    Ok(map)
}

pub fn segments_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".segments");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let m = LabelMap::new(1, 2, vec![3, 255]).unwrap();
        let mut buf = Vec::new();
        Record::from(&m).write_to(&mut buf).unwrap();
        let expected: Vec<u8> = [
            b"HLE1".to_vec(),
            1u32.to_le_bytes().to_vec(),
            2u32.to_le_bytes().to_vec(),
            1u32.to_le_bytes().to_vec(),
            0u32.to_le_bytes().to_vec(),
            3i32.to_le_bytes().to_vec(),
            255i32.to_le_bytes().to_vec(),
        ]
        .concat();
        assert_eq!(buf, expected);
    }

    #[test]
    fn float_grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.hle");
        let f = FieldGrid::new(2, 1, 3, vec![0.5, -1.0, 2.25, 0.0, 1.0, -0.125]).unwrap();
        write_field(&p, &f).unwrap();
        assert_eq!(read_field(&p).unwrap(), f);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
    }

    #[test]
    fn rejects_garbage() {
        let mut bad: &[u8] = b"HLE2aaaaaaaaaaaaaaaa";
        assert!(Record::read_from(&mut bad).is_err());
        let mut short: &[u8] = b"HL";
        assert!(Record::read_from(&mut short).is_err());
        let mut empty: &[u8] = b"";
        assert!(Record::read_from(&mut empty).unwrap().is_none());
    }

    #[test]
    fn panoptic_with_segment_table() {
        use crate::grid::Segment;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pan.hle");
        let map = PanopticMap {
            height: 1,
            width: 3,
            data: vec![0, 4, 9],
            segments: vec![
                Segment { id: 4, class_id: 3, is_thing: true },
                Segment { id: 9, class_id: 0, is_thing: false },
            ],
        };
        write_panoptic(&p, &map).unwrap();
        assert_eq!(fs::read_to_string(segments_path(&p)).unwrap(), "4\t3\tthing\n9\t0\tstuff\n");
        assert_eq!(read_panoptic(&p).unwrap(), map);
    }
}
