//! `MEMB` recording container and CSV ingestion.
//!
//! Layout (little-endian): magic `MEMB`, u32 version (1), u32 recording
//! count, then per recording u32 T, u32 V, u8 label, u16 subject,
//! u16 session and T·V f32 samples in row-major order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::RecordingSession;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MEMB";
const VERSION: u32 = 1;

pub fn encode(recordings: &[RecordingSession]) -> Result<Vec<u8>> {
    let payload: usize = recordings.iter().map(|r| 13 + 4 * r.samples.numel()).sum();
    let mut buf = Vec::with_capacity(12 + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(recordings.len()).map_err(|_| Error::Data("too many recordings".into()))?.to_le_bytes());
    for r in recordings {
        let label = u8::try_from(r.label).map_err(|_| Error::Data(format!("label {} exceeds u8", r.label)))?;
        buf.extend_from_slice(&(r.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(r.channels() as u32).to_le_bytes());
        buf.push(label);
        buf.extend_from_slice(&r.subject.to_le_bytes());
        buf.extend_from_slice(&r.session.to_le_bytes());
        for &x in r.samples.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated container: wanted {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<RecordingSession>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::Format("file too short for a container header".into()))? != MAGIC {
        return Err(Error::Format("bad magic number, not a MEMB container".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let t = r.u32()? as usize;
        let v = r.u32()? as usize;
        let label = r.take(1)?[0] as usize;
        let subject = r.u16()?;
        let session = r.u16()?;
        let n = t.checked_mul(v).ok_or_else(|| Error::Format("recording size overflows".into()))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("recording size overflows".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        out.push(RecordingSession::new(Tensor::new(&[t, v], data)?, label, subject, session)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last recording", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, recordings: &[RecordingSession]) -> Result<usize> {
    let bytes = encode(recordings)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<RecordingSession>> {
    decode(&fs::read(path)?)
}

/// SHA-256 of the encoded container, hex.
pub fn dataset_digest(recordings: &[RecordingSession]) -> Result<String> {
    let digest = Sha256::digest(encode(recordings)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Read a `T×V` CSV recording. Metadata comes from the sidecar file
/// `<path>.meta`, one line of `label=<g> subject=<s> session=<e>`.
pub fn read_csv_recording(path: impl AsRef<Path>) -> Result<RecordingSession> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut width = None;
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), line_no + 1)))?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Data(format!(
                    "{}:{}: expected {w} columns, found {}",
                    path.display(),
                    line_no + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        data.extend(row);
    }
    let v = width.ok_or_else(|| Error::Data(format!("{} has no samples", path.display())))?;

    let mut meta_path = path.as_os_str().to_owned();
    meta_path.push(".meta");
    let meta = fs::read_to_string(&meta_path)?;
    let (mut label, mut subject, mut session) = (None, None, None);
    for field in meta.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()) {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("metadata field {field:?} is not key=value")))?;
        let parsed: u64 = value.parse().map_err(|_| Error::Data(format!("metadata value {value:?} is not an integer")))?;
        match key {
            "label" => label = Some(parsed),
            "subject" => subject = Some(parsed),
            "session" => session = Some(parsed),
            other => return Err(Error::Data(format!("unknown metadata key {other:?}"))),
        }
    }
    let missing = |k: &str| Error::Data(format!("metadata for {} lacks {k}", path.display()));
    let to_u16 = |x: u64, k: &str| u16::try_from(x).map_err(|_| Error::Data(format!("{k} {x} exceeds u16")));
    RecordingSession::new(
        Tensor::new(&[data.len() / v, v], data)?,
        label.ok_or_else(|| missing("label"))? as usize,
        to_u16(subject.ok_or_else(|| missing("subject"))?, "subject")?,
        to_u16(session.ok_or_else(|| missing("session"))?, "session")?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<RecordingSession> {
        (0..3)
            .map(|i| {
                let t = Tensor::from_fn(&[5 + i, 3], |k| ((k * 7 + i) as f32 * 0.25 - 1.0) as f64);
                RecordingSession::new(t, i, 10 + i as u16, 1).unwrap()
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let recs = sample();
        assert_eq!(decode(&encode(&recs).unwrap()).unwrap(), recs);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn header_corruption_is_format_error() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format(m)) if m.contains("version")));
        assert!(matches!(decode(&bytes[..2]), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_format_error() {
        let bytes = encode(&sample()).unwrap();
        for cut in [11, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample()[..1]).unwrap();
        assert_eq!(&bytes[..4], b"MEMB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 3);
        assert_eq!(bytes[20], 0);
        assert_eq!(u16::from_le_bytes(bytes[21..23].try_into().unwrap()), 10);
        assert_eq!(u16::from_le_bytes(bytes[23..25].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 25 + 15 * 4);
    }

    #[test]
    fn csv_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.csv");
        fs::write(&path, "1,2,3\n4,5,6\n\n7,8,9\n").unwrap();
        fs::write(dir.path().join("rec.csv.meta"), "label=2 subject=3 session=1\n").unwrap();
        let r = read_csv_recording(&path).unwrap();
        assert_eq!(r.samples.shape(), &[3, 3]);
        assert_eq!((r.label, r.subject, r.session), (2, 3, 1));

        fs::write(&path, "1,2\n3\n").unwrap();
        assert!(matches!(read_csv_recording(&path), Err(Error::Data(_))));
    }
}
