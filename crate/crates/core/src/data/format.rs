//! `FVD1` dataset files and the assignment sidecar.
//!
//! ```text
//! "FVD1" | u32 count | u32 height | u32 width | u32 channels | u32 num_classes
//! per sample: u8 label | height*width*channels × u8 pixel (value * 255)
//! ```
//!
//! The sidecar is CSV with header `index,client_id,split`, one row per sample.

use std::fmt::Write as _;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FVD1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        }
    }
}

/// `(client_id, split)` for every sample, indexed by sample position.
pub type Assignment = Vec<(usize, SplitKind)>;

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    if data.num_classes > 256 {
        return Err(Error::Data(format!("{} classes do not fit a u8 label", data.num_classes)));
    }
    let mut out = Vec::with_capacity(24 + data.len() * (1 + data.pixels_per_sample()));
    out.extend_from_slice(MAGIC);
    for v in [data.len(), data.height, data.width, data.channels, data.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for i in 0..data.len() {
        out.push(data.labels()[i] as u8);
        out.extend(data.image(i).iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let fmt = |offset: usize, msg: String| Error::Format { offset, msg };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fmt(0, "bad magic, expected FVD1".into()));
    }
    if bytes.len() < 24 {
        return Err(fmt(bytes.len(), "truncated header".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (count, h, w, c, classes) = (field(0), field(1), field(2), field(3), field(4));
    let per = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| fmt(8, "geometry overflows".into()))?;
    let record = per + 1;
    let need = count.checked_mul(record).and_then(|v| v.checked_add(24));
    match need {
        Some(n) if n == bytes.len() => {}
        Some(n) if n > bytes.len() => {
            let complete = (bytes.len() - 24) / record;
            return Err(fmt(24 + complete * record, format!("truncated in sample {complete} of {count}")));
        }
        Some(n) => return Err(fmt(n, format!("{} trailing bytes", bytes.len() - n))),
        None => return Err(fmt(4, "sample count overflows".into())),
    }
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * per);
    for i in 0..count {
        let at = 24 + i * record;
        let y = bytes[at] as usize;
        if y >= classes {
            return Err(fmt(at, format!("label {y} outside [0, {classes})")));
        }
        labels.push(y);
        pixels.extend(bytes[at + 1..at + record].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(h, w, c, classes, pixels, labels)
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_dataset(data)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

pub fn write_assignment(assignment: &Assignment, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("index,client_id,split\n");
    for (i, (c, k)) in assignment.iter().enumerate() {
        writeln!(s, "{i},{c},{}", k.as_str()).unwrap();
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_assignment(path: impl AsRef<Path>) -> Result<Assignment> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("index,client_id,split") {
        return Err(Error::Data(format!("{}: missing header index,client_id,split", path.display())));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Data(format!("{}: line {}: malformed row `{line}`", path.display(), n + 2));
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 3 {
            return Err(bad());
        }
        let index: usize = cols[0].parse().map_err(|_| bad())?;
        let client: usize = cols[1].parse().map_err(|_| bad())?;
        let kind = match cols[2] {
            "train" => SplitKind::Train,
            "test" => SplitKind::Test,
            _ => return Err(bad()),
        };
        if index != out.len() {
            return Err(Error::Data(format!(
                "{}: line {}: expected index {}, found {index}",
                path.display(),
                n + 2,
                out.len()
            )));
        }
        out.push((client, kind));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let px = (0..12).map(|i| i as f32 * 20.0 / 255.0).collect();
        Dataset::new(2, 2, 1, 3, px, vec![0, 2, 1]).unwrap()
    }

    #[test]
    fn round_trip() {
        let d = tiny();
        let bytes = encode_dataset(&d).unwrap();
        assert_eq!(bytes.len(), 24 + 3 * 5);
        assert_eq!(&bytes[24..29], &[0, 0, 20, 40, 60]);
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn errors_carry_offsets() {
        let bytes = encode_dataset(&tiny()).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_dataset(&bytes[..10]), Err(Error::Format { .. })));
        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 1]),
            Err(Error::Format { offset: 34, .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_dataset(&extra), Err(Error::Format { offset: 39, .. })));
        let mut label = bytes.clone();
        label[29] = 9;
        assert!(matches!(decode_dataset(&label), Err(Error::Format { offset: 29, .. })));
    }

    #[test]
    fn assignment_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let a: Assignment = vec![(0, SplitKind::Train), (2, SplitKind::Test), (1, SplitKind::Train)];
        write_assignment(&a, &p).unwrap();
        assert_eq!(read_assignment(&p).unwrap(), a);
        std::fs::write(&p, "index,client_id,split\n0,0,valid\n").unwrap();
        assert!(read_assignment(&p).is_err());
        std::fs::write(&p, "index,client_id,split\n1,0,train\n").unwrap();
        assert!(read_assignment(&p).is_err());
    }
}
