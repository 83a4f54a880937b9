//! FLNE binary and CSV dataset files.
//!
//! FLNE layout, all little-endian:
//!
//! ```text
//! magic "FLNE" (4) | version u16 = 1 | flags u16 | N u64 | d u32 | C u32
//! N records of: d x f32 features | u16 observed label | [u16 true label]
//! ```
//!
//! Flag bit 0 marks the presence of true labels. Bit 1 marks a test split.
//! Other bits must be zero.

use std::fs;
use std::path::Path;

use super::{EmbeddingDataset, Example, Split};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FLNE";
pub const VERSION: u16 = 1;
pub const FLAG_TRUE_LABELS: u16 = 1;
pub const FLAG_TEST_SPLIT: u16 = 1 << 1;
const HEADER_LEN: usize = 24;

pub fn to_flne(ds: &EmbeddingDataset) -> Result<Vec<u8>> {
    if ds.num_classes > u16::MAX as usize + 1 {
        return Err(Error::param("FLNE stores labels as u16"));
    }
    let mut flags = 0;
    if ds.has_oracle {
        flags |= FLAG_TRUE_LABELS;
    }
    if ds.split == Split::Test {
        flags |= FLAG_TEST_SPLIT;
    }
    let record = ds.dim * 4 + if ds.has_oracle { 4 } else { 2 };
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * record);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.dim as u32).to_le_bytes());
    out.extend_from_slice(&(ds.num_classes as u32).to_le_bytes());
    for e in &ds.examples {
        for v in &e.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(e.observed_label as u16).to_le_bytes());
        if ds.has_oracle {
            out.extend_from_slice(&(e.true_label as u16).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                expected: (end - self.bytes.len()) as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn parse_flne(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let header = |offset: u64, reason: &str| Error::MalformedHeader {
        offset,
        reason: reason.to_string(),
    };
    if cur.take(4)? != MAGIC {
        return Err(header(0, "missing FLNE magic"));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(header(4, &format!("unsupported version {version}")));
    }
    let flags = cur.u16()?;
    if flags & !(FLAG_TRUE_LABELS | FLAG_TEST_SPLIT) != 0 {
        return Err(header(6, &format!("unknown flag bits {flags:#06x}")));
    }
    let n = cur.u64()?;
    let dim = cur.u32()? as usize;
    if dim == 0 {
        return Err(header(16, "feature dimension is zero"));
    }
    let num_classes = cur.u32()? as usize;
    if num_classes < 2 {
        return Err(header(20, "fewer than two classes"));
    }
    let has_oracle = flags & FLAG_TRUE_LABELS != 0;
    let split = if flags & FLAG_TEST_SPLIT != 0 {
        Split::Test
    } else {
        Split::Train
    };

    let record_len = dim * 4 + if has_oracle { 4 } else { 2 };
    let payload = (bytes.len() - HEADER_LEN) as u64;
    let expected = n.checked_mul(record_len as u64);
    if let Some(expected) = expected {
        if payload > expected {
            return Err(Error::DimensionMismatch {
                location: format!("payload starting at byte {HEADER_LEN}"),
                expected: expected as usize,
                found: payload as usize,
            });
        }
    }

    let mut examples = Vec::with_capacity((payload / record_len as u64).min(n) as usize);
    for record in 0..n as usize {
        let raw = cur.take(dim * 4)?;
        let features = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let observed_label = cur.u16()? as usize;
        let true_label = if has_oracle {
            cur.u16()? as usize
        } else {
            observed_label
        };
        for label in [observed_label, true_label] {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    record,
                    label,
                    num_classes,
                });
            }
        }
        examples.push(Example {
            features,
            observed_label,
            true_label,
        });
    }
    let ds = EmbeddingDataset {
        dim,
        num_classes,
        split,
        has_oracle,
        examples,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn to_csv(ds: &EmbeddingDataset) -> String {
    let mut out = String::new();
    let mut header: Vec<String> = (0..ds.dim).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    if ds.has_oracle {
        header.push("true_label".into());
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for e in &ds.examples {
        let mut fields: Vec<String> = e.features.iter().map(|v| v.to_string()).collect();
        fields.push(e.observed_label.to_string());
        if ds.has_oracle {
            fields.push(e.true_label.to_string());
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// CSV datasets do not record the class count; it is `max label + 1`.
pub fn parse_csv(text: &str) -> Result<EmbeddingDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let csv_err = |line: u64, e: &dyn std::fmt::Display| Error::Csv {
        line,
        reason: e.to_string(),
    };
    let headers = reader.headers().map_err(|e| csv_err(1, &e))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let (dim, has_oracle) = match names.as_slice() {
        [feats @ .., "label", "true_label"] => (feats.len(), true),
        [feats @ .., "label"] => (feats.len(), false),
        _ => return Err(csv_err(1, &"header must end in label[,true_label]")),
    };
    for (i, name) in names[..dim].iter().enumerate() {
        if *name != format!("f{i}") {
            return Err(csv_err(1, &format!("expected column f{i}, found {name:?}")));
        }
    }
    if dim == 0 {
        return Err(csv_err(1, &"no feature columns"));
    }
    let width = names.len();

    let mut examples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, &e)
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(Error::DimensionMismatch {
                location: format!("line {line}"),
                expected: width,
                found: record.len(),
            });
        }
        let features = record
            .iter()
            .take(dim)
            .map(|f| f.parse::<f32>().map_err(|e| csv_err(line, &e)))
            .collect::<Result<Vec<_>>>()?;
        let label = |k: usize| {
            record[k]
                .parse::<usize>()
                .map_err(|e| csv_err(line, &format!("label {:?}: {e}", &record[k])))
        };
        let observed_label = label(dim)?;
        let true_label = if has_oracle { label(dim + 1)? } else { observed_label };
        examples.push(Example {
            features,
            observed_label,
            true_label,
        });
    }
    let num_classes = examples
        .iter()
        .map(|e| e.observed_label.max(e.true_label) + 1)
        .max()
        .unwrap_or(0)
        .max(2);
    let ds = EmbeddingDataset {
        dim,
        num_classes,
        split: Split::Train,
        has_oracle,
        examples,
    };
    ds.validate()?;
    Ok(ds)
}

/// Read a dataset file; FLNE is recognized by its magic bytes, anything else
/// is parsed as CSV.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    if bytes.starts_with(MAGIC) {
        parse_flne(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|e| Error::Csv {
            line: 0,
            reason: e.to_string(),
        })?;
        parse_csv(&text)
    }
}

/// Write FLNE, or CSV when the extension is `.csv`.
pub fn save_dataset(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if path.extension().is_some_and(|e| e == "csv") {
        to_csv(ds).into_bytes()
    } else {
        to_flne(ds)?
    };
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}
