//! Line-delimited quadruplet manifest.
//!
//! One record per line; `key=value` fields separated by 0x1F in a fixed
//! order. Backslash, CR, LF and 0x1F inside values are escaped as `\\`,
//! `\r`, `\n` and `\u`. Unverified records carry `-` in all nine
//! verification slots.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::types::{DataSource, Quadruplet, VerificationRecord};
use crate::error::{Error, Result};

pub const SEPARATOR: char = '\u{1f}';

const TEXT_KEYS: [&str; 9] = [
    "id",
    "provenance",
    "source_video",
    "target_video",
    "raw_ref",
    "harmonized_ref",
    "p_insert",
    "p_desc",
    "p_style",
];
const BIT_KEYS: [&str; 9] = ["vA1", "vA2", "vA3", "vA4", "vB1", "vB2", "vB3", "vB4", "accepted"];

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            SEPARATOR => out.push_str("\\u"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('u') => out.push(SEPARATOR),
            Some(c) => return Err(format!("unknown escape `\\{c}`")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

fn path_text(p: &Path) -> Result<&str> {
    p.to_str()
        .ok_or_else(|| Error::Config(format!("path {} is not valid UTF-8", p.display())))
}

/// One manifest line, without the trailing newline.
pub fn encode_record(q: &Quadruplet) -> Result<String> {
    let texts = [
        q.id.as_str(),
        q.provenance.as_str(),
        path_text(&q.source_video)?,
        path_text(&q.target_video)?,
        path_text(&q.raw_ref)?,
        path_text(&q.harmonized_ref)?,
        q.p_insert.as_str(),
        q.p_desc.as_str(),
        q.p_style.as_str(),
    ];
    let bits: Vec<&str> = match q.verification {
        None => vec!["-"; 9],
        Some(v) => v
            .agent_a()
            .iter()
            .chain(&v.agent_b())
            .chain(std::iter::once(&v.accepted()))
            .map(|&b| if b { "1" } else { "0" })
            .collect(),
    };
    let fields: Vec<String> = TEXT_KEYS
        .iter()
        .zip(texts)
        .map(|(k, v)| format!("{k}={}", escape(v)))
        .chain(BIT_KEYS.iter().zip(bits).map(|(k, v)| format!("{k}={v}")))
        .collect();
    Ok(fields.join(&SEPARATOR.to_string()))
}

/// Parse one line; `line_no` is 1-based and only used for errors.
pub fn decode_record(line: &str, line_no: usize) -> Result<Quadruplet> {
    let err = |message: String| Error::ManifestParse { line: line_no, message };
    let fields: Vec<&str> = line.split(SEPARATOR).collect();
    let expected = TEXT_KEYS.len() + BIT_KEYS.len();
    if fields.len() != expected {
        return Err(err(format!("expected {expected} fields, found {}", fields.len())));
    }
    let mut values = Vec::with_capacity(expected);
    for (field, key) in fields.iter().zip(TEXT_KEYS.iter().chain(&BIT_KEYS)) {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| err(format!("field `{key}` has no `=`")))?;
        if k != *key {
            return Err(err(format!("expected key `{key}`, found `{k}`")));
        }
        values.push(v);
    }
    let mut text = Vec::with_capacity(TEXT_KEYS.len());
    for (k, v) in TEXT_KEYS.iter().zip(&values) {
        text.push(unescape(v).map_err(|m| err(format!("{k}: {m}")))?);
    }
    let bits = &values[TEXT_KEYS.len()..];
    let verification = if bits.iter().all(|b| *b == "-") {
        None
    } else {
        let mut parsed = [false; 9];
        for (i, b) in bits.iter().enumerate() {
            parsed[i] = match *b {
                "1" => true,
                "0" => false,
                other => return Err(err(format!("{}: bad bit `{other}`", BIT_KEYS[i]))),
            };
        }
        let rec = VerificationRecord::new(
            [parsed[0], parsed[1], parsed[2], parsed[3]],
            [parsed[4], parsed[5], parsed[6], parsed[7]],
        );
        if rec.accepted() != parsed[8] {
            return Err(err("accepted bit disagrees with the verification entries".into()));
        }
        Some(rec)
    };
    let mut text = text.into_iter();
    let mut next = || text.next().expect("nine text fields");
    let id = next();
    if id.is_empty() {
        return Err(err("empty id".into()));
    }
    let provenance: DataSource = next().parse().map_err(err)?;
    let q = Quadruplet {
        id,
        provenance,
        source_video: PathBuf::from(next()),
        target_video: PathBuf::from(next()),
        raw_ref: PathBuf::from(next()),
        harmonized_ref: PathBuf::from(next()),
        p_insert: next(),
        p_desc: next(),
        p_style: next(),
        verification,
    };
    if q.p_insert.is_empty() {
        return Err(err("empty p_insert".into()));
    }
    Ok(q)
}

pub fn persist_manifest(quadruplets: &[Quadruplet], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for q in quadruplets {
        out.push_str(&encode_record(q)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Quadruplet>> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<Quadruplet>> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    if lines.last() == Some(&"") {
        lines.pop();
    } else if !text.is_empty() {
        return Err(Error::ManifestParse {
            line: lines.len(),
            message: "last record is not newline-terminated".into(),
        });
    }
    lines.iter().enumerate().map(|(i, l)| decode_record(l, i + 1)).collect()
}

/// Appends whole records from any number of threads.
pub struct ManifestWriter {
    inner: Mutex<BufWriter<File>>,
}

impl ManifestWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(ManifestWriter {
            inner: Mutex::new(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn append(&self, q: &Quadruplet) -> Result<()> {
        let mut line = encode_record(q)?;
        line.push('\n');
        let mut w = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        w.write_all(line.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let mut w = self.inner.into_inner().unwrap_or_else(|p| p.into_inner());
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(i: usize, verified: Option<VerificationRecord>) -> Quadruplet {
        Quadruplet {
            id: format!("q{i}"),
            provenance: DataSource::SynthesizedFromT2V,
            source_video: format!("q{i}/source_video.dsi").into(),
            target_video: format!("q{i}/target_video.dsi").into(),
            raw_ref: format!("q{i}/raw_ref.dsi").into(),
            harmonized_ref: format!("q{i}/harmonized_ref.dsi").into(),
            p_insert: format!("put \"it\" here\nthen \\ there {i}"),
            p_desc: "a=b\u{1f}c\r".into(),
            p_style: String::new(),
            verification: verified,
        }
    }

    #[test]
    fn escape_round_trip() {
        for s in ["", "\\", "\\n", "a\u{1f}b", "\n\r\\u", "plain"] {
            assert_eq!(unescape(&escape(s)).unwrap(), s);
            assert!(!escape(s).contains(['\n', '\u{1f}']));
        }
    }

    #[test]
    fn three_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let mut a = [true; 4];
        a[2] = false;
        let qs = vec![
            quad(0, None),
            quad(1, Some(VerificationRecord::new([true; 4], [true; 4]))),
            quad(2, Some(VerificationRecord::new(a, [true; 4]))),
        ];
        persist_manifest(&qs, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), qs);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text
            .lines()
            .next()
            .unwrap()
            .starts_with("id=q0\u{1f}provenance=SynthesizedFromT2V"));
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        persist_manifest(&[], &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"");
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_reports_number() {
        let l1 = encode_record(&quad(0, None)).unwrap();
        let l2 = encode_record(&quad(1, None)).unwrap();
        let l3 = encode_record(&quad(2, None)).unwrap();
        let text = format!("{l1}\n{}\n{l3}\n", &l2[..l2.len() / 2]);
        match parse_manifest(&text) {
            Err(Error::ManifestParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let unterminated = format!("{l1}\n{l2}");
        assert!(matches!(
            parse_manifest(&unterminated),
            Err(Error::ManifestParse { line: 2, .. })
        ));
    }

    #[test]
    fn inconsistent_accept_bit_rejected() {
        let line = encode_record(&quad(0, Some(VerificationRecord::new([true; 4], [true; 4])))).unwrap();
        let bad = line.replace("accepted=1", "accepted=0");
        assert!(decode_record(&bad, 1).is_err());
    }

    #[test]
    fn concurrent_writer_keeps_lines_whole() {
        use rayon::prelude::*;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let w = ManifestWriter::create(&path).unwrap();
        (0..64).into_par_iter().for_each(|i| w.append(&quad(i, None)).unwrap());
        w.finish().unwrap();
        let mut got = load_manifest(&path).unwrap();
        got.sort_by_key(|q| q.id[1..].parse::<usize>().unwrap());
        assert_eq!(got, (0..64).map(|i| quad(i, None)).collect::<Vec<_>>());
    }
}
