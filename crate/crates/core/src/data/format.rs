//! Text sequence files and the CSV manifest.
//!
//! Sequence file: a `T V C` header line followed by `T` lines of `V·C`
//! space-separated floats in joint-major order. Manifest: CSV with header
//! `path,label,subject,view`, paths relative to the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::corpus::ManifestEntry;
use crate::error::{Error, Result};
use crate::numerics::DenseArray;

pub const MANIFEST_HEADER: &str = "path,label,subject,view";

pub fn read_sequence(path: &Path) -> Result<DenseArray> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sequence(&text, path)
}

pub(crate) fn parse_sequence(text: &str, path: &Path) -> Result<DenseArray> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing \"T V C\" header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|tok| tok.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::parse(path, 1, format!("malformed header {header:?}: {e}")))?;
    let &[t, v, c] = dims.as_slice() else {
        return Err(Error::parse(path, 1, format!("header must hold three extents, got {header:?}")));
    };
    if t == 0 || v == 0 || c == 0 {
        return Err(Error::parse(path, 1, format!("header extents must be positive, got {header:?}")));
    }
    let width = v * c;
    let mut data = Vec::with_capacity(t * width);
    let mut frames = 0;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if frames == t {
            return Err(Error::parse(path, lineno, format!("more than the {t} frames promised by the header")));
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let x: f64 = tok
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("not a number: {tok:?}")))?;
            if !x.is_finite() {
                return Err(Error::parse(path, lineno, format!("non-finite value {tok:?}")));
            }
            data.push(x);
        }
        let got = data.len() - before;
        if got != width {
            return Err(Error::parse(path, lineno, format!("expected {width} values (V·C), found {got}")));
        }
        frames += 1;
    }
    if frames != t {
        let last = text.lines().count();
        return Err(Error::parse(path, last, format!("header promises {t} frames, file has {frames}")));
    }
    DenseArray::new(vec![t, v, c], data)
}

pub(crate) fn format_sequence(frames: &DenseArray) -> String {
    let (t, v, c) = match frames.shape() {
        &[t, v, c] => (t, v, c),
        other => panic!("sequence must be rank 3, got {other:?}"),
    };
    let mut out = format!("{t} {v} {c}\n");
    for f in 0..t {
        let row = &frames.data()[f * v * c..(f + 1) * v * c];
        for (i, x) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{x}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub fn write_sequence(path: &Path, frames: &DenseArray) -> Result<()> {
    crate::data::validate_frames(frames)?;
    fs::write(path, format_sequence(frames)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        Some((_, h)) => {
            return Err(Error::parse(path, 1, format!("expected header {MANIFEST_HEADER:?}, got {h:?}")))
        }
        None => return Err(Error::Data(format!("{}: empty corpus", path.display()))),
    }
    let mut entries = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [p, label, subject, view] = fields.as_slice() else {
            return Err(Error::parse(path, lineno, format!("expected 4 fields, got {}", fields.len())));
        };
        let opt = |s: &str, what: &str| -> Result<Option<u64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::parse(path, lineno, format!("bad {what} {s:?}")))
            }
        };
        if p.is_empty() {
            return Err(Error::parse(path, lineno, "empty sequence path"));
        }
        entries.push(ManifestEntry {
            path: p.to_string(),
            label: opt(label, "label")?.map(|x| x as usize),
            subject: opt(subject, "subject")?.map(|x| x as u32),
            view: opt(view, "view")?.map(|x| x as u32),
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    let show = |x: Option<u64>| x.map(|v| v.to_string()).unwrap_or_default();
    for e in entries {
        if e.path.contains(',') || e.path.contains('\n') {
            return Err(Error::Data(format!("manifest path {:?} contains a separator", e.path)));
        }
        writeln!(
            out,
            "{},{},{},{}",
            e.path,
            show(e.label.map(|x| x as u64)),
            show(e.subject.map(u64::from)),
            show(e.view.map(u64::from))
        )
        .expect("write to string");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<DenseArray> {
        parse_sequence(text, Path::new("fixture.txt"))
    }

    #[test]
    fn parses_fixture() {
        let a = parse("2 1 3\n0 1 2\n3.5 -4 5e-1\n").unwrap();
        assert_eq!(a.shape(), &[2, 1, 3]);
        assert_eq!(a.data(), &[0.0, 1.0, 2.0, 3.5, -4.0, 0.5]);
    }

    #[test]
    fn short_file_is_rejected() {
        let err = parse("4 1 1\n1\n2\n3\n").unwrap_err();
        assert!(err.to_string().contains("promises 4 frames"), "{err}");
        assert!(err.to_string().starts_with("fixture.txt:"), "{err}");
    }

    #[test]
    fn errors_name_the_line() {
        let err = parse("2 1 2\n1 2\n3\n").unwrap_err();
        assert!(err.to_string().starts_with("fixture.txt:3:"), "{err}");
        let err = parse("1 1 1\nnan\n").unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
        let err = parse("1 x 1\n1\n").unwrap_err();
        assert!(err.to_string().contains("malformed header"), "{err}");
        assert!(parse("1 1 1\n1\n2\n").is_err());
    }

    proptest! {
        #[test]
        fn format_then_parse_round_trips(
            t in 1usize..5, v in 1usize..4, c in 1usize..4,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = DenseArray::from_fn(vec![t, v, c], |_| rng.random_range(-1e3..1e3));
            let back = parse(&format_sequence(&a)).unwrap();
            prop_assert_eq!(a.to_le_bytes(), back.to_le_bytes());
        }
    }
}
