//! Plain-text dataset manifests.
//!
//! ```text
//! # comment
//! classes wave squat lunge jump clap
//! clips/c00_s1_r1.staract 0 1 1
//! ```
//!
//! Each record line is `path class subject repetition`, separated by
//! whitespace. Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::clipfile::{read_clip, ClipFileError};
use super::VideoSample;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("manifest line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("manifest line {line}: duplicate record for class {class}, subject {subject}, repetition {repetition}")]
    Duplicate {
        line: usize,
        class: u16,
        subject: u16,
        repetition: u16,
    },
    #[error("{path}: {source}")]
    Clip { path: PathBuf, source: ClipFileError },
    #[error("{path}: header says class {header:?} but manifest says {manifest:?} (class, subject, repetition)")]
    Mismatch {
        path: PathBuf,
        header: (u16, u16, u16),
        manifest: (u16, u16, u16),
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub class: u16,
    pub subject: u16,
    pub repetition: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut m = Manifest::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields[0] == "classes" {
                m.class_names = fields[1..].iter().map(|s| s.to_string()).collect();
                continue;
            }
            if fields.len() != 4 {
                return Err(ManifestError::Parse {
                    line,
                    reason: format!("expected `path class subject repetition`, got {} fields", fields.len()),
                });
            }
            let num = |f: &str, what: &str| {
                f.parse::<u16>().map_err(|e| ManifestError::Parse {
                    line,
                    reason: format!("bad {what} {f:?}: {e}"),
                })
            };
            let rec = ManifestRecord {
                path: PathBuf::from(fields[0]),
                class: num(fields[1], "class")?,
                subject: num(fields[2], "subject")?,
                repetition: num(fields[3], "repetition")?,
            };
            if !seen.insert((rec.class, rec.subject, rec.repetition)) {
                return Err(ManifestError::Duplicate {
                    line,
                    class: rec.class,
                    subject: rec.subject,
                    repetition: rec.repetition,
                });
            }
            m.records.push(rec);
        }
        Ok(m)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# path class subject repetition\n");
        if !self.class_names.is_empty() {
            let _ = writeln!(s, "classes {}", self.class_names.join(" "));
        }
        for r in &self.records {
            let _ = writeln!(s, "{} {} {} {}", r.path.display(), r.class, r.subject, r.repetition);
        }
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        fs::write(path, self.render())?;
        Ok(())
    }

    /// Loads every listed clip, resolving relative paths against `base` and
    /// checking each header against its record.
    pub fn load(&self, base: &Path) -> Result<Vec<VideoSample>, ManifestError> {
        self.records
            .iter()
            .map(|r| {
                let path = base.join(&r.path);
                let sample = read_clip(&path).map_err(|source| ManifestError::Clip {
                    path: path.clone(),
                    source,
                })?;
                let header = (sample.action, sample.subject, sample.repetition);
                let manifest = (r.class, r.subject, r.repetition);
                if header != manifest {
                    return Err(ManifestError::Mismatch { path, header, manifest });
                }
                Ok(sample)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_render_round_trip() {
        let text = "# header\nclasses wave squat\na.staract 0 1 1\n\nb.staract 1 2 3 # trailing\n";
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.class_names, ["wave", "squat"]);
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[1].repetition, 3);
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
    }

    #[test]
    fn duplicate_triple_rejected() {
        let err = Manifest::parse("a 0 1 1\nb 0 1 1\n").unwrap_err();
        assert!(matches!(err, ManifestError::Duplicate { line: 2, .. }));
    }

    #[test]
    fn malformed_lines_report_their_number() {
        assert!(matches!(Manifest::parse("a 0 1\n"), Err(ManifestError::Parse { line: 1, .. })));
        assert!(matches!(Manifest::parse("x 0 1 1\na 0 one 1\n"), Err(ManifestError::Parse { line: 2, .. })));
    }
}
