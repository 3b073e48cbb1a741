//! Dataset manifests: one record per line,
//!
//! ```text
//! # split  cloud path        options
//! train    chairs/0001.ply
//! test     scans/a.ply       partner=scans/b.ply transform=1,0,0,0.1,0,1,0,0,0,0,1,0 scale=2.5
//! test     bodies/07.xyz     annotation=bodies/07_kps.xyz
//! ```
//!
//! Options are `annotation=PATH`, `partner=PATH`, `transform=R00,R01,R02,T0,R10,..,T2`
//! (row-major 3x4, mapping the cloud's frame onto the partner's) and
//! `scale=METERS_PER_UNIT`. Relative paths resolve against the manifest's
//! directory and must exist.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub split: Split,
    pub cloud: PathBuf,
    pub annotation: Option<PathBuf>,
    /// Second view and the transform taking this cloud onto it.
    pub partner: Option<(PathBuf, RigidTransform)>,
    /// Meters per canonical unit of raw coordinates; 1 when absent.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Parses manifest text; `base` anchors relative paths and `origin`
    /// names the source in errors.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::BadRow {
                path: origin.to_path_buf(),
                row: i + 1,
                reason,
            };
            let resolve = |p: &str| -> Result<PathBuf> {
                let full = base.join(p);
                if full.exists() {
                    Ok(full)
                } else {
                    Err(bad(format!("path `{}` does not exist", full.display())))
                }
            };
            let mut fields = line.split_whitespace();
            let split: Split = fields.next().unwrap_or("").parse().map_err(bad)?;
            let cloud = resolve(fields.next().ok_or_else(|| bad("missing cloud path".into()))?)?;
            let mut rec = ManifestRecord {
                split,
                cloud,
                annotation: None,
                partner: None,
                scale: 1.0,
            };
            let mut partner = None;
            let mut transform = None;
            for opt in fields {
                let (k, v) = opt.split_once('=').ok_or_else(|| bad(format!("option `{opt}` is not key=value")))?;
                match k {
                    "annotation" => rec.annotation = Some(resolve(v)?),
                    "partner" => partner = Some(resolve(v)?),
                    "transform" => {
                        let nums = v
                            .split(',')
                            .map(|x| x.trim().parse::<f64>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| bad(format!("transform: {e}")))?;
                        let arr: [f64; 12] = nums
                            .try_into()
                            .map_err(|v: Vec<f64>| bad(format!("transform needs 12 numbers, got {}", v.len())))?;
                        transform = Some(RigidTransform::from_row_major(&arr).map_err(|e| bad(e.to_string()))?);
                    }
                    "scale" => {
                        rec.scale = v.parse().map_err(|e| bad(format!("scale: {e}")))?;
                        if !(rec.scale > 0.0 && rec.scale.is_finite()) {
                            return Err(bad("scale must be positive".into()));
                        }
                    }
                    other => return Err(bad(format!("unknown option `{other}`"))),
                }
            }
            rec.partner = match (partner, transform) {
                (Some(p), Some(t)) => Some((p, t)),
                (None, None) => None,
                _ => return Err(bad("partner and transform must be given together".into())),
            };
            records.push(rec);
        }
        Ok(Self { records })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_records_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a.xyz", "b.xyz", "k.xyz"] {
            std::fs::write(dir.path().join(f), "0 0 0\n").unwrap();
        }
        let text = "# comment\ntrain a.xyz\n\ntest a.xyz partner=b.xyz transform=1,0,0,0.5,0,1,0,0,0,0,1,0 scale=2\ntest b.xyz annotation=k.xyz  # trailing\n";
        let mpath = dir.path().join("m.txt");
        std::fs::write(&mpath, text).unwrap();
        let m = DatasetManifest::load(&mpath).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.split(Split::Test).count(), 2);
        let (p, t) = m.records[1].partner.as_ref().unwrap();
        assert_eq!(p, &dir.path().join("b.xyz"));
        assert_eq!(t.translation().x, 0.5);
        assert_eq!(m.records[1].scale, 2.0);
        assert_eq!(m.records[2].annotation.as_deref(), Some(dir.path().join("k.xyz").as_path()));
    }

    #[test]
    fn rejects_bad_lines_with_row_numbers() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.xyz"), "0 0 0\n").unwrap();
        let cases = [
            "train missing.xyz",
            "val a.xyz",
            "test a.xyz partner=a.xyz",
            "test a.xyz partner=a.xyz transform=1,0,0,0,0,2,0,0,0,0,1,0",
            "test a.xyz scale=-1",
            "test a.xyz color=red",
        ];
        for c in cases {
            let text = format!("train a.xyz\n{c}\n");
            match DatasetManifest::parse(&text, dir.path(), Path::new("m")) {
                Err(Error::BadRow { row, .. }) => assert_eq!(row, 2, "{c}"),
                other => panic!("{c}: {other:?}"),
            }
        }
    }
}
