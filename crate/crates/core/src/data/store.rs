use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::clean::{CleanSeries, Origin};
use crate::error::{Error, Result};

pub const STORE_VERSION: u32 = 1;
const POINT_BYTES: u64 = 4;
/// Points per data file before a new shard is started.
pub const DEFAULT_SHARD_POINTS: u64 = 1 << 28;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub file: String,
    pub offset_points: u64,
    pub length_points: u64,
    pub domain: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub version: u32,
    pub sequences: Vec<SequenceMeta>,
}

/// Sequences stored as raw little-endian f32 points in one or more data
/// files, indexed by a JSON metafile.
#[derive(Clone, Debug)]
pub struct SequenceStore {
    dir: PathBuf,
    name: String,
    meta: StoreMeta,
}

pub fn meta_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.meta.json"))
}

fn shard_name(name: &str, shard: usize) -> String {
    if shard == 0 {
        format!("{name}.bin")
    } else {
        format!("{name}.{shard}.bin")
    }
}

impl SequenceStore {
    pub fn write(dir: impl AsRef<Path>, name: &str, series: &[CleanSeries]) -> Result<Self> {
        Self::write_sharded(dir, name, series, DEFAULT_SHARD_POINTS)
    }

    /// Writes all series, starting a new data file whenever the current one
    /// would exceed `shard_points` (a single longer series still gets its own file).
    pub fn write_sharded(dir: impl AsRef<Path>, name: &str, series: &[CleanSeries], shard_points: u64) -> Result<Self> {
        let dir = dir.as_ref();
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(Error::Usage(format!("invalid store name {name:?}")));
        }
        std::fs::create_dir_all(dir)?;
        let mut sequences = Vec::with_capacity(series.len());
        let mut shard = 0;
        let mut file = shard_name(name, shard);
        let mut out = BufWriter::new(File::create(dir.join(&file))?);
        let mut used = 0u64;
        for s in series {
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("series from {:?} holds non-finite values", s.origin.source)));
            }
            let n = s.values.len() as u64;
            if used > 0 && used + n > shard_points {
                out.flush()?;
                shard += 1;
                file = shard_name(name, shard);
                out = BufWriter::new(File::create(dir.join(&file))?);
                used = 0;
            }
            for v in &s.values {
                out.write_all(&v.to_le_bytes())?;
            }
            sequences.push(SequenceMeta {
                file: file.clone(),
                offset_points: used,
                length_points: n,
                domain: s.origin.domain.clone(),
            });
            used += n;
        }
        out.flush()?;
        let meta = StoreMeta {
            version: STORE_VERSION,
            sequences,
        };
        let tmp = dir.join(format!("{name}.meta.json.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&meta)?)?;
        std::fs::rename(&tmp, meta_path(dir, name))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            name: name.to_string(),
            meta,
        })
    }

    pub fn open(dir: impl AsRef<Path>, name: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let path = meta_path(dir, name);
        let text = std::fs::read(&path)?;
        let meta: StoreMeta = serde_json::from_slice(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let store = Self {
            dir: dir.to_path_buf(),
            name: name.to_string(),
            meta,
        };
        store.validate()?;
        Ok(store)
    }

    /// Opens from a metafile path `<dir>/<name>.meta.json`.
    pub fn open_meta(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = path.file_name().and_then(|f| f.to_str()).unwrap_or_default();
        let Some(name) = file.strip_suffix(".meta.json") else {
            return Err(Error::format(path, "metafile name must end in .meta.json"));
        };
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::open(dir, name)
    }

    fn validate(&self) -> Result<()> {
        let path = meta_path(&self.dir, &self.name);
        if self.meta.version != STORE_VERSION {
            return Err(Error::format(&path, format!("unsupported store version {}", self.meta.version)));
        }
        let mut sizes: BTreeMap<&str, u64> = BTreeMap::new();
        let mut spans: BTreeMap<&str, Vec<(u64, u64, usize)>> = BTreeMap::new();
        for (i, s) in self.meta.sequences.iter().enumerate() {
            let bad = |msg: String| Error::format(&path, format!("sequence {i} ({}): {msg}", s.file));
            if s.file.is_empty() || s.file.contains(['/', '\\']) || s.file == ".." {
                return Err(bad("file must be a plain name inside the store directory".into()));
            }
            if !sizes.contains_key(s.file.as_str()) {
                let len = std::fs::metadata(self.dir.join(&s.file))
                    .map_err(|e| bad(format!("cannot stat data file: {e}")))?
                    .len();
                if len % POINT_BYTES != 0 {
                    return Err(bad(format!("data file size {len} is not a whole number of points")));
                }
                sizes.insert(&s.file, len / POINT_BYTES);
            }
            let end = s
                .offset_points
                .checked_add(s.length_points)
                .ok_or_else(|| bad("offset overflows".into()))?;
            let avail = sizes[s.file.as_str()];
            if end > avail {
                return Err(bad(format!(
                    "points {}..{end} exceed the {avail} points in the file",
                    s.offset_points
                )));
            }
            spans.entry(&s.file).or_default().push((s.offset_points, end, i));
        }
        for list in spans.values_mut() {
            list.sort_unstable();
            for w in list.windows(2) {
                let ((_, a_end, a), (b_start, _, b)) = (w[0], w[1]);
                if b_start < a_end {
                    let s = &self.meta.sequences[b];
                    return Err(Error::format(
                        &path,
                        format!("sequence {b} ({}) overlaps sequence {a}", s.file),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.meta.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.sequences.is_empty()
    }

    pub fn meta(&self) -> &StoreMeta {
        &self.meta
    }

    pub fn entry(&self, index: usize) -> Result<&SequenceMeta> {
        self.meta.sequences.get(index).ok_or(Error::Range {
            index,
            len: self.len(),
        })
    }

    pub fn total_points(&self) -> u64 {
        self.meta.sequences.iter().map(|s| s.length_points).sum()
    }

    /// Sequence indices grouped by domain tag.
    pub fn domains(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.meta.sequences.iter().enumerate() {
            out.entry(s.domain.clone()).or_default().push(i);
        }
        out
    }

    pub fn data_files(&self) -> Vec<PathBuf> {
        let names: HashSet<&str> = self.meta.sequences.iter().map(|s| s.file.as_str()).collect();
        let mut v: Vec<PathBuf> = names.into_iter().map(|n| self.dir.join(n)).collect();
        v.sort();
        v
    }

    /// `len` points of sequence `index` starting at point `start`.
    pub fn read_range(&self, index: usize, start: u64, len: u64) -> Result<Vec<f32>> {
        let s = self.entry(index)?;
        if start.checked_add(len).is_none_or(|e| e > s.length_points) {
            return Err(Error::Range {
                index: (start + len) as usize,
                len: s.length_points as usize,
            });
        }
        let path = self.dir.join(&s.file);
        let mut f = File::open(&path)?;
        f.seek(SeekFrom::Start((s.offset_points + start) * POINT_BYTES))?;
        let mut buf = vec![0u8; (len * POINT_BYTES) as usize];
        f.read_exact(&mut buf)
            .map_err(|e| Error::format(&path, format!("sequence {index}: {e}")))?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn read(&self, index: usize) -> Result<CleanSeries> {
        let s = self.entry(index)?;
        let values = self.read_range(index, 0, s.length_points)?;
        Ok(CleanSeries {
            values,
            origin: Origin {
                source: format!("{}#{index}", self.name),
                domain: s.domain.clone(),
                start: 0,
            },
        })
    }
}
