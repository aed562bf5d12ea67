//! Newline-delimited JSON dataset files: one header line, then one record per
//! line. Paths ending in `.gz` are gzip-compressed.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::{Compression, GzBuilder};

use crate::daydream::{DatasetHeader, DaydreamDataset, DaydreamRecord, DATASET_VERSION};
use crate::domain::Configuration;
use crate::error::{Error, Result};

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn to_writer<W: Write>(ds: &DaydreamDataset, mut w: W) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, &ds.header)?;
    w.write_all(b"\n")?;
    for r in &ds.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn from_reader<R: BufRead>(r: R) -> Result<DaydreamDataset> {
    let mut lines = r.lines().enumerate();
    let header: DatasetHeader = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::Dataset {
                line: 1,
                message: e.to_string(),
            })?;
            serde_json::from_str(&line).map_err(|e| Error::Dataset {
                line: 1,
                message: format!("bad header: {e}"),
            })?
        }
        None => {
            return Err(Error::Dataset {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    if header.version != DATASET_VERSION {
        return Err(Error::Dataset {
            line: 1,
            message: format!("unsupported dataset version {}", header.version),
        });
    }
    let mut records = Vec::new();
    for (k, line) in lines {
        let line = line.map_err(|e| Error::Dataset {
            line: k + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DaydreamRecord = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: k + 1,
            message: e.to_string(),
        })?;
        if rec.config.asset_types() != header.asset_types || rec.config.stations() != header.stations {
            return Err(Error::Dataset {
                line: k + 1,
                message: "record dimensions differ from the header".into(),
            });
        }
        records.push(rec);
    }
    Ok(DaydreamDataset { header, records })
}

pub fn write(ds: &DaydreamDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io("create", path, e))?;
    let res = if is_gzip(path) {
        // mtime 0 keeps the compressed bytes a function of the content
        let enc: GzEncoder<_> = GzBuilder::new()
            .mtime(0)
            .write(BufWriter::new(file), Compression::default());
        let mut enc = enc;
        to_writer(ds, &mut enc).and_then(|_| enc.finish().map(|_| ()))
    } else {
        to_writer(ds, BufWriter::new(file))
    };
    res.map_err(|e| Error::io("write", path, e))
}

pub fn read(path: &Path) -> Result<DaydreamDataset> {
    let file = File::open(path).map_err(|e| Error::io("open", path, e))?;
    let reader: Box<dyn Read> = if is_gzip(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    from_reader(BufReader::new(reader))
}

/// Exact-match lookup over the configurations of a dataset.
#[derive(Clone, Debug, Default)]
pub struct ConfigIndex {
    seen: HashSet<Configuration>,
}

impl ConfigIndex {
    pub fn new<'a>(configs: impl IntoIterator<Item = &'a Configuration>) -> Self {
        ConfigIndex {
            seen: configs.into_iter().cloned().collect(),
        }
    }

    pub fn of(ds: &DaydreamDataset) -> Self {
        Self::new(ds.records.iter().map(|r| &r.config))
    }

    pub fn contains(&self, c: &Configuration) -> bool {
        self.seen.contains(c)
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}
