use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Flip, REInstance};
use crate::error::{Error, Result};

/// One JSON object per line, in order.
pub fn write_jsonl(path: &Path, instances: &[REInstance]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<REInstance>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: REInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            record: i,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}

/// CSV with header `id,old,new`.
pub fn write_flip_log(path: &Path, flips: &[Flip]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for f in flips {
        w.serialize(f)?;
    }
    if flips.is_empty() {
        w.write_record(["id", "old", "new"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_flip_log(path: &Path) -> Result<Vec<Flip>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
