use std::io::{BufRead, Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::Result;

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], w: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned, R: Read>(r: R) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_reader(r);
    Ok(reader.deserialize().collect::<Result<Vec<T>, _>>()?)
}

pub fn write_jsonl<T: Serialize, W: Write>(rows: &[T], mut w: W) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(r: R) -> Result<Vec<T>> {
    let mut rows = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}
