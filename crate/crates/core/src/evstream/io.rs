use super::{Event, EventStream};
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"EVB1\0\0\0\0";
const RECORD: usize = 14;

pub fn write_evb1(path: &Path, stream: &EventStream) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut header = Vec::with_capacity(20);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&stream.width().to_le_bytes());
    header.extend_from_slice(&stream.height().to_le_bytes());
    header.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    w.write_all(&header).map_err(io)?;
    let mut rec = [0u8; RECORD];
    for e in stream.events() {
        rec[0..8].copy_from_slice(&e.t.to_le_bytes());
        rec[8..10].copy_from_slice(&e.x.to_le_bytes());
        rec[10..12].copy_from_slice(&e.y.to_le_bytes());
        rec[12] = e.p as u8;
        rec[13] = 0;
        w.write_all(&rec).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_evb1(path: &Path) -> Result<EventStream> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not an EVB1 event file"));
    }
    let width = u16::from_le_bytes([bytes[8], bytes[9]]);
    let height = u16::from_le_bytes([bytes[10], bytes[11]]);
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() != count * RECORD {
        return Err(Error::format(
            path,
            format!("header declares {count} events, body holds {} bytes", body.len()),
        ));
    }
    let events = body
        .chunks_exact(RECORD)
        .map(|r| Event {
            t: f64::from_le_bytes(r[0..8].try_into().unwrap()),
            x: u16::from_le_bytes([r[8], r[9]]),
            y: u16::from_le_bytes([r[10], r[11]]),
            p: r[12] as i8,
        })
        .collect();
    EventStream::new(events, width, height).map_err(|e| Error::format(path, e.to_string()))
}

/// `t,x,y,p` text form. The sensor size is not part of the format.
pub fn write_events_csv(path: &Path, stream: &EventStream) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["t", "x", "y", "p"]).map_err(err)?;
    for e in stream.events() {
        w.write_record(&[format!("{:.9}", e.t), e.x.to_string(), e.y.to_string(), e.p.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_events_csv(path: &Path, width: u16, height: u16) -> Result<EventStream> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut events = Vec::new();
    for (i, rec) in r.deserialize::<(f64, u16, u16, i8)>().enumerate() {
        let (t, x, y, p) = rec.map_err(|e| Error::format(path, format!("row {}: {e}", i + 1)))?;
        events.push(Event { t, x, y, p });
    }
    EventStream::new(events, width, height).map_err(|e| Error::format(path, e.to_string()))
}

/// Dispatches on extension: `.csv` is text, anything else EVB1.
pub fn read_events(path: &Path, width: u16, height: u16) -> Result<EventStream> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_events_csv(path, width, height),
        _ => read_evb1(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EventStream {
        EventStream::new(
            vec![Event::new(0.25, 3, 1, 1), Event::new(0.125, 0, 2, -1), Event::new(0.5, 7, 0, 1)],
            8,
            4,
        )
        .unwrap()
    }

    #[test]
    fn evb1_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.evb1");
        write_evb1(&p, &sample()).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 20 + 3 * 14);
        assert_eq!(read_evb1(&p).unwrap(), sample());
    }

    #[test]
    fn evb1_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.evb1");
        write_evb1(&p, &sample()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_evb1(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        write_events_csv(&p, &sample()).unwrap();
        assert_eq!(read_events(&p, 8, 4).unwrap(), sample());
    }
}
