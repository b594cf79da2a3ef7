//! Delimited-text packet log.
//!
//! One record per delivered packet:
//!
//! ```text
//! frame,slot,sender,tx_ts[,receiver,rx_ts]*
//! ```
//!
//! Timestamps are integers in attoseconds on the local clock of the sender
//! (`tx_ts`) or the receiver (`rx_ts`). Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::clock::Stamp;
use super::tdma::Packet;
use crate::{Error, Result, VehicleId};

pub const LOG_HEADER: &str = "# frame,slot,sender,tx_ts_as[,receiver,rx_ts_as]*";

pub struct PacketLogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> PacketLogWriter<W> {
    pub fn new(mut sink: W) -> Result<Self> {
        writeln!(sink, "{LOG_HEADER}")?;
        Ok(Self {
            inner: csv::WriterBuilder::new().flexible(true).has_headers(false).from_writer(sink),
        })
    }

    pub fn append(&mut self, packet: &Packet) -> Result<()> {
        let mut record = vec![
            packet.frame_index.to_string(),
            packet.slot_index.to_string(),
            packet.sender_id.to_string(),
            packet.tx_timestamp.to_string(),
        ];
        for (receiver, rx) in &packet.rx_records {
            record.push(receiver.to_string());
            record.push(rx.to_string());
        }
        self.inner.write_record(&record)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, k: usize, line: u64) -> Result<T> {
    record
        .get(k)
        .ok_or_else(|| Error::Parse(format!("line {line}: missing field {k}")))?
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad field {k}")))
}

/// Packets grouped by frame, in file order within a frame.
pub fn read_packet_log<R: Read>(source: R) -> Result<BTreeMap<u64, Vec<Packet>>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(false)
        .comment(Some(b'#'))
        .from_reader(source);
    let mut frames: BTreeMap<u64, Vec<Packet>> = BTreeMap::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(k as u64 + 1);
        if record.len() < 4 || record.len() % 2 != 0 {
            return Err(Error::Parse(format!("line {line}: {} fields", record.len())));
        }
        let mut rx_records = Vec::with_capacity((record.len() - 4) / 2);
        for r in (4..record.len()).step_by(2) {
            let receiver: VehicleId = field(&record, r, line)?;
            let rx: i128 = field(&record, r + 1, line)?;
            rx_records.push((receiver, Stamp(rx)));
        }
        let frame: u64 = field(&record, 0, line)?;
        frames.entry(frame).or_default().push(Packet {
            frame_index: frame,
            slot_index: field(&record, 1, line)?,
            sender_id: field(&record, 2, line)?,
            tx_timestamp: Stamp(field::<i128>(&record, 3, line)?),
            clock_params: Vec::new(),
            motion: None,
            rx_records,
        });
    }
    Ok(frames)
}
