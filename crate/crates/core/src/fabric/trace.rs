//! CSV export of the op log.

use std::io::Write;

use super::LogEntry;

pub fn write_log_csv<W: Write>(entries: &[LogEntry], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "op_index", "task", "batch", "device", "kind", "address", "length", "round",
    ])?;
    for e in entries {
        w.write_record([
            e.index.to_string(),
            e.task.0.to_string(),
            e.batch.to_string(),
            e.device.map(|d| d.to_string()).unwrap_or_default(),
            e.kind.as_str().to_string(),
            e.address.to_string(),
            e.len.to_string(),
            e.round.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
