//! Sidecar and table formats written next to frame files and reports.

use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::register::{DecayEvent, RegisterState};

/// One line of the label sidecar: prepared state bits, then every decay
/// as `ion:time_ns` with times from the start of the trial.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub state: RegisterState,
    pub decays: Vec<DecayEvent>,
}

pub fn write_labels<W: Write>(mut w: W, labels: &[LabelRecord]) -> Result<()> {
    for l in labels {
        write!(w, "{}", l.state)?;
        for d in &l.decays {
            write!(w, " {}:{}", d.ion, (d.time_s * 1e9).round() as u64)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels<R: BufRead>(r: R) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let bad = |d: String| Error::format("labels", format!("line {}: {d}", i + 1));
        let mut parts = line.split_whitespace();
        let Some(bits) = parts.next() else {
            return Err(bad("empty line".into()));
        };
        let state = RegisterState::parse(bits).map_err(|e| bad(e.to_string()))?;
        let decays = parts
            .map(|p| {
                let (ion, ns) = p.split_once(':').ok_or_else(|| bad(format!("`{p}`")))?;
                let ion: usize = ion.parse().map_err(|_| bad(format!("ion `{ion}`")))?;
                let ns: u64 = ns.parse().map_err(|_| bad(format!("time `{ns}`")))?;
                if ion >= state.n_ions() {
                    return Err(bad(format!("ion {ion} out of range")));
                }
                Ok(DecayEvent {
                    ion,
                    time_s: ns as f64 * 1e-9,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(LabelRecord { state, decays });
    }
    Ok(out)
}

/// Optimised threshold for one ion and ROI size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub ion: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub theta: u64,
    pub error: f64,
}

pub fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r).map_err(|e| Error::format("CSV", e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(|e| Error::format("CSV", e.to_string())))
        .collect()
}

/// Cumulative signal fraction against pixel rank, one column per source
/// ion, for the measured frames and the diffraction-limited model.
pub fn write_cumulative_csv<W: Write>(
    w: W,
    measured: &[Vec<f64>],
    diffraction: &[Vec<f64>],
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::format("CSV", e.to_string());
    let mut header = vec!["rank".to_string()];
    header.extend((0..measured.len()).map(|j| format!("ion{j}")));
    header.extend((0..diffraction.len()).map(|j| format!("airy_ion{j}")));
    wtr.write_record(&header).map_err(csv_err)?;
    let len = measured
        .iter()
        .chain(diffraction)
        .map(|c| c.len())
        .max()
        .unwrap_or(0);
    for r in 0..len {
        let mut row = vec![(r + 1).to_string()];
        for c in measured.iter().chain(diffraction) {
            row.push(c.get(r).map(|v| v.to_string()).unwrap_or_default());
        }
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        let labels = vec![
            LabelRecord {
                state: RegisterState::parse("0110").unwrap(),
                decays: vec![DecayEvent { ion: 2, time_s: 1.234e-3 }],
            },
            LabelRecord {
                state: RegisterState::parse("0000").unwrap(),
                decays: vec![],
            },
        ];
        let mut buf = Vec::new();
        write_labels(&mut buf, &labels).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "0110 2:1234000\n0000\n");
        let back = read_labels(&buf[..]).unwrap();
        assert_eq!(back[1], labels[1]);
        assert_eq!(back[0].decays[0].ion, 2);
        assert!((back[0].decays[0].time_s - 1.234e-3).abs() < 1e-12);
    }

    #[test]
    fn bad_labels_rejected() {
        assert!(read_labels(&b"01 x:3\n"[..]).is_err());
        assert!(read_labels(&b"01 5:3\n"[..]).is_err());
        assert!(read_labels(&b"\n"[..]).is_err());
        assert!(read_labels(&b"0a\n"[..]).is_err());
    }
}
