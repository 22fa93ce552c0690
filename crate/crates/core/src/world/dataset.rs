//! Newline-delimited JSON scene files, one [`SceneSample`] per line.
//!
//! Fields: `id`, `family`, `ego {x, y, heading, speed, yaw_rate, accel}`,
//! `agents [{kind, x, y, heading, speed, length, width}]`,
//! `lanes [{points, width, speed_limit, route, ego}]`, `gt [[x, y]; T]`, `label`.
//! Vision tokens are derived from agents and lanes and are not stored.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::SceneSample;
use crate::error::{Error, Result};

pub fn write_dataset(samples: &[SceneSample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| Error::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneSample>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Inverse-frequency weights `n / (C · n_c)`; absent classes get weight 1.
pub fn class_weights(labels: &[usize], c: usize) -> Vec<f64> {
    let mut counts = vec![0usize; c];
    for &l in labels {
        if l < c {
            counts[l] += 1;
        }
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&k| if k == 0 { 1.0 } else { n / (c as f64 * k as f64) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, Family, WorldConfig};
    use super::*;

    #[test]
    fn empty_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        write_dataset(&[], &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 0);
        assert!(read_dataset(&p).unwrap().is_empty());
    }

    #[test]
    fn sample_round_trip_is_field_equal() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.jsonl");
        let s = generate_scene(5, Family::LeftTurn, &WorldConfig::default()).unwrap();
        write_dataset(std::slice::from_ref(&s), &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), vec![s]);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let s = generate_scene(5, Family::Cruise, &WorldConfig::default()).unwrap();
        let good = serde_json::to_string(&s).unwrap();
        std::fs::write(&p, format!("{good}\n{{\"id\": 3\n")).unwrap();
        match read_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inverse_frequency() {
        let w = class_weights(&[0, 0, 0, 1], 3);
        assert!((w[0] - 4.0 / 9.0).abs() < 1e-12);
        assert!((w[1] - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(w[2], 1.0);
    }
}
