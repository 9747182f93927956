//! Result tables, JSON documents and the run manifest.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::LabResult;

/// Plot-ready rows under a fixed header.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: Vec<&'static str>) -> Table {
        Table { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| *h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for row in &self.rows {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                write!(s, "{v}").expect("write to string");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Csv(Table),
    Json(Value),
}

/// What a subcommand produces: the payload plus summary fields for the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub payload: Payload,
    pub summary: Value,
}

impl RunOutput {
    pub fn table(t: Table, summary: Value) -> RunOutput {
        RunOutput { payload: Payload::Csv(t), summary }
    }

    pub fn json(v: Value, summary: Value) -> RunOutput {
        RunOutput { payload: Payload::Json(v), summary }
    }

    pub fn rendered(&self) -> String {
        match &self.payload {
            Payload::Csv(t) => t.to_csv(),
            Payload::Json(v) => {
                let mut s = serde_json::to_string_pretty(v).expect("serializable");
                s.push('\n');
                s
            }
        }
    }

    fn extension(&self) -> &'static str {
        match self.payload {
            Payload::Csv(_) => "csv",
            Payload::Json(_) => "json",
        }
    }
}

/// Hex SHA-256 of the canonical JSON form of a configuration.
pub fn config_hash(config: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(config).expect("serializable config");
    let digest = Sha256::digest(&bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").expect("write to string");
        s
    })
}

pub fn manifest(command: &str, config: &impl Serialize, out: &RunOutput, runtime_seconds: f64) -> Value {
    json!({
        "command": command,
        "config": config,
        "config_sha256": config_hash(config),
        "versions": {
            "exvar": env!("CARGO_PKG_VERSION"),
            "exvar-core": exvar_core::VERSION,
        },
        "threads": rayon::current_num_threads(),
        "runtime_seconds": runtime_seconds,
        "summary": out.summary,
    })
}

/// Write `<prefix>.csv|json` and `<prefix>.manifest.json`; returns both paths.
pub fn write_pair(prefix: &Path, out: &RunOutput, manifest: &Value) -> LabResult<(PathBuf, PathBuf)> {
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let data = with_suffix(prefix, out.extension());
    let man = with_suffix(prefix, "manifest.json");
    std::fs::File::create(&data)?.write_all(out.rendered().as_bytes())?;
    let mut text = serde_json::to_string_pretty(manifest).expect("serializable");
    text.push('\n');
    std::fs::File::create(&man)?.write_all(text.as_bytes())?;
    Ok((data, man))
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Least-squares slope of log y against log t over positive entries.
pub fn loglog_slope(t: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        t.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut t = Table::new(vec!["t", "v"]);
        t.push(vec![1.0, 0.5]);
        t.push(vec![2.0, f64::NAN]);
        assert_eq!(t.to_csv(), "t,v\n1,0.5\n2,NaN\n");
        assert_eq!(t.column("v").unwrap()[0], 0.5);
        assert!(t.column("w").is_none());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = json!({"x": 1, "y": [1, 2]});
        let b = json!({"x": 2, "y": [1, 2]});
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
        // sha256 of the empty JSON string ""
        assert_eq!(config_hash(&""), "12ae32cb1ec02d01eda3581b127c1fee3b0dc53572ed6baf239721a03d82e126");
    }

    #[test]
    fn slopes() {
        let t = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = t.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((loglog_slope(&t, &y).unwrap() + 0.5).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn pair_written() {
        let dir = tempfile::tempdir().unwrap();
        let out = RunOutput::json(json!([1, 2]), json!({}));
        let m = manifest("x", &json!({"a": 1}), &out, 0.1);
        let (d, mpath) = write_pair(&dir.path().join("sub/run"), &out, &m).unwrap();
        assert!(d.ends_with("run.json"));
        let back: Value = serde_json::from_str(&std::fs::read_to_string(mpath).unwrap()).unwrap();
        assert_eq!(back["command"], "x");
    }
}
