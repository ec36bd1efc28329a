//! CSV tables, JSON summaries and provenance records.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use hmcseg::protocol::config_hash;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::store::write_bytes;

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
    write_bytes(path, &bytes)
}

#[derive(Serialize)]
pub struct Provenance<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: u64,
    pub config_hash: String,
    pub config: &'a RunConfig,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
    pub finished_unix_s: u64,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

/// Timer for one command; [`Clock::finish`] writes its provenance record.
pub struct Clock {
    start: Instant,
}

impl Clock {
    pub fn start() -> Self {
        Self { start: Instant::now() }
    }

    pub fn finish(
        &self,
        path: &Path,
        command: &str,
        cfg: &RunConfig,
        outputs: &[&Path],
        extra: serde_json::Value,
    ) -> CliResult<()> {
        let p = Provenance {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config_hash: config_hash(cfg),
            config: cfg,
            outputs: outputs
                .iter()
                .map(|o| o.strip_prefix(&cfg.out).unwrap_or(o).display().to_string())
                .collect(),
            wall_time_s: self.start.elapsed().as_secs_f64(),
            finished_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            extra,
        };
        write_json(path, &p)
    }
}

/// Concatenates the CSV files of each directory under `reports` into one
/// table per report type, with the source file name as the first column.
/// Files of one type must share their columns.
/// Reads only `reports/` and writes only `summary/`, so re-running gives the
/// same bytes.
pub fn merge_reports(out: &Path) -> CliResult<Vec<std::path::PathBuf>> {
    let root = out.join("reports");
    if !root.is_dir() {
        return Err(CliError::Validation(format!("no reports under {}", root.display())));
    }
    let mut kinds: BTreeMap<String, Vec<std::path::PathBuf>> = BTreeMap::new();
    for entry in std::fs::read_dir(&root).map_err(|e| CliError::io(&root, e))? {
        let dir = entry.map_err(|e| CliError::io(&root, e))?.path();
        if !dir.is_dir() {
            continue;
        }
        let kind = dir.file_name().expect("dir name").to_string_lossy().into_owned();
        let mut files: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|e| CliError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        if !files.is_empty() {
            kinds.insert(kind, files);
        }
    }
    let mut written = Vec::new();
    for (kind, files) in kinds {
        let mut header: Option<Vec<String>> = None;
        let mut w = csv::Writer::from_writer(Vec::new());
        for f in &files {
            let mut r = csv::Reader::from_path(f)?;
            let h: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
            match &header {
                None => {
                    let mut full = vec!["source".to_owned()];
                    full.extend(h.iter().cloned());
                    w.write_record(&full)?;
                    header = Some(h);
                }
                Some(first) if *first != h => {
                    return Err(CliError::Runtime(format!("{} has columns unlike the other {kind} reports", f.display())));
                }
                Some(_) => {}
            }
            let source = f.file_stem().expect("file name").to_string_lossy().into_owned();
            for rec in r.records() {
                let rec = rec?;
                w.write_record(std::iter::once(source.as_str()).chain(rec.iter()))?;
            }
        }
        let bytes = w.into_inner().map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
        let path = out.join("summary").join(format!("{kind}.csv"));
        write_bytes(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
