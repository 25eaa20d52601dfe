//! Report envelope and plot-ready CSV emission.
//!
//! Every JSON report carries the same metadata envelope — tool version,
//! experiment kind, the SHA-256 of the effective config, the seed, the
//! worker count, and the wall-clock runtime — so any number in it can be
//! traced to, and reproduced from, its exact inputs. Bulk data (per-path
//! values, solved grid slices) goes to CSV side files instead of the
//! report, one header line and plain numeric rows, ready for plotting.

use std::borrow::Cow;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentKind;
use crate::error::{GexpError, Result};
use crate::gheat::GridFunction;

/// Metadata stamped on every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    /// Tool name and version.
    pub tool: String,
    pub experiment: ExperimentKind,
    /// SHA-256 of the canonical serialization of the effective config
    /// (CLI overrides applied).
    pub config_sha256: String,
    /// Root seed of every random stream in the run.
    pub seed: u64,
    /// Rayon workers used. Results are independent of this by the
    /// determinism contract; it is recorded for runtime context only.
    pub threads: usize,
    pub runtime_seconds: f64,
    /// Whether the experiment's own acceptance checks passed (experiments
    /// without checks always pass). Drives the process exit code.
    pub pass: bool,
}

/// A complete report: the metadata envelope flattened around the
/// experiment-specific results.
#[derive(Debug, Clone, Serialize)]
pub struct Report<T: Serialize> {
    #[serde(flatten)]
    pub meta: RunMetadata,
    pub results: T,
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Quotes a CSV field if it contains a delimiter, quote, or newline.
pub(crate) fn csv_quote(field: &str) -> Cow<'_, str> {
    if field.contains([',', '"', '\n', '\r']) {
        Cow::Owned(format!("\"{}\"", field.replace('"', "\"\"")))
    } else {
        Cow::Borrowed(field)
    }
}

/// Opens a buffered CSV file and writes the header line.
pub(crate) fn csv_file(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| {
        GexpError::Config(format!("cannot create {}: {e}", path.display()))
    })?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{header}")?;
    Ok(w)
}

/// Writes a solved grid slice as plot-ready CSV: `x,u` in one dimension,
/// `x,y,u` (row-major) in two.
pub fn write_grid_csv(path: &Path, u: &GridFunction) -> Result<()> {
    let grid = u.grid();
    let n = grid.n_nodes();
    match grid.dim() {
        1 => {
            let mut w = csv_file(path, "x,u")?;
            for (i, v) in u.values().iter().enumerate() {
                writeln!(w, "{},{v}", grid.coord(i))?;
            }
            w.flush()?;
        }
        _ => {
            let mut w = csv_file(path, "x,y,u")?;
            for i in 0..n {
                for j in 0..n {
                    writeln!(
                        w,
                        "{},{},{}",
                        grid.coord(i),
                        grid.coord(j),
                        u.values()[grid.idx2(i, j)]
                    )?;
                }
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quoting_escapes_only_when_needed() {
        assert_eq!(csv_quote("plain"), "plain");
        assert_eq!(csv_quote("a,b"), "\"a,b\"");
        assert_eq!(csv_quote("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn grid_csv_round_trips_values() {
        use crate::gheat::{sample_on_grid, GridFunction, SpatialGrid};
        let grid = SpatialGrid::new(1, 2.0, 5).unwrap();
        let values = sample_on_grid(&grid, |x| x[0] * x[0]);
        let u = GridFunction::new(grid, 0.0, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slice.csv");
        write_grid_csv(&path, &u).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,u"));
        let rows: Vec<(f64, f64)> = lines
            .map(|l| {
                let (a, b) = l.split_once(',').unwrap();
                (a.parse().unwrap(), b.parse().unwrap())
            })
            .collect();
        assert_eq!(rows.len(), 5);
        // Shortest round-trip float formatting: parsing back is exact.
        for (x, v) in rows {
            assert_eq!(v, x * x);
        }
    }
}
