//! CSV emission. Reals are written with 17 significant digits, which
//! round-trips every `f64` exactly.

use std::fs::File;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::measure::{TraceMeta, TraceSeries};

use super::experiments::{DriftReport, SummaryRow, VarianceReport};

pub const TRACE_HEADER: [&str; 7] = ["t", "value", "replication", "probe", "beta", "N", "seed"];
pub const VARIANCE_HEADER: [&str; 3] = ["batch_size", "V_hat", "bootstrap_id"];
pub const SUMMARY_HEADER: [&str; 6] = ["t", "beta", "mean", "ci_lo", "ci_hi", "R"];
pub const DRIFT_HEADER: [&str; 8] = [
    "beta_low",
    "beta_high",
    "slope",
    "stderr",
    "intercept",
    "r_squared",
    "expected",
    "R",
];

pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_real(s: &str) -> Option<f64> {
    s.parse().ok()
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One row per grid point per trace. A non-finite value is an error and
/// nothing is written.
pub fn write_traces(path: &Path, traces: &[TraceSeries]) -> Result<()> {
    for tr in traces {
        if let Some((t, _)) = tr.grid.iter().zip(&tr.values).find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                probe: tr.meta.probe.clone(),
                t: *t,
                replication: tr.meta.replication,
            });
        }
    }
    let mut w = writer(path)?;
    let err = csv_err(path);
    w.write_record(TRACE_HEADER).map_err(&err)?;
    for tr in traces {
        let m = &tr.meta;
        let (rep, beta, n, seed) = (m.replication.to_string(), fmt_real(m.beta), m.n.to_string(), m.seed.to_string());
        for (t, v) in tr.grid.iter().zip(&tr.values) {
            w.write_record([&fmt_real(*t), &fmt_real(*v), &rep, &m.probe, &beta, &n, &seed])
                .map_err(&err)?;
        }
    }
    finish(w, path)
}

/// Reads a trace CSV back, grouping consecutive rows with equal metadata.
pub fn read_traces(path: &Path) -> Result<Vec<TraceSeries>> {
    let err = csv_err(path);
    let mut rdr = csv::Reader::from_path(path).map_err(&err)?;
    let headers = rdr.headers().map_err(&err)?.clone();
    if headers.iter().ne(TRACE_HEADER) {
        return Err(Error::config(format!("{}: not a trace CSV", path.display())));
    }
    let bad = |line: usize| Error::config(format!("{}: malformed row {line}", path.display()));
    let mut out: Vec<TraceSeries> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(&err)?;
        let field = |i: usize| rec.get(i).ok_or_else(|| bad(line + 2));
        let t = parse_real(field(0)?).ok_or_else(|| bad(line + 2))?;
        let v = parse_real(field(1)?).ok_or_else(|| bad(line + 2))?;
        let meta = TraceMeta {
            replication: field(2)?.parse().map_err(|_| bad(line + 2))?,
            probe: field(3)?.to_string(),
            beta: parse_real(field(4)?).ok_or_else(|| bad(line + 2))?,
            n: field(5)?.parse().map_err(|_| bad(line + 2))?,
            seed: field(6)?.parse().map_err(|_| bad(line + 2))?,
        };
        match out.last_mut() {
            Some(tr) if tr.meta == meta && tr.grid.last().is_some_and(|last| *last < t) => tr.push(t, v),
            _ => {
                let mut tr = TraceSeries::new(meta);
                tr.push(t, v);
                out.push(tr);
            }
        }
    }
    Ok(out)
}

/// Point estimate (`bootstrap_id = -1`) then the bootstrap samples, per
/// batch size.
pub fn write_variance(path: &Path, report: &VarianceReport) -> Result<()> {
    let mut w = writer(path)?;
    let err = csv_err(path);
    w.write_record(VARIANCE_HEADER).map_err(&err)?;
    for row in &report.rows {
        let b = row.batch_size.to_string();
        w.write_record([&b, &fmt_real(row.v_hat), "-1"]).map_err(&err)?;
        for (i, v) in row.bootstrap.iter().enumerate() {
            w.write_record([&b, &fmt_real(*v), &i.to_string()]).map_err(&err)?;
        }
    }
    finish(w, path)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = writer(path)?;
    let err = csv_err(path);
    w.write_record(SUMMARY_HEADER).map_err(&err)?;
    for r in rows {
        w.write_record([
            &fmt_real(r.t),
            &fmt_real(r.beta),
            &fmt_real(r.mean),
            &fmt_real(r.ci_lo),
            &fmt_real(r.ci_hi),
            &r.replications.to_string(),
        ])
        .map_err(&err)?;
    }
    finish(w, path)
}

pub fn write_drift(path: &Path, report: &DriftReport) -> Result<()> {
    let mut w = writer(path)?;
    let err = csv_err(path);
    w.write_record(DRIFT_HEADER).map_err(&err)?;
    let f = &report.fit;
    w.write_record([
        &fmt_real(report.beta_low),
        &fmt_real(report.beta_high),
        &fmt_real(f.slope),
        &fmt_real(f.stderr),
        &fmt_real(f.intercept),
        &fmt_real(f.r_squared),
        &fmt_real(report.expected),
        &f.replications.to_string(),
    ])
    .map_err(&err)?;
    finish(w, path)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// `dir/name`, with characters unsafe in file names replaced.
pub fn output_path(dir: &Path, name: &str) -> PathBuf {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '-' })
        .collect();
    dir.join(clean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::experiments::VarianceRow;

    fn meta() -> TraceMeta {
        TraceMeta { n: 10, probe: "square".into(), seed: 3, replication: 7, beta: f64::INFINITY }
    }

    #[test]
    fn empty_trace_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_traces(&path, &[TraceSeries::new(meta())]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "t,value,replication,probe,beta,N,seed\n");
    }

    #[test]
    fn trace_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("t.csv");
        let mut a = TraceSeries::new(meta());
        for (t, v) in [(0.0, 0.1 + 0.2), (0.1, -1.0 / 3.0), (0.2, 5e-324), (0.30000000000000004, 1e300)] {
            a.push(t, v);
        }
        let mut b = TraceSeries::new(TraceMeta { replication: 8, beta: 0.75, ..meta() });
        b.push(0.0, std::f64::consts::PI);
        write_traces(&path, &[a.clone(), b.clone()]).unwrap();
        let back = read_traces(&path).unwrap();
        assert_eq!(back, vec![a.clone(), b.clone()]);
        for (x, y) in back[0].values.iter().zip(&a.values) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // overwrite is idempotent
        write_traces(&path, &[a, b]).unwrap();
        assert_eq!(read_traces(&path).unwrap().len(), 2);
    }

    #[test]
    fn variance_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.csv");
        let row = |m| VarianceRow { batch_size: m, v_hat: 0.5, bootstrap: vec![0.25; 10], values: vec![] };
        let report = VarianceReport { rows: vec![row(1), row(2)], probe: "norm2".into(), t: 1.0, n: 10 };
        write_variance(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 + 20);
        assert_eq!(lines[1], "1,5.0000000000000000e-1,-1");
    }

    #[test]
    fn io_errors_carry_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let err = write_traces(&blocker.join("t.csv"), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("file"));
    }
}
