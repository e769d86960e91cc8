//! Plain-text output formats: density grids and survival curves as CSV,
//! killing times one per line, reports as flat `key value` files, and sparse
//! matrices in Matrix Market coordinate form. Every writer accepts an
//! optional provenance string emitted as a leading `#` comment so a file can
//! be traced back to the configuration that produced it; readers skip such
//! comments. Floats are printed with 17 significant digits so a written
//! value parses back to the identical bits.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{DensityGrid, GridSpec};
use crate::sensitivity::SensitivityReport;
use crate::survival::SurvivalPoint;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_provenance(out: &mut impl Write, provenance: Option<&str>) -> Result<()> {
    if let Some(tag) = provenance {
        writeln!(out, "# {tag}")?;
    }
    Ok(())
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(token: &str, context: &str) -> Result<f64> {
    token
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("{context}: bad number `{}`", token.trim())))
}

/// Lines of a file with `#` comments and blank lines removed.
fn content_lines(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        lines.push(trimmed.to_string());
    }
    Ok(lines)
}

/// One row per cell in row-major order: axis centers, then the density.
pub fn write_density_csv(
    path: impl AsRef<Path>,
    density: &DensityGrid,
    provenance: Option<&str>,
) -> Result<()> {
    let path = path.as_ref();
    let grid = density.grid();
    let mut out = create(path)?;
    write_provenance(&mut out, provenance)?;
    let mut header: Vec<String> = (0..grid.dim()).map(|k| format!("axis{k}_center")).collect();
    header.push("density".to_string());
    writeln!(out, "{}", header.join(","))?;
    let values = density.to_row_major();
    for (rm, value) in values.iter().enumerate() {
        let idx = grid.multi_index(rm);
        let mut row: Vec<String> = idx
            .iter()
            .enumerate()
            .map(|(axis, &i)| fmt(grid.center(axis, i)))
            .collect();
        row.push(fmt(*value));
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Rebuilds the grid from the center columns (uniform spacing per axis) and
/// checks every row sits where row-major order puts it.
pub fn read_density_csv(path: impl AsRef<Path>) -> Result<DensityGrid> {
    let path = path.as_ref();
    let lines = content_lines(path)?;
    let Some((header, rows)) = lines.split_first() else {
        return Err(Error::Parse(format!("{}: empty density file", path.display())));
    };
    let columns: Vec<&str> = header.split(',').collect();
    let dim = columns.len().saturating_sub(1);
    if dim == 0 || columns[dim] != "density" {
        return Err(Error::Parse(format!(
            "{}: expected header `axis0_center,...,density`, got `{header}`",
            path.display()
        )));
    }
    for (k, col) in columns[..dim].iter().enumerate() {
        if *col != format!("axis{k}_center") {
            return Err(Error::Parse(format!(
                "{}: unexpected column `{col}` at position {k}",
                path.display()
            )));
        }
    }

    let context = path.display().to_string();
    let mut centers: Vec<Vec<f64>> = vec![Vec::new(); dim];
    let mut values = Vec::with_capacity(rows.len());
    let mut coords = Vec::with_capacity(rows.len());
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Parse(format!(
                "{context}: row `{row}` has {} fields, expected {}",
                fields.len(),
                dim + 1
            )));
        }
        let mut point = Vec::with_capacity(dim);
        for (axis, field) in fields[..dim].iter().enumerate() {
            let c = parse_f64(field, &context)?;
            point.push(c);
            match centers[axis].binary_search_by(|a| a.total_cmp(&c)) {
                Ok(_) => {}
                Err(pos) => centers[axis].insert(pos, c),
            }
        }
        coords.push(point);
        values.push(parse_f64(fields[dim], &context)?);
    }

    let cells: Vec<usize> = centers.iter().map(Vec::len).collect();
    let expected: usize = cells.iter().product();
    if expected != values.len() {
        return Err(Error::Parse(format!(
            "{context}: {} rows do not fill a {:?} grid",
            values.len(),
            cells
        )));
    }
    let mut lower = Vec::with_capacity(dim);
    let mut upper = Vec::with_capacity(dim);
    for axis in 0..dim {
        let c = &centers[axis];
        let n = c.len();
        if n < 2 {
            return Err(Error::Parse(format!(
                "{context}: axis {axis} has a single center; spacing is undetermined"
            )));
        }
        let h = (c[n - 1] - c[0]) / (n as f64 - 1.0);
        lower.push(c[0] - 0.5 * h);
        upper.push(c[n - 1] + 0.5 * h);
    }
    let grid = GridSpec::new(&lower, &upper, &cells)?;
    for (rm, point) in coords.iter().enumerate() {
        let idx = grid.multi_index(rm);
        for axis in 0..dim {
            let want = grid.center(axis, idx[axis]);
            if (point[axis] - want).abs() > 1e-9 * (1.0 + want.abs()) {
                return Err(Error::Parse(format!(
                    "{context}: row {rm} is out of row-major order on axis {axis}"
                )));
            }
        }
    }
    DensityGrid::from_row_major(grid, values)
}

/// One killing time per line.
pub fn write_taus(
    path: impl AsRef<Path>,
    taus: &[f64],
    provenance: Option<&str>,
) -> Result<()> {
    let mut out = create(path.as_ref())?;
    write_provenance(&mut out, provenance)?;
    for tau in taus {
        writeln!(out, "{}", fmt(*tau))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_taus(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let context = path.display().to_string();
    content_lines(path)?
        .iter()
        .map(|line| parse_f64(line, &context))
        .collect()
}

/// Plot-ready survival curve: time, point estimate, and confidence band.
pub fn write_survival_csv(
    path: impl AsRef<Path>,
    points: &[SurvivalPoint],
    provenance: Option<&str>,
) -> Result<()> {
    let mut out = create(path.as_ref())?;
    write_provenance(&mut out, provenance)?;
    writeln!(out, "t,n_beyond,survival,lower,upper")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{}",
            fmt(p.t),
            p.n_beyond,
            fmt(p.survival),
            fmt(p.lower),
            fmt(p.upper)
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Flat `key value` lines, one entry per line.
pub fn write_key_values(
    path: impl AsRef<Path>,
    entries: &[(&str, String)],
    provenance: Option<&str>,
) -> Result<()> {
    let mut out = create(path.as_ref())?;
    write_provenance(&mut out, provenance)?;
    for (key, value) in entries {
        writeln!(out, "{key} {value}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_key_values(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let lines = content_lines(path.as_ref())?;
    let mut entries = Vec::with_capacity(lines.len());
    for line in lines {
        match line.split_once(char::is_whitespace) {
            Some((key, value)) => entries.push((key.to_string(), value.trim().to_string())),
            None => entries.push((line, String::new())),
        }
    }
    Ok(entries)
}

/// A single number (plus its provenance comment), e.g. `lambda.txt`.
pub fn write_scalar(
    path: impl AsRef<Path>,
    value: f64,
    provenance: Option<&str>,
) -> Result<()> {
    let mut out = create(path.as_ref())?;
    write_provenance(&mut out, provenance)?;
    writeln!(out, "{}", fmt(value))?;
    out.flush()?;
    Ok(())
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<f64> {
    let path = path.as_ref();
    let context = path.display().to_string();
    let lines = content_lines(path)?;
    match lines.as_slice() {
        [line] => parse_f64(line, &context),
        _ => Err(Error::Parse(format!(
            "{context}: expected exactly one number, found {} lines",
            lines.len()
        ))),
    }
}

pub fn sensitivity_entries(report: &SensitivityReport) -> Vec<(&'static str, String)> {
    vec![
        ("case", report.case.to_string()),
        ("horizon", fmt(report.horizon)),
        ("finite_error", fmt(report.finite_error)),
        ("gamma", fmt(report.gamma)),
        ("alpha", fmt(report.alpha)),
        ("bound", fmt(report.bound)),
        ("kill_prob", fmt(report.kill_prob)),
        ("windows", report.windows.to_string()),
    ]
}

/// Appends one row per run to a shared CSV; the first column records each
/// run's provenance tag so rows from different configurations can coexist.
pub fn append_sensitivity_summary(
    path: impl AsRef<Path>,
    report: &SensitivityReport,
    provenance: Option<&str>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let fresh = !path.exists();
    let mut out = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    if fresh {
        writeln!(
            out,
            "config,case,horizon,finite_error,gamma,alpha,bound,kill_prob,windows"
        )?;
    }
    writeln!(
        out,
        "{},{},{},{},{},{},{},{},{}",
        provenance.unwrap_or("-"),
        report.case,
        fmt(report.horizon),
        fmt(report.finite_error),
        fmt(report.gamma),
        fmt(report.alpha),
        fmt(report.bound),
        fmt(report.kill_prob),
        report.windows
    )?;
    out.flush()?;
    Ok(())
}

/// Sparse matrix in Matrix Market coordinate form (1-based indices).
pub fn write_matrix_market(
    path: impl AsRef<Path>,
    n_rows: usize,
    n_cols: usize,
    triplets: impl Iterator<Item = (usize, usize, f64)>,
    provenance: Option<&str>,
) -> Result<()> {
    let mut out = create(path.as_ref())?;
    writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
    if let Some(tag) = provenance {
        writeln!(out, "% {tag}")?;
    }
    let entries: Vec<(usize, usize, f64)> = triplets.collect();
    writeln!(out, "{} {} {}", n_rows, n_cols, entries.len())?;
    for (i, j, value) in entries {
        writeln!(out, "{} {} {}", i + 1, j + 1, fmt(value))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensitivity::{FiniteTimeError, SensitivityCase};
    use crate::survival::survival_points;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("qsd-io-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(format!("{}-{name}", std::process::id()))
    }

    fn sample_density() -> DensityGrid {
        let grid = GridSpec::new(&[0.0, -1.0], &[2.0, 1.0], &[4, 5]).unwrap();
        let values: Vec<f64> = (0..20).map(|i| 1.0 + (i as f64) * 0.37).collect();
        DensityGrid::from_row_major(grid, values).unwrap()
    }

    #[test]
    fn density_csv_round_trips() {
        let path = tmp("density.csv");
        let density = sample_density();
        write_density_csv(&path, &density, Some("config deadbeef")).unwrap();
        let back = read_density_csv(&path).unwrap();
        assert_eq!(back.grid().shape(), density.grid().shape());
        for axis in 0..2 {
            assert!((back.grid().lower(axis) - density.grid().lower(axis)).abs() < 1e-12);
            assert!((back.grid().upper(axis) - density.grid().upper(axis)).abs() < 1e-12);
        }
        for (a, b) in back.values().iter().zip(density.values()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn density_csv_carries_provenance_and_header() {
        let path = tmp("density-header.csv");
        write_density_csv(&path, &sample_density(), Some("config 1a2b")).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# config 1a2b"));
        assert_eq!(lines.next(), Some("axis0_center,axis1_center,density"));
    }

    #[test]
    fn shuffled_density_rows_are_rejected() {
        let path = tmp("density-shuffled.csv");
        write_density_csv(&path, &sample_density(), None).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(1, 2);
        let path2 = tmp("density-shuffled-2.csv");
        fs::write(&path2, lines.join("\n")).unwrap();
        match read_density_csv(&path2) {
            Err(Error::Parse(msg)) => assert!(msg.contains("row-major"), "{msg}"),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn taus_round_trip() {
        let path = tmp("taus.txt");
        let taus = vec![0.25, 1.5, 0.125e-3, 7.0];
        write_taus(&path, &taus, Some("config ffff")).unwrap();
        assert_eq!(read_taus(&path).unwrap(), taus);
    }

    #[test]
    fn survival_csv_has_one_line_per_point() {
        let path = tmp("survival.csv");
        let taus: Vec<f64> = (1..=40).map(|i| i as f64 * 0.1).collect();
        let points = survival_points(&taus, &[0.5, 1.5, 2.5, 3.5]);
        write_survival_csv(&path, &points, Some("config 00")).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2 + points.len());
        assert!(text.lines().nth(1).unwrap().starts_with("t,n_beyond,survival"));
    }

    #[test]
    fn scalar_round_trip() {
        let path = tmp("lambda.txt");
        write_scalar(&path, -0.2671763e0, Some("config 99")).unwrap();
        assert_eq!(read_scalar(&path).unwrap(), -0.2671763);
    }

    #[test]
    fn key_values_round_trip() {
        let path = tmp("report.txt");
        let entries = [("alpha", "0.5".to_string()), ("windows", "2050".to_string())];
        write_key_values(&path, &entries, Some("config 7")).unwrap();
        let back = read_key_values(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], ("alpha".to_string(), "0.5".to_string()));
        assert_eq!(back[1], ("windows".to_string(), "2050".to_string()));
    }

    #[test]
    fn sensitivity_summary_accumulates_rows() {
        let path = tmp("summary.csv");
        let _ = fs::remove_file(&path);
        let finite = FiniteTimeError {
            error: 0.01,
            kill_prob: 0.02,
            windows: 100,
        };
        let report =
            SensitivityReport::assemble(SensitivityCase::Reflection, 0.5, &finite, 2.0).unwrap();
        append_sensitivity_summary(&path, &report, Some("aaaa")).unwrap();
        append_sensitivity_summary(&path, &report, Some("bbbb")).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("config,case,"));
        assert!(lines[1].starts_with("aaaa,reflection,"));
        assert!(lines[2].starts_with("bbbb,reflection,"));
    }

    #[test]
    fn matrix_market_layout() {
        let path = tmp("op.mtx");
        let triplets = vec![(0usize, 0usize, 1.5), (1, 0, -2.0), (1, 1, 0.25)];
        write_matrix_market(&path, 2, 2, triplets.into_iter(), Some("config ab")).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "%%MatrixMarket matrix coordinate real general");
        assert_eq!(lines[1], "% config ab");
        assert_eq!(lines[2], "2 2 3");
        assert!(lines[3].starts_with("1 1 "));
        assert!(lines[4].starts_with("2 1 "));
    }

    #[test]
    fn empty_density_file_is_rejected() {
        let path = tmp("empty.csv");
        fs::write(&path, "# nothing\n").unwrap();
        assert!(matches!(read_density_csv(&path), Err(Error::Parse(_))));
    }
}
