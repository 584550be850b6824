//! CSV formats for trajectories, mean-change records and observations.
//!
//! Times are printed with 12 decimals; state values in shortest
//! round-trip form, so files reload to the exact same doubles.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sde::{TimeGrid, Trajectory};
use crate::smoother::ReferenceTrajectory;

pub fn fmt_time(t: f64) -> String {
    format!("{t:.12}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn header(first: &str, prefix: &str, dim: usize, last: Option<&str>) -> String {
    let mut cols = vec![first.to_string()];
    cols.extend((0..dim).map(|k| format!("{prefix}{k}")));
    cols.extend(last.map(str::to_string));
    cols.join(",")
}

fn write_row(out: &mut impl Write, t: f64, values: &[f64], id: Option<usize>) -> std::io::Result<()> {
    write!(out, "{}", fmt_time(t))?;
    for v in values {
        write!(out, ",{v}")?;
    }
    if let Some(id) = id {
        write!(out, ",{id}")?;
    }
    writeln!(out)
}

/// `t,x0,...,x{d-1},path_id`, one row per (path, time).
pub fn write_trajectories_csv(path: &Path, paths: &[Trajectory]) -> Result<()> {
    let dim = paths.first().map_or(0, Trajectory::dim);
    let mut out = create(path)?;
    let res = (|| {
        writeln!(out, "{}", header("t", "x", dim, Some("path_id")))?;
        for (id, p) in paths.iter().enumerate() {
            for (j, x) in p.rows().enumerate() {
                write_row(&mut out, p.grid().time(j), x, Some(id))?;
            }
        }
        out.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// `t,dx0,...,dx{d-1},ref_id`; row `j` holds the record for `t_j → t_{j+1}`.
pub fn write_diffs_csv(path: &Path, refs: &[ReferenceTrajectory]) -> Result<()> {
    let dim = refs.first().map_or(0, |r| r.states.dim());
    let mut out = create(path)?;
    let res = (|| {
        writeln!(out, "{}", header("t", "dx", dim, Some("ref_id")))?;
        for (id, r) in refs.iter().enumerate() {
            for j in 0..r.grid().n_steps() {
                write_row(&mut out, r.grid().time(j), r.diff(j), Some(id))?;
            }
        }
        out.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// `t,y0,...,y{d-1}`, one row per point.
pub fn write_points_csv(path: &Path, points: &[(f64, Vec<f64>)]) -> Result<()> {
    let dim = points.first().map_or(0, |p| p.1.len());
    let mut out = create(path)?;
    let res = (|| {
        writeln!(out, "{}", header("t", "y", dim, None))?;
        for (t, y) in points {
            write_row(&mut out, *t, y, None)?;
        }
        out.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// A numeric CSV file: header plus rows, each row tagged with its 1-based
/// line number.
#[derive(Debug, Clone)]
pub struct NumericTable {
    pub header: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

/// Read a CSV whose first line is a header and whose other lines are all
/// numeric with the header's width.
pub fn read_numeric_csv(path: &Path) -> Result<NumericTable> {
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let header: Vec<String> = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(parse_err(1, "file is empty (missing header)".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != header.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let vals = rec
            .iter()
            .enumerate()
            .map(|(k, s)| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("column {:?}: {s:?} is not a finite number", header[k])))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line, vals));
    }
    Ok(NumericTable { header, rows })
}

/// Read trajectories written by [`write_trajectories_csv`] onto `grid`.
pub fn read_trajectories_csv(path: &Path, grid: &Arc<TimeGrid>) -> Result<Vec<Trajectory>> {
    let table = read_numeric_csv(path)?;
    let cols = table.header.len();
    if cols < 3 || table.header[0] != "t" || table.header[cols - 1] != "path_id" {
        return Err(Error::Parse { path: path.to_path_buf(), line: 1, msg: "expected header t,x0,...,path_id".into() });
    }
    let dim = cols - 2;
    let mut paths: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (line, row) in &table.rows {
        let id = row[cols - 1];
        if id < 0.0 || id.fract() != 0.0 {
            return Err(Error::Parse { path: path.to_path_buf(), line: *line, msg: format!("bad path_id {id}") });
        }
        let states = paths.entry(id as usize).or_default();
        let j = states.len() / dim;
        if j >= grid.len() || (grid.time(j) - row[0]).abs() > 1e-9 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: format!("time {} does not match grid point {j}", row[0]),
            });
        }
        states.extend_from_slice(&row[1..cols - 1]);
    }
    paths.into_values().map(|s| Trajectory::new(grid.clone(), dim, s)).collect()
}

/// Rebuild references from a trajectory file and its matching diffs file
/// (as written by [`write_trajectories_csv`] and [`write_diffs_csv`]).
pub fn read_references_csv(states: &Path, diffs: &Path, grid: &Arc<TimeGrid>) -> Result<Vec<ReferenceTrajectory>> {
    let paths = read_trajectories_csv(states, grid)?;
    let table = read_numeric_csv(diffs)?;
    let cols = table.header.len();
    let bad = |line: usize, msg: String| Error::Parse { path: diffs.to_path_buf(), line, msg };
    if cols < 3 || table.header[0] != "t" || table.header[cols - 1] != "ref_id" {
        return Err(bad(1, "expected header t,dx0,...,ref_id".into()));
    }
    let dim = cols - 2;
    let mut records: Vec<Vec<f64>> = vec![Vec::new(); paths.len()];
    for (line, row) in &table.rows {
        let id = row[cols - 1];
        if id < 0.0 || id.fract() != 0.0 || id as usize >= paths.len() {
            return Err(bad(*line, format!("ref_id {id} has no matching trajectory")));
        }
        let d = &mut records[id as usize];
        let j = d.len() / dim;
        if j >= grid.n_steps() || (grid.time(j) - row[0]).abs() > 1e-9 {
            return Err(bad(*line, format!("time {} does not match grid step {j}", row[0])));
        }
        d.extend_from_slice(&row[1..cols - 1]);
    }
    paths
        .into_iter()
        .zip(records)
        .enumerate()
        .map(|(id, (states, diffs))| {
            if states.dim() != dim || diffs.len() != grid.n_steps() * dim {
                return Err(bad(1, format!("reference {id}: diffs do not cover the grid")));
            }
            Ok(ReferenceTrajectory { states, diffs, lineage: Vec::new() })
        })
        .collect()
}

/// Points of a `t,y0,...` file grouped by grid index (ascending). Each
/// time must lie within `Δ/2` of a grid point.
pub fn read_observation_points(path: &Path, grid: &TimeGrid) -> Result<Vec<(usize, Vec<Vec<f64>>)>> {
    let table = read_numeric_csv(path)?;
    if table.header.len() < 2 || table.header[0] != "t" {
        return Err(Error::Parse { path: path.to_path_buf(), line: 1, msg: "expected header t,y0,...".into() });
    }
    let mut slots: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (line, row) in table.rows {
        let j = grid.index_of(row[0]).map_err(|e| Error::Parse { path: path.to_path_buf(), line, msg: e.to_string() })?;
        slots.entry(j).or_default().push(row[1..].to_vec());
    }
    Ok(slots.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::ZeroDrift;
    use std::fs;

    fn grid() -> Arc<TimeGrid> {
        Arc::new(TimeGrid::uniform(0.0, 0.03, 0.01).unwrap())
    }

    #[test]
    fn trajectory_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        let g = grid();
        let a = Trajectory::new(g.clone(), 2, vec![0.1, 1e-300, -3.0, 2.0 / 3.0, 5.5, 1e17, 0.0, -0.0]).unwrap();
        let b = Trajectory::new(g.clone(), 2, vec![1.0; 8]).unwrap();
        write_trajectories_csv(&p, &[a.clone(), b.clone()]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,x0,x1,path_id\n0.000000000000,0.1,"));
        let back = read_trajectories_csv(&p, &g).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn diffs_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("diffs.csv");
        let t = Trajectory::new(grid(), 1, vec![0.0, 1.0, 3.0, 6.0]).unwrap();
        let r = ReferenceTrajectory::from_states(t, &ZeroDrift);
        write_diffs_csv(&p, &[r]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "t,dx0,ref_id\n0.000000000000,1,0\n0.010000000000,2,0\n0.020000000000,3,0\n");
    }

    #[test]
    fn references_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (ps, pd) = (dir.path().join("s.csv"), dir.path().join("d.csv"));
        let g = grid();
        let refs: Vec<ReferenceTrajectory> = (0..3)
            .map(|k| {
                let t = Trajectory::new(g.clone(), 1, vec![0.1 * k as f64, 1.0 / 3.0, -2.5, 7e-9]).unwrap();
                ReferenceTrajectory::from_states(t, &crate::sde::DoubleWellDrift)
            })
            .collect();
        write_trajectories_csv(&ps, &refs.iter().map(|r| r.states.clone()).collect::<Vec<_>>()).unwrap();
        write_diffs_csv(&pd, &refs).unwrap();
        assert_eq!(read_references_csv(&ps, &pd, &g).unwrap(), refs);
        fs::write(&pd, "t,dx0,ref_id\n0.0,1,0\n").unwrap();
        assert!(read_references_csv(&ps, &pd, &g).is_err());
    }

    #[test]
    fn observation_points_snap_to_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.csv");
        fs::write(&p, "t,y0\n0.0099,1\n0.01,2\n0.03,3\n").unwrap();
        let slots = read_observation_points(&p, &grid()).unwrap();
        assert_eq!(slots, vec![(1, vec![vec![1.0], vec![2.0]]), (3, vec![vec![3.0]])]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "t,y0\n0.01,1\n0.02,abc\n").unwrap();
        let err = read_observation_points(&p, &grid()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        fs::write(&p, "t,y0\n0.01,1\n0.02\n").unwrap();
        assert!(matches!(read_numeric_csv(&p), Err(Error::Parse { line: 3, .. })));
        fs::write(&p, "t,y0\n0.05,1\n").unwrap();
        assert!(matches!(read_observation_points(&p, &grid()), Err(Error::Parse { line: 2, .. })));
        fs::write(&p, "").unwrap();
        assert!(matches!(read_numeric_csv(&p), Err(Error::Parse { line: 1, .. })));
    }
}
