//! Point files, plan files and distribution configs.
//!
//! Point CSV: header `x1,...,xd` with an optional final `weight` column, one
//! row per point. Without weights the file is an empirical sample with equal
//! weights. Weights must be nonnegative and sum to one within `1e-6`; they
//! are renormalized exactly after that check.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::exact_ot::TransportPlan;
use crate::measures::{DiscreteMeasure, SamplableMeasure};

/// Tolerance on the weight sum of point files.
pub const WEIGHT_SUM_TOL: f64 = 1e-6;

pub fn parse_points_csv<R: Read>(input: R) -> Result<DiscreteMeasure> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_reader(input);
    let header = rdr.headers()?.clone();
    let mut names: Vec<&str> = header.iter().collect();
    let weighted = names.last() == Some(&"weight");
    if weighted {
        names.pop();
    }
    if names.is_empty() {
        return Err(Error::Parse("header must name at least one coordinate column".into()));
    }
    for (i, name) in names.iter().enumerate() {
        if *name != format!("x{}", i + 1) {
            return Err(Error::Parse(format!(
                "header column {} is `{name}`, expected `x{}`",
                i + 1,
                i + 1
            )));
        }
    }
    let dim = names.len();
    let width = header.len();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != width {
            return Err(Error::Parse(format!(
                "row {} has {} fields, expected {width}",
                row + 1,
                record.len()
            )));
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Parse(format!("row {}, column {}: `{field}` is not a number", row + 1, col + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::Parse(format!("row {}, column {}: non-finite value", row + 1, col + 1)));
            }
            if col < dim {
                points.push(v);
            } else {
                weights.push(v);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Parse("no points".into()));
    }
    if !weighted {
        return DiscreteMeasure::empirical_flat(dim, points);
    }
    if let Some(w) = weights.iter().find(|w| **w < 0.0) {
        return Err(Error::Parse(format!("negative weight {w}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Parse(format!("weights sum to {total}, expected 1")));
    }
    DiscreteMeasure::from_unnormalized(dim, points, weights)
}

pub fn read_points_csv(path: &Path) -> Result<DiscreteMeasure> {
    parse_points_csv(fs::File::open(path)?)
}

/// Writes points with a `weight` column; round-trips through [`parse_points_csv`].
pub fn write_points_csv<W: Write>(out: W, m: &DiscreteMeasure) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=m.dim()).map(|i| format!("x{i}")).collect();
    header.push("weight".into());
    w.write_record(&header)?;
    for (x, wt) in m.points().zip(m.weights()) {
        let mut row: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
        row.push(format!("{wt:?}"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Plan CSV with columns `i,j,mass`.
pub fn write_plan_csv<W: Write>(out: W, plan: &TransportPlan) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["i", "j", "mass"])?;
    for e in &plan.entries {
        w.write_record([e.i.to_string(), e.j.to_string(), format!("{:?}", e.mass)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_distribution(text: &str) -> Result<SamplableMeasure> {
    SamplableMeasure::from_json(text)
}

pub fn read_distribution(path: &Path) -> Result<SamplableMeasure> {
    parse_distribution(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unweighted_file_is_empirical() {
        let m = parse_points_csv("x1,x2\n0,0\n1,2\n0,0\n".as_bytes()).unwrap();
        assert_eq!(m.dim(), 2);
        assert_eq!(m.len(), 2);
        assert_eq!(m.sample_size(), Some(3));
        assert!((m.weights()[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_file_is_renormalized() {
        let m = parse_points_csv("x1, weight\n-1, 0.3333333\n1, 0.6666667\n".as_bytes()).unwrap();
        assert_eq!(m.sample_size(), None);
        assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_malformed_input() {
        for bad in [
            "",
            "weight\n1\n",
            "x2\n1\n",
            "x1,y\n1,2\n",
            "x1\n",
            "x1\nabc\n",
            "x1\nNaN\n",
            "x1,weight\n0,0.5\n1,0.4\n",
            "x1,weight\n0,-0.5\n1,1.5\n",
            "x1,x2\n1\n",
        ] {
            assert!(parse_points_csv(bad.as_bytes()).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn points_round_trip() {
        let m = DiscreteMeasure::new(vec![vec![0.1, -3.0], vec![2.5, 1e-300]], vec![0.25, 0.75]).unwrap();
        let mut buf = Vec::new();
        write_points_csv(&mut buf, &m).unwrap();
        let back = parse_points_csv(buf.as_slice()).unwrap();
        assert_eq!(back.points_flat(), m.points_flat());
        assert_eq!(back.weights(), m.weights());
    }
}
