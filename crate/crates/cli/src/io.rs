//! Trajectory CSV formats.
//!
//! Single-stage: columns `x_1..x_d, a, y, p` (`p` optional).
//! Multi-stage long format: `id, t, x_1..x_d, a, y, p`, rows for an id
//! covering t = 1..T contiguously.
//!
//! Floats are written with 17 significant digits so written files re-read
//! bit-identically.

use qpower::qcore::{CovariatePoint, Stage, Trajectory, TrajectoryDataset};
use qpower::simulate::format_f64;

#[derive(Debug)]
pub enum CsvError {
    Io(std::io::Error),
    Malformed { row: usize, reason: String },
    MissingPropensity,
    Structure(String),
}

impl std::fmt::Display for CsvError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CsvError::Io(e) => write!(f, "io error: {e}"),
            CsvError::Malformed { row, reason } => write!(f, "malformed CSV row {row}: {reason}"),
            CsvError::MissingPropensity => write!(
                f,
                "dataset has no propensity column; pass --fit-propensity to estimate one"
            ),
            CsvError::Structure(s) => write!(f, "{s}"),
        }
    }
}

impl From<std::io::Error> for CsvError {
    fn from(e: std::io::Error) -> Self {
        CsvError::Io(e)
    }
}

impl From<csv::Error> for CsvError {
    fn from(e: csv::Error) -> Self {
        CsvError::Structure(e.to_string())
    }
}

pub struct LoadedData {
    pub dataset: TrajectoryDataset,
    pub had_propensity: bool,
}

/// Parse a trajectory CSV; the header decides between the single-stage and
/// multi-stage layouts. Missing propensities are filled with a placeholder
/// and flagged via `had_propensity = false`.
pub fn read_trajectories(path: &str) -> Result<LoadedData, CsvError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CsvError::Structure(format!("cannot read header: {e}")))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    let multi = headers.first().map(|h| h == "id").unwrap_or(false);
    let col = |name: &str| headers.iter().position(|h| h == name);
    let x_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("x_"))
        .map(|(i, _)| i)
        .collect();
    if x_cols.is_empty() {
        return Err(CsvError::Structure("no covariate columns x_1..x_d found".into()));
    }
    let a_col = col("a").ok_or_else(|| CsvError::Structure("missing column a".into()))?;
    let y_col = col("y").ok_or_else(|| CsvError::Structure("missing column y".into()))?;
    let p_col = col("p");

    let parse_f64 = |field: &str, row: usize, name: &str| -> Result<f64, CsvError> {
        field.parse::<f64>().map_err(|_| CsvError::Malformed {
            row,
            reason: format!("column {name} value {field:?} is not a number"),
        })
    };
    let parse_i64 = |field: &str, row: usize, name: &str| -> Result<i64, CsvError> {
        field.parse::<i64>().map_err(|_| CsvError::Malformed {
            row,
            reason: format!("column {name} value {field:?} is not an integer"),
        })
    };

    struct Row {
        id: u64,
        t: usize,
        stage: Stage,
    }
    let mut rows: Vec<Row> = Vec::new();
    let had_propensity = p_col.is_some();
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 2; // 1-based with header
        let record = record.map_err(|e| CsvError::Malformed { row: row_no, reason: e.to_string() })?;
        let get = |c: usize| record.get(c).unwrap_or("");
        let x: Vec<f64> = x_cols
            .iter()
            .map(|&c| parse_f64(get(c), row_no, &headers[c]))
            .collect::<Result<_, _>>()?;
        let action = parse_i64(get(a_col), row_no, "a")?;
        let reward = parse_f64(get(y_col), row_no, "y")?;
        if reward < 0.0 {
            return Err(CsvError::Malformed { row: row_no, reason: format!("y = {reward} < 0") });
        }
        let propensity = match p_col {
            Some(c) if !get(c).is_empty() => {
                let p = parse_f64(get(c), row_no, "p")?;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(CsvError::Malformed {
                        row: row_no,
                        reason: format!("p = {p} not in (0, 1]"),
                    });
                }
                p
            }
            _ => 1.0, // placeholder; caller must fit propensities
        };
        let (id, t) = if multi {
            let id = parse_i64(get(0), row_no, "id")? as u64;
            let t = parse_i64(get(1), row_no, "t")? as usize;
            if t == 0 {
                return Err(CsvError::Malformed { row: row_no, reason: "t must start at 1".into() });
            }
            (id, t)
        } else {
            (i as u64, 1)
        };
        let x = CovariatePoint::new(x)
            .map_err(|e| CsvError::Malformed { row: row_no, reason: e.to_string() })?;
        rows.push(Row { id, t, stage: Stage { x, action, reward, propensity } });
    }
    if rows.is_empty() {
        return Err(CsvError::Structure("dataset is empty".into()));
    }

    let trajectories: Vec<Trajectory> = if multi {
        let mut out: Vec<Trajectory> = Vec::new();
        let mut current: Option<Trajectory> = None;
        for row in rows {
            match current.as_mut() {
                Some(tr) if tr.id == row.id => {
                    if row.t != tr.stages.len() + 1 {
                        return Err(CsvError::Structure(format!(
                            "id {} stages are not contiguous at t = {}",
                            row.id, row.t
                        )));
                    }
                    tr.stages.push(row.stage);
                }
                _ => {
                    if let Some(tr) = current.take() {
                        out.push(tr);
                    }
                    if row.t != 1 {
                        return Err(CsvError::Structure(format!(
                            "id {} does not start at t = 1",
                            row.id
                        )));
                    }
                    current = Some(Trajectory { id: row.id, stages: vec![row.stage] });
                }
            }
        }
        if let Some(tr) = current.take() {
            out.push(tr);
        }
        out
    } else {
        rows.into_iter()
            .map(|r| Trajectory { id: r.id, stages: vec![r.stage] })
            .collect()
    };

    let dataset = TrajectoryDataset::new(trajectories)
        .map_err(|e| CsvError::Structure(e.to_string()))?;
    Ok(LoadedData { dataset, had_propensity })
}

/// Write a dataset in the matching CSV layout.
pub fn write_trajectories(path: &str, data: &TrajectoryDataset) -> Result<(), CsvError> {
    let multi = data.stage_count() > 1;
    let d = data.trajectories()[0].stages[0].x.dim();
    let mut out = String::new();
    if multi {
        out.push_str("id,t,");
    }
    for j in 1..=d {
        out.push_str(&format!("x_{j},"));
    }
    out.push_str("a,y,p\n");
    for tr in data.trajectories() {
        for (t, s) in tr.stages.iter().enumerate() {
            let mut fields: Vec<String> = Vec::new();
            if multi {
                fields.push(tr.id.to_string());
                fields.push((t + 1).to_string());
            }
            for v in &s.x.0 {
                fields.push(format_f64(*v));
            }
            fields.push(s.action.to_string());
            fields.push(format_f64(s.reward));
            fields.push(format_f64(s.propensity));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
