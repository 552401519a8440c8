//! Directory format: `panel.csv` (unit, period, y, z_1..z_dz) and
//! `posts.csv` (unit, period, day, score, e_1..e_dx).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{average_scores, pool_embeddings, MonthObs, PanelDataset};
use crate::{Error, Result};

pub const PANEL_FILE: &str = "panel.csv";
pub const POSTS_FILE: &str = "posts.csv";

fn data_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Data { path: path.to_path_buf(), message: message.into() }
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

fn check_header(path: &Path, headers: &csv::StringRecord, fixed: &[&str], prefix: &str) -> Result<usize> {
    if headers.len() < fixed.len() {
        return Err(data_err(path, format!("header must start with {}", fixed.join(","))));
    }
    for (j, name) in fixed.iter().enumerate() {
        if &headers[j] != *name {
            return Err(data_err(
                path,
                format!("header column {} is '{}', expected '{}'", j + 1, &headers[j], name),
            ));
        }
    }
    for (j, h) in headers.iter().enumerate().skip(fixed.len()) {
        let expected = format!("{prefix}{}", j - fixed.len() + 1);
        if h != expected {
            return Err(data_err(path, format!("header column {} is '{h}', expected '{expected}'", j + 1)));
        }
    }
    Ok(headers.len() - fixed.len())
}

fn parse_f64(path: &Path, row: usize, field: &str, name: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| data_err(path, format!("row {row}: cannot parse {name} '{field}'")))?;
    if !v.is_finite() {
        return Err(data_err(path, format!("row {row}: {name} is not finite")));
    }
    Ok(v)
}

fn parse_i64(path: &Path, row: usize, field: &str, name: &str) -> Result<i64> {
    field
        .parse()
        .map_err(|_| data_err(path, format!("row {row}: cannot parse {name} '{field}' as an integer")))
}

fn sort_labels(labels: &mut [String]) {
    if labels.iter().all(|l| l.parse::<i64>().is_ok()) {
        labels.sort_by_key(|l| l.parse::<i64>().unwrap());
    } else {
        labels.sort();
    }
}

/// Loads and validates a dataset directory. Errors name the first offending row
/// (row numbers count the header as row 1).
pub fn load_dataset(dir: &Path) -> Result<PanelDataset> {
    let panel_path = dir.join(PANEL_FILE);
    let posts_path = dir.join(POSTS_FILE);
    if !panel_path.exists() {
        return Err(data_err(&panel_path, "file not found"));
    }
    if !posts_path.exists() {
        return Err(data_err(&posts_path, "file not found"));
    }

    let mut rdr = open_csv(&panel_path)?;
    let headers = rdr.headers().map_err(|e| data_err(&panel_path, e.to_string()))?.clone();
    let d_z = check_header(&panel_path, &headers, &["unit", "period", "y"], "z_")?;

    let mut rows: HashMap<(String, i64), (f64, Vec<f64>, usize)> = HashMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| data_err(&panel_path, format!("row {row}: {e}")))?;
        if rec.len() != d_z + 3 {
            return Err(data_err(&panel_path, format!("row {row}: expected {} fields, found {}", d_z + 3, rec.len())));
        }
        let unit = rec[0].to_string();
        let period = parse_i64(&panel_path, row, &rec[1], "period")?;
        let y = parse_f64(&panel_path, row, &rec[2], "y")?;
        let z = (0..d_z)
            .map(|j| parse_f64(&panel_path, row, &rec[3 + j], &format!("z_{}", j + 1)))
            .collect::<Result<Vec<_>>>()?;
        if rows.insert((unit.clone(), period), (y, z, row)).is_some() {
            return Err(data_err(&panel_path, format!("row {row}: duplicate cell ({unit}, {period})")));
        }
    }
    if rows.is_empty() {
        return Err(data_err(&panel_path, "no data rows"));
    }

    let mut units: Vec<String> = rows.keys().map(|(u, _)| u.clone()).collect();
    units.sort();
    units.dedup();
    sort_labels(&mut units);
    let mut periods: Vec<i64> = rows.keys().map(|(_, p)| *p).collect();
    periods.sort_unstable();
    periods.dedup();
    let unit_index: HashMap<&str, usize> = units.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let period_index: HashMap<i64, usize> = periods.iter().enumerate().map(|(t, p)| (*p, t)).collect();
    let (n, t_len) = (units.len(), periods.len());

    let mut y = vec![0.0; n * t_len];
    let mut z = vec![0.0; n * t_len * d_z];
    let mut seen = vec![false; n * t_len];
    for ((unit, period), (yv, zv, _)) in &rows {
        let c = unit_index[unit.as_str()] * t_len + period_index[period];
        y[c] = *yv;
        z[c * d_z..(c + 1) * d_z].copy_from_slice(zv);
        seen[c] = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(data_err(
            &panel_path,
            format!("panel is unbalanced: no row for unit {} period {}", units[c / t_len], periods[c % t_len]),
        ));
    }

    let mut rdr = open_csv(&posts_path)?;
    let headers = rdr.headers().map_err(|e| data_err(&posts_path, e.to_string()))?.clone();
    let d_x = check_header(&posts_path, &headers, &["unit", "period", "day", "score"], "e_")?;
    // (cell, day) -> posts
    let mut days: BTreeMap<(usize, i64), (Vec<f64>, Vec<Vec<f64>>)> = BTreeMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| data_err(&posts_path, format!("row {row}: {e}")))?;
        if rec.len() != d_x + 4 {
            return Err(data_err(&posts_path, format!("row {row}: expected {} fields, found {}", d_x + 4, rec.len())));
        }
        let Some(&i) = unit_index.get(&rec[0]) else {
            return Err(data_err(&posts_path, format!("row {row}: unknown unit '{}'", &rec[0])));
        };
        let period = parse_i64(&posts_path, row, &rec[1], "period")?;
        let Some(&t) = period_index.get(&period) else {
            return Err(data_err(&posts_path, format!("row {row}: unknown period {period}")));
        };
        let day = parse_i64(&posts_path, row, &rec[2], "day")?;
        let score = parse_f64(&posts_path, row, &rec[3], "score")?;
        let e = (0..d_x)
            .map(|j| parse_f64(&posts_path, row, &rec[4 + j], &format!("e_{}", j + 1)))
            .collect::<Result<Vec<_>>>()?;
        let entry = days.entry((i * t_len + t, day)).or_default();
        entry.0.push(score);
        entry.1.push(e);
    }

    let mut cells = vec![MonthObs::default(); n * t_len];
    for ((c, day), (scores, posts)) in days {
        let cell = &mut cells[c];
        cell.days.push(day);
        cell.scores.push(average_scores(&scores)?);
        cell.x.extend(pool_embeddings(posts.iter().map(|p| p.as_slice()))?);
    }

    let mut ds = PanelDataset::new(n, t_len, d_x, d_z, y, z, cells)?;
    ds.unit_labels = units;
    ds.period_labels = periods;
    Ok(ds)
}

fn create(path: PathBuf) -> Result<(BufWriter<File>, PathBuf)> {
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok((BufWriter::new(file), path))
}

/// Writes the day-level dataset in the directory format, one posts row per day.
pub fn save_dataset(ds: &PanelDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (mut w, path) = create(dir.join(PANEL_FILE))?;
    let io = |path: &Path| { let p = path.to_path_buf(); move |e| Error::io(p, e) };
    let mut header = String::from("unit,period,y");
    for j in 0..ds.d_z() {
        header.push_str(&format!(",z_{}", j + 1));
    }
    writeln!(w, "{header}").map_err(io(&path))?;
    for i in 0..ds.n_units() {
        for t in 0..ds.n_periods() {
            let mut line = format!("{},{},{}", ds.unit_labels[i], ds.period_labels[t], ds.y(i, t));
            for v in ds.z(i, t) {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}").map_err(io(&path))?;
        }
    }
    w.flush().map_err(io(&path))?;

    let (mut w, path) = create(dir.join(POSTS_FILE))?;
    let mut header = String::from("unit,period,day,score");
    for j in 0..ds.d_x() {
        header.push_str(&format!(",e_{}", j + 1));
    }
    writeln!(w, "{header}").map_err(io(&path))?;
    for i in 0..ds.n_units() {
        for t in 0..ds.n_periods() {
            let cell = ds.cell(i, t);
            for k in 0..cell.len() {
                let mut line = format!(
                    "{},{},{},{}",
                    ds.unit_labels[i], ds.period_labels[t], cell.days[k], cell.scores[k]
                );
                for v in cell.embedding(k, ds.d_x()) {
                    line.push_str(&format!(",{v}"));
                }
                writeln!(w, "{line}").map_err(io(&path))?;
            }
        }
    }
    w.flush().map_err(io(&path))?;
    Ok(())
}
