//! Episode files: a comma-separated table `t,q1..qn,u1..un,fx,fy,fz,mx,my,mz`
//! plus a `key = value` sidecar with the same basename and a `.meta`
//! extension. Synthetic episodes also write their ground truth to a
//! `.truth.csv` table.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{Episode, SigmaParams, SynthMeta, WRENCH};
use crate::error::{FdnError, Result};

const WRENCH_NAMES: [&str; WRENCH] = ["fx", "fy", "fz", "mx", "my", "mz"];

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn parse_err(path: &Path, msg: impl Into<String>) -> FdnError {
    FdnError::Parse { file: path.display().to_string(), msg: msg.into() }
}

fn csv_err(path: &Path, e: csv::Error) -> FdnError {
    parse_err(path, e.to_string())
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// Writes `<dir>/<name>.csv`, `<name>.meta` and, for synthetic episodes,
/// `<name>.truth.csv`. Returns the table path.
pub fn write_episode(dir: &Path, name: &str, e: &Episode) -> Result<PathBuf> {
    e.validate()?;
    if e.w_timestamps.is_some() {
        return Err(FdnError::Invalid("align the wrench clock before writing an episode".into()));
    }
    fs::create_dir_all(dir)?;
    let n = e.n();
    let path = dir.join(format!("{name}.csv"));
    let mut wr = csv::Writer::from_path(&path).map_err(|err| csv_err(&path, err))?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|j| format!("q{j}")));
    header.extend((1..=n).map(|j| format!("u{j}")));
    header.extend(WRENCH_NAMES.iter().map(|s| s.to_string()));
    wr.write_record(&header).map_err(|err| csv_err(&path, err))?;
    for i in 0..e.steps() {
        let mut rec = vec![e.timestamps[i].to_string()];
        rec.extend(e.q.column(i).iter().map(f64::to_string));
        rec.extend(e.u.column(i).iter().map(f64::to_string));
        rec.extend(e.w.column(i).iter().map(f64::to_string));
        wr.write_record(&rec).map_err(|err| csv_err(&path, err))?;
    }
    wr.flush()?;

    let mut meta = vec![
        format!("sample_rate = {}", e.sample_rate),
        format!("session = {}", e.session),
        format!("n = {n}"),
    ];
    if let Some(s) = e.static_end_s {
        meta.push(format!("static_end_s = {s}"));
    }
    if let Some(m) = &e.meta {
        meta.push(format!("seed = {}", m.seed));
        meta.push(format!("sigma_base = {}", m.sigma_params.base));
        meta.push(format!("sigma_gain = {}", m.sigma_params.gain));
        meta.push(format!("sigma_peak = {}", join(&m.sigma_params.peak)));
        meta.push(format!("sigma_b = {}", join(&m.sigma_params.b)));
        meta.push(format!("offset = {}", join(&m.offset)));
        write_truth(&sidecar(&path, "truth.csv"), m, n)?;
    }
    meta.push(String::new());
    fs::write(sidecar(&path, "meta"), meta.join("\n"))?;
    Ok(path)
}

fn write_truth(path: &Path, m: &SynthMeta, n: usize) -> Result<()> {
    let mut wr = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = Vec::new();
    for prefix in ["sigma", "trend", "res"] {
        header.extend(WRENCH_NAMES.iter().map(|c| format!("{prefix}_{c}")));
    }
    header.extend((1..=n).map(|j| format!("qd{j}")));
    header.extend((1..=n).map(|j| format!("qdd{j}")));
    wr.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..m.sigma.ncols() {
        let mut rec = Vec::with_capacity(header.len());
        for a in [&m.sigma, &m.w_trend, &m.w_res, &m.qd, &m.qdd] {
            rec.extend(a.column(i).iter().map(f64::to_string));
        }
        wr.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    wr.flush()?;
    Ok(())
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rd.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(path, format!("row {}: {e}", line + 2)))?;
        if row.len() != header.len() {
            return Err(parse_err(path, format!("row {} has {} fields", line + 2, row.len())));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn columns(rows: &[Vec<f64>], start: usize, count: usize) -> Array2<f64> {
    Array2::from_shape_fn((count, rows.len()), |(c, i)| rows[i][start + c])
}

fn parse_list(path: &Path, key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| parse_err(path, format!("{key}: {e}"))))
        .collect()
}

/// Reads an episode table and its sidecar. The joint count comes from the
/// header; `static_end_s` is optional (preprocessing requires it).
pub fn read_episode(path: &Path) -> Result<Episode> {
    let (header, rows) = read_table(path)?;
    let cols = header.len();
    if cols < 1 + WRENCH + 2 || (cols - 1 - WRENCH) % 2 != 0 || header[0] != "t" {
        return Err(parse_err(path, "expected header t,q1..qn,u1..un,fx,fy,fz,mx,my,mz"));
    }
    let n = (cols - 1 - WRENCH) / 2;
    if rows.len() < 2 {
        return Err(parse_err(path, "fewer than two samples"));
    }

    let meta_path = sidecar(path, "meta");
    let text = fs::read_to_string(&meta_path)?;
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| parse_err(&meta_path, format!("bad line `{line}`")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let num = |k: &str| -> Result<Option<f64>> {
        kv.get(k)
            .map(|v| v.parse::<f64>().map_err(|e| parse_err(&meta_path, format!("{k}: {e}"))))
            .transpose()
    };
    let timestamps: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let sample_rate = match num("sample_rate")? {
        Some(r) => r,
        None => 1.0 / (timestamps[1] - timestamps[0]),
    };
    if let Some(hn) = num("n")? {
        if hn as usize != n {
            return Err(parse_err(&meta_path, format!("n = {hn} but the table has {n} joints")));
        }
    }

    let mut e = Episode {
        sample_rate,
        timestamps,
        q: columns(&rows, 1, n),
        u: columns(&rows, 1 + n, n),
        w: columns(&rows, 1 + 2 * n, WRENCH),
        w_timestamps: None,
        session: kv.get("session").cloned().unwrap_or_default(),
        static_end_s: num("static_end_s")?,
        meta: None,
    };

    let truth_path = sidecar(path, "truth.csv");
    if let (Some(seed), true) = (kv.get("seed"), truth_path.exists()) {
        let (_, t) = read_table(&truth_path)?;
        let get = |k: &str| kv.get(k).map(String::as_str).unwrap_or("");
        let offset = parse_list(&meta_path, "offset", get("offset"))?;
        e.meta = Some(SynthMeta {
            seed: seed.parse().map_err(|err| parse_err(&meta_path, format!("seed: {err}")))?,
            sigma: columns(&t, 0, WRENCH),
            sigma_params: SigmaParams {
                base: num("sigma_base")?.unwrap_or(0.0),
                gain: num("sigma_gain")?.unwrap_or(0.0),
                peak: parse_list(&meta_path, "sigma_peak", get("sigma_peak"))?,
                b: parse_list(&meta_path, "sigma_b", get("sigma_b"))?,
            },
            w_trend: columns(&t, WRENCH, WRENCH),
            w_res: columns(&t, 2 * WRENCH, WRENCH),
            qd: columns(&t, 3 * WRENCH, n),
            qdd: columns(&t, 3 * WRENCH + n, n),
            offset: offset
                .try_into()
                .map_err(|_| parse_err(&meta_path, "offset needs six values"))?,
        });
    }
    e.validate()?;
    Ok(e)
}
