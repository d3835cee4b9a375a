use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::gbdt::FeatureMap;

use super::{DataError, TransactionRecord, MISSING_VALUE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CategoricalPolicy {
    /// Non-numeric columns become the lexicographic rank of their value.
    #[default]
    LabelEncode,
    /// Any non-numeric cell is a row error.
    Reject,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    pub label_column: String,
    /// Column used to order records; absent columns are ignored.
    pub time_column: Option<String>,
    pub keep_time_feature: bool,
    pub categorical: CategoricalPolicy,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            label_column: "Class".into(),
            time_column: Some("Time".into()),
            keep_time_feature: false,
            categorical: CategoricalPolicy::LabelEncode,
        }
    }
}

pub fn load_csv(
    path: impl AsRef<Path>,
    opts: &LoadOptions,
) -> Result<Vec<TransactionRecord>, DataError> {
    let path = path.as_ref();
    let file =
        std::fs::File::open(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
    load_reader(file, opts)
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("na")
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn load_reader<R: Read>(
    reader: R,
    opts: &LoadOptions,
) -> Result<Vec<TransactionRecord>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| DataError::Schema(format!("cannot read header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let label_idx = headers
        .iter()
        .position(|h| *h == opts.label_column)
        .ok_or_else(|| {
            DataError::Schema(format!("label column `{}` not found", opts.label_column))
        })?;
    let time_idx = opts
        .time_column
        .as_ref()
        .and_then(|t| headers.iter().position(|h| h == t));

    let mut rows: Vec<(u64, csv::StringRecord)> = Vec::new();
    for result in rdr.records() {
        let rec = result.map_err(|e| DataError::Row {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec));
    }

    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| i != label_idx && (Some(i) != time_idx || opts.keep_time_feature))
        .collect();

    // per column: None for numeric, Some(sorted distinct values) for categorical
    let mut encodings: Vec<Option<Vec<String>>> = vec![None; headers.len()];
    for &c in &feature_idx {
        let categorical = rows
            .iter()
            .any(|(_, r)| !is_missing(&r[c]) && parse_number(&r[c]).is_none());
        if !categorical {
            continue;
        }
        if opts.categorical == CategoricalPolicy::Reject {
            let (line, _) = rows
                .iter()
                .find(|(_, r)| !is_missing(&r[c]) && parse_number(&r[c]).is_none())
                .expect("column is categorical");
            return Err(DataError::Row {
                line: *line,
                message: format!("non-numeric value in column `{}`", headers[c]),
            });
        }
        let distinct: BTreeSet<String> = rows
            .iter()
            .filter(|(_, r)| !is_missing(&r[c]))
            .map(|(_, r)| r[c].trim().to_string())
            .collect();
        encodings[c] = Some(distinct.into_iter().collect());
    }

    let mut out = Vec::with_capacity(rows.len());
    let mut times = Vec::with_capacity(rows.len());
    for (line, r) in &rows {
        let label = match parse_number(&r[label_idx]) {
            Some(0.0) => 0,
            Some(1.0) => 1,
            _ => {
                return Err(DataError::Row {
                    line: *line,
                    message: format!("label `{}` is not 0 or 1", &r[label_idx]),
                })
            }
        };
        let mut features = FeatureMap::with_capacity(feature_idx.len());
        for &c in &feature_idx {
            let cell = &r[c];
            let v = if is_missing(cell) {
                MISSING_VALUE
            } else if let Some(cats) = &encodings[c] {
                cats.binary_search_by(|s| s.as_str().cmp(cell.trim()))
                    .expect("value collected") as f64
            } else {
                parse_number(cell).expect("column is numeric")
            };
            features.insert(headers[c].clone(), v);
        }
        let t = time_idx
            .and_then(|i| parse_number(&r[i]))
            .unwrap_or(f64::NEG_INFINITY);
        times.push(t);
        out.push(TransactionRecord {
            features,
            label,
            time_index: 0,
        });
    }

    if time_idx.is_some() {
        let mut order: Vec<usize> = (0..out.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let mut slots: Vec<Option<TransactionRecord>> = out.into_iter().map(Some).collect();
        out = order
            .into_iter()
            .map(|i| slots[i].take().expect("each index once"))
            .collect();
    }
    for (i, r) in out.iter_mut().enumerate() {
        r.time_index = i;
    }
    Ok(out)
}

/// Replaces NaN feature values with the missing-value marker.
pub fn clean(records: &mut [TransactionRecord]) {
    for r in records {
        for v in r.features.values_mut() {
            if v.is_nan() {
                *v = MISSING_VALUE;
            }
        }
    }
}

/// Writes `Time, <features...>, Class`, the layout [`LoadOptions::default`] reads.
pub fn write_csv<W: Write>(records: &[TransactionRecord], writer: W) -> Result<(), DataError> {
    let io = |e: csv::Error| DataError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    let Some(first) = records.first() else {
        return Err(DataError::Size("no records to write".into()));
    };
    let names: Vec<&String> = first.features.keys().collect();
    let mut header = vec!["Time".to_string()];
    header.extend(names.iter().map(|s| s.to_string()));
    header.push("Class".into());
    w.write_record(&header).map_err(io)?;
    for r in records {
        let mut row = vec![r.time_index.to_string()];
        for n in &names {
            let v = r
                .features
                .get(*n)
                .ok_or_else(|| DataError::Schema(format!("record lacks `{n}`")))?;
            row.push(format!("{v:?}"));
        }
        row.push(r.label.to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<Vec<TransactionRecord>, DataError> {
        load_reader(text.as_bytes(), &LoadOptions::default())
    }

    #[test]
    fn categorical_label_encoding() {
        let recs = load("card,amt,Class\nvisa,1.5,0\nmastercard,2,1\nvisa,3,0\n").unwrap();
        let card: Vec<f64> = recs.iter().map(|r| r.features["card"]).collect();
        assert_eq!(card, vec![1.0, 0.0, 1.0]);
        let amt: Vec<f64> = recs.iter().map(|r| r.features["amt"]).collect();
        assert_eq!(amt, vec![1.5, 2.0, 3.0]);
        assert_eq!(
            recs.iter().map(|r| r.label).collect::<Vec<_>>(),
            vec![0, 1, 0]
        );
    }

    #[test]
    fn missing_cells_become_marker() {
        let recs = load("a,b,Class\n,NaN,0\n1,2,1\n").unwrap();
        assert_eq!(recs[0].features["a"], -999.0);
        assert_eq!(recs[0].features["b"], -999.0);
        assert_eq!(recs[1].features["a"], 1.0);
    }

    #[test]
    fn time_orders_and_is_dropped() {
        let recs = load("Time,V1,Class\n5,0.5,0\n1,0.1,1\n3,0.3,0\n").unwrap();
        let v: Vec<f64> = recs.iter().map(|r| r.features["V1"]).collect();
        assert_eq!(v, vec![0.1, 0.3, 0.5]);
        assert!(!recs[0].features.contains_key("Time"));
        assert_eq!(
            recs.iter().map(|r| r.time_index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        let opts = LoadOptions {
            keep_time_feature: true,
            ..Default::default()
        };
        let kept = load_reader("Time,V1,Class\n5,0.5,0\n".as_bytes(), &opts).unwrap();
        assert_eq!(kept[0].features["Time"], 5.0);
    }

    #[test]
    fn schema_and_row_errors() {
        assert!(matches!(load("a,b\n1,2\n"), Err(DataError::Schema(_))));
        match load("a,Class\n1,0\n2,7\n") {
            Err(DataError::Row { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            load("a,Class\n1,0\n2\n"),
            Err(DataError::Row { .. })
        ));
        let reject = LoadOptions {
            categorical: CategoricalPolicy::Reject,
            ..Default::default()
        };
        assert!(matches!(
            load_reader("a,Class\nx,0\n".as_bytes(), &reject),
            Err(DataError::Row { line: 2, .. })
        ));
    }

    #[test]
    fn clean_is_idempotent() {
        let mut recs = load("a,Class\n1,0\n2,1\n").unwrap();
        recs[0].features["a"] = f64::NAN;
        clean(&mut recs);
        let once = recs.clone();
        clean(&mut recs);
        assert_eq!(recs, once);
        assert_eq!(recs[0].features["a"], -999.0);
    }

    #[test]
    fn csv_round_trip() {
        let recs = load("Time,V1,V2,Class\n0,0.25,-1.5,0\n1,3.0,2.0,1\n").unwrap();
        let mut buf = Vec::new();
        write_csv(&recs, &mut buf).unwrap();
        assert_eq!(load(std::str::from_utf8(&buf).unwrap()).unwrap(), recs);
    }
}
