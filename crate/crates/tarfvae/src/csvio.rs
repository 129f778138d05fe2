//! Series CSV files: header row, time label in the first column, one
//! numeric column per channel.

use std::fs::File;
use std::path::Path;

use tarfvae_core::data::RawSeries;
use tarfvae_core::Tensor;

use crate::error::{io_err, Error, Result};

pub fn load_csv(path: &Path) -> Result<RawSeries> {
    let file = File::open(path).map_err(io_err(path))?;
    read_series(file, path)
}

/// Parses series CSV from any reader; `path` is only used in messages.
pub fn read_series(reader: impl std::io::Read, path: &Path) -> Result<RawSeries> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.len() < 2 {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            message: format!("need a time column and at least one channel, header has {} columns", headers.len()),
        });
    }
    let c = headers.len() - 1;
    let mut stamps = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); c];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != c + 1 {
            return Err(Error::RaggedRow {
                path: path.to_path_buf(),
                row,
                expected: c,
                got: rec.len().saturating_sub(1),
            });
        }
        stamps.push(rec[0].to_string());
        for (ch, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::NonNumeric {
                path: path.to_path_buf(),
                row,
                column: headers[ch + 1].to_string(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumeric {
                    path: path.to_path_buf(),
                    row,
                    column: headers[ch + 1].to_string(),
                    value: cell.to_string(),
                });
            }
            cols[ch].push(v);
        }
    }
    let t = stamps.len();
    let values = Tensor::new(&[c, t], cols.concat())?;
    Ok(RawSeries::new(stamps, values)?)
}

/// Writes a series with a `date` column and `c0..` (or the given) channel
/// names.
pub fn write_csv(path: &Path, series: &RawSeries, names: Option<&[String]>) -> Result<()> {
    let mut out = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let c = series.channels();
    let mut header = vec!["date".to_string()];
    match names {
        Some(n) => header.extend(n.iter().cloned()),
        None => header.extend((0..c).map(|i| format!("c{i}"))),
    }
    let wrap = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    out.write_record(&header).map_err(wrap)?;
    for t in 0..series.len() {
        let mut rec = vec![series.timestamps[t].clone()];
        rec.extend((0..c).map(|ch| format!("{}", series.channel(ch)[t])));
        out.write_record(&rec).map_err(wrap)?;
    }
    out.flush().map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RawSeries> {
        read_series(text.as_bytes(), Path::new("mem.csv"))
    }

    #[test]
    fn transcribes_columns_per_channel() {
        let s = parse("date,a,b\nt0,1,2\nt1,3,4\nt2,5,6\n").unwrap();
        assert_eq!(s.channels(), 2);
        assert_eq!(s.len(), 3);
        assert_eq!(s.channel(0), &[1.0, 3.0, 5.0]);
        assert_eq!(s.channel(1), &[2.0, 4.0, 6.0]);
        assert_eq!(s.timestamps, ["t0", "t1", "t2"]);
    }

    #[test]
    fn ragged_row_names_the_row() {
        let err = parse("date,a,b\nt0,1,2\nt1,3\n").unwrap_err();
        assert!(matches!(err, Error::RaggedRow { row: 1, expected: 2, got: 1, .. }), "{err}");
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let err = parse("date,a,b\nt0,1,2\nt1,3,x\n").unwrap_err();
        match err {
            Error::NonNumeric { row, column, .. } => assert_eq!((row, column.as_str()), (1, "b")),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(load_csv(Path::new("/nonexistent/x.csv")), Err(Error::Io { .. })));
    }

    #[test]
    fn eight_column_file_has_seven_channels() {
        let mut text = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
        for i in 0..4 {
            text.push_str(&format!("2016-07-01 0{i}:00:00,1,2,3,4,5,6,{i}\n"));
        }
        assert_eq!(parse(&text).unwrap().channels(), 7);
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = parse("date,a,b\nt0,1.5,2\nt1,3,-4e-3\n").unwrap();
        write_csv(&p, &s, None).unwrap();
        let back = load_csv(&p).unwrap();
        assert_eq!(back.values, s.values);
    }
}
