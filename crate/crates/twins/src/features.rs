//! CSV form of exported hidden features.
//!
//! Columns are the feature columns followed by `domain` (`source` or
//! `target`), `label` and `present` (`1` when the label occurs in the target).

use std::io::{Read, Write};

use twins_core::eval::{Domain, FeatureRow, FeatureTable};

use crate::error::{Error, Result};

pub const META_COLUMNS: [&str; 3] = ["domain", "label", "present"];

pub fn write_csv<W: Write>(table: &FeatureTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = table.columns.clone();
    header.extend(META_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for row in &table.rows {
        let mut rec: Vec<String> = row.features.iter().map(|v| format!("{v:?}")).collect();
        rec.push(row.domain.as_str().to_string());
        rec.push(row.label.to_string());
        rec.push(if row.present { "1" } else { "0" }.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<features csv>", e))?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<FeatureTable> {
    let bad = |m: String| Error::format("features csv", m);
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < META_COLUMNS.len() || header[header.len() - 3..] != META_COLUMNS {
        return Err(bad(format!("header must end with {META_COLUMNS:?}")));
    }
    let m = header.len() - META_COLUMNS.len();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let features = (0..m)
            .map(|j| rec[j].parse::<f64>().map_err(|_| bad(format!("bad feature `{}`", &rec[j]))))
            .collect::<Result<Vec<_>>>()?;
        let domain = match &rec[m] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(bad(format!("bad domain `{other}`"))),
        };
        let label = rec[m + 1].parse().map_err(|_| bad(format!("bad label `{}`", &rec[m + 1])))?;
        let present = match &rec[m + 2] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("bad present flag `{other}`"))),
        };
        rows.push(FeatureRow { features, domain, label, present });
    }
    Ok(FeatureTable { columns: header[..m].to_vec(), rows })
}
