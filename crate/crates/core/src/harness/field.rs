//! Plain-text rain fields: one CSV line per grid row, southern row first.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geo::{GridGeoref, RainField};

pub fn field_to_csv(field: &RainField) -> String {
    let w = field.georef.width;
    let mut s = String::new();
    for row in field.values.chunks(w) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}

pub fn write_field_csv(field: &RainField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, field_to_csv(field)).map_err(|e| Error::io(path, e))
}

/// Reads a field written by [`write_field_csv`] onto `georef`.
pub fn read_field_csv(path: impl AsRef<Path>, georef: GridGeoref) -> Result<RainField> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::with_capacity(georef.cells());
    let mut rows = 0;
    for (r, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let row: Vec<&str> = line.split(',').collect();
        if row.len() != georef.width {
            return Err(Error::format(path, format!("row {r}"), format!("{} columns, expected {}", row.len(), georef.width)));
        }
        for (c, v) in row.iter().enumerate() {
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("row {r} column {c}"), format!("'{v}' is not a number")))?;
            values.push(v);
        }
        rows += 1;
    }
    if rows != georef.height {
        return Err(Error::format(path, "rows", format!("{rows} rows, expected {}", georef.height)));
    }
    RainField::new(values, georef)
}
