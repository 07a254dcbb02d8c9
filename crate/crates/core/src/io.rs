//! Small formatting helpers shared by the CSV writers.

/// Significant digits used for floats in CSV output.
pub const CSV_SIG_DIGITS: usize = 12;

/// Shortest text of `x` after rounding to 12 significant digits. Very small
/// or large magnitudes use exponent notation.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{:.*e}", CSV_SIG_DIGITS - 1, x).parse().unwrap_or(x);
    let a = rounded.abs();
    if (1e-5..1e15).contains(&a) {
        format!("{rounded}")
    } else {
        format!("{rounded:e}")
    }
}

/// Rows of a `k, sensor, a, b` table grouped by `k`. Sensors must appear
/// as `0..n` within each group.
pub fn read_sensor_table<R: std::io::Read>(r: R, header: [&str; 4]) -> Result<Vec<(usize, Vec<f64>, Vec<f64>)>, String> {
    let mut rd = csv::Reader::from_reader(r);
    let h = rd.headers().map_err(|e| e.to_string())?.clone();
    if h.iter().ne(header.iter().copied()) {
        return Err(format!("unexpected header {h:?}"));
    }
    let mut out: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
    for (line, rec) in rd.deserialize::<(usize, usize, f64, f64)>().enumerate() {
        let (k, i, a, b) = rec.map_err(|e| e.to_string())?;
        match out.last_mut() {
            Some(g) if g.0 == k => {
                if i != g.1.len() {
                    return Err(format!("row {}: sensor {i} out of order", line + 2));
                }
                g.1.push(a);
                g.2.push(b);
            }
            last => {
                if i != 0 || last.is_some_and(|g| g.0 >= k) {
                    return Err(format!("row {}: k = {k}, sensor {i} out of order", line + 2));
                }
                out.push((k, vec![a], vec![b]));
            }
        }
    }
    Ok(out)
}

/// Any all-numeric CSV artifact. Empty cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl NumericTable {
    pub fn read<R: std::io::Read>(r: R) -> Result<Self, String> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            let row = rec
                .iter()
                .map(|c| if c.is_empty() { Ok(None) } else { c.parse::<f64>().map(Some).map_err(|e| format!("{c:?}: {e}")) })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(NumericTable { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Writes the table back with [`fmt_sig`] formatting.
    pub fn write<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.header)?;
        for r in &self.rows {
            out.write_record(r.iter().map(|c| c.map(fmt_sig).unwrap_or_default()))?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formatting() {
        assert_eq!(fmt_sig(0.25), "0.25");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_sig(-2.0), "-2");
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1e-300 / 3.0), "3.33333333333e-301");
        assert_eq!(fmt_sig(2.5e20), "2.5e20");
        assert_eq!(fmt_sig(f64::INFINITY), "inf");
    }
}
