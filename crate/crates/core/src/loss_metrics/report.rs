//! Plain-text F1 tables (AU rows, method columns) and published reference numbers.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

/// Published F1 (%) per method on BP4D for AUs 1,2,4,6,7,10,12,14,15,17,23,24,
/// followed by the average. NaN marks a value that was not reported.
pub const BP4D_AUS: [u32; 12] = [1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24];
pub const BP4D_REFERENCE: [(&str, [f64; 13]); 10] = [
    ("LSVM", [23.2, 22.8, 23.1, 27.2, 47.1, 77.2, 63.7, 64.3, 18.4, 33.0, 19.4, 20.7, 35.3]),
    ("JPML", [32.6, 25.6, 37.4, 42.3, 50.5, 72.2, 74.1, 65.7, 38.1, 40.0, 30.4, 42.3, 45.9]),
    ("DRML", [36.4, 41.8, 43.0, 55.0, 67.0, 66.3, 65.8, 54.1, 36.7, 48.0, 31.7, 30.0, 48.3]),
    ("CPM", [43.4, 40.7, 43.4, 59.2, 61.3, 62.1, 68.5, 52.5, 34.0, 54.3, 39.5, 37.8, 50.0]),
    ("CNN+LSTM", [31.4, 31.1, 71.4, 63.3, 77.1, 45.0, 82.6, 72.9, 33.2, 53.9, 38.6, 37.0, 53.2]),
    ("FVGG", [27.8, 27.6, 18.3, 69.7, 69.1, 78.1, 63.2, 36.4, 26.1, 50.7, 22.8, 35.9, 43.8]),
    ("ROI", [36.2, 31.6, 43.4, 77.1, 73.7, 85.0, 87.0, 62.6, 45.7, 58.0, 38.3, 37.4, 56.4]),
    ("R-T1", [47.1, 56.2, 52.4, 78.5, 80.8, 87.8, 89.4, 74.8, 58.5, 68.4, 40.4, 59.4, 66.1]),
    ("R-T2", [45.8, 48.0, 45.9, 76.7, 79.6, 85.3, 87.2, 71.6, 48.0, 59.5, 37.5, 51.1, 61.4]),
    ("FERA", [28.0, 28.0, 34.0, 70.0, 78.0, 81.0, 78.0, 75.0, 20.0, 36.0, 41.0, f64::NAN, 51.7]),
];

/// Published F1 (%) on DISFA for AUs 1,2,4,6,9,12,25,26 plus the average.
pub const DISFA_AUS: [u32; 8] = [1, 2, 4, 6, 9, 12, 25, 26];
pub const DISFA_REFERENCE: [(&str, [f64; 9]); 6] = [
    ("LSVM", [10.8, 10.0, 21.8, 15.7, 11.5, 70.4, 12.0, 22.1, 21.8]),
    ("APL", [11.4, 12.0, 30.1, 12.4, 10.1, 65.9, 21.4, 26.9, 23.8]),
    ("DRML", [17.3, 17.7, 37.4, 29.0, 10.7, 37.7, 38.5, 20.1, 26.7]),
    ("FVGG", [32.5, 24.3, 61.0, 34.2, 1.67, 72.1, 87.3, 7.1, 40.2]),
    ("ROI", [41.5, 26.4, 66.4, 50.7, 8.5, 89.3, 88.9, 15.6, 48.5]),
    ("R-T1", [42.6, 27.2, 65.5, 55.5, 22.8, 82.9, 88.3, 25.9, 51.3]),
];

/// One column of an F1 table, values in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodColumn {
    pub name: String,
    pub per_au: Vec<Option<f64>>,
    pub average: Option<f64>,
}

impl MethodColumn {
    pub fn from_fractions(name: &str, per_au: &[f64], average: f64) -> Self {
        MethodColumn {
            name: name.to_string(),
            per_au: per_au.iter().map(|v| Some(v * 100.0)).collect(),
            average: Some(average * 100.0),
        }
    }

    fn from_reference(name: &str, values: &[f64]) -> Self {
        let opt = |v: f64| (!v.is_nan()).then_some(v);
        let (avg, per) = values.split_last().expect("reference row has an average");
        MethodColumn {
            name: name.to_string(),
            per_au: per.iter().map(|&v| opt(v)).collect(),
            average: opt(*avg),
        }
    }
}

pub fn bp4d_reference_columns() -> Vec<MethodColumn> {
    BP4D_REFERENCE
        .iter()
        .map(|(n, v)| MethodColumn::from_reference(n, v))
        .collect()
}

pub fn disfa_reference_columns() -> Vec<MethodColumn> {
    DISFA_REFERENCE
        .iter()
        .map(|(n, v)| MethodColumn::from_reference(n, v))
        .collect()
}

/// Renders AU rows against method columns with a closing `Avg` row.
pub fn render_table(title: &str, aus: &[u32], columns: &[MethodColumn]) -> String {
    let width = columns
        .iter()
        .map(|c| c.name.len())
        .max()
        .unwrap_or(0)
        .max(6);
    let cell = |v: Option<f64>| match v {
        Some(v) => format!("{v:>width$.1}"),
        None => format!("{:>width$}", "-"),
    };
    let mut out = String::new();
    writeln!(out, "{title}").unwrap();
    write!(out, "{:<5}", "AU").unwrap();
    for c in columns {
        write!(out, " {:>width$}", c.name).unwrap();
    }
    out.push('\n');
    for (i, au) in aus.iter().enumerate() {
        write!(out, "{:<5}", au).unwrap();
        for c in columns {
            write!(out, " {}", cell(c.per_au.get(i).copied().flatten())).unwrap();
        }
        out.push('\n');
    }
    write!(out, "{:<5}", "Avg").unwrap();
    for c in columns {
        write!(out, " {}", cell(c.average)).unwrap();
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_averages_present() {
        let bp4d = bp4d_reference_columns();
        let rt1 = bp4d.iter().find(|c| c.name == "R-T1").unwrap();
        assert_eq!(rt1.average, Some(66.1));
        let disfa = disfa_reference_columns();
        let rt1 = disfa.iter().find(|c| c.name == "R-T1").unwrap();
        assert_eq!(rt1.average, Some(51.3));
        let fera = bp4d.iter().find(|c| c.name == "FERA").unwrap();
        assert_eq!(fera.per_au[11], None);
    }

    #[test]
    fn table_has_one_row_per_au_plus_average() {
        let col = MethodColumn::from_fractions("ROI", &[0.5; 12], 0.5);
        let t = render_table("t", &BP4D_AUS, &[col]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 1 + 1 + 12 + 1);
        assert!(lines.last().unwrap().starts_with("Avg"));
        assert!(lines.last().unwrap().contains("50.0"));
    }
}
