//! CSV/JSON readers and writers for site data, prediction matrices, weight
//! reports, and study summaries.
//!
//! All floating-point output uses 17 significant digits so files round-trip
//! to the exact same binary values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::aggregate::Diagnostics;
use crate::error::{CateForgeError, Result};
use crate::learners::SiteDataset;
use crate::sim::StudyTable;

/// Formats a float with 17 significant digits (`{:.16e}`).
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_float(raw: &str, location: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .map_err(|_| CateForgeError::parse(location, format!("expected a number, got {raw:?}")))
}

/// Reads one site's observations from a CSV file with header
/// `y,a,x1,...,xd`. Treatment must be 0 or 1; all values must be finite.
pub fn read_site_csv(path: &Path) -> Result<SiteDataset> {
    let site_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "site".to_string());
    let file = File::open(path).map_err(|e| {
        CateForgeError::parse(path.display().to_string(), format!("cannot open: {e}"))
    })?;
    read_site_reader(BufReader::new(file), &path.display().to_string(), site_id)
}

pub fn read_site_reader(
    reader: impl Read,
    source: &str,
    site_id: String,
) -> Result<SiteDataset> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| CateForgeError::parse(source, format!("bad header: {e}")))?
        .clone();
    if headers.len() < 3 {
        return Err(CateForgeError::parse(
            format!("{source}, header"),
            "need at least columns y, a, x1",
        ));
    }
    if &headers[0] != "y" || &headers[1] != "a" {
        return Err(CateForgeError::parse(
            format!("{source}, header"),
            format!(
                "first two columns must be named 'y' and 'a', got {:?} and {:?}",
                &headers[0], &headers[1]
            ),
        ));
    }
    let d = headers.len() - 2;
    for (j, name) in headers.iter().skip(2).enumerate() {
        let expected = format!("x{}", j + 1);
        if name != expected {
            return Err(CateForgeError::parse(
                format!("{source}, header column {}", j + 3),
                format!("expected {expected:?}, got {name:?}"),
            ));
        }
    }

    let mut outcomes = Vec::new();
    let mut treatments = Vec::new();
    let mut covariates = Vec::new();
    for (idx, record) in csv.records().enumerate() {
        let line = idx + 2; // 1-based with header
        let location = format!("{source}, line {line}");
        let record =
            record.map_err(|e| CateForgeError::parse(&location, format!("bad row: {e}")))?;
        if record.len() != headers.len() {
            return Err(CateForgeError::parse(
                &location,
                format!("expected {} fields, got {}", headers.len(), record.len()),
            ));
        }
        outcomes.push(parse_float(&record[0], &format!("{location}, column y"))?);
        let a_raw = record[1].trim();
        let a = match a_raw {
            "0" => 0u8,
            "1" => 1u8,
            _ => {
                return Err(CateForgeError::parse(
                    format!("{location}, column a"),
                    format!("treatment must be 0 or 1, got {a_raw:?}"),
                ))
            }
        };
        treatments.push(a);
        for j in 0..d {
            covariates.push(parse_float(
                &record[2 + j],
                &format!("{location}, column x{}", j + 1),
            )?);
        }
    }
    let n = outcomes.len();
    let covariates = Array2::from_shape_vec((n, d), covariates)
        .map_err(|e| CateForgeError::parse(source, format!("covariate shape: {e}")))?;
    SiteDataset::new(Array1::from(outcomes), treatments, covariates, site_id)
}

/// Writes a site dataset in the same `y,a,x1..xd` layout.
pub fn write_site_csv(path: &Path, data: &SiteDataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let d = data.covariates.ncols();
    let mut header = vec!["y".to_string(), "a".to_string()];
    header.extend((1..=d).map(|j| format!("x{j}")));
    writeln!(out, "{}", header.join(","))?;
    for i in 0..data.len() {
        let mut fields = vec![
            format_float(data.outcomes[i]),
            data.treatments[i].to_string(),
        ];
        fields.extend((0..d).map(|j| format_float(data.covariates[[i, j]])));
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads an `n x S` matrix of site CATE predictions on target draws from a
/// CSV with header `site_1,...,site_S`.
pub fn read_predictions_csv(path: &Path) -> Result<(Array2<f64>, Vec<String>)> {
    let file = File::open(path).map_err(|e| {
        CateForgeError::parse(path.display().to_string(), format!("cannot open: {e}"))
    })?;
    read_predictions_reader(BufReader::new(file), &path.display().to_string())
}

pub fn read_predictions_reader(
    reader: impl Read,
    source: &str,
) -> Result<(Array2<f64>, Vec<String>)> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| CateForgeError::parse(source, format!("bad header: {e}")))?
        .clone();
    if headers.is_empty() {
        return Err(CateForgeError::parse(source, "empty header"));
    }
    for (j, name) in headers.iter().enumerate() {
        let expected = format!("site_{}", j + 1);
        if name != expected {
            return Err(CateForgeError::parse(
                format!("{source}, header column {}", j + 1),
                format!("expected {expected:?}, got {name:?}"),
            ));
        }
    }
    let s = headers.len();
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (idx, record) in csv.records().enumerate() {
        let line = idx + 2;
        let location = format!("{source}, line {line}");
        let record =
            record.map_err(|e| CateForgeError::parse(&location, format!("bad row: {e}")))?;
        if record.len() != s {
            return Err(CateForgeError::parse(
                &location,
                format!("expected {s} fields, got {}", record.len()),
            ));
        }
        for j in 0..s {
            values.push(parse_float(
                &record[j],
                &format!("{location}, column site_{}", j + 1),
            )?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CateForgeError::parse(source, "no data rows"));
    }
    let matrix = Array2::from_shape_vec((rows, s), values)
        .map_err(|e| CateForgeError::parse(source, format!("shape: {e}")))?;
    let ids = headers.iter().map(|h| h.to_string()).collect();
    Ok((matrix, ids))
}

pub fn write_predictions_csv(path: &Path, values: &Array2<f64>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let s = values.ncols();
    let header: Vec<String> = (1..=s).map(|j| format!("site_{j}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..values.nrows() {
        let fields: Vec<String> = (0..s).map(|j| format_float(values[[i, j]])).collect();
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// JSON document describing a fitted weight vector and its certificates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsDocument {
    pub method: String,
    pub weights: Vec<f64>,
    pub worst_case_regret: f64,
    pub kkt_residual: f64,
    pub lambda_min: f64,
}

impl WeightsDocument {
    pub fn new(method: &str, weights: &[f64], diagnostics: &Diagnostics) -> Self {
        WeightsDocument {
            method: method.to_string(),
            weights: weights.to_vec(),
            worst_case_regret: diagnostics.worst_case_regret,
            kkt_residual: diagnostics.kkt_residual,
            lambda_min: diagnostics.lambda_min,
        }
    }
}

/// Serializes the weights document with every float printed at 17
/// significant digits.
pub fn weights_document_to_json(doc: &WeightsDocument) -> String {
    let weights: Vec<String> = doc.weights.iter().map(|w| format_float(*w)).collect();
    format!(
        "{{\n  \"method\": {},\n  \"weights\": [{}],\n  \"worst_case_regret\": {},\n  \"kkt_residual\": {},\n  \"lambda_min\": {}\n}}\n",
        serde_json::to_string(&doc.method).unwrap(),
        weights.join(", "),
        format_float(doc.worst_case_regret),
        format_float(doc.kkt_residual),
        format_float(doc.lambda_min),
    )
}

pub fn write_weights_json(path: &Path, doc: &WeightsDocument) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(weights_document_to_json(doc).as_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn read_weights_json(path: &Path) -> Result<WeightsDocument> {
    let file = File::open(path).map_err(|e| {
        CateForgeError::parse(path.display().to_string(), format!("cannot open: {e}"))
    })?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| {
        CateForgeError::parse(path.display().to_string(), format!("bad JSON: {e}"))
    })
}

/// Writes the per-method study summary: one row per method with the mean
/// worst-case regret and its standard error across replications.
pub fn write_study_csv(path: &Path, study: &StudyTable) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "method,n_reps,mean_worst_case_regret,stderr_worst_case_regret")?;
    for (m, tag) in study.methods.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{}",
            tag.as_str(),
            study.n_reps,
            format_float(study.mean_worst_case[m]),
            format_float(study.stderr_worst_case[m]),
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the long-format per-(method, site) table of mean empirical
/// regrets, suitable for plotting.
pub fn write_plotdata_csv(path: &Path, study: &StudyTable) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "method,site,mean_regret")?;
    for (m, tag) in study.methods.iter().enumerate() {
        for (site, regret) in study.mean_site_regret[m].iter().enumerate() {
            writeln!(
                out,
                "{},site_{},{}",
                tag.as_str(),
                site + 1,
                format_float(*regret),
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::MethodTag;
    use crate::sim::ReplicationReport;
    use ndarray::array;
    use std::io::Cursor;

    fn roundtrip_dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn site_csv_roundtrips_exactly() {
        let data = SiteDataset::new(
            array![1.25, -0.5, 3.0_f64.sqrt(), 0.1],
            vec![1, 0, 1, 0],
            array![
                [0.1, -2.0],
                [1.0 / 3.0, 0.0],
                [5e-300, 2.5],
                [-1.75, 1e300]
            ],
            "s".to_string(),
        )
        .unwrap();
        let dir = roundtrip_dir();
        let path = dir.path().join("site.csv");
        write_site_csv(&path, &data).unwrap();
        let back = read_site_csv(&path).unwrap();
        assert_eq!(back.outcomes, data.outcomes);
        assert_eq!(back.treatments, data.treatments);
        assert_eq!(back.covariates, data.covariates);
        assert_eq!(back.site_id, "site");
    }

    #[test]
    fn site_csv_rejects_bad_header_with_location() {
        let err = read_site_reader(
            Cursor::new("y,treat,x1\n1.0,1,0.5\n"),
            "input.csv",
            "s".into(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("input.csv"), "{msg}");
        assert!(msg.contains("'a'"), "{msg}");
    }

    #[test]
    fn site_csv_rejects_bad_treatment_with_line_number() {
        let err = read_site_reader(
            Cursor::new("y,a,x1\n1.0,1,0.5\n2.0,7,0.1\n"),
            "input.csv",
            "s".into(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("column a"), "{msg}");
    }

    #[test]
    fn site_csv_rejects_non_numeric_covariate() {
        let err = read_site_reader(
            Cursor::new("y,a,x1,x2\n1.0,1,0.5,oops\n"),
            "input.csv",
            "s".into(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("column x2"), "{msg}");
    }

    #[test]
    fn site_csv_rejects_misnamed_covariate_column() {
        let err = read_site_reader(
            Cursor::new("y,a,x1,z\n1.0,1,0.5,0.2\n"),
            "input.csv",
            "s".into(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("\"x2\""), "{err}");
    }

    #[test]
    fn predictions_csv_roundtrips_exactly() {
        let values = array![[0.5, -1.0, 2.0_f64.sqrt()], [1e-17, 3.25, -0.125]];
        let dir = roundtrip_dir();
        let path = dir.path().join("preds.csv");
        write_predictions_csv(&path, &values).unwrap();
        let (back, ids) = read_predictions_csv(&path).unwrap();
        assert_eq!(back, values);
        assert_eq!(ids, vec!["site_1", "site_2", "site_3"]);
    }

    #[test]
    fn predictions_csv_rejects_wrong_field_count() {
        let err =
            read_predictions_reader(Cursor::new("site_1,site_2\n1.0,2.0\n3.0\n"), "p.csv")
                .unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn weights_json_roundtrips_and_pins_format() {
        let doc = WeightsDocument {
            method: "regret".to_string(),
            weights: vec![0.5, 1.0 / 3.0, 1.0 / 6.0],
            worst_case_regret: 0.125,
            kkt_residual: 3.5e-13,
            lambda_min: 1e-9,
        };
        let json = weights_document_to_json(&doc);
        assert!(json.contains("5.0000000000000000e-1"), "{json}");
        assert!(json.contains("3.3333333333333331e-1"), "{json}");
        let dir = roundtrip_dir();
        let path = dir.path().join("weights.json");
        write_weights_json(&path, &doc).unwrap();
        let back = read_weights_json(&path).unwrap();
        assert_eq!(back.method, doc.method);
        assert_eq!(back.weights, doc.weights);
        assert_eq!(back.worst_case_regret, doc.worst_case_regret);
        assert_eq!(back.kkt_residual, doc.kkt_residual);
        assert_eq!(back.lambda_min, doc.lambda_min);
    }

    #[test]
    fn study_tables_have_expected_layout() {
        let study = StudyTable {
            methods: vec![MethodTag::Regret, MethodTag::Pooled],
            mean_site_regret: vec![vec![0.1, 0.2], vec![0.3, 0.4]],
            mean_worst_case: vec![0.2, 0.4],
            stderr_worst_case: vec![0.01, 0.02],
            n_reps: 50,
            reports: Vec::<ReplicationReport>::new(),
        };
        let dir = roundtrip_dir();
        let study_path = dir.path().join("study.csv");
        let plot_path = dir.path().join("plotdata.csv");
        write_study_csv(&study_path, &study).unwrap();
        write_plotdata_csv(&plot_path, &study).unwrap();
        let study_text = std::fs::read_to_string(&study_path).unwrap();
        assert!(study_text.starts_with(
            "method,n_reps,mean_worst_case_regret,stderr_worst_case_regret\n"
        ));
        assert_eq!(study_text.lines().count(), 3);
        assert!(study_text.contains("regret,50,"), "{study_text}");
        let plot_text = std::fs::read_to_string(&plot_path).unwrap();
        assert_eq!(plot_text.lines().count(), 5);
        assert!(plot_text.contains("pooled,site_2,"), "{plot_text}");
    }

    #[test]
    fn format_float_roundtrips_bit_exactly() {
        for v in [
            0.1,
            -1.0 / 3.0,
            1e-300,
            std::f64::consts::PI,
            6.02214076e23,
        ] {
            let back: f64 = format_float(v).parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits());
        }
    }
}
