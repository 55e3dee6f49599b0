//! Merges per-run summary CSVs into one table: a row per model and an
//! accuracy/RMSE column pair per dataset. Cell values are copied verbatim.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::failure::{CliResult, Failure};
use crate::ReportArgs;

const REQUIRED: [&str; 4] = ["model", "dataset", "mean_accuracy_pct", "rmse_kmh"];

#[derive(Debug, Default)]
pub struct Merged {
    pub datasets: BTreeSet<String>,
    /// (model, dataset) -> (accuracy, rmse) as written in the inputs.
    pub cells: BTreeMap<(String, String), (String, String)>,
}

impl Merged {
    pub fn models(&self) -> BTreeSet<&str> {
        self.cells.keys().map(|(m, _)| m.as_str()).collect()
    }

    pub fn add_csv(&mut self, path: &Path) -> CliResult<()> {
        let bad = |msg: String| Failure::config(format!("{}: {msg}", path.display()));
        let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
        let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        let mut col = [0usize; 4];
        for (slot, name) in col.iter_mut().zip(REQUIRED) {
            *slot = headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| bad(format!("missing column {name:?}")))?;
        }
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let field = |i: usize| rec.get(col[i]).unwrap_or("").to_string();
            let (model, dataset) = (field(0), field(1));
            if model.is_empty() || dataset.is_empty() {
                return Err(bad("empty model or dataset name".into()));
            }
            for i in [2, 3] {
                field(i)
                    .parse::<f64>()
                    .map_err(|_| bad(format!("{} {:?} is not a number", REQUIRED[i], field(i))))?;
            }
            let key = (model, dataset);
            if self.cells.contains_key(&key) {
                return Err(bad(format!("duplicate row for model {:?} on dataset {:?}", key.0, key.1)));
            }
            self.datasets.insert(key.1.clone());
            self.cells.insert(key, (field(2), field(3)));
        }
        Ok(())
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let mut header = vec!["model".to_string()];
        for d in &self.datasets {
            header.push(format!("{d} accuracy (%)"));
            header.push(format!("{d} RMSE (km/h)"));
        }
        let mut rows = vec![header];
        for model in self.models() {
            let mut row = vec![model.to_string()];
            for d in &self.datasets {
                let (acc, err) = self
                    .cells
                    .get(&(model.to_string(), d.clone()))
                    .cloned()
                    .unwrap_or_default();
                row.push(acc);
                row.push(err);
            }
            rows.push(row);
        }
        rows
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.rows() {
            w.write_record(&row)?;
        }
        w.into_inner().map_err(|e| e.into_error().into())
    }

    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (v, w))| if i == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

pub fn run(args: &ReportArgs) -> CliResult<()> {
    let mut merged = Merged::default();
    for path in &args.inputs {
        merged.add_csv(path)?;
    }
    if merged.cells.is_empty() {
        return Err(Failure::config("the input CSVs contain no rows"));
    }
    let bytes = merged.to_csv().map_err(|e| Failure::data(e.to_string()))?;
    trackspeed::train::write_atomic(&args.out, &bytes)
        .map_err(|e| Failure::data(format!("{}: {e}", args.out.display())))?;
    print!("{}", merged.to_text());
    Ok(())
}
