//! Experiment reports and their JSON / CSV / plot-data serializations.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::Digest;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Grouping key: a task id, subset label, pair or held-out cell.
    pub group: String,
    /// What was evaluated, e.g. `negative_task_vector`.
    pub edit: String,
    pub accuracy: BTreeMap<String, f64>,
    pub normalized: BTreeMap<String, f64>,
    pub coeffs: Vec<f64>,
    pub baselines: BTreeMap<String, f64>,
}

impl ReportRow {
    pub fn new(group: impl Into<String>, edit: impl Into<String>) -> Self {
        Self {
            group: group.into(),
            edit: edit.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub figure: String,
    pub series: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment_id: String,
    pub config_digest: Digest,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    /// Scalar aggregates that the experiment's claims are checked against.
    pub summary: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub plots: Vec<PlotSeries>,
}

impl EvalReport {
    pub fn new(experiment_id: impl Into<String>, config_digest: Digest, seeds: Vec<u64>) -> Self {
        Self {
            experiment_id: experiment_id.into(),
            config_digest,
            seeds,
            rows: Vec::new(),
            summary: BTreeMap::new(),
            notes: Vec::new(),
            plots: Vec::new(),
        }
    }

    pub fn rows_with_edit<'a>(&'a self, edit: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.edit == edit)
    }

    pub fn summary_value(&self, key: &str) -> Result<f64> {
        self.summary
            .get(key)
            .copied()
            .ok_or_else(|| Error::Undefined(format!("summary key {key} missing from {}", self.experiment_id)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Long-format CSV: one line per (row, metric kind, key).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["experiment", "group", "edit", "coeffs", "kind", "key", "value"])?;
        for row in &self.rows {
            let coeffs = row
                .coeffs
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(";");
            for (kind, map) in [
                ("accuracy", &row.accuracy),
                ("normalized", &row.normalized),
                ("baseline", &row.baselines),
            ] {
                for (key, value) in map {
                    w.write_record([
                        self.experiment_id.as_str(),
                        &row.group,
                        &row.edit,
                        &coeffs,
                        kind,
                        key,
                        &value.to_string(),
                    ])?;
                }
            }
        }
        for (key, value) in &self.summary {
            w.write_record([self.experiment_id.as_str(), "", "", "", "summary", key, &value.to_string()])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn write_plot_data<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["figure", "series", "x", "y"])?;
        for p in &self.plots {
            for (x, y) in &p.points {
                w.write_record([p.figure.as_str(), &p.series, &x.to_string(), &y.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    /// Writes `report.json`, `report.csv` and `plot_data.csv` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let create = |name: &str| {
            let path = dir.join(name);
            std::fs::File::create(&path).map_err(|e| Error::io(&path, e))
        };
        self.write_csv(create("report.csv")?)?;
        self.write_plot_data(create("plot_data.csv")?)
    }
}
