//! Long-format panel CSV, latent-path sidecars, `fit.json` and grid tables.
//!
//! A panel file has the header `cluster_id,unit_id,t,y` followed by any
//! covariate columns, one row per (cluster, unit, occasion). Occasions are
//! numbered from 1. Clusters and units keep their order of first appearance.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::em::{FitResult, StartSummary};
use crate::error::{Error, Result};
use crate::inference::{GridReport, InferenceReport};
use crate::model::{flatten_parameters, ClusterData, ModelSpec, PanelDataset, ParameterLayout, ParameterSet, UnitData};
use crate::simulate::LatentRecord;

const KEY_COLUMNS: [&str; 4] = ["cluster_id", "unit_id", "t", "y"];

struct Row {
    line: usize,
    t: usize,
    y: f64,
    unit: Vec<f64>,
    cluster: Vec<f64>,
}

struct UnitRows {
    id: String,
    rows: Vec<Row>,
}

struct ClusterRows {
    id: String,
    units: Vec<UnitRows>,
    index: HashMap<String, usize>,
}

fn parse_field(value: &str, line: usize, column: &str) -> Result<f64> {
    let v = value.trim();
    v.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: if v.is_empty() {
            format!("missing value in column '{column}'")
        } else {
            format!("'{v}' in column '{column}' is not a number")
        },
    })
}

/// Reads a panel from any reader. Columns named in `cluster_columns` are
/// cluster-level and must agree across the units of a cluster at each
/// occasion; every other extra column is unit-level.
pub fn read_panel<R: Read>(reader: R, cluster_columns: &[String]) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 4 || header[..4] != KEY_COLUMNS {
        return Err(Error::Parse { line: 1, message: format!("header must start with {}", KEY_COLUMNS.join(",")) });
    }
    for (i, name) in header.iter().enumerate() {
        if name.is_empty() || header[..i].contains(name) {
            return Err(Error::Parse { line: 1, message: format!("empty or duplicate column name '{name}'") });
        }
    }
    let extra = &header[4..];
    let is_cluster: Vec<bool> = extra.iter().map(|n| cluster_columns.contains(n)).collect();
    let unit_names: Vec<String> = extra.iter().zip(&is_cluster).filter(|(_, &c)| !c).map(|(n, _)| n.clone()).collect();
    let cluster_names: Vec<String> = extra.iter().zip(&is_cluster).filter(|(_, &c)| c).map(|(n, _)| n.clone()).collect();

    let mut clusters: Vec<ClusterRows> = Vec::new();
    let mut cluster_index: HashMap<String, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::Parse { line, message: format!("expected {} fields, found {}", header.len(), rec.len()) });
        }
        let t = rec[2]
            .parse::<usize>()
            .ok()
            .filter(|&t| t >= 1)
            .ok_or_else(|| Error::Parse { line, message: format!("occasion '{}' is not a positive integer", &rec[2]) })?;
        let y = parse_field(&rec[3], line, "y")?;
        let mut row = Row { line, t, y, unit: Vec::new(), cluster: Vec::new() };
        for (j, name) in extra.iter().enumerate() {
            let v = parse_field(&rec[4 + j], line, name)?;
            if is_cluster[j] {
                row.cluster.push(v);
            } else {
                row.unit.push(v);
            }
        }
        let h = *cluster_index.entry(rec[0].to_string()).or_insert_with(|| {
            clusters.push(ClusterRows { id: rec[0].to_string(), units: Vec::new(), index: HashMap::new() });
            clusters.len() - 1
        });
        let c = &mut clusters[h];
        let i = *c.index.entry(rec[1].to_string()).or_insert_with(|| {
            c.units.push(UnitRows { id: rec[1].to_string(), rows: Vec::new() });
            c.units.len() - 1
        });
        c.units[i].rows.push(row);
    }
    if clusters.is_empty() {
        return Err(Error::InvalidDataset("panel has no rows".into()));
    }

    for c in &mut clusters {
        for u in &mut c.units {
            u.rows.sort_by_key(|r| r.t);
            for (k, r) in u.rows.iter().enumerate() {
                if r.t != k + 1 {
                    let what = if k > 0 && u.rows[k - 1].t == r.t { "duplicate" } else { "non-contiguous" };
                    return Err(Error::Parse {
                        line: r.line,
                        message: format!("{what} occasion {} for unit '{}' in cluster '{}'", r.t, u.id, c.id),
                    });
                }
            }
        }
    }
    let occasions = clusters.iter().flat_map(|c| &c.units).flat_map(|u| &u.rows).map(|r| r.t).max().unwrap_or(0);
    let mut out = Vec::with_capacity(clusters.len());
    for c in clusters {
        let mut cluster_cov: Vec<Option<(usize, Vec<f64>)>> = vec![None; occasions];
        let mut units = Vec::with_capacity(c.units.len());
        for u in c.units {
            if u.rows.len() != occasions {
                return Err(Error::data(
                    &c.id,
                    Some(&u.id),
                    None,
                    format!("unit has {} occasions, panel has {occasions}", u.rows.len()),
                ));
            }
            for r in &u.rows {
                match &cluster_cov[r.t - 1] {
                    None => cluster_cov[r.t - 1] = Some((r.line, r.cluster.clone())),
                    Some((first_line, values)) => {
                        if let Some(j) = (0..values.len()).find(|&j| values[j].to_bits() != r.cluster[j].to_bits()) {
                            return Err(Error::Parse {
                                line: r.line,
                                message: format!(
                                    "cluster-level column '{}' differs within cluster '{}' at t={} (first value on line {first_line})",
                                    cluster_names[j], c.id, r.t
                                ),
                            });
                        }
                    }
                }
            }
            units.push(UnitData {
                id: u.id,
                responses: u.rows.iter().map(|r| r.y).collect(),
                mask: vec![true; occasions],
                covariates: u.rows.into_iter().map(|r| r.unit).collect(),
            });
        }
        out.push(ClusterData {
            id: c.id,
            covariates: cluster_cov.into_iter().map(|v| v.map(|(_, x)| x).unwrap_or_default()).collect(),
            units,
        });
    }
    Ok(PanelDataset {
        clusters: out,
        occasions,
        unit_covariate_names: unit_names,
        cluster_covariate_names: cluster_names,
    })
}

/// Reads a panel file; cluster-level columns are those the spec selects.
pub fn load_panel(path: &Path, spec: &ModelSpec) -> Result<PanelDataset> {
    read_panel(fs::File::open(path)?, &spec.cluster_covariates)
}

pub fn write_panel_to<W: Write>(writer: W, data: &PanelDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = KEY_COLUMNS.to_vec();
    header.extend(data.unit_covariate_names.iter().map(String::as_str));
    header.extend(data.cluster_covariate_names.iter().map(String::as_str));
    w.write_record(&header)?;
    for c in &data.clusters {
        for u in &c.units {
            for t in 0..data.occasions {
                let mut rec = vec![c.id.clone(), u.id.clone(), (t + 1).to_string(), u.responses[t].to_string()];
                rec.extend(u.covariates[t].iter().map(f64::to_string));
                rec.extend(c.covariates[t].iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_panel(path: &Path, data: &PanelDataset) -> Result<()> {
    write_panel_to(fs::File::create(path)?, data)
}

/// Sidecar with the true states, 1-based: `cluster_id,unit_id,t,u,v`.
pub fn write_latent(path: &Path, data: &PanelDataset, latent: &LatentRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cluster_id", "unit_id", "t", "u", "v"])?;
    for (h, c) in data.clusters.iter().enumerate() {
        for (i, u) in c.units.iter().enumerate() {
            for t in 0..data.occasions {
                w.write_record([
                    c.id.clone(),
                    u.id.clone(),
                    (t + 1).to_string(),
                    (latent.cluster_states[h][t] + 1).to_string(),
                    (latent.unit_states[h][i][t] + 1).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Everything a `fit` run reports, serialized as `fit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Fully resolved run configuration.
    pub config: BTreeMap<String, String>,
    pub spec: ModelSpec,
    pub parameters: ParameterSet,
    pub parameter_names: Vec<String>,
    pub flat_parameters: Vec<f64>,
    pub ploglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub best_start: usize,
    pub starts: Vec<StartSummary>,
    pub trace: Vec<f64>,
    pub cluster_state_order: Vec<usize>,
    pub unit_state_order: Vec<usize>,
    pub warnings: Vec<String>,
    pub inference: Option<InferenceReport>,
    pub inference_error: Option<String>,
}

impl FitReport {
    pub fn new(
        config: BTreeMap<String, String>,
        spec: &ModelSpec,
        fit: FitResult,
        inference: Result<InferenceReport>,
    ) -> Result<Self> {
        let flat_parameters = flatten_parameters(&fit.theta, spec)?;
        let (inference, inference_error) = match inference {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(Self {
            config,
            spec: spec.clone(),
            parameter_names: ParameterLayout::new(spec).names,
            flat_parameters,
            parameters: fit.theta,
            ploglik: fit.ploglik,
            iterations: fit.iterations,
            converged: fit.converged,
            best_start: fit.best_start,
            starts: fit.starts,
            trace: fit.trace,
            cluster_state_order: fit.cluster_state_order,
            unit_state_order: fit.unit_state_order,
            warnings: fit.warnings,
            inference,
            inference_error,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn cell_text(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.2}"))
}

/// CLIC grid with one row per `k1` and one column per `k2`; the maximizer
/// carries a trailing `*`, failed cells read `NA`.
pub fn grid_csv(report: &GridReport) -> String {
    let mut s = String::from("k1");
    for k2 in &report.k2_values {
        let _ = write!(s, ",k2={k2}");
    }
    s.push('\n');
    for &k1 in &report.k1_values {
        let _ = write!(s, "{k1}");
        for &k2 in &report.k2_values {
            let clic = report.cell(k1, k2).and_then(|c| c.clic);
            let star = if report.best == Some((k1, k2)) { "*" } else { "" };
            let _ = write!(s, ",{}{star}", cell_text(clic));
        }
        s.push('\n');
    }
    s
}

/// Estimates table: estimate, standard error, t-statistic and p-value on
/// the natural scale (support points and regression coefficients are the
/// same on both scales).
pub fn estimates_table(report: &InferenceReport) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
    let width = report.parameters.iter().map(|p| p.natural_name.len()).max().unwrap_or(9).max(9);
    let mut s = format!("{:<width$} {:>10} {:>10} {:>10} {:>10}\n", "parameter", "estimate", "s.e.", "t-stat", "p-value");
    for p in &report.parameters {
        // a test against zero only means something for coefficients
        let tested = p.transform == "identity";
        let (z, pv) = if tested { (p.z, p.p_value) } else { (None, None) };
        let _ = writeln!(
            s,
            "{:<width$} {:>10.4} {:>10} {:>10} {:>10}",
            p.natural_name,
            p.natural_estimate,
            fmt(p.natural_std_error),
            fmt(z),
            fmt(pv)
        );
    }
    let _ = writeln!(s, "pairwise log-likelihood {:.4}", report.ploglik);
    if let (Some(pen), Some(c)) = (report.penalty, report.clic) {
        let _ = writeln!(s, "penalty {pen:.4}  CLIC {c:.4}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const PANEL: &str = "cluster_id,unit_id,t,y,x,size\n\
        a,1,1,1,0.5,3\n\
        a,1,2,0,0.5,3\n\
        a,2,2,1,1.5,3\n\
        a,2,1,0,1.5,3\n\
        b,9,1,1,2,4\n\
        b,9,2,1,2,4\n";

    #[test]
    fn reads_long_format_in_first_appearance_order() {
        let d = read_panel(PANEL.as_bytes(), &["size".to_string()]).unwrap();
        assert_eq!(d.occasions, 2);
        assert_eq!(d.unit_covariate_names, vec!["x"]);
        assert_eq!(d.cluster_covariate_names, vec!["size"]);
        assert_eq!(d.clusters[0].units[1].id, "2");
        assert_eq!(d.clusters[0].units[1].responses, vec![0.0, 1.0]);
        assert_eq!(d.clusters[1].covariates, vec![vec![4.0], vec![4.0]]);
    }

    #[test]
    fn round_trips_through_writer() {
        let d = read_panel(PANEL.as_bytes(), &["size".to_string()]).unwrap();
        let mut buf = Vec::new();
        write_panel_to(&mut buf, &d).unwrap();
        assert_eq!(read_panel(buf.as_slice(), &["size".to_string()]).unwrap(), d);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = PANEL.replace("b,9,2,1,2,4", "b,9,2,yes,2,4");
        assert!(matches!(read_panel(bad.as_bytes(), &[]), Err(Error::Parse { line: 7, .. })));
        let gap = PANEL.replace("b,9,2,1,2,4", "b,9,3,1,2,4");
        let err = read_panel(gap.as_bytes(), &[]).unwrap_err().to_string();
        assert!(err.contains("line 7") && err.contains("non-contiguous"), "{err}");
    }

    #[test]
    fn inconsistent_cluster_column_is_located() {
        let bad = PANEL.replace("a,2,1,0,1.5,3", "a,2,1,0,1.5,5");
        let err = read_panel(bad.as_bytes(), &["size".to_string()]).unwrap_err().to_string();
        assert!(err.contains("'size'") && err.contains("'a'") && err.contains("t=1"), "{err}");
    }

    #[test]
    fn ragged_units_are_rejected() {
        let bad = PANEL.replace("b,9,2,1,2,4\n", "");
        assert!(matches!(read_panel(bad.as_bytes(), &[]), Err(Error::InvalidData { .. })));
    }
}
