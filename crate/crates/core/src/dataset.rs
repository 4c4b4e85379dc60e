//! Per-recruit analysis rows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{Recruit, RecruitColumns, RecruitmentTree, RECRUIT_COLUMNS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub recruit: Recruit,
    /// Values in the order of [`Dataset::covariate_names`].
    pub covariates: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub covariate_names: Vec<String>,
    pub rows: Vec<Row>,
}

impl Dataset {
    /// Attaches population-level covariate and outcome vectors (indexed by
    /// node id) to the recruits of `tree`.
    pub fn from_population(tree: &RecruitmentTree, x: &[f64], y: &[f64]) -> Self {
        let rows = tree
            .recruits()
            .iter()
            .map(|r| Row {
                recruit: r.clone(),
                covariates: vec![x[r.node_id]],
                y: y[r.node_id],
            })
            .collect();
        Dataset {
            covariate_names: vec!["x".to_string()],
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn response(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.y).collect()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.recruit.degree).collect()
    }

    /// Recovers the recruitment tree when rows are in recruitment order.
    pub fn tree(&self) -> Result<RecruitmentTree> {
        RecruitmentTree::new(self.rows.iter().map(|r| r.recruit.clone()).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut header: Vec<String> = RECRUIT_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(self.covariate_names.iter().cloned());
        header.push("y".into());
        w.write_record(&header).map_err(|e| Error::csv(path, e))?;
        for row in &self.rows {
            let r = &row.recruit;
            let mut rec = vec![
                r.node_id.to_string(),
                r.cluster_id.to_string(),
                r.seed_id.to_string(),
                r.recruiter_id.map(|p| p.to_string()).unwrap_or_default(),
                r.wave.to_string(),
                r.degree.to_string(),
            ];
            rec.extend(row.covariates.iter().map(|v| format!("{v:?}")));
            rec.push(format!("{:?}", row.y));
            w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a dataset file. Every column other than the recruit fields and
    /// `y` is taken as a numeric covariate.
    pub fn read(path: &Path) -> Result<Self> {
        let ctx = path.display().to_string();
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let headers = r.headers().map_err(|e| Error::csv(path, e))?.clone();
        let cols = RecruitColumns::locate(&headers)?;
        let y_idx = headers
            .iter()
            .position(|h| h.trim() == "y")
            .ok_or_else(|| Error::MissingColumn("y".into()))?;
        let cov_idx: Vec<usize> = (0..headers.len())
            .filter(|&i| i != y_idx && !RECRUIT_COLUMNS.contains(&headers[i].trim()))
            .collect();
        let covariate_names = cov_idx.iter().map(|&i| headers[i].trim().to_string()).collect();
        let num = |rec: &csv::StringRecord, i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("").trim();
            s.parse().map_err(|_| Error::Parse {
                context: ctx.clone(),
                message: format!("bad value `{s}` in column `{}`", &headers[i]),
            })
        };
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            rows.push(Row {
                recruit: cols.parse(&rec, &ctx)?,
                covariates: cov_idx.iter().map(|&i| num(&rec, i)).collect::<Result<_>>()?,
                y: num(&rec, y_idx)?,
            });
        }
        Ok(Dataset {
            covariate_names,
            rows,
        })
    }
}
