//! Configuration sweeps: train one model per (cell, seed) along a named
//! axis and emit one CSV row per cell with seed-averaged metrics.
//!
//! The dataset is generated once from the base config and shared by every
//! cell, so rows differ only in the swept setting and the training seed.

use crate::config::{self, AppConfig};
use crate::data;
use crate::error::{Error, Result};
use crate::network;
use crate::train::{self, TrainOutcome};

pub const CSV_HEADER: &str = "axis,cell,seeds,mean_train_metric,mean_test_metric";

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub axis: String,
    pub cell: String,
    pub seeds: usize,
    pub mean_train_metric: f64,
    pub mean_test_metric: f64,
}

/// Cells for a sweep axis. Axes cover the positional-encoding settings and
/// the set-operation placement.
pub fn axis_cells(axis: &str) -> Result<Vec<&'static str>> {
    match axis {
        "encoding.kind" => Ok(vec!["none", "pe_sin", "pe_mlp", "hpe_sin", "hpe_mlp"]),
        "encoding.hidden_ratio" => Ok(vec!["0.125", "0.25", "0.5", "1.0"]),
        "encoding.fusion" => Ok(vec!["add", "multiply"]),
        "encoding.coordinates" => Ok(vec!["relative", "absolute"]),
        "aggregation.variant" => Ok(vec!["conv", "conv_star", "preconv", "proconv"]),
        other => Err(Error::Usage(format!(
            "unknown ablation axis '{other}' (expected encoding.kind, encoding.hidden_ratio, \
             encoding.fusion, encoding.coordinates, aggregation.variant)"
        ))),
    }
}

/// Dotted overrides that realize one cell of an axis.
fn cell_overrides(axis: &str, cell: &str) -> Vec<String> {
    match axis {
        // Placement applies to every swappable set operation at once; the
        // stem stage keeps its configured variant.
        "aggregation.variant" => vec![
            format!("network.aggregation.later_abs={cell}"),
            format!("network.aggregation.refinement={cell}"),
        ],
        _ => vec![format!("network.{axis}={cell}")],
    }
}

/// Sweep `axis`, training `seeds` models per cell with seeds
/// `seed, seed+1, ...`. Returns the rows and the rendered CSV.
pub fn run(base: &AppConfig, axis: &str, seeds: usize, seed: u64) -> Result<(Vec<AblationRow>, String)> {
    if seeds == 0 {
        return Err(Error::Usage("ablation needs at least one seed".into()));
    }
    let cells = axis_cells(axis)?;
    let dataset = data::generate(&base.data, seed)?;
    let mut rows = Vec::with_capacity(cells.len());
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for cell in cells {
        let cfg = config::apply_sets(base, &cell_overrides(axis, cell))?;
        cfg.network.validate()?;
        let mut train_sum = 0.0;
        let mut test_sum = 0.0;
        for s in 0..seeds {
            let run_seed = seed.wrapping_add(s as u64);
            let mut model = network::build(cfg.network.clone(), run_seed)?;
            let out: TrainOutcome =
                train::train(&mut model, &dataset, &cfg.train, run_seed, None, None)?;
            let last = out
                .rows
                .last()
                .ok_or_else(|| Error::Data("training produced no epochs".into()))?;
            train_sum += last.train_metric;
            test_sum += last.test_metric;
        }
        let row = AblationRow {
            axis: axis.to_string(),
            cell: cell.to_string(),
            seeds,
            mean_train_metric: train_sum / seeds as f64,
            mean_test_metric: test_sum / seeds as f64,
        };
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            row.axis, row.cell, row.seeds, row.mean_train_metric, row.mean_test_metric
        ));
        rows.push(row);
    }
    Ok((rows, csv))
}
