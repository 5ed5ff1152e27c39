//! Result analysers: results tables, inter-metric correlation and
//! perturbation-based meta-evaluation.

mod correlation;
mod meta;
mod table;

pub use correlation::{
    average_ranks, correlate, correlate_metrics, kendall_tau_b, pearson, spearman, Correlation, CorrelationCell,
    CorrelationKind, CorrelationMatrix, MIN_PAIR_SAMPLES,
};
pub use meta::{meta_evaluate, ExcludedSample, LevelScores, MetaEvalResult, SampleCorrelation};
pub use table::{tabulate, CellValue, Mark, ResultsCell, ResultsMatrix, ResultsRow, Table};

/// `meta_eval` table: metric, avg_correlation, n_samples, n_degenerate, in
/// ranked order. The best two averages are marked.
pub fn meta_table(results: &[MetaEvalResult]) -> Table {
    let headers = ["metric", "avg_correlation", "n_samples", "n_degenerate"].map(String::from).to_vec();
    let mut values: Vec<f64> = results.iter().filter_map(|r| r.avg_correlation).collect();
    values.dedup();
    let rows = results
        .iter()
        .map(|r| {
            vec![
                CellValue::Text(r.metric_name.clone()),
                r.avg_correlation.map_or(CellValue::Empty, CellValue::Number),
                CellValue::Int(r.n_samples as i64),
                CellValue::Int(r.n_degenerate as i64),
            ]
        })
        .collect();
    let marks = results
        .iter()
        .map(|r| {
            let rank = r.avg_correlation.and_then(|v| values.iter().position(|x| *x == v)).map(|i| i + 1);
            vec![None, Mark::from_rank(rank), None, None]
        })
        .collect();
    Table { headers, rows, marks, text_columns: vec![] }
}

/// Long-form correlation table: one row per metric pair.
pub fn correlation_table(matrix: &CorrelationMatrix) -> Table {
    let headers = ["metric_a", "metric_b", "correlation", "n_samples", "status"].map(String::from).to_vec();
    let rows: Vec<Vec<CellValue>> = matrix
        .cells
        .iter()
        .map(|c| {
            vec![
                CellValue::Text(c.metric_a.clone()),
                CellValue::Text(c.metric_b.clone()),
                c.correlation.map_or(CellValue::Empty, CellValue::Number),
                CellValue::Int(c.n_samples as i64),
                CellValue::Text(c.status.clone()),
            ]
        })
        .collect();
    let marks = vec![vec![None; 5]; rows.len()];
    Table { headers, rows, marks, text_columns: vec![] }
}
