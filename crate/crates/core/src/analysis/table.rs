use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::orchestrator::records::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub experiment_key: String,
    pub dataset: String,
    pub model: String,
    pub generation: String,
    pub perturbation_level: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResultsCell {
    pub mean: f64,
    pub n: usize,
}

/// Mean score per (experiment, metric). Missing cells stay missing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsMatrix {
    pub rows: Vec<ResultsRow>,
    pub metrics: Vec<String>,
    /// Keyed by (row index, metric).
    pub cells: BTreeMap<(usize, String), ResultsCell>,
}

impl ResultsMatrix {
    pub fn add_row(&mut self, row: ResultsRow) -> usize {
        self.rows.push(row);
        self.rows.len() - 1
    }

    /// Sets the cell to the arithmetic mean of `values`; no-op if empty.
    pub fn set_scores(&mut self, row: usize, metric: &str, values: &[f64]) {
        if values.is_empty() {
            return;
        }
        if !self.metrics.iter().any(|m| m == metric) {
            self.metrics.push(metric.to_string());
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        self.cells.insert((row, metric.to_string()), ResultsCell { mean, n: values.len() });
    }

    pub fn cell(&self, row: usize, metric: &str) -> Option<ResultsCell> {
        self.cells.get(&(row, metric.to_string())).copied()
    }

    /// Dense rank of each row's value for `metric`, higher is better;
    /// tied values share a rank.
    pub fn ranks(&self, metric: &str) -> Vec<Option<usize>> {
        let mut values: Vec<f64> = (0..self.rows.len()).filter_map(|r| self.cell(r, metric)).map(|c| c.mean).collect();
        values.sort_by(|a, b| b.total_cmp(a));
        values.dedup();
        (0..self.rows.len())
            .map(|r| self.cell(r, metric).map(|c| values.iter().position(|v| *v == c.mean).unwrap() + 1))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mark {
    Best,
    SecondBest,
}

impl Mark {
    pub fn from_rank(rank: Option<usize>) -> Option<Mark> {
        match rank {
            Some(1) => Some(Mark::Best),
            Some(2) => Some(Mark::SecondBest),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CellValue {
    Text(String),
    Int(i64),
    Number(f64),
    Empty,
}

impl CellValue {
    fn csv(&self) -> String {
        match self {
            CellValue::Text(s) => s.clone(),
            CellValue::Int(i) => i.to_string(),
            CellValue::Number(x) => x.to_string(),
            CellValue::Empty => String::new(),
        }
    }

    fn text(&self) -> String {
        match self {
            CellValue::Number(x) => format!("{x:.3}"),
            CellValue::Empty => "-".into(),
            other => other.csv(),
        }
    }

    fn json(&self) -> Value {
        match self {
            CellValue::Text(s) => Value::String(s.clone()),
            CellValue::Int(i) => Value::from(*i),
            CellValue::Number(x) => Value::from(*x),
            CellValue::Empty => Value::Null,
        }
    }
}

/// A rendered table. CSV and JSON carry every column; the text rendering
/// shows only `text_columns` and decorates marked cells.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<CellValue>>,
    /// Same shape as `rows`.
    pub marks: Vec<Vec<Option<Mark>>>,
    pub text_columns: Vec<usize>,
}

impl Table {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for row in &self.rows {
            w.write_record(row.iter().map(CellValue::csv))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Array of row objects keyed by header.
    pub fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|row| {
                    let obj: Map<String, Value> =
                        self.headers.iter().cloned().zip(row.iter().map(CellValue::json)).collect();
                    Value::Object(obj)
                })
                .collect(),
        )
    }

    /// Aligned plain-text table; best cells are `**x**`, second best `_x_`.
    pub fn to_text(&self) -> String {
        let cols: Vec<usize> =
            if self.text_columns.is_empty() { (0..self.headers.len()).collect() } else { self.text_columns.clone() };
        let cell = |r: usize, c: usize| {
            let s = self.rows[r][c].text();
            match self.marks.get(r).and_then(|m| m.get(c)).copied().flatten() {
                Some(Mark::Best) => format!("**{s}**"),
                Some(Mark::SecondBest) => format!("_{s}_"),
                None => s,
            }
        };
        let widths: Vec<usize> = cols
            .iter()
            .map(|&c| {
                (0..self.rows.len()).map(|r| cell(r, c).chars().count()).max().unwrap_or(0).max(self.headers[c].len())
            })
            .collect();
        let line = |cells: Vec<String>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = vec![line(cols.iter().map(|&c| self.headers[c].clone()).collect())];
        out.push(line(widths.iter().map(|w| "-".repeat(*w)).collect()));
        for r in 0..self.rows.len() {
            out.push(line(cols.iter().map(|&c| cell(r, c)).collect()));
        }
        out.join("\n") + "\n"
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv()?.as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.json")), &serde_json::to_vec_pretty(&self.to_json())?)
    }
}

/// Results table: one row per experiment, and per metric a mean, a sample
/// count and a rank column. Rank 1 and 2 cells are marked.
pub fn tabulate(matrix: &ResultsMatrix) -> Table {
    let mut headers: Vec<String> =
        ["experiment_key", "dataset", "model", "generation", "perturbation_level"].map(String::from).to_vec();
    let mut text_columns = vec![2];
    for m in &matrix.metrics {
        text_columns.push(headers.len());
        headers.extend([m.clone(), format!("{m}_n"), format!("{m}_rank")]);
    }
    let ranks: Vec<Vec<Option<usize>>> = matrix.metrics.iter().map(|m| matrix.ranks(m)).collect();
    let mut rows = Vec::new();
    let mut marks = Vec::new();
    for (r, row) in matrix.rows.iter().enumerate() {
        let mut cells = vec![
            CellValue::Text(row.experiment_key.clone()),
            CellValue::Text(row.dataset.clone()),
            CellValue::Text(row.model.clone()),
            CellValue::Text(row.generation.clone()),
            CellValue::Int(row.perturbation_level as i64),
        ];
        let mut row_marks = vec![None; cells.len()];
        for (mi, m) in matrix.metrics.iter().enumerate() {
            let rank = ranks[mi][r];
            match matrix.cell(r, m) {
                Some(c) => cells.extend([CellValue::Number(c.mean), CellValue::Int(c.n as i64)]),
                None => cells.extend([CellValue::Empty, CellValue::Int(0)]),
            }
            cells.push(rank.map_or(CellValue::Empty, |k| CellValue::Int(k as i64)));
            row_marks.extend([Mark::from_rank(rank), None, None]);
        }
        rows.push(cells);
        marks.push(row_marks);
    }
    Table { headers, rows, marks, text_columns }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(values: &[(&str, &[(&str, f64)])]) -> ResultsMatrix {
        let mut m = ResultsMatrix::default();
        for (model, cells) in values {
            let r = m.add_row(ResultsRow {
                experiment_key: format!("k-{model}"),
                dataset: "d".into(),
                model: model.to_string(),
                generation: "g".into(),
                perturbation_level: 0,
            });
            for (metric, v) in *cells {
                m.set_scores(r, metric, &[*v]);
            }
        }
        m
    }

    #[test]
    fn ranks_with_ties_and_gaps() {
        let m = matrix(&[("a", &[("x", 0.5)]), ("b", &[("x", 0.9)]), ("c", &[("x", 0.9)]), ("d", &[])]);
        assert_eq!(m.ranks("x"), vec![Some(2), Some(1), Some(1), None]);
        let t = tabulate(&m);
        let text = t.to_text();
        assert!(text.contains("**0.900**") && text.contains("_0.500_"));
        assert!(t
            .to_csv()
            .unwrap()
            .starts_with("experiment_key,dataset,model,generation,perturbation_level,x,x_n,x_rank\n"));
    }

    #[test]
    fn single_row_is_best_everywhere() {
        let t = tabulate(&matrix(&[("a", &[("x", 0.1), ("y", 0.2)])]));
        assert_eq!(t.marks[0].iter().filter(|m| **m == Some(Mark::Best)).count(), 2);
        assert!(!t.marks[0].contains(&Some(Mark::SecondBest)));
    }

    #[test]
    fn table_one_shape() {
        let metrics =
            ["bleu_precision", "rouge_1", "rouge_2", "rouge_l", "bert_score_f1", "qags_ternary", "qags_judge"];
        let mut m = ResultsMatrix::default();
        for i in 0..6 {
            let r = m.add_row(ResultsRow {
                experiment_key: format!("k{i}"),
                dataset: "d".into(),
                model: format!("m{i}"),
                generation: "g".into(),
                perturbation_level: 0,
            });
            for (j, metric) in metrics.iter().enumerate() {
                m.set_scores(r, metric, &[((i * 7 + j * 3) % 11) as f64 / 10.0]);
            }
        }
        let t = tabulate(&m);
        let best: usize = t.marks.iter().map(|r| r.iter().filter(|m| **m == Some(Mark::Best)).count()).sum();
        assert_eq!(best, 7);
    }

    #[test]
    fn marks_follow_rows_under_shuffle() {
        let a = matrix(&[("a", &[("x", 0.3)]), ("b", &[("x", 0.9)]), ("c", &[("x", 0.6)])]);
        let b = matrix(&[("c", &[("x", 0.6)]), ("a", &[("x", 0.3)]), ("b", &[("x", 0.9)])]);
        let marked = |m: &ResultsMatrix| {
            let mut v: Vec<(String, Option<usize>)> =
                m.rows.iter().map(|r| r.model.clone()).zip(m.ranks("x")).collect();
            v.sort();
            v
        };
        assert_eq!(marked(&a), marked(&b));
    }

    #[test]
    fn json_mirrors_csv_rows() {
        let t = tabulate(&matrix(&[("a", &[("x", 0.25)])]));
        let j = t.to_json();
        assert_eq!(j[0]["model"], "a");
        assert_eq!(j[0]["x"], 0.25);
        assert_eq!(j[0]["x_rank"], 1);
    }
}
