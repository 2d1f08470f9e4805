//! Correlation tables, score-score tables and greedy top-k search on a
//! fixed benchmark.

use crate::dataset::{BenchmarkDataset, Entry};
use crate::error::{Error, Result};
use crate::ranking::spearman;
use crate::scorer::ScorerParams;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt::Write as _;

type ScoreFn<'a> = Box<dyn Fn(&[&Entry]) -> Result<Vec<f64>> + Sync + 'a>;

/// A named scorer over dataset entries.
pub struct NamedScorer<'a> {
    pub name: String,
    score: ScoreFn<'a>,
}

impl<'a> NamedScorer<'a> {
    /// Score entries one at a time.
    pub fn from_fn(name: impl Into<String>, f: impl Fn(&Entry) -> Result<f64> + Sync + 'a) -> Self {
        NamedScorer {
            name: name.into(),
            score: Box::new(move |es| es.iter().map(|e| f(e)).collect()),
        }
    }

    pub fn neural(name: impl Into<String>, p: &'a ScorerParams) -> Self {
        NamedScorer {
            name: name.into(),
            score: Box::new(move |es| p.score_batch(&es.iter().map(|e| e.graph.clone()).collect::<Vec<_>>())),
        }
    }

    pub fn params() -> Self {
        Self::from_fn("params", |e| Ok(crate::baselines::params_proxy(&e.graph)))
    }

    /// Precomputed scores keyed by architecture id.
    pub fn external(name: impl Into<String>, scores: BTreeMap<String, f64>) -> Self {
        let name = name.into();
        let label = name.clone();
        Self::from_fn(name, move |e| {
            scores
                .get(&e.id)
                .copied()
                .ok_or_else(|| Error::Data(format!("{label}: no score for architecture `{}`", e.id)))
        })
    }

    pub fn score(&self, entries: &[&Entry]) -> Result<Vec<f64>> {
        (self.score)(entries)
    }
}

/// Read `arch_id,score` rows (header required).
pub fn read_score_csv(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("score CSV lacks a `{name}` column")))
    };
    let (id_col, score_col) = (col("arch_id")?, col("score")?);
    let mut out = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let id = rec.get(id_col).unwrap_or_default().to_string();
        let raw = rec.get(score_col).unwrap_or_default();
        let v: f64 = raw
            .parse()
            .map_err(|_| Error::Data(format!("score CSV row {}: `{raw}` is not a number", line + 2)))?;
        if out.insert(id.clone(), v).is_some() {
            return Err(Error::Data(format!("score CSV: duplicate arch_id `{id}`")));
        }
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("score CSV: {e}"))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Value(f64),
    Null(String),
}

impl Cell {
    pub fn value(&self) -> Option<f64> {
        match self {
            Cell::Value(v) => Some(*v),
            Cell::Null(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<Cell>>,
}

impl Table {
    pub fn get(&self, row: usize, col: usize) -> &Cell {
        &self.cells[row][col]
    }

    /// Nulls are written as empty fields.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = std::iter::once("scorer").chain(self.cols.iter().map(String::as_str)).collect();
        w.write_record(&header).expect("in-memory write");
        for (name, row) in self.rows.iter().zip(&self.cells) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|c| c.value().map_or(String::new(), |v| format!("{v:.6}"))));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    /// Fixed-width text with a footnote per null cell.
    pub fn to_text(&self) -> String {
        let fmt = |c: &Cell| c.value().map_or("null".to_string(), |v| format!("{v:.4}"));
        let first = self.rows.iter().map(String::len).chain([6]).max().unwrap_or(6);
        let widths: Vec<usize> = self
            .cols
            .iter()
            .enumerate()
            .map(|(j, c)| self.cells.iter().map(|r| fmt(&r[j]).len()).chain([c.len()]).max().unwrap_or(0))
            .collect();
        let mut out = format!("{:<first$}", "scorer");
        for (c, w) in self.cols.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        let mut notes = Vec::new();
        for (i, (name, row)) in self.rows.iter().zip(&self.cells).enumerate() {
            let _ = write!(out, "{name:<first$}");
            for (j, (c, w)) in row.iter().zip(&widths).enumerate() {
                let _ = write!(out, "  {:>w$}", fmt(c));
                if let Cell::Null(reason) = c {
                    notes.push(format!("{} / {}: {reason}", self.rows[i], self.cols[j]));
                }
            }
            out.push('\n');
        }
        for n in notes {
            out.push_str(&n);
            out.push('\n');
        }
        out
    }
}

/// Deterministic sample of a dataset's evaluation entries, clamped to the
/// available count. Stream `stream` keeps samples of different datasets
/// independent under one seed.
pub fn sample_indices(ds: &BenchmarkDataset, n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let pool = ds.eval_indices();
    if n >= pool.len() {
        if n > pool.len() {
            log::warn!("{}: sample of {n} clamped to {}", ds.space_id, pool.len());
        }
        return pool;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut pick: Vec<usize> = sample(&mut rng, pool.len(), n).into_iter().map(|k| pool[k]).collect();
    pick.sort_unstable();
    pick
}

fn cell(r: Result<f64>) -> Cell {
    match r {
        Ok(v) if v.is_finite() => Cell::Value(v),
        Ok(v) => Cell::Null(format!("non-finite value {v}")),
        Err(e) => Cell::Null(e.to_string()),
    }
}

/// Cell `(i, j)` is the Spearman correlation between scorer `i` and the
/// accuracies of a seeded sample of dataset `j`.
pub fn correlation_table(scorers: &[NamedScorer], datasets: &[BenchmarkDataset], sample: usize, seed: u64) -> Table {
    let samples: Vec<Vec<usize>> = datasets
        .iter()
        .enumerate()
        .map(|(j, ds)| sample_indices(ds, sample, seed, j as u64))
        .collect();
    let pairs: Vec<(usize, usize)> = (0..scorers.len()).flat_map(|i| (0..datasets.len()).map(move |j| (i, j))).collect();
    let flat: Vec<Cell> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let ds = &datasets[j];
            let entries: Vec<&Entry> = samples[j].iter().map(|&k| &ds.entries[k]).collect();
            cell(scorers[i].score(&entries).and_then(|s| spearman(&s, &ds.accuracies(&samples[j]))))
        })
        .collect();
    Table {
        rows: scorers.iter().map(|s| s.name.clone()).collect(),
        cols: datasets.iter().map(|d| d.space_id.clone()).collect(),
        cells: flat.chunks(datasets.len().max(1)).map(<[Cell]>::to_vec).collect(),
    }
}

/// Cell `(a, b)` is the Spearman correlation between scorers `a` and `b`,
/// averaged over the datasets' samples. Any undefined per-dataset value
/// makes the cell null.
pub fn score_score_table(scorers: &[NamedScorer], datasets: &[BenchmarkDataset], sample: usize, seed: u64) -> Table {
    let scores: Vec<Vec<Result<Vec<f64>>>> = datasets
        .iter()
        .enumerate()
        .map(|(j, ds)| {
            let idx = sample_indices(ds, sample, seed, j as u64);
            let entries: Vec<&Entry> = idx.iter().map(|&k| &ds.entries[k]).collect();
            scorers.par_iter().map(|s| s.score(&entries)).collect()
        })
        .collect();
    let n = scorers.len();
    let cells = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    if datasets.is_empty() {
                        return Cell::Null("no datasets".into());
                    }
                    let mut total = 0.0;
                    for (j, per) in scores.iter().enumerate() {
                        let r = match (&per[a], &per[b]) {
                            (Ok(x), Ok(y)) => spearman(x, y),
                            (Err(e), _) | (_, Err(e)) => Err(Error::Data(e.to_string())),
                        };
                        match r {
                            Ok(v) => total += v,
                            Err(e) => return Cell::Null(format!("{}: {e}", datasets[j].space_id)),
                        }
                    }
                    Cell::Value(total / datasets.len() as f64)
                })
                .collect()
        })
        .collect();
    let names: Vec<String> = scorers.iter().map(|s| s.name.clone()).collect();
    Table {
        rows: names.clone(),
        cols: names,
        cells,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreedyResult {
    pub best_accuracy: f64,
    /// Test-split ids in visiting order.
    pub visited: Vec<String>,
}

/// Visit test entries in descending score order and keep the best accuracy
/// among the first `k`, together with the best train accuracy.
pub fn greedy_topk_from_scores(ds: &BenchmarkDataset, test_scores: &[f64], k: usize) -> Result<GreedyResult> {
    if test_scores.len() != ds.test.len() {
        return Err(Error::Usage(format!(
            "{} scores for {} test entries",
            test_scores.len(),
            ds.test.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.test.len()).collect();
    order.sort_by(|&a, &b| test_scores[b].total_cmp(&test_scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    let visited: Vec<usize> = order.iter().map(|&o| ds.test[o]).collect();
    let best = visited
        .iter()
        .chain(&ds.train)
        .map(|&i| ds.entries[i].accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(GreedyResult {
        best_accuracy: best,
        visited: visited.iter().map(|&i| ds.entries[i].id.clone()).collect(),
    })
}

pub fn greedy_topk_search(ds: &BenchmarkDataset, scorer: &NamedScorer, k: usize) -> Result<GreedyResult> {
    let entries: Vec<&Entry> = ds.test.iter().map(|&i| &ds.entries[i]).collect();
    greedy_topk_from_scores(ds, &scorer.score(&entries)?, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::param_dataset;
    use rand::Rng;

    fn acc_scorer() -> NamedScorer<'static> {
        NamedScorer::from_fn("acc", |e| Ok(e.accuracy))
    }

    #[test]
    fn accuracy_rows() {
        let ds = vec![param_dataset(30, 0.1, 1).unwrap(), param_dataset(20, 0.1, 2).unwrap()];
        let neg = NamedScorer::from_fn("neg", |e| Ok(-e.accuracy));
        let t = correlation_table(&[acc_scorer(), neg], &ds, 1000, 0);
        for j in 0..2 {
            assert_eq!(t.get(0, j), &Cell::Value(1.0));
            assert_eq!(t.get(1, j), &Cell::Value(-1.0));
        }
    }

    #[test]
    fn params_track_noiseless_accuracy() {
        let ds = vec![param_dataset(60, 0.0, 3).unwrap()];
        let t = correlation_table(&[NamedScorer::params()], &ds, 40, 9);
        assert!((t.get(0, 0).value().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_scorer_gives_null_cell() {
        let ds = vec![param_dataset(10, 0.1, 4).unwrap()];
        let t = correlation_table(&[NamedScorer::from_fn("c", |_| Ok(1.0))], &ds, 10, 0);
        assert!(matches!(t.get(0, 0), Cell::Null(_)));
        assert!(t.to_text().contains("null"));
        assert!(t.to_csv().lines().nth(1).unwrap().ends_with(','));
    }

    #[test]
    fn tables_are_reproducible() {
        let ds = vec![param_dataset(50, 0.2, 5).unwrap()];
        let a = correlation_table(&[NamedScorer::params()], &ds, 20, 11).to_csv();
        let b = correlation_table(&[NamedScorer::params()], &ds, 20, 11).to_csv();
        assert_eq!(a, b);
        assert_eq!(sample_indices(&ds[0], 20, 11, 0).len(), 20);
        assert_eq!(sample_indices(&ds[0], 500, 11, 0).len(), 50);
    }

    #[test]
    fn score_score_examples() {
        let ds = vec![param_dataset(40, 0.1, 6).unwrap()];
        let cube = NamedScorer::from_fn("cube", |e| Ok(e.accuracy.powi(3) + 2.0));
        let t = score_score_table(&[acc_scorer(), cube], &ds, 40, 0);
        assert_eq!(t.get(0, 0), &Cell::Value(1.0));
        assert_eq!(t.get(0, 1), &Cell::Value(1.0));
    }

    #[test]
    fn independent_random_scorers_are_uncorrelated() {
        let ds = vec![param_dataset(1000, 0.1, 7).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r1: BTreeMap<String, f64> = ds[0].entries.iter().map(|e| (e.id.clone(), rng.gen())).collect();
        let r2: BTreeMap<String, f64> = ds[0].entries.iter().map(|e| (e.id.clone(), rng.gen())).collect();
        let t = score_score_table(&[NamedScorer::external("a", r1), NamedScorer::external("b", r2)], &ds, 1000, 0);
        assert!(t.get(0, 1).value().unwrap().abs() < 0.1);
    }

    #[test]
    fn greedy_examples() {
        let mut ds = param_dataset(40, 0.1, 8).unwrap();
        ds.resplit(10, 0).unwrap();
        let test_max = ds.test.iter().map(|&i| ds.entries[i].accuracy).fold(f64::NEG_INFINITY, f64::max);
        let train_max = ds.train.iter().map(|&i| ds.entries[i].accuracy).fold(f64::NEG_INFINITY, f64::max);
        let all = greedy_topk_search(&ds, &NamedScorer::params(), ds.test.len()).unwrap();
        assert_eq!(all.best_accuracy, test_max.max(train_max));
        let perfect = greedy_topk_search(&ds, &acc_scorer(), 1).unwrap();
        assert_eq!(perfect.best_accuracy, test_max.max(train_max));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise: Vec<f64> = ds.test.iter().map(|_| rng.gen()).collect();
        let mut last = f64::NEG_INFINITY;
        for k in 0..=ds.test.len() {
            let b = greedy_topk_from_scores(&ds, &noise, k).unwrap().best_accuracy;
            assert!(b >= last);
            last = b;
        }
    }

    #[test]
    fn score_csv() {
        let m = read_score_csv("arch_id,score\na, 1.5\nb,-2\n").unwrap();
        assert_eq!(m["a"], 1.5);
        assert_eq!(m["b"], -2.0);
        assert!(read_score_csv("id,score\na,1\n").is_err());
        assert!(read_score_csv("arch_id,score\na,x\n").is_err());
        assert!(read_score_csv("arch_id,score\na,1\na,2\n").is_err());
    }
}
