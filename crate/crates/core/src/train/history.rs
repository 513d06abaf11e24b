use std::io::{BufRead, Write};

use crate::error::{contract, Error, Result};

/// Metrics at one evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    /// `Dist(Σ^{1/2} B_ℓᵀ C_ℓ Σ^{1/2}, I)` per layer.
    pub dist_bc: Vec<f64>,
    /// `Dist(A_ℓ, I)` per layer when `A` is trained.
    pub dist_a: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunHistory {
    pub layers: usize,
    pub records: Vec<EvalRecord>,
}

impl RunHistory {
    pub fn new(layers: usize) -> Self {
        RunHistory { layers, records: Vec::new() }
    }

    pub fn push(&mut self, record: EvalRecord) -> Result<()> {
        if record.dist_bc.len() != self.layers || record.dist_a.as_ref().is_some_and(|a| a.len() != self.layers) {
            return Err(contract("record has the wrong number of layers"));
        }
        if self.records.last().is_some_and(|r| r.step >= record.step) {
            return Err(contract("history steps must increase"));
        }
        let values = [record.train_loss, record.eval_loss].into_iter().chain(record.dist_bc.iter().copied());
        if values.chain(record.dist_a.iter().flatten().copied()).any(|v| !v.is_finite()) {
            return Err(contract(format!("non-finite metric at step {}", record.step)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn first(&self) -> Option<&EvalRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    pub fn header(layers: usize) -> String {
        let mut cols = vec!["step".to_string(), "train_loss".into(), "eval_loss".into()];
        cols.extend((0..layers).map(|l| format!("dist_BC_layer{l}")));
        cols.extend((0..layers).map(|l| format!("dist_A_layer{l}")));
        cols.join(",")
    }

    /// One header row, then one row per record. `dist_A` cells are empty when
    /// `A` is not trained.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::header(self.layers))?;
        for r in &self.records {
            let mut cells = vec![r.step.to_string(), format!("{:?}", r.train_loss), format!("{:?}", r.eval_loss)];
            cells.extend(r.dist_bc.iter().map(|v| format!("{v:?}")));
            match &r.dist_a {
                Some(a) => cells.extend(a.iter().map(|v| format!("{v:?}"))),
                None => cells.extend((0..self.layers).map(|_| String::new())),
            }
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty history file".into()))??;
        let width = header.split(',').count();
        if width < 3 || (width - 3) % 2 != 0 {
            return Err(Error::Format("malformed history header".into()));
        }
        let layers = (width - 3) / 2;
        if header != Self::header(layers) {
            return Err(Error::Format("history header does not match the schema".into()));
        }
        let mut history = RunHistory::new(layers);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let cells: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| Error::Format(format!("history row {}: {what}", i + 1));
            if cells.len() != width {
                return Err(bad("wrong field count"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            let dist_bc = cells[3..3 + layers].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            let a_cells = &cells[3 + layers..];
            let dist_a = if a_cells.iter().all(|s| s.is_empty()) {
                None
            } else {
                Some(a_cells.iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?)
            };
            history
                .push(EvalRecord {
                    step: cells[0].parse().map_err(|_| bad("bad step"))?,
                    train_loss: num(cells[1])?,
                    eval_loss: num(cells[2])?,
                    dist_bc,
                    dist_a,
                })
                .map_err(|e| bad(&e.to_string()))?;
        }
        Ok(history)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Entrywise median across runs recorded at the same steps.
pub fn median_history(runs: &[RunHistory]) -> Result<RunHistory> {
    let first = runs.first().ok_or_else(|| contract("median of zero runs"))?;
    for r in runs {
        let same_steps = r.records.len() == first.records.len()
            && r.records.iter().zip(&first.records).all(|(a, b)| a.step == b.step);
        if r.layers != first.layers || !same_steps {
            return Err(contract("runs do not share layers and evaluation steps"));
        }
    }
    let mut out = RunHistory::new(first.layers);
    for (i, rec) in first.records.iter().enumerate() {
        let col = |f: &dyn Fn(&EvalRecord) -> f64| median(&mut runs.iter().map(|r| f(&r.records[i])).collect::<Vec<_>>());
        let dist_bc = (0..first.layers).map(|l| col(&|r| r.dist_bc[l])).collect();
        let dist_a = if runs.iter().all(|r| r.records[i].dist_a.is_some()) {
            Some((0..first.layers).map(|l| col(&|r| r.dist_a.as_ref().unwrap()[l])).collect())
        } else {
            None
        };
        out.push(EvalRecord {
            step: rec.step,
            train_loss: col(&|r| r.train_loss),
            eval_loss: col(&|r| r.eval_loss),
            dist_bc,
            dist_a,
        })?;
    }
    Ok(out)
}
