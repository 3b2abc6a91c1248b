//! Scaling-coefficient grids, exhaustive sweeps and selection rules.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::Checkpoint;
use crate::vector_arith::{apply_terms, eval_expr, ArithExpr, TaskVector};

/// Strictly ascending, non-negative coefficient values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CoeffGrid(Vec<f64>);

impl CoeffGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidGrid("grid is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidGrid(format!("value {v} is negative or not finite")));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("values must be strictly ascending".into()));
        }
        Ok(Self(values))
    }

    /// `start, start + step, ...` up to and including `stop`.
    pub fn range(start: f64, stop: f64, step: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) || stop < start {
            return Err(Error::InvalidGrid(format!("bad range {start}:{stop}:{step}")));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        // Round to 10 decimals so 0.05 steps produce 0.15 rather than 0.15000000000000002.
        let values = (0..=n)
            .map(|i| ((start + i as f64 * step) * 1e10).round() / 1e10)
            .collect();
        Self::new(values)
    }

    /// `{0.0, 0.05, ..., 1.0}` for single-coefficient sweeps.
    pub fn single_default() -> Self {
        Self::range(0.0, 1.0, 0.05).expect("valid range")
    }

    /// `{0.0, 0.1, ..., 1.0}` for multi-coefficient sweeps.
    pub fn multi_default() -> Self {
        Self::range(0.0, 1.0, 0.1).expect("valid range")
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for CoeffGrid {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<CoeffGrid> for Vec<f64> {
    fn from(g: CoeffGrid) -> Self {
        g.0
    }
}

impl FromStr for CoeffGrid {
    type Err = Error;

    /// Accepts `start:stop:step` or a comma-separated list.
    fn from_str(s: &str) -> Result<Self> {
        let num = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidGrid(format!("not a number: {p:?}")))
        };
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [a, b, step] => Self::range(num(a)?, num(b)?, num(step)?),
            [_] => Self::new(s.split(',').map(num).collect::<Result<_>>()?),
            _ => Err(Error::InvalidGrid(format!("expected start:stop:step, got {s:?}"))),
        }
    }
}

impl fmt::Display for CoeffGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// What an evaluator reports for one edited model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub target: f64,
    pub control: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub coeffs: Vec<f64>,
    pub target_metric: f64,
    pub control_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub coeff_names: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.coeff_names.clone();
        header.extend(["target_metric".to_string(), "control_metric".to_string()]);
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec: Vec<String> = row.coeffs.iter().map(|c| c.to_string()).collect();
            rec.push(row.target_metric.to_string());
            rec.push(row.control_metric.map(|c| c.to_string()).unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }

    pub fn row_for(&self, coeffs: &[f64]) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.coeffs == coeffs)
    }
}

/// Evaluates every grid point in parallel and assembles rows in grid order.
fn run_points<B, E>(names: &[&str], points: Vec<Vec<f64>>, build: B, evaluator: &E) -> Result<SweepResult>
where
    B: Fn(&[f64]) -> Result<Checkpoint> + Sync,
    E: Fn(&Checkpoint) -> Result<Metrics> + Sync,
{
    let rows = points
        .into_par_iter()
        .map(|coeffs| {
            let wrap = |source| Error::Evaluation {
                coeffs: coeffs.clone(),
                source: Box::new(source),
            };
            let model = build(&coeffs).map_err(wrap)?;
            let m = evaluator(&model).map_err(wrap)?;
            Ok(SweepRow {
                coeffs,
                target_metric: m.target,
                control_metric: m.control,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        coeff_names: names.iter().map(|s| s.to_string()).collect(),
        rows,
    })
}

fn cartesian(grids: &[&CoeffGrid]) -> Vec<Vec<f64>> {
    grids.iter().fold(vec![Vec::new()], |acc, g| {
        acc.into_iter()
            .flat_map(|prefix| {
                g.values().iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

/// Evaluates `base + λ·expr` for every λ in `grid`.
pub fn sweep<E>(base: &Checkpoint, expr: &ArithExpr, grid: &CoeffGrid, evaluator: &E) -> Result<SweepResult>
where
    E: Fn(&Checkpoint) -> Result<Metrics> + Sync,
{
    let tau = eval_expr(expr)?;
    let points = grid.values().iter().map(|&v| vec![v]).collect();
    run_points(
        &["lambda"],
        points,
        |c| apply_terms(base, &[(c[0], &tau)], &format!("apply {} * {expr}", c[0])),
        evaluator,
    )
}

/// `base + λ_sup·τ_sup + λ_unsup·(τ_target_unsup − τ_aux_unsup)` over the
/// Cartesian product of both grids.
pub fn sweep_two<E>(
    base: &Checkpoint,
    sup: &TaskVector,
    target_unsup: &TaskVector,
    aux_unsup: &TaskVector,
    grid_sup: &CoeffGrid,
    grid_unsup: &CoeffGrid,
    evaluator: &E,
) -> Result<SweepResult>
where
    E: Fn(&Checkpoint) -> Result<Metrics> + Sync,
{
    run_points(
        &["lambda_sup", "lambda_unsup"],
        cartesian(&[grid_sup, grid_unsup]),
        |c| {
            apply_terms(
                base,
                &[(c[0], sup), (c[1], target_unsup), (-c[1], aux_unsup)],
                &format!("domain edit sup={} unsup={}", c[0], c[1]),
            )
        },
        evaluator,
    )
}

/// `base + λ_C·τ_C + λ_B·τ_B − λ_A·τ_A`; rows carry `(λ_A, λ_B, λ_C)`.
pub fn sweep_three<E>(
    base: &Checkpoint,
    ta: &TaskVector,
    tb: &TaskVector,
    tc: &TaskVector,
    grid: &CoeffGrid,
    evaluator: &E,
) -> Result<SweepResult>
where
    E: Fn(&Checkpoint) -> Result<Metrics> + Sync,
{
    run_points(
        &["lambda_a", "lambda_b", "lambda_c"],
        cartesian(&[grid, grid, grid]),
        |c| {
            apply_terms(
                base,
                &[(c[2], tc), (c[1], tb), (-c[0], ta)],
                &format!("analogy edit a={} b={} c={}", c[0], c[1], c[2]),
            )
        },
        evaluator,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegationChoice {
    pub lambda: f64,
    /// The control floor, `0.95 × pretrained_control`.
    pub threshold: f64,
    /// Index of the chosen row, `None` when falling back to λ = 0.
    pub row: Option<usize>,
    /// Set when no grid point satisfied the control constraint.
    pub warning: bool,
}

/// Fraction of the pre-trained control accuracy a negation edit must keep.
pub const CONTROL_RETENTION: f64 = 0.95;

/// Largest λ whose control metric stays at or above 95% of the pre-trained
/// control metric; λ = 0 with a warning if none does.
pub fn select_negation(sw: &SweepResult, pretrained_control: f64) -> Result<NegationChoice> {
    let threshold = CONTROL_RETENTION * pretrained_control;
    let mut best: Option<usize> = None;
    for (i, row) in sw.rows.iter().enumerate() {
        let control = row.control_metric.ok_or(Error::MissingControl(i))?;
        if control >= threshold && best.is_none_or(|b| row.coeffs[0] > sw.rows[b].coeffs[0]) {
            best = Some(i);
        }
    }
    Ok(match best {
        Some(i) => NegationChoice {
            lambda: sw.rows[i].coeffs[0],
            threshold,
            row: Some(i),
            warning: false,
        },
        None => NegationChoice {
            lambda: 0.0,
            threshold,
            row: None,
            warning: true,
        },
    })
}

/// Row with the highest target metric; ties go to the lexicographically
/// smallest coefficient tuple.
pub fn select_max(sw: &SweepResult) -> Result<&SweepRow> {
    let mut best: Option<&SweepRow> = None;
    for row in &sw.rows {
        if row.target_metric.is_nan() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                row.target_metric > b.target_metric
                    || (row.target_metric == b.target_metric && lex_less(&row.coeffs, &b.coeffs))
            }
        };
        if better {
            best = Some(row);
        }
    }
    best.ok_or_else(|| Error::EmptyData("no rows to select from".into()))
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x != y {
            return x < y;
        }
    }
    a.len() < b.len()
}
