//! Design matrices and the expansions learners apply to them.
//!
//! A base design holds one column per input variable (main effects). Learners
//! expand it with an [`ExpansionPlan`] fitted on training rows (spline knots are
//! data dependent) and replay the same plan on prediction rows.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Column, ColumnKind, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Main { source: usize },
    Interaction { a: usize, b: usize },
    SplineBasis { source: usize, term: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignColumn {
    pub name: String,
    pub kind: ColumnKind,
    pub provenance: Provenance,
}

/// Per-column centering and scaling constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Population mean and standard deviation of each column. Constant columns get
    /// scale 1 so they standardize to exact zeros.
    pub fn fit(values: &DMatrix<f64>) -> Standardization {
        let n = values.nrows() as f64;
        let mut mean = Vec::with_capacity(values.ncols());
        let mut scale = Vec::with_capacity(values.ncols());
        for col in values.column_iter() {
            let m = col.iter().sum::<f64>() / n;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            mean.push(m);
            let sd = v.sqrt();
            scale.push(if sd > 1e-12 * (1.0 + m.abs()) { sd } else { 1.0 });
        }
        Standardization { mean, scale }
    }

    pub fn apply(&self, values: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = values.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[j], self.scale[j]);
            for v in col.iter_mut() {
                *v = (*v - m) / s;
            }
        }
        out
    }

    /// Maps standardized-scale coefficients back to the original scale.
    pub fn unscale(&self, intercept: f64, coef: &[f64]) -> (f64, Vec<f64>) {
        let slopes: Vec<f64> = coef.iter().zip(&self.scale).map(|(b, s)| b / s).collect();
        let shift: f64 = slopes.iter().zip(&self.mean).map(|(b, m)| b * m).sum();
        (intercept - shift, slopes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    columns: Vec<DesignColumn>,
    standardization: Option<Standardization>,
}

impl DesignMatrix {
    /// Base design: one main-effect column per input column.
    pub fn new(values: DMatrix<f64>, columns: Vec<Column>) -> Result<DesignMatrix> {
        if columns.len() != values.ncols() {
            return Err(Error::invalid("column metadata does not match design width"));
        }
        let columns = columns
            .into_iter()
            .enumerate()
            .map(|(j, c)| DesignColumn {
                name: c.name,
                kind: c.kind,
                provenance: Provenance::Main { source: j },
            })
            .collect();
        Self::from_parts(values, columns)
    }

    fn from_parts(values: DMatrix<f64>, columns: Vec<DesignColumn>) -> Result<DesignMatrix> {
        if values.ncols() == 0 {
            return Err(Error::invalid("empty design"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("design contains non-finite values"));
        }
        Ok(DesignMatrix {
            values,
            columns,
            standardization: None,
        })
    }

    /// Confounder design `W` of a dataset (exposure model input).
    pub fn exposure_design(data: &Dataset) -> DesignMatrix {
        DesignMatrix {
            values: data.w().clone(),
            columns: main_columns(data.columns().iter().cloned()),
            standardization: None,
        }
    }

    /// Outcome model input `[X, W]`; `force_exposure` replaces `X` by a constant.
    pub fn outcome_design(data: &Dataset, force_exposure: Option<f64>) -> DesignMatrix {
        Self::outcome_design_from(data.w(), data.x(), data.columns(), force_exposure)
    }

    pub(crate) fn outcome_design_from(
        w: &DMatrix<f64>,
        x: &[f64],
        columns: &[Column],
        force_exposure: Option<f64>,
    ) -> DesignMatrix {
        let n = w.nrows();
        let values = DMatrix::from_fn(n, w.ncols() + 1, |i, j| {
            if j == 0 {
                force_exposure.unwrap_or(x[i])
            } else {
                w[(i, j - 1)]
            }
        });
        let cols = std::iter::once(Column {
            name: "exposure".into(),
            kind: ColumnKind::Binary,
        })
        .chain(columns.iter().cloned());
        DesignMatrix {
            values,
            columns: main_columns(cols),
            standardization: None,
        }
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn columns(&self) -> &[DesignColumn] {
        &self.columns
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn rows(&self, idx: &[usize]) -> DesignMatrix {
        DesignMatrix {
            values: self.values.select_rows(idx),
            columns: self.columns.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// Same design with column `j` replaced by a constant (used to force exposure).
    pub fn with_constant_column(&self, j: usize, value: f64) -> DesignMatrix {
        let mut out = self.clone();
        out.values.column_mut(j).fill(value);
        out
    }

    /// Standardizes with constants fitted on this design.
    pub fn standardized(&self) -> DesignMatrix {
        let s = Standardization::fit(&self.values);
        self.standardized_with(&s)
    }

    /// Standardizes with stored constants (prediction time).
    pub fn standardized_with(&self, s: &Standardization) -> DesignMatrix {
        DesignMatrix {
            values: s.apply(&self.values),
            columns: self.columns.clone(),
            standardization: Some(s.clone()),
        }
    }

    /// Column signature used for contract checks at prediction time.
    pub fn signature(&self) -> Vec<(String, ColumnKind)> {
        self.columns.iter().map(|c| (c.name.clone(), c.kind)).collect()
    }
}

fn main_columns(cols: impl Iterator<Item = Column>) -> Vec<DesignColumn> {
    cols.enumerate()
        .map(|(j, c)| DesignColumn {
            name: c.name,
            kind: c.kind,
            provenance: Provenance::Main { source: j },
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expansion {
    Main,
    Pairwise,
    Spline { interior_knots: usize },
}

/// Knots of a natural cubic spline for one continuous column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineKnots {
    /// Boundary and interior knots, strictly increasing, at least two.
    pub knots: Vec<f64>,
}

impl SplineKnots {
    fn fit(values: &[f64], interior: usize) -> Result<SplineKnots> {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        if !(hi > lo) {
            return Err(Error::Degenerate("constant column under spline expansion".into()));
        }
        let mut knots = vec![lo];
        for k in 1..=interior {
            let q = quantile_sorted(&sorted, k as f64 / (interior + 1) as f64);
            if q > *knots.last().unwrap() && q < hi {
                knots.push(q);
            }
        }
        knots.push(hi);
        Ok(SplineKnots { knots })
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len() - 1
    }

    /// Truncated-power natural cubic spline basis (linear beyond the boundary knots),
    /// evaluated on `x` rescaled to the boundary interval.
    pub fn basis(&self, x: f64, out: &mut [f64]) {
        let k = self.knots.len();
        let lo = self.knots[0];
        let range = self.knots[k - 1] - lo;
        let u = (x - lo) / range;
        let uk: Vec<f64> = self.knots.iter().map(|t| (t - lo) / range).collect();
        let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
        let d = |j: usize| (cube(u - uk[j]) - cube(u - uk[k - 1])) / (uk[k - 1] - uk[j]);
        out[0] = u;
        if k > 2 {
            let last = d(k - 2);
            for j in 0..k - 2 {
                out[j + 1] = d(j) - last;
            }
        }
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Expansion fitted on training rows and replayed on new rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    expansion: Expansion,
    input: Vec<(String, ColumnKind)>,
    knots: Vec<Option<SplineKnots>>,
}

impl ExpansionPlan {
    pub fn fit(base: &DesignMatrix, expansion: Expansion) -> Result<ExpansionPlan> {
        Self::fit_with(base, expansion, true)
    }

    /// Like [`ExpansionPlan::fit`], but with `strict = false` a constant continuous
    /// column is passed through instead of rejected (learners fitted on small
    /// training subsets use this).
    pub(crate) fn fit_with(base: &DesignMatrix, expansion: Expansion, strict: bool) -> Result<ExpansionPlan> {
        let knots = match expansion {
            Expansion::Spline { interior_knots } => base
                .columns
                .iter()
                .enumerate()
                .map(|(j, c)| match c.kind {
                    ColumnKind::Continuous => {
                        let col: Vec<f64> = base.values.column(j).iter().copied().collect();
                        match SplineKnots::fit(&col, interior_knots) {
                            Err(_) if !strict => Ok(None),
                            other => other.map(Some),
                        }
                    }
                    ColumnKind::Binary => Ok(None),
                })
                .collect::<Result<Vec<_>>>()?,
            _ => vec![None; base.ncols()],
        };
        Ok(ExpansionPlan {
            expansion,
            input: base.signature(),
            knots,
        })
    }

    pub fn expansion(&self) -> Expansion {
        self.expansion
    }

    pub fn check(&self, base: &DesignMatrix) -> Result<()> {
        if base.signature() != self.input {
            return Err(Error::ContractMismatch(format!(
                "expected {} input columns {:?}, got {}",
                self.input.len(),
                self.input.iter().map(|c| &c.0).collect::<Vec<_>>(),
                base.ncols()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, base: &DesignMatrix) -> Result<DesignMatrix> {
        self.check(base)?;
        let n = base.nrows();
        let p = base.ncols();
        match self.expansion {
            Expansion::Main => Ok(DesignMatrix {
                values: base.values.clone(),
                columns: base.columns.clone(),
                standardization: None,
            }),
            Expansion::Pairwise => {
                let q = p + p * (p - 1) / 2;
                let mut values = DMatrix::zeros(n, q);
                let mut columns = base.columns.clone();
                values.columns_mut(0, p).copy_from(&base.values);
                let mut c = p;
                for a in 0..p {
                    for b in (a + 1)..p {
                        let prod = base.values.column(a).component_mul(&base.values.column(b));
                        values.set_column(c, &prod);
                        let kind = if base.columns[a].kind == ColumnKind::Binary
                            && base.columns[b].kind == ColumnKind::Binary
                        {
                            ColumnKind::Binary
                        } else {
                            ColumnKind::Continuous
                        };
                        columns.push(DesignColumn {
                            name: format!("{}:{}", base.columns[a].name, base.columns[b].name),
                            kind,
                            provenance: Provenance::Interaction { a, b },
                        });
                        c += 1;
                    }
                }
                Ok(DesignMatrix {
                    values,
                    columns,
                    standardization: None,
                })
            }
            Expansion::Spline { .. } => {
                let widths: Vec<usize> = self.knots.iter().map(|k| k.as_ref().map_or(1, |s| s.n_basis())).collect();
                let q: usize = widths.iter().sum();
                let mut values = DMatrix::zeros(n, q);
                let mut columns = Vec::with_capacity(q);
                let mut c = 0;
                for j in 0..p {
                    match &self.knots[j] {
                        None => {
                            values.set_column(c, &base.values.column(j));
                            columns.push(base.columns[j].clone());
                            c += 1;
                        }
                        Some(sk) => {
                            let mut buf = vec![0.0; sk.n_basis()];
                            for i in 0..n {
                                sk.basis(base.values[(i, j)], &mut buf);
                                for (t, v) in buf.iter().enumerate() {
                                    values[(i, c + t)] = *v;
                                }
                            }
                            for t in 0..sk.n_basis() {
                                columns.push(DesignColumn {
                                    name: format!("ns({})[{}]", base.columns[j].name, t + 1),
                                    kind: ColumnKind::Continuous,
                                    provenance: Provenance::SplineBasis { source: j, term: t },
                                });
                            }
                            c += sk.n_basis();
                        }
                    }
                }
                DesignMatrix::from_parts(values, columns)
            }
        }
    }
}

/// Expands a main-effects design.
pub fn expand_design(base: &DesignMatrix, expansion: Expansion) -> Result<DesignMatrix> {
    ExpansionPlan::fit(base, expansion)?.apply(base)
}
