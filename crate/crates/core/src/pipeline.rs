//! CSV ingestion and the transforms applied to observational count data:
//! outcome binning, exposure dichotomization, group-wise ATE tables and
//! covariate balance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcse::{mean, variance};
use crate::model::Dataset;

/// Which CSV columns hold the outcome, the treatment and the covariates.
/// The intercept is added on load and never appears in the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub y: String,
    pub w: String,
    pub x: Vec<String>,
    /// Optional potential-outcome columns, present in synthetic files.
    #[serde(default)]
    pub y0: Option<String>,
    #[serde(default)]
    pub y1: Option<String>,
    #[serde(default = "comma")]
    pub delimiter: u8,
}

fn comma() -> u8 {
    b','
}

impl ColumnMapping {
    pub fn new(y: &str, w: &str, x: &[&str]) -> Self {
        Self {
            y: y.into(),
            w: w.into(),
            x: x.iter().map(|s| s.to_string()).collect(),
            y0: None,
            y1: None,
            delimiter: b',',
        }
    }

    pub fn with_potential_outcomes(mut self, y0: &str, y1: &str) -> Self {
        self.y0 = Some(y0.into());
        self.y1 = Some(y1.into());
        self
    }

    pub fn with_delimiter(mut self, delimiter: u8) -> Self {
        self.delimiter = delimiter;
        self
    }
}

/// A CSV file held as text, addressed by column name. Row numbers in errors
/// count data rows from 1, so the first line after the header is row 1.
#[derive(Debug, Clone)]
pub struct CsvTable {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn read(path: &Path, delimiter: u8) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(true)
            .from_reader(std::io::BufReader::new(file));
        let headers = rdr
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(Self { headers, rows })
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.into()))
    }

    pub fn column_str(&self, name: &str) -> Result<Vec<&str>> {
        let j = self.index_of(name)?;
        Ok(self.rows.iter().map(|r| r[j].trim()).collect())
    }

    /// Finite reals; blanks, `NaN` and infinities are rejected with their row.
    pub fn column_f64(&self, name: &str) -> Result<Vec<f64>> {
        self.column_str(name)?
            .into_iter()
            .enumerate()
            .map(|(r, s)| parse_finite(s, r + 1, name))
            .collect()
    }
}

fn parse_finite(s: &str, row: usize, column: &str) -> Result<f64> {
    let fail = |message: &str| Error::Parse {
        row,
        column: column.into(),
        message: message.into(),
    };
    if s.is_empty() {
        return Err(fail("missing value"));
    }
    let v: f64 = s
        .parse()
        .map_err(|_| fail(&format!("cannot parse {s:?} as a number")))?;
    if !v.is_finite() {
        return Err(fail(&format!("non-finite value {s:?}")));
    }
    Ok(v)
}

fn parse_count(s: &str, row: usize, column: &str) -> Result<u64> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    let v = parse_finite(s, row, column)?;
    if v.fract() != 0.0 {
        return Err(Error::NonIntegerOutcome { row });
    }
    if v < 0.0 || v >= u64::MAX as f64 {
        return Err(Error::Parse {
            row,
            column: column.into(),
            message: format!("count {s} out of range"),
        });
    }
    Ok(v as u64)
}

fn count_column(table: &CsvTable, name: &str) -> Result<Vec<u64>> {
    table
        .column_str(name)?
        .into_iter()
        .enumerate()
        .map(|(r, s)| parse_count(s, r + 1, name))
        .collect()
}

/// Loads a count dataset. Outcomes must be non-negative integers (`4` or
/// `4.0`), treatments 0 or 1, covariates finite.
pub fn load_csv(path: &Path, mapping: &ColumnMapping) -> Result<Dataset> {
    let table = CsvTable::read(path, mapping.delimiter)?;
    // resolve every column first so a schema error wins over a value error
    for name in [&mapping.y, &mapping.w].into_iter().chain(&mapping.x) {
        table.index_of(name)?;
    }
    let y = count_column(&table, &mapping.y)?;
    let w = table
        .column_str(&mapping.w)?
        .into_iter()
        .enumerate()
        .map(|(r, s)| match parse_finite(s, r + 1, &mapping.w)? {
            v if v == 0.0 => Ok(0u8),
            v if v == 1.0 => Ok(1u8),
            v => Err(Error::Parse {
                row: r + 1,
                column: mapping.w.clone(),
                message: format!("treatment must be 0 or 1, got {v}"),
            }),
        })
        .collect::<Result<Vec<u8>>>()?;
    let cols: Vec<Vec<f64>> = mapping
        .x
        .iter()
        .map(|c| table.column_f64(c))
        .collect::<Result<_>>()?;
    let p = cols.len() + 1;
    let mut x = Vec::with_capacity(table.len() * p);
    for i in 0..table.len() {
        x.push(1.0);
        x.extend(cols.iter().map(|c| c[i]));
    }
    let ds = Dataset::from_flat(x, p, w, y)?;
    match (&mapping.y0, &mapping.y1) {
        (Some(a), Some(b)) => {
            ds.with_potential_outcomes(count_column(&table, a)?, count_column(&table, b)?)
        }
        _ => Ok(ds),
    }
}

/// Writes `ds` with the mapping's column names; `load_csv` with the same
/// mapping reproduces it exactly.
pub fn write_csv(ds: &Dataset, path: &Path, mapping: &ColumnMapping) -> Result<()> {
    if mapping.x.len() != ds.k() {
        return Err(Error::Dimension(format!(
            "{} covariate names for {} covariates",
            mapping.x.len(),
            ds.k()
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(mapping.delimiter)
        .from_writer(std::io::BufWriter::new(file));
    let po = match (&mapping.y0, &mapping.y1, ds.y0(), ds.y1()) {
        (Some(a), Some(b), Some(y0), Some(y1)) => Some((a, b, y0, y1)),
        _ => None,
    };
    let mut header = vec![mapping.y.clone(), mapping.w.clone()];
    header.extend(mapping.x.iter().cloned());
    if let Some((a, b, _, _)) = po {
        header.push(a.clone());
        header.push(b.clone());
    }
    wtr.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec = vec![ds.y_obs()[i].to_string(), ds.w()[i].to_string()];
        rec.extend(ds.row(i)[1..].iter().map(|v| v.to_string()));
        if let Some((_, _, y0, y1)) = po {
            rec.push(y0[i].to_string());
            rec.push(y1[i].to_string());
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Maps reals to consecutive integer labels. Finite intervals are `[a, b)`;
/// when `open_right` is false the last one also contains its right edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningRule {
    pub edges: Vec<f64>,
    #[serde(default)]
    pub open_left: bool,
    #[serde(default)]
    pub open_right: bool,
    /// Defaults to `1..=intervals`.
    #[serde(default)]
    pub labels: Vec<u64>,
}

impl BinningRule {
    pub fn new(edges: Vec<f64>, open_left: bool, open_right: bool) -> Result<Self> {
        let mut rule = Self {
            edges,
            open_left,
            open_right,
            labels: Vec::new(),
        };
        rule.labels = (1..=rule.intervals() as u64).collect();
        rule.validate()?;
        Ok(rule)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut rule: BinningRule = serde_json::from_str(text)?;
        if rule.labels.is_empty() {
            rule.labels = (1..=rule.intervals() as u64).collect();
        }
        rule.validate()?;
        Ok(rule)
    }

    pub fn intervals(&self) -> usize {
        self.edges.len().saturating_sub(1) + self.open_left as usize + self.open_right as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.edges.is_empty() || self.edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidParameter(
                "bin edges must be finite and non-empty".into(),
            ));
        }
        if self.edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "bin edges must be strictly increasing".into(),
            ));
        }
        if self.intervals() == 0 {
            return Err(Error::InvalidParameter(
                "a single closed edge defines no interval".into(),
            ));
        }
        if self.labels.len() != self.intervals()
            || self
                .labels
                .iter()
                .enumerate()
                .any(|(j, &l)| l != j as u64 + 1)
        {
            return Err(Error::InvalidParameter(format!(
                "labels must be 1..={}, got {:?}",
                self.intervals(),
                self.labels
            )));
        }
        Ok(())
    }

    fn label_of(&self, v: f64) -> Option<u64> {
        let e = &self.edges;
        let last = e[e.len() - 1];
        // number of edges <= v; finite bins are left-closed
        let above = e.partition_point(|&edge| edge <= v);
        let slot = if above == 0 {
            if !self.open_left {
                return None;
            }
            0
        } else if above == e.len() {
            match (self.open_right, v == last && e.len() > 1) {
                (true, _) => e.len() - 1 + self.open_left as usize,
                (false, true) => e.len() - 2 + self.open_left as usize,
                (false, false) => return None,
            }
        } else {
            above - 1 + self.open_left as usize
        };
        Some(self.labels[slot])
    }
}

pub fn bin_outcome(values: &[f64], rule: &BinningRule) -> Result<Vec<u64>> {
    rule.validate()?;
    values
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            rule.label_of(value)
                .ok_or(Error::OutOfRange { index, value })
        })
        .collect()
}

/// `W_i = 1` iff `exposure_i >= h`. A NaN exposure compares false and maps to 0.
pub fn dichotomize(exposure: &[f64], h: f64) -> Vec<u8> {
    exposure.iter().map(|&e| u8::from(e >= h)).collect()
}

/// Cases per `10^power` inhabitants.
pub fn per_capita_rate(cases: f64, population: f64, power: i32) -> Result<f64> {
    if !(population > 0.0 && population.is_finite() && cases >= 0.0 && cases.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "rate needs cases >= 0 and population > 0, got {cases} / {population}"
        )));
    }
    Ok(10f64.powi(power) * cases / population)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupAte {
    pub group: usize,
    /// `None` for a group without units.
    pub ate: Option<f64>,
    /// Standard deviation across replications.
    pub sd: Option<f64>,
    pub n: usize,
    pub weight: f64,
}

/// Within-group ATE of every replication, averaged over replications.
/// `grouping[i]` is unit `i`'s group in `0..n_groups`.
pub fn groupwise_ate(
    ds: &Dataset,
    imputations: &[Vec<u64>],
    grouping: &[usize],
    n_groups: usize,
) -> Result<Vec<GroupAte>> {
    let n = ds.n();
    if grouping.len() != n {
        return Err(Error::Dimension(format!(
            "grouping covers {} of {n} units",
            grouping.len()
        )));
    }
    if let Some(index) = grouping.iter().position(|&g| g >= n_groups) {
        return Err(Error::IndexOutOfRange {
            index,
            len: n_groups,
        });
    }
    if imputations.is_empty() {
        return Err(Error::InsufficientDraws {
            required: 1,
            got: 0,
        });
    }
    let mut sizes = vec![0usize; n_groups];
    for &g in grouping {
        sizes[g] += 1;
    }
    let mut per_rep = vec![Vec::with_capacity(imputations.len()); n_groups];
    for y_mis in imputations {
        if y_mis.len() != n {
            return Err(Error::Dimension(format!(
                "{} imputed outcomes for {n} units",
                y_mis.len()
            )));
        }
        let mut sums = vec![0.0; n_groups];
        for i in 0..n {
            let d = ds.y_obs()[i] as f64 - y_mis[i] as f64;
            sums[grouping[i]] += if ds.treated(i) { d } else { -d };
        }
        for g in 0..n_groups {
            if sizes[g] > 0 {
                per_rep[g].push(sums[g] / sizes[g] as f64);
            }
        }
    }
    Ok((0..n_groups)
        .map(|g| {
            let filled = sizes[g] > 0;
            GroupAte {
                group: g,
                ate: filled.then(|| mean(&per_rep[g])),
                sd: (filled && per_rep[g].len() > 1).then(|| variance(&per_rep[g]).sqrt()),
                n: sizes[g],
                weight: sizes[g] as f64 / n as f64,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub covariate: String,
    /// `None` when `v0/n0 + v1/n1` is zero or undefined.
    pub smd: Option<f64>,
    pub theta0: f64,
    pub theta1: f64,
    pub v0: f64,
    pub v1: f64,
    pub n0: usize,
    pub n1: usize,
}

/// Standardized mean difference of every non-intercept covariate. `names`
/// defaults to `x1, x2, ...`.
pub fn balance_table(ds: &Dataset, names: Option<&[String]>) -> Result<Vec<BalanceRow>> {
    let k = ds.k();
    if let Some(names) = names {
        if names.len() != k {
            return Err(Error::Dimension(format!(
                "{} names for {k} covariates",
                names.len()
            )));
        }
    }
    let n1 = ds.n_treated();
    let n0 = ds.n() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::InvalidParameter(format!(
            "balance needs both arms, got {n0} control and {n1} treated"
        )));
    }
    (1..=k)
        .map(|j| {
            let (mut a, mut b) = (Vec::with_capacity(n0), Vec::with_capacity(n1));
            for i in 0..ds.n() {
                let v = ds.row(i)[j];
                if ds.treated(i) {
                    b.push(v)
                } else {
                    a.push(v)
                }
            }
            let (theta0, theta1, v0, v1) = (mean(&a), mean(&b), variance(&a), variance(&b));
            let denom = (v0 / n0 as f64 + v1 / n1 as f64).sqrt();
            Ok(BalanceRow {
                covariate: names.map_or_else(|| format!("x{j}"), |n| n[j - 1].clone()),
                smd: (denom > 0.0 && denom.is_finite()).then(|| (theta1 - theta0) / denom),
                theta0,
                theta1,
                v0,
                v1,
                n0,
                n1,
            })
        })
        .collect()
}
