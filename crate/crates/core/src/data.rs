//! CSV loading, the model-formula parser and design construction.
//!
//! Formula grammar:
//!
//! ```text
//! formula := ident "~" term ("+" term)* ["|" "nu" ":" ident ("+" ident)*]
//! term    := ident | "s" "(" ident ["," "df" "=" number] ")"
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{CmpError, Result};
use crate::gam::{GamData, GamSpec, SmoothSpec};
use crate::regression::ModelData;
use crate::spline::DEFAULT_DF;
use crate::wls::DesignMatrix;

const MISSING: [&str; 4] = ["", "NA", "na", "?"];
const DATE_FORMATS: [&str; 3] = ["%Y-%m-%d", "%m/%d/%Y", "%Y/%m/%d"];

/// Name of the numeric day-of-month column derived from the first date column.
pub const DAY_COLUMN: &str = "day";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    Numeric,
    Categorical,
    Date,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    /// Levels in order of first appearance; `codes` index into them.
    Categorical { levels: Vec<String>, codes: Vec<usize> },
    Date(Vec<NaiveDate>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Self::Numeric(v) => v.len(),
            Self::Categorical { codes, .. } => codes.len(),
            Self::Date(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column_type(&self) -> ColumnType {
        match self {
            Self::Numeric(_) => ColumnType::Numeric,
            Self::Categorical { .. } => ColumnType::Categorical,
            Self::Date(_) => ColumnType::Date,
        }
    }

    fn select_rows(&self, rows: &[usize]) -> Self {
        match self {
            Self::Numeric(v) => Self::Numeric(rows.iter().map(|&i| v[i]).collect()),
            Self::Categorical { levels, codes } => {
                // Re-derive first-appearance order for the retained rows.
                let mut kept: Vec<String> = Vec::new();
                let mut new_codes = Vec::with_capacity(rows.len());
                for &i in rows {
                    let label = &levels[codes[i]];
                    let code = match kept.iter().position(|l| l == label) {
                        Some(c) => c,
                        None => {
                            kept.push(label.clone());
                            kept.len() - 1
                        }
                    };
                    new_codes.push(code);
                }
                Self::Categorical {
                    levels: kept,
                    codes: new_codes,
                }
            }
            Self::Date(v) => Self::Date(rows.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Column types by name plus the columns the analysis needs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaHints {
    /// Types for named columns; others are inferred (numeric, then date, then categorical).
    pub columns: BTreeMap<String, ColumnType>,
    /// Only these columns are loaded and checked for missing values.
    /// `None` loads every column.
    pub required: Option<Vec<String>>,
}

impl SchemaHints {
    /// Types for the hourly bike-sharing layout.
    pub fn bike_sharing() -> Self {
        let mut columns = BTreeMap::new();
        columns.insert("dteday".to_string(), ColumnType::Date);
        for c in ["season", "weekday", "weathersit"] {
            columns.insert(c.to_string(), ColumnType::Categorical);
        }
        for c in [
            "instant", "yr", "mnth", "hr", "holiday", "workingday", "temp", "atemp", "hum", "windspeed", "casual",
            "registered", "cnt",
        ] {
            columns.insert(c.to_string(), ColumnType::Numeric);
        }
        Self { columns, required: None }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| CmpError::Io {
            path: path.display().to_string(),
            message: format!("invalid schema hints: {e}"),
        })
    }

    /// Restricts loading to `columns` (plus the date column that feeds `day`).
    pub fn with_required(mut self, columns: Vec<String>) -> Self {
        self.required = Some(columns);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    /// Data rows in the file, header excluded.
    pub file_rows: usize,
    pub dropped_missing: usize,
    /// Rows removed by later filters such as the month filter.
    pub dropped_filtered: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Column>,
    report: LoadReport,
}

fn io_error(path: &Path, e: impl fmt::Display) -> CmpError {
    CmpError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    DATE_FORMATS.iter().find_map(|f| NaiveDate::parse_from_str(s, f).ok())
}

fn infer_type(values: &[&str]) -> ColumnType {
    if values.iter().all(|v| v.parse::<f64>().is_ok()) {
        ColumnType::Numeric
    } else if values.iter().all(|v| parse_date(v).is_some()) {
        ColumnType::Date
    } else {
        ColumnType::Categorical
    }
}

/// Reads a headed CSV file into typed columns.
///
/// Rows with a missing value (`""`, `NA`, `?`) in any loaded column are
/// dropped and counted. Type errors name the 1-based data row.
pub fn load_csv(path: &Path, hints: &SchemaHints) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| io_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(io_error(path, "missing header row"));
    }
    let selected: Vec<usize> = match &hints.required {
        None => (0..header.len()).collect(),
        Some(req) => {
            for r in req {
                if !header.contains(r) && r != DAY_COLUMN {
                    return Err(CmpError::UnknownTerm(r.clone()));
                }
            }
            let needs_day = req.iter().any(|r| r == DAY_COLUMN) && !header.iter().any(|h| h == DAY_COLUMN);
            (0..header.len())
                .filter(|&j| {
                    req.contains(&header[j])
                        || (needs_day && hints.columns.get(&header[j]) == Some(&ColumnType::Date))
                })
                .collect()
        }
    };
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); selected.len()];
    let mut row_numbers = Vec::new();
    let mut file_rows = 0;
    let mut dropped = 0;
    for record in reader.records() {
        let record = record.map_err(|e| io_error(path, e))?;
        file_rows += 1;
        let cells: Vec<&str> = selected.iter().map(|&j| record.get(j).unwrap_or("")).collect();
        if cells.iter().any(|c| MISSING.contains(c)) {
            dropped += 1;
            continue;
        }
        row_numbers.push(file_rows);
        for (col, cell) in raw.iter_mut().zip(cells) {
            col.push(cell.to_string());
        }
    }
    let mut names = Vec::with_capacity(selected.len() + 1);
    let mut columns = Vec::with_capacity(selected.len() + 1);
    for (k, &j) in selected.iter().enumerate() {
        let name = &header[j];
        let values: Vec<&str> = raw[k].iter().map(String::as_str).collect();
        let ty = hints.columns.get(name).copied().unwrap_or_else(|| infer_type(&values));
        let column = match ty {
            ColumnType::Numeric => Column::Numeric(
                values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| CmpError::Coercion {
                            row: row_numbers[i],
                            column: name.clone(),
                            message: format!("`{v}` is not a number"),
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            ColumnType::Date => Column::Date(
                values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        parse_date(v).ok_or_else(|| CmpError::Coercion {
                            row: row_numbers[i],
                            column: name.clone(),
                            message: format!("`{v}` is not a date (expected YYYY-MM-DD)"),
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            ColumnType::Categorical => {
                let mut levels: Vec<String> = Vec::new();
                let codes = values
                    .iter()
                    .map(|v| match levels.iter().position(|l| l == v) {
                        Some(c) => c,
                        None => {
                            levels.push(v.to_string());
                            levels.len() - 1
                        }
                    })
                    .collect();
                Column::Categorical { levels, codes }
            }
        };
        names.push(name.clone());
        columns.push(column);
    }
    if !names.iter().any(|n| n == DAY_COLUMN) {
        if let Some(Column::Date(d)) = columns.iter().find(|c| matches!(c, Column::Date(_))) {
            let day = Column::Numeric(d.iter().map(|x| x.day() as f64).collect());
            names.push(DAY_COLUMN.to_string());
            columns.push(day);
        }
    }
    if dropped > 0 {
        log::info!("{}: dropped {dropped} of {file_rows} rows with missing values", path.display());
    }
    Ok(Dataset {
        names,
        columns,
        report: LoadReport {
            file_rows,
            dropped_missing: dropped,
            dropped_filtered: 0,
        },
    })
}

impl Dataset {
    pub fn from_columns(columns: Vec<(String, Column)>) -> Result<Self> {
        let n = columns.first().map_or(0, |(_, c)| c.len());
        if let Some((name, c)) = columns.iter().find(|(_, c)| c.len() != n) {
            return Err(CmpError::LengthMismatch(format!("column `{name}` has {} rows, expected {n}", c.len())));
        }
        let (names, columns) = columns.into_iter().unzip();
        Ok(Self {
            names,
            columns,
            report: LoadReport {
                file_rows: n,
                dropped_missing: 0,
                dropped_filtered: 0,
            },
        })
    }

    pub fn row_count(&self) -> usize {
        self.columns.first().map_or(0, Column::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn report(&self) -> LoadReport {
        self.report
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.names.iter().position(|n| n == name).map(|j| &self.columns[j])
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name) {
            Some(Column::Numeric(v)) => Ok(v),
            Some(other) => Err(CmpError::InvalidSpec(format!(
                "column `{name}` is {:?}, a numeric column is needed",
                other.column_type()
            ))),
            None => Err(CmpError::UnknownTerm(name.to_string())),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut report = self.report;
        report.dropped_filtered += self.row_count() - rows.len();
        Self {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.select_rows(rows)).collect(),
            report,
        }
    }

    /// Keeps the rows whose first date column falls in `year`-`month`.
    pub fn filter_month(&self, year: i32, month: u32) -> Result<Self> {
        let dates = self
            .columns
            .iter()
            .find_map(|c| match c {
                Column::Date(d) => Some(d),
                _ => None,
            })
            .ok_or_else(|| CmpError::Data("month filter needs a date column".into()))?;
        let rows: Vec<usize> = (0..dates.len())
            .filter(|&i| dates[i].year() == year && dates[i].month() == month)
            .collect();
        if rows.is_empty() {
            return Err(CmpError::Data(format!("no rows in {year}-{month:02}")));
        }
        Ok(self.select_rows(&rows))
    }
}

/// Parses `YYYY-MM` into (year, month).
pub fn parse_month(text: &str) -> Result<(i32, u32)> {
    let bad = || CmpError::InvalidParams(format!("month `{text}` is not in YYYY-MM form"));
    let (y, m) = text.trim().split_once('-').ok_or_else(bad)?;
    let year: i32 = y.parse().map_err(|_| bad())?;
    let month: u32 = m.parse().map_err(|_| bad())?;
    if !(1..=12).contains(&month) {
        return Err(bad());
    }
    Ok((year, month))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    Linear { variable: String },
    Smooth { variable: String, df: f64 },
}

impl Term {
    pub fn variable(&self) -> &str {
        match self {
            Self::Linear { variable } | Self::Smooth { variable, .. } => variable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFormula {
    pub response: String,
    pub lambda_terms: Vec<Term>,
    /// Empty means an intercept-only `ν` model.
    pub nu_terms: Vec<String>,
}

impl ModelFormula {
    pub fn has_smooths(&self) -> bool {
        self.lambda_terms.iter().any(|t| matches!(t, Term::Smooth { .. }))
    }

    /// Every column the formula reads.
    pub fn variables(&self) -> Vec<String> {
        let mut v = vec![self.response.clone()];
        for name in self.lambda_terms.iter().map(Term::variable).chain(self.nu_terms.iter().map(String::as_str)) {
            if !v.iter().any(|x| x == name) {
                v.push(name.to_string());
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Sym(char),
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Number(x) => write!(f, "`{x}`"),
            Tok::Sym(c) => write!(f, "`{c}`"),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = text.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() || c == '_' || c == '.' && !chars.get(i + 1).is_some_and(char::is_ascii_digit) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                i += 1;
            }
            toks.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len()
                && (chars[i].is_ascii_digit()
                    || chars[i] == '.'
                    || matches!(chars[i], 'e' | 'E')
                    || (matches!(chars[i], '+' | '-') && matches!(chars[i - 1], 'e' | 'E')))
            {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            let x = s.parse().map_err(|_| CmpError::Parse {
                position: toks.len() + 1,
                message: format!("malformed number `{s}`"),
            })?;
            toks.push(Tok::Number(x));
        } else if "~+(),=|:".contains(c) {
            toks.push(Tok::Sym(c));
            i += 1;
        } else {
            return Err(CmpError::Parse {
                position: toks.len() + 1,
                message: format!("unexpected character `{c}`"),
            });
        }
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
    default_df: f64,
}

impl Parser {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(CmpError::Parse {
            position: self.pos + 1,
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn found(&self) -> String {
        self.peek().map_or("end of formula".to_string(), |t| t.to_string())
    }

    fn ident(&mut self, what: &str) -> Result<String> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.err(format!("expected {what}, found {}", self.found())),
        }
    }

    fn sym(&mut self, c: char) -> Result<()> {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected `{c}`, found {}", self.found()))
        }
    }

    fn term(&mut self) -> Result<Term> {
        let is_smooth = matches!(self.peek(), Some(Tok::Ident(s)) if s == "s")
            && self.toks.get(self.pos + 1) == Some(&Tok::Sym('('));
        if !is_smooth {
            return Ok(Term::Linear {
                variable: self.ident("a variable name")?,
            });
        }
        self.pos += 2;
        let variable = self.ident("a variable name")?;
        let mut df = self.default_df;
        if self.peek() == Some(&Tok::Sym(',')) {
            self.pos += 1;
            match self.peek() {
                Some(Tok::Ident(s)) if s == "df" => self.pos += 1,
                _ => return self.err(format!("expected `df`, found {}", self.found())),
            }
            self.sym('=')?;
            df = match self.peek() {
                Some(Tok::Number(x)) if *x > 0.0 => *x,
                _ => return self.err(format!("expected a positive df, found {}", self.found())),
            };
            self.pos += 1;
        }
        self.sym(')')?;
        Ok(Term::Smooth { variable, df })
    }
}

/// Parses `y ~ a + s(b, df=6) | nu: c`. Error positions count tokens from 1.
pub fn parse_formula(text: &str) -> Result<ModelFormula> {
    parse_formula_with_default_df(text, DEFAULT_DF)
}

/// As [`parse_formula`], with `default_df` for smooths that give no df.
pub fn parse_formula_with_default_df(text: &str, default_df: f64) -> Result<ModelFormula> {
    if !(default_df.is_finite() && default_df > 0.0) {
        return Err(CmpError::InvalidParams(format!("default df must be positive, got {default_df}")));
    }
    let toks = tokenize(text)?;
    if toks.is_empty() {
        return Err(CmpError::Parse {
            position: 1,
            message: "empty formula".into(),
        });
    }
    let mut p = Parser { toks, pos: 0, default_df };
    let response = p.ident("the response name")?;
    p.sym('~')?;
    let mut lambda_terms = vec![p.term()?];
    while p.peek() == Some(&Tok::Sym('+')) {
        p.pos += 1;
        lambda_terms.push(p.term()?);
    }
    let mut nu_terms = Vec::new();
    if p.peek() == Some(&Tok::Sym('|')) {
        p.pos += 1;
        match p.peek() {
            Some(Tok::Ident(s)) if s == "nu" => p.pos += 1,
            _ => return p.err(format!("expected `nu`, found {}", p.found())),
        }
        p.sym(':')?;
        nu_terms.push(p.ident("a variable name")?);
        while p.peek() == Some(&Tok::Sym('+')) {
            p.pos += 1;
            nu_terms.push(p.ident("a variable name")?);
        }
    }
    if p.pos < p.toks.len() {
        return p.err(format!("unexpected {}", p.found()));
    }
    let mut seen: Vec<&str> = Vec::new();
    for (i, t) in lambda_terms.iter().enumerate() {
        if seen.contains(&t.variable()) {
            return Err(CmpError::InvalidSpec(format!("`{}` appears twice in the λ model", t.variable())));
        }
        seen.push(lambda_terms[i].variable());
    }
    Ok(ModelFormula {
        response,
        lambda_terms,
        nu_terms,
    })
}

/// Indicator columns of one categorical variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorEncoding {
    pub variable: String,
    pub reference: String,
    /// Non-reference levels, one per design column.
    pub levels: Vec<String>,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EncodingReport {
    pub factors: Vec<FactorEncoding>,
}

impl EncodingReport {
    /// Level labels of `variable` recovered from the indicator columns of `design`.
    pub fn decode(&self, variable: &str, design: &DesignMatrix) -> Result<Vec<String>> {
        let f = self
            .factors
            .iter()
            .find(|f| f.variable == variable)
            .ok_or_else(|| CmpError::UnknownTerm(variable.to_string()))?;
        let idx: Vec<usize> = f
            .columns
            .iter()
            .map(|c| {
                design
                    .column_names()
                    .iter()
                    .position(|n| n == c)
                    .ok_or_else(|| CmpError::UnknownTerm(c.clone()))
            })
            .collect::<Result<_>>()?;
        let m = design.matrix();
        Ok((0..m.nrows())
            .map(|i| {
                idx.iter()
                    .position(|&j| m[(i, j)] == 1.0)
                    .map_or_else(|| f.reference.clone(), |k| f.levels[k].clone())
            })
            .collect())
    }
}

/// Design pieces for either a regression or an additive fit.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub y: Vec<u64>,
    pub x: DesignMatrix,
    pub z: DesignMatrix,
    pub smooth_columns: Vec<(String, Vec<f64>)>,
    pub spec: GamSpec,
    pub encoding: EncodingReport,
}

impl ModelInputs {
    pub fn is_additive(&self) -> bool {
        !self.spec.smooths.is_empty()
    }

    pub fn model_data(&self) -> Result<ModelData> {
        ModelData::new(self.y.clone(), self.x.clone(), self.z.clone())
    }

    pub fn gam_data(&self) -> Result<GamData> {
        GamData::new(self.y.clone(), self.x.clone(), self.smooth_columns.clone(), self.z.clone())
    }
}

fn push_linear(
    ds: &Dataset,
    name: &str,
    cols: &mut Vec<(String, Vec<f64>)>,
    encoding: &mut EncodingReport,
) -> Result<()> {
    match ds.column(name) {
        Some(Column::Numeric(v)) => cols.push((name.to_string(), v.clone())),
        Some(Column::Categorical { levels, codes }) => {
            if levels.len() < 2 {
                log::warn!("`{name}` has a single level and contributes no columns");
            }
            let mut f = FactorEncoding {
                variable: name.to_string(),
                reference: levels[0].clone(),
                levels: vec![],
                columns: vec![],
            };
            for (k, level) in levels.iter().enumerate().skip(1) {
                let col = format!("{name}[{level}]");
                cols.push((col.clone(), codes.iter().map(|&c| f64::from(u8::from(c == k))).collect()));
                f.levels.push(level.clone());
                f.columns.push(col);
            }
            encoding.factors.push(f);
        }
        Some(Column::Date(_)) => {
            return Err(CmpError::InvalidSpec(format!(
                "date column `{name}` cannot enter linearly; use `{DAY_COLUMN}`"
            )))
        }
        None => return Err(CmpError::UnknownTerm(name.to_string())),
    }
    Ok(())
}

/// Builds `y`, `X` (intercept first, then terms in formula order), `Z` and
/// the smooth covariates.
pub fn build_model_inputs(ds: &Dataset, f: &ModelFormula) -> Result<ModelInputs> {
    let n = ds.row_count();
    if n == 0 {
        return Err(CmpError::Data("no rows left after filtering".into()));
    }
    let response = ds.numeric(&f.response)?;
    let y = response
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as u64)
            } else {
                Err(CmpError::Coercion {
                    row: i + 1,
                    column: f.response.clone(),
                    message: format!("response must be a nonnegative integer, got {v}"),
                })
            }
        })
        .collect::<Result<Vec<u64>>>()?;
    let mut encoding = EncodingReport::default();
    let mut xcols = Vec::new();
    let mut smooth_columns = Vec::new();
    let mut spec = GamSpec::default();
    for t in &f.lambda_terms {
        match t {
            Term::Linear { variable } => {
                push_linear(ds, variable, &mut xcols, &mut encoding)?;
                spec.parametric.push(variable.clone());
            }
            Term::Smooth { variable, df } => {
                smooth_columns.push((variable.clone(), ds.numeric(variable)?.to_vec()));
                spec.smooths.push(SmoothSpec::new(variable.clone(), *df));
            }
        }
    }
    let mut zcols = Vec::new();
    for v in &f.nu_terms {
        push_linear(ds, v, &mut zcols, &mut encoding)?;
        spec.nu_terms.push(v.clone());
    }
    spec.validate()?;
    Ok(ModelInputs {
        y,
        x: DesignMatrix::from_columns(n, true, &xcols)?,
        z: DesignMatrix::from_columns(n, true, &zcols)?,
        smooth_columns,
        spec,
        encoding,
    })
}
