//! Loading, validating and merging expression, copy-number and clinical tables.
//!
//! All matrix files share one layout: a header whose first cell names the row
//! id column (`patient_id`) followed by column ids, then one row per patient.
//! Files with genes as rows can be read with [`Orientation::GenesAsRows`] and
//! are transposed on load.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    Log2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    #[default]
    PatientsAsRows,
    GenesAsRows,
}

/// Patients × genes expression values from a single platform (or a merge).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    platform_id: String,
    patient_ids: Vec<String>,
    gene_ids: Vec<String>,
    values: Array2<f64>,
    scale: Scale,
}

impl ExpressionMatrix {
    pub fn new(
        platform_id: impl Into<String>,
        patient_ids: Vec<String>,
        gene_ids: Vec<String>,
        values: Array2<f64>,
        scale: Scale,
    ) -> Result<Self> {
        check_shape(&patient_ids, &gene_ids, &values)?;
        check_unique("patient", &patient_ids)?;
        check_unique("gene", &gene_ids)?;
        for ((r, c), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite value {v} for patient {:?}, gene {:?}",
                    patient_ids[r], gene_ids[c]
                )));
            }
            if scale == Scale::Linear && *v < 0.0 {
                return Err(Error::Data(format!(
                    "negative value {v} on a linear-scale matrix (patient {:?}, gene {:?})",
                    patient_ids[r], gene_ids[c]
                )));
            }
        }
        Ok(Self {
            platform_id: platform_id.into(),
            patient_ids,
            gene_ids,
            values,
            scale,
        })
    }

    pub fn platform_id(&self) -> &str {
        &self.platform_id
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn n_patients(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    /// Restrict to `genes` (in the given order). Every id must be present.
    pub fn select_genes(&self, genes: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = self.gene_ids.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
        let cols = genes
            .iter()
            .map(|g| {
                index
                    .get(g.as_str())
                    .copied()
                    .ok_or_else(|| Error::Data(format!("gene {g:?} missing from {}", self.platform_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let values = self.values.select(ndarray::Axis(1), &cols);
        Self::new(
            self.platform_id.clone(),
            self.patient_ids.clone(),
            genes.to_vec(),
            values,
            self.scale,
        )
    }

    pub(crate) fn with_values(&self, values: Array2<f64>, scale: Scale) -> Result<Self> {
        Self::new(
            self.platform_id.clone(),
            self.patient_ids.clone(),
            self.gene_ids.clone(),
            values,
            scale,
        )
    }

    pub fn with_platform_id(mut self, platform_id: impl Into<String>) -> Self {
        self.platform_id = platform_id.into();
        self
    }
}

/// GISTIC-style copy-number calls, one of -2..=2 per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CnaMatrix {
    patient_ids: Vec<String>,
    gene_ids: Vec<String>,
    values: Array2<i8>,
}

impl CnaMatrix {
    pub fn new(patient_ids: Vec<String>, gene_ids: Vec<String>, values: Array2<i8>) -> Result<Self> {
        check_shape(&patient_ids, &gene_ids, &values)?;
        check_unique("patient", &patient_ids)?;
        check_unique("gene", &gene_ids)?;
        if let Some(((r, c), v)) = values.indexed_iter().find(|(_, v)| !(-2..=2).contains(*v)) {
            return Err(Error::CnaCategory {
                row: r + 2,
                col: c + 2,
                value: v.to_string(),
            });
        }
        Ok(Self {
            patient_ids,
            gene_ids,
            values,
        })
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn values(&self) -> &Array2<i8> {
        &self.values
    }
}

/// One patient's follow-up: observed time `min(death, loss)` and whether death was observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub patient_id: String,
    pub observed_time_months: f64,
    pub event: bool,
    pub age_years: Option<f64>,
    pub group_label: Option<String>,
}

impl ClinicalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.patient_id.is_empty() {
            return Err(Error::Data("clinical record with empty patient_id".into()));
        }
        if !(self.observed_time_months >= 0.0) || !self.observed_time_months.is_finite() {
            return Err(Error::Data(format!(
                "patient {:?}: observed time must be a finite value >= 0, got {}",
                self.patient_id, self.observed_time_months
            )));
        }
        if let Some(age) = self.age_years {
            if !(age >= 0.0) || !age.is_finite() {
                return Err(Error::Data(format!(
                    "patient {:?}: age must be >= 0, got {age}",
                    self.patient_id
                )));
            }
        }
        Ok(())
    }
}

/// Model input rows `X_i`: named real-valued features per patient.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    patient_ids: Vec<String>,
    feature_names: Vec<String>,
    values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(patient_ids: Vec<String>, feature_names: Vec<String>, values: Array2<f64>) -> Result<Self> {
        check_shape(&patient_ids, &feature_names, &values)?;
        check_unique("patient", &patient_ids)?;
        check_unique("feature", &feature_names)?;
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Data("feature matrix contains NaN".into()));
        }
        Ok(Self {
            patient_ids,
            feature_names,
            values,
        })
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn n_rows(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Keep the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            patient_ids: rows.iter().map(|&r| self.patient_ids[r].clone()).collect(),
            feature_names: self.feature_names.clone(),
            values: self.values.select(ndarray::Axis(0), rows),
        }
    }
}

impl From<&ExpressionMatrix> for FeatureMatrix {
    fn from(m: &ExpressionMatrix) -> Self {
        Self {
            patient_ids: m.patient_ids.clone(),
            feature_names: m.gene_ids.clone(),
            values: m.values.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceCount {
    pub platform_id: String,
    pub patients: usize,
    pub genes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub sources: Vec<SourceCount>,
    pub union_patients: usize,
    pub intersection_genes: usize,
    /// Patients found in more than one source, mapped to the source whose row was kept.
    pub resolutions: BTreeMap<String, String>,
}

fn check_shape<T>(rows: &[String], cols: &[String], values: &Array2<T>) -> Result<()> {
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    if values.nrows() != rows.len() || values.ncols() != cols.len() {
        return Err(Error::Data(format!(
            "matrix is {}x{} but has {} row ids and {} column ids",
            values.nrows(),
            values.ncols(),
            rows.len(),
            cols.len()
        )));
    }
    Ok(())
}

fn check_unique(kind: &'static str, ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId { kind, id: id.clone() });
        }
    }
    Ok(())
}

/// Raw table: row ids, column ids and the unparsed cells.
struct RawTable {
    row_ids: Vec<String>,
    col_ids: Vec<String>,
    cells: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut records = reader.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(Error::EmptyMatrix),
    };
    let width = header.len();
    let col_ids: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut row_ids = Vec::new();
    let mut cells = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() == 1 && rec.get(0).is_some_and(str::is_empty) {
            continue;
        }
        if rec.len() != width {
            return Err(Error::RaggedRow {
                line: i + 2,
                expected: width,
                found: rec.len(),
            });
        }
        row_ids.push(rec[0].to_owned());
        cells.push(rec.iter().skip(1).map(str::to_owned).collect());
    }
    if row_ids.is_empty() || col_ids.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    Ok(RawTable {
        row_ids,
        col_ids,
        cells,
    })
}

fn parse_real_table(table: &RawTable) -> Result<Array2<f64>> {
    let (n, m) = (table.row_ids.len(), table.col_ids.len());
    let mut values = Array2::zeros((n, m));
    for (r, row) in table.cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::NonNumericCell {
                    row: r + 2,
                    col: c + 2,
                    value: cell.clone(),
                })?;
            values[(r, c)] = v;
        }
    }
    Ok(values)
}

fn platform_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "expression".to_owned())
}

/// Load an expression CSV. Cell positions in errors are 1-based file (line, column).
///
/// The scale is inferred: a matrix with any negative value is taken to be
/// log2-scaled, otherwise linear. Use [`load_expression_as`] to pin it.
pub fn load_expression(path: impl AsRef<Path>, orientation: Orientation) -> Result<ExpressionMatrix> {
    load_expression_inner(path.as_ref(), orientation, None)
}

pub fn load_expression_as(path: impl AsRef<Path>, orientation: Orientation, scale: Scale) -> Result<ExpressionMatrix> {
    load_expression_inner(path.as_ref(), orientation, Some(scale))
}

fn load_expression_inner(path: &Path, orientation: Orientation, scale: Option<Scale>) -> Result<ExpressionMatrix> {
    let table = read_table(path)?;
    let values = parse_real_table(&table)?;
    let (patients, genes, values) = match orientation {
        Orientation::PatientsAsRows => (table.row_ids, table.col_ids, values),
        Orientation::GenesAsRows => (
            table.col_ids,
            table.row_ids,
            values.reversed_axes().as_standard_layout().to_owned(),
        ),
    };
    let scale = scale.unwrap_or(if values.iter().any(|v| *v < 0.0) {
        Scale::Log2
    } else {
        Scale::Linear
    });
    ExpressionMatrix::new(platform_from_path(path), patients, genes, values, scale)
}

pub fn load_cna(path: impl AsRef<Path>) -> Result<CnaMatrix> {
    let table = read_table(path.as_ref())?;
    let (n, m) = (table.row_ids.len(), table.col_ids.len());
    let mut values = Array2::zeros((n, m));
    for (r, row) in table.cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let v: i64 = cell.parse().map_err(|_| Error::NonNumericCell {
                row: r + 2,
                col: c + 2,
                value: cell.clone(),
            })?;
            if !(-2..=2).contains(&v) {
                return Err(Error::CnaCategory {
                    row: r + 2,
                    col: c + 2,
                    value: cell.clone(),
                });
            }
            values[(r, c)] = v as i8;
        }
    }
    CnaMatrix::new(table.row_ids, table.col_ids, values)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let table = read_table(path.as_ref())?;
    let values = parse_real_table(&table)?;
    FeatureMatrix::new(table.row_ids, table.col_ids, values)
}

fn write_table<T: std::fmt::Display>(
    path: &Path,
    row_ids: &[String],
    col_ids: &[String],
    values: &Array2<T>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = Vec::with_capacity(col_ids.len() + 1);
    header.push("patient_id".to_owned());
    header.extend(col_ids.iter().cloned());
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(col_ids.len() + 1);
    for (id, vals) in row_ids.iter().zip(values.rows()) {
        row.clear();
        row.push(id.clone());
        row.extend(vals.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Write patients-as-rows. `f64` rendering is shortest round-trip, so a reload is bit-identical.
pub fn write_expression(m: &ExpressionMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_table(path.as_ref(), &m.patient_ids, &m.gene_ids, &m.values)
}

pub fn write_cna(m: &CnaMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_table(path.as_ref(), &m.patient_ids, &m.gene_ids, &m.values)
}

pub fn write_features(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_table(path.as_ref(), &m.patient_ids, &m.feature_names, &m.values)
}

pub fn load_clinical(path: impl AsRef<Path>) -> Result<Vec<ClinicalRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("patient_id").ok_or_else(|| Error::Data("clinical header lacks patient_id".into()))?;
    let time_col = col("time_months").ok_or_else(|| Error::Data("clinical header lacks time_months".into()))?;
    let event_col = col("event").ok_or_else(|| Error::Data("clinical header lacks event".into()))?;
    let age_col = col("age");
    let group_col = col("group");

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |c: Option<usize>| c.and_then(|c| rec.get(c)).unwrap_or("");
        let patient_id = field(Some(id_col)).to_owned();
        if patient_id.is_empty() {
            return Err(Error::Data(format!("line {line}: missing patient_id")));
        }
        let time_raw = field(Some(time_col));
        let observed_time_months: f64 = time_raw
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: time_months {time_raw:?} is not a number")))?;
        if !(observed_time_months >= 0.0) || !observed_time_months.is_finite() {
            return Err(Error::Data(format!(
                "line {line}: time_months must be >= 0, got {time_raw}"
            )));
        }
        let event = match field(Some(event_col)) {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Data(format!("line {line}: event must be 0 or 1, got {other:?}")));
            }
        };
        let age_raw = field(age_col);
        let age_years = if age_raw.is_empty() {
            None
        } else {
            Some(
                age_raw
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("line {line}: age {age_raw:?} is not a number")))?,
            )
        };
        let group_raw = field(group_col);
        let record = ClinicalRecord {
            patient_id,
            observed_time_months,
            event,
            age_years,
            group_label: (!group_raw.is_empty()).then(|| group_raw.to_owned()),
        };
        record.validate()?;
        if !seen.insert(record.patient_id.clone()) {
            return Err(Error::DuplicateId {
                kind: "clinical patient",
                id: record.patient_id,
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_clinical(records: &[ClinicalRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["patient_id", "time_months", "event", "age", "group"])?;
    for r in records {
        w.write_record([
            r.patient_id.clone(),
            r.observed_time_months.to_string(),
            if r.event { "1" } else { "0" }.to_owned(),
            r.age_years.map(|a| a.to_string()).unwrap_or_default(),
            r.group_label.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Union of patients, intersection of genes. A patient found in several
/// sources keeps the row of the earliest source in `sources`.
pub fn merge(sources: &[ExpressionMatrix]) -> Result<(ExpressionMatrix, MergeReport)> {
    if sources.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "merge needs at least two sources, got {}",
            sources.len()
        )));
    }
    let scale = sources[0].scale;
    if let Some(s) = sources.iter().find(|s| s.scale != scale) {
        return Err(Error::Data(format!(
            "scale mismatch: {} is {:?} but {} is {:?}",
            sources[0].platform_id, scale, s.platform_id, s.scale
        )));
    }

    let genes = common_genes(sources)?;
    let gene_cols: Vec<Vec<usize>> = sources
        .iter()
        .map(|s| {
            let index: HashMap<&str, usize> = s.gene_ids.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
            genes.iter().map(|g| index[g.as_str()]).collect()
        })
        .collect();

    // (source, row) for each output patient, in first-seen order.
    let mut owner: HashMap<&str, usize> = HashMap::new();
    let mut rows: Vec<(usize, usize)> = Vec::new();
    let mut resolutions = BTreeMap::new();
    let mut seen_in: HashMap<&str, usize> = HashMap::new();
    for (si, src) in sources.iter().enumerate() {
        for (ri, pid) in src.patient_ids.iter().enumerate() {
            *seen_in.entry(pid.as_str()).or_default() += 1;
            if let std::collections::hash_map::Entry::Vacant(e) = owner.entry(pid.as_str()) {
                e.insert(si);
                rows.push((si, ri));
            }
        }
    }
    for (pid, count) in &seen_in {
        if *count > 1 {
            resolutions.insert((*pid).to_owned(), sources[owner[pid]].platform_id.clone());
        }
    }

    let mut values = Array2::zeros((rows.len(), genes.len()));
    let mut patient_ids = Vec::with_capacity(rows.len());
    for (out_r, &(si, ri)) in rows.iter().enumerate() {
        let src = &sources[si];
        patient_ids.push(src.patient_ids[ri].clone());
        for (out_c, &c) in gene_cols[si].iter().enumerate() {
            values[(out_r, out_c)] = src.values[(ri, c)];
        }
    }

    let platform_id = sources
        .iter()
        .map(|s| s.platform_id.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let report = MergeReport {
        sources: sources
            .iter()
            .map(|s| SourceCount {
                platform_id: s.platform_id.clone(),
                patients: s.n_patients(),
                genes: s.n_genes(),
            })
            .collect(),
        union_patients: patient_ids.len(),
        intersection_genes: genes.len(),
        resolutions,
    };
    let merged = ExpressionMatrix::new(platform_id, patient_ids, genes, values, scale)?;
    Ok((merged, report))
}

/// Genes present in every source, in the first source's column order.
pub fn common_genes(sources: &[ExpressionMatrix]) -> Result<Vec<String>> {
    let first = sources.first().ok_or(Error::EmptyMatrix)?;
    let sets: Vec<HashSet<&str>> = sources[1..]
        .iter()
        .map(|s| s.gene_ids.iter().map(String::as_str).collect())
        .collect();
    let genes: Vec<String> = first
        .gene_ids
        .iter()
        .filter(|g| sets.iter().all(|s| s.contains(g.as_str())))
        .cloned()
        .collect();
    if genes.is_empty() {
        return Err(Error::Data("gene intersection across sources is empty".into()));
    }
    Ok(genes)
}

/// Expression columns, then CNA columns (as `cna_<gene>`), then `age`.
/// Rows follow expression order, restricted to patients present in every input.
pub fn build_features(
    expr: &ExpressionMatrix,
    clinical: &[ClinicalRecord],
    include_age: bool,
    cna: Option<&CnaMatrix>,
) -> Result<FeatureMatrix> {
    let clinical_by_id: HashMap<&str, &ClinicalRecord> = clinical.iter().map(|r| (r.patient_id.as_str(), r)).collect();
    let cna_rows: Option<HashMap<&str, usize>> =
        cna.map(|c| c.patient_ids.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect());

    let mut kept = Vec::new();
    for (r, pid) in expr.patient_ids.iter().enumerate() {
        let Some(rec) = clinical_by_id.get(pid.as_str()) else {
            continue;
        };
        let cna_row = match &cna_rows {
            Some(idx) => match idx.get(pid.as_str()) {
                Some(&i) => Some(i),
                None => continue,
            },
            None => None,
        };
        if include_age && rec.age_years.is_none() {
            return Err(Error::Data(format!("patient {pid:?} has no age but age was requested")));
        }
        kept.push((r, cna_row, rec.age_years));
    }
    if kept.is_empty() {
        return Err(Error::Data(
            "no patient is present in every input (expression, clinical, cna)".into(),
        ));
    }

    let n_cna = cna.map_or(0, |c| c.gene_ids.len());
    let width = expr.n_genes() + n_cna + usize::from(include_age);
    let mut names: Vec<String> = expr.gene_ids.clone();
    if let Some(c) = cna {
        names.extend(c.gene_ids.iter().map(|g| format!("cna_{g}")));
    }
    if include_age {
        names.push("age".to_owned());
    }

    let mut values = Array2::zeros((kept.len(), width));
    let mut ids = Vec::with_capacity(kept.len());
    for (out_r, &(r, cna_row, age)) in kept.iter().enumerate() {
        ids.push(expr.patient_ids[r].clone());
        let mut row = values.row_mut(out_r);
        for (c, v) in expr.values.row(r).iter().enumerate() {
            row[c] = *v;
        }
        if let (Some(c), Some(cr)) = (cna, cna_row) {
            for (j, v) in c.values.row(cr).iter().enumerate() {
                row[expr.n_genes() + j] = f64::from(*v);
            }
        }
        if include_age {
            row[width - 1] = age.unwrap_or_default();
        }
    }
    FeatureMatrix::new(ids, names, values)
}
