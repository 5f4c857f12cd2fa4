//! Experiment orchestration: load → merge → log2 → quantile-normalize →
//! label per horizon → project per dimension → search per model →
//! cross-validate the best trial → report.

pub mod search;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{self, ClinicalRecord, CnaMatrix, ExpressionMatrix, FeatureMatrix, Orientation, Scale};
use crate::error::{Error, Result};
use crate::eval::{cross_validate_with, CvPlan, EvalReport, FoldTransform};
use crate::normalize;
use crate::project::{self, TsneConfig};
use crate::rng::derive_seed;
use crate::survival::{self, LabeledDataset};
use crate::synth::{self, SynthConfig};

pub use search::{random_search, ModelTemplate, ParamDist, SearchResult, TrialRecord};

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "OMICSURV_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Expression CSVs; each file stem is its platform id.
    #[serde(default)]
    pub sources: Vec<PathBuf>,
    /// Generate a two-platform synthetic cohort instead of reading files.
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub orientation: Orientation,
    #[serde(default)]
    pub clinical: Option<PathBuf>,
    #[serde(default)]
    pub cna: Option<PathBuf>,
    /// Platform id of the quantile-normalization reference; the first source by default.
    #[serde(default)]
    pub reference: Option<String>,
    #[serde(default = "yes")]
    pub log2: bool,
    /// 0 means raw features; any other value is a t-SNE dimension.
    #[serde(default = "raw_only")]
    pub projection_dims: Vec<usize>,
    #[serde(default = "yes")]
    pub include_age: bool,
    #[serde(default)]
    pub include_cna: bool,
    /// Refit t-SNE inside each fold on that fold's labeled patients.
    #[serde(default)]
    pub project_in_fold: bool,
    #[serde(default)]
    pub tsne: TsneConfig,
    /// Leading word of the data descriptor, e.g. "RNA".
    #[serde(default = "default_name")]
    pub name: String,
}

fn yes() -> bool {
    true
}

fn raw_only() -> Vec<usize> {
    vec![0]
}

fn default_name() -> String {
    "RNA".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelConfig {
    pub horizons: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "one")]
    pub budget: usize,
}

fn one() -> usize {
    1
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { budget: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub labels: LabelConfig,
    pub models: Vec<ModelTemplate>,
    #[serde(default)]
    pub cv: CvPlan,
    #[serde(default)]
    pub search: SearchConfig,
    pub output: OutputConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse `text` after applying `dotted.key=value` overrides, where each
    /// value is a TOML literal (bare words are taken as strings).
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = parse_toml_value(raw.trim());
            set_dotted(&mut doc, key.trim(), value)?;
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_toml(&text)?, text))
    }

    /// Everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.sources.is_empty() && d.synth.is_none() {
            return Err(Error::Config("data needs `sources` or `synth`".into()));
        }
        if !d.sources.is_empty() && d.synth.is_some() {
            return Err(Error::Config("data takes either `sources` or `synth`, not both".into()));
        }
        if !d.sources.is_empty() && d.clinical.is_none() {
            return Err(Error::Config("data.clinical is required with file sources".into()));
        }
        if let Some(s) = &d.synth {
            s.validate()?;
            if d.include_cna {
                return Err(Error::Config("the synthetic cohort has no copy-number data".into()));
            }
        }
        if d.include_cna && d.cna.is_none() {
            return Err(Error::Config("include_cna needs data.cna".into()));
        }
        if d.projection_dims.is_empty() {
            return Err(Error::Config(
                "projection_dims must not be empty (use [0] for raw)".into(),
            ));
        }
        let t = &d.tsne;
        if t.iterations == 0
            || !(t.perplexity > 0.0)
            || !(t.learning_rate > 0.0)
            || !(t.early_exaggeration_factor >= 1.0)
        {
            return Err(Error::Config("invalid data.tsne settings".into()));
        }
        if self.labels.horizons.is_empty() {
            return Err(Error::Config("labels.horizons must not be empty".into()));
        }
        if let Some(h) = self.labels.horizons.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
            return Err(Error::Config(format!(
                "horizon {h} must be a positive number of months"
            )));
        }
        if self.models.is_empty() {
            return Err(Error::Config("at least one [[models]] entry is required".into()));
        }
        for m in &self.models {
            m.validate()?;
        }
        if self.cv.k_folds < 2 {
            return Err(Error::Config("cv.k_folds must be >= 2".into()));
        }
        if self.search.budget == 0 {
            return Err(Error::Config("search.budget must be >= 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }
}

fn parse_toml_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

fn set_dotted(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

/// Worker count: explicit value, then the environment variable, then the config, then 1.
pub fn resolve_workers(flag: Option<usize>, config: Option<usize>) -> Result<usize> {
    if let Some(w) = flag {
        return if w == 0 {
            Err(Error::Config("workers must be >= 1".into()))
        } else {
            Ok(w)
        };
    }
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        return match v.trim().parse::<usize>() {
            Ok(w) if w >= 1 => Ok(w),
            _ => Err(Error::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        };
    }
    Ok(config.unwrap_or(1))
}

/// "RNA TSNE 15 age (t=60)" style label.
pub fn data_descriptor(name: &str, include_cna: bool, dims: usize, include_age: bool, horizon: f64) -> String {
    let mut s = name.to_owned();
    if include_cna {
        s.push_str("+CNA");
    }
    if dims == 0 {
        s.push_str(" raw");
    } else {
        s.push_str(&format!(" TSNE {dims}"));
    }
    if include_age {
        s.push_str(" age");
    }
    s.push_str(&format!(" (t={horizon})"));
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchLog {
    pub model: String,
    pub data: String,
    pub result: SearchResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub config_sha256: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
}

pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub searches: Vec<SearchLog>,
    pub report_path: PathBuf,
}

struct Prepared {
    clinical: Vec<ClinicalRecord>,
    /// Expression (plus CNA) features without age.
    base: FeatureMatrix,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn load_inputs(
    cfg: &DataConfig,
    out_dir: &Path,
) -> Result<(Vec<ExpressionMatrix>, Vec<ClinicalRecord>, Option<CnaMatrix>)> {
    if let Some(s) = &cfg.synth {
        let (a, b, draw) = synth::gen_two_platform(s)?;
        // keep the generated inputs next to the report
        let data_dir = out_dir.join("data");
        std::fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
        dataio::write_expression(&a, data_dir.join("microarray.csv"))?;
        dataio::write_expression(&b, data_dir.join("rnaseq.csv"))?;
        dataio::write_clinical(&draw.records, data_dir.join("clinical.csv"))?;
        return Ok((vec![a, b], draw.records, None));
    }
    let sources = cfg
        .sources
        .iter()
        .map(|p| dataio::load_expression(p, cfg.orientation))
        .collect::<Result<Vec<_>>>()?;
    let clinical = dataio::load_clinical(cfg.clinical.as_ref().expect("validated"))?;
    let cna = cfg.cna.as_ref().map(dataio::load_cna).transpose()?;
    Ok((sources, clinical, cna))
}

fn integrate_sources(cfg: &DataConfig, mut sources: Vec<ExpressionMatrix>) -> Result<ExpressionMatrix> {
    if cfg.log2 {
        sources = sources
            .into_iter()
            .map(|s| {
                if s.scale() == Scale::Linear {
                    normalize::log2_transform(&s)
                } else {
                    Ok(s)
                }
            })
            .collect::<Result<_>>()?;
    }
    if sources.len() == 1 {
        return Ok(sources.pop().expect("one source"));
    }
    let reference = match &cfg.reference {
        None => 0,
        Some(id) => sources
            .iter()
            .position(|s| s.platform_id() == id)
            .ok_or_else(|| Error::Config(format!("reference platform {id:?} is not among the sources")))?,
    };
    normalize::integrate(&sources, reference)
}

fn prepare(config: &ExperimentConfig, out_dir: &Path) -> Result<Prepared> {
    let (sources, clinical, cna) = stage("load", load_inputs(&config.data, out_dir))?;
    let expr = stage("normalize", integrate_sources(&config.data, sources))?;
    let cna = if config.data.include_cna { cna.as_ref() } else { None };
    let base = stage("features", dataio::build_features(&expr, &clinical, false, cna))?;
    Ok(Prepared { clinical, base })
}

fn tsne_config(config: &ExperimentConfig, dims: usize, salt: u64) -> TsneConfig {
    TsneConfig {
        output_dims: dims,
        seed: derive_seed(config.seed, &[0x5453_4e45, dims as u64, salt]),
        ..config.data.tsne
    }
}

fn with_age(f: &FeatureMatrix, clinical: &[ClinicalRecord], include: bool) -> Result<FeatureMatrix> {
    if include {
        project::append_age(f, &project::ages_for(f.patient_ids(), clinical)?)
    } else {
        Ok(f.clone())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

/// Run the whole experiment on a pool of `workers` threads and write
/// `report.csv`, `trials.json`, `config.toml` and `MANIFEST.json` to the
/// output directory. On failure the partial report and a MANIFEST marked
/// incomplete are still written.
pub fn run_experiment(config: &ExperimentConfig, config_text: &str, workers: usize) -> Result<ExperimentOutcome> {
    config.validate()?;
    if workers == 0 {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    let out = &config.output.dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join("config.toml"), config_text).map_err(|e| Error::io(out.join("config.toml"), e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;

    let mut report = EvalReport::default();
    let mut searches = Vec::new();
    let result = pool.install(|| execute(config, out, &mut report, &mut searches));

    let report_path = out.join("report.csv");
    report.write_csv(&report_path)?;
    write_json(&searches, &out.join("trials.json"))?;
    let (status, failed_stage, error) = match &result {
        Ok(()) => ("complete", None, None),
        Err(e) => {
            let stage = match e {
                Error::Stage { stage, .. } => Some(stage.clone()),
                _ => None,
            };
            ("incomplete", stage, Some(e.to_string()))
        }
    };
    let mut artifacts = vec!["config.toml".into(), "report.csv".into(), "trials.json".into()];
    if config.data.synth.is_some() && out.join("data").exists() {
        artifacts.push("data/".into());
    }
    let manifest = Manifest {
        format: "omicsurv-experiment/1".into(),
        status: status.into(),
        failed_stage,
        error,
        config_sha256: sha256_hex(config_text.as_bytes()),
        seed: config.seed,
        artifacts,
    };
    write_json(&manifest, &out.join("MANIFEST.json"))?;
    result?;
    Ok(ExperimentOutcome {
        report,
        searches,
        report_path,
    })
}

fn execute(
    config: &ExperimentConfig,
    out: &Path,
    report: &mut EvalReport,
    searches: &mut Vec<SearchLog>,
) -> Result<()> {
    let prepared = prepare(config, out)?;
    let d = &config.data;

    // transductive projections, fit once on every patient
    let mut feature_sets: BTreeMap<usize, FeatureMatrix> = BTreeMap::new();
    for &dims in &d.projection_dims {
        if feature_sets.contains_key(&dims) {
            continue;
        }
        let f = if dims == 0 || d.project_in_fold {
            prepared.base.clone()
        } else {
            let emb = stage(
                &format!("project (d={dims})"),
                project::tsne(&prepared.base, &tsne_config(config, dims, 0)),
            )?;
            emb.to_features()
        };
        let f = if dims != 0 && d.project_in_fold {
            f
        } else {
            stage("features", with_age(&f, &prepared.clinical, d.include_age))?
        };
        feature_sets.insert(dims, f);
    }

    for &horizon in &config.labels.horizons {
        for &dims in &d.projection_dims {
            let desc = data_descriptor(&d.name, d.include_cna, dims, d.include_age, horizon);
            let (data, _) = stage(
                &format!("label {desc}"),
                survival::make_labeled_dataset(&feature_sets[&dims], &prepared.clinical, horizon),
            )?;
            let in_fold = dims != 0 && d.project_in_fold;
            for (mi, template) in config.models.iter().enumerate() {
                let seed = derive_seed(config.seed, &[mi as u64]);
                let stage_name = format!("model {} on {desc}", template.family);
                let (result, rows) = stage(
                    &stage_name,
                    evaluate_template(config, template, &data, dims, in_fold, &prepared.clinical, seed, &desc),
                )?;
                report.extend(rows);
                searches.push(SearchLog {
                    model: template.family.clone(),
                    data: desc.clone(),
                    result,
                });
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_template(
    config: &ExperimentConfig,
    template: &ModelTemplate,
    data: &LabeledDataset,
    dims: usize,
    in_fold: bool,
    clinical: &[ClinicalRecord],
    seed: u64,
    desc: &str,
) -> Result<(SearchResult, EvalReport)> {
    let include_age = config.data.include_age;
    let refit =
        |fold: usize, train: &LabeledDataset, test: &LabeledDataset| -> Result<(LabeledDataset, LabeledDataset)> {
            // embed this fold's labeled patients together; t-SNE has no out-of-sample map
            let rows: Vec<usize> = (0..train.n_rows() + test.n_rows()).collect();
            let joined = concat_rows(&train.features, &test.features)?;
            let emb = project::tsne(&joined, &tsne_config(config, dims, 1 + fold as u64))?.to_features();
            let emb = with_age(&emb, clinical, include_age)?;
            let (tr, te) = rows.split_at(train.n_rows());
            Ok((
                LabeledDataset {
                    features: emb.select_rows(tr),
                    ..train.clone()
                },
                LabeledDataset {
                    features: emb.select_rows(te),
                    ..test.clone()
                },
            ))
        };
    let transform: Option<&FoldTransform<'_>> = if in_fold { Some(&refit) } else { None };

    let search_plan = CvPlan {
        seed: derive_seed(config.cv.seed, &[0x5345_4152_4348]),
        ..config.cv
    };
    let result = if in_fold {
        search_with_transform(template, data, config.search.budget, &search_plan, seed, transform)?
    } else {
        random_search(template, data, config.search.budget, &search_plan, seed)?
    };
    let best = result.best_trial();
    let estimator = template.instantiate(&best.hyperparameters, search::template_seed(template, seed))?;
    let rows = cross_validate_with(&estimator, data, &config.cv, desc, transform)?;
    Ok((result, rows))
}

/// Sequential search used when every fold refits its own projection.
fn search_with_transform(
    template: &ModelTemplate,
    data: &LabeledDataset,
    budget: usize,
    plan: &CvPlan,
    seed: u64,
    transform: Option<&FoldTransform<'_>>,
) -> Result<SearchResult> {
    template.validate()?;
    let model_seed = search::template_seed(template, seed);
    let mut trials = Vec::with_capacity(budget);
    for t in 0..budget {
        let start = std::time::Instant::now();
        let point = search::trial_point(template, seed, t);
        let outcome = template
            .instantiate(&point, model_seed)
            .and_then(|est| cross_validate_with(&est, data, plan, "", transform));
        let (fold_aucs, mean_auc, error) = match outcome {
            Ok(r) => {
                let aucs: Vec<f64> = r.rows.iter().map(|r| r.auc).collect();
                let m = crate::stats::mean(&aucs);
                (aucs, Some(m), None)
            }
            Err(e) => (Vec::new(), None, Some(e.to_string())),
        };
        trials.push(TrialRecord {
            trial: t,
            hyperparameters: point,
            fold_aucs,
            mean_auc,
            error,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    let best = trials
        .iter()
        .filter_map(|t| t.mean_auc.map(|m| (t.trial, m)))
        .fold(None, |acc: Option<(usize, f64)>, (i, m)| match acc {
            Some((_, bm)) if bm >= m => acc,
            _ => Some((i, m)),
        })
        .ok_or_else(|| Error::Numerical(format!("all {budget} trials failed")))?
        .0;
    Ok(SearchResult { best, trials })
}

fn concat_rows(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<FeatureMatrix> {
    let values = ndarray::concatenate(ndarray::Axis(0), &[a.values().view(), b.values().view()])
        .map_err(|e| Error::Data(format!("cannot stack fold features: {e}")))?;
    let ids = a.patient_ids().iter().chain(b.patient_ids()).cloned().collect();
    FeatureMatrix::new(ids, a.feature_names().to_vec(), values)
}
