use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use omicsurv::dataio::{self, Orientation};
use omicsurv::error::{Error, ErrorKind, Result};
use omicsurv::eval::{self, CvPlan, EvalReport};
use omicsurv::models::{self, Estimator, Fitted, ModelSpec};
use omicsurv::normalize;
use omicsurv::pipeline::{self, ExperimentConfig, ModelTemplate};
use omicsurv::project::{self, TsneConfig};
use omicsurv::rpensemble::{self, RpConfig};
use omicsurv::survival;
use omicsurv::synth::{self, SynthConfig};

#[derive(Parser)]
#[command(
    name = "omicsurv",
    version,
    about = "Survival classification from multi-platform expression data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-platform cohort with clinical follow-up.
    Synth(SynthArgs),
    /// Merge expression files: union of patients, intersection of genes.
    Merge(MergeArgs),
    /// Quantile-normalize a target expression file onto a reference, gene by gene.
    Normalize(NormalizeArgs),
    /// Build horizon labels (patient_id,label,time_months,event) from clinical data.
    Label(LabelArgs),
    /// Project features with t-SNE, optionally appending age.
    Project(ProjectArgs),
    /// Fit one model and save it as JSON.
    Train(TrainArgs),
    /// Fit the random-projection ensemble and write feature importance.
    Rptrain(RpTrainArgs),
    /// Score features with a saved model.
    Predict(PredictArgs),
    /// Cross-validate one model.
    Cv(CvArgs),
    /// Random hyperparameter search for the models of an experiment config.
    Search(SearchArgs),
    /// Summarize a report CSV as mean ± std AUC per model and data set.
    Report(ReportArgs),
    /// Kaplan-Meier curves from clinical data.
    Km(KmArgs),
    /// Run a full experiment from a TOML config.
    Run(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with generator settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    n_patients: Option<usize>,
    #[arg(long)]
    n_genes: Option<usize>,
    #[arg(long)]
    informative: Option<usize>,
    #[arg(long)]
    signal: Option<f64>,
    #[arg(long)]
    censoring: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Give each platform half of the patients instead of all of them.
    #[arg(long)]
    split: bool,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long = "input", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Write the merge summary as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OrientationArg::PatientsAsRows)]
    orientation: OrientationArg,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum OrientationArg {
    PatientsAsRows,
    GenesAsRows,
}

impl From<OrientationArg> for Orientation {
    fn from(o: OrientationArg) -> Self {
        match o {
            OrientationArg::PatientsAsRows => Orientation::PatientsAsRows,
            OrientationArg::GenesAsRows => Orientation::GenesAsRows,
        }
    }
}

#[derive(Args)]
struct NormalizeArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// log2(x+1) any linear-scale input first.
    #[arg(long)]
    log2: bool,
    /// Also write the reference stacked with the normalized target; reference rows win on duplicates.
    #[arg(long)]
    merged_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OrientationArg::PatientsAsRows)]
    orientation: OrientationArg,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    clinical: PathBuf,
    /// Horizon t in months.
    #[arg(long)]
    horizon: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 2)]
    dims: usize,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 200.0)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append the clinical age column after projecting.
    #[arg(long, requires = "clinical")]
    append_age: bool,
    #[arg(long)]
    clinical: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Write iteration,kl for the recorded iterations.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// gaussian_nb, svm_rbf, l1_logistic, random_forest, rectangle_mlp, mlp_regressor or rp_ensemble.
    #[arg(long)]
    family: String,
    /// Hyperparameter as name=value; repeatable.
    #[arg(long = "param", value_name = "NAME=VALUE")]
    params: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    rp: RpArgs,
}

#[derive(Args, Clone)]
struct RpArgs {
    #[arg(long, default_value_t = 100)]
    b1: usize,
    #[arg(long, default_value_t = 20)]
    b2: usize,
    /// Projected dimension.
    #[arg(long, default_value_t = 5)]
    d: usize,
    /// Base classifier family for the ensemble.
    #[arg(long, default_value = "gaussian_nb")]
    base: String,
    /// Fixed vote threshold; tuned when omitted.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    features: PathBuf,
    /// Label file written by `label`.
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Ensemble only: write feature,importance sorted descending.
    #[arg(long)]
    importance: Option<PathBuf>,
}

#[derive(Args)]
struct RpTrainArgs {
    #[command(flatten)]
    rp: RpArgs,
    #[arg(long = "param", value_name = "NAME=VALUE")]
    params: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    importance: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// With labels, print the AUC and optionally write the ROC curve.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    roc: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 5)]
    k_folds: usize,
    #[arg(long, default_value_t = 0)]
    cv_seed: u64,
    #[arg(long)]
    no_stratify: bool,
    /// Data column of the report.
    #[arg(long, default_value = "features")]
    data_desc: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    /// Experiment config supplying [[models]], [cv], [search] and seed.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct KmArgs {
    #[arg(long)]
    clinical: PathBuf,
    /// One curve per group label.
    #[arg(long)]
    group: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print S(t) at these months.
    #[arg(long, value_delimiter = ',')]
    at: Vec<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override any config key, e.g. --set cv.k_folds=10.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    k_folds: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    horizons: Vec<f64>,
    /// Also honored through OMICSURV_WORKERS.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    project_in_fold: bool,
}

fn parse_params(params: &[String]) -> Result<Vec<(String, f64)>> {
    params
        .iter()
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("parameter {p:?} is not name=value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("parameter {k} has non-numeric value {v:?}")))?;
            Ok((k.trim().to_owned(), v))
        })
        .collect()
}

fn rp_config(rp: &RpArgs, params: &[String], seed: u64) -> Result<RpConfig> {
    let mut base = ModelSpec::new(rp.base.parse()?).with_seed(seed);
    for (k, v) in parse_params(params)? {
        base = base.with(&k, v);
    }
    let cfg = RpConfig {
        b1_groups: rp.b1,
        b2_per_group: rp.b2,
        projected_dim: rp.d,
        base,
        vote_threshold_alpha: rp.alpha,
        selection_holdout_fraction: rp.holdout,
        seed,
    };
    cfg.validate(None)?;
    Ok(cfg)
}

fn estimator(m: &ModelArgs) -> Result<Estimator> {
    if m.family == "rp_ensemble" {
        return Ok(Estimator::RpEnsemble(rp_config(&m.rp, &m.params, m.seed)?));
    }
    let mut spec = ModelSpec::new(m.family.parse()?).with_seed(m.seed);
    for (k, v) in parse_params(&m.params)? {
        spec = spec.with(&k, v);
    }
    spec.validate()?;
    Ok(Estimator::Model(spec))
}

fn load_labeled(d: &DataArgs) -> Result<survival::LabeledDataset> {
    let features = dataio::load_features(&d.features)?;
    let labels = survival::load_labels(&d.labels)?;
    survival::attach_labels(&features, &labels, f64::NAN)
}

fn write_scores(ids: &[String], scores: &[f64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["patient_id", "score"])?;
    for (id, s) in ids.iter().zip(scores) {
        w.write_record([id.clone(), s.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn save_fitted(fitted: &Fitted, features: &dataio::FeatureMatrix, out: &Path, importance: Option<&Path>) -> Result<()> {
    models::save_model(fitted, out)?;
    match (fitted, importance) {
        (Fitted::RpEnsemble(m), Some(p)) => rpensemble::write_importance(m, features.feature_names(), p),
        (Fitted::Model(_), Some(_)) => Err(Error::Config("--importance needs family rp_ensemble".into())),
        _ => Ok(()),
    }
}

fn print_aggregates(report: &EvalReport) {
    let aggregates = report.aggregates();
    let mw = aggregates.iter().map(|a| a.model.len()).chain([5]).max().unwrap_or(5);
    let dw = aggregates.iter().map(|a| a.data.len()).chain([4]).max().unwrap_or(4);
    println!(
        "{:<mw$}  {:<dw$} {:>8} {:>8} {:>6}",
        "model", "data", "auc", "std", "folds"
    );
    for a in aggregates {
        println!(
            "{:<mw$}  {:<dw$} {:>8.4} {:>8.4} {:>6}",
            a.model, a.data, a.mean, a.std, a.n_folds
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let mut cfg = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    toml::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => SynthConfig::default(),
            };
            if let Some(v) = a.n_patients {
                cfg.n_patients = v;
            }
            if let Some(v) = a.n_genes {
                cfg.n_genes = v;
            }
            if let Some(v) = a.informative {
                cfg.n_informative_genes = v;
            }
            if let Some(v) = a.signal {
                cfg.signal_strength = v;
            }
            if let Some(v) = a.censoring {
                cfg.censoring_fraction_target = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            cfg.validate()?;
            std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
            let (micro, rna, draw) = if a.split {
                synth::gen_two_platform(&cfg)?
            } else {
                let c = synth::gen_cohort(&cfg)?;
                (c.microarray, c.rnaseq, c.clinical)
            };
            dataio::write_expression(&micro, a.out_dir.join("microarray.csv"))?;
            dataio::write_expression(&rna, a.out_dir.join("rnaseq.csv"))?;
            dataio::write_clinical(&draw.records, a.out_dir.join("clinical.csv"))?;
            synth::write_ground_truth(&draw.truth, a.out_dir.join("truth.csv"))?;
            eprintln!(
                "wrote {} patients x {} genes; exponential censoring rate {:.4}/month",
                cfg.n_patients, cfg.n_genes, draw.censor_rate
            );
        }
        Command::Merge(a) => {
            let sources = a
                .inputs
                .iter()
                .map(|p| dataio::load_expression(p, a.orientation.into()))
                .collect::<Result<Vec<_>>>()?;
            let (merged, report) = dataio::merge(&sources)?;
            dataio::write_expression(&merged, &a.out)?;
            if let Some(p) = &a.report {
                let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
                serde_json::to_writer_pretty(f, &report)?;
            }
            eprintln!(
                "{} patients, {} shared genes, {} duplicate patients resolved",
                report.union_patients,
                report.intersection_genes,
                report.resolutions.len()
            );
        }
        Command::Normalize(a) => {
            let mut target = dataio::load_expression(&a.target, a.orientation.into())?;
            let mut reference = dataio::load_expression(&a.reference, a.orientation.into())?;
            if a.log2 {
                for m in [&mut target, &mut reference] {
                    if m.scale() == dataio::Scale::Linear {
                        *m = normalize::log2_transform(m)?;
                    }
                }
            }
            let genes = dataio::common_genes(&[target.clone(), reference.clone()])?;
            let reference = reference.select_genes(&genes)?;
            let out = normalize::fsqn(&target.select_genes(&genes)?, &reference)?;
            dataio::write_expression(&out, &a.out)?;
            if let Some(p) = &a.merged_out {
                let (merged, report) = dataio::merge(&[reference, out])?;
                dataio::write_expression(&merged, p)?;
                eprintln!("{} patients in the combined matrix", report.union_patients);
            }
        }
        Command::Label(a) => {
            let features = dataio::load_features(&a.features)?;
            let clinical = dataio::load_clinical(&a.clinical)?;
            let (data, priors) = survival::make_labeled_dataset(&features, &clinical, a.horizon)?;
            survival::write_labels(&data, &a.out)?;
            eprintln!(
                "{} of {} patients labeled at t={}; P(y=0)={:.3} P(y=1)={:.3}",
                data.n_rows(),
                features.n_rows(),
                a.horizon,
                priors.p0,
                priors.p1
            );
        }
        Command::Project(a) => {
            let features = dataio::load_features(&a.features)?;
            let cfg = TsneConfig {
                output_dims: a.dims,
                perplexity: a.perplexity,
                iterations: a.iterations,
                learning_rate: a.learning_rate,
                seed: a.seed,
                ..TsneConfig::default()
            };
            let emb = project::tsne(&features, &cfg)?;
            let mut out = emb.to_features();
            if a.append_age {
                let clinical = dataio::load_clinical(a.clinical.as_ref().expect("clap requires it"))?;
                out = project::embedding_with_age(&emb, &clinical)?;
            }
            dataio::write_features(&out, &a.out)?;
            if let Some(p) = &a.trace {
                let mut w = csv::Writer::from_path(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
                w.write_record(["iteration", "kl"])?;
                for (it, kl) in &emb.kl_trace {
                    w.write_record([it.to_string(), kl.to_string()])?;
                }
                w.flush().map_err(|e| Error::io(p, e))?;
            }
        }
        Command::Train(a) => {
            let est = estimator(&a.model)?;
            let data = load_labeled(&a.data)?;
            let fitted = est.fit(&data)?;
            save_fitted(&fitted, &data.features, &a.out, a.importance.as_deref())?;
        }
        Command::Rptrain(a) => {
            let est = Estimator::RpEnsemble(rp_config(&a.rp, &a.params, a.seed)?);
            let data = load_labeled(&a.data)?;
            let fitted = est.fit(&data)?;
            save_fitted(&fitted, &data.features, &a.out, Some(&a.importance))?;
        }
        Command::Predict(a) => {
            let model = models::load_model(&a.model)?;
            let features = dataio::load_features(&a.features)?;
            let scores = model.predict_scores(features.values().view())?;
            write_scores(features.patient_ids(), &scores, &a.out)?;
            if let Some(lp) = &a.labels {
                let data = survival::attach_labels(&features, &survival::load_labels(lp)?, f64::NAN)?;
                let s = model.predict_scores(data.features.values().view())?;
                println!("auc {}", eval::auc(&s, &data.labels)?);
                if let Some(rp) = &a.roc {
                    eval::write_roc(&eval::roc_curve(&s, &data.labels)?, rp)?;
                }
            }
        }
        Command::Cv(a) => {
            let est = estimator(&a.model)?;
            let data = load_labeled(&a.data)?;
            let plan = CvPlan {
                k_folds: a.k_folds,
                stratified: !a.no_stratify,
                seed: a.cv_seed,
            };
            let report = eval::cross_validate(&est, &data, &plan, &a.data_desc)?;
            if let Some(p) = &a.out {
                report.write_csv(p)?;
            }
            print_aggregates(&report);
        }
        Command::Search(a) => {
            let (mut cfg, _) = ExperimentConfig::load(&a.config)?;
            if let Some(b) = a.budget {
                cfg.search.budget = b;
            }
            let data = load_labeled(&a.data)?;
            let workers = pipeline::resolve_workers(a.workers, cfg.workers)?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::Numerical(e.to_string()))?;
            let results = cfg
                .models
                .iter()
                .enumerate()
                .map(|(i, t): (usize, &ModelTemplate)| {
                    let seed = omicsurv::rng::derive_seed(cfg.seed, &[i as u64]);
                    let r = pool.install(|| pipeline::random_search(t, &data, cfg.search.budget, &cfg.cv, seed))?;
                    let best = r.best_trial();
                    println!(
                        "{:<16} best trial {} mean AUC {:.4} {:?}",
                        t.family,
                        best.trial,
                        best.mean_auc.unwrap_or(f64::NAN),
                        best.hyperparameters
                    );
                    Ok(serde_json::json!({ "model": t.family, "result": r }))
                })
                .collect::<Result<Vec<_>>>()?;
            let f = std::fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
            serde_json::to_writer_pretty(f, &results)?;
        }
        Command::Report(a) => {
            print_aggregates(&EvalReport::read_csv(&a.report)?);
        }
        Command::Km(a) => {
            let clinical = dataio::load_clinical(&a.clinical)?;
            let curves = survival::kaplan_meier(&clinical, a.group)?;
            if let Some(p) = &a.out {
                survival::write_km(&curves, p)?;
            }
            for c in &curves {
                let g = c.group_label.as_deref().unwrap_or("all");
                for t in &a.at {
                    println!("{g}\tS({t}) = {:.4}", survival::survival_at(c, *t));
                }
            }
        }
        Command::Run(a) => {
            let text = std::fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
            let mut overrides = a.overrides.clone();
            if let Some(s) = a.seed {
                overrides.push(format!("seed={s}"));
            }
            if let Some(o) = &a.output {
                overrides.push(format!("output.dir={}", toml::Value::String(o.display().to_string())));
            }
            if let Some(b) = a.budget {
                overrides.push(format!("search.budget={b}"));
            }
            if let Some(k) = a.k_folds {
                overrides.push(format!("cv.k_folds={k}"));
            }
            if !a.horizons.is_empty() {
                let hs: Vec<String> = a.horizons.iter().map(|h| format!("{h:?}")).collect();
                overrides.push(format!("labels.horizons=[{}]", hs.join(",")));
            }
            if a.project_in_fold {
                overrides.push("data.project_in_fold=true".into());
            }
            let cfg = ExperimentConfig::from_toml_with_overrides(&text, &overrides)?;
            // the effective config is what gets hashed and stored
            let effective = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
            let workers = pipeline::resolve_workers(a.workers, cfg.workers)?;
            let outcome = pipeline::run_experiment(&cfg, &effective, workers)?;
            print_aggregates(&outcome.report);
            eprintln!("report written to {}", outcome.report_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Runtime => 4,
            })
        }
    }
}
