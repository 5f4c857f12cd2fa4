//! Classifier and regressor suite behind one contract: `fit` a [`ModelSpec`]
//! on a [`LabeledDataset`], then `predict_scores` where larger means class 1
//! (survived past the horizon).
//!
//! Hyperparameters are a flat `name -> number` map. Booleans are 0/1;
//! "auto" settings use 0 (`gamma`, `mtry`) and unlimited depth is -1.
//! SVM, logistic and MLP families z-score their inputs internally.

pub mod forest;
pub mod logistic;
pub mod mlp;
pub mod naive_bayes;
pub mod scaler;
pub mod svm;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rpensemble::{RpConfig, RpModel};
use crate::survival::LabeledDataset;

use forest::{ForestParams, RandomForest};
use logistic::L1Logistic;
use mlp::{Loss, Mlp, TrainParams};
use naive_bayes::GaussianNb;
use scaler::Standardizer;
use svm::Svm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussianNb,
    SvmRbf,
    L1Logistic,
    RandomForest,
    RectangleMlp,
    MlpRegressor,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::GaussianNb,
        Family::SvmRbf,
        Family::L1Logistic,
        Family::RandomForest,
        Family::RectangleMlp,
        Family::MlpRegressor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::GaussianNb => "gaussian_nb",
            Family::SvmRbf => "svm_rbf",
            Family::L1Logistic => "l1_logistic",
            Family::RandomForest => "random_forest",
            Family::RectangleMlp => "rectangle_mlp",
            Family::MlpRegressor => "mlp_regressor",
        }
    }

    pub fn is_classifier(self) -> bool {
        self != Family::MlpRegressor
    }

    fn param_defs(self) -> &'static [ParamDef] {
        const SVM: &[ParamDef] = &[
            ParamDef::real("C", 1.0, 1e-9, 1e9),
            ParamDef::real("gamma", 0.0, 0.0, 1e9),
            ParamDef::real("tol", 1e-3, 1e-12, 1.0),
        ];
        const LOGISTIC: &[ParamDef] = &[
            ParamDef::real("lambda", 0.01, 0.0, 1e9),
            ParamDef::int("max_sweeps", 200.0, 1.0, 1e6),
        ];
        const FOREST: &[ParamDef] = &[
            ParamDef::int("n_trees", 100.0, 1.0, 1e5),
            ParamDef::int("max_depth", -1.0, -1.0, 1e4),
            ParamDef::int("mtry", 0.0, 0.0, 1e9),
            ParamDef::int("bootstrap", 1.0, 0.0, 1.0),
        ];
        const MLP: &[ParamDef] = &[
            ParamDef::int("n_hidden_layers", 1.0, 1.0, 16.0),
            ParamDef::int("width", 32.0, 1.0, 4096.0),
            ParamDef::int("epochs", 100.0, 1.0, 1e5),
            ParamDef::real("learning_rate", 1e-3, 1e-9, 1.0),
            ParamDef::int("batch_size", 32.0, 1.0, 1e9),
        ];
        const REGRESSOR: &[ParamDef] = &[
            ParamDef::int("n_hidden_layers", 1.0, 1.0, 16.0),
            ParamDef::int("width", 32.0, 1.0, 4096.0),
            ParamDef::int("epochs", 100.0, 1.0, 1e5),
            ParamDef::real("learning_rate", 1e-3, 1e-9, 1.0),
            ParamDef::int("batch_size", 32.0, 1.0, 1e9),
            ParamDef::real("censor_weight", 1.0, 0.0, 1.0),
        ];
        match self {
            Family::GaussianNb => &[],
            Family::SvmRbf => SVM,
            Family::L1Logistic => LOGISTIC,
            Family::RandomForest => FOREST,
            Family::RectangleMlp => MLP,
            Family::MlpRegressor => REGRESSOR,
        }
    }

    pub fn param_names(self) -> Vec<&'static str> {
        self.param_defs().iter().map(|d| d.name).collect()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model family {s:?}")))
    }
}

struct ParamDef {
    name: &'static str,
    default: f64,
    min: f64,
    max: f64,
    integer: bool,
}

impl ParamDef {
    const fn real(name: &'static str, default: f64, min: f64, max: f64) -> Self {
        Self {
            name,
            default,
            min,
            max,
            integer: false,
        }
    }

    const fn int(name: &'static str, default: f64, min: f64, max: f64) -> Self {
        Self {
            name,
            default,
            min,
            max,
            integer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            hyperparameters: BTreeMap::new(),
            seed: 0,
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.hyperparameters.insert(name.to_owned(), value);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let defs = self.family.param_defs();
        for (name, &value) in &self.hyperparameters {
            let def = defs.iter().find(|d| d.name == name).ok_or_else(|| {
                Error::Config(format!(
                    "{} has no hyperparameter {name:?} (valid: {:?})",
                    self.family,
                    self.family.param_names()
                ))
            })?;
            if !value.is_finite() || value < def.min || value > def.max {
                return Err(Error::Config(format!(
                    "{}.{name} = {value} outside [{}, {}]",
                    self.family, def.min, def.max
                )));
            }
            if def.integer && value.fract() != 0.0 {
                return Err(Error::Config(format!(
                    "{}.{name} must be an integer, got {value}",
                    self.family
                )));
            }
        }
        Ok(())
    }

    /// Value of a hyperparameter, falling back to the family default.
    pub fn param(&self, name: &str) -> f64 {
        self.hyperparameters.get(name).copied().unwrap_or_else(|| {
            self.family
                .param_defs()
                .iter()
                .find(|d| d.name == name)
                .map(|d| d.default)
                .unwrap_or_else(|| panic!("{} has no hyperparameter {name}", self.family))
        })
    }

    fn uint(&self, name: &str) -> usize {
        self.param(name) as usize
    }

    pub fn descriptor(&self) -> String {
        if self.hyperparameters.is_empty() {
            return self.family.to_string();
        }
        let params: Vec<String> = self.hyperparameters.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}({})", self.family, params.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FittedParams {
    GaussianNb {
        nb: GaussianNb,
    },
    SvmRbf {
        scaler: Standardizer,
        svm: Svm,
    },
    L1Logistic {
        scaler: Standardizer,
        model: L1Logistic,
    },
    RandomForest {
        forest: RandomForest,
    },
    RectangleMlp {
        scaler: Standardizer,
        net: Mlp,
    },
    MlpRegressor {
        scaler: Standardizer,
        net: Mlp,
        target_mean: f64,
        target_scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub n_features: usize,
    pub params: FittedParams,
    /// Per-epoch training loss for the network families.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_history: Vec<f64>,
}

fn check_inputs(x: ArrayView2<'_, f64>, n_targets: usize) -> Result<()> {
    if x.nrows() != n_targets {
        return Err(Error::InvalidArgument(format!(
            "{} feature rows but {} targets",
            x.nrows(),
            n_targets
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::InvalidArgument("need at least 2 training samples".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("training features must be finite".into()));
    }
    Ok(())
}

fn mlp_train_params(spec: &ModelSpec) -> TrainParams {
    TrainParams {
        epochs: spec.uint("epochs"),
        learning_rate: spec.param("learning_rate"),
        batch_size: spec.uint("batch_size"),
    }
}

/// Fit a classifier family on raw arrays.
pub fn fit_classifier(spec: &ModelSpec, x: ArrayView2<'_, f64>, y: &[u8]) -> Result<TrainedModel> {
    spec.validate()?;
    if !spec.family.is_classifier() {
        return Err(Error::InvalidArgument(format!(
            "{} needs survival times; use fit_regressor",
            spec.family
        )));
    }
    check_inputs(x, y.len())?;
    if y.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let ones = y.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == y.len() {
        return Err(Error::InvalidArgument(format!(
            "training set has a single class ({} samples)",
            y.len()
        )));
    }
    let mut loss_history = Vec::new();
    let params = match spec.family {
        Family::GaussianNb => FittedParams::GaussianNb {
            nb: GaussianNb::fit(x, y),
        },
        Family::SvmRbf => {
            let scaler = Standardizer::fit(x);
            let xs = scaler.transform(x);
            let gamma = match spec.param("gamma") {
                g if g > 0.0 => g,
                _ => 1.0 / x.ncols() as f64,
            };
            FittedParams::SvmRbf {
                svm: Svm::fit(xs.view(), y, spec.param("C"), gamma, spec.param("tol"))?,
                scaler,
            }
        }
        Family::L1Logistic => {
            let scaler = Standardizer::fit(x);
            let xs = scaler.transform(x);
            FittedParams::L1Logistic {
                model: L1Logistic::fit(xs.view(), y, spec.param("lambda"), spec.uint("max_sweeps"), 1e-7),
                scaler,
            }
        }
        Family::RandomForest => {
            let m = x.ncols();
            let mtry = match spec.uint("mtry") {
                0 => ((m as f64).sqrt().floor() as usize).max(1),
                k => k.min(m),
            };
            let depth = spec.param("max_depth");
            let params = ForestParams {
                n_trees: spec.uint("n_trees"),
                max_depth: (depth >= 0.0).then_some(depth as usize),
                mtry,
                bootstrap: spec.param("bootstrap") != 0.0,
            };
            FittedParams::RandomForest {
                forest: RandomForest::fit(x, y, params, spec.seed),
            }
        }
        Family::RectangleMlp => {
            let scaler = Standardizer::fit(x);
            let xs = scaler.transform(x);
            let mut net = Mlp::new(x.ncols(), spec.uint("n_hidden_layers"), spec.uint("width"), spec.seed);
            let targets: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
            let weights = vec![1.0; y.len()];
            loss_history = net.train(
                xs.view(),
                &targets,
                &weights,
                Loss::Logistic,
                mlp_train_params(spec),
                spec.seed,
            );
            FittedParams::RectangleMlp { scaler, net }
        }
        Family::MlpRegressor => unreachable!("rejected above"),
    };
    Ok(TrainedModel {
        spec: spec.clone(),
        n_features: x.ncols(),
        params,
        loss_history,
    })
}

/// Fit the survival-time regressor on observed times `C_i`. Censored rows get
/// weight `censor_weight` in the squared loss, deaths weight 1.
pub fn fit_regressor(spec: &ModelSpec, x: ArrayView2<'_, f64>, times: &[f64], events: &[bool]) -> Result<TrainedModel> {
    spec.validate()?;
    if spec.family != Family::MlpRegressor {
        return Err(Error::InvalidArgument(format!("{} is not a regressor", spec.family)));
    }
    check_inputs(x, times.len())?;
    if events.len() != times.len() {
        return Err(Error::InvalidArgument("times and events differ in length".into()));
    }
    let scaler = Standardizer::fit(x);
    let xs = scaler.transform(x);
    let n = times.len() as f64;
    let target_mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - target_mean).powi(2)).sum::<f64>() / n;
    let target_scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
    let targets: Vec<f64> = times.iter().map(|t| (t - target_mean) / target_scale).collect();
    let cw = spec.param("censor_weight");
    let weights: Vec<f64> = events.iter().map(|&e| if e { 1.0 } else { cw }).collect();
    let mut net = Mlp::new(x.ncols(), spec.uint("n_hidden_layers"), spec.uint("width"), spec.seed);
    let loss_history = net.train(
        xs.view(),
        &targets,
        &weights,
        Loss::WeightedSquared,
        mlp_train_params(spec),
        spec.seed,
    );
    Ok(TrainedModel {
        spec: spec.clone(),
        n_features: x.ncols(),
        params: FittedParams::MlpRegressor {
            scaler,
            net,
            target_mean,
            target_scale,
        },
        loss_history,
    })
}

/// Fit on a labeled dataset: classifiers use the labels, the regressor the observed times.
pub fn fit(spec: &ModelSpec, data: &LabeledDataset) -> Result<TrainedModel> {
    let x = data.features.values().view();
    if spec.family == Family::MlpRegressor {
        fit_regressor(spec, x, &data.times, &data.events)
    } else {
        fit_classifier(spec, x, &data.labels)
    }
}

impl TrainedModel {
    pub fn predict_scores(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::InvalidArgument(format!(
                "model expects {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        Ok(match &self.params {
            FittedParams::GaussianNb { nb } => nb.decision(x),
            FittedParams::SvmRbf { scaler, svm } => svm.decision(scaler.transform(x).view()),
            FittedParams::L1Logistic { scaler, model } => model.decision(scaler.transform(x).view()),
            FittedParams::RandomForest { forest } => forest.decision(x),
            FittedParams::RectangleMlp { scaler, net } => net.forward(scaler.transform(x).view()),
            FittedParams::MlpRegressor {
                scaler,
                net,
                target_mean,
                target_scale,
            } => net
                .forward(scaler.transform(x).view())
                .into_iter()
                .map(|z| target_mean + target_scale * z)
                .collect(),
        })
    }

    /// Hard class from the score: decision value > 0 for margin-style
    /// families, vote fraction > 0.5 for the forest.
    pub fn predict_labels(&self, x: ArrayView2<'_, f64>) -> Result<Vec<u8>> {
        let cut = match self.params {
            FittedParams::RandomForest { .. } => 0.5,
            _ => 0.0,
        };
        Ok(self.predict_scores(x)?.into_iter().map(|s| u8::from(s > cut)).collect())
    }
}

/// Backprop vs central finite differences for a network family on a small
/// instance drawn from `seed`. Returns the maximum relative error.
pub fn gradient_check(family: Family, n_samples: usize, n_features: usize, seed: u64) -> Result<f64> {
    use rand::Rng as _;
    if n_samples > 20 || n_features > 10 {
        return Err(Error::InvalidArgument(
            "gradient_check is for <= 20 samples and <= 10 features".into(),
        ));
    }
    let mut rng = crate::rng::rng_for(seed, &[0x4752_4144]);
    let x = Array2::from_shape_fn((n_samples, n_features), |_| rng.random_range(-2.0..2.0));
    let net = Mlp::new(n_features, 2, 6, seed);
    let (targets, weights, loss): (Vec<f64>, Vec<f64>, Loss) = match family {
        Family::RectangleMlp => (
            (0..n_samples).map(|_| f64::from(rng.random_range(0..2u8))).collect(),
            vec![1.0; n_samples],
            Loss::Logistic,
        ),
        Family::MlpRegressor => (
            (0..n_samples).map(|_| rng.random_range(-3.0..3.0)).collect(),
            (0..n_samples).map(|_| rng.random_range(0.0..1.0)).collect(),
            Loss::WeightedSquared,
        ),
        other => {
            return Err(Error::InvalidArgument(format!("{other} has no backprop gradient")));
        }
    };
    Ok(mlp::max_gradient_error(&net, x.view(), &targets, &weights, loss))
}

/// Anything the evaluation layer can fit: a single model or the projection ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    Model(ModelSpec),
    RpEnsemble(RpConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fitted {
    Model(TrainedModel),
    RpEnsemble(RpModel),
}

impl Estimator {
    pub fn validate(&self) -> Result<()> {
        match self {
            Estimator::Model(s) => s.validate(),
            Estimator::RpEnsemble(c) => c.validate(None),
        }
    }

    pub fn fit(&self, data: &LabeledDataset) -> Result<Fitted> {
        match self {
            Estimator::Model(spec) => fit(spec, data).map(Fitted::Model),
            Estimator::RpEnsemble(cfg) => {
                crate::rpensemble::train(data.features.values().view(), &data.labels, cfg).map(Fitted::RpEnsemble)
            }
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            Estimator::Model(s) => s.descriptor(),
            Estimator::RpEnsemble(c) => c.descriptor(),
        }
    }

    /// Short family name used as the report's model column.
    pub fn family_name(&self) -> String {
        match self {
            Estimator::Model(s) => s.family.to_string(),
            Estimator::RpEnsemble(c) => format!("rp_ensemble[{}]", c.base.family),
        }
    }
}

impl Fitted {
    pub fn predict_scores(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        match self {
            Fitted::Model(m) => m.predict_scores(x),
            Fitted::RpEnsemble(m) => m.predict_scores(x),
        }
    }
}

pub const MODEL_FORMAT: &str = "omicsurv-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: Fitted,
}

/// Versioned JSON dump of a fitted model.
pub fn save_model(model: &Fitted, path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(
        std::io::BufWriter::new(file),
        &ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_FORMAT_VERSION,
            model: model.clone(),
        },
    )?;
    Ok(())
}

pub fn load_model(path: impl AsRef<std::path::Path>) -> Result<Fitted> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parsed: ModelFile = serde_json::from_reader(std::io::BufReader::new(file))?;
    if parsed.format != MODEL_FORMAT || parsed.version != MODEL_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported model file {} v{} (expected {MODEL_FORMAT} v{MODEL_FORMAT_VERSION})",
            parsed.format, parsed.version
        )));
    }
    Ok(parsed.model)
}
