//! Run configuration in a plain `key=value` format.
//!
//! One pair per line; `#` starts a comment; blank lines are ignored. Defaults
//! depend on the dataset, so the `dataset` key is resolved first and every
//! other key is applied on top of that dataset's defaults. Later sources
//! (command-line flags) override earlier ones (the file).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::badgen::BadGenHyper;
use crate::data::{load_mnist, make_clusters, ssl_split, ClusterSpec, LabeledSet, Layout, Normalization, SslDataset};
use crate::error::{FatError, Result};
use crate::nn::{Activation, AdamConfig};
use crate::scalar::Scalar;
use crate::trainer::{FatConfig, Method};
use crate::vat::VatHyper;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Moons,
    Blobs3,
    Blobs4,
    Ring,
    Mnist,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Moons => "moons",
            DatasetKind::Blobs3 => "blobs3",
            DatasetKind::Blobs4 => "blobs4",
            DatasetKind::Ring => "ring",
            DatasetKind::Mnist => "mnist",
        }
    }

    pub fn is_synthetic(self) -> bool {
        self != DatasetKind::Mnist
    }

    fn layout(self) -> Option<(Layout, usize)> {
        match self {
            DatasetKind::Moons => Some((Layout::TwoMoons, 2)),
            DatasetKind::Blobs3 => Some((Layout::GaussianBlobs, 3)),
            DatasetKind::Blobs4 => Some((Layout::GaussianBlobs, 4)),
            DatasetKind::Ring => Some((Layout::GaussianRing, 2)),
            DatasetKind::Mnist => None,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = FatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moons" => Ok(DatasetKind::Moons),
            "blobs3" => Ok(DatasetKind::Blobs3),
            "blobs4" => Ok(DatasetKind::Blobs4),
            "ring" => Ok(DatasetKind::Ring),
            "mnist" => Ok(DatasetKind::Mnist),
            other => Err(FatError::Config(format!(
                "key `dataset`: unknown dataset {other:?} (expected moons, blobs3, blobs4, ring or mnist)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Total labeled examples, split evenly over the classes.
    pub labels: usize,
    /// Synthetic noise level.
    pub spread: f64,
    /// Synthetic unlabeled pool size.
    pub n_unlabeled: usize,
    pub validation: usize,
    /// Synthetic test set size (MNIST uses its official test split).
    pub test: usize,
    /// Cap on the MNIST unlabeled pool; 0 keeps all.
    pub unlabeled_subset: usize,
    pub mnist_dir: Option<PathBuf>,
}

/// A fully resolved run: training settings plus the dataset to build.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub fat: FatConfig,
    pub dataset: DatasetSpec,
    /// Probe scale; `None` means `1e-6` times the dataset diameter estimate.
    pub xi: Option<f64>,
    /// Epochs (zero-based) after which bad samples are dumped.
    pub dump_epochs: Vec<usize>,
}

impl RunConfig {
    /// Defaults for a dataset: the Table-2 optimum for MNIST, and values
    /// chosen on validation runs for the 2D problems.
    pub fn defaults_for(kind: DatasetKind) -> Self {
        let synthetic = kind.is_synthetic();
        let classes = kind.layout().map_or(10, |(_, k)| k);
        let fat = if synthetic {
            FatConfig {
                vat: VatHyper {
                    epsilon: 0.2,
                    ..VatHyper::default()
                },
                badgen: BadGenHyper {
                    capital_c: 0.4,
                    alpha: 0.01,
                },
                epochs: 100,
                labeled_batch: 32,
                unlabeled_batch: 100,
                adam: AdamConfig {
                    lr: 0.01,
                    ..AdamConfig::default()
                },
                hidden: vec![100, 100],
                ..FatConfig::default()
            }
        } else {
            FatConfig {
                epochs: 40,
                labeled_batch: 100,
                unlabeled_batch: 100,
                adam: AdamConfig {
                    lr: 3e-4,
                    ..AdamConfig::default()
                },
                hidden: vec![256, 128],
                ..FatConfig::default()
            }
        };
        let dataset = DatasetSpec {
            kind,
            labels: if synthetic { 4 * classes } else { 100 },
            spread: match kind {
                DatasetKind::Blobs3 | DatasetKind::Blobs4 => 0.5,
                _ => 0.1,
            },
            n_unlabeled: 1000,
            validation: if synthetic { 200 } else { 1000 },
            test: if synthetic { 1000 } else { 0 },
            unlabeled_subset: if synthetic { 0 } else { 10_000 },
            mnist_dir: None,
        };
        Self {
            fat,
            dataset,
            xi: None,
            dump_epochs: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fat.validate()?;
        let d = &self.dataset;
        if d.labels == 0 {
            return Err(FatError::Config("key `labels`: must be >= 1".into()));
        }
        if let Some((_, k)) = d.kind.layout() {
            if d.labels % k != 0 {
                return Err(FatError::Config(format!(
                    "key `labels`: {} is not divisible by the {k} classes of {}",
                    d.labels,
                    d.kind.name()
                )));
            }
        }
        if !(d.spread > 0.0 && d.spread.is_finite()) {
            return Err(FatError::Config(format!("key `spread`: must be > 0, got {}", d.spread)));
        }
        if let Some(xi) = self.xi {
            if !(xi > 0.0 && xi.is_finite()) {
                return Err(FatError::Config(format!("key `xi`: must be > 0, got {xi}")));
            }
        }
        Ok(())
    }

    /// Fills in `xi` from the dataset scale when it was not given.
    pub fn resolve_xi<T: Scalar>(&mut self, data: &SslDataset<T>) {
        let xi = *self.xi.get_or_insert_with(|| 1e-6 * data.diameter_estimate());
        self.fat.vat.xi = xi;
    }

    /// Every key in a fixed order; parsing the text reproduces `self`.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let f = &self.fat;
        let d = &self.dataset;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut p = vec![
            ("dataset", d.kind.name().to_string()),
            ("method", f.method.name().to_string()),
            ("labels", d.labels.to_string()),
            ("spread", d.spread.to_string()),
            ("n_unlabeled", d.n_unlabeled.to_string()),
            ("validation", d.validation.to_string()),
            ("test", d.test.to_string()),
            ("unlabeled_subset", d.unlabeled_subset.to_string()),
        ];
        if let Some(dir) = &d.mnist_dir {
            p.push(("mnist_dir", dir.display().to_string()));
        }
        p.extend([
            ("epsilon", f.vat.epsilon.to_string()),
            ("power_iters", f.vat.power_iters.to_string()),
            ("capital_c", f.badgen.capital_c.to_string()),
            ("alpha", f.badgen.alpha.to_string()),
            ("lambda_step", f.lambda_step.to_string()),
            ("lambda_max", f.lambda_max.to_string()),
            ("epochs", f.epochs.to_string()),
            ("batch", f.unlabeled_batch.to_string()),
            ("labeled_batch", f.labeled_batch.to_string()),
            ("lr", f.adam.lr.to_string()),
            ("beta1", f.adam.beta1.to_string()),
            ("beta2", f.adam.beta2.to_string()),
            ("adam_eps", f.adam.eps.to_string()),
            ("seed", f.seed.to_string()),
            ("hidden", join(&f.hidden)),
            ("activation", activation_name(f.activation)),
            ("batch_norm", f.batch_norm.to_string()),
            ("record_wall_clock", f.record_wall_clock.to_string()),
            ("dump_epochs", join(&self.dump_epochs)),
        ]);
        if let Some(xi) = self.xi {
            p.push(("xi", xi.to_string()));
        }
        p
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let f = &mut self.fat;
        let d = &mut self.dataset;
        match key {
            "dataset" => d.kind = value.parse()?,
            "method" => f.method = value.parse::<Method>().map_err(|e| keyed(key, e))?,
            "labels" => d.labels = parse(key, value)?,
            "spread" => d.spread = parse(key, value)?,
            "n_unlabeled" => d.n_unlabeled = parse(key, value)?,
            "validation" => d.validation = parse(key, value)?,
            "test" => d.test = parse(key, value)?,
            "unlabeled_subset" => d.unlabeled_subset = parse(key, value)?,
            "mnist_dir" => d.mnist_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "epsilon" => f.vat.epsilon = parse(key, value)?,
            "xi" => self.xi = Some(parse(key, value)?),
            "power_iters" => f.vat.power_iters = parse(key, value)?,
            "capital_c" => f.badgen.capital_c = parse(key, value)?,
            "alpha" => f.badgen.alpha = parse(key, value)?,
            "lambda_step" => f.lambda_step = parse(key, value)?,
            "lambda_max" => f.lambda_max = parse(key, value)?,
            "epochs" => f.epochs = parse(key, value)?,
            "batch" => f.unlabeled_batch = parse(key, value)?,
            "labeled_batch" => f.labeled_batch = parse(key, value)?,
            "lr" => f.adam.lr = parse(key, value)?,
            "beta1" => f.adam.beta1 = parse(key, value)?,
            "beta2" => f.adam.beta2 = parse(key, value)?,
            "adam_eps" => f.adam.eps = parse(key, value)?,
            "seed" => f.seed = parse(key, value)?,
            "hidden" => f.hidden = parse_list(key, value)?,
            "activation" => f.activation = parse_activation(value)?,
            "batch_norm" => f.batch_norm = parse(key, value)?,
            "record_wall_clock" => f.record_wall_clock = parse(key, value)?,
            "dump_epochs" => self.dump_epochs = parse_list(key, value)?,
            other => return Err(FatError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

fn keyed(key: &str, e: FatError) -> FatError {
    match e {
        FatError::Config(msg) => FatError::Config(format!("key `{key}`: {msg}")),
        other => other,
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| {
        FatError::Config(format!(
            "key `{key}`: cannot parse {value:?} as {}",
            std::any::type_name::<V>()
        ))
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn activation_name(a: Activation) -> String {
    match a {
        Activation::Relu => "relu".into(),
        Activation::LeakyRelu(s) => format!("leaky_relu:{s}"),
        Activation::Identity => "identity".into(),
    }
}

fn parse_activation(value: &str) -> Result<Activation> {
    match value {
        "relu" => Ok(Activation::Relu),
        "identity" => Ok(Activation::Identity),
        "leaky_relu" => Ok(Activation::LeakyRelu(0.1)),
        v => match v.strip_prefix("leaky_relu:") {
            Some(s) => Ok(Activation::LeakyRelu(parse("activation", s)?)),
            None => Err(FatError::Config(format!(
                "key `activation`: expected relu, leaky_relu[:slope] or identity, got {v:?}"
            ))),
        },
    }
}

/// `key=value` pairs of a config text, in order. Duplicate keys are rejected.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(FatError::Parse {
                field: format!("line {}", lineno + 1),
                detail: format!("expected key=value, got {line:?}"),
            });
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if seen.insert(k.clone(), lineno + 1).is_some() {
            return Err(FatError::Config(format!("duplicate key `{k}` on line {}", lineno + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

/// Resolves a configuration from file text and flag overrides (applied in
/// that order; later values win).
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let file = parse_pairs(text)?;
    let all: Vec<&(String, String)> = file.iter().chain(overrides).collect();
    let kind = match all.iter().rev().find(|(k, _)| k == "dataset") {
        Some((_, v)) => v.parse()?,
        None => DatasetKind::Moons,
    };
    let mut cfg = RunConfig::defaults_for(kind);
    for (k, v) in all {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the dataset a spec describes. MNIST needs a directory, either in
/// the spec or passed as `default_dir`.
pub fn build_dataset<T: Scalar>(spec: &DatasetSpec, seed: u64, default_dir: Option<&Path>) -> Result<SslDataset<T>> {
    if let Some((layout, classes)) = spec.kind.layout() {
        return make_clusters(&ClusterSpec {
            layout,
            classes,
            n_unlabeled: spec.n_unlabeled,
            labeled_per_class: spec.labels / classes,
            spread: spec.spread,
            n_validation: spec.validation,
            n_test: spec.test,
            seed,
        });
    }
    let dir = spec
        .mnist_dir
        .as_deref()
        .or(default_dir)
        .ok_or_else(|| FatError::Config("key `mnist_dir`: no MNIST directory given".into()))?;
    let m = load_mnist::<T>(dir)?;
    let mut data = ssl_split(&m.train_x, &m.train_y, spec.labels, spec.validation, seed)?;
    if spec.unlabeled_subset > 0 {
        data.cap_unlabeled(spec.unlabeled_subset);
    }
    data.test = LabeledSet {
        x: m.test_x,
        y: m.test_y,
    };
    data.normalization = Normalization::uniform(data.input_dim, 0.0, 255.0);
    data.descriptor = format!(
        "mnist({}, labels={}, validation={}, unlabeled={}, seed={seed})",
        dir.display(),
        spec.labels,
        spec.validation,
        data.unlabeled.rows()
    );
    data.validate()?;
    Ok(data)
}

/// Header comments plus the resolved configuration of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config: RunConfig,
    pub dataset_descriptor: String,
    pub code_version: String,
    /// Artifact file names relative to the run directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::from("# fat run manifest\n");
        let _ = writeln!(out, "# version: {}", self.code_version);
        let _ = writeln!(out, "# dataset: {}", self.dataset_descriptor);
        let _ = writeln!(out, "# outputs: {}", self.outputs.join(", "));
        out.push_str(&self.config.to_config_text());
        out
    }
}

pub fn code_version() -> String {
    format!("fat-core {}", env!("CARGO_PKG_VERSION"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn table_two_optimum() {
        let c = parse_config("dataset=mnist\nepsilon=1.5 \ncapital_c=2.0\nalpha=0.01 # optimum\n", &[]).unwrap();
        assert_eq!(c.fat.vat.epsilon, 1.5);
        assert_eq!(c.fat.badgen.capital_c, 2.0);
        assert_eq!(c.fat.badgen.alpha, 0.01);
        assert_eq!(c.fat.method, Method::Fat);
    }

    #[test]
    fn flags_override_file() {
        let c = parse_config("method=fat\n", &pairs(&[("method", "vat")])).unwrap();
        assert_eq!(c.fat.method, Method::Vat);
        let c = parse_config("dataset=moons\n", &pairs(&[("dataset", "mnist")])).unwrap();
        assert_eq!(c.dataset.kind, DatasetKind::Mnist);
        assert_eq!(c.fat.hidden, vec![256, 128]);
    }

    #[test]
    fn errors_name_the_key() {
        let msg = |t: &str| parse_config(t, &[]).unwrap_err().to_string();
        assert!(msg("alpha=1.5").contains("alpha"));
        assert!(msg("epsilonn=1").contains("unknown key `epsilonn`"));
        assert!(msg("epochs=many").contains("key `epochs`"));
        assert!(msg("method=gan").contains("key `method`"));
        assert!(msg("labels=7").contains("key `labels`"));
        assert!(msg("seed=1\nseed=2").contains("duplicate key `seed`"));
        assert!(msg("just words").contains("line 1"));
    }

    #[test]
    fn text_roundtrip() {
        let mut c = parse_config(
            "dataset=blobs3\nhidden=7,5\nactivation=leaky_relu:0.2\nxi=0.000123\ndump_epochs=0,4\nlr=0.1",
            &[],
        )
        .unwrap();
        c.dataset.mnist_dir = Some(PathBuf::from("/tmp/m"));
        assert_eq!(parse_config(&c.to_config_text(), &[]).unwrap(), c);
        let m = RunManifest {
            config: c.clone(),
            dataset_descriptor: "d".into(),
            code_version: code_version(),
            outputs: vec!["metrics.csv".into()],
        };
        assert_eq!(parse_config(&m.to_text(), &[]).unwrap(), c);
    }

    #[test]
    fn synthetic_dataset_from_spec() {
        let c = parse_config("dataset=moons\nlabels=8\nn_unlabeled=100\nvalidation=10\ntest=10", &[]).unwrap();
        let d: SslDataset<f64> = build_dataset(&c.dataset, 1, None).unwrap();
        assert_eq!((d.labeled.len(), d.unlabeled.rows(), d.class_count), (8, 100, 2));
        let mut c2 = c.clone();
        c2.resolve_xi(&d);
        assert!(c2.xi.unwrap() > 0.0 && c2.fat.vat.xi == c2.xi.unwrap());
    }

    #[test]
    fn mnist_needs_a_directory() {
        let c = parse_config("dataset=mnist", &[]).unwrap();
        assert!(build_dataset::<f64>(&c.dataset, 0, None).is_err());
    }
}
