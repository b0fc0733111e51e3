//! JSON run configuration. Unknown keys are rejected; relative paths are
//! resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use crl::data::{load_cifar10_bin, load_idx, make_blobs, make_ordinal, AugmentSpec, Dataset};
use crl::optim::OptimSpec;
use crl::{Architecture, LossSpec};
use serde::{Deserialize, Serialize};

use crate::{io_err, CliError, Result, OUTPUT_DIR_ENV};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// A directory holding the four standard IDX files (optionally `.gz`).
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Cifar10 {
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
        seed: u64,
    },
    Ordinal {
        classes: usize,
        per_class: usize,
        overlap: f64,
        seed: u64,
    },
}

fn default_true() -> bool {
    true
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// Per-channel standardization with train-split statistics.
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// A preset name (`logreg`, `mlp`, `shallow_cnn`) or a list of layers.
    pub model: Architecture,
    /// `cel`, `bce`, `cce`, `nllr`, `crl` or `crl:ALPHA:BETA`.
    #[serde(with = "loss_name")]
    pub loss: LossSpec,
    #[serde(default)]
    pub optim: OptimSpec,
    #[serde(default)]
    pub augment: Option<AugmentSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Report the one-category-off accuracy (ordinal label spaces).
    #[serde(default)]
    pub ordinal: bool,
}

mod loss_name {
    use crl::LossSpec;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(spec: &LossSpec, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(spec)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<LossSpec, D::Error> {
        let name = String::deserialize(d)?;
        LossSpec::parse(&name).map_err(D::Error::custom)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| {
            CliError::Usage(format!("cannot read config {}: {source}", path.display()))
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetConfig::Mnist { dir, .. } => fix(dir),
            DatasetConfig::Cifar10 {
                train_files,
                test_files,
                ..
            } => train_files.iter_mut().chain(test_files.iter_mut()).for_each(fix),
            _ => {}
        }
        if let Some(out) = &mut self.output_dir {
            fix(out);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Usage("config lists no seeds".into()));
        }
        self.loss.validate()?;
        self.optim.validate()?;
        let missing = |p: &Path| CliError::Usage(format!("{} does not exist", p.display()));
        match &self.dataset {
            DatasetConfig::Mnist { dir, .. } => {
                for name in MNIST_FILES {
                    mnist_file(dir, name).ok_or_else(|| missing(&dir.join(name)))?;
                }
            }
            DatasetConfig::Cifar10 {
                train_files,
                test_files,
                ..
            } => {
                if train_files.is_empty() || test_files.is_empty() {
                    return Err(CliError::Usage("cifar10 needs train and test files".into()));
                }
                if let Some(p) = train_files.iter().chain(test_files).find(|p| !p.exists()) {
                    return Err(missing(p));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Output directory: the explicit override, then the config, then
    /// `$CRL_OUTPUT_DIR`, then `./runs`.
    pub fn output_dir(&self, explicit: Option<&Path>) -> PathBuf {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match &self.dataset {
            DatasetConfig::Mnist {
                dir,
                train_limit,
                test_limit,
            } => {
                let get = |name: &str| mnist_file(dir, name).ok_or_else(|| CliError::Usage(format!("{name} missing in {}", dir.display())));
                let train = load_idx(&get(MNIST_FILES[0])?, &get(MNIST_FILES[1])?, 10)?;
                let test = load_idx(&get(MNIST_FILES[2])?, &get(MNIST_FILES[3])?, 10)?;
                Dataset::new(limit(train, *train_limit), limit(test, *test_limit))?
            }
            DatasetConfig::Cifar10 {
                train_files,
                test_files,
                train_limit,
                test_limit,
            } => Dataset::new(
                load_cifar10_bin(train_files, *train_limit)?,
                load_cifar10_bin(test_files, *test_limit)?,
            )?,
            DatasetConfig::Blobs {
                classes,
                per_class,
                dim,
                separation,
                seed,
            } => make_blobs(*classes, *per_class, *dim, *separation, *seed)?,
            DatasetConfig::Ordinal {
                classes,
                per_class,
                overlap,
                seed,
            } => make_ordinal(*classes, *per_class, *overlap, *seed)?,
        };
        Ok(if self.normalize { ds.normalized()? } else { ds })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(io_err(path))
    }
}

fn limit(batch: crl::data::LabeledBatch, n: Option<usize>) -> crl::data::LabeledBatch {
    match n {
        Some(n) => batch.truncate(n),
        None => batch,
    }
}

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

fn mnist_file(dir: &Path, name: &str) -> Option<PathBuf> {
    [dir.join(name), dir.join(format!("{name}.gz"))]
        .into_iter()
        .find(|p| p.exists())
}
