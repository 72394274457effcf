//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use difflab::data::{circle_centers, idx_read, quantize_to_grid, Batch, DataError, DataSource, Dataset, MixtureSource, ResampleSource};
use difflab::denoiser::{Arch, Conditioning, HeadMode};
use difflab::numerics::RngStream;
use difflab::schedule::ScheduleSpec;
use difflab::training::{TrainConfig, Variant, DEFAULT_LAMBDA};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Denoiser,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub task: Task,
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataSpec,
    pub schedule: Option<ScheduleSpec>,
    pub model: ModelSpec,
    pub train: TrainSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Endless draws from an isotropic mixture.
    Mixture {
        centers: Vec<Vec<f64>>,
        sigma: f64,
        #[serde(default)]
        quantize: bool,
    },
    /// Mixture with `k` centers evenly spaced on a circle.
    Circle {
        k: usize,
        radius: f64,
        sigma: f64,
        #[serde(default)]
        quantize: bool,
    },
    /// Resampled rows of a CSV file with header `x0,…[,label]`.
    Csv { path: PathBuf },
    /// Resampled IDX images, optionally labeled.
    Idx { images: PathBuf, labels: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    #[serde(default = "default_emb_dim")]
    pub emb_dim: usize,
    /// AdaGN signal length for class conditioning; defaults to the gcd of the widths.
    pub signal_dim: Option<usize>,
    #[serde(default = "default_groups")]
    pub groups: usize,
}

fn default_emb_dim() -> usize {
    16
}

fn default_groups() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    pub gamma: f64,
    pub batch: usize,
    pub steps: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub p_uncond: f64,
    /// Size of the finite training set a classifier draws from synthetic sources.
    pub samples: Option<usize>,
}

fn default_variant() -> Variant {
    Variant::Ddpm
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let missing = |p: &Path| CliError::config(format!("referenced file {} does not exist", p.display()));
        match &self.data {
            DataSpec::Csv { path } if !path.exists() => return Err(missing(path)),
            DataSpec::Idx { images, labels } => {
                if !images.exists() {
                    return Err(missing(images));
                }
                if let Some(l) = labels.as_ref().filter(|l| !l.exists()) {
                    return Err(missing(l));
                }
            }
            _ => {}
        }
        if self.task == Task::Denoiser && self.schedule.is_none() {
            return Err(CliError::config("a [schedule] section is required to train a denoiser"));
        }
        self.train_config().validate().map_err(|e| CliError::config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            gamma: self.train.gamma,
            batch: self.train.batch,
            steps: self.train.steps,
            lambda: self.train.lambda,
            p_uncond: self.train.p_uncond,
            seed: self.seed,
        }
    }

    /// Architecture implied by the model section, variant and data.
    pub fn arch(&self, input_dim: usize, num_classes: Option<usize>) -> Result<Arch, CliError> {
        let mut arch = Arch::mlp(input_dim, self.model.hidden.clone(), self.model.emb_dim);
        if self.train.variant == Variant::Improved {
            arch = arch.with_head(HeadMode::NoiseAndVariance);
        }
        if self.train.variant == Variant::Cfg {
            let num_classes = num_classes.ok_or_else(|| CliError::config("variant cfg needs labeled data"))?;
            let signal_dim = self.model.signal_dim.unwrap_or_else(|| self.model.hidden.iter().fold(0, |a, &b| gcd(a, b)));
            arch = arch.with_conditioning(Conditioning::Class { num_classes, signal_dim, groups: self.model.groups });
        }
        arch.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(arch)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Snaps every batch onto the 256-level grid after clamping to `[-1, 1]`.
struct Quantized<S>(S);

impl<S: DataSource> DataSource for Quantized<S> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn num_classes(&self) -> Option<usize> {
        self.0.num_classes()
    }

    fn next_batch(&mut self, size: usize, rng: &mut RngStream) -> Result<Batch, DataError> {
        let b = self.0.next_batch(size, rng)?;
        Ok(Batch {
            x: quantize_to_grid(&b.x.map(|v| v.clamp(-1.0, 1.0)))?,
            labels: b.labels,
        })
    }
}

fn mixture(centers: &[Vec<f64>], sigma: f64, quantize: bool) -> Result<Box<dyn DataSource>, DataError> {
    let src = MixtureSource::new(centers.to_vec(), sigma)?;
    Ok(if quantize { Box::new(Quantized(src)) } else { Box::new(src) })
}

impl DataSpec {
    pub fn source(&self) -> Result<Box<dyn DataSource>, DataError> {
        match self {
            DataSpec::Mixture { centers, sigma, quantize } => mixture(centers, *sigma, *quantize),
            DataSpec::Circle { k, radius, sigma, quantize } => mixture(&circle_centers(*k, *radius), *sigma, *quantize),
            DataSpec::Csv { .. } | DataSpec::Idx { .. } => Ok(Box::new(ResampleSource::new(self.dataset(0, 0)?))),
        }
    }

    /// A finite dataset; synthetic sources draw `n` points from the given seed.
    pub fn dataset(&self, n: usize, seed: u64) -> Result<Dataset, DataError> {
        match self {
            DataSpec::Csv { path } => {
                let name = path.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned());
                Dataset::read_csv(name, std::fs::File::open(path)?)
            }
            DataSpec::Idx { images, labels } => idx_read(images, labels.as_deref()),
            DataSpec::Mixture { .. } | DataSpec::Circle { .. } => {
                let mut src = self.source()?;
                let mut rng = RngStream::derive(seed, 2);
                let b = src.next_batch(n, &mut rng)?;
                let ds = Dataset::new("synthetic", src.dim(), b.x.into_data())?;
                match b.labels {
                    Some(l) => ds.with_labels(l, src.num_classes()),
                    None => Ok(ds),
                }
            }
        }
    }
}
