//! Minibatch training with logging and checkpoint output.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{ModelKind, Network};
use crate::nn;
use crate::optim::{Optimizer, OptimizerConfig, Schedule};
use crate::tensor::DenseTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// IDX files; the directory may also come from the command line.
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Gaussian clusters sized to the network input.
    Blobs {
        classes: usize,
        per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        separation: f64,
    },
}

fn default_test_per_class() -> usize {
    100
}

fn default_batch() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    #[serde(default)]
    pub model: ModelKind,
    /// Falls back to the architecture's default rank.
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub seed: Option<u64>,
    pub dataset: DatasetSource,
}

impl TrainConfig {
    /// Parses a config whose `arch` is either inline or a path relative to
    /// `base_dir`. Schema errors carry a JSON pointer.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Schema {
            pointer: String::new(),
            message: e.to_string(),
        })?;
        let arch = match value.get("arch") {
            Some(serde_json::Value::String(p)) => {
                let path = base_dir.join(p);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::Schema {
                    pointer: "/arch".into(),
                    message: format!("{}: {e}", path.display()),
                })?;
                Some(ArchSpec::from_json(&text)?)
            }
            Some(v @ serde_json::Value::Object(_)) => {
                Some(ArchSpec::from_json(&v.to_string()).map_err(|e| match e {
                    Error::Schema { pointer, message } => Error::Schema {
                        pointer: format!("/arch{pointer}"),
                        message,
                    },
                    other => other,
                })?)
            }
            _ => None,
        };
        if let (Some(arch), Some(obj)) = (&arch, value.as_object_mut()) {
            obj.insert(
                "arch".into(),
                serde_json::to_value(arch).map_err(|e| Error::Format(e.to_string()))?,
            );
        }
        let config: TrainConfig = serde_path_to_error::deserialize(value).map_err(|e| Error::Schema {
            pointer: crate::arch::path_to_pointer(e.path()),
            message: e.inner().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let schema = |pointer: &str, message: &str| {
            Err(Error::Schema {
                pointer: pointer.into(),
                message: message.into(),
            })
        };
        if self.batch_size == 0 {
            return schema("/batch_size", "must be >= 1");
        }
        if self.rank == Some(0) {
            return schema("/rank", "must be >= 1");
        }
        let lr = self.optimizer.lr();
        if !(lr.is_finite() && lr >= 0.0) || self.optimizer.validate().is_err() {
            return schema("/optimizer", "rates must be finite and non-negative, betas in [0, 1)");
        }
        if let Schedule::StepDecay { gamma, .. } = self.schedule {
            if !(gamma.is_finite() && gamma > 0.0) {
                return schema("/schedule/gamma", "must be positive");
            }
        }
        if let DatasetSource::Blobs {
            classes, separation, ..
        } = self.dataset
        {
            if classes < 2 {
                return schema("/dataset/classes", "must be >= 2");
            }
            if !(separation.is_finite() && separation >= 0.0) {
                return schema("/dataset/separation", "must be finite and non-negative");
            }
        }
        self.arch.validate()
    }

    pub fn rank(&self) -> usize {
        self.rank.unwrap_or(self.arch.defaults.rank)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Builds the network this config describes, seeded from the run seed.
    pub fn build_network(&self) -> Result<Network> {
        Network::from_arch(&self.arch, self.model, self.rank(), self.seed())
    }

    /// Materialises the train and test sets. `data_dir` overrides the MNIST
    /// directory in the config.
    pub fn load_datasets(&self, data_dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSource::Mnist {
                dir,
                train_limit,
                test_limit,
            } => {
                let dir = data_dir
                    .map(Path::to_path_buf)
                    .or_else(|| dir.clone())
                    .ok_or_else(|| Error::invalid("MNIST needs a data directory"))?;
                let (train, test) = data::load_mnist_dir(dir)?;
                let limit = |d: Dataset, n: &Option<usize>| n.map_or(d.clone(), |n| d.take(n));
                Ok((limit(train, train_limit), limit(test, test_limit)))
            }
            DatasetSource::Blobs {
                classes,
                per_class,
                test_per_class,
                separation,
            } => {
                let net = self.build_network()?;
                let shape = [net.input_size()];
                let train = data::synthetic_blobs(*classes, *per_class, &shape, *separation, self.seed())?;
                let test = data::synthetic_blobs(*classes, *test_per_class, &shape, *separation, self.seed() ^ 0x7e57)?;
                Ok((train, test))
            }
        }
    }
}

/// One CSV row. Epoch 0 is the evaluation before any update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_err: f64,
    pub test_err: f64,
    /// Mean minibatch loss over the epoch; the full training loss at epoch 0.
    pub loss: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self, timestamps: bool) -> String {
        let mut out = String::from("epoch,train_err,test_err,loss,wall_time\n");
        for r in &self.rows {
            let t = if timestamps {
                format!("{:.3}", r.wall_time)
            } else {
                "0".into()
            };
            out.push_str(&format!("{},{},{},{},{t}\n", r.epoch, r.train_err, r.test_err, r.loss));
        }
        out
    }

    pub fn best_train_accuracy(&self) -> Option<f64> {
        self.rows.iter().map(|r| 1.0 - r.train_err).reduce(f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    /// Final parameters, or the last finite ones if training aborted.
    pub network: Network,
    pub aborted: Option<String>,
}

const EVAL_CHUNK: usize = 256;

/// Classification error and mean loss over a whole dataset.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut wrong, mut loss) = (0usize, 0.0);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk)?;
        let logits = net.forward(&x)?;
        let pred = nn::argmax_rows(&logits);
        wrong += pred.iter().zip(&y).filter(|(p, t)| p != t).count();
        loss += nn::softmax_xent(&logits, &y)?.0 * chunk.len() as f64;
    }
    let n = data.len() as f64;
    Ok((wrong as f64 / n, loss / n))
}

fn check_data(net: &Network, data: &Dataset, what: &str) -> Result<()> {
    if data.sample_size() != net.input_size() {
        return Err(Error::shape(format!(
            "{what} samples hold {} values, network expects {}",
            data.sample_size(),
            net.input_size()
        )));
    }
    if data.classes() > net.output_size() {
        return Err(Error::shape(format!(
            "{what} has {} classes, network emits {}",
            data.classes(),
            net.output_size()
        )));
    }
    Ok(())
}

pub fn train(config: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    train_with(config, config.build_network()?, train_set, test_set, |_| {})
}

/// Trains `net` in place of a freshly built one, reporting every row.
pub fn train_with(
    config: &TrainConfig,
    mut net: Network,
    train_set: &Dataset,
    test_set: &Dataset,
    mut on_row: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_data(&net, train_set, "training set")?;
    check_data(&net, test_set, "test set")?;
    let start = Instant::now();
    let mut log = TrainLog::default();
    let mut push = |log: &mut TrainLog, row: EpochLog| {
        on_row(&row);
        log.rows.push(row);
    };
    let (train_err, init_loss) = evaluate(&net, train_set)?;
    let (test_err, _) = evaluate(&net, test_set)?;
    push(
        &mut log,
        EpochLog {
            epoch: 0,
            train_err,
            test_err,
            loss: init_loss,
            wall_time: start.elapsed().as_secs_f64(),
        },
    );

    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed() ^ 0x5348_5546);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut params: Vec<DenseTensor> = net.params().into_iter().cloned().collect();
    let mut aborted = None;
    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let lr = config.schedule.lr_at(config.optimizer.lr(), epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (x, y) = train_set.batch(batch)?;
            let (loss, grads) = net.loss_and_grad(&x, &y)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                aborted = Some(format!("non-finite loss {loss} in epoch {epoch}"));
                break 'epochs;
            }
            let mut next = params.clone();
            opt.step(&mut next, &grads, lr)?;
            if next.iter().any(|p| !p.is_finite()) {
                aborted = Some(format!("non-finite parameters in epoch {epoch}"));
                break 'epochs;
            }
            net.set_params(&next)?;
            params = next;
            loss_sum += loss * batch.len() as f64;
        }
        let (train_err, _) = evaluate(&net, train_set)?;
        let (test_err, _) = evaluate(&net, test_set)?;
        push(
            &mut log,
            EpochLog {
                epoch,
                train_err,
                test_err,
                loss: loss_sum / train_set.len().max(1) as f64,
                wall_time: start.elapsed().as_secs_f64(),
            },
        );
    }
    Ok(TrainOutcome {
        log,
        network: net,
        aborted,
    })
}
