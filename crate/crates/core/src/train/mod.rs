//! Optimizer, training loop, checkpoints and the command implementations.

mod adam;
mod checkpoint;

use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;

use crate::autodiff::{grad_check, GradCheckReport, Tensor};
use crate::data::{embedding_provider, load_features, EmbeddingSpec, LongTailDataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{map_report, EvalReport};
use crate::losses::{Loss, LossSpec};
use crate::model::{BatchObjective, LinearBaseline, Model, ModelDims, ModelParams};

pub const TRAIN_FILE: &str = "train.cprf";
pub const TEST_FILE: &str = "test.cprf";
pub const FINAL_CHECKPOINT: &str = "final.cprc";
/// Finite differences over more parameters than this take too long.
pub const GRADCHECK_MAX_PARAMS: usize = 20_000;
const EVAL_CHUNK: usize = 64;
const STREAM_GRADCHECK: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Cprfl,
    /// Mean-pooled features into a linear classifier.
    Baseline,
}

impl ModelKind {
    fn is_default(&self) -> bool {
        *self == ModelKind::Cprfl
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss: LossSpec,
    pub dims: ModelDims,
    pub embedding: EmbeddingSpec,
    pub seed: u64,
    pub literal_equations: bool,
    #[serde(skip_serializing_if = "ModelKind::is_default")]
    pub model: ModelKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 5e-5,
            weight_decay: 1e-4,
            loss: LossSpec::default(),
            dims: ModelDims::default(),
            embedding: EmbeddingSpec::default(),
            seed: 0,
            literal_equations: false,
            model: ModelKind::Cprfl,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive and finite"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be >= 0 and finite"));
        }
        self.loss.resolve()?;
        match self.model {
            ModelKind::Cprfl => self.dims.validate(),
            ModelKind::Baseline if self.dims.d0 == 0 || self.dims.c == 0 => {
                Err(Error::invalid("baseline needs d0 >= 1 and c >= 1"))
            }
            ModelKind::Baseline => Ok(()),
        }
    }

    /// Fresh model for the given classes, seeded by `seed`.
    pub fn build_model(&self, class_names: &[String]) -> Result<Model> {
        self.validate()?;
        if class_names.len() != self.dims.c {
            return Err(Error::Mismatch(format!(
                "config has c = {}, dataset has {} classes",
                self.dims.c,
                class_names.len()
            )));
        }
        Ok(match self.model {
            ModelKind::Cprfl => {
                let emb = embedding_provider(&self.embedding, class_names)?;
                Model::Cprfl(ModelParams::init(self.dims.clone(), emb, self.literal_equations, self.seed)?)
            }
            ModelKind::Baseline => Model::Baseline(LinearBaseline::init(self.dims.d0, self.dims.c, self.seed)?),
        })
    }
}

/// Metrics logged after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0-based.
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub report: EvalReport,
}

/// Reads `train.cprf` and `test.cprf` from `dir`; the test split takes the
/// train split's frequency groups.
pub fn load_split(dir: &Path) -> Result<(LongTailDataset, LongTailDataset)> {
    let train = load_features(&dir.join(TRAIN_FILE))?;
    let test = load_features(&dir.join(TEST_FILE))?;
    if test.class_names != train.class_names {
        return Err(Error::Mismatch("train and test class names differ".into()));
    }
    let test = test.with_groups(train.groups.clone())?;
    Ok((train, test))
}

fn check_dataset(model: &Model, ds: &LongTailDataset, class_names: &[String]) -> Result<()> {
    if ds.class_names != class_names {
        return Err(Error::Mismatch("dataset class names differ from the model's".into()));
    }
    if let Some((v, d0)) = ds.feature_dims() {
        let (mv, md0) = model.input_dims();
        if d0 != md0 || mv.is_some_and(|mv| mv != v) {
            return Err(Error::Dimension {
                op: "dataset",
                lhs: vec![v, d0],
                rhs: vec![mv.unwrap_or(v), md0],
            });
        }
    }
    Ok(())
}

/// Deterministic forward over `ds` followed by the mAP report.
pub fn evaluate_model(model: &Model, ds: &LongTailDataset) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(ds.len() * ds.num_classes());
    for chunk in ds.samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        scores.extend(model.predict(&refs)?);
    }
    map_report(&scores, &ds.label_matrix(), ds.num_classes(), &ds.groups)
}

/// Evaluates a saved checkpoint on the test split found in `data`.
pub fn evaluate(checkpoint_path: &Path, data: &Path) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let (_, test) = load_split(data)?;
    check_dataset(&ckpt.model, &test, &ckpt.class_names)?;
    evaluate_model(&ckpt.model, &test)
}

fn embedding_hash(model: &Model) -> Option<u64> {
    model.embedding().map(|e| {
        let mut h = DefaultHasher::new();
        e.weights.shape().hash(&mut h);
        e.weights.data().iter().for_each(|x| x.to_bits().hash(&mut h));
        h.finish()
    })
}

/// Training state over a fixed train/test pair.
pub struct Trainer<'a> {
    config: TrainConfig,
    loss: Loss,
    model: Model,
    adam: AdamState,
    class_names: Vec<String>,
    epoch: usize,
    history: Vec<EpochRecord>,
    embedding_hash: Option<u64>,
    train: &'a LongTailDataset,
    test: &'a LongTailDataset,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, train: &'a LongTailDataset, test: &'a LongTailDataset) -> Result<Self> {
        let model = config.build_model(&train.class_names)?;
        let adam = AdamState::for_params(&model.learnable().iter().map(|(_, t)| *t).collect::<Vec<_>>());
        Self::assemble(config, model, adam, train.class_names.clone(), 0, Vec::new(), train, test)
    }

    /// Continues from a checkpoint; the remaining trajectory is identical to
    /// an uninterrupted run.
    pub fn resume(ckpt: Checkpoint, train: &'a LongTailDataset, test: &'a LongTailDataset) -> Result<Self> {
        Self::assemble(
            ckpt.config,
            ckpt.model,
            ckpt.adam,
            ckpt.class_names,
            ckpt.epoch,
            ckpt.history,
            train,
            test,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        model: Model,
        adam: AdamState,
        class_names: Vec<String>,
        epoch: usize,
        history: Vec<EpochRecord>,
        train: &'a LongTailDataset,
        test: &'a LongTailDataset,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        check_dataset(&model, train, &class_names)?;
        check_dataset(&model, test, &class_names)?;
        Ok(Trainer {
            loss: config.loss.resolve()?,
            embedding_hash: embedding_hash(&model),
            config,
            model,
            adam,
            class_names,
            epoch,
            history,
            train,
            test,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
        }
    }

    fn epoch_order(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One pass over the shuffled training set, then a test evaluation.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let order = self.epoch_order();
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &self.train.samples[i]).collect();
            let non_finite = Error::NonFiniteLoss {
                epoch: self.epoch,
                batch: b,
            };
            let (loss, grads) = match self.model.loss_and_grads(&batch, &self.loss) {
                Err(Error::NonFinite { .. }) => return Err(non_finite),
                other => other?,
            };
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(non_finite);
            }
            let mut params: Vec<&mut Tensor> = self.model.learnable_mut().into_iter().map(|(_, t)| t).collect();
            adam_step(
                &mut params,
                &grads,
                &mut self.adam,
                self.config.learning_rate,
                self.config.weight_decay,
            )?;
            total += loss;
            batches += 1;
        }
        if embedding_hash(&self.model) != self.embedding_hash {
            return Err(Error::Mismatch(format!("frozen embedding changed during epoch {}", self.epoch)));
        }
        let report = evaluate_model(&self.model, self.test)?;
        self.history.push(EpochRecord {
            epoch: self.epoch,
            train_loss: total / batches as f64,
            report,
        });
        self.epoch += 1;
        Ok(self.history.last().expect("just pushed"))
    }

    /// Trains until `config.epochs`. With `out_dir`, writes a checkpoint per
    /// epoch, `final.cprc`, `history.json` and `report.json`.
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.epoch < self.config.epochs {
            on_epoch(self.run_epoch()?);
            if let Some(dir) = out_dir {
                self.checkpoint().save(&dir.join(format!("epoch_{:03}.cprc", self.epoch)))?;
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
            write_json(&dir.join("history.json"), &self.history)?;
            if let Some(last) = self.history.last() {
                write_json(&dir.join("report.json"), &last.report)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Loads the split under `data`, trains, and returns the final checkpoint.
pub fn train(cfg: &TrainConfig, data: &Path, out_dir: &Path) -> Result<Checkpoint> {
    let (train, test) = load_split(data)?;
    let mut trainer = Trainer::new(cfg.clone(), &train, &test)?;
    trainer.run(Some(out_dir), |_| {})?;
    Ok(trainer.checkpoint())
}

#[derive(Clone, Debug)]
pub struct GradCheckOutcome {
    pub report: GradCheckReport,
    pub tolerance: f64,
    pub passed: bool,
}

/// Finite-difference check of every learnable tensor on one synthetic batch.
pub fn gradcheck_command(cfg: &TrainConfig, eps: f64, tolerance: f64) -> Result<GradCheckOutcome> {
    let names: Vec<String> = (0..cfg.dims.c).map(|i| format!("class_{i:02}")).collect();
    let model = cfg.build_model(&names)?;
    let count = model.param_count();
    if count > GRADCHECK_MAX_PARAMS {
        return Err(Error::invalid(format!(
            "gradcheck needs a tiny model: {count} parameters exceeds {GRADCHECK_MAX_PARAMS}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_GRADCHECK);
    let (v, d0, c) = (cfg.dims.v, cfg.dims.d0, cfg.dims.c);
    let samples = (0..cfg.batch_size.min(3))
        .map(|_| {
            let data = (0..v * d0).map(|_| rng.sample(StandardNormal)).collect();
            let mut labels: Vec<u8> = (0..c).map(|_| rng.gen_bool(0.3) as u8).collect();
            labels[rng.gen_range(0..c)] = 1;
            Sample::new(Tensor::matrix(v, d0, data)?, labels)
        })
        .collect::<Result<Vec<_>>>()?;
    let obj = BatchObjective {
        model: &model,
        samples: samples.iter().collect(),
        loss: cfg.loss.resolve()?,
    };
    let report = grad_check(&obj, &obj.names(), &obj.params(), eps)?;
    Ok(GradCheckOutcome {
        passed: report.max_rel_error < tolerance,
        report,
        tolerance,
    })
}
