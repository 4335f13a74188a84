//! Joint end-to-end training of a DDNN, and the stand-alone single-device
//! baseline.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::aggregation::AggregationKind;
use super::branch::{stack_views, DeviceBranch};
use super::ddnn::{Architecture, DdnnModel};
use crate::data::{Dataset, MultiViewSample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::scalar::{argmax, Scalar};
use crate::tensor::block::Parameterized;
use crate::tensor::{one_hot, softmax_cross_entropy, AdamConfig, AdamState, BnConfig, Mode, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub filters: usize,
    pub local: AggregationKind,
    pub cloud: AggregationKind,
    pub exit_weights: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            filters: 4,
            local: AggregationKind::Max,
            cloud: AggregationKind::Concat,
            exit_weights: [1.0, 1.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.filters == 0 {
            return Err(Error::InvalidArgument(format!(
                "epochs ({}), batch size ({}) and filters ({}) must all be at least 1",
                self.epochs, self.batch_size, self.filters
            )));
        }
        Ok(())
    }

    pub fn architecture(&self, devices: usize) -> Architecture {
        Architecture {
            devices,
            filters: self.filters,
            local: self.local,
            cloud: self.cloud,
            exit_weights: self.exit_weights,
            ..Architecture::default()
        }
    }
}

/// Training-set statistics of one epoch; accuracies in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub local_loss: f64,
    pub cloud_loss: f64,
    pub joint_loss: f64,
    pub local_acc: f64,
    pub cloud_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "local_loss", "cloud_loss", "joint_loss", "local_acc", "cloud_acc"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.6}", e.local_loss),
                format!("{:.6}", e.cloud_loss),
                format!("{:.6}", e.joint_loss),
                format!("{:.2}", e.local_acc),
                format!("{:.2}", e.cloud_acc),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn labels_of(samples: &[&MultiViewSample]) -> Vec<usize> {
    samples.iter().map(|s| s.global_label as usize).collect()
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    labels.iter().enumerate().filter(|(i, &l)| argmax(logits.row(*i)) == l).count()
}

/// Builds a model over `device_ids` from the config seed and trains it.
pub fn fit<T: Scalar>(dataset: &Dataset, device_ids: Vec<usize>, config: &TrainConfig) -> Result<(DdnnModel<T>, History)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = DdnnModel::new(config.architecture(device_ids.len()), device_ids, &mut rng)?;
    let history = train_with(&mut model, dataset, config, &mut rng)?;
    Ok((model, history))
}

/// Trains `model` in place; shuffling is seeded from `config.seed`.
pub fn train<T: Scalar>(model: &mut DdnnModel<T>, dataset: &Dataset, config: &TrainConfig) -> Result<History> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    train_with(model, dataset, config, &mut rng)
}

fn train_with<T: Scalar>(
    model: &mut DdnnModel<T>,
    dataset: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<History> {
    if dataset.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut adam = AdamState::new(config.adam);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = History::default();
    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        let (mut local_loss, mut cloud_loss, mut joint) = (0.0, 0.0, 0.0);
        let (mut local_ok, mut cloud_ok) = (0, 0);
        for batch in order.chunks(config.batch_size) {
            let samples: Vec<&MultiViewSample> = batch.iter().map(|&i| &dataset.samples[i]).collect();
            let labels = labels_of(&samples);
            let views = model.gather_views(&samples)?;
            let logits = model.forward_train(&views)?;
            let loss = model.joint_loss(&logits, &one_hot(&labels, model.arch.classes))?;
            model.backward(&loss.grad_local, &loss.grad_cloud)?;
            adam.step(&mut model.params_mut())?;
            model.rebinarize();
            model.zero_grad();
            let weight = batch.len() as f64;
            local_loss += loss.local.as_f64() * weight;
            cloud_loss += loss.cloud.as_f64() * weight;
            joint += loss.total.as_f64() * weight;
            local_ok += count_correct(&logits.local, &labels);
            cloud_ok += count_correct(&logits.cloud, &labels);
        }
        let n = dataset.len() as f64;
        history.epochs.push(EpochStats {
            epoch,
            local_loss: local_loss / n,
            cloud_loss: cloud_loss / n,
            joint_loss: joint / n,
            local_acc: 100.0 * local_ok as f64 / n,
            cloud_acc: 100.0 * cloud_ok as f64 / n,
        });
    }
    Ok(history)
}

/// A single device's branch trained on its own views only.
#[derive(Clone, Debug)]
pub struct IndividualModel<T> {
    pub device: usize,
    pub branch: DeviceBranch<T>,
}

/// Trains one device's ConvP + exit head on the samples where the object is
/// visible to it, labelled with that device's label.
pub fn train_individual<T: Scalar>(device: usize, dataset: &Dataset, config: &TrainConfig) -> Result<IndividualModel<T>> {
    config.validate()?;
    if device >= dataset.num_devices() {
        return Err(Error::InvalidArgument(format!(
            "device {} outside a {}-device dataset",
            device,
            dataset.num_devices()
        )));
    }
    let own: Vec<&MultiViewSample> = dataset.samples.iter().filter(|s| s.is_present(device)).collect();
    if own.is_empty() {
        return Err(Error::Empty("samples visible to the device"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut branch = DeviceBranch::new(&mut rng, config.filters, NUM_CLASSES, BnConfig::default());
    let mut adam = AdamState::new(config.adam);
    let mut order: Vec<usize> = (0..own.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let samples: Vec<&MultiViewSample> = batch.iter().map(|&i| own[i]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.device_labels[device] as usize).collect();
            let out = branch.forward(&stack_views(&samples, device)?, Mode::Train)?;
            let ce = softmax_cross_entropy(&out.scores, &one_hot(&labels, NUM_CLASSES))?;
            branch.backward(&ce.grad, None)?;
            adam.step(&mut branch.params_mut())?;
            branch.rebinarize();
            branch.zero_grad();
        }
    }
    Ok(IndividualModel { device, branch })
}

impl<T: Scalar> IndividualModel<T> {
    pub fn predict(&self, samples: &[&MultiViewSample]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let scores = self.branch.infer(&stack_views(chunk, self.device)?)?.scores;
            out.extend((0..chunk.len()).map(|i| argmax(scores.row(i))));
        }
        Ok(out)
    }

    /// Percent of samples whose global label the device alone predicts,
    /// counting samples where it sees only the blank view.
    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let samples: Vec<&MultiViewSample> = dataset.samples.iter().collect();
        let pred = self.predict(&samples)?;
        let ok = pred.iter().zip(&samples).filter(|(p, s)| **p == s.global_label as usize).count();
        Ok(100.0 * ok as f64 / dataset.len() as f64)
    }
}
