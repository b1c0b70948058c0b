use rand::seq::SliceRandom;
use serde::Serialize;

use crate::augment::test_transform;
use crate::error::{invalid_config, invalid_input, Result};
use crate::image::Image;
use crate::linalg::argmax;
use crate::losses::LossBreakdown;
use crate::model::Vit;
use crate::params::Params;
use crate::rng::{rng_from, sample_seed, ViewTag};

use super::{Mode, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    MeanPerClass,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_per_class: f64,
    /// `None` for classes with no examples in the split.
    pub per_class: Vec<Option<f64>>,
    pub absent_classes: Vec<usize>,
    pub count: usize,
}

impl EvalReport {
    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::MeanPerClass => self.mean_per_class,
        }
    }
}

/// Predicted class index for every image under the test transform.
pub fn predict(vit: &Vit, params: &Params, images: &[Image]) -> Result<Vec<usize>> {
    let size = vit.config().image_size;
    images
        .iter()
        .map(|img| {
            let x = test_transform(img, size)?;
            let v = vit.image_feature(params, &x)?;
            Ok(argmax(&vit.classify_params(params, &v)?))
        })
        .collect()
}

/// Scores predictions against labels.
pub fn evaluate_report(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(invalid_input("prediction and label counts differ"));
    }
    if labels.is_empty() {
        return Err(invalid_input("cannot evaluate an empty split"));
    }
    let mut total = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= num_classes {
            return Err(invalid_input(format!("label {y} out of range for {num_classes} classes")));
        }
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = total
        .iter()
        .zip(&correct)
        .map(|(&t, &c)| (t > 0).then(|| c as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(EvalReport {
        accuracy: correct.iter().sum::<usize>() as f64 / labels.len() as f64,
        mean_per_class: present.iter().sum::<f64>() / present.len() as f64,
        absent_classes: per_class.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(k, _)| k).collect(),
        per_class,
        count: labels.len(),
    })
}

/// Runs the classifier on `images` and scores it.
pub fn evaluate(vit: &Vit, params: &Params, images: &[Image], labels: &[usize]) -> Result<EvalReport> {
    let preds = predict(vit, params, images)?;
    evaluate_report(&preds, labels, vit.config().num_classes)
}

/// Images for one run. In transductive mode the test images are also the
/// training data and `train` may be empty.
#[derive(Debug, Clone, Copy)]
pub struct AdaptData<'a> {
    pub train: &'a [Image],
    pub test: &'a [Image],
    /// Labels of `test`, used for reporting only.
    pub test_labels: &'a [usize],
}

impl<'a> AdaptData<'a> {
    /// The images the student is trained on under `mode`.
    pub fn training_images(&self, mode: Mode) -> &'a [Image] {
        match mode {
            Mode::Standard => self.train,
            Mode::Transductive => self.test,
        }
    }
}

/// Callbacks invoked by [`adapt`]. Errors abort the run.
pub trait AdaptHooks {
    fn on_step(&mut self, _trainer: &Trainer, _lr: f64, _loss: &LossBreakdown) -> Result<()> {
        Ok(())
    }

    fn on_eval(&mut self, _trainer: &Trainer, _report: &EvalReport) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _trainer: &Trainer, _epoch: u64) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl AdaptHooks for NoHooks {}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptReport {
    pub initial: Option<EvalReport>,
    pub evals: Vec<(u64, EvalReport)>,
    pub final_eval: Option<EvalReport>,
    pub teacher_final: Option<EvalReport>,
    /// Inferred test labels after training, filled in transductive mode.
    pub inferred_labels: Option<Vec<usize>>,
    pub steps: u64,
    pub clamp_warnings: u64,
}

/// Trains from the trainer's current step until the configured number of
/// epochs is done, or until `max_steps` total steps have been taken.
/// Evaluates on the test split before training (when starting from step 0)
/// and after each epoch.
pub fn adapt(trainer: &mut Trainer, data: &AdaptData, max_steps: Option<u64>, hooks: &mut dyn AdaptHooks) -> Result<AdaptReport> {
    let mode = trainer.config().mode;
    let train = data.training_images(mode);
    if train.is_empty() {
        return Err(invalid_config(match mode {
            Mode::Standard => "standard mode needs a non-empty train split",
            Mode::Transductive => "transductive mode needs a non-empty test split",
        }));
    }
    if data.test.len() != data.test_labels.len() {
        return Err(invalid_input("test images and labels differ in count"));
    }
    let expected = train.len().div_ceil(trainer.config().batch_size) as u64;
    if trainer.steps_per_epoch != expected {
        return Err(invalid_config(format!(
            "trainer was built for {} steps per epoch but the data gives {expected}",
            trainer.steps_per_epoch
        )));
    }
    let labeled = !data.test.is_empty();
    let eval = |t: &Trainer, params: &Params| -> Result<Option<EvalReport>> {
        if labeled {
            evaluate(t.vit(), params, data.test, data.test_labels).map(Some)
        } else {
            Ok(None)
        }
    };

    let mut report = AdaptReport {
        initial: None,
        evals: Vec::new(),
        final_eval: None,
        teacher_final: None,
        inferred_labels: None,
        steps: 0,
        clamp_warnings: 0,
    };
    if trainer.step == 0 {
        report.initial = eval(trainer, &trainer.params)?;
        if let Some(r) = &report.initial {
            hooks.on_eval(trainer, r)?;
        }
    }

    let total = trainer.total_steps();
    let stop = max_steps.map_or(total, |m| m.min(total));
    let batch_size = trainer.config().batch_size;
    let seed = trainer.config().seed;
    while trainer.step < stop {
        let epoch = trainer.current_epoch();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_from(sample_seed(seed, epoch, 0, ViewTag::Shuffle)));
        let first = (trainer.step % trainer.steps_per_epoch) as usize;
        for chunk in order.chunks(batch_size).skip(first) {
            if trainer.step >= stop {
                break;
            }
            let images: Vec<&Image> = chunk.iter().map(|&i| &train[i]).collect();
            let lr = trainer.current_lr();
            let loss = trainer.train_step(&images, chunk, epoch)?;
            report.steps += 1;
            hooks.on_step(trainer, lr, &loss)?;
        }
        if trainer.step.is_multiple_of(trainer.steps_per_epoch) {
            if let Some(r) = eval(trainer, &trainer.params)? {
                hooks.on_eval(trainer, &r)?;
                report.evals.push((trainer.step, r));
            }
            hooks.on_epoch_end(trainer, epoch)?;
        }
    }

    report.final_eval = match report.evals.last() {
        Some((s, r)) if *s == trainer.step => Some(r.clone()),
        _ if trainer.step == 0 => report.initial.clone(),
        _ => eval(trainer, &trainer.params)?,
    };
    report.teacher_final = eval(trainer, &trainer.teacher.delta)?;
    if mode == Mode::Transductive {
        report.inferred_labels = Some(predict(trainer.vit(), &trainer.params, data.test)?);
    }
    report.clamp_warnings = trainer.clamp_warnings;
    Ok(report)
}
