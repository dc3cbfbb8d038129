//! Block-to-block distillation: train an SPD-mode copy of one block so its
//! output matches the fully synchronized block on cached block inputs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::CalibrationSet;
use crate::error::{Result, SpdError};
use crate::model::{BlockVars, DecoderBlockWeights, Model, ModelConfig};
use crate::optim::Adam;
use crate::parallel::{
    shard_block, spd_block_on, tp_block_forward, Ablation, DeviceMesh, ParallelModel, ShardVars, SyncPlan,
};
use crate::tensor::{Elem, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillHyper {
    pub lr: Elem,
    pub epochs: usize,
    pub beta1: Elem,
    pub beta2: Elem,
    pub eps: Elem,
}

impl Default for DistillHyper {
    fn default() -> Self {
        Self { lr: 5e-5, epochs: 10, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Which prefix produces the cached inputs of the block being distilled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixMode {
    /// Original parameters, every earlier block fully synchronized.
    #[default]
    AllTp,
    /// The partially converted model and plan built so far.
    Converted,
}

/// Hidden states entering block `index` for each calibration sample, with
/// blocks `0..index` run in TP mode on the model's own parameters.
pub fn cache_block_inputs(model: &Model, calib: &CalibrationSet, index: usize, devices: usize) -> Result<Vec<Tensor>> {
    cache_block_inputs_with_plan(model, &SyncPlan::all_tp(model.n_layers()), calib, index, devices)
}

/// Like [`cache_block_inputs`] but running the prefix under `plan`.
pub fn cache_block_inputs_with_plan(
    model: &Model,
    plan: &SyncPlan,
    calib: &CalibrationSet,
    index: usize,
    devices: usize,
) -> Result<Vec<Tensor>> {
    if index >= model.n_layers() {
        return Err(SpdError::Config(format!("block {index} out of range for {} blocks", model.n_layers())));
    }
    let exec = ParallelModel::new(model, plan, devices)?;
    calib.samples.iter().map(|s| exec.block_input(s, index)).collect()
}

#[derive(Debug, Clone)]
pub struct DistillJob {
    pub block_index: usize,
    pub config: ModelConfig,
    pub devices: usize,
    /// Frozen TP-mode parameters.
    pub teacher: DecoderBlockWeights,
    /// Trainable SPD-mode parameters, initialized from the teacher.
    pub student: DecoderBlockWeights,
    pub inputs: Vec<Tensor>,
    pub hyper: DistillHyper,
}

impl DistillJob {
    pub fn new(
        config: &ModelConfig,
        block_index: usize,
        teacher: DecoderBlockWeights,
        inputs: Vec<Tensor>,
        devices: usize,
        hyper: DistillHyper,
    ) -> Result<Self> {
        config.check_devices(devices)?;
        if inputs.is_empty() {
            return Err(SpdError::Data("distillation needs at least one cached input".into()));
        }
        Ok(Self {
            block_index,
            config: config.clone(),
            devices,
            student: teacher.clone(),
            teacher,
            inputs,
            hyper,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillStats {
    pub block: usize,
    /// Mean loss over all cached inputs before the first step.
    pub initial_loss: f64,
    /// Mean loss over all cached inputs after the last step.
    pub final_loss: f64,
    /// Mean per-step loss within each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: DecoderBlockWeights,
    pub stats: DistillStats,
}

/// MSE between the SPD output of the block held in `vars` and `target`,
/// with the same input replicated on every device.
pub fn distill_loss_on(
    tape: &mut Tape,
    vars: &BlockVars,
    x: &Tensor,
    target: &Tensor,
    config: &ModelConfig,
    devices: usize,
) -> Result<Var> {
    let shards = ShardVars::slice_from(tape, vars, config, devices)?;
    let xv = tape.constant(x.clone());
    let mut mesh = DeviceMesh::new(devices)?;
    let out = spd_block_on(tape, &mut mesh, &shards, &vec![xv; devices], Ablation::default(), 0, config)?;
    let tv = tape.constant(target.clone());
    tape.mse(out[0], tv)
}

fn teacher_targets(job: &DistillJob) -> Result<Vec<Tensor>> {
    let shard = shard_block(&job.teacher, &job.config, job.devices, None)?;
    let mut mesh = DeviceMesh::new(job.devices)?;
    job.inputs.iter().map(|x| tp_block_forward(&shard, x, &mut mesh, job.block_index)).collect()
}

fn mean_loss(job: &DistillJob, student: &DecoderBlockWeights, targets: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for (x, t) in job.inputs.iter().zip(targets) {
        let mut tape = Tape::new();
        let vars = BlockVars::load(&mut tape, student, false);
        let loss = distill_loss_on(&mut tape, &vars, x, t, &job.config, job.devices)?;
        total += tape.value(loss).item() as f64;
    }
    Ok(total / targets.len() as f64)
}

/// Adam on the student, one cached sample per step, for `hyper.epochs`
/// passes over the inputs in their stored order.
pub fn distill_block(job: DistillJob) -> Result<DistillOutcome> {
    let diverged = |step: usize, block: usize| move |e: SpdError| match e {
        SpdError::NonFinite(_) => SpdError::Diverged { step, block: Some(block) },
        other => other,
    };
    let targets = teacher_targets(&job)?;
    let initial_loss = mean_loss(&job, &job.student, &targets)?;
    let mut student = job.student.clone();
    let mut adam = Adam::new(job.hyper.lr);
    adam.beta1 = job.hyper.beta1;
    adam.beta2 = job.hyper.beta2;
    adam.eps = job.hyper.eps;
    let mut epoch_losses = Vec::with_capacity(job.hyper.epochs);
    let mut step = 0;
    for _ in 0..job.hyper.epochs {
        let mut sum = 0.0;
        for (x, t) in job.inputs.iter().zip(&targets) {
            let mut tape = Tape::new();
            let vars = BlockVars::load(&mut tape, &student, true);
            let loss = distill_loss_on(&mut tape, &vars, x, t, &job.config, job.devices)
                .map_err(diverged(step, job.block_index))?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(SpdError::Diverged { step, block: Some(job.block_index) });
            }
            sum += value as f64;
            let grads = tape.backward(loss)?;
            let mut params = student.tensors_mut();
            let g: Vec<Tensor> = vars
                .ordered()
                .iter()
                .zip(params.iter())
                .map(|(&v, p)| grads.get_or_zeros(v, p))
                .collect();
            adam.update(&mut params, &g)?;
            step += 1;
        }
        epoch_losses.push(sum / job.inputs.len() as f64);
    }
    let final_loss = mean_loss(&job, &student, &targets).map_err(diverged(step, job.block_index))?;
    Ok(DistillOutcome {
        student,
        stats: DistillStats { block: job.block_index, initial_loss, final_loss, epoch_losses, steps: step },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::sample_calibration;
    use crate::model::init_model;

    fn setup() -> (Model, CalibrationSet) {
        let cfg = ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 4,
            head_dim: 4,
            d_ff: 32,
            vocab_size: 20,
            max_seq: 16,
            ..ModelConfig::default()
        };
        let model = init_model(&cfg, 5).unwrap();
        let stream: Vec<u32> = (0..200).map(|i| (i * 7 + i / 3) % 20).collect();
        (model, sample_calibration(&stream, 3, 8, 1).unwrap())
    }

    #[test]
    fn first_block_inputs_are_embeddings() {
        let (m, calib) = setup();
        let cached = cache_block_inputs(&m, &calib, 0, 2).unwrap();
        for (s, x) in calib.samples.iter().zip(&cached) {
            for (t, &tok) in s.iter().enumerate() {
                let expect: Vec<Elem> =
                    m.embed.row(tok as usize).iter().zip(m.pos.row(t)).map(|(a, b)| a + b).collect();
                assert_eq!(x.row(t), expect.as_slice());
            }
        }
        assert_eq!(cached, cache_block_inputs(&m, &calib, 0, 2).unwrap());
        assert!(matches!(cache_block_inputs(&m, &calib, 3, 2), Err(SpdError::Config(_))));
    }

    #[test]
    fn single_device_distillation_is_a_no_op() {
        let (m, calib) = setup();
        let inputs = cache_block_inputs(&m, &calib, 1, 1).unwrap();
        let job = DistillJob::new(&m.config, 1, m.blocks[1].clone(), inputs, 1, DistillHyper::default()).unwrap();
        let out = distill_block(job).unwrap();
        assert!(out.stats.initial_loss <= 1e-20, "{}", out.stats.initial_loss);
        let drift = out.student.wq.max_abs_diff(&m.blocks[1].wq).unwrap();
        assert!(drift <= 1e-12, "{drift}");
    }

    #[test]
    fn zero_epochs_returns_teacher() {
        let (m, calib) = setup();
        let inputs = cache_block_inputs(&m, &calib, 2, 2).unwrap();
        let hyper = DistillHyper { epochs: 0, ..DistillHyper::default() };
        let job = DistillJob::new(&m.config, 2, m.blocks[2].clone(), inputs, 2, hyper).unwrap();
        let out = distill_block(job).unwrap();
        assert_eq!(out.student, m.blocks[2]);
        assert_eq!(out.stats.steps, 0);
    }

    #[test]
    fn training_reduces_loss_and_keeps_teacher() {
        let (m, calib) = setup();
        let inputs = cache_block_inputs(&m, &calib, 1, 4).unwrap();
        let hyper = DistillHyper { lr: 1e-3, epochs: 5, ..DistillHyper::default() };
        let teacher_hash = m.blocks[1].fingerprint();
        let job = DistillJob::new(&m.config, 1, m.blocks[1].clone(), inputs, 4, hyper).unwrap();
        assert_eq!(job.student, job.teacher);
        let out = distill_block(job.clone()).unwrap();
        assert_eq!(job.teacher.fingerprint(), teacher_hash);
        assert!(out.stats.initial_loss > 0.0);
        assert!(out.stats.final_loss < out.stats.initial_loss);
        assert_eq!(out.stats.epoch_losses.len(), 5);
        assert_eq!(out.stats.steps, 15);
    }
}
