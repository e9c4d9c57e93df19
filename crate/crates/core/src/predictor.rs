//! Residual convolutional regressor from a masked multi-channel field to
//! shim weights, trained by matching the RMSE its weights achieve to the
//! reference RMSE of each slice.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result, ShimError};
use crate::field::{Dataset, SliceRecord, Split, SplitRatio};
use crate::model_io::{self, ArchTag, ModelFile};
use crate::nn::{Init, ParamLayout};
use crate::objective::{quadrature_weights, rmse_from_residual_sum, MaskedSystem, ObjectiveParams, ShimWeights};
use crate::solvers::{restart_init, AdamHyper, AdamState};

pub const MIN_GRID: usize = 16;
pub const N_STAGES: usize = 4;
pub const BLOCKS_PER_STAGE: usize = 2;
/// Records per forward pass in batched inference.
const INFERENCE_CHUNK: usize = 32;
/// Percentile of the masked sample magnitudes mapped to 1 by the input scaling.
const INPUT_PERCENTILE: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Two planes per coil: real parts, then imaginary parts.
    pub input_channels: usize,
    pub grid: usize,
    pub outputs: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Architecture {
    pub fn new(input_channels: usize, grid: usize, width_base: usize) -> Result<Self> {
        if input_channels < 2 || !input_channels.is_multiple_of(2) {
            return invalid(format!(
                "input channels must be 2·coils, got {input_channels}"
            ));
        }
        if grid < MIN_GRID {
            return invalid(format!(
                "grid {grid} is too small for {N_STAGES} stride-2 stages (need >= {MIN_GRID})"
            ));
        }
        if width_base == 0 {
            return invalid("width_base must be >= 1");
        }
        Ok(Self {
            input_channels,
            grid,
            outputs: input_channels,
            widths: (0..N_STAGES).map(|s| width_base << s).collect(),
            blocks_per_stage: BLOCKS_PER_STAGE,
        })
    }

    pub fn n_coils(&self) -> usize {
        self.outputs / 2
    }

    fn layout(&self) -> ParamLayout {
        let mut l = ParamLayout::default();
        let w0 = self.widths[0];
        l.conv(w0, self.input_channels, 3, 1.0);
        l.affine(w0, 1.0);
        let mut cin = w0;
        for &w in &self.widths {
            for j in 0..self.blocks_per_stage {
                l.conv(w, cin, 3, 1.0);
                l.affine(w, 1.0);
                l.conv(w, w, 3, 1.0);
                l.affine(w, 0.0);
                if j == 0 {
                    l.conv(w, cin, 1, 1.0);
                    l.affine(w, 1.0);
                }
                cin = w;
            }
        }
        l.push(
            &[self.outputs, cin],
            Init::He {
                fan_in: cin,
                gain: 0.01,
            },
        );
        l.push(&[self.outputs], Init::Const(0.0));
        l
    }

    fn descriptor(&self) -> Vec<u32> {
        let mut d = vec![
            self.input_channels as u32,
            self.grid as u32,
            self.outputs as u32,
            self.widths.len() as u32,
            self.blocks_per_stage as u32,
        ];
        d.extend(self.widths.iter().map(|&w| w as u32));
        d
    }

    fn from_descriptor(d: &[u32]) -> Result<Self> {
        let bad = || ShimError::Corrupt(format!("bad predictor descriptor {d:?}"));
        if d.len() < 5 {
            return Err(bad());
        }
        let n_stages = d[3] as usize;
        if d.len() != 5 + n_stages || n_stages != N_STAGES {
            return Err(bad());
        }
        let arch = Self {
            input_channels: d[0] as usize,
            grid: d[1] as usize,
            outputs: d[2] as usize,
            blocks_per_stage: d[4] as usize,
            widths: d[5..].iter().map(|&w| w as usize).collect(),
        };
        if arch.outputs != arch.input_channels
            || arch.input_channels < 2
            || !arch.input_channels.is_multiple_of(2)
            || arch.grid < MIN_GRID
            || arch.blocks_per_stage == 0
            || arch.widths.contains(&0)
        {
            return Err(bad());
        }
        Ok(arch)
    }

    fn check_record(&self, record: &SliceRecord) -> Result<()> {
        if record.n() != self.grid || 2 * record.n_coils() != self.input_channels {
            return invalid(format!(
                "record {} is {}×{} with {} coils; model expects {}×{} with {} coils",
                record.slice_id,
                record.n(),
                record.n(),
                record.n_coils(),
                self.grid,
                self.grid,
                self.n_coils()
            ));
        }
        Ok(())
    }

    fn forward(&self, tape: &mut Tape, input: Var, vars: &[Var]) -> Result<Var> {
        let mut it = vars.iter().copied();
        let mut next = move || it.next().expect("layout and forward visit the same tensors");
        let mut x = tape.conv2d(input, next(), 1)?;
        x = tape.affine_channel(x, next(), next())?;
        x = tape.relu(x);
        for _ in &self.widths {
            for j in 0..self.blocks_per_stage {
                let stride = if j == 0 { 2 } else { 1 };
                let mut h = tape.conv2d(x, next(), stride)?;
                h = tape.affine_channel(h, next(), next())?;
                h = tape.relu(h);
                h = tape.conv2d(h, next(), 1)?;
                h = tape.affine_channel(h, next(), next())?;
                let skip = if j == 0 {
                    let p = tape.conv2d(x, next(), stride)?;
                    tape.affine_channel(p, next(), next())?
                } else {
                    x
                };
                let sum = tape.add(h, skip)?;
                x = tape.relu(sum);
            }
        }
        let pooled = tape.global_avg_pool(x)?;
        tape.dense(pooled, next(), next())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorModel {
    arch: Architecture,
    params: Vec<f64>,
}

/// Builds a freshly initialized predictor. The output bias starts at the
/// quadrature weights.
pub fn build_predictor(
    input_channels: usize,
    grid: usize,
    width_base: usize,
    seed: u64,
) -> Result<PredictorModel> {
    let arch = Architecture::new(input_channels, grid, width_base)?;
    let layout = arch.layout();
    let mut params = layout.init(&mut ChaCha8Rng::seed_from_u64(seed));
    let bias_at = params.len() - arch.outputs;
    params[bias_at..].copy_from_slice(&quadrature_weights(arch.n_coils()).to_real());
    Ok(PredictorModel { arch, params })
}

impl PredictorModel {
    pub fn from_parts(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        let expected = arch.layout().total();
        if params.len() != expected {
            return invalid(format!(
                "architecture needs {expected} parameters, got {}",
                params.len()
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ShimError::NonFinite("model parameters"));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn format_version(&self) -> u16 {
        model_io::VERSION
    }

    fn forward_batch(&self, inputs: &[&EncodedInput], tape: &mut Tape) -> Result<(Var, Vec<Var>)> {
        let a = &self.arch;
        let plane = a.input_channels * a.grid * a.grid;
        let mut data = Vec::with_capacity(inputs.len() * plane);
        for e in inputs {
            data.extend_from_slice(&e.planes);
        }
        let x = tape.leaf(&[inputs.len(), a.input_channels, a.grid, a.grid], data)?;
        let vars = a.layout().bind(tape, &self.params)?;
        let out = a.forward(tape, x, &vars)?;
        Ok((out, vars))
    }

    fn weights_from_outputs(&self, inputs: &[&EncodedInput], out: &[f64]) -> Result<Vec<ShimWeights>> {
        out.chunks_exact(self.arch.outputs)
            .zip(inputs)
            .map(|(o, e)| {
                let scaled: Vec<f64> = o.iter().map(|v| v / e.scale).collect();
                ShimWeights::from_real(&scaled)
            })
            .collect()
    }
}

/// Network input for one record: `2C` masked planes divided by `scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedInput {
    pub planes: Vec<f64>,
    pub scale: f64,
}

/// Real planes then imaginary planes, zero outside the mask, divided by the
/// 99th percentile of the masked sample magnitudes (1 if that is zero).
pub fn encode_input(record: &SliceRecord) -> EncodedInput {
    let nn = record.n() * record.n();
    let c = record.n_coils();
    let idx = record.mask.indices();
    let mut mags: Vec<f64> = (0..c)
        .flat_map(|k| idx.iter().map(move |&v| (k, v)))
        .map(|(k, v)| record.field.channel(k)[v].norm())
        .collect();
    let scale = if mags.is_empty() {
        1.0
    } else {
        let rank = ((INPUT_PERCENTILE * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
        let (_, p, _) = mags.select_nth_unstable_by(rank - 1, f64::total_cmp);
        if *p > 0.0 && p.is_finite() {
            *p
        } else {
            1.0
        }
    };
    let mut planes = vec![0.0; 2 * c * nn];
    for k in 0..c {
        let ch = record.field.channel(k);
        for &v in idx {
            planes[k * nn + v] = ch[v].re / scale;
            planes[(c + k) * nn + v] = ch[v].im / scale;
        }
    }
    EncodedInput { planes, scale }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub weights: ShimWeights,
    pub wall_time_s: f64,
}

pub fn predict(model: &PredictorModel, record: &SliceRecord) -> Result<Prediction> {
    let start = Instant::now();
    let mut w = predict_batch(model, &[record])?;
    Ok(Prediction {
        weights: w.pop().expect("one record in, one prediction out"),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Weights for many records, evaluated in fixed-size forward batches.
pub fn predict_batch(model: &PredictorModel, records: &[&SliceRecord]) -> Result<Vec<ShimWeights>> {
    for r in records {
        model.arch.check_record(r)?;
    }
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(INFERENCE_CHUNK) {
        let enc: Vec<EncodedInput> = chunk.iter().map(|r| encode_input(r)).collect();
        let refs: Vec<&EncodedInput> = enc.iter().collect();
        let mut tape = Tape::inference();
        let (y, _) = model.forward_batch(&refs, &mut tape)?;
        out.extend(model.weights_from_outputs(&refs, tape.value(y))?);
    }
    Ok(out)
}

/// A record prepared for repeated loss evaluation.
struct Sample {
    input: EncodedInput,
    system: MaskedSystem,
    ref_rmse: f64,
}

impl Sample {
    fn new(record: &SliceRecord) -> Result<Self> {
        let reference = record.reference().ok_or_else(|| {
            ShimError::InvalidArgument(format!("record {} has no reference", record.slice_id))
        })?;
        Ok(Self {
            input: encode_input(record),
            system: MaskedSystem::new(&record.field, &record.mask, &record.target)?,
            ref_rmse: reference.rmse_percent,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    /// Mean absolute difference between predicted and reference RMSE.
    pub loss: f64,
    /// Gradient of `loss` with respect to the flat parameter vector.
    pub grad: Vec<f64>,
    pub predicted_rmse: Vec<f64>,
}

/// Mean over the batch of `|RMSE(predicted weights) − RMSE(reference)|`,
/// with its parameter gradient.
pub fn rmse_matching_loss(model: &PredictorModel, records: &[&SliceRecord]) -> Result<LossOutput> {
    if records.is_empty() {
        return invalid("loss needs at least one record");
    }
    for r in records {
        model.arch.check_record(r)?;
    }
    let samples = records.iter().map(|r| Sample::new(r)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Sample> = samples.iter().collect();
    loss_and_grad(model, &refs)
}

/// Derivative of the RMSE head for one sample, in network output units.
fn rmse_head(sample: &Sample, out: &[f64]) -> Result<(f64, Vec<f64>)> {
    let scale = sample.input.scale;
    let b: Vec<f64> = out.iter().map(|v| v / scale).collect();
    let b = ShimWeights::from_real(&b)?;
    let (f, grad_f) = sample
        .system
        .objective_and_gradient(&b, &ObjectiveParams::default());
    let nv = sample.system.n_voxels() as f64;
    let rmse = rmse_from_residual_sum(f, sample.system.n_voxels());
    // d rmse / d b = 100² ∇f / (2 Nv rmse); zero at an exact fit
    let k = if rmse > 0.0 {
        1e4 / (2.0 * nv * rmse * scale)
    } else {
        0.0
    };
    Ok((rmse, grad_f.iter().map(|g| g * k).collect()))
}

fn loss_and_grad(model: &PredictorModel, batch: &[&Sample]) -> Result<LossOutput> {
    let inputs: Vec<&EncodedInput> = batch.iter().map(|s| &s.input).collect();
    let mut tape = Tape::new();
    let (y, vars) = model.forward_batch(&inputs, &mut tape)?;
    let outputs = model.arch.outputs;
    let inv_b = 1.0 / batch.len() as f64;
    let mut seed = Vec::with_capacity(batch.len() * outputs);
    let mut loss = 0.0;
    let mut predicted = Vec::with_capacity(batch.len());
    for (s, o) in batch.iter().zip(tape.value(y).chunks_exact(outputs)) {
        let (rmse, d) = rmse_head(s, o)?;
        let diff = rmse - s.ref_rmse;
        loss += diff.abs() * inv_b;
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        seed.extend(d.iter().map(|g| g * sign * inv_b));
        predicted.push(rmse);
    }
    tape.backward(y, &seed)?;
    Ok(LossOutput {
        loss,
        grad: model.arch.layout().gather_grads(&tape, &vars),
        predicted_rmse: predicted,
    })
}

fn batch_loss(model: &PredictorModel, batch: &[&Sample]) -> Result<f64> {
    let inputs: Vec<&EncodedInput> = batch.iter().map(|s| &s.input).collect();
    let mut tape = Tape::inference();
    let (y, _) = model.forward_batch(&inputs, &mut tape)?;
    let mut total = 0.0;
    for (s, o) in batch.iter().zip(tape.value(y).chunks_exact(model.arch.outputs)) {
        total += (rmse_head(s, o)?.0 - s.ref_rmse).abs();
    }
    Ok(total)
}

fn mean_loss(model: &PredictorModel, samples: &[Sample]) -> Result<f64> {
    let sums = samples
        .par_chunks(INFERENCE_CHUNK)
        .map(|chunk| {
            let refs: Vec<&Sample> = chunk.iter().collect();
            batch_loss(model, &refs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sums.iter().sum::<f64>() / samples.len() as f64)
}

/// RMSE (percent) achieved by the predicted weights on each record.
pub fn predicted_rmse(model: &PredictorModel, records: &[&SliceRecord]) -> Result<Vec<f64>> {
    let weights = predict_batch(model, records)?;
    records
        .iter()
        .zip(&weights)
        .map(|(r, w)| crate::objective::rmse_percent(&r.field, w, &r.mask, &r.target))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate factor applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    pub width_base: usize,
    /// Used when re-splitting for cross-validation folds.
    pub split: SplitRatio,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 50,
            seed: 0,
            width_base: 8,
            split: SplitRatio::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_decay_every == 0 || self.width_base == 0 {
            return invalid("batch_size, lr_decay_every and width_base must be positive");
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0) || !self.lr.is_finite() {
            return invalid("lr and lr_decay must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    /// Equality ignoring wall-time fields.
    pub fn same_values(&self, other: &TrainHistory) -> bool {
        self.best_epoch == other.best_epoch
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_loss.map(f64::to_bits) == b.val_loss.map(f64::to_bits)
                    && a.lr == b.lr
            })
    }
}

/// Scales the quadrature output bias so the initial combined magnitude
/// matches the mean target over the training samples.
fn calibrate_output_bias(model: &mut PredictorModel, samples: &[Sample]) {
    let q = quadrature_weights(model.arch.n_coils());
    let mut ratio = 0.0;
    let mut count = 0;
    for s in samples {
        let b = q.scaled((1.0 / s.input.scale).into());
        let mag: f64 = s.system.combine(&b).iter().map(|v| v.norm()).sum();
        let target: f64 = s.system.target().iter().sum();
        if mag > 0.0 {
            ratio += target / mag;
            count += 1;
        }
    }
    if count > 0 {
        let alpha = ratio / count as f64;
        let at = model.params.len() - model.arch.outputs;
        for (p, v) in model.params[at..].iter_mut().zip(q.to_real()) {
            *p = alpha * v;
        }
    }
}

const BIAS_STARTS: usize = 8;
const BIAS_STEPS: usize = 600;
const BIAS_SAMPLES: usize = 64;

/// Mean RMSE over `samples` of the constant output `w` and its gradient.
fn constant_output_rmse(samples: &[&Sample], w: &[f64]) -> (f64, Vec<f64>) {
    let params = ObjectiveParams::default();
    let mut grad = vec![0.0; w.len()];
    let mut total = 0.0;
    for s in samples {
        let b: Vec<f64> = w.iter().map(|v| v / s.input.scale).collect();
        let weights = ShimWeights::from_real(&b).expect("finite bias");
        let (f, g) = s.system.objective_and_gradient(&weights, &params);
        let rmse = rmse_from_residual_sum(f, s.system.n_voxels());
        total += rmse;
        if rmse > 0.0 {
            let k = 1e4 / (2.0 * s.system.n_voxels() as f64 * rmse * s.input.scale);
            for (gi, v) in grad.iter_mut().zip(&g) {
                *gi += k * v;
            }
        }
    }
    let n = samples.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (total / n, grad)
}

/// Replaces the output bias with the best constant output found by a few
/// Adam runs on a subset of the training samples. The calibrated bias is
/// always one of the candidates.
fn fit_output_bias(model: &mut PredictorModel, samples: &[Sample], seed: u64) {
    let stride = samples.len().div_ceil(BIAS_SAMPLES).max(1);
    let subset: Vec<&Sample> = samples.iter().step_by(stride).collect();
    if subset.is_empty() {
        return;
    }
    let at = model.params.len() - model.arch.outputs;
    let start = model.params[at..].to_vec();
    let radius = (start.iter().map(|v| v * v).sum::<f64>() / model.arch.n_coils() as f64).sqrt();
    let candidates: Vec<(f64, Vec<f64>)> = (0..BIAS_STARTS)
        .into_par_iter()
        .map(|i| {
            let mut w = if i == 0 {
                start.clone()
            } else {
                restart_init(seed, i, model.arch.n_coils())
                    .to_real()
                    .iter()
                    .map(|v| v * radius)
                    .collect()
            };
            let mut adam = AdamState::new(w.len(), AdamHyper {
                lr: 0.02 * radius,
                ..AdamHyper::default()
            });
            for _ in 0..BIAS_STEPS {
                let (_, g) = constant_output_rmse(&subset, &w);
                if adam.step(&mut w, &g).is_err() {
                    break;
                }
            }
            let (rmse, _) = constant_output_rmse(&subset, &w);
            (rmse, w)
        })
        .collect();
    let mut best = (constant_output_rmse(&subset, &start).0, start);
    for (rmse, w) in candidates {
        if rmse < best.0 && w.iter().all(|v| v.is_finite()) {
            best = (rmse, w);
        }
    }
    model.params[at..].copy_from_slice(&best.1);
}

/// Mini-batch Adam on the RMSE-matching loss over the dataset's train split.
/// Returns the parameters with the lowest validation loss (the last epoch's
/// when there is no validation split).
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(PredictorModel, TrainHistory)> {
    config.validate()?;
    let train_recs = dataset.records_in(Split::Train);
    if train_recs.is_empty() {
        return invalid("training split is empty");
    }
    let val_recs = dataset.records_in(Split::Val);
    let first = train_recs[0];
    let mut model = build_predictor(2 * first.n_coils(), first.n(), config.width_base, config.seed)?;
    for r in train_recs.iter().chain(&val_recs) {
        model.arch.check_record(r)?;
    }
    let prepare = |recs: &[&SliceRecord]| -> Result<Vec<Sample>> {
        recs.par_iter().map(|r| Sample::new(r)).collect()
    };
    let train_set = prepare(&train_recs)?;
    let val_set = prepare(&val_recs)?;
    calibrate_output_bias(&mut model, &train_set);
    fit_output_bias(&mut model, &train_set, config.seed);

    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, model.params.clone());
    let mut adam = AdamState::new(model.params.len(), AdamHyper {
        lr: config.lr,
        ..AdamHyper::default()
    });
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = config.lr_at(epoch);
        adam.hyper.lr = lr;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let out = loss_and_grad(&model, &batch)?;
            loss_sum += out.loss * batch.len() as f64;
            adam.step(&mut model.params, &out.grad)?;
            if model.params.iter().any(|p| !p.is_finite()) {
                return Err(ShimError::NonFinite("model parameters after update"));
            }
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(mean_loss(&model, &val_set)?)
        };
        let score = val_loss.unwrap_or(0.0);
        if val_loss.is_none() || score < best.0 {
            best = (score, model.params.clone());
            history.best_epoch = Some(epoch);
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    model.params = best.1;
    Ok((model, history))
}

pub fn save_model(model: &PredictorModel, path: impl AsRef<Path>) -> Result<()> {
    model_io::save_model_file(&to_file(model), path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PredictorModel> {
    from_file(model_io::load_model_file(path, ArchTag::Predictor)?)
}

pub fn encode_model(model: &PredictorModel) -> Vec<u8> {
    model_io::encode_model(&to_file(model))
}

pub fn decode_model(data: &[u8]) -> Result<PredictorModel> {
    from_file(model_io::decode_model(data, ArchTag::Predictor)?)
}

fn to_file(model: &PredictorModel) -> ModelFile {
    ModelFile {
        tag: ArchTag::Predictor,
        descriptor: model.arch.descriptor(),
        params: model.params.clone(),
    }
}

fn from_file(file: ModelFile) -> Result<PredictorModel> {
    let arch = Architecture::from_descriptor(&file.descriptor)?;
    let expected = arch.layout().total();
    if file.params.len() != expected {
        return Err(ShimError::Corrupt(format!(
            "descriptor implies {expected} parameters, file has {}",
            file.params.len()
        )));
    }
    Ok(PredictorModel {
        arch,
        params: file.params,
    })
}
