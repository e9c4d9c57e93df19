//! Non-uniformity field detector: a small strided convolutional classifier
//! over combined-field magnitude maps.
//!
//! Confidence is the logistic output with 1 meaning uniform.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result, ShimError};
use crate::field::{rotate_grid, Mask, SliceRecord};
use crate::model_io::{self, ArchTag, ModelFile};
use crate::nn::{Init, ParamLayout};
use crate::objective::{magnitude_map, ShimWeights};
use crate::solvers::{AdamHyper, AdamState};

pub const WIDTHS: [usize; 3] = [8, 16, 32];
pub const DEFAULT_THRESHOLD: f64 = 0.5;
const CONFIDENCE_FLOOR: f64 = 1e-15;
const BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Uniform,
    NonUniform,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Uniform => "uniform",
            Label::NonUniform => "non_uniform",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    SolverOutput,
    CorruptedWeights,
}

/// Thresholds of the labelling rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformityCriterion {
    /// Non-uniform when min/mean of the masked magnitude falls below this.
    pub min_ratio: f64,
    /// Non-uniform when the coefficient of variation exceeds this.
    pub max_cov: f64,
}

impl Default for UniformityCriterion {
    fn default() -> Self {
        Self {
            min_ratio: 0.15,
            max_cov: 0.35,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformityStats {
    pub min_over_mean: f64,
    pub cov: f64,
}

pub fn uniformity_stats(map: &[f64], mask: &Mask) -> Result<UniformityStats> {
    if map.len() != mask.n() * mask.n() {
        return invalid(format!(
            "map has {} values, mask is {}×{}",
            map.len(),
            mask.n(),
            mask.n()
        ));
    }
    let idx = mask.indices();
    if idx.is_empty() {
        return invalid("mask is empty");
    }
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&v| map[v]).sum::<f64>() / n;
    let min = idx.iter().map(|&v| map[v]).fold(f64::INFINITY, f64::min);
    let var = idx.iter().map(|&v| (map[v] - mean).powi(2)).sum::<f64>() / n;
    if !(mean > 0.0) {
        return Ok(UniformityStats {
            min_over_mean: 0.0,
            cov: f64::INFINITY,
        });
    }
    Ok(UniformityStats {
        min_over_mean: min / mean,
        cov: var.sqrt() / mean,
    })
}

impl UniformityCriterion {
    pub fn label_stats(&self, s: UniformityStats) -> Label {
        if s.min_over_mean < self.min_ratio || s.cov > self.max_cov {
            Label::NonUniform
        } else {
            Label::Uniform
        }
    }

    pub fn label(&self, map: &[f64], mask: &Mask) -> Result<Label> {
        Ok(self.label_stats(uniformity_stats(map, mask)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NfdSample {
    /// `|A b|` on the grid, zero outside the mask.
    pub map: Vec<f64>,
    pub mask: Mask,
    pub label: Label,
    pub source: SampleSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub uniform: usize,
    pub non_uniform: usize,
}

/// Corrupted-weight draws allowed per requested non-uniform sample.
pub const ATTEMPTS_PER_SAMPLE: usize = 50;

fn rotated(map: &[f64], mask: &Mask, q: u8) -> Result<(Vec<f64>, Mask)> {
    let n = mask.n();
    Ok((
        rotate_grid(map, n, q),
        Mask::new(n, rotate_grid(mask.as_slice(), n, q))?,
    ))
}

fn corrupt(weights: &ShimWeights, rng: &mut ChaCha8Rng) -> Result<ShimWeights> {
    let c = weights.len();
    let mut w = weights.values().to_vec();
    if rng.gen_bool(0.5) {
        for v in &mut w {
            *v = Complex64::from_polar(v.norm(), rng.gen_range(0.0..2.0 * PI));
        }
    } else {
        let k = rng.gen_range(2..=4).min(c);
        let mut coils: Vec<usize> = (0..c).collect();
        coils.shuffle(rng);
        for &i in &coils[..k] {
            w[i] = Complex64::new(0.0, 0.0);
        }
    }
    ShimWeights::new(w)
}

/// Labelled maps from records carrying reference weights.
///
/// Uniform samples are reference-weight maps (and their quarter-turn
/// rotations) that pass the criterion. Non-uniform samples come from
/// randomly corrupted reference weights (phase scrambling or zeroing 2–4
/// coils) that fail it. Uniform samples come first in the result.
pub fn synth_labeled_set(
    records: &[&SliceRecord],
    seed: u64,
    counts: SampleCounts,
    criterion: &UniformityCriterion,
) -> Result<Vec<NfdSample>> {
    if records.is_empty() {
        return invalid("no records to synthesize from");
    }
    let mut refs = Vec::with_capacity(records.len());
    for r in records {
        let reference = r.reference().ok_or_else(|| {
            ShimError::InvalidArgument(format!("record {} has no reference", r.slice_id))
        })?;
        refs.push(reference.weights.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(counts.uniform + counts.non_uniform);

    let mut candidates: Vec<(usize, u8)> = (0..records.len())
        .flat_map(|i| (0..4u8).map(move |q| (i, q)))
        .collect();
    candidates.shuffle(&mut rng);
    let mut produced = 0;
    for &(i, q) in &candidates {
        if produced == counts.uniform {
            break;
        }
        let r = records[i];
        let map = magnitude_map(&r.field, &refs[i], &r.mask)?;
        let (map, mask) = rotated(&map, &r.mask, q)?;
        if criterion.label(&map, &mask)? == Label::Uniform {
            out.push(NfdSample {
                map,
                mask,
                label: Label::Uniform,
                source: SampleSource::SolverOutput,
            });
            produced += 1;
        }
    }
    if produced < counts.uniform {
        return Err(ShimError::GenerationShortfall {
            class: "uniform",
            requested: counts.uniform,
            produced,
            attempts: candidates.len(),
        });
    }

    let budget = ATTEMPTS_PER_SAMPLE * counts.non_uniform;
    let mut produced = 0;
    let mut attempts = 0;
    while produced < counts.non_uniform && attempts < budget {
        attempts += 1;
        let i = rng.gen_range(0..records.len());
        let q = rng.gen_range(0..4u8);
        let r = records[i];
        let w = corrupt(&refs[i], &mut rng)?;
        let map = magnitude_map(&r.field, &w, &r.mask)?;
        let (map, mask) = rotated(&map, &r.mask, q)?;
        if criterion.label(&map, &mask)? == Label::NonUniform {
            out.push(NfdSample {
                map,
                mask,
                label: Label::NonUniform,
                source: SampleSource::CorruptedWeights,
            });
            produced += 1;
        }
    }
    if produced < counts.non_uniform {
        return Err(ShimError::GenerationShortfall {
            class: "non_uniform",
            requested: counts.non_uniform,
            produced,
            attempts,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NfdModel {
    grid: usize,
    params: Vec<f64>,
    pub threshold: f64,
}

fn conv_len(n: usize) -> usize {
    (n - 1) / 2 + 1
}

fn layout(grid: usize) -> ParamLayout {
    let mut l = ParamLayout::default();
    let mut cin = 1;
    let mut n = grid;
    for &w in &WIDTHS {
        l.conv(w, cin, 3, 1.0);
        l.affine(w, 1.0);
        cin = w;
        n = conv_len(n);
    }
    let fan_in = cin * n * n;
    l.push(&[1, fan_in], Init::He { fan_in, gain: 0.1 });
    l.push(&[1], Init::Const(0.0));
    l
}

pub fn build_nfd(grid: usize, seed: u64) -> Result<NfdModel> {
    if grid < 8 {
        return invalid(format!("detector grid must be >= 8, got {grid}"));
    }
    let params = layout(grid).init(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(NfdModel {
        grid,
        params,
        threshold: DEFAULT_THRESHOLD,
    })
}

impl NfdModel {
    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn forward(&self, tape: &mut Tape, maps: &[&[f64]]) -> Result<(Var, Vec<Var>)> {
        let n = self.grid;
        let mut data = Vec::with_capacity(maps.len() * n * n);
        for m in maps {
            if m.len() != n * n {
                return invalid(format!(
                    "map has {} values, detector expects {}×{}",
                    m.len(),
                    n,
                    n
                ));
            }
            data.extend(normalize(m));
        }
        let mut x = tape.leaf(&[maps.len(), 1, n, n], data)?;
        let vars = layout(n).bind(tape, &self.params)?;
        let mut it = vars.iter().copied();
        let mut next = move || it.next().expect("layout and forward visit the same tensors");
        for _ in WIDTHS {
            x = tape.conv2d(x, next(), 2)?;
            x = tape.affine_channel(x, next(), next())?;
            x = tape.relu(x);
        }
        let logit = tape.dense(x, next(), next())?;
        Ok((logit, vars))
    }

    fn logits(&self, maps: &[&[f64]]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let (y, _) = self.forward(&mut tape, maps)?;
        Ok(tape.value(y).to_vec())
    }
}

/// Divides by the grid mean so the input is invariant to field scale.
fn normalize(map: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let mean = map.iter().sum::<f64>() / map.len() as f64;
    let inv = if mean > 0.0 { 1.0 / mean } else { 1.0 };
    map.iter().map(move |v| v * inv)
}

fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(CONFIDENCE_FLOOR, 1.0 - CONFIDENCE_FLOOR)
}

/// `−[y log σ(z) + (1−y) log(1−σ(z))]` in a form that cannot overflow.
fn bce(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NfdTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for NfdTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NfdEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy on the training set after the epoch's updates.
    pub accuracy: f64,
}

fn target(label: Label) -> f64 {
    match label {
        Label::Uniform => 1.0,
        Label::NonUniform => 0.0,
    }
}

/// Mini-batch Adam on binary cross-entropy.
pub fn train_nfd(samples: &[NfdSample], config: &NfdTrainConfig) -> Result<(NfdModel, Vec<NfdEpoch>)> {
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return invalid("batch_size and lr must be positive");
    }
    let has = |l: Label| samples.iter().any(|s| s.label == l);
    if !has(Label::Uniform) || !has(Label::NonUniform) {
        return invalid("detector training needs both classes");
    }
    let grid = samples[0].mask.n();
    if samples.iter().any(|s| s.mask.n() != grid) {
        return invalid("all samples must share one grid size");
    }
    let mut model = build_nfd(grid, config.seed)?;
    let shape = layout(grid);
    let mut adam = AdamState::new(model.params.len(), AdamHyper {
        lr: config.lr,
        ..AdamHyper::default()
    });
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let maps: Vec<&[f64]> = chunk.iter().map(|&i| samples[i].map.as_slice()).collect();
            let mut tape = Tape::new();
            let (y, vars) = model.forward(&mut tape, &maps)?;
            let inv_b = 1.0 / chunk.len() as f64;
            let mut seed = Vec::with_capacity(chunk.len());
            for (&i, &z) in chunk.iter().zip(tape.value(y)) {
                let t = target(samples[i].label);
                loss_sum += bce(z, t);
                seed.push((sigmoid(z) - t) * inv_b);
            }
            tape.backward(y, &seed)?;
            adam.step(&mut model.params, &shape.gather_grads(&tape, &vars))?;
        }
        let acc = evaluate_nfd(&model, samples)?.accuracy();
        history.push(NfdEpoch {
            epoch,
            loss: loss_sum / samples.len() as f64,
            accuracy: acc,
        });
    }
    Ok((model, history))
}

/// Label and confidence (1 = uniform) for one magnitude map.
pub fn classify(model: &NfdModel, map: &[f64]) -> Result<(Label, f64)> {
    let conf = sigmoid(model.logits(&[map])?[0]);
    Ok((label_for(model, conf), conf))
}

fn label_for(model: &NfdModel, confidence: f64) -> Label {
    if confidence >= model.threshold {
        Label::Uniform
    } else {
        Label::NonUniform
    }
}

/// Confidences for many maps, evaluated in parallel batches.
pub fn confidences(model: &NfdModel, maps: &[&[f64]]) -> Result<Vec<f64>> {
    let parts = maps
        .par_chunks(BATCH)
        .map(|chunk| model.logits(chunk))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().map(sigmoid).collect())
}

/// Counts with non-uniform as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub mean_confidence_uniform: f64,
    pub mean_confidence_non_uniform: f64,
}

impl ConfusionMatrix {
    /// Builds the matrix from `(true label, predicted label, confidence)`.
    pub fn from_predictions(items: &[(Label, Label, f64)]) -> Self {
        let mut m = ConfusionMatrix::default();
        let (mut su, mut nu, mut sn, mut nn) = (0.0, 0usize, 0.0, 0usize);
        for &(truth, pred, conf) in items {
            match (truth, pred) {
                (Label::NonUniform, Label::NonUniform) => m.tp += 1,
                (Label::Uniform, Label::NonUniform) => m.fp += 1,
                (Label::Uniform, Label::Uniform) => m.tn += 1,
                (Label::NonUniform, Label::Uniform) => m.fn_ += 1,
            }
            match truth {
                Label::Uniform => {
                    su += conf;
                    nu += 1;
                }
                Label::NonUniform => {
                    sn += conf;
                    nn += 1;
                }
            }
        }
        m.mean_confidence_uniform = if nu > 0 { su / nu as f64 } else { f64::NAN };
        m.mean_confidence_non_uniform = if nn > 0 { sn / nn as f64 } else { f64::NAN };
        m
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn uniform_accuracy(&self) -> f64 {
        self.tn as f64 / (self.tn + self.fp) as f64
    }

    pub fn non_uniform_accuracy(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn confidence_separation(&self) -> f64 {
        self.mean_confidence_uniform - self.mean_confidence_non_uniform
    }
}

pub fn evaluate_nfd(model: &NfdModel, samples: &[NfdSample]) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return invalid("evaluation set is empty");
    }
    let maps: Vec<&[f64]> = samples.iter().map(|s| s.map.as_slice()).collect();
    let conf = confidences(model, &maps)?;
    let items: Vec<(Label, Label, f64)> = samples
        .iter()
        .zip(conf)
        .map(|(s, c)| (s.label, label_for(model, c), c))
        .collect();
    Ok(ConfusionMatrix::from_predictions(&items))
}

pub fn save_nfd(model: &NfdModel, path: impl AsRef<Path>) -> Result<()> {
    model_io::save_model_file(&to_file(model), path)
}

pub fn load_nfd(path: impl AsRef<Path>) -> Result<NfdModel> {
    from_file(model_io::load_model_file(path, ArchTag::Detector)?)
}

pub fn encode_nfd(model: &NfdModel) -> Vec<u8> {
    model_io::encode_model(&to_file(model))
}

pub fn decode_nfd(data: &[u8]) -> Result<NfdModel> {
    from_file(model_io::decode_model(data, ArchTag::Detector)?)
}

fn to_file(model: &NfdModel) -> ModelFile {
    let mut descriptor = vec![model.grid as u32, WIDTHS.len() as u32];
    descriptor.extend(WIDTHS.iter().map(|&w| w as u32));
    ModelFile {
        tag: ArchTag::Detector,
        descriptor,
        params: model.params.clone(),
    }
}

fn from_file(file: ModelFile) -> Result<NfdModel> {
    let d = &file.descriptor;
    let expected: Vec<u32> = WIDTHS.iter().map(|&w| w as u32).collect();
    if d.len() != 2 + WIDTHS.len() || d[1] as usize != WIDTHS.len() || d[2..] != expected[..] || d[0] < 8 {
        return Err(ShimError::Corrupt(format!("bad detector descriptor {d:?}")));
    }
    let grid = d[0] as usize;
    let total = layout(grid).total();
    if file.params.len() != total {
        return Err(ShimError::Corrupt(format!(
            "descriptor implies {total} parameters, file has {}",
            file.params.len()
        )));
    }
    Ok(NfdModel {
        grid,
        params: file.params,
        threshold: DEFAULT_THRESHOLD,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn criterion_arithmetic() {
        let c = UniformityCriterion::default();
        let s = |min_over_mean, cov| UniformityStats { min_over_mean, cov };
        assert_eq!(c.label_stats(s(0.6, 0.10)), Label::Uniform);
        assert_eq!(c.label_stats(s(0.02, 0.10)), Label::NonUniform);
        assert_eq!(c.label_stats(s(0.5, 0.36)), Label::NonUniform);
        assert_eq!(c.label_stats(s(0.15, 0.35)), Label::Uniform);
    }

    #[test]
    fn stats_on_small_map() {
        let mask = Mask::new(2, vec![true, true, true, false]).unwrap();
        let st = uniformity_stats(&[1.0, 2.0, 3.0, 100.0], &mask).unwrap();
        assert!((st.min_over_mean - 0.5).abs() < 1e-15);
        let cov = (2.0f64 / 3.0).sqrt() / 2.0;
        assert!((st.cov - cov).abs() < 1e-15);
    }

    #[test]
    fn confusion_counting() {
        let mut items = vec![(Label::Uniform, Label::Uniform, 0.99); 10];
        items.extend(vec![(Label::NonUniform, Label::NonUniform, 0.01); 10]);
        let m = ConfusionMatrix::from_predictions(&items);
        assert_eq!((m.tp, m.tn, m.fp, m.fn_), (10, 10, 0, 0));
        assert_eq!(m.accuracy(), 1.0);
        let always: Vec<_> = items.iter().map(|&(t, _, _)| (t, Label::Uniform, 0.9)).collect();
        let m = ConfusionMatrix::from_predictions(&always);
        assert_eq!(m.accuracy(), 0.5);
        assert_eq!(m.total(), 20);
    }

    #[test]
    fn bce_matches_direct_formula() {
        for z in [-3.0, -0.2, 0.0, 0.7, 5.0] {
            for y in [0.0, 1.0] {
                let s = 1.0 / (1.0 + f64::exp(-z));
                let direct = -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
                assert!((bce(z, y) - direct).abs() < 1e-12);
            }
        }
        assert!(bce(800.0, 0.0).is_finite());
        assert!(sigmoid(800.0) < 1.0 && sigmoid(-800.0) > 0.0);
    }

    #[test]
    fn threshold_extremes() {
        let mut m = build_nfd(8, 1).unwrap();
        let map = vec![1.0; 64];
        m.threshold = 0.0;
        assert_eq!(classify(&m, &map).unwrap().0, Label::Uniform);
        m.threshold = 1.0;
        assert_eq!(classify(&m, &map).unwrap().0, Label::NonUniform);
        assert!(classify(&m, &[1.0; 63]).is_err());
    }
}
