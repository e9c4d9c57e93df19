//! Synthetic multi-channel B1+ slices.
//!
//! Each coil on a ring contributes `amp(d)·exp(i(−2πd/λ + φ_k))`, with
//! `amp(d) = 1/(1 + d/d0)`, `d` the distance from the coil center to the
//! voxel and `φ_k` the coil azimuth. The phantom is a centered disk that
//! defines the region of interest. Generated samples are rounded to `f32` so
//! that a save/load cycle through the dataset file is bit-exact.

use std::collections::HashSet;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, ShimError};
use crate::objective::{rmse_percent, ShimWeights};

/// Per-channel complex field samples on an `N×N` grid, row-major, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelField {
    n: usize,
    n_channels: usize,
    samples: Vec<Complex64>,
    voxel_size_mm: f64,
}

impl MultiChannelField {
    pub fn new(
        n: usize,
        n_channels: usize,
        samples: Vec<Complex64>,
        voxel_size_mm: f64,
    ) -> Result<Self> {
        if n < 2 {
            return invalid(format!("grid size must be >= 2, got {n}"));
        }
        if n_channels == 0 {
            return invalid("field needs at least one channel");
        }
        if samples.len() != n_channels * n * n {
            return invalid(format!(
                "expected {} samples for {n_channels} channels of {n}x{n}, got {}",
                n_channels * n * n,
                samples.len()
            ));
        }
        if !(voxel_size_mm > 0.0) || !voxel_size_mm.is_finite() {
            return invalid(format!("voxel size must be positive, got {voxel_size_mm}"));
        }
        if samples.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(ShimError::NonFinite("field samples"));
        }
        Ok(Self {
            n,
            n_channels,
            samples,
            voxel_size_mm,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn voxel_size_mm(&self) -> f64 {
        self.voxel_size_mm
    }

    pub fn channel(&self, c: usize) -> &[Complex64] {
        let nn = self.n * self.n;
        &self.samples[c * nn..(c + 1) * nn]
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    /// Mutable access for callers that need to perturb samples in place.
    pub fn samples_mut(&mut self) -> &mut [Complex64] {
        &mut self.samples
    }
}

/// Binary region of interest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    n: usize,
    inside: Vec<bool>,
    indices: Vec<usize>,
}

impl Mask {
    pub fn new(n: usize, inside: Vec<bool>) -> Result<Self> {
        if inside.len() != n * n {
            return invalid(format!("mask needs {} values, got {}", n * n, inside.len()));
        }
        let indices = inside
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        Ok(Self { n, inside, indices })
    }

    pub fn full(n: usize) -> Self {
        Self::new(n, vec![true; n * n]).expect("square mask")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn count_inside(&self) -> usize {
        self.indices.len()
    }

    pub fn is_inside(&self, v: usize) -> bool {
        self.inside[v]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.inside
    }

    /// Flat indices of the voxels inside the mask, ascending.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Desired `|B1+|` per voxel, in units of the target flip angle.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap {
    n: usize,
    values: Vec<f64>,
}

impl TargetMap {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return invalid(format!("target needs {} values, got {}", n * n, values.len()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return invalid("target values must be finite and >= 0");
        }
        Ok(Self { n, values })
    }

    pub fn uniform(n: usize, value: f64) -> Self {
        Self {
            n,
            values: vec![value; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoilPose {
    pub azimuth_rad: f64,
    /// In-plane center, mm, relative to the grid center.
    pub center_mm: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoilGeometry {
    pub ring_radius_mm: f64,
    pub poses: Vec<CoilPose>,
}

impl CoilGeometry {
    pub fn n_coils(&self) -> usize {
        self.poses.len()
    }
}

/// Evenly spaced coils on a ring; coil `k` sits at azimuth `2πk/n`.
pub fn make_coil_geometry(n_coils: usize, ring_radius_mm: f64) -> Result<CoilGeometry> {
    if n_coils == 0 {
        return invalid("n_coils must be >= 1");
    }
    if !(ring_radius_mm > 0.0) || !ring_radius_mm.is_finite() {
        return invalid(format!("ring radius must be positive, got {ring_radius_mm}"));
    }
    let poses = (0..n_coils)
        .map(|k| {
            let az = 2.0 * PI * k as f64 / n_coils as f64;
            CoilPose {
                azimuth_rad: az,
                center_mm: [ring_radius_mm * az.cos(), ring_radius_mm * az.sin()],
            }
        })
        .collect();
    Ok(CoilGeometry {
        ring_radius_mm,
        poses,
    })
}

/// Parameters of the analytic coil model that are not part of the geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldModel {
    /// Wavelength in tissue; `f64::INFINITY` removes the propagation phase.
    pub wavelength_mm: f64,
    /// Amplitude decay scale `d0`.
    pub decay_mm: f64,
    /// Side length of the square field of view.
    pub fov_mm: f64,
    /// Axial distance between the slice plane and the coil plane.
    pub slice_offset_mm: f64,
}

impl Default for FieldModel {
    fn default() -> Self {
        Self {
            wavelength_mm: 130.0,
            decay_mm: 50.0,
            fov_mm: 200.0,
            slice_offset_mm: 0.0,
        }
    }
}

/// Evaluates the analytic coil model on an `N×N` grid.
pub fn simulate_channel_fields(
    geometry: &CoilGeometry,
    grid_size: usize,
    phantom_radius_mm: f64,
    model: &FieldModel,
) -> Result<MultiChannelField> {
    if grid_size < 8 {
        return invalid(format!("grid size must be >= 8, got {grid_size}"));
    }
    if !(model.wavelength_mm > 0.0) {
        return invalid(format!("wavelength must be > 0, got {}", model.wavelength_mm));
    }
    if !(model.decay_mm > 0.0) || !(model.fov_mm > 0.0) || !model.slice_offset_mm.is_finite() {
        return invalid("decay scale and field of view must be > 0");
    }
    if !(phantom_radius_mm > 0.0) {
        return invalid(format!("phantom radius must be > 0, got {phantom_radius_mm}"));
    }
    if phantom_radius_mm >= geometry.ring_radius_mm {
        return Err(ShimError::InvalidGeometry(format!(
            "coil ring radius {} mm lies inside the phantom (radius {} mm)",
            geometry.ring_radius_mm, phantom_radius_mm
        )));
    }
    let n = grid_size;
    let voxel = model.fov_mm / n as f64;
    let half = (n as f64 - 1.0) / 2.0;
    let k_wave = 2.0 * PI / model.wavelength_mm;
    let z2 = model.slice_offset_mm * model.slice_offset_mm;
    let mut samples = Vec::with_capacity(geometry.n_coils() * n * n);
    for pose in &geometry.poses {
        for row in 0..n {
            // row 0 is the top of the image (+y)
            let y = (half - row as f64) * voxel;
            for col in 0..n {
                let x = (col as f64 - half) * voxel;
                let dx = x - pose.center_mm[0];
                let dy = y - pose.center_mm[1];
                let d = (dx * dx + dy * dy + z2).sqrt();
                let amp = 1.0 / (1.0 + d / model.decay_mm);
                let v = Complex64::from_polar(amp, -k_wave * d + pose.azimuth_rad);
                samples.push(Complex64::new(v.re as f32 as f64, v.im as f32 as f64));
            }
        }
    }
    MultiChannelField::new(n, geometry.n_coils(), samples, voxel as f32 as f64)
}

/// Disk mask: voxel `(r, c)` is inside iff its center lies within
/// `radius_fraction · N/2` voxels of the grid center.
pub fn make_disk_mask(grid_size: usize, radius_fraction: f64) -> Result<Mask> {
    if grid_size < 2 {
        return invalid(format!("grid size must be >= 2, got {grid_size}"));
    }
    if !(radius_fraction > 0.0) || radius_fraction > 1.0 {
        return invalid(format!("radius fraction must lie in (0, 1], got {radius_fraction}"));
    }
    let n = grid_size;
    let center = (n as f64 - 1.0) / 2.0;
    let radius = radius_fraction * n as f64 / 2.0;
    let r2 = radius * radius;
    let inside: Vec<bool> = (0..n * n)
        .map(|v| {
            let dr = (v / n) as f64 - center;
            let dc = (v % n) as f64 - center;
            dr * dr + dc * dc <= r2
        })
        .collect();
    let mask = Mask::new(n, inside)?;
    if mask.count_inside() == 0 {
        return invalid(format!(
            "disk of fraction {radius_fraction} contains no voxel centers on a {n}x{n} grid"
        ));
    }
    Ok(mask)
}

/// Elliptical phantom outline in the slice plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomShape {
    /// Semi-major axis.
    pub radius_mm: f64,
    /// Semi-minor over semi-major axis, in `(0, 1]`.
    pub aspect: f64,
    pub rotation_rad: f64,
    pub center_mm: [f64; 2],
}

impl PhantomShape {
    pub fn disk(radius_mm: f64) -> Self {
        Self {
            radius_mm,
            aspect: 1.0,
            rotation_rad: 0.0,
            center_mm: [0.0, 0.0],
        }
    }

    /// Largest distance from the grid center to the outline.
    pub fn extent_mm(&self) -> f64 {
        self.radius_mm + self.center_mm[0].hypot(self.center_mm[1])
    }
}

/// Mask of the voxels whose centers fall inside `shape`, on the same
/// coordinate frame as [`simulate_channel_fields`].
pub fn make_phantom_mask(grid_size: usize, fov_mm: f64, shape: &PhantomShape) -> Result<Mask> {
    if grid_size < 2 {
        return invalid(format!("grid size must be >= 2, got {grid_size}"));
    }
    if !(shape.radius_mm > 0.0) || !(shape.aspect > 0.0) || shape.aspect > 1.0 {
        return invalid("phantom needs radius > 0 and aspect in (0, 1]");
    }
    let n = grid_size;
    let voxel = fov_mm / n as f64;
    let half = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = shape.rotation_rad.sin_cos();
    let a = shape.radius_mm;
    let b = shape.radius_mm * shape.aspect;
    let inside: Vec<bool> = (0..n * n)
        .map(|v| {
            let x = ((v % n) as f64 - half) * voxel - shape.center_mm[0];
            let y = (half - (v / n) as f64) * voxel - shape.center_mm[1];
            let u = x * cos + y * sin;
            let w = -x * sin + y * cos;
            (u / a).powi(2) + (w / b).powi(2) <= 1.0
        })
        .collect();
    let mask = Mask::new(n, inside)?;
    if mask.count_inside() == 0 {
        return invalid("phantom covers no voxel centers");
    }
    Ok(mask)
}

/// Rotates a row-major `N×N` grid by `quarter_turns` × 90° counter-clockwise.
pub fn rotate_grid<T: Copy>(grid: &[T], n: usize, quarter_turns: u8) -> Vec<T> {
    let mut out = grid.to_vec();
    for _ in 0..quarter_turns % 4 {
        let src = out.clone();
        for r in 0..n {
            for c in 0..n {
                out[r * n + c] = src[c * n + (n - 1 - r)];
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub phantom_radius_mm: f32,
    pub phantom_aspect: f32,
    pub phantom_rotation_rad: f32,
    pub phantom_center_mm: [f32; 2],
    pub slice_offset_mm: f32,
    pub ring_radius_mm: f32,
    pub wavelength_mm: f32,
    pub decay_mm: f32,
    pub fov_mm: f32,
}

impl Provenance {
    pub const N_PARAMS: usize = 10;

    /// Generator parameters in file order.
    pub fn params(&self) -> [f32; Self::N_PARAMS] {
        [
            self.phantom_radius_mm,
            self.phantom_aspect,
            self.phantom_rotation_rad,
            self.phantom_center_mm[0],
            self.phantom_center_mm[1],
            self.slice_offset_mm,
            self.ring_radius_mm,
            self.wavelength_mm,
            self.decay_mm,
            self.fov_mm,
        ]
    }

    pub fn from_params(seed: u64, p: [f32; Self::N_PARAMS]) -> Self {
        Self {
            seed,
            phantom_radius_mm: p[0],
            phantom_aspect: p[1],
            phantom_rotation_rad: p[2],
            phantom_center_mm: [p[3], p[4]],
            slice_offset_mm: p[5],
            ring_radius_mm: p[6],
            wavelength_mm: p[7],
            decay_mm: p[8],
            fov_mm: p[9],
        }
    }
}

/// Reference solution attached to a slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub weights: ShimWeights,
    pub rmse_percent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub slice_id: String,
    pub field: MultiChannelField,
    pub mask: Mask,
    pub target: TargetMap,
    reference: Option<Reference>,
    pub provenance: Provenance,
}

impl SliceRecord {
    pub fn new(
        slice_id: String,
        field: MultiChannelField,
        mask: Mask,
        target: TargetMap,
        provenance: Provenance,
    ) -> Result<Self> {
        if mask.n() != field.n() || target.n() != field.n() {
            return invalid(format!(
                "slice {slice_id}: mask ({}) and target ({}) must match field grid {}",
                mask.n(),
                target.n(),
                field.n()
            ));
        }
        if mask.count_inside() == 0 {
            return invalid(format!("slice {slice_id}: mask is empty"));
        }
        Ok(Self {
            slice_id,
            field,
            mask,
            target,
            reference: None,
            provenance,
        })
    }

    pub fn n(&self) -> usize {
        self.field.n()
    }

    pub fn n_coils(&self) -> usize {
        self.field.n_channels()
    }

    pub fn reference(&self) -> Option<&Reference> {
        self.reference.as_ref()
    }

    /// Attaches reference weights (rounded to `f32`) and their RMSE.
    pub fn set_reference(&mut self, weights: &ShimWeights) -> Result<()> {
        let weights = weights.quantized_f32();
        let rmse = rmse_percent(&self.field, &weights, &self.mask, &self.target)?;
        self.reference = Some(Reference {
            weights,
            rmse_percent: rmse,
        });
        Ok(())
    }

    pub fn clear_reference(&mut self) {
        self.reference = None;
    }
}

/// Rotates field, mask and target; drops the reference because the coil
/// ring does not rotate with the image.
pub fn augment_rotate(record: &SliceRecord, quarter_turns: u8) -> Result<SliceRecord> {
    if quarter_turns > 3 {
        return invalid(format!("quarter_turns must be in 0..=3, got {quarter_turns}"));
    }
    let n = record.n();
    let nn = n * n;
    let mut samples = Vec::with_capacity(record.field.samples().len());
    for c in 0..record.n_coils() {
        samples.extend(rotate_grid(record.field.channel(c), n, quarter_turns));
    }
    let field = MultiChannelField::new(n, record.n_coils(), samples, record.field.voxel_size_mm())?;
    let mask = Mask::new(n, rotate_grid(record.mask.as_slice(), n, quarter_turns))?;
    let target = TargetMap::new(n, rotate_grid(record.target.as_slice(), n, quarter_turns))?;
    debug_assert_eq!(mask.as_slice().len(), nn);
    SliceRecord::new(
        format!("{}_r{quarter_turns}", record.slice_id),
        field,
        mask,
        target,
        record.provenance,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Train/val/test proportions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 8,
            val: 1,
            test: 1,
        }
    }
}

/// Shuffles record positions with `seed` and tags them by `ratio`.
pub fn assign_splits(n_records: usize, ratio: SplitRatio, seed: u64) -> Result<Vec<Split>> {
    let total = ratio.train + ratio.val + ratio.test;
    if total == 0 {
        return invalid("split ratio must have a positive sum");
    }
    let n_train = (n_records as f64 * ratio.train as f64 / total as f64).round() as usize;
    let n_val = ((n_records as f64 * ratio.val as f64 / total as f64).round() as usize)
        .min(n_records - n_train);
    let mut order: Vec<usize> = (0..n_records).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Test; n_records];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<SliceRecord>,
    pub splits: Vec<Split>,
    pub rng_seed: u64,
}

impl Dataset {
    pub fn new(records: Vec<SliceRecord>, splits: Vec<Split>, rng_seed: u64) -> Result<Self> {
        if splits.len() != records.len() {
            return invalid(format!(
                "{} split tags for {} records",
                splits.len(),
                records.len()
            ));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.slice_id.as_str()) {
                return invalid(format!("duplicate slice id {}", r.slice_id));
            }
        }
        Ok(Self {
            records,
            splits,
            rng_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn records_in(&self, split: Split) -> Vec<&SliceRecord> {
        self.split_indices(split)
            .into_iter()
            .map(|i| &self.records[i])
            .collect()
    }

    /// Re-tags every record with a fresh seeded split.
    pub fn resplit(&mut self, ratio: SplitRatio, seed: u64) -> Result<()> {
        self.splits = assign_splits(self.len(), ratio, seed)?;
        self.rng_seed = seed;
        Ok(())
    }
}

/// Settings for [`generate_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_slices: usize,
    pub n_coils: usize,
    pub grid: usize,
    pub seed: u64,
    pub ring_radius_mm: f64,
    pub fov_mm: f64,
    pub wavelength_mm: f64,
    pub decay_mm: f64,
    /// Phantom radius is drawn uniformly from this range per slice.
    pub radius_range_mm: (f64, f64),
    /// Phantom minor/major axis ratio, drawn uniformly per slice.
    pub aspect_range: (f64, f64),
    /// Phantom center is displaced by up to this distance in a random direction.
    pub max_center_offset_mm: f64,
    /// Slice plane offset from the coil plane, drawn uniformly per slice.
    pub slice_offset_range_mm: (f64, f64),
    pub split: SplitRatio,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_slices: 100,
            n_coils: 8,
            grid: 101,
            seed: 0,
            ring_radius_mm: 140.0,
            fov_mm: 200.0,
            wavelength_mm: 130.0,
            decay_mm: 50.0,
            radius_range_mm: (70.0, 95.0),
            aspect_range: (0.75, 0.95),
            max_center_offset_mm: 8.0,
            slice_offset_range_mm: (-40.0, 40.0),
            split: SplitRatio::default(),
        }
    }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Generates one slice; deterministic in `(config, index)`.
pub fn generate_record(config: &GenConfig, index: usize) -> Result<SliceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let radius = sample_range(&mut rng, config.radius_range_mm) as f32;
    let offset = sample_range(&mut rng, config.slice_offset_range_mm) as f32;
    let aspect = sample_range(&mut rng, config.aspect_range) as f32;
    let rotation = rng.gen_range(0.0..PI) as f32;
    let shift = rng.gen_range(0.0..=config.max_center_offset_mm);
    let shift_dir = rng.gen_range(0.0..2.0 * PI);
    let center = [(shift * shift_dir.cos()) as f32, (shift * shift_dir.sin()) as f32];
    let shape = PhantomShape {
        radius_mm: radius as f64,
        aspect: aspect as f64,
        rotation_rad: rotation as f64,
        center_mm: [center[0] as f64, center[1] as f64],
    };
    let geometry = make_coil_geometry(config.n_coils, config.ring_radius_mm)?;
    let model = FieldModel {
        wavelength_mm: config.wavelength_mm,
        decay_mm: config.decay_mm,
        fov_mm: config.fov_mm,
        slice_offset_mm: offset as f64,
    };
    let field = simulate_channel_fields(&geometry, config.grid, shape.extent_mm(), &model)?;
    let mask = make_phantom_mask(config.grid, config.fov_mm, &shape)?;
    let target = TargetMap::uniform(config.grid, 1.0);
    let provenance = Provenance {
        seed: config.seed,
        phantom_radius_mm: radius,
        phantom_aspect: aspect,
        phantom_rotation_rad: rotation,
        phantom_center_mm: center,
        slice_offset_mm: offset,
        ring_radius_mm: config.ring_radius_mm as f32,
        wavelength_mm: config.wavelength_mm as f32,
        decay_mm: config.decay_mm as f32,
        fov_mm: config.fov_mm as f32,
    };
    SliceRecord::new(
        format!("s{:016x}-{index:06}", config.seed),
        field,
        mask,
        target,
        provenance,
    )
}

pub fn generate_dataset(config: &GenConfig) -> Result<Dataset> {
    if config.n_slices == 0 {
        return invalid("n_slices must be >= 1");
    }
    let records = (0..config.n_slices)
        .into_par_iter()
        .map(|i| generate_record(config, i))
        .collect::<Result<Vec<_>>>()?;
    let splits = assign_splits(records.len(), config.split, config.seed)?;
    Dataset::new(records, splits, config.seed)
}

/// Standard deviation over mean of the masked values.
pub fn coefficient_of_variation(values: &[f64], mask: &Mask) -> f64 {
    let idx = mask.indices();
    if idx.is_empty() {
        return 0.0;
    }
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&v| values[v]).sum::<f64>() / n;
    let var = idx.iter().map(|&v| (values[v] - mean).powi(2)).sum::<f64>() / n;
    if mean > 0.0 {
        var.sqrt() / mean
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{magnitude_map, quadrature_weights};

    #[test]
    fn coil_geometry_azimuths() {
        let g = make_coil_geometry(8, 140.0).unwrap();
        for (k, p) in g.poses.iter().enumerate() {
            assert!((p.azimuth_rad.to_degrees() - 45.0 * k as f64).abs() < 1e-12);
        }
        let g = make_coil_geometry(4, 100.0).unwrap();
        let deg: Vec<f64> = g.poses.iter().map(|p| p.azimuth_rad.to_degrees()).collect();
        assert_eq!(deg, vec![0.0, 90.0, 180.0, 270.0]);
        let g = make_coil_geometry(1, 100.0).unwrap();
        assert_eq!(g.poses.len(), 1);
        assert_eq!(g.poses[0].azimuth_rad, 0.0);
        assert_eq!(g.poses[0].center_mm, [100.0, 0.0]);
        assert!(matches!(make_coil_geometry(0, 100.0), Err(ShimError::InvalidArgument(_))));
    }

    #[test]
    fn single_coil_magnitude_decreases_along_radial_line() {
        let g = make_coil_geometry(1, 140.0).unwrap();
        let n = 33;
        let f = simulate_channel_fields(&g, n, 90.0, &FieldModel::default()).unwrap();
        // coil at +x: the center row runs along the radial line, moving away
        // from the coil as the column index decreases
        let row = n / 2;
        let mags: Vec<f64> = (0..n).map(|c| f.channel(0)[row * n + c].norm()).collect();
        for c in 1..n {
            assert!(mags[c] > mags[c - 1], "col {c}: {} vs {}", mags[c], mags[c - 1]);
        }
    }

    #[test]
    fn opposed_coils_are_symmetric_without_propagation_phase() {
        let g = make_coil_geometry(2, 140.0).unwrap();
        let n = 21;
        let model = FieldModel {
            wavelength_mm: f64::INFINITY,
            ..FieldModel::default()
        };
        let f = simulate_channel_fields(&g, n, 90.0, &model).unwrap();
        let w = crate::objective::ShimWeights::new(vec![Complex64::new(1.0, 0.0); 2]).unwrap();
        let mag = magnitude_map(&f, &w, &Mask::full(n)).unwrap();
        let rot = rotate_grid(&mag, n, 2);
        for (a, b) in mag.iter().zip(&rot) {
            assert!((a - b).abs() <= 1e-6 * a.max(1e-6), "{a} vs {b}");
        }
    }

    #[test]
    fn default_phantom_shows_interference() {
        let g = make_coil_geometry(8, 140.0).unwrap();
        let f = simulate_channel_fields(&g, 101, 90.0, &FieldModel::default()).unwrap();
        let mask = make_disk_mask(101, 0.9).unwrap();
        let mag = magnitude_map(&f, &quadrature_weights(8), &mask).unwrap();
        let cov = coefficient_of_variation(&mag, &mask);
        assert!(cov > 0.05, "CoV {cov}");
    }

    #[test]
    fn coil_inside_phantom_is_rejected() {
        let g = make_coil_geometry(8, 80.0).unwrap();
        let err = simulate_channel_fields(&g, 16, 90.0, &FieldModel::default()).unwrap_err();
        assert!(matches!(err, ShimError::InvalidGeometry(_)));
    }

    #[test]
    fn generation_is_deterministic() {
        let g = make_coil_geometry(8, 140.0).unwrap();
        let a = simulate_channel_fields(&g, 16, 80.0, &FieldModel::default()).unwrap();
        let b = simulate_channel_fields(&g, 16, 80.0, &FieldModel::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disk_mask_small_grids() {
        let m = make_disk_mask(3, 1.0).unwrap();
        assert!(m.is_inside(4));
        // radius 1.5 voxels reaches the corner centers (distance √2)
        assert!(m.is_inside(0));
        let m = make_disk_mask(3, 0.9).unwrap();
        assert!(m.is_inside(4) && m.is_inside(1));
        assert!(!m.is_inside(0) && !m.is_inside(2) && !m.is_inside(6) && !m.is_inside(8));
        assert!(matches!(make_disk_mask(2, 0.01), Err(ShimError::InvalidArgument(_))));
        assert!(make_disk_mask(8, 0.0).is_err());
        assert!(make_disk_mask(8, -0.5).is_err());
    }

    #[test]
    fn disk_mask_matches_voxel_scan() {
        let m = make_disk_mask(101, 0.8).unwrap();
        let mut count = 0;
        for r in 0..101 {
            for c in 0..101 {
                let dr = r as f64 - 50.0;
                let dc = c as f64 - 50.0;
                if (dr * dr + dc * dc).sqrt() <= 40.4 {
                    count += 1;
                }
            }
        }
        assert_eq!(m.count_inside(), count);
    }

    fn small_config(n_slices: usize) -> GenConfig {
        GenConfig {
            n_slices,
            grid: 16,
            seed: 11,
            ..GenConfig::default()
        }
    }

    #[test]
    fn rotation_properties() {
        let rec = generate_record(&small_config(1), 0).unwrap();
        let r0 = augment_rotate(&rec, 0).unwrap();
        assert_eq!(r0.field, rec.field);
        assert_eq!(r0.mask, rec.mask);
        assert_eq!(r0.slice_id, format!("{}_r0", rec.slice_id));
        let r2 = augment_rotate(&augment_rotate(&rec, 2).unwrap(), 2).unwrap();
        assert_eq!(r2.field, rec.field);
        assert_eq!(r2.target, rec.target);
        let r1 = augment_rotate(&rec, 1).unwrap();
        assert_eq!(r1.mask.count_inside(), rec.mask.count_inside());
        assert!(augment_rotate(&rec, 4).is_err());
    }

    #[test]
    fn rotation_drops_reference() {
        let mut rec = generate_record(&small_config(1), 0).unwrap();
        rec.set_reference(&quadrature_weights(8)).unwrap();
        assert!(rec.reference().is_some());
        assert!(augment_rotate(&rec, 1).unwrap().reference().is_none());
    }

    #[test]
    fn reference_rmse_is_consistent() {
        let mut rec = generate_record(&small_config(1), 0).unwrap();
        rec.set_reference(&quadrature_weights(8).scaled(Complex64::new(0.7, 0.1)))
            .unwrap();
        let r = rec.reference().unwrap();
        let again = rmse_percent(&rec.field, &r.weights, &rec.mask, &rec.target).unwrap();
        assert_eq!(again, r.rmse_percent);
    }

    #[test]
    fn split_ratio_and_reproducibility() {
        let s = assign_splits(100, SplitRatio::default(), 5).unwrap();
        let count = |t| s.iter().filter(|&&x| x == t).count();
        assert_eq!(count(Split::Train), 80);
        assert_eq!(count(Split::Val), 10);
        assert_eq!(count(Split::Test), 10);
        assert_eq!(s, assign_splits(100, SplitRatio::default(), 5).unwrap());
        assert_ne!(s, assign_splits(100, SplitRatio::default(), 6).unwrap());
        let s = assign_splits(7, SplitRatio::default(), 1).unwrap();
        let train = s.iter().filter(|&&x| x == Split::Train).count();
        assert!((train as f64 - 5.6).abs() <= 1.0);
    }

    #[test]
    fn dataset_rejects_duplicate_ids() {
        let cfg = small_config(2);
        let a = generate_record(&cfg, 0).unwrap();
        let err = Dataset::new(vec![a.clone(), a], vec![Split::Train; 2], 0).unwrap_err();
        assert!(matches!(err, ShimError::InvalidArgument(_)));
    }

    #[test]
    fn generated_dataset_dimensions() {
        let ds = generate_dataset(&small_config(6)).unwrap();
        assert_eq!(ds.len(), 6);
        for r in &ds.records {
            assert_eq!(r.mask.n(), r.field.n());
            assert_eq!(r.target.n(), r.field.n());
            assert!(r.mask.count_inside() > 0);
        }
        assert_eq!(ds, generate_dataset(&small_config(6)).unwrap());
    }
}
