//! Benchmark tables, field-map images and run snapshots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, ShimError};
use crate::field::Mask;

/// Linear-interpolated quantile of unsorted data; `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Self {
        Self {
            min: quantile(values, 0.0),
            q25: quantile(values, 0.25),
            median: quantile(values, 0.5),
            q75: quantile(values, 0.75),
            max: quantile(values, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: String,
    pub n_slices: usize,
    pub mean_rmse_percent: f64,
    pub rmse_quantiles: Quantiles,
    /// Median over repetitions of the mean wall time per slice.
    pub per_slice_s: f64,
    pub volume_s: f64,
    /// `per_slice_s(mls) / per_slice_s(method)`.
    pub speedup_vs_mls: Option<f64>,
}

impl MethodStats {
    pub fn new(method: &str, rmse: &[f64], per_slice_s: f64, volume_slices: usize) -> Self {
        Self {
            method: method.to_string(),
            n_slices: rmse.len(),
            mean_rmse_percent: mean(rmse),
            rmse_quantiles: Quantiles::of(rmse),
            per_slice_s,
            volume_s: per_slice_s * volume_slices as f64,
            speedup_vs_mls: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub volume_slices: usize,
    pub repetitions: usize,
    pub methods: Vec<MethodStats>,
    /// Predictor model load time, excluded from its per-slice time.
    pub model_load_s: Option<f64>,
}

impl BenchReport {
    /// Fills `speedup_vs_mls` from the measured per-slice times.
    pub fn compute_speedups(&mut self) {
        let mls = self
            .methods
            .iter()
            .find(|m| m.method == "mls")
            .map(|m| m.per_slice_s);
        for m in &mut self.methods {
            m.speedup_vs_mls = mls.filter(|_| m.per_slice_s > 0.0).map(|t| t / m.per_slice_s);
        }
    }

    pub fn method(&self, name: &str) -> Option<&MethodStats> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>7} {:>10} {:>10} {:>10} {:>12} {:>12} {:>10}",
            "method", "slices", "mean_rmse", "median", "q75", "per_slice_s", "volume_s", "speedup"
        );
        for m in &self.methods {
            let speedup = m
                .speedup_vs_mls
                .map(|x| format!("{x:.1}x"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<14} {:>7} {:>10.4} {:>10.4} {:>10.4} {:>12.4e} {:>12.4e} {:>10}",
                m.method,
                m.n_slices,
                m.mean_rmse_percent,
                m.rmse_quantiles.median,
                m.rmse_quantiles.q75,
                m.per_slice_s,
                m.volume_s,
                speedup
            );
        }
        let _ = writeln!(
            s,
            "volume = {} slices, median of {} repetitions",
            self.volume_slices, self.repetitions
        );
        if let Some(t) = self.model_load_s {
            let _ = writeln!(s, "model load {t:.4e} s (not included above)");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "method,n_slices,mean_rmse_percent,rmse_min,rmse_q25,rmse_median,rmse_q75,rmse_max,per_slice_s,volume_s,speedup_vs_mls\n",
        );
        for m in &self.methods {
            let q = &m.rmse_quantiles;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                m.method,
                m.n_slices,
                m.mean_rmse_percent,
                q.min,
                q.q25,
                q.median,
                q.q75,
                q.max,
                m.per_slice_s,
                m.volume_s,
                m.speedup_vs_mls.map(|x| x.to_string()).unwrap_or_default()
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ShimError::Format(format!("bench report: {e}")))
    }
}

pub const PGM_LEVELS: f64 = 255.0;

/// Binary 8-bit PGM (`P5`). Pixel = `round(clamp(ratio, 0, 2)·255/2)` inside
/// the mask, 0 outside.
pub fn ratio_pgm(ratio: &[f64], mask: &Mask) -> Result<Vec<u8>> {
    let n = mask.n();
    if ratio.len() != n * n {
        return invalid(format!("image needs {} values, got {}", n * n, ratio.len()));
    }
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.extend(ratio.iter().zip(mask.as_slice()).map(|(&r, &inside)| {
        if inside && r.is_finite() {
            (r.clamp(0.0, 2.0) * PGM_LEVELS / 2.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// `|s_v| / m_v` (0 where the target is 0).
pub fn combined_ratio(magnitude: &[f64], target: &[f64]) -> Vec<f64> {
    magnitude
        .iter()
        .zip(target)
        .map(|(&s, &m)| if m > 0.0 { s / m } else { 0.0 })
        .collect()
}

/// Magnitude divided by its masked mean, so the mean maps to mid-gray.
pub fn mean_ratio(magnitude: &[f64], mask: &Mask) -> Vec<f64> {
    let idx = mask.indices();
    let m = if idx.is_empty() {
        0.0
    } else {
        idx.iter().map(|&v| magnitude[v]).sum::<f64>() / idx.len() as f64
    };
    magnitude
        .iter()
        .map(|&v| if m > 0.0 { v / m } else { 0.0 })
        .collect()
}

/// Parses a PGM written by [`ratio_pgm`] into `(width, height, pixels)`.
pub fn parse_pgm(data: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| ShimError::Format(format!("pgm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("short header"));
        }
        fields.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with 255 levels"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    if data.len() < pos || data.len() - pos != w * h {
        return Err(bad("pixel count"));
    }
    Ok((w, h, data[pos..].to_vec()))
}

/// Exact command line and parsed options of one run, stored beside its
/// outputs as `<output>.run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub options: serde_json::Value,
}

impl RunConfig {
    pub fn new(command: &str, argv: Vec<String>, options: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv,
            options,
        }
    }

    pub fn snapshot_path(output: &Path) -> PathBuf {
        let mut name = output
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_else(|| "run".into());
        name.push(".run.json");
        output.with_file_name(name)
    }

    pub fn write_beside(&self, output: &Path) -> Result<PathBuf> {
        let path = Self::snapshot_path(output);
        fs::write(&path, serde_json::to_string_pretty(self).expect("config serializes"))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(median(&v), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
    }

    #[test]
    fn pgm_mapping() {
        let mask = Mask::new(2, vec![true, true, true, false]).unwrap();
        let img = ratio_pgm(&[1.0, 0.0, 5.0, 1.0], &mask).unwrap();
        let (w, h, px) = parse_pgm(&img).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(px, vec![128, 0, 255, 0]);
    }

    #[test]
    fn speedups_and_json() {
        let mut r = BenchReport {
            volume_slices: 200,
            repetitions: 5,
            methods: vec![
                MethodStats::new("mls", &[10.0, 12.0], 0.01, 200),
                MethodStats::new("predictor", &[9.0, 11.0], 0.001, 200),
            ],
            model_load_s: Some(0.5),
        };
        r.compute_speedups();
        assert!((r.method("predictor").unwrap().speedup_vs_mls.unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(r.method("predictor").unwrap().volume_s, 0.2);
        assert_eq!(BenchReport::from_json(&r.to_json()).unwrap(), r);
        assert_eq!(r.to_csv().lines().count(), 3);
    }

    #[test]
    fn snapshot_name() {
        assert_eq!(
            RunConfig::snapshot_path(Path::new("/tmp/out/data.shim")),
            PathBuf::from("/tmp/out/data.shim.run.json")
        );
    }
}
