//! Average responses of units per depth bin and their depth selectivity.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bins::BinIndexMap;
use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Running `(activation mass, pixel count)` per `(unit, bin)` for one layer.
///
/// The pixel count does not depend on the unit, so it is stored once per bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTable {
    pub layer: String,
    pub n_units: usize,
    pub n_bins: usize,
    /// Row-major `n_units × n_bins`.
    pub sums: Vec<f64>,
    pub counts: Vec<u64>,
}

impl ResponseTable {
    pub fn new(layer: impl Into<String>, n_units: usize, n_bins: usize) -> Self {
        ResponseTable {
            layer: layer.into(),
            n_units,
            n_bins,
            sums: vec![0.0; n_units * n_bins],
            counts: vec![0; n_bins],
        }
    }

    /// Add one activation batch (`N×K×h×w`). The activation is bilinearly
    /// resized (in f64) to the bin map's resolution; pixels with a negative bin
    /// are skipped.
    pub fn accumulate<S: Scalar>(
        &mut self,
        activation: &Tensor<S>,
        bins: &BinIndexMap,
    ) -> Result<()> {
        let s = activation.shape();
        if s.c != self.n_units || bins.n_bins != self.n_bins || bins.n != s.n {
            return Err(shape_err(
                "accumulate",
                format!(
                    "table has {} units x {} bins, got activation {:?} and {} bin maps over {} bins",
                    self.n_units,
                    self.n_bins,
                    s.dims(),
                    bins.n,
                    bins.n_bins
                ),
            ));
        }
        let up = kernels::bilinear(&activation.cast::<f64>(), bins.h, bins.w);
        for n in 0..s.n {
            let bmap = bins.sample(n);
            for &b in bmap {
                if b >= 0 {
                    self.counts[b as usize] += 1;
                }
            }
            for k in 0..s.c {
                let row = &mut self.sums[k * self.n_bins..(k + 1) * self.n_bins];
                for (&v, &b) in up.plane(n, k).iter().zip(bmap) {
                    if b >= 0 {
                        row[b as usize] += v;
                    }
                }
            }
        }
        Ok(())
    }

    /// Fold another partial table over the same layer into this one.
    pub fn merge(&mut self, other: &ResponseTable) -> Result<()> {
        if (self.n_units, self.n_bins) != (other.n_units, other.n_bins) {
            return Err(shape_err("merge", "tables differ in unit or bin count"));
        }
        self.sums
            .iter_mut()
            .zip(&other.sums)
            .for_each(|(a, b)| *a += b);
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn pixel_count(&self, _unit: usize, bin: usize) -> u64 {
        self.counts[bin]
    }

    /// Average response, undefined for bins that never occurred.
    pub fn response(&self, unit: usize, bin: usize) -> Option<f64> {
        let c = self.counts[bin];
        (c > 0).then(|| self.sums[unit * self.n_bins + bin] / c as f64)
    }

    pub fn responses(&self, unit: usize) -> Vec<Option<f64>> {
        (0..self.n_bins).map(|d| self.response(unit, d)).collect()
    }
}

/// Selectivity of one unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selectivity {
    pub ds: f64,
    pub argmax: usize,
    pub max_abs: f64,
    pub mean_other_abs: f64,
}

/// Contrast between the largest response magnitude and the mean magnitude of
/// the remaining defined bins. Undefined bins are ignored; ties go to the
/// lowest bin; an all-zero unit has selectivity 0.
pub fn selectivity(responses: &[Option<f64>]) -> Result<Selectivity> {
    let defined: Vec<(usize, f64)> = responses
        .iter()
        .enumerate()
        .filter_map(|(d, r)| r.map(|v| (d, v.abs())))
        .collect();
    if defined.len() < 2 {
        return Err(Error::InsufficientBins(defined.len()));
    }
    let (argmax, max_abs) =
        defined
            .iter()
            .copied()
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (d, v)| {
                if v > best.1 {
                    (d, v)
                } else {
                    best
                }
            });
    let rest: f64 = defined
        .iter()
        .filter(|(d, _)| *d != argmax)
        .map(|(_, v)| v)
        .sum();
    let mean_other_abs = rest / (defined.len() - 1) as f64;
    let den = max_abs + mean_other_abs;
    let ds = if den > 0.0 {
        (max_abs - mean_other_abs) / den
    } else {
        0.0
    };
    Ok(Selectivity {
        ds,
        argmax,
        max_abs,
        mean_other_abs,
    })
}

/// Monte Carlo mean selectivity of units whose per-bin response magnitudes are
/// i.i.d. uniform on `[0, b]`.
pub fn random_baseline(n_bins: usize, trials: usize, b: f64, seed: u64) -> Result<f64> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::Config(format!(
            "upper bound must be positive, got {b}"
        )));
    }
    if trials < 1000 {
        return Err(Error::Config(format!(
            "need at least 1000 trials, got {trials}"
        )));
    }
    if n_bins < 2 {
        return Err(Error::InsufficientBins(n_bins));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![None; n_bins];
    let mut total = 0.0;
    for _ in 0..trials {
        for r in buf.iter_mut() {
            *r = Some(b * rng.random::<f64>());
        }
        total += selectivity(&buf)?.ds;
    }
    Ok(total / trials as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSelectivity {
    pub unit: usize,
    pub ds: f64,
    pub argmax_bin: usize,
    pub assigned_bin: Option<usize>,
    pub max_abs: f64,
    pub mean_other_abs: f64,
    /// Per-bin average responses (`None` where the bin never occurred).
    pub responses: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityReport {
    pub layer: String,
    pub split: String,
    pub n_bins: usize,
    pub mean_ds: f64,
    pub units: Vec<UnitSelectivity>,
}

impl SelectivityReport {
    /// Units ordered by selectivity; `descending` puts the most selective first.
    /// Ties keep unit order.
    pub fn order_by_ds(&self, descending: bool) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.units.len()).collect();
        idx.sort_by(|&a, &b| {
            let (x, y) = (self.units[a].ds, self.units[b].ds);
            let o = x.partial_cmp(&y).unwrap_or(core::cmp::Ordering::Equal);
            if descending {
                o.reverse()
            } else {
                o
            }
        });
        idx.into_iter().map(|i| self.units[i].unit).collect()
    }
}

pub fn build_report(
    table: &ResponseTable,
    assignments: Option<&[usize]>,
    split: &str,
) -> Result<SelectivityReport> {
    if let Some(a) = assignments {
        if a.len() != table.n_units {
            return Err(shape_err(
                "build_report",
                format!("{} assignments for {} units", a.len(), table.n_units),
            ));
        }
    }
    let units = (0..table.n_units)
        .map(|k| {
            let responses = table.responses(k);
            let s = selectivity(&responses)?;
            Ok(UnitSelectivity {
                unit: k,
                ds: s.ds,
                argmax_bin: s.argmax,
                assigned_bin: assignments.map(|a| a[k]),
                max_abs: s.max_abs,
                mean_other_abs: s.mean_other_abs,
                responses,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_ds = units.iter().map(|u| u.ds).sum::<f64>() / units.len().max(1) as f64;
    Ok(SelectivityReport {
        layer: table.layer.clone(),
        split: split.into(),
        n_bins: table.n_bins,
        mean_ds,
        units,
    })
}
