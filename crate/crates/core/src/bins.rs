//! Depth discretization into ordered bins.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Default bin count.
pub const DEFAULT_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinningKind {
    Uniform,
    /// Spacing-increasing (log-spaced) bins.
    Sid,
}

impl core::str::FromStr for BinningKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(BinningKind::Uniform),
            "sid" => Ok(BinningKind::Sid),
            other => Err(Error::Config(format!("unknown binning kind `{other}`"))),
        }
    }
}

/// Strictly increasing bin edges; bin `i` covers `[edges[i], edges[i+1])`,
/// except the last bin, which is closed on the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningScheme {
    pub kind: BinningKind,
    pub edges: Vec<f64>,
}

impl BinningScheme {
    pub fn new(kind: BinningKind, d_min: f64, d_max: f64, n_bins: usize) -> Result<Self> {
        match kind {
            BinningKind::Uniform => Self::uniform(d_min, d_max, n_bins),
            BinningKind::Sid => Self::sid(d_min, d_max, n_bins),
        }
    }

    /// Log-spaced edges: `edges[i] = exp(ln d_min + (i/n)·ln(d_max/d_min))`.
    pub fn sid(d_min: f64, d_max: f64, n_bins: usize) -> Result<Self> {
        check_range(d_min, d_max, n_bins)?;
        if d_min <= 0.0 {
            return Err(Error::Config(format!(
                "log-spaced bins need a positive minimum depth, got {d_min}"
            )));
        }
        let lo = Float::ln(d_min);
        let span = Float::ln(d_max / d_min);
        let mut edges: Vec<f64> = (0..=n_bins)
            .map(|i| Float::exp(lo + (i as f64 / n_bins as f64) * span))
            .collect();
        edges[0] = d_min;
        edges[n_bins] = d_max;
        Self::from_edges(BinningKind::Sid, edges)
    }

    pub fn uniform(d_min: f64, d_max: f64, n_bins: usize) -> Result<Self> {
        check_range(d_min, d_max, n_bins)?;
        let width = (d_max - d_min) / n_bins as f64;
        let mut edges: Vec<f64> = (0..=n_bins).map(|i| d_min + i as f64 * width).collect();
        edges[n_bins] = d_max;
        Self::from_edges(BinningKind::Uniform, edges)
    }

    /// Validate externally supplied edges (e.g. from a checkpoint).
    pub fn from_edges(kind: BinningKind, edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 3 {
            return Err(Error::Config("a binning needs at least 2 bins".to_string()));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "bin edges must be finite and strictly increasing".to_string(),
            ));
        }
        Ok(BinningScheme { kind, edges })
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn d_min(&self) -> f64 {
        self.edges[0]
    }

    pub fn d_max(&self) -> f64 {
        self.edges[self.edges.len() - 1]
    }

    /// Bin of one depth value; out-of-range values clamp to the end bins.
    pub fn bin_of(&self, depth: f64) -> usize {
        let n = self.n_bins();
        // number of interior edges <= depth
        self.edges[1..n].partition_point(|&e| e <= depth)
    }

    /// Discretize a `N×1×H×W` depth map; pixels where `valid` is zero (or the
    /// depth is not finite) map to `-1`.
    pub fn discretize<S: Scalar>(
        &self,
        depth: &Tensor<S>,
        valid: Option<&Tensor<S>>,
    ) -> Result<BinIndexMap> {
        let s = depth.shape();
        if s.c != 1 {
            return Err(shape_err(
                "discretize",
                format!("depth must have 1 channel, got {}", s.c),
            ));
        }
        if let Some(m) = valid {
            if m.shape() != s {
                return Err(shape_err(
                    "discretize",
                    format!("mask {:?} vs depth {:?}", m.shape().dims(), s.dims()),
                ));
            }
        }
        let data = depth
            .data()
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let ok = valid.is_none_or(|m| m.data()[i] != S::zero()) && d.is_finite();
                if ok {
                    self.bin_of(d.as_f64()) as i32
                } else {
                    -1
                }
            })
            .collect();
        Ok(BinIndexMap {
            n: s.n,
            h: s.h,
            w: s.w,
            n_bins: self.n_bins(),
            data,
        })
    }
}

fn check_range(d_min: f64, d_max: f64, n_bins: usize) -> Result<()> {
    if n_bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {n_bins}")));
    }
    if !(d_min.is_finite() && d_max.is_finite()) || d_min >= d_max {
        return Err(Error::Config(format!(
            "depth range must satisfy d_min < d_max, got [{d_min}, {d_max}]"
        )));
    }
    Ok(())
}

/// Per-pixel bin indices for a batch of depth maps; `-1` marks invalid pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinIndexMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub n_bins: usize,
    pub data: Vec<i32>,
}

impl BinIndexMap {
    pub fn sample(&self, n: usize) -> &[i32] {
        let p = self.h * self.w;
        &self.data[n * p..(n + 1) * p]
    }

    /// Binary mask (`N×1×H×W`) selecting the pixels of bin `d`.
    pub fn mask<S: Scalar>(&self, d: usize) -> Result<Tensor<S>> {
        if d >= self.n_bins {
            return Err(shape_err(
                "bin_mask",
                format!("bin {d} out of range {}", self.n_bins),
            ));
        }
        let data = self
            .data
            .iter()
            .map(|&b| if b == d as i32 { S::one() } else { S::zero() })
            .collect();
        Tensor::from_vec(Shape::new(self.n, 1, self.h, self.w), data)
    }

    /// Pixel count per bin.
    pub fn histogram(&self) -> Vec<u64> {
        let mut counts = alloc::vec![0u64; self.n_bins];
        for &b in &self.data {
            if b >= 0 {
                counts[b as usize] += 1;
            }
        }
        counts
    }

    pub fn distinct_bins(&self) -> usize {
        self.histogram().iter().filter(|&&c| c > 0).count()
    }

    /// Concatenate along the batch axis.
    pub fn stack(maps: &[&BinIndexMap]) -> Result<BinIndexMap> {
        let first = maps
            .first()
            .ok_or_else(|| shape_err("stack", "no bin maps"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for m in maps {
            if (m.h, m.w, m.n_bins) != (first.h, first.w, first.n_bins) {
                return Err(shape_err("stack", "bin maps differ in size or bin count"));
            }
            n += m.n;
            data.extend_from_slice(&m.data);
        }
        Ok(BinIndexMap {
            n,
            h: first.h,
            w: first.w,
            n_bins: first.n_bins,
            data,
        })
    }

    /// Nearest-neighbour resize of the index map.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> BinIndexMap {
        BinIndexMap {
            n: self.n,
            h: out_h,
            w: out_w,
            n_bins: self.n_bins,
            data: crate::kernels::nearest(&self.data, self.n, self.h, self.w, out_h, out_w),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn sid_powers_of_two() {
        let s = BinningScheme::sid(1.0, 16.0, 4).unwrap();
        for (e, want) in s.edges.iter().zip([1.0, 2.0, 4.0, 8.0, 16.0]) {
            assert!((e - want).abs() < 1e-12, "{e} vs {want}");
        }
    }

    #[test]
    fn sid_first_interior_edge() {
        let s = BinningScheme::sid(0.7, 10.0, 64).unwrap();
        let want = (0.7f64.ln() + (10.0f64 / 0.7).ln() / 64.0).exp();
        assert!((s.edges[1] - want).abs() < 1e-12);
    }

    #[test]
    fn sid_constant_ratio() {
        let s = BinningScheme::sid(1.0, 10.0, 64).unwrap();
        let r0 = s.edges[1] / s.edges[0];
        for w in s.edges.windows(2) {
            assert!((w[1] / w[0] - r0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_ranges_rejected() {
        assert!(BinningScheme::sid(3.0, 3.0, 4).is_err());
        assert!(BinningScheme::sid(0.0, 3.0, 4).is_err());
        assert!(BinningScheme::sid(-1.0, 3.0, 4).is_err());
        assert!(BinningScheme::uniform(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn uniform_edges_and_lookup() {
        let s = BinningScheme::uniform(0.0, 4.0, 4).unwrap();
        assert_eq!(s.edges, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.bin_of(2.5), 2);
        for w in s.edges.windows(2) {
            assert_eq!(w[1] - w[0], 1.0);
        }
    }

    #[test]
    fn edge_conventions() {
        let s = BinningScheme::sid(1.0, 10.0, 64).unwrap();
        for k in 0..64 {
            assert_eq!(s.bin_of(s.edges[k]), k);
        }
        assert_eq!(s.bin_of(10.0), 63);
        assert_eq!(s.bin_of(100.0), 63);
        assert_eq!(s.bin_of(0.1), 0);
    }

    fn linear_scan(edges: &[f64], d: f64) -> usize {
        let n = edges.len() - 1;
        for i in 0..n {
            if d >= edges[i] && d < edges[i + 1] {
                return i;
            }
        }
        if d < edges[0] {
            0
        } else {
            n - 1
        }
    }

    #[test]
    fn discretize_masks_invalid() {
        let s = BinningScheme::uniform(0.0, 4.0, 4).unwrap();
        let depth =
            Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 4), vec![0.5, 1.5, 3.9, 2.0]).unwrap();
        let valid =
            Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 4), vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let b = s.discretize(&depth, Some(&valid)).unwrap();
        assert_eq!(b.data, vec![0, -1, 3, 2]);
        let absent = b.mask::<f32>(1).unwrap();
        assert!(absent.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_depth_mask_is_valid_mask() {
        let s = BinningScheme::sid(1.0, 10.0, 64).unwrap();
        let depth = Tensor::<f32>::full(Shape::new(1, 1, 3, 3), 4.2);
        let b = s.discretize(&depth, None).unwrap();
        let m = b.mask::<f32>(s.bin_of(4.2f32 as f64)).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    proptest! {
        #[test]
        fn discretize_matches_linear_scan(depths in prop::collection::vec(0.5f64..12.0, 1..200)) {
            let s = BinningScheme::sid(1.0, 10.0, 64).unwrap();
            for &d in &depths {
                prop_assert_eq!(s.bin_of(d), linear_scan(&s.edges, d));
            }
        }

        #[test]
        fn masks_partition_valid_pixels(
            depths in prop::collection::vec(1.0f32..10.0, 16),
            valid in prop::collection::vec(prop::bool::ANY, 16),
        ) {
            let s = BinningScheme::uniform(1.0, 10.0, 8).unwrap();
            let depth = Tensor::from_vec(Shape::new(1, 1, 4, 4), depths).unwrap();
            let vm = Tensor::from_vec(
                Shape::new(1, 1, 4, 4),
                valid.iter().map(|&v| if v { 1.0f32 } else { 0.0 }).collect(),
            ).unwrap();
            let b = s.discretize(&depth, Some(&vm)).unwrap();
            let mut total = [0.0f32; 16];
            for d in 0..8 {
                let m = b.mask::<f32>(d).unwrap();
                for (t, v) in total.iter_mut().zip(m.data()) {
                    *t += v;
                }
            }
            prop_assert_eq!(&total[..], vm.data());
        }

        #[test]
        fn discretize_is_monotone(a in 0.5f64..12.0, b in 0.5f64..12.0) {
            let s = BinningScheme::sid(1.0, 10.0, 64).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.bin_of(lo) <= s.bin_of(hi));
        }
    }
}
