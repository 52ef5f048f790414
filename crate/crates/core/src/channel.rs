//! Synthetic downlink channels, the angular-delay preprocessing pipeline,
//! normalization, dataset metadata and the NMSE / rho / gain metrics.
//!
//! Complex matrices are `N_c x N_t` (subcarrier rows, antenna columns). The
//! stored network input is the 2-channel real image of the first `N_c'`
//! angular-delay rows mapped affinely into `[0, 1]`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt::Write as _;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{mat_mul, CMatrix, Error, Result, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelDims {
    /// Subcarriers `N_c`.
    pub nc: usize,
    /// Transmit antennas `N_t`.
    pub nt: usize,
    /// Retained delay rows `N_c'`.
    pub ncp: usize,
}

impl Default for ChannelDims {
    fn default() -> Self {
        Self { nc: 256, nt: 32, ncp: 32 }
    }
}

impl ChannelDims {
    pub fn validate(&self) -> Result<()> {
        if self.nc == 0 || self.nt == 0 || self.ncp == 0 {
            return Err(Error::InvalidArgument("channel dimensions must be positive".into()));
        }
        if self.ncp > self.nc {
            return Err(Error::InvalidArgument(format!("N_c' = {} exceeds N_c = {}", self.ncp, self.nc)));
        }
        Ok(())
    }

    /// Shape of `n` stored samples.
    pub fn tensor_shape(&self, n: usize) -> Shape4 {
        Shape4::of(n, 2, self.ncp, self.nt)
    }
}

/// Unitary DFT matrix `F[j][k] = exp(-2 pi i j k / n) / sqrt(n)`.
pub fn dft_matrix(n: usize) -> CMatrix {
    let norm = 1.0 / libm::sqrt(n as f64);
    CMatrix::from_fn(n, n, |j, k| {
        // reduce the exponent first so large j*k keeps full precision
        let e = ((j * k) % n) as f64;
        let theta = -2.0 * PI * e / n as f64;
        Complex64::new(libm::cos(theta) * norm, libm::sin(theta) * norm)
    })
}

/// Precomputed `F_d`, `F_a` and their adjoints.
#[derive(Debug, Clone)]
pub struct DftPlan {
    dims: ChannelDims,
    fd: CMatrix,
    fd_top: CMatrix,
    fa: CMatrix,
    fd_h: CMatrix,
    fa_h: CMatrix,
}

impl DftPlan {
    pub fn new(dims: ChannelDims) -> Result<Self> {
        dims.validate()?;
        let fd = dft_matrix(dims.nc);
        let fa = dft_matrix(dims.nt);
        Ok(Self { dims, fd_top: fd.top_rows(dims.ncp)?, fd_h: fd.adjoint(), fa_h: fa.adjoint(), fd, fa })
    }

    pub fn dims(&self) -> ChannelDims {
        self.dims
    }

    fn check(&self, h: &CMatrix, rows: usize) -> Result<()> {
        if h.rows() != rows || h.cols() != self.dims.nt {
            return Err(Error::Shape(format!(
                "expected a {rows}x{} matrix, got {}x{}",
                self.dims.nt,
                h.rows(),
                h.cols()
            )));
        }
        Ok(())
    }

    /// `H' = F_d H F_a`.
    pub fn forward(&self, h_freq: &CMatrix) -> Result<CMatrix> {
        self.check(h_freq, self.dims.nc)?;
        mat_mul(&mat_mul(&self.fd, h_freq)?, &self.fa)
    }

    /// `H = F_d^H H' F_a^H`.
    pub fn inverse(&self, h_prime: &CMatrix) -> Result<CMatrix> {
        self.check(h_prime, self.dims.nc)?;
        mat_mul(&mat_mul(&self.fd_h, h_prime)?, &self.fa_h)
    }

    /// First `N_c'` rows of [`Self::forward`], bit-identical to truncating it.
    pub fn forward_truncated(&self, h_freq: &CMatrix) -> Result<CMatrix> {
        self.check(h_freq, self.dims.nc)?;
        mat_mul(&mat_mul(&self.fd_top, h_freq)?, &self.fa)
    }

    /// Zero-pads a truncated matrix and maps it back to the frequency domain.
    pub fn reconstruct_frequency(&self, h_delay: &CMatrix) -> Result<CMatrix> {
        self.inverse(&pad_delay(h_delay, self.dims.nc)?)
    }
}

/// Keeps the first `ncp` rows.
pub fn truncate_delay(h_prime: &CMatrix, ncp: usize) -> Result<CMatrix> {
    if ncp > h_prime.rows() {
        return Err(Error::InvalidArgument(format!("cannot keep {ncp} of {} rows", h_prime.rows())));
    }
    h_prime.top_rows(ncp)
}

/// Appends zero rows up to `nc` rows.
pub fn pad_delay(h_delay: &CMatrix, nc: usize) -> Result<CMatrix> {
    if h_delay.rows() > nc {
        return Err(Error::InvalidArgument(format!("cannot pad {} rows to {nc}", h_delay.rows())));
    }
    let mut data = h_delay.data().to_vec();
    data.resize(nc * h_delay.cols(), Complex64::new(0.0, 0.0));
    CMatrix::from_vec(nc, h_delay.cols(), data)
}

/// Sparse-cluster surrogate channel profile on the delay-angle grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProfile {
    pub clusters_min: usize,
    pub clusters_max: usize,
    /// Cluster delay centers are drawn from `0..delay_max`.
    pub delay_max: usize,
    /// e-folding distance of tap power in delay bins; 0 puts all power on the center.
    pub delay_spread: f64,
    /// e-folding distance of tap power in angle bins (circular).
    pub angle_spread: f64,
    /// Cluster `k` (0-based) carries power `exp(-power_decay * k)`.
    pub power_decay: f64,
    pub seed: u64,
}

impl Default for SyntheticProfile {
    /// The "easy" desk-scale profile.
    fn default() -> Self {
        Self { clusters_min: 1, clusters_max: 3, delay_max: 6, delay_spread: 1.0, angle_spread: 1.0, power_decay: 1.0, seed: 7 }
    }
}

/// Taps below this fraction of a cluster's center power are left at zero.
const TAP_FLOOR: f64 = 1e-4;

impl SyntheticProfile {
    pub fn validate(&self, dims: &ChannelDims) -> Result<()> {
        if self.clusters_min == 0 || self.clusters_max < self.clusters_min {
            return Err(Error::InvalidArgument(format!(
                "cluster count range {}..={} is empty or includes 0",
                self.clusters_min, self.clusters_max
            )));
        }
        if self.delay_max == 0 || self.delay_max > dims.ncp {
            return Err(Error::InvalidArgument(format!("delay_max {} must lie in 1..={}", self.delay_max, dims.ncp)));
        }
        for (name, v) in [("delay_spread", self.delay_spread), ("angle_spread", self.angle_spread), ("power_decay", self.power_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Draws the full `N_c x N_t` angular-delay grid (rows past `N_c'` stay zero).
    pub fn draw_delay_grid(&self, dims: &ChannelDims, rng: &mut impl Rng) -> CMatrix {
        let mut grid = CMatrix::zeros(dims.nc, dims.nt);
        let k = rng.gen_range(self.clusters_min..=self.clusters_max);
        for c in 0..k {
            let d0 = rng.gen_range(0..self.delay_max);
            let a0 = rng.gen_range(0..dims.nt);
            let power = libm::exp(-self.power_decay * c as f64);
            for d in 0..dims.ncp {
                let wd = decay_weight(d.abs_diff(d0) as f64, self.delay_spread);
                if wd < TAP_FLOOR {
                    continue;
                }
                for a in 0..dims.nt {
                    let da = a.abs_diff(a0).min(dims.nt - a.abs_diff(a0)) as f64;
                    let w = wd * decay_weight(da, self.angle_spread);
                    if w < TAP_FLOOR {
                        continue;
                    }
                    let amp = libm::sqrt(power * w / 2.0);
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    let v = grid.get(d, a) + Complex64::new(re * amp, im * amp);
                    grid.set(d, a, v);
                }
            }
        }
        // unit energy per realization
        let norm = grid.frobenius();
        if norm > 0.0 {
            grid = grid.scale(Complex64::new(1.0 / norm, 0.0));
        }
        grid
    }
}

fn decay_weight(dist: f64, spread: f64) -> f64 {
    if spread == 0.0 {
        if dist == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        libm::exp(-dist / spread)
    }
}

/// One realization in all three representations.
#[derive(Debug, Clone)]
pub struct ChannelSample {
    pub h_freq: CMatrix,
    /// First `N_c'` rows of `forward(h_freq)`.
    pub h_delay: CMatrix,
}

/// Draws a grid, maps it to the frequency domain and runs the forward pipeline.
pub fn generate_synthetic_channel(profile: &SyntheticProfile, plan: &DftPlan, rng: &mut impl Rng) -> Result<ChannelSample> {
    let dims = plan.dims();
    profile.validate(&dims)?;
    let grid = profile.draw_delay_grid(&dims, rng);
    let h_freq = plan.inverse(&grid)?;
    let h_delay = plan.forward_truncated(&h_freq)?;
    Ok(ChannelSample { h_freq, h_delay })
}

/// RNG for the sample with global index `index` (train, then val, then test).
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(index))
}

/// Truncated angular-delay matrices for samples `start..start + count`, plus
/// the summed fraction of frequency-domain energy the truncation retains.
pub fn generate_delay_batch(profile: &SyntheticProfile, plan: &DftPlan, start: u64, count: usize) -> Result<(Vec<CMatrix>, f64)> {
    let mut out = Vec::with_capacity(count);
    let mut retained = 0.0;
    for i in 0..count as u64 {
        let mut rng = sample_rng(profile.seed, start + i);
        let s = generate_synthetic_channel(profile, plan, &mut rng)?;
        let total = s.h_freq.norm_sqr();
        retained += if total > 0.0 { s.h_delay.norm_sqr() / total } else { 1.0 };
        out.push(s.h_delay);
    }
    Ok((out, retained))
}

/// Global affine map `x -> x * scale + offset`, same for real and imaginary parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationInfo {
    pub scale: f64,
    pub offset: f64,
}

impl NormalizationInfo {
    /// `scale = 0.5 / max |component|` over the training matrices, offset 0.5.
    pub fn fit(train: &[CMatrix]) -> Result<Self> {
        let peak = train
            .iter()
            .flat_map(|m| m.data().iter())
            .map(|z| z.re.abs().max(z.im.abs()))
            .fold(0.0, f64::max);
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(Error::Degenerate("training split has no nonzero finite entries".into()));
        }
        Ok(Self { scale: 0.5 / peak, offset: 0.5 })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite() && self.offset.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid normalization scale {} offset {}", self.scale, self.offset)));
        }
        Ok(())
    }

    pub fn apply(&self, v: f64) -> f64 {
        v * self.scale + self.offset
    }

    pub fn invert(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }
}

/// Writes matrices into an `(n, 2, rows, cols)` tensor through `info`,
/// clipping into `[0, 1]`. Returns the tensor and the number of clipped values.
pub fn normalize(mats: &[CMatrix], info: &NormalizationInfo) -> Result<(Tensor4<f32>, usize)> {
    info.validate()?;
    let (rows, cols) = match mats.first() {
        Some(m) => (m.rows(), m.cols()),
        None => return Err(Error::EmptyDataset("nothing to normalize".into())),
    };
    let plane = rows * cols;
    let mut data = vec![0.0f32; mats.len() * 2 * plane];
    let mut clipped = 0;
    for (i, m) in mats.iter().enumerate() {
        if m.rows() != rows || m.cols() != cols {
            return Err(Error::Shape(format!("sample {i} is {}x{}, expected {rows}x{cols}", m.rows(), m.cols())));
        }
        let base = i * 2 * plane;
        for (j, z) in m.data().iter().enumerate() {
            for (part, v) in [(0, z.re), (1, z.im)] {
                let y = info.apply(v);
                let c = y.clamp(0.0, 1.0);
                if c != y {
                    clipped += 1;
                }
                data[base + part * plane + j] = c as f32;
            }
        }
    }
    Ok((Tensor4::from_vec(Shape4::of(mats.len(), 2, rows, cols), data)?, clipped))
}

/// Inverse of [`normalize`] for every sample of an `(n, 2, h, w)` tensor.
pub fn denormalize(x: &Tensor4<f32>, info: &NormalizationInfo) -> Result<Vec<CMatrix>> {
    info.validate()?;
    let s = x.shape();
    if s.c != 2 {
        return Err(Error::Shape(format!("expected 2 channels (real, imaginary), got {s}")));
    }
    let plane = s.plane();
    (0..s.n)
        .map(|i| {
            let v = x.sample(i);
            let data = (0..plane)
                .map(|j| Complex64::new(info.invert(v[j] as f64), info.invert(v[plane + j] as f64)))
                .collect();
            CMatrix::from_vec(s.h, s.w, data)
        })
        .collect()
}

/// Per-sample `||H - H_hat||^2 / ||H||^2`.
pub fn nmse_ratios(truth: &[CMatrix], est: &[CMatrix]) -> Result<Vec<f64>> {
    if truth.len() != est.len() {
        return Err(Error::Shape(format!("{} truth samples vs {} estimates", truth.len(), est.len())));
    }
    if truth.is_empty() {
        return Err(Error::EmptyDataset("no samples to score".into()));
    }
    truth
        .iter()
        .zip(est)
        .enumerate()
        .map(|(i, (h, e))| {
            let denom = h.norm_sqr();
            if denom == 0.0 {
                return Err(Error::Degenerate(format!("sample {i} has a zero-norm ground truth")));
            }
            Ok(h.sub(e)?.norm_sqr() / denom)
        })
        .collect()
}

/// `10 log10` of a linear ratio; `-inf` for an exact match.
pub fn to_db(ratio: f64) -> f64 {
    if ratio == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * libm::log10(ratio)
    }
}

/// NMSE in dB over a batch (mean of per-sample ratios).
pub fn nmse_db(truth: &[CMatrix], est: &[CMatrix]) -> Result<f64> {
    let r = nmse_ratios(truth, est)?;
    Ok(to_db(r.iter().sum::<f64>() / r.len() as f64))
}

/// Cosine similarity accumulated over subcarriers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RhoStats {
    /// Mean over samples of the per-sample subcarrier mean.
    pub rho: f64,
    /// Zero-norm subcarrier pairs left out.
    pub skipped: usize,
}

/// `|h_hat^H h| / (||h_hat|| ||h||)` for one subcarrier, `None` if either is zero.
pub fn subcarrier_rho(h: &[Complex64], h_hat: &[Complex64]) -> Option<f64> {
    let nh: f64 = h.iter().map(|z| z.norm_sqr()).sum();
    let ne: f64 = h_hat.iter().map(|z| z.norm_sqr()).sum();
    if nh == 0.0 || ne == 0.0 {
        return None;
    }
    let inner: Complex64 = h_hat.iter().zip(h).map(|(e, t)| e.conj() * t).sum();
    Some(inner.norm() / libm::sqrt(nh * ne))
}

/// Mean rho over the rows of two frequency-domain matrices: (sum, used, skipped).
pub fn rho_frequency(h_freq: &CMatrix, h_hat_freq: &CMatrix) -> Result<(f64, usize, usize)> {
    if h_freq.rows() != h_hat_freq.rows() || h_freq.cols() != h_hat_freq.cols() {
        return Err(Error::Shape("rho operands differ in shape".into()));
    }
    let (mut sum, mut used, mut skipped) = (0.0, 0, 0);
    for r in 0..h_freq.rows() {
        match subcarrier_rho(h_freq.row(r), h_hat_freq.row(r)) {
            Some(v) => {
                sum += v;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    Ok((sum, used, skipped))
}

/// rho on truncated angular-delay matrices, evaluated per subcarrier after
/// zero-padding and inverse transform.
pub fn rho(truth_delay: &[CMatrix], est_delay: &[CMatrix], plan: &DftPlan) -> Result<RhoStats> {
    if truth_delay.len() != est_delay.len() {
        return Err(Error::Shape(format!("{} truth samples vs {} estimates", truth_delay.len(), est_delay.len())));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0;
    for (h, e) in truth_delay.iter().zip(est_delay) {
        let hf = plan.reconstruct_frequency(h)?;
        let ef = plan.reconstruct_frequency(e)?;
        let (sum, used, skip) = rho_frequency(&hf, &ef)?;
        skipped += skip;
        if used > 0 {
            total += sum / used as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Degenerate("every subcarrier had a zero-norm vector".into()));
    }
    Ok(RhoStats { rho: total / counted as f64, skipped })
}

/// `v = h_hat / ||h_hat||`.
pub fn beamformer(h_hat: &[Complex64]) -> Result<Vec<Complex64>> {
    let n = libm::sqrt(h_hat.iter().map(|z| z.norm_sqr()).sum::<f64>());
    if n == 0.0 {
        return Err(Error::Degenerate("zero channel estimate has no beamforming direction".into()));
    }
    Ok(h_hat.iter().map(|z| z / n).collect())
}

/// `|h^H v|`.
pub fn equivalent_channel_gain(h: &[Complex64], v: &[Complex64]) -> Result<f64> {
    if h.len() != v.len() {
        return Err(Error::Shape(format!("channel length {} vs beamformer length {}", h.len(), v.len())));
    }
    Ok(h.iter().zip(v).map(|(a, b)| a.conj() * b).sum::<Complex64>().norm())
}

pub const META_VERSION: u32 = 1;

/// Sidecar metadata of a stored dataset split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub split: String,
    pub count: usize,
    pub dims: ChannelDims,
    pub info: NormalizationInfo,
    /// Base seed; sample `i` of this split uses `seed + first_index + i`.
    pub seed: u64,
    pub first_index: u64,
    /// `None` for externally produced data.
    pub profile: Option<SyntheticProfile>,
    pub clipped: usize,
    pub energy_retained: f64,
}

impl DatasetMeta {
    /// UTF-8 `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "version={META_VERSION}");
        let _ = writeln!(s, "split={}", self.split);
        let _ = writeln!(s, "count={}", self.count);
        let _ = writeln!(s, "nc={}", self.dims.nc);
        let _ = writeln!(s, "nt={}", self.dims.nt);
        let _ = writeln!(s, "ncp={}", self.dims.ncp);
        let _ = writeln!(s, "scale={:?}", self.info.scale);
        let _ = writeln!(s, "offset={:?}", self.info.offset);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "first_index={}", self.first_index);
        let _ = writeln!(s, "clipped={}", self.clipped);
        let _ = writeln!(s, "energy_retained={:?}", self.energy_retained);
        if let Some(p) = &self.profile {
            let _ = writeln!(s, "profile.clusters_min={}", p.clusters_min);
            let _ = writeln!(s, "profile.clusters_max={}", p.clusters_max);
            let _ = writeln!(s, "profile.delay_max={}", p.delay_max);
            let _ = writeln!(s, "profile.delay_spread={:?}", p.delay_spread);
            let _ = writeln!(s, "profile.angle_spread={:?}", p.angle_spread);
            let _ = writeln!(s, "profile.power_decay={:?}", p.power_decay);
        }
        s
    }

    /// Parses [`Self::to_text`] output. Blank lines and `#` comments are ignored;
    /// unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: Vec<(&str, &str)> = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("metadata line {}: expected key=value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if kv.iter().any(|(kk, _)| *kk == k) {
                return Err(Error::Format(format!("metadata key '{k}' repeated")));
            }
            kv.push((k, v));
        }
        const KNOWN: [&str; 18] = [
            "version", "split", "count", "nc", "nt", "ncp", "scale", "offset", "seed", "first_index", "clipped",
            "energy_retained", "profile.clusters_min", "profile.clusters_max", "profile.delay_max",
            "profile.delay_spread", "profile.angle_spread", "profile.power_decay",
        ];
        if let Some((k, _)) = kv.iter().find(|(k, _)| !KNOWN.contains(k)) {
            return Err(Error::Format(format!("unknown metadata key '{k}'")));
        }
        let get = |k: &str| kv.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v);
        fn parse<V: core::str::FromStr>(k: &str, v: Option<&str>) -> Result<V> {
            let v = v.ok_or_else(|| Error::Format(format!("metadata key '{k}' missing")))?;
            v.parse().map_err(|_| Error::Format(format!("metadata key '{k}': cannot parse '{v}'")))
        }
        let version: u32 = parse("version", get("version"))?;
        if version != META_VERSION {
            return Err(Error::Format(format!("unsupported metadata version {version}")));
        }
        let profile = if get("profile.clusters_min").is_some() {
            Some(SyntheticProfile {
                clusters_min: parse("profile.clusters_min", get("profile.clusters_min"))?,
                clusters_max: parse("profile.clusters_max", get("profile.clusters_max"))?,
                delay_max: parse("profile.delay_max", get("profile.delay_max"))?,
                delay_spread: parse("profile.delay_spread", get("profile.delay_spread"))?,
                angle_spread: parse("profile.angle_spread", get("profile.angle_spread"))?,
                power_decay: parse("profile.power_decay", get("profile.power_decay"))?,
                seed: parse("seed", get("seed"))?,
            })
        } else {
            None
        };
        let meta = Self {
            split: get("split").unwrap_or("data").to_string(),
            count: parse("count", get("count"))?,
            dims: ChannelDims {
                nc: parse("nc", get("nc"))?,
                nt: parse("nt", get("nt"))?,
                ncp: parse("ncp", get("ncp"))?,
            },
            info: NormalizationInfo { scale: parse("scale", get("scale"))?, offset: parse("offset", get("offset"))? },
            seed: get("seed").map(|v| parse("seed", Some(v))).transpose()?.unwrap_or(0),
            first_index: get("first_index").map(|v| parse("first_index", Some(v))).transpose()?.unwrap_or(0),
            profile,
            clipped: get("clipped").map(|v| parse("clipped", Some(v))).transpose()?.unwrap_or(0),
            energy_retained: get("energy_retained").map(|v| parse("energy_retained", Some(v))).transpose()?.unwrap_or(1.0),
        };
        meta.dims.validate().map_err(|e| Error::Format(format!("{e}")))?;
        meta.info.validate().map_err(|e| Error::Format(format!("{e}")))?;
        Ok(meta)
    }

    /// Checks that a tensor matches the recorded count and dimensions.
    pub fn check_tensor(&self, x: &Tensor4<f32>) -> Result<()> {
        let want = self.dims.tensor_shape(self.count);
        if x.shape() != want {
            return Err(Error::Format(format!("metadata describes {want} but the tensor is {}", x.shape())));
        }
        Ok(())
    }
}

/// One stored split: normalized images plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor4<f32>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Denormalized truncated angular-delay matrices.
    pub fn delay_matrices(&self) -> Result<Vec<CMatrix>> {
        denormalize(&self.x, &self.meta.info)
    }
}

/// Split sizes for dataset generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train: 5_000, val: 1_000, test: 1_000 }
    }
}

impl SplitSizes {
    pub fn full_scale() -> Self {
        Self { train: 75_000, val: 12_500, test: 12_500 }
    }

    /// `(name, first global index, count)` in generation order.
    pub fn ranges(&self) -> [(&'static str, u64, usize); 3] {
        [
            ("train", 0, self.train),
            ("val", self.train as u64, self.val),
            ("test", (self.train + self.val) as u64, self.test),
        ]
    }
}

/// Assembles normalized splits from precomputed delay matrices (one vector
/// per split in train/val/test order). Normalization is fitted on train.
pub fn assemble_splits(
    profile: &SyntheticProfile,
    dims: ChannelDims,
    sizes: SplitSizes,
    delay: [Vec<CMatrix>; 3],
    retained: [f64; 3],
) -> Result<[Dataset; 3]> {
    if sizes.train == 0 {
        return Err(Error::EmptyDataset("training split must hold at least one sample".into()));
    }
    let info = NormalizationInfo::fit(&delay[0])?;
    let ranges = sizes.ranges();
    let mut out = Vec::with_capacity(3);
    for (k, mats) in delay.iter().enumerate() {
        let (name, first, count) = ranges[k];
        if mats.len() != count {
            return Err(Error::Shape(format!("{name}: {} matrices for {count} samples", mats.len())));
        }
        let (x, clipped) = if count == 0 {
            (Tensor4::zeros(dims.tensor_shape(0)), 0)
        } else {
            normalize(mats, &info)?
        };
        let energy_retained = if count == 0 { 1.0 } else { retained[k] / count as f64 };
        let meta = DatasetMeta {
            split: name.to_string(),
            count,
            dims,
            info,
            seed: profile.seed,
            first_index: first,
            profile: Some(profile.clone()),
            clipped,
            energy_retained,
        };
        out.push(Dataset { x, meta });
    }
    let test = out.pop().expect("three splits");
    let val = out.pop().expect("three splits");
    let train = out.pop().expect("three splits");
    Ok([train, val, test])
}

/// Generates and normalizes train/val/test on the current thread.
pub fn generate_splits(profile: &SyntheticProfile, dims: ChannelDims, sizes: SplitSizes) -> Result<[Dataset; 3]> {
    profile.validate(&dims)?;
    let plan = DftPlan::new(dims)?;
    let mut delay: [Vec<CMatrix>; 3] = Default::default();
    let mut retained = [0.0; 3];
    for (k, (_, first, count)) in sizes.ranges().into_iter().enumerate() {
        let (m, r) = generate_delay_batch(profile, &plan, first, count)?;
        delay[k] = m;
        retained[k] = r;
    }
    assemble_splits(profile, dims, sizes, delay, retained)
}

/// Fraction of energy in the single strongest cell.
pub fn peak_energy_fraction(m: &CMatrix) -> f64 {
    let total = m.norm_sqr();
    if total == 0.0 {
        return 0.0;
    }
    m.data().iter().map(|z| z.norm_sqr()).fold(0.0, f64::max) / total
}
