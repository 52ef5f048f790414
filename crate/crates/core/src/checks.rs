//! Self-verification oracles shared by the `verify` command and the tests:
//! finite-difference gradient checks, MAC-count equivalence and the
//! published complexity table.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheck, Graph, GraphBuilder, Init, NodeId, ParamStore};
use crate::channel::{
    generate_synthetic_channel, nmse_db, normalize, rho, sample_rng, truncate_delay, ChannelDims, Dataset, DftPlan,
};
use crate::complexity::{analyze, published, verify_flops_against_execution, AccountingMode, MacCheckRow, Scope};
use crate::layers::{ConvSpec, Mode};
use crate::models::{Architecture, CompressionRatio, ModelGraph, ModelSpec, INPUT, TARGET};
use crate::{CMatrix, Error, Result, Shape4, Tensor4};
use num_complex::Complex64;

/// Largest accepted relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Largest accepted relative deviation of a parameter total from the table.
pub const PARAM_TOLERANCE: f64 = 0.0025;
/// Randomized layer configurations in the MAC-count check.
pub const MAC_CONFIGS: usize = 20;

fn uniform(shape: Shape4, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor4::from_vec(shape, data).expect("sized")
}

/// A single-op graph whose scalar output is `sum(op(...) * r)` for a fixed
/// random `r`, so every output element carries a distinct weight.
struct Probe {
    name: &'static str,
    graph: Graph,
    store: ParamStore<f64>,
}

fn probe(name: &'static str, seed: u64, build: impl Fn(&mut GraphBuilder<'_, f64>, &mut ChaCha8Rng) -> Result<NodeId>) -> Result<Probe> {
    let mut store = ParamStore::new();
    let out = {
        let mut b = GraphBuilder::new(&mut store, seed);
        let y = build(&mut b, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let graph = b.finish(y);
        graph.infer_shapes(&store, &[])?[graph.output()]
    };
    let r = uniform(out, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5));
    let mut b = GraphBuilder::new(&mut store, seed);
    let y = build(&mut b, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let rw = b.param("probe.r", false, |_| r)?;
    let m = b.mul(y, rw, "probe.mul");
    let l = b.sum_all(m, "probe.sum");
    Ok(Probe { name, graph: b.finish(l), store })
}

fn x_param(b: &mut GraphBuilder<'_, f64>, rng: &mut ChaCha8Rng, shape: Shape4) -> Result<NodeId> {
    let v = uniform(shape, -1.0, 1.0, rng);
    b.param("x", true, |_| v)
}

fn layer_probes(seed: u64) -> Result<Vec<Probe>> {
    let s = Shape4::of;
    let conv = |k, ci, co, stride, bias| ConvSpec::new(k, ci, co, stride, bias).expect("static spec");
    Ok(alloc::vec![
        probe("conv3x3", seed, |b, r| {
            let x = x_param(b, r, s(2, 3, 6, 5))?;
            b.conv2d(x, "conv", conv(3, 3, 9, 1, true), Init::HeUniform)
        })?,
        probe("conv3x3-stride2", seed + 1, |b, r| {
            let x = x_param(b, r, s(2, 3, 7, 6))?;
            b.conv2d(x, "conv", conv(3, 3, 8, 2, false), Init::HeUniform)
        })?,
        probe("conv-narrow", seed + 2, |b, r| {
            let x = x_param(b, r, s(2, 5, 6, 6))?;
            b.conv2d(x, "conv", conv(3, 5, 2, 1, true), Init::GlorotUniform)
        })?,
        probe("conv1x1", seed + 3, |b, r| {
            let x = x_param(b, r, s(2, 6, 4, 4))?;
            b.conv2d(x, "conv", conv(1, 6, 5, 1, false), Init::HeUniform)
        })?,
        probe("depthwise-stride2", seed + 4, |b, r| {
            let x = x_param(b, r, s(2, 4, 6, 6))?;
            b.depthwise_conv2d(x, "dw", 4, 3, 2)
        })?,
        probe("depthwise-stride1", seed + 5, |b, r| {
            let x = x_param(b, r, s(2, 3, 5, 5))?;
            b.depthwise_conv2d(x, "dw", 3, 3, 1)
        })?,
        probe("batchnorm", seed + 6, |b, r| {
            let x = x_param(b, r, s(3, 4, 3, 3))?;
            b.batch_norm(x, "bn", 4, Default::default())
        })?,
        probe("dense", seed + 7, |b, r| {
            let x = x_param(b, r, s(3, 6, 1, 1))?;
            b.dense(x, "fc", 6, 4, true)
        })?,
        probe("avgpool", seed + 8, |b, r| {
            let x = x_param(b, r, s(2, 3, 6, 4))?;
            Ok(b.avg_pool2(x, "pool"))
        })?,
        probe("upsample", seed + 9, |b, r| {
            let x = x_param(b, r, s(2, 3, 3, 4))?;
            Ok(b.upsample2(x, "up"))
        })?,
        probe("leaky-relu", seed + 10, |b, r| {
            let x = x_param(b, r, s(2, 3, 4, 4))?;
            Ok(b.leaky_relu(x, "act", 0.3))
        })?,
        probe("sigmoid", seed + 11, |b, r| {
            let x = x_param(b, r, s(2, 3, 4, 4))?;
            Ok(b.sigmoid(x, "sig"))
        })?,
        probe("concat-shuffle", seed + 12, |b, r| {
            let x = x_param(b, r, s(2, 4, 3, 3))?;
            let v = uniform(s(2, 4, 3, 3), -1.0, 1.0, r);
            let y = b.param("y", true, |_| v)?;
            let c = b.concat(x, y, "cat");
            Ok(b.channel_shuffle(c, 4, "shuffle"))
        })?,
        probe("slice-add", seed + 13, |b, r| {
            let x = x_param(b, r, s(2, 6, 3, 3))?;
            let lo = b.channel_slice(x, 0, 3, "lo");
            let hi = b.channel_slice(x, 3, 6, "hi");
            Ok(b.add(lo, hi, "add"))
        })?,
        probe("mse-loss", seed + 14, |b, r| {
            let x = x_param(b, r, s(3, 2, 4, 4))?;
            let v = uniform(s(3, 2, 4, 4), 0.0, 1.0, r);
            let t = b.param("target", false, |_| v)?;
            Ok(b.mse_loss(x, t, "loss"))
        })?,
    ])
}

/// One gradient-check result tagged with the graph it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedCheck {
    pub graph: String,
    pub check: GradCheck,
}

/// Central-difference checks of every trainable tensor of every single-layer
/// probe graph (batch norm in training mode).
pub fn layer_gradient_checks(probes: usize, eps: f64, seed: u64) -> Result<Vec<TaggedCheck>> {
    let mut out = Vec::new();
    for p in layer_probes(seed)? {
        for name in p.store.trainable().map(|e| e.name.clone()).collect::<Vec<_>>() {
            let check = grad_check(&p.graph, &p.store, &[], Mode::Train, &name, probes, eps, seed)?;
            out.push(TaggedCheck { graph: p.name.into(), check });
        }
    }
    Ok(out)
}

/// Inputs for a full-architecture check: `n` random images in `[0, 1]`.
pub fn architecture_input(spec: &ModelSpec, n: usize, seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uniform(spec.input_shape(n), 0.0, 1.0, &mut rng)
}

/// Moves batch-norm scales into `[0.5, 1.5]` and shifts and biases into
/// `[-1, 1]`. At the identity init `gamma = 1, beta = 0` a BN followed by
/// a leaky ReLU and another BN is scale invariant, which leaves gradients at
/// roundoff level that no difference quotient can resolve.
pub fn perturb_affine(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAFF1);
    for e in store.entries_mut().iter_mut().filter(|e| e.trainable) {
        let range = if e.name.ends_with(".gamma") {
            0.5..1.5
        } else if e.name.ends_with(".beta") || e.name.ends_with(".bias") {
            -1.0..1.0
        } else {
            continue;
        };
        for v in e.value.data_mut() {
            *v = rng.gen_range(range.clone());
        }
    }
}

/// Checks every trainable tensor of the training graph of one architecture
/// (64-bit, batch norm in training mode, reconstruction loss against the
/// input) at a point moved off the identity init by [`perturb_affine`].
/// `progress` is called after each tensor.
pub fn architecture_gradient_checks(
    spec: &ModelSpec,
    batch: usize,
    probes: usize,
    eps: f64,
    seed: u64,
    progress: &mut dyn FnMut(&GradCheck),
) -> Result<Vec<GradCheck>> {
    let mut model = ModelGraph::<f64>::build(spec.clone(), seed)?;
    perturb_affine(model.params_mut(), seed);
    let x = architecture_input(spec, batch, seed ^ 0x5EED);
    let inputs = [(INPUT, &x), (TARGET, &x)];
    let names: Vec<String> = model.params().trainable().map(|e| e.name.clone()).collect();
    let mut out = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let c = grad_check(model.training_graph(), model.params(), &inputs, Mode::Train, name, probes, eps, seed + i as u64)?;
        progress(&c);
        out.push(c);
    }
    Ok(out)
}

/// A randomly drawn single-layer configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerConfig {
    pub depthwise: bool,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

/// Draws `count` conv / depthwise configurations.
pub fn random_layer_configs(count: usize, seed: u64) -> Vec<LayerConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let depthwise = i % 3 == 2;
            let ci = rng.gen_range(1..=24);
            LayerConfig {
                depthwise,
                kernel: [1, 3, 5][rng.gen_range(0..3)],
                stride: rng.gen_range(1..=2),
                in_channels: ci,
                out_channels: if depthwise { ci } else { rng.gen_range(1..=24) },
                n: rng.gen_range(1..=3),
                h: rng.gen_range(1..=17),
                w: rng.gen_range(1..=17),
            }
        })
        .collect()
}

/// Builds the layer, runs it and returns analytic vs counted MACs.
pub fn mac_check(cfg: &LayerConfig, seed: u64) -> Result<MacCheckRow> {
    let mut store = ParamStore::<f32>::new();
    let mut b = GraphBuilder::new(&mut store, seed);
    let x = b.input("x");
    let y = if cfg.depthwise {
        b.depthwise_conv2d(x, "layer", cfg.in_channels, cfg.kernel, cfg.stride)?
    } else {
        let spec = ConvSpec::new(cfg.kernel, cfg.in_channels, cfg.out_channels, cfg.stride, false)?;
        b.conv2d(x, "layer", spec, Init::HeUniform)?
    };
    let g = b.finish(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape4::new(cfg.n, cfg.in_channels, cfg.h, cfg.w)?;
    let input = uniform(shape, -1.0, 1.0, &mut rng).cast::<f32>();
    let report = verify_flops_against_execution(&g, &store, &[("x", &input)])?;
    Ok(report.rows.into_iter().next().expect("one layer row"))
}

/// One published complexity entry next to the analyzer's figures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableEntry {
    pub arch: Architecture,
    pub cr_den: u32,
    pub params: u64,
    pub flops: u64,
    pub published_params: u64,
    pub published_flops: u64,
}

/// Paper-table encoder accounting for all four published configurations.
pub fn table2_entries() -> Result<Vec<TableEntry>> {
    let mut out = Vec::new();
    for arch in [Architecture::ConvCsiNet, Architecture::ShuffleCsiNet] {
        for den in [16, 32] {
            let cr = CompressionRatio::one_over(den);
            let model = ModelGraph::<f32>::build(ModelSpec::new(arch, cr)?, 0)?;
            let r = analyze(&model, AccountingMode::paper_table(), Scope::Encoder)?;
            let (pp, pf) = published(arch, cr).expect("table lists every configuration");
            out.push(TableEntry { arch, cr_den: den, params: r.total_params, flops: r.total_flops, published_params: pp, published_flops: pf });
        }
    }
    Ok(out)
}

/// Output shapes of one configuration on a random batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeReport {
    pub arch: Architecture,
    pub cr_den: u32,
    pub codeword: Shape4,
    pub expected_codeword: Shape4,
    pub reconstruction: Shape4,
    pub expected_reconstruction: Shape4,
    /// Smallest and largest decoder output value.
    pub range: (f64, f64),
}

impl ShapeReport {
    pub fn passed(&self) -> bool {
        self.codeword == self.expected_codeword
            && self.reconstruction == self.expected_reconstruction
            && self.range.0 > 0.0
            && self.range.1 < 1.0
    }
}

/// Encodes and decodes `n` random inputs for every architecture and CR.
pub fn shape_conformance(n: usize, seed: u64) -> Result<Vec<ShapeReport>> {
    let mut out = Vec::new();
    for arch in [Architecture::ConvCsiNet, Architecture::ShuffleCsiNet] {
        for den in [16, 32] {
            let spec = ModelSpec::new(arch, CompressionRatio::one_over(den))?;
            let model = ModelGraph::<f32>::build(spec.clone(), seed)?;
            let x = architecture_input(&spec, n, seed).cast::<f32>();
            let s = model.encode(&x)?;
            let y = model.decode(&s)?;
            let lo = y.data().iter().fold(f64::INFINITY, |m, &v| m.min(v as f64));
            let hi = y.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            out.push(ShapeReport {
                arch,
                cr_den: den,
                codeword: s.shape(),
                expected_codeword: Shape4::new(n, spec.codeword_len() / 4, 2, 2)?,
                reconstruction: y.shape(),
                expected_reconstruction: Shape4::new(n, 2, 32, 32)?,
                range: (lo, hi),
            });
        }
    }
    Ok(out)
}

/// Regenerates every sample of `data` from its seed through the full
/// transform, truncation and normalization, and counts samples whose stored
/// tensor differs in any bit.
pub fn pipeline_consistency(data: &Dataset) -> Result<usize> {
    let profile = data
        .meta
        .profile
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("dataset has no synthetic profile to regenerate from".into()))?;
    let plan = DftPlan::new(data.meta.dims)?;
    let mut mismatches = 0;
    for i in 0..data.len() {
        let mut rng = sample_rng(profile.seed, data.meta.first_index + i as u64);
        let sample = generate_synthetic_channel(profile, &plan, &mut rng)?;
        let full = plan.forward(&sample.h_freq)?;
        let delay = truncate_delay(&full, data.meta.dims.ncp)?;
        let (x, _) = normalize(&[delay], &data.meta.info)?;
        let same = x.data().iter().zip(data.x.sample(i)).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

/// Measured values of the metric identities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricIdentities {
    /// `nmse(H, H/2)` in dB.
    pub nmse_half_db: f64,
    /// Largest `|rho(H, c H) - rho(H, H)|` over complex scalings `c`.
    pub rho_scale_deviation: f64,
    /// Largest relative Frobenius error of `inverse(forward(H))`.
    pub dft_round_trip: f64,
}

/// Evaluates the identities on `count` random channels.
pub fn metric_identities(count: usize, seed: u64) -> Result<MetricIdentities> {
    let dims = ChannelDims::default();
    let plan = DftPlan::new(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        let data = (0..rows * cols).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        CMatrix::from_vec(rows, cols, data).expect("sized")
    };
    let truth: Vec<CMatrix> = (0..count).map(|_| random(&mut rng, dims.ncp, dims.nt)).collect();
    let half: Vec<CMatrix> = truth.iter().map(|m| m.scale(Complex64::new(0.5, 0.0))).collect();
    let nmse_half_db = nmse_db(&truth, &half)?;

    let est: Vec<CMatrix> = (0..count).map(|_| random(&mut rng, dims.ncp, dims.nt)).collect();
    let base = rho(&truth, &est, &plan)?.rho;
    let mut rho_scale_deviation: f64 = 0.0;
    for c in [Complex64::new(3.5, 0.0), Complex64::new(-0.25, 1.5), Complex64::new(0.0, -1e-3)] {
        let scaled: Vec<CMatrix> = est.iter().map(|m| m.scale(c)).collect();
        rho_scale_deviation = rho_scale_deviation.max((rho(&truth, &scaled, &plan)?.rho - base).abs());
        let scaled: Vec<CMatrix> = truth.iter().map(|m| m.scale(c)).collect();
        rho_scale_deviation = rho_scale_deviation.max((rho(&scaled, &est, &plan)?.rho - base).abs());
    }

    let mut dft_round_trip: f64 = 0.0;
    for _ in 0..count {
        let h = random(&mut rng, dims.nc, dims.nt);
        let back = plan.inverse(&plan.forward(&h)?)?;
        dft_round_trip = dft_round_trip.max(back.sub(&h)?.frobenius() / h.frobenius());
    }
    Ok(MetricIdentities { nmse_half_db, rho_scale_deviation, dft_round_trip })
}

/// Human-readable summary of a failed gradient check.
pub fn describe(c: &GradCheck) -> String {
    format!(
        "{}: max rel err {:.3e} at index {} over {} probes, max |a - n| {:.1e} (floor {:.1e})",
        c.parameter, c.max_rel_error, c.worst_index, c.probes, c.max_abs_error, c.noise_floor
    )
}
