//! ConvCsiNet and ShuffleCsiNet graph assembly, inference and the CSIW weights format.
//!
//! Both encoders map a `(n, 2, 32, 32)` normalized angular-delay image to an
//! `(n, M/4, 2, 2)` codeword; both share the same decoder (four DN units,
//! two RefineNet units, and a sigmoid convolution).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autodiff::{BnConfig, Graph, GraphBuilder, Init, NodeId, ParamStore, Tape, UnitKind};
use crate::codec::{put_shape, put_u32, Reader};
use crate::layers::{ConvSpec, Mode};
use crate::{Error, Result, Scalar, Shape4, Tensor4};

/// Name of the encoder/autoencoder input node.
pub const INPUT: &str = "x";
/// Name of the decoder input node.
pub const CODEWORD: &str = "s";
/// Name of the reconstruction target in the training graph.
pub const TARGET: &str = "target";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Architecture {
    ConvCsiNet,
    ShuffleCsiNet,
}

impl Architecture {
    pub fn id(self) -> u32 {
        match self {
            Self::ConvCsiNet => 0,
            Self::ShuffleCsiNet => 1,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Self::ConvCsiNet),
            1 => Ok(Self::ShuffleCsiNet),
            _ => Err(Error::Format(format!("unknown architecture id {id}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ConvCsiNet => "ConvCsiNet",
            Self::ShuffleCsiNet => "ShuffleCsiNet",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "convcsinet" => Ok(Self::ConvCsiNet),
            "shufflecsinet" => Ok(Self::ShuffleCsiNet),
            _ => Err(Error::Spec(format!("unknown architecture '{s}'"))),
        }
    }
}

/// Codeword length over raw CSI length, stored as a reduced-or-not fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CompressionRatio {
    pub num: u32,
    pub den: u32,
}

impl CompressionRatio {
    /// `1 / den`.
    pub fn one_over(den: u32) -> Self {
        Self { num: 1, den }
    }
}

impl fmt::Display for CompressionRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Architecture, compression ratio and input geometry of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub cr: CompressionRatio,
    /// Retained delay rows `N_c'`.
    pub ncp: usize,
    /// Transmit antennas `N_t`.
    pub nt: usize,
    pub groups: usize,
    /// Output widths of DN units 1-3 (DN4 always emits 2 channels).
    pub decoder_channels: [usize; 3],
    pub leaky_alpha: f64,
    pub bn: BnConfig,
}

impl ModelSpec {
    pub fn new(arch: Architecture, cr: CompressionRatio) -> Result<Self> {
        let spec = Self {
            arch,
            cr,
            ncp: 32,
            nt: 32,
            groups: 8,
            decoder_channels: [512, 256, 128],
            leaky_alpha: 0.3,
            bn: BnConfig::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, d) in [("N_c'", self.ncp), ("N_t", self.nt)] {
            if d < 16 || !d.is_power_of_two() {
                return Err(Error::Spec(format!("{name} = {d} must be a power of two >= 16")));
            }
        }
        if self.cr.num == 0 || self.cr.den == 0 || self.cr.num > self.cr.den {
            return Err(Error::Spec(format!("compression ratio {} must lie in (0, 1]", self.cr)));
        }
        let raw = 2 * self.ncp * self.nt;
        if (raw * self.cr.num as usize) % self.cr.den as usize != 0 {
            return Err(Error::Spec(format!("CR {} does not divide {raw} raw values", self.cr)));
        }
        let m = self.codeword_len();
        let (ch, cw) = self.codeword_extent();
        if m == 0 || m % (ch * cw) != 0 || m % 4 != 0 {
            return Err(Error::Spec(format!("codeword length {m} must be a positive multiple of {}", ch * cw)));
        }
        if self.groups == 0 {
            return Err(Error::Spec("shuffle groups must be >= 1".into()));
        }
        if self.arch == Architecture::ShuffleCsiNet {
            for c in [64, 128, 256] {
                if (2 * c) % self.groups != 0 {
                    return Err(Error::Spec(format!("{} channels not divisible by {} groups", 2 * c, self.groups)));
                }
            }
        }
        if self.decoder_channels.contains(&0) {
            return Err(Error::Spec("decoder widths must be >= 1".into()));
        }
        Ok(())
    }

    /// `M = 2 * N_c' * N_t * CR`.
    pub fn codeword_len(&self) -> usize {
        2 * self.ncp * self.nt * self.cr.num as usize / self.cr.den as usize
    }

    /// Spatial extent of the codeword feature map after four halvings.
    pub fn codeword_extent(&self) -> (usize, usize) {
        (self.ncp / 16, self.nt / 16)
    }

    pub fn codeword_channels(&self) -> usize {
        let (h, w) = self.codeword_extent();
        self.codeword_len() / (h * w)
    }

    pub fn input_shape(&self, n: usize) -> Shape4 {
        Shape4::of(n, 2, self.ncp, self.nt)
    }

    pub fn codeword_shape(&self, n: usize) -> Shape4 {
        let (h, w) = self.codeword_extent();
        Shape4::of(n, self.codeword_channels(), h, w)
    }
}

fn conv(k: usize, ci: usize, co: usize, bias: bool) -> ConvSpec {
    ConvSpec::new(k, ci, co, 1, bias).expect("static conv spec")
}

/// conv 3x3 (no bias) -> BN -> LeakyReLU.
fn conv_bn_act<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, name: &str, ci: usize, co: usize, k: usize, spec: &ModelSpec) -> Result<NodeId> {
    let c = b.conv2d(x, &format!("{name}.conv"), conv(k, ci, co, false), Init::HeUniform)?;
    let n = b.batch_norm(c, &format!("{name}.bn"), co, spec.bn)?;
    Ok(b.leaky_relu(n, &format!("{name}.act"), spec.leaky_alpha))
}

fn stem<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, spec: &ModelSpec) -> Result<NodeId> {
    b.begin_unit("enc.stem", UnitKind::Stem, x);
    let y = conv_bn_act(b, x, "enc.stem", 2, 64, 3, spec)?;
    b.end_unit(y);
    Ok(y)
}

/// ECN unit: avg-pool 2x2 -> conv 3x3 -> BN -> LeakyReLU.
pub fn build_ecn_unit<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, name: &str, c_in: usize, c_out: usize, spec: &ModelSpec) -> Result<NodeId> {
    b.begin_unit(name, UnitKind::Ecn, x);
    let p = b.avg_pool2(x, &format!("{name}.pool"));
    let y = conv_bn_act(b, p, name, c_in, c_out, 3, spec)?;
    b.end_unit(y);
    Ok(y)
}

/// DN unit: bilinear 2x upsample -> conv 3x3 -> BN -> LeakyReLU.
pub fn build_dn_unit<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, name: &str, c_in: usize, c_out: usize, spec: &ModelSpec) -> Result<NodeId> {
    b.begin_unit(name, UnitKind::Dn, x);
    let u = b.upsample2(x, &format!("{name}.up"));
    let y = conv_bn_act(b, u, name, c_in, c_out, 3, spec)?;
    b.end_unit(y);
    Ok(y)
}

/// RefineNet unit: identity skip plus 2->8->16->2 conv chain, add, LeakyReLU.
pub fn build_refinenet_unit<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, name: &str, spec: &ModelSpec) -> Result<NodeId> {
    b.begin_unit(name, UnitKind::RefineNet, x);
    let h1 = conv_bn_act(b, x, &format!("{name}.c1"), 2, 8, 3, spec)?;
    let h2 = conv_bn_act(b, h1, &format!("{name}.c2"), 8, 16, 3, spec)?;
    let c3 = b.conv2d(h2, &format!("{name}.c3.conv"), conv(3, 16, 2, false), Init::HeUniform)?;
    let h3 = b.batch_norm(c3, &format!("{name}.c3.bn"), 2, spec.bn)?;
    let sum = b.add(x, h3, &format!("{name}.add"));
    let y = b.leaky_relu(sum, &format!("{name}.act"), spec.leaky_alpha);
    b.end_unit(y);
    Ok(y)
}

/// SN unit on `c` channels: two full-width branches, concat to `2c` at half
/// resolution, then channel shuffle.
pub fn build_sn_unit<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, name: &str, c: usize, spec: &ModelSpec) -> Result<NodeId> {
    if (2 * c) % spec.groups != 0 {
        return Err(Error::Shape(format!("{name}: {} channels not divisible by {} shuffle groups", 2 * c, spec.groups)));
    }
    b.begin_unit(name, UnitKind::Sn, x);
    // branch 1: depthwise 3x3 / 2 (BN) -> pointwise (BN, LeakyReLU)
    let d = b.depthwise_conv2d(x, &format!("{name}.b1.dw"), c, 3, 2)?;
    let d = b.batch_norm(d, &format!("{name}.b1.dw_bn"), c, spec.bn)?;
    let left = conv_bn_act(b, d, &format!("{name}.b1.pw"), c, c, 1, spec)?;
    // branch 2: pointwise (BN, LeakyReLU) -> depthwise 3x3 / 2 (BN) -> pointwise (BN, LeakyReLU)
    let p = conv_bn_act(b, x, &format!("{name}.b2.pw1"), c, c, 1, spec)?;
    let d = b.depthwise_conv2d(p, &format!("{name}.b2.dw"), c, 3, 2)?;
    let d = b.batch_norm(d, &format!("{name}.b2.dw_bn"), c, spec.bn)?;
    let right = conv_bn_act(b, d, &format!("{name}.b2.pw2"), c, c, 1, spec)?;
    let cat = b.concat(left, right, &format!("{name}.concat"));
    let y = b.channel_shuffle(cat, spec.groups, &format!("{name}.shuffle"));
    b.end_unit(y);
    Ok(y)
}

/// Encoder nodes from `x` to the codeword.
pub fn build_encoder<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, spec: &ModelSpec) -> Result<NodeId> {
    let m4 = spec.codeword_channels();
    let mut h = stem(b, x, spec)?;
    match spec.arch {
        Architecture::ConvCsiNet => {
            for (i, (ci, co)) in [(64, 128), (128, 256), (256, 512), (512, m4)].into_iter().enumerate() {
                h = build_ecn_unit(b, h, &format!("enc.ecn{}", i + 1), ci, co, spec)?;
            }
        }
        Architecture::ShuffleCsiNet => {
            for (i, c) in [64, 128, 256].into_iter().enumerate() {
                h = build_sn_unit(b, h, &format!("enc.sn{}", i + 1), c, spec)?;
            }
            b.begin_unit("enc.pool", UnitKind::PoolingStructure, h);
            let p = b.avg_pool2(h, "enc.pool.avg");
            h = conv_bn_act(b, p, "enc.pool", 512, m4, 3, spec)?;
            b.end_unit(h);
        }
    }
    Ok(h)
}

/// Decoder nodes from the codeword to the `(n, 2, N_c', N_t)` reconstruction.
pub fn build_decoder<T: Scalar>(b: &mut GraphBuilder<'_, T>, s: NodeId, spec: &ModelSpec) -> Result<NodeId> {
    let [d1, d2, d3] = spec.decoder_channels;
    let widths = [(spec.codeword_channels(), d1), (d1, d2), (d2, d3), (d3, 2)];
    let mut h = s;
    for (i, (ci, co)) in widths.into_iter().enumerate() {
        h = build_dn_unit(b, h, &format!("dec.dn{}", i + 1), ci, co, spec)?;
    }
    h = build_refinenet_unit(b, h, "dec.refine1", spec)?;
    h = build_refinenet_unit(b, h, "dec.refine2", spec)?;
    b.begin_unit("dec.head", UnitKind::Head, h);
    let c = b.conv2d(h, "dec.head.conv", conv(3, 2, 2, true), Init::GlorotUniform)?;
    let y = b.sigmoid(c, "dec.head.sigmoid");
    b.end_unit(y);
    Ok(y)
}

const DECODER_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// An assembled encoder/decoder pair with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T> {
    spec: ModelSpec,
    encoder: Graph,
    decoder: Graph,
    autoencoder: Graph,
    training: Graph,
    params: ParamStore<T>,
}

impl<T: Scalar> ModelGraph<T> {
    /// Builds all graphs and initializes parameters deterministically from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let encoder = {
            let mut b = GraphBuilder::new(&mut params, seed);
            let x = b.input(INPUT);
            let out = build_encoder(&mut b, x, &spec)?;
            b.finish(out)
        };
        let decoder = {
            let mut b = GraphBuilder::new(&mut params, seed ^ DECODER_SEED_SALT);
            let s = b.input(CODEWORD);
            let out = build_decoder(&mut b, s, &spec)?;
            b.finish(out)
        };
        let (autoencoder, training) = {
            let mut b = GraphBuilder::new(&mut params, 0);
            let x = b.input(INPUT);
            let s = build_encoder(&mut b, x, &spec)?;
            let y = build_decoder(&mut b, s, &spec)?;
            let recon = b.finish(y);
            let mut b = GraphBuilder::new(&mut params, 0);
            let x = b.input(INPUT);
            let s = build_encoder(&mut b, x, &spec)?;
            let y = build_decoder(&mut b, s, &spec)?;
            let t = b.input(TARGET);
            let l = b.mse_loss(y, t, "loss");
            (recon, b.finish(l))
        };
        Ok(Self { spec, encoder, decoder, autoencoder, training, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &Graph {
        &self.encoder
    }

    pub fn decoder(&self) -> &Graph {
        &self.decoder
    }

    /// Input `x` to reconstruction.
    pub fn autoencoder(&self) -> &Graph {
        &self.autoencoder
    }

    /// Inputs `x` and `target` to the scalar MSE loss.
    pub fn training_graph(&self) -> &Graph {
        &self.training
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Replaces every parameter and buffer (shapes must match).
    pub fn set_params(&mut self, params: ParamStore<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", self.params.len(), params.len())));
        }
        for e in params.entries() {
            self.params.get(&e.name)?.expect_same_shape(&e.value)?;
        }
        self.params = params;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            spec: self.spec.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            autoencoder: self.autoencoder.clone(),
            training: self.training.clone(),
            params: self.params.cast(),
        }
    }

    /// Inference-mode encoder pass.
    pub fn encode(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let want = self.spec.input_shape(x.shape().n);
        if x.shape() != want {
            return Err(Error::Shape(format!("encoder input {} does not match {want}", x.shape())));
        }
        let mut tape = Tape::new(&self.encoder);
        tape.forward(&self.params, &[(INPUT, x)], Mode::Infer).cloned()
    }

    /// Inference-mode decoder pass.
    pub fn decode(&self, s: &Tensor4<T>) -> Result<Tensor4<T>> {
        let want = self.spec.codeword_shape(s.shape().n);
        if s.shape() != want {
            return Err(Error::Shape(format!("decoder input {} does not match {want}", s.shape())));
        }
        let mut tape = Tape::new(&self.decoder);
        tape.forward(&self.params, &[(CODEWORD, s)], Mode::Infer).cloned()
    }

    /// Inference-mode reconstruction, processed `chunk` samples at a time.
    pub fn reconstruct(&self, x: &Tensor4<T>, chunk: usize) -> Result<Tensor4<T>> {
        let n = x.shape().n;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let batch = x.slice_samples(start, end)?;
            parts.push(self.decode(&self.encode(&batch)?)?);
            start = end;
        }
        Tensor4::stack(&parts)
    }
}

pub const CSIW_MAGIC: &[u8; 4] = b"CSIW";
pub const CSIW_VERSION: u32 = 1;

/// Serializes the spec block and every stored tensor (as `f32`) in build order.
pub fn encode_weights<T: Scalar>(model: &ModelGraph<T>) -> Vec<u8> {
    let spec = model.spec();
    let mut out = Vec::new();
    out.extend_from_slice(CSIW_MAGIC);
    put_u32(&mut out, CSIW_VERSION);
    for v in [spec.arch.id(), spec.cr.num, spec.cr.den, spec.groups as u32, spec.ncp as u32, spec.nt as u32] {
        put_u32(&mut out, v);
    }
    let entries = model.params().entries();
    put_u32(&mut out, entries.len() as u32);
    for e in entries {
        put_u32(&mut out, e.name.len() as u32);
        out.extend_from_slice(e.name.as_bytes());
        put_shape(&mut out, e.value.shape());
        for &x in e.value.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

/// Reads only the header spec block of a CSIW file.
pub fn decode_weights_spec(bytes: &[u8]) -> Result<ModelSpec> {
    let mut r = Reader::new(bytes);
    read_spec_block(&mut r)
}

fn read_spec_block(r: &mut Reader<'_>) -> Result<ModelSpec> {
    if r.take(4, "magic")? != CSIW_MAGIC {
        return Err(Error::Format("bad magic, expected \"CSIW\"".into()));
    }
    let version = r.u32("version")?;
    if version != CSIW_VERSION {
        return Err(Error::Format(format!("unsupported CSIW version {version}")));
    }
    let arch = Architecture::from_id(r.u32("architecture id")?)?;
    let num = r.u32("CR numerator")?;
    let den = r.u32("CR denominator")?;
    let groups = r.u32("shuffle groups")? as usize;
    let ncp = r.u32("N_c'")? as usize;
    let nt = r.u32("N_t")? as usize;
    let mut spec = ModelSpec::new(arch, CompressionRatio { num, den }).map_err(|e| Error::Format(format!("{e}")))?;
    spec.groups = groups;
    spec.ncp = ncp;
    spec.nt = nt;
    spec.validate().map_err(|e| Error::Format(format!("{e}")))?;
    Ok(spec)
}

/// Loads a CSIW file into a model built for `expected`.
///
/// Fails with a spec error when the stored architecture or geometry differs,
/// and with a format error naming the parameter when a tensor is missing,
/// misshapen, duplicated, unexpected, non-finite, or a negative
/// running variance.
pub fn decode_weights(bytes: &[u8], expected: &ModelSpec) -> Result<ModelGraph<f32>> {
    let mut r = Reader::new(bytes);
    let stored = read_spec_block(&mut r)?;
    if stored.arch != expected.arch
        || stored.cr != expected.cr
        || stored.groups != expected.groups
        || stored.ncp != expected.ncp
        || stored.nt != expected.nt
    {
        return Err(Error::Spec(format!(
            "weights were saved for {} CR {} (g={}, {}x{}), requested {} CR {} (g={}, {}x{})",
            stored.arch, stored.cr, stored.groups, stored.ncp, stored.nt,
            expected.arch, expected.cr, expected.groups, expected.ncp, expected.nt
        )));
    }
    let count = r.u32("entry count")? as usize;
    let mut found: BTreeMap<String, Tensor4<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let shape = r.shape().map_err(|e| Error::Format(format!("parameter '{name}': {e}")))?;
        let value: Tensor4<f32> = r
            .payload(shape, &format!("payload of parameter '{name}'"))?;
        if !value.is_finite() {
            return Err(Error::Format(format!("parameter '{name}' contains non-finite values")));
        }
        if name.ends_with(".running_var") && value.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Format(format!("parameter '{name}' holds a negative variance")));
        }
        if found.insert(name.clone(), value).is_some() {
            return Err(Error::Format(format!("parameter '{name}' appears twice")));
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after last parameter", r.remaining())));
    }
    let mut model = ModelGraph::<f32>::build(expected.clone(), 0)?;
    for entry in model.params_mut().entries_mut() {
        let value = found
            .remove(&entry.name)
            .ok_or_else(|| Error::Format(format!("missing parameter tensor '{}'", entry.name)))?;
        if value.shape() != entry.value.shape() {
            return Err(Error::Format(format!(
                "parameter '{}' has shape {}, expected {}",
                entry.name,
                value.shape(),
                entry.value.shape()
            )));
        }
        entry.value = value;
    }
    if let Some(name) = found.keys().next() {
        return Err(Error::Format(format!("unexpected parameter '{name}'")));
    }
    Ok(model)
}

impl ModelSpec {
    /// Short identifier such as `convcsinet-cr16`.
    pub fn tag(&self) -> String {
        let arch = self.arch.name().to_ascii_lowercase();
        if self.cr.num == 1 {
            format!("{arch}-cr{}", self.cr.den)
        } else {
            format!("{arch}-cr{}-{}", self.cr.num, self.cr.den)
        }
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::new(Architecture::ConvCsiNet, CompressionRatio::one_over(16)).expect("default spec")
    }
}

#[allow(dead_code)]
fn _assert_send_sync() {
    fn check<X: Send + Sync>() {}
    check::<ModelGraph<f32>>();
    let _ = ToString::to_string("");
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(arch: Architecture, den: u32) -> ModelSpec {
        ModelSpec::new(arch, CompressionRatio::one_over(den)).unwrap()
    }

    #[test]
    fn codeword_geometry() {
        let s = spec(Architecture::ConvCsiNet, 16);
        assert_eq!(s.codeword_len(), 128);
        assert_eq!(s.codeword_shape(1), Shape4::of(1, 32, 2, 2));
        let s = spec(Architecture::ShuffleCsiNet, 32);
        assert_eq!(s.codeword_len(), 64);
        assert_eq!(s.codeword_shape(3), Shape4::of(3, 16, 2, 2));
        assert!(ModelSpec::new(Architecture::ConvCsiNet, CompressionRatio::one_over(3)).is_err());
        assert!(ModelSpec::new(Architecture::ConvCsiNet, CompressionRatio::one_over(1024)).is_err());
    }

    #[test]
    fn unit_shapes() {
        let s = spec(Architecture::ConvCsiNet, 16);
        let mut store = ParamStore::<f32>::new();
        let mut b = GraphBuilder::new(&mut store, 0);
        let x = b.input("x");
        let e1 = build_ecn_unit(&mut b, x, "e1", 64, 128, &s).unwrap();
        let g = b.finish(e1);
        let shapes = g.infer_shapes(&store, &[("x", Shape4::of(1, 64, 32, 32))]).unwrap();
        assert_eq!(shapes[g.output()], Shape4::of(1, 128, 16, 16));

        for (co, den) in [(32, 16), (16, 32)] {
            let mut store = ParamStore::<f32>::new();
            let mut b = GraphBuilder::new(&mut store, 0);
            let x = b.input("x");
            let e = build_ecn_unit(&mut b, x, "e4", 512, co, &spec(Architecture::ConvCsiNet, den)).unwrap();
            let g = b.finish(e);
            let shapes = g.infer_shapes(&store, &[("x", Shape4::of(1, 512, 4, 4))]).unwrap();
            assert_eq!(shapes[g.output()], Shape4::of(1, co, 2, 2));
        }

        for (ci, co, hin, hout) in [(32, 512, 2, 4), (512, 256, 4, 8), (128, 2, 16, 32)] {
            let mut store = ParamStore::<f32>::new();
            let mut b = GraphBuilder::new(&mut store, 0);
            let x = b.input("x");
            let d = build_dn_unit(&mut b, x, "dn", ci, co, &s).unwrap();
            let g = b.finish(d);
            let shapes = g.infer_shapes(&store, &[("x", Shape4::of(1, ci, hin, hin))]).unwrap();
            assert_eq!(shapes[g.output()], Shape4::of(1, co, hout, hout));
        }

        let mut store = ParamStore::<f32>::new();
        let mut b = GraphBuilder::new(&mut store, 0);
        let x = b.input("x");
        let sn = build_sn_unit(&mut b, x, "sn", 64, &spec(Architecture::ShuffleCsiNet, 16)).unwrap();
        let g = b.finish(sn);
        let shapes = g.infer_shapes(&store, &[("x", Shape4::of(1, 64, 32, 32))]).unwrap();
        assert_eq!(shapes[g.output()], Shape4::of(1, 128, 16, 16));
        let sn_params: usize = store
            .entries()
            .iter()
            .filter(|e| e.name.ends_with(".weight"))
            .map(|e| e.value.data().len())
            .sum();
        assert_eq!(sn_params, 2 * 9 * 64 + 3 * 64 * 64);
        assert_eq!(sn_params, 13_440);
    }

    #[test]
    fn sn_unit_rejects_indivisible_groups() {
        let mut s = spec(Architecture::ShuffleCsiNet, 16);
        s.groups = 3;
        let mut store = ParamStore::<f32>::new();
        let mut b = GraphBuilder::new(&mut store, 0);
        let x = b.input("x");
        assert!(build_sn_unit(&mut b, x, "sn", 64, &s).is_err());
    }

    #[test]
    fn weights_reject_wrong_architecture() {
        let m = ModelGraph::<f32>::build(spec(Architecture::ConvCsiNet, 16), 1).unwrap();
        let bytes = encode_weights(&m);
        assert!(matches!(decode_weights(&bytes, &spec(Architecture::ShuffleCsiNet, 16)), Err(Error::Spec(_))));
        assert!(matches!(decode_weights(&bytes, &spec(Architecture::ConvCsiNet, 32)), Err(Error::Spec(_))));
        assert_eq!(decode_weights_spec(&bytes).unwrap(), spec(Architecture::ConvCsiNet, 16));
    }
}
