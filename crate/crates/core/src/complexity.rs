//! Analytic parameter and FLOP accounting over a built [`Graph`].
//!
//! Conv: `K^2 Ci Co` params, `Ho Wo K^2 Ci Co` FLOPs. Depthwise: `K^2 C`
//! params, `Ho Wo K^2 C` FLOPs. BN: `2C` params. Dense: `Ci Co` params,
//! `2 Ci Co` FLOPs. Pool: `C Hi Wi` FLOPs. Everything else is free.
//! Counts are per sample.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::{self, Write as _};
use core::str::FromStr;

use crate::autodiff::{Graph, NodeId, Op, ParamStore, Tape, UnitKind};
use crate::layers::Mode;
use crate::models::{Architecture, CompressionRatio, ModelGraph, CODEWORD, INPUT};
use crate::{Error, Result, Scalar, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccountingKind {
    /// The runtime graph as built.
    Standard,
    /// Reproduces the published encoder table: SN convs costed at unit output
    /// resolution plus one pooling term per SN unit; no bias or BN params.
    PaperTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccountingMode {
    pub kind: AccountingKind,
    pub include_bias: bool,
    pub include_bn: bool,
}

impl AccountingMode {
    pub fn standard() -> Self {
        Self { kind: AccountingKind::Standard, include_bias: true, include_bn: true }
    }

    pub fn paper_table() -> Self {
        Self { kind: AccountingKind::PaperTable, include_bias: false, include_bn: false }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            AccountingKind::Standard => "standard",
            AccountingKind::PaperTable => "paper-table",
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kind == AccountingKind::PaperTable && (self.include_bias || self.include_bn) {
            return Err(Error::InvalidArgument("paper-table accounting excludes bias and BN parameters".into()));
        }
        Ok(())
    }
}

impl FromStr for AccountingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::standard()),
            "paper-table" | "paper" => Ok(Self::paper_table()),
            _ => Err(Error::InvalidArgument(format!("unknown accounting mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Encoder,
    Decoder,
    Full,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::Decoder => "decoder",
            Self::Full => "full",
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Self::Encoder),
            "decoder" => Ok(Self::Decoder),
            "full" => Ok(Self::Full),
            _ => Err(Error::InvalidArgument(format!("unknown scope '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub layer: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
    /// Graph node the row was derived from; `None` for synthetic rows.
    pub node: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub rows: Vec<LayerRow>,
    pub total_params: u64,
    pub total_flops: u64,
    pub mode: AccountingMode,
    pub scope: Option<Scope>,
    pub title: String,
    pub footer: Vec<String>,
}

impl ComplexityReport {
    fn from_rows(rows: Vec<LayerRow>, mode: AccountingMode) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_flops = rows.iter().map(|r| r.flops).sum();
        Self { rows, total_params, total_flops, mode, scope: None, title: String::new(), footer: Vec::new() }
    }

    /// Aligned plain-text table with totals and footer.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        if !self.title.is_empty() {
            let _ = writeln!(out, "{}", self.title);
        }
        let scope = self.scope.map(Scope::name).unwrap_or("graph");
        let _ = writeln!(out, "mode: {}  scope: {scope}", self.mode.name());
        let _ = writeln!(out, "{:<width$}  {:<9}  {:>12}  {:>14}", "layer", "kind", "params", "flops");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:<9}  {:>12}  {:>14}",
                r.layer,
                r.kind,
                group_digits(r.params),
                group_digits(r.flops)
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:<9}  {:>12}  {:>14}",
            "total",
            "",
            group_digits(self.total_params),
            group_digits(self.total_flops)
        );
        for line in &self.footer {
            let _ = writeln!(out, "{line}");
        }
        out
    }

    /// CSV with columns `layer,kind,params,flops` and a final `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,params,flops\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.layer, r.kind, r.params, r.flops);
        }
        let _ = writeln!(out, "total,total,{},{}", self.total_params, self.total_flops);
        out
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// `1234567` -> `"1,234,567"`.
pub fn group_digits(v: u64) -> String {
    let s = v.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn param_shape<T: Scalar>(graph: &Graph, store: &ParamStore<T>, id: NodeId) -> Result<Shape4> {
    match &graph.nodes()[id].op {
        Op::Param { name } => Ok(store.get(name)?.shape()),
        other => Err(Error::InvalidArgument(format!("node {id} is a {} node, expected a parameter", other.kind()))),
    }
}

fn node_params<T: Scalar>(graph: &Graph, store: &ParamStore<T>, id: NodeId, mode: AccountingMode) -> Result<Option<u64>> {
    let node = &graph.nodes()[id];
    let bias = |store: &ParamStore<T>| -> Result<u64> {
        match node.inputs.get(2) {
            Some(&b) if mode.include_bias => Ok(param_shape(graph, store, b)?.numel() as u64),
            _ => Ok(0),
        }
    };
    let p = match &node.op {
        Op::Input { .. } | Op::Param { .. } => return Ok(None),
        Op::Conv2d { .. } | Op::Dense => {
            let w = param_shape(graph, store, node.inputs[1])?;
            (w.n * w.c * w.h * w.w) as u64 + bias(store)?
        }
        Op::DepthwiseConv2d { .. } => {
            let w = param_shape(graph, store, node.inputs[1])?;
            (w.n * w.h * w.w) as u64
        }
        Op::BatchNorm { .. } => {
            if mode.include_bn {
                2 * param_shape(graph, store, node.inputs[1])?.c as u64
            } else {
                0
            }
        }
        Op::AvgPool2
        | Op::BilinearUpsample2
        | Op::LeakyRelu { .. }
        | Op::Sigmoid
        | Op::Concat
        | Op::ChannelSlice { .. }
        | Op::ChannelShuffle { .. }
        | Op::Add => 0,
        Op::Mul | Op::Square | Op::SumAll | Op::MseLoss => {
            return Err(Error::InvalidArgument(format!(
                "unknown layer kind '{}' at '{}'",
                node.op.kind(),
                node.label
            )))
        }
    };
    Ok(Some(p))
}

/// Parameter rows for every layer node (FLOP column left at zero).
pub fn count_params<T: Scalar>(graph: &Graph, store: &ParamStore<T>, mode: AccountingMode) -> Result<ComplexityReport> {
    mode.validate()?;
    let mut rows = Vec::new();
    for (id, node) in graph.nodes().iter().enumerate() {
        if let Some(params) = node_params(graph, store, id, mode)? {
            rows.push(LayerRow { layer: node.label.clone(), kind: node.op.kind().to_string(), params, flops: 0, node: Some(id) });
        }
    }
    Ok(ComplexityReport::from_rows(rows, mode))
}

/// Parameter and FLOP rows; `inputs` binds every graph input to a per-sample shape.
pub fn count_flops<T: Scalar>(
    graph: &Graph,
    store: &ParamStore<T>,
    inputs: &[(&str, Shape4)],
    mode: AccountingMode,
) -> Result<ComplexityReport> {
    mode.validate()?;
    let inputs: Vec<(&str, Shape4)> = inputs.iter().map(|&(n, s)| (n, s.with_n(1))).collect();
    let shapes = graph.infer_shapes(store, &inputs)?;
    let nodes = graph.nodes();
    let mut rows = Vec::new();
    for (id, node) in nodes.iter().enumerate() {
        let Some(params) = node_params(graph, store, id, mode)? else { continue };
        let out = shapes[id];
        let sn_unit = node
            .unit
            .map(|u| &graph.units()[u])
            .filter(|u| u.kind == UnitKind::Sn && mode.kind == AccountingKind::PaperTable);
        // spatial extent conv-like rows are costed at
        let (ho, wo) = match sn_unit {
            Some(u) => (shapes[u.output].h, shapes[u.output].w),
            None => (out.h, out.w),
        };
        let flops = match &node.op {
            Op::Conv2d { .. } => {
                let w = param_shape(graph, store, node.inputs[1])?;
                (ho * wo * w.h * w.w * w.c * w.n) as u64
            }
            Op::DepthwiseConv2d { .. } => {
                let w = param_shape(graph, store, node.inputs[1])?;
                (ho * wo * w.h * w.w * w.n) as u64
            }
            Op::AvgPool2 => shapes[node.inputs[0]].sample_len() as u64,
            Op::Dense => {
                let w = param_shape(graph, store, node.inputs[1])?;
                2 * (w.n * w.c) as u64
            }
            _ => 0,
        };
        rows.push(LayerRow { layer: node.label.clone(), kind: node.op.kind().to_string(), params, flops, node: Some(id) });
        if let Some(u) = sn_unit {
            if u.output == id {
                let pool = shapes[u.input].sample_len() as u64;
                rows.push(LayerRow { layer: format!("{}.pool_term", u.name), kind: "pool".into(), params: 0, flops: pool, node: None });
            }
        }
    }
    Ok(ComplexityReport::from_rows(rows, mode))
}

/// Published encoder figures: (architecture, CR denominator, parameters, FLOPs).
pub const PUBLISHED_TABLE: [(Architecture, u32, u64, u64); 4] = [
    (Architecture::ConvCsiNet, 16, 1_697_144, 58_515_456),
    (Architecture::ConvCsiNet, 32, 1_623_416, 58_220_544),
    (Architecture::ShuffleCsiNet, 16, 415_528, 11_845_632),
    (Architecture::ShuffleCsiNet, 32, 341_800, 11_550_720),
];

/// Published (parameters, FLOPs) for an encoder, if the table lists it.
pub fn published(arch: Architecture, cr: CompressionRatio) -> Option<(u64, u64)> {
    PUBLISHED_TABLE
        .iter()
        .find(|&&(a, den, _, _)| a == arch && cr.num == 1 && den == cr.den)
        .map(|&(_, _, p, f)| (p, f))
}

/// Full report for one scope of a model, with the published-table footer
/// when the model and mode correspond to a table entry.
pub fn analyze<T: Scalar>(model: &ModelGraph<T>, mode: AccountingMode, scope: Scope) -> Result<ComplexityReport> {
    let spec = model.spec();
    let (graph, inputs) = match scope {
        Scope::Encoder => (model.encoder(), [(INPUT, spec.input_shape(1))]),
        Scope::Decoder => (model.decoder(), [(CODEWORD, spec.codeword_shape(1))]),
        Scope::Full => (model.autoencoder(), [(INPUT, spec.input_shape(1))]),
    };
    let mut report = count_flops(graph, model.params(), &inputs, mode)?;
    report.scope = Some(scope);
    report.title = format!("{} CR {} ({})", spec.arch, spec.cr, scope.name());
    if let (Scope::Encoder, Some((p, f))) = (scope, published(spec.arch, spec.cr)) {
        let dp = p as i64 - report.total_params as i64;
        let df = f as i64 - report.total_flops as i64;
        report.footer.push(format!("published params {} (residual {dp:+})", group_digits(p)));
        report.footer.push(format!("published flops  {} (residual {df:+})", group_digits(f)));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacCheckRow {
    pub layer: String,
    pub analytic: u64,
    pub counted: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacDiscrepancy {
    pub rows: Vec<MacCheckRow>,
}

impl MacDiscrepancy {
    pub fn mismatches(&self) -> impl Iterator<Item = &MacCheckRow> {
        self.rows.iter().filter(|r| r.analytic != r.counted)
    }

    pub fn is_exact(&self) -> bool {
        self.mismatches().next().is_none()
    }

    /// Errors naming the first mismatching layer.
    pub fn into_result(self) -> Result<Self> {
        if let Some(r) = self.mismatches().next() {
            return Err(Error::InvalidArgument(format!(
                "layer '{}': analytic {} MACs, kernels counted {}",
                r.layer, r.analytic, r.counted
            )));
        }
        Ok(self)
    }
}

/// Runs `graph` in inference mode on `inputs` and compares every conv and
/// depthwise node's counted MACs with `n` times its standard-mode FLOP row.
pub fn verify_flops_against_execution<T: Scalar>(
    graph: &Graph,
    store: &ParamStore<T>,
    inputs: &[(&str, &Tensor4<T>)],
) -> Result<MacDiscrepancy> {
    let shapes: Vec<(&str, Shape4)> = inputs.iter().map(|&(n, t)| (n, t.shape())).collect();
    let batch = inputs.first().map(|(_, t)| t.shape().n).unwrap_or(1) as u64;
    let report = count_flops(graph, store, &shapes, AccountingMode::standard())?;
    let mut tape = Tape::new(graph);
    tape.forward(store, inputs, Mode::Infer)?;
    let macs = tape.macs();
    let rows = report
        .rows
        .iter()
        .filter(|r| r.kind == "conv" || r.kind == "dwconv")
        .filter_map(|r| r.node.map(|id| MacCheckRow { layer: r.layer.clone(), analytic: r.flops * batch, counted: macs[id] }))
        .collect();
    Ok(MacDiscrepancy { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GraphBuilder;
    use crate::layers::ConvSpec;
    use crate::models::ModelSpec;
    use crate::autodiff::Init;

    #[test]
    fn digit_grouping() {
        assert_eq!(group_digits(0), "0");
        assert_eq!(group_digits(999), "999");
        assert_eq!(group_digits(1000), "1,000");
        assert_eq!(group_digits(58_515_456), "58,515,456");
    }

    #[test]
    fn single_layer_rows() {
        let mut store = ParamStore::<f32>::new();
        let mut b = GraphBuilder::new(&mut store, 0);
        let x = b.input("x");
        let c = b.conv2d(x, "c", ConvSpec::new(3, 2, 64, 1, true).unwrap(), Init::HeUniform).unwrap();
        let p = b.avg_pool2(c, "p");
        let g = b.finish(p);
        let r = count_flops(&g, &store, &[("x", Shape4::of(5, 2, 32, 32))], AccountingMode::standard()).unwrap();
        assert_eq!(r.rows[0].params, 1_152 + 64);
        assert_eq!(r.rows[0].flops, 1_179_648);
        assert_eq!(r.rows[1].flops, 65_536);
        let r = count_params(&g, &store, AccountingMode::paper_table()).unwrap();
        assert_eq!(r.total_params, 1_152);
    }

    #[test]
    fn dense_row() {
        let mut store = ParamStore::<f32>::new();
        let mut b = GraphBuilder::new(&mut store, 0);
        let x = b.input("x");
        let d = b.dense(x, "fc", 128, 64, true).unwrap();
        let g = b.finish(d);
        let r = count_flops(&g, &store, &[("x", Shape4::of(1, 128, 1, 1))], AccountingMode::standard()).unwrap();
        assert_eq!(r.rows[0].flops, 16_384);
        assert_eq!(r.rows[0].params, 128 * 64 + 64);
    }

    #[test]
    fn table_mode_rejects_bias_flag() {
        let mut m = AccountingMode::paper_table();
        m.include_bias = true;
        let store = ParamStore::<f32>::new();
        assert!(count_params(&Graph::default(), &store, m).is_err());
    }

    #[test]
    fn published_footer() {
        let model = ModelGraph::<f32>::build(ModelSpec::default(), 0).unwrap();
        let r = analyze(&model, AccountingMode::paper_table(), Scope::Encoder).unwrap();
        assert_eq!(r.total_flops, 58_515_456);
        assert!(r.footer[0].contains("+248"));
        assert!(r.to_csv().ends_with("total,total,1696896,58515456\n"));
    }
}
