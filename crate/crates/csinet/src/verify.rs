//! `verify`: runs the self-check oracles and prints a JSON summary.

use std::io::Write;
use std::time::Instant;

use anyhow::Result;
use csinet_core::channel::{ChannelDims, SplitSizes, SyntheticProfile};
use csinet_core::checks::{
    architecture_gradient_checks, describe, layer_gradient_checks, mac_check, metric_identities, pipeline_consistency,
    random_layer_configs, shape_conformance, table2_entries, GRAD_TOLERANCE, MAC_CONFIGS, PARAM_TOLERANCE,
};
use csinet_core::complexity::group_digits;
use csinet_core::models::{Architecture, CompressionRatio, ModelSpec};
use serde_json::{json, Value};

use crate::cli::VerifyArgs;
use crate::io;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }

    fn failed(name: impl Into<String>, e: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {e:#}"))
    }
}

pub fn complexity_table() -> CheckResult {
    let name = "complexity-table";
    let entries = match table2_entries() {
        Ok(e) => e,
        Err(e) => return CheckResult::failed(name, e),
    };
    let mut passed = true;
    let mut parts = Vec::new();
    for e in &entries {
        let dev = (e.params as f64 - e.published_params as f64).abs() / e.published_params as f64;
        let ok = e.flops == e.published_flops && dev < PARAM_TOLERANCE;
        passed &= ok;
        parts.push(format!(
            "{} 1/{}: flops {} (table {}), params {} (table {}, {:.3}%)",
            e.arch,
            e.cr_den,
            group_digits(e.flops),
            group_digits(e.published_flops),
            group_digits(e.params),
            group_digits(e.published_params),
            100.0 * dev
        ));
    }
    CheckResult::new(name, passed, parts.join("; "))
}

pub fn shapes(seed: u64) -> CheckResult {
    match shape_conformance(2, seed) {
        Ok(reports) => {
            let passed = reports.iter().all(|r| r.passed());
            let detail = reports
                .iter()
                .map(|r| format!("{} 1/{}: codeword {} output {} in [{:.4}, {:.4}]", r.arch, r.cr_den, r.codeword, r.reconstruction, r.range.0, r.range.1))
                .collect::<Vec<_>>()
                .join("; ");
            CheckResult::new("shapes", passed, detail)
        }
        Err(e) => CheckResult::failed("shapes", e),
    }
}

pub fn layer_gradients(probes: usize, eps: f64, seed: u64) -> CheckResult {
    let name = "layer-gradients";
    match layer_gradient_checks(probes, eps, seed) {
        Ok(checks) => {
            let worst = checks.iter().max_by(|a, b| a.check.max_rel_error.total_cmp(&b.check.max_rel_error)).expect("nonempty");
            let abs = checks.iter().map(|c| c.check.max_abs_error).fold(0.0, f64::max);
            let passed = checks.iter().all(|c| c.check.max_rel_error < GRAD_TOLERANCE);
            let failing: Vec<String> =
                checks.iter().filter(|c| c.check.max_rel_error >= GRAD_TOLERANCE).map(|c| format!("{} {}", c.graph, describe(&c.check))).collect();
            let detail = if failing.is_empty() {
                format!(
                    "{} tensors, worst rel {:.2e} ({} {}), max |a - n| {abs:.1e}",
                    checks.len(),
                    worst.check.max_rel_error,
                    worst.graph,
                    worst.check.parameter
                )
            } else {
                failing.join("; ")
            };
            CheckResult::new(name, passed, detail)
        }
        Err(e) => CheckResult::failed(name, e),
    }
}

pub fn architecture_gradients(arch: Architecture, cr: u32, probes: usize, eps: f64, seed: u64, err: &mut dyn Write) -> CheckResult {
    let name = format!("gradients-{}", arch.name().to_ascii_lowercase());
    let spec = match ModelSpec::new(arch, CompressionRatio::one_over(cr)) {
        Ok(s) => s,
        Err(e) => return CheckResult::failed(name, e),
    };
    let mut progress = |c: &csinet_core::autodiff::GradCheck| {
        let _ = writeln!(err, "  {}", describe(c));
    };
    match architecture_gradient_checks(&spec, 1, probes, eps, seed, &mut progress) {
        Ok(checks) => {
            let worst = checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("nonempty");
            let failing: Vec<String> = checks.iter().filter(|c| c.max_rel_error >= GRAD_TOLERANCE).map(describe).collect();
            let floor: usize = checks.iter().map(|c| c.below_floor).sum();
            let kinks: usize = checks.iter().map(|c| c.kinks).sum();
            let abs = checks.iter().map(|c| c.max_abs_error).fold(0.0, f64::max);
            let bound = checks.iter().map(|c| c.noise_floor).fold(0.0, f64::max);
            let detail = if failing.is_empty() {
                format!(
                    "{} tensors, worst rel {:.2e} ({}), max |a - n| {abs:.1e} against roundoff bound {bound:.1e}, {} of {} probes within the bound, {} kink redraws",
                    checks.len(),
                    worst.max_rel_error,
                    worst.parameter,
                    floor,
                    checks.iter().map(|c| c.probes).sum::<usize>(),
                    kinks
                )
            } else {
                failing.join("; ")
            };
            CheckResult::new(name, failing.is_empty(), detail)
        }
        Err(e) => CheckResult::failed(name, e),
    }
}

pub fn mac_equivalence(seed: u64) -> CheckResult {
    let name = "mac-equivalence";
    let mut bad = Vec::new();
    for (i, cfg) in random_layer_configs(MAC_CONFIGS, seed).iter().enumerate() {
        match mac_check(cfg, seed + i as u64) {
            Ok(r) if r.analytic == r.counted => {}
            Ok(r) => bad.push(format!("{cfg:?}: analytic {} counted {}", r.analytic, r.counted)),
            Err(e) => return CheckResult::failed(name, e),
        }
    }
    let detail = if bad.is_empty() { format!("{MAC_CONFIGS} configurations exact") } else { bad.join("; ") };
    CheckResult::new(name, bad.is_empty(), detail)
}

pub fn pipeline(seed: u64) -> CheckResult {
    let name = "pipeline-consistency";
    let profile = SyntheticProfile { seed, ..SyntheticProfile::default() };
    let sizes = SplitSizes { train: 16, val: 8, test: 8 };
    let splits = match csinet_core::channel::generate_splits(&profile, ChannelDims::default(), sizes) {
        Ok(s) => s,
        Err(e) => return CheckResult::failed(name, e),
    };
    let mut total = 0;
    for d in &splits {
        match pipeline_consistency(d) {
            Ok(m) => total += m,
            Err(e) => return CheckResult::failed(name, e),
        }
    }
    CheckResult::new(name, total == 0, format!("{total} of 32 regenerated samples differ"))
}

pub fn metrics(seed: u64) -> CheckResult {
    match metric_identities(8, seed) {
        Ok(m) => {
            let passed = (m.nmse_half_db + 6.02).abs() <= 0.01 && m.rho_scale_deviation <= 1e-6 && m.dft_round_trip < 1e-6;
            let detail = format!(
                "nmse(H, H/2) {:.4} dB, rho scale deviation {:.1e}, DFT round trip {:.1e}",
                m.nmse_half_db, m.rho_scale_deviation, m.dft_round_trip
            );
            CheckResult::new("metric-identities", passed, detail)
        }
        Err(e) => CheckResult::failed("metric-identities", e),
    }
}

pub fn weights_file(path: &std::path::Path) -> CheckResult {
    let name = "weights";
    match io::read_weights(path, None) {
        Ok(m) => {
            let n: usize = m.params().entries().iter().map(|e| e.value.data().len()).sum();
            CheckResult::new(name, true, format!("{}: {} {} tensors, {n} values", path.display(), m.spec().tag(), m.params().len()))
        }
        Err(e) => CheckResult::failed(name, e),
    }
}

pub fn summary(results: &[CheckResult]) -> Value {
    json!({
        "passed": results.iter().all(|r| r.passed),
        "checks": results
            .iter()
            .map(|r| json!({ "name": r.name, "passed": r.passed, "detail": r.detail }))
            .collect::<Vec<_>>(),
    })
}

pub fn run(a: &VerifyArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let quick = a.quick || (!a.gradcheck && a.weights.is_none());
    let archs: Vec<Architecture> = match a.arch {
        Some(x) => vec![x.into()],
        None => vec![Architecture::ConvCsiNet, Architecture::ShuffleCsiNet],
    };
    let mut results = Vec::new();
    let mut timed = |name: &str, err: &mut dyn Write, f: &mut dyn FnMut(&mut dyn Write) -> CheckResult| {
        let _ = writeln!(err, "running {name}");
        let t = Instant::now();
        let r = f(err);
        let _ = writeln!(err, "{} {} in {:.1} s", if r.passed { "ok" } else { "FAILED" }, r.name, t.elapsed().as_secs_f64());
        results.push(r);
    };
    if let Some(p) = &a.weights {
        timed("weights", err, &mut |_| weights_file(p));
    }
    if quick {
        timed("complexity-table", err, &mut |_| complexity_table());
        timed("shapes", err, &mut |_| shapes(a.seed));
        timed("mac-equivalence", err, &mut |_| mac_equivalence(a.seed));
        timed("pipeline-consistency", err, &mut |_| pipeline(a.seed));
        timed("metric-identities", err, &mut |_| metrics(a.seed));
    }
    if quick || a.gradcheck {
        timed("layer-gradients", err, &mut |_| layer_gradients(a.probes, a.eps, a.seed));
        for &arch in &archs {
            timed(&format!("gradients-{arch}"), err, &mut |e| architecture_gradients(arch, a.cr, a.probes, a.eps, a.seed, e));
        }
    }
    let s = summary(&results);
    writeln!(out, "{}", serde_json::to_string_pretty(&s)?)?;
    Ok(if s["passed"] == json!(true) { 0 } else { 1 })
}
