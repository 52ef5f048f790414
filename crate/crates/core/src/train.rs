//! ADAM training of the reconstruction loss and NMSE / rho evaluation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{apply_bn_updates, BnUpdate, ParamStore, Tape};
use crate::channel::{denormalize, nmse_ratios, rho, to_db, Dataset, DftPlan, NormalizationInfo};
use crate::layers::Mode;
use crate::models::{ModelGraph, INPUT, TARGET};
use crate::{Error, Result, Scalar, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} must be > 0", self.epsilon)));
        }
        Ok(())
    }
}

/// First and second moments per trainable tensor plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor4<T>>,
    pub v: BTreeMap<String, Tensor4<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |s: &ParamStore<T>| s.trainable().map(|e| (e.name.clone(), Tensor4::zeros(e.value.shape()))).collect();
        Self { m: zeros(store), v: zeros(store), t: 0 }
    }
}

/// One bias-corrected ADAM update. Trainable tensors without a gradient
/// entry are treated as having a zero gradient.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor4<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    for (name, g) in grads {
        if !store.is_trainable(name)? {
            return Err(Error::UnknownParameter(format!("{name} is not trainable")));
        }
        store.get(name)?.expect_same_shape(g)?;
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let c2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for entry in store.entries_mut().iter_mut().filter(|e| e.trainable) {
        let (Some(m), Some(v)) = (state.m.get_mut(&entry.name), state.v.get_mut(&entry.name)) else {
            return Err(Error::UnknownParameter(format!("{} has no optimizer state", entry.name)));
        };
        let g = grads.get(&entry.name);
        let theta = entry.value.data_mut();
        for i in 0..theta.len() {
            let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
            let mi = cfg.beta1 * m.data()[i].as_f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = T::from_f64_lossy(mi);
            v.data_mut()[i] = T::from_f64_lossy(vi);
            let step = cfg.lr * (mi / c1) / (libm::sqrt(vi / c2) + cfg.epsilon);
            theta[i] = T::from_f64_lossy(theta[i].as_f64() - step);
        }
    }
    Ok(())
}

/// Batch mean of per-sample sums of squared differences.
pub fn mse_loss<T: Scalar>(prediction: &Tensor4<T>, target: &Tensor4<T>) -> Result<f64> {
    prediction.expect_same_shape(target)?;
    let sse: f64 = prediction.data().iter().zip(target.data()).map(|(a, b)| { let d = a.as_f64() - b.as_f64(); d * d }).sum();
    Ok(sse / prediction.shape().n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps (mid-epoch if needed).
    pub max_steps: Option<usize>,
    /// Seed of the mini-batch order.
    pub seed: u64,
    /// Validate every this many epochs (and after the last one); 0 disables.
    pub val_every: usize,
    /// Keep the parameters with the best validation NMSE.
    pub best_checkpoint: bool,
    /// Gradient shards per batch; each is a separate forward/backward pass.
    pub shards: usize,
    /// Samples per inference chunk during validation.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 200,
            epochs: 1000,
            max_steps: None,
            seed: 0,
            val_every: 1,
            best_checkpoint: true,
            shards: 1,
            eval_chunk: 100,
        }
    }
}

impl TrainConfig {
    /// Desk-scale budget: 100 epochs.
    pub fn desk() -> Self {
        Self { epochs: 100, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 || self.shards == 0 || self.eval_chunk == 0 {
            return Err(Error::InvalidArgument("batch size, shards and eval chunk must be >= 1".into()));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::InvalidArgument("nothing to train: epochs is 0".into()));
        }
        Ok(())
    }
}

/// Loss, gradients and BN statistics of one shard of a batch.
#[derive(Debug, Clone)]
pub struct ShardOutput<T> {
    pub samples: usize,
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor4<T>>,
    pub bn: Vec<BnUpdate<T>>,
}

/// Training-mode forward and backward pass on `x` (target = input).
pub fn shard_gradients<T: Scalar>(model: &ModelGraph<T>, x: &Tensor4<T>) -> Result<ShardOutput<T>> {
    let mut tape = Tape::new(model.training_graph());
    let loss = tape.forward(model.params(), &[(INPUT, x), (TARGET, x)], Mode::Train)?.data()[0].as_f64();
    let grads = tape.backward()?;
    Ok(ShardOutput { samples: x.shape().n, loss, grads: grads.params, bn: tape.bn_updates() })
}

/// Runs shard jobs, possibly in parallel. Results must come back in job order.
pub trait ShardExecutor {
    fn run(&self, jobs: usize, job: &(dyn Fn(usize) -> Result<ShardOutput<f32>> + Sync)) -> Vec<Result<ShardOutput<f32>>>;
}

/// Runs every job on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl ShardExecutor for Sequential {
    fn run(&self, jobs: usize, job: &(dyn Fn(usize) -> Result<ShardOutput<f32>> + Sync)) -> Vec<Result<ShardOutput<f32>>> {
        (0..jobs).map(job).collect()
    }
}

/// Sample-weighted combination in shard order.
pub fn combine_shards<T: Scalar>(shards: Vec<ShardOutput<T>>) -> Result<ShardOutput<T>> {
    let total: usize = shards.iter().map(|s| s.samples).sum();
    if total == 0 {
        return Err(Error::EmptyDataset("no samples in batch".into()));
    }
    let mut iter = shards.into_iter();
    let first = iter.next().expect("nonempty");
    if iter.len() == 0 {
        return Ok(first);
    }
    let w0 = first.samples as f64 / total as f64;
    let mut loss = first.loss * w0;
    let mut grads: BTreeMap<String, Vec<f64>> =
        first.grads.iter().map(|(k, g)| (k.clone(), g.data().iter().map(|v| v.as_f64() * w0).collect())).collect();
    let shapes: BTreeMap<String, _> = first.grads.iter().map(|(k, g)| (k.clone(), g.shape())).collect();
    let mut bn: Vec<(Vec<f64>, Vec<f64>)> = first
        .bn
        .iter()
        .map(|u| (u.batch_mean.iter().map(|v| v.as_f64() * w0).collect(), u.batch_var.iter().map(|v| v.as_f64() * w0).collect()))
        .collect();
    for s in iter {
        let w = s.samples as f64 / total as f64;
        loss += s.loss * w;
        for (k, g) in &s.grads {
            let acc = grads.get_mut(k).ok_or_else(|| Error::UnknownParameter(k.clone()))?;
            for (a, v) in acc.iter_mut().zip(g.data()) {
                *a += v.as_f64() * w;
            }
        }
        for (acc, u) in bn.iter_mut().zip(&s.bn) {
            for (a, v) in acc.0.iter_mut().zip(&u.batch_mean) {
                *a += v.as_f64() * w;
            }
            for (a, v) in acc.1.iter_mut().zip(&u.batch_var) {
                *a += v.as_f64() * w;
            }
        }
    }
    let grads = grads
        .into_iter()
        .map(|(k, v)| {
            let t = Tensor4::from_vec(shapes[&k], v.into_iter().map(T::from_f64_lossy).collect())?;
            Ok((k, t))
        })
        .collect::<Result<_>>()?;
    let bn = first
        .bn
        .iter()
        .zip(bn)
        .map(|(u, (m, v))| BnUpdate {
            prefix: u.prefix.clone(),
            momentum: u.momentum,
            batch_mean: m.into_iter().map(T::from_f64_lossy).collect(),
            batch_var: v.into_iter().map(T::from_f64_lossy).collect(),
        })
        .collect();
    Ok(ShardOutput { samples: total, loss, grads, bn })
}

/// Splits `n` samples into at most `shards` contiguous nonempty ranges.
pub fn shard_ranges(n: usize, shards: usize) -> Vec<(usize, usize)> {
    let k = shards.clamp(1, n.max(1));
    (0..k).map(|i| (i * n / k, (i + 1) * n / k)).filter(|(a, b)| b > a).collect()
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(
    model: &mut ModelGraph<f32>,
    batch: &Tensor4<f32>,
    state: &mut AdamState<f32>,
    cfg: &TrainConfig,
    exec: &dyn ShardExecutor,
) -> Result<f64> {
    let ranges = shard_ranges(batch.shape().n, cfg.shards);
    let parts: Vec<Tensor4<f32>> = ranges.iter().map(|&(a, b)| batch.slice_samples(a, b)).collect::<Result<_>>()?;
    let shared: &ModelGraph<f32> = model;
    let outputs = exec.run(parts.len(), &|i| shard_gradients(shared, &parts[i]));
    let combined = combine_shards(outputs.into_iter().collect::<Result<Vec<_>>>()?)?;
    if !combined.loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss became {} at optimizer step {}", combined.loss, state.t + 1)));
    }
    if let Some((name, _)) = combined.grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of '{name}' is not finite at optimizer step {}", state.t + 1)));
    }
    apply_bn_updates(model.params_mut(), &combined.bn)?;
    adam_step(model.params_mut(), &combined.grads, state, &cfg.adam)?;
    Ok(combined.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean batch loss over the epoch.
    pub train_loss: f64,
    pub val_nmse_db: Option<f64>,
    pub val_rho: Option<f64>,
    pub wall_seconds: Option<f64>,
}

/// Hooks for progress reporting and timing (the core has no clock).
pub trait TrainObserver {
    fn epoch_end(&mut self, _record: &EpochRecord) {}
    /// Seconds since training began, if a clock is available.
    fn elapsed_seconds(&self) -> Option<f64> {
        None
    }
}

/// Observer that does nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct Silent;

impl TrainObserver for Silent {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub steps: usize,
    /// Parameters after the epoch with the lowest validation NMSE.
    pub best: Option<(usize, ParamStore<f32>)>,
}

/// Trains `model` in place. Mini-batch order is drawn from `cfg.seed`.
pub fn train(
    model: &mut ModelGraph<f32>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    exec: &dyn ShardExecutor,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = train_set.len();
    if n == 0 {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    let want = model.spec().input_shape(n);
    if train_set.x.shape() != want {
        return Err(Error::Shape(format!("training data {} does not match model input {want}", train_set.x.shape())));
    }
    if let Some(v) = val_set {
        if v.is_empty() {
            return Err(Error::EmptyDataset("validation split is empty".into()));
        }
        if v.x.shape() != model.spec().input_shape(v.len()) {
            return Err(Error::Shape(format!("validation data {} does not match the model", v.x.shape())));
        }
    }
    let plan = match val_set {
        Some(v) => Some(DftPlan::new(v.meta.dims)?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut steps = 0;
    let epochs = match cfg.max_steps {
        Some(s) => s.div_ceil(n.div_ceil(cfg.batch_size)).max(1),
        None => cfg.epochs,
    };
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|s| steps >= s) {
                break;
            }
            let batch = train_set.x.gather_samples(chunk)?;
            let loss = train_step(model, &batch, &mut state, cfg, exec)?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            steps += 1;
        }
        let last = epoch == epochs || cfg.max_steps.is_some_and(|s| steps >= s);
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_nmse_db: None,
            val_rho: None,
            wall_seconds: None,
        };
        if let (Some(v), Some(plan)) = (val_set, &plan) {
            if cfg.val_every > 0 && (epoch % cfg.val_every == 0 || last) {
                let r = evaluate(model, v, plan, cfg.eval_chunk)?;
                record.val_nmse_db = Some(r.nmse_db);
                record.val_rho = Some(r.rho);
                if cfg.best_checkpoint && best.as_ref().map_or(true, |(_, b, _)| r.nmse_db < *b) {
                    best = Some((epoch, r.nmse_db, model.params().clone()));
                }
            }
        }
        record.wall_seconds = observer.elapsed_seconds();
        observer.epoch_end(&record);
        history.push(record);
        if last {
            break;
        }
    }
    Ok(TrainOutcome { history, steps, best: best.map(|(e, _, p)| (e, p)) })
}

/// Reconstruction quality over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    /// NMSE on the truncated angular-delay matrices.
    pub nmse_db: f64,
    /// Cosine similarity per subcarrier in the frequency domain.
    pub rho: f64,
    pub rho_skipped: usize,
    pub per_sample_nmse_db: Vec<f64>,
}

impl EvalReport {
    /// Percentile (0..=100) of the per-sample NMSE distribution.
    pub fn percentile(&self, p: f64) -> f64 {
        let mut v = self.per_sample_nmse_db.clone();
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(f64::total_cmp);
        let idx = ((p / 100.0) * (v.len() - 1) as f64 + 0.5) as usize;
        v[idx.min(v.len() - 1)]
    }
}

/// Scores normalized reconstructions against normalized ground truth.
pub fn evaluate_reconstruction(
    truth: &Tensor4<f32>,
    estimate: &Tensor4<f32>,
    info: &NormalizationInfo,
    plan: &DftPlan,
) -> Result<EvalReport> {
    truth.expect_same_shape(estimate)?;
    let h = denormalize(truth, info)?;
    let e = denormalize(estimate, info)?;
    let ratios = nmse_ratios(&h, &e)?;
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let r = rho(&h, &e, plan)?;
    Ok(EvalReport {
        count: h.len(),
        nmse_db: to_db(mean),
        rho: r.rho,
        rho_skipped: r.skipped,
        per_sample_nmse_db: ratios.into_iter().map(to_db).collect(),
    })
}

/// Inference-mode reconstruction of `data` and its scores.
pub fn evaluate(model: &ModelGraph<f32>, data: &Dataset, plan: &DftPlan, chunk: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let want = model.spec().input_shape(data.len());
    if data.x.shape() != want {
        return Err(Error::Shape(format!("dataset {} does not match model input {want}", data.x.shape())));
    }
    let recon = model.reconstruct(&data.x, chunk)?;
    evaluate_reconstruction(&data.x, &recon, &data.meta.info, plan)
}

/// Header of the evaluation table (CR, method, NMSE, rho).
pub fn table_header() -> String {
    format!("{:<6}  {:<14}  {:>10}  {:>8}", "CR", "Method", "NMSE (dB)", "rho")
}

pub fn table_row(cr: &str, method: &str, report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = write!(s, "{cr:<6}  {method:<14}  {:>10.2}  {:>8.4}", report.nmse_db, report.rho);
    s
}

/// History CSV: `epoch,train_loss,val_nmse_db,val_rho,wall_seconds`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_nmse_db,val_rho,wall_seconds\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
    for r in history {
        let _ = writeln!(
            s,
            "{},{:.9},{},{},{}",
            r.epoch,
            r.train_loss,
            opt(r.val_nmse_db),
            opt(r.val_rho),
            r.wall_seconds.map(|x| format!("{x:.3}")).unwrap_or_default()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Shape4;

    fn store_with(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.declare("w", true, || Tensor4::scalar(v)).unwrap();
        s
    }

    fn grad(v: f32) -> BTreeMap<String, Tensor4<f32>> {
        let mut g = BTreeMap::new();
        g.insert("w".into(), Tensor4::scalar(v));
        g
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut s = store_with(1.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &grad(0.5), &mut st, &AdamConfig::default()).unwrap();
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((s.get("w").unwrap().data()[0] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_and_zero_lr_are_identity() {
        let mut s = store_with(2.0);
        let mut st = AdamState::new(&s);
        for _ in 0..10 {
            adam_step(&mut s, &grad(0.0), &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data()[0], 2.0);
        let cfg = AdamConfig { lr: 0.0, ..Default::default() };
        adam_step(&mut s, &grad(3.0), &mut st, &cfg).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 2.0);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut s = ParamStore::<f64>::new();
        s.declare("w", true, || Tensor4::scalar(0.0)).unwrap();
        let mut st = AdamState::new(&s);
        let mut g = BTreeMap::new();
        g.insert(String::from("w"), Tensor4::scalar(0.2f64));
        let mut prev = 0.0;
        for _ in 0..5000 {
            prev = s.get("w").unwrap().data()[0];
            adam_step(&mut s, &g, &mut st, &AdamConfig::default()).unwrap();
        }
        let step = prev - s.get("w").unwrap().data()[0];
        assert!((step - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_bad_inputs() {
        let mut s = store_with(1.0);
        let mut st = AdamState::new(&s);
        let mut g = BTreeMap::new();
        g.insert(String::from("w"), Tensor4::zeros(Shape4::of(1, 2, 1, 1)));
        assert!(adam_step(&mut s, &g, &mut st, &AdamConfig::default()).is_err());
        let mut g = BTreeMap::new();
        g.insert(String::from("nope"), Tensor4::scalar(1.0f32));
        assert!(adam_step(&mut s, &g, &mut st, &AdamConfig::default()).is_err());
        let cfg = AdamConfig { beta1: 1.0, ..Default::default() };
        assert!(adam_step(&mut s, &grad(1.0), &mut st, &cfg).is_err());
    }

    #[test]
    fn loss_examples() {
        let t = Tensor4::new(Shape4::of(3, 2, 4, 4), 0.25f32).unwrap();
        assert_eq!(mse_loss(&t, &t).unwrap(), 0.0);
        let p = t.map(|v| v + 1.0);
        assert!((mse_loss(&p, &t).unwrap() - 32.0).abs() < 1e-9);
        assert!(mse_loss(&t, &Tensor4::zeros(Shape4::of(1, 2, 4, 4))).is_err());
    }

    #[test]
    fn ranges_cover_batch() {
        assert_eq!(shard_ranges(10, 3), alloc::vec![(0, 3), (3, 6), (6, 10)]);
        assert_eq!(shard_ranges(2, 4), alloc::vec![(0, 1), (1, 2)]);
        assert_eq!(shard_ranges(5, 1), alloc::vec![(0, 5)]);
    }

    #[test]
    fn percentile_picks_sorted_entries() {
        let r = EvalReport { count: 3, nmse_db: 0.0, rho: 1.0, rho_skipped: 0, per_sample_nmse_db: alloc::vec![-3.0, -1.0, -2.0] };
        assert_eq!(r.percentile(0.0), -3.0);
        assert_eq!(r.percentile(50.0), -2.0);
        assert_eq!(r.percentile(100.0), -1.0);
    }
}
