//! Bilevel architecture search: momentum SGD on the network weights over
//! trainA, Adam on (α, β) over trainB with three architecture regularizers.

use alloc::format;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{augmented_batch, shuffled, Batch, Dataset, SegSample, IGNORE_INDEX};
use crate::error::{invalid, Error, Result};
use crate::metrics::evaluate_with;
use crate::optim::{Adam, LrSchedule, OptimizerConfig, Sgd};
use crate::params::{name_seed, ParamStore};
use crate::supernet::{ArchParams, Cx, PathMode, SamplerConfig, Supernet, SupernetSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Side of the square training crops; must be a multiple of 32.
    pub crop_size: usize,
    pub eval_batch_size: usize,
    pub lr_w: f64,
    pub lr_arch: f64,
    pub weight_decay_w: f64,
    pub momentum_w: f64,
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    pub lambda_con: f64,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 30,
            batch_size: 8,
            crop_size: 32,
            eval_batch_size: 10,
            lr_w: 0.01,
            lr_arch: 0.0005,
            weight_decay_w: 1e-4,
            momentum_w: 0.7,
            lambda_alpha: 1e-3,
            lambda_beta: 1e-3,
            lambda_con: 1.0,
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

/// Checks shared by the search and stand-alone training configurations.
pub(crate) fn check_batching(op: &'static str, batch_size: usize, crop_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(invalid(op, "batch_size must be >= 1"));
    }
    if crop_size == 0 || crop_size % 32 != 0 {
        return Err(invalid(op, format!("crop_size must be a positive multiple of 32, got {crop_size}")));
    }
    let coarsest = crop_size / 32;
    if batch_size * coarsest * coarsest < 2 {
        return Err(invalid(op, "batch_size * (crop_size / 32)^2 must be >= 2 for batch statistics"));
    }
    Ok(())
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "search config";
        check_batching(OP, self.batch_size, self.crop_size)?;
        if !(self.lr_w > 0.0 && self.lr_arch > 0.0) {
            return Err(invalid(OP, "learning rates must be > 0"));
        }
        if !(self.lambda_alpha >= 0.0 && self.lambda_beta >= 0.0 && self.lambda_con >= 0.0) {
            return Err(invalid(OP, "regularizer weights must be >= 0"));
        }
        if self.eval_batch_size == 0 {
            return Err(invalid(OP, "eval_batch_size must be >= 1"));
        }
        self.sgd_config().validate()?;
        self.adam_config().validate()?;
        self.sampler.validate()
    }

    pub fn sgd_config(&self) -> OptimizerConfig {
        OptimizerConfig::sgd(self.lr_w, self.momentum_w, self.weight_decay_w)
    }

    pub fn adam_config(&self) -> OptimizerConfig {
        OptimizerConfig::adam(self.lr_arch)
    }
}

/// Σ over mixture layers of the entropy of `softmax(α)`.
pub fn reg_alpha(tape: &mut Tape, alphas: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let w = tape.softmax(a, 0)?;
        let lw = tape.log_softmax(a, 0)?;
        let p = tape.mul(w, lw)?;
        let s = tape.sum(p);
        terms.push(tape.affine(s, -1.0, 0.0));
    }
    sum_terms(tape, &terms)
}

/// Σ over edges of `σ(β)·softplus(−β)`, i.e. `−σ(β)·ln σ(β)`.
pub fn reg_beta(tape: &mut Tape, betas: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(betas.len());
    for &b in betas {
        let s = tape.sigmoid(b);
        let nb = tape.affine(b, -1.0, 0.0);
        let sp = tape.softplus(nb);
        let p = tape.mul(s, sp)?;
        terms.push(tape.sum(p));
    }
    sum_terms(tape, &terms)
}

/// `max(1 − D, 0) + max(D − k, 0)` for a scalar in-degree `D`.
pub fn degree_penalty(tape: &mut Tape, degree: Var, k: usize) -> Result<Var> {
    let low = tape.affine(degree, -1.0, 1.0);
    let low = tape.relu(low);
    let high = tape.affine(degree, 1.0, -(k as f64));
    let high = tape.relu(high);
    tape.add(low, high)
}

/// Σ over nodes of [`degree_penalty`] with `D = Σ σ(β)` over incoming edges.
pub fn reg_con(tape: &mut Tape, betas: &[Var], k: usize) -> Result<Var> {
    let mut terms = Vec::with_capacity(betas.len());
    for &b in betas {
        let s = tape.sigmoid(b);
        let d = tape.sum(s);
        terms.push(degree_penalty(tape, d, k)?);
    }
    sum_terms(tape, &terms)
}

fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(tape.constant(crate::Tensor::scalar(0.0)));
    }
    tape.add_all(terms)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegularizerValues {
    pub alpha: f64,
    pub beta: f64,
    pub con: f64,
}

/// Unweighted regularizer values of an architecture.
pub fn regularizer_values(arch: &ArchParams, k: usize) -> RegularizerValues {
    let mut tape = Tape::new();
    let nodes: Vec<_> = arch.nodes().collect();
    let alphas: Vec<Var> = nodes
        .iter()
        .map(|&n| tape.constant(crate::Tensor::new(&[6], arch.alpha(n).to_vec()).expect("six logits")))
        .collect();
    let betas: Vec<Var> = nodes
        .iter()
        .map(|&n| tape.constant(crate::Tensor::new(&[arch.beta(n).len()], arch.beta(n).to_vec()).expect("in-degree")))
        .collect();
    let a = reg_alpha(&mut tape, &alphas).expect("well-formed");
    let b = reg_beta(&mut tape, &betas).expect("well-formed");
    let c = reg_con(&mut tape, &betas, k).expect("well-formed");
    RegularizerValues { alpha: tape.value(a).item(), beta: tape.value(b).item(), con: tape.value(c).item() }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub train_a_ce: f64,
    /// `None` when the architecture phase was skipped.
    pub train_b_ce: Option<f64>,
    pub regularizers: RegularizerValues,
}

/// Per-step inputs that vary with the schedule.
#[derive(Clone, Copy, Debug)]
pub struct StepSchedule {
    pub lr_w: f64,
    pub lr_arch: f64,
    pub tau: f64,
}

/// Terms of the architecture objective on one batch.
#[derive(Clone, Copy, Debug)]
pub struct ArchLoss {
    pub total: Var,
    pub ce: Var,
    pub l_alpha: Var,
    pub l_beta: Var,
    pub l_con: Var,
}

/// `CE + λ_α·L_α + λ_β·L_β + λ_con·L_con` of the supernet on `batch`.
pub fn arch_loss(net: &mut Supernet, cx: &mut Cx, batch: &Batch, cfg: &SearchConfig, mode: PathMode) -> Result<ArchLoss> {
    let k = net.spec().max_in_degree;
    let x = cx.tape.constant(batch.images.clone());
    let logits = net.forward(cx, x, mode)?;
    let (alpha_ids, beta_ids): (Vec<_>, Vec<_>) = net.nodes().iter().map(|n| (n.alpha, n.beta)).unzip();
    let alphas: Vec<Var> = alpha_ids.into_iter().map(|id| cx.param(id)).collect();
    let betas: Vec<Var> = beta_ids.into_iter().map(|id| cx.param(id)).collect();
    let tape = &mut *cx.tape;
    let ce = tape.cross_entropy(logits, &batch.labels, IGNORE_INDEX)?;
    let l_alpha = reg_alpha(tape, &alphas)?;
    let l_beta = reg_beta(tape, &betas)?;
    let l_con = reg_con(tape, &betas, k)?;
    let wa = tape.affine(l_alpha, cfg.lambda_alpha, 0.0);
    let wb = tape.affine(l_beta, cfg.lambda_beta, 0.0);
    let wc = tape.affine(l_con, cfg.lambda_con, 0.0);
    let total = tape.add_all(&[ce, wa, wb, wc])?;
    Ok(ArchLoss { total, ce, l_alpha, l_beta, l_con })
}

/// One alternating update: phase 1 moves the network weights on `batch_a`,
/// phase 2 (unless `update_arch` is false) moves α and β on `batch_b`.
/// Paths are re-sampled for each phase from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn search_step(
    net: &mut Supernet,
    store: &mut ParamStore,
    sgd: &mut Sgd,
    adam: &mut Adam,
    cfg: &SearchConfig,
    batch_a: &Batch,
    batch_b: &Batch,
    sched: StepSchedule,
    rng: &mut dyn RngCore,
    update_arch: bool,
) -> Result<StepMetrics> {
    let n_paths = net.spec().n_paths();

    let mut tape = Tape::new();
    let mut cx = Cx::new(&mut tape, store, true);
    let x = cx.tape.constant(batch_a.images.clone());
    let logits = net.forward(&mut cx, x, PathMode::Sampled { tau: sched.tau, n_paths, rng: &mut *rng })?;
    let ce = tape.cross_entropy(logits, &batch_a.labels, IGNORE_INDEX)?;
    let train_a_ce = tape.value(ce).item();
    if !train_a_ce.is_finite() {
        return Err(Error::NonFinite { what: "trainA cross-entropy".into() });
    }
    let grads = tape.backward(ce)?;
    store.zero_grad();
    grads.accumulate_into(store);
    sgd.step(store, sched.lr_w)?;
    store.zero_grad();

    if !update_arch {
        return Ok(StepMetrics { train_a_ce, train_b_ce: None, regularizers: RegularizerValues::default() });
    }

    let mut tape = Tape::new();
    let mut cx = Cx::new(&mut tape, store, true);
    let loss = arch_loss(net, &mut cx, batch_b, cfg, PathMode::Sampled { tau: sched.tau, n_paths, rng: &mut *rng })?;
    let regularizers = RegularizerValues {
        alpha: tape.value(loss.l_alpha).item(),
        beta: tape.value(loss.l_beta).item(),
        con: tape.value(loss.l_con).item(),
    };
    let train_b_ce = tape.value(loss.ce).item();
    let total = loss.total;
    if !tape.value(total).item().is_finite() {
        return Err(Error::NonFinite { what: "trainB objective".into() });
    }
    let grads = tape.backward(total)?;
    store.zero_grad();
    grads.accumulate_into(store);
    adam.step(store, sched.lr_arch)?;
    store.zero_grad();
    Ok(StepMetrics { train_a_ce, train_b_ce: Some(train_b_ce), regularizers })
}

/// One row of the per-epoch metrics table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_a_ce: f64,
    pub train_b_ce: f64,
    pub l_alpha: f64,
    pub l_beta: f64,
    pub l_con: f64,
    pub tau: f64,
    pub val_miou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestCheckpoint {
    /// Number of completed epochs when the checkpoint was taken.
    pub epoch: usize,
    pub miou: f64,
    pub store: ParamStore,
}

/// Everything needed to continue a search at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchState {
    pub epochs_done: usize,
    pub store: ParamStore,
    pub sgd: Sgd,
    pub adam: Adam,
    pub best: Option<BestCheckpoint>,
    pub history: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub best: BestCheckpoint,
    pub history: Vec<EpochMetrics>,
    pub last: ParamStore,
}

impl SearchOutcome {
    /// Validation mIoU of the selected supernet.
    pub fn s_miou(&self) -> f64 {
        self.best.miou
    }
}

/// A search run driven one epoch at a time.
pub struct Search<'d> {
    data: &'d Dataset,
    cfg: SearchConfig,
    net: Supernet,
    state: SearchState,
}

impl<'d> Search<'d> {
    pub fn new(data: &'d Dataset, spec: &SupernetSpec, cfg: &SearchConfig) -> Result<Self> {
        let mut store = ParamStore::new(cfg.seed);
        Supernet::new(spec, &mut store)?;
        let state = SearchState {
            epochs_done: 0,
            store,
            sgd: Sgd::new(cfg.sgd_config()),
            adam: Adam::new(cfg.adam_config()),
            best: None,
            history: Vec::new(),
        };
        Self::resume(data, spec, cfg, state)
    }

    pub fn resume(data: &'d Dataset, spec: &SupernetSpec, cfg: &SearchConfig, mut state: SearchState) -> Result<Self> {
        cfg.validate()?;
        data.spec.splits.validate()?;
        if data.train_a.is_empty() || data.train_b.is_empty() || data.val.is_empty() {
            return Err(Error::Empty { what: "dataset split" });
        }
        if spec.num_classes != data.spec.num_classes {
            return Err(invalid("search", "supernet and dataset disagree on num_classes"));
        }
        if state.epochs_done > cfg.epochs {
            return Err(invalid("search", "checkpoint is past the configured epoch count"));
        }
        let net = Supernet::new(spec, &mut state.store)?;
        Ok(Search { data, cfg: cfg.clone(), net, state })
    }

    pub fn state(&self) -> &SearchState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.epochs_done >= self.cfg.epochs
    }

    pub fn iters_per_epoch(&self) -> usize {
        (self.data.train_a.len() / self.cfg.batch_size).max(1)
    }

    fn batches_b(&self) -> usize {
        (self.data.train_b.len() / self.cfg.batch_size).max(1)
    }

    fn batch(&self, split: &str, samples: &[SegSample], order: &[usize], slot: usize, round: usize) -> Result<Batch> {
        let bs = self.cfg.batch_size.min(samples.len());
        let idx = &order[slot * bs..(slot + 1) * bs];
        let refs: Vec<&SegSample> = samples.iter().collect();
        let seed = name_seed(self.cfg.seed, &format!("augment/{split}/{round}/{slot}"));
        augmented_batch(&refs, idx, self.cfg.crop_size, seed)
    }

    /// Trains one epoch, evaluates on the validation split and updates the
    /// best checkpoint.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.state.epochs_done;
        let iters = self.iters_per_epoch();
        let nb = self.batches_b();
        let total_iters = self.cfg.epochs * iters;
        let tau = self.cfg.sampler.tau(epoch, self.cfg.epochs);
        let sched_w = LrSchedule::poly(self.cfg.lr_w, total_iters);
        let sched_a = LrSchedule::poly(self.cfg.lr_arch, total_iters);
        let order_a = shuffled(self.data.train_a.len(), name_seed(self.cfg.seed, &format!("order/trainA/{epoch}")));

        let (mut sum_a, mut sum_b) = (0.0, 0.0);
        for it in 0..iters {
            let g = epoch * iters + it;
            let cycle = g / nb;
            let order_b = shuffled(self.data.train_b.len(), name_seed(self.cfg.seed, &format!("order/trainB/{cycle}")));
            let batch_a = self.batch("trainA", &self.data.train_a, &order_a, it, epoch)?;
            let batch_b = self.batch("trainB", &self.data.train_b, &order_b, g % nb, cycle)?;
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.cfg.seed, &format!("paths/{g}")));
            let sched = StepSchedule { lr_w: sched_w.lr(g), lr_arch: sched_a.lr(g), tau };
            let st = &mut self.state;
            let m = search_step(&mut self.net, &mut st.store, &mut st.sgd, &mut st.adam, &self.cfg, &batch_a, &batch_b, sched, &mut rng, true)
                .map_err(|e| match e {
                    Error::NonFinite { what } => Error::NonFinite { what: format!("{what} (epoch {epoch}, step {g})") },
                    other => other,
                })?;
            sum_a += m.train_a_ce;
            sum_b += m.train_b_ce.unwrap_or(0.0);
        }
        let arch = ArchParams::from_store(&self.state.store, self.net.spec().layers)?;
        if !arch.is_finite() {
            return Err(Error::NonFinite { what: format!("architecture parameters after epoch {epoch}") });
        }
        let regs = regularizer_values(&arch, self.net.spec().max_in_degree);
        self.state.epochs_done += 1;
        let val_miou = self.evaluate(tau)?;
        let metrics = EpochMetrics {
            epoch,
            train_a_ce: sum_a / iters as f64,
            train_b_ce: sum_b / iters as f64,
            l_alpha: regs.alpha,
            l_beta: regs.beta,
            l_con: regs.con,
            tau,
            val_miou,
        };
        log::info!("search epoch {epoch}: trainA CE {:.4}, val mIoU {:.4}", metrics.train_a_ce, val_miou);
        if self.state.best.as_ref().is_none_or(|b| val_miou > b.miou) {
            self.state.best = Some(BestCheckpoint { epoch: self.state.epochs_done, miou: val_miou, store: self.state.store.clone() });
        }
        self.state.history.push(metrics);
        Ok(metrics)
    }

    /// Validation mIoU of the current supernet: BN in inference mode, paths
    /// sampled at temperature `tau` from a fixed stream.
    pub fn evaluate(&mut self, tau: f64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.cfg.seed, "eval"));
        let n_paths = self.net.spec().n_paths();
        let (net, store) = (&mut self.net, &mut self.state.store);
        let cm = evaluate_with(&self.data.val, self.cfg.eval_batch_size, self.data.spec.num_classes, |images| {
            let mut tape = Tape::new();
            let mut cx = Cx::new(&mut tape, store, false);
            let x = cx.tape.constant(images.clone());
            let y = net.forward(&mut cx, x, PathMode::Sampled { tau, n_paths, rng: &mut rng })?;
            Ok(tape.value(y).clone())
        })?;
        cm.miou()
    }

    pub fn finish(mut self) -> Result<SearchOutcome> {
        if self.state.best.is_none() {
            let miou = self.evaluate(self.cfg.sampler.tau_start)?;
            self.state.best = Some(BestCheckpoint { epoch: 0, miou, store: self.state.store.clone() });
        }
        let best = self.state.best.take().expect("set above");
        Ok(SearchOutcome { best, history: self.state.history, last: self.state.store })
    }
}

/// Runs every configured epoch and returns the best-by-validation supernet.
pub fn run_search(data: &Dataset, spec: &SupernetSpec, cfg: &SearchConfig) -> Result<SearchOutcome> {
    let mut search = Search::new(data, spec, cfg)?;
    while !search.is_done() {
        search.run_epoch()?;
    }
    search.finish()
}
