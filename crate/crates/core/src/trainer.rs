//! Optimizers, the training loop, evaluation and run logging.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::anchors::{compute_anchors, AnchorStore};
use crate::autodiff::Tape;
use crate::data::{write_file, BatchPlan, Dataset, RNG_ALGORITHM};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown};
use crate::model::{argmax, format_activations, parse_activations, Activation, ManifoldNetwork};
use crate::numerics::Matrix;

pub const EPOCHS_HEADER: &str = "epoch,ce,inter,intra,align,ds,al,total,src_acc,tgt_acc,tgt_mean_class_acc,align_skips";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntraStart {
    /// 15, or `epochs / 4` for runs shorter than 30 epochs.
    Auto,
    Epoch(usize),
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    None,
    /// No discriminative structure terms.
    NoDs,
    /// No alignment term.
    NoAl,
    SourceOnly,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} {s:?} (expected one of: {})",
                        stringify!($ty),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(OptimizerKind { Adam => "adam", Sgd => "sgd" });
keyword_enum!(Ablation { None => "none", NoDs => "no-ds", NoAl => "no-al", SourceOnly => "source-only" });

impl fmt::Display for IntraStart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IntraStart::Auto => f.write_str("auto"),
            IntraStart::Epoch(e) => write!(f, "{e}"),
            IntraStart::Never => f.write_str("never"),
        }
    }
}

impl FromStr for IntraStart {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(IntraStart::Auto),
            "never" => Ok(IntraStart::Never),
            _ => s
                .parse()
                .map(IntraStart::Epoch)
                .map_err(|_| Error::Config(format!("intra_start_epoch must be auto, never or an epoch, got {s:?}"))),
        }
    }
}

impl IntraStart {
    /// First zero-based epoch with the intra-class term, if any.
    pub fn resolve(self, epochs: usize) -> Option<usize> {
        match self {
            IntraStart::Auto if epochs < 30 => Some(epochs / 4),
            IntraStart::Auto => Some(15),
            IntraStart::Epoch(e) => Some(e),
            IntraStart::Never => None,
        }
    }
}

/// Every training setting. Config files use the field names as keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Widths of the manifold layers; input and class counts come from data.
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub k: usize,
    /// `None` means `batch_size - 1`, capped per layer at `d_l - 1`.
    pub d_prime: Option<usize>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub sched_alpha: f64,
    pub sched_beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub intra_start_epoch: IntraStart,
    pub seed: u64,
    pub eps: f64,
    pub gap_tol: f64,
    pub anchor_max_samples: Option<usize>,
    /// Let the intra-class gradient flow into the target soft labels.
    pub intra_grad_through_probs: bool,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dims: vec![64, 32],
            activations: vec![Activation::LeakyRelu(0.2), Activation::Tanh],
            lambda1: 10.0,
            lambda2: 5000.0,
            k: 1,
            d_prime: None,
            optimizer: OptimizerKind::Adam,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            momentum: 0.9,
            weight_decay: 5e-4,
            sched_alpha: 10.0,
            sched_beta: 0.75,
            batch_size: 50,
            epochs: 60,
            intra_start_epoch: IntraStart::Auto,
            seed: 0,
            eps: 1e-12,
            gap_tol: 1e-6,
            anchor_max_samples: None,
            intra_grad_through_probs: false,
            ablation: Ablation::None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Keys not present
    /// keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dims" => self.dims = parse_list(key, v)?,
            "activations" => self.activations = parse_activations(v)?,
            "lambda1" => self.lambda1 = parse_value(key, v)?,
            "lambda2" => self.lambda2 = parse_value(key, v)?,
            "k" => self.k = parse_value(key, v)?,
            "d_prime" => self.d_prime = if v == "auto" { None } else { Some(parse_value(key, v)?) },
            "optimizer" => self.optimizer = v.parse()?,
            "lr" => self.lr = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "eps_opt" => self.eps_opt = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "sched_alpha" => self.sched_alpha = parse_value(key, v)?,
            "sched_beta" => self.sched_beta = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "intra_start_epoch" => self.intra_start_epoch = v.parse()?,
            "seed" => self.seed = parse_value(key, v)?,
            "eps" => self.eps = parse_value(key, v)?,
            "gap_tol" => self.gap_tol = parse_value(key, v)?,
            "anchor_max_samples" => {
                self.anchor_max_samples = if v == "unlimited" {
                    None
                } else {
                    Some(parse_value(key, v)?)
                }
            }
            "intra_grad_through_probs" => self.intra_grad_through_probs = parse_value(key, v)?,
            "ablation" => self.ablation = v.parse()?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// One `key = value` line per field, readable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let dims: Vec<String> = self.dims.iter().map(usize::to_string).collect();
        let opt = |v: Option<usize>, none: &str| v.map_or(none.to_string(), |x| x.to_string());
        let lines = [
            ("dims", dims.join(" ")),
            ("activations", format_activations(&self.activations)),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("k", self.k.to_string()),
            ("d_prime", opt(self.d_prime, "auto")),
            ("optimizer", self.optimizer.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps_opt", self.eps_opt.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("sched_alpha", self.sched_alpha.to_string()),
            ("sched_beta", self.sched_beta.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("intra_start_epoch", self.intra_start_epoch.to_string()),
            ("seed", self.seed.to_string()),
            ("eps", self.eps.to_string()),
            ("gap_tol", self.gap_tol.to_string()),
            ("anchor_max_samples", opt(self.anchor_max_samples, "unlimited")),
            ("intra_grad_through_probs", self.intra_grad_through_probs.to_string()),
            ("ablation", self.ablation.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Folds the ablation into the loss weights and the warm-up, and fills
    /// in `auto` values. The result is what a run actually uses.
    pub fn resolved(&self) -> RunConfig {
        let mut cfg = self.clone();
        if matches!(cfg.ablation, Ablation::NoDs | Ablation::SourceOnly) {
            cfg.lambda1 = 0.0;
            cfg.intra_start_epoch = IntraStart::Never;
        }
        if matches!(cfg.ablation, Ablation::NoAl | Ablation::SourceOnly) {
            cfg.lambda2 = 0.0;
        }
        cfg.intra_start_epoch = match cfg.intra_start_epoch.resolve(cfg.epochs) {
            Some(e) => IntraStart::Epoch(e),
            None => IntraStart::Never,
        };
        cfg.d_prime = Some(cfg.d_prime.unwrap_or(cfg.batch_size.saturating_sub(1)));
        cfg
    }

    /// Network layout `[input, dims..., classes]`.
    pub fn network_dims(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.dims);
        dims.push(classes);
        dims
    }

    /// Subspace dimension used on a manifold layer of width `d`.
    pub fn layer_dprime(&self, d: usize) -> usize {
        self.d_prime
            .unwrap_or(self.batch_size.saturating_sub(1))
            .min(self.batch_size.saturating_sub(1))
            .min(d.saturating_sub(1))
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dims.is_empty() || self.dims.len() != self.activations.len() {
            return bad(format!(
                "{} manifold layers but {} activations",
                self.dims.len(),
                self.activations.len()
            ));
        }
        if self.dims.iter().any(|&d| d < 2) {
            return bad("manifold layers need width at least 2".into());
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.k == 0 || self.k > classes {
            return bad(format!("k must be in 1..={classes}, got {}", self.k));
        }
        if self.d_prime == Some(0) {
            return bad("d_prime must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("momentum", self.momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("eps_opt", self.eps_opt),
            ("eps", self.eps),
            ("weight_decay", self.weight_decay + 1.0),
            ("sched_alpha", self.sched_alpha + 1.0),
            ("sched_beta", self.sched_beta + 1.0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} out of range"));
            }
        }
        if !(self.gap_tol >= 0.0) {
            return bad("gap_tol must be non-negative".into());
        }
        if self.batch_size < 3 || self.batch_size < classes {
            return bad(format!(
                "batch_size must be at least 3 and at least the class count {classes}, got {}",
                self.batch_size
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        Ok(())
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Optimizer buffers mirroring the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// Adam first moments, or SGD velocities.
    pub m: Vec<Matrix>,
    /// Adam second moments; unused by SGD.
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

fn check_shapes(params: &[&mut Matrix], grads: &[Matrix], state: &OptimizerState) -> Result<()> {
    let ok = params.len() == grads.len()
        && params.len() == state.m.len()
        && params
            .iter()
            .zip(grads)
            .zip(&state.m)
            .all(|((p, g), m)| p.shape() == g.shape() && p.shape() == m.shape());
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(
            "optimizer parameters, gradients and buffers disagree".into(),
        ))
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut OptimizerState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps_opt: f64,
) -> Result<()> {
    check_shapes(params, grads, state)?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, g) = (p.as_mut_slice(), g.as_slice());
        for (((theta, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps_opt);
        }
    }
    Ok(())
}

/// Annealed learning rate `lr0 / (1 + α p)^β` at training progress `p`.
pub fn annealed_lr(lr0: f64, alpha: f64, beta: f64, progress: f64) -> f64 {
    lr0 / (1.0 + alpha * progress).powf(beta)
}

/// Momentum SGD with weight decay and the annealed learning rate.
#[allow(clippy::too_many_arguments)]
pub fn sgd_momentum_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut OptimizerState,
    lr0: f64,
    momentum: f64,
    weight_decay: f64,
    alpha: f64,
    beta: f64,
    progress: f64,
) -> Result<()> {
    check_shapes(params, grads, state)?;
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::Usage(format!("schedule progress {progress} outside [0, 1]")));
    }
    state.t += 1;
    let lr = annealed_lr(lr0, alpha, beta, progress);
    for ((p, g), vel) in params.iter_mut().zip(grads).zip(state.m.iter_mut()) {
        for ((theta, &gi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(vel.as_mut_slice()) {
            *vi = momentum * *vi - lr * (gi + weight_decay * *theta);
            *theta += *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `NaN` for classes without samples.
    pub per_class: Vec<f64>,
    /// Mean over classes that have samples.
    pub mean_class_accuracy: f64,
}

pub fn evaluate(net: &ManifoldNetwork, dataset: &Dataset) -> Result<Evaluation> {
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| Error::Usage("evaluation needs labels".into()))?;
    let pred = net.predict(&dataset.features)?;
    Ok(score(&pred, labels, dataset.class_count.max(net.classes())))
}

/// Accuracy bookkeeping for predicted against true labels.
pub fn score(pred: &[usize], labels: &[usize], classes: usize) -> Evaluation {
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&p, &y) in pred.iter().zip(labels) {
        counts[y] += 1;
        hits[y] += usize::from(p == y);
    }
    let per_class: Vec<f64> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &n)| if n == 0 { f64::NAN } else { h as f64 / n as f64 })
        .collect();
    let present: Vec<f64> = per_class.iter().copied().filter(|v| !v.is_nan()).collect();
    Evaluation {
        accuracy: hits.iter().sum::<usize>() as f64 / labels.len().max(1) as f64,
        mean_class_accuracy: present.iter().sum::<f64>() / present.len().max(1) as f64,
        per_class,
    }
}

/// Loss values, parameter gradients and skip count of one batch pair.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub losses: LossBreakdown,
    /// In [`ManifoldNetwork::params`] order; zero where no term reaches.
    pub grads: Vec<Matrix>,
    /// Layers whose alignment term was dropped for a degenerate spectrum.
    pub align_skips: usize,
}

/// Builds the full objective for one source/target batch on a fresh tape
/// and differentiates it.
pub fn batch_objective(
    net: &ManifoldNetwork,
    cfg: &RunConfig,
    anchors: &AnchorStore,
    xs: &Matrix,
    ys: &[usize],
    xt: &Matrix,
    intra_active: bool,
) -> Result<BatchResult> {
    let classes = net.classes();
    let layers = net.layers.len();
    let mut tape = Tape::new();
    let params = net.register(&mut tape);
    let xs_node = tape.constant(xs.clone());
    let xt_node = tape.constant(xt.clone());
    let fs = net.forward_taped(&mut tape, &params, xs_node)?;
    let ft = net.forward_taped(&mut tape, &params, xt_node)?;

    let ce = losses::cross_entropy(&mut tape, fs.logits, ys)?;
    let mut ds_terms = Vec::new();
    let mut al_terms = Vec::new();
    let (mut inter, mut intra, mut align) = (vec![0.0; layers], vec![0.0; layers], vec![0.0; layers]);
    let mut align_skips = 0;

    if cfg.lambda1 > 0.0 {
        let probs_t = intra_active.then(|| tape.softmax_columns(ft.logits));
        for l in 0..layers {
            let a = &anchors.layers[l];
            let node = losses::inter_class_loss(&mut tape, fs.h[l], ys, classes, &a.total_mean, cfg.eps)?;
            inter[l] = tape.scalar(node);
            ds_terms.push(node);
            if let Some(p) = probs_t {
                let node = losses::intra_class_loss(
                    &mut tape,
                    ft.h[l],
                    p,
                    &a.class_means,
                    cfg.k,
                    cfg.eps,
                    !cfg.intra_grad_through_probs,
                )?;
                intra[l] = tape.scalar(node);
                ds_terms.push(node);
            }
        }
    }
    if cfg.lambda2 > 0.0 {
        for l in 0..layers {
            let d_prime = cfg.layer_dprime(net.layers[l].weight.rows());
            match losses::alignment_loss(&mut tape, fs.h[l], ft.h[l], d_prime, cfg.gap_tol) {
                Ok(node) => {
                    align[l] = tape.scalar(node);
                    al_terms.push(node);
                }
                Err(Error::DegenerateSpectrum { .. }) => align_skips += 1,
                Err(e) => return Err(e),
            }
        }
    }

    let mut total = ce;
    for (terms, weight) in [(ds_terms, cfg.lambda1), (al_terms, cfg.lambda2)] {
        for node in terms {
            let scaled = tape.scale(node, weight);
            total = tape.add(total, scaled)?;
        }
    }
    let losses = losses::total_objective(tape.scalar(ce), inter, intra, align, cfg.lambda1, cfg.lambda2);
    if !losses.is_finite() || !tape.scalar(total).is_finite() {
        return Err(Error::NumericalAbort(format!("non-finite loss: {losses:?}")));
    }
    let g = tape.backward(total)?;
    let grads = net
        .params()
        .iter()
        .zip(&params.0)
        .map(|(p, &id)| g.get(id).cloned().unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
        .collect();
    Ok(BatchResult {
        losses,
        grads,
        align_skips,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Means over the epoch's batches.
    pub losses: LossBreakdown,
    pub src_acc: f64,
    /// `NaN` when no target labels were supplied.
    pub tgt_acc: f64,
    pub tgt_per_class: Vec<f64>,
    pub tgt_mean_class_acc: f64,
    pub align_skips: usize,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let f = |v: f64| crate::fmt_f64(v);
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            f(l.ce),
            f(l.inter_sum()),
            f(l.intra_sum()),
            f(l.align_sum()),
            f(l.ds),
            f(l.al),
            f(l.total),
            f(self.src_acc),
            f(self.tgt_acc),
            f(self.tgt_mean_class_acc),
            self.align_skips
        )
    }
}

pub fn epochs_csv(logs: &[EpochLog]) -> String {
    let mut out = format!("{EPOCHS_HEADER}\n");
    for log in logs {
        out.push_str(&log.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ManifoldNetwork,
    pub logs: Vec<EpochLog>,
    pub anchor_refreshes: usize,
    /// The configuration after ablation and `auto` resolution.
    pub config: RunConfig,
}

fn mean_breakdown(sum: &LossBreakdown, n: usize) -> LossBreakdown {
    let k = n.max(1) as f64;
    let avg = |v: &[f64]| v.iter().map(|x| x / k).collect::<Vec<_>>();
    LossBreakdown {
        ce: sum.ce / k,
        inter: avg(&sum.inter),
        intra: avg(&sum.intra),
        align: avg(&sum.align),
        ds: sum.ds / k,
        al: sum.al / k,
        total: sum.total / k,
    }
}

fn accumulate(sum: &mut LossBreakdown, b: &LossBreakdown) {
    let add = |a: &mut Vec<f64>, b: &[f64]| {
        a.resize(b.len(), 0.0);
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    };
    sum.ce += b.ce;
    add(&mut sum.inter, &b.inter);
    add(&mut sum.intra, &b.intra);
    add(&mut sum.align, &b.align);
    sum.ds += b.ds;
    sum.al += b.al;
    sum.total += b.total;
}

/// Trains a fresh network. With `run_dir` set, writes `config.resolved`,
/// `anchors_epoch_<k>.csv`, `epochs.csv` (rewritten after every epoch) and
/// `model_final`.
pub fn train(
    config: &RunConfig,
    source: &Dataset,
    target: &Dataset,
    target_labels: Option<&[usize]>,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with(config, source, target, target_labels, run_dir, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    config: &RunConfig,
    source: &Dataset,
    target: &Dataset,
    target_labels: Option<&[usize]>,
    run_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let cfg = config.resolved();
    let classes = source.class_count;
    let ys_all = source
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("source dataset must be labelled".into()))?;
    cfg.validate(classes)?;
    if source.dim() != target.dim() {
        return Err(Error::Data(format!(
            "source has {} features, target has {}",
            source.dim(),
            target.dim()
        )));
    }
    let target_eval = match target_labels {
        Some(labels) => Some(Dataset::new(
            target.features.clone(),
            Some(labels.to_vec()),
            classes,
            target.domain,
        )?),
        None => None,
    };
    let intra_start = cfg.intra_start_epoch.resolve(cfg.epochs);
    let plan = BatchPlan::new(source, target, cfg.batch_size, cfg.epochs, cfg.seed)?;
    let acts = cfg.activations.clone();
    let mut net = ManifoldNetwork::init(&cfg.network_dims(source.dim(), classes), &acts, cfg.seed)?;
    let mut state = OptimizerState::new(&net.params());

    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = format!(
            "# resolved run configuration\n# rng = {RNG_ALGORITHM}\n# network = {:?}\n{}",
            cfg.network_dims(source.dim(), classes),
            cfg.to_text()
        );
        write_file(&dir.join("config.resolved"), text.as_bytes())?;
    }
    let save_anchors = |store: &AnchorStore| -> Result<()> {
        match run_dir {
            Some(dir) => store.save(&dir.join(format!("anchors_epoch_{}.csv", store.epoch_tag))),
            None => Ok(()),
        }
    };

    let mut anchors = compute_anchors(&net, source, cfg.batch_size, cfg.anchor_max_samples, 0)?;
    save_anchors(&anchors)?;
    let mut refreshes = 1;
    let total_steps = plan.epochs.iter().map(Vec::len).sum::<usize>().max(1);
    let mut logs = Vec::with_capacity(cfg.epochs);

    for (epoch, batches) in plan.epochs.iter().enumerate() {
        let intra_active = intra_start.is_some_and(|s| epoch >= s);
        let mut sum = LossBreakdown::default();
        let mut skips = 0;
        for batch in batches {
            let xs = source.features.select_columns(&batch.source)?;
            let ys: Vec<usize> = batch.source.iter().map(|&j| ys_all[j]).collect();
            let xt = target.features.select_columns(&batch.target)?;
            let result = batch_objective(&net, &cfg, &anchors, &xs, &ys, &xt, intra_active)?;
            accumulate(&mut sum, &result.losses);
            skips += result.align_skips;
            let mut params = net.params_mut();
            match cfg.optimizer {
                OptimizerKind::Adam => adam_step(
                    &mut params,
                    &result.grads,
                    &mut state,
                    cfg.lr,
                    cfg.beta1,
                    cfg.beta2,
                    cfg.eps_opt,
                )?,
                OptimizerKind::Sgd => {
                    let progress = state.t as f64 / total_steps as f64;
                    sgd_momentum_step(
                        &mut params,
                        &result.grads,
                        &mut state,
                        cfg.lr,
                        cfg.momentum,
                        cfg.weight_decay,
                        cfg.sched_alpha,
                        cfg.sched_beta,
                        progress.min(1.0),
                    )?
                }
            }
        }
        if net.params().iter().any(|p| !p.all_finite()) {
            return Err(Error::NumericalAbort(format!(
                "parameters became non-finite in epoch {}",
                epoch + 1
            )));
        }

        let src = evaluate(&net, source)?;
        let tgt = match &target_eval {
            Some(t) => evaluate(&net, t)?,
            None => Evaluation {
                accuracy: f64::NAN,
                per_class: vec![f64::NAN; classes],
                mean_class_accuracy: f64::NAN,
            },
        };
        let log = EpochLog {
            epoch: epoch + 1,
            losses: mean_breakdown(&sum, batches.len()),
            src_acc: src.accuracy,
            tgt_acc: tgt.accuracy,
            tgt_per_class: tgt.per_class,
            tgt_mean_class_acc: tgt.mean_class_accuracy,
            align_skips: skips,
        };
        on_epoch(&log);
        logs.push(log);

        anchors = anchors.refresh(&net, source, cfg.batch_size, cfg.anchor_max_samples, epoch + 1)?;
        refreshes += 1;
        save_anchors(&anchors)?;
        if let Some(dir) = run_dir {
            write_file(&dir.join("epochs.csv"), epochs_csv(&logs).as_bytes())?;
        }
    }

    if let Some(dir) = run_dir {
        net.save(&dir.join("model_final"))?;
    }
    Ok(TrainOutcome {
        net,
        logs,
        anchor_refreshes: refreshes,
        config: cfg,
    })
}

/// Parses an `epochs.csv` written by [`train`].
pub fn read_epochs_csv(text: &str, path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == EPOCHS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "missing epochs header".into(),
            })
        }
    }
    let width = EPOCHS_HEADER.split(',').count();
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let row: std::result::Result<Vec<f64>, _> = l.split(',').map(|f| f.trim().parse::<f64>()).collect();
            match row {
                Ok(r) if r.len() == width => Ok(r),
                _ => Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected {width} numeric fields"),
                }),
            }
        })
        .collect()
}

/// Predicted class for every column of `x`.
pub fn predict_labels(net: &ManifoldNetwork, x: &Matrix) -> Result<Vec<usize>> {
    let pass = net.forward(x)?;
    Ok((0..pass.logits.cols()).map(|j| argmax(pass.logits.col(j))).collect())
}
