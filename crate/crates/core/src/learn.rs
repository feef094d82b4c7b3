//! Training objectives: filtered fine-tuning, REINFORCE with
//! inverse-propensity downweighting of negative rewards, and KTO.
//!
//! Every objective is written as a per-candidate coefficient on the softmax
//! scores (the derivative of the loss with respect to each candidate's
//! length-normalized score); `CompiledContext::accumulate` turns those into
//! weight gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{negative_cap, DecodedExample, Objective, TrainingSet};
use crate::error::{Error, Result};
use crate::feedback::FeedbackLabel;
use crate::grammar::ActionSpec;
use crate::policy::{CompiledContext, FeatureIndex, FeatureVector, PolicyContext, PolicyParams};
use crate::seeds::derive_seed;

/// Numerical reward of a decoded label.
pub fn reward_of(label: FeedbackLabel) -> f64 {
    match label {
        FeedbackLabel::Positive => 1.0,
        FeedbackLabel::Neutral => 0.0,
        FeedbackLabel::Negative => -0.1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub entropy_weight: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Independent restarts; the best by validation exact match is kept.
    pub restarts: usize,
    /// Also cap negatives at 5:4 inside each minibatch.
    pub per_batch_balance: bool,
    /// Consecutive collapsed epochs tolerated before a restart is abandoned.
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Fft,
            learning_rate: 1.0,
            epochs: 12,
            batch_size: 32,
            label_smoothing: 0.1,
            entropy_weight: 0.01,
            weight_decay: 1e-4,
            seed: 0,
            restarts: 3,
            per_batch_balance: false,
            divergence_patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn for_objective(objective: Objective) -> TrainConfig {
        let mut cfg = TrainConfig {
            objective,
            ..TrainConfig::default()
        };
        if objective == Objective::Kto {
            cfg.entropy_weight = 0.1;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "learning_rate, epochs and batch_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig(format!(
                "label_smoothing {} outside [0,1)",
                self.label_smoothing
            )));
        }
        if self.entropy_weight < 0.0 || self.weight_decay < 0.0 || self.restarts == 0 {
            return Err(Error::InvalidConfig(
                "entropy_weight and weight_decay must be non-negative, restarts positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KtoConfig {
    pub beta: f64,
    pub lambda_desired: f64,
    pub lambda_undesired: f64,
}

impl Default for KtoConfig {
    fn default() -> Self {
        KtoConfig {
            beta: 0.5,
            lambda_desired: 1.0,
            lambda_undesired: 1.0,
        }
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Add `-weight · ∂H/∂s` to `coef`, i.e. the gradient of `-weight·H`.
fn add_entropy_coef(p: &[f64], weight: f64, coef: &mut [f64]) {
    if weight == 0.0 {
        return;
    }
    let h = entropy(p);
    for (c, pc) in coef.iter_mut().zip(p) {
        if *pc > 0.0 {
            *c += weight * pc * (pc.ln() + h);
        }
    }
}

/// Smoothed cross entropy minus the entropy bonus, and its score gradient.
fn fft_terms(p: &[f64], target: usize, smoothing: f64, entropy_weight: f64) -> (f64, Vec<f64>) {
    let k = p.len();
    let off = if k > 1 { smoothing / (k - 1) as f64 } else { 0.0 };
    let q = |c: usize| if c == target { 1.0 - smoothing } else { off };
    let mut loss = 0.0;
    let mut coef = vec![0.0; k];
    for c in 0..k {
        let qc = q(c);
        if qc > 0.0 {
            loss -= qc * p[c].ln();
        }
        coef[c] = p[c] - qc;
    }
    loss -= entropy_weight * entropy(p);
    add_entropy_coef(p, entropy_weight, &mut coef);
    (loss, coef)
}

/// The scalar whose gradient is the inverse-propensity REINFORCE estimate:
/// `R·log P(â)` for non-negative rewards and `(R/p)·P(â)` otherwise, plus
/// the entropy bonus. Returned as a loss (negated), with its score gradient.
fn rl_terms(p: &[f64], target: usize, prob: f64, reward: f64, entropy_weight: f64) -> (f64, Vec<f64>) {
    let k = p.len();
    let pa = p[target];
    let (obj, scale) = if reward >= 0.0 {
        (reward * pa.ln(), reward)
    } else {
        (reward / prob * pa, reward * pa / prob)
    };
    let mut coef: Vec<f64> = (0..k)
        .map(|c| -scale * ((c == target) as u8 as f64 - p[c]))
        .collect();
    add_entropy_coef(p, entropy_weight, &mut coef);
    (-(obj + entropy_weight * entropy(p)), coef)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Desired and undesired examples; neutrals are dropped.
pub fn kto_batch(examples: &[DecodedExample]) -> (Vec<&DecodedExample>, Vec<&DecodedExample>) {
    let desired = examples
        .iter()
        .filter(|e| e.label == FeedbackLabel::Positive)
        .collect();
    let undesired = examples
        .iter()
        .filter(|e| e.label == FeedbackLabel::Negative)
        .collect();
    (desired, undesired)
}

/// Per-example KTO losses for a batch given log-probabilities under the
/// policy and the reference. The reference point of each example is the
/// mean implied reward of the opposite class and is held fixed.
pub fn kto_terms(
    cfg: &KtoConfig,
    logp: &[f64],
    logp_ref: &[f64],
    desired: &[bool],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let r: Vec<f64> = logp
        .iter()
        .zip(logp_ref)
        .map(|(a, b)| cfg.beta * (a - b))
        .collect();
    let mean = |want: bool| -> Option<f64> {
        let xs: Vec<f64> = r
            .iter()
            .zip(desired)
            .filter(|(_, d)| **d == want)
            .map(|(x, _)| *x)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    let z_for_desired = mean(false).ok_or(Error::EmptyClass("undesired"))?;
    let z_for_undesired = mean(true).ok_or(Error::EmptyClass("desired"))?;
    let mut losses = Vec::with_capacity(r.len());
    let mut dloss_dlogp = Vec::with_capacity(r.len());
    for (ri, d) in r.iter().zip(desired) {
        if *d {
            let s = sigmoid(ri - z_for_desired);
            losses.push(cfg.lambda_desired * (1.0 - s));
            dloss_dlogp.push(-cfg.lambda_desired * s * (1.0 - s) * cfg.beta);
        } else {
            let s = sigmoid(z_for_undesired - ri);
            losses.push(cfg.lambda_undesired * (1.0 - s));
            dloss_dlogp.push(cfg.lambda_undesired * s * (1.0 - s) * cfg.beta);
        }
    }
    Ok((losses, dloss_dlogp))
}

struct Compiled {
    index: FeatureIndex,
    weights: Vec<f64>,
}

fn compile_one(params: &PolicyParams, x: &PolicyContext) -> (Compiled, CompiledContext) {
    let mut index = FeatureIndex::default();
    let cc = CompiledContext::new(x, params, &mut index);
    let weights = index.dense(params);
    (Compiled { index, weights }, cc)
}

fn target_of(cc: &CompiledContext, a: &ActionSpec) -> Result<usize> {
    cc.position(a).ok_or_else(|| Error::IllegalAction {
        action: a.serialize(),
        reason: "not among the legal candidates".into(),
    })
}

fn sparse_grad(c: &Compiled, cc: &CompiledContext, coef: &[f64]) -> FeatureVector {
    let mut g = vec![0.0; c.index.len()];
    cc.accumulate(coef, &mut g);
    c.index
        .ids()
        .iter()
        .zip(g)
        .filter(|(_, v)| *v != 0.0)
        .map(|(k, v)| (*k, v))
        .collect()
}

/// Label-smoothed, length-normalized cross entropy of a positive example,
/// minus the entropy bonus.
pub fn fft_loss(params: &PolicyParams, ex: &DecodedExample, smoothing: f64, entropy_weight: f64) -> Result<f64> {
    if ex.label != FeedbackLabel::Positive {
        return Err(Error::NonPositiveExample);
    }
    let (c, cc) = compile_one(params, &ex.raw.context);
    let t = target_of(&cc, &ex.raw.action)?;
    Ok(fft_terms(&cc.probs(&c.weights), t, smoothing, entropy_weight).0)
}

/// Gradient of `fft_loss` with respect to the weights.
pub fn fft_grad(params: &PolicyParams, ex: &DecodedExample, smoothing: f64, entropy_weight: f64) -> Result<FeatureVector> {
    if ex.label != FeedbackLabel::Positive {
        return Err(Error::NonPositiveExample);
    }
    let (c, cc) = compile_one(params, &ex.raw.context);
    let t = target_of(&cc, &ex.raw.action)?;
    let (_, coef) = fft_terms(&cc.probs(&c.weights), t, smoothing, entropy_weight);
    Ok(sparse_grad(&c, &cc, &coef))
}

/// The REINFORCE objective to be maximized (see `reinforce_grad`).
pub fn reinforce_objective(params: &PolicyParams, ex: &DecodedExample, entropy_weight: f64) -> Result<f64> {
    let (c, cc) = compile_one(params, &ex.raw.context);
    let t = target_of(&cc, &ex.raw.action)?;
    let p = cc.probs(&c.weights);
    Ok(-rl_terms(&p, t, ex.raw.prob, reward_of(ex.label), entropy_weight).0)
}

/// Ascent direction `c·R·∇log P(â|x) + entropy_weight·∇H`, where `c` is 1
/// for non-negative rewards and `P(â|x)/p` otherwise.
pub fn reinforce_grad(params: &PolicyParams, ex: &DecodedExample, entropy_weight: f64) -> Result<FeatureVector> {
    let (c, cc) = compile_one(params, &ex.raw.context);
    let t = target_of(&cc, &ex.raw.action)?;
    let p = cc.probs(&c.weights);
    let (_, coef) = rl_terms(&p, t, ex.raw.prob, reward_of(ex.label), entropy_weight);
    let neg: Vec<f64> = coef.iter().map(|x| -x).collect();
    Ok(sparse_grad(&c, &cc, &neg))
}

/// Mean KTO loss of a batch against a frozen reference policy.
pub fn kto_loss(
    params: &PolicyParams,
    reference: &PolicyParams,
    cfg: &KtoConfig,
    batch: &[DecodedExample],
    entropy_weight: f64,
) -> Result<f64> {
    let (desired, undesired) = kto_batch(batch);
    let mut logp = Vec::new();
    let mut logp_ref = Vec::new();
    let mut flags = Vec::new();
    let mut ent = 0.0;
    for (ex, d) in desired
        .iter()
        .map(|e| (*e, true))
        .chain(undesired.iter().map(|e| (*e, false)))
    {
        let pa = params.prob_of(&ex.raw.context, &ex.raw.action)?;
        let pr = reference.prob_of(&ex.raw.context, &ex.raw.action)?;
        let dist: Vec<f64> = params
            .action_distribution(&ex.raw.context)
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        ent += entropy(&dist);
        logp.push(pa.ln());
        logp_ref.push(pr.ln());
        flags.push(d);
    }
    let (losses, _) = kto_terms(cfg, &logp, &logp_ref, &flags)?;
    let n = losses.len() as f64;
    Ok((losses.iter().sum::<f64>() - entropy_weight * ent) / n)
}

/// Held-out turns with the action the speaker wanted.
#[derive(Debug, Clone, Default)]
pub struct ValidationSet {
    pub turns: Vec<(PolicyContext, ActionSpec)>,
}

impl ValidationSet {
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Argmax exact-match rate of a policy.
    pub fn exact_match(&self, params: &PolicyParams) -> f64 {
        if self.turns.is_empty() {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hits = self
            .turns
            .iter()
            .filter(|(x, a)| params.act(x, crate::policy::DecodeMode::Argmax, &mut rng).0 == *a)
            .count();
        hits as f64 / self.turns.len() as f64
    }
}

struct Prepared {
    cc: CompiledContext,
    target: usize,
    label: FeedbackLabel,
    prob: f64,
    logp_ref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub restart: usize,
    pub epoch: usize,
    pub loss: f64,
    pub validation_exact_match: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub restart: usize,
    /// Epochs behind the kept weights.
    pub epoch: usize,
    pub validation_exact_match: f64,
    pub initial_exact_match: f64,
    pub history: Vec<EpochRecord>,
    pub diverged_restarts: usize,
}

/// Minibatch SGD with weight decay over the training set, keeping the
/// final weights of the restart with the best validation exact match.
pub fn train_round(
    init: &PolicyParams,
    set: &TrainingSet,
    validation: &ValidationSet,
    cfg: &TrainConfig,
    kto: Option<(&KtoConfig, &PolicyParams)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if set.examples.is_empty() {
        return Err(Error::EmptyPositiveSet);
    }
    let mut index = FeatureIndex::default();
    let mut init_ids: Vec<u64> = init.weights.keys().copied().collect();
    init_ids.sort_unstable();
    if let Some((_, r)) = kto {
        let mut ref_ids: Vec<u64> = r.weights.keys().copied().collect();
        ref_ids.sort_unstable();
        init_ids.extend(ref_ids);
    }
    for id in init_ids {
        index.intern(id);
    }
    let mut prepared = Vec::with_capacity(set.examples.len());
    for ex in &set.examples {
        let cc = CompiledContext::new(&ex.raw.context, init, &mut index);
        let target = target_of(&cc, &ex.raw.action)?;
        prepared.push(Prepared {
            cc,
            target,
            label: ex.label,
            prob: ex.raw.prob,
            logp_ref: 0.0,
        });
    }
    let val: Vec<(CompiledContext, Option<usize>)> = validation
        .turns
        .iter()
        .map(|(x, a)| {
            let cc = CompiledContext::new(x, init, &mut index);
            let t = cc.position(a);
            (cc, t)
        })
        .collect();
    let kto_cfg = match (cfg.objective, kto) {
        (Objective::Kto, Some((k, reference))) => {
            let wr = index.dense(reference);
            for p in &mut prepared {
                p.logp_ref = p.cc.probs(&wr)[p.target].ln();
            }
            Some(k.clone())
        }
        (Objective::Kto, None) => {
            return Err(Error::InvalidConfig("kto training needs a reference policy".into()))
        }
        _ => None,
    };
    if kto_cfg.is_some() {
        let has = |l| prepared.iter().any(|p| p.label == l);
        if !has(FeedbackLabel::Positive) {
            return Err(Error::EmptyClass("desired"));
        }
        if !has(FeedbackLabel::Negative) {
            return Err(Error::EmptyClass("undesired"));
        }
    }

    let val_em = |w: &[f64]| -> f64 {
        if val.is_empty() {
            return 0.0;
        }
        let hits = val
            .iter()
            .filter(|(cc, t)| t.is_some_and(|t| cc.argmax(w) == t))
            .count();
        hits as f64 / val.len() as f64
    };

    let w0 = index.dense(init);
    let initial_em = val_em(&w0);
    let mut best: Option<(f64, usize, usize, Vec<f64>)> = None;
    let mut history = Vec::new();
    let mut diverged = 0;
    for restart in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x747261696e, restart as u64]));
        let mut w = w0.clone();
        let mut collapsed = 0usize;
        let mut abandoned = false;
        for epoch in 1..=cfg.epochs {
            let batches = make_batches(&prepared, cfg, kto_cfg.is_some(), &mut rng);
            let mut epoch_loss = 0.0;
            for batch in &batches {
                let mut grad = vec![0.0; w.len()];
                let loss = match &kto_cfg {
                    Some(k) => kto_batch_grad(&prepared, batch, &w, k, cfg.entropy_weight, &mut grad)?,
                    None => pointwise_batch_grad(&prepared, batch, &w, cfg, &mut grad),
                };
                epoch_loss += loss;
                let scale = 1.0 / batch.len() as f64;
                for (wi, gi) in w.iter_mut().zip(&grad) {
                    *wi -= cfg.learning_rate * (gi * scale + cfg.weight_decay * *wi);
                }
            }
            let em = val_em(&w);
            history.push(EpochRecord {
                restart,
                epoch,
                loss: epoch_loss / prepared.len() as f64,
                validation_exact_match: em,
            });
            if initial_em > 0.0 && em < 0.5 * initial_em {
                collapsed += 1;
                if collapsed >= cfg.divergence_patience {
                    abandoned = true;
                    break;
                }
            } else {
                collapsed = 0;
            }
        }
        if abandoned {
            diverged += 1;
            continue;
        }
        let em = history.last().map_or(initial_em, |h: &EpochRecord| h.validation_exact_match);
        if best.as_ref().is_none_or(|b| em > b.0) {
            best = Some((em, restart, cfg.epochs, w));
        }
    }
    let (em, restart, epoch, w) = best.ok_or_else(|| {
        Error::Divergence(format!(
            "validation exact match fell below half of {initial_em:.3} in every restart"
        ))
    })?;
    Ok(TrainOutcome {
        params: index.sparse(&w, init),
        restart,
        epoch,
        validation_exact_match: em,
        initial_exact_match: initial_em,
        history,
        diverged_restarts: diverged,
    })
}

fn make_batches(
    prepared: &[Prepared],
    cfg: &TrainConfig,
    stratify: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let bs = cfg.batch_size;
    if stratify {
        let mut pos: Vec<usize> = (0..prepared.len())
            .filter(|i| prepared[*i].label == FeedbackLabel::Positive)
            .collect();
        let mut neg: Vec<usize> = (0..prepared.len())
            .filter(|i| prepared[*i].label == FeedbackLabel::Negative)
            .collect();
        pos.shuffle(rng);
        neg.shuffle(rng);
        let n = (pos.len() + neg.len())
            .div_ceil(bs)
            .min(pos.len())
            .min(neg.len())
            .max(1);
        let mut batches = vec![Vec::new(); n];
        for (k, i) in pos.iter().enumerate() {
            batches[k % n].push(*i);
        }
        for (k, i) in neg.iter().enumerate() {
            batches[k % n].push(*i);
        }
        return batches;
    }
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(bs).map(|c| c.to_vec()).collect();
    if cfg.per_batch_balance {
        for b in &mut batches {
            let pos = b
                .iter()
                .filter(|i| prepared[**i].label == FeedbackLabel::Positive)
                .count();
            let mut room = negative_cap(pos);
            b.retain(|i| {
                if prepared[*i].label != FeedbackLabel::Negative {
                    return true;
                }
                if room > 0 {
                    room -= 1;
                    true
                } else {
                    false
                }
            });
        }
        batches.retain(|b| !b.is_empty());
    }
    batches
}

fn pointwise_batch_grad(
    prepared: &[Prepared],
    batch: &[usize],
    w: &[f64],
    cfg: &TrainConfig,
    grad: &mut [f64],
) -> f64 {
    let mut total = 0.0;
    for &i in batch {
        let ex = &prepared[i];
        let p = ex.cc.probs(w);
        let (loss, coef) = match cfg.objective {
            Objective::Fft => fft_terms(&p, ex.target, cfg.label_smoothing, cfg.entropy_weight),
            _ => rl_terms(&p, ex.target, ex.prob, reward_of(ex.label), cfg.entropy_weight),
        };
        total += loss;
        ex.cc.accumulate(&coef, grad);
    }
    total
}

fn kto_batch_grad(
    prepared: &[Prepared],
    batch: &[usize],
    w: &[f64],
    k: &KtoConfig,
    entropy_weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let probs: Vec<Vec<f64>> = batch.iter().map(|i| prepared[*i].cc.probs(w)).collect();
    let logp: Vec<f64> = batch
        .iter()
        .zip(&probs)
        .map(|(i, p)| p[prepared[*i].target].ln())
        .collect();
    let logp_ref: Vec<f64> = batch.iter().map(|i| prepared[*i].logp_ref).collect();
    let desired: Vec<bool> = batch
        .iter()
        .map(|i| prepared[*i].label == FeedbackLabel::Positive)
        .collect();
    let (losses, dl) = kto_terms(k, &logp, &logp_ref, &desired)?;
    let mut total = 0.0;
    for (((&i, p), loss), d) in batch.iter().zip(&probs).zip(&losses).zip(&dl) {
        let ex = &prepared[i];
        let mut coef: Vec<f64> = (0..p.len())
            .map(|c| d * ((c == ex.target) as u8 as f64 - p[c]))
            .collect();
        add_entropy_coef(p, entropy_weight, &mut coef);
        total += loss - entropy_weight * entropy(p);
        ex.cc.accumulate(&coef, grad);
    }
    Ok(total)
}
