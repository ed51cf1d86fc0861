//! Three-phase curriculum training, evaluation and the command-line driver.

mod cli;
mod config;
mod log;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::{
    build_prior_bias, group_by_image, group_split, head_set, Dataset, PredicateVocabulary,
    RelationInstance, BACKGROUND,
};
use crate::error::{Error, Result};
use crate::losses::{
    crm_loss, cross_entropy, effective_number_weights, kd_loss, ClassWeights, LossBreakdown,
};
use crate::metrics::{evaluate_predictions, EvalReport, GroundTruthTriple, RankedPrediction};
use crate::model::{Branch, DualBranchModel, ModelDims};
use crate::numerics::{softmax_unchecked, GradStore, Tensor};
use crate::scm;
use crate::schedules::{branch_alpha, predicate_lambda, ScheduleConfig};

pub use cli::run_command;
pub use config::{
    apply_train_key, generator_config_from_str, parse_key_values, train_config_from_str,
    train_config_to_string,
};
pub use log::{
    read_train_log, render_eval_report, render_schedule_report, write_train_log, LogEntry,
    ParsedLog, RecallRow, TrainLog, TRAIN_LOG_VERSION,
};

/// Environment variable capping the number of worker threads.
pub const WORKERS_ENV: &str = "SGGHT_WORKERS";
pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub tau: f64,
    pub mu: f64,
    pub beta_en: f64,
    pub learning_rate: f64,
    /// Images per mini-batch.
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub scm_dim: usize,
    pub seed: u64,
    /// Write every n-th iteration to the log file (the in-memory log keeps all).
    pub log_every: usize,
    /// Evaluate on the test split every n iterations; 0 disables snapshots.
    pub eval_every: usize,
    /// Fine branch trained with plain cross-entropy instead of re-weighting.
    pub disable_crm: bool,
    pub disable_scm: bool,
    pub disable_kd: bool,
    /// Train the coarse branch alone with `alpha` fixed at 1; inference then
    /// uses the coarse branch.
    pub clb_only: bool,
    /// Hold distillation and the semantic-gap term until after `K1`.
    pub defer_flb_terms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig {
                head_threshold: 52,
                ..ScheduleConfig::default()
            },
            tau: 2.0,
            mu: 0.05,
            beta_en: 0.999,
            learning_rate: 0.1,
            batch_size: 4,
            hidden_dim: 64,
            scm_dim: 32,
            seed: 0,
            log_every: 10,
            eval_every: 0,
            disable_crm: false,
            disable_scm: false,
            disable_kd: false,
            clb_only: false,
            defer_flb_terms: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.tau > 0.0) || !(self.mu >= 0.0) {
            return Err(Error::config("tau must be positive and mu nonnegative"));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::config("batch_size and log_every must be positive"));
        }
        if self.hidden_dim == 0 || self.scm_dim == 0 {
            return Err(Error::config("hidden_dim and scm_dim must be positive"));
        }
        Ok(())
    }

    /// Everything beyond the coarse branch switched off.
    pub fn baseline(mut self) -> Self {
        self.clb_only = true;
        self.disable_crm = true;
        self.disable_scm = true;
        self.disable_kd = true;
        self
    }

    fn uses_scm(&self) -> bool {
        !self.clb_only && !self.disable_scm
    }

    fn uses_kd(&self) -> bool {
        !self.clb_only && !self.disable_kd
    }

    pub fn alpha(&self, k: usize) -> f64 {
        if self.clb_only {
            1.0
        } else {
            branch_alpha(k, &self.schedule)
        }
    }
}

/// Builds the model for `dataset` with the prior estimated from its training split.
pub fn init_model(cfg: &TrainConfig, dataset: &Dataset) -> Result<DualBranchModel> {
    let dims = ModelDims {
        feature_dim: dataset.feature_dim,
        num_object_classes: dataset.num_object_classes,
        num_predicates: dataset.vocab.num_predicates(),
        hidden_dim: cfg.hidden_dim,
        scm_dim: cfg.scm_dim,
    };
    let prior = build_prior_bias(&dataset.train, dataset.num_object_classes, dims.num_classes())?;
    DualBranchModel::new(dims, prior, cfg.seed)
}

/// Epoch-wise shuffled image order; each mini-batch takes the next
/// `batch_size` images, reshuffling when the order is exhausted.
#[derive(Debug, Clone)]
pub struct ImageSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl ImageSampler {
    pub fn new(num_images: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..num_images).collect(),
            cursor: num_images,
        }
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Seed of the mini-batch sampler for a training seed.
pub fn sampler_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)
}

/// Fixed per-iteration quantities shared by all images of a batch.
struct StepContext<'a> {
    cfg: &'a TrainConfig,
    weights: &'a ClassWeights,
    head: &'a BTreeSet<usize>,
    head_list: &'a [usize],
    alpha: f64,
    k: usize,
    relations: f64,
    images: f64,
}

#[derive(Debug, Default, Clone, Copy)]
struct LossSums {
    ce: f64,
    crm: f64,
    kd: f64,
    sc: f64,
}

fn image_step(
    model: &DualBranchModel,
    image: &[RelationInstance],
    ctx: &StepContext<'_>,
) -> Result<(GradStore, LossSums)> {
    let cfg = ctx.cfg;
    let mut grads = model.params.zero_grads_like();
    let mut sums = LossSums::default();
    let n = image.len();
    let c = model.dims.num_classes();

    let mut contexts = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    let mut z_c = Tensor::zeros(&[n, c]);
    let mut z_f = Tensor::zeros(&[n, c]);
    for (i, inst) in image.iter().enumerate() {
        let (context, cache) = model.extract_with_cache(inst)?;
        z_c.row_mut(i).copy_from_slice(&model.decode(
            Branch::Clb,
            &context,
            inst.subject_class,
            inst.object_class,
        )?);
        if !cfg.clb_only {
            z_f.row_mut(i).copy_from_slice(&model.decode(
                Branch::Flb,
                &context,
                inst.subject_class,
                inst.object_class,
            )?);
        }
        contexts.push(context);
        caches.push(cache);
    }
    if !z_c.is_finite() || !z_f.is_finite() {
        return Err(Error::Divergence {
            iteration: ctx.k,
            component: if z_c.is_finite() { "flb logits" } else { "clb logits" }.to_string(),
        });
    }

    let mut d_ctx: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (i, inst) in image.iter().enumerate() {
        let (ce, mut g) = cross_entropy(z_c.row(i), inst.gt_predicate)?;
        sums.ce += ce;
        g.iter_mut().for_each(|v| *v *= ctx.alpha / ctx.relations);
        d_ctx.push(model.decode_backward(Branch::Clb, &contexts[i], &g, &mut grads));
    }

    if !cfg.clb_only {
        let flb_terms_live = !cfg.defer_flb_terms || ctx.k > cfg.schedule.k1;
        let use_scm = cfg.uses_scm() && flb_terms_live;
        let out = model.flb_correct(image, z_f, use_scm, use_scm, true)?;
        let mut d_z_o = Tensor::zeros(&[n, c]);
        for (i, inst) in image.iter().enumerate() {
            let y = inst.gt_predicate;
            let (crm, g) = if cfg.disable_crm {
                cross_entropy(out.z_o.row(i), y)?
            } else {
                let lambda = predicate_lambda(ctx.k, ctx.head.contains(&y), &cfg.schedule);
                crm_loss(out.z_o.row(i), y, ctx.weights, lambda)?
            };
            sums.crm += crm;
            let row = d_z_o.row_mut(i);
            for (d, gv) in row.iter_mut().zip(&g) {
                *d += (1.0 - ctx.alpha) / ctx.relations * gv;
            }
            if cfg.uses_kd() && flb_terms_live {
                let (kd, gk) = kd_loss(z_c.row(i), out.z_o.row(i), cfg.tau, ctx.head_list)?;
                sums.kd += kd;
                for (d, gv) in row.iter_mut().zip(&gk) {
                    *d += cfg.mu / ctx.relations * gv;
                }
            }
        }
        let mut d_z_f = d_z_o.clone();
        if let Some(scm_out) = &out.scm {
            sums.sc += out.l_sc;
            let cache = scm_out.cache.as_ref().expect("cache requested");
            let back = scm::scm_backward(
                cache,
                &d_z_o,
                1.0 / ctx.images,
                &model.embeddings,
                &model.params,
                &mut grads,
            );
            d_z_f.add_assign(&back);
        }
        for i in 0..n {
            let d = model.decode_backward(Branch::Flb, &contexts[i], d_z_f.row(i), &mut grads);
            for (a, b) in d_ctx[i].iter_mut().zip(&d) {
                *a += b;
            }
        }
    }

    for (cache, d) in caches.iter().zip(&d_ctx) {
        model.extractor_backward(cache, d, &mut grads);
    }
    Ok((grads, sums))
}

fn loss_setup(
    cfg: &TrainConfig,
    vocab: &PredicateVocabulary,
) -> Result<(BTreeSet<usize>, Vec<usize>, ClassWeights)> {
    let head = head_set(vocab, cfg.schedule.head_threshold);
    let head_list: Vec<usize> = head.iter().copied().collect();
    if cfg.uses_kd() && head_list.len() < 2 {
        return Err(Error::config(format!(
            "distillation needs at least two head predicates; threshold {} yields {}",
            cfg.schedule.head_threshold,
            head_list.len()
        )));
    }
    let weights = if cfg.disable_crm || cfg.clb_only {
        ClassWeights::uniform(vocab.num_classes())
    } else {
        effective_number_weights(&vocab.train_counts, cfg.beta_en)?
    };
    Ok((head, head_list, weights))
}

/// Objective and parameter gradients of one image treated as a whole batch
/// at iteration `k`: `alpha * CE + (1 - alpha) * CRM + mu * KD` averaged over
/// its relations, plus `L_SC`. The teacher logits and the ground-truth
/// context token enter as constants.
pub fn image_objective(
    cfg: &TrainConfig,
    vocab: &PredicateVocabulary,
    model: &DualBranchModel,
    image: &[RelationInstance],
    k: usize,
) -> Result<(f64, GradStore)> {
    cfg.validate()?;
    if image.is_empty() {
        return Err(Error::invalid("an image needs at least one relation"));
    }
    let (head, head_list, weights) = loss_setup(cfg, vocab)?;
    let ctx = StepContext {
        cfg,
        weights: &weights,
        head: &head,
        head_list: &head_list,
        alpha: cfg.alpha(k),
        k,
        relations: image.len() as f64,
        images: 1.0,
    };
    let (grads, s) = image_step(model, image, &ctx)?;
    let r = ctx.relations;
    let b = LossBreakdown::assemble(ctx.alpha, s.ce / r, s.crm / r, s.sc, s.kd / r, cfg.mu);
    Ok((b.l_total, grads))
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::config(format!("{WORKERS_ENV} must be a positive integer")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))
}

/// Runs the full schedule and returns the trained model and its log.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut model: DualBranchModel,
) -> Result<(DualBranchModel, TrainLog)> {
    cfg.validate()?;
    let vocab = &dataset.vocab;
    if model.dims.num_classes() != vocab.num_classes()
        || model.dims.feature_dim != dataset.feature_dim
        || model.dims.num_object_classes != dataset.num_object_classes
    {
        return Err(Error::invalid("dataset and model dimensions disagree"));
    }
    let (head, head_list, weights) = loss_setup(cfg, vocab)?;

    let images = group_by_image(&dataset.train);
    if images.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut sampler = ImageSampler::new(images.len(), sampler_seed(cfg.seed));
    let pool = worker_pool()?;
    let mut log = TrainLog {
        config: cfg.clone(),
        entries: Vec::with_capacity(cfg.schedule.total),
        evals: Vec::new(),
    };
    model.inference_branch = if cfg.clb_only { Branch::Clb } else { Branch::Flb };
    model.scm_enabled = cfg.uses_scm();

    for k in 1..=cfg.schedule.total {
        let batch = sampler.next_batch(cfg.batch_size);
        let relations: usize = batch.iter().map(|&b| images[b].len()).sum();
        let ctx = StepContext {
            cfg,
            weights: &weights,
            head: &head,
            head_list: &head_list,
            alpha: cfg.alpha(k),
            k,
            relations: relations as f64,
            images: batch.len() as f64,
        };
        let results: Vec<Result<(GradStore, LossSums)>> = pool.install(|| {
            batch
                .par_iter()
                .map(|&b| image_step(&model, images[b], &ctx))
                .collect()
        });
        let grads = model.params.grads_mut();
        grads.zero();
        let mut sums = LossSums::default();
        for r in results {
            let (g, s) = r?;
            grads.accumulate(&g);
            sums.ce += s.ce;
            sums.crm += s.crm;
            sums.kd += s.kd;
            sums.sc += s.sc;
        }
        let r = relations as f64;
        let breakdown = LossBreakdown::assemble(
            ctx.alpha,
            sums.ce / r,
            sums.crm / r,
            sums.sc / ctx.images,
            sums.kd / r,
            cfg.mu,
        );
        if let Some(component) = breakdown.is_finite() {
            return Err(Error::Divergence {
                iteration: k,
                component: component.to_string(),
            });
        }
        model.params.sgd_step(cfg.learning_rate);
        log.entries.push(LogEntry {
            iteration: k,
            lambda_head: predicate_lambda(k, true, &cfg.schedule),
            breakdown,
        });
        if cfg.eval_every > 0 && k % cfg.eval_every == 0 && !dataset.test.is_empty() {
            log.evals.push((k, evaluate(&model, &dataset.test, vocab, &DEFAULT_KS)?));
        }
    }
    Ok((model, log))
}

/// Softmax scores of every foreground predicate for every relation pair.
pub fn rank_candidates(
    model: &DualBranchModel,
    instances: &[RelationInstance],
) -> Result<Vec<RankedPrediction>> {
    let mut out = Vec::new();
    for image in group_by_image(instances) {
        let logits = model.predict_image(image)?;
        for (i, inst) in image.iter().enumerate() {
            let probs = softmax_unchecked(logits.row(i));
            for (predicate, &score) in probs.iter().enumerate().skip(1) {
                out.push(RankedPrediction {
                    image_id: inst.image_id,
                    subject_class: inst.subject_class,
                    object_class: inst.object_class,
                    predicate,
                    score,
                });
            }
        }
    }
    Ok(out)
}

pub fn ground_truth_triples(instances: &[RelationInstance]) -> Vec<GroundTruthTriple> {
    instances
        .iter()
        .filter(|r| r.gt_predicate != BACKGROUND)
        .map(|r| GroundTruthTriple {
            image_id: r.image_id,
            subject_class: r.subject_class,
            object_class: r.object_class,
            predicate: r.gt_predicate,
        })
        .collect()
}

/// Evaluates the inference branch on `test`.
pub fn evaluate(
    model: &DualBranchModel,
    test: &[RelationInstance],
    vocab: &PredicateVocabulary,
    ks: &[usize],
) -> Result<EvalReport> {
    if model.dims.num_classes() != vocab.num_classes() {
        return Err(Error::invalid("checkpoint and vocabulary disagree on predicate count"));
    }
    let preds = rank_candidates(model, test)?;
    let gts = ground_truth_triples(test);
    evaluate_predictions(&preds, &gts, ks, vocab.num_classes(), &group_split(vocab))
}
