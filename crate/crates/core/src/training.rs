//! Training loops and the search → fusion → continued-training pipeline.

use serde::{Deserialize, Serialize};

use crate::attention::{
    expand_to_mha, gqa_init_mean_pool, kv_cache_bytes, KvCacheSpec, KvLayout, ModelConfig,
};
use crate::checkpoint::{CheckpointError, TopologyRecord, TopologyVariant};
use crate::error::{Error, Result};
use crate::fusion::{
    fusion_loss_grad, init_identity, lagrange_step, margin, materialize_dha, FusionOperator,
    LagrangeState, MarginSchedule, OmegaMode, TERMINATION_LOSS,
};
use crate::model::{ModelGrads, ToyModel};
use crate::optim::{cosine_lr, Adam, AdamConfig, COSINE_FLOOR, LR_FUSION, LR_MODEL};
use crate::scalar::Scalar;
use crate::search::{
    permute_heads, run_search_phase, Grouping, LayerBudget, ScoreMode, SearchConfig, SearchOutcome,
};
use crate::task::SyntheticLmTask;

/// Plain language-model training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Validation loss is logged every this many steps (and at the end).
    pub eval_every: usize,
    /// Validation sequences per evaluation.
    pub eval_seqs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr: LR_MODEL,
            seed: 0,
            eval_every: 50,
            eval_seqs: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_seqs == 0 {
            return Err(Error::config(
                "batch size, evaluation interval and evaluation size must be positive",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be > 0",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    /// Loss on the step's training batch before the update; absent for the
    /// closing evaluation.
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: ToyModel<T>,
    pub curve: Vec<LossPoint>,
    pub final_val_loss: f64,
}

/// Validation loss on the first `n` validation sequences.
pub fn val_loss<T: Scalar>(
    model: &ToyModel<T>,
    op: Option<&FusionOperator<T>>,
    task: &SyntheticLmTask,
    n: usize,
) -> Result<f64> {
    Ok(model.lm_loss(op, &task.val_batch(n))?.as_f64())
}

fn check_task<T: Scalar>(model: &ToyModel<T>, task: &SyntheticLmTask) -> Result<()> {
    if task.config.vocab_size > model.config.vocab_size {
        return Err(Error::config(format!(
            "task vocabulary {} exceeds model vocabulary {}",
            task.config.vocab_size, model.config.vocab_size
        )));
    }
    if task.config.seq_len > model.config.max_seq {
        return Err(Error::config(format!(
            "task sequences of {} tokens exceed the model's {} positions",
            task.config.seq_len, model.config.max_seq
        )));
    }
    Ok(())
}

fn finite_or_diverged(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            step,
            detail: format!("{what} is {v}"),
        })
    }
}

/// Adam + cosine training of every model parameter on the task, whatever
/// the model's topology.
pub fn train_model<T: Scalar>(
    mut model: ToyModel<T>,
    task: &SyntheticLmTask,
    tc: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    tc.validate()?;
    model.validate()?;
    check_task(&model, task)?;
    let mut opt = Adam::new(model.matrices(), AdamConfig::default());
    let mut curve = Vec::new();
    for step in 0..tc.steps {
        let batch = task.train_batch(tc.seed, step, tc.batch_size);
        let (loss, grads) = model.loss_and_grads(None, &batch)?;
        let loss = loss.as_f64();
        finite_or_diverged(step, "training loss", loss)?;
        if step % tc.eval_every == 0 {
            curve.push(LossPoint {
                step,
                train_loss: Some(loss),
                val_loss: Some(val_loss(&model, None, task, tc.eval_seqs)?),
            });
        }
        let lr = cosine_lr(tc.lr, step, tc.steps, COSINE_FLOOR);
        opt.step(model.matrices_mut(), grads.matrices(), lr)?;
    }
    let final_val_loss = val_loss(&model, None, task, tc.eval_seqs)?;
    finite_or_diverged(tc.steps, "validation loss", final_val_loss)?;
    curve.push(LossPoint {
        step: tc.steps,
        train_loss: None,
        val_loss: Some(final_val_loss),
    });
    Ok(TrainOutcome {
        model,
        curve,
        final_val_loss,
    })
}

/// Trains a freshly initialized MHA model; its final validation loss is the
/// reference every later phase is compared against.
pub fn train_mha_baseline<T: Scalar>(
    task: &SyntheticLmTask,
    config: ModelConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    tc.validate()?;
    let model = ToyModel::init(config, tc.seed)?;
    train_model(model, task, tc)
}

/// An MHA model whose key and value heads are exact duplicates within
/// contiguous blocks of `H / n_groups` heads: a grouped model is trained and
/// then expanded back to one key/value head per query head.
pub fn train_planted_mha<T: Scalar>(
    task: &SyntheticLmTask,
    config: ModelConfig,
    n_groups: usize,
    tc: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let mut model = ToyModel::<T>::init(config, tc.seed)?;
    let (attn, topo) = gqa_init_mean_pool(&model.attn, n_groups)?;
    model.attn = attn;
    model.topology = topo;
    let mut out = train_model(model, task, tc)?;
    let attn = expand_to_mha(&out.model.attn, &out.model.topology)?;
    out.model.attn = attn;
    out.model.topology =
        crate::attention::DhaTopology::identity(config.n_layers, config.n_query_heads);
    Ok(out)
}

/// Continued pre-training of a (typically materialized) model.
pub fn run_continued_pretraining<T: Scalar>(
    model: ToyModel<T>,
    task: &SyntheticLmTask,
    tc: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_model(model, task, tc)
}

/// Settings of the constrained fusion phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionSettings {
    pub max_steps: usize,
    pub terminate_loss: f64,
    pub margin_base: f64,
    pub warmup_steps: usize,
    pub lr_model: f64,
    pub lr_fusion: f64,
    pub lr_lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            max_steps: 1000,
            terminate_loss: TERMINATION_LOSS,
            margin_base: 0.999,
            warmup_steps: 200,
            lr_model: LR_MODEL,
            lr_fusion: LR_FUSION,
            lr_lambda: LR_FUSION,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl FusionSettings {
    pub fn validate(&self) -> Result<()> {
        MarginSchedule::new(self.margin_base, self.warmup_steps)?;
        LagrangeState::new(self.lr_lambda)?;
        if !(self.terminate_loss > 0.0) {
            return Err(Error::config("termination loss must be > 0"));
        }
        for (name, lr) in [("lr_model", self.lr_model), ("lr_fusion", self.lr_fusion)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("{name} {lr} must be > 0")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionTracePoint {
    pub step: usize,
    pub lm_loss: f64,
    pub fusion_loss: f64,
    pub margin: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStatus {
    Converged,
    /// Hit the step limit above the termination loss; not an error.
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOutcome {
    pub status: FusionStatus,
    /// Optimization steps taken.
    pub steps: usize,
    pub final_lm_loss: f64,
    pub final_fusion_loss: f64,
    pub final_lambda: f64,
    pub trace: Vec<FusionTracePoint>,
}

/// Value and gradients of `lm_loss + λ·max(L_fusion − t, 0)` with the
/// operator attached. Returns `(objective, lm_loss, fusion_loss, grads)`;
/// `grads.omega` holds the full coefficient gradient.
pub fn fusion_objective<T: Scalar>(
    model: &ToyModel<T>,
    op: &FusionOperator<T>,
    batch: &[Vec<usize>],
    lambda: f64,
    target: f64,
) -> Result<(T, T, T, ModelGrads<T>)> {
    let (lm, mut grads) = model.loss_and_grads(Some(op), batch)?;
    let (lf, g_fusion) = fusion_loss_grad(op);
    let violation = lf - T::lit(target);
    let mut total = lm;
    if violation > T::zero() && lambda > 0.0 {
        let lam = T::lit(lambda);
        total += lam * violation;
        let og = grads.omega.as_mut().expect("operator attached");
        for ((gk, gv), (fk, fv)) in og.layers.iter_mut().zip(&g_fusion.layers) {
            for (g, f) in gk.iter_mut().zip(fk).chain(gv.iter_mut().zip(fv)) {
                g.axpy(lam, f);
            }
        }
    }
    Ok((total, lm, lf, grads))
}

/// Alternating descent on (Θ, ω) and ascent on λ.
///
/// Each step evaluates the objective on a training batch and records
/// `(step, lm_loss, fusion_loss, t, λ)`; if the fusion loss is already below
/// the termination loss the phase stops before updating, so step 0 of the
/// trace is the unmodified model. Otherwise one Adam step is taken on the
/// model and the coefficients, then λ takes one projected ascent step.
pub fn run_fusion_phase<T: Scalar>(
    model: &mut ToyModel<T>,
    op: &mut FusionOperator<T>,
    task: &SyntheticLmTask,
    settings: &FusionSettings,
) -> Result<FusionOutcome> {
    settings.validate()?;
    check_task(model, task)?;
    let sched = MarginSchedule::new(settings.margin_base, settings.warmup_steps)?;
    let mut lag = LagrangeState::new(settings.lr_lambda)?;
    let mut opt_model = Adam::new(model.matrices(), AdamConfig::default());
    let mut opt_omega = Adam::new(op.matrices(), AdamConfig::default());
    let mut trace = Vec::new();
    let mut status = FusionStatus::MaxSteps;
    let mut steps = settings.max_steps;
    for step in 0..=settings.max_steps {
        let batch = task.train_batch(settings.seed, step, settings.batch_size);
        let t = margin(&sched.at(step));
        let (_, lm, lf, grads) = fusion_objective(model, op, &batch, lag.lambda, t)?;
        let (lm, lf) = (lm.as_f64(), lf.as_f64());
        finite_or_diverged(step, "fusion-phase lm loss", lm)?;
        trace.push(FusionTracePoint {
            step,
            lm_loss: lm,
            fusion_loss: lf,
            margin: t,
            lambda: lag.lambda,
        });
        if lf < settings.terminate_loss {
            status = FusionStatus::Converged;
            steps = step;
            break;
        }
        if step == settings.max_steps {
            break;
        }
        let lr_m = cosine_lr(settings.lr_model, step, settings.max_steps, COSINE_FLOOR);
        let lr_f = cosine_lr(settings.lr_fusion, step, settings.max_steps, COSINE_FLOOR);
        opt_model.step(model.matrices_mut(), grads.matrices(), lr_m)?;
        let og = grads.omega.as_ref().expect("operator attached");
        opt_omega.step(op.matrices_mut(), og.matrices(), lr_f)?;
        lag = lagrange_step(&lag, lf, t);
    }
    let last = *trace.last().expect("at least one step");
    Ok(FusionOutcome {
        status,
        steps,
        final_lm_loss: last.lm_loss,
        final_fusion_loss: last.fusion_loss,
        final_lambda: last.lambda,
        trace,
    })
}

/// Replaces the key/value heads of an MHA model by the heads the operator
/// fuses (group-averaged coefficients), giving a DHA model.
pub fn materialize_model<T: Scalar>(
    model: &ToyModel<T>,
    op: &FusionOperator<T>,
) -> Result<ToyModel<T>> {
    if !model.topology.is_identity() {
        return Err(Error::topology("materialization starts from an MHA model"));
    }
    let (attn, topology) = materialize_dha(&model.attn, op)?;
    let out = ToyModel {
        attn,
        topology,
        ..model.clone()
    };
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    Dha,
    Gqa,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dha" => Ok(Self::Dha),
            "gqa" => Ok(Self::Gqa),
            other => Err(Error::config(format!(
                "unknown baseline {other:?} (expected dha or gqa)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Total key + value heads over all layers.
    pub kv_budget_total: usize,
    pub search_steps: usize,
    pub score_mode: ScoreMode,
    /// Defaults to `[H/8, H/4, H/2]`.
    pub alloc_set: Option<Vec<usize>>,
    /// Defaults to the smallest allocation.
    pub min_alloc: Option<usize>,
    pub omega_mode: OmegaMode,
    pub fusion: FusionSettings,
    pub ct: TrainConfig,
    pub baseline: Baseline,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(kv_budget_total: usize) -> Self {
        Self {
            kv_budget_total,
            search_steps: 240,
            score_mode: ScoreMode::Cka,
            alloc_set: None,
            min_alloc: None,
            omega_mode: OmegaMode::PerChannel,
            fusion: FusionSettings::default(),
            ct: TrainConfig::default(),
            baseline: Baseline::Dha,
            seed: 0,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let full = 2 * config.n_layers * config.n_query_heads;
        if self.kv_budget_total == 0 || self.kv_budget_total > full {
            return Err(Error::config(format!(
                "KV budget {} must be in 1..={full}",
                self.kv_budget_total
            )));
        }
        if self.kv_budget_total % 2 != 0 {
            return Err(Error::config(format!(
                "KV budget {} must split evenly between keys and values",
                self.kv_budget_total
            )));
        }
        if self.search_steps == 0 {
            return Err(Error::config("search needs at least one step"));
        }
        self.fusion.validate()?;
        self.ct.validate()?;
        if self.baseline == Baseline::Gqa {
            gqa_groups(config, self.kv_budget_total)?;
        }
        Ok(())
    }

    fn search_config(&self, config: &ModelConfig) -> SearchConfig {
        let alloc_set = self
            .alloc_set
            .clone()
            .unwrap_or_else(|| SearchConfig::default_alloc_set(config.n_query_heads));
        let min_alloc = self
            .min_alloc
            .unwrap_or_else(|| alloc_set.iter().copied().min().unwrap_or(1));
        SearchConfig {
            steps: self.search_steps,
            score_mode: self.score_mode,
            seed: self.seed,
            kv_budget_total: self.kv_budget_total,
            alloc_set,
            min_alloc,
        }
    }
}

/// Groups per layer of the GQA model with the same total head budget.
pub fn gqa_groups(config: &ModelConfig, kv_budget_total: usize) -> Result<usize> {
    let per_layer = 2 * config.n_layers;
    if kv_budget_total % per_layer != 0 {
        return Err(Error::config(format!(
            "KV budget {kv_budget_total} is not a whole number of heads per layer for GQA"
        )));
    }
    let g = kv_budget_total / per_layer;
    if g == 0 || config.n_query_heads % g != 0 {
        return Err(Error::config(format!(
            "GQA with {g} groups does not divide {} query heads",
            config.n_query_heads
        )));
    }
    Ok(g)
}

/// KV cache accounting used in reports: one sequence of `max_seq` tokens at
/// two bytes per element.
pub fn report_kv_spec(config: &ModelConfig) -> KvCacheSpec {
    KvCacheSpec {
        batch: 1,
        seq_len: config.max_seq as u64,
        bytes_per_element: 2,
    }
}

pub fn model_kv_bytes<T: Scalar>(model: &ToyModel<T>) -> u64 {
    kv_cache_bytes(
        &model.config,
        KvLayout::Dha(&model.topology),
        &report_kv_spec(&model.config),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub phase: String,
    pub steps: usize,
    pub lm_loss: f64,
    pub fusion_loss: Option<f64>,
    pub kv_bytes: u64,
    pub params: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput<T> {
    pub model: ToyModel<T>,
    pub search: Option<SearchOutcome<T>>,
    /// Head permutation applied per layer (new position → old head).
    pub permutations: Vec<Vec<usize>>,
    pub fusion: Option<FusionOutcome>,
    /// Model right after materialization (or pooling), before training.
    pub initial: ToyModel<T>,
    pub ct: TrainOutcome<T>,
    pub metrics: Vec<PhaseMetrics>,
    pub kv_bytes_before: u64,
    pub kv_bytes_after: u64,
}

fn metrics<T: Scalar>(
    phase: &str,
    steps: usize,
    model: &ToyModel<T>,
    op: Option<&FusionOperator<T>>,
    task: &SyntheticLmTask,
    eval_seqs: usize,
) -> Result<PhaseMetrics> {
    Ok(PhaseMetrics {
        phase: phase.into(),
        steps,
        lm_loss: val_loss(model, op, task, eval_seqs)?,
        fusion_loss: op.map(|o| crate::fusion::fusion_loss(o).as_f64()),
        kv_bytes: model_kv_bytes(model),
        params: model.n_params() + op.map_or(0, |o| o.matrices().map(|m| m.data().len()).sum()),
    })
}

fn search_batches(task: &SyntheticLmTask, cfg: &PipelineConfig) -> Vec<Vec<Vec<usize>>> {
    let seed = cfg.seed ^ 0x5EA2_C400;
    (0..cfg.search_steps)
        .map(|s| task.train_batch(seed, s, cfg.fusion.batch_size))
        .collect()
}

/// Search, permute, fuse, materialize and continue training; or, with the
/// GQA baseline, mean-pool and continue training. Errors carry the stage.
pub fn transform_pipeline<T: Scalar>(
    mha: &ToyModel<T>,
    task: &SyntheticLmTask,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput<T>> {
    let stage = |s: &'static str| move |e: Error| e.in_stage(s);
    mha.validate().map_err(stage("load"))?;
    let found = TopologyRecord::classify(&mha.topology).variant;
    if found != TopologyVariant::Mha {
        return Err(Error::from(CheckpointError::VariantMismatch {
            expected: TopologyVariant::Mha,
            found,
        })
        .in_stage("load"));
    }
    cfg.validate(&mha.config).map_err(stage("config"))?;
    check_task(mha, task).map_err(stage("config"))?;
    let eval = cfg.ct.eval_seqs;
    let kv_before = model_kv_bytes(mha);
    let mut all = vec![metrics("mha", 0, mha, None, task, eval)?];

    let (initial, search, permutations, fusion) = match cfg.baseline {
        Baseline::Gqa => {
            let g = gqa_groups(&mha.config, cfg.kv_budget_total).map_err(stage("pool"))?;
            let (attn, topology) = gqa_init_mean_pool(&mha.attn, g).map_err(stage("pool"))?;
            let pooled = ToyModel {
                attn,
                topology,
                ..mha.clone()
            };
            all.push(metrics("pool", 0, &pooled, None, task, eval)?);
            (pooled, None, Vec::new(), None)
        }
        Baseline::Dha => {
            let search_cfg = cfg.search_config(&mha.config);
            let search = run_search_phase(mha, &search_batches(task, cfg), &search_cfg)
                .map_err(stage("search"))?;

            let perms: Vec<Vec<usize>> = search
                .key_groupings
                .iter()
                .map(Grouping::permutation)
                .collect();
            let value_groupings: Vec<Grouping> = search
                .value_groupings
                .iter()
                .zip(&perms)
                .map(|(g, p)| g.relabel(p))
                .collect();
            let key_groupings: Vec<Grouping> = search
                .key_groupings
                .iter()
                .zip(&perms)
                .map(|(g, p)| g.relabel(p))
                .collect();
            let mut model = mha.clone();
            model.attn =
                permute_heads(&mha.attn, &search.key_groupings).map_err(stage("permute"))?;

            let mut op = init_identity(
                &model.attn,
                &key_groupings,
                &value_groupings,
                cfg.omega_mode,
            )
            .map_err(stage("fusion"))?;
            let fusion = run_fusion_phase(&mut model, &mut op, task, &cfg.fusion)
                .map_err(stage("fusion"))?;
            all.push(metrics(
                "fusion",
                fusion.steps,
                &model,
                Some(&op),
                task,
                eval,
            )?);

            op.force_group_means();
            let dha = materialize_model(&model, &op).map_err(stage("materialize"))?;
            check_budget(&dha, cfg.kv_budget_total).map_err(stage("materialize"))?;
            all.push(metrics("materialize", 0, &dha, None, task, eval)?);
            (dha, Some(search), perms, Some(fusion))
        }
    };

    let ct = run_continued_pretraining(initial.clone(), task, &cfg.ct).map_err(stage("ct"))?;
    all.push(metrics("ct", cfg.ct.steps, &ct.model, None, task, eval)?);
    let kv_after = model_kv_bytes(&ct.model);
    Ok(PipelineOutput {
        model: ct.model.clone(),
        search,
        permutations,
        fusion,
        initial,
        ct,
        metrics: all,
        kv_bytes_before: kv_before,
        kv_bytes_after: kv_after,
    })
}

fn check_budget<T: Scalar>(model: &ToyModel<T>, total: usize) -> Result<()> {
    let got = model.topology.total_key_heads() + model.topology.total_value_heads();
    if got != total {
        return Err(Error::config(format!(
            "materialized model has {got} key/value heads, budget is {total}"
        )));
    }
    Ok(())
}

/// Head counts of a model's topology as a budget record.
pub fn budget_of<T: Scalar>(model: &ToyModel<T>) -> LayerBudget {
    LayerBudget {
        key_heads: model.topology.layers.iter().map(|t| t.key_heads).collect(),
        value_heads: model
            .topology
            .layers
            .iter()
            .map(|t| t.value_heads)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparePoint {
    pub step: usize,
    pub dha_loss: f64,
    pub gqa_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison<T> {
    pub dha: PipelineOutput<T>,
    pub gqa: PipelineOutput<T>,
    pub points: Vec<ComparePoint>,
}

impl<T> Comparison<T> {
    /// Fraction of logged checkpoints where the DHA arm is strictly lower.
    pub fn dha_win_rate(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let wins = self
            .points
            .iter()
            .filter(|p| p.dha_loss < p.gqa_loss)
            .count();
        wins as f64 / self.points.len() as f64
    }
}

/// Runs the DHA and GQA arms under one budget and seed and pairs their
/// continued-training validation curves.
pub fn compare_inits<T: Scalar>(
    mha: &ToyModel<T>,
    task: &SyntheticLmTask,
    cfg: &PipelineConfig,
) -> Result<Comparison<T>> {
    gqa_groups(&mha.config, cfg.kv_budget_total)?;
    let dha = transform_pipeline(
        mha,
        task,
        &PipelineConfig {
            baseline: Baseline::Dha,
            ..cfg.clone()
        },
    )?;
    let gqa = transform_pipeline(
        mha,
        task,
        &PipelineConfig {
            baseline: Baseline::Gqa,
            ..cfg.clone()
        },
    )?;
    let da = budget_of(&dha.model).total();
    let ga = budget_of(&gqa.model).total();
    if da != ga {
        return Err(Error::config(format!(
            "arms have different head budgets: DHA {da}, GQA {ga}"
        )));
    }
    let points = dha
        .ct
        .curve
        .iter()
        .zip(&gqa.ct.curve)
        .filter_map(|(d, g)| {
            Some(ComparePoint {
                step: d.step,
                dha_loss: d.val_loss?,
                gqa_loss: g.val_loss?,
            })
        })
        .collect();
    Ok(Comparison { dha, gqa, points })
}
