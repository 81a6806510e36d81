//! Alternating optimization with selective parameter routing.
//!
//! Each step minimizes the combined classification/SSL objective (phase 1)
//! and then the adversarial alignment objective (phase 2). Routing follows
//! the formulation: phase-1 source/target classification and SSL terms
//! update the encoder and class head; the joint classification terms update
//! the joint head only (their features are detached in the tape); phase 2
//! updates the encoder only. A group is updated in a phase only when at
//! least one loss term that reaches it has nonzero effective weight, so
//! zero-weight phases leave parameters bitwise unchanged.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Bindings;
use crate::data::{batches, dropout_masks_for_step, Batch, Dataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::losses::{
    build_adv, build_classifier, build_phase1, joint_label_matrix,
    phase1_inputs, weight_scalars, AdvTape, Domain, LossTerms, LossWeights, Phase1Tape,
};
use crate::networks::{argmax, pseudo_labels, Arch, ParamGroup, ParamSet};
use crate::opt::{GroupState, OptKind, OptimizerSpec};
use crate::tensor::Tensor;
use crate::theory::h_divergence_proxy;

/// Curriculum phase boundaries as fractions of the total iteration budget.
/// `(0, 0)` disables the curriculum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub a: f64,
    pub b: f64,
}

impl Schedule {
    pub fn disabled() -> Self {
        Schedule { a: 0.0, b: 0.0 }
    }

    /// Default geometry: phase boundaries at 1/15 and 2/15 of the budget.
    pub fn standard() -> Self {
        Schedule {
            a: 1.0 / 15.0,
            b: 2.0 / 15.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let disabled = self.a == 0.0 && self.b == 0.0;
        let ordered = 0.0 < self.a && self.a < self.b && self.b < 1.0;
        if disabled || ordered {
            Ok(())
        } else {
            Err(Error::invalid(
                "schedule",
                "need 0 < a < b < 1, or a = b = 0 to disable",
            ))
        }
    }
}

/// Active loss weights at one iteration. Before fraction `a`, only the
/// source-dependent terms run (classification losses and source alignment);
/// in `[a, b)` the SSL regularizers come back; from `b` on, everything runs
/// at its configured value.
pub fn curriculum_gate(
    iteration: u64,
    total_iters: u64,
    schedule: &Schedule,
    configured: &LossWeights,
) -> Result<LossWeights> {
    schedule.validate()?;
    if total_iters == 0 || iteration >= total_iters {
        return Err(Error::invalid(
            "curriculum_gate",
            format!("iteration {iteration} outside budget {total_iters}"),
        ));
    }
    let frac = iteration as f64 / total_iters as f64;
    let mut w = configured.clone();
    if frac < schedule.a {
        w.lambda_t = 0.0;
        w.lambda_svat = 0.0;
        w.lambda_tvat = 0.0;
        w.lambda_jtc = 0.0;
        w.lambda_jta = 0.0;
    } else if frac < schedule.b {
        w.lambda_jtc = 0.0;
        w.lambda_jta = 0.0;
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurriculumMode {
    Auto,
    On,
    Off,
}

/// Everything the training loop needs. `weights.eps_x` must already be
/// resolved to a concrete radius.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub arch: Arch,
    pub optimizer: OptimizerSpec,
    pub weights: LossWeights,
    pub total_iters: u64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub curriculum: CurriculumMode,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Keep one optimizer state per group across both phases (default), or
    /// give the encoder a separate state for the adversarial phase.
    pub separate_adv_optimizer: bool,
    /// Estimate the H-divergence proxy at every metrics row (costs one small
    /// discriminator training run per row).
    pub h_div_in_metrics: bool,
    pub seed: u64,
}

impl TrainerConfig {
    pub fn new(arch: Arch, weights: LossWeights, total_iters: u64, seed: u64) -> Self {
        TrainerConfig {
            arch,
            optimizer: OptimizerSpec::adam(),
            weights,
            total_iters,
            batch_size: 64,
            schedule: Schedule::standard(),
            curriculum: CurriculumMode::Auto,
            eval_interval: 500,
            checkpoint_interval: 0,
            checkpoint_dir: None,
            separate_adv_optimizer: false,
            h_div_in_metrics: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.optimizer.validate()?;
        self.weights.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("trainer", "batch_size must be >= 1"));
        }
        Ok(())
    }

    /// SGD tasks decay the learning rate at 2/3 of the budget when no
    /// explicit decay step is configured.
    pub fn resolved_optimizer(&self) -> OptimizerSpec {
        let mut spec = self.optimizer.clone();
        if spec.kind == OptKind::SgdMomentum && spec.lr_decay_step.is_none() {
            spec.lr_decay_step = Some(self.total_iters * 2 / 3);
        }
        spec
    }
}

/// Mutable training state: parameters, per-group optimizer state, cached
/// tapes, and the iteration counter.
pub struct TrainState {
    pub params: ParamSet,
    pub weights: LossWeights,
    pub iteration: u64,
    pub total_iters: u64,
    pub schedule: Schedule,
    pub curriculum_on: bool,
    opt_spec: OptimizerSpec,
    opt_enc: GroupState,
    opt_hc: GroupState,
    opt_hj: GroupState,
    opt_enc_adv: Option<GroupState>,
    phase1: Phase1Tape,
    adv: AdvTape,
    batch_size: usize,
    seed: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainerConfig, params: ParamSet, curriculum_on: bool) -> Result<Self> {
        cfg.validate()?;
        if params.arch != cfg.arch {
            return Err(Error::invalid("trainer", "params arch differs from config arch"));
        }
        let opt_enc = GroupState::new(&params.encoder);
        let opt_hc = GroupState::new(&params.class_head);
        let opt_hj = GroupState::new(&params.joint_head);
        let opt_enc_adv = cfg
            .separate_adv_optimizer
            .then(|| GroupState::new(&params.encoder));
        Ok(TrainState {
            phase1: build_phase1(&cfg.arch, cfg.batch_size)?,
            adv: build_adv(&cfg.arch, cfg.batch_size)?,
            params,
            weights: cfg.weights.clone(),
            iteration: 0,
            total_iters: cfg.total_iters,
            schedule: cfg.schedule,
            curriculum_on,
            opt_spec: cfg.resolved_optimizer(),
            opt_enc,
            opt_hc,
            opt_hj,
            opt_enc_adv,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
        })
    }

    /// Weights in force at the current iteration.
    pub fn effective_weights(&self) -> Result<LossWeights> {
        if self.curriculum_on {
            curriculum_gate(self.iteration, self.total_iters, &self.schedule, &self.weights)
        } else {
            Ok(self.weights.clone())
        }
    }

    fn group_grads<'g>(
        &self,
        grads: &'g std::collections::BTreeMap<String, Tensor>,
        group: ParamGroup,
    ) -> Vec<&'g Tensor> {
        ParamSet::group_names(&self.params.arch, group)
            .iter()
            .map(|name| &grads[name])
            .collect()
    }

    /// One alternating step: phase 1 (classification + SSL), then phase 2
    /// (adversarial alignment, encoder only). Exactly one optimizer update
    /// per group per phase in which it participates.
    pub fn step(&mut self, src: &Batch, tgt: &Batch) -> Result<LossTerms> {
        let eff = self.effective_weights()?;
        let y_s = src.y.as_ref().ok_or_else(|| Error::MissingLabels {
            context: "trainer step".into(),
            name: "source batch".into(),
        })?;
        if src.x.rows() != self.batch_size || tgt.x.rows() != self.batch_size {
            return Err(Error::shape(
                "trainer step",
                &[self.batch_size],
                &[src.x.rows(), tgt.x.rows()],
            ));
        }
        let step_seed = derive_seed(self.seed, &format!("step{}", self.iteration));
        let arch = self.params.arch.clone();

        // Phase 1.
        let inputs = phase1_inputs(&self.params, &src.x, y_s, &tgt.x, &eff, step_seed)?;
        let scalars = weight_scalars(&eff);
        let masks_s = step_masks(&arch, "mask_s", self.batch_size, step_seed, "drop_s");
        let masks_t = step_masks(&arch, "mask_t", self.batch_size, step_seed, "drop_t");
        let mut terms;
        {
            let param_bindings = self.params.bindings();
            let mut bind = Bindings::new();
            bind.bind("x_s", &src.x);
            bind.bind("y_s", y_s);
            bind.bind("x_t", &tgt.x);
            bind.bind("yj_s", &inputs.yj_s);
            bind.bind("yj_t", &inputs.yj_t);
            bind.bind("delta_s", &inputs.delta_s);
            bind.bind("delta_t", &inputs.delta_t);
            for (name, t) in &scalars {
                bind.bind(name, t);
            }
            for (name, t) in &param_bindings {
                bind.bind(name, t);
            }
            for (name, t) in masks_s.iter().chain(&masks_t) {
                bind.bind(name, t);
            }
            let exec = self.phase1.tape.forward(&bind)?;
            let get = |name: &str| exec.value(self.phase1.tape.output_node(name).unwrap()).item();
            terms = LossTerms {
                l: get("l"),
                l_s: get("l_s"),
                l_t: get("l_t"),
                l_sc: get("l_sc"),
                l_svat: get("l_svat"),
                l_jsc: get("l_jsc"),
                l_te: get("l_te"),
                l_tvat: get("l_tvat"),
                l_jtc: get("l_jtc"),
                ..Default::default()
            };
            check_finite_terms(&terms)?;
            let root = self.phase1.tape.output_node("l").unwrap();
            let grads = self.phase1.tape.backward(&exec, root)?;

            let enc_class_active = eff.lambda_sc > 0.0
                || eff.lambda_svat > 0.0
                || eff.lambda_t * eff.lambda_te > 0.0
                || eff.lambda_t * eff.lambda_tvat > 0.0;
            let joint_active = eff.lambda_jsc > 0.0 || eff.lambda_t * eff.lambda_jtc > 0.0;

            if enc_class_active {
                let g = self.group_grads(&grads, ParamGroup::Encoder);
                self.opt_enc
                    .apply(&self.opt_spec, self.iteration, &mut self.params.encoder, &g)?;
                let g = self.group_grads(&grads, ParamGroup::ClassHead);
                self.opt_hc
                    .apply(&self.opt_spec, self.iteration, &mut self.params.class_head, &g)?;
            }
            if joint_active {
                let g = self.group_grads(&grads, ParamGroup::JointHead);
                self.opt_hj
                    .apply(&self.opt_spec, self.iteration, &mut self.params.joint_head, &g)?;
            }
        }

        // Phase 2: encoder-only update of the alignment objective.
        if eff.lambda_jsa > 0.0 || eff.lambda_jta > 0.0 {
            // Pseudo-labels refreshed from the post-phase-1 class predictor.
            let p_t = self.params.class_predict(&self.params.encode(&tgt.x)?)?;
            let yhat = pseudo_labels(&p_t);
            let yj_t_flip = joint_label_matrix(&yhat, Domain::Target, true)?;
            let yj_s_flip = joint_label_matrix(y_s, Domain::Source, true)?;
            let param_bindings = self.params.bindings();
            let mut bind = Bindings::new();
            bind.bind("x_s", &src.x);
            bind.bind("x_t", &tgt.x);
            bind.bind("yj_s_flip", &yj_s_flip);
            bind.bind("yj_t_flip", &yj_t_flip);
            for (name, t) in &scalars {
                bind.bind(name, t);
            }
            for (name, t) in &param_bindings {
                bind.bind(name, t);
            }
            for (name, t) in masks_s.iter().chain(&masks_t) {
                bind.bind(name, t);
            }
            let exec = self.adv.tape.forward(&bind)?;
            let get = |name: &str| exec.value(self.adv.tape.output_node(name).unwrap()).item();
            terms.l_adv = get("l_adv");
            terms.l_jsa = get("l_jsa");
            terms.l_jta = get("l_jta");
            check_finite_terms(&terms)?;
            let root = self.adv.tape.output_node("l_adv").unwrap();
            let grads = self.adv.tape.backward(&exec, root)?;
            let g = self.group_grads(&grads, ParamGroup::Encoder);
            let state = self.opt_enc_adv.as_mut().unwrap_or(&mut self.opt_enc);
            state.apply(&self.opt_spec, self.iteration, &mut self.params.encoder, &g)?;
        }

        self.iteration += 1;
        Ok(terms)
    }
}

fn step_masks(
    arch: &Arch,
    prefix: &str,
    batch: usize,
    step_seed: u64,
    tag: &str,
) -> Vec<(String, Tensor)> {
    if arch.dropout == 0.0 {
        return Vec::new();
    }
    dropout_masks_for_step(
        &arch.enc_widths,
        batch,
        arch.dropout,
        derive_seed(step_seed, tag),
    )
    .into_iter()
    .enumerate()
    .map(|(i, m)| (format!("{prefix}{i}"), m))
    .collect()
}

fn check_finite_terms(terms: &LossTerms) -> Result<()> {
    for (name, v) in [
        ("l", terms.l),
        ("l_sc", terms.l_sc),
        ("l_svat", terms.l_svat),
        ("l_jsc", terms.l_jsc),
        ("l_te", terms.l_te),
        ("l_tvat", terms.l_tvat),
        ("l_jtc", terms.l_jtc),
        ("l_adv", terms.l_adv),
        ("l_jsa", terms.l_jsa),
        ("l_jta", terms.l_jta),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss term {name}"),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalHead {
    ClassPredictor,
    JointPredictor,
}

/// Fraction of argmax-correct predictions. The joint predictor's 2K outputs
/// fold to a class by taking the max entry's index mod K.
pub fn evaluate(params: &ParamSet, ds: &Dataset, which: EvalHead) -> Result<f64> {
    let labels = ds.label_indices().ok_or_else(|| Error::MissingLabels {
        context: "evaluate".into(),
        name: ds.name.clone(),
    })?;
    let z = params.encode(&ds.features)?;
    let k = params.arch.k;
    let mut correct = 0usize;
    match which {
        EvalHead::ClassPredictor => {
            let pred = params.class_predict(&z)?;
            for (i, &truth) in labels.iter().enumerate() {
                if argmax(pred.probs.row(i)) == truth {
                    correct += 1;
                }
            }
        }
        EvalHead::JointPredictor => {
            let pred = params.joint_predict(&z)?;
            for (i, &truth) in labels.iter().enumerate() {
                if argmax(pred.probs.row(i)) % k == truth {
                    correct += 1;
                }
            }
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// One metrics-history record, written every eval interval.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub iteration: u64,
    pub terms: LossTerms,
    pub acc_class: f64,
    pub acc_joint: f64,
    pub h_div: f64,
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut out = String::from(
        "iteration,l,l_s,l_t,l_sc,l_svat,l_jsc,l_te,l_tvat,l_jtc,l_adv,l_jsa,l_jta,acc_class,acc_joint,h_div\n",
    );
    for r in rows {
        let t = &r.terms;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            t.l,
            t.l_s,
            t.l_t,
            t.l_sc,
            t.l_svat,
            t.l_jsc,
            t.l_te,
            t.l_tvat,
            t.l_jtc,
            t.l_adv,
            t.l_jsa,
            t.l_jta,
            r.acc_class,
            r.acc_joint,
            r.h_div
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Train a fresh classifier on the source for a short budget and report its
/// target accuracy: the data-driven signal for whether pseudo-labels can be
/// trusted from the start. Falls back to source accuracy when the target
/// carries no labels.
pub fn source_only_probe_accuracy(
    cfg: &TrainerConfig,
    src: &Dataset,
    tgt: &Dataset,
    probe_iters: u64,
) -> Result<f64> {
    let seed = derive_seed(cfg.seed, "probe");
    let mut params = ParamSet::init(cfg.arch.clone(), derive_seed(seed, "init"))?;
    let tape = build_classifier(&cfg.arch, cfg.batch_size)?;
    let mut opt_enc = GroupState::new(&params.encoder);
    let mut opt_hc = GroupState::new(&params.class_head);
    let spec = cfg.resolved_optimizer();
    let mut iter = batches(src, src, cfg.batch_size, derive_seed(seed, "batches"))?;
    for it in 0..probe_iters {
        let (batch, _) = iter.next().unwrap();
        let y = batch.y.as_ref().ok_or_else(|| Error::MissingLabels {
            context: "probe".into(),
            name: src.name.clone(),
        })?;
        let masks = step_masks(&cfg.arch, "mask", cfg.batch_size, derive_seed(seed, &format!("m{it}")), "drop");
        let param_bindings = params.bindings();
        let mut bind = Bindings::new();
        bind.bind("x", &batch.x);
        bind.bind("y", y);
        for (name, t) in &param_bindings {
            bind.bind(name, t);
        }
        for (name, t) in &masks {
            bind.bind(name, t);
        }
        let exec = tape.tape.forward(&bind)?;
        let root = tape.tape.output_node("l").unwrap();
        let grads = tape.tape.backward(&exec, root)?;
        drop(exec);
        let enc_names = ParamSet::group_names(&cfg.arch, ParamGroup::Encoder);
        let g: Vec<&Tensor> = enc_names.iter().map(|n| &grads[n]).collect();
        opt_enc.apply(&spec, it, &mut params.encoder, &g)?;
        let hc_names = ParamSet::group_names(&cfg.arch, ParamGroup::ClassHead);
        let g: Vec<&Tensor> = hc_names.iter().map(|n| &grads[n]).collect();
        opt_hc.apply(&spec, it, &mut params.class_head, &g)?;
    }
    let eval_ds = if tgt.labels.is_some() { tgt } else { src };
    evaluate(&params, eval_ds, EvalHead::ClassPredictor)
}

/// Probe-accuracy threshold below which the curriculum turns on under
/// [`CurriculumMode::Auto`]: 3/K, three times a balanced-chance within a
/// factor accounting for an immature predictor.
pub fn curriculum_trigger_threshold(k: usize) -> f64 {
    3.0 / k as f64
}

pub const PROBE_ITERS: u64 = 200;

/// Full training run. Target labels are used for evaluation only; the
/// batches fed to [`TrainState::step`] carry none. Deterministic given the
/// config and seed.
pub fn run(
    cfg: &TrainerConfig,
    params0: ParamSet,
    src: &Dataset,
    tgt: &Dataset,
) -> Result<(ParamSet, Vec<MetricsRow>)> {
    cfg.validate()?;
    if src.labels.is_none() {
        return Err(Error::MissingLabels {
            context: "trainer run".into(),
            name: src.name.clone(),
        });
    }
    if src.d() != cfg.arch.d_in || tgt.d() != cfg.arch.d_in {
        return Err(Error::shape("trainer run", &[cfg.arch.d_in], &[src.d(), tgt.d()]));
    }
    let curriculum_on = match cfg.curriculum {
        CurriculumMode::On => true,
        CurriculumMode::Off => false,
        CurriculumMode::Auto => {
            if cfg.total_iters == 0 {
                false
            } else {
                let acc = source_only_probe_accuracy(cfg, src, tgt, PROBE_ITERS)?;
                acc < curriculum_trigger_threshold(cfg.arch.k)
            }
        }
    };
    let mut state = TrainState::new(cfg, params0, curriculum_on)?;
    let tgt_unlabeled = tgt.without_labels();
    let mut iter = batches(src, &tgt_unlabeled, cfg.batch_size, derive_seed(cfg.seed, "batches"))?;
    let mut history = Vec::new();
    for it in 0..cfg.total_iters {
        let (src_b, tgt_b) = iter.next().unwrap();
        let terms = state.step(&src_b, &tgt_b)?;
        let done = it + 1;
        let at_eval = cfg.eval_interval > 0 && done % cfg.eval_interval == 0;
        if at_eval || done == cfg.total_iters {
            history.push(metrics_row(cfg, &state.params, src, tgt, done, terms)?);
        }
        if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                state.params.save(&dir.join(format!("params-{done}.bin")))?;
            }
        }
    }
    Ok((state.params, history))
}

fn metrics_row(
    cfg: &TrainerConfig,
    params: &ParamSet,
    src: &Dataset,
    tgt: &Dataset,
    iteration: u64,
    terms: LossTerms,
) -> Result<MetricsRow> {
    let (acc_class, acc_joint) = if tgt.labels.is_some() {
        (
            evaluate(params, tgt, EvalHead::ClassPredictor)?,
            evaluate(params, tgt, EvalHead::JointPredictor)?,
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    let h_div = if cfg.h_div_in_metrics {
        let z_s = params.encode(&src.features)?;
        let z_t = params.encode(&tgt.features)?;
        h_divergence_proxy(&z_s, &z_t, derive_seed(cfg.seed, &format!("hdiv{iteration}")))?
    } else {
        f64::NAN
    };
    Ok(MetricsRow {
        iteration,
        terms,
        acc_class,
        acc_joint,
        h_div,
    })
}
