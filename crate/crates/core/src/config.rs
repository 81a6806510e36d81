//! Experiment configuration: strict JSON in (unknown keys rejected, errors
//! carry a path into the document), validated config out. An empty object
//! parses to the default toy task: two-moons with a 35-degree target
//! rotation, 6000 iterations, and the hardest digit-transfer column's loss
//! weights.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{
    apply_shift, gen_blobs, gen_moons, load_csv, median_nn_distance, standardize, Dataset,
    DomainTag, ShiftSpec,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::fnv1a64;
use crate::losses::LossWeights;
use crate::networks::Arch;
use crate::opt::{OptKind, OptimizerSpec};
use crate::tensor::Tensor;
use crate::trainer::{CurriculumMode, Schedule, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub optimizer: OptimizerConfig,
    pub loss_weights: WeightsConfig,
    pub total_iters: u64,
    pub batch_size: usize,
    pub curriculum: CurriculumConfig,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub mode: Mode,
    pub separate_adv_optimizer: bool,
    pub h_div_in_metrics: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            arch: ArchConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss_weights: WeightsConfig::default(),
            total_iters: 6000,
            batch_size: 64,
            curriculum: CurriculumConfig::default(),
            eval_interval: 500,
            checkpoint_interval: 0,
            seed: 7,
            mode: Mode::Full,
            separate_adv_optimizer: false,
            h_div_in_metrics: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Full,
    SourceOnly,
    TargetOnly,
    Ablation,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Full => "full",
            Mode::SourceOnly => "source-only",
            Mode::TargetOnly => "target-only",
            Mode::Ablation => "ablation",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Moons {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_noise")]
        noise_std: f64,
        #[serde(default)]
        shift: ShiftConfig,
        #[serde(default)]
        standardize: bool,
    },
    Blobs {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_blob_k")]
        k: usize,
        #[serde(default = "default_blob_d")]
        d: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        shift: ShiftConfig,
        #[serde(default)]
        standardize: bool,
    },
    Csv {
        source: PathBuf,
        target: PathBuf,
        k: usize,
        #[serde(default = "default_true")]
        target_labeled: bool,
        #[serde(default)]
        standardize: bool,
    },
}

fn default_n() -> usize {
    1000
}
fn default_noise() -> f64 {
    0.1
}
fn default_blob_k() -> usize {
    3
}
fn default_blob_d() -> usize {
    2
}
fn default_separation() -> f64 {
    4.0
}
fn default_true() -> bool {
    true
}

impl Default for DataConfig {
    /// The default toy adaptation task: two moons, rotated 35 degrees.
    fn default() -> Self {
        DataConfig::Moons {
            n: 1000,
            noise_std: 0.1,
            shift: ShiftConfig {
                rotation_radians: 35.0 * std::f64::consts::PI / 180.0,
                ..ShiftConfig::default()
            },
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    pub rotation_radians: f64,
    pub translation: Vec<f64>,
    pub scale: Vec<f64>,
    pub label_permutation: Option<Vec<usize>>,
    pub feature_noise_std: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            rotation_radians: 0.0,
            translation: Vec::new(),
            scale: Vec::new(),
            label_permutation: None,
            feature_noise_std: 0.0,
        }
    }
}

impl ShiftConfig {
    pub fn to_spec(&self) -> ShiftSpec {
        ShiftSpec {
            rotation_radians: self.rotation_radians,
            translation: self.translation.clone(),
            scale: self.scale.clone(),
            label_permutation: self.label_permutation.clone(),
            feature_noise_std: self.feature_noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub enc_widths: Vec<usize>,
    pub class_head_widths: Vec<usize>,
    pub joint_head_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub activate_last: bool,
    pub dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            enc_widths: vec![64, 64],
            class_head_widths: Vec::new(),
            joint_head_widths: Vec::new(),
            leaky_slope: 0.1,
            activate_last: true,
            dropout: 0.0,
        }
    }
}

impl ArchConfig {
    pub fn to_arch(&self, d_in: usize, k: usize) -> Result<Arch> {
        let arch = Arch {
            d_in,
            enc_widths: self.enc_widths.clone(),
            k,
            class_head_widths: self.class_head_widths.clone(),
            joint_head_widths: self.joint_head_widths.clone(),
            leaky_slope: self.leaky_slope,
            activate_last: self.activate_last,
            dropout: self.dropout,
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKindConfig {
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptKindConfig,
    /// Defaults per kind: 0.001 for Adam, 0.1 for SGD.
    pub lr: Option<f64>,
    /// SGD decays once at 2/3 of the budget when unset.
    pub lr_decay_step: Option<u64>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptKindConfig::Adam,
            lr: None,
            lr_decay_step: None,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn to_spec(&self) -> OptimizerSpec {
        let kind = match self.kind {
            OptKindConfig::Adam => OptKind::Adam,
            OptKindConfig::SgdMomentum => OptKind::SgdMomentum,
        };
        OptimizerSpec {
            kind,
            lr: self.lr.unwrap_or(match kind {
                OptKind::Adam => 0.001,
                OptKind::SgdMomentum => 0.1,
            }),
            lr_decay_step: self.lr_decay_step,
            lr_decay_factor: self.lr_decay_factor,
            momentum: self.momentum,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// VAT radius: a fixed positive value, or `"auto"` to resolve it from the
/// source feature scale (half the median nearest-neighbor distance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsX {
    Fixed(f64),
    Auto(String),
}

impl Default for EpsX {
    fn default() -> Self {
        EpsX::Auto("auto".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsConfig {
    pub lambda_sc: f64,
    pub lambda_te: f64,
    pub lambda_t: f64,
    pub lambda_svat: f64,
    pub lambda_tvat: f64,
    pub lambda_jsc: f64,
    pub lambda_jtc: f64,
    pub lambda_jsa: f64,
    pub lambda_jta: f64,
    pub eps_x: EpsX,
    pub xi: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        WeightsConfig {
            lambda_sc: w.lambda_sc,
            lambda_te: w.lambda_te,
            lambda_t: w.lambda_t,
            lambda_svat: w.lambda_svat,
            lambda_tvat: w.lambda_tvat,
            lambda_jsc: w.lambda_jsc,
            lambda_jtc: w.lambda_jtc,
            lambda_jsa: w.lambda_jsa,
            lambda_jta: w.lambda_jta,
            eps_x: EpsX::default(),
            xi: w.xi,
        }
    }
}

impl WeightsConfig {
    pub fn to_weights(&self, eps_x: f64) -> LossWeights {
        LossWeights {
            lambda_sc: self.lambda_sc,
            lambda_te: self.lambda_te,
            lambda_t: self.lambda_t,
            lambda_svat: self.lambda_svat,
            lambda_tvat: self.lambda_tvat,
            lambda_jsc: self.lambda_jsc,
            lambda_jtc: self.lambda_jtc,
            lambda_jsa: self.lambda_jsa,
            lambda_jta: self.lambda_jta,
            eps_x,
            xi: self.xi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumModeConfig {
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub mode: CurriculumModeConfig,
    /// Phase boundaries as fractions of the iteration budget.
    pub a: f64,
    pub b: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            mode: CurriculumModeConfig::Auto,
            a: 1.0 / 15.0,
            b: 2.0 / 15.0,
        }
    }
}

/// Parse and validate a JSON experiment config. Unknown keys, type errors,
/// and invariant violations all fail with a path into the document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig =
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable digest of the canonical JSON form.
    pub fn digest(&self) -> String {
        format!("{:016x}", fnv1a64(self.to_json().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |path: &str, message: String| Error::Config {
            path: path.into(),
            message,
        };
        // Loss weights (with a placeholder radius when auto).
        let eps_probe = match self.loss_weights.eps_x {
            EpsX::Fixed(v) => v,
            EpsX::Auto(ref s) => {
                if s != "auto" {
                    return Err(cfg_err(
                        "loss_weights.eps_x",
                        format!("expected a positive number or \"auto\", got \"{s}\""),
                    ));
                }
                1.0
            }
        };
        self.loss_weights
            .to_weights(eps_probe)
            .validate()
            .map_err(|e| cfg_err("loss_weights", e.to_string()))?;
        self.optimizer
            .to_spec()
            .validate()
            .map_err(|e| cfg_err("optimizer", e.to_string()))?;
        Schedule {
            a: self.curriculum.a,
            b: self.curriculum.b,
        }
        .validate()
        .map_err(|e| cfg_err("curriculum", e.to_string()))?;
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size", "must be >= 1".into()));
        }
        match &self.data {
            DataConfig::Moons { n, noise_std, .. } => {
                if *n < 2 {
                    return Err(cfg_err("data.n", "need n >= 2".into()));
                }
                if *noise_std < 0.0 {
                    return Err(cfg_err("data.noise_std", "must be >= 0".into()));
                }
            }
            DataConfig::Blobs { n, k, d, separation, .. } => {
                if *k < 2 || *n < *k {
                    return Err(cfg_err("data", "need n >= k >= 2".into()));
                }
                if *d + 1 < *k {
                    return Err(cfg_err("data.d", format!("need d >= k-1, got d={d} k={k}")));
                }
                if !(*separation > 0.0) {
                    return Err(cfg_err("data.separation", "must be > 0".into()));
                }
            }
            DataConfig::Csv { k, .. } => {
                if *k < 2 {
                    return Err(cfg_err("data.k", "need k >= 2".into()));
                }
            }
        }
        Ok(())
    }

    /// Materialize the (source, target) dataset pair. Target labels, when
    /// present, are carried for evaluation only.
    pub fn build_datasets(&self) -> Result<(Dataset, Dataset)> {
        let (src, tgt, do_std) = match &self.data {
            DataConfig::Moons {
                n,
                noise_std,
                shift,
                standardize: std_flag,
            } => {
                let src = gen_moons(*n, *noise_std, derive_seed(self.seed, "src-data"))?;
                let base = gen_moons(*n, *noise_std, derive_seed(self.seed, "tgt-data"))?;
                let tgt = apply_shift(&base, &shift.to_spec(), derive_seed(self.seed, "shift"))?;
                (src, tgt, *std_flag)
            }
            DataConfig::Blobs {
                n,
                k,
                d,
                separation,
                shift,
                standardize: std_flag,
            } => {
                let src = gen_blobs(*n, *k, *d, *separation, derive_seed(self.seed, "src-data"))?;
                let base = gen_blobs(*n, *k, *d, *separation, derive_seed(self.seed, "tgt-data"))?;
                let tgt = apply_shift(&base, &shift.to_spec(), derive_seed(self.seed, "shift"))?;
                (src, tgt, *std_flag)
            }
            DataConfig::Csv {
                source,
                target,
                k,
                target_labeled,
                standardize: std_flag,
            } => {
                let src = load_csv(source, true, *k, DomainTag::Source)?;
                let tgt = load_csv(target, *target_labeled, *k, DomainTag::Target)?;
                (src, tgt, *std_flag)
            }
        };
        if do_std {
            Ok((standardize(&src)?, standardize(&tgt)?))
        } else {
            Ok((src, tgt))
        }
    }

    /// Concrete VAT radius: fixed, or half the median nearest-neighbor
    /// distance of the source features.
    pub fn resolve_eps(&self, src_features: &Tensor) -> Result<f64> {
        match &self.loss_weights.eps_x {
            EpsX::Fixed(v) => {
                if !(*v > 0.0) {
                    return Err(Error::Config {
                        path: "loss_weights.eps_x".into(),
                        message: "must be > 0".into(),
                    });
                }
                Ok(*v)
            }
            EpsX::Auto(_) => {
                let d = 0.5 * median_nn_distance(src_features);
                // Degenerate data (duplicated points) still needs a usable radius.
                Ok(if d > 0.0 { d } else { 1e-3 })
            }
        }
    }

    pub fn k(&self) -> Result<usize> {
        Ok(match &self.data {
            DataConfig::Moons { .. } => 2,
            DataConfig::Blobs { k, .. } => *k,
            DataConfig::Csv { k, .. } => *k,
        })
    }

    pub fn trainer_config(&self, d_in: usize, k: usize, eps_x: f64) -> Result<TrainerConfig> {
        let arch = self.arch.to_arch(d_in, k)?;
        Ok(TrainerConfig {
            arch,
            optimizer: self.optimizer.to_spec(),
            weights: self.loss_weights.to_weights(eps_x),
            total_iters: self.total_iters,
            batch_size: self.batch_size,
            schedule: Schedule {
                a: self.curriculum.a,
                b: self.curriculum.b,
            },
            curriculum: match self.curriculum.mode {
                CurriculumModeConfig::Auto => CurriculumMode::Auto,
                CurriculumModeConfig::On => CurriculumMode::On,
                CurriculumModeConfig::Off => CurriculumMode::Off,
            },
            eval_interval: self.eval_interval,
            checkpoint_interval: self.checkpoint_interval,
            checkpoint_dir: None,
            separate_adv_optimizer: self.separate_adv_optimizer,
            h_div_in_metrics: self.h_div_in_metrics,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_full_default() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.total_iters, 6000);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.mode, Mode::Full);
        match &cfg.data {
            DataConfig::Moons { n, noise_std, shift, .. } => {
                assert_eq!(*n, 1000);
                assert_eq!(*noise_std, 0.1);
                assert!((shift.rotation_radians - 35.0f64.to_radians()).abs() < 1e-12);
            }
            other => panic!("unexpected default data: {other:?}"),
        }
    }

    #[test]
    fn partial_weights_override_keeps_other_defaults() {
        let cfg = parse_config(r#"{"loss_weights":{"lambda_t":0.25}}"#).unwrap();
        assert_eq!(cfg.loss_weights.lambda_t, 0.25);
        assert_eq!(cfg.loss_weights.lambda_tvat, 10.0);
        assert_eq!(cfg.loss_weights.lambda_jsc, 1.0);
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let err = parse_config(r#"{"lambda_bogus":1}"#).unwrap_err();
        assert!(err.to_string().contains("lambda_bogus"), "{err}");
        let err = parse_config(r#"{"loss_weights":{"bogus":1}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("loss_weights"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn type_errors_carry_a_path() {
        let err = parse_config(r#"{"optimizer":{"lr":"fast"}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("optimizer.lr"), "{msg}");
    }

    #[test]
    fn invariant_violations_are_config_errors() {
        let err = parse_config(r#"{"loss_weights":{"lambda_t":-1.0}}"#).unwrap_err();
        assert!(err.is_config(), "{err}");
        let err = parse_config(r#"{"batch_size":0}"#).unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
        let err = parse_config(r#"{"curriculum":{"a":0.5,"b":0.2}}"#).unwrap_err();
        assert!(err.to_string().contains("curriculum"), "{err}");
    }

    #[test]
    fn eps_x_auto_and_fixed() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg.loss_weights.eps_x, EpsX::Auto("auto".into()));
        let cfg = parse_config(r#"{"loss_weights":{"eps_x":0.5}}"#).unwrap();
        assert_eq!(cfg.loss_weights.eps_x, EpsX::Fixed(0.5));
        let err = parse_config(r#"{"loss_weights":{"eps_x":"huge"}}"#).unwrap_err();
        assert!(err.to_string().contains("eps_x"), "{err}");
    }

    #[test]
    fn parse_serialize_parse_is_identity() {
        let texts = [
            "{}",
            r#"{"mode":"source-only","seed":3}"#,
            r#"{"data":{"kind":"blobs","n":60,"k":3,"d":2,"separation":5.0},"total_iters":10}"#,
            r#"{"optimizer":{"kind":"sgd_momentum","lr":0.05},"loss_weights":{"eps_x":0.25}}"#,
        ];
        for text in texts {
            let a = parse_config(text).unwrap();
            let b = parse_config(&a.to_json()).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.digest(), b.digest());
        }
    }

    #[test]
    fn digest_is_stable_and_distinguishes_configs() {
        let a = parse_config("{}").unwrap();
        let b = parse_config(r#"{"seed":8}"#).unwrap();
        assert_eq!(a.digest(), parse_config("{}").unwrap().digest());
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn build_datasets_default_toy_task() {
        let mut cfg = ExperimentConfig::default();
        if let DataConfig::Moons { n, .. } = &mut cfg.data {
            *n = 40;
        }
        let (src, tgt) = cfg.build_datasets().unwrap();
        assert_eq!(src.n(), 40);
        assert_eq!(tgt.n(), 40);
        assert_eq!(src.domain, DomainTag::Source);
        assert_eq!(tgt.domain, DomainTag::Target);
        assert!(src.labels.is_some());
        assert!(tgt.labels.is_some()); // evaluation-only access
    }

    #[test]
    fn resolve_eps_auto_uses_data_scale() {
        let cfg = ExperimentConfig::default();
        let (src, _) = {
            let mut small = cfg.clone();
            if let DataConfig::Moons { n, .. } = &mut small.data {
                *n = 100;
            }
            small.build_datasets().unwrap()
        };
        let eps = cfg.resolve_eps(&src.features).unwrap();
        assert!(eps > 0.0 && eps < 1.0, "{eps}");
        let fixed = parse_config(r#"{"loss_weights":{"eps_x":2.5}}"#).unwrap();
        assert_eq!(fixed.resolve_eps(&src.features).unwrap(), 2.5);
    }

    #[test]
    fn mode_strings_parse() {
        for (text, mode) in [
            (r#"{"mode":"full"}"#, Mode::Full),
            (r#"{"mode":"source-only"}"#, Mode::SourceOnly),
            (r#"{"mode":"target-only"}"#, Mode::TargetOnly),
            (r#"{"mode":"ablation"}"#, Mode::Ablation),
        ] {
            assert_eq!(parse_config(text).unwrap().mode, mode);
        }
    }
}
