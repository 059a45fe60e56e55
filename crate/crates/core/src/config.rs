//! Run configuration files.
//!
//! A run file is a JSON document with the sections `objective`, `generator`,
//! `discriminator`, `optimizer`, `data`, `train` and `eval`. Unknown keys are
//! rejected; anything omitted takes its default, several of which depend on
//! the objective (critic ratio, discriminator head, optimizers) or the
//! architecture (width). [`RunConfig`] is the fully resolved form and
//! serializes to a file that parses back to itself.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datapipe::{LoadOptions, Source, CHANNELS, DEFAULT_SYNTH_COUNT};
use crate::error::{Error, Result};
use crate::layers::BnConfig;
use crate::models::{Activation, Arch, InputMode, ModelConfig, OutputActivation, Role};
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::optim::{pair_objective_optimizer, OptimizerConfig};
use crate::trainer::TrainConfig;

pub const DEFAULT_DUPLICATE_TAU: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSection {
    pub arch: Arch,
    pub use_batchnorm: bool,
    pub activation: Activation,
    pub input_mode: InputMode,
    pub width: usize,
    pub output_activation: OutputActivation,
    pub kernel_size: usize,
    pub batchnorm: BnConfig,
}

impl ModelSection {
    fn from_model(m: &ModelConfig) -> Self {
        ModelSection {
            arch: m.arch,
            use_batchnorm: m.use_batchnorm,
            activation: m.activation,
            input_mode: m.input_mode,
            width: m.width,
            output_activation: m.output_activation,
            kernel_size: m.kernel_size,
            batchnorm: m.batchnorm,
        }
    }

    pub fn to_model(&self, role: Role, image_size: usize) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            role,
            use_batchnorm: self.use_batchnorm,
            activation: self.activation,
            input_mode: self.input_mode,
            width: self.width,
            output_activation: self.output_activation,
            kernel_size: self.kernel_size,
            image_size,
            channels: CHANNELS,
            batchnorm: self.batchnorm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OptimizerSection {
    pub generator: OptimizerConfig,
    pub discriminator: OptimizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// A directory of PNG files or `synth:<ramp|checker|blobs>[:count]`.
    pub source: String,
    pub label_size: usize,
    pub crop_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: format!("synth:blobs:{DEFAULT_SYNTH_COUNT}"),
            label_size: 64,
            crop_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub total_g_iters: u64,
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// 0 disables periodic sample grids.
    pub grid_every: u64,
    pub seed: u64,
    pub log_wall_time: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 64,
            total_g_iters: 10_000,
            log_every: 1,
            checkpoint_every: 1000,
            grid_every: 500,
            seed: 0,
            log_wall_time: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Images shown in sample grids.
    pub samples: usize,
    /// Mean-absolute-distance threshold for counting near duplicates.
    pub duplicate_tau: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { samples: 8, duplicate_tau: DEFAULT_DUPLICATE_TAU }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub objective: ObjectiveConfig,
    pub generator: ModelSection,
    pub discriminator: ModelSection,
    pub optimizer: OptimizerSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawObjective {
    kind: Option<ObjectiveKind>,
    lambda_gp: Option<f64>,
    gamma_l1: Option<f64>,
    clip_c: Option<f64>,
    n_critic: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawModel {
    arch: Option<Arch>,
    use_batchnorm: Option<bool>,
    activation: Option<Activation>,
    input_mode: Option<InputMode>,
    width: Option<usize>,
    output_activation: Option<OutputActivation>,
    kernel_size: Option<usize>,
    batchnorm: Option<RawBn>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawBn {
    eps: Option<f64>,
    momentum: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawOptimizer {
    generator: Option<OptimizerConfig>,
    discriminator: Option<OptimizerConfig>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawRun {
    objective: RawObjective,
    generator: RawModel,
    discriminator: RawModel,
    optimizer: RawOptimizer,
    data: DataSection,
    train: TrainSection,
    eval: EvalSection,
}

impl RawModel {
    fn resolve(self, base: ModelConfig) -> ModelSection {
        let arch = self.arch.unwrap_or(base.arch);
        let bn = self.batchnorm.unwrap_or_default();
        ModelSection {
            arch,
            use_batchnorm: self.use_batchnorm.unwrap_or(base.use_batchnorm),
            activation: self.activation.unwrap_or(base.activation),
            input_mode: self.input_mode.unwrap_or(base.input_mode),
            width: self.width.unwrap_or(ModelConfig::default_width(arch)),
            output_activation: self.output_activation.unwrap_or(base.output_activation),
            kernel_size: self.kernel_size.unwrap_or(base.kernel_size),
            batchnorm: BnConfig {
                eps: bn.eps.unwrap_or(base.batchnorm.eps),
                momentum: bn.momentum.unwrap_or(base.batchnorm.momentum),
            },
        }
    }
}

fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "<root>".to_string() } else { path };
        Error::config(path, e.into_inner().to_string())
    })
}

impl RunConfig {
    /// Defaults for an objective and generator architecture.
    pub fn preset(kind: ObjectiveKind, arch: Arch) -> RunConfig {
        let text = format!(
            r#"{{"objective":{{"kind":"{}"}},"generator":{{"arch":"{}"}},"discriminator":{{"arch":"{}"}}}}"#,
            kind.name(),
            arch_name(arch),
            arch_name(if arch == Arch::Resnet { Arch::Dcgan } else { arch }),
        );
        RunConfig::from_json(&text).expect("built-in preset resolves")
    }

    /// Parses and resolves a run file. Validation is separate.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let raw: RawRun = parse_json(text)?;
        let o = raw.objective;
        let kind = o.kind.unwrap_or(ObjectiveKind::WganGp);
        let defaults = ObjectiveConfig::new(kind);
        let objective = ObjectiveConfig {
            kind,
            lambda_gp: o.lambda_gp.unwrap_or(defaults.lambda_gp),
            gamma_l1: o.gamma_l1.unwrap_or(defaults.gamma_l1),
            clip_c: o.clip_c.unwrap_or(defaults.clip_c),
            n_critic: o.n_critic.unwrap_or(defaults.n_critic),
        };
        let g_arch = raw.generator.arch.unwrap_or(Arch::Resnet);
        let d_arch = raw.discriminator.arch.unwrap_or(match g_arch {
            Arch::Mlp => Arch::Mlp,
            _ => Arch::Dcgan,
        });
        let generator = raw.generator.resolve(ModelConfig::generator(g_arch));
        let discriminator = raw.discriminator.resolve(ModelConfig::discriminator(d_arch, kind));
        let paired = pair_objective_optimizer(kind);
        let optimizer = OptimizerSection {
            generator: raw.optimizer.generator.unwrap_or(paired),
            discriminator: raw.optimizer.discriminator.unwrap_or(paired),
        };
        Ok(RunConfig {
            objective,
            generator,
            discriminator,
            optimizer,
            data: raw.data,
            train: raw.train,
            eval: raw.eval,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    /// Pretty JSON with every field spelled out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            objective: self.objective.clone(),
            generator: self.generator.to_model(Role::Generator, self.data.label_size),
            discriminator: self.discriminator.to_model(Role::Discriminator, self.data.label_size),
            g_optimizer: self.optimizer.generator,
            d_optimizer: self.optimizer.discriminator,
            batch_size: self.train.batch_size,
            total_g_iters: self.train.total_g_iters,
            log_every: self.train.log_every,
            checkpoint_every: self.train.checkpoint_every,
            seed: self.train.seed,
            log_wall_time: self.train.log_wall_time,
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            label_size: self.data.label_size,
            crop_size: self.data.crop_size,
            seed: self.train.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.source.parse::<Source>()?;
        self.load_options().validate()?;
        self.train_config().validate()?;
        if self.eval.samples == 0 {
            return Err(Error::config("eval.samples", "must be at least 1"));
        }
        if !(self.eval.duplicate_tau > 0.0 && self.eval.duplicate_tau.is_finite()) {
            return Err(Error::config("eval.duplicate_tau", "must be a finite value > 0"));
        }
        Ok(())
    }

    /// Non-fatal concerns about a valid configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.objective.kind == ObjectiveKind::WganGp && self.discriminator.use_batchnorm {
            out.push(
                "discriminator.use_batchnorm: batch statistics couple the examples whose \
                 per-example input gradients the penalty constrains; consider disabling it"
                    .to_string(),
            );
        }
        out
    }

    /// The same run shrunk to a smoke-test size: 16×16 labels, narrow
    /// networks, a small synthetic dataset and `iters` generator iterations.
    pub fn reduced(&self, iters: u64) -> RunConfig {
        let narrow = |s: &ModelSection| ModelSection {
            width: if s.arch == Arch::Mlp { 16 } else { 4 },
            kernel_size: s.kernel_size.min(3),
            ..s.clone()
        };
        RunConfig {
            generator: narrow(&self.generator),
            discriminator: narrow(&self.discriminator),
            data: DataSection { source: "synth:blobs:16".into(), label_size: 16, crop_size: 16 },
            train: TrainSection {
                batch_size: 4,
                total_g_iters: iters,
                log_every: 1,
                checkpoint_every: 0,
                grid_every: 0,
                ..self.train.clone()
            },
            eval: EvalSection { samples: 4, ..self.eval.clone() },
            ..self.clone()
        }
    }
}

impl From<&TrainConfig> for RunConfig {
    fn from(t: &TrainConfig) -> Self {
        RunConfig {
            objective: t.objective.clone(),
            generator: ModelSection::from_model(&t.generator),
            discriminator: ModelSection::from_model(&t.discriminator),
            optimizer: OptimizerSection { generator: t.g_optimizer, discriminator: t.d_optimizer },
            data: DataSection { label_size: t.generator.image_size, ..DataSection::default() },
            train: TrainSection {
                batch_size: t.batch_size,
                total_g_iters: t.total_g_iters,
                log_every: t.log_every,
                checkpoint_every: t.checkpoint_every,
                seed: t.seed,
                log_wall_time: t.log_wall_time,
                ..TrainSection::default()
            },
            eval: EvalSection::default(),
        }
    }
}

fn arch_name(a: Arch) -> &'static str {
    match a {
        Arch::Dcgan => "dcgan",
        Arch::Resnet => "resnet",
        Arch::Mlp => "mlp",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_takes_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c.objective, ObjectiveConfig::new(ObjectiveKind::WganGp));
        assert_eq!(c.generator.arch, Arch::Resnet);
        assert_eq!(c.discriminator.arch, Arch::Dcgan);
        assert_eq!(c.discriminator.output_activation, OutputActivation::Linear);
        assert_eq!(c.data.label_size, 64);
        c.validate().unwrap();
    }

    #[test]
    fn kind_drives_dependent_defaults() {
        let c = RunConfig::from_json(r#"{"objective":{"kind":"gan"}}"#).unwrap();
        assert_eq!(c.objective.n_critic, 1);
        assert_eq!(c.discriminator.output_activation, OutputActivation::Sigmoid);
        let c = RunConfig::from_json(r#"{"objective":{"kind":"wgan"}}"#).unwrap();
        assert_eq!(c.objective.n_critic, 5);
        assert_eq!(c.optimizer.generator.name(), "rmsprop");
        let c = RunConfig::from_json(r#"{"generator":{"arch":"mlp"}}"#).unwrap();
        assert_eq!(c.generator.width, 512);
        assert_eq!(c.discriminator.arch, Arch::Mlp);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let e = RunConfig::from_json(r#"{"objective":{"gama_l1":0.5}}"#).unwrap_err();
        assert!(e.to_string().starts_with("objective"), "{e}");
        assert!(e.to_string().contains("gama_l1"), "{e}");
        let e = RunConfig::from_json(r#"{"train":{"batch_size":"x"}}"#).unwrap_err();
        assert!(e.to_string().starts_with("train.batch_size"), "{e}");
        assert!(RunConfig::from_json(r#"{"extra":1}"#).is_err());
    }

    #[test]
    fn out_of_range_gamma_fails_validation() {
        let c = RunConfig::from_json(r#"{"objective":{"gamma_l1":1.5}}"#).unwrap();
        let e = c.validate().unwrap_err();
        assert!(e.to_string().starts_with("objective.gamma_l1"), "{e}");
    }

    #[test]
    fn resolved_form_round_trips() {
        let c = RunConfig::from_json(
            r#"{"objective":{"kind":"wgan","clip_c":0.05},"generator":{"arch":"dcgan","activation":"tanh"},
                "optimizer":{"discriminator":{"kind":"sgd","lr":0.1}},"train":{"seed":3}}"#,
        )
        .unwrap();
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from(&c.train_config()).train_config(), c.train_config());
    }

    #[test]
    fn critic_batchnorm_warning_only_for_penalty() {
        assert_eq!(RunConfig::preset(ObjectiveKind::WganGp, Arch::Resnet).warnings().len(), 1);
        assert!(RunConfig::preset(ObjectiveKind::Wgan, Arch::Resnet).warnings().is_empty());
        let mut c = RunConfig::preset(ObjectiveKind::WganGp, Arch::Resnet);
        c.discriminator.use_batchnorm = false;
        assert!(c.warnings().is_empty());
    }

    #[test]
    fn reduced_presets_validate() {
        for kind in [ObjectiveKind::Gan, ObjectiveKind::Wgan, ObjectiveKind::WganGp] {
            for arch in [Arch::Dcgan, Arch::Resnet, Arch::Mlp] {
                let c = RunConfig::preset(kind, arch).reduced(5);
                c.validate().unwrap();
                assert_eq!(c.train_config().generator.image_size, 16);
            }
        }
    }
}
