//! Flat dotted-key run configuration.
//!
//! The file format is `key = value`, one per line, `#` starts a comment.
//! Keys are grouped by dotted section (`data.*`, `eval.*`, `io.*`, `model.*`,
//! `schedule.*`, `train.*`); layers are `model.layer.N.field` with contiguous
//! indices from zero. Any accepted config serializes back to a canonical form
//! that re-parses to the same config, and serializing that form again is
//! byte-identical.

use crate::error::{PgtError, Result};
use crate::eval::LogitAggregate;
use crate::layers::{MarkovVariant, PoolKind, DEFAULT_MOMENTUM_ALPHA};
use crate::model::{LayerKind, LayerSpec, ModelSpec};
use crate::schedule::DprMode;
use crate::synthetic::{SyntheticTask, TaskRule};
use crate::tensor::Dtype;
use crate::train::{StepLossMode, TrainConfig, TrainMode};

/// Everything one run needs: model, optimizer and schedule settings, the
/// synthetic task, inference settings, and output location.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub mode: TrainMode,
    pub dtype: Dtype,
    pub task: SyntheticTask,
    pub train_size: usize,
    pub val_size: usize,
    pub aggregate: LogitAggregate,
    pub views: usize,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = SyntheticTask::default();
        let model = ModelSpec {
            input: vec![task.channels],
            classes: task.classes(),
            layers: vec![
                LayerSpec::temporal(12, MarkovVariant::Momentum { alpha: DEFAULT_MOMENTUM_ALPHA }),
                LayerSpec::temporal(12, MarkovVariant::Momentum { alpha: DEFAULT_MOMENTUM_ALPHA }),
                LayerSpec::temporal(12, MarkovVariant::Momentum { alpha: DEFAULT_MOMENTUM_ALPHA }),
            ],
        };
        RunConfig {
            model,
            train: TrainConfig::default(),
            mode: TrainMode::Progressive,
            dtype: Dtype::F32,
            task,
            train_size: 384,
            val_size: 192,
            aggregate: LogitAggregate::Mean,
            views: 10,
            out_dir: "out".to_string(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        if self.model.input != [self.task.channels] {
            return Err(PgtError::config(format!(
                "model.input {:?} must match the task's frame shape [{}]",
                self.model.input, self.task.channels
            )));
        }
        if self.model.classes != self.task.classes() {
            return Err(PgtError::config(format!(
                "model.classes is {} but the {} task has {} classes",
                self.model.classes,
                self.task.rule.name(),
                self.task.classes()
            )));
        }
        if self.train_size == 0 || self.val_size == 0 {
            return Err(PgtError::config("train and validation sizes must be nonzero"));
        }
        if self.views == 0 {
            return Err(PgtError::config("eval.views must be nonzero"));
        }
        if self.out_dir.is_empty() {
            return Err(PgtError::config("io.out_dir must not be empty"));
        }
        Ok(())
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| PgtError::config(format!("{key}: expected an unsigned integer, got `{value}`")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| PgtError::config(format!("{key}: expected an unsigned integer, got `{value}`")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| PgtError::config(format!("{key}: expected a number, got `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(PgtError::config(format!("{key}: expected true or false, got `{value}`"))),
    }
}

/// `a..b` with a < b.
fn parse_window(key: &str, value: &str) -> Result<(usize, usize)> {
    let (a, b) = value
        .split_once("..")
        .ok_or_else(|| PgtError::config(format!("{key}: expected a range like 4..8, got `{value}`")))?;
    Ok((parse_usize(key, a.trim())?, parse_usize(key, b.trim())?))
}

/// `C` or `CxHxW`.
fn parse_dims(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split('x')
        .map(|d| parse_usize(key, d.trim()))
        .collect()
}

fn fmt_dims(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// One layer's fields as read from the file, before applicability checks.
#[derive(Debug, Default, Clone)]
struct LayerDraft {
    kind: Option<String>,
    channels: Option<usize>,
    kernel: Option<usize>,
    variant: Option<String>,
    pool: Option<PoolKind>,
    alpha: Option<f64>,
    norm: bool,
    relu: bool,
}

impl LayerDraft {
    fn new() -> Self {
        LayerDraft { norm: true, relu: true, ..LayerDraft::default() }
    }

    fn from_spec(spec: &LayerSpec) -> Self {
        let mut d = LayerDraft::new();
        d.channels = Some(spec.channels);
        d.norm = spec.norm;
        d.relu = spec.relu;
        match spec.kind {
            LayerKind::Temporal { kernel, variant } => {
                d.kind = Some("temporal".to_string());
                d.kernel = Some(kernel);
                match variant {
                    MarkovVariant::Local => d.variant = Some("local".to_string()),
                    MarkovVariant::Basic => d.variant = Some("basic".to_string()),
                    MarkovVariant::Cumulative { pool } => {
                        d.variant = Some("cumulative".to_string());
                        d.pool = Some(pool);
                    }
                    MarkovVariant::Momentum { alpha } => {
                        d.variant = Some("momentum".to_string());
                        d.alpha = Some(alpha);
                    }
                }
            }
            LayerKind::Pointwise => d.kind = Some("pointwise".to_string()),
            LayerKind::Spatial { kernel } => {
                d.kind = Some("spatial".to_string());
                d.kernel = Some(kernel);
            }
        }
        d
    }

    fn set(&mut self, key: &str, field: &str, value: &str) -> Result<()> {
        match field {
            "type" => self.kind = Some(value.to_string()),
            "channels" => self.channels = Some(parse_usize(key, value)?),
            "kernel" => self.kernel = Some(parse_usize(key, value)?),
            "variant" => self.variant = Some(value.to_string()),
            "pool" => self.pool = Some(PoolKind::parse(value)?),
            "alpha" => self.alpha = Some(parse_f64(key, value)?),
            "norm" => self.norm = parse_bool(key, value)?,
            "relu" => self.relu = parse_bool(key, value)?,
            other => {
                return Err(PgtError::config(format!(
                    "unknown config key `model.layer.N.{other}`"
                )));
            }
        }
        Ok(())
    }

    fn build(&self, index: usize) -> Result<LayerSpec> {
        let at = |field: &str| format!("model.layer.{index}.{field}");
        let channels = self
            .channels
            .ok_or_else(|| PgtError::config(format!("{} is required", at("channels"))))?;
        let kind = match self.kind.as_deref() {
            None => return Err(PgtError::config(format!("{} is required", at("type")))),
            Some("temporal") => {
                let variant = match self.variant.as_deref().unwrap_or("local") {
                    "local" => MarkovVariant::Local,
                    "basic" => MarkovVariant::Basic,
                    "cumulative" => MarkovVariant::Cumulative {
                        pool: self.pool.unwrap_or(PoolKind::Mean),
                    },
                    "momentum" => MarkovVariant::Momentum {
                        alpha: self.alpha.unwrap_or(DEFAULT_MOMENTUM_ALPHA),
                    },
                    other => {
                        return Err(PgtError::config(format!(
                            "{}: unknown variant `{other}`",
                            at("variant")
                        )));
                    }
                };
                if self.pool.is_some() && !matches!(variant, MarkovVariant::Cumulative { .. }) {
                    return Err(PgtError::config(format!(
                        "{} only applies to the cumulative variant",
                        at("pool")
                    )));
                }
                if self.alpha.is_some() && !matches!(variant, MarkovVariant::Momentum { .. }) {
                    return Err(PgtError::config(format!(
                        "{} only applies to the momentum variant",
                        at("alpha")
                    )));
                }
                LayerKind::Temporal { kernel: self.kernel.unwrap_or(3), variant }
            }
            Some("pointwise") => {
                for (f, set) in [
                    ("kernel", self.kernel.is_some()),
                    ("variant", self.variant.is_some()),
                    ("pool", self.pool.is_some()),
                    ("alpha", self.alpha.is_some()),
                ] {
                    if set {
                        return Err(PgtError::config(format!(
                            "{} does not apply to a pointwise layer",
                            at(f)
                        )));
                    }
                }
                LayerKind::Pointwise
            }
            Some("spatial") => {
                for (f, set) in [
                    ("variant", self.variant.is_some()),
                    ("pool", self.pool.is_some()),
                    ("alpha", self.alpha.is_some()),
                ] {
                    if set {
                        return Err(PgtError::config(format!(
                            "{} does not apply to a spatial layer",
                            at(f)
                        )));
                    }
                }
                LayerKind::Spatial { kernel: self.kernel.unwrap_or(3) }
            }
            Some(other) => {
                return Err(PgtError::config(format!("{}: unknown type `{other}`", at("type"))));
            }
        };
        Ok(LayerSpec { kind, channels, norm: self.norm, relu: self.relu })
    }
}

/// `model.layer.N.field` -> (N, field).
fn split_layer_key(key: &str) -> Option<(usize, &str)> {
    let rest = key.strip_prefix("model.layer.")?;
    let (idx, field) = rest.split_once('.')?;
    Some((idx.parse().ok()?, field))
}

fn set_scalar(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "data.frames" => cfg.task.frames = parse_usize(key, value)?,
        "data.channels" => cfg.task.channels = parse_usize(key, value)?,
        "data.symbols" => cfg.task.symbols = parse_usize(key, value)?,
        "data.rule" => cfg.task.rule = TaskRule::parse(value)?,
        "data.early" => cfg.task.early_window = parse_window(key, value)?,
        "data.late" => cfg.task.late_window = parse_window(key, value)?,
        "data.amplitude" => cfg.task.amplitude = parse_f64(key, value)?,
        "data.noise" => cfg.task.noise = parse_f64(key, value)?,
        "data.train_size" => cfg.train_size = parse_usize(key, value)?,
        "data.val_size" => cfg.val_size = parse_usize(key, value)?,
        "eval.aggregate" => cfg.aggregate = LogitAggregate::parse(value)?,
        "eval.views" => cfg.views = parse_usize(key, value)?,
        "io.out_dir" => cfg.out_dir = value.to_string(),
        "model.input" => cfg.model.input = parse_dims(key, value)?,
        "model.classes" => cfg.model.classes = parse_usize(key, value)?,
        "schedule.t_prime" => cfg.train.t_prime = parse_usize(key, value)?,
        "schedule.P" => cfg.train.num_steps = parse_usize(key, value)?,
        "schedule.dpr" => cfg.train.dpr = DprMode::parse(value)?,
        "train.mode" => cfg.mode = TrainMode::parse(value)?,
        "train.dtype" => cfg.dtype = Dtype::parse(value)?,
        "train.lr" => cfg.train.lr = parse_f64(key, value)?,
        "train.momentum" => cfg.train.momentum = parse_f64(key, value)?,
        "train.weight_decay" => cfg.train.weight_decay = parse_f64(key, value)?,
        "train.epochs" => cfg.train.epochs = parse_usize(key, value)?,
        "train.warmup_epochs" => cfg.train.warmup_epochs = parse_usize(key, value)?,
        "train.batch_size" => cfg.train.batch_size = parse_usize(key, value)?,
        "train.grad_clip" => {
            cfg.train.grad_clip = match value {
                "off" => None,
                _ => Some(parse_f64(key, value)?),
            };
        }
        "train.step_loss" => cfg.train.step_loss = StepLossMode::parse(value)?,
        "train.seed" => cfg.train.seed = parse_u64(key, value)?,
        other => return Err(PgtError::config(format!("unknown config key `{other}`"))),
    }
    Ok(())
}

/// Parse a config file. Missing keys keep their defaults, except that any
/// `model.layer.*` key replaces the whole default layer stack.
pub fn parse(text: &str) -> Result<RunConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            PgtError::config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
        })?;
        let key = k.trim().to_string();
        if pairs.iter().any(|(existing, _)| *existing == key) {
            return Err(PgtError::config(format!("line {}: duplicate key `{key}`", n + 1)));
        }
        pairs.push((key, v.trim().to_string()));
    }

    let mut cfg = RunConfig::default();
    let mut drafts: Vec<(usize, LayerDraft)> = Vec::new();
    for (key, value) in &pairs {
        match split_layer_key(key) {
            Some((idx, field)) => {
                let draft = match drafts.iter_mut().find(|(i, _)| *i == idx) {
                    Some((_, d)) => d,
                    None => {
                        drafts.push((idx, LayerDraft::new()));
                        &mut drafts.last_mut().unwrap().1
                    }
                };
                draft.set(key, field, value)?;
            }
            None => set_scalar(&mut cfg, key, value)?,
        }
    }
    if !drafts.is_empty() {
        drafts.sort_by_key(|(i, _)| *i);
        let mut layers = Vec::with_capacity(drafts.len());
        for (pos, (idx, draft)) in drafts.iter().enumerate() {
            if *idx != pos {
                return Err(PgtError::config(format!(
                    "layer indices must be contiguous from 0; found index {idx} out of place"
                )));
            }
            layers.push(draft.build(*idx)?);
        }
        cfg.model.layers = layers;
    }
    Ok(cfg)
}

/// Apply one `key=value` override (the CLI's `--set`). Layer overrides edit
/// an existing layer; they cannot add or remove layers.
pub fn apply_set(cfg: &mut RunConfig, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| PgtError::config(format!("--set expects key=value, got `{assignment}`")))?;
    let (key, value) = (key.trim(), value.trim());
    match split_layer_key(key) {
        Some((idx, field)) => {
            let n = cfg.model.layers.len();
            if idx >= n {
                return Err(PgtError::config(format!(
                    "{key}: layer index out of range (model has {n} layers)"
                )));
            }
            let mut draft = LayerDraft::from_spec(&cfg.model.layers[idx]);
            if field == "variant" {
                draft.pool = None;
                draft.alpha = None;
            }
            draft.set(key, field, value)?;
            cfg.model.layers[idx] = draft.build(idx)?;
            Ok(())
        }
        None => set_scalar(cfg, key, value),
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn push_kv(out: &mut String, k: &str, v: &str) {
    out.push_str(k);
    out.push_str(" = ");
    out.push_str(v);
    out.push('\n');
}

/// Canonical text form. Parsing it reproduces the config; serializing again
/// is byte-identical.
pub fn serialize(cfg: &RunConfig) -> String {
    let mut out = String::new();
    push_kv(&mut out, "data.frames", &cfg.task.frames.to_string());
    push_kv(&mut out, "data.channels", &cfg.task.channels.to_string());
    push_kv(&mut out, "data.symbols", &cfg.task.symbols.to_string());
    push_kv(&mut out, "data.rule", cfg.task.rule.name());
    push_kv(
        &mut out,
        "data.early",
        &format!("{}..{}", cfg.task.early_window.0, cfg.task.early_window.1),
    );
    push_kv(
        &mut out,
        "data.late",
        &format!("{}..{}", cfg.task.late_window.0, cfg.task.late_window.1),
    );
    push_kv(&mut out, "data.amplitude", &fmt_f64(cfg.task.amplitude));
    push_kv(&mut out, "data.noise", &fmt_f64(cfg.task.noise));
    push_kv(&mut out, "data.train_size", &cfg.train_size.to_string());
    push_kv(&mut out, "data.val_size", &cfg.val_size.to_string());
    out.push('\n');
    push_kv(&mut out, "eval.aggregate", cfg.aggregate.name());
    push_kv(&mut out, "eval.views", &cfg.views.to_string());
    out.push('\n');
    push_kv(&mut out, "io.out_dir", &cfg.out_dir);
    out.push('\n');
    push_kv(&mut out, "model.input", &fmt_dims(&cfg.model.input));
    push_kv(&mut out, "model.classes", &cfg.model.classes.to_string());
    for (i, layer) in cfg.model.layers.iter().enumerate() {
        let at = |f: &str| format!("model.layer.{i}.{f}");
        match layer.kind {
            LayerKind::Temporal { kernel, variant } => {
                push_kv(&mut out, &at("type"), "temporal");
                push_kv(&mut out, &at("channels"), &layer.channels.to_string());
                push_kv(&mut out, &at("kernel"), &kernel.to_string());
                match variant {
                    MarkovVariant::Local => push_kv(&mut out, &at("variant"), "local"),
                    MarkovVariant::Basic => push_kv(&mut out, &at("variant"), "basic"),
                    MarkovVariant::Cumulative { pool } => {
                        push_kv(&mut out, &at("variant"), "cumulative");
                        push_kv(&mut out, &at("pool"), pool.name());
                    }
                    MarkovVariant::Momentum { alpha } => {
                        push_kv(&mut out, &at("variant"), "momentum");
                        push_kv(&mut out, &at("alpha"), &fmt_f64(alpha));
                    }
                }
            }
            LayerKind::Pointwise => {
                push_kv(&mut out, &at("type"), "pointwise");
                push_kv(&mut out, &at("channels"), &layer.channels.to_string());
            }
            LayerKind::Spatial { kernel } => {
                push_kv(&mut out, &at("type"), "spatial");
                push_kv(&mut out, &at("channels"), &layer.channels.to_string());
                push_kv(&mut out, &at("kernel"), &kernel.to_string());
            }
        }
        push_kv(&mut out, &at("norm"), &layer.norm.to_string());
        push_kv(&mut out, &at("relu"), &layer.relu.to_string());
    }
    out.push('\n');
    push_kv(&mut out, "schedule.t_prime", &cfg.train.t_prime.to_string());
    push_kv(&mut out, "schedule.P", &cfg.train.num_steps.to_string());
    push_kv(&mut out, "schedule.dpr", cfg.train.dpr.name());
    out.push('\n');
    push_kv(&mut out, "train.mode", cfg.mode.name());
    push_kv(&mut out, "train.dtype", cfg.dtype.name());
    push_kv(&mut out, "train.lr", &fmt_f64(cfg.train.lr));
    push_kv(&mut out, "train.momentum", &fmt_f64(cfg.train.momentum));
    push_kv(&mut out, "train.weight_decay", &fmt_f64(cfg.train.weight_decay));
    push_kv(&mut out, "train.epochs", &cfg.train.epochs.to_string());
    push_kv(&mut out, "train.warmup_epochs", &cfg.train.warmup_epochs.to_string());
    push_kv(&mut out, "train.batch_size", &cfg.train.batch_size.to_string());
    push_kv(&mut out, "train.grad_clip", &cfg.train.grad_clip.map_or("off".to_string(), fmt_f64));
    push_kv(&mut out, "train.step_loss", cfg.train.step_loss.name());
    push_kv(&mut out, "train.seed", &cfg.train.seed.to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_serialization_is_a_fixed_point() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serialize(&cfg);
        let reparsed = parse(&text).unwrap();
        reparsed.validate().unwrap();
        assert_eq!(serialize(&reparsed), text);
    }

    #[test]
    fn free_form_input_normalizes_to_the_same_canonical_text() {
        let free = "\n  # a run\n train.lr=0.05   # fast\n\nschedule.P = 3\nmodel.layer.0.type=temporal\nmodel.layer.0.channels=6\nmodel.layer.0.variant=basic\n";
        let cfg = parse(free).unwrap();
        assert_eq!(cfg.train.lr, 0.05);
        assert_eq!(cfg.train.num_steps, 3);
        assert_eq!(cfg.model.layers.len(), 1);
        assert_eq!(
            cfg.model.layers[0].kind,
            LayerKind::Temporal { kernel: 3, variant: MarkovVariant::Basic }
        );
        let canon = serialize(&cfg);
        assert_eq!(serialize(&parse(&canon).unwrap()), canon);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected_by_name() {
        let err = parse("train.learning_rate = 0.1").unwrap_err().to_string();
        assert!(err.contains("train.learning_rate"), "{err}");
        let err = parse("train.lr = 0.1\ntrain.lr = 0.2").unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
        let err = parse("model.layer.0.speed = 9").unwrap_err().to_string();
        assert!(err.contains("speed"), "{err}");
    }

    #[test]
    fn layer_field_applicability_is_enforced() {
        let base = "model.layer.0.type = {}\nmodel.layer.0.channels = 4\n";
        let t = |kind: &str, extra: &str| {
            let text = format!("{}{extra}\n", base.replace("{}", kind));
            parse(&text)
        };
        assert!(t("temporal", "model.layer.0.alpha = 0.5").is_err(), "alpha without momentum");
        assert!(t("temporal", "model.layer.0.variant = momentum\nmodel.layer.0.pool = max").is_err());
        assert!(t("pointwise", "model.layer.0.kernel = 3").is_err());
        assert!(t("spatial", "model.layer.0.variant = basic").is_err());
        let cfg = t("temporal", "model.layer.0.variant = momentum").unwrap();
        assert_eq!(
            cfg.model.layers[0].kind,
            LayerKind::Temporal {
                kernel: 3,
                variant: MarkovVariant::Momentum { alpha: DEFAULT_MOMENTUM_ALPHA }
            }
        );
    }

    #[test]
    fn layer_indices_must_be_contiguous() {
        let text = "model.layer.0.type = temporal\nmodel.layer.0.channels = 4\nmodel.layer.2.type = pointwise\nmodel.layer.2.channels = 4\n";
        assert!(parse(text).is_err());
    }

    #[test]
    fn set_overrides_scalars_and_layer_fields() {
        let mut cfg = RunConfig::default();
        apply_set(&mut cfg, "train.grad_clip=2.5").unwrap();
        assert_eq!(cfg.train.grad_clip, Some(2.5));
        apply_set(&mut cfg, "train.grad_clip=off").unwrap();
        assert_eq!(cfg.train.grad_clip, None);
        apply_set(&mut cfg, "schedule.P=7").unwrap();
        assert_eq!(cfg.train.num_steps, 7);
        apply_set(&mut cfg, "model.layer.1.variant=cumulative").unwrap();
        apply_set(&mut cfg, "model.layer.1.pool=max").unwrap();
        assert_eq!(
            cfg.model.layers[1].kind,
            LayerKind::Temporal {
                kernel: 3,
                variant: MarkovVariant::Cumulative { pool: PoolKind::Max }
            }
        );
        assert!(apply_set(&mut cfg, "model.layer.9.channels=4").is_err());
        assert!(apply_set(&mut cfg, "nonsense").is_err());
        let canon = serialize(&cfg);
        assert_eq!(serialize(&parse(&canon).unwrap()), canon);
    }

    #[test]
    fn grad_clip_and_floats_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.grad_clip = Some(5.0);
        cfg.train.weight_decay = 1e-4;
        let canon = serialize(&cfg);
        let back = parse(&canon).unwrap();
        assert_eq!(back.train.grad_clip, Some(5.0));
        assert_eq!(back.train.weight_decay, 1e-4);
        assert_eq!(serialize(&back), canon);
    }
}
