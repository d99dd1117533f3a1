//! Model/training configuration, validation and file I/O.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered `(kernel, dilation)` stages of a composed depthwise stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct KernelSpec {
    stages: Vec<(usize, usize)>,
}

impl KernelSpec {
    pub fn new(stages: Vec<(usize, usize)>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Config("kernel spec must have at least one stage".into()));
        }
        for (i, &(k, d)) in stages.iter().enumerate() {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("stage {i}: kernel size {k} must be odd and >= 1")));
            }
            if d == 0 {
                return Err(Error::Config(format!("stage {i}: dilation must be >= 1")));
            }
            if i > 0 && k == 1 {
                return Err(Error::Config(format!(
                    "stage {i}: a 1-wide kernel does not grow the receptive field"
                )));
            }
        }
        Ok(KernelSpec { stages })
    }

    pub fn stages(&self) -> &[(usize, usize)] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self)
    }

    /// Receptive field after each stage.
    pub fn cumulative_fields(&self) -> Vec<usize> {
        let mut rf = 1;
        self.stages
            .iter()
            .map(|&(k, d)| {
                rf += d * (k - 1);
                rf
            })
            .collect()
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec { stages: vec![(5, 1), (7, 3)] }
    }
}

/// `RF_i = RF_{i-1} + d_i (k_i - 1)` with `RF_0 = 1`.
pub fn receptive_field(spec: &KernelSpec) -> usize {
    spec.stages.iter().fold(1, |rf, &(k, d)| rf + d * (k - 1))
}

impl TryFrom<Vec<(usize, usize)>> for KernelSpec {
    type Error = Error;
    fn try_from(v: Vec<(usize, usize)>) -> Result<Self> {
        KernelSpec::new(v)
    }
}

impl From<KernelSpec> for Vec<(usize, usize)> {
    fn from(k: KernelSpec) -> Self {
        k.stages
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.stages.iter().map(|(k, d)| format!("({k},{d})")).collect();
        f.write_str(&parts.join("->"))
    }
}

/// Parses `5:1,7:3`.
impl FromStr for KernelSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut stages = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, d) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("kernel stage `{part}` is not of the form k:d")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("kernel stage `{part}` is not numeric")))
            };
            stages.push((parse(k)?, parse(d)?));
        }
        KernelSpec::new(stages)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalBranch {
    /// Two-stage attention through pooled agent tokens.
    Agent,
    /// Full softmax attention over all token pairs.
    Dense,
    /// Conv embedding only.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Clamp,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsSsimExponents {
    /// alpha = 1 on luminance, beta = gamma = 0.0448 at every level.
    Flat,
    /// The usual five-level weight vector, truncated and renormalised to L levels.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Luminance {
    Finest,
    PerLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub ssm: bool,
    pub temporal: TemporalBranch,
    pub tgm: bool,
    pub dum: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { ssm: true, temporal: TemporalBranch::Agent, tgm: true, dum: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_frames: usize,
    pub out_frames: usize,
    pub image_channels: usize,
    pub base_channels: usize,
    pub stage_depths: [usize; 3],
    pub se_reduction: usize,
    pub ssm_kernels: KernelSpec,
    pub agent_tokens: usize,
    pub attention_scaling: bool,
    pub tgm_regions: usize,
    pub tgm_groups: usize,
    pub tgm_kernel: usize,
    pub dynamic_kernel_softmax: bool,
    pub output_head: OutputHead,
    pub msssim_levels: usize,
    pub msssim_exponents: MsSsimExponents,
    pub luminance: Luminance,
    pub loss_weights: [f64; 3],
    pub ce_decay: f64,
    pub ce_epsilon: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_frames: 10,
            out_frames: 10,
            image_channels: 1,
            base_channels: 16,
            stage_depths: [2, 2, 3],
            se_reduction: 4,
            ssm_kernels: KernelSpec::default(),
            agent_tokens: 49,
            attention_scaling: true,
            tgm_regions: 7,
            tgm_groups: 4,
            tgm_kernel: 3,
            dynamic_kernel_softmax: true,
            output_head: OutputHead::Clamp,
            msssim_levels: 5,
            msssim_exponents: MsSsimExponents::Flat,
            luminance: Luminance::Finest,
            loss_weights: [0.7, 0.2, 0.1],
            ce_decay: 0.9,
            ce_epsilon: 1e-7,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    /// Full-width variant (`C1 = 64`).
    pub fn full_scale() -> Self {
        ModelConfig { base_channels: 64, ..Self::default() }
    }

    /// `C1..C4`; the bottleneck keeps `C3`.
    pub fn channels(&self) -> [usize; 4] {
        let c1 = self.base_channels;
        [c1, 2 * c1, 4 * c1, 4 * c1]
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels()[3]
    }

    /// Decoder widths after the three upsampling stages.
    pub fn decoder_channels(&self) -> [usize; 3] {
        let c4 = self.bottleneck_channels();
        [c4 / 2, c4 / 4, c4 / 8]
    }

    /// Token count of the joint temporal attention at input size `(h, w)`.
    pub fn token_count(&self, h: usize, w: usize) -> usize {
        self.in_frames * (h / 16) * (w / 16)
    }

    /// MS-SSIM levels actually used for `(h, w)` images.
    pub fn effective_levels(&self, h: usize, w: usize) -> usize {
        effective_levels(self.msssim_levels, h, w)
    }
}

/// `min(levels, floor(log2(min(h, w) / 11)) + 1)`, or 0 when the window does not fit.
pub fn effective_levels(levels: usize, h: usize, w: usize) -> usize {
    let m = h.min(w);
    if m < 11 {
        return 0;
    }
    let mut fit = 1;
    while m >= 11 << fit {
        fit += 1;
    }
    levels.min(fit)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.violations.join("; ")))
        }
    }
}

pub fn validate_config(cfg: &ModelConfig, input_shape: (usize, usize)) -> ValidationReport {
    let (h, w) = input_shape;
    let mut v = Vec::new();
    let mut check = |ok: bool, msg: String| {
        if !ok {
            v.push(msg);
        }
    };
    check(cfg.in_frames >= 1, "in_frames must be >= 1".into());
    check(cfg.out_frames >= 1, "out_frames must be >= 1".into());
    check(cfg.image_channels >= 1, "image_channels must be >= 1".into());
    check(
        cfg.base_channels >= 2 && cfg.base_channels.is_multiple_of(2),
        format!("base_channels {} must be even and >= 2", cfg.base_channels),
    );
    check(cfg.stage_depths.iter().all(|&n| n >= 1), "every stage depth must be >= 1".into());
    check(cfg.se_reduction >= 1, "se_reduction must be >= 1".into());
    if let Err(e) = KernelSpec::new(cfg.ssm_kernels.stages.clone()) {
        check(false, e.to_string());
    }
    let c4 = cfg.bottleneck_channels();
    check(
        cfg.tgm_groups >= 1 && c4.is_multiple_of(cfg.tgm_groups.max(1)),
        format!("tgm_groups {} does not divide bottleneck channels {c4}", cfg.tgm_groups),
    );
    check(cfg.tgm_regions >= 1, "tgm_regions must be >= 1".into());
    check(cfg.tgm_kernel % 2 == 1, format!("tgm_kernel {} must be odd", cfg.tgm_kernel));
    check(cfg.agent_tokens >= 1, "agent_tokens must be >= 1".into());
    check(cfg.msssim_levels >= 1, "msssim_levels must be >= 1".into());
    let sum: f64 = cfg.loss_weights.iter().sum();
    check(
        (sum - 1.0).abs() <= 1e-9 && cfg.loss_weights.iter().all(|&l| l >= 0.0),
        format!("loss weights sum ≠ 1 (got {sum})"),
    );
    check(cfg.ce_decay > 0.0 && cfg.ce_decay < 1.0, format!("ce_decay {} outside (0, 1)", cfg.ce_decay));
    check(
        cfg.ce_epsilon > 0.0 && cfg.ce_epsilon < 0.5,
        format!("ce_epsilon {} outside (0, 0.5)", cfg.ce_epsilon),
    );

    check(h > 0 && h % 16 == 0, format!("H not divisible by 16 (H = {h})"));
    check(w > 0 && w % 16 == 0, format!("W not divisible by 16 (W = {w})"));
    if h % 16 == 0 && w % 16 == 0 && h > 0 && w > 0 {
        let n = cfg.token_count(h, w);
        if cfg.ablation.temporal == TemporalBranch::Agent {
            check(cfg.agent_tokens <= n, format!("agent_tokens {} exceeds token count {n}", cfg.agent_tokens));
        }
        let levels = cfg.effective_levels(h, w);
        check(levels >= 1, format!("{h}x{w} is smaller than the 11x11 SSIM window"));
        check(
            (h / 8) * (w / 8) >= 1 << levels.saturating_sub(1),
            format!("bottleneck {}x{} too small for {levels} pyramid levels", h / 8, w / 8),
        );
    }
    ValidationReport { violations: v }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionConfig {
    pub p_start: f64,
    pub p_end: f64,
    pub patch_size: usize,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig { p_start: 0.0, p_end: 1.0, patch_size: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub validation_fraction: f64,
    /// Random flips and transposes of each training sample, shared by its frames.
    pub augment: bool,
    pub occlusion: OcclusionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 4,
            lr_init: 1e-3,
            lr_min: 1e-5,
            lr_decay: 0.5,
            lr_step_epochs: 10,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            validation_fraction: 0.1,
            augment: false,
            occlusion: OcclusionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                v.push(msg.to_string());
            }
        };
        check(self.epochs >= 1, "epochs must be at least 1");
        check(self.batch_size >= 1, "batch_size must be at least 1");
        check(self.lr_min >= 0.0 && self.lr_min <= self.lr_init, "learning rates must satisfy 0 <= lr_min <= lr_init");
        check(self.lr_decay > 0.0 && self.lr_decay <= 1.0, "lr_decay must be in (0, 1]");
        check(self.lr_step_epochs >= 1, "lr_step_epochs must be at least 1");
        check((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)");
        check(self.weight_decay >= 0.0, "weight_decay must be non-negative");
        check(self.clip_norm >= 0.0, "clip_norm must be non-negative");
        check((0.0..1.0).contains(&self.validation_fraction), "validation_fraction must be in [0, 1)");
        let o = &self.occlusion;
        check(0.0 <= o.p_start && o.p_start <= o.p_end && o.p_end <= 1.0, "occlusion rates must satisfy 0 <= p_start <= p_end <= 1");
        check(o.patch_size >= 1, "occlusion patch_size must be at least 1");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// Top-level run configuration as stored on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    /// Applies `PREFIX_SECTION__KEY=value` overrides (e.g. `USFNET_MODEL__AGENT_TOKENS=25`).
    /// Values are parsed as TOML literals, falling back to a bare string.
    pub fn with_env_overrides<I, K, V>(&self, prefix: &str, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let head = format!("{prefix}_");
        for (key, value) in vars {
            let Some(rest) = key.as_ref().strip_prefix(&head) else { continue };
            let path: Vec<String> = rest.split("__").map(|p| p.to_ascii_lowercase()).collect();
            let parsed = parse_literal(value.as_ref());
            set_path(&mut doc, &path, parsed).map_err(|m| Error::Config(format!("{}: {m}", key.as_ref())))?;
        }
        doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}")).map(|w| w.v).unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Value, path: &[String], value: toml::Value) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut cur = doc;
    for p in parents {
        cur = cur
            .as_table_mut()
            .and_then(|t| t.get_mut(p))
            .ok_or_else(|| format!("unknown config section `{p}`"))?;
    }
    let table = cur.as_table_mut().ok_or("override target is not a table")?;
    if !table.contains_key(last) {
        return Err(format!("unknown config key `{last}`"));
    }
    table.insert(last.clone(), value);
    Ok(())
}
