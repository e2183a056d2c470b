//! The full fusion network: N stages of MGDF + PFF, a parameter store,
//! training, and the ablation switches.
//!
//! Wiring per stage: the embedded streams go through MGDF (pairwise with
//! the reference stream for three inputs), the filtered features are fused
//! by PFF into `M`, and the next stage's stream features are 1x1
//! projections of `concat(M, F_i)`. The final head is a 3x3 convolution on
//! the last fused map, with a sigmoid for display-referred tasks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MgdnError, Result};
use crate::loss::{self, MaskNetVars, SoftHistogramConfig, StagePair, StageTriple, MASK_MID};
use crate::mgdf::{self, KernelVolume, MgcaStream, MgdfMode, PredictorVars};
use crate::pff::{self, PffVars};
use crate::tensor::ops;
use crate::tensor::tape::Padding;
use crate::tensor::{Leased, ParameterStore, Tape, Tensor, Var};

/// Fusion task; selects arity, head activation and the loss flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Multi-exposure fusion (2 display-referred inputs).
    Mef,
    /// Multi-focus fusion (2 display-referred inputs).
    Mff,
    /// HDR deghosting (3 bracketed inputs, linear output).
    Hdr,
    /// RGB-guided depth super-resolution (depth + guide, linear output).
    Gdsr,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "mef" => Ok(Task::Mef),
            "mff" => Ok(Task::Mff),
            "hdr" => Ok(Task::Hdr),
            "gdsr" => Ok(Task::Gdsr),
            other => Err(MgdnError::Config(format!(
                "unknown task '{other}' (expected mef|mff|hdr|gdsr)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Mef => "mef",
            Task::Mff => "mff",
            Task::Hdr => "hdr",
            Task::Gdsr => "gdsr",
        }
    }

    pub fn default_arity(&self) -> usize {
        match self {
            Task::Hdr => 3,
            _ => 2,
        }
    }

    pub fn default_in_channels(&self) -> Vec<usize> {
        match self {
            Task::Hdr => vec![3, 3, 3],
            Task::Gdsr => vec![1, 3],
            _ => vec![3, 3],
        }
    }

    pub fn default_out_channels(&self) -> usize {
        match self {
            Task::Gdsr => 1,
            _ => 3,
        }
    }

    /// Display-referred tasks squash the head with a sigmoid.
    pub fn bounded_output(&self) -> bool {
        matches!(self, Task::Mef | Task::Mff)
    }
}

/// Architecture and loss hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    pub stages: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub heads: usize,
    pub window: usize,
    pub window_shift: usize,
    pub lambda: f64,
    pub arity: usize,
    pub in_channels: Vec<usize>,
    pub out_channels: usize,
    pub squeeze_ratio: usize,
    pub hist_bins: usize,
    pub hist_sigma_scale: f64,
    pub share_stream_params: bool,
    pub normalize_kernels: bool,
    pub disable_mgca: bool,
    pub disable_dynamic_filter: bool,
    pub disable_mask_mi: bool,
    /// mu-law constant for the tonemapped L1 on the three-stream loss.
    pub tonemap_mu: f64,
}

impl ModelConfig {
    pub fn for_task(task: Task) -> Self {
        ModelConfig {
            task,
            stages: 3,
            channels: 32,
            kernel_size: 3,
            heads: 2,
            window: 4,
            window_shift: 2,
            lambda: 0.1,
            arity: task.default_arity(),
            in_channels: task.default_in_channels(),
            out_channels: task.default_out_channels(),
            squeeze_ratio: 4,
            hist_bins: 32,
            hist_sigma_scale: 1.5,
            share_stream_params: false,
            normalize_kernels: false,
            disable_mgca: false,
            disable_dynamic_filter: false,
            disable_mask_mi: false,
            tonemap_mu: 5000.0,
        }
    }

    pub fn hist(&self) -> SoftHistogramConfig {
        SoftHistogramConfig {
            bins: self.hist_bins,
            sigma_scale: self.hist_sigma_scale,
        }
    }

    /// Collects every violated invariant instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.stages < 1 {
            bad.push(format!("stages must be >= 1, got {}", self.stages));
        }
        if self.channels == 0 || self.channels % self.heads != 0 {
            bad.push(format!(
                "channels ({}) must be a positive multiple of heads ({})",
                self.channels, self.heads
            ));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            bad.push(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if !(self.arity == 2 || self.arity == 3) {
            bad.push(format!("arity must be 2 or 3, got {}", self.arity));
        }
        if self.in_channels.len() != self.arity {
            bad.push(format!(
                "in_channels has {} entries for arity {}",
                self.in_channels.len(),
                self.arity
            ));
        }
        if self.in_channels.iter().any(|&c| c == 0) {
            bad.push("in_channels entries must be positive".into());
        }
        if self.out_channels == 0 {
            bad.push("out_channels must be positive".into());
        }
        if self.window == 0 {
            bad.push("window must be >= 1".into());
        }
        if self.squeeze_ratio == 0 {
            bad.push("squeeze_ratio must be >= 1".into());
        }
        if self.hist_bins < 2 {
            bad.push(format!("hist_bins must be >= 2, got {}", self.hist_bins));
        }
        if self.hist_sigma_scale <= 0.0 {
            bad.push("hist_sigma_scale must be positive".into());
        }
        if self.lambda < 0.0 {
            bad.push("lambda must be non-negative".into());
        }
        if self.share_stream_params && self.in_channels.windows(2).any(|w| w[0] != w[1]) {
            bad.push("share_stream_params requires equal in_channels across streams".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(MgdnError::Config(bad.join("; ")))
        }
    }

    /// Canonical key-sorted `key=value` lines (the checkpoint config block).
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let ic = self
            .in_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut kv = vec![
            ("model.arity".to_string(), self.arity.to_string()),
            ("model.channels".to_string(), self.channels.to_string()),
            ("model.disable_dynfilter".to_string(), self.disable_dynamic_filter.to_string()),
            ("model.disable_maskmi".to_string(), self.disable_mask_mi.to_string()),
            ("model.disable_mgca".to_string(), self.disable_mgca.to_string()),
            ("model.heads".to_string(), self.heads.to_string()),
            ("model.hist_bins".to_string(), self.hist_bins.to_string()),
            ("model.hist_sigma_scale".to_string(), self.hist_sigma_scale.to_string()),
            ("model.in_channels".to_string(), ic),
            ("model.kernel_size".to_string(), self.kernel_size.to_string()),
            ("model.lambda".to_string(), self.lambda.to_string()),
            ("model.normalize_kernels".to_string(), self.normalize_kernels.to_string()),
            ("model.out_channels".to_string(), self.out_channels.to_string()),
            ("model.share_stream_params".to_string(), self.share_stream_params.to_string()),
            ("model.squeeze_ratio".to_string(), self.squeeze_ratio.to_string()),
            ("model.stages".to_string(), self.stages.to_string()),
            ("model.task".to_string(), self.task.as_str().to_string()),
            ("model.tonemap_mu".to_string(), self.tonemap_mu.to_string()),
            ("model.window".to_string(), self.window.to_string()),
            ("model.window_shift".to_string(), self.window_shift.to_string()),
        ];
        kv.sort();
        kv
    }

    /// Rebuilds a config from `key=value` pairs; unknown keys are errors.
    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = ModelConfig::for_task(Task::Mff);
        let mut explicit_in_channels = false;
        let mut explicit_arity = false;
        let mut explicit_out = false;
        for (k, v) in pairs {
            let parse_usize = || -> Result<usize> {
                v.parse()
                    .map_err(|_| MgdnError::Config(format!("bad value '{v}' for {k}")))
            };
            let parse_f64 = || -> Result<f64> {
                v.parse()
                    .map_err(|_| MgdnError::Config(format!("bad value '{v}' for {k}")))
            };
            let parse_bool = || -> Result<bool> {
                v.parse()
                    .map_err(|_| MgdnError::Config(format!("bad value '{v}' for {k}")))
            };
            match k.as_str() {
                "model.task" => {
                    let task = Task::parse(v)?;
                    cfg.task = task;
                    if !explicit_arity {
                        cfg.arity = task.default_arity();
                    }
                    if !explicit_in_channels {
                        cfg.in_channels = task.default_in_channels();
                    }
                    if !explicit_out {
                        cfg.out_channels = task.default_out_channels();
                    }
                }
                "model.stages" => cfg.stages = parse_usize()?,
                "model.channels" => cfg.channels = parse_usize()?,
                "model.kernel_size" => cfg.kernel_size = parse_usize()?,
                "model.heads" => cfg.heads = parse_usize()?,
                "model.window" => cfg.window = parse_usize()?,
                "model.window_shift" => cfg.window_shift = parse_usize()?,
                "model.lambda" => cfg.lambda = parse_f64()?,
                "model.arity" => {
                    cfg.arity = parse_usize()?;
                    explicit_arity = true;
                }
                "model.in_channels" => {
                    cfg.in_channels = v
                        .split(',')
                        .map(|s| {
                            s.trim().parse().map_err(|_| {
                                MgdnError::Config(format!("bad value '{v}' for {k}"))
                            })
                        })
                        .collect::<Result<Vec<usize>>>()?;
                    explicit_in_channels = true;
                }
                "model.out_channels" => {
                    cfg.out_channels = parse_usize()?;
                    explicit_out = true;
                }
                "model.squeeze_ratio" => cfg.squeeze_ratio = parse_usize()?,
                "model.hist_bins" => cfg.hist_bins = parse_usize()?,
                "model.hist_sigma_scale" => cfg.hist_sigma_scale = parse_f64()?,
                "model.share_stream_params" => cfg.share_stream_params = parse_bool()?,
                "model.normalize_kernels" => cfg.normalize_kernels = parse_bool()?,
                "model.disable_mgca" => cfg.disable_mgca = parse_bool()?,
                "model.disable_dynfilter" => cfg.disable_dynamic_filter = parse_bool()?,
                "model.disable_maskmi" => cfg.disable_mask_mi = parse_bool()?,
                "model.tonemap_mu" => cfg.tonemap_mu = parse_f64()?,
                other => {
                    return Err(MgdnError::Config(format!("unknown config key '{other}'")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-stage tape handles exposed by the forward pass.
pub struct StageVars {
    /// MGDF inputs `F_i` for this stage.
    pub inputs: Vec<Var>,
    pub guided: Vec<Var>,
    pub filtered: Vec<Var>,
    pub kernels: Vec<Var>,
    /// Single-channel projections `S_i` of the filtered features.
    pub s_maps: Vec<Var>,
    pub merged: Var,
}

/// Forward-pass handles: output plus everything the loss and the
/// diagnostics need.
pub struct ForwardVars {
    pub output: Var,
    pub embeddings: Vec<Var>,
    pub stages: Vec<StageVars>,
}

/// Extracted per-stage features (tensors, detached from any tape).
pub struct StageFeatures {
    pub inputs: Vec<Tensor>,
    pub guided: Vec<Tensor>,
    pub filtered: Vec<Tensor>,
    pub kernels: Vec<KernelVolume>,
    pub s_maps: Vec<Tensor>,
    pub merged: Tensor,
    /// Similarity masks: one for two streams, two (ref-under, ref-over)
    /// for three.
    pub masks: Vec<Tensor>,
}

/// Result of [`Model::infer`].
pub struct Inference {
    pub output: Tensor,
    pub embeddings: Vec<Tensor>,
    pub stages: Vec<StageFeatures>,
}

/// The network: configuration plus named parameters.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl Model {
    /// Deterministic fan-in-scaled initialization. The dynamic-filter
    /// predictor's final layer starts at zero weights with a delta-kernel
    /// bias, so filtering is the identity at step zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let c = config.channels;
        let k2 = config.kernel_size * config.kernel_size;

        let uniform = |rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize| -> Tensor {
            let a = (1.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| (rng.gen::<f64>() * 2.0 - 1.0) * a)
        };

        let n_streams = if config.share_stream_params { 1 } else { config.arity };
        for i in 0..n_streams {
            let cin = config.in_channels[i];
            store.insert(
                format!("embed.s{i}.weight"),
                uniform(&mut rng, vec![3, 3, cin, c], 9 * cin),
            )?;
            store.insert(format!("embed.s{i}.bias"), Tensor::zeros(vec![c]))?;
        }

        for n in 0..config.stages {
            for i in 0..n_streams {
                let p = format!("stage{n}.mgca.s{i}");
                store.insert(format!("{p}.ln.gamma"), Tensor::full(vec![c], 1.0))?;
                store.insert(format!("{p}.ln.beta"), Tensor::zeros(vec![c]))?;
                for proj in ["q", "k", "v"] {
                    store.insert(
                        format!("{p}.{proj}_pw.weight"),
                        uniform(&mut rng, vec![1, 1, c, c], c),
                    )?;
                    store.insert(format!("{p}.{proj}_pw.bias"), Tensor::zeros(vec![c]))?;
                    store.insert(
                        format!("{p}.{proj}_dw.weight"),
                        uniform(&mut rng, vec![3, 3, c], 9),
                    )?;
                }
                store.insert(
                    format!("{p}.out_pw.weight"),
                    uniform(&mut rng, vec![1, 1, c, c], c),
                )?;
                store.insert(format!("{p}.out_pw.bias"), Tensor::zeros(vec![c]))?;
                store.insert(format!("{p}.log_alpha"), Tensor::zeros(vec![config.heads]))?;

                let p = format!("stage{n}.pred.s{i}");
                store.insert(
                    format!("{p}.conv1.weight"),
                    uniform(&mut rng, vec![3, 3, c, c], 9 * c),
                )?;
                store.insert(format!("{p}.conv1.bias"), Tensor::zeros(vec![c]))?;
                store.insert(
                    format!("{p}.conv2.weight"),
                    Tensor::zeros(vec![3, 3, c, k2]),
                )?;
                let mut delta = Tensor::zeros(vec![k2]);
                delta.data_mut()[k2 / 2] = 1.0;
                store.insert(format!("{p}.conv2.bias"), delta)?;

                store.insert(
                    format!("stage{n}.mask.s{i}.proj.weight"),
                    uniform(&mut rng, vec![1, 1, c, 1], c),
                )?;
                store.insert(format!("stage{n}.mask.s{i}.proj.bias"), Tensor::zeros(vec![1]))?;
            }

            let p = format!("stage{n}.pff");
            let r = (c / config.squeeze_ratio).max(1);
            store.insert(
                format!("{p}.merge.weight"),
                uniform(&mut rng, vec![1, 1, config.arity * c, c], config.arity * c),
            )?;
            store.insert(format!("{p}.merge.bias"), Tensor::zeros(vec![c]))?;
            store.insert(format!("{p}.ln1.gamma"), Tensor::full(vec![c], 1.0))?;
            store.insert(format!("{p}.ln1.beta"), Tensor::zeros(vec![c]))?;
            for proj in ["attn_q", "attn_k", "attn_v", "attn_out"] {
                store.insert(
                    format!("{p}.{proj}.weight"),
                    uniform(&mut rng, vec![1, 1, c, c], c),
                )?;
                store.insert(format!("{p}.{proj}.bias"), Tensor::zeros(vec![c]))?;
            }
            store.insert(format!("{p}.ln2.gamma"), Tensor::full(vec![c], 1.0))?;
            store.insert(format!("{p}.ln2.beta"), Tensor::zeros(vec![c]))?;
            store.insert(
                format!("{p}.ffn1.weight"),
                uniform(&mut rng, vec![1, 1, c, 2 * c], c),
            )?;
            store.insert(format!("{p}.ffn1.bias"), Tensor::zeros(vec![2 * c]))?;
            store.insert(
                format!("{p}.ffn2.weight"),
                uniform(&mut rng, vec![1, 1, 2 * c, c], 2 * c),
            )?;
            store.insert(format!("{p}.ffn2.bias"), Tensor::zeros(vec![c]))?;
            store.insert(
                format!("{p}.out_proj.weight"),
                uniform(&mut rng, vec![1, 1, c, c], c),
            )?;
            store.insert(format!("{p}.out_proj.bias"), Tensor::zeros(vec![c]))?;
            store.insert(
                format!("{p}.local1.weight"),
                uniform(&mut rng, vec![3, 3, c, c], 9 * c),
            )?;
            store.insert(format!("{p}.local1.bias"), Tensor::zeros(vec![c]))?;
            store.insert(
                format!("{p}.local2.weight"),
                uniform(&mut rng, vec![3, 3, c, c], 9 * c),
            )?;
            store.insert(format!("{p}.local2.bias"), Tensor::zeros(vec![c]))?;
            store.insert(
                format!("{p}.gate1.weight"),
                uniform(&mut rng, vec![1, 1, c, r], c),
            )?;
            store.insert(format!("{p}.gate1.bias"), Tensor::zeros(vec![r]))?;
            store.insert(
                format!("{p}.gate2.weight"),
                uniform(&mut rng, vec![1, 1, r, c], r),
            )?;
            store.insert(format!("{p}.gate2.bias"), Tensor::zeros(vec![c]))?;

            store.insert(
                format!("stage{n}.mask.conv1.weight"),
                uniform(&mut rng, vec![3, 3, 4, MASK_MID], 9 * 4),
            )?;
            store.insert(format!("stage{n}.mask.conv1.bias"), Tensor::zeros(vec![MASK_MID]))?;
            store.insert(
                format!("stage{n}.mask.conv2.weight"),
                uniform(&mut rng, vec![3, 3, MASK_MID, 1], 9 * MASK_MID),
            )?;
            store.insert(format!("stage{n}.mask.conv2.bias"), Tensor::zeros(vec![1]))?;

            if n + 1 < config.stages {
                for i in 0..n_streams {
                    store.insert(
                        format!("stage{n}.recomb.s{i}.weight"),
                        uniform(&mut rng, vec![1, 1, 2 * c, c], 2 * c),
                    )?;
                    store.insert(format!("stage{n}.recomb.s{i}.bias"), Tensor::zeros(vec![c]))?;
                }
            }
        }

        store.insert(
            "head.weight",
            uniform(&mut rng, vec![3, 3, c, config.out_channels], 9 * c),
        )?;
        store.insert("head.bias", Tensor::zeros(vec![config.out_channels]))?;

        Ok(Model { config, params: store })
    }

    /// Copy of the model with every parameter nudged by a small seeded
    /// uniform value. Gradient checks run at this generic point: the exact
    /// init has zero biases, which parks some squeeze/excite coordinates at
    /// gradients too small for central differences to resolve.
    pub fn jittered(&self, seed: u64, magnitude: f64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Model {
            config: self.config.clone(),
            params: self.params.clone(),
        };
        for p in m.params.params_mut() {
            for v in p.tensor.data_mut() {
                *v += (rng.gen::<f64>() * 2.0 - 1.0) * magnitude;
            }
        }
        m
    }

    /// Stream index after parameter sharing.
    fn sidx(&self, stream: usize) -> usize {
        if self.config.share_stream_params {
            0
        } else {
            stream
        }
    }

    pub fn var(&self, leased: &Leased, name: &str) -> Result<Var> {
        self.params
            .index_of(name)
            .map(|i| leased.vars[i])
            .ok_or_else(|| MgdnError::Contract(format!("missing parameter '{name}'")))
    }

    fn pair(&self, leased: &Leased, prefix: &str) -> Result<(Var, Var)> {
        Ok((
            self.var(leased, &format!("{prefix}.weight"))?,
            self.var(leased, &format!("{prefix}.bias"))?,
        ))
    }

    fn mgca_stream(&self, leased: &Leased, stage: usize, stream: usize) -> Result<MgcaStream> {
        let p = format!("stage{stage}.mgca.s{}", self.sidx(stream));
        Ok(MgcaStream {
            ln_gamma: self.var(leased, &format!("{p}.ln.gamma"))?,
            ln_beta: self.var(leased, &format!("{p}.ln.beta"))?,
            q_pw: self.pair(leased, &format!("{p}.q_pw"))?,
            q_dw: self.var(leased, &format!("{p}.q_dw.weight"))?,
            k_pw: self.pair(leased, &format!("{p}.k_pw"))?,
            k_dw: self.var(leased, &format!("{p}.k_dw.weight"))?,
            v_pw: self.pair(leased, &format!("{p}.v_pw"))?,
            v_dw: self.var(leased, &format!("{p}.v_dw.weight"))?,
            out_pw: self.pair(leased, &format!("{p}.out_pw"))?,
            log_alpha: self.var(leased, &format!("{p}.log_alpha"))?,
        })
    }

    fn predictor(&self, leased: &Leased, stage: usize, stream: usize) -> Result<PredictorVars> {
        let p = format!("stage{stage}.pred.s{}", self.sidx(stream));
        Ok(PredictorVars {
            conv1: self.pair(leased, &format!("{p}.conv1"))?,
            conv2: self.pair(leased, &format!("{p}.conv2"))?,
        })
    }

    fn pff_vars(&self, leased: &Leased, stage: usize) -> Result<PffVars> {
        let p = format!("stage{stage}.pff");
        let shift = if stage % 2 == 1 { self.config.window_shift } else { 0 };
        Ok(PffVars {
            merge: self.pair(leased, &format!("{p}.merge"))?,
            ln1: (
                self.var(leased, &format!("{p}.ln1.gamma"))?,
                self.var(leased, &format!("{p}.ln1.beta"))?,
            ),
            attn_q: self.pair(leased, &format!("{p}.attn_q"))?,
            attn_k: self.pair(leased, &format!("{p}.attn_k"))?,
            attn_v: self.pair(leased, &format!("{p}.attn_v"))?,
            attn_out: self.pair(leased, &format!("{p}.attn_out"))?,
            ln2: (
                self.var(leased, &format!("{p}.ln2.gamma"))?,
                self.var(leased, &format!("{p}.ln2.beta"))?,
            ),
            ffn1: self.pair(leased, &format!("{p}.ffn1"))?,
            ffn2: self.pair(leased, &format!("{p}.ffn2"))?,
            out_proj: self.pair(leased, &format!("{p}.out_proj"))?,
            local1: self.pair(leased, &format!("{p}.local1"))?,
            local2: self.pair(leased, &format!("{p}.local2"))?,
            gate1: self.pair(leased, &format!("{p}.gate1"))?,
            gate2: self.pair(leased, &format!("{p}.gate2"))?,
            window: self.config.window,
            shift,
            heads: self.config.heads,
        })
    }

    pub fn mask_net(&self, leased: &Leased, stage: usize) -> Result<MaskNetVars> {
        Ok(MaskNetVars {
            conv1: self.pair(leased, &format!("stage{stage}.mask.conv1"))?,
            conv2: self.pair(leased, &format!("stage{stage}.mask.conv2"))?,
        })
    }

    fn mgdf_mode(&self) -> MgdfMode {
        MgdfMode {
            self_queries: self.config.disable_mgca,
            spatially_uniform_kernels: self.config.disable_dynamic_filter,
            normalize_kernels: self.config.normalize_kernels,
        }
    }

    /// Runs the network over leased parameters and input leaves.
    pub fn forward(&self, tape: &mut Tape, leased: &Leased, inputs: &[Var]) -> Result<ForwardVars> {
        let cfg = &self.config;
        if inputs.len() != cfg.arity {
            return Err(MgdnError::shape(
                "mgdn_forward",
                format!("{} inputs for arity {}", inputs.len(), cfg.arity),
            ));
        }
        let spatial = {
            let s = tape.shape(inputs[0]);
            (s[0], s[1])
        };
        for (i, &v) in inputs.iter().enumerate() {
            let s = tape.shape(v).to_vec();
            if s.len() != 3 || (s[0], s[1]) != spatial || s[2] != cfg.in_channels[i] {
                return Err(MgdnError::shape(
                    "mgdn_forward",
                    format!(
                        "input {i} has shape {:?}, want [{}, {}, {}]",
                        s, spatial.0, spatial.1, cfg.in_channels[i]
                    ),
                ));
            }
        }

        // Stream embeddings F^0.
        let mut feats = Vec::with_capacity(cfg.arity);
        for (i, &v) in inputs.iter().enumerate() {
            let (w, b) = self.pair(leased, &format!("embed.s{}", self.sidx(i)))?;
            feats.push(ops::conv2d(tape, v, w, b, Padding::Same)?);
        }
        let embeddings = feats.clone();

        let mode = self.mgdf_mode();
        let mut stages = Vec::with_capacity(cfg.stages);
        let mut merged = None;
        for n in 0..cfg.stages {
            let stage_inputs = feats.clone();
            let (guided, filtered, kernels) = if cfg.arity == 2 {
                let s0 = self.mgca_stream(leased, n, 0)?;
                let s1 = self.mgca_stream(leased, n, 1)?;
                let p0 = self.predictor(leased, n, 0)?;
                let p1 = self.predictor(leased, n, 1)?;
                let out = mgdf::mgdf_forward(
                    tape, feats[0], feats[1], &s0, &s1, &p0, &p1, cfg.heads, mode,
                )?;
                (
                    vec![out.guided[0], out.guided[1]],
                    vec![out.filtered[0], out.filtered[1]],
                    vec![out.kernels[0], out.kernels[1]],
                )
            } else {
                // Star topology around the reference stream (index 1): each
                // outer stream pairs with it; the reference guidance is the
                // mean of what the two pairs produce for it.
                let s0 = self.mgca_stream(leased, n, 0)?;
                let s1 = self.mgca_stream(leased, n, 1)?;
                let s2 = self.mgca_stream(leased, n, 2)?;
                let (g0, g1a) =
                    mgdf::mgca_forward(tape, feats[0], feats[1], &s0, &s1, cfg.heads, mode.self_queries)?;
                let (g2, g1b) =
                    mgdf::mgca_forward(tape, feats[2], feats[1], &s2, &s1, cfg.heads, mode.self_queries)?;
                let g1_sum = ops::add(tape, g1a, g1b)?;
                let g1 = ops::scale(tape, g1_sum, 0.5)?;
                let guided = vec![g0, g1, g2];
                let mut filtered = Vec::with_capacity(3);
                let mut kernels = Vec::with_capacity(3);
                for (i, &g) in guided.iter().enumerate() {
                    let pred = self.predictor(leased, n, i)?;
                    let raw = mgdf::predict_kernel_volume(tape, g, &pred)?;
                    let kv = mgdf::finalize_kernels(tape, raw, mode)?;
                    filtered.push(mgdf::apply_dynamic_filter(tape, feats[i], kv)?);
                    kernels.push(kv);
                }
                (guided, filtered, kernels)
            };

            let pffv = self.pff_vars(leased, n)?;
            let (m, _xhat) = pff::pff_forward(tape, &filtered, &pffv)?;

            let mut s_maps = Vec::with_capacity(cfg.arity);
            for (i, &cf) in filtered.iter().enumerate() {
                let (w, b) = self.pair(leased, &format!("stage{n}.mask.s{}.proj", self.sidx(i)))?;
                s_maps.push(ops::conv2d(tape, cf, w, b, Padding::Same)?);
            }

            if n + 1 < cfg.stages {
                let hw = spatial.0 * spatial.1;
                let mut next = Vec::with_capacity(cfg.arity);
                for (i, &f) in feats.iter().enumerate() {
                    let cat = ops::concat_cols(tape, &[m, f], hw)?;
                    let cat = ops::reshape(tape, cat, vec![spatial.0, spatial.1, 2 * cfg.channels])?;
                    let (w, b) =
                        self.pair(leased, &format!("stage{n}.recomb.s{}", self.sidx(i)))?;
                    next.push(ops::conv2d(tape, cat, w, b, Padding::Same)?);
                }
                feats = next;
            }

            stages.push(StageVars {
                inputs: stage_inputs,
                guided,
                filtered,
                kernels,
                s_maps,
                merged: m,
            });
            merged = Some(m);
        }

        let m_last = merged.expect("at least one stage");
        let (hw_, hb_) = self.pair(leased, "head")?;
        let mut out = ops::conv2d(tape, m_last, hw_, hb_, Padding::Same)?;
        if cfg.task.bounded_output() {
            out = ops::sigmoid(tape, out)?;
        }
        Ok(ForwardVars { output: out, embeddings, stages })
    }

    /// Builds the training loss on top of a forward pass.
    pub fn training_loss(
        &self,
        tape: &mut Tape,
        leased: &Leased,
        fwd: &ForwardVars,
        gt: Var,
    ) -> Result<loss::LossVars> {
        let lambda = if self.config.disable_mask_mi {
            0.0
        } else {
            self.config.lambda
        };
        let hist = self.config.hist();
        if self.config.arity == 2 {
            let mut pairs = Vec::with_capacity(self.config.stages);
            for (n, st) in fwd.stages.iter().enumerate() {
                pairs.push(StagePair {
                    s1: st.s_maps[0],
                    s2: st.s_maps[1],
                    net: self.mask_net(leased, n)?,
                });
            }
            if self.config.task == Task::Hdr {
                return Err(MgdnError::Contract("hdr task requires arity 3".into()));
            }
            loss::fusion_loss(tape, fwd.output, gt, &pairs, lambda, &hist)
        } else {
            let mut triples = Vec::with_capacity(self.config.stages);
            for (n, st) in fwd.stages.iter().enumerate() {
                triples.push(StageTriple {
                    s: [st.s_maps[0], st.s_maps[1], st.s_maps[2]],
                    net: self.mask_net(leased, n)?,
                });
            }
            loss::hdr_loss(
                tape,
                fwd.output,
                gt,
                &triples,
                lambda,
                &hist,
                self.config.tonemap_mu,
            )
        }
    }

    /// Forward pass without gradients, extracting all per-stage features
    /// (including the similarity masks, for dumping).
    pub fn infer(&self, inputs: &[Tensor]) -> Result<Inference> {
        let mut tape = Tape::new();
        let leased = Leased::from_vars(
            self.params
                .params()
                .iter()
                .map(|p| tape.constant(p.tensor.data().to_vec(), p.tensor.shape().to_vec()))
                .collect(),
        );
        let in_vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.data().to_vec(), t.shape().to_vec())).collect();
        let fwd = self.forward(&mut tape, &leased, &in_vars)?;

        let mut stages = Vec::with_capacity(fwd.stages.len());
        for (n, st) in fwd.stages.iter().enumerate() {
            let net = self.mask_net(&leased, n)?;
            let mask_pairs: Vec<(Var, Var)> = if self.config.arity == 2 {
                vec![(st.s_maps[0], st.s_maps[1])]
            } else {
                vec![
                    (st.s_maps[1], st.s_maps[0]),
                    (st.s_maps[1], st.s_maps[2]),
                ]
            };
            let mut masks = Vec::new();
            for (a, b) in mask_pairs {
                let gm = loss::predict_gradient_mask(&mut tape, a, b, &net)?;
                masks.push(tape.to_tensor(gm));
            }
            stages.push(StageFeatures {
                inputs: st.inputs.iter().map(|&v| tape.to_tensor(v)).collect(),
                guided: st.guided.iter().map(|&v| tape.to_tensor(v)).collect(),
                filtered: st.filtered.iter().map(|&v| tape.to_tensor(v)).collect(),
                kernels: st
                    .kernels
                    .iter()
                    .map(|&v| KernelVolume::new(tape.to_tensor(v), self.config.kernel_size))
                    .collect::<Result<Vec<_>>>()?,
                s_maps: st.s_maps.iter().map(|&v| tape.to_tensor(v)).collect(),
                merged: tape.to_tensor(st.merged),
                masks,
            });
        }
        Ok(Inference {
            output: tape.to_tensor(fwd.output),
            embeddings: fwd.embeddings.iter().map(|&v| tape.to_tensor(v)).collect(),
            stages,
        })
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers, parallel to the parameter store.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_store(store: &ParameterStore) -> AdamState {
        AdamState {
            m: store.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: store.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }
}

/// Loss values reported per training step.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub total: f64,
    pub l1: f64,
    pub mi: f64,
    /// Per-pair MI sums for the three-stream loss.
    pub mi_pairs: Option<(f64, f64)>,
}

/// Owns a model plus optimizer and data-order randomness; one step trains
/// on one sample.
pub struct Trainer {
    pub model: Model,
    pub opt: AdamConfig,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, opt: AdamConfig, seed: u64) -> Trainer {
        let adam = AdamState::for_store(&model.params);
        Trainer {
            model,
            opt,
            adam,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
            step: 0,
        }
    }

    /// Draws the next sample index for a dataset of `n` samples.
    pub fn next_sample(&mut self, n: usize) -> usize {
        (self.rng.gen::<u64>() % n as u64) as usize
    }

    /// Forward, loss, backward, Adam update. Gradients are reset at entry.
    pub fn train_step(&mut self, inputs: &[Tensor], gt: &Tensor) -> Result<LossReport> {
        self.model.params.zero_grads();
        let mut tape = Tape::new();
        let leased = self.model.params.lease(&mut tape);
        let in_vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.constant(t.data().to_vec(), t.shape().to_vec()))
            .collect();
        let gt_var = tape.constant(gt.data().to_vec(), gt.shape().to_vec());
        let fwd = self.model.forward(&mut tape, &leased, &in_vars)?;
        let lv = self.model.training_loss(&mut tape, &leased, &fwd, gt_var)?;

        let report = LossReport {
            total: tape.value(lv.total)[0],
            l1: tape.value(lv.l1)[0],
            mi: tape.value(lv.mi)[0],
            mi_pairs: lv.mi_pairs.map(|(u, o)| (tape.value(u)[0], tape.value(o)[0])),
        };
        for (name, v) in [("l1", report.l1), ("mi", report.mi), ("total", report.total)] {
            if !v.is_finite() {
                return Err(MgdnError::NonFinite(format!(
                    "loss term '{name}' at step {}",
                    self.step
                )));
            }
        }

        tape.backward(lv.total)?;
        self.model.params.absorb_grads(&tape, &leased);
        drop(tape);

        self.step += 1;
        let t = self.step as i32;
        let b1t = 1.0 - self.opt.beta1.powi(t);
        let b2t = 1.0 - self.opt.beta2.powi(t);
        for (idx, p) in self.model.params.params_mut().iter_mut().enumerate() {
            let g = match p.tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.tensor.numel()],
            };
            let m = &mut self.adam.m[idx];
            let v = &mut self.adam.v[idx];
            let data = p.tensor.data_mut();
            for j in 0..g.len() {
                m[j] = self.opt.beta1 * m[j] + (1.0 - self.opt.beta1) * g[j];
                v[j] = self.opt.beta2 * v[j] + (1.0 - self.opt.beta2) * g[j] * g[j];
                let mhat = m[j] / b1t;
                let vhat = v[j] / b2t;
                data[j] -= self.opt.lr * mhat / (vhat.sqrt() + self.opt.eps);
            }
        }
        Ok(report)
    }
}
