//! Dual-branch encoder, fusion and decoder composition.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::attention::{cross_attention_fuse, register_fusion};
use super::ops::{conv3d, conv_transpose3d_k2s2, instance_norm, leaky_relu, leaky_relu_inplace, softmax_channels};
use super::params::ParamStore;
use super::tensor::FeatureMap;
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 4;
pub const CNN_FACTORS: [usize; 5] = [1, 2, 4, 8, 16];
pub const GLOBAL_FACTORS: [usize; 4] = [2, 4, 8, 16];
/// Decoder levels carrying an auxiliary head, as downsample factors.
pub const AUX_FACTORS: [usize; 3] = [2, 4, 8];
/// Input extents must be multiples of this.
pub const INPUT_MULTIPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub base_filters: usize,
    pub swin_feature: usize,
    /// Fusion width per level at factors 2, 4, 8, 16. `None` uses the CNN
    /// channel counts at those levels.
    #[serde(default)]
    pub fusion_dims: Option<[usize; 4]>,
    pub num_classes: usize,
    pub leaky_slope: f64,
    pub norm_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_filters: 32,
            swin_feature: 24,
            fusion_dims: None,
            num_classes: NUM_CLASSES,
            leaky_slope: 0.01,
            norm_epsilon: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn with_widths(base_filters: usize, swin_feature: usize) -> Self {
        ModelConfig {
            base_filters,
            swin_feature,
            ..Default::default()
        }
    }

    /// (C, C, 2C, 4C, 8C)
    pub fn cnn_channels(&self) -> [usize; 5] {
        let c = self.base_filters;
        [c, c, 2 * c, 4 * c, 8 * c]
    }

    /// (F, 2F, 4F, 8F)
    pub fn global_channels(&self) -> [usize; 4] {
        let f = self.swin_feature;
        [f, 2 * f, 4 * f, 8 * f]
    }

    pub fn fusion_dims(&self) -> [usize; 4] {
        self.fusion_dims.unwrap_or_else(|| {
            let c = self.cnn_channels();
            [c[1], c[2], c[3], c[4]]
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, value: String, expected: &str| {
            Err(Error::Invalid {
                key: key.into(),
                value,
                expected: expected.into(),
            })
        };
        if self.base_filters == 0 {
            return bad("model.base_filters", "0".into(), "an integer >= 1");
        }
        if self.swin_feature == 0 {
            return bad("model.swin_feature", "0".into(), "an integer >= 1");
        }
        if self.fusion_dims().contains(&0) {
            return bad("model.fusion_dims", format!("{:?}", self.fusion_dims()), "integers >= 1");
        }
        if self.num_classes != NUM_CLASSES {
            return bad("model.num_classes", self.num_classes.to_string(), "4");
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad("model.leaky_slope", self.leaky_slope.to_string(), "a finite value >= 0");
        }
        if !(self.norm_epsilon.is_finite() && self.norm_epsilon >= 0.0) {
            return bad("model.norm_epsilon", self.norm_epsilon.to_string(), "a finite value >= 0");
        }
        Ok(())
    }
}

/// Which encoder branches feed the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    #[default]
    Full,
    CnnOnly,
    SwinOnly,
}

impl BranchMode {
    pub fn name(self) -> &'static str {
        match self {
            BranchMode::Full => "full",
            BranchMode::CnnOnly => "cnn-only",
            BranchMode::SwinOnly => "swin-only",
        }
    }
}

impl std::str::FromStr for BranchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(BranchMode::Full),
            "cnn-only" | "cnn_only" => Ok(BranchMode::CnnOnly),
            "swin-only" | "swin_only" => Ok(BranchMode::SwinOnly),
            _ => Err(Error::Invalid {
                key: "mode".into(),
                value: s.into(),
                expected: "full, cnn-only or swin-only".into(),
            }),
        }
    }
}

/// Feature maps from coarse-to-fine encoder levels with their downsample
/// factors relative to the input.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPyramid {
    pub levels: Vec<FeatureMap>,
    pub factors: Vec<usize>,
}

impl EncoderPyramid {
    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(FeatureMap::channels).collect()
    }

    pub fn level(&self, factor: usize) -> Option<&FeatureMap> {
        self.factors.iter().position(|&f| f == factor).map(|i| &self.levels[i])
    }

    /// Check factors, channels and spatial extents against an input of
    /// extent `input`.
    pub fn validate(&self, name: &str, input: [usize; 3], factors: &[usize], channels: &[usize]) -> Result<()> {
        if self.factors != factors || self.levels.len() != factors.len() {
            return Err(Error::shape(name, format!("factors {:?}, expected {factors:?}", self.factors)));
        }
        for ((fm, &f), &c) in self.levels.iter().zip(factors).zip(channels) {
            let want = input.map(|d| d / f);
            if fm.channels() != c || fm.spatial() != want {
                return Err(Error::shape(
                    name,
                    format!(
                        "level x{f}: got {} channels at {:?}, expected {c} at {want:?}",
                        fm.channels(),
                        fm.spatial()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Pluggable global-context encoder. Implementations must return a
/// pyramid at factors (2, 4, 8, 16) with channels (F, 2F, 4F, 8F).
pub trait GlobalEncoder: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;
    fn register(&self, store: &mut ParamStore, config: &ModelConfig);
    fn forward(&self, input: &FeatureMap, store: &ParamStore, config: &ModelConfig) -> Result<EncoderPyramid>;
}

/// Reference stand-in: four stride-2 conv + IN + LeakyReLU stages on the
/// raw input.
#[derive(Clone, Copy, Debug, Default)]
pub struct StridedConvGlobal;

impl GlobalEncoder for StridedConvGlobal {
    fn name(&self) -> &str {
        "strided-conv"
    }

    fn register(&self, store: &mut ParamStore, config: &ModelConfig) {
        let mut cin = 4;
        for (i, &c) in config.global_channels().iter().enumerate() {
            register_conv(store, &format!("global.stage{i}"), cin, c, 3);
            cin = c;
        }
    }

    fn forward(&self, input: &FeatureMap, store: &ParamStore, config: &ModelConfig) -> Result<EncoderPyramid> {
        let mut levels = Vec::with_capacity(4);
        let mut x = input.clone();
        for i in 0..4 {
            x = conv_norm_act(&x, store, &format!("global.stage{i}"), 2, config)?;
            levels.push(x.clone());
        }
        Ok(EncoderPyramid {
            levels,
            factors: GLOBAL_FACTORS.to_vec(),
        })
    }
}

pub fn register_conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) {
    let fan_in = cin * k * k * k;
    store.init_uniform(&format!("{name}.weight"), &[cout, cin, k, k, k], fan_in);
    store.init_uniform(&format!("{name}.bias"), &[cout], fan_in);
}

fn register_up(store: &mut ParamStore, name: &str, cin: usize, cout: usize) {
    store.init_uniform(&format!("{name}.weight"), &[cin, cout, 2, 2, 2], cin * 8);
    store.init_uniform(&format!("{name}.bias"), &[cout], cin * 8);
}

/// Shape-checked conv using `{name}.weight` / `{name}.bias`.
pub fn conv_layer(x: &FeatureMap, store: &ParamStore, name: &str, cout: usize, k: usize, stride: usize) -> Result<FeatureMap> {
    let w = store.expect(&format!("{name}.weight"), &[cout, x.channels(), k, k, k])?;
    let b = store.expect(&format!("{name}.bias"), &[cout])?;
    conv3d(x, w, b, stride, k / 2, name)
}

fn out_channels(store: &ParamStore, name: &str) -> Result<usize> {
    Ok(store.get(&format!("{name}.bias"))?.shape[0])
}

fn conv_norm_act(x: &FeatureMap, store: &ParamStore, name: &str, stride: usize, config: &ModelConfig) -> Result<FeatureMap> {
    let cout = out_channels(store, name)?;
    let mut y = instance_norm(&conv_layer(x, store, name, cout, 3, stride)?, config.norm_epsilon);
    leaky_relu_inplace(&mut y, config.leaky_slope);
    Ok(y)
}

pub fn register_residual_block(store: &mut ParamStore, name: &str, cin: usize, cout: usize) {
    register_conv(store, &format!("{name}.conv1"), cin, cout, 3);
    register_conv(store, &format!("{name}.conv2"), cout, cout, 3);
    if cin != cout {
        register_conv(store, &format!("{name}.skip"), cin, cout, 1);
    }
}

/// `LeakyReLU(IN(conv2(LeakyReLU(IN(conv1 x)))) + skip(x))`.
pub fn residual_block(x: &FeatureMap, store: &ParamStore, name: &str, config: &ModelConfig) -> Result<FeatureMap> {
    let c1 = format!("{name}.conv1");
    let cout = out_channels(store, &c1)?;
    let h = conv_norm_act(x, store, &c1, 1, config)?;
    let h = instance_norm(&conv_layer(&h, store, &format!("{name}.conv2"), cout, 3, 1)?, config.norm_epsilon);
    let skip = if x.channels() == cout {
        x.clone()
    } else {
        conv_layer(x, store, &format!("{name}.skip"), cout, 1, 1)?
    };
    let mut out = super::ops::add(&h, &skip, name)?;
    leaky_relu_inplace(&mut out, config.leaky_slope);
    Ok(out)
}

pub fn check_input_extent(input: &FeatureMap) -> Result<()> {
    if input.spatial().iter().any(|d| d % INPUT_MULTIPLE != 0) {
        return Err(Error::shape(
            "input",
            format!(
                "spatial extent {:?} is not divisible by {INPUT_MULTIPLE}; pad the volume to a multiple of {INPUT_MULTIPLE}",
                input.spatial()
            ),
        ));
    }
    Ok(())
}

pub fn register_cnn_encoder(store: &mut ParamStore, config: &ModelConfig) {
    let ch = config.cnn_channels();
    register_residual_block(store, "cnn.level0", 4, ch[0]);
    for l in 1..5 {
        register_conv(store, &format!("cnn.level{l}.down"), ch[l - 1], ch[l], 3);
        register_residual_block(store, &format!("cnn.level{l}.res"), ch[l], ch[l]);
    }
}

/// Residual CNN pyramid at factors (1, 2, 4, 8, 16).
pub fn cnn_encoder_forward(input: &FeatureMap, store: &ParamStore, config: &ModelConfig) -> Result<EncoderPyramid> {
    check_input_extent(input)?;
    let mut levels = Vec::with_capacity(5);
    let mut x = residual_block(input, store, "cnn.level0", config)?;
    levels.push(x.clone());
    for l in 1..5 {
        x = conv_norm_act(&x, store, &format!("cnn.level{l}.down"), 2, config)?;
        x = residual_block(&x, store, &format!("cnn.level{l}.res"), config)?;
        levels.push(x.clone());
    }
    let p = EncoderPyramid {
        levels,
        factors: CNN_FACTORS.to_vec(),
    };
    p.validate("cnn encoder", input.spatial(), &CNN_FACTORS, &config.cnn_channels())?;
    Ok(p)
}

pub fn global_encoder_forward(
    encoder: &dyn GlobalEncoder,
    input: &FeatureMap,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<EncoderPyramid> {
    check_input_extent(input)?;
    let p = encoder.forward(input, store, config)?;
    p.validate(&format!("global encoder `{}`", encoder.name()), input.spatial(), &GLOBAL_FACTORS, &config.global_channels())?;
    Ok(p)
}

/// Channel plan of a decoder: bottleneck width, skip widths at factors
/// 8, 4, 2, and the optional full-resolution skip width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderPlan {
    pub bottleneck: usize,
    pub skips: [usize; 3],
    pub full_skip: Option<usize>,
}

impl DecoderPlan {
    /// Output channels of the four decode levels (factors 8, 4, 2, 1).
    pub fn level_channels(&self) -> [usize; 4] {
        [self.skips[0], self.skips[1], self.skips[2], self.full_skip.unwrap_or(self.skips[2])]
    }

    fn skip_widths(&self) -> [usize; 4] {
        [self.skips[0], self.skips[1], self.skips[2], self.full_skip.unwrap_or(0)]
    }
}

pub fn register_decoder(store: &mut ParamStore, plan: &DecoderPlan, num_classes: usize) {
    let out = plan.level_channels();
    let skip = plan.skip_widths();
    let mut cin = plan.bottleneck;
    for l in 0..4 {
        let p = format!("decoder.level{l}");
        register_up(store, &format!("{p}.up"), cin, out[l]);
        register_conv(store, &format!("{p}.conv1"), out[l] + skip[l], out[l], 3);
        register_conv(store, &format!("{p}.conv2"), out[l], out[l], 3);
        cin = out[l];
    }
    // aux heads on the decode levels at factors 2, 4, 8
    for (i, l) in [2usize, 1, 0].into_iter().enumerate() {
        register_conv(store, &format!("decoder.aux{i}"), out[l], num_classes, 1);
    }
    register_conv(store, "decoder.head", out[3], num_classes, 1);
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub logits: FeatureMap,
    /// Auxiliary logits at 1/2, 1/4 and 1/8 of the input resolution.
    pub aux_logits: [FeatureMap; 3],
}

/// Four decode levels: up-convolution, concatenation with the skip, two
/// 3³ conv + IN + LeakyReLU. Skips are ordered factor 8, 4, 2.
pub fn decoder_forward(
    bottleneck: &FeatureMap,
    skips: [&FeatureMap; 3],
    full_skip: Option<&FeatureMap>,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<DecoderOutput> {
    let all_skips = [Some(skips[0]), Some(skips[1]), Some(skips[2]), full_skip];
    let mut x = bottleneck.clone();
    let mut outs = Vec::with_capacity(4);
    for (l, skip) in all_skips.into_iter().enumerate() {
        let p = format!("decoder.level{l}");
        let up_name = format!("{p}.up");
        let cout = out_channels(store, &up_name)?;
        let w = store.expect(&format!("{up_name}.weight"), &[x.channels(), cout, 2, 2, 2])?;
        let b = store.expect(&format!("{up_name}.bias"), &[cout])?;
        let up = conv_transpose3d_k2s2(&x, w, b, &up_name)?;
        let merged = match skip {
            Some(s) => {
                if s.spatial() != up.spatial() || s.batch() != up.batch() {
                    return Err(Error::shape(
                        &p,
                        format!("skip {:?} does not match upsampled {:?}", s.shape(), up.shape()),
                    ));
                }
                up.concat_channels(s)?
            }
            None => up,
        };
        x = conv_norm_act(&merged, store, &format!("{p}.conv1"), 1, config)?;
        x = conv_norm_act(&x, store, &format!("{p}.conv2"), 1, config)?;
        outs.push(x.clone());
    }
    let nc = config.num_classes;
    let aux: Vec<FeatureMap> = [2usize, 1, 0]
        .into_iter()
        .enumerate()
        .map(|(i, l)| conv_layer(&outs[l], store, &format!("decoder.aux{i}"), nc, 1, 1))
        .collect::<Result<_>>()?;
    let logits = conv_layer(&outs[3], store, "decoder.head", nc, 1, 1)?;
    let [a0, a1, a2]: [FeatureMap; 3] = aux.try_into().expect("three aux heads");
    Ok(DecoderOutput {
        logits,
        aux_logits: [a0, a1, a2],
    })
}

/// The dual-branch segmentation network with its parameters.
#[derive(Clone, Debug)]
pub struct InfiltrNet {
    config: ModelConfig,
    mode: BranchMode,
    params: ParamStore,
    global: Arc<dyn GlobalEncoder>,
}

impl InfiltrNet {
    /// Randomly initialized network with the reference global encoder.
    pub fn new(config: ModelConfig, mode: BranchMode, seed: u64) -> Result<Self> {
        Self::with_global(config, mode, seed, Arc::new(StridedConvGlobal))
    }

    pub fn with_global(config: ModelConfig, mode: BranchMode, seed: u64, global: Arc<dyn GlobalEncoder>) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed);
        Self::register(&mut params, &config, mode, global.as_ref());
        Ok(InfiltrNet {
            config,
            mode,
            params,
            global,
        })
    }

    /// Wrap an existing store; every parameter the mode needs must be
    /// present with the right shape. Extra parameters are ignored.
    pub fn from_params(config: ModelConfig, mode: BranchMode, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let global: Arc<dyn GlobalEncoder> = Arc::new(StridedConvGlobal);
        let mut reference = ParamStore::new(params.seed());
        Self::register(&mut reference, &config, mode, global.as_ref());
        for (name, t) in reference.iter() {
            params.expect(name, &t.shape)?;
        }
        Ok(InfiltrNet {
            config,
            mode,
            params,
            global,
        })
    }

    pub fn decoder_plan(config: &ModelConfig, mode: BranchMode) -> DecoderPlan {
        let c = config.cnn_channels();
        let g = config.global_channels();
        let d = config.fusion_dims();
        match mode {
            BranchMode::Full => DecoderPlan {
                bottleneck: d[3],
                skips: [d[2], d[1], d[0]],
                full_skip: Some(c[0]),
            },
            BranchMode::CnnOnly => DecoderPlan {
                bottleneck: c[4],
                skips: [c[3], c[2], c[1]],
                full_skip: Some(c[0]),
            },
            BranchMode::SwinOnly => DecoderPlan {
                bottleneck: g[3],
                skips: [g[2], g[1], g[0]],
                full_skip: None,
            },
        }
    }

    fn register(store: &mut ParamStore, config: &ModelConfig, mode: BranchMode, global: &dyn GlobalEncoder) {
        if mode != BranchMode::SwinOnly {
            register_cnn_encoder(store, config);
        }
        if mode != BranchMode::CnnOnly {
            global.register(store, config);
        }
        if mode == BranchMode::Full {
            let c = config.cnn_channels();
            let g = config.global_channels();
            for (i, (&f, &d)) in GLOBAL_FACTORS.iter().zip(&config.fusion_dims()).enumerate() {
                register_fusion(store, &format!("fuse.x{f}"), c[i + 1], g[i], d);
            }
        }
        register_decoder(store, &Self::decoder_plan(config, mode), config.num_classes);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> BranchMode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Raw logits and auxiliary logits for a (N, 4, D, H, W) input.
    pub fn forward_logits(&self, input: &FeatureMap) -> Result<DecoderOutput> {
        check_input_extent(input)?;
        if input.channels() != 4 {
            return Err(Error::shape("input", format!("{} channels, expected 4 modalities", input.channels())));
        }
        let cfg = &self.config;
        let p = &self.params;
        match self.mode {
            BranchMode::CnnOnly => {
                let c = cnn_encoder_forward(input, p, cfg)?;
                let l = &c.levels;
                decoder_forward(&l[4], [&l[3], &l[2], &l[1]], Some(&l[0]), p, cfg)
            }
            BranchMode::SwinOnly => {
                let s = global_encoder_forward(self.global.as_ref(), input, p, cfg)?;
                let l = &s.levels;
                decoder_forward(&l[3], [&l[2], &l[1], &l[0]], None, p, cfg)
            }
            BranchMode::Full => {
                let c = cnn_encoder_forward(input, p, cfg)?;
                let s = global_encoder_forward(self.global.as_ref(), input, p, cfg)?;
                let dims = cfg.fusion_dims();
                let fused: Vec<FeatureMap> = (0..4)
                    .map(|i| {
                        let f = GLOBAL_FACTORS[i];
                        cross_attention_fuse(
                            &c.levels[i + 1],
                            &s.levels[i],
                            p,
                            &format!("fuse.x{f}"),
                            dims[i],
                            cfg.leaky_slope,
                            cfg.norm_epsilon,
                        )
                    })
                    .collect::<Result<_>>()?;
                decoder_forward(&fused[3], [&fused[2], &fused[1], &fused[0]], Some(&c.levels[0]), p, cfg)
            }
        }
    }

    /// Per-voxel class probabilities, shape (N, 4, D, H, W).
    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        Ok(softmax_channels(&self.forward_logits(input)?.logits))
    }

    pub fn save(&self, manifest: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "mode": self.mode,
            "global_encoder": self.global.name(),
        });
        self.params.save(manifest, meta)
    }

    pub fn load(manifest: &std::path::Path) -> Result<Self> {
        let (params, meta) = ParamStore::load(manifest)?;
        let config: ModelConfig = serde_json::from_value(meta["config"].clone()).map_err(|e| Error::Format {
            field: "model.config",
            detail: e.to_string(),
        })?;
        let mode: BranchMode = serde_json::from_value(meta["mode"].clone()).map_err(|e| Error::Format {
            field: "model.mode",
            detail: e.to_string(),
        })?;
        Self::from_params(config, mode, params)
    }
}

/// `LeakyReLU` on a copy; exposed for the residual-block oracle.
pub fn activation(x: &FeatureMap, config: &ModelConfig) -> FeatureMap {
    leaky_relu(x, config.leaky_slope)
}
