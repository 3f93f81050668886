//! Variant registry and the assembled network.

use serde::{Deserialize, Serialize};

use crate::blocks::{
    Block, DcbCache, DilatedConvBlock, DownsampleBlock, HeadBlock, HeadCache, InvertedResidualBlock,
    IrbCache, MixerMode, MixerSpec, StemBlock, StemCache,
};
use crate::blocks::{ConvBn, ConvBnCache};
use crate::error::{Error, Result};
use crate::ops::{BatchNorm2d, NormMode, BN_MOMENTUM};
use crate::params::{join, learnable, NamedTensors, ParamKind, Parameterized};
use crate::tensor::{Rng, Scalar, Tensor};

pub const NUM_STAGES: usize = 4;
/// Total stride of the network.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub n_irb: usize,
    pub n_dcb: usize,
}

impl StageConfig {
    pub const fn new(channels: usize, n_irb: usize, n_dcb: usize) -> Self {
        StageConfig {
            channels,
            n_irb,
            n_dcb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    pub mixer_mode: MixerMode,
    pub dilations: (usize, usize),
    pub mixer_kernel: usize,
    pub use_cpe: bool,
    pub lk_ffn: bool,
    pub gelu_per_branch: bool,
    pub head_hidden: Option<usize>,
    pub seed: u64,
    /// Set once the CPE skips are fused and BN is folded away.
    #[serde(default)]
    pub fused: bool,
}

pub const VARIANTS: [&str; 5] = ["ti", "s", "m", "b", "micro"];

/// Hidden width of the classifier MLP used by the named variants.
pub const DEFAULT_HEAD_HIDDEN: usize = 1024;

/// Registry of the named variants. `micro` is a tiny test-only network.
pub fn default_config(variant: &str) -> Result<ModelConfig> {
    let s = StageConfig::new;
    let (stages, classes, hidden) = match variant.to_ascii_lowercase().as_str() {
        "ti" => (
            vec![s(32, 2, 0), s(64, 2, 0), s(112, 6, 2), s(224, 2, 2)],
            1000,
            Some(DEFAULT_HEAD_HIDDEN),
        ),
        "s" => (
            vec![s(32, 3, 0), s(64, 3, 0), s(112, 9, 3), s(224, 3, 3)],
            1000,
            Some(DEFAULT_HEAD_HIDDEN),
        ),
        "m" => (
            vec![s(32, 3, 0), s(64, 3, 0), s(160, 9, 3), s(320, 3, 3)],
            1000,
            Some(DEFAULT_HEAD_HIDDEN),
        ),
        "b" => (
            vec![s(64, 3, 0), s(128, 3, 0), s(224, 9, 3), s(416, 3, 3)],
            1000,
            Some(DEFAULT_HEAD_HIDDEN),
        ),
        "micro" => (vec![s(8, 1, 0), s(16, 1, 0), s(24, 1, 1), s(32, 1, 1)], 8, None),
        _ => return Err(Error::InvalidVariant(variant.to_string())),
    };
    Ok(ModelConfig {
        name: variant.to_ascii_lowercase(),
        stages,
        num_classes: classes,
        mixer_mode: MixerMode::Mldc,
        dilations: (2, 3),
        mixer_kernel: 3,
        use_cpe: true,
        lk_ffn: true,
        gelu_per_branch: false,
        head_hidden: hidden,
        seed: 0,
        fused: false,
    })
}

impl ModelConfig {
    pub fn mixer_spec(&self) -> MixerSpec {
        MixerSpec {
            mode: self.mixer_mode,
            kernel: self.mixer_kernel,
            dilations: self.dilations,
            use_cpe: self.use_cpe,
            gelu_per_branch: self.gelu_per_branch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != NUM_STAGES {
            return Err(Error::Config(format!(
                "expected {NUM_STAGES} stages, got {}",
                self.stages.len()
            )));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.channels == 0 {
                return Err(Error::Config(format!("stage{} has zero channels", i + 1)));
            }
            if i < 2 && st.n_dcb != 0 {
                return Err(Error::Config(format!(
                    "stage{} cannot hold dilated convolution blocks",
                    i + 1
                )));
            }
        }
        if self.stages[0].channels < 2 {
            return Err(Error::Config("stage1 needs at least 2 channels".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.head_hidden == Some(0) {
            return Err(Error::Config("head_hidden must be >= 1".into()));
        }
        self.mixer_spec().validate()
    }

    pub fn block_counts(&self) -> (usize, usize) {
        self.stages
            .iter()
            .fold((0, 0), |(i, d), s| (i + s.n_irb, d + s.n_dcb))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T> {
    /// Absent for the first stage, which follows the stem directly.
    pub down: Option<DownsampleBlock<T>>,
    pub irbs: Vec<InvertedResidualBlock<T>>,
    pub dcbs: Vec<DilatedConvBlock<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RapidNetModel<T> {
    pub config: ModelConfig,
    pub stem: StemBlock<T>,
    pub stages: Vec<Stage<T>>,
    pub head: HeadBlock<T>,
    mode: NormMode,
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    down: Option<ConvBnCache<T>>,
    irbs: Vec<IrbCache<T>>,
    dcbs: Vec<DcbCache<T>>,
}

/// Intermediates recorded by [`RapidNetModel::forward_train`].
#[derive(Debug, Clone)]
pub struct ModelCache<T> {
    stem: StemCache<T>,
    stages: Vec<StageCache<T>>,
    head: HeadCache<T>,
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: NamedTensors<T>,
    pub input: Tensor<T>,
}

pub fn stage_name(i: usize) -> String {
    format!("stage{}", i + 1)
}

/// Builds and initializes every layer from `cfg.seed`. The model starts in
/// eval mode.
pub fn build_model<T: Scalar>(cfg: &ModelConfig) -> Result<RapidNetModel<T>> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let spec = cfg.mixer_spec();
    let stem = StemBlock::new(3, cfg.stages[0].channels, &mut rng)?;
    let mut stages = Vec::with_capacity(NUM_STAGES);
    let mut prev = cfg.stages[0].channels;
    for (i, st) in cfg.stages.iter().enumerate() {
        let down = if i == 0 {
            None
        } else {
            Some(DownsampleBlock::new(prev, st.channels, &mut rng)?)
        };
        let irbs = (0..st.n_irb)
            .map(|_| InvertedResidualBlock::new(st.channels, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dcbs = (0..st.n_dcb)
            .map(|_| DilatedConvBlock::new(st.channels, &spec, cfg.lk_ffn, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        stages.push(Stage { down, irbs, dcbs });
        prev = st.channels;
    }
    let head = HeadBlock::new(prev, cfg.head_hidden, cfg.num_classes, &mut rng)?;
    let mut model = RapidNetModel {
        config: ModelConfig {
            fused: false,
            ..cfg.clone()
        },
        stem,
        stages,
        head,
        mode: NormMode::Eval,
    };
    if cfg.fused {
        crate::reparam::fuse_in_place(&mut model)?;
    }
    Ok(model)
}

impl<T: Scalar> RapidNetModel<T> {
    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: NormMode) {
        self.mode = mode;
        self.stem.set_mode(mode);
        for st in &mut self.stages {
            if let Some(d) = &mut st.down {
                d.set_mode(mode);
            }
            for b in &mut st.irbs {
                b.set_mode(mode);
            }
            for b in &mut st.dcbs {
                b.set_mode(mode);
            }
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("model expects 3 input channels, got {c}")));
        }
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::geometry(format!(
                "input {h}x{w} is not divisible by {INPUT_MULTIPLE}"
            )));
        }
        Ok(())
    }

    /// Eval-mode logits `[N, classes]`; running statistics are used
    /// regardless of the current mode and nothing is mutated.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x)?;
        for st in &self.stages {
            if let Some(d) = &st.down {
                h = d.forward(&h)?;
            }
            for b in &st.irbs {
                h = b.forward(&h)?;
            }
            for b in &st.dcbs {
                h = b.forward(&h)?;
            }
        }
        self.head.forward(&h)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x)
    }

    /// Train-mode forward: BN uses batch statistics and updates its running
    /// estimates.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, ModelCache<T>)> {
        if self.mode != NormMode::Train {
            return Err(Error::InvalidState("forward_train needs a model in train mode".into()));
        }
        self.check_input(x)?;
        let (mut h, stem) = self.stem.forward_train(x)?;
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for st in &mut self.stages {
            let down = match &mut st.down {
                Some(d) => {
                    let (y, c) = d.forward_train(&h)?;
                    h = y;
                    Some(c)
                }
                None => None,
            };
            let mut irbs = Vec::with_capacity(st.irbs.len());
            for b in &mut st.irbs {
                let (y, c) = b.forward_train(&h)?;
                h = y;
                irbs.push(c);
            }
            let mut dcbs = Vec::with_capacity(st.dcbs.len());
            for b in &mut st.dcbs {
                let (y, c) = b.forward_train(&h)?;
                h = y;
                dcbs.push(c);
            }
            stage_caches.push(StageCache { down, irbs, dcbs });
        }
        let (logits, head) = self.head.forward_train(&h)?;
        Ok((
            logits,
            ModelCache {
                stem,
                stages: stage_caches,
                head,
            },
        ))
    }

    /// Gradients of `sum(grad_logits * logits)` for the pass recorded in
    /// `cache`.
    pub fn backward(&self, cache: &ModelCache<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads = NamedTensors::new();
        let mut g = self.head.backward(&cache.head, grad_logits, "head", &mut grads)?;
        for (i, (st, sc)) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            let sn = stage_name(i);
            for (j, (b, c)) in st.dcbs.iter().zip(&sc.dcbs).enumerate().rev() {
                g = b.backward(c, &g, &join(&sn, &format!("dcb{j}")), &mut grads)?;
            }
            for (j, (b, c)) in st.irbs.iter().zip(&sc.irbs).enumerate().rev() {
                g = b.backward(c, &g, &join(&sn, &format!("irb{j}")), &mut grads)?;
            }
            if let (Some(d), Some(c)) = (&st.down, &sc.down) {
                g = d.backward(c, &g, &join(&sn, "down"), &mut grads)?;
            }
        }
        let input = self.stem.backward(&cache.stem, &g, "stem", &mut grads)?;
        Ok(Gradients {
            params: grads,
            input,
        })
    }

    /// Replaces every BN running statistic with the batch statistics of `x`
    /// (one train-mode pass with momentum 1), then returns to eval mode.
    /// The batch must leave several samples per channel at the last stage;
    /// near-constant channels make the eval-mode network unstable.
    pub fn calibrate_bn(&mut self, x: &Tensor<T>) -> Result<()> {
        let mut momenta = Vec::new();
        self.for_each_bn(&mut |bn| {
            momenta.push(bn.momentum);
            bn.momentum = 1.0;
        });
        self.set_mode(NormMode::Train);
        let result = self.forward_train(x).map(|_| ());
        let mut it = momenta.into_iter();
        self.for_each_bn(&mut |bn| bn.momentum = it.next().unwrap_or(BN_MOMENTUM));
        self.set_mode(NormMode::Eval);
        result
    }

    fn for_each_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d<T>)) {
        let mut unit = |u: &mut ConvBn<T>| {
            if let Some(bn) = &mut u.bn {
                f(bn);
            }
        };
        unit(&mut self.stem.conv1);
        unit(&mut self.stem.conv2);
        for st in &mut self.stages {
            if let Some(d) = &mut st.down {
                unit(&mut d.unit);
            }
            for b in &mut st.irbs {
                unit(&mut b.expand);
                unit(&mut b.dw);
                unit(&mut b.project);
            }
            for b in &mut st.dcbs {
                unit(&mut b.mldc.pw_in);
                for br in &mut b.mldc.branches {
                    unit(br);
                }
                unit(&mut b.mldc.pw_out);
                unit(&mut b.ffn.dw);
                unit(&mut b.ffn.fc2);
            }
        }
    }

    /// Learnable parameters in traversal order.
    pub fn iter_params(&self) -> Vec<(String, Tensor<T>)> {
        learnable(self)
    }

    /// Number of learnable scalars (BN running statistics excluded).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t, kind| {
            if kind == ParamKind::Learnable {
                n += t.numel();
            }
        });
        n
    }

    /// Number of stored tensors, buffers included.
    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, _, _| n += 1);
        n
    }

    pub fn bn_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |name, _, _| {
            if name.ends_with(".bn.gamma") {
                n += 1;
            }
        });
        n
    }
}

/// Runs the model in its current mode; train mode updates BN statistics.
pub fn model_forward<T: Scalar>(model: &mut RapidNetModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    match model.mode() {
        NormMode::Eval => model.forward(x),
        NormMode::Train => Ok(model.forward_train(x)?.0),
    }
}

impl<T: Scalar> Parameterized<T> for RapidNetModel<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (i, st) in self.stages.iter().enumerate() {
            let sn = join(prefix, &stage_name(i));
            if let Some(d) = &st.down {
                d.visit_params(&join(&sn, "down"), f);
            }
            for (j, b) in st.irbs.iter().enumerate() {
                b.visit_params(&join(&sn, &format!("irb{j}")), f);
            }
            for (j, b) in st.dcbs.iter().enumerate() {
                b.visit_params(&join(&sn, &format!("dcb{j}")), f);
            }
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.stem.visit_params_mut(&join(prefix, "stem"), f);
        for (i, st) in self.stages.iter_mut().enumerate() {
            let sn = join(prefix, &stage_name(i));
            if let Some(d) = &mut st.down {
                d.visit_params_mut(&join(&sn, "down"), f);
            }
            for (j, b) in st.irbs.iter_mut().enumerate() {
                b.visit_params_mut(&join(&sn, &format!("irb{j}")), f);
            }
            for (j, b) in st.dcbs.iter_mut().enumerate() {
                b.visit_params_mut(&join(&sn, &format!("dcb{j}")), f);
            }
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn registry_matches_variant_table() {
        let rows = |v: &str| {
            default_config(v)
                .unwrap()
                .stages
                .iter()
                .map(|s| (s.channels, s.n_irb, s.n_dcb))
                .collect::<Vec<_>>()
        };
        assert_eq!(rows("ti"), [(32, 2, 0), (64, 2, 0), (112, 6, 2), (224, 2, 2)]);
        assert_eq!(rows("s"), [(32, 3, 0), (64, 3, 0), (112, 9, 3), (224, 3, 3)]);
        assert_eq!(rows("m"), [(32, 3, 0), (64, 3, 0), (160, 9, 3), (320, 3, 3)]);
        assert_eq!(rows("b"), [(64, 3, 0), (128, 3, 0), (224, 9, 3), (416, 3, 3)]);
        assert!(matches!(default_config("xl"), Err(Error::InvalidVariant(_))));
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig {
            seed: 1,
            ..default_config("micro").unwrap()
        };
        let a = build_model::<f32>(&cfg).unwrap();
        let b = build_model::<f32>(&cfg).unwrap();
        assert_eq!(a, b);
        let c = build_model::<f32>(&ModelConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn names_are_unique() {
        for v in ["micro", "ti"] {
            let m = build_model::<f32>(&default_config(v).unwrap()).unwrap();
            let mut seen = HashSet::new();
            m.visit_params("", &mut |name, _, _| assert!(seen.insert(name.to_string()), "{name}"));
        }
    }

    #[test]
    fn sldc_has_one_branch() {
        let cfg = ModelConfig {
            mixer_mode: MixerMode::Sldc,
            ..default_config("micro").unwrap()
        };
        let m = build_model::<f32>(&cfg).unwrap();
        for st in &m.stages {
            for d in &st.dcbs {
                assert_eq!(d.mldc.branches.len(), 1);
            }
        }
    }

    #[test]
    fn forward_shapes_and_geometry() {
        let m = build_model::<f32>(&default_config("micro").unwrap()).unwrap();
        let x = Tensor::randn(&[2, 3, 64, 64], &mut Rng::new(0), 0.0, 1.0).unwrap();
        assert_eq!(m.forward(&x).unwrap().shape(), &[2, 8]);
        let x = Tensor::<f32>::zeros(&[1, 3, 100, 100]).unwrap();
        assert!(matches!(m.forward(&x), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn eval_forward_is_pure() {
        let m = build_model::<f32>(&default_config("micro").unwrap()).unwrap();
        let x = Tensor::randn(&[1, 3, 32, 32], &mut Rng::new(0), 0.0, 1.0).unwrap();
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn forward_train_requires_train_mode() {
        let mut m = build_model::<f32>(&default_config("micro").unwrap()).unwrap();
        let x = Tensor::randn(&[2, 3, 32, 32], &mut Rng::new(0), 0.0, 1.0).unwrap();
        assert!(matches!(m.forward_train(&x), Err(Error::InvalidState(_))));
        m.set_mode(NormMode::Train);
        let before = m.clone();
        model_forward(&mut m, &x).unwrap();
        assert_ne!(before, m);
    }

    #[test]
    fn calibration_sets_batch_statistics() {
        let mut m = build_model::<f64>(&default_config("micro").unwrap()).unwrap();
        let x = Tensor::randn(&[4, 3, 64, 64], &mut Rng::new(4), 0.5, 2.0).unwrap();
        m.calibrate_bn(&x).unwrap();
        assert_eq!(m.mode(), NormMode::Eval);
        let bn = m.stem.conv1.bn.as_ref().unwrap();
        assert_eq!(bn.momentum, BN_MOMENTUM);
        let y = crate::ops::conv2d(&x, &m.stem.conv1.conv).unwrap();
        let (n, _, h, w) = y.dims4().unwrap();
        let plane = h * w;
        let ch0: Vec<f64> = (0..n)
            .flat_map(|i| y.data()[i * bn.gamma.numel() * plane..][..plane].to_vec())
            .collect();
        let mean = ch0.iter().sum::<f64>() / ch0.len() as f64;
        assert!((bn.running_mean.data()[0] - mean).abs() < 1e-9);
        let out = m.forward(&x).unwrap();
        assert!(out.max_abs() < 10.0, "{}", out.max_abs());
    }

    #[test]
    fn invalid_configs() {
        let base = default_config("micro").unwrap();
        let bad = [
            ModelConfig {
                dilations: (3, 2),
                ..base.clone()
            },
            ModelConfig {
                mixer_kernel: 4,
                ..base.clone()
            },
            ModelConfig {
                stages: base.stages[..3].to_vec(),
                ..base.clone()
            },
            ModelConfig {
                num_classes: 0,
                ..base.clone()
            },
        ];
        for cfg in bad {
            assert!(matches!(build_model::<f32>(&cfg), Err(Error::Config(_))));
        }
    }
}
