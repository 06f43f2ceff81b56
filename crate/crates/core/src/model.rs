//! End-to-end deinterlacing network: configuration, weights and forward pass.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::align::{AlignChain, AlignMode};
use crate::attention::{AttentionMode, AttentionParams, SaModule};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::field::{weave, Field, FieldWindow, Frame, Parity, CHANNELS, REFERENCE_INDEX, WINDOW_LEN};
use crate::layers::{conv_specs, res_stack, Bound, Conv, Init, ParamSpec, ResBlock};
use crate::tensor::{Float, Tensor};

pub const WEIGHT_MAGIC: &[u8; 4] = b"DFRS";
pub const WEIGHT_VERSION: u32 = 1;

/// Architecture constants and ablation switches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub num_fields: usize,
    pub base_channels: usize,
    pub qk_channels: usize,
    pub feat_blocks: usize,
    pub align_blocks: usize,
    pub recon_blocks: usize,
    pub align_mode: AlignMode,
    pub attention_mode: AttentionMode,
    pub alignment_enabled: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_fields: WINDOW_LEN,
            base_channels: 64,
            qk_channels: 8,
            feat_blocks: 5,
            align_blocks: 4,
            recon_blocks: 7,
            align_mode: AlignMode::DfRes,
            attention_mode: AttentionMode::Sa,
            alignment_enabled: true,
            seed: 0,
        }
    }
}

const CONFIG_KEYS: [&str; 10] = [
    "num_fields",
    "base_channels",
    "qk_channels",
    "feat_blocks",
    "align_blocks",
    "recon_blocks",
    "align_mode",
    "attention_mode",
    "alignment_enabled",
    "seed",
];

pub(crate) fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl NetworkConfig {
    /// Reduced architecture used for desk-scale training runs.
    pub fn desk() -> Self {
        NetworkConfig {
            base_channels: 16,
            qk_channels: 2,
            feat_blocks: 2,
            align_blocks: 2,
            recon_blocks: 2,
            ..Self::default()
        }
    }

    /// Minimal architecture for end-to-end gradient checks.
    pub fn tiny() -> Self {
        NetworkConfig {
            base_channels: 8,
            qk_channels: 1,
            feat_blocks: 1,
            align_blocks: 1,
            recon_blocks: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_fields != WINDOW_LEN {
            return Err(Error::Config(format!("num_fields must be {WINDOW_LEN}, got {}", self.num_fields)));
        }
        if self.base_channels == 0 || self.base_channels % 8 != 0 {
            return Err(Error::Config(format!("base_channels must be a positive multiple of 8, got {}", self.base_channels)));
        }
        if self.qk_channels != self.base_channels / 8 {
            return Err(Error::Config(format!(
                "qk_channels must be base_channels/8 = {}, got {}",
                self.base_channels / 8,
                self.qk_channels
            )));
        }
        if self.alignment_enabled && self.align_blocks == 0 {
            return Err(Error::Config("align_blocks must be positive when alignment is enabled".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` override; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_fields" => self.num_fields = parse_value(key, value)?,
            "base_channels" => self.base_channels = parse_value(key, value)?,
            "qk_channels" => self.qk_channels = parse_value(key, value)?,
            "feat_blocks" => self.feat_blocks = parse_value(key, value)?,
            "align_blocks" => self.align_blocks = parse_value(key, value)?,
            "recon_blocks" => self.recon_blocks = parse_value(key, value)?,
            "align_mode" => self.align_mode = value.trim().parse()?,
            "attention_mode" => self.attention_mode = value.trim().parse()?,
            "alignment_enabled" => self.alignment_enabled = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown network key `{key}`"))),
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        CONFIG_KEYS.contains(&key)
    }

    /// `key=value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "num_fields={}", self.num_fields);
        let _ = writeln!(s, "base_channels={}", self.base_channels);
        let _ = writeln!(s, "qk_channels={}", self.qk_channels);
        let _ = writeln!(s, "feat_blocks={}", self.feat_blocks);
        let _ = writeln!(s, "align_blocks={}", self.align_blocks);
        let _ = writeln!(s, "recon_blocks={}", self.recon_blocks);
        let _ = writeln!(s, "align_mode={}", self.align_mode);
        let _ = writeln!(s, "attention_mode={}", self.attention_mode);
        let _ = writeln!(s, "alignment_enabled={}", self.alignment_enabled);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = NetworkConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every learnable tensor of this architecture, in file order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.base_channels;
        let mut v = conv_specs("conv1", CHANNELS, c, 3, Init::He(1.0));
        for b in 0..self.feat_blocks {
            v.extend(ResBlock::specs(&format!("feat.{b}"), c));
        }
        if self.alignment_enabled {
            for f in supporting_indices() {
                v.extend(AlignChain::specs(&format!("align.{f}"), c, self.align_blocks, self.align_mode));
            }
            v.extend(conv_specs("conv2", WINDOW_LEN * c, c, 3, Init::He(1.0)));
        }
        if self.attention_mode != AttentionMode::None {
            v.extend(SaModule::specs("attn", c, self.qk_channels));
        }
        for branch in [Branch::Odd, Branch::Even] {
            for b in 0..self.recon_blocks {
                v.extend(ResBlock::specs(&format!("recon.{}.{b}", branch.name()), c));
            }
        }
        for branch in [Branch::Odd, Branch::Even] {
            v.extend(conv_specs(&format!("conv3.{}", branch.name()), c, CHANNELS, 3, Init::He(1.0)));
        }
        v
    }
}

/// Window positions of the four supporting fields.
fn supporting_indices() -> impl Iterator<Item = usize> {
    (0..WINDOW_LEN).filter(|&i| i != REFERENCE_INDEX)
}

/// Reconstruction branch, named after the parity of the field it estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Odd,
    Even,
}

impl Branch {
    /// The branch that estimates the field missing next to a reference with this indicator.
    pub fn for_indicator(indicator: u8) -> Branch {
        if indicator == 0 {
            Branch::Even
        } else {
            Branch::Odd
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Odd => "odd",
            Branch::Even => "even",
        }
    }

    pub fn parity(self) -> Parity {
        match self {
            Branch::Odd => Parity::Odd,
            Branch::Even => Parity::Even,
        }
    }
}

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T: Float = f32> {
    config: NetworkConfig,
    params: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

/// Learnable-scalar counts, total and per top-level subsystem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub by_subsystem: BTreeMap<String, usize>,
}

impl std::fmt::Display for ParamCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.by_subsystem {
            writeln!(f, "{k:<8} {v}")?;
        }
        write!(f, "{:<8} {}", "total", self.total)
    }
}

impl<T: Float> ModelWeights<T> {
    /// Fan-in scaled normal weights, zero biases, zero offset convs and zero attention scale.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_specs()
            .into_iter()
            .map(|spec| {
                let t = match spec.init {
                    Init::Zeros => Tensor::zeros(&spec.shape),
                    Init::He(gain) => {
                        let std = gain * (2.0 / spec.fan_in() as f64).sqrt();
                        let normal = Normal::new(0.0, std).expect("finite std");
                        Tensor::from_fn(&spec.shape, |_| T::from_f64(normal.sample(&mut rng)))
                    }
                };
                (spec.name, t.with_requires_grad(true))
            })
            .collect();
        Self::from_params(config.clone(), params)
    }

    /// Every tensor filled with `value`.
    pub fn constant(config: &NetworkConfig, value: T) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_specs()
            .into_iter()
            .map(|s| (s.name, Tensor::full(&s.shape, value).with_requires_grad(true)))
            .collect();
        Self::from_params(config.clone(), params)
    }

    /// Checks `params` against the names and shapes `config` requires.
    pub fn from_params(config: NetworkConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        let mut index = HashMap::with_capacity(params.len());
        for (i, (name, _)) in params.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::WeightFormat(format!("duplicate tensor `{name}`")));
            }
        }
        let expected: HashSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        if let Some((name, _)) = params.iter().find(|(n, _)| !expected.contains(n.as_str())) {
            return Err(Error::WeightFormat(format!("tensor `{name}` is not part of this configuration")));
        }
        for spec in &specs {
            let Some(&i) = index.get(&spec.name) else {
                return Err(Error::WeightFormat(format!("missing tensor `{}`", spec.name)));
            };
            if params[i].1.shape() != spec.shape.as_slice() {
                return Err(Error::WeightFormat(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    params[i].1.shape(),
                    spec.shape
                )));
            }
        }
        Ok(ModelWeights { config, params, index })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Switches between SA and ESA without touching the weights.
    pub fn set_attention_mode(&mut self, mode: AttentionMode) -> Result<()> {
        let has_attn = self.config.attention_mode != AttentionMode::None;
        if has_attn != (mode != AttentionMode::None) {
            return Err(Error::Config(format!(
                "cannot switch attention from {} to {mode}: parameter sets differ",
                self.config.attention_mode
            )));
        }
        self.config.attention_mode = mode;
        Ok(())
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i].1)
    }

    pub fn param_count(&self) -> ParamCount {
        let mut by_subsystem = BTreeMap::new();
        for (name, t) in &self.params {
            let group = name.split('.').next().unwrap_or(name).to_string();
            *by_subsystem.entry(group).or_insert(0) += t.len();
        }
        ParamCount { total: by_subsystem.values().sum(), by_subsystem }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    pub fn cast<U: Float>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor on `g`; trainable leaves when `trainable`.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Bound {
        let mut b = Bound::default();
        for (name, t) in &self.params {
            let v = if trainable { g.param(t) } else { g.input(t) };
            b.insert(name.clone(), v);
        }
        b
    }

    /// Adds the gradients from the last backward pass on `g` into each tensor's grad buffer.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bound: &Bound) -> Result<()> {
        for (name, t) in &mut self.params {
            g.accumulate_into(bound.get(name)?, t)?;
        }
        Ok(())
    }

    /// Graph-free attention parameters, when the network has an attention module.
    pub fn attention_params(&self) -> Option<AttentionParams<T>> {
        let get = |n: &str| self.get(&format!("attn.{n}")).cloned();
        Some(AttentionParams {
            query_weight: get("query.weight")?,
            query_bias: get("query.bias")?,
            key_weight: get("key.weight")?,
            key_bias: get("key.bias")?,
            value_weight: get("value.weight")?.reshape(&[self.config.base_channels, self.config.base_channels]).ok()?,
            value_bias: get("value.bias")?,
            scale: get("scale")?.data()[0],
        })
    }
}

/// The network bound to one graph.
pub struct Network {
    conv1: Conv,
    feat: Vec<ResBlock>,
    align: Option<(Vec<AlignChain>, Conv)>,
    attention: Option<(SaModule, AttentionMode)>,
    recon_odd: Vec<ResBlock>,
    recon_even: Vec<ResBlock>,
    conv3_odd: Conv,
    conv3_even: Conv,
}

impl Network {
    pub fn bind(config: &NetworkConfig, p: &Bound) -> Result<Self> {
        let feat = (0..config.feat_blocks).map(|b| ResBlock::bind(p, &format!("feat.{b}"))).collect::<Result<_>>()?;
        let align = if config.alignment_enabled {
            let chains = supporting_indices()
                .map(|f| AlignChain::bind(p, &format!("align.{f}"), config.align_blocks, config.align_mode))
                .collect::<Result<_>>()?;
            Some((chains, Conv::bind(p, "conv2")?))
        } else {
            None
        };
        let attention = match config.attention_mode {
            AttentionMode::None => None,
            mode => Some((SaModule::bind(p, "attn")?, mode)),
        };
        let recon = |branch: Branch| {
            (0..config.recon_blocks)
                .map(|b| ResBlock::bind(p, &format!("recon.{}.{b}", branch.name())))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Network {
            conv1: Conv::bind(p, "conv1")?,
            feat,
            align,
            attention,
            recon_odd: recon(Branch::Odd)?,
            recon_even: recon(Branch::Even)?,
            conv3_odd: Conv::bind(p, "conv3.odd")?,
            conv3_even: Conv::bind(p, "conv3.even")?,
        })
    }

    /// Estimated opposite-parity field `[3, h, w]`, unclamped.
    pub fn forward<T: Float>(&self, g: &Graph<T>, fields: &[Var], indicator: u8) -> Result<Var> {
        if fields.len() != WINDOW_LEN {
            return Err(Error::Shape(format!("network expects {WINDOW_LEN} fields, got {}", fields.len())));
        }
        let first = g.shape(fields[0]);
        if first.len() != 3 || first[0] != CHANNELS || fields.iter().any(|&f| g.shape(f) != first) {
            return Err(Error::Shape("window fields must share one [3,h,w] shape".into()));
        }
        let shallow: Vec<Var> = fields.iter().map(|&f| self.conv1.forward(g, f)).collect::<Result<_>>()?;
        let deep: Vec<Var> = shallow.iter().map(|&f| res_stack(g, &self.feat, f)).collect::<Result<_>>()?;
        let reference = deep[REFERENCE_INDEX];

        let mut fused = match &self.align {
            Some((chains, conv2)) => {
                let mut stack = Vec::with_capacity(WINDOW_LEN);
                let mut chain = chains.iter();
                for (i, &feat) in deep.iter().enumerate() {
                    if i == REFERENCE_INDEX {
                        stack.push(reference);
                    } else {
                        let c = chain.next().expect("one chain per supporting field");
                        stack.push(c.forward(g, reference, feat)?);
                    }
                }
                let stacked = g.concat(&stack, 0)?;
                conv2.forward(g, stacked)?
            }
            None => reference,
        };
        if let Some((module, mode)) = &self.attention {
            let attn = module.forward(g, shallow[REFERENCE_INDEX], *mode)?;
            fused = g.add(fused, attn)?;
        }
        let (blocks, head) = match Branch::for_indicator(indicator) {
            Branch::Odd => (&self.recon_odd, &self.conv3_odd),
            Branch::Even => (&self.recon_even, &self.conv3_even),
        };
        let h = res_stack(g, blocks, fused)?;
        head.forward(g, h)
    }
}

/// Records the window's fields as constant inputs.
pub fn window_inputs<T: Float>(g: &Graph<T>, window: &FieldWindow) -> Vec<Var> {
    window.fields().iter().map(|f| g.input(&f.to_tensor::<T>())).collect()
}

/// Inference: estimated opposite-parity field, clamped to `[0, 1]`.
pub fn forward<T: Float>(window: &FieldWindow, weights: &ModelWeights<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let bound = weights.bind(&g, false);
    let net = Network::bind(weights.config(), &bound)?;
    let inputs = window_inputs(&g, window);
    let out = net.forward(&g, &inputs, window.indicator())?;
    let out = g.clamp01(out)?;
    Ok(g.value(out))
}

/// One progressive frame: the reference field woven with the network's estimate.
pub fn deinterlace_frame<T: Float>(window: &FieldWindow, weights: &ModelWeights<T>) -> Result<Frame> {
    let est = forward(window, weights)?;
    let parity = window.reference().parity().opposite();
    let est = Field::from_tensor(parity, &est)?;
    weave(window.reference(), &est, window.indicator())
}

pub fn init_weights(config: &NetworkConfig, seed: u64) -> Result<ModelWeights<f32>> {
    ModelWeights::init(config, seed)
}

// ---- weight files ----------------------------------------------------

/// Serialises weights in the `DFRS` container format.
pub fn encode_weights(weights: &ModelWeights<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&(weights.params.len() as u32).to_le_bytes());
    for (name, t) in &weights.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let text = weights.config.to_text();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::WeightFormat(format!("truncated file while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != WEIGHT_MAGIC {
        return Err(Error::WeightFormat("bad magic, expected `DFRS`".into()));
    }
    let version = r.u32("version")?;
    if version != WEIGHT_VERSION {
        return Err(Error::WeightFormat(format!("unsupported version {version}, expected {WEIGHT_VERSION}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::WeightFormat(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::WeightFormat(format!("tensor `{name}` is larger than the file")))?;
        let raw = r.take(numel * 4, &format!("data of `{name}`"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::WeightFormat(format!("tensor `{name}`: {e}")))?;
        params.push((name, t.with_requires_grad(true)));
    }
    let text_len = r.u64("config length")? as usize;
    let text = std::str::from_utf8(r.take(text_len, "config")?)
        .map_err(|_| Error::WeightFormat("config blob is not UTF-8".into()))?;
    if r.pos != bytes.len() {
        return Err(Error::WeightFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let config = NetworkConfig::from_text(text)?;
    ModelWeights::from_params(config, params)
}

pub fn save_weights(weights: &ModelWeights<f32>, path: &Path) -> Result<()> {
    let bytes = encode_weights(weights);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

/// Loads a weight file and checks it against an expected configuration's tensor set.
pub fn load_weights_for(path: &Path, expected: &NetworkConfig) -> Result<ModelWeights<f32>> {
    let w = load_weights(path)?;
    let want: Vec<_> = expected.param_specs().into_iter().map(|s| (s.name, s.shape)).collect();
    let have: Vec<_> = w.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    if want != have {
        let missing = want.iter().find(|x| !have.contains(x)).map(|x| x.0.clone());
        let extra = have.iter().find(|x| !want.contains(x)).map(|x| x.0.clone());
        return Err(Error::WeightFormat(format!(
            "tensor set does not match configuration (missing {:?}, unexpected {:?})",
            missing, extra
        )));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_param_count() {
        let specs = conv_specs("c", 64, 64, 3, Init::He(1.0));
        assert_eq!(specs.iter().map(ParamSpec::numel).sum::<usize>(), 36_928);
    }

    #[test]
    fn config_text_roundtrip() {
        let mut cfg = NetworkConfig::desk();
        cfg.set("align_mode", "delta_dfres").unwrap();
        cfg.set("seed", "42").unwrap();
        assert_eq!(NetworkConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(cfg.set("bogus", "1").is_err());
        assert!(cfg.set("feat_blocks", "many").is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetworkConfig::default();
        cfg.qk_channels = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::default();
        cfg.num_fields = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_zeroes_offsets_and_scale() {
        let cfg = NetworkConfig::tiny();
        let a = init_weights(&cfg, 7).unwrap();
        let b = init_weights(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_weights(&cfg, 8).unwrap());
        for (name, t) in a.params() {
            if name.contains(".offset") || name.ends_with("scale") || name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert_eq!(a.get("attn.scale").unwrap().data(), &[0.0]);
    }

    #[test]
    fn truncated_and_corrupt_files_rejected() {
        let w = init_weights(&NetworkConfig::tiny(), 1).unwrap();
        let bytes = encode_weights(&w);
        assert_eq!(decode_weights(&bytes).unwrap(), w);
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_weights(&bytes[..cut]), Err(Error::WeightFormat(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_weights(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_weights(&bad).unwrap_err().to_string().contains("version"));
    }
}
