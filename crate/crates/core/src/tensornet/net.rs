//! Pose-regression network: a small convolutional trunk shared by up to
//! three heads, with three ways of wiring the two input images into it.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::Rng;

use super::graph::{ConvSpec, Graph, Tensor, Var};
use super::scalar::Scalar;
use crate::dataset::{checked_payload, Cursor};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scene::{Image, PackedImage};

pub const MODEL_MAGIC: &[u8; 4] = b"VSNN";
pub const MODEL_VERSION: u16 = 2;

/// Input side length used by the desk configuration.
pub const DEFAULT_RESOLUTION: usize = 48;

const CONV: ConvSpec = ConvSpec { stride: 2, pad: 1 };
const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeadId {
    RegLsd,
    RegSsd,
    Cls,
}

impl HeadId {
    pub const ALL: [HeadId; 3] = [HeadId::RegLsd, HeadId::RegSsd, HeadId::Cls];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadId::RegLsd => "reg_lsd",
            HeadId::RegSsd => "reg_ssd",
            HeadId::Cls => "cls",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            HeadId::RegLsd => "head_lsd",
            HeadId::RegSsd => "head_ssd",
            HeadId::Cls => "head_cls",
        }
    }

    pub fn output_len(self) -> usize {
        match self {
            HeadId::Cls => 2,
            _ => 6,
        }
    }

    pub fn is_regression(self) -> bool {
        self != HeadId::Cls
    }
}

/// Subset of heads, as a bit set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct HeadSet(u8);

impl HeadSet {
    pub fn of(heads: &[HeadId]) -> Self {
        Self(heads.iter().fold(0, |b, h| b | (1 << h.index())))
    }

    pub fn all() -> Self {
        Self(0b111)
    }

    pub fn contains(self, h: HeadId) -> bool {
        self.0 & (1 << h.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: HeadSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = HeadId> {
        HeadId::ALL.into_iter().filter(move |h| self.contains(*h))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(b: u8) -> Option<Self> {
        (b & !0b111 == 0).then_some(Self(b))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum EncoderVariant {
    /// Both images stacked channel-wise before a single conv stack.
    Single,
    /// The whole conv stack applied to each image; pooled features joined.
    Siamese,
    /// Two shared early layers per image, depth-wise join, two more layers.
    #[default]
    SharedConcat,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 3] = [
        EncoderVariant::Single,
        EncoderVariant::Siamese,
        EncoderVariant::SharedConcat,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderVariant::Single => "single",
            EncoderVariant::Siamese => "siamese",
            EncoderVariant::SharedConcat => "shared-concat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub variant: EncoderVariant,
    pub width: usize,
    pub height: usize,
    /// Output channels of the four conv layers.
    pub channels: [usize; 4],
    /// Hidden width of the regression heads.
    pub hidden: usize,
    /// Side of the average-pooling grid over the last conv map; 1 is
    /// global pooling.
    pub pool_grid: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::SharedConcat,
            width: DEFAULT_RESOLUTION,
            height: DEFAULT_RESOLUTION,
            channels: [8, 16, 32, 64],
            hidden: 64,
            pool_grid: 1,
        }
    }
}

impl NetConfig {
    pub fn with_variant(mut self, v: EncoderVariant) -> Self {
        self.variant = v;
        self
    }

    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    /// Length of the pooled feature vector fed to the heads.
    pub fn feature_dim(&self) -> usize {
        let cells = self.channels[3] * self.pool_grid * self.pool_grid;
        match self.variant {
            EncoderVariant::Siamese => 2 * cells,
            _ => cells,
        }
    }

    /// Input channels of each conv layer.
    fn conv_inputs(&self) -> [usize; 4] {
        let c = self.channels;
        match self.variant {
            EncoderVariant::Single => [6, c[0], c[1], c[2]],
            EncoderVariant::Siamese => [3, c[0], c[1], c[2]],
            EncoderVariant::SharedConcat => [3, c[0], 2 * c[1], c[2]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 || self.channels.contains(&0) || self.hidden == 0 || self.pool_grid == 0 {
            return Err(Error::InvalidConfig(format!("{self:?}")));
        }
        if self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return Err(Error::InvalidConfig("resolution too large".into()));
        }
        Ok(())
    }
}

/// Named slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn is_trunk(&self) -> bool {
        self.name.starts_with("trunk.")
    }
}

/// Ordered parameter groups: trunk first, then heads in [`HeadId`] order.
pub fn layout(cfg: &NetConfig, heads: HeadSet) -> Vec<ParamGroup> {
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    let ins = cfg.conv_inputs();
    for (i, (&cin, &cout)) in ins.iter().zip(&cfg.channels).enumerate() {
        shapes.push((format!("trunk.conv{}.weight", i + 1), vec![cout, cin, KERNEL, KERNEL]));
        shapes.push((format!("trunk.conv{}.bias", i + 1), vec![cout]));
    }
    let d = cfg.feature_dim();
    for h in heads.iter() {
        let p = h.prefix();
        if h.is_regression() {
            shapes.push((format!("{p}.fc1.weight"), vec![cfg.hidden, d]));
            shapes.push((format!("{p}.fc1.bias"), vec![cfg.hidden]));
            shapes.push((format!("{p}.fc2.weight"), vec![6, cfg.hidden]));
            shapes.push((format!("{p}.fc2.bias"), vec![6]));
        } else {
            shapes.push((format!("{p}.fc.weight"), vec![2, d]));
            shapes.push((format!("{p}.fc.bias"), vec![2]));
        }
    }
    let mut offset = 0;
    shapes
        .into_iter()
        .map(|(name, shape)| {
            let g = ParamGroup {
                name,
                shape,
                offset,
            };
            offset += g.len();
            g
        })
        .collect()
}

pub fn param_count(cfg: &NetConfig, heads: HeadSet) -> usize {
    layout(cfg, heads).iter().map(ParamGroup::len).sum()
}

/// Per-channel input statistics, in units of the [0, 1] intensity range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for InputNorm {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl InputNorm {
    /// Statistics over every pixel of every image, via exact 8-bit
    /// histograms so the result does not depend on accumulation order.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a PackedImage>) -> Result<Self> {
        let mut hist = [[0u64; 256]; 3];
        for img in images {
            for px in img.data.chunks_exact(3) {
                for c in 0..3 {
                    hist[c][px[c] as usize] += 1;
                }
            }
        }
        let mut out = Self::default();
        for c in 0..3 {
            let n: u64 = hist[c].iter().sum();
            if n == 0 {
                return Err(Error::EmptyDataset);
            }
            let mean = (0..256).map(|v| hist[c][v] as f64 * v as f64 / 255.0).sum::<f64>() / n as f64;
            let var = (0..256)
                .map(|v| {
                    let d = v as f64 / 255.0 - mean;
                    hist[c][v] as f64 * d * d
                })
                .sum::<f64>()
                / n as f64;
            out.mean[c] = mean;
            out.std[c] = var.sqrt().max(1e-3);
        }
        Ok(out)
    }
}

/// Learnable loss-balance scalars, one per balanced term.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBalance {
    pub s_hat: Vec<f64>,
}

impl LossBalance {
    pub fn zeros(n: usize) -> Self {
        Self { s_hat: vec![0.0; n] }
    }
}

/// Normalized network input for one image pair, `[3, H, W]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInput {
    pub width: usize,
    pub height: usize,
    pub reference: Vec<f64>,
    pub current: Vec<f64>,
}

fn to_chw(norm: &InputNorm, img: &PackedImage) -> Vec<f64> {
    let n = img.width * img.height;
    let mut out = vec![0.0; 3 * n];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = (px[c] as f64 / 255.0 - norm.mean[c]) / norm.std[c];
        }
    }
    out
}

impl PairInput {
    pub fn from_packed(norm: &InputNorm, reference: &PackedImage, current: &PackedImage) -> Result<Self> {
        if reference.width != current.width || reference.height != current.height {
            return Err(Error::ShapeMismatch("image pair sizes differ".into()));
        }
        Ok(Self {
            width: reference.width,
            height: reference.height,
            reference: to_chw(norm, reference),
            current: to_chw(norm, current),
        })
    }

    /// Rendered images are quantized to 8 bits first, matching stored data.
    pub fn from_images(norm: &InputNorm, reference: &Image, current: &Image) -> Result<Self> {
        Self::from_packed(norm, &reference.pack(), &current.pack())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: NetConfig,
    pub heads: HeadSet,
    pub groups: Vec<ParamGroup>,
    pub values: Vec<f64>,
    /// Loss-balance scalar per head, indexed by [`HeadId::index`].
    pub s_hat: [f64; 3],
    pub norm: InputNorm,
}

impl ModelParams {
    /// Fan-in scaled uniform weights, zero biases. The last layer of each
    /// regression head starts ten times smaller so early outputs stay near
    /// zero.
    pub fn init(config: NetConfig, heads: HeadSet, seed: u64) -> Result<Self> {
        config.validate()?;
        if heads.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one head".into()));
        }
        let groups = layout(&config, heads);
        let total = groups.iter().map(ParamGroup::len).sum();
        let mut values = vec![0.0; total];
        let root = Stream::from_seed(seed).derive("init");
        for g in &groups {
            if g.name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = g.shape[1..].iter().product();
            let mut bound = (6.0 / fan_in as f64).sqrt();
            if g.name.ends_with(".fc2.weight") {
                bound *= 0.1;
            }
            let mut rng = root.derive(&g.name);
            for v in &mut values[g.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(Self {
            config,
            heads,
            groups,
            values,
            s_hat: [0.0; 3],
            norm: InputNorm::default(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_values(&self, name: &str) -> Option<&[f64]> {
        self.group(name).map(|g| &self.values[g.range()])
    }

    pub fn group_values_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.group(name)?.range();
        Some(&mut self.values[r])
    }

    /// Range of the flat vector holding trunk parameters.
    pub fn trunk_range(&self) -> Range<usize> {
        let end = self
            .groups
            .iter()
            .filter(|g| g.is_trunk())
            .map(|g| g.offset + g.len())
            .max()
            .unwrap_or(0);
        0..end
    }

    pub fn head_range(&self, h: HeadId) -> Option<Range<usize>> {
        let p = format!("{}.", h.prefix());
        let gs: Vec<_> = self.groups.iter().filter(|g| g.name.starts_with(&p)).collect();
        Some(gs.first()?.offset..gs.last()?.range().end)
    }

    /// Groups belonging to the given heads (trunk excluded).
    pub fn head_mask(&self, heads: HeadSet) -> Vec<bool> {
        self.groups
            .iter()
            .map(|g| heads.iter().any(|h| g.name.starts_with(&format!("{}.", h.prefix()))))
            .collect()
    }

    pub fn balance(&self) -> LossBalance {
        LossBalance {
            s_hat: self.s_hat.to_vec(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                expected: self.values.len(),
                found: flat.len(),
            });
        }
        self.values.copy_from_slice(flat);
        Ok(())
    }

    /// Copy keeping only `heads` (which must already be present).
    pub fn pruned(&self, heads: HeadSet) -> Result<Self> {
        if heads.is_empty() || !heads.is_subset(self.heads) {
            return Err(Error::InvalidConfig("pruned head set must be a non-empty subset".into()));
        }
        let groups = layout(&self.config, heads);
        let mut values = Vec::with_capacity(groups.iter().map(ParamGroup::len).sum());
        for g in &groups {
            values.extend_from_slice(self.group_values(&g.name).expect("subset layout"));
        }
        let mut s_hat = [0.0; 3];
        for h in heads.iter() {
            s_hat[h.index()] = self.s_hat[h.index()];
        }
        Ok(Self {
            config: self.config,
            heads,
            groups,
            values,
            s_hat,
            norm: self.norm,
        })
    }

    /// Graph leaves for every group; `values` may be any scalar type so the
    /// same binding serves plain and dual evaluation.
    pub fn bind<S: Scalar>(groups: &[ParamGroup], g: &mut Graph<S>, values: &[S], trainable: &[bool]) -> Vec<Var> {
        groups
            .iter()
            .zip(trainable)
            .map(|(grp, &t)| {
                let tensor = Tensor {
                    shape: grp.shape.clone(),
                    data: values[grp.range()].to_vec(),
                };
                if t {
                    g.param(tensor)
                } else {
                    g.constant(tensor)
                }
            })
            .collect()
    }

    /// Pooled trunk features and the requested head outputs, sharing one
    /// trunk evaluation.
    pub fn forward_graph<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        vars: &[Var],
        input: &PairInput,
        heads: &[HeadId],
    ) -> Result<Vec<Var>> {
        forward_graph(&self.config, &self.groups, g, vars, input, heads)
    }

    /// Plain evaluation of several heads on one pair.
    pub fn predict(&self, input: &PairInput, heads: &[HeadId]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::<f64>::new();
        let vars = Self::bind(&self.groups, &mut g, &self.values, &vec![false; self.groups.len()]);
        let outs = self.forward_graph(&mut g, &vars, input, heads)?;
        let res: Vec<Vec<f64>> = outs.iter().map(|&v| g.value(v).data.clone()).collect();
        debug_assert!(res.iter().flatten().all(|v| v.is_finite()), "non-finite network output");
        Ok(res)
    }

    /// Pooled trunk features for one pair.
    pub fn features(&self, input: &PairInput) -> Result<Vec<f64>> {
        let mut g = Graph::<f64>::new();
        let vars = Self::bind(&self.groups, &mut g, &self.values, &vec![false; self.groups.len()]);
        let f = trunk_graph(&self.config, &self.groups, &mut g, &vars, input)?;
        Ok(g.value(f).data.clone())
    }

    /// One head's output for an 8-bit image pair.
    pub fn forward(&self, pair: (&PackedImage, &PackedImage), head: HeadId) -> Result<Tensor<f64>> {
        let input = PairInput::from_packed(&self.norm, pair.0, pair.1)?;
        let out = self.predict(&input, &[head])?.remove(0);
        Ok(Tensor {
            shape: vec![out.len()],
            data: out,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MODEL_MAGIC);
        b.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        b.push(self.config.variant.tag());
        b.push(self.heads.bits());
        b.extend_from_slice(&(self.config.width as u16).to_le_bytes());
        b.extend_from_slice(&(self.config.height as u16).to_le_bytes());
        for &c in &self.config.channels {
            b.extend_from_slice(&(c as u16).to_le_bytes());
        }
        b.extend_from_slice(&(self.config.hidden as u16).to_le_bytes());
        b.extend_from_slice(&(self.config.pool_grid as u16).to_le_bytes());
        for v in self.norm.mean.iter().chain(&self.norm.std).chain(&self.s_hat) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for g in &self.groups {
            b.extend_from_slice(&(g.name.len() as u16).to_le_bytes());
            b.extend_from_slice(g.name.as_bytes());
            b.push(g.shape.len() as u8);
            for &d in &g.shape {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &self.values[g.range()] {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let payload = checked_payload(buf, MODEL_MAGIC, MODEL_VERSION)?;
        let mut c = Cursor::new(payload);
        c.take(6)?;
        let variant = EncoderVariant::from_tag(c.u8()?)
            .ok_or_else(|| Error::Format("unknown encoder variant".into()))?;
        let heads = HeadSet::from_bits(c.u8()?).ok_or_else(|| Error::Format("bad head set".into()))?;
        let width = c.u16()? as usize;
        let height = c.u16()? as usize;
        let mut channels = [0; 4];
        for ch in &mut channels {
            *ch = c.u16()? as usize;
        }
        let hidden = c.u16()? as usize;
        let pool_grid = c.u16()? as usize;
        let config = NetConfig {
            variant,
            width,
            height,
            channels,
            hidden,
            pool_grid,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut norm = InputNorm::default();
        for v in norm.mean.iter_mut().chain(norm.std.iter_mut()) {
            *v = c.f64()?;
        }
        let mut s_hat = [0.0; 3];
        for v in &mut s_hat {
            *v = c.f64()?;
        }
        let expected = layout(&config, heads);
        let count = c.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Format(format!(
                "expected {} parameter groups, found {count}",
                expected.len()
            )));
        }
        let mut values = Vec::with_capacity(expected.iter().map(ParamGroup::len).sum());
        for g in &expected {
            let name_len = c.u16()? as usize;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|_| Error::Format("group name is not utf-8".into()))?;
            let ndim = c.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(c.u32()? as usize);
            }
            if name != g.name || shape != g.shape {
                return Err(Error::Format(format!(
                    "group {name} {shape:?} does not match expected {} {:?}",
                    g.name, g.shape
                )));
            }
            for _ in 0..g.len() {
                values.push(c.f64()?);
            }
        }
        if c.remaining() != 0 {
            return Err(Error::Format("trailing bytes in model payload".into()));
        }
        Ok(Self {
            config,
            heads,
            groups: expected,
            values,
            s_hat,
            norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn group_var(groups: &[ParamGroup], vars: &[Var], name: &str) -> Result<Var> {
    groups
        .iter()
        .position(|g| g.name == name)
        .map(|i| vars[i])
        .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter group {name}")))
}

fn conv_layer<S: Scalar>(
    groups: &[ParamGroup],
    g: &mut Graph<S>,
    vars: &[Var],
    x: Var,
    layer: usize,
    standardize: bool,
) -> Result<Var> {
    let w = group_var(groups, vars, &format!("trunk.conv{layer}.weight"))?;
    let b = group_var(groups, vars, &format!("trunk.conv{layer}.bias"))?;
    let mut y = g.conv2d(x, w, b, CONV)?;
    if standardize {
        y = g.channel_std(y)?;
    }
    Ok(g.relu(y))
}

/// Layers 1–3 are standardized per channel before the rectifier; layer 4
/// feeds the pool directly so pooled features keep their scale.
fn conv_chain<S: Scalar>(
    groups: &[ParamGroup],
    g: &mut Graph<S>,
    vars: &[Var],
    mut x: Var,
    layers: Range<usize>,
) -> Result<Var> {
    for l in layers {
        x = conv_layer(groups, g, vars, x, l, l < 4)?;
    }
    Ok(x)
}

/// Pooled trunk features for one pair.
pub(crate) fn trunk_graph<S: Scalar>(
    cfg: &NetConfig,
    groups: &[ParamGroup],
    g: &mut Graph<S>,
    vars: &[Var],
    input: &PairInput,
) -> Result<Var> {
    if input.width != cfg.width || input.height != cfg.height {
        return Err(Error::ShapeMismatch(format!(
            "input {}x{} but network expects {}x{}",
            input.width, input.height, cfg.width, cfg.height
        )));
    }
    let shape = vec![3, cfg.height, cfg.width];
    let r = g.constant(Tensor::from_f64(shape.clone(), &input.reference)?);
    let c = g.constant(Tensor::from_f64(shape, &input.current)?);
    let feat = match cfg.variant {
        EncoderVariant::Single => {
            let x = g.concat(r, c)?;
            let x = conv_chain(groups, g, vars, x, 1..5)?;
            g.adaptive_avg_pool(x, cfg.pool_grid)?
        }
        EncoderVariant::Siamese => {
            let fr = conv_chain(groups, g, vars, r, 1..5)?;
            let fc = conv_chain(groups, g, vars, c, 1..5)?;
            let pr = g.adaptive_avg_pool(fr, cfg.pool_grid)?;
            let pc = g.adaptive_avg_pool(fc, cfg.pool_grid)?;
            g.concat(pr, pc)?
        }
        EncoderVariant::SharedConcat => {
            let fr = conv_chain(groups, g, vars, r, 1..3)?;
            let fc = conv_chain(groups, g, vars, c, 1..3)?;
            let x = g.concat(fr, fc)?;
            let x = conv_chain(groups, g, vars, x, 3..5)?;
            g.adaptive_avg_pool(x, cfg.pool_grid)?
        }
    };
    Ok(feat)
}

/// Output of one head applied to pooled features.
pub(crate) fn head_graph<S: Scalar>(
    groups: &[ParamGroup],
    g: &mut Graph<S>,
    vars: &[Var],
    feat: Var,
    h: HeadId,
) -> Result<Var> {
    let p = h.prefix();
    if h.is_regression() {
        let w1 = group_var(groups, vars, &format!("{p}.fc1.weight"))?;
        let b1 = group_var(groups, vars, &format!("{p}.fc1.bias"))?;
        let w2 = group_var(groups, vars, &format!("{p}.fc2.weight"))?;
        let b2 = group_var(groups, vars, &format!("{p}.fc2.bias"))?;
        let h1 = g.linear(feat, w1, b1)?;
        let h1 = g.relu(h1);
        g.linear(h1, w2, b2)
    } else {
        let w = group_var(groups, vars, &format!("{p}.fc.weight"))?;
        let b = group_var(groups, vars, &format!("{p}.fc.bias"))?;
        g.linear(feat, w, b)
    }
}

pub(crate) fn forward_graph<S: Scalar>(
    cfg: &NetConfig,
    groups: &[ParamGroup],
    g: &mut Graph<S>,
    vars: &[Var],
    input: &PairInput,
    heads: &[HeadId],
) -> Result<Vec<Var>> {
    let feat = trunk_graph(cfg, groups, g, vars, input)?;
    heads.iter().map(|&h| head_graph(groups, g, vars, feat, h)).collect()
}
