//! Deformable feature alignment: DfRes and ΔDfRes blocks.
//!
//! All blocks take the reference-field feature and a supporting-field feature
//! of identical shape `[C, h, w]` and return an aligned supporting feature of
//! the same shape. Offset maps are `[18, h, w]`: for tap `t` of the 3×3 kernel
//! (row-major), channel `2t` holds the vertical and `2t+1` the horizontal
//! displacement in pixels.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{activate, conv_specs, Bound, Conv, Init, ParamSpec, RESIDUAL_GAIN};
use crate::tensor::Float;

pub const OFFSET_CHANNELS: usize = 18;

/// How a DfRes block obtains the offsets of its second deformable layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OffsetMode {
    /// One convolution over `concat(ref, sup)` drives both deformable layers.
    Regular,
    /// Each deformable layer re-estimates offsets from `concat(ref, current feature)`.
    DfRes,
}

/// Alignment block family used by every chain of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AlignMode {
    DfRes,
    DeltaDfRes,
    RegularOffsets,
}

impl AlignMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignMode::DfRes => "dfres",
            AlignMode::DeltaDfRes => "delta_dfres",
            AlignMode::RegularOffsets => "regular_offsets",
        }
    }
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dfres" => Ok(AlignMode::DfRes),
            "delta_dfres" => Ok(AlignMode::DeltaDfRes),
            "regular_offsets" | "regular" => Ok(AlignMode::RegularOffsets),
            other => Err(Error::Config(format!("unknown align_mode `{other}`"))),
        }
    }
}

/// Bound 3×3 deformable convolution.
#[derive(Clone, Copy, Debug)]
pub struct DeformConv2d {
    pub weight: Var,
    pub bias: Var,
}

impl DeformConv2d {
    pub fn specs(prefix: &str, c_in: usize, c_out: usize) -> Vec<ParamSpec> {
        conv_specs(prefix, c_in, c_out, 3, Init::He(RESIDUAL_GAIN))
    }

    pub fn bind(params: &Bound, prefix: &str) -> Result<Self> {
        Ok(DeformConv2d {
            weight: params.get(&format!("{prefix}.weight"))?,
            bias: params.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, x: Var, offsets: Var) -> Result<Var> {
        g.deform_conv2d(x, offsets, self.weight, Some(self.bias))
    }
}

/// Offsets from a 3×3 convolution over the channel concatenation of `reference` and `feature`.
pub fn estimate_offsets<T: Float>(g: &Graph<T>, conv: &Conv, reference: Var, feature: Var) -> Result<Var> {
    let (rs, fs) = (g.shape(reference), g.shape(feature));
    if rs != fs {
        return Err(Error::Shape(format!("reference {rs:?} and feature {fs:?} differ")));
    }
    let both = g.concat(&[reference, feature], 0)?;
    conv.forward(g, both)
}

fn offset_specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
    // Zero init: a fresh block samples the regular 3×3 grid.
    conv_specs(prefix, 2 * channels, OFFSET_CHANNELS, 3, Init::Zeros)
}

/// Residual block whose two convolutions are deformable.
#[derive(Clone, Copy, Debug)]
pub struct DfResBlock {
    pub offset: Conv,
    /// Present in [`OffsetMode::DfRes`]: re-estimates offsets for the second layer.
    pub offset_refine: Option<Conv>,
    pub deform1: DeformConv2d,
    pub deform2: DeformConv2d,
}

impl DfResBlock {
    pub fn specs(prefix: &str, channels: usize, mode: OffsetMode) -> Vec<ParamSpec> {
        let mut v = offset_specs(&format!("{prefix}.offset"), channels);
        if mode == OffsetMode::DfRes {
            v.extend(offset_specs(&format!("{prefix}.offset_refine"), channels));
        }
        v.extend(DeformConv2d::specs(&format!("{prefix}.deform1"), channels, channels));
        v.extend(DeformConv2d::specs(&format!("{prefix}.deform2"), channels, channels));
        v
    }

    pub fn bind(params: &Bound, prefix: &str, mode: OffsetMode) -> Result<Self> {
        Ok(DfResBlock {
            offset: Conv::bind(params, &format!("{prefix}.offset"))?,
            offset_refine: match mode {
                OffsetMode::DfRes => Some(Conv::bind(params, &format!("{prefix}.offset_refine"))?),
                OffsetMode::Regular => None,
            },
            deform1: DeformConv2d::bind(params, &format!("{prefix}.deform1"))?,
            deform2: DeformConv2d::bind(params, &format!("{prefix}.deform2"))?,
        })
    }

    pub fn mode(&self) -> OffsetMode {
        if self.offset_refine.is_some() {
            OffsetMode::DfRes
        } else {
            OffsetMode::Regular
        }
    }

    /// Offsets for both deformable layers, in the order they are applied.
    pub fn offsets<T: Float>(&self, g: &Graph<T>, reference: Var, support: Var) -> Result<(Var, Var, Var)> {
        let first = estimate_offsets(g, &self.offset, reference, support)?;
        let mid = activate(g, self.deform1.forward(g, support, first)?)?;
        let second = match &self.offset_refine {
            Some(conv) => estimate_offsets(g, conv, reference, mid)?,
            None => first,
        };
        Ok((first, mid, second))
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, reference: Var, support: Var) -> Result<Var> {
        let (_, mid, second) = self.offsets(g, reference, support)?;
        let y = self.deform2.forward(g, mid, second)?;
        g.add(support, y)
    }
}

/// Differential block: adds an offset delta to the offsets carried along the chain.
#[derive(Clone, Copy, Debug)]
pub struct DeltaDfResBlock {
    pub offset_delta: Conv,
    pub deform: DeformConv2d,
}

impl DeltaDfResBlock {
    pub fn specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
        let mut v = offset_specs(&format!("{prefix}.offset_delta"), channels);
        v.extend(DeformConv2d::specs(&format!("{prefix}.deform"), channels, channels));
        v
    }

    pub fn bind(params: &Bound, prefix: &str) -> Result<Self> {
        Ok(DeltaDfResBlock {
            offset_delta: Conv::bind(params, &format!("{prefix}.offset_delta"))?,
            deform: DeformConv2d::bind(params, &format!("{prefix}.deform"))?,
        })
    }

    /// Returns the aligned feature and the updated accumulated offsets.
    pub fn forward<T: Float>(&self, g: &Graph<T>, reference: Var, support: Var, accumulated: Var) -> Result<(Var, Var)> {
        let delta = estimate_offsets(g, &self.offset_delta, reference, support)?;
        let offsets = g.add(accumulated, delta)?;
        let y = self.deform.forward(g, support, offsets)?;
        Ok((g.add(support, y)?, offsets))
    }
}

/// The blocks aligning one supporting field to the reference.
#[derive(Clone, Debug)]
pub enum AlignChain {
    DfRes(Vec<DfResBlock>),
    Delta(Vec<DeltaDfResBlock>),
}

impl AlignChain {
    pub fn specs(prefix: &str, channels: usize, blocks: usize, mode: AlignMode) -> Vec<ParamSpec> {
        (0..blocks)
            .flat_map(|b| {
                let p = format!("{prefix}.{b}");
                match mode {
                    AlignMode::DfRes => DfResBlock::specs(&p, channels, OffsetMode::DfRes),
                    AlignMode::RegularOffsets => DfResBlock::specs(&p, channels, OffsetMode::Regular),
                    AlignMode::DeltaDfRes => DeltaDfResBlock::specs(&p, channels),
                }
            })
            .collect()
    }

    pub fn bind(params: &Bound, prefix: &str, blocks: usize, mode: AlignMode) -> Result<Self> {
        let names = (0..blocks).map(|b| format!("{prefix}.{b}"));
        Ok(match mode {
            AlignMode::DfRes => AlignChain::DfRes(names.map(|p| DfResBlock::bind(params, &p, OffsetMode::DfRes)).collect::<Result<_>>()?),
            AlignMode::RegularOffsets => {
                AlignChain::DfRes(names.map(|p| DfResBlock::bind(params, &p, OffsetMode::Regular)).collect::<Result<_>>()?)
            }
            AlignMode::DeltaDfRes => AlignChain::Delta(names.map(|p| DeltaDfResBlock::bind(params, &p)).collect::<Result<_>>()?),
        })
    }

    /// Runs the chain; each block's output replaces the feature fed to the next one.
    pub fn forward<T: Float>(&self, g: &Graph<T>, reference: Var, support: Var) -> Result<Var> {
        Ok(self.forward_traced(g, reference, support)?.0)
    }

    /// Like [`forward`](Self::forward), also returning the per-block offset maps
    /// (accumulated offsets for ΔDfRes chains, second-layer offsets otherwise).
    pub fn forward_traced<T: Float>(&self, g: &Graph<T>, reference: Var, support: Var) -> Result<(Var, Vec<Var>)> {
        let mut feat = support;
        let mut trace = Vec::new();
        match self {
            AlignChain::DfRes(blocks) => {
                for b in blocks {
                    let (_, mid, second) = b.offsets(g, reference, feat)?;
                    let y = b.deform2.forward(g, mid, second)?;
                    feat = g.add(feat, y)?;
                    trace.push(second);
                }
            }
            AlignChain::Delta(blocks) => {
                let mut shape = g.shape(feat);
                shape[0] = OFFSET_CHANNELS;
                let mut acc = g.input(&crate::tensor::Tensor::zeros(&shape));
                for b in blocks {
                    let (out, offsets) = b.forward(g, reference, feat, acc)?;
                    feat = out;
                    acc = offsets;
                    trace.push(offsets);
                }
            }
        }
        Ok((feat, trace))
    }
}
