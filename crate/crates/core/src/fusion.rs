//! Clip-level sum fusion and channel-interleaved convolutional fusion.
//!
//! Channel convention for [`interleave`]: counting channels from 1, output
//! channel `2d-1` holds channel `d` of the generated (second) map and output
//! channel `2d` holds channel `d` of the infrared (first) map. In 0-based
//! storage the generated map therefore sits in the even slots.

use crate::error::{Error, Result};
use crate::tape::{interleave_channels, Tape, Var};
use crate::tensor::{self, Tensor};

/// An `H×W×D` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::Dimension { op: "feature map", lhs: values.shape().to_vec(), rhs: vec![] });
        }
        if !values.all_finite() {
            return Err(Error::Contract("feature map contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new([height, width, channels], data)?)
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height(), self.width(), self.channels()]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    pub fn data(&self) -> &[f64] {
        self.values.data()
    }
}

/// The `T` clip-level maps of one video, all of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipStack {
    clips: Vec<FeatureMap>,
}

impl ClipStack {
    pub fn new(clips: Vec<FeatureMap>) -> Result<Self> {
        let first = clips.first().ok_or_else(|| Error::Config("clip stack needs at least one clip".into()))?;
        let dims = first.dims();
        if let Some(bad) = clips.iter().find(|c| c.dims() != dims) {
            return Err(Error::Dimension { op: "clip stack", lhs: dims.to_vec(), rhs: bad.dims().to_vec() });
        }
        Ok(Self { clips })
    }

    pub fn clips(&self) -> &[FeatureMap] {
        &self.clips
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.clips[0].dims()
    }
}

/// Per-location mean of the clip maps (the clip sum divided by `T`).
pub fn sum_fuse(stack: &ClipStack) -> FeatureMap {
    let t = stack.len() as f64;
    let first = &stack.clips[0];
    let mut acc = first.data().to_vec();
    for clip in &stack.clips[1..] {
        for (a, &x) in acc.iter_mut().zip(clip.data()) {
            *a += x;
        }
    }
    for a in &mut acc {
        *a /= t;
    }
    let [h, w, d] = first.dims();
    FeatureMap::from_vec(h, w, d, acc).expect("mean of finite maps")
}

/// Stacks `infrared` and `generated` channel-wise into an `H×W×2D` tensor.
pub fn interleave(infrared: &FeatureMap, generated: &FeatureMap) -> Result<Tensor> {
    interleave_channels(generated.tensor(), infrared.tensor())
}

/// Inverse of [`interleave`]: returns `(infrared, generated)`.
pub fn deinterleave(stacked: &Tensor) -> Result<(FeatureMap, FeatureMap)> {
    let s = stacked.shape();
    if s.len() != 3 || !s[2].is_multiple_of(2) {
        return Err(Error::Dimension { op: "deinterleave", lhs: s.to_vec(), rhs: vec![] });
    }
    let d = s[2] / 2;
    let mut generated = Vec::with_capacity(stacked.len() / 2);
    let mut infrared = Vec::with_capacity(stacked.len() / 2);
    for pair in stacked.data().chunks(2) {
        generated.push(pair[0]);
        infrared.push(pair[1]);
    }
    Ok((FeatureMap::from_vec(s[0], s[1], d, infrared)?, FeatureMap::from_vec(s[0], s[1], d, generated)?))
}

fn check_fusion_filter(dims: [usize; 3], filter: &[usize], bias: &[usize]) -> Result<()> {
    let d = dims[2];
    if filter != [1, 1, 2 * d, d] {
        return Err(Error::Dimension { op: "conv_fuse filter", lhs: dims.to_vec(), rhs: filter.to_vec() });
    }
    if bias != [d] {
        return Err(Error::Dimension { op: "conv_fuse bias", lhs: dims.to_vec(), rhs: bias.to_vec() });
    }
    Ok(())
}

/// Learnable `1×1×2D×D` fusion of two same-shaped maps.
pub fn conv_fuse(infrared: &FeatureMap, generated: &FeatureMap, filter: &Tensor, bias: &Tensor) -> Result<FeatureMap> {
    if infrared.dims() != generated.dims() {
        return Err(Error::Dimension {
            op: "conv_fuse",
            lhs: infrared.dims().to_vec(),
            rhs: generated.dims().to_vec(),
        });
    }
    check_fusion_filter(infrared.dims(), filter.shape(), bias.shape())?;
    let stacked = interleave(infrared, generated)?;
    FeatureMap::new(tensor::conv1x1(&stacked, filter, bias)?)
}

/// Tape-recorded [`conv_fuse`].
pub fn conv_fuse_on(tape: &Tape, infrared: Var, generated: Var, filter: Var, bias: Var) -> Result<Var> {
    let dims = tape.shape(infrared);
    if dims.len() != 3 || dims != tape.shape(generated) {
        return Err(Error::Dimension { op: "conv_fuse", lhs: dims, rhs: tape.shape(generated) });
    }
    check_fusion_filter([dims[0], dims[1], dims[2]], &tape.shape(filter), &tape.shape(bias))?;
    let stacked = tape.interleave(generated, infrared)?;
    tape.conv1x1(stacked, filter, bias)
}
