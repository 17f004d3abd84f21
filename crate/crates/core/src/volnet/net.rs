//! Compiled network layout with forward and exact reverse passes.

use serde::{Deserialize, Serialize};

use super::spec::NetSpec;
use super::tensor::{
    conv3d_backward, conv3d_forward, global_average_pool, relu_backward_in_place, relu_in_place,
    ConvGeom, Tensor,
};
use crate::error::{Error, Result};

/// A named contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub fan_in: usize,
    pub is_bias: bool,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    name: String,
    geom: ConvGeom,
    w_off: usize,
    b_off: usize,
}

impl ConvLayer {
    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.w_off..self.w_off + self.geom.weight_len()]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.b_off..self.b_off + self.geom.out_channels]
    }

    fn forward(&self, params: &[f64], x: &Tensor) -> Result<Tensor> {
        conv3d_forward(x, &self.geom, self.weights(params), self.bias(params))
    }

    fn backward(&self, params: &[f64], x: &Tensor, d_out: &Tensor, grad: &mut [f64], want_input: bool) -> Option<Tensor> {
        let wl = self.geom.weight_len();
        let (dw, rest) = grad[self.w_off..].split_at_mut(wl);
        debug_assert_eq!(self.b_off, self.w_off + wl);
        let db = &mut rest[..self.geom.out_channels];
        conv3d_backward(x, &self.geom, self.weights(params), d_out, dw, db, want_input)
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv1: ConvLayer,
    conv2: ConvLayer,
    proj: Option<ConvLayer>,
    name: String,
}

#[derive(Debug, Clone)]
pub struct Net {
    spec: NetSpec,
    stem: ConvLayer,
    blocks: Vec<Block>,
    head_w: usize,
    head_b: usize,
    head_in: usize,
    layout: Vec<ParamBlock>,
    n_params: usize,
}

/// Activations kept from the forward pass for the reverse pass.
#[derive(Debug, Clone)]
pub struct Cache {
    input: Tensor,
    stem: Tensor,
    blocks: Vec<(Tensor, Tensor)>,
    pooled: Vec<f64>,
}

impl Cache {
    /// On/off state of every ReLU unit, in layer order.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out: Vec<bool> = self.stem.data.iter().map(|&v| v > 0.0).collect();
        for (h1, o) in &self.blocks {
            out.extend(h1.data.iter().map(|&v| v > 0.0));
            out.extend(o.data.iter().map(|&v| v > 0.0));
        }
        out
    }
}

fn finite_or(t: &Tensor, layer: &str) -> Result<()> {
    if t.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericOverflow { layer: layer.to_string() })
    }
}

impl Net {
    pub fn new(spec: &NetSpec) -> Result<Self> {
        if spec.in_channels == 0 || spec.stem.out_channels == 0 || spec.block_kernel == 0 {
            return Err(Error::Config("channel counts and kernels must be positive".into()));
        }
        let mut layout = Vec::new();
        let mut offset = 0usize;
        let mut conv = |name: String, geom: ConvGeom| {
            let w_off = offset;
            layout.push(ParamBlock {
                name: format!("{name}.weight"),
                offset: w_off,
                len: geom.weight_len(),
                fan_in: geom.fan_in(),
                is_bias: false,
            });
            offset += geom.weight_len();
            let b_off = offset;
            layout.push(ParamBlock {
                name: format!("{name}.bias"),
                offset: b_off,
                len: geom.out_channels,
                fan_in: geom.fan_in(),
                is_bias: true,
            });
            offset += geom.out_channels;
            ConvLayer { name, geom, w_off, b_off }
        };

        let stem_geom = ConvGeom {
            in_channels: spec.in_channels,
            out_channels: spec.stem.out_channels,
            kernel: spec.stem.kernel,
            stride: spec.stem.stride,
            pad: spec.stem.kernel / 2,
        };
        let mut dims = stem_geom.out_dims(spec.input_dims)?;
        let stem = conv("stem".into(), stem_geom);
        let mut channels = spec.stem.out_channels;
        let mut blocks = Vec::new();
        let k = spec.block_kernel;
        for (si, stage) in spec.stages.iter().enumerate() {
            if stage.channels == 0 || stage.downsample_stride == 0 || stage.num_residual_blocks == 0 {
                return Err(Error::Config(format!("stage {} has a zero-sized field", si + 1)));
            }
            for bi in 0..stage.num_residual_blocks {
                let stride = if bi == 0 { stage.downsample_stride } else { 1 };
                let name = format!("stage{}.block{}", si + 1, bi);
                let g1 = ConvGeom { in_channels: channels, out_channels: stage.channels, kernel: k, stride, pad: k / 2 };
                let out_dims = g1.out_dims(dims).map_err(|_| {
                    Error::Config(format!("{name}: spatial size {dims:?} too small for stride {stride}"))
                })?;
                let g2 = ConvGeom { in_channels: stage.channels, out_channels: stage.channels, kernel: k, stride: 1, pad: k / 2 };
                g2.out_dims(out_dims)?;
                let conv1 = conv(format!("{name}.conv1"), g1);
                let conv2 = conv(format!("{name}.conv2"), g2);
                let proj = if stride != 1 || channels != stage.channels {
                    let gp = ConvGeom { in_channels: channels, out_channels: stage.channels, kernel: 1, stride, pad: 0 };
                    if gp.out_dims(dims)? != out_dims {
                        return Err(Error::Config(format!("{name}: shortcut shape mismatch")));
                    }
                    Some(conv(format!("{name}.proj"), gp))
                } else {
                    None
                };
                blocks.push(Block { conv1, conv2, proj, name });
                dims = out_dims;
                channels = stage.channels;
            }
        }
        let head_w = offset;
        layout.push(ParamBlock { name: "head.weight".into(), offset, len: channels, fan_in: channels, is_bias: false });
        offset += channels;
        let head_b = offset;
        layout.push(ParamBlock { name: "head.bias".into(), offset, len: 1, fan_in: channels, is_bias: true });
        offset += 1;

        Ok(Net {
            spec: spec.clone(),
            stem,
            blocks,
            head_w,
            head_b,
            head_in: channels,
            layout,
            n_params: offset,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn layout(&self) -> &[ParamBlock] {
        &self.layout
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.dims != self.spec.input_dims || x.channels != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "input {}×{:?} does not match network input {}×{:?}",
                x.channels, x.dims, self.spec.in_channels, self.spec.input_dims
            )));
        }
        Ok(())
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params {
            return Err(Error::Shape(format!(
                "parameter vector has length {}, network needs {}",
                params.len(),
                self.n_params
            )));
        }
        Ok(())
    }

    /// Raw head output for one input, keeping activations for [`Net::backward`].
    pub fn forward_cached(&self, params: &[f64], input: &Tensor) -> Result<(f64, Cache)> {
        self.check_params(params)?;
        self.check_input(input)?;
        let mut stem = self.stem.forward(params, input)?;
        relu_in_place(&mut stem);
        finite_or(&stem, &self.stem.name)?;

        let mut blocks: Vec<(Tensor, Tensor)> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let x = blocks.last().map(|b| &b.1).unwrap_or(&stem);
            let mut h1 = block.conv1.forward(params, x)?;
            relu_in_place(&mut h1);
            finite_or(&h1, &block.conv1.name)?;
            let mut out = block.conv2.forward(params, &h1)?;
            match &block.proj {
                Some(p) => {
                    let short = p.forward(params, x)?;
                    out.data.iter_mut().zip(&short.data).for_each(|(o, s)| *o += s);
                }
                None => out.data.iter_mut().zip(&x.data).for_each(|(o, s)| *o += s),
            }
            relu_in_place(&mut out);
            finite_or(&out, &block.name)?;
            blocks.push((h1, out));
        }
        let last = blocks.last().map(|b| &b.1).unwrap_or(&stem);
        let pooled = global_average_pool(last);
        let w = &params[self.head_w..self.head_w + self.head_in];
        let y = pooled.iter().zip(w).map(|(p, w)| p * w).sum::<f64>() + params[self.head_b];
        if !y.is_finite() {
            return Err(Error::NumericOverflow { layer: "head".into() });
        }
        Ok((y, Cache { input: input.clone(), stem, blocks, pooled }))
    }

    pub fn forward(&self, params: &[f64], input: &Tensor) -> Result<f64> {
        self.forward_cached(params, input).map(|(y, _)| y)
    }

    /// Accumulate `d_y · ∂y/∂params` into `grad`.
    pub fn backward(&self, params: &[f64], cache: &Cache, d_y: f64, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.n_params);
        let c = self.head_in;
        grad[self.head_b] += d_y;
        for (i, p) in cache.pooled.iter().enumerate() {
            grad[self.head_w + i] += d_y * p;
        }
        let last = cache.blocks.last().map(|b| &b.1).unwrap_or(&cache.stem);
        let n = last.spatial_len() as f64;
        let mut d = Tensor::zeros(c, last.dims);
        let nvox = last.spatial_len();
        for ch in 0..c {
            let g = d_y * params[self.head_w + ch] / n;
            d.data[ch * nvox..(ch + 1) * nvox].fill(g);
        }

        for (bi, block) in self.blocks.iter().enumerate().rev() {
            let (h1, out) = &cache.blocks[bi];
            let x = if bi == 0 { &cache.stem } else { &cache.blocks[bi - 1].1 };
            relu_backward_in_place(out, &mut d);
            let mut d_x = match &block.proj {
                Some(p) => p.backward(params, x, &d, grad, true).expect("input grad requested"),
                None => d.clone(),
            };
            let mut d_h1 = block.conv2.backward(params, h1, &d, grad, true).expect("input grad requested");
            relu_backward_in_place(h1, &mut d_h1);
            let d_x1 = block.conv1.backward(params, x, &d_h1, grad, true).expect("input grad requested");
            d_x.data.iter_mut().zip(&d_x1.data).for_each(|(a, b)| *a += b);
            d = d_x;
        }
        relu_backward_in_place(&cache.stem, &mut d);
        self.stem.backward(params, &cache.input, &d, grad, false);
    }
}
