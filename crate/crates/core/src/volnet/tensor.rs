//! Dense channel-first 3D tensors and the convolution kernels.
//!
//! Layout is `[channel][z][y][x]` with x fastest, matching [`Volume`].

// Kernels index several parallel buffers per channel; explicit loops read better.
#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Tensor {
            channels,
            dims,
            data: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_volume(v: &Volume) -> Self {
        Tensor {
            channels: 1,
            dims: v.dims(),
            data: v.data().iter().map(|&x| x as f64).collect(),
        }
    }

    #[inline]
    pub fn spatial_len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Geometry of one 3D convolution with a cubic kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.pow(3)
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    pub fn out_extent(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if self.stride == 0 || self.kernel == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = self.out_extent(dims[a]).ok_or_else(|| {
                Error::Shape(format!(
                    "kernel {} with pad {} does not fit input extent {} on axis {a}",
                    self.kernel, self.pad, dims[a]
                ))
            })?;
        }
        Ok(out)
    }

    /// Output index range `[lo, hi)` along one axis for kernel offset `k`,
    /// i.e. all `o` with `0 <= o*stride + k - pad < n_in`.
    #[inline]
    fn valid_range(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(s)
        } else {
            0
        };
        let limit = n_in + self.pad; // o*s + k < limit
        let hi = if limit > k {
            ((limit - k - 1) / s + 1).min(n_out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn check_conv(input: &Tensor, geom: &ConvGeom, weights: &[f64], bias: &[f64]) -> Result<[usize; 3]> {
    if input.channels != geom.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {}",
            geom.in_channels, input.channels
        )));
    }
    if weights.len() != geom.weight_len() || bias.len() != geom.out_channels {
        return Err(Error::Shape(format!(
            "conv parameter length mismatch: weights {} (want {}), bias {} (want {})",
            weights.len(),
            geom.weight_len(),
            bias.len(),
            geom.out_channels
        )));
    }
    geom.out_dims(input.dims)
}

/// Zero-padded strided cross-correlation. Weights are laid out
/// `[out][in][kz][ky][kx]`.
pub fn conv3d_forward(input: &Tensor, geom: &ConvGeom, weights: &[f64], bias: &[f64]) -> Result<Tensor> {
    let od = check_conv(input, geom, weights, bias)?;
    let id = input.dims;
    let k = geom.kernel;
    let s = geom.stride;
    let mut out = Tensor::zeros(geom.out_channels, od);
    let out_n = out.spatial_len();
    let in_n = input.spatial_len();

    for oc in 0..geom.out_channels {
        let o = &mut out.data[oc * out_n..(oc + 1) * out_n];
        o.fill(bias[oc]);
        for ic in 0..geom.in_channels {
            let inp = &input.data[ic * in_n..(ic + 1) * in_n];
            let wbase = (oc * geom.in_channels + ic) * k * k * k;
            for kz in 0..k {
                let (z0, z1) = geom.valid_range(kz, id[2], od[2]);
                for ky in 0..k {
                    let (y0, y1) = geom.valid_range(ky, id[1], od[1]);
                    for kx in 0..k {
                        let (x0, x1) = geom.valid_range(kx, id[0], od[0]);
                        let w = weights[wbase + (kz * k + ky) * k + kx];
                        for oz in z0..z1 {
                            let iz = oz * s + kz - geom.pad;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - geom.pad;
                                let orow = (oz * od[1] + oy) * od[0];
                                let irow = (iz * id[1] + iy) * id[0];
                                for ox in x0..x1 {
                                    let ix = ox * s + kx - geom.pad;
                                    o[orow + ox] += w * inp[irow + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reverse pass of [`conv3d_forward`]. Accumulates into `d_weights` and
/// `d_bias`; returns the gradient with respect to the input when requested.
pub fn conv3d_backward(
    input: &Tensor,
    geom: &ConvGeom,
    weights: &[f64],
    d_out: &Tensor,
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    want_input_grad: bool,
) -> Option<Tensor> {
    let id = input.dims;
    let od = d_out.dims;
    let k = geom.kernel;
    let s = geom.stride;
    let out_n = d_out.spatial_len();
    let in_n = input.spatial_len();
    let mut d_in = want_input_grad.then(|| Tensor::zeros(input.channels, id));

    for oc in 0..geom.out_channels {
        let go = &d_out.data[oc * out_n..(oc + 1) * out_n];
        d_bias[oc] += go.iter().sum::<f64>();
        for ic in 0..geom.in_channels {
            let inp = &input.data[ic * in_n..(ic + 1) * in_n];
            let wbase = (oc * geom.in_channels + ic) * k * k * k;
            for kz in 0..k {
                let (z0, z1) = geom.valid_range(kz, id[2], od[2]);
                for ky in 0..k {
                    let (y0, y1) = geom.valid_range(ky, id[1], od[1]);
                    for kx in 0..k {
                        let (x0, x1) = geom.valid_range(kx, id[0], od[0]);
                        let widx = wbase + (kz * k + ky) * k + kx;
                        let w = weights[widx];
                        let mut dw = 0.0;
                        for oz in z0..z1 {
                            let iz = oz * s + kz - geom.pad;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - geom.pad;
                                let orow = (oz * od[1] + oy) * od[0];
                                let irow = (iz * id[1] + iy) * id[0];
                                for ox in x0..x1 {
                                    let ix = ox * s + kx - geom.pad;
                                    dw += go[orow + ox] * inp[irow + ix];
                                }
                                if let Some(d_in) = d_in.as_mut() {
                                    let di = &mut d_in.data[ic * in_n..(ic + 1) * in_n];
                                    for ox in x0..x1 {
                                        let ix = ox * s + kx - geom.pad;
                                        di[irow + ix] += w * go[orow + ox];
                                    }
                                }
                            }
                        }
                        d_weights[widx] += dw;
                    }
                }
            }
        }
    }
    d_in
}

pub fn relu_in_place(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero gradient entries where the post-activation output is not positive.
pub fn relu_backward_in_place(post_activation: &Tensor, grad: &mut Tensor) {
    for (g, &a) in grad.data.iter_mut().zip(&post_activation.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn global_average_pool(t: &Tensor) -> Vec<f64> {
    let n = t.spatial_len() as f64;
    (0..t.channels).map(|c| t.channel(c).iter().sum::<f64>() / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops straight from the definition of cross-correlation.
    fn direct_conv(input: &Tensor, g: &ConvGeom, w: &[f64], b: &[f64]) -> Tensor {
        let od = g.out_dims(input.dims).unwrap();
        let mut out = Tensor::zeros(g.out_channels, od);
        let k = g.kernel as isize;
        for oc in 0..g.out_channels {
            for oz in 0..od[2] {
                for oy in 0..od[1] {
                    for ox in 0..od[0] {
                        let mut acc = b[oc];
                        for ic in 0..g.in_channels {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * g.stride) as isize + kz - g.pad as isize;
                                        let iy = (oy * g.stride) as isize + ky - g.pad as isize;
                                        let ix = (ox * g.stride) as isize + kx - g.pad as isize;
                                        let inside = |v: isize, n: usize| v >= 0 && (v as usize) < n;
                                        if !(inside(ix, input.dims[0])
                                            && inside(iy, input.dims[1])
                                            && inside(iz, input.dims[2]))
                                        {
                                            continue;
                                        }
                                        let widx = (((oc * g.in_channels + ic) * g.kernel + kz as usize)
                                            * g.kernel
                                            + ky as usize)
                                            * g.kernel
                                            + kx as usize;
                                        let iidx = ((ic * input.dims[2] + iz as usize) * input.dims[1]
                                            + iy as usize)
                                            * input.dims[0]
                                            + ix as usize;
                                        acc += w[widx] * input.data[iidx];
                                    }
                                }
                            }
                        }
                        out.data[((oc * od[2] + oz) * od[1] + oy) * od[0] + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, dims: [usize; 3]) -> Tensor {
        let mut t = Tensor::zeros(c, dims);
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        t
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 1, [3, 4, 5]);
        let g = ConvGeom { in_channels: 1, out_channels: 1, kernel: 1, stride: 1, pad: 0 };
        let y = conv3d_forward(&x, &g, &[1.0], &[0.0]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, 2, [4, 4, 4]);
        let g = ConvGeom { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, pad: 1 };
        let w = vec![0.0; g.weight_len()];
        let y = conv3d_forward(&x, &g, &w, &[0.5, -1.0, 2.0]).unwrap();
        for c in 0..3 {
            assert!(y.channel(c).iter().all(|&v| v == [0.5, -1.0, 2.0][c]));
        }
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(ic, oc, k, s, p, dims) in &[
            (1, 1, 3, 1, 1, [4, 4, 4]),
            (2, 3, 3, 1, 1, [4, 5, 3]),
            (2, 2, 3, 2, 1, [5, 4, 6]),
            (3, 2, 1, 2, 0, [4, 4, 4]),
            (1, 2, 7, 2, 3, [9, 8, 7]),
            (2, 1, 2, 1, 0, [3, 3, 3]),
        ] {
            let g = ConvGeom { in_channels: ic, out_channels: oc, kernel: k, stride: s, pad: p };
            let x = random_tensor(&mut rng, ic, dims);
            let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..oc).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv3d_forward(&x, &g, &w, &b).unwrap();
            let slow = direct_conv(&x, &g, &w, &b);
            assert_eq!(fast.dims, slow.dims);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn output_size_formula() {
        let g = ConvGeom { in_channels: 1, out_channels: 1, kernel: 3, stride: 2, pad: 1 };
        assert_eq!(g.out_dims([16, 15, 8]).unwrap(), [8, 8, 4]);
        let g = ConvGeom { in_channels: 1, out_channels: 1, kernel: 5, stride: 1, pad: 0 };
        assert!(g.out_dims([4, 8, 8]).is_err());
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::zeros(2, [3, 3, 3]);
        let g = ConvGeom { in_channels: 1, out_channels: 1, kernel: 1, stride: 1, pad: 0 };
        assert!(matches!(conv3d_forward(&x, &g, &[1.0], &[0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeom { in_channels: 2, out_channels: 2, kernel: 3, stride: 2, pad: 1 };
        let x = random_tensor(&mut rng, 2, [5, 4, 3]);
        let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = vec![0.1, -0.2];
        let od = g.out_dims(x.dims).unwrap();
        let probe = random_tensor(&mut rng, 2, od);
        // scalar objective L = <probe, conv(x)>; linear, so central differences are exact up to rounding
        let obj = |x: &Tensor, w: &[f64], b: &[f64]| -> f64 {
            let y = conv3d_forward(x, &g, w, b).unwrap();
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 2];
        let dx = conv3d_backward(&x, &g, &w, &probe, &mut dw, &mut db, true).unwrap();
        let h = 1e-4;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let fd = (obj(&x, &wp, &b) - obj(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-8);
        }
        for i in 0..x.data.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += h;
            xm.data[i] -= h;
            let fd = (obj(&xp, &w, &b) - obj(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-8);
        }
        for c in 0..2 {
            let s: f64 = probe.channel(c).iter().sum();
            assert!((s - db[c]).abs() < 1e-12);
        }
    }
}
