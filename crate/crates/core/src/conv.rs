//! Convolution layers: a direct reference forward pass, the factorized blocks
//! built from CP, TKD-CPD and SVD models, and parameter/FLOP counts.
//!
//! Feature maps are `H×W×C` tensors. Kernels are `D×D×S×T` with
//! `Y[h', w', t] = Σ_{i, j, s} K[i, j, s, t] · X[h'Δ + i − P, w'Δ + j − P, s]`,
//! taps outside the input reading zero. Layer weights are stored
//! `(out, in/groups, k_h, k_w)`, row-major.

use crate::cpd::CPModel;
use crate::error::{Error, Result};
use crate::hybrid::{should_merge, HybridModel};
use crate::tensor::{DenseTensor, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square kernel extent `D`.
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: Option<Vec<f64>>,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let s = Self { in_channels, out_channels, kernel, stride, pad, bias: None };
        s.validate()?;
        Ok(s)
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        self.bias = Some(bias);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 1 || self.out_channels < 1 || self.kernel < 1 || self.stride < 1 {
            return Err(Error::InvalidArgument(
                "channels, kernel size and stride must be positive".into(),
            ));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels {
                return Err(Error::Shape(format!(
                    "bias has {} entries for {} output channels",
                    b.len(),
                    self.out_channels
                )));
            }
        }
        Ok(())
    }

    /// `(H', W')` for an `H×W` input.
    pub fn output_hw(&self, hw: (usize, usize)) -> Result<(usize, usize)> {
        output_hw(hw, (self.kernel, self.kernel), self.stride, self.pad)
    }
}

fn output_hw(hw: (usize, usize), k: (usize, usize), stride: usize, pad: usize) -> Result<(usize, usize)> {
    let one = |n: usize, k: usize| -> Result<usize> {
        let padded = n + 2 * pad;
        if padded < k {
            return Err(Error::Shape(format!("input extent {n} with pad {pad} is smaller than kernel {k}")));
        }
        Ok((padded - k) / stride + 1)
    };
    Ok((one(hw.0, k.0)?, one(hw.1, k.1)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDescriptor {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub groups: usize,
    pub stride: usize,
    pub pad: usize,
    /// `(out, in/groups, k_h, k_w)`.
    pub weights: DenseTensor,
    pub bias: Option<Vec<f64>>,
}

impl LayerDescriptor {
    pub fn validate(&self) -> Result<()> {
        let g = self.groups;
        if g < 1 || self.in_channels % g != 0 || self.out_channels % g != 0 {
            return Err(Error::Shape(format!(
                "channels {}→{} not divisible by groups {g}",
                self.in_channels, self.out_channels
            )));
        }
        if self.stride < 1 || self.kernel.0 < 1 || self.kernel.1 < 1 {
            return Err(Error::Shape("kernel size and stride must be positive".into()));
        }
        let want = [self.out_channels, self.in_channels / g, self.kernel.0, self.kernel.1];
        if self.weights.shape() != want {
            return Err(Error::Shape(format!(
                "weights shape {:?}, expected {want:?}",
                self.weights.shape()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels {
                return Err(Error::Shape(format!("bias has {} entries", b.len())));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// A dense `1×1`, stride-1, unpadded layer computing `y = W x`.
    pub fn pointwise(w: &Matrix, bias: Option<Vec<f64>>) -> Self {
        let (out, inp) = w.shape();
        let weights = DenseTensor::from_fn(&[out, inp, 1, 1], |ix| w[(ix[0], ix[1])]);
        Self { in_channels: inp, out_channels: out, kernel: (1, 1), groups: 1, stride: 1, pad: 0, weights, bias }
    }

    fn is_spatial(&self) -> bool {
        self.kernel != (1, 1) || self.stride != 1 || self.pad != 0
    }

    /// Weight between output `o` and input `c` at tap `(i, j)`, zero across groups.
    fn dense_weight(&self, o: usize, c: usize, i: usize, j: usize) -> f64 {
        let inpg = self.in_channels / self.groups;
        let outpg = self.out_channels / self.groups;
        if c / inpg != o / outpg {
            return 0.0;
        }
        self.weights.get(&[o, c % inpg, i, j])
    }
}

fn feature_dims(x: &DenseTensor) -> Result<(usize, usize, usize)> {
    x.dims3().map_err(|_| Error::Shape(format!("feature map must be H×W×C, got {:?}", x.shape())))
}

/// Direct evaluation of the convolution sum.
pub fn conv2d_reference(x: &DenseTensor, spec: &ConvSpec, kernel: &DenseTensor) -> Result<DenseTensor> {
    spec.validate()?;
    let (h, w, s) = feature_dims(x)?;
    let d = spec.kernel;
    let t = spec.out_channels;
    if kernel.shape() != [d, d, spec.in_channels, t] || s != spec.in_channels {
        return Err(Error::Shape(format!(
            "kernel {:?} and input {:?} do not match the convolution spec",
            kernel.shape(),
            x.shape()
        )));
    }
    let (ho, wo) = spec.output_hw((h, w))?;
    let mut y = DenseTensor::zeros(&[ho, wo, t]);
    for hp in 0..ho {
        for wp in 0..wo {
            for tt in 0..t {
                let mut acc = spec.bias.as_ref().map_or(0.0, |b| b[tt]);
                for i in 0..d {
                    let hi = (hp * spec.stride + i) as isize - spec.pad as isize;
                    if hi < 0 || hi >= h as isize {
                        continue;
                    }
                    for j in 0..d {
                        let wj = (wp * spec.stride + j) as isize - spec.pad as isize;
                        if wj < 0 || wj >= w as isize {
                            continue;
                        }
                        for ss in 0..s {
                            acc += kernel.get(&[i, j, ss, tt]) * x.at3(hi as usize, wj as usize, ss);
                        }
                    }
                }
                y.set(&[hp, wp, tt], acc);
            }
        }
    }
    Ok(y)
}

/// Forward pass of one (possibly grouped) layer.
pub fn apply_layer(x: &DenseTensor, layer: &LayerDescriptor) -> Result<DenseTensor> {
    layer.validate()?;
    let (h, w, c) = feature_dims(x)?;
    if c != layer.in_channels {
        return Err(Error::Shape(format!("layer expects {} channels, input has {c}", layer.in_channels)));
    }
    let (kh, kw) = layer.kernel;
    let (ho, wo) = output_hw((h, w), layer.kernel, layer.stride, layer.pad)?;
    let inpg = layer.in_channels / layer.groups;
    let outpg = layer.out_channels / layer.groups;
    let wt = layer.weights.data();
    let xd = x.data();
    let mut y = DenseTensor::zeros(&[ho, wo, layer.out_channels]);
    let yd = y.data_mut();
    for hp in 0..ho {
        for wp in 0..wo {
            for o in 0..layer.out_channels {
                let c0 = (o / outpg) * inpg;
                let mut acc = layer.bias.as_ref().map_or(0.0, |b| b[o]);
                for i in 0..kh {
                    let hi = (hp * layer.stride + i) as isize - layer.pad as isize;
                    if hi < 0 || hi >= h as isize {
                        continue;
                    }
                    for j in 0..kw {
                        let wj = (wp * layer.stride + j) as isize - layer.pad as isize;
                        if wj < 0 || wj >= w as isize {
                            continue;
                        }
                        let xo = (hi as usize * w + wj as usize) * c + c0;
                        for cl in 0..inpg {
                            acc += wt[((o * inpg + cl) * kh + i) * kw + j] * xd[xo + cl];
                        }
                    }
                }
                yd[(hp * wo + wp) * layer.out_channels + o] = acc;
            }
        }
    }
    Ok(y)
}

/// Runs the layers in sequence.
pub fn forward(x: &DenseTensor, layers: &[LayerDescriptor]) -> Result<DenseTensor> {
    check_chain(layers)?;
    let mut cur = x.clone();
    for l in layers {
        cur = apply_layer(&cur, l)?;
    }
    Ok(cur)
}

fn check_chain(layers: &[LayerDescriptor]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Shape("empty layer chain".into()));
    }
    for (n, l) in layers.iter().enumerate() {
        l.validate()?;
        if n > 0 && layers[n - 1].out_channels != l.in_channels {
            return Err(Error::Shape(format!(
                "broken chain: layer {} outputs {} channels, layer {n} expects {}",
                n - 1,
                layers[n - 1].out_channels,
                l.in_channels
            )));
        }
    }
    Ok(())
}

fn check_model_dims(dims: (usize, usize, usize), spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    let want = (spec.kernel * spec.kernel, spec.in_channels, spec.out_channels);
    if dims != want {
        return Err(Error::Shape(format!("model dims {dims:?} do not match kernel dims {want:?}")));
    }
    Ok(())
}

fn depthwise(a: &Matrix, spec: &ConvSpec) -> LayerDescriptor {
    let d = spec.kernel;
    let r = a.ncols();
    let weights = DenseTensor::from_fn(&[r, 1, d, d], |ix| a[(ix[2] + ix[3] * d, ix[0])]);
    LayerDescriptor {
        in_channels: r,
        out_channels: r,
        kernel: (d, d),
        groups: r,
        stride: spec.stride,
        pad: spec.pad,
        weights,
        bias: None,
    }
}

fn weighted_c(m: &CPModel) -> Matrix {
    let mut c = m.c.clone();
    if let Some(l) = &m.lambda {
        for (q, &s) in l.iter().enumerate() {
            c.column_mut(q).scale_mut(s);
        }
    }
    c
}

/// `S→R` pointwise (from `B`), depthwise `D×D` (from `A`), `R→T` pointwise
/// (from `λ`-scaled `C`, carrying the bias).
pub fn emit_cpd_block(m: &CPModel, spec: &ConvSpec) -> Result<Vec<LayerDescriptor>> {
    m.validate()?;
    check_model_dims(m.dims(), spec)?;
    Ok(vec![
        LayerDescriptor::pointwise(&m.b.transpose(), None),
        depthwise(&m.a, spec),
        LayerDescriptor::pointwise(&weighted_c(m), spec.bias.clone()),
    ])
}

/// `S→R₁` (`Uᵀ`), `R₁→R` (core `B`), depthwise (core `A`), `R→R₂` (core `C`),
/// `R₂→T` (`V`, carrying the bias).
pub fn emit_tkd_cpd_block(h: &HybridModel, spec: &ConvSpec) -> Result<Vec<LayerDescriptor>> {
    h.core_cp.validate()?;
    check_model_dims(h.dims(), spec)?;
    if should_merge(h.ranks()) {
        return Err(Error::InvalidArgument(format!(
            "ranks {:?} satisfy the merge rule; emit a CPD block from the equivalent CP model",
            h.ranks()
        )));
    }
    let core = &h.core_cp;
    Ok(vec![
        LayerDescriptor::pointwise(&h.u.transpose(), None),
        LayerDescriptor::pointwise(&core.b.transpose(), None),
        depthwise(&core.a, spec),
        LayerDescriptor::pointwise(&weighted_c(core), None),
        LayerDescriptor::pointwise(&h.v, spec.bias.clone()),
    ])
}

/// Rank-`rank` truncated SVD of a `T×S` pointwise kernel as two layers, with
/// `√σ` split between them. Stride and padding go on the first layer.
pub fn emit_svd_block(kernel_1x1: &Matrix, rank: usize, spec: &ConvSpec) -> Result<Vec<LayerDescriptor>> {
    spec.validate()?;
    if spec.kernel != 1 {
        return Err(Error::InvalidArgument("svd requires 1×1 kernel".into()));
    }
    let (t, s) = kernel_1x1.shape();
    if (t, s) != (spec.out_channels, spec.in_channels) {
        return Err(Error::Shape(format!("kernel {t}×{s} does not match spec")));
    }
    if rank < 1 || rank > s.min(t) {
        return Err(Error::InvalidArgument(format!("SVD rank must lie in 1..={}", s.min(t))));
    }
    let (sv, u, vt) = svd_desc(kernel_1x1);
    let first = Matrix::from_fn(rank, s, |r, c| sv[r].sqrt() * vt[(r, c)]);
    let second = Matrix::from_fn(t, rank, |r, c| u[(r, c)] * sv[c].sqrt());
    let mut l1 = LayerDescriptor::pointwise(&first, None);
    l1.stride = spec.stride;
    l1.pad = spec.pad;
    Ok(vec![l1, LayerDescriptor::pointwise(&second, spec.bias.clone())])
}

/// Singular values (descending) with the matching `U` and `Vᵀ`.
pub fn svd_desc(m: &Matrix) -> (Vec<f64>, Matrix, Matrix) {
    let svd = m.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    let sv = order.iter().map(|&q| svd.singular_values[q]).collect();
    let u = Matrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let vt = Matrix::from_fn(order.len(), vt.ncols(), |r, c| vt[(order[r], c)]);
    (sv, u, vt)
}

/// `(params, flops)` of a layer chain on an `H×W` input, counting a
/// multiply-add as two flops.
pub fn count_params_flops(layers: &[LayerDescriptor], input_hw: (usize, usize)) -> Result<(usize, usize)> {
    check_chain(layers)?;
    let mut hw = input_hw;
    let (mut params, mut flops) = (0, 0);
    for l in layers {
        hw = output_hw(hw, l.kernel, l.stride, l.pad)?;
        params += l.param_count();
        flops += 2 * hw.0 * hw.1 * (l.in_channels / l.groups) * l.kernel.0 * l.kernel.1 * l.out_channels;
    }
    Ok((params, flops))
}

/// Collapses a chain with at most one spatial layer into a single `D×D×S×T`
/// kernel and its convolution spec. Biases are only allowed from the spatial
/// layer on, since zero padding would not carry an earlier bias uniformly.
pub fn compose_kernel(layers: &[LayerDescriptor]) -> Result<(DenseTensor, ConvSpec)> {
    check_chain(layers)?;
    let s = layers[0].in_channels;
    // current operator, as taps (i, j) → (channels × S) matrices
    let mut d = (1, 1);
    let mut taps = vec![Matrix::identity(s, s)];
    let mut bias: Option<Vec<f64>> = None;
    let (mut stride, mut pad) = (1, 0);
    let mut spatial_seen = false;
    for (n, l) in layers.iter().enumerate() {
        if l.is_spatial() {
            if spatial_seen {
                return Err(Error::Shape(format!("layer {n} is a second spatial layer")));
            }
            if bias.is_some() {
                return Err(Error::Shape("bias before the spatial layer cannot be composed".into()));
            }
            if l.kernel.0 != l.kernel.1 {
                return Err(Error::Shape("only square kernels compose".into()));
            }
            spatial_seen = true;
            d = l.kernel;
            stride = l.stride;
            pad = l.pad;
            let prev = &taps[0];
            taps = (0..d.0 * d.1)
                .map(|tap| {
                    let (i, j) = (tap / d.1, tap % d.1);
                    let w = Matrix::from_fn(l.out_channels, l.in_channels, |o, c| l.dense_weight(o, c, i, j));
                    w * prev
                })
                .collect();
        } else {
            let w = Matrix::from_fn(l.out_channels, l.in_channels, |o, c| l.dense_weight(o, c, 0, 0));
            for m in taps.iter_mut() {
                *m = &w * &*m;
            }
            if let Some(b) = &bias {
                let nb = &w * nalgebra::DVector::from_vec(b.clone());
                bias = Some(nb.iter().copied().collect());
            }
        }
        if let Some(lb) = &l.bias {
            let b = bias.get_or_insert_with(|| vec![0.0; l.out_channels]);
            for (x, y) in b.iter_mut().zip(lb) {
                *x += y;
            }
        }
    }
    let t = layers.last().expect("non-empty").out_channels;
    let kd = d.0;
    let kernel = DenseTensor::from_fn(&[kd, kd, s, t], |ix| taps[ix[0] * kd + ix[1]][(ix[3], ix[2])]);
    let spec = ConvSpec { in_channels: s, out_channels: t, kernel: kd, stride, pad, bias };
    Ok((kernel, spec))
}
