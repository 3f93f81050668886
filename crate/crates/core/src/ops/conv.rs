//! 2-D convolution with stride, zero padding, dilation and groups.
//!
//! [`conv2d`] is the production path: a direct kernel for depthwise layers and
//! im2col + GEMM for everything else. [`conv2d_naive`] is the seven-loop
//! reference the fast path is tested against.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::GradResult;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Stride, padding, dilation and grouping of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeometry {
    /// Stride-1 geometry whose output has the input's spatial size for an odd
    /// kernel: `padding = dilation * (k - 1) / 2`.
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        ConvGeometry {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups,
        }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            ..Default::default()
        }
    }
}

/// Side length of the input window one output element depends on.
pub fn effective_kernel(kernel: usize, dilation: usize) -> usize {
    (kernel - 1) * dilation + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer<T> {
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
    geometry: ConvGeometry,
}

impl<T: Scalar> Conv2dLayer<T> {
    /// `weight` is `[out_channels, in_channels / groups, k, k]`.
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, geometry: ConvGeometry) -> Result<Self> {
        let ConvGeometry {
            stride,
            dilation,
            groups,
            ..
        } = geometry;
        let (out_c, _, kh, kw) = weight.dims4()?;
        if kh != kw {
            return Err(Error::shape(format!("kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(Error::InvalidArgument(format!(
                "stride, dilation and groups must be >= 1: {geometry:?}"
            )));
        }
        if out_c % groups != 0 {
            return Err(Error::shape(format!(
                "groups {groups} does not divide out_channels {out_c}"
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [out_c] {
                return Err(Error::shape(format!(
                    "bias shape {:?} for {out_c} output channels",
                    b.shape()
                )));
            }
        }
        Ok(Conv2dLayer {
            weight,
            bias,
            geometry,
        })
    }

    /// He-normal (fan-out) initialized layer with zero bias.
    pub fn he_init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geometry: ConvGeometry,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let groups = geometry.groups;
        if groups == 0 || !in_channels.is_multiple_of(groups) {
            return Err(Error::shape(format!(
                "groups {groups} does not divide in_channels {in_channels}"
            )));
        }
        let fan_out = (kernel * kernel * out_channels / groups).max(1);
        let std = (2.0 / fan_out as f64).sqrt();
        let weight = Tensor::randn(
            &[out_channels, in_channels / groups, kernel, kernel],
            rng,
            0.0,
            std,
        )?;
        let bias = if bias {
            Some(Tensor::zeros(&[out_channels])?)
        } else {
            None
        };
        Self::new(weight, bias, geometry)
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weight
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor<T>> {
        self.bias.as_mut()
    }

    pub fn set_bias(&mut self, bias: Option<Tensor<T>>) -> Result<()> {
        if let Some(b) = &bias {
            if b.shape() != [self.out_channels()] {
                return Err(Error::shape(format!(
                    "bias shape {:?} for {} output channels",
                    b.shape(),
                    self.out_channels()
                )));
            }
        }
        self.bias = bias;
        Ok(())
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geometry
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.geometry.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn is_depthwise(&self) -> bool {
        let g = self.geometry.groups;
        g == self.in_channels() && g == self.out_channels()
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, self)
    }
}

/// Output spatial size: `floor((h + 2p - d(k-1) - 1) / s) + 1` per axis.
pub fn out_shape<T: Scalar>(h: usize, w: usize, conv: &Conv2dLayer<T>) -> Result<(usize, usize)> {
    let g = conv.geometry();
    out_extent(h, w, conv.kernel_size(), g)
}

fn out_extent(h: usize, w: usize, k: usize, g: ConvGeometry) -> Result<(usize, usize)> {
    let k_eff = effective_kernel(k, g.dilation);
    let axis = |len: usize| -> Result<usize> {
        let padded = len + 2 * g.padding;
        if padded < k_eff {
            return Err(Error::geometry(format!(
                "input extent {len} with padding {} is smaller than the effective kernel {k_eff}",
                g.padding
            )));
        }
        Ok((padded - k_eff) / g.stride + 1)
    };
    Ok((axis(h)?, axis(w)?))
}

struct Plan {
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    k: usize,
    cin_g: usize,
    cout_g: usize,
    groups: usize,
    g: ConvGeometry,
}

impl Plan {
    fn new<T: Scalar>(x: &Tensor<T>, layer: &Conv2dLayer<T>) -> Result<Self> {
        let (n, c, h, w) = x.dims4()?;
        if c != layer.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                layer.in_channels()
            )));
        }
        let g = layer.geometry();
        let (ho, wo) = out_shape(h, w, layer)?;
        Ok(Plan {
            n,
            h,
            w,
            ho,
            wo,
            k: layer.kernel_size(),
            cin_g: c / g.groups,
            cout_g: layer.out_channels() / g.groups,
            groups: g.groups,
            g,
        })
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn col_rows(&self) -> usize {
        self.cin_g * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.g.stride == 1 && self.g.padding == 0
    }

    /// Range of output indices `o` with `0 <= o*s + off < len`.
    fn valid_range(&self, off: isize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.g.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s }.min(out_len as isize);
        let hi = if off >= len as isize {
            0
        } else {
            (((len as isize - 1 - off) / s) + 1).min(out_len as isize)
        };
        (lo as usize, hi.max(lo) as usize)
    }

    /// Tap offset into the unpadded input for kernel index `i`.
    fn tap(&self, i: usize) -> isize {
        (i * self.g.dilation) as isize - self.g.padding as isize
    }
}

/// Unrolls the channels `[c0, c0 + cin_g)` of one sample into a
/// `(cin_g * k * k) x (ho * wo)` column matrix; padded taps are zero.
fn im2col<T: Scalar>(p: &Plan, x: &[T], c0: usize, cols: &mut [T]) {
    let plane = p.out_plane();
    let s = p.g.stride;
    for ci in 0..p.cin_g {
        let src = &x[(c0 + ci) * p.in_plane()..][..p.in_plane()];
        for ki in 0..p.k {
            let (oh_lo, oh_hi) = p.valid_range(p.tap(ki), p.h, p.ho);
            for kj in 0..p.k {
                let row = (ci * p.k + ki) * p.k + kj;
                let dst = &mut cols[row * plane..][..plane];
                dst.fill(T::zero());
                let (ow_lo, ow_hi) = p.valid_range(p.tap(kj), p.w, p.wo);
                for oh in oh_lo..oh_hi {
                    let ih = (oh * s) as isize + p.tap(ki);
                    let src_row = &src[ih as usize * p.w..][..p.w];
                    let dst_row = &mut dst[oh * p.wo..][..p.wo];
                    for ow in ow_lo..ow_hi {
                        let iw = (ow * s) as isize + p.tap(kj);
                        dst_row[ow] = src_row[iw as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx`.
fn col2im<T: Scalar>(p: &Plan, cols: &[T], c0: usize, dx: &mut [T]) {
    let plane = p.out_plane();
    let s = p.g.stride;
    for ci in 0..p.cin_g {
        let dst = &mut dx[(c0 + ci) * p.in_plane()..][..p.in_plane()];
        for ki in 0..p.k {
            let (oh_lo, oh_hi) = p.valid_range(p.tap(ki), p.h, p.ho);
            for kj in 0..p.k {
                let row = (ci * p.k + ki) * p.k + kj;
                let src = &cols[row * plane..][..plane];
                let (ow_lo, ow_hi) = p.valid_range(p.tap(kj), p.w, p.wo);
                for oh in oh_lo..oh_hi {
                    let ih = (oh * s) as isize + p.tap(ki);
                    let dst_row = &mut dst[ih as usize * p.w..][..p.w];
                    for ow in ow_lo..ow_hi {
                        let iw = (ow * s) as isize + p.tap(kj);
                        dst_row[iw as usize] = dst_row[iw as usize] + src[oh * p.wo + ow];
                    }
                }
            }
        }
    }
}

fn depthwise_sample<T: Scalar>(p: &Plan, layer: &Conv2dLayer<T>, x: &[T], out: &mut [T]) {
    let w = layer.weight().data();
    let s = p.g.stride;
    let kk = p.k * p.k;
    for c in 0..p.groups {
        let src = &x[c * p.in_plane()..][..p.in_plane()];
        let dst = &mut out[c * p.out_plane()..][..p.out_plane()];
        for ki in 0..p.k {
            let (oh_lo, oh_hi) = p.valid_range(p.tap(ki), p.h, p.ho);
            for kj in 0..p.k {
                let wv = w[c * kk + ki * p.k + kj];
                let (ow_lo, ow_hi) = p.valid_range(p.tap(kj), p.w, p.wo);
                for oh in oh_lo..oh_hi {
                    let ih = (oh * s) as isize + p.tap(ki);
                    let src_row = &src[ih as usize * p.w..][..p.w];
                    let dst_row = &mut dst[oh * p.wo..][..p.wo];
                    if ow_lo == ow_hi {
                        break;
                    }
                    if s == 1 {
                        let iw0 = (ow_lo as isize + p.tap(kj)) as usize;
                        let n = ow_hi - ow_lo;
                        for (d, &v) in dst_row[ow_lo..ow_hi].iter_mut().zip(&src_row[iw0..iw0 + n]) {
                            *d = *d + wv * v;
                        }
                    } else {
                        for ow in ow_lo..ow_hi {
                            let iw = (ow * s) as isize + p.tap(kj);
                            dst_row[ow] = dst_row[ow] + wv * src_row[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

fn conv_sample<T: Scalar>(p: &Plan, layer: &Conv2dLayer<T>, x: &[T], out: &mut [T], cols: &mut Vec<T>) {
    let plane = p.out_plane();
    out.fill(T::zero());
    if p.cin_g == 1 && p.cout_g == 1 {
        depthwise_sample(p, layer, x, out);
    } else {
        let rows = p.col_rows();
        let w = layer.weight().data();
        for g in 0..p.groups {
            let wg = &w[g * p.cout_g * rows..][..p.cout_g * rows];
            let og = &mut out[g * p.cout_g * plane..][..p.cout_g * plane];
            if p.is_pointwise() {
                let xg = &x[g * p.cin_g * plane..][..p.cin_g * plane];
                T::gemm(p.cout_g, rows, plane, T::one(), wg, false, xg, false, T::zero(), og);
            } else {
                cols.resize(rows * plane, T::zero());
                im2col(p, x, g * p.cin_g, cols);
                T::gemm(p.cout_g, rows, plane, T::one(), wg, false, cols, false, T::zero(), og);
            }
        }
    }
    if let Some(b) = layer.bias() {
        for (co, &bv) in b.data().iter().enumerate() {
            for v in &mut out[co * plane..][..plane] {
                *v = *v + bv;
            }
        }
    }
}

/// Convolution of an `[N, C_in, H, W]` input; output `[N, C_out, H', W']`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, layer: &Conv2dLayer<T>) -> Result<Tensor<T>> {
    let p = Plan::new(x, layer)?;
    let cout = layer.out_channels();
    let out_per = cout * p.out_plane();
    let in_per = p.cin_g * p.groups * p.in_plane();
    let mut out = vec![T::zero(); p.n * out_per];
    out.par_chunks_mut(out_per)
        .zip(x.data().par_chunks(in_per))
        .for_each_init(Vec::new, |cols, (o, xi)| conv_sample(&p, layer, xi, o, cols));
    Tensor::from_vec(&[p.n, cout, p.ho, p.wo], out)
}

/// Reference convolution: explicit loops over
/// `(n, group, c_out, h, w, c_in, kh, kw)` with dilated tap offsets.
pub fn conv2d_naive<T: Scalar>(x: &Tensor<T>, layer: &Conv2dLayer<T>) -> Result<Tensor<T>> {
    let (n, cin, h, w) = x.dims4()?;
    if cin != layer.in_channels() {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {cin}",
            layer.in_channels()
        )));
    }
    let geo = layer.geometry();
    let (ho, wo) = out_shape(h, w, layer)?;
    let k = layer.kernel_size();
    let cout = layer.out_channels();
    let cin_g = cin / geo.groups;
    let cout_g = cout / geo.groups;
    let wt = layer.weight().data();
    let xd = x.data();
    let mut out = vec![T::zero(); n * cout * ho * wo];
    for b in 0..n {
        for g in 0..geo.groups {
            for oc in 0..cout_g {
                let co = g * cout_g + oc;
                let bias = layer.bias().map_or(T::zero(), |t| t.data()[co]);
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bias;
                        for ic in 0..cin_g {
                            let ci = g * cin_g + ic;
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (oh * geo.stride + ki * geo.dilation) as isize
                                        - geo.padding as isize;
                                    let iw = (ow * geo.stride + kj * geo.dilation) as isize
                                        - geo.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    let xv = xd[((b * cin + ci) * h + ih as usize) * w + iw as usize];
                                    let wv = wt[((co * cin_g + ic) * k + ki) * k + kj];
                                    acc = acc + xv * wv;
                                }
                            }
                        }
                        out[((b * cout + co) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, ho, wo], out)
}

/// Gradients of `sum(grad_out * conv2d(x))` with respect to the input, the
/// weight (`"weight"`) and the bias (`"bias"`, when present).
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    layer: &Conv2dLayer<T>,
    grad_out: &Tensor<T>,
) -> Result<GradResult<T>> {
    let p = Plan::new(x, layer)?;
    let cout = layer.out_channels();
    let expected = [p.n, cout, p.ho, p.wo];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "grad_out shape {:?}, conv output is {:?}",
            grad_out.shape(),
            expected
        )));
    }
    let plane = p.out_plane();
    let rows = p.col_rows();
    let in_per = p.cin_g * p.groups * p.in_plane();
    let out_per = cout * plane;
    let wt = layer.weight().data();

    // Per-sample partials, reduced below in sample order so the result does
    // not depend on the thread count.
    let partials: Vec<(Vec<T>, Vec<T>)> = x
        .data()
        .par_chunks(in_per)
        .zip(grad_out.data().par_chunks(out_per))
        .map(|(xi, gi)| {
            let mut dx = vec![T::zero(); in_per];
            let mut dw = vec![T::zero(); wt.len()];
            let mut cols = vec![T::zero(); rows * plane];
            for g in 0..p.groups {
                let gog = &gi[g * p.cout_g * plane..][..p.cout_g * plane];
                let wg = &wt[g * p.cout_g * rows..][..p.cout_g * rows];
                let dwg = &mut dw[g * p.cout_g * rows..][..p.cout_g * rows];
                if p.is_pointwise() {
                    let xg = &xi[g * p.cin_g * plane..][..p.cin_g * plane];
                    T::gemm(p.cout_g, plane, rows, T::one(), gog, false, xg, true, T::one(), dwg);
                    let dxg = &mut dx[g * p.cin_g * plane..][..p.cin_g * plane];
                    T::gemm(rows, p.cout_g, plane, T::one(), wg, true, gog, false, T::one(), dxg);
                } else {
                    im2col(&p, xi, g * p.cin_g, &mut cols);
                    T::gemm(p.cout_g, plane, rows, T::one(), gog, false, &cols, true, T::one(), dwg);
                    T::gemm(rows, p.cout_g, plane, T::one(), wg, true, gog, false, T::zero(), &mut cols);
                    col2im(&p, &cols, g * p.cin_g, &mut dx);
                }
            }
            (dx, dw)
        })
        .collect();

    let mut grad_x = Vec::with_capacity(p.n * in_per);
    let mut grad_w = vec![T::zero(); wt.len()];
    for (dx, dw) in partials {
        grad_x.extend_from_slice(&dx);
        for (a, b) in grad_w.iter_mut().zip(dw) {
            *a = *a + b;
        }
    }

    let mut grad_params = BTreeMap::new();
    grad_params.insert(
        "weight".to_string(),
        Tensor::from_vec(layer.weight().shape(), grad_w)?,
    );
    if layer.bias().is_some() {
        let mut gb = vec![T::zero(); cout];
        for gi in grad_out.data().chunks(out_per) {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc = *acc + gi[co * plane..][..plane].iter().copied().sum::<T>();
            }
        }
        grad_params.insert("bias".to_string(), Tensor::from_vec(&[cout], gb)?);
    }
    Ok(GradResult {
        grad_input: Tensor::from_vec(x.shape(), grad_x)?,
        grad_params,
    })
}

/// Spreads a `k x k` kernel with dilation `d` into the equivalent dense
/// `k_eff x k_eff` kernel (zeros in the gaps). `d = 1` returns the kernel
/// unchanged.
pub fn expand_dilated_kernel<T: Scalar>(weight: &Tensor<T>, dilation: usize) -> Result<Tensor<T>> {
    let (o, i, k, _) = weight.dims4()?;
    if dilation == 0 {
        return Err(Error::InvalidArgument("dilation must be >= 1".into()));
    }
    let ke = effective_kernel(k, dilation);
    let mut out = vec![T::zero(); o * i * ke * ke];
    let src = weight.data();
    for oi in 0..o * i {
        for ki in 0..k {
            for kj in 0..k {
                out[(oi * ke + ki * dilation) * ke + kj * dilation] = src[(oi * k + ki) * k + kj];
            }
        }
    }
    Tensor::from_vec(&[o, i, ke, ke], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(weight: Tensor<f64>, geo: ConvGeometry) -> Conv2dLayer<f64> {
        Conv2dLayer::new(weight, None, geo).unwrap()
    }

    #[test]
    fn out_shape_examples() {
        let mut rng = Rng::new(0);
        let c = Conv2dLayer::<f32>::he_init(1, 1, 3, ConvGeometry::strided(2, 1), false, &mut rng).unwrap();
        assert_eq!(out_shape(224, 224, &c).unwrap(), (112, 112));
        let d2 = ConvGeometry {
            dilation: 2,
            ..Default::default()
        };
        let c = Conv2dLayer::<f32>::he_init(1, 1, 3, d2, false, &mut rng).unwrap();
        assert_eq!(out_shape(7, 7, &c).unwrap(), (3, 3));
        let c = Conv2dLayer::<f32>::he_init(1, 1, 3, ConvGeometry::same(3, 3, 1), false, &mut rng).unwrap();
        assert_eq!(c.geometry().padding, 3);
        assert_eq!(out_shape(14, 14, &c).unwrap(), (14, 14));
        assert!(matches!(out_shape(4, 4, &c.clone()), Ok((4, 4))));
        let big = Conv2dLayer::<f32>::he_init(1, 1, 7, Default::default(), false, &mut rng).unwrap();
        assert!(matches!(out_shape(5, 5, &big), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn dilated_ones_kernel_counts_taps() {
        let x = Tensor::new(&[1, 1, 7, 7], 1.0).unwrap();
        let w = Tensor::new(&[1, 1, 3, 3], 1.0).unwrap();
        let c = layer(
            w,
            ConvGeometry {
                dilation: 2,
                ..Default::default()
            },
        );
        let y = conv2d(&x, &c).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::<f64>::randn(&[2, 1, 5, 6], &mut Rng::new(1), 0.0, 1.0).unwrap();
        let mut w = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        w.data_mut()[4] = 1.0;
        let c = layer(w, ConvGeometry::same(3, 1, 1));
        assert_eq!(conv2d(&x, &c).unwrap(), x);
        assert_eq!(conv2d_naive(&x, &c).unwrap(), x);

        let g = conv2d_backward(&x, &c, &Tensor::new(x.shape(), 1.0).unwrap()).unwrap();
        assert!(g.grad_input.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn naive_zero_weights_give_bias() {
        let x = Tensor::<f64>::randn(&[1, 2, 4, 4], &mut Rng::new(2), 0.0, 1.0).unwrap();
        let c = Conv2dLayer::new(
            Tensor::zeros(&[3, 2, 3, 3]).unwrap(),
            Some(Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap()),
            ConvGeometry::same(3, 1, 1),
        )
        .unwrap();
        let y = conv2d_naive(&x, &c).unwrap();
        for (i, plane) in y.data().chunks(16).enumerate() {
            assert!(plane.iter().all(|&v| v == [0.5, -1.0, 2.0][i]));
        }
    }

    #[test]
    fn depthwise_unit_kernel_is_identity() {
        let x = Tensor::<f64>::randn(&[2, 4, 3, 3], &mut Rng::new(4), 0.0, 1.0).unwrap();
        let c = layer(
            Tensor::new(&[4, 1, 1, 1], 1.0).unwrap(),
            ConvGeometry {
                groups: 4,
                ..Default::default()
            },
        );
        assert_eq!(conv2d_naive(&x, &c).unwrap(), x);
        assert_eq!(conv2d(&x, &c).unwrap(), x);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]).unwrap();
        let c = Conv2dLayer::<f32>::he_init(4, 4, 3, ConvGeometry::same(3, 1, 1), true, &mut Rng::new(0)).unwrap();
        assert!(matches!(conv2d(&x, &c), Err(Error::ShapeMismatch(_))));
        assert!(matches!(conv2d_naive(&x, &c), Err(Error::ShapeMismatch(_))));
        let good = Tensor::<f32>::zeros(&[1, 4, 8, 8]).unwrap();
        let bad_grad = Tensor::<f32>::zeros(&[1, 4, 7, 8]).unwrap();
        assert!(matches!(
            conv2d_backward(&good, &c, &bad_grad),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn invalid_layers_rejected() {
        let w = Tensor::<f32>::zeros(&[3, 1, 3, 3]).unwrap();
        let geo = ConvGeometry {
            groups: 2,
            ..Default::default()
        };
        assert!(Conv2dLayer::new(w.clone(), None, geo).is_err());
        let bad_bias = Some(Tensor::zeros(&[4]).unwrap());
        assert!(Conv2dLayer::new(w, bad_bias, Default::default()).is_err());
        let rect = Tensor::<f32>::zeros(&[1, 1, 3, 5]).unwrap();
        assert!(Conv2dLayer::new(rect, None, Default::default()).is_err());
    }

    #[test]
    fn unit_dilation_expansion_is_bitwise_noop() {
        let w = Tensor::<f32>::randn(&[2, 3, 3, 3], &mut Rng::new(9), 0.0, 1.0).unwrap();
        assert_eq!(expand_dilated_kernel(&w, 1).unwrap(), w);
    }

    #[test]
    fn dilated_kernel_matches_zero_inserted_dense_kernel() {
        let mut rng = Rng::new(10);
        let x = Tensor::<f64>::randn(&[1, 3, 11, 11], &mut rng, 0.0, 1.0).unwrap();
        let w = Tensor::randn(&[2, 3, 3, 3], &mut rng, 0.0, 1.0).unwrap();
        let dilated = layer(w.clone(), ConvGeometry::same(3, 3, 1));
        let dense = layer(expand_dilated_kernel(&w, 3).unwrap(), ConvGeometry::same(7, 1, 1));
        let a = conv2d(&x, &dilated).unwrap();
        let b = conv2d(&x, &dense).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
}
