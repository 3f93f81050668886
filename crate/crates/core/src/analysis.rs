//! Static cost and receptive-field analysis.
//!
//! MACs count multiply-accumulates of convolutions and linear layers only.
//! BN, GeLU, residual adds and pooling are tallied separately as
//! elementwise operations.

use serde::Serialize;

use crate::blocks::{branch_name, ConvBn, HeadBlock, MldcBlock};
use crate::error::{Error, Result};
use crate::model::{build_model, stage_name, ModelConfig, RapidNetModel, INPUT_MULTIPLE};
use crate::ops::{effective_kernel, out_shape, Conv2dLayer, LinearLayer};
use crate::params::join;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub macs: u64,
    pub out_shape: Vec<usize>,
    pub k: usize,
    pub d: usize,
    pub trf: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub variant: String,
    pub resolution: usize,
    pub total_params: usize,
    pub total_gmacs: f64,
    pub total_macs: u64,
    pub composite_rf: usize,
    pub elementwise_ops: u64,
    pub layers: Vec<LayerCost>,
}

/// Spatial operation as seen by the receptive-field recursion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpatialOp {
    Conv { kernel: usize, dilation: usize, stride: usize },
    /// Branches reading the same input; the widest one wins.
    Parallel(Vec<Vec<SpatialOp>>),
}

impl SpatialOp {
    pub fn conv(kernel: usize, dilation: usize, stride: usize) -> Self {
        SpatialOp::Conv {
            kernel,
            dilation,
            stride,
        }
    }
}

/// Side length of the square window seen by a `k x k` kernel with dilation `d`.
pub fn layer_trf(k: usize, d: usize) -> Result<usize> {
    if k == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel and dilation must be >= 1, got k={k}, d={d}"
        )));
    }
    Ok(effective_kernel(k, d))
}

fn rf_step(ops: &[SpatialOp], mut rf: usize, mut jump: usize) -> (usize, usize) {
    for op in ops {
        match op {
            SpatialOp::Conv {
                kernel,
                dilation,
                stride,
            } => {
                rf += (effective_kernel(*kernel, *dilation) - 1) * jump;
                jump *= stride;
            }
            SpatialOp::Parallel(branches) => {
                let (r, j) = branches
                    .iter()
                    .map(|b| rf_step(b, rf, jump))
                    .fold((rf, jump), |(r, j), (br, bj)| (r.max(br), j.max(bj)));
                rf = r;
                jump = j;
            }
        }
    }
    (rf, jump)
}

/// Input-space receptive field of a sequence of spatial ops.
pub fn receptive_field(ops: &[SpatialOp]) -> usize {
    rf_step(ops, 1, 1).0
}

/// MACs of one convolution producing an `ho x wo` map per sample.
pub fn conv_macs<T: Scalar>(conv: &Conv2dLayer<T>, batch: usize, ho: usize, wo: usize) -> u64 {
    let k = conv.kernel_size();
    let cin_g = conv.in_channels() / conv.geometry().groups;
    (k * k * cin_g * conv.out_channels()) as u64 * (batch * ho * wo) as u64
}

pub fn linear_macs<T: Scalar>(layer: &LinearLayer<T>, batch: usize) -> u64 {
    (layer.in_features() * layer.out_features() * batch) as u64
}

/// Per-layer trace of a model at one input resolution (batch 1).
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub layers: Vec<LayerCost>,
    pub elementwise_ops: u64,
    pub spatial: Vec<SpatialOp>,
}

struct Tracer {
    trace: Trace,
    c: usize,
    h: usize,
    w: usize,
}

impl Tracer {
    fn numel(&self) -> u64 {
        (self.c * self.h * self.w) as u64
    }

    fn conv<T: Scalar>(&mut self, name: &str, conv: &Conv2dLayer<T>) -> Result<SpatialOp> {
        if conv.in_channels() != self.c {
            return Err(Error::shape(format!(
                "{name} expects {} channels, trace has {}",
                conv.in_channels(),
                self.c
            )));
        }
        let (ho, wo) = out_shape(self.h, self.w, conv)?;
        let g = conv.geometry();
        let k = conv.kernel_size();
        self.c = conv.out_channels();
        self.h = ho;
        self.w = wo;
        self.trace.layers.push(LayerCost {
            name: name.to_string(),
            params: conv.param_count(),
            macs: conv_macs(conv, 1, ho, wo),
            out_shape: vec![1, self.c, ho, wo],
            k,
            d: g.dilation,
            trf: layer_trf(k, g.dilation)?,
        });
        Ok(SpatialOp::conv(k, g.dilation, g.stride))
    }

    fn conv_bn<T: Scalar>(&mut self, name: &str, unit: &ConvBn<T>) -> Result<SpatialOp> {
        let op = self.conv(name, &unit.conv)?;
        if let Some(bn) = &unit.bn {
            self.trace.layers.push(LayerCost {
                name: join(name, "bn"),
                params: 2 * bn.channels(),
                macs: 0,
                out_shape: vec![1, self.c, self.h, self.w],
                k: 1,
                d: 1,
                trf: 1,
            });
            self.trace.elementwise_ops += self.numel();
        }
        Ok(op)
    }

    fn elementwise(&mut self) {
        self.trace.elementwise_ops += self.numel();
    }

    fn linear<T: Scalar>(&mut self, name: &str, layer: &LinearLayer<T>) {
        self.c = layer.out_features();
        self.trace.layers.push(LayerCost {
            name: name.to_string(),
            params: layer.param_count(),
            macs: linear_macs(layer, 1),
            out_shape: vec![1, self.c],
            k: 1,
            d: 1,
            trf: 1,
        });
    }

    fn mldc<T: Scalar>(&mut self, p: &str, m: &MldcBlock<T>) -> Result<Vec<SpatialOp>> {
        let mut spatial = Vec::new();
        if let Some(cpe) = &m.cpe {
            spatial.push(self.conv(&join(p, "cpe"), &cpe.conv)?);
            if cpe.skip {
                self.elementwise();
            }
        }
        spatial.push(self.conv_bn(&join(p, "pw_in"), &m.pw_in)?);
        let (c, h, w) = (self.c, self.h, self.w);
        let mut branches = Vec::new();
        for (k, br) in m.branches.iter().enumerate() {
            self.c = c;
            self.h = h;
            self.w = w;
            branches.push(vec![self.conv_bn(&join(p, &branch_name(k)), br)?]);
            if m.gelu_per_branch {
                self.elementwise();
            }
            if k > 0 {
                self.elementwise();
            }
        }
        spatial.push(SpatialOp::Parallel(branches));
        if !m.gelu_per_branch {
            self.elementwise();
        }
        spatial.push(self.conv_bn(&join(p, "pw_out"), &m.pw_out)?);
        self.elementwise();
        Ok(spatial)
    }

    fn head<T: Scalar>(&mut self, head: &HeadBlock<T>) {
        self.elementwise();
        self.h = 1;
        self.w = 1;
        if let Some(h) = &head.hidden {
            self.linear("head.hidden", h);
            self.elementwise();
        }
        self.linear("head.fc", &head.fc);
    }
}

/// Walks `model` at `resolution x resolution`, recording every conv, BN and
/// linear layer in execution order.
pub fn trace<T: Scalar>(model: &RapidNetModel<T>, resolution: usize) -> Result<Trace> {
    if resolution == 0 || !resolution.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::geometry(format!(
            "resolution {resolution} is not a positive multiple of {INPUT_MULTIPLE}"
        )));
    }
    let mut t = Tracer {
        trace: Trace::default(),
        c: 3,
        h: resolution,
        w: resolution,
    };
    let mut spatial = Vec::new();
    spatial.push(t.conv_bn("stem.conv1", &model.stem.conv1)?);
    t.elementwise();
    spatial.push(t.conv_bn("stem.conv2", &model.stem.conv2)?);
    t.elementwise();
    for (i, st) in model.stages.iter().enumerate() {
        let sn = stage_name(i);
        if let Some(d) = &st.down {
            spatial.push(t.conv_bn(&join(&sn, "down"), &d.unit)?);
        }
        for (j, b) in st.irbs.iter().enumerate() {
            let p = join(&sn, &format!("irb{j}"));
            spatial.push(t.conv_bn(&join(&p, "expand"), &b.expand)?);
            t.elementwise();
            spatial.push(t.conv_bn(&join(&p, "dw"), &b.dw)?);
            t.elementwise();
            spatial.push(t.conv_bn(&join(&p, "project"), &b.project)?);
            t.elementwise();
        }
        for (j, b) in st.dcbs.iter().enumerate() {
            spatial.extend(t.mldc(&join(&join(&sn, &format!("dcb{j}")), "mldc"), &b.mldc)?);

            let p = join(&join(&sn, &format!("dcb{j}")), "ffn");
            spatial.push(t.conv_bn(&join(&p, "dw"), &b.ffn.dw)?);
            spatial.push(t.conv(&join(&p, "fc1"), &b.ffn.fc1)?);
            t.elementwise();
            spatial.push(t.conv_bn(&join(&p, "fc2"), &b.ffn.fc2)?);
            t.elementwise();
        }
    }
    t.head(&model.head);
    let mut out = t.trace;
    out.spatial = spatial;
    Ok(out)
}

/// Conv MACs of one MLDC block on an `[n, C, h, w]` input.
pub fn mldc_macs<T: Scalar>(block: &MldcBlock<T>, n: usize, h: usize, w: usize) -> Result<u64> {
    let mut t = Tracer {
        trace: Trace::default(),
        c: block.channels(),
        h,
        w,
    };
    t.mldc("mldc", block)?;
    Ok(n as u64 * t.trace.layers.iter().map(|l| l.macs).sum::<u64>())
}

/// Learnable scalars, BN running statistics excluded.
pub fn count_params<T: Scalar>(model: &RapidNetModel<T>) -> usize {
    model.param_count()
}

pub fn count_macs<T: Scalar>(model: &RapidNetModel<T>, resolution: usize) -> Result<u64> {
    Ok(trace(model, resolution)?.layers.iter().map(|l| l.macs).sum())
}

/// Receptive field (input pixels) of one output position of the last stage.
pub fn composite_rf<T: Scalar>(model: &RapidNetModel<T>) -> Result<usize> {
    Ok(receptive_field(&trace(model, INPUT_MULTIPLE)?.spatial))
}

pub fn report_for_model<T: Scalar>(model: &RapidNetModel<T>, resolution: usize) -> Result<AnalysisReport> {
    let t = trace(model, resolution)?;
    let total_macs: u64 = t.layers.iter().map(|l| l.macs).sum();
    Ok(AnalysisReport {
        variant: model.config.name.clone(),
        resolution,
        total_params: t.layers.iter().map(|l| l.params).sum(),
        total_gmacs: (total_macs as f64 / 1e6).round() / 1e3,
        total_macs,
        composite_rf: receptive_field(&t.spatial),
        elementwise_ops: t.elementwise_ops,
        layers: t.layers,
    })
}

/// Builds `cfg` in `f32` and analyses it at `resolution`.
pub fn report(cfg: &ModelConfig, resolution: usize) -> Result<AnalysisReport> {
    report_for_model(&build_model::<f32>(cfg)?, resolution)
}
