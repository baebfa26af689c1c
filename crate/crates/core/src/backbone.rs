//! Separable voxel-feature backbone.
//!
//! A view convolution slices a `(C, Z, Y, X)` volume along one axis and runs
//! the same 2D convolution over every slice, which equals a 3D convolution
//! whose kernel is 1 along that axis. An SVFM combines three such views
//! (BEV: slices along Z, k×k over Y-X; side: slices along X, k×k over Z-Y;
//! front: slices along Y, k×k over Z-X). Three SVFM blocks produce features
//! at strides 2, 4 and 8, which the neck squeezes to BEV maps, upsamples with
//! transposed convolutions and concatenates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{conv2d_plane, relu_inplace, transposed_conv2d, BatchNorm, Conv2dParams, Tensor};

/// Axis a view convolution slices along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SliceAxis {
    /// BEV view: each Z slice is a `(Y, X)` image.
    Z,
    /// Side view: each X slice is a `(Z, Y)` image.
    X,
    /// Front view: each Y slice is a `(Z, X)` image.
    Y,
}

/// Slice count and in-plane dims `(n, P, Q)` plus element strides for `(slice, p, q)`.
fn slice_layout(axis: SliceAxis, z: usize, y: usize, x: usize) -> ([usize; 3], [usize; 3]) {
    match axis {
        SliceAxis::Z => ([z, y, x], [y * x, x, 1]),
        SliceAxis::X => ([x, z, y], [1, y * x, x]),
        SliceAxis::Y => ([y, z, x], [x, y * x, 1]),
    }
}

/// Reassembles `(n, P, Q)` slice dims into `(Z, Y, X)`.
fn volume_dims(axis: SliceAxis, n: usize, p: usize, q: usize) -> [usize; 3] {
    match axis {
        SliceAxis::Z => [n, p, q],
        SliceAxis::X => [p, q, n],
        SliceAxis::Y => [p, n, q],
    }
}

fn check_volume(volume: &Tensor, context: &'static str) -> Result<[usize; 4]> {
    if volume.rank() != 4 {
        return Err(Error::shape(context, "volume rank", 4, volume.rank()));
    }
    let s = volume.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

/// Applies `conv` to every slice along `axis` (slice stride 1).
pub fn view_conv(volume: &Tensor, axis: SliceAxis, conv: &Conv2dParams) -> Result<Tensor> {
    view_conv_strided(volume, axis, conv, 1)
}

/// Applies `conv` to slices `0, s, 2s, …` along `axis`; the output keeps
/// `ceil(n / s)` slices.
pub fn view_conv_strided(volume: &Tensor, axis: SliceAxis, conv: &Conv2dParams, slice_stride: usize) -> Result<Tensor> {
    let [c, z, y, x] = check_volume(volume, "view_conv")?;
    if c != conv.in_channels() {
        return Err(Error::shape("view_conv", "input channels", conv.in_channels(), c));
    }
    if slice_stride == 0 {
        return Err(Error::invalid("slice stride must be positive"));
    }
    let ([n, p, q], [ss, sp, sq]) = slice_layout(axis, z, y, x);
    if n == 0 || p == 0 || q == 0 {
        return Err(Error::shape("view_conv", "spatial dim", 1, 0));
    }
    let (op, oq) = conv.output_hw(p, q)?;
    let n_out = (n - 1) / slice_stride + 1;
    let c_out = conv.out_channels();
    let plane_in = z * y * x;
    let data = volume.data();

    let slices: Vec<Vec<f64>> = (0..n_out)
        .into_par_iter()
        .map_init(
            || (vec![0.0; c * p * q], Vec::new()),
            |(buf, cols), si| {
                let base = si * slice_stride * ss;
                for ch in 0..c {
                    let src = ch * plane_in + base;
                    let dst = &mut buf[ch * p * q..(ch + 1) * p * q];
                    for ip in 0..p {
                        for iq in 0..q {
                            dst[ip * q + iq] = data[src + ip * sp + iq * sq];
                        }
                    }
                }
                let mut out = vec![0.0; c_out * op * oq];
                conv2d_plane(buf, p, q, conv, &mut out, cols).map(|_| out)
            },
        )
        .collect::<Result<_>>()?;

    let [oz, oy, ox] = volume_dims(axis, n_out, op, oq);
    let (_, [ts, tp, tq]) = slice_layout(axis, oz, oy, ox);
    let plane_out = oz * oy * ox;
    let mut out = vec![0.0; c_out * plane_out];
    for (si, s) in slices.iter().enumerate() {
        for ch in 0..c_out {
            let src = &s[ch * op * oq..(ch + 1) * op * oq];
            let base = ch * plane_out + si * ts;
            for ip in 0..op {
                for iq in 0..oq {
                    out[base + ip * tp + iq * tq] = src[ip * oq + iq];
                }
            }
        }
    }
    Tensor::new(vec![c_out, oz, oy, ox], out)
}

/// One view convolution: slice axis, 2D conv and slice stride.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewConv {
    pub axis: SliceAxis,
    pub conv: Conv2dParams,
    pub slice_stride: usize,
}

impl ViewConv {
    pub fn forward(&self, volume: &Tensor) -> Result<Tensor> {
        view_conv_strided(volume, self.axis, &self.conv, self.slice_stride)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }
}

/// Order in which an SVFM combines its three views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum SvfmVariant {
    /// bev → side → front, BN+ReLU after each.
    #[default]
    Sequential,
    /// bev + side + front on the same input, then a shared BN+ReLU.
    Parallel,
    /// bev → BN+ReLU, then side + front on its output, then BN+ReLU.
    SeqParallel,
    /// bev in parallel with side → BN+ReLU → front; summed, then BN+ReLU.
    ParSeq,
}

impl SvfmVariant {
    pub const ALL: [SvfmVariant; 4] = [Self::Sequential, Self::Parallel, Self::SeqParallel, Self::ParSeq];

    /// Number of batch-norm layers in one SVFM of this variant.
    pub fn bn_layers(self) -> usize {
        match self {
            Self::Sequential => 3,
            Self::Parallel => 1,
            Self::SeqParallel | Self::ParSeq => 2,
        }
    }

    /// `(bev, side, front)` input channel counts for an SVFM `c_in → c_out`.
    pub fn view_in_channels(self, c_in: usize, c_out: usize) -> [usize; 3] {
        match self {
            Self::Sequential | Self::SeqParallel => [c_in, c_out, c_out],
            Self::Parallel => [c_in, c_in, c_in],
            Self::ParSeq => [c_in, c_in, c_out],
        }
    }

    /// In-plane strides and slice strides `(bev, side, front)` for overall stride `s`,
    /// chosen so every branch halves Z, Y and X together.
    fn strides(self, s: usize) -> [((usize, usize), usize); 3] {
        match self {
            Self::Sequential | Self::SeqParallel => [((s, s), 1), ((s, 1), 1), (if self == Self::Sequential { (1, 1) } else { (s, 1) }, 1)],
            Self::Parallel => [((s, s), s), ((s, s), s), ((s, s), s)],
            Self::ParSeq => [((s, s), s), ((s, s), 1), ((1, s), 1)],
        }
    }
}

/// Whether BN and ReLU are applied (debug `Linear` mode bypasses both).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Normal,
    Linear,
}

fn bn_relu(mut t: Tensor, bn: &BatchNorm, mode: Mode) -> Result<Tensor> {
    if mode == Mode::Normal {
        bn.apply_channels_first(t.data_mut())?;
        relu_inplace(t.data_mut());
    }
    Ok(t)
}

fn sum(a: Tensor, b: &Tensor, context: &'static str) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("{context}: branch shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    let mut a = a;
    a.add_assign(b)?;
    Ok(a)
}

/// Separable voxel feature module.
#[derive(Clone, Debug, PartialEq)]
pub struct Svfm {
    pub variant: SvfmVariant,
    pub bev: ViewConv,
    pub side: ViewConv,
    pub front: ViewConv,
    /// `variant.bn_layers()` entries, in application order.
    pub bns: Vec<BatchNorm>,
}

impl Svfm {
    /// Builds an SVFM from three `(out, in, k, k)` weight tensors with "same" padding.
    pub fn new(variant: SvfmVariant, weights: [Tensor; 3], stride: usize, bns: Vec<BatchNorm>) -> Result<Self> {
        if bns.len() != variant.bn_layers() {
            return Err(Error::shape("Svfm", "bn layers", variant.bn_layers(), bns.len()));
        }
        let c_out = weights[0].dim(0);
        let c_in = weights[0].dim(1);
        let expect_in = variant.view_in_channels(c_in, c_out);
        let strides = variant.strides(stride);
        let axes = [SliceAxis::Z, SliceAxis::X, SliceAxis::Y];
        let mut views = Vec::with_capacity(3);
        for (i, w) in weights.into_iter().enumerate() {
            if w.rank() != 4 || w.dim(0) != c_out || w.dim(1) != expect_in[i] {
                return Err(Error::invalid(format!(
                    "Svfm view {i}: weight shape {:?}, expected ({c_out}, {}, k, k)",
                    w.shape(),
                    expect_in[i]
                )));
            }
            let (plane, slice) = strides[i];
            views.push(ViewConv {
                axis: axes[i],
                conv: Conv2dParams::same(w, plane)?,
                slice_stride: slice,
            });
        }
        if bns.iter().any(|b| b.channels() != c_out) {
            return Err(Error::invalid("Svfm batch-norm width differs from output channels"));
        }
        let mut it = views.into_iter();
        let (bev, side, front) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        Ok(Self {
            variant,
            bev,
            side,
            front,
            bns,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.bev.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.bev.conv.out_channels()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self.variant {
            SvfmVariant::Sequential => {
                let a = bn_relu(self.bev.forward(x)?, &self.bns[0], mode)?;
                let b = bn_relu(self.side.forward(&a)?, &self.bns[1], mode)?;
                bn_relu(self.front.forward(&b)?, &self.bns[2], mode)
            }
            SvfmVariant::Parallel => {
                let s = sum(self.bev.forward(x)?, &self.side.forward(x)?, "svfm parallel")?;
                let s = sum(s, &self.front.forward(x)?, "svfm parallel")?;
                bn_relu(s, &self.bns[0], mode)
            }
            SvfmVariant::SeqParallel => {
                let a = bn_relu(self.bev.forward(x)?, &self.bns[0], mode)?;
                let s = sum(self.side.forward(&a)?, &self.front.forward(&a)?, "svfm seq_parallel")?;
                bn_relu(s, &self.bns[1], mode)
            }
            SvfmVariant::ParSeq => {
                let b = bn_relu(self.side.forward(x)?, &self.bns[0], mode)?;
                let s = sum(self.bev.forward(x)?, &self.front.forward(&b)?, "svfm par_seq")?;
                bn_relu(s, &self.bns[1], mode)
            }
        }
    }

    pub fn conv_param_count(&self) -> usize {
        self.bev.param_count() + self.side.param_count() + self.front.param_count()
    }

    pub fn bn_param_count(&self) -> usize {
        self.bns.iter().map(BatchNorm::param_count).sum()
    }

    pub fn param_count(&self) -> usize {
        self.conv_param_count() + self.bn_param_count()
    }
}

/// One SVFM block: `num_svfm` modules, the first with stride `first_stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub num_svfm: usize,
    pub out_channels: usize,
    pub first_stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub kernel: usize,
    pub variant: SvfmVariant,
    pub blocks: Vec<BlockConfig>,
    pub neck_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 32,
            kernel: 3,
            variant: SvfmVariant::Sequential,
            blocks: vec![
                BlockConfig {
                    num_svfm: 2,
                    out_channels: 64,
                    first_stride: 2,
                },
                BlockConfig {
                    num_svfm: 2,
                    out_channels: 128,
                    first_stride: 2,
                },
                BlockConfig {
                    num_svfm: 3,
                    out_channels: 256,
                    first_stride: 2,
                },
            ],
            neck_channels: 192,
        }
    }
}

/// Minimum input X/Y extent: the stride-8 map must come from at least one full cell.
pub const MIN_PLANAR_EXTENT: usize = 8;

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != 3 {
            return Err(Error::shape("BackboneConfig", "blocks", 3, self.blocks.len()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel must be odd and positive, got {}", self.kernel)));
        }
        if self.blocks.iter().any(|b| b.num_svfm == 0 || b.out_channels == 0 || b.first_stride == 0) {
            return Err(Error::invalid("every block needs at least one SVFM, channels and a stride"));
        }
        if self.in_channels == 0 || self.neck_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    /// Cumulative stride of each block's output relative to the input grid.
    pub fn scale_strides(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .scan(1, |acc, b| {
                *acc *= b.first_stride;
                Some(*acc)
            })
            .collect()
    }

    /// Output `(C, Z, Y, X)` of every block for an input `(D, Z, Y, X)`.
    pub fn output_shapes(&self, input: [usize; 4]) -> Result<Vec<[usize; 4]>> {
        self.validate()?;
        let [d, z, y, x] = input;
        if d != self.in_channels {
            return Err(Error::shape("backbone", "input channels", self.in_channels, d));
        }
        if z == 0 {
            return Err(Error::shape("backbone", "Z extent", 1, 0));
        }
        if y < MIN_PLANAR_EXTENT {
            return Err(Error::shape("backbone", "Y extent", MIN_PLANAR_EXTENT, y));
        }
        if x < MIN_PLANAR_EXTENT {
            return Err(Error::shape("backbone", "X extent", MIN_PLANAR_EXTENT, x));
        }
        let mut dims = [z, y, x];
        Ok(self
            .blocks
            .iter()
            .map(|b| {
                dims = dims.map(|n| n.div_ceil(b.first_stride));
                [b.out_channels, dims[0], dims[1], dims[2]]
            })
            .collect())
    }

    /// Output shape of the neck: `(3·neck_channels, Y₁, X₁)`.
    pub fn neck_shape(&self, input: [usize; 4]) -> Result<[usize; 3]> {
        let shapes = self.output_shapes(input)?;
        let first = shapes[0];
        let s0 = self.scale_strides()[0];
        for (i, sh) in shapes.iter().enumerate() {
            let up = self.scale_strides()[i] / s0;
            for (n, target) in [(sh[2], first[2]), (sh[3], first[3])] {
                if n * up < target || n * up >= target + up {
                    return Err(Error::invalid(format!("scale {i} upsampled to {} cannot match {target}", n * up)));
                }
            }
        }
        Ok([self.blocks.len() * self.neck_channels, first[2], first[3]])
    }

    /// Neck input channels per scale after folding Z: `C_i · Z_i`.
    pub fn squeezed_channels(&self, input: [usize; 4]) -> Result<Vec<usize>> {
        Ok(self.output_shapes(input)?.iter().map(|s| s[0] * s[1]).collect())
    }
}

/// Three dense `(C_i, Z_i, Y_i, X_i)` volumes at strides 2, 4, 8.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures {
    pub scales: Vec<Tensor>,
    pub strides: Vec<usize>,
}

/// Transposed-conv upsampler of one scale, followed by BN+ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct NeckBranch {
    pub deconv: Conv2dParams,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub blocks: Vec<Vec<Svfm>>,
    pub neck: Vec<NeckBranch>,
    /// Input `(D, Z, Y, X)` the neck widths were sized for.
    pub input_shape: [usize; 4],
}

fn frozen_bn(c: usize) -> BatchNorm {
    BatchNorm::new(vec![0.0; c], vec![1.0; c], vec![1.0; c], vec![0.0; c], 1e-3).expect("valid bn")
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl Backbone {
    /// He-normal convolution weights, frozen unit batch norms.
    pub fn seeded(config: BackboneConfig, grid_dims: [usize; 3], seed: u64) -> Result<Self> {
        let [gx, gy, gz] = grid_dims;
        let input_shape = [config.in_channels, gz, gy, gx];
        config.neck_shape(input_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel;
        let mut c_in = config.in_channels;
        let mut blocks = Vec::new();
        for b in &config.blocks {
            let mut mods = Vec::new();
            for m in 0..b.num_svfm {
                let stride = if m == 0 { b.first_stride } else { 1 };
                let ins = config.variant.view_in_channels(c_in, b.out_channels);
                let weights = ins.map(|ci| he_normal(&mut rng, &[b.out_channels, ci, k, k], ci * k * k));
                let bns = (0..config.variant.bn_layers()).map(|_| frozen_bn(b.out_channels)).collect();
                mods.push(Svfm::new(config.variant, weights, stride, bns)?);
                c_in = b.out_channels;
            }
            blocks.push(mods);
        }
        let strides = config.scale_strides();
        let neck = config
            .squeezed_channels(input_shape)?
            .into_iter()
            .zip(&strides)
            .map(|(ci, &s)| {
                let up = s / strides[0];
                let w = he_normal(&mut rng, &[config.neck_channels, ci, up, up], ci);
                Ok(NeckBranch {
                    deconv: Conv2dParams::new(w, None, (up, up), (0, 0))?,
                    bn: frozen_bn(config.neck_channels),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            blocks,
            neck,
            input_shape,
        })
    }

    pub fn forward(&self, stack: &Tensor, mode: Mode) -> Result<MultiScaleFeatures> {
        let shape = check_volume(stack, "backbone")?;
        self.config.output_shapes(shape)?;
        let mut x = stack.clone();
        let mut scales = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            for m in block {
                x = m.forward(&x, mode)?;
            }
            scales.push(x.clone());
        }
        Ok(MultiScaleFeatures {
            scales,
            strides: self.config.scale_strides(),
        })
    }

    /// Squeeze, upsample to the finest scale, crop overhang, concatenate.
    pub fn neck(&self, features: &MultiScaleFeatures, mode: Mode) -> Result<Tensor> {
        if features.scales.len() != self.neck.len() {
            return Err(Error::shape("neck", "scales", self.neck.len(), features.scales.len()));
        }
        let first = features.scales[0].shape();
        let (ty, tx) = (first[2], first[3]);
        let mut parts = Vec::with_capacity(self.neck.len());
        for (i, (f, branch)) in features.scales.iter().zip(&self.neck).enumerate() {
            let up = transposed_conv2d(&bev_squeeze(f)?, &branch.deconv)?;
            let s = branch.deconv.stride().0;
            let (uy, ux) = (up.dim(1), up.dim(2));
            if uy < ty || ux < tx || uy >= ty + s || ux >= tx + s {
                return Err(Error::invalid(format!("neck scale {i}: upsampled {uy}x{ux} cannot match {ty}x{tx}")));
            }
            let cropped = crop_hw(&up, ty, tx)?;
            parts.push(bn_relu(cropped, &branch.bn, mode)?);
        }
        Tensor::concat_leading(&parts.iter().collect::<Vec<_>>())
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().flatten().map(Svfm::param_count).sum::<usize>()
            + self.neck.iter().map(|n| n.deconv.param_count() + n.bn.param_count()).sum::<usize>()
    }
}

fn crop_hw(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, th, tw) = (t.dim(0), t.dim(1), t.dim(2));
    if th == h && tw == w {
        return Ok(t.clone());
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * th + y) * tw;
            out.extend_from_slice(&t.data()[row..row + w]);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Folds Z into channels: `(C, Z, Y, X) → (C·Z, Y, X)`, channel `c·Z + z`.
pub fn bev_squeeze(feature: &Tensor) -> Result<Tensor> {
    let [c, z, y, x] = check_volume(feature, "bev_squeeze")?;
    feature.clone().reshape(&[c * z, y, x])
}

/// Inverse of [`bev_squeeze`].
pub fn bev_unsqueeze(map: &Tensor, z: usize) -> Result<Tensor> {
    if map.rank() != 3 || z == 0 || map.dim(0) % z != 0 {
        return Err(Error::invalid(format!("cannot unsqueeze {:?} with Z = {z}", map.shape())));
    }
    map.clone().reshape(&[map.dim(0) / z, z, map.dim(1), map.dim(2)])
}

/// One line of a parameter report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub module: &'static str,
    pub layer: String,
    pub count: usize,
}

/// Per-SVFM comparison against a single k³ convolution with the same channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SvfmCount {
    pub name: String,
    pub separable: usize,
    pub hypothetical_3d: usize,
}

impl SvfmCount {
    pub fn ratio(&self) -> f64 {
        self.separable as f64 / self.hypothetical_3d as f64
    }
}

/// Closed-form backbone parameter counts (convolutions without bias, BN as gamma/beta).
pub fn param_count(config: &BackboneConfig, input: [usize; 4]) -> Result<(Vec<ParamEntry>, Vec<SvfmCount>)> {
    let k = config.kernel;
    let mut entries = Vec::new();
    let mut svfms = Vec::new();
    let mut c_in = config.in_channels;
    for (bi, b) in config.blocks.iter().enumerate() {
        for m in 0..b.num_svfm {
            let c_out = b.out_channels;
            let ins = config.variant.view_in_channels(c_in, c_out);
            let mut separable = 0;
            for (view, ci) in ["bev", "side", "front"].iter().zip(ins) {
                let n = ci * c_out * k * k;
                separable += n;
                entries.push(ParamEntry {
                    module: "backbone",
                    layer: format!("block{}.svfm{}.{view} {ci}->{c_out} k{k}", bi + 1, m + 1),
                    count: n,
                });
            }
            entries.push(ParamEntry {
                module: "backbone",
                layer: format!("block{}.svfm{}.bn x{}", bi + 1, m + 1, config.variant.bn_layers()),
                count: config.variant.bn_layers() * 2 * c_out,
            });
            svfms.push(SvfmCount {
                name: format!("block{}.svfm{} {c_in}->{c_out}", bi + 1, m + 1),
                separable,
                hypothetical_3d: c_in * c_out * k * k * k,
            });
            c_in = c_out;
        }
    }
    let strides = config.scale_strides();
    for (i, ci) in config.squeezed_channels(input)?.into_iter().enumerate() {
        let up = strides[i] / strides[0];
        entries.push(ParamEntry {
            module: "neck",
            layer: format!("deconv{} {ci}->{} k{up}", i + 1, config.neck_channels),
            count: ci * config.neck_channels * up * up,
        });
        entries.push(ParamEntry {
            module: "neck",
            layer: format!("deconv{}.bn", i + 1),
            count: 2 * config.neck_channels,
        });
    }
    Ok((entries, svfms))
}
