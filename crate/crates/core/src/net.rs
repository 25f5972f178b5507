//! Small strided-convolution descriptor network with hand-written backprop.
//!
//! Layout: `conv → act → conv → act → … → dense`. Feature maps are stored
//! channel-major (`[c][y][x]`), convolutions are "valid" (no padding) and
//! evaluated as im2col followed by a GEMM. All parameters live in one flat
//! vector so optimizer state, gradients and checkpoints share an
//! enumeration order: per conv layer weights `[out][in][ky][kx]` then bias,
//! then dense weights `[out][in]` then bias.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::loss::{self, LossConfig, LossError};
use crate::types::{fill_patch, normalize_in_place, DescriptorField, GrayImage, ImageError, Patch, Pixel};

const CHECKPOINT_MAGIC: &[u8; 8] = b"PFLWNET\0";
const CHECKPOINT_VERSION: u32 = 1;
/// Floor on squared descriptor distance so that `d/ds sqrt(s)` stays finite.
pub const DIST_EPS: f64 = 1e-8;
/// Fixed shard size for batch gradient accumulation; independent of the
/// worker count so reductions always happen in the same order.
const GRAD_SHARD: usize = 8;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input has {got} values, network expects {expected}")]
    InputSize { expected: usize, got: usize },
    #[error("patch size {got} does not match network input size {expected}")]
    PatchSize { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("gradient has {got} entries, network has {expected} parameters")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("checkpoint: bad magic bytes")]
    BadMagic,
    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint: truncated")]
    Truncated,
    #[error("checkpoint: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    /// Side length of the (single-channel, square) input.
    pub input_size: usize,
    pub convs: Vec<ConvSpec>,
    pub activation: Activation,
    pub output_dim: usize,
}

impl Architecture {
    /// Three strided convolutions (5×5/16, 5×5/32, 3×3/64, stride 2, tanh)
    /// and a dense map to 64 values.
    pub fn desk(patch_size: usize) -> Self {
        Self {
            input_size: patch_size,
            convs: vec![
                ConvSpec {
                    channels: 16,
                    kernel: 5,
                    stride: 2,
                },
                ConvSpec {
                    channels: 32,
                    kernel: 5,
                    stride: 2,
                },
                ConvSpec {
                    channels: 64,
                    kernel: 3,
                    stride: 2,
                },
            ],
            activation: Activation::Tanh,
            output_dim: 64,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvGeom {
    in_ch: usize,
    out_ch: usize,
    in_size: usize,
    out_size: usize,
    kernel: usize,
    stride: usize,
    w_off: usize,
    b_off: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn n(&self) -> usize {
        self.out_size * self.out_size
    }
}

#[derive(Clone, Debug)]
struct DenseGeom {
    inputs: usize,
    outputs: usize,
    w_off: usize,
    b_off: usize,
}

fn layout(arch: &Architecture) -> Result<(Vec<ConvGeom>, DenseGeom, usize), NetError> {
    if arch.input_size == 0 || arch.output_dim == 0 {
        return Err(NetError::Architecture("input size and output dim must be positive".into()));
    }
    let mut convs = Vec::with_capacity(arch.convs.len());
    let mut size = arch.input_size;
    let mut ch = 1;
    let mut off = 0;
    for (i, spec) in arch.convs.iter().enumerate() {
        if spec.channels == 0 || spec.kernel == 0 || spec.stride == 0 {
            return Err(NetError::Architecture(format!("conv {i} has a zero field")));
        }
        if spec.kernel > size {
            return Err(NetError::Architecture(format!(
                "conv {i} kernel {} exceeds its {size}×{size} input",
                spec.kernel
            )));
        }
        let out_size = (size - spec.kernel) / spec.stride + 1;
        let w = spec.channels * ch * spec.kernel * spec.kernel;
        convs.push(ConvGeom {
            in_ch: ch,
            out_ch: spec.channels,
            in_size: size,
            out_size,
            kernel: spec.kernel,
            stride: spec.stride,
            w_off: off,
            b_off: off + w,
        });
        off += w + spec.channels;
        size = out_size;
        ch = spec.channels;
    }
    let inputs = ch * size * size;
    let dense = DenseGeom {
        inputs,
        outputs: arch.output_dim,
        w_off: off,
        b_off: off + inputs * arch.output_dim,
    };
    off += inputs * arch.output_dim + arch.output_dim;
    Ok((convs, dense, off))
}

/// Cached intermediates of one forward pass, consumed by [`DescriptorNet::backward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// im2col matrix per conv layer, `K × N` row-major.
    cols: Vec<Vec<f64>>,
    /// Post-activation output per conv layer, `out_ch × N`.
    acts: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Forward {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

#[derive(Clone, Debug)]
pub struct DescriptorNet {
    arch: Architecture,
    convs: Vec<ConvGeom>,
    dense: DenseGeom,
    params: Vec<f64>,
}

impl DescriptorNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, NetError> {
        let (convs, dense, count) = layout(&arch)?;
        let mut params = vec![0.0; count];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in &convs {
            let kk = g.kernel * g.kernel;
            let limit = (6.0 / ((g.in_ch * kk + g.out_ch * kk) as f64)).sqrt();
            for w in &mut params[g.w_off..g.b_off] {
                *w = rng.random_range(-limit..limit);
            }
        }
        let limit = (6.0 / ((dense.inputs + dense.outputs) as f64)).sqrt();
        for w in &mut params[dense.w_off..dense.b_off] {
            *w = rng.random_range(-limit..limit);
        }
        Ok(Self {
            arch,
            convs,
            dense,
            params,
        })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self, NetError> {
        let (convs, dense, count) = layout(&arch)?;
        if params.len() != count {
            return Err(NetError::ShapeMismatch {
                expected: count,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NetError::Corrupt("non-finite parameter".into()));
        }
        Ok(Self {
            arch,
            convs,
            dense,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_size(&self) -> usize {
        self.arch.input_size
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, input: &[f64]) -> Result<Forward, NetError> {
        let expected = self.arch.input_size * self.arch.input_size;
        if input.len() != expected {
            return Err(NetError::InputSize {
                expected,
                got: input.len(),
            });
        }
        Ok(self.forward_unchecked(input))
    }

    fn forward_unchecked(&self, input: &[f64]) -> Forward {
        let act = self.arch.activation;
        let mut cols = Vec::with_capacity(self.convs.len());
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.convs.len());
        for g in &self.convs {
            let src: &[f64] = acts.last().map(|v| v.as_slice()).unwrap_or(input);
            let col = im2col(src, g);
            let (k, n) = (g.k(), g.n());
            let mut out = vec![0.0; g.out_ch * n];
            for (o, row) in out.chunks_exact_mut(n).enumerate() {
                row.fill(self.params[g.b_off + o]);
            }
            gemm(
                g.out_ch,
                k,
                n,
                &self.params[g.w_off..g.b_off],
                false,
                &col,
                false,
                &mut out,
                1.0,
            );
            out.iter_mut().for_each(|v| *v = act.apply(*v));
            cols.push(col);
            acts.push(out);
        }
        let h: &[f64] = acts.last().map(|v| v.as_slice()).unwrap_or(input);
        let d = &self.dense;
        let mut output = self.params[d.b_off..d.b_off + d.outputs].to_vec();
        gemm(
            d.outputs,
            d.inputs,
            1,
            &self.params[d.w_off..d.b_off],
            false,
            h,
            false,
            &mut output,
            1.0,
        );
        Forward { cols, acts, output }
    }

    /// Accumulates `∂(grad_out · output)/∂θ` into `grads`.
    pub fn backward(
        &self,
        input: &[f64],
        fwd: &Forward,
        grad_out: &[f64],
        grads: &mut [f64],
    ) -> Result<(), NetError> {
        if grads.len() != self.params.len() {
            return Err(NetError::ShapeMismatch {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        if grad_out.len() != self.arch.output_dim {
            return Err(NetError::InputSize {
                expected: self.arch.output_dim,
                got: grad_out.len(),
            });
        }
        let d = &self.dense;
        let h: &[f64] = fwd.acts.last().map(|v| v.as_slice()).unwrap_or(input);
        // dW += g · hᵀ
        gemm(
            d.outputs,
            1,
            d.inputs,
            grad_out,
            false,
            h,
            false,
            &mut grads[d.w_off..d.b_off],
            1.0,
        );
        for (gb, g) in grads[d.b_off..d.b_off + d.outputs].iter_mut().zip(grad_out) {
            *gb += g;
        }
        if self.convs.is_empty() {
            return Ok(());
        }
        // dh = Wᵀ g
        let mut upstream = vec![0.0; d.inputs];
        gemm(
            d.inputs,
            d.outputs,
            1,
            &self.params[d.w_off..d.b_off],
            true,
            grad_out,
            false,
            &mut upstream,
            0.0,
        );
        let act = self.arch.activation;
        for (li, g) in self.convs.iter().enumerate().rev() {
            let (k, n) = (g.k(), g.n());
            let out = &fwd.acts[li];
            let dpre: Vec<f64> = upstream
                .iter()
                .zip(out)
                .map(|(u, y)| u * act.derivative_from_output(*y))
                .collect();
            // dW += dpre · colsᵀ
            gemm(
                g.out_ch,
                n,
                k,
                &dpre,
                false,
                &fwd.cols[li],
                true,
                &mut grads[g.w_off..g.b_off],
                1.0,
            );
            for (o, row) in dpre.chunks_exact(n).enumerate() {
                grads[g.b_off + o] += row.iter().sum::<f64>();
            }
            if li == 0 {
                break;
            }
            // dcols = Wᵀ dpre, then scatter back onto the input map.
            let mut dcols = vec![0.0; k * n];
            gemm(
                k,
                g.out_ch,
                n,
                &self.params[g.w_off..g.b_off],
                true,
                &dpre,
                false,
                &mut dcols,
                0.0,
            );
            upstream = col2im(&dcols, g);
        }
        Ok(())
    }

    /// Descriptor of an already-normalized patch.
    pub fn describe(&self, patch: &Patch) -> Result<Vec<f64>, NetError> {
        if patch.size() != self.arch.input_size {
            return Err(NetError::PatchSize {
                expected: self.arch.input_size,
                got: patch.size(),
            });
        }
        Ok(self.forward_unchecked(patch.data()).output)
    }

    /// Descriptor at every pixel of `img`, each computed from the normalized
    /// mirror-padded patch around it. Rows are evaluated in parallel; each
    /// pixel is independent so the result does not depend on scheduling.
    pub fn describe_field(&self, img: &GrayImage, patch_size: usize) -> Result<DescriptorField, NetError> {
        if patch_size.is_multiple_of(2) {
            return Err(ImageError::EvenPatchSize(patch_size).into());
        }
        if patch_size != self.arch.input_size {
            return Err(NetError::PatchSize {
                expected: self.arch.input_size,
                got: patch_size,
            });
        }
        let (w, h, dim) = (img.width(), img.height(), self.arch.output_dim);
        let rows: Vec<Vec<f64>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut row = Vec::with_capacity(w * dim);
                let mut buf = Vec::with_capacity(patch_size * patch_size);
                for x in 0..w {
                    buf.clear();
                    fill_patch(img, Pixel::new(x as i64, y as i64), patch_size, &mut buf);
                    normalize_in_place(&mut buf);
                    row.extend_from_slice(&self.forward_unchecked(&buf).output);
                }
                row
            })
            .collect();
        Ok(DescriptorField::new(w, h, dim, rows.concat())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.params.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arch.input_size as u32).to_le_bytes());
        out.push(self.arch.activation.tag());
        out.extend_from_slice(&(self.arch.convs.len() as u32).to_le_bytes());
        for c in &self.arch.convs {
            for v in [c.channels, c.kernel, c.stride] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.arch.output_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(NetError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NetError::UnsupportedVersion(version));
        }
        let input_size = r.u32()? as usize;
        let tag = r.take(1)?[0];
        let activation =
            Activation::from_tag(tag).ok_or_else(|| NetError::Corrupt(format!("activation tag {tag}")))?;
        let n_convs = r.u32()? as usize;
        if n_convs > 64 {
            return Err(NetError::Corrupt(format!("{n_convs} conv layers")));
        }
        let mut convs = Vec::with_capacity(n_convs);
        for _ in 0..n_convs {
            convs.push(ConvSpec {
                channels: r.u32()? as usize,
                kernel: r.u32()? as usize,
                stride: r.u32()? as usize,
            });
        }
        let output_dim = r.u32()? as usize;
        let arch = Architecture {
            input_size,
            convs,
            activation,
            output_dim,
        };
        let count = r.u64()? as usize;
        let (_, _, expected) = layout(&arch)?;
        if count != expected {
            return Err(NetError::Corrupt(format!(
                "parameter count {count} does not match architecture ({expected})"
            )));
        }
        let body = r.take(count.checked_mul(8).ok_or(NetError::Truncated)?)?;
        if r.pos != bytes.len() {
            return Err(NetError::Corrupt("trailing bytes".into()));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::from_params(arch, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| NetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| NetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).ok_or(NetError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(NetError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn im2col(src: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.n();
    let mut cols = vec![0.0; g.k() * n];
    let (s, k) = (g.in_size, g.kernel);
    for c in 0..g.in_ch {
        let plane = &src[c * s * s..(c + 1) * s * s];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                for oy in 0..g.out_size {
                    let line = &plane[(oy * g.stride + ky) * s..];
                    let dst = &mut row[oy * g.out_size..(oy + 1) * g.out_size];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d = line[ox * g.stride + kx];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.n();
    let (s, k) = (g.in_size, g.kernel);
    let mut out = vec![0.0; g.in_ch * s * s];
    for c in 0..g.in_ch {
        let plane = &mut out[c * s * s..(c + 1) * s * s];
        for ky in 0..k {
            for kx in 0..k {
                let row = &dcols[((c * k + ky) * k + kx) * n..][..n];
                for oy in 0..g.out_size {
                    let base = (oy * g.stride + ky) * s + kx;
                    for ox in 0..g.out_size {
                        plane[base + ox * g.stride] += row[oy * g.out_size + ox];
                    }
                }
            }
        }
    }
    out
}

/// `c = op(a)·op(b) + beta·c` for row-major `a` (m×k after op) and `b` (k×n after op).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths are asserted, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Normalized anchor, positive and negative patch data for one triplet.
#[derive(Clone, Debug)]
pub struct TripletPatches {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Floored L2 distance and its gradient w.r.t. `a` (the gradient w.r.t. `b`
/// is the negation).
pub fn distance_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let sq: f64 = diff.iter().map(|d| d * d).sum();
    if sq < DIST_EPS {
        return (DIST_EPS.sqrt(), vec![0.0; diff.len()]);
    }
    let d = sq.sqrt();
    (d, diff.into_iter().map(|v| v / d).collect())
}

/// Batch distances (match, non-match) under the network.
pub fn triplet_distances(net: &DescriptorNet, batch: &[TripletPatches]) -> Result<(Vec<f64>, Vec<f64>), NetError> {
    let mut dm = Vec::with_capacity(batch.len());
    let mut dn = Vec::with_capacity(batch.len());
    for t in batch {
        let a = net.forward(&t.anchor)?.output;
        let p = net.forward(&t.positive)?.output;
        let n = net.forward(&t.negative)?.output;
        dm.push(distance_with_grad(&a, &p).0);
        dn.push(distance_with_grad(&a, &n).0);
    }
    Ok((dm, dn))
}

/// Hinge+SD loss of the batch and its exact gradient w.r.t. every parameter.
pub fn loss_and_grad(
    net: &DescriptorNet,
    batch: &[TripletPatches],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>), NetError> {
    if batch.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    struct Fwd {
        a: Forward,
        p: Forward,
        n: Forward,
        ga_m: Vec<f64>,
        ga_n: Vec<f64>,
        dm: f64,
        dn: f64,
    }
    let fwds: Vec<Fwd> = batch
        .par_iter()
        .map(|t| -> Result<Fwd, NetError> {
            let a = net.forward(&t.anchor)?;
            let p = net.forward(&t.positive)?;
            let n = net.forward(&t.negative)?;
            let (dm, ga_m) = distance_with_grad(&a.output, &p.output);
            let (dn, ga_n) = distance_with_grad(&a.output, &n.output);
            Ok(Fwd {
                a,
                p,
                n,
                ga_m,
                ga_n,
                dm,
                dn,
            })
        })
        .collect::<Result<_, _>>()?;
    let dm: Vec<f64> = fwds.iter().map(|f| f.dm).collect();
    let dn: Vec<f64> = fwds.iter().map(|f| f.dn).collect();
    let (loss, g_m, g_n) = loss::hinge_sd_loss_grad(&dm, &dn, cfg)?;

    let count = net.param_count();
    let shards: Vec<Vec<f64>> = fwds
        .par_chunks(GRAD_SHARD)
        .zip(batch.par_chunks(GRAD_SHARD))
        .enumerate()
        .map(|(shard, (fs, ts))| -> Result<Vec<f64>, NetError> {
            let mut grads = vec![0.0; count];
            for (j, (f, t)) in fs.iter().zip(ts).enumerate() {
                let i = shard * GRAD_SHARD + j;
                let ga: Vec<f64> = f
                    .ga_m
                    .iter()
                    .zip(&f.ga_n)
                    .map(|(m, n)| g_m[i] * m + g_n[i] * n)
                    .collect();
                let gp: Vec<f64> = f.ga_m.iter().map(|m| -g_m[i] * m).collect();
                let gn: Vec<f64> = f.ga_n.iter().map(|n| -g_n[i] * n).collect();
                net.backward(&t.anchor, &f.a, &ga, &mut grads)?;
                net.backward(&t.positive, &f.p, &gp, &mut grads)?;
                net.backward(&t.negative, &f.n, &gn, &mut grads)?;
            }
            Ok(grads)
        })
        .collect::<Result<_, _>>()?;
    let mut total = vec![0.0; count];
    for s in &shards {
        for (t, g) in total.iter_mut().zip(s) {
            *t += g;
        }
    }
    Ok((loss, total))
}

/// SGD with classical momentum and a step learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub base_lr: f64,
    pub momentum: f64,
    /// The learning rate halves every this many epochs (0 disables decay).
    pub halve_every: usize,
    pub epoch: usize,
    pub velocity: Vec<f64>,
}

impl OptState {
    pub fn new(param_count: usize, lr: f64, momentum: f64) -> Self {
        Self {
            base_lr: lr,
            momentum,
            halve_every: 100,
            epoch: 0,
            velocity: vec![0.0; param_count],
        }
    }

    pub fn lr(&self) -> f64 {
        if self.halve_every == 0 {
            return self.base_lr;
        }
        self.base_lr * 0.5f64.powi((self.epoch / self.halve_every) as i32)
    }

    pub fn next_epoch(&mut self) {
        self.epoch += 1;
    }
}

/// `v ← μ·v − lr·g`, `θ ← θ + v`.
pub fn sgd_step(net: &mut DescriptorNet, grads: &[f64], opt: &mut OptState) -> Result<(), NetError> {
    let n = net.param_count();
    for len in [grads.len(), opt.velocity.len()] {
        if len != n {
            return Err(NetError::ShapeMismatch { expected: n, got: len });
        }
    }
    let lr = opt.lr();
    for ((p, v), g) in net.params.iter_mut().zip(opt.velocity.iter_mut()).zip(grads) {
        *v = opt.momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}
