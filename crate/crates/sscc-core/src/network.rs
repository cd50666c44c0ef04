//! The twin network: a configurable convolutional backbone (optionally with
//! residual blocks) pooled globally into a latent vector, followed by a
//! two-layer projection head whose softmax output has one neuron per
//! cluster. Forward, loss, and reverse-mode gradients are implemented by
//! hand in f64; gradients are exact derivatives of the implemented forward
//! pass, which the tests pin against central finite differences.
//!
//! Convolutions use "same" zero padding, so spatial extent changes only
//! through strides and the global pooling makes the latent width independent
//! of the input side: one trained network accepts any patch side that keeps
//! every intermediate extent at least one pixel wide.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::{loss_with_grad, LossConfig, LossMode, LossParts};
use crate::mat::{LabelBatch, LatentBatch, Mat};
use crate::patch::Patch;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"SSCKPT1";

/// One convolution stage of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    /// Residual blocks run two same-width convolutions and add a skip path
    /// (1x1 projection when channels or stride change).
    pub residual: bool,
}

/// Architecture of the backbone and projection head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Patch side the network is built for; forward also accepts other sides.
    pub input_side: usize,
    pub input_channels: usize,
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub latent_dim: usize,
    pub head_hidden: usize,
    pub cluster_count: usize,
}

impl NetworkConfig {
    /// Default desk-scale stack: three residual blocks of widths 32/64/128,
    /// pooled into a 256-wide latent, head of 512 hidden units.
    pub fn default_for(input_side: usize, input_channels: usize, cluster_count: usize) -> Self {
        NetworkConfig {
            input_side,
            input_channels,
            conv_blocks: [32, 64, 128]
                .iter()
                .map(|&out_channels| ConvBlockSpec {
                    out_channels,
                    kernel_size: 3,
                    stride: 1,
                    residual: true,
                })
                .collect(),
            latent_dim: 256,
            head_hidden: 512,
            cluster_count,
        }
    }

    /// A small plain-conv stack for CPU-budget runs.
    pub fn compact(input_side: usize, input_channels: usize, cluster_count: usize) -> Self {
        NetworkConfig {
            input_side,
            input_channels,
            conv_blocks: [16, 32]
                .iter()
                .map(|&out_channels| ConvBlockSpec {
                    out_channels,
                    kernel_size: 3,
                    stride: 1,
                    residual: false,
                })
                .collect(),
            latent_dim: 64,
            head_hidden: 128,
            cluster_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cluster_count < 2 {
            return Err(Error::arg("cluster count must be at least 2"));
        }
        if self.latent_dim < self.cluster_count {
            return Err(Error::arg(
                "latent dimension must be at least the cluster count",
            ));
        }
        if self.head_hidden == 0 || self.input_channels == 0 || self.input_side == 0 {
            return Err(Error::arg("network dims must be positive"));
        }
        if self.conv_blocks.is_empty() {
            return Err(Error::arg("at least one conv block is required"));
        }
        for spec in &self.conv_blocks {
            if spec.out_channels == 0 || spec.stride == 0 {
                return Err(Error::arg("conv channels and stride must be positive"));
            }
            if spec.kernel_size == 0 || spec.kernel_size % 2 == 0 {
                return Err(Error::arg("conv kernels must be odd"));
            }
        }
        simulate_spatial(&self.conv_blocks, self.input_side)?;
        Ok(())
    }
}

/// Walks the conv stack symbolically and errors when a block would see an
/// input smaller than its padding allows.
fn simulate_spatial(blocks: &[ConvBlockSpec], input_side: usize) -> Result<usize> {
    let mut side = input_side;
    for (i, spec) in blocks.iter().enumerate() {
        if side < 1 || spec.kernel_size > 2 * side - 1 {
            return Err(Error::arg(format!(
                "conv block {i} (kernel {}) reduces spatial extent below usable size (side {side})",
                spec.kernel_size
            )));
        }
        let pad = (spec.kernel_size - 1) / 2;
        side = (side + 2 * pad - spec.kernel_size) / spec.stride + 1;
    }
    if side < 1 {
        return Err(Error::arg("conv stack reduces spatial extent below 1"));
    }
    Ok(side)
}

/// NCHW feature batch.
#[derive(Debug, Clone)]
struct Feat {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Feat {
    fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Feat { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    #[inline]
    fn plane(&self, img: usize, ch: usize) -> &[f64] {
        let hw = self.h * self.w;
        let base = (img * self.c + ch) * hw;
        &self.data[base..base + hw]
    }

    #[inline]
    fn plane_mut(&mut self, img: usize, ch: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        let base = (img * self.c + ch) * hw;
        &mut self.data[base..base + hw]
    }
}

#[derive(Debug, Clone)]
struct Conv2d {
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    /// [out_c][in_c][k][k], row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv2d {
    fn init(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let weight = (0..out_c * in_c * k * k)
            .map(|_| normal.sample(rng))
            .collect();
        Conv2d { in_c, out_c, k, stride, weight, bias: vec![0.0; out_c] }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = (self.k - 1) / 2;
        (
            (h + 2 * pad - self.k) / self.stride + 1,
            (w + 2 * pad - self.k) / self.stride + 1,
        )
    }

    fn forward(&self, x: &Feat) -> Feat {
        debug_assert_eq!(x.c, self.in_c);
        let (oh, ow) = self.out_dims(x.h, x.w);
        let pad = ((self.k - 1) / 2) as isize;
        let mut out = Feat::zeros(x.n, self.out_c, oh, ow);
        for img in 0..x.n {
            for oc in 0..self.out_c {
                out.plane_mut(img, oc).fill(self.bias[oc]);
            }
            for oc in 0..self.out_c {
                for ic in 0..self.in_c {
                    let in_plane = x.plane(img, ic);
                    let w_base = ((oc * self.in_c) + ic) * self.k * self.k;
                    let out_plane = out.plane_mut(img, oc);
                    for kh in 0..self.k {
                        for kw in 0..self.k {
                            let wv = self.weight[w_base + kh * self.k + kw];
                            for orow in 0..oh {
                                let ir = (orow * self.stride) as isize + kh as isize - pad;
                                if ir < 0 || ir >= x.h as isize {
                                    continue;
                                }
                                let in_row = &in_plane[ir as usize * x.w..(ir as usize + 1) * x.w];
                                let out_row = &mut out_plane[orow * ow..(orow + 1) * ow];
                                for (ocol, o) in out_row.iter_mut().enumerate() {
                                    let icol = (ocol * self.stride) as isize + kw as isize - pad;
                                    if icol >= 0 && icol < x.w as isize {
                                        *o += wv * in_row[icol as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    fn backward(
        &self,
        x: &Feat,
        grad_out: &Feat,
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) -> Feat {
        let (oh, ow) = (grad_out.h, grad_out.w);
        let pad = ((self.k - 1) / 2) as isize;
        let mut grad_in = Feat::zeros(x.n, x.c, x.h, x.w);
        for img in 0..x.n {
            for oc in 0..self.out_c {
                let go_plane = grad_out.plane(img, oc);
                grad_b[oc] += go_plane.iter().sum::<f64>();
                for ic in 0..self.in_c {
                    let in_plane = x.plane(img, ic);
                    let gi_plane = grad_in.plane_mut(img, ic);
                    let w_base = ((oc * self.in_c) + ic) * self.k * self.k;
                    for kh in 0..self.k {
                        for kw in 0..self.k {
                            let widx = w_base + kh * self.k + kw;
                            let wv = self.weight[widx];
                            let mut gw_acc = 0.0;
                            for orow in 0..oh {
                                let ir = (orow * self.stride) as isize + kh as isize - pad;
                                if ir < 0 || ir >= x.h as isize {
                                    continue;
                                }
                                let in_row = &in_plane[ir as usize * x.w..(ir as usize + 1) * x.w];
                                let gi_row =
                                    &mut gi_plane[ir as usize * x.w..(ir as usize + 1) * x.w];
                                let go_row = &go_plane[orow * ow..(orow + 1) * ow];
                                for (ocol, &go) in go_row.iter().enumerate() {
                                    let icol = (ocol * self.stride) as isize + kw as isize - pad;
                                    if icol >= 0 && icol < x.w as isize {
                                        gw_acc += go * in_row[icol as usize];
                                        gi_row[icol as usize] += wv * go;
                                    }
                                }
                            }
                            grad_w[widx] += gw_acc;
                        }
                    }
                }
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone)]
struct Linear {
    in_dim: usize,
    out_dim: usize,
    /// [out_dim][in_dim], row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).unwrap();
        let weight = (0..out_dim * in_dim).map(|_| normal.sample(rng)).collect();
        Linear { in_dim, out_dim, weight, bias: vec![0.0; out_dim] }
    }

    fn forward(&self, x: &Mat) -> Mat {
        debug_assert_eq!(x.cols(), self.in_dim);
        let mut out = Mat::zeros(x.rows(), self.out_dim);
        for i in 0..x.rows() {
            let xr = x.row(i);
            let or = out.row_mut(i);
            for (j, o) in or.iter_mut().enumerate() {
                let wr = &self.weight[j * self.in_dim..(j + 1) * self.in_dim];
                let mut acc = self.bias[j];
                for (&xv, &wv) in xr.iter().zip(wr) {
                    acc += xv * wv;
                }
                *o = acc;
            }
        }
        out
    }

    fn backward(&self, x: &Mat, grad_out: &Mat, grad_w: &mut [f64], grad_b: &mut [f64]) -> Mat {
        let mut grad_in = Mat::zeros(x.rows(), self.in_dim);
        for i in 0..x.rows() {
            let xr = x.row(i);
            let gr = grad_out.row(i);
            let gi = grad_in.row_mut(i);
            for (j, &g) in gr.iter().enumerate() {
                grad_b[j] += g;
                let wr = &self.weight[j * self.in_dim..(j + 1) * self.in_dim];
                let gw = &mut grad_w[j * self.in_dim..(j + 1) * self.in_dim];
                for ((gwv, &xv), (giv, &wv)) in
                    gw.iter_mut().zip(xr).zip(gi.iter_mut().zip(wr))
                {
                    *gwv += g * xv;
                    *giv += g * wv;
                }
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone)]
enum Block {
    Plain(Conv2d),
    Residual {
        conv1: Conv2d,
        conv2: Conv2d,
        /// 1x1 projection when channels or stride change; identity otherwise.
        proj: Option<Conv2d>,
    },
}

/// The twin network: shared backbone and projection head parameters.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    blocks: Vec<Block>,
    to_latent: Linear,
    head_hidden_layer: Linear,
    head_out: Linear,
}

/// Per-tensor gradients in the network's parameter declaration order.
#[derive(Debug, Clone)]
pub struct Gradients {
    tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tensors
    }
}

struct BlockCache {
    input: Feat,
    /// Plain: conv output pre-ReLU. Residual: conv1 output pre-ReLU.
    pre1: Feat,
    /// Residual only: relu(pre1), the input of conv2.
    post1: Option<Feat>,
    /// Residual only: conv2 output plus skip, pre-ReLU.
    sum_pre: Option<Feat>,
}

struct ForwardCache {
    blocks: Vec<BlockCache>,
    /// Pooled features, the input of `to_latent`.
    pooled: Mat,
    /// Latent batch, the input of the head.
    latent: Mat,
    /// Head hidden pre-activation.
    hidden_pre: Mat,
    /// relu(hidden_pre), the input of the output layer.
    hidden: Mat,
    labels: Mat,
    feat_h: usize,
    feat_w: usize,
}

fn relu_forward(x: &Feat) -> Feat {
    let mut out = x.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

fn relu_backward_inplace(grad: &mut Feat, pre: &Feat) {
    for (g, &p) in grad.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl Network {
    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameter tensors in declaration order.
    pub fn param_tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for block in &self.blocks {
            match block {
                Block::Plain(conv) => {
                    out.push(&conv.weight);
                    out.push(&conv.bias);
                }
                Block::Residual { conv1, conv2, proj } => {
                    out.push(&conv1.weight);
                    out.push(&conv1.bias);
                    out.push(&conv2.weight);
                    out.push(&conv2.bias);
                    if let Some(p) = proj {
                        out.push(&p.weight);
                        out.push(&p.bias);
                    }
                }
            }
        }
        out.push(&self.to_latent.weight);
        out.push(&self.to_latent.bias);
        out.push(&self.head_hidden_layer.weight);
        out.push(&self.head_hidden_layer.bias);
        out.push(&self.head_out.weight);
        out.push(&self.head_out.bias);
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for block in &mut self.blocks {
            match block {
                Block::Plain(conv) => {
                    out.push(&mut conv.weight);
                    out.push(&mut conv.bias);
                }
                Block::Residual { conv1, conv2, proj } => {
                    out.push(&mut conv1.weight);
                    out.push(&mut conv1.bias);
                    out.push(&mut conv2.weight);
                    out.push(&mut conv2.bias);
                    if let Some(p) = proj {
                        out.push(&mut p.weight);
                        out.push(&mut p.bias);
                    }
                }
            }
        }
        out.push(&mut self.to_latent.weight);
        out.push(&mut self.to_latent.bias);
        out.push(&mut self.head_hidden_layer.weight);
        out.push(&mut self.head_hidden_layer.bias);
        out.push(&mut self.head_out.weight);
        out.push(&mut self.head_out.bias);
        out
    }

    /// Index of the first head tensor in declaration order; tensors from
    /// here on belong to the projection head.
    pub fn head_tensor_start(&self) -> usize {
        self.param_tensors().len() - 4
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            tensors: self
                .param_tensors()
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect(),
        }
    }

    fn patches_to_feat(&self, batch: &[Patch]) -> Result<Feat> {
        let first = batch.first().ok_or_else(|| Error::arg("empty batch"))?;
        let side = first.side;
        let channels = first.channels;
        if channels != self.config.input_channels {
            return Err(Error::dim(format!(
                "patch has {} channels, network expects {}",
                channels, self.config.input_channels
            )));
        }
        if batch.iter().any(|p| p.side != side || p.channels != channels) {
            return Err(Error::dim("patches in a batch must share dimensions"));
        }
        simulate_spatial(&self.config.conv_blocks, side)?;
        let mut feat = Feat::zeros(batch.len(), channels, side, side);
        for (img, patch) in batch.iter().enumerate() {
            for ch in 0..channels {
                let plane = feat.plane_mut(img, ch);
                for r in 0..side {
                    for c in 0..side {
                        plane[r * side + c] = patch.value(r, c, ch) as f64;
                    }
                }
            }
        }
        Ok(feat)
    }

    fn forward_cached(&self, batch: &[Patch]) -> Result<ForwardCache> {
        let mut current = self.patches_to_feat(batch)?;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            match block {
                Block::Plain(conv) => {
                    let pre = conv.forward(&current);
                    let out = relu_forward(&pre);
                    block_caches.push(BlockCache {
                        input: std::mem::replace(&mut current, out),
                        pre1: pre,
                        post1: None,
                        sum_pre: None,
                    });
                }
                Block::Residual { conv1, conv2, proj } => {
                    let pre1 = conv1.forward(&current);
                    let post1 = relu_forward(&pre1);
                    let main = conv2.forward(&post1);
                    let mut sum = main;
                    match proj {
                        Some(p) => {
                            let skip = p.forward(&current);
                            for (s, k) in sum.data.iter_mut().zip(&skip.data) {
                                *s += k;
                            }
                        }
                        None => {
                            for (s, k) in sum.data.iter_mut().zip(&current.data) {
                                *s += k;
                            }
                        }
                    }
                    let out = relu_forward(&sum);
                    block_caches.push(BlockCache {
                        input: std::mem::replace(&mut current, out),
                        pre1,
                        post1: Some(post1),
                        sum_pre: Some(sum),
                    });
                }
            }
        }

        // global average pooling over space
        let n = current.n;
        let hw = (current.h * current.w) as f64;
        let mut pooled = Mat::zeros(n, current.c);
        for img in 0..n {
            for ch in 0..current.c {
                *pooled.at_mut(img, ch) =
                    current.plane(img, ch).iter().sum::<f64>() / hw;
            }
        }

        let latent = self.to_latent.forward(&pooled);
        let hidden_pre = self.head_hidden_layer.forward(&latent);
        let mut hidden = hidden_pre.clone();
        for v in hidden.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let logits = self.head_out.forward(&hidden);
        let labels = softmax_rows(&logits);
        if !labels.is_finite() {
            return Err(Error::NonFinite(
                "forward produced non-finite label representations".into(),
            ));
        }
        Ok(ForwardCache {
            blocks: block_caches,
            pooled,
            latent,
            hidden_pre,
            hidden,
            labels,
            feat_h: current.h,
            feat_w: current.w,
        })
    }

    /// Forward pass: latent representations after global pooling and softmax
    /// label representations, one row per patch.
    pub fn forward(&self, batch: &[Patch]) -> Result<(LatentBatch, LabelBatch)> {
        let cache = self.forward_cached(batch)?;
        Ok((cache.latent, cache.labels))
    }

    /// Backpropagates a label-representation gradient into the parameter
    /// gradients (accumulating).
    fn backward(&self, cache: &ForwardCache, grad_labels: &Mat, grads: &mut Gradients) {
        let n = grad_labels.rows();
        let c = grad_labels.cols();

        // softmax backward: dz_j = y_j * (g_j - sum_k g_k y_k)
        let mut grad_logits = Mat::zeros(n, c);
        for i in 0..n {
            let y = cache.labels.row(i);
            let g = grad_labels.row(i);
            let inner: f64 = y.iter().zip(g).map(|(&yv, &gv)| yv * gv).sum();
            for (j, gl) in grad_logits.row_mut(i).iter_mut().enumerate() {
                *gl = y[j] * (g[j] - inner);
            }
        }

        let n_tensors = grads.tensors.len();
        let (gw_out, gb_out) = {
            let t = &mut grads.tensors;
            let (a, b) = t.split_at_mut(n_tensors - 1);
            (&mut a[n_tensors - 2], &mut b[0])
        };
        let mut grad_hidden =
            self.head_out
                .backward(&cache.hidden, &grad_logits, gw_out, gb_out);

        for i in 0..grad_hidden.rows() {
            for j in 0..grad_hidden.cols() {
                if cache.hidden_pre.at(i, j) <= 0.0 {
                    *grad_hidden.at_mut(i, j) = 0.0;
                }
            }
        }
        let grad_latent = {
            let t = &mut grads.tensors;
            let (a, b) = t.split_at_mut(n_tensors - 3);
            self.head_hidden_layer.backward(
                &cache.latent,
                &grad_hidden,
                &mut a[n_tensors - 4],
                &mut b[0],
            )
        };
        let grad_pooled = {
            let t = &mut grads.tensors;
            let (a, b) = t.split_at_mut(n_tensors - 5);
            self.to_latent
                .backward(&cache.pooled, &grad_latent, &mut a[n_tensors - 6], &mut b[0])
        };

        // global pooling backward: spread the gradient evenly over space
        let last_c = grad_pooled.cols();
        let hw = cache.feat_h * cache.feat_w;
        let mut grad_feat = Feat::zeros(n, last_c, cache.feat_h, cache.feat_w);
        for img in 0..n {
            for ch in 0..last_c {
                let g = grad_pooled.at(img, ch) / hw as f64;
                grad_feat.plane_mut(img, ch).fill(g);
            }
        }

        // conv blocks in reverse; tensor index bookkeeping mirrors
        // param_tensors() declaration order
        let mut tensor_idx = self.head_tensor_start() - 2; // to_latent handled above
        for (block, bcache) in self.blocks.iter().zip(&cache.blocks).rev() {
            match block {
                Block::Plain(conv) => {
                    relu_backward_inplace(&mut grad_feat, &bcache.pre1);
                    tensor_idx -= 2;
                    let (gw, gb) = {
                        let t = &mut grads.tensors;
                        let (a, b) = t.split_at_mut(tensor_idx + 1);
                        (&mut a[tensor_idx], &mut b[0])
                    };
                    grad_feat = conv.backward(&bcache.input, &grad_feat, gw, gb);
                }
                Block::Residual { conv1, conv2, proj } => {
                    relu_backward_inplace(&mut grad_feat, bcache.sum_pre.as_ref().unwrap());
                    let grad_sum = grad_feat;
                    let used = if proj.is_some() { 6 } else { 4 };
                    tensor_idx -= used;

                    // skip path
                    let mut grad_input = match proj {
                        Some(p) => {
                            let (gw, gb) = {
                                let t = &mut grads.tensors;
                                let (a, b) = t.split_at_mut(tensor_idx + 5);
                                (&mut a[tensor_idx + 4], &mut b[0])
                            };
                            p.backward(&bcache.input, &grad_sum, gw, gb)
                        }
                        None => grad_sum.clone(),
                    };

                    // main path: conv2 then conv1
                    let mut grad_post1 = {
                        let t = &mut grads.tensors;
                        let (a, b) = t.split_at_mut(tensor_idx + 3);
                        conv2.backward(
                            bcache.post1.as_ref().unwrap(),
                            &grad_sum,
                            &mut a[tensor_idx + 2],
                            &mut b[0],
                        )
                    };
                    relu_backward_inplace(&mut grad_post1, &bcache.pre1);
                    let grad_main = {
                        let t = &mut grads.tensors;
                        let (a, b) = t.split_at_mut(tensor_idx + 1);
                        conv1.backward(&bcache.input, &grad_post1, &mut a[tensor_idx], &mut b[0])
                    };
                    for (gi, gm) in grad_input.data.iter_mut().zip(&grad_main.data) {
                        *gi += gm;
                    }
                    grad_feat = grad_input;
                }
            }
        }
    }

    /// Runs the twin forward on both view batches, evaluates the objective,
    /// and backpropagates exact gradients into every parameter. The two
    /// passes share parameters, so their gradients accumulate.
    pub fn forward_with_gradients(
        &self,
        batch_a: &[Patch],
        batch_b: &[Patch],
        loss_config: &LossConfig,
        mode: LossMode,
    ) -> Result<(LossParts, Gradients)> {
        let cache_a = self.forward_cached(batch_a)?;
        let cache_b = self.forward_cached(batch_b)?;
        let (parts, grad_ya, grad_yb) =
            loss_with_grad(&cache_a.labels, &cache_b.labels, loss_config, mode)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFinite("loss is not finite".into()));
        }
        let mut grads = self.zero_gradients();
        self.backward(&cache_a, &grad_ya, &mut grads);
        self.backward(&cache_b, &grad_yb, &mut grads);
        Ok((parts, grads))
    }

    /// Serializes the checkpoint: magic, config, then every parameter tensor
    /// in declaration order as f32.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path.as_ref())?;
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC)?;
        let cfg = &self.config;
        for v in [
            cfg.input_side,
            cfg.input_channels,
            cfg.latent_dim,
            cfg.head_hidden,
            cfg.cluster_count,
            cfg.conv_blocks.len(),
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for spec in &cfg.conv_blocks {
            for v in [
                spec.out_channels,
                spec.kernel_size,
                spec.stride,
                usize::from(spec.residual),
            ] {
                w.write_all(&(v as u32).to_le_bytes())?;
            }
        }
        let total: usize = self.param_count();
        w.write_all(&(total as u64).to_le_bytes())?;
        for tensor in self.param_tensors() {
            for &v in tensor.iter() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint, rejecting unknown magic and any config/payload
    /// mismatch.
    pub fn load(path: impl AsRef<Path>) -> Result<Network> {
        let file = File::open(path.as_ref())?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let read_u32 = |r: &mut BufReader<File>| -> Result<usize> {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            Ok(u32::from_le_bytes(buf) as usize)
        };
        let input_side = read_u32(&mut r)?;
        let input_channels = read_u32(&mut r)?;
        let latent_dim = read_u32(&mut r)?;
        let head_hidden = read_u32(&mut r)?;
        let cluster_count = read_u32(&mut r)?;
        let n_blocks = read_u32(&mut r)?;
        if n_blocks > 1024 {
            return Err(Error::format("checkpoint declares an absurd block count"));
        }
        let mut conv_blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let out_channels = read_u32(&mut r)?;
            let kernel_size = read_u32(&mut r)?;
            let stride = read_u32(&mut r)?;
            let residual = read_u32(&mut r)? != 0;
            conv_blocks.push(ConvBlockSpec {
                out_channels,
                kernel_size,
                stride,
                residual,
            });
        }
        let config = NetworkConfig {
            input_side,
            input_channels,
            latent_dim,
            head_hidden,
            cluster_count,
            conv_blocks,
        };
        config
            .validate()
            .map_err(|e| Error::format(format!("checkpoint config invalid: {e}")))?;

        let mut count_buf = [0u8; 8];
        r.read_exact(&mut count_buf)?;
        let declared = u64::from_le_bytes(count_buf) as usize;

        let mut net = build_network(&config, 0)?;
        if net.param_count() != declared {
            return Err(Error::format(format!(
                "checkpoint declares {} parameters, config requires {}",
                declared,
                net.param_count()
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != declared * 4 {
            return Err(Error::format(format!(
                "checkpoint payload is {} bytes, {} parameters require {}",
                payload.len(),
                declared,
                declared * 4
            )));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        for tensor in net.param_tensors_mut() {
            for v in tensor.iter_mut() {
                *v = values.next().unwrap();
            }
        }
        Ok(net)
    }
}

/// Builds a network with Kaiming fan-in initialization (zero biases),
/// deterministic in the seed.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeding::derive_seed(seed, &[0x6e65]));
    let mut in_c = config.input_channels;
    let mut blocks = Vec::with_capacity(config.conv_blocks.len());
    for spec in &config.conv_blocks {
        if spec.residual {
            let conv1 = Conv2d::init(in_c, spec.out_channels, spec.kernel_size, spec.stride, &mut rng);
            let conv2 = Conv2d::init(spec.out_channels, spec.out_channels, spec.kernel_size, 1, &mut rng);
            let proj = if in_c != spec.out_channels || spec.stride != 1 {
                Some(Conv2d::init(in_c, spec.out_channels, 1, spec.stride, &mut rng))
            } else {
                None
            };
            blocks.push(Block::Residual { conv1, conv2, proj });
        } else {
            blocks.push(Block::Plain(Conv2d::init(
                in_c,
                spec.out_channels,
                spec.kernel_size,
                spec.stride,
                &mut rng,
            )));
        }
        in_c = spec.out_channels;
    }
    let to_latent = Linear::init(in_c, config.latent_dim, &mut rng);
    let head_hidden_layer = Linear::init(config.latent_dim, config.head_hidden, &mut rng);
    let head_out = Linear::init(config.head_hidden, config.cluster_count, &mut rng);
    Ok(Network {
        config: config.clone(),
        blocks,
        to_latent,
        head_hidden_layer,
        head_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random_patch(side: usize, channels: usize, seed: u64) -> Patch {
        let mut rng = crate::seeding::rng_for(seed, &[7]);
        Patch {
            side,
            channels,
            values: (0..side * side * channels)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect(),
            center_row: 0,
            center_col: 0,
        }
    }

    fn tiny_config(residual: bool) -> NetworkConfig {
        NetworkConfig {
            input_side: 5,
            input_channels: 2,
            conv_blocks: vec![
                ConvBlockSpec { out_channels: 2, kernel_size: 3, stride: 1, residual },
                ConvBlockSpec { out_channels: 3, kernel_size: 3, stride: 1, residual },
            ],
            latent_dim: 8,
            head_hidden: 6,
            cluster_count: 3,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let config = tiny_config(true);
        let n1 = build_network(&config, 42).unwrap();
        let n2 = build_network(&config, 42).unwrap();
        for (a, b) in n1.param_tensors().into_iter().zip(n2.param_tensors()) {
            assert_eq!(a, b);
        }
        let n3 = build_network(&config, 43).unwrap();
        assert_ne!(n1.param_tensors()[0], n3.param_tensors()[0]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = tiny_config(false);
        config.cluster_count = 1;
        assert!(build_network(&config, 0).is_err());

        let mut config = tiny_config(false);
        config.latent_dim = 2; // below cluster_count
        assert!(build_network(&config, 0).is_err());

        let mut config = tiny_config(false);
        config.conv_blocks[0].kernel_size = 4;
        assert!(build_network(&config, 0).is_err());

        // strides collapse the extent to 1, then a 3-kernel cannot fit
        let mut config = tiny_config(false);
        config.input_side = 3;
        config.conv_blocks = vec![
            ConvBlockSpec { out_channels: 2, kernel_size: 3, stride: 2, residual: false },
            ConvBlockSpec { out_channels: 2, kernel_size: 3, stride: 2, residual: false },
            ConvBlockSpec { out_channels: 2, kernel_size: 3, stride: 1, residual: false },
        ];
        assert!(build_network(&config, 0).is_err());
    }

    #[test]
    fn forward_rows_are_probability_vectors() {
        let config = NetworkConfig::default_for(13, 8, 5);
        let net = build_network(&config, 1).unwrap();
        let batch: Vec<Patch> = (0..3).map(|i| random_patch(13, 8, i)).collect();
        let (latent, labels) = net.forward(&batch).unwrap();
        assert_eq!(latent.rows(), 3);
        assert_eq!(latent.cols(), 256);
        assert_eq!(labels.rows(), 3);
        assert_eq!(labels.cols(), 5);
        assert!(labels.max_row_sum_error() < 1e-5);
        for v in labels.data() {
            assert!(*v >= 0.0);
        }
    }

    #[test]
    fn forward_accepts_other_patch_sides() {
        let config = NetworkConfig::default_for(13, 4, 3);
        let net = build_network(&config, 2).unwrap();
        for side in [5usize, 9, 13, 17] {
            let batch = vec![random_patch(side, 4, side as u64)];
            let (latent, labels) = net.forward(&batch).unwrap();
            assert_eq!(latent.cols(), 256);
            assert_eq!(labels.cols(), 3);
        }
    }

    #[test]
    fn identical_patches_map_to_identical_rows() {
        let net = build_network(&tiny_config(true), 3).unwrap();
        let p = random_patch(5, 2, 10);
        let (_, labels) = net.forward(&[p.clone(), p]).unwrap();
        assert_eq!(labels.row(0), labels.row(1));
    }

    #[test]
    fn zero_output_layer_gives_uniform_labels() {
        let mut net = build_network(&tiny_config(false), 4).unwrap();
        {
            let mut tensors = net.param_tensors_mut();
            let n = tensors.len();
            tensors[n - 2].iter_mut().for_each(|v| *v = 0.0);
            tensors[n - 1].iter_mut().for_each(|v| *v = 0.0);
        }
        let (_, labels) = net.forward(&[random_patch(5, 2, 11)]).unwrap();
        for &v in labels.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_logit_shift_leaves_labels_unchanged() {
        let mut net = build_network(&tiny_config(true), 5).unwrap();
        let batch = vec![random_patch(5, 2, 12), random_patch(5, 2, 13)];
        let (_, before) = net.forward(&batch).unwrap();
        {
            let mut tensors = net.param_tensors_mut();
            let n = tensors.len();
            tensors[n - 1].iter_mut().for_each(|v| *v += 3.7);
        }
        let (_, after) = net.forward(&batch).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_permutation_permutes_rows() {
        let net = build_network(&tiny_config(false), 6).unwrap();
        let batch: Vec<Patch> = (0..4).map(|i| random_patch(5, 2, 20 + i)).collect();
        let (_, labels) = net.forward(&batch).unwrap();
        let permuted: Vec<Patch> = [2usize, 0, 3, 1].iter().map(|&i| batch[i].clone()).collect();
        let (_, plabels) = net.forward(&permuted).unwrap();
        for (new_row, &old_idx) in [2usize, 0, 3, 1].iter().enumerate() {
            assert_eq!(plabels.row(new_row), labels.row(old_idx));
        }
    }

    /// Central finite differences over every parameter of a small network.
    fn gradient_check(config: &NetworkConfig, seed: u64, m: usize) {
        let net = build_network(config, seed).unwrap();
        let batch_a: Vec<Patch> = (0..m)
            .map(|i| random_patch(config.input_side, config.input_channels, 100 + i as u64))
            .collect();
        let batch_b: Vec<Patch> = (0..m)
            .map(|i| random_patch(config.input_side, config.input_channels, 200 + i as u64))
            .collect();
        let loss_config = LossConfig { tau: 0.5, lambda: 0.05, alpha: 0.5 };
        let (_, grads) = net
            .forward_with_gradients(&batch_a, &batch_b, &loss_config, LossMode::Combined)
            .unwrap();

        let eps = 1e-4;
        let n_tensors = net.param_tensors().len();
        for t in 0..n_tensors {
            let len = net.param_tensors()[t].len();
            for idx in 0..len {
                let mut plus = net.clone();
                plus.param_tensors_mut()[t][idx] += eps;
                let mut minus = net.clone();
                minus.param_tensors_mut()[t][idx] -= eps;
                let (pa, _) = plus.forward(&batch_a).map(|(l, y)| (y, l)).unwrap();
                let (pb, _) = plus.forward(&batch_b).map(|(l, y)| (y, l)).unwrap();
                let fp = crate::losses::total_loss(&pa, &pb, &loss_config).unwrap();
                let (ma, _) = minus.forward(&batch_a).map(|(l, y)| (y, l)).unwrap();
                let (mb, _) = minus.forward(&batch_b).map(|(l, y)| (y, l)).unwrap();
                let fm = crate::losses::total_loss(&ma, &mb, &loss_config).unwrap();
                let numeric = (fp - fm) / (2.0 * eps);
                let analytic = grads.tensors()[t][idx];
                let denom = analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-3,
                    "tensor {t} index {idx}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_plain() {
        gradient_check(&tiny_config(false), 7, 4);
    }

    #[test]
    fn gradients_match_finite_differences_residual() {
        gradient_check(&tiny_config(true), 8, 4);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_f32_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ssckpt");
        let net = build_network(&tiny_config(true), 9).unwrap();
        net.save(&path).unwrap();
        let loaded = Network::load(&path).unwrap();
        assert_eq!(loaded.config, net.config);
        for (orig, back) in net.param_tensors().into_iter().zip(loaded.param_tensors()) {
            for (&o, &b) in orig.iter().zip(back.iter()) {
                assert_eq!(o as f32, b as f32);
                assert_eq!(b, (o as f32) as f64);
            }
        }
        // a second save of the loaded net is byte-identical
        let path2 = dir.path().join("net2.ssckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ssckpt");
        let net = build_network(&tiny_config(false), 10).unwrap();
        net.save(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.ssckpt");
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        std::fs::write(&bad, &corrupted).unwrap();
        assert!(matches!(Network::load(&bad), Err(Error::BadMagic { .. })));

        let short = dir.path().join("short.ssckpt");
        std::fs::write(&short, &bytes[..bytes.len() - 5]).unwrap();
        assert!(Network::load(&short).is_err());
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let net = build_network(&tiny_config(false), 11).unwrap();
        assert!(net.forward(&[]).is_err());
        assert!(net.forward(&[random_patch(5, 3, 1)]).is_err());
        assert!(net
            .forward(&[random_patch(5, 2, 1), random_patch(7, 2, 2)])
            .is_err());
    }
}
