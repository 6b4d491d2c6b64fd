//! The node-update network: a 3×3 convolutional stem, residual blocks of two
//! `conv → instance-norm → ReLU` stages with an identity skip, adaptive
//! average pooling to a fixed size and a two-layer action head.
//!
//! Parameters live in one flat vector so the optimizer, the checkpoint format
//! and finite-difference checks can treat them uniformly. Convolutions carry
//! no bias: every one of them is followed by a normalization with its own
//! shift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionDist, ChannelStack};
use crate::error::{Error, Result};
use crate::world::Action;

/// Variance floor inside instance normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub channels: usize,
    pub blocks: usize,
    pub pool_h: usize,
    pub pool_w: usize,
    pub hidden: usize,
    pub actions: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { in_channels: 4, channels: 8, blocks: 3, pool_h: 5, pool_w: 5, hidden: 64, actions: 4 }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.in_channels, self.channels, self.pool_h, self.pool_w, self.hidden];
        if dims.contains(&0) || self.actions != Action::COUNT {
            return Err(Error::Config(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }

    fn pooled_len(&self) -> usize {
        self.channels * self.pool_h * self.pool_w
    }
}

#[derive(Debug, Clone, Copy)]
struct NormSlots {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvNorm {
    weight: usize,
    cin: usize,
    cout: usize,
    norm: NormSlots,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: ConvNorm,
    blocks: Vec<(ConvNorm, ConvNorm)>,
    dense1_w: usize,
    dense1_b: usize,
    dense2_w: usize,
    dense2_b: usize,
    total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Layout {
        let mut at = 0usize;
        let mut take = |n: usize| {
            let s = at;
            at += n;
            s
        };
        let conv_norm = |cin: usize, cout: usize, take: &mut dyn FnMut(usize) -> usize| ConvNorm {
            weight: take(cout * cin * 9),
            cin,
            cout,
            norm: NormSlots { gamma: take(cout), beta: take(cout) },
        };
        let c = arch.channels;
        let stem = conv_norm(arch.in_channels, c, &mut take);
        let blocks = (0..arch.blocks)
            .map(|_| {
                let a = conv_norm(c, c, &mut take);
                let b = conv_norm(c, c, &mut take);
                (a, b)
            })
            .collect();
        let flat = arch.pooled_len();
        let dense1_w = take(arch.hidden * flat);
        let dense1_b = take(arch.hidden);
        let dense2_w = take(arch.actions * arch.hidden);
        let dense2_b = take(arch.actions);
        Layout { stem, blocks, dense1_w, dense1_b, dense2_w, dense2_b, total: at }
    }
}

/// All trainable tensors of the node-update network, in declaration order:
/// stem conv, stem norm scale/shift, then per block two (conv, scale, shift)
/// triples, then hidden weights/bias and action weights/bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(arch: Architecture) -> Self {
        PolicyParams { arch, values: vec![0.0; arch.param_count()] }
    }

    /// Seeded init: uniform `±1/√fan_in` weights, unit scales, zero shifts
    /// and biases. Values are rounded to `f32` so checkpoints round-trip.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let layout = Layout::new(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PolicyParams::zeros(arch);
        let mut fill = |start: usize, len: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p.values[start..start + len] {
                *v = rng.random_range(-bound..bound) as f32 as f64;
            }
        };
        let convs = std::iter::once(layout.stem).chain(layout.blocks.iter().flat_map(|&(a, b)| [a, b]));
        let mut norms = Vec::new();
        for cn in convs {
            fill(cn.weight, cn.cout * cn.cin * 9, cn.cin * 9, &mut rng);
            norms.push(cn.norm);
        }
        let flat = arch.pooled_len();
        fill(layout.dense1_w, arch.hidden * flat, flat, &mut rng);
        fill(layout.dense2_w, arch.actions * arch.hidden, arch.hidden, &mut rng);
        for n in norms {
            p.values[n.gamma..n.gamma + arch.channels].fill(1.0);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        self.arch.validate()?;
        if self.values.len() != self.arch.param_count() {
            return Err(Error::Dimension(format!(
                "{} parameters for an architecture needing {}",
                self.values.len(),
                self.arch.param_count()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite parameter".into()));
        }
        Ok(())
    }

    /// FNV-1a over the parameter bits; ties a forward cache to its parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.values {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }
}

/// Feature maps `[channel][row][col]`.
#[derive(Debug, Clone, PartialEq)]
struct Fmap {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Fmap {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Fmap { c, h, w, data: vec![0.0; c * h * w] }
    }

    fn plane(&self, ch: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[ch * n..(ch + 1) * n]
    }
}

/// Same-padded 3×3 convolution, weights `[out][in][ky][kx]`.
fn conv3x3(input: &Fmap, weights: &[f64], cout: usize) -> Fmap {
    let (h, w) = (input.h, input.w);
    let mut out = Fmap::zeros(cout, h, w);
    for o in 0..cout {
        let out_plane = &mut out.data[o * h * w..(o + 1) * h * w];
        for i in 0..input.c {
            let in_plane = input.plane(i);
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = weights[((o * input.c + i) * 3 + ky) * 3 + kx];
                    if k == 0.0 {
                        continue;
                    }
                    let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let dst = &mut out_plane[y * w + x0..y * w + x1];
                        let src = &in_plane[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += k * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns the input gradient and accumulates the weight gradient.
fn conv3x3_backward(input: &Fmap, weights: &[f64], dout: &Fmap, dweights: &mut [f64], need_dinput: bool) -> Fmap {
    let (h, w) = (input.h, input.w);
    let mut din = Fmap::zeros(input.c, h, w);
    for o in 0..dout.c {
        let g = dout.plane(o);
        for i in 0..input.c {
            let in_plane = input.plane(i);
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((o * input.c + i) * 3 + ky) * 3 + kx;
                    let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let gs = &g[y * w + x0..y * w + x1];
                        let src = &in_plane[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        acc += gs.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dweights[widx] += acc;
                    if need_dinput {
                        let k = weights[widx];
                        let din_plane = &mut din.data[i * h * w..(i + 1) * h * w];
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let gs = &g[y * w + x0..y * w + x1];
                            let dst = &mut din_plane[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            for (d, s) in dst.iter_mut().zip(gs) {
                                *d += k * s;
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

#[derive(Debug, Clone, PartialEq)]
struct NormCache {
    xhat: Fmap,
    inv_std: Vec<f64>,
}

/// Per-sample, per-channel normalization followed by scale and shift.
fn instance_norm(x: &Fmap, gamma: &[f64], beta: &[f64]) -> (Fmap, NormCache) {
    let n = x.h * x.w;
    let mut xhat = Fmap::zeros(x.c, x.h, x.w);
    let mut y = Fmap::zeros(x.c, x.h, x.w);
    let mut inv_std = vec![0.0; x.c];
    for ch in 0..x.c {
        let plane = x.plane(ch);
        let mean = plane.iter().sum::<f64>() / n as f64;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[ch] = inv;
        for (k, &v) in plane.iter().enumerate() {
            let xh = (v - mean) * inv;
            xhat.data[ch * n + k] = xh;
            y.data[ch * n + k] = gamma[ch] * xh + beta[ch];
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn instance_norm_backward(dy: &Fmap, cache: &NormCache, gamma: &[f64], dgamma: &mut [f64], dbeta: &mut [f64]) -> Fmap {
    let n = dy.h * dy.w;
    let nf = n as f64;
    let mut dx = Fmap::zeros(dy.c, dy.h, dy.w);
    for ch in 0..dy.c {
        let g = dy.plane(ch);
        let xh = cache.xhat.plane(ch);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for k in 0..n {
            dgamma[ch] += g[k] * xh[k];
            dbeta[ch] += g[k];
            let d = g[k] * gamma[ch];
            sum_dxhat += d;
            sum_dxhat_xhat += d * xh[k];
        }
        let inv = cache.inv_std[ch];
        for k in 0..n {
            let d = g[k] * gamma[ch];
            dx.data[ch * n + k] = inv / nf * (nf * d - sum_dxhat - xh[k] * sum_dxhat_xhat);
        }
    }
    dx
}

fn relu_in_place(x: &mut Fmap) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through a ReLU given its output.
fn relu_mask(dout: &Fmap, out: &Fmap) -> Fmap {
    let data = dout.data.iter().zip(&out.data).map(|(&g, &o)| if o > 0.0 { g } else { 0.0 }).collect();
    Fmap { data, ..*dout }
}

/// `[start, end)` of adaptive pooling bin `i` out of `bins` over `n` cells.
fn pool_bin(i: usize, bins: usize, n: usize) -> (usize, usize) {
    let start = (i * n) / bins;
    let end = ((i + 1) * n).div_ceil(bins);
    (start, end)
}

fn adaptive_avg_pool(x: &Fmap, ph: usize, pw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.c * ph * pw];
    for ch in 0..x.c {
        let plane = x.plane(ch);
        for by in 0..ph {
            let (y0, y1) = pool_bin(by, ph, x.h);
            for bx in 0..pw {
                let (x0, x1) = pool_bin(bx, pw, x.w);
                let mut s = 0.0;
                for y in y0..y1 {
                    s += plane[y * x.w + x0..y * x.w + x1].iter().sum::<f64>();
                }
                out[(ch * ph + by) * pw + bx] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

fn adaptive_avg_pool_backward(dout: &[f64], c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Fmap {
    let mut dx = Fmap::zeros(c, h, w);
    for ch in 0..c {
        for by in 0..ph {
            let (y0, y1) = pool_bin(by, ph, h);
            for bx in 0..pw {
                let (x0, x1) = pool_bin(bx, pw, w);
                let g = dout[(ch * ph + by) * pw + bx] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        dx.data[(ch * h + y) * w + x] += g;
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
struct StageCache {
    input: Fmap,
    norm: NormCache,
    out: Fmap,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockCache {
    first: StageCache,
    second: StageCache,
}

/// Activations recorded by [`policy_forward`] for [`policy_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    fingerprint: u64,
    stem: StageCache,
    blocks: Vec<BlockCache>,
    features: Fmap,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

fn stage(input: Fmap, params: &[f64], cn: &ConvNorm) -> (Fmap, StageCache) {
    let conv = conv3x3(&input, &params[cn.weight..cn.weight + cn.cout * cn.cin * 9], cn.cout);
    let (mut out, norm) = instance_norm(
        &conv,
        &params[cn.norm.gamma..cn.norm.gamma + cn.cout],
        &params[cn.norm.beta..cn.norm.beta + cn.cout],
    );
    relu_in_place(&mut out);
    (out.clone(), StageCache { input, norm, out })
}

fn stage_backward(dout: &Fmap, cache: &StageCache, params: &[f64], cn: &ConvNorm, grad: &mut [f64], need_dinput: bool) -> Fmap {
    let d = relu_mask(dout, &cache.out);
    let (gamma_g, rest) = grad[cn.norm.gamma..].split_at_mut(cn.cout);
    let beta_off = cn.norm.beta - cn.norm.gamma - cn.cout;
    let dconv = instance_norm_backward(
        &d,
        &cache.norm,
        &params[cn.norm.gamma..cn.norm.gamma + cn.cout],
        gamma_g,
        &mut rest[beta_off..beta_off + cn.cout],
    );
    conv3x3_backward(
        &cache.input,
        &params[cn.weight..cn.weight + cn.cout * cn.cin * 9],
        &dconv,
        &mut grad[cn.weight..cn.weight + cn.cout * cn.cin * 9],
        need_dinput,
    )
}

fn dense(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, &bias)| bias + w[o * x.len()..(o + 1) * x.len()].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

/// Runs the network on one channel stack, keeping activations for backprop.
pub fn policy_forward(stack: &ChannelStack, params: &PolicyParams) -> Result<(ActionDist, ForwardCache)> {
    let arch = &params.arch;
    if params.values.len() != arch.param_count() {
        return Err(Error::Dimension(format!(
            "{} parameters for an architecture needing {}",
            params.values.len(),
            arch.param_count()
        )));
    }
    if stack.channels() != arch.in_channels {
        return Err(Error::Dimension(format!(
            "{} input channels, network expects {}",
            stack.channels(),
            arch.in_channels
        )));
    }
    if stack.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite network input".into()));
    }
    let layout = Layout::new(arch);
    let p = &params.values;
    let input = Fmap { c: stack.channels(), h: stack.height, w: stack.width, data: stack.data.clone() };

    let (mut x, stem) = stage(input, p, &layout.stem);
    let mut blocks = Vec::with_capacity(layout.blocks.len());
    for (a, b) in &layout.blocks {
        let skip = x.clone();
        let (h1, first) = stage(x, p, a);
        let (h2, second) = stage(h1, p, b);
        x = Fmap { data: h2.data.iter().zip(&skip.data).map(|(u, v)| u + v).collect(), ..h2 };
        blocks.push(BlockCache { first, second });
    }
    let pooled = adaptive_avg_pool(&x, arch.pool_h, arch.pool_w);
    let flat = pooled.len();
    let mut hidden = dense(
        &p[layout.dense1_w..layout.dense1_w + arch.hidden * flat],
        &p[layout.dense1_b..layout.dense1_b + arch.hidden],
        &pooled,
    );
    for v in &mut hidden {
        *v = v.max(0.0);
    }
    let logits = dense(
        &p[layout.dense2_w..layout.dense2_w + arch.actions * arch.hidden],
        &p[layout.dense2_b..layout.dense2_b + arch.actions],
        &hidden,
    );
    let probs = softmax(&logits);
    let dist = ActionDist::from_slice(&probs)?;
    let cache = ForwardCache { fingerprint: params.fingerprint(), stem, blocks, features: x, pooled, hidden, logits };
    Ok((dist, cache))
}

/// Inference only.
pub fn policy_infer(stack: &ChannelStack, params: &PolicyParams) -> Result<ActionDist> {
    policy_forward(stack, params).map(|(d, _)| d)
}

/// Reverse-mode gradient of a scalar loss with respect to every parameter,
/// given the loss gradient with respect to the logits.
pub fn policy_backward(params: &PolicyParams, cache: &ForwardCache, dlogits: &[f64]) -> Result<Vec<f64>> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::StaleCache);
    }
    let arch = &params.arch;
    if dlogits.len() != arch.actions {
        return Err(Error::Dimension(format!("{} logit gradients for {} actions", dlogits.len(), arch.actions)));
    }
    let layout = Layout::new(arch);
    let p = &params.values;
    let mut grad = vec![0.0; p.len()];
    let flat = cache.pooled.len();

    // Action head.
    let mut dhidden = vec![0.0; arch.hidden];
    for (o, &g) in dlogits.iter().enumerate() {
        grad[layout.dense2_b + o] += g;
        for j in 0..arch.hidden {
            grad[layout.dense2_w + o * arch.hidden + j] += g * cache.hidden[j];
            dhidden[j] += g * p[layout.dense2_w + o * arch.hidden + j];
        }
    }
    let mut dpooled = vec![0.0; flat];
    for j in 0..arch.hidden {
        if cache.hidden[j] <= 0.0 {
            continue;
        }
        let g = dhidden[j];
        grad[layout.dense1_b + j] += g;
        let row = layout.dense1_w + j * flat;
        for k in 0..flat {
            grad[row + k] += g * cache.pooled[k];
            dpooled[k] += g * p[row + k];
        }
    }

    let f = &cache.features;
    let mut dx = adaptive_avg_pool_backward(&dpooled, f.c, f.h, f.w, arch.pool_h, arch.pool_w);
    for ((a, b), bc) in layout.blocks.iter().zip(&cache.blocks).rev() {
        let dh1 = stage_backward(&dx, &bc.second, p, b, &mut grad, true);
        let dskip = stage_backward(&dh1, &bc.first, p, a, &mut grad, true);
        for (d, s) in dx.data.iter_mut().zip(&dskip.data) {
            *d += s;
        }
    }
    stage_backward(&dx, &cache.stem, p, &layout.stem, &mut grad, false);
    Ok(grad)
}
