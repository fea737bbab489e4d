//! Squeeze-excitation channel gate and mean/max-pool spatial gate.

use super::conv::{conv_same, conv_same_backward, ConvSpec};
use super::{sigmoid, Tensor};
use crate::{Error, Result};

/// Values saved by [`channel_attention`] for its backward pass.
#[derive(Clone, Debug)]
pub struct ChannelAttentionCache {
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    gate: Vec<f64>,
}

impl ChannelAttentionCache {
    /// Per-channel gate `g[c, n]`, laid out `[C, N]`.
    pub fn gate(&self) -> &[f64] {
        &self.gate
    }

    pub(crate) fn hidden_signs(&self) -> impl Iterator<Item = bool> + '_ {
        self.hidden.iter().map(|&h| h > 0.0)
    }
}

fn channel_dims(x: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::shape("channel_attention", &[0, 0], shape));
    }
    let c = shape[0];
    let n = shape[shape.len() - 1];
    let s: usize = shape[1..shape.len() - 1].iter().product();
    let [hid, c1] = match *w1.shape() {
        [a, b] => [a, b],
        _ => return Err(Error::shape("channel_attention w1", &[0, c], w1.shape())),
    };
    if c1 != c || w2.shape() != [c, hid] {
        return Err(Error::shape("channel_attention w2", &[c, hid], w2.shape()));
    }
    if hid == 0 || c % hid != 0 {
        return Err(Error::Config(format!(
            "attention reduction must divide {c} channels (hidden width {hid})"
        )));
    }
    Ok((c, s, n, hid))
}

/// `g = sigmoid(W2 · relu(W1 · gap(x)))`, `y[c, …] = g[c] · x[c, …]`.
///
/// `x` is `[C, …, N]` (any number of non-channel axes, batch last);
/// `w1` is `[C/r, C]`, `w2` is `[C, C/r]`.
pub fn channel_attention(
    x: &Tensor,
    w1: &Tensor,
    w2: &Tensor,
) -> Result<(Tensor, ChannelAttentionCache)> {
    let (c, s, n, hid) = channel_dims(x, w1, w2)?;
    let xd = x.data();
    let mut pooled = vec![0.0; c * n];
    for ch in 0..c {
        let p = &mut pooled[ch * n..(ch + 1) * n];
        for v in 0..s {
            let row = &xd[(ch * s + v) * n..(ch * s + v + 1) * n];
            for (a, b) in p.iter_mut().zip(row) {
                *a += b;
            }
        }
        for a in p.iter_mut() {
            *a /= s as f64;
        }
    }
    let hidden = matmul(w1.data(), &pooled, hid, c, n);
    let act: Vec<f64> = hidden.iter().map(|&h| h.max(0.0)).collect();
    let z = matmul(w2.data(), &act, c, hid, n);
    let gate: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();

    let mut y = vec![0.0; xd.len()];
    for ch in 0..c {
        let g = &gate[ch * n..(ch + 1) * n];
        for v in 0..s {
            let base = (ch * s + v) * n;
            for m in 0..n {
                y[base + m] = g[m] * xd[base + m];
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        ChannelAttentionCache {
            pooled,
            hidden,
            gate,
        },
    ))
}

/// Returns `(dx, dw1, dw2)`.
pub fn channel_attention_backward(
    x: &Tensor,
    w1: &Tensor,
    w2: &Tensor,
    cache: &ChannelAttentionCache,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, s, n, hid) = channel_dims(x, w1, w2)?;
    if dy.shape() != x.shape() {
        return Err(Error::shape("channel_attention_backward", x.shape(), dy.shape()));
    }
    let (xd, gd) = (x.data(), dy.data());
    let mut dz = vec![0.0; c * n];
    for ch in 0..c {
        for v in 0..s {
            let base = (ch * s + v) * n;
            for m in 0..n {
                dz[ch * n + m] += gd[base + m] * xd[base + m];
            }
        }
    }
    for (d, &g) in dz.iter_mut().zip(&cache.gate) {
        *d *= g * (1.0 - g);
    }
    let act: Vec<f64> = cache.hidden.iter().map(|&h| h.max(0.0)).collect();
    // dW2 = dz · actᵀ, [c, hid]
    let dw2 = matmul_bt(&dz, &act, c, n, hid);
    let mut dh = matmul_at(w2.data(), &dz, c, hid, n);
    for (d, &h) in dh.iter_mut().zip(&cache.hidden) {
        if h <= 0.0 {
            *d = 0.0;
        }
    }
    let dw1 = matmul_bt(&dh, &cache.pooled, hid, n, c);
    let dpooled = matmul_at(w1.data(), &dh, hid, c, n);

    let mut dx = vec![0.0; xd.len()];
    let inv = 1.0 / s as f64;
    for ch in 0..c {
        for v in 0..s {
            let base = (ch * s + v) * n;
            for m in 0..n {
                dx[base + m] = gd[base + m] * cache.gate[ch * n + m] + dpooled[ch * n + m] * inv;
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![hid, c], dw1),
        Tensor::from_parts(vec![c, hid], dw2),
    ))
}

/// Values saved by [`spatial_attention`] for its backward pass.
#[derive(Clone, Debug)]
pub struct SpatialAttentionCache {
    stacked: Tensor,
    argmax: Vec<usize>,
    map: Vec<f64>,
}

impl SpatialAttentionCache {
    /// Spatial gate `m[i, j, n]`, laid out `[H, W, N]`.
    pub fn map(&self) -> &[f64] {
        &self.map
    }

    pub(crate) fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

fn gate_spec() -> ConvSpec {
    ConvSpec::new_3d(2, 1, [1, 3, 3]).expect("static gate geometry")
}

/// Shape of the spatial gate convolution weight.
pub const SPATIAL_GATE_SHAPE: [usize; 5] = [1, 2, 1, 3, 3];

/// Spatial gate over a `[C, B, H, W, N]` feature volume.
///
/// Channel-mean and channel-max maps are stacked as two channels, passed
/// through a 3×3 same-padded convolution on every spectral slice, averaged
/// over the `B` slices and squashed with a sigmoid into one `H×W` map `m`;
/// `y[c, b, i, j] = m[i, j] · x[c, b, i, j]`. `wg` is `[1, 2, 1, 3, 3]`,
/// `bg` is `[1]`. Max ties route to the lowest channel index.
pub fn spatial_attention(
    x: &Tensor,
    wg: &Tensor,
    bg: &Tensor,
) -> Result<(Tensor, SpatialAttentionCache)> {
    let [c, b, h, w, n] = match *x.shape() {
        [c, b, h, w, n] => [c, b, h, w, n],
        _ => return Err(Error::shape("spatial_attention", &[0, 0, 0, 0, 0], x.shape())),
    };
    if c == 0 {
        return Err(Error::shape("spatial_attention", &[1, b, h, w, n], x.shape()));
    }
    let xd = x.data();
    let plane = b * h * w * n;
    let mut stacked = vec![0.0; 2 * plane];
    let mut argmax = vec![0usize; plane];
    let (mean, max) = stacked.split_at_mut(plane);
    max.copy_from_slice(&xd[..plane]);
    for ch in 0..c {
        let row = &xd[ch * plane..(ch + 1) * plane];
        for e in 0..plane {
            mean[e] += row[e];
            if ch > 0 && row[e] > max[e] {
                max[e] = row[e];
                argmax[e] = ch;
            }
        }
    }
    for v in mean.iter_mut() {
        *v /= c as f64;
    }
    let stacked = Tensor::from_parts(vec![2, b, h, w, n], stacked);
    let a = conv_same(&stacked, &gate_spec(), wg, bg)?;
    let ad = a.data();
    let hwn = h * w * n;
    let mut map = vec![0.0; hwn];
    for slice in 0..b {
        for (m, v) in map.iter_mut().zip(&ad[slice * hwn..(slice + 1) * hwn]) {
            *m += v;
        }
    }
    for m in &mut map {
        *m = sigmoid(*m / b as f64);
    }
    let mut y = vec![0.0; xd.len()];
    for ch in 0..c {
        for slice in 0..b {
            let base = (ch * b + slice) * hwn;
            for e in 0..hwn {
                y[base + e] = map[e] * xd[base + e];
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        SpatialAttentionCache {
            stacked,
            argmax,
            map,
        },
    ))
}

/// Returns `(dx, dwg, dbg)`.
pub fn spatial_attention_backward(
    x: &Tensor,
    wg: &Tensor,
    cache: &SpatialAttentionCache,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [c, b, h, w, n] = match *x.shape() {
        [c, b, h, w, n] => [c, b, h, w, n],
        _ => return Err(Error::shape("spatial_attention_backward", &[0; 5], x.shape())),
    };
    if dy.shape() != x.shape() {
        return Err(Error::shape("spatial_attention_backward", x.shape(), dy.shape()));
    }
    let (xd, gd) = (x.data(), dy.data());
    let hwn = h * w * n;
    let plane = b * hwn;
    let mut dpre = vec![0.0; hwn];
    for ch in 0..c {
        for slice in 0..b {
            let base = (ch * b + slice) * hwn;
            for e in 0..hwn {
                dpre[e] += gd[base + e] * xd[base + e];
            }
        }
    }
    for (d, &m) in dpre.iter_mut().zip(&cache.map) {
        *d *= m * (1.0 - m) / b as f64;
    }
    let mut da = vec![0.0; plane];
    for slice in 0..b {
        da[slice * hwn..(slice + 1) * hwn].copy_from_slice(&dpre);
    }
    let da = Tensor::from_parts(vec![1, b, h, w, n], da);
    let g = conv_same_backward(&cache.stacked, &gate_spec(), wg, &da, true)?;
    let dstack = g.dx.expect("requested");
    let (dmean, dmax) = dstack.data().split_at(plane);

    let mut dx = vec![0.0; xd.len()];
    let inv = 1.0 / c as f64;
    for ch in 0..c {
        for slice in 0..b {
            let base = (ch * b + slice) * hwn;
            for e in 0..hwn {
                dx[base + e] = gd[base + e] * cache.map[e] + dmean[slice * hwn + e] * inv;
            }
        }
    }
    for (e, &ch) in cache.argmax.iter().enumerate() {
        dx[ch * plane + e] += dmax[e];
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), dx), g.dw, g.db))
}

/// `a` is `[m, k]`, `b` is `[k, n]` → `[m, n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` with `a` `[k, m]` and `b` `[k, n]` → `[m, n]`.
pub(crate) fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` with `a` `[m, k]` and `b` `[n, k]` → `[m, n]`.
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = a[i * k..(i + 1) * k]
                .iter()
                .zip(&b[j * k..(j + 1) * k])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}
