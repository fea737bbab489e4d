//! Spectral/spatial attention encoder.
//!
//! The spectral branch runs four 1-D convolutions over the center-pixel
//! spectrum with a skip from the first to the third layer; the spatial branch
//! runs four 3-D convolutions over the whole patch with a convolved skip.
//! Each branch is gated by its own attention block (channel attention for
//! spectral features, spatial attention for spatial ones), globally average
//! pooled, and the two pooled vectors are concatenated.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, ManifestEntry};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    channel_attention, channel_attention_backward, conv1d, conv1d_backward, conv3d,
    conv3d_backward, fold_bits, fold_index, relu, relu_backward, residual_fuse, spatial_attention,
    spatial_attention_backward, ChannelAttentionCache, ConvSpec, ParamId, ParamStore,
    SpatialAttentionCache, Tensor, BRANCH_SEED, SPATIAL_GATE_SHAPE,
};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub spectral_width: usize,
    pub spatial_width: usize,
    /// Output channels `C_f` of each branch; the fused feature has `2·C_f`.
    pub feature_channels: usize,
    pub spectral_kernel: usize,
    pub spatial_kernel: [usize; 3],
    pub reduction: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            spectral_width: 16,
            spatial_width: 8,
            feature_channels: 32,
            spectral_kernel: 3,
            spatial_kernel: [3, 3, 3],
            reduction: 4,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spectral_width == 0 || self.spatial_width == 0 || self.feature_channels == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.reduction == 0 || self.feature_channels % self.reduction != 0 {
            return Err(Error::Config(format!(
                "reduction {} must divide feature_channels {}",
                self.reduction, self.feature_channels
            )));
        }
        ConvSpec::new_1d(1, 1, self.spectral_kernel)?;
        ConvSpec::new_3d(1, 1, self.spatial_kernel)?;
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        2 * self.feature_channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Aligned,
    Intrinsic,
}

impl Branch {
    fn tag(self) -> u64 {
        match self {
            Branch::Aligned => rng::tags::ALIGNED_INIT,
            Branch::Intrinsic => rng::tags::INTRINSIC_INIT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    spec: ConvSpec,
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub arch: ArchConfig,
    pub branch: Branch,
    pub seed: u64,
    pub store: ParamStore,
    spe: [ConvLayer; 4],
    spa: [ConvLayer; 4],
    spa_res: ConvLayer,
    ca_w1: ParamId,
    ca_w2: ParamId,
    sa_w: ParamId,
    sa_b: ParamId,
}

fn kaiming(g: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| g.random_range(-bound..bound)).collect())
        .expect("finite init")
}

fn push_conv(store: &mut ParamStore, g: &mut impl Rng, name: &str, spec: ConvSpec) -> ConvLayer {
    let w = store.push(format!("{name}.w"), kaiming(g, &spec.weight_shape(), spec.fan_in()));
    let b = store.push(format!("{name}.b"), Tensor::zeros(&[spec.out_channels]));
    ConvLayer { spec, w, b }
}

/// Kaiming-uniform weights (`U(±√(6/fan_in))`) and zero biases, drawn from a
/// stream derived from `seed` and the branch.
pub fn init_encoder(seed: u64, arch: &ArchConfig, branch: Branch) -> Result<EncoderParams> {
    arch.validate()?;
    let mut g = rng::stream(seed, branch.tag());
    let mut store = ParamStore::new();
    let (ws, wp, cf, k) = (
        arch.spectral_width,
        arch.spatial_width,
        arch.feature_channels,
        arch.spectral_kernel,
    );
    let kp = arch.spatial_kernel;
    let mut spe_layers = Vec::new();
    for (n, (i, o)) in [(1, ws), (ws, ws), (ws, ws), (ws, cf)].into_iter().enumerate() {
        let spec = ConvSpec::new_1d(i, o, k)?;
        spe_layers.push(push_conv(&mut store, &mut g, &format!("spe.conv{}", n + 1), spec));
    }
    let mut spa_layers = Vec::new();
    for (n, (i, o)) in [(1, wp), (wp, wp), (wp, wp), (wp, cf)].into_iter().enumerate() {
        let spec = ConvSpec::new_3d(i, o, kp)?;
        spa_layers.push(push_conv(&mut store, &mut g, &format!("spa.conv{}", n + 1), spec));
    }
    let spa_res = push_conv(&mut store, &mut g, "spa.res", ConvSpec::new_3d(wp, wp, kp)?);
    let hid = cf / arch.reduction;
    let ca_w1 = store.push("att.channel.w1", kaiming(&mut g, &[hid, cf], cf));
    let ca_w2 = store.push("att.channel.w2", kaiming(&mut g, &[cf, hid], hid));
    let sa_w = store.push("att.spatial.w", kaiming(&mut g, &SPATIAL_GATE_SHAPE, 18));
    let sa_b = store.push("att.spatial.b", Tensor::zeros(&[1]));
    Ok(EncoderParams {
        arch: arch.clone(),
        branch,
        seed,
        store,
        spe: spe_layers.try_into().expect("four layers"),
        spa: spa_layers.try_into().expect("four layers"),
        spa_res,
        ca_w1,
        ca_w2,
        sa_w,
        sa_b,
    })
}

impl EncoderParams {
    fn v(&self, id: ParamId) -> &Tensor {
        self.store.value(id)
    }

    /// Copy of these parameters relabelled as `branch`, with fresh optimizer
    /// state.
    pub fn snapshot(&self, branch: Branch) -> EncoderParams {
        let mut out = self.clone();
        out.branch = branch;
        out.store = ParamStore::new();
        for id in self.store.ids() {
            out.store.push(self.store.name(id), self.store.value(id).clone());
        }
        out
    }
}

/// Pooled spectral and spatial features and their concatenation, each
/// batch-last: `spe`, `spa` are `[C_f, N]`, `fused` is `[2·C_f, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub spe: Tensor,
    pub spa: Tensor,
    pub fused: Tensor,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.fused.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fused feature vector of sample `i`.
    pub fn fused_row(&self, i: usize) -> Vec<f64> {
        column(&self.fused, i)
    }

    fn concat(self, other: FeatureSet) -> FeatureSet {
        FeatureSet {
            spe: concat_batch(&self.spe, &other.spe),
            spa: concat_batch(&self.spa, &other.spa),
            fused: concat_batch(&self.fused, &other.fused),
        }
    }
}

fn column(t: &Tensor, i: usize) -> Vec<f64> {
    let n = t.shape()[1];
    (0..t.shape()[0]).map(|k| t.data()[k * n + i]).collect()
}

fn concat_batch(a: &Tensor, b: &Tensor) -> Tensor {
    let (d, na, nb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut data = Vec::with_capacity(d * (na + nb));
    for k in 0..d {
        data.extend_from_slice(&a.data()[k * na..(k + 1) * na]);
        data.extend_from_slice(&b.data()[k * nb..(k + 1) * nb]);
    }
    Tensor::from_parts(vec![d, na + nb], data)
}

/// Mean over every axis except the first (channels) and last (batch):
/// `[C, …, N]` → `[C, N]`.
pub fn global_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (c, n) = (s[0], s[s.len() - 1]);
    let inner = x.len() / (c * n);
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        let o = &mut out[ch * n..(ch + 1) * n];
        for v in 0..inner {
            let base = (ch * inner + v) * n;
            for (m, acc) in o.iter_mut().enumerate() {
                *acc += x.data()[base + m];
            }
        }
        for acc in o.iter_mut() {
            *acc /= inner as f64;
        }
    }
    Tensor::from_parts(vec![c, n], out)
}

/// Backward of [`global_pool`] for an input of the given shape.
pub fn global_pool_backward(shape: &[usize], dy: &Tensor) -> Tensor {
    let (c, n) = (shape[0], shape[shape.len() - 1]);
    let total: usize = shape.iter().product();
    let inner = total / (c * n);
    let mut out = vec![0.0; total];
    for ch in 0..c {
        let g = &dy.data()[ch * n..(ch + 1) * n];
        for v in 0..inner {
            let base = (ch * inner + v) * n;
            for m in 0..n {
                out[base + m] = g[m] / inner as f64;
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_parts(vec![a.shape()[0] + b.shape()[0], a.shape()[1]], data)
}

/// Center-pixel spectra `[1, B, N]` of a `[1, B, p, p, N]` patch tensor.
fn center_spectrum(x: &Tensor) -> Result<Tensor> {
    let [_, b, p, q, n] = check_input(x)?;
    let c = (p / 2) * q + q / 2;
    let mut out = Vec::with_capacity(b * n);
    for band in 0..b {
        let base = (band * p * q + c) * n;
        out.extend_from_slice(&x.data()[base..base + n]);
    }
    Ok(Tensor::from_parts(vec![1, b, n], out))
}

fn check_input(x: &Tensor) -> Result<[usize; 5]> {
    match *x.shape() {
        [1, b, p, q, n] if p == q && p % 2 == 1 && b > 0 => Ok([1, b, p, q, n]),
        _ => Err(Error::shape("encoder input", &[1, 0, 0, 0, 0], x.shape())),
    }
}

/// Activations saved by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct EncoderCache {
    spec_in: Tensor,
    s: [Tensor; 3],
    s_fuse: Tensor,
    s_out: Tensor,
    ca: ChannelAttentionCache,
    s_att_shape: Vec<usize>,
    v_in: Tensor,
    d: [Tensor; 3],
    d_fuse: Tensor,
    d_out: Tensor,
    sa: SpatialAttentionCache,
}

impl EncoderCache {
    /// Fingerprint of every piecewise-linear decision (ReLU signs, max-pool
    /// winners) taken by the forward pass.
    pub fn branch_fingerprint(&self) -> u64 {
        let pos = |t: &Tensor| t.data().iter().map(|&v| v > 0.0).collect::<Vec<_>>();
        let mut h = BRANCH_SEED;
        for t in self.s.iter().chain([&self.s_fuse]).chain(self.d.iter()).chain([&self.d_fuse]) {
            h = fold_bits(h, pos(t));
        }
        h = fold_bits(h, self.ca.hidden_signs());
        fold_index(h, self.sa.argmax().iter().copied())
    }
}

struct BranchActs {
    hidden: [Tensor; 3],
    fuse: Tensor,
    out: Tensor,
}

fn spectral(params: &EncoderParams, spec_in: &Tensor) -> Result<BranchActs> {
    let [l0, l1, l2, l3] = &params.spe;
    let conv = |layer: &ConvLayer, x: &Tensor| {
        conv1d(x, &layer.spec, params.v(layer.w), params.v(layer.b))
    };
    let s1 = relu(&conv(l0, spec_in)?);
    let s2 = relu(&conv(l1, &s1)?);
    let s3 = relu(&conv(l2, &s2)?);
    let fuse = relu(&residual_fuse(&s1, &s3)?);
    let out = conv(l3, &fuse)?;
    Ok(BranchActs {
        hidden: [s1, s2, s3],
        fuse,
        out,
    })
}

fn spatial(params: &EncoderParams, x: &Tensor) -> Result<BranchActs> {
    let [m0, m1, m2, m3] = &params.spa;
    let conv = |layer: &ConvLayer, x: &Tensor| {
        conv3d(x, &layer.spec, params.v(layer.w), params.v(layer.b))
    };
    let d1 = relu(&conv(m0, x)?);
    let r = conv(&params.spa_res, &d1)?;
    let d2 = relu(&conv(m1, &d1)?);
    let d3 = relu(&conv(m2, &d2)?);
    let fuse = relu(&residual_fuse(&r, &d3)?);
    let out = conv(m3, &fuse)?;
    Ok(BranchActs {
        hidden: [d1, d2, d3],
        fuse,
        out,
    })
}

/// Spectral feature map `[C_f, bands, N]` from the center spectra of a
/// `[1, bands, p, p, N]` patch tensor.
pub fn extract_spectral(params: &EncoderParams, x: &Tensor) -> Result<Tensor> {
    Ok(spectral(params, &center_spectrum(x)?)?.out)
}

/// Spatial feature volume `[C_f, bands, p, p, N]`.
pub fn extract_spatial(params: &EncoderParams, x: &Tensor) -> Result<Tensor> {
    check_input(x)?;
    Ok(spatial(params, x)?.out)
}

/// Channel attention on the spectral map and spatial attention on the
/// spatial volume, each applied separately.
pub fn apply_attention(params: &EncoderParams, spe: &Tensor, spa: &Tensor) -> Result<(Tensor, Tensor)> {
    let (a, _) = channel_attention(spe, params.v(params.ca_w1), params.v(params.ca_w2))?;
    let (b, _) = spatial_attention(spa, params.v(params.sa_w), params.v(params.sa_b))?;
    Ok((a, b))
}

/// Forward pass over a batch-last `[1, bands, p, p, N]` patch tensor.
pub fn forward(params: &EncoderParams, x: &Tensor) -> Result<(FeatureSet, EncoderCache)> {
    let spec_in = center_spectrum(x)?;
    let s = spectral(params, &spec_in)?;
    let (s_att, ca) = channel_attention(&s.out, params.v(params.ca_w1), params.v(params.ca_w2))?;
    let d = spatial(params, x)?;
    let (d_att, sa) = spatial_attention(&d.out, params.v(params.sa_w), params.v(params.sa_b))?;
    let spe = global_pool(&s_att);
    let spa = global_pool(&d_att);
    let fused = concat_channels(&spe, &spa);
    Ok((
        FeatureSet { spe, spa, fused },
        EncoderCache {
            spec_in,
            s: s.hidden,
            s_fuse: s.fuse,
            s_out: s.out,
            ca,
            s_att_shape: s_att.shape().to_vec(),
            v_in: x.clone(),
            d: d.hidden,
            d_fuse: d.fuse,
            d_out: d.out,
            sa,
        },
    ))
}

/// Parameter gradients, in store order, given gradients of the pooled
/// spectral and spatial features (`[C_f, N]` each).
pub fn backward(
    params: &EncoderParams,
    cache: &EncoderCache,
    d_spe: &Tensor,
    d_spa: &Tensor,
) -> Result<Vec<Tensor>> {
    let mut grads = params.store.zero_grads_like();
    let mut put = |id: ParamId, t: Tensor| grads[id.0] = t;

    let g = global_pool_backward(&cache.s_att_shape, d_spe);
    let (g, dw1, dw2) = channel_attention_backward(
        &cache.s_out,
        params.v(params.ca_w1),
        params.v(params.ca_w2),
        &cache.ca,
        &g,
    )?;
    put(params.ca_w1, dw1);
    put(params.ca_w2, dw2);
    let [l0, l1, l2, l3] = &params.spe;
    let [s1, s2, s3] = &cache.s;
    let mut step = |layer: &ConvLayer, x: &Tensor, dy: &Tensor, need_dx: bool| -> Result<Option<Tensor>> {
        let cg = conv1d_backward(x, &layer.spec, params.v(layer.w), dy, need_dx)?;
        put(layer.w, cg.dw);
        put(layer.b, cg.db);
        Ok(cg.dx)
    };
    let g = step(l3, &cache.s_fuse, &g, true)?.unwrap();
    let g_fuse = relu_backward(&cache.s_fuse, &g);
    let g = step(l2, s2, &relu_backward(s3, &g_fuse), true)?.unwrap();
    let mut g1 = step(l1, s1, &relu_backward(s2, &g), true)?.unwrap();
    g1.add_assign(&g_fuse);
    step(l0, &cache.spec_in, &relu_backward(s1, &g1), false)?;

    let g = global_pool_backward(cache.d_out.shape(), d_spa);
    let (g, dwg, dbg) =
        spatial_attention_backward(&cache.d_out, params.v(params.sa_w), &cache.sa, &g)?;
    put(params.sa_w, dwg);
    put(params.sa_b, dbg);
    let [m0, m1, m2, m3] = &params.spa;
    let [d1, d2, d3] = &cache.d;
    let mut step = |layer: &ConvLayer, x: &Tensor, dy: &Tensor, need_dx: bool| -> Result<Option<Tensor>> {
        let cg = conv3d_backward(x, &layer.spec, params.v(layer.w), dy, need_dx)?;
        put(layer.w, cg.dw);
        put(layer.b, cg.db);
        Ok(cg.dx)
    };
    let g = step(m3, &cache.d_fuse, &g, true)?.unwrap();
    let g_fuse = relu_backward(&cache.d_fuse, &g);
    let mut g1 = step(&params.spa_res, d1, &g_fuse, true)?.unwrap();
    let g = step(m2, d2, &relu_backward(d3, &g_fuse), true)?.unwrap();
    g1.add_assign(&step(m1, d1, &relu_backward(d2, &g), true)?.unwrap());
    step(m0, &cache.v_in, &relu_backward(d1, &g1), false)?;
    Ok(grads)
}

/// Features of every patch in `batch`, computed in chunks of `chunk`.
pub fn encode(params: &EncoderParams, batch: &crate::data::PatchBatch, chunk: usize) -> Result<FeatureSet> {
    if batch.is_empty() {
        return Err(Error::Empty("encode needs at least one patch".into()));
    }
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut out: Option<FeatureSet> = None;
    for part in idx.chunks(chunk.max(1)) {
        let (f, _) = forward(params, &batch.gather(part))?;
        out = Some(match out {
            None => f,
            Some(acc) => acc.concat(f),
        });
    }
    Ok(out.expect("nonempty batch"))
}
