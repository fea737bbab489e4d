use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

/// Stride-1, same-padded convolution layer geometry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[k]` for 1-D, `[k_d, k_h, k_w]` for 3-D.
    pub kernel: Vec<usize>,
    pub padding: Vec<usize>,
}

impl ConvSpec {
    pub fn new_1d(in_channels: usize, out_channels: usize, k: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, vec![k])
    }

    pub fn new_3d(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel.to_vec())
    }

    fn new(in_channels: usize, out_channels: usize, kernel: Vec<usize>) -> Result<Self> {
        let padding = kernel.iter().map(|k| k.saturating_sub(1) / 2).collect();
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel,
            padding,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("convolution channels must be positive".into()));
        }
        if !(self.kernel.len() == 1 || self.kernel.len() == 3) {
            return Err(Error::Config(format!(
                "kernel must have 1 or 3 axes, got {}",
                self.kernel.len()
            )));
        }
        if self.padding.len() != self.kernel.len() {
            return Err(Error::Config("padding and kernel rank differ".into()));
        }
        for (&k, &p) in self.kernel.iter().zip(&self.padding) {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel size {k} is not odd")));
            }
            if p != (k - 1) / 2 {
                return Err(Error::Config(format!(
                    "padding {p} does not give same-size output for kernel {k}"
                )));
            }
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend_from_slice(&self.kernel);
        s
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn kernel3(&self) -> [usize; 3] {
        match self.kernel.as_slice() {
            &[k] => [k, 1, 1],
            &[a, b, c] => [a, b, c],
            _ => unreachable!("validated"),
        }
    }
}

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

/// `x`: `[C_in, L, N]`, `w`: `[C_out, C_in, k]`, `b`: `[C_out]` → `[C_out, L, N]`.
pub fn conv1d(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [c, l, n] = dims1d(x, spec, "conv1d")?;
    let x5 = view5(x, [c, l, 1, 1, n]);
    let y = conv_same(&x5, spec, w, b)?;
    Ok(Tensor::from_parts(vec![spec.out_channels, l, n], y.into_data()))
}

pub fn conv1d_backward(
    x: &Tensor,
    spec: &ConvSpec,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> Result<ConvGrads> {
    let [c, l, n] = dims1d(x, spec, "conv1d_backward")?;
    let x5 = view5(x, [c, l, 1, 1, n]);
    let dy5 = view5(dy, [spec.out_channels, l, 1, 1, n]);
    let mut g = conv_same_backward(&x5, spec, w, &dy5, need_dx)?;
    g.dx = g.dx.map(|t| Tensor::from_parts(vec![c, l, n], t.into_data()));
    Ok(g)
}

/// `x`: `[C_in, D, H, W, N]`, `w`: `[C_out, C_in, k_d, k_h, k_w]` → `[C_out, D, H, W, N]`.
pub fn conv3d(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if spec.kernel.len() != 3 {
        return Err(Error::Config("conv3d needs a 3-axis kernel".into()));
    }
    conv_same(x, spec, w, b)
}

pub fn conv3d_backward(
    x: &Tensor,
    spec: &ConvSpec,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> Result<ConvGrads> {
    if spec.kernel.len() != 3 {
        return Err(Error::Config("conv3d needs a 3-axis kernel".into()));
    }
    conv_same_backward(x, spec, w, dy, need_dx)
}

fn dims1d(x: &Tensor, spec: &ConvSpec, op: &'static str) -> Result<[usize; 3]> {
    if spec.kernel.len() != 1 {
        return Err(Error::Config(format!("{op} needs a 1-axis kernel")));
    }
    match *x.shape() {
        [c, l, n] => Ok([c, l, n]),
        _ => Err(Error::shape(op, &[spec.in_channels, 0, 0], x.shape())),
    }
}

fn view5(x: &Tensor, shape: [usize; 5]) -> Tensor {
    Tensor::from_parts(shape.to_vec(), x.data().to_vec())
}

#[derive(Clone, Copy)]
struct Geometry {
    d: usize,
    h: usize,
    w: usize,
    n: usize,
    k: [usize; 3],
}

impl Geometry {
    fn vol(&self) -> usize {
        self.d * self.h * self.w
    }

    fn taps(&self) -> usize {
        self.k[0] * self.k[1] * self.k[2]
    }
}

fn check_conv(x: &Tensor, spec: &ConvSpec, w: &Tensor, op: &'static str) -> Result<Geometry> {
    spec.validate()?;
    let [c, d, h, wd, n] = match *x.shape() {
        [c, d, h, wd, n] => [c, d, h, wd, n],
        _ => return Err(Error::shape(op, &[spec.in_channels, 0, 0, 0, 0], x.shape())),
    };
    if c != spec.in_channels {
        return Err(Error::shape(op, &[spec.in_channels, d, h, wd, n], x.shape()));
    }
    let k = spec.kernel3();
    let mut expected_w = vec![spec.out_channels, spec.in_channels];
    expected_w.extend_from_slice(&spec.kernel);
    if w.shape() != expected_w.as_slice() {
        return Err(Error::shape(op, &expected_w, w.shape()));
    }
    Ok(Geometry { d, h, w: wd, n, k })
}

/// Same-padded stride-1 convolution over the three spatial axes of a
/// batch-last `[C_in, D, H, W, N]` tensor:
/// `y[o,v,n] = b[o] + Σ_{c,t} w[o,c,t] · x[c, v + t - r, n]` with zero padding.
pub fn conv_same(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let g = check_conv(x, spec, w, "conv")?;
    if b.shape() != [spec.out_channels] {
        return Err(Error::shape("conv bias", &[spec.out_channels], b.shape()));
    }
    let wt = tap_major(w.data(), spec.out_channels, spec.in_channels, g.taps(), false);
    let y = forward_raw(x.data(), spec.in_channels, spec.out_channels, g, &wt, Some(b.data()));
    let mut shape = vec![spec.out_channels];
    shape.extend_from_slice(&x.shape()[1..]);
    Ok(Tensor::from_parts(shape, y))
}

pub fn conv_same_backward(
    x: &Tensor,
    spec: &ConvSpec,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> Result<ConvGrads> {
    let g = check_conv(x, spec, w, "conv_backward")?;
    let mut y_shape = vec![spec.out_channels];
    y_shape.extend_from_slice(&x.shape()[1..]);
    if dy.shape() != y_shape.as_slice() {
        return Err(Error::shape("conv_backward", &y_shape, dy.shape()));
    }
    let (cin, cout, taps) = (spec.in_channels, spec.out_channels, g.taps());

    let dx = if need_dx {
        // Transposed convolution == same-padded convolution with the kernel
        // flipped on every axis and the channel roles swapped.
        let wt = tap_major(w.data(), cout, cin, taps, true);
        let data = forward_raw(dy.data(), cout, cin, g, &wt, None);
        Some(Tensor::from_parts(x.shape().to_vec(), data))
    } else {
        None
    };

    let dw = weight_grad(x.data(), dy.data(), cin, cout, g);
    let plane = g.vol() * g.n;
    let db = (0..cout)
        .map(|o| dy.data()[o * plane..(o + 1) * plane].iter().sum())
        .collect();
    Ok(ConvGrads {
        dx,
        dw: Tensor::from_parts(spec.weight_shape(), dw),
        db: Tensor::from_parts(vec![cout], db),
    })
}

/// Rearrange `w[o][c][t]` into `[c][t][o]` so the output-channel block for a
/// given input channel and tap is contiguous. With `transpose`, produce the
/// kernel of the adjoint convolution: `w'[c][o][taps-1-t]` laid out as
/// `[o][t][c]` (roles of `c`/`o` swapped).
fn tap_major(w: &[f64], cout: usize, cin: usize, taps: usize, transpose: bool) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for o in 0..cout {
        for c in 0..cin {
            for t in 0..taps {
                let v = w[(o * cin + c) * taps + t];
                if transpose {
                    out[(o * taps + (taps - 1 - t)) * cin + c] = v;
                } else {
                    out[(c * taps + t) * cout + o] = v;
                }
            }
        }
    }
    out
}

const LANES: usize = 8;

/// Core forward kernel. `wt` is `[cin][taps][cout]`.
fn forward_raw(
    x: &[f64],
    cin: usize,
    cout: usize,
    g: Geometry,
    wt: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let vol = g.vol();
    let taps = g.taps();
    let r = [g.k[0] / 2, g.k[1] / 2, g.k[2] / 2];
    let mut y = vec![0.0; cout * vol * g.n];
    let mut valid: Vec<(usize, usize)> = Vec::with_capacity(taps);

    for z in 0..g.d {
        for i in 0..g.h {
            for j in 0..g.w {
                valid.clear();
                for kz in 0..g.k[0] {
                    let Some(zz) = (z + kz).checked_sub(r[0]).filter(|&v| v < g.d) else {
                        continue;
                    };
                    for ki in 0..g.k[1] {
                        let Some(ii) = (i + ki).checked_sub(r[1]).filter(|&v| v < g.h) else {
                            continue;
                        };
                        for kj in 0..g.k[2] {
                            let Some(jj) = (j + kj).checked_sub(r[2]).filter(|&v| v < g.w) else {
                                continue;
                            };
                            let t = (kz * g.k[1] + ki) * g.k[2] + kj;
                            valid.push(((zz * g.h + ii) * g.w + jj, t));
                        }
                    }
                }
                let v = (z * g.h + i) * g.w + j;
                let mut o0 = 0;
                while o0 < cout {
                    let rem = cout - o0;
                    let ctx = VoxelCtx {
                        x,
                        wt,
                        bias,
                        valid: &valid,
                        cin,
                        cout,
                        vol,
                        taps,
                        n: g.n,
                        v,
                        o0,
                    };
                    o0 += if rem >= 8 {
                        ctx.run::<8>(&mut y)
                    } else if rem >= 4 {
                        ctx.run::<4>(&mut y)
                    } else if rem >= 2 {
                        ctx.run::<2>(&mut y)
                    } else {
                        ctx.run::<1>(&mut y)
                    };
                }
            }
        }
    }
    y
}

struct VoxelCtx<'a> {
    x: &'a [f64],
    wt: &'a [f64],
    bias: Option<&'a [f64]>,
    valid: &'a [(usize, usize)],
    cin: usize,
    cout: usize,
    vol: usize,
    taps: usize,
    n: usize,
    v: usize,
    o0: usize,
}

impl VoxelCtx<'_> {
    /// Computes output channels `o0..o0+OB` at voxel `v` for all samples.
    fn run<const OB: usize>(&self, y: &mut [f64]) -> usize {
        let n = self.n;
        let mut n0 = 0;
        while n0 + LANES <= n {
            self.block::<OB, LANES>(y, n0);
            n0 += LANES;
        }
        while n0 < n {
            self.block::<OB, 1>(y, n0);
            n0 += 1;
        }
        OB
    }

    #[inline(always)]
    fn block<const OB: usize, const L: usize>(&self, y: &mut [f64], n0: usize) {
        let mut acc = [[0.0f64; L]; OB];
        if let Some(b) = self.bias {
            for (o, row) in acc.iter_mut().enumerate() {
                *row = [b[self.o0 + o]; L];
            }
        }
        for c in 0..self.cin {
            let xc = &self.x[c * self.vol * self.n..(c + 1) * self.vol * self.n];
            let wc = &self.wt[c * self.taps * self.cout..(c + 1) * self.taps * self.cout];
            for &(xv, t) in self.valid {
                let s = xv * self.n + n0;
                let mut xs = [0.0f64; L];
                xs.copy_from_slice(&xc[s..s + L]);
                let mut ws = [0.0f64; OB];
                ws.copy_from_slice(&wc[t * self.cout + self.o0..t * self.cout + self.o0 + OB]);
                for o in 0..OB {
                    let wv = ws[o];
                    for l in 0..L {
                        acc[o][l] = wv.mul_add(xs[l], acc[o][l]);
                    }
                }
            }
        }
        for (o, row) in acc.iter().enumerate() {
            let d = ((self.o0 + o) * self.vol + self.v) * self.n + n0;
            y[d..d + L].copy_from_slice(row);
        }
    }
}

/// `dw[o][c][t] = Σ_{v,n} dy[o,v,n] · x[c, v + t - r, n]` over in-bounds voxels.
///
/// Walks output rows `(z, i)` so the rows of `dy` and `x` touched by all taps
/// stay cache resident, and accumulates `OB × CB` channel tiles in registers.
fn weight_grad(x: &[f64], dy: &[f64], cin: usize, cout: usize, g: Geometry) -> Vec<f64> {
    let taps = g.taps();
    let plane = g.vol() * g.n;
    let r = [g.k[0] / 2, g.k[1] / 2, g.k[2] / 2];
    let mut dw = vec![0.0; cout * cin * taps];
    for z in 0..g.d {
        for i in 0..g.h {
            for kz in 0..g.k[0] {
                let Some(zz) = (z + kz).checked_sub(r[0]).filter(|&v| v < g.d) else {
                    continue;
                };
                for ki in 0..g.k[1] {
                    let Some(ii) = (i + ki).checked_sub(r[1]).filter(|&v| v < g.h) else {
                        continue;
                    };
                    for kj in 0..g.k[2] {
                        // output columns j with 0 <= j + kj - r < w
                        let j0 = r[2].saturating_sub(kj);
                        let j1 = (g.w + r[2]).saturating_sub(kj).min(g.w);
                        if j0 >= j1 {
                            continue;
                        }
                        let t = (kz * g.k[1] + ki) * g.k[2] + kj;
                        let ctx = WgradCtx {
                            x,
                            dy,
                            plane,
                            out: ((z * g.h + i) * g.w + j0) * g.n,
                            inp: ((zz * g.h + ii) * g.w + j0 + kj - r[2]) * g.n,
                            seg: (j1 - j0) * g.n,
                            cin,
                            taps,
                            t,
                        };
                        ctx.all(cout, &mut dw);
                    }
                }
            }
        }
    }
    dw
}

const WL: usize = 8;

struct WgradCtx<'a> {
    x: &'a [f64],
    dy: &'a [f64],
    plane: usize,
    out: usize,
    inp: usize,
    seg: usize,
    cin: usize,
    taps: usize,
    t: usize,
}

impl WgradCtx<'_> {
    fn all(&self, cout: usize, dw: &mut [f64]) {
        let mut o0 = 0;
        while o0 < cout {
            let ob = match cout - o0 {
                r if r >= 4 => 4,
                r if r >= 2 => 2,
                _ => 1,
            };
            let mut c0 = 0;
            while c0 < self.cin {
                let cb = match self.cin - c0 {
                    r if r >= 4 => 4,
                    r if r >= 2 => 2,
                    _ => 1,
                };
                match (ob, cb) {
                    (4, 4) => self.tile::<4, 4>(o0, c0, dw),
                    (4, 2) => self.tile::<4, 2>(o0, c0, dw),
                    (4, 1) => self.tile::<4, 1>(o0, c0, dw),
                    (2, 4) => self.tile::<2, 4>(o0, c0, dw),
                    (2, 2) => self.tile::<2, 2>(o0, c0, dw),
                    (2, 1) => self.tile::<2, 1>(o0, c0, dw),
                    (1, 4) => self.tile::<1, 4>(o0, c0, dw),
                    (1, 2) => self.tile::<1, 2>(o0, c0, dw),
                    _ => self.tile::<1, 1>(o0, c0, dw),
                }
                c0 += cb;
            }
            o0 += ob;
        }
    }

    #[inline(always)]
    fn tile<const OB: usize, const CB: usize>(&self, o0: usize, c0: usize, dw: &mut [f64]) {
        let mut acc = [[[0.0f64; WL]; CB]; OB];
        let dys: [&[f64]; OB] = std::array::from_fn(|o| {
            let s = (o0 + o) * self.plane + self.out;
            &self.dy[s..s + self.seg]
        });
        let xs: [&[f64]; CB] = std::array::from_fn(|c| {
            let s = (c0 + c) * self.plane + self.inp;
            &self.x[s..s + self.seg]
        });
        let chunks = self.seg / WL;
        for k in 0..chunks {
            let lo = k * WL;
            let mut xv = [[0.0f64; WL]; CB];
            for c in 0..CB {
                xv[c].copy_from_slice(&xs[c][lo..lo + WL]);
            }
            for o in 0..OB {
                let mut dv = [0.0f64; WL];
                dv.copy_from_slice(&dys[o][lo..lo + WL]);
                for c in 0..CB {
                    for l in 0..WL {
                        acc[o][c][l] = dv[l].mul_add(xv[c][l], acc[o][c][l]);
                    }
                }
            }
        }
        for o in 0..OB {
            for c in 0..CB {
                let mut s: f64 = acc[o][c].iter().sum();
                for e in chunks * WL..self.seg {
                    s += dys[o][e] * xs[c][e];
                }
                dw[((o0 + o) * self.cin + c0 + c) * self.taps + self.t] += s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Straight nested-loop reference for `[C, D, H, W, N]` inputs.
    fn naive(x: &Tensor, w: &Tensor, b: &Tensor, k: [usize; 3]) -> Vec<f64> {
        let s = x.shape();
        let (cin, d, h, wd, n) = (s[0], s[1], s[2], s[3], s[4]);
        let cout = w.shape()[0];
        let mut y = vec![0.0; cout * d * h * wd * n];
        let xi = |c: usize, z: usize, i: usize, j: usize, m: usize| {
            x.data()[(((c * d + z) * h + i) * wd + j) * n + m]
        };
        for o in 0..cout {
            for z in 0..d {
                for i in 0..h {
                    for j in 0..wd {
                        for m in 0..n {
                            let mut acc = b.data()[o];
                            for c in 0..cin {
                                for a in 0..k[0] {
                                    for bb in 0..k[1] {
                                        for cc in 0..k[2] {
                                            let zz = z as isize + a as isize - (k[0] / 2) as isize;
                                            let ii = i as isize + bb as isize - (k[1] / 2) as isize;
                                            let jj = j as isize + cc as isize - (k[2] / 2) as isize;
                                            if zz < 0
                                                || ii < 0
                                                || jj < 0
                                                || zz >= d as isize
                                                || ii >= h as isize
                                                || jj >= wd as isize
                                            {
                                                continue;
                                            }
                                            let widx =
                                                (((o * cin + c) * k[0] + a) * k[1] + bb) * k[2] + cc;
                                            acc += w.data()[widx]
                                                * xi(c, zz as usize, ii as usize, jj as usize, m);
                                        }
                                    }
                                }
                            }
                            y[(((o * d + z) * h + i) * wd + j) * n + m] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn spec_rejects_even_kernel_and_bad_padding() {
        assert!(ConvSpec::new_1d(1, 1, 2).is_err());
        let mut s = ConvSpec::new_1d(1, 1, 3).unwrap();
        s.padding = vec![0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn conv1d_identity_kernel() {
        let spec = ConvSpec::new_1d(2, 2, 1).unwrap();
        let x = Tensor::new(vec![2, 3, 1], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv1d(&x, &spec, &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv1d_shifted_delta_with_zero_padding() {
        let spec = ConvSpec::new_1d(1, 1, 3).unwrap();
        let x = Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let y = conv1d(&x, &spec, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
        let w = Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let y = conv1d(&x, &spec, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn conv3d_unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::new_3d(1, 1, [1, 1, 1]).unwrap();
        let x = rand_tensor(&mut rng, &[1, 3, 4, 2, 5]);
        let w = Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv3d(&x, &spec, &w, &Tensor::zeros(&[1])).unwrap(), x);
    }

    #[test]
    fn conv3d_ones_kernel_on_constant_input() {
        let spec = ConvSpec::new_3d(1, 1, [3, 3, 3]).unwrap();
        let c = 0.5;
        let x = Tensor::new(vec![1, 4, 4, 4, 1], vec![c; 64]).unwrap();
        let w = Tensor::new(vec![1, 1, 3, 3, 3], vec![1.0; 27]).unwrap();
        let b = Tensor::new(vec![1], vec![0.25]).unwrap();
        let y = conv3d(&x, &spec, &w, &b).unwrap();
        let at = |z: usize, i: usize, j: usize| y.data()[(z * 4 + i) * 4 + j];
        assert_eq!(at(1, 1, 1), 27.0 * c + 0.25);
        assert_eq!(at(2, 2, 1), 27.0 * c + 0.25);
        // corner sees 2x2x2 in-bounds taps, a face centre 2x3x3
        assert_eq!(at(0, 0, 0), 8.0 * c + 0.25);
        assert_eq!(at(0, 1, 1), 18.0 * c + 0.25);
    }

    #[test]
    fn matches_naive_loops_on_random_inputs() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cin = rng.random_range(1..4);
            let cout = rng.random_range(1..12);
            let d = rng.random_range(1..6);
            let h = rng.random_range(1..6);
            let wd = rng.random_range(1..6);
            let n = rng.random_range(1..19);
            let k = [
                *[1usize, 3, 5].get(rng.random_range(0..3)).unwrap(),
                *[1usize, 3].get(rng.random_range(0..2)).unwrap(),
                3,
            ];
            let spec = ConvSpec::new_3d(cin, cout, k).unwrap();
            let x = rand_tensor(&mut rng, &[cin, d, h, wd, n]);
            let w = rand_tensor(&mut rng, &spec.weight_shape());
            let b = rand_tensor(&mut rng, &[cout]);
            let y = conv3d(&x, &spec, &w, &b).unwrap();
            let r = naive(&x, &w, &b, k);
            for (a, e) in y.data().iter().zip(&r) {
                assert!((a - e).abs() <= 1e-12, "seed {seed}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dy, conv(x)> with zero bias is bilinear in (x, w): its gradients are
        // exactly dx and dw.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = ConvSpec::new_3d(3, 10, [3, 3, 3]).unwrap();
        let x = rand_tensor(&mut rng, &[3, 4, 3, 5, 9]);
        let w = rand_tensor(&mut rng, &spec.weight_shape());
        let dy = rand_tensor(&mut rng, &[10, 4, 3, 5, 9]);
        let g = conv3d_backward(&x, &spec, &w, &dy, true).unwrap();
        let zero = Tensor::zeros(&[10]);
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let y = conv3d(&x, &spec, &w, &zero).unwrap();
        let lhs = dot(&dy, &y);
        assert!((lhs - dot(g.dx.as_ref().unwrap(), &x)).abs() < 1e-9);
        assert!((lhs - dot(&g.dw, &w)).abs() < 1e-9);
        let total: f64 = dy.data().iter().sum();
        assert!((g.db.data().iter().sum::<f64>() - total).abs() < 1e-9);
    }

    #[test]
    fn shape_errors() {
        let spec = ConvSpec::new_3d(2, 1, [3, 3, 3]).unwrap();
        let x = Tensor::zeros(&[1, 2, 2, 2, 1]);
        let w = Tensor::zeros(&spec.weight_shape());
        assert!(matches!(
            conv3d(&x, &spec, &w, &Tensor::zeros(&[1])),
            Err(Error::Shape { .. })
        ));
    }
}
