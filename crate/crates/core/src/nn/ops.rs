//! Layer primitives with their vector–Jacobian products.
//!
//! Every reduction runs in a fixed order and parallel work is split by
//! output channel only, so results do not depend on the thread count.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::volume::Dims;

/// Instance-norm variance epsilon.
pub const NORM_EPS: f64 = 1e-5;

#[inline]
fn span(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

/// `out[p] += w * inp[p + d]` wherever both voxels are inside the grid.
#[inline]
fn shifted_axpy<F: Scalar>(out: &mut [F], inp: &[F], dims: Dims, d: [isize; 3], w: F) {
    let (x0, x1) = span(dims.nx, d[0]);
    let (y0, y1) = span(dims.ny, d[1]);
    let (z0, z1) = span(dims.nz, d[2]);
    if x0 >= x1 {
        return;
    }
    for z in z0..z1 {
        let zi = (z as isize + d[2]) as usize;
        for y in y0..y1 {
            let yi = (y as isize + d[1]) as usize;
            let ob = (z * dims.ny + y) * dims.nx;
            let ib = ((zi * dims.ny + yi) * dims.nx) as isize + d[0];
            let o = &mut out[ob + x0..ob + x1];
            let i = &inp[(ib + x0 as isize) as usize..(ib + x1 as isize) as usize];
            for (a, &b) in o.iter_mut().zip(i) {
                *a += w * b;
            }
        }
    }
}

/// `Σ_p a[p] * b[p + d]` over voxels where both are inside the grid.
#[inline]
fn shifted_dot<F: Scalar>(a: &[F], b: &[F], dims: Dims, d: [isize; 3]) -> F {
    let (x0, x1) = span(dims.nx, d[0]);
    let (y0, y1) = span(dims.ny, d[1]);
    let (z0, z1) = span(dims.nz, d[2]);
    let mut acc = F::zero();
    if x0 >= x1 {
        return acc;
    }
    for z in z0..z1 {
        let zi = (z as isize + d[2]) as usize;
        for y in y0..y1 {
            let yi = (y as isize + d[1]) as usize;
            let ab = (z * dims.ny + y) * dims.nx;
            let bb = ((zi * dims.ny + yi) * dims.nx) as isize + d[0];
            let ra = &a[ab + x0..ab + x1];
            let rb = &b[(bb + x0 as isize) as usize..(bb + x1 as isize) as usize];
            let mut row = F::zero();
            for (&u, &v) in ra.iter().zip(rb) {
                row += u * v;
            }
            acc += row;
        }
    }
    acc
}

fn taps(k: usize) -> Vec<[isize; 3]> {
    let r = (k / 2) as isize;
    let mut t = Vec::with_capacity(k * k * k);
    for kz in 0..k as isize {
        for ky in 0..k as isize {
            for kx in 0..k as isize {
                t.push([kx - r, ky - r, kz - r]);
            }
        }
    }
    t
}

/// Same-padded convolution with an odd cubic kernel. Weights are laid out
/// `[out][in][kz][ky][kx]`.
pub fn conv3d<F: Scalar>(input: &Tensor<F>, weight: &[F], bias: &[F], out_channels: usize, k: usize) -> Tensor<F> {
    let dims = input.dims;
    let n = dims.len();
    let cin = input.channels;
    let k3 = k * k * k;
    debug_assert_eq!(weight.len(), out_channels * cin * k3);
    let taps = taps(k);
    let mut out = vec![F::zero(); out_channels * n];
    out.par_chunks_mut(n).enumerate().for_each(|(co, o)| {
        o.fill(bias[co]);
        for ci in 0..cin {
            let inp = input.channel(ci);
            let w = &weight[(co * cin + ci) * k3..(co * cin + ci + 1) * k3];
            for (t, d) in taps.iter().enumerate() {
                shifted_axpy(o, inp, dims, *d, w[t]);
            }
        }
    });
    Tensor { channels: out_channels, dims, data: out }
}

/// Gradients of [`conv3d`]: `(d input, d weight, d bias)`. The input
/// gradient is skipped when `need_input` is false.
pub fn conv3d_backward<F: Scalar>(
    input: &Tensor<F>,
    weight: &[F],
    grad_out: &Tensor<F>,
    k: usize,
    need_input: bool,
) -> (Option<Tensor<F>>, Vec<F>, Vec<F>) {
    let dims = input.dims;
    let n = dims.len();
    let cin = input.channels;
    let cout = grad_out.channels;
    let k3 = k * k * k;
    let taps = taps(k);

    let mut gw = vec![F::zero(); cout * cin * k3];
    gw.par_chunks_mut(cin * k3).enumerate().for_each(|(co, g)| {
        let go = grad_out.channel(co);
        for ci in 0..cin {
            let inp = input.channel(ci);
            for (t, d) in taps.iter().enumerate() {
                g[ci * k3 + t] = shifted_dot(go, inp, dims, *d);
            }
        }
    });
    let gb: Vec<F> = (0..cout).map(|co| grad_out.channel(co).iter().copied().sum()).collect();

    let gin = need_input.then(|| {
        let mut gi = vec![F::zero(); cin * n];
        gi.par_chunks_mut(n).enumerate().for_each(|(ci, g)| {
            for co in 0..cout {
                let go = grad_out.channel(co);
                let w = &weight[(co * cin + ci) * k3..(co * cin + ci + 1) * k3];
                for (t, d) in taps.iter().enumerate() {
                    shifted_axpy(g, go, dims, [-d[0], -d[1], -d[2]], w[t]);
                }
            }
        });
        Tensor { channels: cin, dims, data: gi }
    });
    (gin, gw, gb)
}

fn up_dims(d: Dims) -> Dims {
    Dims::new(d.nx * 2, d.ny * 2, d.nz * 2)
}

/// Transposed convolution with a 2×2×2 kernel and stride 2. Weights are
/// laid out `[in][out][kz][ky][kx]`.
pub fn conv_transpose2<F: Scalar>(input: &Tensor<F>, weight: &[F], bias: &[F], out_channels: usize) -> Tensor<F> {
    let d = input.dims;
    let od = up_dims(d);
    let on = od.len();
    let cin = input.channels;
    let mut out = vec![F::zero(); out_channels * on];
    out.par_chunks_mut(on).enumerate().for_each(|(co, o)| {
        o.fill(bias[co]);
        for ci in 0..cin {
            let inp = input.channel(ci);
            let w = &weight[(ci * out_channels + co) * 8..(ci * out_channels + co + 1) * 8];
            for z in 0..d.nz {
                for y in 0..d.ny {
                    for x in 0..d.nx {
                        let v = inp[d.index(x, y, z)];
                        for (t, &wt) in w.iter().enumerate() {
                            let (a, b, c) = (t & 1, (t >> 1) & 1, t >> 2);
                            o[od.index(2 * x + a, 2 * y + b, 2 * z + c)] += wt * v;
                        }
                    }
                }
            }
        }
    });
    Tensor { channels: out_channels, dims: od, data: out }
}

pub fn conv_transpose2_backward<F: Scalar>(
    input: &Tensor<F>,
    weight: &[F],
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Vec<F>, Vec<F>) {
    let d = input.dims;
    let od = grad_out.dims;
    let n = d.len();
    let cin = input.channels;
    let cout = grad_out.channels;

    let mut gi = vec![F::zero(); cin * n];
    let mut gw = vec![F::zero(); cin * cout * 8];
    gi.par_chunks_mut(n).zip(gw.par_chunks_mut(cout * 8)).enumerate().for_each(|(ci, (g, gwc))| {
        let inp = input.channel(ci);
        for co in 0..cout {
            let go = grad_out.channel(co);
            let w = &weight[(ci * cout + co) * 8..(ci * cout + co + 1) * 8];
            let gwt = &mut gwc[co * 8..(co + 1) * 8];
            for z in 0..d.nz {
                for y in 0..d.ny {
                    for x in 0..d.nx {
                        let i = d.index(x, y, z);
                        let v = inp[i];
                        let mut acc = F::zero();
                        for t in 0..8 {
                            let (a, b, c) = (t & 1, (t >> 1) & 1, t >> 2);
                            let gov = go[od.index(2 * x + a, 2 * y + b, 2 * z + c)];
                            acc += w[t] * gov;
                            gwt[t] += v * gov;
                        }
                        g[i] += acc;
                    }
                }
            }
        }
    });
    let gb = (0..cout).map(|co| grad_out.channel(co).iter().copied().sum()).collect();
    (Tensor { channels: cin, dims: d, data: gi }, gw, gb)
}

/// 2×2×2 average pooling; every extent must be even.
pub fn avg_pool2<F: Scalar>(input: &Tensor<F>) -> Tensor<F> {
    let d = input.dims;
    let od = Dims::new(d.nx / 2, d.ny / 2, d.nz / 2);
    let eighth = F::of(0.125);
    let mut out = Tensor::zeros(input.channels, od);
    let on = od.len();
    for c in 0..input.channels {
        let inp = input.channel(c);
        let o = &mut out.data[c * on..(c + 1) * on];
        for z in 0..od.nz {
            for y in 0..od.ny {
                for x in 0..od.nx {
                    let mut s = F::zero();
                    for t in 0..8 {
                        let (a, b, cc) = (t & 1, (t >> 1) & 1, t >> 2);
                        s += inp[d.index(2 * x + a, 2 * y + b, 2 * z + cc)];
                    }
                    o[od.index(x, y, z)] = s * eighth;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<F: Scalar>(grad_out: &Tensor<F>, input_dims: Dims) -> Tensor<F> {
    let od = grad_out.dims;
    let eighth = F::of(0.125);
    let mut gi = Tensor::zeros(grad_out.channels, input_dims);
    let n = input_dims.len();
    for c in 0..grad_out.channels {
        let go = grad_out.channel(c);
        let g = &mut gi.data[c * n..(c + 1) * n];
        for z in 0..od.nz {
            for y in 0..od.ny {
                for x in 0..od.nx {
                    let v = go[od.index(x, y, z)] * eighth;
                    for t in 0..8 {
                        let (a, b, cc) = (t & 1, (t >> 1) & 1, t >> 2);
                        g[input_dims.index(2 * x + a, 2 * y + b, 2 * z + cc)] = v;
                    }
                }
            }
        }
    }
    gi
}

/// Cached statistics of an instance-norm application.
#[derive(Debug, Clone)]
pub struct NormCache<F> {
    pub xhat: Tensor<F>,
    pub inv_std: Vec<F>,
}

/// Per-channel normalization over the spatial extent, then `scale * x̂ + shift`.
pub fn instance_norm<F: Scalar>(input: &Tensor<F>, scale: &[F], shift: &[F]) -> (Tensor<F>, NormCache<F>) {
    let n = input.dims.len();
    let nf = F::of(n as f64);
    let eps = F::of(NORM_EPS);
    let mut xhat = Tensor::zeros(input.channels, input.dims);
    let mut out = Tensor::zeros(input.channels, input.dims);
    let mut inv_std = Vec::with_capacity(input.channels);
    for c in 0..input.channels {
        let x = input.channel(c);
        let mean = x.iter().copied().sum::<F>() / nf;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
        let is = F::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = &mut xhat.data[c * n..(c + 1) * n];
        let o = &mut out.data[c * n..(c + 1) * n];
        for i in 0..n {
            xh[i] = (x[i] - mean) * is;
            o[i] = scale[c] * xh[i] + shift[c];
        }
    }
    (out, NormCache { xhat, inv_std })
}

/// Returns `(d input, d scale, d shift)`.
pub fn instance_norm_backward<F: Scalar>(
    cache: &NormCache<F>,
    scale: &[F],
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Vec<F>, Vec<F>) {
    let n = grad_out.dims.len();
    let nf = F::of(n as f64);
    let mut gi = Tensor::zeros(grad_out.channels, grad_out.dims);
    let mut gs = Vec::with_capacity(grad_out.channels);
    let mut gb = Vec::with_capacity(grad_out.channels);
    for c in 0..grad_out.channels {
        let g = grad_out.channel(c);
        let xh = cache.xhat.channel(c);
        let sum_g = g.iter().copied().sum::<F>();
        let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>();
        gs.push(sum_gx);
        gb.push(sum_g);
        let k = scale[c] * cache.inv_std[c];
        let (mg, mgx) = (sum_g / nf, sum_gx / nf);
        let o = &mut gi.data[c * n..(c + 1) * n];
        for i in 0..n {
            o[i] = k * (g[i] - mg - xh[i] * mgx);
        }
    }
    (gi, gs, gb)
}

pub fn relu_inplace<F: Scalar>(t: &mut Tensor<F>) {
    for v in t.data.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Masks `grad` by the positive part of the activation output.
pub fn relu_backward_inplace<F: Scalar>(activation: &Tensor<F>, grad: &mut Tensor<F>) {
    for (g, &a) in grad.data.iter_mut().zip(&activation.data) {
        if a <= F::zero() {
            *g = F::zero();
        }
    }
}

/// Softmax over channels at every voxel.
pub fn softmax<F: Scalar>(logits: &Tensor<F>) -> Tensor<F> {
    let n = logits.dims.len();
    let c = logits.channels;
    let mut out = Tensor::zeros(c, logits.dims);
    for i in 0..n {
        let mut m = logits.data[i];
        for k in 1..c {
            m = m.max(logits.data[k * n + i]);
        }
        let mut s = F::zero();
        for k in 0..c {
            let e = (logits.data[k * n + i] - m).exp();
            out.data[k * n + i] = e;
            s += e;
        }
        for k in 0..c {
            out.data[k * n + i] = out.data[k * n + i] / s;
        }
    }
    out
}

/// Pulls `d loss / d probs` back through the softmax.
pub fn softmax_backward<F: Scalar>(probs: &Tensor<F>, grad_probs: &Tensor<F>) -> Tensor<F> {
    let n = probs.dims.len();
    let c = probs.channels;
    let mut out = Tensor::zeros(c, probs.dims);
    for i in 0..n {
        let mut dot = F::zero();
        for k in 0..c {
            dot += probs.data[k * n + i] * grad_probs.data[k * n + i];
        }
        for k in 0..c {
            out.data[k * n + i] = probs.data[k * n + i] * (grad_probs.data[k * n + i] - dot);
        }
    }
    out
}

pub fn concat_channels<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    debug_assert_eq!(a.dims, b.dims);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor { channels: a.channels + b.channels, dims: a.dims, data }
}

pub fn split_channels<F: Scalar>(t: &Tensor<F>, first: usize) -> (Tensor<F>, Tensor<F>) {
    let n = t.dims.len();
    let (a, b) = t.data.split_at(first * n);
    (
        Tensor { channels: first, dims: t.dims, data: a.to_vec() },
        Tensor { channels: t.channels - first, dims: t.dims, data: b.to_vec() },
    )
}
