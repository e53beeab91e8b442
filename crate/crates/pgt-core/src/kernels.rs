//! Forward and backward kernels over [`Tensor`].
//!
//! Every tape op dispatches to a function pair here. Sequences are laid out
//! frame-major `[T, C, ...]`; trailing spatial dims are folded into one inner
//! extent, so temporal kernels treat each spatial location as an independent
//! sequence sharing weights.
//!
//! The temporal convolution always materialises its boundary taps (zero or a
//! carried past frame) and performs the identical arithmetic either way, so a
//! zero carried state is bit-equal to plain zero padding.

use crate::error::{PgtError, Result};
use crate::tensor::{Scalar, Tensor};

/// Variance epsilon for step normalization.
pub const NORM_EPS: f64 = 1e-5;

fn seq3<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize, usize)> {
    x.seq_dims()
}

/// Temporal 1-D convolution with odd kernel, output length preserved.
///
/// `x`: [T, C_in, ...], `w`: [k, C_in, C_out], `b`: [C_out].
/// `past`: optional carried frame [C_in, ...] used as the tap one position
/// before frame 0 (requires k == 3); all other out-of-range taps are zero.
pub fn temporal_conv_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    past: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let (t_len, c_in, sp) = seq3(x)?;
    let wk = w.shape();
    if wk.len() != 3 || wk[1] != c_in {
        return Err(PgtError::shape(format!(
            "temporal conv weights {:?} incompatible with input channels {c_in}",
            wk
        )));
    }
    let (k, c_out) = (wk[0], wk[2]);
    if k % 2 == 0 || k < 3 {
        return Err(PgtError::shape(format!("temporal kernel must be odd and >= 3, got {k}")));
    }
    if b.shape() != [c_out] {
        return Err(PgtError::shape(format!(
            "temporal conv bias {:?}, expected [{c_out}]",
            b.shape()
        )));
    }
    if let Some(p) = past {
        if k != 3 {
            return Err(PgtError::contract(format!(
                "carried past tap is defined for kernel 3, got {k}"
            )));
        }
        if p.numel() != c_in * sp {
            return Err(PgtError::shape(format!(
                "carried state has {} elements, expected {} (C_in={c_in} x spatial={sp})",
                p.numel(),
                c_in * sp
            )));
        }
    }
    let r = (k - 1) / 2;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![S::zero(); t_len * c_out * sp];
    for t in 0..t_len {
        for co in 0..c_out {
            for s in 0..sp {
                let mut acc = bd[co];
                for j in 0..k {
                    let tau = t as isize + j as isize - r as isize;
                    for ci in 0..c_in {
                        let tap = if tau >= 0 && (tau as usize) < t_len {
                            xd[(tau as usize * c_in + ci) * sp + s]
                        } else if tau == -1 {
                            match past {
                                Some(p) => p.data()[ci * sp + s],
                                None => S::zero(),
                            }
                        } else {
                            S::zero()
                        };
                        acc = acc + wd[(j * c_in + ci) * c_out + co] * tap;
                    }
                }
                out[(t * c_out + co) * sp + s] = acc;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[1] = c_out;
    Tensor::from_vec(shape, out)
}

/// Backward of [`temporal_conv_forward`]. Returns (dx, dw, db, dpast).
pub fn temporal_conv_backward<S: Scalar>(
    g: &Tensor<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
    past: Option<&Tensor<S>>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>, Option<Tensor<S>>)> {
    let (t_len, c_in, sp) = seq3(x)?;
    let (k, c_out) = (w.shape()[0], w.shape()[2]);
    let r = (k - 1) / 2;
    let gd = g.data();
    let xd = x.data();
    let wd = w.data();
    let mut dx = vec![S::zero(); t_len * c_in * sp];
    let mut dw = vec![S::zero(); k * c_in * c_out];
    let mut db = vec![S::zero(); c_out];
    let mut dpast = past.map(|p| vec![S::zero(); p.numel()]);
    for t in 0..t_len {
        for co in 0..c_out {
            for s in 0..sp {
                let go = gd[(t * c_out + co) * sp + s];
                db[co] = db[co] + go;
                for j in 0..k {
                    let tau = t as isize + j as isize - r as isize;
                    for ci in 0..c_in {
                        let widx = (j * c_in + ci) * c_out + co;
                        if tau >= 0 && (tau as usize) < t_len {
                            let xi = (tau as usize * c_in + ci) * sp + s;
                            dw[widx] = dw[widx] + go * xd[xi];
                            dx[xi] = dx[xi] + go * wd[widx];
                        } else if tau == -1 {
                            if let (Some(p), Some(dp)) = (past, dpast.as_mut()) {
                                let pi = ci * sp + s;
                                dw[widx] = dw[widx] + go * p.data()[pi];
                                dp[pi] = dp[pi] + go * wd[widx];
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = Tensor::from_vec(x.shape().to_vec(), dx)?;
    let dw = Tensor::from_vec(w.shape().to_vec(), dw)?;
    let db = Tensor::from_vec(vec![c_out], db)?;
    let dpast = match (past, dpast) {
        (Some(p), Some(dp)) => Some(Tensor::from_vec(p.shape().to_vec(), dp)?),
        _ => None,
    };
    Ok((dx, dw, db, dpast))
}

/// Per-frame channel mixing: `x` [T, C_in, ...] x `w` [C_in, C_out] + `b`.
pub fn pointwise_conv_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (t_len, c_in, sp) = seq3(x)?;
    if w.shape().len() != 2 || w.shape()[0] != c_in {
        return Err(PgtError::shape(format!(
            "pointwise weights {:?} incompatible with input channels {c_in}",
            w.shape()
        )));
    }
    let c_out = w.shape()[1];
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![S::zero(); t_len * c_out * sp];
    for t in 0..t_len {
        for s in 0..sp {
            for co in 0..c_out {
                let mut acc = bd[co];
                for ci in 0..c_in {
                    acc = acc + wd[ci * c_out + co] * xd[(t * c_in + ci) * sp + s];
                }
                out[(t * c_out + co) * sp + s] = acc;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[1] = c_out;
    Tensor::from_vec(shape, out)
}

pub fn pointwise_conv_backward<S: Scalar>(
    g: &Tensor<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (t_len, c_in, sp) = seq3(x)?;
    let c_out = w.shape()[1];
    let gd = g.data();
    let xd = x.data();
    let wd = w.data();
    let mut dx = vec![S::zero(); t_len * c_in * sp];
    let mut dw = vec![S::zero(); c_in * c_out];
    let mut db = vec![S::zero(); c_out];
    for t in 0..t_len {
        for s in 0..sp {
            for co in 0..c_out {
                let go = gd[(t * c_out + co) * sp + s];
                db[co] = db[co] + go;
                for ci in 0..c_in {
                    dw[ci * c_out + co] = dw[ci * c_out + co] + go * xd[(t * c_in + ci) * sp + s];
                    dx[(t * c_in + ci) * sp + s] =
                        dx[(t * c_in + ci) * sp + s] + go * wd[ci * c_out + co];
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), dx)?,
        Tensor::from_vec(w.shape().to_vec(), dw)?,
        Tensor::from_vec(vec![c_out], db)?,
    ))
}

/// Per-frame 2-D convolution with zero padding, same spatial size.
/// `x`: [T, C_in, H, W], `w`: [kh, kw, C_in, C_out], `b`: [C_out].
pub fn spatial_conv_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>> {
    let sh = x.shape();
    if sh.len() != 4 {
        return Err(PgtError::shape(format!(
            "spatial conv expects [T, C, H, W], got {:?}",
            sh
        )));
    }
    let (t_len, c_in, h, wd_) = (sh[0], sh[1], sh[2], sh[3]);
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != c_in {
        return Err(PgtError::shape(format!(
            "spatial weights {:?} incompatible with input channels {c_in}",
            ws
        )));
    }
    let (kh, kw, c_out) = (ws[0], ws[1], ws[3]);
    let (rh, rw) = (kh / 2, kw / 2);
    let xd = x.data();
    let wdat = w.data();
    let bd = b.data();
    let mut out = vec![S::zero(); t_len * c_out * h * wd_];
    for t in 0..t_len {
        for co in 0..c_out {
            for y in 0..h {
                for xq in 0..wd_ {
                    let mut acc = bd[co];
                    for dy in 0..kh {
                        for dxq in 0..kw {
                            let yy = y as isize + dy as isize - rh as isize;
                            let xx = xq as isize + dxq as isize - rw as isize;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd_ as isize {
                                continue;
                            }
                            for ci in 0..c_in {
                                let xi = ((t * c_in + ci) * h + yy as usize) * wd_ + xx as usize;
                                let wi = ((dy * kw + dxq) * c_in + ci) * c_out + co;
                                acc = acc + wdat[wi] * xd[xi];
                            }
                        }
                    }
                    out[((t * c_out + co) * h + y) * wd_ + xq] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![t_len, c_out, h, wd_], out)
}

pub fn spatial_conv_backward<S: Scalar>(
    g: &Tensor<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let sh = x.shape();
    let (t_len, c_in, h, wd_) = (sh[0], sh[1], sh[2], sh[3]);
    let ws = w.shape();
    let (kh, kw, c_out) = (ws[0], ws[1], ws[3]);
    let (rh, rw) = (kh / 2, kw / 2);
    let xd = x.data();
    let wdat = w.data();
    let gd = g.data();
    let mut dx = vec![S::zero(); xd.len()];
    let mut dw = vec![S::zero(); wdat.len()];
    let mut db = vec![S::zero(); c_out];
    for t in 0..t_len {
        for co in 0..c_out {
            for y in 0..h {
                for xq in 0..wd_ {
                    let go = gd[((t * c_out + co) * h + y) * wd_ + xq];
                    db[co] = db[co] + go;
                    for dy in 0..kh {
                        for dxq in 0..kw {
                            let yy = y as isize + dy as isize - rh as isize;
                            let xx = xq as isize + dxq as isize - rw as isize;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd_ as isize {
                                continue;
                            }
                            for ci in 0..c_in {
                                let xi = ((t * c_in + ci) * h + yy as usize) * wd_ + xx as usize;
                                let wi = ((dy * kw + dxq) * c_in + ci) * c_out + co;
                                dw[wi] = dw[wi] + go * xd[xi];
                                dx[xi] = dx[xi] + go * wdat[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), dx)?,
        Tensor::from_vec(w.shape().to_vec(), dw)?,
        Tensor::from_vec(vec![c_out], db)?,
    ))
}

pub fn relu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

pub fn relu_backward<S: Scalar>(g: &Tensor<S>, x: &Tensor<S>) -> Tensor<S> {
    let data = g
        .data()
        .iter()
        .zip(x.data().iter())
        .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("relu shapes match")
}

/// Per-channel normalization over this tensor's frames (and spatial dims),
/// then a learnable affine. Statistics are local to the tensor, so each
/// progressive step normalizes with its own statistics.
///
/// Returns (y, mean [C], inv_std [C]).
pub fn step_norm_forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (t_len, c, sp) = seq3(x)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(PgtError::shape(format!(
            "norm affine shapes {:?}/{:?}, expected [{c}]",
            gamma.shape(),
            beta.shape()
        )));
    }
    let n = S::from_f64((t_len * sp) as f64);
    let eps = S::from_f64(NORM_EPS);
    let xd = x.data();
    let mut mean = vec![S::zero(); c];
    let mut istd = vec![S::zero(); c];
    let mut out = vec![S::zero(); xd.len()];
    for ci in 0..c {
        let mut m = S::zero();
        for t in 0..t_len {
            for s in 0..sp {
                m = m + xd[(t * c + ci) * sp + s];
            }
        }
        m = m / n;
        let mut var = S::zero();
        for t in 0..t_len {
            for s in 0..sp {
                let d = xd[(t * c + ci) * sp + s] - m;
                var = var + d * d;
            }
        }
        var = var / n;
        mean[ci] = m;
        istd[ci] = S::one() / (var + eps).sqrt();
    }
    let gd = gamma.data();
    let bd = beta.data();
    for t in 0..t_len {
        for ci in 0..c {
            for s in 0..sp {
                let i = (t * c + ci) * sp + s;
                out[i] = gd[ci] * (xd[i] - mean[ci]) * istd[ci] + bd[ci];
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), out)?,
        Tensor::from_vec(vec![c], mean)?,
        Tensor::from_vec(vec![c], istd)?,
    ))
}

/// Backward of [`step_norm_forward`]. Returns (dx, dgamma, dbeta).
pub fn step_norm_backward<S: Scalar>(
    g: &Tensor<S>,
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    mean: &Tensor<S>,
    istd: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (t_len, c, sp) = seq3(x)?;
    let n = S::from_f64((t_len * sp) as f64);
    let xd = x.data();
    let gd = g.data();
    let gam = gamma.data();
    let md = mean.data();
    let sd = istd.data();
    let mut dx = vec![S::zero(); xd.len()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for ci in 0..c {
        // accumulate the two reduction terms of the standard norm VJP
        let mut sum_g = S::zero();
        let mut sum_gx = S::zero();
        for t in 0..t_len {
            for s in 0..sp {
                let i = (t * c + ci) * sp + s;
                let xhat = (xd[i] - md[ci]) * sd[ci];
                dgamma[ci] = dgamma[ci] + gd[i] * xhat;
                dbeta[ci] = dbeta[ci] + gd[i];
                sum_g = sum_g + gd[i];
                sum_gx = sum_gx + gd[i] * xhat;
            }
        }
        for t in 0..t_len {
            for s in 0..sp {
                let i = (t * c + ci) * sp + s;
                let xhat = (xd[i] - md[ci]) * sd[ci];
                dx[i] = gam[ci] * sd[ci] * (gd[i] - sum_g / n - xhat * sum_gx / n);
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), dx)?,
        Tensor::from_vec(vec![c], dgamma)?,
        Tensor::from_vec(vec![c], dbeta)?,
    ))
}

/// Mean over the frame axis: [T, C, ...] -> [C, ...].
pub fn temporal_mean_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (t_len, c, sp) = seq3(x)?;
    if t_len == 0 {
        return Err(PgtError::domain("temporal pooling over an empty step"));
    }
    let inv = S::one() / S::from_f64(t_len as f64);
    let xd = x.data();
    let mut out = vec![S::zero(); c * sp];
    for t in 0..t_len {
        for i in 0..c * sp {
            out[i] = out[i] + xd[t * c * sp + i];
        }
    }
    for v in out.iter_mut() {
        *v = *v * inv;
    }
    Tensor::from_vec(x.frame_shape(), out)
}

pub fn temporal_mean_pool_backward<S: Scalar>(g: &Tensor<S>, t_len: usize) -> Tensor<S> {
    let inv = S::one() / S::from_f64(t_len as f64);
    let fe = g.numel();
    let mut dx = Vec::with_capacity(t_len * fe);
    for _ in 0..t_len {
        dx.extend(g.data().iter().map(|&v| v * inv));
    }
    let mut shape = vec![t_len];
    shape.extend_from_slice(g.shape());
    Tensor::from_vec(shape, dx).expect("pool shapes match")
}

/// Max over the frame axis: [T, C, ...] -> [C, ...]; also returns argmax frames.
pub fn temporal_max_pool<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
    let (t_len, c, sp) = seq3(x)?;
    if t_len == 0 {
        return Err(PgtError::domain("temporal pooling over an empty step"));
    }
    let xd = x.data();
    let mut out = vec![S::zero(); c * sp];
    let mut arg = vec![0usize; c * sp];
    for i in 0..c * sp {
        let mut best = xd[i];
        let mut bt = 0usize;
        for t in 1..t_len {
            let v = xd[t * c * sp + i];
            if v > best {
                best = v;
                bt = t;
            }
        }
        out[i] = best;
        arg[i] = bt;
    }
    Ok((Tensor::from_vec(x.frame_shape(), out)?, arg))
}

pub fn temporal_max_pool_backward<S: Scalar>(
    g: &Tensor<S>,
    arg: &[usize],
    t_len: usize,
) -> Tensor<S> {
    let fe = g.numel();
    let mut dx = vec![S::zero(); t_len * fe];
    for (i, (&gv, &t)) in g.data().iter().zip(arg.iter()).enumerate() {
        dx[t * fe + i] = gv;
    }
    let mut shape = vec![t_len];
    shape.extend_from_slice(g.shape());
    Tensor::from_vec(shape, dx).expect("pool shapes match")
}

/// Mean over frames and spatial dims: [T, C, ...] -> [C].
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (t_len, c, sp) = seq3(x)?;
    if t_len == 0 {
        return Err(PgtError::domain("pooling over an empty sequence"));
    }
    let inv = S::one() / S::from_f64((t_len * sp) as f64);
    let xd = x.data();
    let mut out = vec![S::zero(); c];
    for t in 0..t_len {
        for ci in 0..c {
            for s in 0..sp {
                out[ci] = out[ci] + xd[(t * c + ci) * sp + s];
            }
        }
    }
    for v in out.iter_mut() {
        *v = *v * inv;
    }
    Tensor::from_vec(vec![c], out)
}

pub fn global_avg_pool_backward<S: Scalar>(g: &Tensor<S>, x_shape: &[usize]) -> Tensor<S> {
    let t_len = x_shape[0];
    let c = x_shape[1];
    let sp: usize = x_shape[2..].iter().product();
    let inv = S::one() / S::from_f64((t_len * sp) as f64);
    let gd = g.data();
    let mut dx = vec![S::zero(); t_len * c * sp];
    for t in 0..t_len {
        for ci in 0..c {
            for s in 0..sp {
                dx[(t * c + ci) * sp + s] = gd[ci] * inv;
            }
        }
    }
    Tensor::from_vec(x_shape.to_vec(), dx).expect("pool shapes match")
}

/// Affine map for the classifier head: `x` [C] x `w` [C, K] + `b` [K].
pub fn dense_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>> {
    let c = x.numel();
    if w.shape().len() != 2 || w.shape()[0] != c {
        return Err(PgtError::shape(format!(
            "dense weights {:?} incompatible with input of {c} features",
            w.shape()
        )));
    }
    let k = w.shape()[1];
    let xd = x.data();
    let wd = w.data();
    let mut out = b.data().to_vec();
    for ci in 0..c {
        for ko in 0..k {
            out[ko] = out[ko] + wd[ci * k + ko] * xd[ci];
        }
    }
    Tensor::from_vec(vec![k], out)
}

pub fn dense_backward<S: Scalar>(
    g: &Tensor<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let c = x.numel();
    let k = w.shape()[1];
    let gd = g.data();
    let xd = x.data();
    let wd = w.data();
    let mut dx = vec![S::zero(); c];
    let mut dw = vec![S::zero(); c * k];
    for ci in 0..c {
        for ko in 0..k {
            dw[ci * k + ko] = gd[ko] * xd[ci];
            dx[ci] = dx[ci] + gd[ko] * wd[ci * k + ko];
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), dx)?,
        Tensor::from_vec(w.shape().to_vec(), dw)?,
        Tensor::from_vec(vec![k], gd.to_vec())?,
    ))
}

/// Numerically stable softmax cross-entropy against an integer label.
/// Returns (loss, probs).
pub fn cross_entropy_forward<S: Scalar>(logits: &Tensor<S>, label: usize) -> Result<(S, Tensor<S>)> {
    let k = logits.numel();
    if label >= k {
        return Err(PgtError::domain(format!(
            "label {label} out of range for {k} classes"
        )));
    }
    let ld = logits.data();
    let mut m = ld[0];
    for &v in ld.iter() {
        if v > m {
            m = v;
        }
    }
    let mut denom = S::zero();
    for &v in ld.iter() {
        denom = denom + (v - m).exp();
    }
    let lse = m + denom.ln();
    let loss = lse - ld[label];
    let probs: Vec<S> = ld.iter().map(|&v| (v - lse).exp()).collect();
    Ok((loss, Tensor::from_vec(vec![k], probs)?))
}

pub fn cross_entropy_backward<S: Scalar>(g: S, probs: &Tensor<S>, label: usize) -> Tensor<S> {
    let mut dl = probs.data().to_vec();
    dl[label] = dl[label] - S::one();
    for v in dl.iter_mut() {
        *v = *v * g;
    }
    Tensor::from_vec(probs.shape().to_vec(), dl).expect("ce shapes match")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<S: Scalar>(shape: &[usize], data: &[f64]) -> Tensor<S> {
        Tensor::from_vec(shape.to_vec(), data.iter().map(|&v| S::from_f64(v)).collect()).unwrap()
    }

    #[test]
    fn temporal_conv_averaging_kernel_matches_hand_arithmetic() {
        // k=3 single channel averaging kernel on [3,3,3] with zero padding
        let x = t::<f64>(&[3, 1], &[3.0, 3.0, 3.0]);
        let w = t::<f64>(&[3, 1, 1], &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let b = t::<f64>(&[1], &[0.0]);
        let y = temporal_conv_forward(&x, &w, &b, None).unwrap();
        let expect = [2.0, 3.0, 2.0];
        for (a, e) in y.data().iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn temporal_conv_identity_kernel_is_identity() {
        let x = t::<f64>(&[4, 2], &[1., -2., 3., 0.5, -1., 2., 0., 4.]);
        // center tap = identity matrix across channels, other taps zero
        let mut wdat = vec![0.0; 3 * 2 * 2];
        wdat[(1 * 2 + 0) * 2 + 0] = 1.0;
        wdat[(1 * 2 + 1) * 2 + 1] = 1.0;
        let w = t::<f64>(&[3, 2, 2], &wdat);
        let b = t::<f64>(&[2], &[0.0, 0.0]);
        let y = temporal_conv_forward(&x, &w, &b, None).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn temporal_conv_carried_past_matches_hand_arithmetic() {
        let x = t::<f64>(&[3, 1], &[1.0, 2.0, 3.0]);
        let w = t::<f64>(&[3, 1, 1], &[1.0 / 3.0; 3]);
        let b = t::<f64>(&[1], &[0.0]);
        let past = t::<f64>(&[1], &[4.0]);
        let y = temporal_conv_forward(&x, &w, &b, Some(&past)).unwrap();
        let expect = [7.0 / 3.0, 2.0, 5.0 / 3.0];
        for (a, e) in y.data().iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn temporal_conv_zero_state_bit_equal_to_zero_padding() {
        let x = t::<f32>(&[5, 3], &[0.3, -1.0, 2.0, 0.0, -0.5, 1.5, 2.5, -2.0, 0.25, 1.0, -1.5, 0.125, 0.7, 0.9, -0.1]);
        let w = t::<f32>(&[3, 3, 2], &(0..18).map(|i| (i as f64 - 9.0) * 0.11).collect::<Vec<_>>());
        let b = t::<f32>(&[2], &[0.05, -0.4]);
        let zero_state = Tensor::<f32>::zeros(vec![3]);
        let a = temporal_conv_forward(&x, &w, &b, None).unwrap();
        let c = temporal_conv_forward(&x, &w, &b, Some(&zero_state)).unwrap();
        assert!(a.bit_eq(&c));
    }

    #[test]
    fn carried_past_requires_kernel_three() {
        let x = t::<f64>(&[5, 1], &[1., 2., 3., 4., 5.]);
        let w = t::<f64>(&[5, 1, 1], &[0.2; 5]);
        let b = t::<f64>(&[1], &[0.0]);
        let past = t::<f64>(&[1], &[1.0]);
        assert!(temporal_conv_forward(&x, &w, &b, Some(&past)).is_err());
        assert!(temporal_conv_forward(&x, &w, &b, None).is_ok());
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = t::<f64>(&[3], &[1.0, 2.0, 0.5]);
        let (loss, probs) = cross_entropy_forward(&logits, 1).unwrap();
        let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (0.5f64).exp();
        assert!((loss - (z.ln() - 2.0)).abs() < 1e-12);
        let psum: f64 = probs.data().iter().sum();
        assert!((psum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_pool_tracks_argmax() {
        let x = t::<f64>(&[3, 2], &[1., 9., 5., 2., 3., 4.]);
        let (y, arg) = temporal_max_pool(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 9.0]);
        assert_eq!(arg, vec![1, 0]);
        let g = t::<f64>(&[2], &[1.0, 2.0]);
        let dx = temporal_max_pool_backward(&g, &arg, 3);
        assert_eq!(dx.data(), &[0., 2., 1., 0., 0., 0.]);
    }
}
