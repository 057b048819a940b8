//! Valid (unpadded), stride-1 2-D cross-correlation.

use crate::par::*;
use crate::{Error, Result, Tensor};

/// Output spatial size of a valid convolution, or `None` if the kernel does
/// not fit.
pub fn conv_output_hw(h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
    if kh == 0 || kw == 0 || kh > h || kw > w {
        None
    } else {
        Some((h - kh + 1, w - kw + 1))
    }
}

struct Dims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn dims(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Dims> {
    let (is, ks) = (input.shape(), kernels.shape());
    if is.len() != 4 || ks.len() != 4 || is[1] != ks[1] {
        return Err(Error::dim(format!(
            "conv2d: input {is:?} (B×Cin×H×W) incompatible with kernels {ks:?} (Cout×Cin×kh×kw)"
        )));
    }
    let (ho, wo) = conv_output_hw(is[2], is[3], ks[2], ks[3]).ok_or_else(|| {
        Error::dim(format!(
            "conv2d: kernels {ks:?} larger than input {is:?} spatial extent"
        ))
    })?;
    if let Some(b) = bias {
        b.expect_shape(&[ks[0]], "conv2d bias")?;
    }
    Ok(Dims {
        b: is[0],
        cin: is[1],
        h: is[2],
        w: is[3],
        cout: ks[0],
        kh: ks[2],
        kw: ks[3],
        ho,
        wo,
    })
}

/// Single-trial convolution: `[Cin,H,W]` with `[Cout,Cin,kh,kw]` kernels.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.ndim() != 3 {
        return Err(Error::dim(format!(
            "conv2d: expected Cin×H×W input, got {:?}; kernels {:?}",
            input.shape(),
            kernels.shape()
        )));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let out = conv2d_forward_batch(&input.clone().reshape(&shape)?, kernels, bias)?;
    let s = out.shape()[1..].to_vec();
    out.reshape(&s)
}

/// Batched convolution: `[B,Cin,H,W]` → `[B,Cout,Ho,Wo]`.
pub fn conv2d_forward_batch(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = dims(input, kernels, Some(bias))?;
    let plane = d.ho * d.wo;
    let mut out = vec![0.0; d.b * d.cout * plane];
    let x = input.data();
    let k = kernels.data();
    let bias = bias.data();

    out.par_chunks_mut(plane).enumerate().for_each(|(idx, o)| {
        let (b, co) = (idx / d.cout, idx % d.cout);
        o.fill(bias[co]);
        for ci in 0..d.cin {
            let xin = &x[(b * d.cin + ci) * d.h * d.w..][..d.h * d.w];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wv = k[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..d.ho {
                        let src = &xin[(y + ky) * d.w + kx..][..d.wo];
                        let dst = &mut o[y * d.wo..][..d.wo];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv += wv * sv;
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![d.b, d.cout, d.ho, d.wo], out)
}

/// Gradients of the batched convolution: `(d_input, d_kernels, d_bias)`.
pub fn conv2d_backward_batch(
    input: &Tensor,
    kernels: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = dims(input, kernels, None)?;
    upstream.expect_shape(&[d.b, d.cout, d.ho, d.wo], "conv2d upstream")?;
    let x = input.data();
    let k = kernels.data();
    let g = upstream.data();
    let plane = d.ho * d.wo;

    let mut d_in = vec![0.0; d.b * d.cin * d.h * d.w];
    d_in.par_chunks_mut(d.h * d.w)
        .enumerate()
        .for_each(|(idx, di)| {
            let (b, ci) = (idx / d.cin, idx % d.cin);
            for co in 0..d.cout {
                let gp = &g[(b * d.cout + co) * plane..][..plane];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = k[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..d.ho {
                            let src = &gp[y * d.wo..][..d.wo];
                            let dst = &mut di[(y + ky) * d.w + kx..][..d.wo];
                            for (dv, sv) in dst.iter_mut().zip(src) {
                                *dv += wv * sv;
                            }
                        }
                    }
                }
            }
        });

    let ksize = d.cin * d.kh * d.kw;
    let mut d_k = vec![0.0; d.cout * ksize];
    d_k.par_chunks_mut(ksize).enumerate().for_each(|(co, dk)| {
        for b in 0..d.b {
            let gp = &g[(b * d.cout + co) * plane..][..plane];
            for ci in 0..d.cin {
                let xin = &x[(b * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let mut acc = 0.0;
                        for y in 0..d.ho {
                            let xs = &xin[(y + ky) * d.w + kx..][..d.wo];
                            let gs = &gp[y * d.wo..][..d.wo];
                            acc += xs.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                        }
                        dk[(ci * d.kh + ky) * d.kw + kx] += acc;
                    }
                }
            }
        }
    });

    let d_b: Vec<f64> = (0..d.cout)
        .into_par_iter()
        .map(|co| {
            (0..d.b)
                .map(|b| g[(b * d.cout + co) * plane..][..plane].iter().sum::<f64>())
                .sum()
        })
        .collect();

    Ok((
        Tensor::new(input.shape().to_vec(), d_in)?,
        Tensor::new(kernels.shape().to_vec(), d_k)?,
        Tensor::new(vec![d.cout], d_b)?,
    ))
}
