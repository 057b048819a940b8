//! Affine map over the last axis: `y[.., o] = Σ_i W[o, i] x[.., i] + b[o]`.

use crate::par::*;
use crate::{Error, Result, Tensor};

fn rows_of(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let ws = weight.shape();
    let last = *input.shape().last().unwrap();
    if ws.len() != 2 || ws[1] != last {
        return Err(Error::dim(format!(
            "linear: input {:?} incompatible with weight {ws:?} (out×in)",
            input.shape()
        )));
    }
    Ok((input.len() / last, ws[1], ws[0]))
}

pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, n_in, n_out) = rows_of(input, weight)?;
    bias.expect_shape(&[n_out], "linear bias")?;
    let x = input.data();
    let w = weight.data();
    let b = bias.data();
    let mut out = vec![0.0; rows * n_out];
    out.par_chunks_mut(n_out).enumerate().for_each(|(r, y)| {
        let xr = &x[r * n_in..][..n_in];
        for (o, yv) in y.iter_mut().enumerate() {
            *yv = b[o]
                + w[o * n_in..][..n_in]
                    .iter()
                    .zip(xr)
                    .map(|(a, c)| a * c)
                    .sum::<f64>();
        }
    });
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = n_out;
    Tensor::new(shape, out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, n_in, n_out) = rows_of(input, weight)?;
    let mut expected = input.shape().to_vec();
    *expected.last_mut().unwrap() = n_out;
    upstream.expect_shape(&expected, "linear upstream")?;
    let x = input.data();
    let w = weight.data();
    let g = upstream.data();

    let mut d_in = vec![0.0; rows * n_in];
    d_in.par_chunks_mut(n_in).enumerate().for_each(|(r, dx)| {
        let gr = &g[r * n_out..][..n_out];
        for (o, &gv) in gr.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            for (d, wv) in dx.iter_mut().zip(&w[o * n_in..][..n_in]) {
                *d += gv * wv;
            }
        }
    });

    let mut d_w = vec![0.0; n_out * n_in];
    d_w.par_chunks_mut(n_in).enumerate().for_each(|(o, dw)| {
        for r in 0..rows {
            let gv = g[r * n_out + o];
            if gv == 0.0 {
                continue;
            }
            for (d, xv) in dw.iter_mut().zip(&x[r * n_in..][..n_in]) {
                *d += gv * xv;
            }
        }
    });
    let d_b: Vec<f64> = (0..n_out)
        .map(|o| (0..rows).map(|r| g[r * n_out + o]).sum())
        .collect();

    Ok((
        Tensor::new(input.shape().to_vec(), d_in)?,
        Tensor::new(weight.shape().to_vec(), d_w)?,
        Tensor::new(vec![n_out], d_b)?,
    ))
}
