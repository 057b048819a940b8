//! Average pooling with kernel `[1, w]` and stride `[1, w]` along the last
//! axis. Trailing samples that do not fill a window are dropped.

use crate::{Error, Result, Tensor};

pub fn pooled_len(len: usize, width: usize) -> usize {
    len / width
}

pub fn avgpool_forward(input: &Tensor, width: usize) -> Result<Tensor> {
    let last = *input.shape().last().unwrap();
    let out_len = pooled_len(last, width);
    if width == 0 || out_len == 0 {
        return Err(Error::dim(format!(
            "avgpool width {width} does not fit input {:?}",
            input.shape()
        )));
    }
    let inv = 1.0 / width as f64;
    let mut out = Vec::with_capacity(input.len() / last * out_len);
    for row in input.data().chunks(last) {
        for j in 0..out_len {
            out.push(row[j * width..(j + 1) * width].iter().sum::<f64>() * inv);
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = out_len;
    Tensor::new(shape, out)
}

pub fn avgpool_backward(input_shape: &[usize], width: usize, upstream: &Tensor) -> Result<Tensor> {
    let last = *input_shape.last().unwrap();
    let out_len = pooled_len(last, width);
    let mut expected = input_shape.to_vec();
    *expected.last_mut().unwrap() = out_len;
    upstream.expect_shape(&expected, "avgpool upstream")?;
    let inv = 1.0 / width as f64;
    let mut d = vec![0.0; input_shape.iter().product()];
    for (drow, grow) in d.chunks_mut(last).zip(upstream.data().chunks(out_len)) {
        for (j, &g) in grow.iter().enumerate() {
            for v in &mut drow[j * width..(j + 1) * width] {
                *v = g * inv;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drops_trailing_sample() {
        let x = Tensor::new(vec![5], vec![1., 2., 3., 4., 5.]).unwrap();
        let y = avgpool_forward(&x, 2).unwrap();
        assert_eq!(y.data(), &[1.5, 3.5]);
        let d = avgpool_backward(&[5], 2, &Tensor::new(vec![2], vec![2., 4.]).unwrap()).unwrap();
        assert_eq!(d.data(), &[1., 1., 2., 2., 0.]);
    }
}
