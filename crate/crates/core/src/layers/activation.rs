use crate::{Error, Result, Tensor};

pub const ELU_ALPHA: f64 = 1.0;

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        ELU_ALPHA * x.exp_m1()
    }
}

pub fn elu_forward(input: &Tensor) -> Tensor {
    input.map(elu)
}

pub fn elu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    upstream.expect_shape(input.shape(), "elu upstream")?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { g * ELU_ALPHA * x.exp() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Row-wise softmax over the last axis.
pub fn softmax_forward(input: &Tensor) -> Result<Tensor> {
    let k = *input
        .shape()
        .last()
        .ok_or_else(|| Error::dim("softmax of a scalar"))?;
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Softmax vector-Jacobian product given the forward output.
pub fn softmax_backward(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    upstream.expect_shape(output.shape(), "softmax upstream")?;
    let k = *output.shape().last().unwrap();
    let mut out = vec![0.0; output.len()];
    for ((o, y), g) in out
        .chunks_mut(k)
        .zip(output.data().chunks(k))
        .zip(upstream.data().chunks(k))
    {
        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((ov, yv), gv) in o.iter_mut().zip(y).zip(g) {
            *ov = yv * (gv - dot);
        }
    }
    Tensor::new(output.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax_forward(&Tensor::zeros(&[1, 6])).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn elu_values() {
        assert_eq!(elu(2.0), 2.0);
        assert!((elu(-50.0) + 1.0).abs() < 1e-15);
        assert!(elu(-1e-3) > -1.0);
    }

    #[test]
    fn elu_backward_positive_passthrough() {
        let x = Tensor::new(vec![3], vec![0.5, 1.0, 7.0]).unwrap();
        let g = Tensor::new(vec![3], vec![0.1, -2.0, 3.0]).unwrap();
        assert_eq!(elu_backward(&x, &g).unwrap(), g);
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let x = Tensor::new(vec![1, 3], vec![1000.0, -1000.0, 0.0]).unwrap();
        let p = softmax_forward(&x).unwrap();
        p.check_finite("softmax").unwrap();
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
