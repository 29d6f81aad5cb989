use super::{join, Mode, Param, ParamSlot, Parameterized};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

/// Affine map `(n, d_in) -> (n, d_out)` with weights `(d_in, d_out)`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weights: Param,
    pub bias: Param,
    cache: Option<LinearCache>,
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    input: Tensor,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    input.expect_rank("fully_connected", 2)?;
    weights.expect_rank("fully_connected", 2)?;
    let (n, d_in) = (input.shape()[0], input.shape()[1]);
    let d_out = weights.shape()[1];
    if weights.shape()[0] != d_in {
        return Err(Error::shape(
            "fully_connected",
            &[d_in, d_out],
            weights.shape(),
        ));
    }
    if bias.shape() != [d_out] {
        return Err(Error::shape("fully_connected", &[d_out], bias.shape()));
    }
    let mut out = Tensor::zeros(&[n, d_out]);
    for row in out.data_mut().chunks_mut(d_out) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        1.0,
        MatRef::row_major(input.data(), n, d_in),
        MatRef::row_major(weights.data(), d_in, d_out),
        1.0,
        out.data_mut(),
    );
    Ok(out)
}

pub fn fully_connected_backward(
    grad_out: &Tensor,
    cache: Option<&LinearCache>,
    weights: &Tensor,
) -> Result<LinearGrads> {
    let cache = cache.ok_or_else(|| Error::MissingCache {
        layer: "fully_connected".into(),
    })?;
    let (n, d_in) = (cache.input.shape()[0], cache.input.shape()[1]);
    let d_out = weights.shape()[1];
    if grad_out.shape() != [n, d_out] {
        return Err(Error::shape(
            "fully_connected_backward",
            &[n, d_out],
            grad_out.shape(),
        ));
    }
    let g = MatRef::row_major(grad_out.data(), n, d_out);
    let mut grad_w = Tensor::zeros(&[d_in, d_out]);
    gemm(
        1.0,
        MatRef::row_major(cache.input.data(), n, d_in).t(),
        g,
        0.0,
        grad_w.data_mut(),
    );
    let mut grad_in = Tensor::zeros(&[n, d_in]);
    gemm(
        1.0,
        g,
        MatRef::row_major(weights.data(), d_in, d_out).t(),
        0.0,
        grad_in.data_mut(),
    );
    let mut grad_b = Tensor::zeros(&[d_out]);
    for row in grad_out.data().chunks(d_out) {
        for (d, s) in grad_b.data_mut().iter_mut().zip(row) {
            *d += s;
        }
    }
    Ok(LinearGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b,
    })
}

impl LinearLayer {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        weights.expect_rank("LinearLayer::new", 2)?;
        if bias.shape() != [weights.shape()[1]] {
            return Err(Error::shape(
                "LinearLayer::new",
                &[weights.shape()[1]],
                bias.shape(),
            ));
        }
        Ok(Self {
            weights: Param::new(weights, true),
            bias: Param::new(bias, false),
            cache: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.value.shape()[1]
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let out = fully_connected(input, &self.weights.value, &self.bias.value)?;
        self.cache = (mode == Mode::Train).then(|| LinearCache {
            input: input.clone(),
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor, accumulate_params: bool) -> Result<Tensor> {
        let grads = fully_connected_backward(grad_out, self.cache.as_ref(), &self.weights.value)?;
        if accumulate_params {
            self.weights.grad.add_assign(&grads.weights)?;
            self.bias.grad.add_assign(&grads.bias)?;
        }
        Ok(grads.input)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl Parameterized for LinearLayer {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamSlot<'a>>) {
        out.push((join(prefix, "weights"), &mut self.weights));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_error, random_tensor};

    #[test]
    fn identity_weights_pass_input_through() {
        let x = random_tensor(&[3, 4], 1, 1.0);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let y = fully_connected(&x, &eye, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let b = Tensor::new(vec![2], vec![0.3, -0.1]).unwrap();
        let y = fully_connected(&Tensor::zeros(&[3, 5]), &random_tensor(&[5, 2], 2, 1.0), &b).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let err = fully_connected(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[2]));
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random_tensor(&[3, 5], 3, 1.0);
        let w = random_tensor(&[5, 4], 4, 1.0);
        let b = random_tensor(&[4], 5, 1.0);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| fully_connected(x, w, b).unwrap().sum_squares();
        let mut l = LinearLayer::new(w.clone(), b.clone()).unwrap();
        let y = l.forward(&x, Mode::Train).unwrap();
        let g = fully_connected_backward(&y.scale(2.0), l.cache.as_ref(), &w).unwrap();
        assert!(max_rel_error(&g.input, &central_diff(&x, 1e-5, |t| loss(t, &w, &b))) < 1e-4);
        assert!(max_rel_error(&g.weights, &central_diff(&w, 1e-5, |t| loss(&x, t, &b))) < 1e-4);
        assert!(max_rel_error(&g.bias, &central_diff(&b, 1e-5, |t| loss(&x, &w, t))) < 1e-4);
    }
}
