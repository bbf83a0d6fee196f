//! A small dense-tensor engine with reverse-mode differentiation, plus the
//! Adam optimizer and the warm-up/decay learning-rate schedule.

mod ops;
mod optim;
mod tensor;

pub use ops::sigmoid;
pub use optim::{adam_step, lr_schedule, AdamState};
pub use tensor::Tensor;

/// Central finite-difference gradient checking, shared by unit and
/// integration tests.
pub mod gradcheck {
    use super::Tensor;
    use crate::error::Result;

    /// `|a − n| / max(|a|, |n|, floor)`.
    pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
    }

    /// Numerical derivative of `f` with respect to entry `index` of `param`
    /// by central differences with step `h`. The value is restored afterwards.
    pub fn numeric_partial(
        param: &Tensor<f64>,
        index: usize,
        h: f64,
        f: &mut dyn FnMut() -> Result<f64>,
    ) -> Result<f64> {
        let orig = param.data()[index];
        param.update_data(|d| d[index] = orig + h);
        let plus = f()?;
        param.update_data(|d| d[index] = orig - h);
        let minus = f()?;
        param.update_data(|d| d[index] = orig);
        Ok((plus - minus) / (2.0 * h))
    }

    /// Largest relative error between the analytic gradient of `loss` and
    /// central differences, over the given `(param, entry)` coordinates.
    pub fn max_relative_error(
        params: &[Tensor<f64>],
        coords: &[(usize, usize)],
        h: f64,
        floor: f64,
        loss: &mut dyn FnMut() -> Result<Tensor<f64>>,
    ) -> Result<f64> {
        for p in params {
            p.zero_grad();
        }
        loss()?.backward()?;
        let analytic: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        for p in params {
            p.zero_grad();
        }
        let mut worst: f64 = 0.0;
        for &(pi, idx) in coords {
            let num = numeric_partial(&params[pi], idx, h, &mut || Ok(loss()?.item()))?;
            worst = worst.max(relative_error(analytic[pi][idx], num, floor));
        }
        Ok(worst)
    }

    /// Every coordinate of every parameter.
    pub fn all_coords(params: &[Tensor<f64>]) -> Vec<(usize, usize)> {
        params
            .iter()
            .enumerate()
            .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{all_coords, max_relative_error};
    use super::*;
    use crate::error::Result;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::param((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    /// Projects a tensor to a scalar with fixed random weights so every
    /// output entry contributes a distinct gradient.
    fn probe(t: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Tensor::new(w, t.shape())?;
        Ok(t.mul(&w)?.sum())
    }

    fn check(params: &[Tensor<f64>], mut f: impl FnMut(&[Tensor<f64>]) -> Result<Tensor<f64>>) {
        let ps = params.to_vec();
        let coords = all_coords(params);
        let err = max_relative_error(params, &coords, 1e-5, 1e-7, &mut || f(&ps)).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn gradcheck_matmul_add_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_param(&mut rng, &[3, 4]);
        let b = rand_param(&mut rng, &[4, 2]);
        let bias = rand_param(&mut rng, &[1, 2]);
        check(&[a, b, bias], |p| {
            let y = p[0].matmul(&p[1])?.add(&p[2])?.transpose()?;
            probe(&y, 9)
        });
    }

    #[test]
    fn gradcheck_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_param(&mut rng, &[2, 3]);
        let b = rand_param(&mut rng, &[2, 3]);
        check(&[a, b], |p| {
            let y = p[0].mul(&p[1])?.sub(&p[1].sigmoid())?.add(&p[0].relu().scale(1.5))?;
            let y = y.add(&p[1].tanh())?.add(&p[0].exp().add_scalar(1.0).log())?;
            probe(&y, 3)
        });
    }

    #[test]
    fn gradcheck_softmaxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_param(&mut rng, &[3, 5]);
        check(&[a.clone()], |p| probe(&p[0].row_softmax()?, 4));
        check(&[a], |p| probe(&p[0].log_softmax()?, 5));
    }

    #[test]
    fn gradcheck_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_param(&mut rng, &[3, 6]);
        let g = rand_param(&mut rng, &[1, 6]);
        let b = rand_param(&mut rng, &[1, 6]);
        check(&[x, g, b], |p| probe(&p[0].layer_norm(&p[1], &p[2], 1e-5)?, 6));
    }

    #[test]
    fn gradcheck_structural() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_param(&mut rng, &[4, 3]);
        let b = rand_param(&mut rng, &[2, 3]);
        let c = rand_param(&mut rng, &[4, 2]);
        check(&[a, b, c], |p| {
            let rows = Tensor::concat(&[p[0].clone(), p[1].clone()], 0)?;
            let cols = Tensor::concat(&[p[0].clone(), p[2].clone()], 1)?;
            let g = rows.gather_rows(&[5, 0, 0, 3])?;
            let s = cols.slice_cols(1, 4)?.slice_rows(1, 3)?;
            let o = p[0].overwrite_rows(&[2, 0], &p[1])?;
            Ok(probe(&g, 1)?
                .add(&probe(&s, 2)?)?
                .add(&probe(&o, 3)?)?
                .add(&rows.reshape(&[3, 6])?.mean())?)
        });
    }

    #[test]
    fn gradcheck_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_param(&mut rng, &[3, 4]);
        let v = rand_param(&mut rng, &[1, 5]);
        let w = rand_param(&mut rng, &[1, 5]);
        check(&[a, v, w], |p| {
            let ce = p[0].softmax_cross_entropy(&[1, 3, 0])?;
            let bce = p[1].bce_with_logits(&[1.0, 0.0, 1.0, 0.0, 0.5])?;
            let cos = p[1].cosine_similarity(&p[2])?;
            let prob = cos.add_scalar(1.0).scale(0.5);
            let bce2 = prob.binary_cross_entropy(&[1.0])?;
            Ok(ce.add(&bce)?.add(&cos)?.add(&bce2)?)
        });
    }

    #[test]
    fn gradcheck_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::new((0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[3, 4]).unwrap();
        let w1 = rand_param(&mut rng, &[4, 5]);
        let b1 = rand_param(&mut rng, &[1, 5]);
        let w2 = rand_param(&mut rng, &[5, 5]);
        let w3 = rand_param(&mut rng, &[5, 2]);
        check(&[w1, b1, w2, w3], |p| {
            let h = x.matmul(&p[0])?.add(&p[1])?.relu();
            let h = h.matmul(&p[2])?.sigmoid();
            h.matmul(&p[3])?.softmax_cross_entropy(&[0, 1, 1])
        });
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let z = Tensor::<f64>::zeros(&[1, 4]).row_softmax().unwrap();
        assert!(z.to_vec().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn cosine_of_self_is_one() {
        let x = Tensor::<f64>::from_f64(&[0.3, -2.0, 5.0], &[1, 3]).unwrap();
        assert!((x.cosine_similarity(&x).unwrap().item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sum_and_product_gradients() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let y = Tensor::<f64>::param(vec![4.0, 5.0, 6.0], &[3]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
        x.zero_grad();
        x.mul(&y).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), y.to_vec());
        // accumulation is additive until cleared
        x.mul(&y).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0, 10.0, 12.0]);
    }

    #[test]
    fn non_scalar_backward_fails() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(x.scale(2.0).backward().is_err());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        assert!(a.mul(&Tensor::zeros(&[3, 2])).is_err());
        assert!(a.add(&Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn float32_engine_runs() {
        let x = Tensor::<f32>::param(vec![1.0, -1.0], &[1, 2]).unwrap();
        let w = Tensor::<f32>::param(vec![0.5, 0.25, -0.5, 1.0], &[2, 2]).unwrap();
        x.matmul(&w).unwrap().row_softmax().unwrap().sum().backward().unwrap();
        assert_eq!(w.grad().unwrap().len(), 4);
    }
}
