//! Rectified-flow objective and deterministic Euler sampler.
//!
//! Training regresses the constant velocity `v* = Z_0 - Z_1` along the
//! straight path `Z_t = t·Z_0 + (1-t)·Z_1`; sampling integrates the learned
//! field from noise at t = 0 to data at t = 1 on a uniform step grid.

use crate::rng::normal;
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::{Result, Tensor, TensorError};
use rand_chacha::ChaCha8Rng;

/// One training example for the flow objective: clean tokens, fresh noise,
/// a timestep, and the conditioning streams as raw patch tokens.
pub struct FlowBatch<T: Scalar> {
    pub z0: Tensor<T>,
    pub z1: Tensor<T>,
    pub t: f64,
    pub text_ids: Vec<usize>,
    pub image_pos: Vec<(i32, i32)>,
    pub style_tokens: Tensor<T>,
    pub style_pos: Vec<(i32, i32)>,
    pub ref_tokens: Tensor<T>,
    pub ref_pos: Vec<(i32, i32)>,
}

/// `Z_t = t·Z_0 + (1-t)·Z_1`; exact at both endpoints.
pub fn interpolate<T: Scalar>(z0: &Tensor<T>, z1: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if z0.shape() != z1.shape() {
        return Err(TensorError::DimMismatch {
            op: "interpolate",
            detail: format!("{:?} vs {:?}", z0.shape(), z1.shape()),
        });
    }
    let tt = T::from_f64(t);
    let one_minus = T::from_f64(1.0 - t);
    let data = z0
        .data()
        .iter()
        .zip(z1.data())
        .map(|(&a, &b)| tt * a + one_minus * b)
        .collect();
    Tensor::new(z0.shape().to_vec(), data)
}

/// Target velocity `v* = Z_0 - Z_1`.
pub fn flow_target<T: Scalar>(z0: &Tensor<T>, z1: &Tensor<T>) -> Result<Tensor<T>> {
    if z0.shape() != z1.shape() {
        return Err(TensorError::DimMismatch {
            op: "flow_target",
            detail: format!("{:?} vs {:?}", z0.shape(), z1.shape()),
        });
    }
    let data = z0
        .data()
        .iter()
        .zip(z1.data())
        .map(|(&a, &b)| a - b)
        .collect();
    Tensor::new(z0.shape().to_vec(), data)
}

/// L2 flow objective on the tape: mean squared error between the predicted
/// and target velocity over all elements.
pub fn flow_loss<T: Scalar>(
    tape: &mut Tape<T>,
    v_pred: ValueId,
    v_star: &Tensor<T>,
) -> Result<ValueId> {
    tape.mse(v_pred, v_star)
}

/// Plain mean-squared-error between two tensors, for gradient-free
/// evaluation of held-out loss.
pub fn mse_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::DimMismatch {
            op: "mse_value",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let mut acc = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64() - y.to_f64();
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

/// Standard-normal tensor from a seeded generator.
pub fn sample_noise<T: Scalar>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_rng(shape, || normal(rng, 1.0))
}

/// Euler integration of a velocity field from noise `z1` over `steps`
/// uniform steps: `Z += (1/steps) · v(Z, k/steps)`.
///
/// On a field that is constant along the path the integral is exact up to
/// accumulation rounding.
pub fn euler_sample<T: Scalar, F>(mut field: F, z1: Tensor<T>, steps: usize) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    assert!(steps >= 1, "euler_sample needs at least one step");
    let h = T::from_f64(1.0 / steps as f64);
    let mut z = z1;
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = field(&z, t)?;
        if v.shape() != z.shape() {
            return Err(TensorError::DimMismatch {
                op: "euler_sample",
                detail: format!("field returned {:?} for state {:?}", v.shape(), z.shape()),
            });
        }
        let data = z
            .data()
            .iter()
            .zip(v.data())
            .map(|(&zv, &vv)| zv + h * vv)
            .collect();
        z = Tensor::new(z.shape().to_vec(), data)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_grad, rel_err, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_rng(shape.to_vec(), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn interpolate_midpoint_and_endpoints() {
        let z0 = Tensor::new(vec![1], vec![2.0]).unwrap();
        let z1 = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert_eq!(interpolate(&z0, &z1, 0.5).unwrap().data(), &[1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = rt(&mut rng, &[3, 4]);
        let z1 = rt(&mut rng, &[3, 4]);
        let at_one = interpolate(&z0, &z1, 1.0).unwrap();
        for (a, b) in at_one.data().iter().zip(z0.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let at_zero = interpolate(&z0, &z1, 0.0).unwrap();
        for (a, b) in at_zero.data().iter().zip(z1.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(interpolate(&z0, &rt(&mut rng, &[4, 3]), 0.5).is_err());
    }

    #[test]
    fn target_is_elementwise_difference() {
        let z0 = Tensor::new(vec![1], vec![3.0]).unwrap();
        let z1 = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert_eq!(flow_target(&z0, &z1).unwrap().data(), &[2.0]);
        let z = Tensor::<f64>::full(vec![2, 2], 0.7);
        assert!(flow_target(&z, &z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn path_plus_remaining_velocity_recovers_data() {
        // interpolate(Z0, Z1, t) + (1-t)·v* = Z0 for all t.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = rt(&mut rng, &[4, 5]);
        let z1 = rt(&mut rng, &[4, 5]);
        let v = flow_target(&z0, &z1).unwrap();
        for t in [0.0, 0.13, 0.5, 0.77, 1.0] {
            let zt = interpolate(&z0, &z1, t).unwrap();
            for ((zt, v), z0) in zt.data().iter().zip(v.data()).zip(z0.data()) {
                let recovered = zt + (1.0 - t) * v;
                assert!((recovered - z0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_zero_iff_exact_and_shifted_by_one_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = rt(&mut rng, &[2, 6]);
        let mut tape = Tape::new();
        let p = tape.constant(&v);
        let l = flow_loss(&mut tape, p, &v).unwrap();
        assert_eq!(tape.value(l), &[0.0]);

        let shifted = v.map(|x| x + 1.0);
        let p = tape.constant(&shifted);
        let l = flow_loss(&mut tape, p, &v).unwrap();
        assert!((tape.value(l)[0] - 1.0).abs() < 1e-12);

        // Non-negativity on random pairs.
        for _ in 0..10 {
            let a = rt(&mut rng, &[5]);
            let b = rt(&mut rng, &[5]);
            let mut tape = Tape::new();
            let p = tape.constant(&a);
            let l = flow_loss(&mut tape, p, &b).unwrap();
            assert!(tape.value(l)[0] >= 0.0);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p0 = rt(&mut rng, &[3, 4]);
        let vstar = rt(&mut rng, &[3, 4]);
        let mut tape = Tape::new();
        let p = tape.leaf(&p0, true);
        let l = flow_loss(&mut tape, p, &vstar).unwrap();
        tape.backward(l).unwrap();
        let fd = fd_grad(&[p0], 0, FD_STEP, &mut |xs| {
            let mut t = Tape::new();
            let p = t.constant(&xs[0]);
            let l = flow_loss(&mut t, p, &vstar).unwrap();
            t.value(l)[0]
        });
        assert!(rel_err(tape.grad(p).unwrap(), fd.data()) < 1e-7);
    }

    #[test]
    fn euler_with_cheating_constant_field_recovers_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = rt(&mut rng, &[4, 6]);
        let z1 = sample_noise::<f64>(vec![4, 6], &mut rng);
        let v = flow_target(&z0, &z1).unwrap();
        for steps in [1, 2, 3, 7, 20, 64] {
            let out = euler_sample(|_, _| Ok(v.clone()), z1.clone(), steps).unwrap();
            for (o, want) in out.data().iter().zip(z0.data()) {
                assert!(
                    (o - want).abs() < 1e-12,
                    "steps {steps}: {o} vs {want} (only accumulation rounding allowed)"
                );
            }
        }
    }

    #[test]
    fn euler_single_step_unrolls() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z1 = rt(&mut rng, &[2, 3]);
        let v = rt(&mut rng, &[2, 3]);
        let out = euler_sample(|_, _| Ok(v.clone()), z1.clone(), 1).unwrap();
        for ((o, z), vv) in out.data().iter().zip(z1.data()).zip(v.data()) {
            assert_eq!(*o, z + vv);
        }
    }

    #[test]
    fn sampler_is_deterministic_under_fixed_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let z1 = sample_noise::<f32>(vec![3, 3], &mut rng);
            // A state-dependent field exercises the whole loop.
            euler_sample(|z, t| Ok(z.map(|v| v * 0.1 + t as f32)), z1, 9).unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
