use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_eps(eps: f32) -> Result<()> {
    if eps >= 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("epsilon must be finite and non-negative, got {eps}")))
    }
}

/// Clips into `[0, 1]` and then into the `eps`-ball around `origin`.
fn project(v: f32, origin: f32, eps: f32) -> f32 {
    v.clamp(0.0, 1.0).clamp(origin - eps, origin + eps)
}

fn sign(g: f32) -> f32 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Fast gradient sign step of size `eps` away from `label`.
pub fn fgsm(engine: &Engine, x: &Tensor, label: usize, eps: f32) -> Result<Tensor> {
    check_eps(eps)?;
    let grad = engine.input_gradient(x, label)?;
    let data = x
        .data()
        .iter()
        .zip(&grad)
        .map(|(&v, &g)| project(v + eps * sign(g), v, eps))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Projected gradient descent with a uniform random start in the ball.
pub fn pgd(engine: &Engine, x: &Tensor, label: usize, eps: f32, alpha: f32, iters: usize, seed: u64) -> Result<Tensor> {
    check_eps(eps)?;
    check_eps(alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = x.data();
    let mut cur: Vec<f32> = origin
        .iter()
        .map(|&v| {
            let r = if eps > 0.0 { rng.gen_range(-eps..=eps) } else { 0.0 };
            project(v + r, v, eps)
        })
        .collect();
    for _ in 0..iters {
        let t = Tensor::new(x.shape().to_vec(), cur.clone())?;
        let grad = engine.input_gradient(&t, label)?;
        for ((c, &o), &g) in cur.iter_mut().zip(origin).zip(&grad) {
            *c = project(*c + alpha * sign(g), o, eps);
        }
    }
    Tensor::new(x.shape().to_vec(), cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::toy_problem;

    fn linf(a: &Tensor, b: &Tensor) -> f32 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let (m, d) = toy_problem(2, 30);
        let e = Engine::new(&m).unwrap();
        for s in &d.samples[..5] {
            assert!(fgsm(&e, &s.input, s.label, 0.0).unwrap().bit_eq(&s.input));
            assert!(pgd(&e, &s.input, s.label, 0.0, 0.01, 5, 1).unwrap().bit_eq(&s.input));
        }
    }

    #[test]
    fn outputs_stay_in_ball_and_range() {
        let (m, d) = toy_problem(3, 30);
        let e = Engine::new(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in &d.samples {
            let eps = rng.gen_range(0.0..0.5);
            for adv in [
                fgsm(&e, &s.input, s.label, eps).unwrap(),
                pgd(&e, &s.input, s.label, eps, eps / 4.0, 10, rng.gen()).unwrap(),
            ] {
                assert!(linf(&adv, &s.input) <= eps + 1e-6);
                assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn large_fgsm_step_raises_the_loss() {
        let (m, d) = toy_problem(4, 30);
        let e = Engine::new(&m).unwrap();
        let loss = |x: &Tensor, l| crate::engine::softmax_cross_entropy(&e.logits(x).unwrap(), l).0;
        let s = &d.samples[0];
        let adv = fgsm(&e, &s.input, s.label, 0.05).unwrap();
        assert!(loss(&adv, s.label) > loss(&s.input, s.label));
    }

    #[test]
    fn pgd_is_seed_deterministic() {
        let (m, d) = toy_problem(5, 30);
        let e = Engine::new(&m).unwrap();
        let x = &d.samples[1].input;
        let a = pgd(&e, x, 1, 0.1, 0.02, 5, 7).unwrap();
        assert!(a.bit_eq(&pgd(&e, x, 1, 0.1, 0.02, 5, 7).unwrap()));
    }

    #[test]
    fn negative_epsilon_is_rejected() {
        let (m, d) = toy_problem(6, 3);
        let e = Engine::new(&m).unwrap();
        assert!(fgsm(&e, &d.samples[0].input, 0, -0.1).is_err());
        assert!(pgd(&e, &d.samples[0].input, 0, 0.1, f32::NAN, 1, 0).is_err());
    }
}
