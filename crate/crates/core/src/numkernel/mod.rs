//! Dense f64 tensors, a reverse-mode tape, seeded randomness and a
//! finite-difference gradient checker.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, check_gradients_detailed, GradCheckReport};
pub use rng::{gaussian_init, Rng, RNG_ALGORITHM};
pub use tape::{sigmoid, softplus, ParamId, ParamStore, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

/// Cosine similarity with a degeneracy flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// The denominator `||u|| ||v||` fell below [`NORM_EPS`] and was clamped.
    pub degenerate: bool,
}

/// `u.v / (||u|| ||v||)` with the denominator clamped to [`NORM_EPS`].
pub fn cosine_sim(u: &[f64], v: &[f64]) -> crate::Result<Cosine> {
    if u.len() != v.len() {
        return Err(crate::Error::dim("cosine_sim", &[u.len()], &[v.len()]));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = nu * nv;
    let degenerate = denom < NORM_EPS;
    Ok(Cosine {
        value: dot / denom.max(NORM_EPS),
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[2.0, 0.0], &[1.0, 0.0]).unwrap().value, 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        let c = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap().value;
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_is_flagged_not_fatal() {
        let c = cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.value, 0.0);
    }
}
