//! Dense differentiable numerics: tape, parameters, layers, optimizer,
//! seeded random streams and gradient verification.

pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod special;
pub mod tape;

pub use gradcheck::{check_function, finite_difference_check, GradCheck};
pub use layers::{
    Dropout, FeedForward, LayerNorm, Linear, Lstm, Mode, MultiHeadAttention, TransformerBlock,
    TransformerStack,
};
pub use optim::{Adam, AdamConfig};
pub use params::{GradBuffer, ParamId, ParamStore, Parameter};
pub use rng::{Purpose, RngStream};
pub use tape::{CustomBackward, Grads, Mat, Tape, Var};

/// Runs `build` on a fresh tape, backpropagates the scalar it returns and
/// collects the parameter gradients.
pub fn loss_and_grads<F>(store: &ParamStore, build: F) -> (f64, GradBuffer)
where
    F: FnOnce(&mut Tape<'_>) -> Var,
{
    let mut tape = Tape::new(store);
    let loss = build(&mut tape);
    let grads = tape.backward_scalar(loss);
    let mut buf = store.grad_buffer();
    tape.accumulate_param_grads(&grads, &mut buf);
    (tape.scalar(loss), buf)
}

/// Loss value only, for the finite-difference side of a check.
pub fn loss_only<F>(store: &ParamStore, build: F) -> f64
where
    F: FnOnce(&mut Tape<'_>) -> Var,
{
    let mut tape = Tape::new(store);
    let loss = build(&mut tape);
    tape.scalar(loss)
}

/// Weighted scalar readout `Σ w ⊙ x` with fixed pseudo-random weights, used
/// to turn a matrix output into a loss for gradient checks.
pub fn random_readout(tape: &mut Tape<'_>, x: Var, seed: u64) -> Var {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = Mat::from_shape_fn(tape.shape(x), |_| rng.random_range(-1.0..1.0));
    let y = tape.mul_const(x, w);
    tape.sum(y)
}
