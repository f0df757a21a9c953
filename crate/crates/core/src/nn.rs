//! Parameter initialization and the few composite layers the model uses.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Bound, ParamStore, Tape, Tensor, Var};

/// Glorot-uniform weight (`fan_in x fan_out`) and zero bias.
pub fn init_linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    store.insert(
        format!("{name}.w"),
        Tensor::uniform(fan_in, fan_out, bound, rng),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(1, fan_out));
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::full(1, dim, 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(1, dim));
}

pub fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub fn layer_norm(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{name}.g"))?;
    let b = p.var(&format!("{name}.b"))?;
    let n = tape.layer_norm_rows(x)?;
    let s = tape.mul_row(n, g)?;
    tape.add_row(s, b)
}

/// `linear -> relu -> linear`.
pub fn mlp2(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{name}.0"), x)?;
    let h = tape.relu(h)?;
    linear(tape, p, &format!("{name}.1"), h)
}

pub fn init_mlp2(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut impl Rng) {
    init_linear(store, &format!("{name}.0"), dims[0], dims[1], rng);
    init_linear(store, &format!("{name}.1"), dims[1], dims[2], rng);
}
