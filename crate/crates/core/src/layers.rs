use rand::Rng;

use crate::autodiff::{Tape, Value, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerOptions {
    /// ReLU after every layer but the last.
    pub hidden_relu: bool,
    /// Dropout applied to the input of every layer.
    pub dropout: f64,
}

impl LayerOptions {
    pub const LINEAR: LayerOptions = LayerOptions {
        hidden_relu: false,
        dropout: 0.0,
    };
}

/// Stack of graph convolutions `H ← A · (drop(H) · W)`. The input may be a
/// sparse feature matrix; with no weights the input is returned unchanged.
pub fn gcn_layers<R: Rng + ?Sized>(
    tape: &mut Tape,
    adjacency: Var,
    input: Var,
    weights: &[Var],
    opts: LayerOptions,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let mut h = input;
    for (l, &w) in weights.iter().enumerate() {
        let dropped = tape.dropout(h, opts.dropout, training, rng)?;
        let transformed = match tape.value(dropped) {
            Value::Sparse(_) => tape.spmm(dropped, w)?,
            Value::Dense(_) => tape.matmul(dropped, w)?,
        };
        h = tape.spmm(adjacency, transformed)?;
        if opts.hidden_relu && l + 1 < weights.len() {
            h = tape.relu(h)?;
        }
    }
    if let Value::Sparse(_) = tape.value(h) {
        return Err(Error::invalid("a zero-layer stack needs a dense input"));
    }
    Ok(h)
}
