//! Reverse-mode differentiation on the tape, including recording off and
//! stop-gradient.

use sdo_lab::{DenseArray, Tape};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut tape = Tape::new();
    let w = tape.variable(DenseArray::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5])?);
    let x = tape.variable(DenseArray::vector(vec![0.3, -0.7]));
    let h = tape.affine(w, x, None)?;
    let y = tape.tanh(h)?;
    let loss = tape.squared_norm(y)?;
    let grads = tape.backward(loss)?;
    println!("loss       {:?}", tape.value(loss).item());
    println!("dloss/dx   {:?}", grads.wrt(x).data());
    println!("dloss/dW   {:?}", grads.wrt(w).data());
    println!("tape nodes {}", tape.node_count());

    // the same computation with the middle value treated as a constant
    let mut tape = Tape::new();
    let x = tape.variable(DenseArray::vector(vec![0.3, -0.7]));
    let y = tape.tanh(x)?;
    let frozen = tape.stop_gradient(y);
    let z = tape.mul(frozen, x)?;
    let s = tape.sum(z)?;
    println!("d sum(sg(tanh x) * x)/dx = {:?}", tape.backward(s)?.wrt(x).data());

    // with recording off nothing is added to the tape
    let before = tape.node_count();
    tape.with_recording(false, |t| t.tanh(x))?;
    println!("nodes added while not recording: {}", tape.node_count() - before);
    Ok(())
}
