//! Layer-by-layer reference forward pass.
//!
//! Written directly from the layer definitions (explicit convolution windows,
//! explicit recurrence) so it shares no tiling logic with the lowerings.

use super::{CompileError, Layer, ModelSpec, WeightsFile};
use crate::blocked::{gemv_ref, Fix8Matrix, Fix8Vector};
use crate::fix8::{ActTable, Fix8, WideAcc};
use crate::hpe::maxpool;

fn table(layer: &Layer) -> ActTable {
    ActTable::build(layer.act().expect("parametrized layer")).expect("built-in kind")
}

/// `act(x . W + b)` via the unblocked GEMV, with the bias as an extra weight row
/// against a constant 1.0 input.
fn affine(x: &[Fix8], w: &Fix8Matrix, b: &[Fix8], act: &ActTable) -> Vec<Fix8> {
    let aug = w.with_row(b).expect("bias matches columns");
    let xs: Vec<Fix8> = x.iter().copied().chain([Fix8::ONE]).collect();
    gemv_ref(&Fix8Vector::new(xs), &aug, act).expect("shapes checked").into_vec()
}

/// Runs the model on one input. The result is the final activation, row-major.
pub fn oracle(spec: &ModelSpec, weights: &WeightsFile, input: &[Fix8]) -> Result<Vec<Fix8>, CompileError> {
    let shapes = spec.shapes()?;
    weights.check(spec)?;
    if input.len() != spec.input_len {
        return Err(CompileError::Spec(format!("input has {} elements, model takes {}", input.len(), spec.input_len)));
    }
    let params = weights.per_layer(spec);
    let mut x = input.to_vec();
    for (i, layer) in spec.layers.iter().enumerate() {
        let (_, (out_rows, out_cols)) = shapes[i];
        x = match *layer {
            Layer::Dense { .. } => {
                let p = params[i].unwrap();
                affine(&x, &p.weights, &p.bias, &table(layer))
            }
            Layer::Conv1d { in_ch, kernel, stride, .. } => {
                let p = params[i].unwrap();
                let act = table(layer);
                let mut y = Vec::with_capacity(out_rows * out_cols);
                for pos in 0..out_rows {
                    for oc in 0..out_cols {
                        let mut s = p.bias[oc].widen();
                        for k in 0..kernel {
                            for ic in 0..in_ch {
                                s = s + x[(pos * stride + k) * in_ch + ic].mul(p.weights.get(k * in_ch + ic, oc));
                            }
                        }
                        y.push(act.activate(s.requantize()));
                    }
                }
                y
            }
            Layer::Maxpool1d { window, stride } => {
                let cols = shapes[i].0 .1;
                let mut y = Vec::with_capacity(out_rows * out_cols);
                for q in 0..out_rows {
                    for c in 0..cols {
                        let w: Vec<Fix8> = (0..window).map(|k| x[(q * stride + k) * cols + c]).collect();
                        y.push(maxpool(&w).unwrap());
                    }
                }
                y
            }
            Layer::Rnn { inputs, hidden, timesteps, .. } => {
                let p = params[i].unwrap();
                let act = table(layer);
                let mut h = vec![Fix8::ZERO; hidden];
                for t in 0..timesteps {
                    let xt = &x[t * inputs..(t + 1) * inputs];
                    h = (0..hidden)
                        .map(|j| {
                            let s: WideAcc = xt.iter().chain(&h).enumerate().map(|(k, v)| v.mul(p.weights.get(k, j))).sum();
                            act.activate((s + p.bias[j].widen()).requantize())
                        })
                        .collect();
                }
                h
            }
        };
    }
    Ok(x)
}
