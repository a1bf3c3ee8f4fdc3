//! Reconstructed reference models and a random model generator.
//!
//! The fixture architectures are chosen to hit published parameter totals;
//! the exact layer widths are our own.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layer, ModelSpec, WeightsFile, SPEC_VERSION};
use crate::fix8::ActKind;
use crate::isa::Target;

#[derive(Clone, Debug)]
pub struct Fixture {
    pub spec: ModelSpec,
    pub weights: WeightsFile,
}

use ActKind::{Identity, Relu, Sigmoid};

fn dense(i: usize, o: usize, act: ActKind) -> Layer {
    Layer::Dense { inputs: i, outputs: o, act }
}

fn spec(name: &str, target: Target, input_len: usize, layers: Vec<Layer>) -> ModelSpec {
    ModelSpec { version: SPEC_VERSION, name: name.into(), target, input_len, layers }
}

pub fn fixture_names() -> &'static [&'static str] {
    &["mlp-e", "mlp-m", "mlp-wide", "cnn-e", "rnn-m"]
}

/// A named model with deterministic small random weights.
///
/// * `mlp-e`: 64-40-80-6 on the FPE, 6366 parameter bytes.
/// * `mlp-m`: 64-24-16-6 on the FPE, 2062 bytes.
/// * `mlp-wide`: 64-128-64-6 on the FPE, which needs a larger pCache than the default.
/// * `cnn-e`: two convolutions, a max-pool and two dense layers on the HPE, 287299 bytes.
/// * `rnn-m`: an 8-step recurrent cell with 40 hidden units and a dense head on the HPE.
pub fn fixture(name: &str) -> Option<Fixture> {
    let s = match name {
        "mlp-e" => spec(name, Target::Fpe, 64, vec![dense(64, 40, Relu), dense(40, 80, Relu), dense(80, 6, Identity)]),
        "mlp-m" => spec(name, Target::Fpe, 64, vec![dense(64, 24, Relu), dense(24, 16, Relu), dense(16, 6, Identity)]),
        "mlp-wide" => spec(name, Target::Fpe, 64, vec![dense(64, 128, Relu), dense(128, 64, Relu), dense(64, 6, Identity)]),
        "cnn-e" => spec(
            name,
            Target::Hpe,
            64,
            vec![
                Layer::Conv1d { in_ch: 1, out_ch: 32, kernel: 5, stride: 1, act: Relu },
                Layer::Conv1d { in_ch: 32, out_ch: 64, kernel: 4, stride: 1, act: Relu },
                Layer::Maxpool1d { window: 2, stride: 2 },
                dense(1792, 155, Relu),
                dense(155, 6, Identity),
            ],
        ),
        "rnn-m" => spec(
            name,
            Target::Hpe,
            64,
            vec![Layer::Rnn { inputs: 8, hidden: 40, act: Sigmoid, timesteps: 8 }, dense(40, 6, Identity)],
        ),
        _ => return None,
    };
    let seed = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let weights = WeightsFile::random(&s, 12, &mut ChaCha8Rng::seed_from_u64(seed));
    Some(Fixture { spec: s, weights })
}

fn act(rng: &mut impl Rng) -> ActKind {
    *[Relu, Sigmoid, Identity].choose(rng).unwrap()
}

/// A random model that fits the default configuration of `target`.
pub fn random_model(target: Target, rng: &mut impl Rng) -> ModelSpec {
    let input_len = *[32, 64].choose(rng).unwrap();
    let classes = rng.gen_range(2..=16);
    let mut layers = Vec::new();
    match (target, rng.gen_range(0..3)) {
        (Target::Fpe, _) | (Target::Hpe, 0) => {
            let mut w = input_len;
            for _ in 0..rng.gen_range(0..=2) {
                let o = rng.gen_range(1..=48);
                layers.push(dense(w, o, act(rng)));
                w = o;
            }
            layers.push(dense(w, classes, act(rng)));
        }
        (_, 1) => {
            let in_ch = *[1, 2, 4].choose(rng).unwrap();
            let len = input_len / in_ch;
            let kernel = rng.gen_range(1..=5.min(len));
            let stride = rng.gen_range(1..=2);
            let out_ch = rng.gen_range(1..=40);
            layers.push(Layer::Conv1d { in_ch, out_ch, kernel, stride, act: act(rng) });
            let mut rows = (len - kernel) / stride + 1;
            if rng.gen_bool(0.5) && rows >= 2 {
                let window = rng.gen_range(2..=3.min(rows));
                let s = rng.gen_range(1..=window);
                layers.push(Layer::Maxpool1d { window, stride: s });
                rows = (rows - window) / s + 1;
            }
            layers.push(dense(rows * out_ch, classes, act(rng)));
        }
        _ => {
            let timesteps = *[1, 2, 4, 8].choose(rng).unwrap();
            let inputs = input_len / timesteps;
            let hidden = rng.gen_range(1..=40);
            layers.push(Layer::Rnn { inputs, hidden, act: act(rng), timesteps });
            layers.push(dense(hidden, classes, act(rng)));
        }
    }
    spec("random", target, input_len, layers)
}
