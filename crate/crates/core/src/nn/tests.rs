use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::blocked::{gemv_ref, Fix8Vector};
use crate::fix8::{ActTable, Fix8};
use crate::fpe::{FpeConfig, FpeSim};
use crate::hpe::{HpeConfig, HpeSim};
use crate::isa::ComputeOp;
use crate::pe::RunResult;

fn model(target: Target, input_len: usize, layers: Vec<Layer>) -> ModelSpec {
    ModelSpec { version: SPEC_VERSION, name: "t".into(), target, input_len, layers }
}

fn dense(i: usize, o: usize, act: ActKind) -> Layer {
    Layer::Dense { inputs: i, outputs: o, act }
}

fn input(rng: &mut ChaCha8Rng, n: usize) -> Vec<Fix8> {
    (0..n).map(|_| Fix8::from_bits(rng.gen())).collect()
}

fn run(prog: &CompiledProgram, x: &[Fix8]) -> RunResult {
    match prog.image.target {
        Target::Fpe => FpeSim::load(&prog.image, &FpeConfig::default()).unwrap().run_inference(x).unwrap(),
        Target::Hpe => HpeSim::load(&prog.image, &HpeConfig::default()).unwrap().run_inference(x).unwrap(),
    }
}

/// Compiles for the default config and checks `inputs` random inputs against the oracle.
fn check_equiv(spec: &ModelSpec, w: &WeightsFile, inputs: usize, seed: u64) -> CompiledProgram {
    let prog = compile(spec, w).unwrap_or_else(|e| panic!("{e}\n{}", spec.to_toml()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..inputs {
        let x = input(&mut rng, spec.input_len);
        let r = run(&prog, &x);
        assert_eq!(r.output, oracle(spec, w, &x).unwrap(), "{}", spec.to_toml());
        assert_eq!(r.cycles, prog.predicted_cycles);
        assert_eq!(r.stall_cycles, 0, "{}", spec.to_toml());
    }
    prog
}

fn compute_count(prog: &CompiledProgram) -> usize {
    prog.image.bundles.iter().filter(|b| matches!(b.compute, ComputeOp::Mv { .. } | ComputeOp::Mva { .. } | ComputeOp::Mvaa { .. })).count()
}

#[test]
fn spec_toml_round_trip() {
    let text = r#"
version = 1
name = "demo"
target = "hpe"
input_len = 64

[[layers]]
kind = "conv1d"
in_ch = 1
out_ch = 8
kernel = 3
act = "relu"

[[layers]]
kind = "maxpool1d"
window = 2
stride = 2

[[layers]]
kind = "dense"
in = 248
out = 6
act = "identity"
"#;
    let spec = ModelSpec::from_toml(text).unwrap();
    assert_eq!(spec.layers[0], Layer::Conv1d { in_ch: 1, out_ch: 8, kernel: 3, stride: 1, act: ActKind::Relu });
    assert_eq!(spec.output_shape().unwrap(), (1, 6));
    assert_eq!(ModelSpec::from_toml(&spec.to_toml()).unwrap(), spec);
}

#[test]
fn spec_errors() {
    let bad = |layers| model(Target::Fpe, 64, layers).shapes().unwrap_err();
    assert!(matches!(bad(vec![dense(32, 8, ActKind::Relu)]), CompileError::Spec(_)));
    assert!(matches!(bad(vec![dense(64, 8, ActKind::Relu), dense(9, 2, ActKind::Relu)]), CompileError::Spec(_)));
    assert!(matches!(model(Target::Fpe, 48, vec![dense(48, 8, ActKind::Relu)]).shapes(), Err(CompileError::Spec(_))));
    assert!(matches!(bad(vec![]), CompileError::Spec(_)));
    assert!(ModelSpec::from_toml("version = 1\nname = 'x'\ntarget = 'fpe'\ninput_len = 64\n[[layers]]\nkind = 'lstm'").is_err());
}

#[test]
fn weights_round_trip_and_checks() {
    let f = fixture("mlp-m").unwrap();
    let bytes = f.weights.to_bytes();
    assert_eq!(&bytes[..4], b"KWGT");
    assert_eq!(bytes.len(), 4 + 1 + 2 + 8 + 3 * 4 + f.spec.param_bytes());
    let back = WeightsFile::from_bytes(&bytes).unwrap();
    assert_eq!(back, f.weights);
    back.check(&f.spec).unwrap();

    assert!(WeightsFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(WeightsFile::from_bytes(&extra).is_err());
    let mut wrong = back.clone();
    wrong.hash ^= 1;
    assert!(matches!(wrong.check(&f.spec), Err(CompileError::Weights(_))));
    let other = fixture("mlp-e").unwrap();
    assert!(matches!(back.check(&other.spec), Err(CompileError::Weights(_))));
}

#[test]
fn fpe_compute_bundle_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (i, o, want) in [(32, 8, 1), (64, 128, 32), (40, 10, 4)] {
        let len = if i == 32 { 32 } else { 64 };
        let mut layers = vec![];
        if i != len {
            layers.push(dense(len, i, ActKind::Relu));
        }
        layers.push(dense(i, o, ActKind::Relu));
        if o > 32 {
            layers.push(dense(o, 4, ActKind::Identity));
        }
        let spec = model(Target::Fpe, len, layers);
        let w = WeightsFile::random(&spec, 8, &mut rng);
        let cfg = FpeConfig { pcache_bytes: 64 * 1024, ..Default::default() };
        let prog = compile_fpe(&spec, &w, &cfg).unwrap();
        let all = compute_count(&prog);
        let others: usize = spec.layers.iter().filter(|l| **l != dense(i, o, ActKind::Relu)).map(|l| {
            let (r, c) = l.weight_shape().unwrap();
            r.div_ceil(32) * c.div_ceil(8)
        }).sum();
        assert_eq!(all - others, want, "dense({i},{o})");
    }
    let spec = model(Target::Fpe, 32, vec![dense(32, 8, ActKind::Relu)]);
    let prog = compile(&spec, &WeightsFile::random(&spec, 8, &mut rng)).unwrap();
    assert!(prog.image.bundles.iter().any(|b| matches!(b.compute, ComputeOp::Mvaa { .. })));
}

#[test]
fn fpe_single_layer_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for act in [ActKind::Relu, ActKind::Sigmoid, ActKind::Identity] {
        let spec = model(Target::Fpe, 32, vec![dense(32, 8, act)]);
        let w = WeightsFile::random(&spec, 64, &mut rng);
        let prog = check_equiv(&spec, &w, 20, 3);
        assert_eq!(prog.predicted_cycles, prog.image.bundles.len() as u64 + 6);
    }
}

#[test]
fn fpe_wide_mlp_needs_larger_pcache() {
    let f = fixture("mlp-wide").unwrap();
    assert!(matches!(compile(&f.spec, &f.weights), Err(CompileError::Capacity { resource: "pCache", .. })));
    let cfg = FpeConfig { pcache_bytes: 32 * 1024, ..Default::default() };
    let prog = compile_fpe(&f.spec, &f.weights, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let x = input(&mut rng, 64);
        let r = FpeSim::load(&prog.image, &cfg).unwrap().run_inference(&x).unwrap();
        assert_eq!(r.output, oracle(&f.spec, &f.weights, &x).unwrap());
        assert_eq!(r.cycles, prog.image.bundles.len() as u64 + 6);
        assert_eq!(r.cycles, prog.predicted_cycles);
    }
}

#[test]
fn fixture_sizes() {
    assert_eq!(fixture("mlp-e").unwrap().spec.param_bytes(), 6366);
    assert_eq!(fixture("mlp-m").unwrap().spec.param_bytes(), 2062);
    let cnn = fixture("cnn-e").unwrap();
    assert!((cnn.spec.param_bytes() as f64 / 1024.0 - 280.5).abs() < 0.1);
    for name in fixture_names() {
        let f = fixture(name).unwrap();
        f.weights.check(&f.spec).unwrap();
        if *name != "mlp-wide" {
            let p = compile(&f.spec, &f.weights).unwrap();
            assert!(p.image.param_image.len() <= f.spec.target.default_pcache_bytes());
        }
    }
    assert!(fixture("nope").is_none());
}

#[test]
fn fixtures_match_oracle() {
    for name in ["mlp-e", "mlp-m", "rnn-m", "cnn-e"] {
        let f = fixture(name).unwrap();
        check_equiv(&f.spec, &f.weights, 10, 5);
    }
}

#[test]
fn conv_lowers_to_one_tile_gemm() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = model(
        Target::Hpe,
        32,
        vec![Layer::Conv1d { in_ch: 1, out_ch: 4, kernel: 3, stride: 1, act: ActKind::Relu }, dense(120, 5, ActKind::Identity)],
    );
    let w = WeightsFile::random(&spec, 16, &mut rng);
    let prog = check_equiv(&spec, &w, 20, 7);
    let first_mm = prog.image.bundles.iter().find_map(|b| match b.compute {
        ComputeOp::Mm { rows, .. } => Some(rows),
        _ => None,
    });
    assert_eq!(first_mm, Some(30));
    assert!(prog.image.bundles.iter().any(|b| matches!(b.param, crate::isa::ParamOp::Ldp { rows: 3, cols: 4, .. })));
}

#[test]
fn kernel_one_conv_is_dense_per_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let conv = Layer::Conv1d { in_ch: 2, out_ch: 5, kernel: 1, stride: 1, act: ActKind::Relu };
    let spec = model(Target::Hpe, 32, vec![conv, dense(80, 3, ActKind::Identity)]);
    let w = WeightsFile::random(&spec, 16, &mut rng);
    let head = model(Target::Hpe, 32, vec![conv]);
    let head_w = WeightsFile { hash: model_hash([(2, 5)]), layers: vec![w.layers[0].clone()] };
    let p = &w.layers[0];
    let aug = p.weights.with_row(&p.bias).unwrap();
    for _ in 0..20 {
        let x = input(&mut rng, 32);
        let got = oracle(&head, &head_w, &x).unwrap();
        for pos in 0..16 {
            let v = Fix8Vector::new(vec![x[2 * pos], x[2 * pos + 1], Fix8::ONE]);
            let want = gemv_ref(&v, &aug, &ActTable::relu()).unwrap();
            assert_eq!(&got[pos * 5..pos * 5 + 5], want.as_slice());
        }
    }
    check_equiv(&spec, &w, 20, 9);
}

#[test]
fn conv_then_pool_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (window, stride) in [(2, 2), (3, 1), (3, 2)] {
        let rows = ((64 - 3) - window) / stride + 1;
        let spec = model(
            Target::Hpe,
            64,
            vec![
                Layer::Conv1d { in_ch: 1, out_ch: 40, kernel: 4, stride: 1, act: ActKind::Relu },
                Layer::Maxpool1d { window, stride },
                dense(rows * 40, 7, ActKind::Sigmoid),
            ],
        );
        let w = WeightsFile::random(&spec, 16, &mut rng);
        let prog = check_equiv(&spec, &w, 10, 11);
        assert!(prog.image.bundles.iter().any(|b| matches!(b.compute, ComputeOp::Accp { .. })));
    }
}

#[test]
fn pool_must_follow_conv() {
    let conv = Layer::Conv1d { in_ch: 1, out_ch: 4, kernel: 1, stride: 1, act: ActKind::Relu };
    let pool = Layer::Maxpool1d { window: 2, stride: 2 };
    let spec = model(Target::Hpe, 64, vec![conv, pool, pool, dense(64, 4, ActKind::Relu)]);
    spec.shapes().unwrap();
    let w = WeightsFile::random(&spec, 4, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(compile(&spec, &w), Err(CompileError::Unsupported(_))));
}

#[test]
fn rnn_single_step_is_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let spec = model(Target::Hpe, 32, vec![Layer::Rnn { inputs: 32, hidden: 20, act: ActKind::Relu, timesteps: 1 }]);
    let w = WeightsFile::random(&spec, 16, &mut rng);
    let p = &w.layers[0];
    let wx = crate::blocked::Fix8Matrix::from_fn(32, 20, |r, c| p.weights.get(r, c)).with_row(&p.bias).unwrap();
    for _ in 0..20 {
        let x = input(&mut rng, 32);
        let v = Fix8Vector::new(x.iter().copied().chain([Fix8::ONE]).collect());
        let want = gemv_ref(&v, &wx, &ActTable::relu()).unwrap();
        assert_eq!(oracle(&spec, &w, &x).unwrap(), want.as_slice());
    }
    check_equiv(&spec, &w, 20, 13);
}

#[test]
fn rnn_multi_step_and_padded_hidden() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for (steps, hidden) in [(3, 16), (4, 40), (2, 32)] {
        let spec = model(
            Target::Hpe,
            64,
            vec![Layer::Rnn { inputs: 64 / steps, hidden, act: ActKind::Sigmoid, timesteps: steps }, dense(hidden, 6, ActKind::Relu)],
        );
        let spec = if 64 % steps != 0 {
            model(Target::Hpe, 63 / steps * steps, spec.layers)
        } else {
            spec
        };
        if spec.shapes().is_err() {
            continue;
        }
        let w = WeightsFile::random(&spec, 16, &mut rng);
        check_equiv(&spec, &w, 10, 15);
    }
    // Three steps over a 32-byte input viewed as rows of 8 after a dense layer.
    let spec = model(
        Target::Hpe,
        32,
        vec![dense(32, 24, ActKind::Relu), Layer::Rnn { inputs: 8, hidden: 40, act: ActKind::Sigmoid, timesteps: 3 }, dense(40, 4, ActKind::Identity)],
    );
    let w = WeightsFile::random(&spec, 16, &mut rng);
    check_equiv(&spec, &w, 10, 16);
}

#[test]
fn random_models_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..40 {
        let target = if i % 2 == 0 { Target::Fpe } else { Target::Hpe };
        let spec = random_model(target, &mut rng);
        let w = WeightsFile::random(&spec, 24, &mut rng);
        check_equiv(&spec, &w, 5, i);
    }
}

#[test]
fn capacity_is_exact_at_the_boundary() {
    let f = fixture("mlp-e").unwrap();
    let need = compile(&f.spec, &f.weights).unwrap().image.param_image.len();
    let at = FpeConfig { pcache_bytes: need, ..Default::default() };
    assert!(compile_fpe(&f.spec, &f.weights, &at).is_ok());
    let below = FpeConfig { pcache_bytes: need - 1, ..Default::default() };
    assert_eq!(
        compile_fpe(&f.spec, &f.weights, &below).unwrap_err(),
        CompileError::Capacity { resource: "pCache", used: need, capacity: need - 1 }
    );
    let code = compile(&f.spec, &f.weights).unwrap().image.code_bytes();
    let small = FpeConfig { icache_bytes: code - 8, ..Default::default() };
    assert!(matches!(compile_fpe(&f.spec, &f.weights, &small), Err(CompileError::Capacity { resource: "iCache", .. })));

    let c = fixture("cnn-e").unwrap();
    let prog = compile(&c.spec, &c.weights).unwrap();
    let below = HpeConfig { pcache_bytes: prog.image.param_image.len() - 1, ..Default::default() };
    assert!(matches!(compile_hpe(&c.spec, &c.weights, &below), Err(CompileError::Capacity { resource: "pCache", .. })));
    let small = HpeConfig { icache_bytes: prog.image.code_bytes() - 16, ..Default::default() };
    assert!(matches!(compile_hpe(&c.spec, &c.weights, &small), Err(CompileError::Capacity { resource: "iCache", .. })));
    let fits = HpeConfig { icache_bytes: prog.image.code_bytes(), pcache_bytes: prog.image.param_image.len(), ..Default::default() };
    assert!(compile_hpe(&c.spec, &c.weights, &fits).is_ok());

    // 17 words of activations need more regfile than 32 words split in two regions.
    let spec = model(Target::Fpe, 64, vec![dense(64, 544, ActKind::Relu), dense(544, 4, ActKind::Relu)]);
    let w = WeightsFile::random(&spec, 4, &mut ChaCha8Rng::seed_from_u64(0));
    let big = FpeConfig { pcache_bytes: 1 << 20, icache_bytes: 1 << 20, ..Default::default() };
    assert!(matches!(compile_fpe(&spec, &w, &big), Err(CompileError::Capacity { resource: "regfile", .. })));
}

#[test]
fn fpe_rejects_non_dense() {
    let spec = model(Target::Fpe, 64, vec![Layer::Conv1d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1, act: ActKind::Relu }, dense(124, 2, ActKind::Relu)]);
    let w = WeightsFile::random(&spec, 4, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(compile(&spec, &w), Err(CompileError::Unsupported(_))));
}
