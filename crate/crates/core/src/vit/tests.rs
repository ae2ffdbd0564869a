use super::*;
use crate::autodiff::check::{central_difference, max_rel_err};
use crate::autodiff::Tape;
use crate::bitops::BitAllocation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 8,
        in_channels: 3,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_dim: 32,
        num_classes: 5,
        ..ModelConfig::toy()
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn images(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor {
    random(&[batch, cfg.in_channels, cfg.image_size, cfg.image_size], seed)
}

#[test]
fn quantizer_census() {
    assert_eq!(ModelConfig::toy().expected_quantizer_count(), 168);
    for cfg in [ModelConfig::toy(), ModelConfig::deit_tiny(), ModelConfig::deit_small(), small()] {
        let specs = cfg.quantizer_specs();
        assert_eq!(specs.len(), cfg.expected_quantizer_count());
        let per_head = specs.iter().filter(|s| s.head.is_some()).count();
        assert_eq!(per_head, cfg.depth * cfg.heads * 9);
        let mut names = cfg.quantizer_names();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), specs.len());
    }
    let model = Vit::new(ModelConfig::toy(), 0).unwrap();
    assert_eq!(model.quantizers.len(), 168);
}

#[test]
fn quantizer_order() {
    let names = small().quantizer_names();
    let head: Vec<&str> = names.iter().take(13).map(String::as_str).collect();
    assert_eq!(
        head,
        [
            "patch_embed.w",
            "patch_embed.x",
            "block0.msa.x_in",
            "block0.msa.w_q.head0",
            "block0.msa.w_k.head0",
            "block0.msa.w_v.head0",
            "block0.msa.head0.q",
            "block0.msa.head0.k",
            "block0.msa.head0.v",
            "block0.msa.head0.attn",
            "block0.msa.head0.out",
            "block0.msa.w_o.head0",
            "block0.msa.w_q.head1",
        ]
    );
    assert_eq!(names.last().unwrap(), "classifier.x");
    let model = Vit::new(small(), 0).unwrap();
    let collected: Vec<&str> = model.collect_quantizers().into_iter().map(|(n, _)| n).collect();
    assert_eq!(collected, names);
    let signed: Vec<bool> = model
        .quantizers
        .iter()
        .filter(|q| !q.state.signed)
        .map(|q| q.spec.component == "attn")
        .collect();
    assert_eq!(signed, vec![true; 4]);
}

#[test]
fn config_validation() {
    let bad = ModelConfig {
        heads: 3,
        ..small()
    };
    assert!(matches!(bad.validate(), Err(ConfigError::HeadSplit { .. })));
    let bad = ModelConfig {
        patch_size: 5,
        ..small()
    };
    assert!(matches!(bad.validate(), Err(ConfigError::PatchSplit { .. })));
    let bad = ModelConfig {
        quant_mode: QuantMode::Uniform { bits: 9 },
        ..small()
    };
    assert!(matches!(bad.validate(), Err(ConfigError::UniformBits(9))));
    let json = serde_json::to_string(&small()).unwrap();
    let back: ModelConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, small());
    assert!(serde_json::from_str::<ModelConfig>(&json.replace("\"depth\"", "\"dpeth\"")).is_err());
}

#[test]
fn allocation_round_trip() {
    let mut model = Vit::new(small(), 1).unwrap();
    let mut alloc = BitAllocation::uniform(&model.config, 4);
    alloc.insert("block1.msa.head1.v", 2);
    model.set_allocation(&alloc).unwrap();
    assert_eq!(model.get_allocation().unwrap(), alloc);

    let mut missing = BitAllocation::default();
    missing.insert("patch_embed.w", 8);
    assert!(matches!(model.set_allocation(&missing), Err(VitError::MissingAllocation(_))));
    let mut unknown = alloc.clone();
    unknown.insert("block9.mlp.w1", 4);
    assert!(matches!(model.set_allocation(&unknown), Err(VitError::UnknownQuantizer(_))));
    assert_eq!(model.get_allocation().unwrap(), alloc);
}

#[test]
fn uniform_mode_pins_boundary_layers() {
    let mut cfg = small();
    cfg.quant_mode = QuantMode::Uniform { bits: 3 };
    let model = Vit::new(cfg.clone(), 0).unwrap();
    assert_eq!(model.get_allocation().unwrap(), BitAllocation::uniform(&cfg, 3));
}

#[test]
fn zero_weights_reduce_block_to_double_layernorm() {
    let mut model = Vit::new(small(), 2).unwrap();
    for p in model.params.iter_mut().filter(|p| p.name.starts_with("block0") && !p.name.contains("norm")) {
        p.value = Tensor::zeros(p.value.shape());
    }
    let x = random(&[2, model.config.tokens(), 16], 3);
    let mut fwd = Forward::new(&model, false);
    let xv = fwd.tape.constant(x.clone()).unwrap();
    let y = fwd.block(&model.blocks[0], xv).unwrap();
    let got = fwd.tape.value(y).clone();

    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let g = tape.constant(Tensor::full(&[16], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(&[16])).unwrap();
    let once = tape.layernorm(xv, g, b, 1e-6).unwrap();
    let twice = tape.layernorm(once, g, b, 1e-6).unwrap();
    assert!(max_rel_err(&got, tape.value(twice)) < 1e-12);
}

#[test]
fn sum_form_msa_equals_concat_form_in_float() {
    for heads in [1, 2, 4] {
        let cfg = ModelConfig { heads, ..small() };
        let model = Vit::new(cfg, 4).unwrap();
        let x = random(&[3, model.config.tokens(), 16], 5);
        let mut fwd = Forward::new(&model, false);
        let xv = fwd.tape.constant(x).unwrap();
        let a = fwd.msa(&model.blocks[0].msa, xv).unwrap();
        let b = fwd.msa_concat(&model.blocks[0].msa, xv).unwrap();
        let (a, b) = (fwd.tape.value(a), fwd.tape.value(b));
        let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        if heads == 1 {
            assert_eq!(a, b);
        } else {
            assert!(diff < 1e-12, "heads {heads}: {diff}");
        }
    }
}

#[test]
fn block_gradients_match_finite_differences() {
    for pre_norm in [false, true] {
        let cfg = ModelConfig { pre_norm, ..small() };
        let model = Vit::new(cfg, 6).unwrap();
        let x = random(&[2, model.config.tokens(), 16], 7);
        let r = random(&[2, model.config.tokens(), 16], 8);
        let loss_of = |model: &Vit, x: &Tensor| {
            let mut fwd = Forward::new(model, false);
            let xv = fwd.tape.constant(x.clone()).unwrap();
            let y = fwd.block(&model.blocks[0], xv).unwrap();
            let y = fwd.tape.value(y);
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut fwd = Forward::new(&model, true);
        let xv = fwd.tape.leaf(x.clone(), true).unwrap();
        let y = fwd.block(&model.blocks[0], xv).unwrap();
        let rv = fwd.tape.constant(r.clone()).unwrap();
        let prod = fwd.tape.mul(y, rv).unwrap();
        let loss = fwd.tape.sum(prod).unwrap();
        fwd.tape.backward(loss).unwrap();
        let gx = fwd.tape.grad(xv).unwrap().clone();
        let grads = fwd.gradients();

        let fd = central_difference(|x| loss_of(&model, x), &x, 1e-5);
        assert!(max_rel_err(&gx, &fd) < 1e-5, "input grad, pre_norm {pre_norm}");

        for name in ["block0.msa.head1.w_k", "block0.mlp.fc1.weight", "block0.norm1.gamma"] {
            let idx = model.param_index(name).unwrap();
            let fd = central_difference(
                |w| {
                    let mut m = model.clone();
                    m.params[idx].value = w.clone();
                    loss_of(&m, &x)
                },
                &model.params[idx].value,
                1e-5,
            );
            let g = grads.params[idx].as_ref().unwrap();
            assert!(max_rel_err(g, &fd) < 1e-5, "{name}, pre_norm {pre_norm}");
        }
    }
}

#[test]
fn logits_shape_and_batch_independence() {
    let model = Vit::new(small(), 9).unwrap();
    let x = images(&model.config, 4, 10);
    let y = model.logits(&x).unwrap();
    assert_eq!(y.shape(), &[4, 5]);

    let per = x.len() / 4;
    let order = [2, 0, 3, 1];
    let mut data = Vec::new();
    for &i in &order {
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let yp = model.logits(&Tensor::new(x.shape().to_vec(), data).unwrap()).unwrap();
    for (row, &i) in order.iter().enumerate() {
        for c in 0..5 {
            assert!((yp.data()[row * 5 + c] - y.data()[i * 5 + c]).abs() < 1e-12);
        }
    }
    assert_eq!(model.predict(&x).unwrap().len(), 4);

    let bad = random(&[1, 3, 8, 8], 0);
    assert!(matches!(model.logits(&bad), Err(VitError::InputShape { .. })));
}

#[test]
fn eight_bit_heads_match_uniform_eight() {
    let cfg = small();
    let mut learned = Vit::new(ModelConfig { quant_mode: QuantMode::Learned, ..cfg.clone() }, 11).unwrap();
    let x = images(&cfg, 4, 12);
    learned.calibrate(&x, |_| true).unwrap();
    learned.set_allocation(&BitAllocation::uniform(&cfg, 8)).unwrap();
    let mut uniform = learned.clone();
    uniform.config.quant_mode = QuantMode::Uniform { bits: 8 };
    assert_eq!(learned.logits(&x).unwrap(), uniform.logits(&x).unwrap());

    let mut float = learned.clone();
    float.config.quant_mode = QuantMode::Float;
    let (q, f) = (learned.logits(&x).unwrap(), float.logits(&x).unwrap());
    let diff = q.data().iter().zip(f.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 0.1 * f.max_abs(), "8-bit drift {diff} vs scale {}", f.max_abs());
}

#[test]
fn bypass_makes_quantizer_identity() {
    let cfg = ModelConfig { quant_mode: QuantMode::Uniform { bits: 2 }, ..small() };
    let mut model = Vit::new(cfg, 13).unwrap();
    let x = images(&model.config, 2, 14);
    model.calibrate(&x, |_| true).unwrap();
    let quantized = model.logits(&x).unwrap();
    model.bypass = vec![true; model.quantizers.len()];
    let mut float = model.clone();
    float.config.quant_mode = QuantMode::Float;
    assert_eq!(model.logits(&x).unwrap(), float.logits(&x).unwrap());
    assert_ne!(quantized, float.logits(&x).unwrap());
}

#[test]
fn learned_mode_gradients_reach_every_learnable() {
    let cfg = ModelConfig { quant_mode: QuantMode::Learned, ..small() };
    let mut model = Vit::new(cfg, 15).unwrap();
    let x = images(&model.config, 4, 16);
    model.calibrate(&x, |_| true).unwrap();
    for q in &mut model.quantizers {
        q.state.b_tilde = 4.3;
    }
    let mut fwd = Forward::new(&model, true);
    let y = fwd.logits(&x).unwrap();
    let loss = fwd.tape.cross_entropy(y, &[0, 1, 2, 3]).unwrap();
    fwd.tape.backward(loss).unwrap();
    let g = fwd.gradients();
    assert!(g.params.iter().all(|p| p.as_ref().is_some_and(|t| t.is_finite())));
    assert!(g.scales.iter().all(|s| s.as_ref().is_some_and(|t| t.is_finite())));
    assert!(g.b_tilde.iter().all(|b| b.is_some_and(f64::is_finite)));
    let nonzero = g.b_tilde.iter().filter(|b| b.unwrap() != 0.0).count();
    assert!(nonzero * 2 > g.b_tilde.len(), "{nonzero} of {}", g.b_tilde.len());

    // Only the scale entry of the active bit receives gradient.
    let s = g.scales[0].as_ref().unwrap();
    let touched: Vec<usize> = (0..7).filter(|&i| s.data()[i] != 0.0).collect();
    assert_eq!(touched, vec![2]);

    // A frozen bit is a constant.
    model.quantizers[5].state.frozen_bit = Some(3);
    let mut fwd = Forward::new(&model, true);
    let y = fwd.logits(&x).unwrap();
    let loss = fwd.tape.cross_entropy(y, &[0, 1, 2, 3]).unwrap();
    fwd.tape.backward(loss).unwrap();
    assert!(fwd.gradients().b_tilde[5].is_none());
}

#[test]
fn construction_is_deterministic() {
    let a = Vit::new(small(), 21).unwrap();
    let b = Vit::new(small(), 21).unwrap();
    let c = Vit::new(small(), 22).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params, c.params);
}
