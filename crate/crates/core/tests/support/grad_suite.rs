//! Finite-difference checks of every differentiable op and block, shared by
//! the gradient tests and the acceptance suite.

use ahnet_core::blocks::{AttentionGate, DownBlock, ResBlock, SoftmaxHead, UpBlock};
use ahnet_core::metrics::Mask;
use ahnet_core::nn::{Graph, Initializer, ParamStore};
use ahnet_core::segnet::{combined_loss, one_hot, LossWeights, Network, NetworkSpec, SegLoss};
use ahnet_core::tensor::gradcheck::{check_gradients, weighted_sum, GradCheckOptions, GradCheckReport};
use ahnet_core::tensor::{Activation, BatchNormState, ConvSpec, Tape, Tensor, Var};
use ahnet_core::vss::{SsmMode, VSSConfig, VmLayer, Vss};
use ahnet_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OP_SEEDS: u64 = 20;
const BLOCK_SEEDS: u64 = 10;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        seed,
        ..Default::default()
    }
}

/// Checks `f` on fresh random inputs of `shapes` for every seed.
fn check_op<F>(name: &str, shapes: &[&[usize]], tol: f64, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    for seed in 0..OP_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let report = check_gradients(
            &inputs,
            |t, v| {
                let y = f(t, v)?;
                weighted_sum(t, y, seed)
            },
            opts(seed),
        )
        .unwrap();
        let err = report.max_relative_error();
        assert!(err <= tol, "{name} seed {seed}: relative error {err:e}");
    }
}

pub fn elementwise_ops() {
    for kind in [Activation::Relu, Activation::Sigmoid, Activation::Silu, Activation::Softplus] {
        check_op(&format!("{kind:?}"), &[&[2, 3, 3, 2]], 1e-6, |t, v| t.activation(kind, v[0]));
    }
    check_op("add", &[&[2, 3, 4], &[2, 3, 4]], 1e-7, |t, v| t.add(v[0], v[1]));
    check_op("sub", &[&[2, 3, 4], &[2, 3, 4]], 1e-7, |t, v| t.sub(v[0], v[1]));
    check_op("mul", &[&[2, 3, 4], &[2, 3, 4]], 1e-7, |t, v| t.mul(v[0], v[1]));
    check_op("exp", &[&[3, 5]], 1e-7, |t, v| t.exp(v[0]));
    check_op("scale", &[&[3, 5]], 1e-7, |t, v| t.scale(v[0], -1.7));
}

pub fn broadcast_and_linear_ops() {
    check_op("add_channel", &[&[2, 3, 3, 4], &[4]], 1e-7, |t, v| t.add_channel(v[0], v[1]));
    check_op("mul_channel", &[&[2, 3, 3, 4], &[4]], 1e-7, |t, v| t.mul_channel(v[0], v[1]));
    check_op("mul_broadcast", &[&[2, 3, 3, 4], &[2, 3, 3, 1]], 1e-7, |t, v| {
        t.mul_broadcast(v[0], v[1])
    });
    check_op("linear", &[&[2, 5, 3], &[3, 4], &[4]], 1e-7, |t, v| t.linear(v[0], v[1], Some(v[2])));
    check_op("linear_no_bias", &[&[7, 3], &[3, 2]], 1e-7, |t, v| t.linear(v[0], v[1], None));
}

pub fn structural_ops() {
    check_op("reshape", &[&[2, 3, 4]], 1e-7, |t, v| t.reshape(v[0], &[6, 4]));
    check_op("expand_leading", &[&[3, 2]], 1e-7, |t, v| t.expand_leading(v[0], &[2, 3]));
    check_op("permute_rows", &[&[2, 4, 3]], 1e-7, |t, v| t.permute_rows(v[0], &[2, 0, 3, 1]));
    check_op("sum_all", &[&[2, 3, 4]], 1e-7, |t, v| t.sum_all(v[0]));
    check_op("mean_all", &[&[2, 3, 4]], 1e-7, |t, v| t.mean_all(v[0]));
    check_op("concat", &[&[2, 3, 3, 2], &[2, 3, 3, 3]], 1e-7, |t, v| {
        t.concat_channels(v[0], v[1])
    });
    check_op("crop_center", &[&[1, 6, 5, 2]], 1e-7, |t, v| t.crop_center(v[0], 3, 4));
    check_op("pool_max2d", &[&[2, 6, 6, 2]], 1e-6, |t, v| t.pool_max2d(v[0], 2, 2));
}

pub fn softmax_and_losses() {
    check_op("softmax", &[&[2, 3, 3, 4]], 1e-6, |t, v| t.softmax_channel(v[0]));
    let mut target = Tensor::zeros(vec![2, 3, 3, 3]);
    for (i, row) in target.data_mut().chunks_mut(3).enumerate() {
        row[i % 3] = 1.0;
    }
    let ce_target = target.clone();
    check_op("cross_entropy", &[&[2, 3, 3, 3]], 1e-6, move |t, v| {
        let p = t.softmax_channel(v[0])?;
        t.cross_entropy(p, &ce_target, 1e-12)
    });
    check_op("soft_dice", &[&[2, 3, 3, 3]], 1e-6, move |t, v| {
        let p = t.softmax_channel(v[0])?;
        t.soft_dice(p, &target, 1, 1.0)
    });
}

pub fn convolutions() {
    check_op("conv_same", &[&[2, 5, 5, 2], &[3, 3, 2, 3], &[3]], 1e-6, |t, v| {
        t.convolve2d(v[0], v[1], Some(v[2]), ConvSpec::same())
    });
    check_op("conv_transpose", &[&[1, 3, 4, 3], &[3, 3, 3, 2]], 1e-6, |t, v| {
        t.convolve2d(v[0], v[1], None, ConvSpec::transpose(2))
    });
    check_op("conv_depthwise", &[&[2, 4, 4, 3], &[3, 3, 1, 3], &[3]], 1e-6, |t, v| {
        t.convolve2d(v[0], v[1], Some(v[2]), ConvSpec::depthwise())
    });
}

pub fn normalizations() {
    check_op("layer_norm", &[&[2, 3, 4], &[4], &[4]], 1e-6, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    let running = BatchNormState::new(3, 0.9);
    check_op("batch_norm_train", &[&[2, 3, 3, 3], &[3], &[3]], 1e-6, |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, &running, true)?.0)
    });
    check_op("batch_norm_eval", &[&[2, 3, 3, 3], &[3], &[3]], 1e-6, |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, &running, false)?.0)
    });
}

/// Checks a module with respect to its inputs and every trainable entry.
fn check_module<F>(name: &str, store: &ParamStore, inputs: Vec<Tensor>, seed: u64, max_coords: usize, forward: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = module_report(store, inputs, seed, max_coords, GradCheckOptions::default().step, forward);
    // A bias feeding training-mode batch norm has an exactly zero gradient,
    // where central differences leave only rounding noise.
    let err = report.max_scaled_error(1e-6);
    assert!(err <= 1e-4, "{name} seed {seed}: relative error {err:e} per input {:?}", report.relative_errors);
}

fn module_report<F>(
    store: &ParamStore,
    inputs: Vec<Tensor>,
    seed: u64,
    max_coords: usize,
    step: f64,
    forward: F,
) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let ids = store.trainable_ids();
    let k = inputs.len();
    let mut all = inputs;
    all.extend(ids.iter().map(|&id| store.value(id).clone()));
    check_gradients(
        &all,
        |tape, vars| {
            let mut g = Graph::frozen(tape, store, true);
            for (i, &id) in ids.iter().enumerate() {
                g.bind(id, vars[k + i]);
            }
            let y = forward(&mut g, &vars[..k])?;
            weighted_sum(g.tape, y, seed)
        },
        GradCheckOptions {
            seed,
            max_coords,
            step,
            ..Default::default()
        },
    )
    .unwrap()
}

pub fn attention_gate_gradients() {
    for seed in 0..BLOCK_SEEDS {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let gate = AttentionGate::new(&mut store, &mut init, "gate", 3, 2, 2, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs = vec![random(&[2, 4, 4, 3], &mut rng), random(&[2, 6, 6, 2], &mut rng)];
        check_module("attention_gate", &store, inputs, seed, 16, |g, v| {
            Ok(gate.forward(g, v[0], v[1])?.0)
        });
    }
}

pub fn upsampling_block_gradients() {
    for seed in 0..BLOCK_SEEDS {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let up = UpBlock::new(&mut store, &mut init, "dec.0", "dec.0.gate", 4, 2, 2, 3, 2, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let inputs = vec![random(&[2, 3, 3, 4], &mut rng), random(&[2, 6, 6, 2], &mut rng)];
        check_module("attention_upsample", &store, inputs, seed, 12, |g, v| up.forward(g, v[0], v[1]));
    }
}

pub fn residual_block_gradients() {
    for seed in 0..BLOCK_SEEDS {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let res = ResBlock::new(&mut store, &mut init, "dec.0.res", 2, 2, 2, 3, 1, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let inputs = vec![random(&[2, 4, 4, 2], &mut rng), random(&[2, 4, 4, 2], &mut rng)];
        check_module("upsample_residual", &store, inputs, seed, 12, |g, v| res.forward(g, v[0], v[1]));
    }
}

pub fn head_and_downsample_gradients() {
    for seed in 0..BLOCK_SEEDS {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let head = SoftmaxHead::reconstruction(&mut store, &mut init, "recon", 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        check_module("reconstruction_head", &store, vec![random(&[1, 4, 5, 3], &mut rng)], seed, 16, |g, v| {
            head.forward(g, v[0])
        });

        let mut store = ParamStore::new();
        let down = DownBlock::new(&mut store, &mut init, "enc.0", 2, 2, 0.9).unwrap();
        check_module("downsample", &store, vec![random(&[2, 4, 4, 2], &mut rng)], seed, 12, |g, v| {
            Ok(down.forward(g, v[0])?.1)
        });
    }
}

fn vss_config(channels: usize, mode: SsmMode) -> VSSConfig {
    VSSConfig {
        state_dim: 3,
        mode,
        ..VSSConfig::new(channels)
    }
}

pub fn vss_gradients() {
    for mode in [SsmMode::Lti, SsmMode::Selective] {
        for seed in 0..BLOCK_SEEDS {
            let mut store = ParamStore::new();
            let mut init = Initializer::new(seed);
            let vss = Vss::new(&mut store, &mut init, 0, vss_config(2, mode)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            check_module("vss", &store, vec![random(&[1, 3, 3, 2], &mut rng)], seed, 8, |g, v| {
                vss.forward(g, v[0])
            });
        }
    }
}

pub fn vm_layer_gradients() {
    for seed in 0..BLOCK_SEEDS {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let vm = VmLayer::new(&mut store, &mut init, 0, vss_config(4, SsmMode::Selective)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let x = random(&[2, 8, 4], &mut rng);
        check_module("vm_layer", &store, vec![x], seed, 8, |g, v| vm.forward(g, v[0]));
    }
}

pub fn combined_loss_gradients() {
    let mask = |rng: &mut ChaCha8Rng| {
        let bits: Vec<u8> = (0..64).map(|_| rng.random_range(0..2)).collect();
        Mask::from_u8(8, 8, &bits).unwrap()
    };
    for seg_loss in [SegLoss::CrossEntropy, SegLoss::SoftDice, SegLoss::Sum] {
        for seed in 0..OP_SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
            let m = mask(&mut rng);
            let gt = one_hot(&[&m], 2).unwrap();
            let images = Tensor::new(vec![1, 8, 8, 1], (0..64).map(|_| rng.random::<f64>()).collect()).unwrap();
            let logits = vec![random(&[1, 8, 8, 2], &mut rng), random(&[1, 8, 8, 3], &mut rng)];
            let weights = LossWeights { alpha_recon: 0.5, seg_loss };
            let store = ParamStore::new();
            let report = check_gradients(
                &logits,
                |tape, v| {
                    let mut g = Graph::frozen(tape, &store, false);
                    let seg = g.tape.softmax_channel(v[0])?;
                    let recon = g.tape.softmax_channel(v[1])?;
                    combined_loss(&mut g, seg, &gt, Some(recon), &images, &weights)
                },
                opts(seed),
            )
            .unwrap();
            let err = report.max_relative_error();
            assert!(err <= 1e-4, "combined loss {seg_loss:?} seed {seed}: {err:e}");
        }
    }
}

pub fn full_network_gradients() {
    for seed in 0..BLOCK_SEEDS {
        let spec = NetworkSpec {
            depth: 2,
            base_filters: 4,
            input_size: 16,
            state_dim: 2,
            ..NetworkSpec::default()
        };
        let net = Network::new(spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let images = Tensor::new(vec![2, 16, 16, 1], (0..512).map(|_| rng.random::<f64>()).collect()).unwrap();
        let bits: Vec<u8> = (0..512).map(|i| u8::from((i % 16 > 5) && (i % 16 < 11))).collect();
        let masks = [Mask::from_u8(16, 16, &bits[..256]).unwrap(), Mask::from_u8(16, 16, &bits[256..]).unwrap()];
        let gt = one_hot(&[&masks[0], &masks[1]], 2).unwrap();
        let weights = LossWeights::default();
        // Thousands of ReLU and max-pool inputs move together here; a 1e-5 step
        // crosses some of their kinks, a 1e-7 step almost never does. The
        // smaller step raises the rounding noise, so exactly-zero gradients
        // are judged against an absolute floor tied to the largest gradient.
        let report = module_report(&net.store, vec![images.clone()], seed, 6, 1e-7, |g, v| {
            let out = net.forward_graph(g, v[0])?;
            combined_loss(g, out.seg, &gt, out.recon, &images, &weights)
        });
        let ratio = report.max_tolerance_ratio(1e-4, 1e-6);
        assert!(ratio <= 1.0, "network seed {seed}: tolerance ratio {ratio} per input {:?}", report.relative_errors);
    }
}

/// Every check in order, by name.
#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("elementwise_ops", elementwise_ops),
    ("broadcast_and_linear_ops", broadcast_and_linear_ops),
    ("structural_ops", structural_ops),
    ("softmax_and_losses", softmax_and_losses),
    ("convolutions", convolutions),
    ("normalizations", normalizations),
    ("attention_gate_gradients", attention_gate_gradients),
    ("upsampling_block_gradients", upsampling_block_gradients),
    ("residual_block_gradients", residual_block_gradients),
    ("head_and_downsample_gradients", head_and_downsample_gradients),
    ("vss_gradients", vss_gradients),
    ("vm_layer_gradients", vm_layer_gradients),
    ("combined_loss_gradients", combined_loss_gradients),
    ("full_network_gradients", full_network_gradients),
];
