//! Central-difference checks of every hand-written backward pass, run in f64.
//!
//! Each check contracts the layer output with a fixed random tensor `r`, so
//! the analytic gradient is the backward pass seeded with `r`.

use gms_core::domain::CapacityClass;
use gms_core::nn::layers::{
    add_per_sample, add_per_sample_grad, avg_pool_backward, avg_pool_forward, concat_channels, gelu_backward,
    gelu_forward, split_channels, BatchNorm, Conv2d, ConvTranspose2x2, Embedding, Linear, Mode,
};
use gms_core::nn::unet::ResBlock;
use gms_core::nn::{Architecture, DenoiserModel, GradientTape, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const H: f64 = 1e-4;
const PROBES: usize = 50;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Relative error with a floor so that vanishing gradients compare absolutely.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Perturb every trainable parameter away from its initial value so that
/// zero-initialized biases and unit scales also get exercised.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            let d: f64 = StandardNormal.sample(rng);
            *v += 0.3 * d;
        }
    }
}

enum Slot {
    Param(ParamId, usize),
    Input(usize, usize),
}

/// Compare analytic and central-difference gradients at `PROBES` random
/// coordinates drawn from the trainable parameters and the real-valued inputs.
fn check(
    label: &str,
    store: &mut ParamStore<f64>,
    inputs: &mut [Tensor<f64>],
    seed: u64,
    loss: &mut dyn FnMut(&mut ParamStore<f64>, &[Tensor<f64>]) -> f64,
    analytic: &mut dyn FnMut(&mut ParamStore<f64>, &[Tensor<f64>]) -> (GradientTape<f64>, Vec<Tensor<f64>>),
) -> f64 {
    let (tape, dinputs) = analytic(store, inputs);
    let mut slots = Vec::new();
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        slots.extend((0..store.get(id).len()).map(|k| Slot::Param(id, k)));
    }
    for (i, x) in inputs.iter().enumerate() {
        if i < dinputs.len() {
            slots.extend((0..x.len()).map(|k| Slot::Input(i, k)));
        }
    }
    assert!(!slots.is_empty(), "{label}: nothing to probe");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..PROBES {
        let slot = &slots[rng.gen_range(0..slots.len())];
        let (grad, numeric) = match *slot {
            Slot::Param(id, k) => {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + H;
                let up = loss(store, inputs);
                store.get_mut(id).data_mut()[k] = orig - H;
                let down = loss(store, inputs);
                store.get_mut(id).data_mut()[k] = orig;
                (tape.get(id).data()[k], (up - down) / (2.0 * H))
            }
            Slot::Input(i, k) => {
                let orig = inputs[i].data()[k];
                inputs[i].data_mut()[k] = orig + H;
                let up = loss(store, inputs);
                inputs[i].data_mut()[k] = orig - H;
                let down = loss(store, inputs);
                inputs[i].data_mut()[k] = orig;
                (dinputs[i].data()[k], (up - down) / (2.0 * H))
            }
        };
        worst = worst.max(rel_err(grad, numeric));
    }
    worst
}

pub fn linear() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let layer = Linear::new(&mut store, "lin", 5, 4, &mut rng);
    jitter(&mut store, &mut rng);
    let r = randn(&mut rng, &[3, 4]);
    let mut inputs = vec![randn(&mut rng, &[3, 5])];
    check(
        "linear",
        &mut store,
        &mut inputs,
        11,
        &mut |s, x| dot(&layer.forward(s, &x[0]), &r),
        &mut |s, x| {
            let mut tape = GradientTape::zeros_like(s);
            let dx = layer.backward(s, &mut tape, &x[0], &r);
            (tape, vec![dx])
        },
    )
}

pub fn embedding() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let layer = Embedding::new(&mut store, "emb", 4, 6, &mut rng);
    let idx = [0usize, 3, 3, 1];
    let r = randn(&mut rng, &[4, 6]);
    check(
        "embedding",
        &mut store,
        &mut [],
        12,
        &mut |s, _| dot(&layer.forward(s, &idx), &r),
        &mut |s, _| {
            let mut tape = GradientTape::zeros_like(s);
            layer.backward(&mut tape, &idx, &r);
            (tape, vec![])
        },
    )
}

fn conv_case(kernel: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = Conv2d::new(&mut store, "conv", 3, 4, kernel, &mut rng);
    jitter(&mut store, &mut rng);
    let r = randn(&mut rng, &[2, 5, 4, 4]);
    let mut inputs = vec![randn(&mut rng, &[2, 5, 4, 3])];
    check(
        &format!("conv{kernel}x{kernel}"),
        &mut store,
        &mut inputs,
        seed + 10,
        &mut |s, x| dot(&layer.forward(s, &x[0]).0, &r),
        &mut |s, x| {
            let (_, cache) = layer.forward(s, &x[0]);
            let mut tape = GradientTape::zeros_like(s);
            let dx = layer.backward(s, &mut tape, cache, &r);
            (tape, vec![dx])
        },
    )
}

pub fn conv3x3() -> f64 {
    conv_case(3, 3)
}

pub fn conv1x1() -> f64 {
    conv_case(1, 4)
}

pub fn conv_transpose() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let layer = ConvTranspose2x2::new(&mut store, "up", 3, 2, &mut rng);
    jitter(&mut store, &mut rng);
    let r = randn(&mut rng, &[2, 4, 6, 2]);
    let mut inputs = vec![randn(&mut rng, &[2, 2, 3, 3])];
    check(
        "conv_transpose",
        &mut store,
        &mut inputs,
        15,
        &mut |s, x| dot(&layer.forward(s, &x[0]), &r),
        &mut |s, x| {
            let mut tape = GradientTape::zeros_like(s);
            let dx = layer.backward(s, &mut tape, &x[0], &r);
            (tape, vec![dx])
        },
    )
}

fn batch_norm_case(mode: Mode, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = BatchNorm::new(&mut store, "bn", 3);
    jitter(&mut store, &mut rng);
    let r = randn(&mut rng, &[2, 3, 3, 3]);
    let mut inputs = vec![randn(&mut rng, &[2, 3, 3, 3])];
    check(
        &format!("batch_norm {mode:?}"),
        &mut store,
        &mut inputs,
        seed + 10,
        &mut |s, x| dot(&layer.forward(s, &x[0], mode).0, &r),
        &mut |s, x| {
            let (_, cache) = layer.forward(s, &x[0], mode);
            let mut tape = GradientTape::zeros_like(s);
            let dx = layer.backward(s, &mut tape, cache, &r);
            (tape, vec![dx])
        },
    )
}

pub fn batch_norm_with_batch_statistics() -> f64 {
    batch_norm_case(Mode::Train, 6)
}

pub fn batch_norm_with_running_statistics() -> f64 {
    batch_norm_case(Mode::Eval, 7)
}

/// Parameter-free maps share a trivial store.
fn stateless(
    label: &str,
    seed: u64,
    shape: &[usize],
    out_shape: &[usize],
    f: fn(&Tensor<f64>) -> Tensor<f64>,
    df: &dyn Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let r = randn(&mut rng, out_shape);
    let mut inputs = vec![randn(&mut rng, shape)];
    check(
        label,
        &mut store,
        &mut inputs,
        seed + 10,
        &mut |_, x| dot(&f(&x[0]), &r),
        &mut |s, x| (GradientTape::zeros_like(s), vec![df(&x[0], &r)]),
    )
}

pub fn gelu() -> f64 {
    stateless("gelu", 8, &[4, 5], &[4, 5], gelu_forward, &|x, dy| gelu_backward(x, dy))
}

pub fn average_pool() -> f64 {
    stateless(
        "avg_pool",
        9,
        &[2, 4, 6, 3],
        &[2, 2, 3, 3],
        avg_pool_forward,
        &|_, dy| avg_pool_backward([2, 4, 6, 3], dy),
    )
}

pub fn concat_and_per_sample_add() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let r = randn(&mut rng, &[2, 3, 3, 5]);
    let mut inputs = vec![
        randn(&mut rng, &[2, 3, 3, 2]),
        randn(&mut rng, &[2, 3, 3, 3]),
        randn(&mut rng, &[2, 5]),
    ];
    let forward = |x: &[Tensor<f64>]| {
        let mut y = concat_channels(&x[0], &x[1]);
        add_per_sample(&mut y, &x[2]);
        y
    };
    check(
        "concat + add_per_sample",
        &mut store,
        &mut inputs,
        20,
        &mut |_, x| dot(&forward(x), &r),
        &mut |s, _| {
            let (da, db) = split_channels(&r, 2);
            (GradientTape::zeros_like(s), vec![da, db, add_per_sample_grad(&r)])
        },
    )
}

fn res_block_case(cin: usize, cout: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = ResBlock::new(&mut store, "blk", cin, cout, 4, &mut rng);
    jitter(&mut store, &mut rng);
    let r = randn(&mut rng, &[2, 4, 4, cout]);
    let mut inputs = vec![randn(&mut rng, &[2, 4, 4, cin]), randn(&mut rng, &[2, 4])];
    check(
        &format!("res_block {cin}->{cout}"),
        &mut store,
        &mut inputs,
        seed + 10,
        &mut |s, x| dot(&block.forward(s, &x[0], &x[1], Mode::Train).0, &r),
        &mut |s, x| {
            let (_, cache) = block.forward(s, &x[0], &x[1], Mode::Train);
            let mut tape = GradientTape::zeros_like(s);
            let (dx, demb) = block.backward(s, &mut tape, cache, &r);
            (tape, vec![dx, demb])
        },
    )
}

pub fn res_block_with_projection() -> f64 {
    res_block_case(2, 3, 30)
}

pub fn res_block_with_identity_skip() -> f64 {
    res_block_case(3, 3, 31)
}

pub fn two_level_unet() -> f64 {
    let arch = Architecture {
        grid_size: 8,
        widths: vec![3, 4, 5],
        embed_dim: 6,
        num_classes: CapacityClass::COUNT,
    };
    let mut model = DenoiserModel::<f64>::new(arch, 40).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    jitter(model.params_mut(), &mut rng);
    let z = randn(&mut rng, &[3, 8, 8]);
    let r = randn(&mut rng, &[3, 8, 8]);
    let steps = [1usize, 37, 100];
    let idx = [0usize, 8, model.null_index()];
    // batch statistics make the output independent of the running averages
    // that each training-mode call updates
    let mut store = model.params().clone();
    let sync = |model: &mut DenoiserModel<f64>, s: &ParamStore<f64>| {
        *model.params_mut() = s.clone();
    };
    let model = std::cell::RefCell::new(model);
    check(
        "unet",
        &mut store,
        &mut [],
        42,
        &mut |s, _| {
            let mut m = model.borrow_mut();
            sync(&mut m, s);
            let out = m.forward(&z, &steps, &idx, Mode::Train).unwrap();
            m.clear_context();
            dot(&out, &r)
        },
        &mut |s, _| {
            let mut m = model.borrow_mut();
            sync(&mut m, s);
            m.forward(&z, &steps, &idx, Mode::Train).unwrap();
            (m.backward(&r).unwrap(), vec![])
        },
    )
}

/// Every layer case, named.
pub fn cases() -> Vec<(&'static str, fn() -> f64)> {
    vec![
        ("linear", linear),
        ("embedding", embedding),
        ("conv3x3", conv3x3),
        ("conv1x1", conv1x1),
        ("conv_transpose", conv_transpose),
        ("batch_norm_train", batch_norm_with_batch_statistics),
        ("batch_norm_eval", batch_norm_with_running_statistics),
        ("gelu", gelu),
        ("avg_pool", average_pool),
        ("concat_add", concat_and_per_sample_add),
        ("res_block_projection", res_block_with_projection),
        ("res_block_identity", res_block_with_identity_skip),
        ("unet_two_level", two_level_unet),
    ]
}
