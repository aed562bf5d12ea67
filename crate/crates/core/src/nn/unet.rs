//! U-Net noise estimator built from residual convolutional blocks.
//!
//! Each block is conv → batch norm → GELU, plus the conditioning vector
//! projected to the block width, then conv → batch norm → GELU, and finally
//! a residual add of the (1x1-projected when widths differ) input. Encoder
//! levels are joined by 2x2 average pooling; decoder levels upsample with
//! 2x2 transposed convolutions and concatenate the matching encoder output.
//! The conditioning vector is a projected sinusoidal step embedding plus a
//! learned class embedding; the last class row stands for "no class".

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::CapacityClass;
use crate::error::{Error, Result};
pub use crate::nn::layers::Mode;
use crate::nn::layers::{
    add_per_sample, add_per_sample_grad, avg_pool_backward, avg_pool_forward, concat_channels, dims4, gelu,
    gelu_backward, gelu_forward, split_channels, step_features, BatchNorm, BnCache, Conv2d, ConvCache,
    ConvTranspose2x2, Embedding, Linear,
};
use crate::nn::{GradientTape, ParamStore, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Side of the square input grid.
    pub grid_size: usize,
    /// Channel width per level, outermost first; `widths.len() - 1` pooling stages.
    pub widths: Vec<usize>,
    /// Width of the step/class conditioning vector.
    pub embed_dim: usize,
    /// Number of conditioning classes, excluding the null class.
    pub num_classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            grid_size: 16,
            widths: vec![16, 32, 64],
            embed_dim: 32,
            num_classes: CapacityClass::COUNT,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::invalid("architecture needs at least two non-zero level widths"));
        }
        let levels = self.widths.len() - 1;
        if self.grid_size == 0 || self.grid_size % (1 << levels) != 0 {
            return Err(Error::invalid(format!(
                "grid size {} is not divisible by 2^{levels}",
                self.grid_size
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::invalid("embedding width must be even and positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("at least one class is required"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub cond: Linear,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    /// 1x1 projection when input and output widths differ.
    pub skip: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    conv1: ConvCache<T>,
    bn1: BnCache<T>,
    pre_act1: Tensor<T>,
    cond_in: Tensor<T>,
    conv2: ConvCache<T>,
    bn2: BnCache<T>,
    pre_act2: Tensor<T>,
    skip: Option<ConvCache<T>>,
}

impl ResBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        embed_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ResBlock {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cout),
            cond: Linear::new(store, &format!("{name}.cond"), embed_dim, cout, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, rng)),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        emb: &Tensor<T>,
        mode: Mode,
    ) -> (Tensor<T>, BlockCache<T>) {
        let (h, conv1) = self.conv1.forward(store, x);
        let (pre_act1, bn1) = self.bn1.forward(store, &h, mode);
        let mut h = gelu_forward(&pre_act1);
        add_per_sample(&mut h, &self.cond.forward(store, emb));
        let (h, conv2) = self.conv2.forward(store, &h);
        let (pre_act2, bn2) = self.bn2.forward(store, &h, mode);
        let mut out = gelu_forward(&pre_act2);
        let skip = match &self.skip {
            Some(proj) => {
                let (s, cache) = proj.forward(store, x);
                out.add_assign(&s);
                Some(cache)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        let cache = BlockCache {
            conv1,
            bn1,
            pre_act1,
            cond_in: emb.clone(),
            conv2,
            bn2,
            pre_act2,
            skip,
        };
        (out, cache)
    }

    /// Inference-mode output without caches; normalization is folded into
    /// the convolutions and the activations are fused into their epilogues.
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, emb: &Tensor<T>) -> Tensor<T> {
        let [_, h, w, _] = dims4(x);
        let hw = h * w;
        let cout = self.conv1.cout;
        let cond = self.cond.forward(store, emb);
        let cond = cond.data();
        let (s1, t1) = self.bn1.eval_affine(store);
        let inner = self.conv1.forward_affine(store, x, &s1, &t1, |p, row| {
            let e = &cond[(p / hw) * cout..(p / hw + 1) * cout];
            for (v, &add) in row.iter_mut().zip(e) {
                *v = gelu(*v) + add;
            }
        });
        let projected = self.skip.as_ref().map(|proj| {
            let ones = vec![T::one(); cout];
            let zeros = vec![T::zero(); cout];
            proj.forward_affine(store, x, &ones, &zeros, |_, _| {})
        });
        let residual = projected.as_ref().unwrap_or(x).data();
        let (s2, t2) = self.bn2.eval_affine(store);
        self.conv2.forward_affine(store, &inner, &s2, &t2, |p, row| {
            let r = &residual[p * cout..(p + 1) * cout];
            for (v, &add) in row.iter_mut().zip(r) {
                *v = gelu(*v) + add;
            }
        })
    }

    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, cache: &BlockCache<T>) {
        self.bn1.update_running(store, &cache.bn1);
        self.bn2.update_running(store, &cache.bn2);
    }

    /// Returns gradients with respect to the block input and the conditioning vector.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut GradientTape<T>,
        cache: BlockCache<T>,
        dy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let mut dx = match (&self.skip, cache.skip) {
            (Some(proj), Some(c)) => proj.backward(store, tape, c, dy),
            _ => dy.clone(),
        };
        let d = gelu_backward(&cache.pre_act2, dy);
        let d = self.bn2.backward(store, tape, cache.bn2, &d);
        let d = self.conv2.backward(store, tape, cache.conv2, &d);
        let demb = self
            .cond
            .backward(store, tape, &cache.cond_in, &add_per_sample_grad(&d));
        let d = gelu_backward(&cache.pre_act1, &d);
        let d = self.bn1.backward(store, tape, cache.bn1, &d);
        dx.add_assign(&self.conv1.backward(store, tape, cache.conv1, &d));
        (dx, demb)
    }
}

#[derive(Clone, Debug)]
struct Network {
    step_in: Linear,
    step_out: Linear,
    class_embed: Embedding,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ConvTranspose2x2>,
    dec: Vec<ResBlock>,
    head: Conv2d,
}

/// Everything the backward pass needs from one training-mode forward pass.
#[derive(Clone, Debug)]
struct ForwardContext<T> {
    steps_feat: Tensor<T>,
    step_hidden_pre: Tensor<T>,
    step_hidden: Tensor<T>,
    class_idx: Vec<usize>,
    emb: Tensor<T>,
    down: Vec<BlockCache<T>>,
    pool_shapes: Vec<[usize; 4]>,
    mid: BlockCache<T>,
    up_in: Vec<Tensor<T>>,
    skip_widths: Vec<usize>,
    dec: Vec<BlockCache<T>>,
    head: ConvCache<T>,
}

/// The learnable noise estimator.
#[derive(Clone, Debug)]
pub struct DenoiserModel<T = f32> {
    arch: Architecture,
    store: ParamStore<T>,
    net: Network,
    context: Option<ForwardContext<T>>,
}

impl<T: Scalar> DenoiserModel<T> {
    /// Fresh weights drawn from `seed`; the output head starts at zero.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = arch.embed_dim;
        let w = &arch.widths;
        let levels = arch.levels();
        let step_in = Linear::new(&mut store, "step.in", e, e, &mut rng);
        let step_out = Linear::new(&mut store, "step.out", e, e, &mut rng);
        let class_embed = Embedding::new(&mut store, "class", arch.num_classes + 1, e, &mut rng);
        let mut down = Vec::with_capacity(levels);
        let mut cin = 1;
        for (l, &width) in w[..levels].iter().enumerate() {
            down.push(ResBlock::new(&mut store, &format!("down{l}"), cin, width, e, &mut rng));
            cin = width;
        }
        let mid = ResBlock::new(&mut store, "mid", w[levels - 1], w[levels], e, &mut rng);
        let mut up = Vec::with_capacity(levels);
        let mut dec = Vec::with_capacity(levels);
        for l in 0..levels {
            up.push(ConvTranspose2x2::new(
                &mut store,
                &format!("up{l}"),
                w[l + 1],
                w[l],
                &mut rng,
            ));
            dec.push(ResBlock::new(
                &mut store,
                &format!("dec{l}"),
                2 * w[l],
                w[l],
                e,
                &mut rng,
            ));
        }
        let head = Conv2d::new(&mut store, "head", w[0], 1, 1, &mut rng);
        store.get_mut(head.weight).data_mut().fill(T::zero());
        Ok(DenoiserModel {
            arch,
            store,
            net: Network {
                step_in,
                step_out,
                class_embed,
                down,
                mid,
                up,
                dec,
                head,
            },
            context: None,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Row of the class table holding the null class.
    pub fn null_index(&self) -> usize {
        self.arch.num_classes
    }

    /// Same model with every parameter converted to another element type.
    pub fn cast<U: Scalar>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            arch: self.arch.clone(),
            store: self.store.cast(),
            net: self.net.clone(),
            context: None,
        }
    }

    /// Class-table rows for optional labels; `None` maps to the null row.
    pub fn class_indices(&self, classes: &[Option<CapacityClass>]) -> Result<Vec<usize>> {
        classes
            .iter()
            .map(|c| match c {
                None => Ok(self.null_index()),
                Some(c) if c.index() < self.arch.num_classes => Ok(c.index()),
                Some(c) => Err(Error::invalid(format!("class {c} is not in the model's class table"))),
            })
            .collect()
    }

    fn check_inputs(&self, z: &Tensor<T>, steps: &[usize], class_idx: &[usize]) -> Result<usize> {
        let g = self.arch.grid_size;
        let batch = match *z.shape() {
            [b, h, w] | [b, h, w, 1] if h == g && w == g => b,
            ref s => {
                return Err(Error::invalid(format!(
                    "latent shape {s:?} is not [batch, {g}, {g}(, 1)]"
                )))
            }
        };
        if steps.len() != batch || class_idx.len() != batch {
            return Err(Error::invalid(format!(
                "batch of {batch} latents with {} steps and {} classes",
                steps.len(),
                class_idx.len()
            )));
        }
        if let Some(&bad) = class_idx.iter().find(|&&c| c > self.arch.num_classes) {
            return Err(Error::invalid(format!("class row {bad} outside the embedding table")));
        }
        if steps.contains(&0) {
            return Err(Error::invalid("diffusion steps start at 1"));
        }
        Ok(batch)
    }

    /// Inference-mode noise estimate; normalization uses running statistics.
    pub fn estimate(&self, z: &Tensor<T>, steps: &[usize], classes: &[Option<CapacityClass>]) -> Result<Tensor<T>> {
        let idx = self.class_indices(classes)?;
        self.estimate_rows(z, steps, &idx)
    }

    /// [`estimate`](Self::estimate) addressed by raw class-table rows.
    pub fn estimate_rows(&self, z: &Tensor<T>, steps: &[usize], class_idx: &[usize]) -> Result<Tensor<T>> {
        let b = self.check_inputs(z, steps, class_idx)?;
        Ok(self.infer(z, b, steps, class_idx))
    }

    /// Inference with the encoder output of `level` replaced by zeros before
    /// it reaches the decoder. Diagnostic for skip-connection wiring.
    pub fn estimate_without_skip(
        &self,
        z: &Tensor<T>,
        steps: &[usize],
        class_idx: &[usize],
        level: usize,
    ) -> Result<Tensor<T>> {
        let b = self.check_inputs(z, steps, class_idx)?;
        if level >= self.arch.levels() {
            return Err(Error::invalid(format!("no skip connection at level {level}")));
        }
        Ok(self.run(z, b, steps, class_idx, Mode::Eval, Some(level)).0)
    }

    /// Forward pass that records what [`backward`](Self::backward) needs.
    /// In [`Mode::Train`] batch statistics are used and the running
    /// averages are updated.
    pub fn forward(&mut self, z: &Tensor<T>, steps: &[usize], class_idx: &[usize], mode: Mode) -> Result<Tensor<T>> {
        let b = self.check_inputs(z, steps, class_idx)?;
        let (out, ctx) = self.run(z, b, steps, class_idx, mode, None);
        if mode == Mode::Train {
            for (block, cache) in self.net.down.iter().zip(&ctx.down) {
                block.update_running(&mut self.store, cache);
            }
            self.net.mid.update_running(&mut self.store, &ctx.mid);
            for (block, cache) in self.net.dec.iter().zip(&ctx.dec) {
                block.update_running(&mut self.store, cache);
            }
        }
        self.context = Some(ctx);
        Ok(out)
    }

    fn embedding(&self, steps: &[usize], class_idx: &[usize]) -> Tensor<T> {
        let net = &self.net;
        let feat = step_features::<T>(steps, self.arch.embed_dim);
        let hidden = gelu_forward(&net.step_in.forward(&self.store, &feat));
        let mut emb = net.step_out.forward(&self.store, &hidden);
        emb.add_assign(&net.class_embed.forward(&self.store, class_idx));
        emb
    }

    /// Cache-free inference; numerically equivalent to an eval-mode `run`.
    fn infer(&self, z: &Tensor<T>, b: usize, steps: &[usize], class_idx: &[usize]) -> Tensor<T> {
        let net = &self.net;
        let store = &self.store;
        let g = self.arch.grid_size;
        let emb = self.embedding(steps, class_idx);
        let mut h = z.clone().reshape(&[b, g, g, 1]);
        let mut skips = Vec::with_capacity(net.down.len());
        for block in &net.down {
            let out = block.infer(store, &h, &emb);
            h = avg_pool_forward(&out);
            skips.push(out);
        }
        let mut h = net.mid.infer(store, &h, &emb);
        for l in (0..net.dec.len()).rev() {
            let u = net.up[l].forward(store, &h);
            let cat = concat_channels(&u, &skips[l]);
            h = net.dec[l].infer(store, &cat, &emb);
        }
        let ones = [T::one()];
        let zeros = [T::zero()];
        net.head
            .forward_affine(store, &h, &ones, &zeros, |_, _| {})
            .reshape(&[b, g, g])
    }

    fn run(
        &self,
        z: &Tensor<T>,
        b: usize,
        steps: &[usize],
        class_idx: &[usize],
        mode: Mode,
        ablate: Option<usize>,
    ) -> (Tensor<T>, ForwardContext<T>) {
        let net = &self.net;
        let store = &self.store;
        let g = self.arch.grid_size;
        let levels = self.arch.levels();

        let steps_feat = step_features::<T>(steps, self.arch.embed_dim);
        let step_hidden_pre = net.step_in.forward(store, &steps_feat);
        let step_hidden = gelu_forward(&step_hidden_pre);
        let mut emb = net.step_out.forward(store, &step_hidden);
        emb.add_assign(&net.class_embed.forward(store, class_idx));

        let mut h = z.clone().reshape(&[b, g, g, 1]);
        let mut skips = Vec::with_capacity(levels);
        let mut down = Vec::with_capacity(levels);
        let mut pool_shapes = Vec::with_capacity(levels);
        for block in &net.down {
            let (out, cache) = block.forward(store, &h, &emb, mode);
            down.push(cache);
            pool_shapes.push(dims4(&out));
            h = avg_pool_forward(&out);
            skips.push(out);
        }
        let (mut h, mid) = net.mid.forward(store, &h, &emb, mode);

        let mut up_in = vec![Tensor::zeros(&[0]); levels];
        let mut dec: Vec<Option<BlockCache<T>>> = vec![None; levels];
        let mut skip_widths = vec![0; levels];
        for l in (0..levels).rev() {
            let u = net.up[l].forward(store, &h);
            up_in[l] = h;
            skip_widths[l] = u.channels();
            let skip = if ablate == Some(l) {
                Tensor::zeros(skips[l].shape())
            } else {
                std::mem::replace(&mut skips[l], Tensor::zeros(&[0]))
            };
            let cat = concat_channels(&u, &skip);
            let (out, cache) = net.dec[l].forward(store, &cat, &emb, mode);
            dec[l] = Some(cache);
            h = out;
        }
        let (out, head) = net.head.forward(store, &h);
        let ctx = ForwardContext {
            steps_feat,
            step_hidden_pre,
            step_hidden,
            class_idx: class_idx.to_vec(),
            emb,
            down,
            pool_shapes,
            mid,
            up_in,
            skip_widths,
            dec: dec.into_iter().map(|c| c.expect("every level decoded")).collect(),
            head,
        };
        (out.reshape(&[b, g, g]), ctx)
    }

    /// Gradients of the objective whose derivative with respect to the last
    /// forward output is `seed`. Consumes the recorded forward context.
    pub fn backward(&mut self, seed: &Tensor<T>) -> Result<GradientTape<T>> {
        let ctx = self
            .context
            .take()
            .ok_or_else(|| Error::State("backward needs a preceding forward pass".into()))?;
        let g = self.arch.grid_size;
        let b = ctx.class_idx.len();
        if seed.len() != b * g * g {
            return Err(Error::invalid(format!(
                "loss seed has {} entries, expected {}",
                seed.len(),
                b * g * g
            )));
        }
        let net = &self.net;
        let store = &self.store;
        let mut tape = GradientTape::zeros_like(store);
        let levels = self.arch.levels();

        let seed = seed.clone().reshape(&[b, g, g, 1]);
        let mut d = net.head.backward(store, &mut tape, ctx.head, &seed);
        let mut demb = Tensor::zeros(ctx.emb.shape());
        let mut dskips: Vec<Tensor<T>> = vec![Tensor::zeros(&[0]); levels];
        for (l, cache) in ctx.dec.into_iter().enumerate() {
            let (dcat, de) = net.dec[l].backward(store, &mut tape, cache, &d);
            demb.add_assign(&de);
            let (du, dskip) = split_channels(&dcat, ctx.skip_widths[l]);
            dskips[l] = dskip;
            d = net.up[l].backward(store, &mut tape, &ctx.up_in[l], &du);
        }
        let (mut d, de) = net.mid.backward(store, &mut tape, ctx.mid, &d);
        demb.add_assign(&de);
        for (l, cache) in ctx.down.into_iter().enumerate().rev() {
            let mut dout = avg_pool_backward(ctx.pool_shapes[l], &d);
            dout.add_assign(&dskips[l]);
            let (dx, de) = net.down[l].backward(store, &mut tape, cache, &dout);
            demb.add_assign(&de);
            d = dx;
        }

        net.class_embed.backward(&mut tape, &ctx.class_idx, &demb);
        let dh = net.step_out.backward(store, &mut tape, &ctx.step_hidden, &demb);
        let dpre = gelu_backward(&ctx.step_hidden_pre, &dh);
        net.step_in.backward(store, &mut tape, &ctx.steps_feat, &dpre);
        Ok(tape)
    }

    pub fn has_forward_context(&self) -> bool {
        self.context.is_some()
    }

    pub fn clear_context(&mut self) {
        self.context = None;
    }
}

/// Mean squared error and its gradient with respect to `estimate`.
pub fn mse_loss<T: Scalar>(estimate: &Tensor<T>, target: &Tensor<T>) -> (f64, Tensor<T>) {
    assert_eq!(estimate.len(), target.len(), "loss operands differ in size");
    let n = estimate.len() as f64;
    let mut loss = 0.0;
    let scale = T::of_f64(2.0 / n);
    let grad = estimate
        .data()
        .iter()
        .zip(target.data())
        .map(|(&e, &t)| {
            let r = e - t;
            loss += r.as_f64() * r.as_f64();
            r * scale
        })
        .collect();
    (loss / n, Tensor::from_vec(estimate.shape(), grad))
}
