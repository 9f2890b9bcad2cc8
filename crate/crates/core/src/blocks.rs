//! Self-attention block, TCN blocks and stacks, mask-estimation stage and
//! fusion block, each with a forward pass that records what its backward
//! pass needs.

use crate::error::{Error, Result};
use crate::nn::ops::{self, BnCache, GlnCache, Mode, GLN_EPS};
use crate::nn::{Initializer, ParamId, ParamKind, ParamStore, Segments, Tensor};

/// Receptive field, in frames, of a stack of `blocks` TCN blocks with kernel
/// size `kernel` and dilations 1, 2, 4, ...: `1 + (P−1)(2^L − 1)`.
pub fn receptive_field(kernel: usize, blocks: usize) -> usize {
    1 + (kernel.saturating_sub(1)) * ((1usize << blocks) - 1)
}

/// Dilation of the `position`-th block (1-based) of a stack.
pub fn dilation(position: usize) -> usize {
    1 << (position - 1)
}

/// Batch-norm running statistics produced by a train-mode pass, applied to
/// the store once the pass is over.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub cache: BnCache,
    pub count: usize,
}

/// Per-pass state: mode plus the batch-norm updates gathered so far.
#[derive(Debug)]
pub struct Pass {
    pub mode: Mode,
    pub stat_updates: Vec<StatUpdate>,
}

impl Pass {
    pub fn new(mode: Mode) -> Self {
        Pass {
            mode,
            stat_updates: Vec::new(),
        }
    }

    /// Folds the collected batch statistics into the running averages.
    pub fn commit(self, store: &mut ParamStore) {
        for u in self.stat_updates {
            let mut mean = store.value(u.mean).clone();
            let mut var = store.value(u.var).clone();
            ops::update_running_stats(&mut mean, &mut var, &u.cache, u.count);
            crate::nn::round_to_f32(&mut mean);
            crate::nn::round_to_f32(&mut var);
            *store.value_mut(u.mean) = mean;
            *store.value_mut(u.var) = var;
        }
    }
}

// ---------------------------------------------------------------------------
// Layer wrappers binding primitives to stored parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1x1 {
    pub fn build(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init.uniform_fan_in(&[c_out, c_in], c_in),
            ParamKind::Trainable,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), ParamKind::Trainable)?;
        Ok(Conv1x1 { weight, bias })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        ops::pointwise_conv(x, store.value(self.weight), store.value(self.bias))
    }

    /// Accumulates weight gradients and returns the input gradient.
    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Tensor {
        let g = ops::pointwise_conv_backward(x, store.value(self.weight), dy);
        store.accumulate(self.weight, &g.dweight);
        store.accumulate(self.bias, &g.dbias);
        g.dx
    }
}

#[derive(Clone, Debug)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub const INIT_SLOPE: f64 = 0.25;

    pub fn build(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let slope = store.add(
            format!("{name}.slope"),
            Tensor::full(&[channels], Self::INIT_SLOPE),
            ParamKind::Trainable,
        )?;
        Ok(PRelu { slope })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        ops::prelu(x, store.value(self.slope))
    }

    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Tensor {
        let (dx, ds) = ops::prelu_backward(x, store.value(self.slope), dy);
        store.accumulate(self.slope, &ds);
        dx
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn build(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full(&[channels], 1.0),
                ParamKind::Trainable,
            )?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable)?,
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            )?,
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
                ParamKind::Buffer,
            )?,
        })
    }

    pub fn forward(&self, store: &ParamStore, pass: &mut Pass, x: &Tensor) -> Result<(Tensor, BnCache)> {
        let (y, cache) = ops::batch_norm(
            x,
            store.value(self.gamma),
            store.value(self.beta),
            store.value(self.running_mean),
            store.value(self.running_var),
            pass.mode,
        )?;
        if pass.mode == Mode::Train {
            pass.stat_updates.push(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                cache: cache.clone(),
                count: x.cols(),
            });
        }
        Ok((y, cache))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &BnCache, dy: &Tensor) -> Tensor {
        let (dx, dg, db) = ops::batch_norm_backward(cache, store.value(self.gamma), dy);
        store.accumulate(self.gamma, &dg);
        store.accumulate(self.beta, &db);
        dx
    }
}

#[derive(Clone, Debug)]
pub struct GlobalLayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GlobalLayerNorm {
    pub fn build(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(GlobalLayerNorm {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full(&[channels], 1.0),
                ParamKind::Trainable,
            )?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, segs: &Segments) -> Result<(Tensor, GlnCache)> {
        ops::global_layer_norm_segments(x, store.value(self.gamma), store.value(self.beta), GLN_EPS, segs)
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &GlnCache, segs: &Segments, dy: &Tensor) -> Tensor {
        let (dx, dg, db) = ops::global_layer_norm_backward(cache, store.value(self.gamma), segs, dy);
        store.accumulate(self.gamma, &dg);
        store.accumulate(self.beta, &db);
        dx
    }
}

// ---------------------------------------------------------------------------
// Self-attention block
// ---------------------------------------------------------------------------

/// Query/key/value 1×1 convolutions over the frequency axis, attention
/// weights `softmax_columns(Q Kᵀ / √F)`, output `X + δ · Ŵ V`.
#[derive(Clone, Debug)]
pub struct SaBlock {
    pub query: Conv1x1,
    pub key: Conv1x1,
    pub value: Conv1x1,
    pub delta: ParamId,
    pub features: usize,
}

#[derive(Clone, Debug)]
pub struct SaCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Vec<Tensor>,
    a: Tensor,
}

impl SaBlock {
    pub fn build(store: &mut ParamStore, init: &mut Initializer, name: &str, features: usize) -> Result<Self> {
        Ok(SaBlock {
            query: Conv1x1::build(store, init, &format!("{name}.query"), features, features)?,
            key: Conv1x1::build(store, init, &format!("{name}.key"), features, features)?,
            value: Conv1x1::build(store, init, &format!("{name}.value"), features, features)?,
            delta: store.add(format!("{name}.delta"), Tensor::scalar(0.0), ParamKind::Trainable)?,
            features,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, segs: &Segments) -> Result<(Tensor, SaCache)> {
        if x.rows() != self.features {
            return Err(Error::invalid(format!(
                "attention block expects {} rows, got {}",
                self.features,
                x.rows()
            )));
        }
        let q = self.query.forward(store, x)?;
        let k = self.key.forward(store, x)?;
        let v = self.value.forward(store, x)?;
        let scale = 1.0 / (self.features as f64).sqrt();
        let mut a = Tensor::zeros(x.shape());
        let mut attn = Vec::with_capacity(segs.count());
        for (start, len) in segs.spans() {
            let qs = q.slice_cols(start, len);
            let ks = k.slice_cols(start, len);
            let vs = v.slice_cols(start, len);
            let w = ops::matmul_nt(&qs, &ks)?.scale(scale);
            let w_hat = ops::softmax_columns(&w);
            a.set_cols(start, &ops::matmul(&w_hat, &vs)?);
            attn.push(w_hat);
        }
        let delta = store.value(self.delta).data()[0];
        let mut y = x.clone();
        y.axpy(delta, &a);
        Ok((
            y,
            SaCache {
                x: x.clone(),
                q,
                k,
                v,
                attn,
                a,
            },
        ))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &SaCache, segs: &Segments, dy: &Tensor) -> Tensor {
        let delta = store.value(self.delta).data()[0];
        let ddelta: f64 = dy.data().iter().zip(cache.a.data()).map(|(g, a)| g * a).sum();
        store.accumulate(self.delta, &Tensor::scalar(ddelta));

        let scale = 1.0 / (self.features as f64).sqrt();
        let da = dy.scale(delta);
        let mut dq = Tensor::zeros(dy.shape());
        let mut dk = Tensor::zeros(dy.shape());
        let mut dv = Tensor::zeros(dy.shape());
        for ((start, len), w_hat) in segs.spans().zip(&cache.attn) {
            let das = da.slice_cols(start, len);
            let qs = cache.q.slice_cols(start, len);
            let ks = cache.k.slice_cols(start, len);
            let vs = cache.v.slice_cols(start, len);
            let (dw_hat, dvs) = ops::matmul_backward(w_hat, &vs, &das);
            let dw = ops::softmax_columns_backward(w_hat, &dw_hat).scale(scale);
            let (dqs, dkt) = ops::matmul_backward(&qs, &ks.transpose(), &dw);
            dq.set_cols(start, &dqs);
            dk.set_cols(start, &dkt.transpose());
            dv.set_cols(start, &dvs);
        }
        let mut dx = dy.clone();
        dx.add_assign(&self.query.backward(store, &cache.x, &dq));
        dx.add_assign(&self.key.backward(store, &cache.x, &dk));
        dx.add_assign(&self.value.backward(store, &cache.x, &dv));
        dx
    }
}

// ---------------------------------------------------------------------------
// TCN block and stack
// ---------------------------------------------------------------------------

/// `y = x + out_conv(bn2(prelu2(dconv(bn1(prelu1(in_conv(x)))))))`
#[derive(Clone, Debug)]
pub struct TcnBlock {
    pub in_conv: Conv1x1,
    pub prelu1: PRelu,
    pub bn1: BatchNorm,
    pub dconv_kernel: ParamId,
    pub dconv_bias: ParamId,
    pub prelu2: PRelu,
    pub bn2: BatchNorm,
    pub out_conv: Conv1x1,
    pub dilation: usize,
}

#[derive(Clone, Debug)]
pub struct TcnCache {
    x: Tensor,
    h_in: Tensor,
    bn1: BnCache,
    h_norm1: Tensor,
    h_dconv: Tensor,
    bn2: BnCache,
    h_norm2: Tensor,
}

impl TcnBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        hidden: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {kernel}")));
        }
        let in_conv = Conv1x1::build(store, init, &format!("{name}.in_conv"), channels, hidden)?;
        let prelu1 = PRelu::build(store, &format!("{name}.prelu1"), hidden)?;
        let bn1 = BatchNorm::build(store, &format!("{name}.bn1"), hidden)?;
        let dconv_kernel = store.add(
            format!("{name}.dconv.kernel"),
            init.uniform_fan_in(&[hidden, kernel], kernel),
            ParamKind::Trainable,
        )?;
        let dconv_bias = store.add(
            format!("{name}.dconv.bias"),
            Tensor::zeros(&[hidden]),
            ParamKind::Trainable,
        )?;
        let prelu2 = PRelu::build(store, &format!("{name}.prelu2"), hidden)?;
        let bn2 = BatchNorm::build(store, &format!("{name}.bn2"), hidden)?;
        let out_conv = Conv1x1::build(store, init, &format!("{name}.out_conv"), hidden, channels)?;
        Ok(TcnBlock {
            in_conv,
            prelu1,
            bn1,
            dconv_kernel,
            dconv_bias,
            prelu2,
            bn2,
            out_conv,
            dilation,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        pass: &mut Pass,
        x: &Tensor,
        segs: &Segments,
    ) -> Result<(Tensor, TcnCache)> {
        let h_in = self.in_conv.forward(store, x)?;
        let h_act1 = self.prelu1.forward(store, &h_in)?;
        let (h_norm1, bn1) = self.bn1.forward(store, pass, &h_act1)?;
        let h_dconv = ops::depthwise_dconv_segments(
            &h_norm1,
            store.value(self.dconv_kernel),
            store.value(self.dconv_bias),
            self.dilation,
            segs,
        )?;
        let h_act2 = self.prelu2.forward(store, &h_dconv)?;
        let (h_norm2, bn2) = self.bn2.forward(store, pass, &h_act2)?;
        let mut y = self.out_conv.forward(store, &h_norm2)?;
        y.add_assign(x);
        Ok((
            y,
            TcnCache {
                x: x.clone(),
                h_in,
                bn1,
                h_norm1,
                h_dconv,
                bn2,
                h_norm2,
            },
        ))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &TcnCache, segs: &Segments, dy: &Tensor) -> Tensor {
        let g = self.out_conv.backward(store, &cache.h_norm2, dy);
        let g = self.bn2.backward(store, &cache.bn2, &g);
        let g = self.prelu2.backward(store, &cache.h_dconv, &g);
        let dc = ops::depthwise_dconv_backward(&cache.h_norm1, store.value(self.dconv_kernel), self.dilation, segs, &g);
        store.accumulate(self.dconv_kernel, &dc.dkernel);
        store.accumulate(self.dconv_bias, &dc.dbias);
        let g = self.bn1.backward(store, &cache.bn1, &dc.dx);
        let g = self.prelu1.backward(store, &cache.h_in, &g);
        let mut dx = self.in_conv.backward(store, &cache.x, &g);
        dx.add_assign(dy);
        dx
    }
}

/// `L` TCN blocks with dilations 1, 2, ..., 2^(L−1).
#[derive(Clone, Debug)]
pub struct TcnStack {
    pub blocks: Vec<TcnBlock>,
}

impl TcnStack {
    pub fn build(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        hidden: usize,
        kernel: usize,
        depth: usize,
    ) -> Result<Self> {
        let blocks = (1..=depth)
            .map(|l| {
                TcnBlock::build(
                    store,
                    init,
                    &format!("{name}.block{l}"),
                    channels,
                    hidden,
                    kernel,
                    dilation(l),
                )
            })
            .collect::<Result<_>>()?;
        Ok(TcnStack { blocks })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        pass: &mut Pass,
        x: &Tensor,
        segs: &Segments,
    ) -> Result<(Tensor, Vec<TcnCache>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(store, pass, &h, segs)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    pub fn backward(&self, store: &mut ParamStore, caches: &[TcnCache], segs: &Segments, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        for (b, c) in self.blocks.iter().zip(caches).rev() {
            g = b.backward(store, c, segs, &g);
        }
        g
    }
}

// ---------------------------------------------------------------------------
// Stage
// ---------------------------------------------------------------------------

/// Channel geometry of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageDims {
    pub features: usize,
    pub bottleneck: usize,
    pub hidden: usize,
    pub stacks: usize,
    pub depth: usize,
    pub kernel: usize,
}

/// SA block → bottleneck (F→B) → R stacks of L TCN blocks → projection
/// (B→F) → sigmoid.
#[derive(Clone, Debug)]
pub struct Stage {
    pub sa: SaBlock,
    pub bottleneck: Conv1x1,
    pub stacks: Vec<TcnStack>,
    pub out_proj: Conv1x1,
    pub dims: StageDims,
}

#[derive(Clone, Debug)]
pub struct StageCache {
    sa: SaCache,
    sa_out: Tensor,
    stacks: Vec<Vec<TcnCache>>,
    tcn_out: Tensor,
    mask: Tensor,
}

impl StageCache {
    pub fn mask(&self) -> &Tensor {
        &self.mask
    }
}

impl Stage {
    pub fn build(store: &mut ParamStore, init: &mut Initializer, name: &str, dims: StageDims) -> Result<Self> {
        if dims.stacks == 0 || dims.depth == 0 {
            return Err(Error::invalid("a stage needs at least one stack of one block"));
        }
        let sa = SaBlock::build(store, init, &format!("{name}.sa"), dims.features)?;
        let bottleneck = Conv1x1::build(
            store,
            init,
            &format!("{name}.bottleneck"),
            dims.features,
            dims.bottleneck,
        )?;
        let stacks = (1..=dims.stacks)
            .map(|r| {
                TcnStack::build(
                    store,
                    init,
                    &format!("{name}.stack{r}"),
                    dims.bottleneck,
                    dims.hidden,
                    dims.kernel,
                    dims.depth,
                )
            })
            .collect::<Result<_>>()?;
        let out_proj = Conv1x1::build(store, init, &format!("{name}.out_proj"), dims.bottleneck, dims.features)?;
        Ok(Stage {
            sa,
            bottleneck,
            stacks,
            out_proj,
            dims,
        })
    }

    /// Mask in (0, 1) for the packed input.
    pub fn forward(&self, store: &ParamStore, pass: &mut Pass, x: &Tensor, segs: &Segments) -> Result<StageCache> {
        let (sa_out, sa) = self.sa.forward(store, x, segs)?;
        let mut h = self.bottleneck.forward(store, &sa_out)?;
        let mut stacks = Vec::with_capacity(self.stacks.len());
        for s in &self.stacks {
            let (y, c) = s.forward(store, pass, &h, segs)?;
            stacks.push(c);
            h = y;
        }
        let logits = self.out_proj.forward(store, &h)?;
        let mask = ops::sigmoid(&logits);
        Ok(StageCache {
            sa,
            sa_out,
            stacks,
            tcn_out: h,
            mask,
        })
    }

    /// Backpropagates a gradient with respect to the mask; returns the
    /// gradient with respect to the stage input.
    pub fn backward(&self, store: &mut ParamStore, cache: &StageCache, segs: &Segments, dmask: &Tensor) -> Tensor {
        let dlogits = ops::sigmoid_backward(&cache.mask, dmask);
        let mut g = self.out_proj.backward(store, &cache.tcn_out, &dlogits);
        for (s, c) in self.stacks.iter().zip(&cache.stacks).rev() {
            g = s.backward(store, c, segs, &g);
        }
        let g = self.bottleneck.backward(store, &cache.sa_out, &g);
        self.sa.backward(store, &cache.sa, segs, &g)
    }
}

// ---------------------------------------------------------------------------
// Fusion block
// ---------------------------------------------------------------------------

/// One input branch of the fusion block: 1×1 conv → PReLU → gLN.
#[derive(Clone, Debug)]
pub struct FusionBranch {
    pub conv: Conv1x1,
    pub prelu: PRelu,
    pub norm: GlobalLayerNorm,
}

#[derive(Clone, Debug)]
struct BranchCache {
    x: Tensor,
    conv: Tensor,
    gln: GlnCache,
}

impl FusionBranch {
    fn build(store: &mut ParamStore, init: &mut Initializer, name: &str, features: usize) -> Result<Self> {
        Ok(FusionBranch {
            conv: Conv1x1::build(store, init, &format!("{name}.conv"), features, features)?,
            prelu: PRelu::build(store, &format!("{name}.prelu"), features)?,
            norm: GlobalLayerNorm::build(store, &format!("{name}.gln"), features)?,
        })
    }

    fn forward(&self, store: &ParamStore, x: &Tensor, segs: &Segments) -> Result<(Tensor, BranchCache)> {
        let conv = self.conv.forward(store, x)?;
        let act = self.prelu.forward(store, &conv)?;
        let (y, gln) = self.norm.forward(store, &act, segs)?;
        Ok((
            y,
            BranchCache {
                x: x.clone(),
                conv,
                gln,
            },
        ))
    }

    fn backward(&self, store: &mut ParamStore, cache: &BranchCache, segs: &Segments, dy: &Tensor) -> Tensor {
        let g = self.norm.backward(store, &cache.gln, segs, dy);
        let g = self.prelu.backward(store, &cache.conv, &g);
        self.conv.backward(store, &cache.x, &g)
    }
}

/// Merges the masked original magnitude with the previous stage estimate.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub masked: FusionBranch,
    pub estimate: FusionBranch,
    pub post: FusionBranch,
    pub out_conv: Conv1x1,
    pub out_prelu: PRelu,
}

#[derive(Clone, Debug)]
pub struct FusionCache {
    masked: BranchCache,
    estimate: BranchCache,
    post: BranchCache,
    post_out: Tensor,
    out_conv: Tensor,
}

impl Fusion {
    pub fn build(store: &mut ParamStore, init: &mut Initializer, name: &str, features: usize) -> Result<Self> {
        Ok(Fusion {
            masked: FusionBranch::build(store, init, &format!("{name}.masked"), features)?,
            estimate: FusionBranch::build(store, init, &format!("{name}.estimate"), features)?,
            post: FusionBranch::build(store, init, &format!("{name}.post"), features)?,
            out_conv: Conv1x1::build(store, init, &format!("{name}.out_conv"), features, features)?,
            out_prelu: PRelu::build(store, &format!("{name}.out_prelu"), features)?,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        masked_orig: &Tensor,
        prev_est: &Tensor,
        segs: &Segments,
    ) -> Result<(Tensor, FusionCache)> {
        if masked_orig.shape() != prev_est.shape() {
            return Err(Error::invalid(format!(
                "fusion inputs differ in shape: {:?} vs {:?}",
                masked_orig.shape(),
                prev_est.shape()
            )));
        }
        let (a, masked) = self.masked.forward(store, masked_orig, segs)?;
        let (b, estimate) = self.estimate.forward(store, prev_est, segs)?;
        let mut sum = a;
        sum.add_assign(&b);
        let (post_out, post) = self.post.forward(store, &sum, segs)?;
        let out_conv = self.out_conv.forward(store, &post_out)?;
        let y = self.out_prelu.forward(store, &out_conv)?;
        Ok((
            y,
            FusionCache {
                masked,
                estimate,
                post,
                post_out,
                out_conv,
            },
        ))
    }

    /// Returns gradients with respect to `(masked_orig, prev_est)`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &FusionCache,
        segs: &Segments,
        dy: &Tensor,
    ) -> (Tensor, Tensor) {
        let g = self.out_prelu.backward(store, &cache.out_conv, dy);
        let g = self.out_conv.backward(store, &cache.post_out, &g);
        let g = self.post.backward(store, &cache.post, segs, &g);
        let dm = self.masked.backward(store, &cache.masked, segs, &g);
        let de = self.estimate.backward(store, &cache.estimate, segs, &g);
        (dm, de)
    }
}
