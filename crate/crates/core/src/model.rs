//! The two-branch segmentation network: independent context and target
//! U-Nets, up to three hooking junctions from the context decoder into the
//! target decoder, and auxiliary deep-supervision heads.
//!
//! Stage widths are `base · [1, 2, 4, 8, 10]`; with `base = 32` and 288-pixel
//! inputs the encoder yields 288²×32, 144²×64, 72²×128, 36²×256, 18²×320 and
//! the decoder 36²×256, 72²×128, 144²×64, 288²×32 before the class head.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};

use crate::attention::{AttentionHook, AttentionMap, HookingStage, DEFAULT_TOKEN_CAP};
use crate::error::{Error, Result};
use crate::nn::{join, ConvBlock, Conv2d, Layer, MaxPool2, ParamVisitor, ParamVisitorMut, Parameterized, Phase, UpConv2};
use crate::tensor::{FeatureMap, Real};

/// Width multipliers of the five encoder stages.
pub const STAGE_MULTIPLIERS: [usize; 5] = [1, 2, 4, 8, 10];
/// Number of hooking junctions (decoder depths 1..=3).
pub const HOOK_DEPTHS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    BaselineUnet,
    HookNet,
    HookNetAttention,
    HookNetDeepSup,
    HookNetMultihookDeepSup,
    AmdHookNet,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::BaselineUnet,
        Variant::HookNet,
        Variant::HookNetAttention,
        Variant::HookNetDeepSup,
        Variant::HookNetMultihookDeepSup,
        Variant::AmdHookNet,
    ];

    /// The ablation ladder, from the plain hooking model to the full model.
    pub const ABLATION_LADDER: [Variant; 5] = [
        Variant::HookNet,
        Variant::HookNetAttention,
        Variant::HookNetDeepSup,
        Variant::HookNetMultihookDeepSup,
        Variant::AmdHookNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineUnet => "baseline_unet",
            Variant::HookNet => "hooknet",
            Variant::HookNetAttention => "hooknet_attention",
            Variant::HookNetDeepSup => "hooknet_deepsup",
            Variant::HookNetMultihookDeepSup => "hooknet_multihook_deepsup",
            Variant::AmdHookNet => "amd_hooknet",
        }
    }

    pub fn layout(self) -> Layout {
        let one = [true, false, false];
        let all = [true; 3];
        let none = [false; 3];
        let (hooks, attention, deep) = match self {
            Variant::BaselineUnet => (none, none, none),
            Variant::HookNet => (one, none, none),
            Variant::HookNetAttention => (one, one, none),
            Variant::HookNetDeepSup => (one, none, one),
            Variant::HookNetMultihookDeepSup => (all, none, all),
            Variant::AmdHookNet => (all, all, all),
        };
        Layout {
            context_branch: self != Variant::BaselineUnet,
            hooks,
            attention,
            deep,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
    }
}

/// Which junctions and heads a network instance builds. Index `d` refers to
/// decoder depth `d + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub context_branch: bool,
    pub hooks: [bool; HOOK_DEPTHS],
    pub attention: [bool; HOOK_DEPTHS],
    pub deep: [bool; HOOK_DEPTHS],
}

impl Layout {
    fn validate(&self) -> Result<()> {
        for d in 0..HOOK_DEPTHS {
            if (self.attention[d] || self.deep[d]) && !self.hooks[d] {
                return Err(Error::config(format!(
                    "attention or deep supervision at depth {} requires a hook there",
                    d + 1
                )));
            }
            if self.hooks[d] && !self.context_branch {
                return Err(Error::config("hooking requires the context branch"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub variant: Variant,
    /// Attention token budget; `None` attends over every position.
    pub token_cap: Option<usize>,
    pub class_count: usize,
    pub in_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 32,
            variant: Variant::AmdHookNet,
            token_cap: Some(DEFAULT_TOKEN_CAP),
            class_count: 4,
            in_channels: 1,
        }
    }
}

fn conv_params(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k * k + c_out
}

fn block_params(c_in: usize, c_out: usize) -> usize {
    conv_params(c_in, c_out, 3) + conv_params(c_out, c_out, 3) + 4 * c_out
}

impl ModelConfig {
    pub fn toy(variant: Variant, base_channels: usize) -> Self {
        ModelConfig {
            base_channels,
            variant,
            ..ModelConfig::default()
        }
    }

    pub fn stage_channels(&self) -> [usize; 5] {
        STAGE_MULTIPLIERS.map(|m| m * self.base_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::config("base_channels must be positive"));
        }
        if self.class_count < 2 {
            return Err(Error::config("class_count must be at least 2"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be positive"));
        }
        if self.token_cap == Some(0) {
            return Err(Error::config("token_cap must be positive"));
        }
        Ok(())
    }

    /// Extra channels the hook at each depth adds to the target decoder input.
    fn hook_extra(&self, layout: &Layout) -> [usize; 4] {
        let ch = self.stage_channels();
        let mut extra = [0; 4];
        for d in 0..HOOK_DEPTHS {
            if layout.hooks[d] {
                extra[d] = ch[3 - d];
            }
        }
        extra
    }

    /// Trainable parameter total, summed over the layer list.
    pub fn parameter_count(&self) -> usize {
        let layout = self.variant.layout();
        let ch = self.stage_channels();
        let branch = |extra: [usize; 4]| {
            let mut n = block_params(self.in_channels, ch[0]);
            for s in 1..5 {
                n += block_params(ch[s - 1], ch[s]);
            }
            for k in 0..4 {
                let c_in = ch[4 - k] + extra[k];
                let c_out = ch[3 - k];
                n += c_in * c_out * 4 + c_out;
                n += block_params(2 * c_out, c_out);
            }
            n + conv_params(ch[0], self.class_count, 1)
        };
        let extra = self.hook_extra(&layout);
        let mut n = branch(extra);
        if layout.context_branch {
            n += branch([0; 4]);
        }
        for d in 0..HOOK_DEPTHS {
            if layout.attention[d] {
                let c = ch[4 - d] + ch[3 - d];
                let dk = crate::attention::key_dim(c);
                n += 3 * (dk * c + dk) + c * dk + c;
            }
            if layout.deep[d] {
                n += conv_params(ch[3 - d], self.class_count, 1);
            }
        }
        n
    }

    /// Flat `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let cap = self.token_cap.map_or("none".to_string(), |c| c.to_string());
        format!(
            "base_channels={}\nvariant={}\ntoken_cap={}\nclass_count={}\nin_channels={}\n",
            self.base_channels, self.variant, cap, self.class_count, self.in_channels
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("malformed config line `{line}`")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| Error::config(format!("{k}: `{v}` is not an integer")));
            match k {
                "base_channels" => cfg.base_channels = num(v)?,
                "variant" => cfg.variant = v.parse()?,
                "token_cap" => cfg.token_cap = if v == "none" { None } else { Some(num(v)?) },
                "class_count" => cfg.class_count = num(v)?,
                "in_channels" => cfg.in_channels = num(v)?,
                other => return Err(Error::config(format!("unknown model key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Logits of one deep-supervision head.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepLogits<T> {
    pub depth: usize,
    pub logits: FeatureMap<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs<T> {
    pub target_logits: FeatureMap<T>,
    pub context_logits: Option<FeatureMap<T>>,
    pub deep_logits: Vec<DeepLogits<T>>,
}

/// Loss gradients with respect to each output of [`ForwardOutputs`].
#[derive(Clone, Debug)]
pub struct OutputGrads<T> {
    pub target: FeatureMap<T>,
    pub context: Option<FeatureMap<T>>,
    pub deep: Vec<DeepLogits<T>>,
}

/// Output shape of one block, `[n, c, h, w]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub branch: &'static str,
    pub layer: String,
    pub shape: [usize; 4],
}

/// One U-Net: five encoder blocks, four decoder stages, a 1×1 class head.
#[derive(Clone, Debug)]
pub struct Branch<T> {
    enc: Vec<ConvBlock<T>>,
    pools: Vec<MaxPool2>,
    up: Vec<UpConv2<T>>,
    dec: Vec<ConvBlock<T>>,
    head: Conv2d<T>,
}

impl<T: Real> Branch<T> {
    fn new<R: Rng>(cfg: &ModelConfig, extra: [usize; 4], rng: &mut R) -> Self {
        let ch = cfg.stage_channels();
        let mut enc = vec![ConvBlock::new(cfg.in_channels, ch[0], rng)];
        for s in 1..5 {
            enc.push(ConvBlock::new(ch[s - 1], ch[s], rng));
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for k in 0..4 {
            up.push(UpConv2::new(ch[4 - k] + extra[k], ch[3 - k], rng));
            dec.push(ConvBlock::new(2 * ch[3 - k], ch[3 - k], rng));
        }
        Branch {
            enc,
            pools: vec![MaxPool2::default(); 4],
            up,
            dec,
            head: Conv2d::new(ch[0], cfg.class_count, 1, rng),
        }
    }

    /// Returns the five encoder stage outputs, finest first.
    pub fn encode(&mut self, x: &FeatureMap<T>, phase: Phase) -> Result<Vec<FeatureMap<T>>> {
        let mut outs = Vec::with_capacity(5);
        outs.push(self.enc[0].forward(x, phase)?);
        for s in 1..5 {
            let pooled = self.pools[s - 1].forward(&outs[s - 1], phase)?;
            outs.push(self.enc[s].forward(&pooled, phase)?);
        }
        Ok(outs)
    }

    fn encode_backward(&mut self, mut grads: Vec<Option<FeatureMap<T>>>) -> Result<FeatureMap<T>> {
        let mut g = grads[4].take().ok_or_else(|| Error::shape("missing bottleneck gradient"))?;
        for s in (1..5).rev() {
            let d_pooled = self.enc[s].backward(&g)?;
            let mut d = self.pools[s - 1].backward(&d_pooled)?;
            if let Some(skip) = grads[s - 1].take() {
                d.add_assign(&skip)?;
            }
            g = d;
        }
        self.enc[0].backward(&g)
    }

    /// Decoder stage `k` (0-based): upsample, concatenate the skip, convolve.
    pub fn decode_stage(&mut self, k: usize, x: &FeatureMap<T>, skip: &FeatureMap<T>, phase: Phase) -> Result<FeatureMap<T>> {
        let u = self.up[k].forward(x, phase)?;
        let cat = FeatureMap::concat_channels(&u, skip)?;
        self.dec[k].forward(&cat, phase)
    }

    fn decode_stage_backward(&mut self, k: usize, dy: &FeatureMap<T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        let d_cat = self.dec[k].backward(dy)?;
        let (d_up, d_skip) = d_cat.split_channels(self.up[k].out_channels())?;
        Ok((self.up[k].backward(&d_up)?, d_skip))
    }
}

impl<T: Real> Parameterized<T> for Branch<T> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (i, b) in self.enc.iter().enumerate() {
            b.visit(&join(prefix, &format!("enc{}", i + 1)), f);
        }
        for (k, (u, b)) in self.up.iter().zip(&self.dec).enumerate() {
            u.visit(&join(prefix, &format!("up{}", k + 1)), f);
            b.visit(&join(prefix, &format!("dec{}", k + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        for (i, b) in self.enc.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("enc{}", i + 1)), f);
        }
        for (k, (u, b)) in self.up.iter_mut().zip(&mut self.dec).enumerate() {
            u.visit_mut(&join(prefix, &format!("up{}", k + 1)), f);
            b.visit_mut(&join(prefix, &format!("dec{}", k + 1)), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: ModelConfig,
    layout: Layout,
    target: Branch<T>,
    context: Option<Branch<T>>,
    hooks: Vec<Option<AttentionHook<T>>>,
    deep_heads: Vec<Option<Conv2d<T>>>,
    forwarded: bool,
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Self::with_layout(cfg, cfg.variant.layout(), rng)
    }

    /// Builds an arbitrary junction layout; `cfg.variant` is kept for
    /// bookkeeping only.
    pub fn with_layout<R: Rng>(cfg: &ModelConfig, layout: Layout, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        layout.validate()?;
        let ch = cfg.stage_channels();
        let target = Branch::new(cfg, cfg.hook_extra(&layout), rng);
        let context = layout.context_branch.then(|| Branch::new(cfg, [0; 4], rng));
        let hooks = (0..HOOK_DEPTHS)
            .map(|d| {
                layout.hooks[d].then(|| {
                    let (tc, cc) = (ch[4 - d], ch[3 - d]);
                    if layout.attention[d] {
                        AttentionHook::with_attention(tc, cc, cfg.token_cap, rng)
                    } else {
                        AttentionHook::plain(tc, cc)
                    }
                })
            })
            .collect();
        let deep_heads = (0..HOOK_DEPTHS)
            .map(|d| layout.deep[d].then(|| Conv2d::new(ch[3 - d], cfg.class_count, 1, rng)))
            .collect();
        Ok(Model {
            cfg: cfg.clone(),
            layout,
            target,
            context,
            hooks,
            deep_heads,
            forwarded: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn target_branch_mut(&mut self) -> &mut Branch<T> {
        &mut self.target
    }

    pub fn context_branch_mut(&mut self) -> Option<&mut Branch<T>> {
        self.context.as_mut()
    }

    /// Attention blocks by depth (1-based), where present.
    pub fn attention_mut(&mut self, depth: usize) -> Option<&mut crate::attention::SelfAttention<T>> {
        self.hooks.get_mut(depth.checked_sub(1)?)?.as_mut()?.attention.as_mut()
    }

    pub fn set_record_attention(&mut self, on: bool) {
        for hook in self.hooks.iter_mut().flatten() {
            if let Some(att) = hook.attention.as_mut() {
                att.record_weights = on;
            }
        }
    }

    /// `(depth, per-sample maps)` recorded during the last forward.
    pub fn recorded_attention(&self) -> Vec<(usize, &[AttentionMap])> {
        self.hooks
            .iter()
            .enumerate()
            .filter_map(|(d, h)| {
                let att = h.as_ref()?.attention.as_ref()?;
                att.record_weights.then(|| (d + 1, att.recorded_weights()))
            })
            .collect()
    }

    fn check_input(&self, x: &FeatureMap<T>, which: &str) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "{which} patch has {c} channels, expected {}",
                self.cfg.in_channels
            )));
        }
        if h != w || h % 16 != 0 {
            return Err(Error::shape(format!(
                "{which} patch must be square with side divisible by 16, got {h}x{w}"
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, target: &FeatureMap<T>, context: &FeatureMap<T>, phase: Phase) -> Result<ForwardOutputs<T>> {
        self.forward_traced(target, context, phase, None)
    }

    /// Inference pass that records the output shape of every block.
    pub fn feature_shapes(&mut self, target: &FeatureMap<T>, context: &FeatureMap<T>) -> Result<Vec<LayerShape>> {
        let mut trace = Vec::new();
        self.forward_traced(target, context, Phase::Infer, Some(&mut trace))?;
        Ok(trace)
    }

    fn forward_traced(
        &mut self,
        target: &FeatureMap<T>,
        context: &FeatureMap<T>,
        phase: Phase,
        mut trace: Option<&mut Vec<LayerShape>>,
    ) -> Result<ForwardOutputs<T>> {
        let mut note = |branch: &'static str, layer: String, x: &FeatureMap<T>| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(LayerShape { branch, layer, shape: x.shape() });
            }
        };
        self.check_input(target, "target")?;
        if self.layout.context_branch {
            self.check_input(context, "context")?;
            if context.shape() != target.shape() {
                return Err(Error::shape(format!(
                    "context patch {:?} differs from target patch {:?}",
                    context.shape(),
                    target.shape()
                )));
            }
        }

        let mut ctx_dec = Vec::new();
        let mut context_logits = None;
        if let Some(ctx) = self.context.as_mut() {
            let ce = ctx.encode(context, phase)?;
            note("context", "input".into(), context);
            for (s, e) in ce.iter().enumerate() {
                note("context", format!("enc{}", s + 1), e);
            }
            let mut x = ce[4].clone();
            for k in 0..4 {
                x = ctx.decode_stage(k, &x, &ce[3 - k], phase)?;
                note("context", format!("dec{}", k + 1), &x);
                ctx_dec.push(x.clone());
            }
            let logits = ctx.head.forward(&x, phase)?;
            note("context", "head".into(), &logits);
            context_logits = Some(logits);
        }

        let te = self.target.encode(target, phase)?;
        note("target", "input".into(), target);
        for (s, e) in te.iter().enumerate() {
            note("target", format!("enc{}", s + 1), e);
        }
        let mut x = te[4].clone();
        let mut deep_logits = Vec::new();
        for k in 0..4 {
            if k < HOOK_DEPTHS {
                if let Some(hook) = self.hooks[k].as_mut() {
                    let stage = HookingStage::new(k + 1, &x, &ctx_dec[k])?;
                    x = hook.forward(&stage, phase)?;
                }
            }
            x = self.target.decode_stage(k, &x, &te[3 - k], phase)?;
            note("target", format!("dec{}", k + 1), &x);
            if k < HOOK_DEPTHS {
                if let Some(head) = self.deep_heads[k].as_mut() {
                    deep_logits.push(DeepLogits {
                        depth: k + 1,
                        logits: head.forward(&x, phase)?,
                    });
                }
            }
        }
        let target_logits = self.target.head.forward(&x, phase)?;
        note("target", "head".into(), &target_logits);
        self.forwarded = phase.caches();
        Ok(ForwardOutputs {
            target_logits,
            context_logits,
            deep_logits,
        })
    }

    /// Accumulates parameter gradients and returns the gradients with
    /// respect to the (target, context) inputs.
    pub fn backward(&mut self, grads: &OutputGrads<T>) -> Result<(FeatureMap<T>, Option<FeatureMap<T>>)> {
        if !self.forwarded {
            return Err(crate::nn::missing_cache("model"));
        }
        let mut g = self.target.head.backward(&grads.target)?;
        let mut d_te: Vec<Option<FeatureMap<T>>> = vec![None; 5];
        let mut d_ctx_dec: Vec<Option<FeatureMap<T>>> = vec![None; 4];
        for k in (0..4).rev() {
            if k < HOOK_DEPTHS {
                if let Some(head) = self.deep_heads[k].as_mut() {
                    let dl = grads
                        .deep
                        .iter()
                        .find(|d| d.depth == k + 1)
                        .ok_or_else(|| Error::shape(format!("missing deep gradient at depth {}", k + 1)))?;
                    g.add_assign(&head.backward(&dl.logits)?)?;
                }
            }
            let (d_in, d_skip) = self.target.decode_stage_backward(k, &g)?;
            d_te[3 - k] = Some(d_skip);
            g = d_in;
            if k < HOOK_DEPTHS {
                if let Some(hook) = self.hooks[k].as_mut() {
                    let (dt, dc) = hook.backward(&g)?;
                    g = dt;
                    d_ctx_dec[k] = Some(dc);
                }
            }
        }
        d_te[4] = Some(g);
        let d_target = self.target.encode_backward(d_te)?;

        let d_context = match self.context.as_mut() {
            Some(ctx) => {
                let head_grad = match &grads.context {
                    Some(gc) => gc.clone(),
                    None => {
                        let [n, _, h, w] = grads.target.shape();
                        FeatureMap::zeros(n, self.cfg.class_count, h, w)
                    }
                };
                let mut g = ctx.head.backward(&head_grad)?;
                let mut d_ce: Vec<Option<FeatureMap<T>>> = vec![None; 5];
                for k in (0..4).rev() {
                    let (d_in, d_skip) = ctx.decode_stage_backward(k, &g)?;
                    d_ce[3 - k] = Some(d_skip);
                    g = d_in;
                    if k >= 1 {
                        if let Some(dc) = d_ctx_dec[k - 1].take() {
                            g.add_assign(&dc)?;
                        }
                    }
                }
                d_ce[4] = Some(g);
                Some(ctx.encode_backward(d_ce)?)
            }
            None => None,
        };
        Ok((d_target, d_context))
    }

    /// Copies every parameter whose name and shape match one in `other`.
    /// Returns how many tensors were copied.
    pub fn copy_params_from(&mut self, other: &Model<T>) -> usize {
        let mut src = std::collections::HashMap::new();
        other.visit("", &mut |name, p| {
            src.insert(name.to_string(), p.clone());
        });
        let mut copied = 0;
        self.visit_mut("", &mut |name, p| {
            if let Some(s) = src.get(name) {
                if s.shape() == p.shape() {
                    p.value.clone_from(&s.value);
                    copied += 1;
                }
            }
        });
        copied
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut out = Model::<U>::with_layout(&self.cfg, self.layout, &mut rng).expect("validated layout");
        let mut values = Vec::new();
        self.visit("", &mut |_, p| values.push(p.cast::<U>()));
        let mut it = values.into_iter();
        out.visit_mut("", &mut |_, p| *p = it.next().expect("same layout"));
        out
    }
}

impl<T: Real> Parameterized<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.target.visit(&join(prefix, "target"), f);
        if let Some(ctx) = &self.context {
            ctx.visit(&join(prefix, "context"), f);
        }
        for (d, hook) in self.hooks.iter().enumerate() {
            if let Some(h) = hook {
                h.visit(&join(prefix, &format!("hook{}", d + 1)), f);
            }
        }
        for (d, head) in self.deep_heads.iter().enumerate() {
            if let Some(h) = head {
                h.visit(&join(prefix, &format!("deep{}", d + 1)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.target.visit_mut(&join(prefix, "target"), f);
        if let Some(ctx) = &mut self.context {
            ctx.visit_mut(&join(prefix, "context"), f);
        }
        for (d, hook) in self.hooks.iter_mut().enumerate() {
            if let Some(h) = hook {
                h.visit_mut(&join(prefix, &format!("hook{}", d + 1)), f);
            }
        }
        for (d, head) in self.deep_heads.iter_mut().enumerate() {
            if let Some(h) = head {
                h.visit_mut(&join(prefix, &format!("deep{}", d + 1)), f);
            }
        }
    }
}
