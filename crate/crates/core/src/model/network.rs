use crate::attention::window::shift_mask;
use crate::attention::Grid;
use crate::error::{MoseError, Result};
use crate::layers::{
    crop, depth_to_space, pad_reflect, planes_to_tokens, space_to_depth, tokens_to_planes, uncrop, Conv3x3,
    ConvCache, LayerNorm, LayerNormCache,
};
use crate::losses::{total_loss_with_grad, LossReport, LossWeights};
use crate::moe::{GateDecision, ParamCount};
use crate::numerics::tensor::ensure_finite;
use crate::numerics::{ParamGrads, ParamValues, ParameterSet, Rng, Tensor};
use crate::scalar::Scalar;

use super::block::{BlockCache, S2mlBlock};
use super::config::ModelConfig;

#[derive(Clone, Debug)]
pub struct Group {
    pub blocks: Vec<S2mlBlock>,
    pub conv: Conv3x3,
}

/// Layer structure of the network; parameters live in a separate
/// [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct Swin2Mose {
    pub cfg: ModelConfig,
    pub conv_first: Conv3x3,
    pub groups: Vec<Group>,
    pub norm: LayerNorm,
    pub conv_after_body: Conv3x3,
    /// Pixel-shuffle stages as `(conv, factor)`.
    pub upsample: Vec<(Conv3x3, usize)>,
    pub conv_last: Conv3x3,
}

pub struct ForwardOutput<T> {
    /// `B x Cin x rH x rW`.
    pub sr: Tensor<T>,
    /// Mean of the per-layer importance losses (zero without MoE layers).
    pub moe_loss: T,
    pub layer_losses: Vec<T>,
    pub decisions: Vec<GateDecision<T>>,
}

/// Upsampling factors applied in sequence for scale `r`.
pub fn upsample_stages(r: usize) -> Result<Vec<usize>> {
    match r {
        2 => Ok(vec![2]),
        3 => Ok(vec![3]),
        4 => Ok(vec![2, 2]),
        _ => Err(MoseError::invalid(format!("unsupported scale {r}"))),
    }
}

/// Side length after internal padding: the next multiple of `2 * window`.
pub fn padded_side(n: usize, window: usize) -> usize {
    n.div_ceil(2 * window) * 2 * window
}

struct Dims {
    batch: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
}

struct GroupTrace<T> {
    blocks: Vec<BlockCache<T>>,
    conv: ConvCache<T>,
}

pub(crate) struct Trace<T> {
    dims: Dims,
    first: ConvCache<T>,
    groups: Vec<GroupTrace<T>>,
    norm: LayerNormCache<T>,
    after: ConvCache<T>,
    ups: Vec<ConvCache<T>>,
    last: ConvCache<T>,
}

struct Body<T> {
    dims: Dims,
    features: Vec<T>,
    layer_losses: Vec<T>,
    decisions: Vec<GateDecision<T>>,
    trace: Option<(ConvCache<T>, Vec<GroupTrace<T>>, LayerNormCache<T>, ConvCache<T>)>,
}

impl Swin2Mose {
    pub fn new<T: Scalar>(cfg: ModelConfig, ps: &mut ParameterSet<T>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (cin, t) = (cfg.in_channels, cfg.embed_dim);
        let conv_first = Conv3x3::new(ps, "conv_first", cin, t, rng)?;
        let mut groups = Vec::with_capacity(cfg.groups);
        for gi in 0..cfg.groups {
            let blocks = (0..cfg.blocks_per_group)
                .map(|bi| S2mlBlock::new(ps, &format!("groups.{gi}.blocks.{bi}"), &cfg, cfg.shift_for(bi), rng))
                .collect::<Result<Vec<_>>>()?;
            let conv = Conv3x3::new(ps, &format!("groups.{gi}.conv"), t, t, rng)?;
            groups.push(Group { blocks, conv });
        }
        let norm = LayerNorm::new(ps, "norm", t)?;
        let conv_after_body = Conv3x3::new(ps, "conv_after_body", t, t, rng)?;
        let upsample = upsample_stages(cfg.scale)?
            .into_iter()
            .enumerate()
            .map(|(i, f)| Ok((Conv3x3::new(ps, &format!("upsample.{i}"), t, f * f * t, rng)?, f)))
            .collect::<Result<Vec<_>>>()?;
        let conv_last = Conv3x3::new(ps, "conv_last", t, cin, rng)?;
        Ok(Swin2Mose {
            cfg,
            conv_first,
            groups,
            norm,
            conv_after_body,
            upsample,
            conv_last,
        })
    }

    pub fn moe_layers(&self) -> usize {
        if self.cfg.moe.is_some() {
            self.cfg.groups * self.cfg.blocks_per_group
        } else {
            0
        }
    }

    /// Active and stored parameter counts per layer, in registration order.
    pub fn param_report(&self) -> Vec<(String, ParamCount)> {
        let dense = |n: usize| ParamCount { active: n, sparse: n };
        let mut rows = vec![("conv_first".to_string(), dense(self.conv_first.param_count()))];
        for (gi, g) in self.groups.iter().enumerate() {
            for (bi, b) in g.blocks.iter().enumerate() {
                let name = format!("groups.{gi}.blocks.{bi}");
                rows.push((format!("{name}.attn"), dense(b.attn.param_count())));
                rows.push((format!("{name}.norms"), dense(4 * b.norm1.dim)));
                rows.push((format!("{name}.ffn"), b.ffn_param_count()));
            }
            rows.push((format!("groups.{gi}.conv"), dense(g.conv.param_count())));
        }
        rows.push(("norm".into(), dense(2 * self.norm.dim)));
        rows.push(("conv_after_body".into(), dense(self.conv_after_body.param_count())));
        for (i, (c, _)) in self.upsample.iter().enumerate() {
            rows.push((format!("upsample.{i}"), dense(c.param_count())));
        }
        rows.push(("conv_last".into(), dense(self.conv_last.param_count())));
        rows
    }

    pub fn param_count(&self) -> ParamCount {
        self.param_report().iter().fold(ParamCount { active: 0, sparse: 0 }, |a, (_, c)| ParamCount {
            active: a.active + c.active,
            sparse: a.sparse + c.sparse,
        })
    }

    fn dims<T: Scalar>(&self, x: &Tensor<T>) -> Result<Dims> {
        let (batch, c, h, w) = match *x.shape() {
            [b, c, h, w] => (b, c, h, w),
            ref s => return Err(MoseError::shape(format!("input must be B x C x H x W, got {s:?}"))),
        };
        if c != self.cfg.in_channels || batch == 0 || h == 0 || w == 0 {
            return Err(MoseError::shape(format!(
                "input {:?} does not match {} input bands",
                x.shape(),
                self.cfg.in_channels
            )));
        }
        let m = self.cfg.attention.window_size;
        Ok(Dims {
            batch,
            h,
            w,
            ph: padded_side(h, m),
            pw: padded_side(w, m),
        })
    }

    fn body<T: Scalar>(&self, p: &ParamValues<'_, T>, x: &Tensor<T>, keep: bool) -> Result<Body<T>> {
        x.ensure_finite("model input")?;
        let d = self.dims(x)?;
        let (b, t) = (d.batch, self.cfg.embed_dim);
        let (ph, pw, n) = (d.ph, d.pw, d.ph * d.pw);
        let m = self.cfg.attention.window_size;
        let grid = Grid {
            batch: b,
            height: ph,
            width: pw,
            channels: t,
        };
        let mask: Option<Vec<T>> = if ph > m && pw > m && self.cfg.blocks_per_group > 1 {
            Some(shift_mask(ph, pw, m, m / 2)?)
        } else {
            None
        };

        let padded = pad_reflect(x.data(), b * self.cfg.in_channels, d.h, d.w, ph, pw);
        let (f0, first) = self.conv_first.forward(p, &padded, b, ph, pw);
        let mut tokens = planes_to_tokens(&f0, b, t, n);
        let mut layer_losses = Vec::new();
        let mut decisions = Vec::new();
        let mut group_traces = Vec::new();
        for (gi, g) in self.groups.iter().enumerate() {
            let group_in = tokens.clone();
            let mut block_caches = Vec::new();
            for (bi, blk) in g.blocks.iter().enumerate() {
                let (out, cache) = blk.forward(p, &tokens, grid, mask.as_deref())?;
                ensure_finite(&out.y, &format!("groups.{gi}.blocks.{bi}"))?;
                tokens = out.y;
                layer_losses.extend(out.moe_loss);
                decisions.extend(out.decision);
                if keep {
                    block_caches.push(cache);
                }
            }
            let (conv_out, conv) = g.conv.forward(p, &tokens_to_planes(&tokens, b, t, n), b, ph, pw);
            tokens = planes_to_tokens(&conv_out, b, t, n);
            for (a, &r) in tokens.iter_mut().zip(&group_in) {
                *a += r;
            }
            ensure_finite(&tokens, &format!("groups.{gi}.conv"))?;
            if keep {
                group_traces.push(GroupTrace {
                    blocks: block_caches,
                    conv,
                });
            }
        }
        let (normed, norm) = self.norm.forward(p, &tokens);
        let (mut features, after) = self.conv_after_body.forward(p, &tokens_to_planes(&normed, b, t, n), b, ph, pw);
        for (a, &r) in features.iter_mut().zip(&f0) {
            *a += r;
        }
        ensure_finite(&features, "conv_after_body")?;
        Ok(Body {
            dims: d,
            features,
            layer_losses,
            decisions,
            trace: keep.then_some((first, group_traces, norm, after)),
        })
    }

    /// Deep features after the global residual, `B x T x H' x W'` on the
    /// padded grid (see [`padded_side`]).
    pub fn extract_features<T: Scalar>(&self, params: &ParameterSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let body = self.body(&params.values(), x, false)?;
        let d = &body.dims;
        Tensor::from_vec(&[d.batch, self.cfg.embed_dim, d.ph, d.pw], body.features)
    }

    pub fn forward<T: Scalar>(&self, params: &ParameterSet<T>, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        Ok(self.run(&params.values(), x, false)?.0)
    }

    /// Forward pass that also returns the feature tap.
    pub fn forward_with_features<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        x: &Tensor<T>,
    ) -> Result<(ForwardOutput<T>, Tensor<T>)> {
        let (out, _, feats) = self.run(&params.values(), x, false)?;
        Ok((out, feats))
    }

    pub(crate) fn run<T: Scalar>(
        &self,
        p: &ParamValues<'_, T>,
        x: &Tensor<T>,
        keep: bool,
    ) -> Result<(ForwardOutput<T>, Option<Trace<T>>, Tensor<T>)> {
        let body = self.body(p, x, keep)?;
        let (b, t) = (body.dims.batch, self.cfg.embed_dim);
        let (mut h, mut w) = (body.dims.ph, body.dims.pw);
        let features = Tensor::from_vec(&[b, t, h, w], body.features)?;
        let mut cur = features.clone();
        let mut ups = Vec::new();
        for (conv, f) in &self.upsample {
            let (y, cache) = conv.forward(p, cur.data(), b, h, w);
            cur = depth_to_space(&Tensor::from_vec(&[b, f * f * t, h, w], y)?, *f)?;
            h *= f;
            w *= f;
            if keep {
                ups.push(cache);
            }
        }
        let (out, last) = self.conv_last.forward(p, cur.data(), b, h, w);
        let cin = self.cfg.in_channels;
        let r = self.cfg.scale;
        let (oh, ow) = (r * body.dims.h, r * body.dims.w);
        let sr = crop(&out, b * cin, h, w, oh, ow);
        ensure_finite(&sr, "conv_last")?;

        let l = body.layer_losses.len();
        let moe_loss = if l == 0 {
            T::zero()
        } else {
            body.layer_losses.iter().copied().sum::<T>() / T::from_usize_lossy(l)
        };
        let trace = body.trace.map(|(first, groups, norm, after)| Trace {
            dims: body.dims,
            first,
            groups,
            norm,
            after,
            ups,
            last,
        });
        Ok((
            ForwardOutput {
                sr: Tensor::from_vec(&[b, cin, oh, ow], sr)?,
                moe_loss,
                layer_losses: body.layer_losses,
                decisions: body.decisions,
            },
            trace,
            features,
        ))
    }

    /// Accumulates parameter gradients given `d loss / d sr` and `d loss / d moe_loss`.
    pub(crate) fn backward<T: Scalar>(
        &self,
        p: &ParamValues<'_, T>,
        g: &mut ParamGrads<'_, T>,
        trace: &Trace<T>,
        dsr: &[T],
        dmoe: T,
    ) -> Result<()> {
        let d = &trace.dims;
        let (b, t, cin, r) = (d.batch, self.cfg.embed_dim, self.cfg.in_channels, self.cfg.scale);
        let (ph, pw, n) = (d.ph, d.pw, d.ph * d.pw);
        let mut dcur = uncrop(dsr, b * cin, r * d.h, r * d.w, r * ph, r * pw);
        dcur = self.conv_last.backward(p, g, &trace.last, &dcur, true).expect("dx requested");
        let (mut h, mut w) = (r * ph, r * pw);
        for ((conv, f), cache) in self.upsample.iter().zip(&trace.ups).rev() {
            let dt = space_to_depth(&Tensor::from_vec(&[b, t, h, w], dcur)?, *f)?;
            h /= f;
            w /= f;
            dcur = conv.backward(p, g, cache, dt.data(), true).expect("dx requested");
        }
        let dfeat = dcur;
        let mut df0 = dfeat.clone();
        let dnormed = self
            .conv_after_body
            .backward(p, g, &trace.after, &dfeat, true)
            .expect("dx requested");
        let mut dtok = self.norm.backward(p, g, &trace.norm, &planes_to_tokens(&dnormed, b, t, n));

        let layers = self.moe_layers();
        let dloss = if layers == 0 {
            T::zero()
        } else {
            dmoe / T::from_usize_lossy(layers)
        };
        for (grp, gt) in self.groups.iter().zip(&trace.groups).rev() {
            let dgroup_in = dtok.clone();
            let dconv = grp
                .conv
                .backward(p, g, &gt.conv, &tokens_to_planes(&dtok, b, t, n), true)
                .expect("dx requested");
            dtok = planes_to_tokens(&dconv, b, t, n);
            for (blk, cache) in grp.blocks.iter().zip(&gt.blocks).rev() {
                dtok = blk.backward(p, g, cache, &dtok, dloss)?;
            }
            for (a, &v) in dtok.iter_mut().zip(&dgroup_in) {
                *a += v;
            }
        }
        for (a, &v) in df0.iter_mut().zip(&tokens_to_planes(&dtok, b, t, n)) {
            *a += v;
        }
        self.conv_first.backward(p, g, &trace.first, &df0, false);
        Ok(())
    }
}

/// Network plus its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: Swin2Mose,
    pub params: ParameterSet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParameterSet::new();
        let mut rng = Rng::new(seed);
        let net = Swin2Mose::new(cfg, &mut params, &mut rng)?;
        Ok(Model { net, params })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.net.forward(&self.params, x)
    }

    pub fn extract_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.extract_features(&self.params, x)
    }

    /// Weighted training loss of `lr -> hr` without gradients.
    pub fn loss(&self, lr: &Tensor<T>, hr: &Tensor<T>, w: &LossWeights) -> Result<LossReport<T>> {
        loss_only(&self.net, &self.params, lr, hr, w)
    }

    /// Weighted training loss; gradients are accumulated into `params`.
    pub fn loss_and_grad(&mut self, lr: &Tensor<T>, hr: &Tensor<T>, w: &LossWeights) -> Result<LossReport<T>> {
        loss_and_grad(&self.net, &mut self.params, lr, hr, w)
    }
}

pub fn loss_only<T: Scalar>(
    net: &Swin2Mose,
    params: &ParameterSet<T>,
    lr: &Tensor<T>,
    hr: &Tensor<T>,
    w: &LossWeights,
) -> Result<LossReport<T>> {
    let out = net.forward(params, lr)?;
    crate::losses::total_loss(&out.sr, hr, out.moe_loss, w)
}

pub fn loss_and_grad<T: Scalar>(
    net: &Swin2Mose,
    params: &mut ParameterSet<T>,
    lr: &Tensor<T>,
    hr: &Tensor<T>,
    w: &LossWeights,
) -> Result<LossReport<T>> {
    let (values, mut grads) = params.split();
    let (out, trace, _) = net.run(&values, lr, true)?;
    let (report, dsr) = total_loss_with_grad(&out.sr, hr, out.moe_loss, w)?;
    let trace = trace.expect("trace kept");
    net.backward(&values, &mut grads, &trace, &dsr, T::lit(w.gamma))?;
    Ok(report)
}
