use crate::attention::window::{partition, reverse, shift, unshift};
use crate::attention::{AttentionCache, Grid, WindowAttention};
use crate::error::{MoseError, Result};
use crate::layers::{LayerNorm, LayerNormCache, Mlp, MlpCache};
use crate::moe::{importance_loss, importance_loss_grad, GateDecision, MoeCache, MoeLayer, ParamCount};
use crate::numerics::{ParamGrads, ParamValues, ParameterSet, Rng};
use crate::scalar::Scalar;

use super::config::ModelConfig;

#[derive(Clone, Debug)]
pub enum FeedForward {
    Moe(MoeLayer),
    Mlp(Mlp),
}

/// Attention and feed-forward sublayers, each followed by a norm and added
/// back to its input.
#[derive(Clone, Debug)]
pub struct S2mlBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

enum FfnCache<T> {
    Moe(MoeCache<T>, Vec<T>),
    Mlp(Vec<T>, MlpCache<T>),
}

pub(crate) struct BlockCache<T> {
    grid: Grid,
    attn: AttentionCache<T>,
    ln1: LayerNormCache<T>,
    ffn: FfnCache<T>,
    ln2: LayerNormCache<T>,
}

pub(crate) struct BlockOutput<T> {
    pub y: Vec<T>,
    pub decision: Option<GateDecision<T>>,
    pub moe_loss: Option<T>,
}

impl S2mlBlock {
    pub fn new<T: Scalar>(
        ps: &mut ParameterSet<T>,
        name: &str,
        cfg: &ModelConfig,
        shift: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let c = cfg.embed_dim;
        let attn = WindowAttention::new(ps, &format!("{name}.attn"), cfg.attention.for_block(c, shift), rng)?;
        let norm1 = LayerNorm::with_gain(ps, &format!("{name}.norm1"), c, 0.0)?;
        let ffn = match &cfg.moe {
            Some(m) => FeedForward::Moe(MoeLayer::new(ps, &format!("{name}.ffn"), c, m.clone(), rng)?),
            None => FeedForward::Mlp(Mlp::new(ps, &format!("{name}.ffn"), c, cfg.mlp_width(), rng)?),
        };
        let norm2 = LayerNorm::with_gain(ps, &format!("{name}.norm2"), c, 0.0)?;
        Ok(S2mlBlock { norm1, attn, norm2, ffn })
    }

    pub fn ffn_param_count(&self) -> ParamCount {
        match &self.ffn {
            FeedForward::Moe(m) => m.param_count(),
            FeedForward::Mlp(m) => ParamCount {
                active: m.param_count(),
                sparse: m.param_count(),
            },
        }
    }

    pub fn param_count(&self) -> ParamCount {
        let fixed = self.attn.param_count() + 4 * self.norm1.dim;
        let f = self.ffn_param_count();
        ParamCount {
            active: fixed + f.active,
            sparse: fixed + f.sparse,
        }
    }

    /// Configured shift, or zero when the grid fits in one window per axis.
    pub fn shift_on(&self, grid: Grid) -> usize {
        let m = self.attn.cfg.window_size;
        if grid.height > m && grid.width > m {
            self.attn.cfg.shift
        } else {
            0
        }
    }

    /// `x` is `B x H x W x C` tokens; `mask` is the shift mask for this grid.
    pub(crate) fn forward<T: Scalar>(
        &self,
        p: &ParamValues<'_, T>,
        x: &[T],
        grid: Grid,
        mask: Option<&[T]>,
    ) -> Result<(BlockOutput<T>, BlockCache<T>)> {
        let m = self.attn.cfg.window_size;
        let s = self.shift_on(grid);
        let xs = shift(x, grid, s);
        let xw = partition(&xs, grid, m)?;
        let (aw, attn) = self.attn.forward(p, &xw, if s > 0 { mask } else { None })?;
        let a = unshift(&reverse(&aw, grid, m)?, grid, s);
        let (n1, ln1) = self.norm1.forward(p, &a);
        let x1: Vec<T> = x.iter().zip(&n1).map(|(&u, &v)| u + v).collect();

        let (f, ffn, decision, moe_loss) = match &self.ffn {
            FeedForward::Moe(layer) => {
                let (out, cache) = layer.forward(p, &x1, grid.batch, grid.height, grid.width)?;
                let loss = importance_loss(&out.importance)?;
                (out.y, FfnCache::Moe(cache, out.importance), Some(out.decision), Some(loss))
            }
            FeedForward::Mlp(mlp) => {
                let (y, cache) = mlp.forward(p, &x1, grid.batch * grid.tokens());
                (y, FfnCache::Mlp(x1.clone(), cache), None, None)
            }
        };
        let (n2, ln2) = self.norm2.forward(p, &f);
        let y: Vec<T> = x1.iter().zip(&n2).map(|(&u, &v)| u + v).collect();
        Ok((
            BlockOutput { y, decision, moe_loss },
            BlockCache {
                grid,
                attn,
                ln1,
                ffn,
                ln2,
            },
        ))
    }

    /// `dloss` is the upstream gradient of this block's importance loss.
    pub(crate) fn backward<T: Scalar>(
        &self,
        p: &ParamValues<'_, T>,
        g: &mut ParamGrads<'_, T>,
        cache: &BlockCache<T>,
        dy: &[T],
        dloss: T,
    ) -> Result<Vec<T>> {
        let grid = cache.grid;
        let m = self.attn.cfg.window_size;
        let s = self.shift_on(grid);
        let df = self.norm2.backward(p, g, &cache.ln2, dy);
        let dffn = match (&self.ffn, &cache.ffn) {
            (FeedForward::Moe(layer), FfnCache::Moe(mc, importance)) => {
                let dimp: Vec<T> = importance_loss_grad(importance)?.into_iter().map(|v| v * dloss).collect();
                layer.backward(p, g, mc, &df, &dimp)
            }
            (FeedForward::Mlp(mlp), FfnCache::Mlp(x1, mc)) => mlp.backward(p, g, x1, mc, &df, grid.batch * grid.tokens()),
            _ => return Err(MoseError::invalid("feed-forward cache does not match layer")),
        };
        let dx1: Vec<T> = dy.iter().zip(&dffn).map(|(&a, &b)| a + b).collect();
        let da = self.norm1.backward(p, g, &cache.ln1, &dx1);
        let daw = partition(&shift(&da, grid, s), grid, m)?;
        let dxw = self.attn.backward(p, g, &cache.attn, &daw);
        let dxs = unshift(&reverse(&dxw, grid, m)?, grid, s);
        Ok(dx1.iter().zip(&dxs).map(|(&a, &b)| a + b).collect())
    }
}
