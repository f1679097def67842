//! Positional mapper: turns a style embedding into a square style feature map
//! with self-attention over learnable relative position encodings.
//!
//! The position map `R` is added to the broadcast embedding before the
//! query/key/value projections and also enters the logits as a
//! content-position term, `(q_i . k_j + q_i . r_j) / sqrt(d)`. Without the
//! first injection every position would carry the same value vector and the
//! output could not vary over the grid.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, Param, ParamBuilder};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperConfig {
    /// Side of the square output grid.
    pub grid: usize,
    pub embed_dim: usize,
    /// Channels of the produced map; must match the fusion level.
    pub out_channels: usize,
    pub heads: usize,
    pub position_init_std: f64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            grid: 16,
            embed_dim: 512,
            out_channels: 512,
            heads: 1,
            position_init_std: 0.02,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.embed_dim == 0 || self.out_channels == 0 || self.heads == 0 {
            return Err(Error::Config("mapper sizes must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.heads)
            || !self.out_channels.is_multiple_of(self.heads)
        {
            return Err(Error::Config(format!(
                "mapper.heads = {} must divide embed_dim {} and out_channels {}",
                self.heads, self.embed_dim, self.out_channels
            )));
        }
        Ok(())
    }
}

/// `r_h: (G, 1, E)` and `r_w: (1, G, E)`.
#[derive(Clone, Debug)]
pub struct PositionalEncodings {
    pub r_h: Arc<Param>,
    pub r_w: Arc<Param>,
}

/// `R[i, j, :] = r_h[i, 0, :] + r_w[0, j, :]`, shape `(G, G, E)`.
pub fn build_position_map(r_h: &Tensor, r_w: &Tensor) -> Result<Tensor> {
    let (s_h, s_w) = (r_h.shape(), r_w.shape());
    if s_h.len() != 3 || s_w.len() != 3 || s_h[1] != 1 || s_w[0] != 1 || s_h[2] != s_w[2] {
        return Err(Error::shape("position map", format!("{s_h:?} + {s_w:?}")));
    }
    r_h.add(r_w)
}

/// Attention weights, `(B, heads, P, P)` with `P = grid * grid`.
pub struct MapperTrace {
    pub attention: Tensor,
}

pub struct PositionalMapper {
    cfg: MapperConfig,
    pub encodings: PositionalEncodings,
    query: Linear,
    key: Linear,
    value: Linear,
}

impl PositionalMapper {
    pub fn new(pb: &mut ParamBuilder, cfg: &MapperConfig) -> Result<Self> {
        cfg.validate()?;
        let (g, e) = (cfg.grid, cfg.embed_dim);
        let init = Init::Normal(cfg.position_init_std);
        let encodings = PositionalEncodings {
            r_h: pb.param("r_h", &[g, 1, e], init),
            r_w: pb.param("r_w", &[1, g, e], init),
        };
        Ok(PositionalMapper {
            cfg: cfg.clone(),
            encodings,
            query: Linear::new(&mut pb.pp("query"), e, e, true),
            key: Linear::new(&mut pb.pp("key"), e, e, true),
            value: Linear::new(&mut pb.pp("value"), e, cfg.out_channels, true),
        })
    }

    pub fn config(&self) -> &MapperConfig {
        &self.cfg
    }

    /// `style: (B, E)` to a `(B, C, G, G)` style map.
    pub fn map_style(&self, style: &Tensor) -> Result<FeatureMap> {
        Ok(self.map_style_traced(style)?.0)
    }

    pub fn map_style_traced(&self, style: &Tensor) -> Result<(FeatureMap, MapperTrace)> {
        let cfg = &self.cfg;
        let (b, e) = match style.shape() {
            [b, e] => (*b, *e),
            [e] => (1, *e),
            _ => return Err(Error::shape("map_style", format!("{:?}", style.shape()))),
        };
        if e != cfg.embed_dim {
            return Err(Error::Dimension {
                expected: cfg.embed_dim,
                got: e,
            });
        }
        let style = style.reshape(&[b, 1, e])?;
        let (g, h, c) = (cfg.grid, cfg.heads, cfg.out_channels);
        let p = g * g;
        let dh = e / h;
        let r = build_position_map(&self.encodings.r_h.value(), &self.encodings.r_w.value())?
            .reshape(&[1, p, e])?;
        // proj(s + r) = proj(s) + W r; the position half is shared by the batch.
        let project = |lin: &Linear| -> Result<Tensor> {
            let pos = r.matmul(&lin.weight.value().t()?)?;
            lin.forward(&style)?.add(&pos)
        };
        let heads = |t: Tensor, d: usize| -> Result<Tensor> {
            t.reshape(&[b, p, h, d])?.permute(&[0, 2, 1, 3])
        };
        let q = heads(project(&self.query)?, dh)?;
        let k = heads(project(&self.key)?, dh)?;
        let v = heads(project(&self.value)?, c / h)?;
        let r_heads = r.reshape(&[1, p, h, dh])?.permute(&[0, 2, 1, 3])?;

        // q . k + q . r = q . (k + r)
        let keys = k.add(&r_heads)?.permute(&[0, 1, 3, 2])?;
        let logits = q.matmul(&keys)?.scale(1.0 / (dh as f64).sqrt());
        let attention = logits.softmax_last()?;
        let out = attention
            .matmul(&v)?
            .permute(&[0, 1, 3, 2])?
            .reshape(&[b, c, g, g])?;
        Ok((FeatureMap::new(out)?, MapperTrace { attention }))
    }
}
