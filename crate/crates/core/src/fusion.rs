//! Polynomial attention fusion of content and style features.
//!
//! `F_cs = sigma(F_s) * (norm(F_c) + sum_i attn_i(norm(F_c), norm(F_s)^i)) + mu(F_s)`
//! where the power is elementwise and each order has its own query, key and
//! value projections.

use serde::{Deserialize, Serialize};

use crate::backbone::{channel_stats, denormalize, normalize, FeatureMap};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamBuilder};
use crate::tensor::Tensor;

/// Highest supported order.
pub const MAX_ORDER: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMode {
    /// `norm(F_s)^i` elementwise.
    Elementwise,
    /// The i-th input is a parameter-free attention of the (i-1)-th over
    /// `norm(F_s)`, renormalized. Kept for ablation.
    RepeatedAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub order: usize,
    pub channels: usize,
    pub power: PowerMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            order: 2,
            channels: 512,
            power: PowerMode::Elementwise,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order > MAX_ORDER {
            return Err(Error::Config(format!(
                "fusion.order must be at most {MAX_ORDER}, got {}",
                self.order
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("fusion.channels must be positive".into()));
        }
        Ok(())
    }

    /// Softmax temperature denominator: the projected query width.
    pub fn scale_dim(&self) -> usize {
        self.channels
    }
}

/// 1x1 query, key and value projections for one order.
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl AttentionParams {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Self {
        AttentionParams {
            query: Linear::new(&mut pb.pp("query"), channels, channels, true),
            key: Linear::new(&mut pb.pp("key"), channels, channels, true),
            value: Linear::new(&mut pb.pp("value"), channels, channels, true),
        }
    }
}

/// `(B, C, H, W)` to `(B, H*W, C)`.
fn tokens(f: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    f.reshape(&[b, c, h * w])?.permute(&[0, 2, 1])
}

fn untokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = match t.shape() {
        [b, n, c] => (*b, *n, *c),
        s => return Err(Error::shape("untokens", format!("{s:?}"))),
    };
    debug_assert_eq!(n, h * w);
    t.permute(&[0, 2, 1])?.reshape(&[b, c, h, w])
}

/// `Softmax(Q[c] K[s]^T / sqrt(d)) V[s]`, shaped like `content`.
/// Returns the output and the `(B, Nc, Ns)` attention weights.
pub fn cross_attention_term(
    content: &Tensor,
    style: &Tensor,
    params: &AttentionParams,
    scale_dim: usize,
) -> Result<(Tensor, Tensor)> {
    let (bc, cc, h, w) = content.dims4()?;
    let (bs, cs, _, _) = style.dims4()?;
    if bc != bs || cc != cs || params.query.weight.shape()[1] != cc {
        return Err(Error::shape(
            "cross attention",
            format!("content {:?} style {:?}", content.shape(), style.shape()),
        ));
    }
    let q = params.query.forward(&tokens(content)?)?;
    let s = tokens(style)?;
    let k = params.key.forward(&s)?;
    let v = params.value.forward(&s)?;
    let logits = q
        .matmul(&k.permute(&[0, 2, 1])?)?
        .scale(1.0 / (scale_dim as f64).sqrt());
    let attention = logits.softmax_last()?;
    let out = untokens(&attention.matmul(&v)?, h, w)?;
    Ok((out, attention))
}

/// Parameter-free attention of `query` over `base`, renormalized.
fn attend_over(query: &Tensor, base: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = query.dims4()?;
    let q = tokens(query)?;
    let k = tokens(base)?;
    let a = q
        .matmul(&k.permute(&[0, 2, 1])?)?
        .scale(1.0 / (c as f64).sqrt())
        .softmax_last()?;
    normalize(&untokens(&a.matmul(&k)?, h, w)?)
}

pub struct FusionTrace {
    /// One `(B, Nc, Ns)` tensor per order.
    pub attention: Vec<Tensor>,
}

pub struct PolyAttention {
    cfg: FusionConfig,
    orders: Vec<AttentionParams>,
}

impl PolyAttention {
    /// Creates `cfg.order` parameter sets named `order_{i}` for `i = 1..=order`.
    pub fn new(pb: &mut ParamBuilder, cfg: &FusionConfig) -> Result<Self> {
        cfg.validate()?;
        let orders = (1..=cfg.order)
            .map(|i| AttentionParams::new(&mut pb.pp(&format!("order_{i}")), cfg.channels))
            .collect();
        Ok(PolyAttention {
            cfg: cfg.clone(),
            orders,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn available_orders(&self) -> usize {
        self.orders.len()
    }

    pub fn params(&self, order: usize) -> Option<&AttentionParams> {
        order.checked_sub(1).and_then(|i| self.orders.get(i))
    }

    pub fn fuse(&self, content: &FeatureMap, style: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.fuse_with_order(content, style, self.cfg.order)?.0)
    }

    pub fn fuse_with_order(
        &self,
        content: &FeatureMap,
        style: &FeatureMap,
        order: usize,
    ) -> Result<(FeatureMap, FusionTrace)> {
        if order > self.orders.len() {
            return Err(Error::FusionOrder {
                order,
                available: self.orders.len(),
            });
        }
        let (f_c, f_s) = (content.tensor(), style.tensor());
        if f_c.dims4()?.1 != f_s.dims4()?.1 {
            return Err(Error::shape(
                "fuse",
                format!("content {:?} vs style {:?}", f_c.shape(), f_s.shape()),
            ));
        }
        let s_stats = channel_stats(f_s)?;
        let c_bar = normalize(f_c)?;
        let s_bar = normalize(f_s)?;
        let mut p = c_bar.clone();
        let mut attention = Vec::with_capacity(order);
        let mut power = s_bar.clone();
        for i in 1..=order {
            if i > 1 {
                power = match self.cfg.power {
                    PowerMode::Elementwise => power.mul(&s_bar)?,
                    PowerMode::RepeatedAttention => attend_over(&power, &s_bar)?,
                };
            }
            let (term, a) =
                cross_attention_term(&c_bar, &power, &self.orders[i - 1], self.cfg.scale_dim())?;
            p = p.add(&term)?;
            attention.push(a);
        }
        let out = denormalize(&p, &s_stats)?;
        Ok((FeatureMap::new(out)?, FusionTrace { attention }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients_with_params;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    fn module(order: usize, channels: usize, seed: u64) -> (ParamStore, PolyAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = FusionConfig {
            order,
            channels,
            power: PowerMode::Elementwise,
        };
        let m = PolyAttention::new(
            &mut ParamBuilder::new(&mut store, &mut rng).pp("poly_attention"),
            &cfg,
        )
        .unwrap();
        (store, m)
    }

    fn set_identity(p: &AttentionParams, c: usize, scale: f64) {
        let eye: Vec<f64> = (0..c * c)
            .map(|i| if i / c == i % c { scale } else { 0.0 })
            .collect();
        for lin in [&p.query, &p.key, &p.value] {
            lin.weight
                .set(Tensor::new(eye.clone(), &[c, c]).unwrap())
                .unwrap();
            lin.bias.as_ref().unwrap().set(Tensor::zeros(&[c])).unwrap();
        }
    }

    #[test]
    fn order_zero_is_adain() {
        let (_, m) = module(0, 8, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = FeatureMap::new(rand_map(&mut rng, &[2, 8, 4, 4])).unwrap();
        let s = FeatureMap::new(rand_map(&mut rng, &[2, 8, 4, 4]).affine(3.0, 1.0)).unwrap();
        let out = m.fuse(&c, &s).unwrap();
        let (a, b) = (
            channel_stats(out.tensor()).unwrap(),
            channel_stats(s.tensor()).unwrap(),
        );
        for (x, y) in a.mean.data().iter().zip(b.mean.data()) {
            assert!((x - y).abs() < 1e-4);
        }
        for (x, y) in a.std.data().iter().zip(b.std.data()) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn order_limit_is_enforced() {
        let (_, m) = module(2, 4, 0);
        let f = FeatureMap::new(Tensor::ones(&[1, 4, 2, 2])).unwrap();
        assert!(matches!(
            m.fuse_with_order(&f, &f, 3),
            Err(Error::FusionOrder {
                order: 3,
                available: 2
            })
        ));
        assert!(FusionConfig {
            order: 6,
            ..FusionConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn parameter_sets_nest_by_order() {
        let (s1, _) = module(1, 4, 3);
        let (s3, _) = module(3, 4, 3);
        let n1 = s1.names();
        let n3 = s3.names();
        assert!(n1.iter().all(|n| n3.contains(n)));
        assert!(n3.len() > n1.len());
        // Same seed: lower-order weights agree, so prefixes load.
        for n in &n1 {
            assert_eq!(
                s1.get(n).unwrap().value().data(),
                s3.get(n).unwrap().value().data()
            );
        }
    }

    #[test]
    fn constant_logits_average_values() {
        let (_, m) = module(1, 3, 4);
        let p = m.params(1).unwrap();
        for lin in [&p.query, &p.key] {
            lin.weight.set(Tensor::zeros(&[3, 3])).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let content = rand_map(&mut rng, &[1, 3, 4, 4]);
        let style = rand_map(&mut rng, &[1, 3, 2, 2]);
        let (out, a) = cross_attention_term(&content, &style, p, 3).unwrap();
        assert_eq!(out.shape(), &[1, 3, 4, 4]);
        let v = p
            .value
            .forward(&tokens(&style).unwrap())
            .unwrap()
            .mean_keepdim(&[1])
            .unwrap();
        for ch in 0..3 {
            for pos in 0..16 {
                assert!((out.data()[ch * 16 + pos] - v.data()[ch]).abs() < 1e-12);
            }
        }
        for row in a.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn content_larger_than_style() {
        let (_, m) = module(2, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = FeatureMap::new(rand_map(&mut rng, &[1, 4, 32, 32])).unwrap();
        let s = FeatureMap::new(rand_map(&mut rng, &[1, 4, 16, 16])).unwrap();
        let (out, trace) = m.fuse_with_order(&c, &s, 2).unwrap();
        assert_eq!(out.tensor().shape(), &[1, 4, 32, 32]);
        assert_eq!(trace.attention[0].shape(), &[1, 1024, 256]);
    }

    #[test]
    fn constant_inputs_keep_style_mean() {
        let (_, m) = module(1, 4, 8);
        set_identity(m.params(1).unwrap(), 4, 1.0);
        let c = FeatureMap::new(Tensor::full(2.0, &[1, 4, 4, 4])).unwrap();
        let s = FeatureMap::new(Tensor::full(-0.7, &[1, 4, 4, 4])).unwrap();
        let out = m.fuse(&c, &s).unwrap();
        let mean = out.tensor().mean_keepdim(&[2, 3]).unwrap();
        assert!(mean.data().iter().all(|v| (v + 0.7).abs() < 1e-4));
    }

    #[test]
    fn flat_content_mean_limit() {
        // With norm(F_c) = 0 the output mean is mu(F_s) plus sigma(F_s) times
        // the mean of the attention terms, which vanish only for order 0.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = FeatureMap::new(rand_map(&mut rng, &[1, 4, 4, 4]).affine(2.0, 0.5)).unwrap();
        let c = FeatureMap::new(Tensor::full(1.5, &[1, 4, 4, 4])).unwrap();
        let st = channel_stats(s.tensor()).unwrap();
        for order in 0..=2 {
            let (_, m) = module(order, 4, 9);
            let out = m.fuse(&c, &s).unwrap();
            let mean = out.tensor().mean_keepdim(&[2, 3]).unwrap();
            let mut extra = Tensor::zeros(&[1, 4, 1, 1]);
            let s_bar = normalize(s.tensor()).unwrap();
            let mut pow = s_bar.clone();
            for i in 1..=order {
                if i > 1 {
                    pow = pow.mul(&s_bar).unwrap();
                }
                let (t, _) = cross_attention_term(
                    &Tensor::zeros(&[1, 4, 4, 4]),
                    &pow,
                    m.params(i).unwrap(),
                    4,
                )
                .unwrap();
                extra = extra.add(&t.mean_keepdim(&[2, 3]).unwrap()).unwrap();
            }
            let expected = denormalize(&extra, &st).unwrap();
            for (x, y) in mean.data().iter().zip(expected.data()) {
                assert!((x - y).abs() < 1e-9, "order {order}");
            }
            if order == 0 {
                for (x, y) in mean.data().iter().zip(st.mean.data()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn repeated_attention_mode_runs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = FusionConfig {
            order: 3,
            channels: 4,
            power: PowerMode::RepeatedAttention,
        };
        let m = PolyAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg).unwrap();
        let c = FeatureMap::new(rand_map(&mut rng, &[1, 4, 4, 4])).unwrap();
        let s = FeatureMap::new(rand_map(&mut rng, &[1, 4, 3, 3])).unwrap();
        let out = m.fuse(&c, &s).unwrap();
        assert!(out.tensor().all_finite());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for order in 1..=3 {
            let (store, m) = module(order, 8, 20 + order as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(30 + order as u64);
            let c = rand_map(&mut rng, &[1, 8, 4, 4]);
            let s = rand_map(&mut rng, &[1, 8, 4, 4]);
            let probe = rand_map(&mut rng, &[1, 8, 4, 4]);
            let params: Vec<_> = store.iter().cloned().collect();
            let r = check_gradients_with_params(
                &params,
                &[c, s],
                |x| {
                    let out = m.fuse(
                        &FeatureMap::new(x[0].clone())?,
                        &FeatureMap::new(x[1].clone())?,
                    )?;
                    out.tensor().mul(&probe)?.sum_all()
                },
                1e-5,
                16,
            )
            .unwrap();
            assert!(r.passes(1e-3), "order {order}: {r:?}");
        }
    }
}
