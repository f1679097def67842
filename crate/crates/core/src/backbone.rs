//! Frozen VGG-19 feature encoder, the trainable mirror decoder, and
//! per-channel statistics.
//!
//! Feature maps are stored as `(N, C, H, W)` tensors.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Init, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

/// Added to the variance before the square root.
pub const STATS_EPS: f64 = 1e-5;

/// Smallest accepted input side.
pub const MIN_INPUT_SIDE: usize = 32;

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Layer {
    #[serde(rename = "relu1_2")]
    Relu1_2,
    #[serde(rename = "relu2_2")]
    Relu2_2,
    #[serde(rename = "relu3_4")]
    Relu3_4,
    #[serde(rename = "relu4_1")]
    Relu4_1,
}

impl Layer {
    pub const ALL: [Layer; 4] = [
        Layer::Relu1_2,
        Layer::Relu2_2,
        Layer::Relu3_4,
        Layer::Relu4_1,
    ];
    /// Layers compared by the content loss.
    pub const CONTENT: [Layer; 2] = [Layer::Relu2_2, Layer::Relu3_4];

    pub fn tag(self) -> &'static str {
        match self {
            Layer::Relu1_2 => "relu1_2",
            Layer::Relu2_2 => "relu2_2",
            Layer::Relu3_4 => "relu3_4",
            Layer::Relu4_1 => "relu4_1",
        }
    }
}

/// A batch of spatial feature maps, `(N, C, H, W)`.
#[derive(Clone, Debug)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::shape("feature map", format!("{:?}", t.shape())));
        }
        Ok(FeatureMap(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.0.shape()[2], self.0.shape()[3])
    }
}

#[derive(Clone, Debug, Default)]
pub struct FeaturePyramid {
    levels: BTreeMap<Layer, FeatureMap>,
}

impl FeaturePyramid {
    pub fn insert(&mut self, layer: Layer, f: FeatureMap) {
        self.levels.insert(layer, f);
    }

    pub fn get(&self, layer: Layer) -> Result<&FeatureMap> {
        self.levels
            .get(&layer)
            .ok_or(Error::MissingLayer(layer.tag()))
    }

    pub fn layers(&self) -> impl Iterator<Item = Layer> + '_ {
        self.levels.keys().copied()
    }
}

/// Per-channel spatial statistics, each `(N, C, 1, 1)`.
#[derive(Clone, Debug)]
pub struct ChannelStats {
    pub mean: Tensor,
    pub std: Tensor,
}

pub fn channel_stats(f: &Tensor) -> Result<ChannelStats> {
    f.dims4()?;
    let mean = f.mean_keepdim(&[2, 3])?;
    let var = f.sub(&mean)?.sqr()?.mean_keepdim(&[2, 3])?;
    Ok(ChannelStats {
        mean,
        std: var.affine(1.0, STATS_EPS).sqrt(),
    })
}

/// Instance normalization with the map's own statistics.
pub fn normalize(f: &Tensor) -> Result<Tensor> {
    let s = channel_stats(f)?;
    normalize_with(f, &s)
}

pub fn normalize_with(f: &Tensor, s: &ChannelStats) -> Result<Tensor> {
    f.sub(&s.mean)?.div(&s.std)
}

pub fn denormalize(f: &Tensor, s: &ChannelStats) -> Result<Tensor> {
    f.mul(&s.std)?.add(&s.mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VggConfig {
    /// Channel counts are the VGG-19 ones divided by this.
    pub width_divisor: usize,
    /// torchvision-style `features.{i}` safetensors file; seeded weights when absent.
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
}

impl Default for VggConfig {
    fn default() -> Self {
        VggConfig {
            width_divisor: 1,
            checkpoint: None,
            seed: 19,
        }
    }
}

impl VggConfig {
    pub fn relu4_1_channels(&self) -> usize {
        512 / self.width_divisor.max(1)
    }

    fn validate(&self) -> Result<()> {
        if self.width_divisor == 0 || 64 % self.width_divisor != 0 {
            return Err(Error::Config(format!(
                "vgg.width_divisor must divide 64, got {}",
                self.width_divisor
            )));
        }
        Ok(())
    }
}

enum Stage {
    Conv(usize),
    Pool,
    Tap(Layer),
}

/// torchvision indices of the convolutions up to conv4_1.
const VGG_CONV_INDEX: [usize; 9] = [0, 2, 5, 7, 10, 12, 14, 16, 19];
const VGG_CONV_CHANNELS: [(usize, usize); 9] = [
    (3, 64),
    (64, 64),
    (64, 128),
    (128, 128),
    (128, 256),
    (256, 256),
    (256, 256),
    (256, 256),
    (256, 512),
];

fn vgg_plan() -> Vec<Stage> {
    use Stage::*;
    vec![
        Conv(0),
        Conv(1),
        Tap(Layer::Relu1_2),
        Pool,
        Conv(2),
        Conv(3),
        Tap(Layer::Relu2_2),
        Pool,
        Conv(4),
        Conv(5),
        Conv(6),
        Conv(7),
        Tap(Layer::Relu3_4),
        Pool,
        Conv(8),
        Tap(Layer::Relu4_1),
    ]
}

fn scaled(c: usize, div: usize) -> usize {
    if c == 3 {
        3
    } else {
        c / div
    }
}

/// The fixed perceptual encoder. Never trained.
pub struct VggEncoder {
    store: ParamStore,
    convs: Vec<Conv2d>,
    cfg: VggConfig,
}

impl VggEncoder {
    pub fn new(cfg: &VggConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut convs = Vec::new();
        {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            for (i, &(cin, cout)) in VGG_CONV_CHANNELS.iter().enumerate() {
                let (cin, cout) = (
                    scaled(cin, cfg.width_divisor),
                    scaled(cout, cfg.width_divisor),
                );
                let std = (2.0 / (cin * 9) as f64).sqrt();
                convs.push(Conv2d::with_init(
                    &mut pb.pp(&format!("features.{}", VGG_CONV_INDEX[i])),
                    (cin, cout, 3),
                    1,
                    false,
                    Init::Normal(std),
                    Init::Zeros,
                ));
            }
        }
        if let Some(path) = &cfg.checkpoint {
            let weights = nn::load_safetensors(path)?;
            nn::assign_weights(&store, &weights, |n| n.to_string())?;
        }
        Ok(VggEncoder {
            store,
            convs,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &VggConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn weights_hash(&self) -> String {
        self.store.content_hash()
    }

    pub fn channels(&self, layer: Layer) -> usize {
        let base = match layer {
            Layer::Relu1_2 => 64,
            Layer::Relu2_2 => 128,
            Layer::Relu3_4 => 256,
            Layer::Relu4_1 => 512,
        };
        base / self.cfg.width_divisor
    }

    /// `image`: `(N, 3, H, W)` in `[0, 1]`.
    pub fn encode(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Channels(c));
        }
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            return Err(Error::ImageTooSmall {
                height: h,
                width: w,
                min: MIN_INPUT_SIDE,
            });
        }
        let mean = Tensor::new(IMAGENET_MEAN.to_vec(), &[1, 3, 1, 1])?;
        let std = Tensor::new(IMAGENET_STD.to_vec(), &[1, 3, 1, 1])?;
        let mut x = image.sub(&mean)?.div(&std)?;
        let mut pyr = FeaturePyramid::default();
        for stage in vgg_plan() {
            match stage {
                Stage::Conv(i) => x = self.convs[i].forward(&x)?.relu(),
                Stage::Pool => x = x.max_pool2()?,
                Stage::Tap(layer) => pyr.insert(layer, FeatureMap::new(x.clone())?),
            }
        }
        Ok(pyr)
    }
}

/// Mirror of the encoder: nearest upsampling followed by reflection-padded
/// convolutions.
pub struct Decoder {
    convs: Vec<(Conv2d, bool, bool)>,
    in_channels: usize,
}

impl Decoder {
    /// Parameters are created under the builder's current prefix.
    pub fn new(pb: &mut ParamBuilder, width_divisor: usize) -> Self {
        let d = width_divisor.max(1);
        // (cin, cout, relu, upsample after)
        let plan: [(usize, usize, bool, bool); 9] = [
            (512, 256, true, true),
            (256, 256, true, false),
            (256, 256, true, false),
            (256, 256, true, false),
            (256, 128, true, true),
            (128, 128, true, false),
            (128, 64, true, true),
            (64, 64, true, false),
            (64, 3, false, false),
        ];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, relu, up))| {
                let conv = Conv2d::new(
                    &mut pb.pp(&format!("conv{i}")),
                    scaled(cin, d),
                    scaled(cout, d),
                    3,
                    1,
                    true,
                );
                (conv, relu, up)
            })
            .collect();
        Decoder {
            convs,
            in_channels: 512 / d,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Decoder output before the pixel-range clamp.
    pub fn decode_unclamped(&self, f: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = f.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(
                "decode",
                format!("expected {} channels, got {c}", self.in_channels),
            ));
        }
        let mut x = f.clone();
        for (conv, relu, up) in &self.convs {
            x = conv.forward(&x)?;
            if *relu {
                x = x.relu();
            }
            if *up {
                x = x.upsample2()?;
            }
        }
        Ok(x)
    }

    /// Image in `[0, 1]` at 8x the feature resolution. Saturated pixels
    /// get no gradient, which keeps the pre-clamp output bounded.
    pub fn decode(&self, f: &Tensor) -> Result<Tensor> {
        self.decode_unclamped(f)?.clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::Rng;

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.random_range(-2.0..2.0)).collect(), shape).unwrap()
    }

    fn small_vgg() -> VggEncoder {
        VggEncoder::new(&VggConfig {
            width_divisor: 16,
            ..VggConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn constant_map_stats() {
        let f = Tensor::full(3.5, &[1, 2, 4, 4]);
        let s = channel_stats(&f).unwrap();
        assert!(s.mean.data().iter().all(|&m| (m - 3.5).abs() < 1e-12));
        assert!(s
            .std
            .data()
            .iter()
            .all(|&d| (d - STATS_EPS.sqrt()).abs() < 1e-12));
    }

    #[test]
    fn two_point_stats() {
        let f = Tensor::new(vec![1.0, 3.0, 1.0, 3.0], &[1, 1, 2, 2]).unwrap();
        let s = channel_stats(&f).unwrap();
        assert!((s.mean.item().unwrap() - 2.0).abs() < 1e-12);
        assert!((s.std.item().unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn normalize_round_trip_and_idempotence() {
        let f = rand_tensor(3, &[2, 3, 5, 4]);
        let s = channel_stats(&f).unwrap();
        let n = normalize(&f).unwrap();
        let ns = channel_stats(&n).unwrap();
        assert!(ns.mean.data().iter().all(|m| m.abs() < 1e-4));
        assert!(ns.std.data().iter().all(|d| (d - 1.0).abs() < 1e-4));
        let back = denormalize(&n, &s).unwrap();
        assert!(back
            .data()
            .iter()
            .zip(f.data())
            .all(|(a, b)| (a - b).abs() < 1e-4));
        let nn = normalize(&n).unwrap();
        assert!(nn
            .data()
            .iter()
            .zip(n.data())
            .all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn pyramid_shapes() {
        let vgg = small_vgg();
        let img = rand_tensor(1, &[1, 3, 64, 48]).affine(0.25, 0.5);
        let pyr = vgg.encode(&img).unwrap();
        assert_eq!(
            pyr.get(Layer::Relu1_2).unwrap().tensor().shape(),
            &[1, 4, 64, 48]
        );
        assert_eq!(
            pyr.get(Layer::Relu2_2).unwrap().tensor().shape(),
            &[1, 8, 32, 24]
        );
        assert_eq!(
            pyr.get(Layer::Relu3_4).unwrap().tensor().shape(),
            &[1, 16, 16, 12]
        );
        assert_eq!(
            pyr.get(Layer::Relu4_1).unwrap().tensor().shape(),
            &[1, 32, 8, 6]
        );
    }

    #[test]
    fn encoder_rejects_bad_inputs() {
        let vgg = small_vgg();
        assert!(matches!(
            vgg.encode(&Tensor::zeros(&[1, 3, 16, 40])),
            Err(Error::ImageTooSmall { .. })
        ));
        assert!(matches!(
            vgg.encode(&Tensor::zeros(&[1, 1, 32, 32])),
            Err(Error::Channels(1))
        ));
    }

    #[test]
    fn gray_image_has_flat_shallow_features() {
        let vgg = small_vgg();
        let pyr = vgg.encode(&Tensor::full(0.5, &[1, 3, 32, 32])).unwrap();
        let f = pyr.get(Layer::Relu1_2).unwrap().tensor();
        // Zero padding makes the border differ; the interior is flat.
        let inner = f.narrow(2, 2, 28).unwrap().narrow(3, 2, 28).unwrap();
        let var = inner.var_keepdim(&[2, 3]).unwrap();
        assert!(var.data().iter().all(|v| *v < 1e-20), "{:?}", var.data());
    }

    #[test]
    fn decoder_upsamples_by_eight_and_clamps() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dec = Decoder::new(
            &mut ParamBuilder::new(&mut store, &mut rng).pp("decoder"),
            16,
        );
        let f = rand_tensor(2, &[1, 32, 4, 4]).scale(5.0);
        let img = dec.decode(&f).unwrap();
        assert_eq!(img.shape(), &[1, 3, 32, 32]);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(dec.decode(&Tensor::zeros(&[1, 16, 4, 4])).is_err());
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dec = Decoder::new(&mut ParamBuilder::new(&mut store, &mut rng), 32);
        let f = rand_tensor(6, &[1, 16, 2, 2]);
        let r =
            check_gradients(&[f], |x| dec.decode_unclamped(&x[0])?.sum_all(), 1e-5, 64).unwrap();
        assert!(r.passes(1e-3), "{r:?}");
    }

    #[test]
    fn encoding_is_deterministic_and_frozen() {
        let a = small_vgg();
        let b = small_vgg();
        assert_eq!(a.weights_hash(), b.weights_hash());
        let img = rand_tensor(9, &[1, 3, 32, 32]).affine(0.2, 0.5);
        let pa = a.encode(&img).unwrap();
        let pb = a.encode(&img).unwrap();
        for l in Layer::ALL {
            assert_eq!(
                pa.get(l).unwrap().tensor().data(),
                pb.get(l).unwrap().tensor().data()
            );
        }
    }
}
