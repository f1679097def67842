//! Training objectives and their weighted sum.
//!
//! Every loss takes tracked tensors and returns a scalar tensor, so the same
//! code serves training (backward) and evaluation (read the value).

use serde::{Deserialize, Serialize};

use crate::backbone::{channel_stats, FeatureMap, FeaturePyramid, Layer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norms below this are treated as zero directions.
const DIRECTION_EPS: f64 = 1e-12;

/// Added to self-similarity logits so an anchor never competes with itself.
const SELF_MASK: f64 = -1e9;

/// How elementwise L1 terms are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Plain sum over all elements.
    #[default]
    Sum,
    /// Mean over the elements of each layer, summed over layers.
    Mean,
}

impl Reduction {
    fn apply(self, t: &Tensor) -> Result<Tensor> {
        match self {
            Reduction::Sum => t.sum_all(),
            Reduction::Mean => t.mean_all(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub clip: f64,
    pub clip_f: f64,
    pub sim: f64,
    pub sty: f64,
    pub con: f64,
    pub id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            clip: 100.0,
            clip_f: 50.0,
            sim: 10.0,
            sty: 5.0,
            con: 1.0,
            id: 2.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            clip: 0.0,
            clip_f: 0.0,
            sim: 0.0,
            sty: 0.0,
            con: 0.0,
            id: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.clip,
            self.clip_f,
            self.sim,
            self.sty,
            self.con,
            self.id,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in TERM_NAMES.iter().zip(self.as_array()) {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} = {w} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

pub const TERM_NAMES: [&str; 6] = ["clip", "clip_f", "sim", "sty", "con", "id"];

/// Which set the second contrastive term compares text-driven outputs with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextPairing {
    /// Image-driven anchors against text-driven candidates.
    #[default]
    CrossModal,
    /// Text-driven anchors against text-driven candidates.
    WithinText,
}

/// Numerator of the per-anchor term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Numerator {
    /// The anchor's designated positive partner.
    #[default]
    Positive,
    /// Every non-anchor element in turn, averaged.
    AllOthers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub numerator: Numerator,
    pub text_pairing: TextPairing,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.1,
            batch_size: 4,
            numerator: Numerator::Positive,
            text_pairing: TextPairing::CrossModal,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "contrastive batch size {} must be >= 2",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Features `(M, D)` where element `a` has the positive `partners[a]`.
#[derive(Clone, Debug)]
pub struct ContrastiveSet {
    features: Tensor,
    partners: Vec<usize>,
}

impl ContrastiveSet {
    pub fn new(features: Tensor, partners: Vec<usize>) -> Result<Self> {
        let (m, _) = features.dims2()?;
        if m < 2 {
            return Err(Error::NoPositives(format!("{m} element(s)")));
        }
        if partners.len() != m {
            return Err(Error::shape(
                "contrastive",
                format!("{} partners for {m} features", partners.len()),
            ));
        }
        if let Some(a) = (0..m).find(|&a| partners[a] >= m || partners[a] == a) {
            return Err(Error::NoPositives(format!(
                "element {a} has no valid partner"
            )));
        }
        Ok(ContrastiveSet { features, partners })
    }

    /// Each element's positive is the unique other element with its label.
    pub fn from_labels<S: AsRef<str>>(features: Tensor, labels: &[S]) -> Result<Self> {
        let partners = labels
            .iter()
            .enumerate()
            .map(|(a, la)| {
                let same: Vec<usize> = labels
                    .iter()
                    .enumerate()
                    .filter(|(b, lb)| *b != a && lb.as_ref() == la.as_ref())
                    .map(|(b, _)| b)
                    .collect();
                match same.as_slice() {
                    [p] => Ok(*p),
                    [] => Err(Error::NoPositives(format!(
                        "label {:?} appears once",
                        la.as_ref()
                    ))),
                    _ => Err(Error::NoPositives(format!(
                        "label {:?} has {} partners, expected one",
                        la.as_ref(),
                        same.len()
                    ))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        ContrastiveSet::new(features, partners)
    }

    /// Stacks two `(N, D)` views; row `i` of one is paired with row `i` of the other.
    pub fn paired(first: &Tensor, second: &Tensor) -> Result<Self> {
        let (n, d) = first.dims2()?;
        if second.shape() != [n, d] {
            return Err(Error::shape(
                "contrastive",
                format!("{:?} vs {:?}", first.shape(), second.shape()),
            ));
        }
        let partners = (0..2 * n).map(|a| (a + n) % (2 * n)).collect();
        ContrastiveSet::new(Tensor::cat(&[first.clone(), second.clone()], 0)?, partners)
    }

    pub fn len(&self) -> usize {
        self.partners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partners.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn partners(&self) -> &[usize] {
        &self.partners
    }
}

/// Rows scaled to unit length; a zero row is an error.
fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let norms = x.sqr()?.sum_keepdim(&[-1])?.sqrt();
    if norms.data().iter().any(|n| *n <= DIRECTION_EPS) {
        return Err(Error::ZeroNorm);
    }
    x.div(&norms)
}

/// Temperature-scaled cross entropy over one set, averaged over anchors.
pub fn nt_xent(set: &ContrastiveSet, temperature: f64, numerator: Numerator) -> Result<Tensor> {
    nt_xent_per_anchor(set, temperature, numerator)?.mean_all()
}

/// Per-anchor cross entropy terms, `(M)`.
pub fn nt_xent_per_anchor(
    set: &ContrastiveSet,
    temperature: f64,
    numerator: Numerator,
) -> Result<Tensor> {
    let m = set.len();
    let z = unit_rows(&set.features)?;
    let logits = z.matmul(&z.t()?)?.scale(1.0 / temperature);
    let mut mask = vec![0.0; m * m];
    for a in 0..m {
        mask[a * m + a] = SELF_MASK;
    }
    let log_p = logits
        .add(&Tensor::new(mask, &[m, m])?)?
        .log_softmax_last()?;
    let mut pick = vec![0.0; m * m];
    for a in 0..m {
        match numerator {
            Numerator::Positive => pick[a * m + set.partners[a]] = 1.0,
            Numerator::AllOthers => {
                for k in (0..m).filter(|&k| k != a) {
                    pick[a * m + k] = 1.0 / (m - 1) as f64;
                }
            }
        }
    }
    Ok(log_p
        .mul(&Tensor::new(pick, &[m, m])?)?
        .sum_keepdim(&[-1])?
        .reshape(&[m])?
        .neg())
}

/// Sum of the image-driven and text-driven contrastive terms.
pub fn contrastive_similarity_loss(
    image_set: &ContrastiveSet,
    text_set: &ContrastiveSet,
    cfg: &ContrastiveConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let a = nt_xent(image_set, cfg.temperature, cfg.numerator)?;
    let b = nt_xent(text_set, cfg.temperature, cfg.numerator)?;
    a.add(&b)
}

/// Builds both contrastive sets from one training step's `nu` features.
///
/// `nu_img`/`nu_img2` are outputs driven by the two paintings of each
/// artist, `nu_txt`/`nu_txt2` by the two augmented names.
pub fn contrastive_sets(
    nu_img: &Tensor,
    nu_img2: &Tensor,
    nu_txt: &Tensor,
    nu_txt2: &Tensor,
    pairing: TextPairing,
) -> Result<(ContrastiveSet, ContrastiveSet)> {
    let image = ContrastiveSet::paired(nu_img, nu_img2)?;
    let text = match pairing {
        TextPairing::CrossModal => ContrastiveSet::paired(nu_img, nu_txt2)?,
        TextPairing::WithinText => ContrastiveSet::paired(nu_txt, nu_txt2)?,
    };
    Ok((image, text))
}

/// `1 - cos(dI, dT)` averaged over the batch.
///
/// `e_cs`, `e_c`: `(B, 512)` image embeddings of outputs and contents.
/// `delta_t`: `(1, 512)` or `(B, 512)` text direction.
pub fn directional_clip_loss(e_cs: &Tensor, e_c: &Tensor, delta_t: &Tensor) -> Result<Tensor> {
    let d_i = e_cs.sub(e_c)?;
    let (b, d) = d_i.dims2()?;
    let (tb, td) = delta_t.dims2()?;
    if td != d || (tb != 1 && tb != b) {
        return Err(Error::shape(
            "directional_clip_loss",
            format!("{:?} vs {:?}", d_i.shape(), delta_t.shape()),
        ));
    }
    let ni = d_i.sqr()?.sum_keepdim(&[-1])?.sqrt();
    let nt = delta_t.sqr()?.sum_keepdim(&[-1])?.sqrt();
    if ni.data().iter().any(|v| *v <= DIRECTION_EPS) {
        return Err(Error::DegenerateDirection("image direction"));
    }
    if nt.data().iter().any(|v| *v <= DIRECTION_EPS) {
        return Err(Error::DegenerateDirection("text direction"));
    }
    let cos = d_i.mul(delta_t)?.sum_keepdim(&[-1])?.div(&ni)?.div(&nt)?;
    Ok(cos.mean_all()?.neg().affine(1.0, 1.0))
}

/// Text direction `E_T(t_s) - E_T(t_o)`.
pub fn text_direction(target: &Tensor, source: &Tensor) -> Result<Tensor> {
    target.sub(source)
}

/// Mean over the batch of squared distances between paired rows.
pub fn clip_feature_loss(nu_a: &Tensor, nu_b: &Tensor) -> Result<Tensor> {
    if nu_a.rank() != 2 || nu_a.shape() != nu_b.shape() {
        return Err(Error::shape(
            "clip_feature_loss",
            format!("{:?} vs {:?}", nu_a.shape(), nu_b.shape()),
        ));
    }
    let n = nu_a.dim(0) as f64;
    Ok(nu_a.sub(nu_b)?.sqr()?.sum_all()?.scale(1.0 / n))
}

fn l1(a: &Tensor, b: &Tensor, op: &'static str, reduction: Reduction) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    reduction.apply(&a.sub(b)?.abs())
}

/// L1 distance of channel means plus L1 distance of channel stds over the
/// four style layers.
pub fn style_loss(
    pyr_cs: &FeaturePyramid,
    pyr_s: &FeaturePyramid,
    reduction: Reduction,
) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for layer in Layer::ALL {
        let a = channel_stats(pyr_cs.get(layer)?.tensor())?;
        let b = channel_stats(pyr_s.get(layer)?.tensor())?;
        total = total
            .add(&l1(&a.mean, &b.mean, "style_loss", reduction)?)?
            .add(&l1(&a.std, &b.std, "style_loss", reduction)?)?;
    }
    Ok(total)
}

/// Elementwise L1 distance over the two content layers.
pub fn content_loss(
    pyr_cs: &FeaturePyramid,
    pyr_c: &FeaturePyramid,
    reduction: Reduction,
) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for layer in Layer::CONTENT {
        total = total.add(&l1(
            pyr_cs.get(layer)?.tensor(),
            pyr_c.get(layer)?.tensor(),
            "content_loss",
            reduction,
        )?)?;
    }
    Ok(total)
}

/// L1 distance between the self-stylized feature and the content feature.
pub fn identity_loss(
    f_cs_self: &FeatureMap,
    f_c: &FeatureMap,
    reduction: Reduction,
) -> Result<Tensor> {
    l1(f_cs_self.tensor(), f_c.tensor(), "identity_loss", reduction)
}

/// The six scalar terms of one step.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub clip: Tensor,
    pub clip_f: Tensor,
    pub sim: Tensor,
    pub sty: Tensor,
    pub con: Tensor,
    pub id: Tensor,
}

impl LossTerms {
    pub fn from_values(v: [f64; 6]) -> Self {
        LossTerms {
            clip: Tensor::scalar(v[0]),
            clip_f: Tensor::scalar(v[1]),
            sim: Tensor::scalar(v[2]),
            sty: Tensor::scalar(v[3]),
            con: Tensor::scalar(v[4]),
            id: Tensor::scalar(v[5]),
        }
    }

    fn as_array(&self) -> [&Tensor; 6] {
        [
            &self.clip,
            &self.clip_f,
            &self.sim,
            &self.sty,
            &self.con,
            &self.id,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub clip: f64,
    pub clip_f: f64,
    pub sim: f64,
    pub sty: f64,
    pub con: f64,
    pub id: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [f64; 6] {
        [
            self.clip,
            self.clip_f,
            self.sim,
            self.sty,
            self.con,
            self.id,
        ]
    }
}

/// Weighted sum of the six terms; a non-finite term aborts with its name.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<(Tensor, LossReport)> {
    weights.validate()?;
    let ts = terms.as_array();
    let mut values = [0.0; 6];
    for (i, t) in ts.iter().enumerate() {
        let v = t.item()?;
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(TERM_NAMES[i]));
        }
        values[i] = v;
    }
    let mut total = Tensor::scalar(0.0);
    for (t, w) in ts.iter().zip(weights.as_array()) {
        if w != 0.0 {
            total = total.add(&t.reshape(&[])?.scale(w))?;
        }
    }
    let report = LossReport {
        clip: values[0],
        clip_f: values[1],
        sim: values[2],
        sty: values[3],
        con: values[4],
        id: values[5],
        total: total.item()?,
    };
    Ok((total, report))
}
