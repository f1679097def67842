//! Metrics: artist affinity, CLIP content/style scores with their harmonic
//! mean, VGG content/style scores, deception rate, and embedding export.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{channel_stats, Layer, VggEncoder};
use crate::clip::{cosine_similarity, ClipEmbedding, JointEmbedder, StylePrompt};
use crate::error::{Error, Result};
use crate::inference::{BlendMode, Stylizer};
use crate::nn::{Init, ParamBuilder, ParamStore};
use crate::objectives::{content_loss, style_loss, Reduction};
use crate::optim::{collect_grads, Adam, AdamConfig};
use crate::tensor::Tensor;

/// Version of every report and table written by this module.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Per-painting softmax over artists of raw embedding dot products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    pub schema_version: u32,
    pub paintings: Vec<String>,
    pub artists: Vec<String>,
    /// `paintings.len()` rows of `artists.len()` probabilities.
    pub scores: Vec<Vec<f64>>,
}

impl AffinityMatrix {
    /// Softmax rows of `image_i . text_j`. The products are not normalized.
    pub fn from_embeddings(
        paintings: Vec<String>,
        images: &[ClipEmbedding],
        artists: Vec<String>,
        texts: &[ClipEmbedding],
    ) -> Result<Self> {
        if artists.len() < 2 {
            return Err(Error::Config("affinity needs at least 2 artists".into()));
        }
        if paintings.len() != images.len() || artists.len() != texts.len() {
            return Err(Error::Config(
                "labels and embeddings differ in length".into(),
            ));
        }
        let scores = images
            .iter()
            .map(|img| {
                let logits: Vec<f64> = texts
                    .iter()
                    .map(|t| {
                        img.as_slice()
                            .iter()
                            .zip(t.as_slice())
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect();
        Ok(AffinityMatrix {
            schema_version: REPORT_SCHEMA_VERSION,
            paintings,
            artists,
            scores,
        })
    }

    pub fn row_argmax(&self) -> Vec<usize> {
        self.scores
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                        if v > best.1 {
                            (j, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }

    /// Fraction of rows whose argmax is the row's own artist, painting `i`
    /// being by artist `i`.
    pub fn diagonal_hit_rate(&self) -> f64 {
        let hits = self
            .row_argmax()
            .iter()
            .enumerate()
            .filter(|(i, &j)| *i == j)
            .count();
        hits as f64 / self.scores.len().max(1) as f64
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["schema_version".to_string(), "painting".to_string()];
        header.extend(self.artists.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.paintings.iter().zip(&self.scores) {
            let mut rec = vec![self.schema_version.to_string(), name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        csv_string(w)
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Encodes each painting and each artist name and builds the matrix.
pub fn affinity_matrix(
    clip: &JointEmbedder,
    paintings: &[(String, Tensor)],
    artist_names: &[String],
) -> Result<AffinityMatrix> {
    let images = paintings
        .iter()
        .map(|(_, img)| clip.encode_image(img))
        .collect::<Result<Vec<_>>>()?;
    let texts = artist_names
        .iter()
        .map(|a| clip.encode_text(a))
        .collect::<Result<Vec<_>>>()?;
    AffinityMatrix::from_embeddings(
        paintings.iter().map(|(n, _)| n.clone()).collect(),
        &images,
        artist_names.to_vec(),
        &texts,
    )
}

/// Harmonic mean of the two scores; undefined unless both are positive.
pub fn f1_score(s_cont: f64, s_style: f64) -> Option<f64> {
    (s_cont > 0.0 && s_style > 0.0).then(|| 2.0 * s_style * s_cont / (s_style + s_cont))
}

/// What the style score is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleKind {
    /// A reference painting's image embedding.
    Image,
    /// A style text's embedding.
    Text,
    /// A weighted mix of prompts.
    Blend,
}

impl StyleKind {
    pub fn of(prompt: &StylePrompt) -> Self {
        match prompt {
            StylePrompt::Text { .. } => StyleKind::Text,
            StylePrompt::Image { .. } => StyleKind::Image,
            StylePrompt::Blend { .. } => StyleKind::Blend,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub s_cont: f64,
    pub s_style: f64,
    pub style_kind: StyleKind,
    /// `None` when either score is not positive.
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vgg_content: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vgg_style: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deception_rate: Option<f64>,
}

impl MetricReport {
    pub fn from_scores(s_cont: f64, s_style: f64, style_kind: StyleKind) -> Self {
        MetricReport {
            schema_version: REPORT_SCHEMA_VERSION,
            s_cont,
            s_style,
            style_kind,
            f1: f1_score(s_cont, s_style),
            vgg_content: None,
            vgg_style: None,
            deception_rate: None,
        }
    }
}

/// Content score against `i_c` and style score against the resolved
/// style embedding `anchor`.
pub fn clip_scores(
    clip: &JointEmbedder,
    i_c: &Tensor,
    i_cs: &Tensor,
    anchor: &ClipEmbedding,
    kind: StyleKind,
) -> Result<MetricReport> {
    let e_cs = clip.encode_image(i_cs)?;
    let s_cont = cosine_similarity(clip.encode_image(i_c)?.as_slice(), e_cs.as_slice())?;
    let s_style = cosine_similarity(anchor.as_slice(), e_cs.as_slice())?;
    Ok(MetricReport::from_scores(s_cont, s_style, kind))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VggScores {
    pub content: f64,
    pub style: f64,
}

/// Content and style losses as metrics, mean-reduced.
pub fn vgg_scores(
    vgg: &VggEncoder,
    i_c: &Tensor,
    i_s: &Tensor,
    i_cs: &Tensor,
) -> Result<VggScores> {
    let (c, s, cs) = (
        vgg.encode(&i_c.detach())?,
        vgg.encode(&i_s.detach())?,
        vgg.encode(&i_cs.detach())?,
    );
    Ok(VggScores {
        content: content_loss(&cs, &c, Reduction::Mean)?.item()?,
        style: style_loss(&cs, &s, Reduction::Mean)?.item()?,
    })
}

/// Predicts artist indices for images.
pub trait ArtistClassifier {
    fn labels(&self) -> &[String];
    fn predict(&self, image: &Tensor) -> Result<usize>;
}

/// Fraction of stylized images classified as their target artist.
pub fn deception_rate(
    stylized: &[(Tensor, String)],
    classifier: &dyn ArtistClassifier,
) -> Result<f64> {
    if stylized.is_empty() {
        return Err(Error::Dataset("no stylized images".into()));
    }
    let mut hits = 0usize;
    for (img, target) in stylized {
        let want = classifier
            .labels()
            .iter()
            .position(|l| l == target)
            .ok_or_else(|| Error::LabelMismatch(target.clone()))?;
        if classifier.predict(img)? == want {
            hits += 1;
        }
    }
    Ok(hits as f64 / stylized.len() as f64)
}

/// Per-channel mean and std of every encoder layer, concatenated.
pub fn style_descriptor(vgg: &VggEncoder, image: &Tensor) -> Result<Vec<f64>> {
    let pyr = vgg.encode(&image.detach())?;
    let mut out = Vec::new();
    for layer in Layer::ALL {
        let s = channel_stats(pyr.get(layer)?.tensor())?;
        out.extend(s.mean.to_vec());
        out.extend(s.std.to_vec());
    }
    Ok(out)
}

/// Softmax regression over standardized style descriptors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeClassifier {
    pub schema_version: u32,
    pub labels: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `(features, classes)`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTraining {
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeTraining {
    fn default() -> Self {
        ProbeTraining {
            steps: 300,
            lr: 0.05,
            l2: 1e-3,
            seed: 0,
        }
    }
}

impl ProbeClassifier {
    /// Fits on `(descriptor, label index)` pairs, full batch.
    pub fn fit(
        labels: Vec<String>,
        samples: &[(Vec<f64>, usize)],
        cfg: &ProbeTraining,
    ) -> Result<Self> {
        let (n, c) = (samples.len(), labels.len());
        if n == 0 || c < 2 {
            return Err(Error::Dataset(
                "classifier needs samples and at least 2 labels".into(),
            ));
        }
        let d = samples[0].0.len();
        if let Some((_, bad)) = samples.iter().find(|(x, y)| x.len() != d || *y >= c) {
            return Err(Error::Dataset(format!(
                "bad classifier sample with label {bad}"
            )));
        }
        let mut mean = vec![0.0; d];
        for (x, _) in samples {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n as f64;
            }
        }
        let mut std = vec![0.0; d];
        for (x, _) in samples {
            for ((s, v), m) in std.iter_mut().zip(x).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        let std: Vec<f64> = std.into_iter().map(|v| v.sqrt().max(1e-6)).collect();
        let x: Vec<f64> = samples
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s))
            .collect();
        let x = Tensor::new(x, &[n, d])?;
        let mut onehot = vec![0.0; n * c];
        for (i, (_, y)) in samples.iter().enumerate() {
            onehot[i * c + y] = 1.0;
        }
        let onehot = Tensor::new(onehot, &[n, c])?;

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let w = pb.param("w", &[d, c], Init::Normal(0.01));
        let b = pb.param("b", &[1, c], Init::Zeros);
        store.set_trainable(true);
        let opt_cfg = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new();
        for _ in 0..cfg.steps {
            let logits = x.matmul(&w.value())?.add(&b.value())?;
            let nll = logits
                .log_softmax_last()?
                .mul(&onehot)?
                .sum_all()?
                .scale(-1.0 / n as f64);
            let loss = nll.add(&w.value().sqr()?.sum_all()?.scale(cfg.l2))?;
            let g = collect_grads(&store, &loss.backward()?, |_| true);
            opt.update(&store, &g, &opt_cfg)?;
        }
        Ok(ProbeClassifier {
            schema_version: REPORT_SCHEMA_VERSION,
            labels,
            mean,
            std,
            weights: w.value().to_vec(),
            bias: b.value().to_vec(),
        })
    }

    pub fn logits(&self, descriptor: &[f64]) -> Result<Vec<f64>> {
        let c = self.labels.len();
        if descriptor.len() != self.mean.len() {
            return Err(Error::Dimension {
                expected: self.mean.len(),
                got: descriptor.len(),
            });
        }
        let mut out = self.bias.clone();
        for (k, v) in descriptor.iter().enumerate() {
            let z = (v - self.mean[k]) / self.std[k];
            for (j, o) in out.iter_mut().enumerate() {
                *o += z * self.weights[k * c + j];
            }
        }
        Ok(out)
    }

    pub fn predict_descriptor(&self, descriptor: &[f64]) -> Result<usize> {
        let l = self.logits(descriptor)?;
        Ok(l.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                if v > best.1 {
                    (j, v)
                } else {
                    best
                }
            })
            .0)
    }
}

/// A probe bound to the encoder that produces its descriptors.
pub struct VggProbe<'a> {
    pub vgg: &'a VggEncoder,
    pub probe: &'a ProbeClassifier,
}

impl ArtistClassifier for VggProbe<'_> {
    fn labels(&self) -> &[String] {
        &self.probe.labels
    }

    fn predict(&self, image: &Tensor) -> Result<usize> {
        self.probe
            .predict_descriptor(&style_descriptor(self.vgg, image)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Content,
    Stylized,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub label: String,
    pub kind: RowKind,
    pub values: Vec<f64>,
}

/// Joint-space embeddings of images and prompts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub rows: Vec<EmbeddingRow>,
}

/// One row per image, then one per prompt.
pub fn export_embeddings(
    clip: &JointEmbedder,
    images: &[(String, RowKind, Tensor)],
    prompts: &[String],
) -> Result<EmbeddingTable> {
    if images.is_empty() && prompts.is_empty() {
        return Err(Error::Dataset("nothing to export".into()));
    }
    let mut rows = Vec::with_capacity(images.len() + prompts.len());
    for (label, kind, img) in images {
        rows.push(EmbeddingRow {
            label: label.clone(),
            kind: *kind,
            values: clip.encode_image(img)?.as_slice().to_vec(),
        });
    }
    for p in prompts {
        rows.push(EmbeddingRow {
            label: p.clone(),
            kind: RowKind::Text,
            values: clip.encode_text(p)?.as_slice().to_vec(),
        });
    }
    Ok(EmbeddingTable { rows })
}

impl EmbeddingTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let dim = self.rows.first().map_or(0, |r| r.values.len());
        let mut header = vec!["schema_version".to_string(), "label".into(), "kind".into()];
        header.extend((0..dim).map(|i| format!("e{i}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let kind = serde_json::to_value(r.kind)?
                .as_str()
                .expect("unit variant")
                .to_string();
            let mut rec = vec![REPORT_SCHEMA_VERSION.to_string(), r.label.clone(), kind];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        csv_string(w)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    /// Mean pairwise distance between the centroids of rows grouped by
    /// `group`, over rows of `kind`.
    pub fn mean_centroid_distance(
        &self,
        kind: RowKind,
        group: impl Fn(&EmbeddingRow) -> String,
    ) -> f64 {
        let mut sums: std::collections::BTreeMap<String, (Vec<f64>, usize)> = Default::default();
        for r in self.rows.iter().filter(|r| r.kind == kind) {
            let e = sums
                .entry(group(r))
                .or_insert_with(|| (vec![0.0; r.values.len()], 0));
            for (a, v) in e.0.iter_mut().zip(&r.values) {
                *a += v;
            }
            e.1 += 1;
        }
        let centroids: Vec<Vec<f64>> = sums
            .into_values()
            .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
            .collect();
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..centroids.len() {
            for j in i + 1..centroids.len() {
                total += centroids[i]
                    .iter()
                    .zip(&centroids[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                pairs += 1;
            }
        }
        if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 10.0,
            iterations: 500,
            learning_rate: 100.0,
            seed: 0,
        }
    }
}

/// Exact t-SNE to two dimensions with early exaggeration and momentum.
pub fn tsne(points: &[Vec<f64>], cfg: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Dataset("t-SNE needs at least 2 points".into()));
    }
    let d2: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum()
        })
        .collect();
    // Conditional affinities by bisection on the precision to hit the
    // target entropy.
    let target = cfg.perplexity.min((n - 1) as f64).ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
        let row = &d2[i * n..(i + 1) * n];
        for _ in 0..64 {
            let min = (0..n)
                .filter(|&j| j != i)
                .map(|j| row[j])
                .fold(f64::INFINITY, f64::min);
            let w: Vec<f64> = (0..n)
                .map(|j| {
                    if j == i {
                        0.0
                    } else {
                        (-(row[j] - min) * beta).exp()
                    }
                })
                .collect();
            let z: f64 = w.iter().sum();
            let h = z.ln() + beta * (0..n).map(|j| w[j] * (row[j] - min)).sum::<f64>() / z;
            for j in 0..n {
                p[i * n + j] = w[j] / z;
            }
            if (h - target).abs() < 1e-5 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() {
                    (beta + hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let mut pj = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            pj[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut q = vec![0.0; n * n];
    for it in 0..cfg.iterations {
        let exaggeration = if it < 100 { 12.0 } else { 1.0 };
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let v = 1.0 / (1.0 + (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2));
                    q[i * n + j] = v;
                    z += v;
                }
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i != j {
                    let w = q[i * n + j];
                    let m = 4.0 * (exaggeration * pj[i * n + j] - w / z) * w;
                    g[0] += m * (y[i][0] - y[j][0]);
                    g[1] += m * (y[i][1] - y[j][1]);
                }
            }
            for k in 0..2 {
                vel[i][k] = momentum * vel[i][k] - cfg.learning_rate * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
    }
    Ok(y)
}

/// Text-style preference of one artist prompt over a set of contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRow {
    pub artist: String,
    /// Contents whose output scores higher against this artist's name than
    /// against every other artist's name.
    pub hits: usize,
    pub total: usize,
    /// Per content: score toward the target minus the best other score.
    pub margins: Vec<f64>,
}

impl PreferenceRow {
    pub fn rate(&self) -> f64 {
        self.hits as f64 / self.total.max(1) as f64
    }
}

/// For each artist name, stylizes every content with it and compares the
/// text-style score toward that name with the scores toward the others.
pub fn artist_preference(
    stylizer: &Stylizer,
    contents: &[Tensor],
    artists: &[String],
) -> Result<Vec<PreferenceRow>> {
    let clip = &stylizer.frozen().clip;
    let texts = artists
        .iter()
        .map(|a| clip.encode_text(a))
        .collect::<Result<Vec<_>>>()?;
    let none = HashMap::new();
    let mut rows = Vec::with_capacity(artists.len());
    for (a, artist) in artists.iter().enumerate() {
        let style = stylizer.resolve(
            &StylePrompt::text(artist.clone()),
            &none,
            BlendMode::Embedding,
        )?;
        let mut margins = Vec::with_capacity(contents.len());
        for c in contents {
            let e = clip.encode_image(&stylizer.stylize(c, &style, 1.0)?)?;
            let scores = texts
                .iter()
                .map(|t| cosine_similarity(t.as_slice(), e.as_slice()))
                .collect::<Result<Vec<_>>>()?;
            let other = scores
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != a)
                .map(|(_, s)| *s)
                .fold(f64::NEG_INFINITY, f64::max);
            margins.push(scores[a] - other);
        }
        rows.push(PreferenceRow {
            artist: artist.clone(),
            hits: margins.iter().filter(|m| **m > 0.0).count(),
            total: contents.len(),
            margins,
        });
    }
    Ok(rows)
}
