//! Dataset manifest, training patches and minibatch sampling.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clip::PromptTemplates;
use crate::error::{Error, Result};
use crate::image_io::from_rgb;
use crate::tensor::Tensor;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "PNG"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    /// Relative to the corresponding root.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtistEntry {
    /// Display name used in prompts.
    pub name: String,
    pub dir: String,
    pub paintings: Vec<ImageEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub artist: String,
    pub reason: String,
}

/// Content images plus the artist-grouped style corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub content_root: PathBuf,
    pub style_root: PathBuf,
    pub content: Vec<ImageEntry>,
    pub artists: Vec<ArtistEntry>,
    pub excluded: Vec<Exclusion>,
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
            IMAGE_EXTENSIONS.contains(&e) || IMAGE_EXTENSIONS.contains(&e.to_lowercase().as_str())
        })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

fn hash_file(p: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(p)?)))
}

fn image_entries(dir: &Path) -> Result<Vec<ImageEntry>> {
    sorted_entries(dir)?
        .into_iter()
        .filter(|p| is_image(p))
        .map(|p| {
            Ok(ImageEntry {
                path: p
                    .file_name()
                    .expect("file name")
                    .to_string_lossy()
                    .into_owned(),
                sha256: hash_file(&p)?,
            })
        })
        .collect()
}

/// Directory name to prompt name: underscores become spaces.
pub fn artist_display_name(dir: &str) -> String {
    dir.replace('_', " ")
}

impl ArtistEntry {
    pub fn painting_path(&self, style_root: &Path, i: usize) -> PathBuf {
        style_root.join(&self.dir).join(&self.paintings[i].path)
    }
}

/// Scans `content_root/*` and `style_root/<artist>/*`.
pub fn build_manifest(content_root: &Path, style_root: &Path) -> Result<Manifest> {
    let content = image_entries(content_root)
        .map_err(|e| Error::Dataset(format!("content root {}: {e}", content_root.display())))?;
    if content.is_empty() {
        return Err(Error::Dataset(format!(
            "no images under {}",
            content_root.display()
        )));
    }
    let mut artists = Vec::new();
    let mut excluded = Vec::new();
    let mut names = BTreeSet::new();
    let dirs = sorted_entries(style_root)
        .map_err(|e| Error::Dataset(format!("style root {}: {e}", style_root.display())))?;
    for dir in dirs.into_iter().filter(|d| d.is_dir()) {
        let dir_name = dir
            .file_name()
            .expect("dir name")
            .to_string_lossy()
            .into_owned();
        let name = artist_display_name(&dir_name);
        let paintings = image_entries(&dir)?;
        if paintings.len() < 2 {
            log::warn!("excluding artist {name:?}: {} painting(s)", paintings.len());
            excluded.push(Exclusion {
                artist: name,
                reason: format!("{} painting(s), at least 2 required", paintings.len()),
            });
            continue;
        }
        if !names.insert(name.clone()) {
            excluded.push(Exclusion {
                artist: name,
                reason: format!("directory {dir_name:?} duplicates an artist name"),
            });
            continue;
        }
        artists.push(ArtistEntry {
            name,
            dir: dir_name,
            paintings,
        });
    }
    if artists.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable artist directories under {}",
            style_root.display()
        )));
    }
    Ok(Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        content_root: content_root.to_path_buf(),
        style_root: style_root.to_path_buf(),
        content,
        artists,
        excluded,
    })
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(&std::fs::read(path)?)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported manifest schema {}",
                m.schema_version
            )));
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.content.is_empty() {
            return Err(Error::Dataset("manifest has no content images".into()));
        }
        let mut names = BTreeSet::new();
        for a in &self.artists {
            if a.paintings.len() < 2 {
                return Err(Error::Dataset(format!(
                    "artist {:?} has fewer than 2 paintings",
                    a.name
                )));
            }
            if !names.insert(&a.name) {
                return Err(Error::Dataset(format!("duplicate artist {:?}", a.name)));
            }
        }
        Ok(())
    }

    pub fn artist_names(&self) -> Vec<String> {
        self.artists.iter().map(|a| a.name.clone()).collect()
    }

    pub fn content_path(&self, i: usize) -> PathBuf {
        self.content_root.join(&self.content[i].path)
    }

    pub fn style_count(&self) -> usize {
        self.artists.iter().map(|a| a.paintings.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    /// Shorter side to `load_size`, aspect preserved.
    #[default]
    ShorterSide,
    /// Both sides to `load_size`.
    Squash,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub load_size: u32,
    pub patch_size: u32,
    pub resize: ResizeMode,
    pub flip: bool,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            load_size: 512,
            patch_size: 256,
            resize: ResizeMode::ShorterSide,
            flip: true,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size > self.load_size {
            return Err(Error::Config(format!(
                "patch size {} must be in 1..={}",
                self.patch_size, self.load_size
            )));
        }
        Ok(())
    }
}

/// Resize, random crop and random horizontal flip of a decoded image.
pub fn training_patch(img: &image::RgbImage, cfg: &PatchConfig, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Dataset("empty image".into()));
    }
    let (nw, nh) = match cfg.resize {
        ResizeMode::Squash => (cfg.load_size, cfg.load_size),
        ResizeMode::ShorterSide => {
            let s = cfg.load_size as f64 / w.min(h) as f64;
            (
                ((w as f64 * s).round() as u32).max(cfg.load_size),
                ((h as f64 * s).round() as u32).max(cfg.load_size),
            )
        }
    };
    let resized = if (nw, nh) == (w, h) {
        img.clone()
    } else {
        imageops::resize(img, nw, nh, FilterType::CatmullRom)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.patch_size;
    let left = rng.random_range(0..=nw - p);
    let top = rng.random_range(0..=nh - p);
    let mut patch = imageops::crop_imm(&resized, left, top, p, p).to_image();
    if cfg.flip && rng.random_bool(0.5) {
        imageops::flip_horizontal_in_place(&mut patch);
    }
    Ok(from_rgb(&patch))
}

/// Shorter side to `size`, then the central `size x size` square.
pub fn center_patch(img: &image::RgbImage, size: u32) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 || size == 0 {
        return Err(Error::Dataset("empty image or patch".into()));
    }
    let s = size as f64 / w.min(h) as f64;
    let (nw, nh) = (
        ((w as f64 * s).round() as u32).max(size),
        ((h as f64 * s).round() as u32).max(size),
    );
    let resized = if (nw, nh) == (w, h) {
        img.clone()
    } else {
        imageops::resize(img, nw, nh, FilterType::CatmullRom)
    };
    let patch =
        imageops::crop_imm(&resized, (nw - size) / 2, (nh - size) / 2, size, size).to_image();
    Ok(from_rgb(&patch))
}

/// Reads `path` and cuts one seeded training patch, `(1, 3, P, P)`.
pub fn load_training_patch(path: &Path, cfg: &PatchConfig, seed: u64) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::ImageFile {
        path: path.to_path_buf(),
        source,
    })?;
    training_patch(&img.to_rgb8(), cfg, seed)
}

/// Unreadable files seen during a run, persisted so later runs skip them.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipList {
    pub paths: BTreeSet<String>,
}

impl SkipList {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(SkipList::default());
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn contains(&self, p: &Path) -> bool {
        self.paths.contains(&p.to_string_lossy().into_owned())
    }

    /// Returns true if the path was new.
    pub fn record(&mut self, p: &Path, err: &Error) -> bool {
        log::warn!("skipping unreadable image {}: {err}", p.display());
        self.paths.insert(p.to_string_lossy().into_owned())
    }
}

/// One minibatch of Algorithm-style pairs, as manifest indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainBatch {
    pub content: Vec<usize>,
    /// `(artist, painting)` indices.
    pub style_a: Vec<(usize, usize)>,
    pub style_b: Vec<(usize, usize)>,
    pub prompts_a: Vec<String>,
    pub prompts_b: Vec<String>,
    pub artist_ids: Vec<usize>,
    /// Seeds for the per-image patch crops, in the order content, style_a, style_b.
    pub patch_seeds: Vec<[u64; 3]>,
    /// Set when `n` exceeded the content count.
    pub with_replacement: bool,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.content.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content.is_empty()
    }
}

/// Samples `n` slots. Artists are dealt from shuffled rounds so a batch
/// repeats an artist only once all artists have appeared.
pub fn sample_minibatch(
    manifest: &Manifest,
    templates: &PromptTemplates,
    n: usize,
    seed: u64,
) -> Result<TrainBatch> {
    if n < 2 {
        return Err(Error::Config(format!("batch size {n} must be >= 2")));
    }
    manifest.validate()?;
    if manifest.artists.is_empty() {
        return Err(Error::Dataset("manifest has no artists".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nc = manifest.content.len();
    let with_replacement = n > nc;
    let content: Vec<usize> = if with_replacement {
        log::warn!("batch size {n} exceeds {nc} content images; sampling with replacement");
        (0..n).map(|_| rng.random_range(0..nc)).collect()
    } else {
        index::sample(&mut rng, nc, n).into_vec()
    };
    let c = manifest.artists.len();
    let mut artist_ids = Vec::with_capacity(n);
    while artist_ids.len() < n {
        let mut round: Vec<usize> = (0..c).collect();
        round.shuffle(&mut rng);
        artist_ids.extend(round.into_iter().take(n - artist_ids.len()));
    }
    let mut batch = TrainBatch {
        content,
        style_a: Vec::with_capacity(n),
        style_b: Vec::with_capacity(n),
        prompts_a: Vec::with_capacity(n),
        prompts_b: Vec::with_capacity(n),
        artist_ids,
        patch_seeds: Vec::with_capacity(n),
        with_replacement,
    };
    for &a in &batch.artist_ids {
        let artist = &manifest.artists[a];
        let pair = index::sample(&mut rng, artist.paintings.len(), 2);
        batch.style_a.push((a, pair.index(0)));
        batch.style_b.push((a, pair.index(1)));
        batch
            .prompts_a
            .push(templates.augment(&artist.name, rng.random())?);
        batch
            .prompts_b
            .push(templates.augment(&artist.name, rng.random())?);
        batch
            .patch_seeds
            .push([rng.random(), rng.random(), rng.random()]);
    }
    Ok(batch)
}
