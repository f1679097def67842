//! Procedural desk-scale fixture corpus.
//!
//! Real paintings are not redistributable here, so the fixtures are drawn
//! from seeded generators: each "artist" has a fixed palette and stroke
//! vocabulary, and contents are simple outdoor scenes.

use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// The two artists of the desk corpus, as directory names.
pub const DESK_ARTISTS: [&str; 2] = ["Van_Gogh", "Claude_Monet"];

/// Artist names of the 13-artist affinity set.
pub const AFFINITY_ARTISTS: [&str; 13] = [
    "Paul Cezanne",
    "El Greco",
    "Paul Gauguin",
    "Wassily Kandinsky",
    "Ernst Ludwig Kirchner",
    "Claude Monet",
    "Berthe Morisot",
    "Edvard Munch",
    "Samuel Peploe",
    "Pablo Picasso",
    "Jackson Pollock",
    "Nicholas Roerich",
    "Vincent van Gogh",
];

pub const DESK_TRAIN_CONTENTS: usize = 8;
pub const DESK_HELDOUT_CONTENTS: usize = 4;
pub const DESK_PAINTINGS_PER_ARTIST: usize = 5;

/// Stroke vocabulary of a generated painting style.
#[derive(Clone, Copy, Debug)]
pub struct StyleRecipe {
    pub palette: [[f64; 3]; 4],
    /// Stroke length in pixels.
    pub stroke: f64,
    /// Angular frequency of the flow field; 0 gives straight strokes.
    pub swirl: f64,
    pub width: f64,
    pub strokes_per_pixel: f64,
}

/// Recipe `i` of an open-ended family; 0 and 1 are the desk artists.
pub fn recipe(i: usize) -> StyleRecipe {
    match i {
        0 => StyleRecipe {
            palette: [
                [0.10, 0.20, 0.55],
                [0.95, 0.80, 0.15],
                [0.20, 0.45, 0.85],
                [0.98, 0.95, 0.70],
            ],
            stroke: 7.0,
            swirl: 0.35,
            width: 1.2,
            strokes_per_pixel: 0.35,
        },
        1 => StyleRecipe {
            palette: [
                [0.62, 0.78, 0.60],
                [0.92, 0.72, 0.78],
                [0.70, 0.68, 0.90],
                [0.95, 0.93, 0.80],
            ],
            stroke: 2.0,
            swirl: 0.0,
            width: 1.8,
            strokes_per_pixel: 0.5,
        },
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
            let mut palette = [[0.0; 3]; 4];
            for c in palette.iter_mut() {
                for v in c.iter_mut() {
                    *v = rng.random_range(0.05..0.95);
                }
            }
            StyleRecipe {
                palette,
                stroke: rng.random_range(1.5..9.0),
                swirl: if rng.random_bool(0.5) {
                    rng.random_range(0.1..0.5)
                } else {
                    0.0
                },
                width: rng.random_range(0.8..2.2),
                strokes_per_pixel: rng.random_range(0.2..0.6),
            }
        }
    }
}

/// Blends a disc centred at `(x, y)` with radius `r` into a `w`x`h` image.
fn put(
    img: &mut [[f64; 3]],
    (w, h): (usize, usize),
    (x, y, r): (f64, f64, f64),
    c: [f64; 3],
    alpha: f64,
) {
    let (x0, x1) = (
        (x - r).floor().max(0.0) as usize,
        ((x + r).ceil() as usize).min(w.saturating_sub(1)),
    );
    let (y0, y1) = (
        (y - r).floor().max(0.0) as usize,
        ((y + r).ceil() as usize).min(h.saturating_sub(1)),
    );
    for py in y0..=y1 {
        for px in x0..=x1 {
            let d2 = (px as f64 - x).powi(2) + (py as f64 - y).powi(2);
            if d2 <= r * r {
                let p = &mut img[py * w + px];
                for k in 0..3 {
                    p[k] = p[k] * (1.0 - alpha) + c[k] * alpha;
                }
            }
        }
    }
}

fn to_image(buf: &[[f64; 3]], w: usize, h: usize) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = buf[y as usize * w + x as usize];
        Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// A painting in the style of `recipe`, varied by `seed`.
pub fn painting(recipe: &StyleRecipe, w: usize, h: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = recipe.palette[rng.random_range(0..4)];
    let mut buf = vec![base; w * h];
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let n = (recipe.strokes_per_pixel * (w * h) as f64) as usize;
    for _ in 0..n {
        let mut x = rng.random_range(0.0..w as f64);
        let mut y = rng.random_range(0.0..h as f64);
        let c = recipe.palette[rng.random_range(0..4)];
        let jitter: f64 = rng.random_range(-0.08..0.08);
        let c = c.map(|v| v + jitter);
        let steps = recipe.stroke.ceil() as usize;
        for _ in 0..steps {
            put(&mut buf, (w, h), (x, y, recipe.width), c, 0.8);
            let angle = if recipe.swirl > 0.0 {
                (x * recipe.swirl + phase).sin() * PI + (y * recipe.swirl).cos() * PI
            } else {
                phase
            };
            x += angle.cos();
            y += angle.sin();
        }
    }
    to_image(&buf, w, h)
}

/// A simple scene: sky gradient, horizon, sun and a few blocks.
pub fn content_scene(w: usize, h: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(0.4..0.7) * h as f64;
    let sky_top = [
        rng.random_range(0.2..0.5),
        rng.random_range(0.4..0.7),
        rng.random_range(0.7..1.0),
    ];
    let ground = [
        rng.random_range(0.2..0.5),
        rng.random_range(0.3..0.6),
        rng.random_range(0.1..0.3),
    ];
    let mut buf = vec![[0.0; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let t = y as f64 / h as f64;
            buf[y * w + x] = if (y as f64) < horizon {
                sky_top.map(|v| v + 0.3 * t)
            } else {
                ground.map(|v| v * (1.2 - 0.4 * t))
            };
        }
    }
    let sun = [0.98, 0.9, rng.random_range(0.3..0.7)];
    let r = rng.random_range(0.08..0.15) * w as f64;
    let centre = (
        rng.random_range(0.15..0.85) * w as f64,
        rng.random_range(0.1..0.35) * h as f64,
        r,
    );
    put(&mut buf, (w, h), centre, sun, 1.0);
    for _ in 0..rng.random_range(2..5) {
        let bw = rng.random_range(0.1..0.25) * w as f64;
        let bh = rng.random_range(0.1..0.3) * h as f64;
        let bx = rng.random_range(0.0..w as f64 - bw);
        let c = [
            rng.random_range(0.3..0.9),
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.7),
        ];
        for y in ((horizon - bh) as usize)..(horizon as usize).min(h) {
            for x in (bx as usize)..((bx + bw) as usize).min(w) {
                buf[y * w + x] = c;
            }
        }
    }
    for p in buf.iter_mut() {
        for v in p.iter_mut() {
            *v += rng.random_range(-0.02..0.02);
        }
    }
    to_image(&buf, w, h)
}

/// Writes the desk corpus:
/// `content/`, `heldout/`, `style/<artist>/`, and `affinity/<artist>.png`.
pub fn write_desk_fixtures(root: &Path) -> Result<()> {
    let (w, h) = (48, 40);
    for dir in ["content", "heldout", "style", "affinity"] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    for i in 0..DESK_TRAIN_CONTENTS {
        content_scene(w, h, i as u64)
            .save(root.join("content").join(format!("scene_{i:02}.png")))?;
    }
    for i in 0..DESK_HELDOUT_CONTENTS {
        content_scene(w, h, 100 + i as u64)
            .save(root.join("heldout").join(format!("scene_{i:02}.png")))?;
    }
    for (a, artist) in DESK_ARTISTS.iter().enumerate() {
        let dir = root.join("style").join(artist);
        std::fs::create_dir_all(&dir)?;
        for p in 0..DESK_PAINTINGS_PER_ARTIST {
            painting(&recipe(a), w, w, (a * 100 + p) as u64)
                .save(dir.join(format!("painting_{p:02}.png")))?;
        }
    }
    for (a, artist) in AFFINITY_ARTISTS.iter().enumerate() {
        let r = match *artist {
            "Vincent van Gogh" => recipe(0),
            "Claude Monet" => recipe(1),
            _ => recipe(2 + a),
        };
        painting(&r, 64, 64, 500 + a as u64).save(
            root.join("affinity")
                .join(format!("{}.png", artist.replace(' ', "_"))),
        )?;
    }
    Ok(())
}
