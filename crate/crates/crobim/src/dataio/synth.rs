//! Synthetic referring-expression triplets: colored geometric shapes on
//! textured noise, with template expressions over eight attribute slots
//! (category, color, shape, size, absolute position, relative position,
//! relative size, count context).

use crate::config::ModelConfig;
use crate::dataio::manifest::{Manifest, ManifestRecord, Split};
use crate::dataio::vocab;
use crate::encoders::{Triplet, TripletMeta};
use crate::error::{CrobimError, Result};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const COLORS: &[(&str, [f64; 3])] = &[
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.75, 0.15]),
    ("blue", [0.10, 0.20, 0.85]),
    ("yellow", [0.90, 0.85, 0.10]),
    ("purple", [0.60, 0.15, 0.70]),
    ("orange", [0.95, 0.55, 0.10]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Category {
    Circle,
    Rectangle,
    Triangle,
}

impl Category {
    fn word(self) -> &'static str {
        match self {
            Category::Circle => "circle",
            Category::Rectangle => "rectangle",
            Category::Triangle => "triangle",
        }
    }

    fn adjective(self) -> &'static str {
        match self {
            Category::Circle => "round",
            Category::Rectangle => "boxy",
            Category::Triangle => "pointed",
        }
    }
}

#[derive(Debug, Clone)]
struct Shape {
    category: Category,
    color: usize,
    cx: f64,
    cy: f64,
    extent: f64,
    large: bool,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.category {
            Category::Circle => dx * dx + dy * dy <= self.extent * self.extent,
            Category::Rectangle => dx.abs() <= self.extent && dy.abs() <= 0.7 * self.extent,
            Category::Triangle => {
                // upward isoceles: width grows linearly from apex to base
                let t = (y - (self.cy - self.extent)) / (2.0 * self.extent);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * self.extent
            }
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, h: usize) -> Shape {
    let category = match rng.gen_range(0..3) {
        0 => Category::Circle,
        1 => Category::Rectangle,
        _ => Category::Triangle,
    };
    let large = rng.gen_bool(0.5);
    let hf = h as f64;
    let extent = if large {
        rng.gen_range(hf / 6.0..hf / 4.0)
    } else {
        // floor keeps the smallest referents a little over one cell of the
        // coarsest mask grid, so boundaries stay representable
        rng.gen_range(hf / 10.0..hf / 7.0)
    };
    let margin = extent + 1.0;
    Shape {
        category,
        color: rng.gen_range(0..COLORS.len()),
        cx: rng.gen_range(margin..hf - margin),
        cy: rng.gen_range(margin..hf - margin),
        extent,
        large,
    }
}

/// Absolute-position words for a center, thirds of the image.
fn position_words(cx: f64, cy: f64, h: f64) -> (&'static str, &'static str) {
    let v = if cy < h / 3.0 {
        "top"
    } else if cy > 2.0 * h / 3.0 {
        "bottom"
    } else {
        "middle"
    };
    let hw = if cx < h / 3.0 {
        "left"
    } else if cx > 2.0 * h / 3.0 {
        "right"
    } else {
        "center"
    };
    (v, hw)
}

fn relative_word(referent: &Shape, other: &Shape) -> &'static str {
    let dy = referent.cy - other.cy;
    let dx = referent.cx - other.cx;
    if dy.abs() >= dx.abs() {
        if dy < 0.0 {
            "above"
        } else {
            "below"
        }
    } else {
        "beside"
    }
}

fn count_word(n: usize) -> &'static str {
    match n {
        1 => "one",
        2 => "two",
        _ => "three",
    }
}

/// Assemble the expression, always leading with color and category, then
/// greedily adding optional attribute clauses while they fit the budget.
fn build_expression(rng: &mut ChaCha8Rng, shapes: &[Shape], h: f64, word_budget: usize) -> String {
    let referent = &shapes[0];
    let mut core = vec!["the"];
    // relative size beats the plain size word when it applies
    let is_largest = shapes.len() > 1 && shapes[1..].iter().all(|s| s.extent < referent.extent);
    let is_smallest = shapes.len() > 1 && shapes[1..].iter().all(|s| s.extent > referent.extent);
    if is_largest && rng.gen_bool(0.5) {
        core.push("largest");
    } else if is_smallest && rng.gen_bool(0.5) {
        core.push("smallest");
    } else if rng.gen_bool(0.5) {
        core.push(if referent.large { "large" } else { "small" });
    }
    core.push(COLORS[referent.color].0);
    if rng.gen_bool(0.4) {
        core.push(referent.category.adjective());
    }
    core.push(referent.category.word());

    let mut words: Vec<String> = core.into_iter().map(str::to_string).collect();
    let (v, hw) = position_words(referent.cx, referent.cy, h);
    let mut clauses: Vec<Vec<String>> = Vec::new();
    clauses.push(vec!["in".into(), "the".into(), v.into(), hw.into()]);
    if shapes.len() > 1 {
        let other = &shapes[1];
        clauses.push(vec![
            relative_word(referent, other).into(),
            "the".into(),
            COLORS[other.color].0.into(),
            other.category.word().into(),
        ]);
    }
    clauses.push(vec![
        "among".into(),
        count_word(shapes.len()).into(),
        "shapes".into(),
    ]);
    // random clause order, keep what fits
    let mut order: Vec<usize> = (0..clauses.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    for idx in order {
        if rng.gen_bool(0.6) && words.len() + clauses[idx].len() <= word_budget {
            words.extend(clauses[idx].iter().cloned());
        }
    }
    words.join(" ")
}

/// Generate `n` deterministic triplets. Every sample places one referent
/// and up to two distractors that differ from it in color or category.
pub fn synth_generate(n: usize, config: &ModelConfig, seed: u64) -> Result<Vec<Triplet>> {
    if n == 0 {
        return Err(CrobimError::InvalidArgument(
            "synth_generate needs n >= 1".into(),
        ));
    }
    let h = config.image_size;
    let mut out = Vec::with_capacity(n);
    for idx in 0..n {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let n_shapes = rng.gen_range(1..=3usize);
        let referent = random_shape(&mut rng, h);
        let mut shapes = vec![referent.clone()];
        while shapes.len() < n_shapes {
            let cand = random_shape(&mut rng, h);
            if cand.color != referent.color || cand.category != referent.category {
                shapes.push(cand);
            }
        }
        // textured noise background with a mild tint
        let tint = [
            rng.gen_range(0.30..0.45),
            rng.gen_range(0.30..0.45),
            rng.gen_range(0.30..0.45),
        ];
        let mut image = Array3::zeros((h, h, 3));
        for y in 0..h {
            for x in 0..h {
                for c in 0..3 {
                    image[[y, x, c]] = (tint[c] + rng.gen_range(-0.08f64..0.08)).clamp(0.0, 1.0);
                }
            }
        }
        // distractors first so the referent stays on top
        for shape in shapes.iter().skip(1).chain(std::iter::once(&shapes[0])) {
            let rgb = COLORS[shape.color].1;
            for y in 0..h {
                for x in 0..h {
                    if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        for c in 0..3 {
                            image[[y, x, c]] =
                                (rgb[c] + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        let mut mask = Array2::<u8>::zeros((h, h));
        for y in 0..h {
            for x in 0..h {
                if shapes[0].contains(x as f64 + 0.5, y as f64 + 0.5) {
                    mask[[y, x]] = 1;
                }
            }
        }
        let expression_text = build_expression(&mut rng, &shapes, h as f64, config.max_tokens - 1);
        out.push(Triplet {
            image,
            expression: vocab::tokenize(&expression_text),
            mask,
            meta: TripletMeta {
                category: shapes[0].category.word().to_string(),
                source_id: format!("synth-{seed}-{idx}"),
                expression_text,
            },
        });
    }
    Ok(out)
}

/// Write triplets to disk as PNGs plus a manifest, assigning one split.
pub fn materialize(dir: &Path, triplets: &[Triplet], split: Split) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut records = Vec::with_capacity(triplets.len());
    for t in triplets {
        let image = Path::new("images").join(format!("{}.png", t.meta.source_id));
        let mask = Path::new("masks").join(format!("{}.png", t.meta.source_id));
        crate::dataio::manifest::save_image_rgb(&dir.join(&image), &t.image)?;
        crate::dataio::manifest::save_mask(&dir.join(&mask), &t.mask)?;
        records.push(ManifestRecord {
            id: t.meta.source_id.clone(),
            image: dir.join(&image),
            mask: dir.join(&mask),
            split,
            category: t.meta.category.clone(),
            expression: t.meta.expression_text.clone(),
        });
    }
    let manifest = Manifest {
        records,
        base_dir: dir.to_path_buf(),
    };
    Ok(manifest)
}
