//! Dataset statistics: expression word-length distribution, category and
//! object-size distributions, vocabulary size, top word frequencies.

use crate::dataio::manifest::{load_mask, Manifest};
use crate::dataio::vocab::normalize_words;
use crate::error::Result;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

pub const TOP_WORDS: usize = 50;

/// Object-size buckets over mask pixel counts.
const SIZE_BUCKETS: &[(u64, u64, &str)] = &[
    (0, 0, "0"),
    (1, 64, "1-64"),
    (65, 256, "65-256"),
    (257, 1024, "257-1024"),
    (1025, 4096, "1025-4096"),
    (4097, u64::MAX, ">4096"),
];

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DatasetStats {
    pub count: u64,
    /// words-per-expression -> number of expressions
    pub word_length_hist: BTreeMap<usize, u64>,
    pub avg_expression_length: f64,
    pub category_counts: BTreeMap<String, u64>,
    /// bucket label -> number of masks
    pub object_size_hist: BTreeMap<String, u64>,
    pub vocabulary_size: u64,
    /// most frequent words, (word, count), count desc then word asc
    pub top_words: Vec<(String, u64)>,
}

pub fn size_bucket(pixels: u64) -> &'static str {
    SIZE_BUCKETS
        .iter()
        .find(|(lo, hi, _)| pixels >= *lo && pixels <= *hi)
        .map(|(_, _, label)| *label)
        .expect("bucket table covers all counts")
}

pub fn dataset_stats(manifest: &Manifest) -> Result<DatasetStats> {
    let mut word_length_hist: BTreeMap<usize, u64> = BTreeMap::new();
    let mut category_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut object_size_hist: BTreeMap<String, u64> = BTreeMap::new();
    let mut word_freq: HashMap<String, u64> = HashMap::new();
    let mut total_words = 0u64;
    for record in &manifest.records {
        let words = normalize_words(&record.expression);
        *word_length_hist.entry(words.len()).or_insert(0) += 1;
        total_words += words.len() as u64;
        for w in words {
            *word_freq.entry(w).or_insert(0) += 1;
        }
        *category_counts.entry(record.category.clone()).or_insert(0) += 1;
        let (mask, _) = load_mask(&record.mask)?;
        let pixels: u64 = mask.iter().map(|&v| v as u64).sum();
        *object_size_hist
            .entry(size_bucket(pixels).to_string())
            .or_insert(0) += 1;
    }
    let count = manifest.records.len() as u64;
    let mut top_words: Vec<(String, u64)> =
        word_freq.iter().map(|(w, c)| (w.clone(), *c)).collect();
    top_words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    top_words.truncate(TOP_WORDS);
    Ok(DatasetStats {
        count,
        word_length_hist,
        avg_expression_length: if count == 0 {
            0.0
        } else {
            total_words as f64 / count as f64
        },
        category_counts,
        object_size_hist,
        vocabulary_size: word_freq.len() as u64,
        top_words,
    })
}

impl DatasetStats {
    /// Totals of every histogram must equal the record count.
    pub fn check_conservation(&self) -> bool {
        let wl: u64 = self.word_length_hist.values().sum();
        let cat: u64 = self.category_counts.values().sum();
        let sz: u64 = self.object_size_hist.values().sum();
        wl == self.count && cat == self.count && sz == self.count
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    /// Flat key-value text rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("count: {}\n", self.count));
        out.push_str(&format!(
            "avg_expression_length: {:.4}\n",
            self.avg_expression_length
        ));
        out.push_str(&format!("vocabulary_size: {}\n", self.vocabulary_size));
        for (len, n) in &self.word_length_hist {
            out.push_str(&format!("word_length[{len}]: {n}\n"));
        }
        for (cat, n) in &self.category_counts {
            out.push_str(&format!("category[{cat}]: {n}\n"));
        }
        for (bucket, n) in &self.object_size_hist {
            out.push_str(&format!("object_size[{bucket}]: {n}\n"));
        }
        for (word, n) in &self.top_words {
            out.push_str(&format!("word[{word}]: {n}\n"));
        }
        out
    }
}

/// Minimal bar-chart PNG for a histogram, light background, dark bars.
pub fn render_histogram(bars: &[(String, u64)], title_height_px: usize, path: &Path) -> Result<()> {
    let n = bars.len().max(1);
    let bar_w = 24usize;
    let gap = 8usize;
    let plot_h = 160usize;
    let w = (n * (bar_w + gap) + gap) as u32;
    let h = (plot_h + title_height_px + 20) as u32;
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([245, 245, 245]));
    let max = bars.iter().map(|(_, v)| *v).max().unwrap_or(1).max(1);
    for (i, (_, value)) in bars.iter().enumerate() {
        let bh = ((plot_h as u64 * value) / max) as usize;
        let x0 = gap + i * (bar_w + gap);
        for x in x0..x0 + bar_w {
            for y in (title_height_px + plot_h - bh)..(title_height_px + plot_h) {
                img.put_pixel(x as u32, y as u32, image::Rgb([60, 90, 160]));
            }
        }
        // baseline tick
        for x in x0..x0 + bar_w {
            img.put_pixel(
                x as u32,
                (title_height_px + plot_h) as u32,
                image::Rgb([30, 30, 30]),
            );
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|e| crate::error::CrobimError::Data {
        record: path.display().to_string(),
        detail: format!("cannot write histogram: {e}"),
    })
}
