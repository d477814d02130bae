//! Seeded pseudo-handwriting generator.
//!
//! Glyphs are cubic Bézier skeletons from a fixed alphabet. Each writer draws
//! continuous style parameters (slant, x-height, aspect, stroke width,
//! curvature, spacing) plus a private allograph offset per control point, and
//! every rendered instance adds its own jitter. Pages are rendered to gray
//! canvases (dark ink on a noisy light background) and cut into line and word
//! crops with nested entity ids.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::entity::EntityId;
use super::image::GrayImage;
use super::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};

/// Words are drawn from this list with Zipf-like weights (earlier = more
/// frequent). The trailing punctuation tokens exercise word filtering.
pub const VOCABULARY: &[&str] = &[
    "the", "of", "and", "to", "a", "in", "that", "was", "is", "he", "for", "it", "with", "his", "on",
    "be", "as", "had", "Dann", "du", "my", "but", "will", "like", "which", "other", "or", "we", "she",
    "I'm", ",", ".",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Writers in the test split.
    pub writers: usize,
    /// Additional writers tagged `train`, disjoint from the test writers.
    pub train_writers: usize,
    pub pages_per_writer: usize,
    pub lines_per_page: usize,
    pub words_per_line: usize,
    /// Scales the spread of per-writer style parameters.
    pub style_spread: f64,
    /// Scales per-instance shape jitter.
    pub noise: f64,
    /// Standard deviation of additive gray-level noise.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            writers: 20,
            train_writers: 10,
            pages_per_writer: 5,
            lines_per_page: 8,
            words_per_line: 6,
            style_spread: 1.0,
            noise: 1.0,
            pixel_noise: 6.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("writers", self.writers),
            ("pages-per-writer", self.pages_per_writer),
            ("lines-per-page", self.lines_per_page),
            ("words-per-line", self.words_per_line),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("style-spread", self.style_spread),
            ("noise", self.noise),
            ("pixel-noise", self.pixel_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Generated manifest plus every entity image keyed by id.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest: DatasetManifest,
    pub images: BTreeMap<EntityId, GrayImage>,
    pub styles: BTreeMap<String, WriterStyle>,
}

impl SynthCorpus {
    /// SHA-256 over the manifest text and all image bytes in id order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.manifest.to_string().as_bytes());
        for (id, img) in &self.images {
            h.update(id.to_string().as_bytes());
            h.update((img.width() as u64).to_le_bytes());
            h.update((img.height() as u64).to_le_bytes());
            h.update(img.pixels());
        }
        hex::encode(h.finalize())
    }

    /// Writes `manifest.tsv` and `images/<id>.png` below `dir`.
    pub fn write_to(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        for e in self.manifest.entries() {
            self.images[&e.id].save_png(&dir.join(&e.path))?;
        }
        self.manifest.save(&dir.join("manifest.tsv"))
    }
}

/// Per-writer rendering style.
#[derive(Debug, Clone, PartialEq)]
pub struct WriterStyle {
    pub slant: f64,
    pub x_height: f64,
    pub aspect: f64,
    pub stroke_radius: f64,
    pub curvature: f64,
    pub letter_gap: f64,
    pub word_gap: f64,
    /// Allograph offsets indexed by glyph, stroke, control point.
    allographs: Vec<Vec<[(f64, f64); 4]>>,
}

type Point = (f64, f64);

#[derive(Debug, Clone)]
struct Glyph {
    width: f64,
    strokes: Vec<[Point; 4]>,
}

const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz',.";
const ALPHABET_SEED: u64 = 0x5eed_91a9_4a11_0c0d;

fn glyph_index(c: char) -> (usize, f64) {
    let lower = c.to_ascii_lowercase();
    let scale = if c.is_ascii_uppercase() { 1.35 } else { 1.0 };
    let idx = ALPHABET.find(lower).unwrap_or(0);
    (idx, scale)
}

/// Fixed pseudo-glyph skeletons, independent of the corpus seed.
fn alphabet() -> Vec<Glyph> {
    ALPHABET
        .chars()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = ChaCha8Rng::seed_from_u64(ALPHABET_SEED ^ (i as u64).wrapping_mul(0x9e37_79b9));
            match c {
                '.' => Glyph {
                    width: 0.25,
                    strokes: vec![[(0.1, 0.0), (0.12, 0.08), (0.14, 0.08), (0.15, 0.0)]],
                },
                ',' => Glyph {
                    width: 0.25,
                    strokes: vec![[(0.15, 0.05), (0.15, -0.1), (0.1, -0.2), (0.05, -0.3)]],
                },
                '\'' => Glyph {
                    width: 0.25,
                    strokes: vec![[(0.15, 1.3), (0.15, 1.15), (0.13, 1.05), (0.1, 0.95)]],
                },
                _ => {
                    let ascender = "bdfhklt".contains(c);
                    let descender = "gjpqy".contains(c);
                    let width = rng.random_range(0.55..0.95);
                    let n_strokes = rng.random_range(1..=2);
                    let mut strokes = Vec::new();
                    for s in 0..n_strokes {
                        let mut pts = [(0.0, 0.0); 4];
                        for p in pts.iter_mut() {
                            *p = (rng.random_range(0.0..width), rng.random_range(0.0..1.0));
                        }
                        if s == 0 && ascender {
                            pts[0].1 = rng.random_range(1.6..1.9);
                        }
                        if s == 0 && descender {
                            pts[3].1 = rng.random_range(-0.9..-0.6);
                        }
                        strokes.push(pts);
                    }
                    Glyph { width, strokes }
                }
            }
        })
        .collect()
}

fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sd).expect("finite sd").sample(rng)
}

fn draw_style(rng: &mut ChaCha8Rng, glyphs: &[Glyph], spread: f64) -> WriterStyle {
    let u = |rng: &mut ChaCha8Rng, lo: f64, hi: f64, center: f64| {
        center + spread * (rng.random_range(lo..hi) - center)
    };
    let slant = (gauss(rng, 0.3 * spread)).clamp(-0.7, 0.7);
    let x_height = u(rng, 10.0, 18.0, 14.0);
    let aspect = u(rng, 0.7, 1.4, 1.0);
    let stroke_radius = u(rng, 0.7, 2.1, 1.2);
    let curvature = gauss(rng, 0.3 * spread).clamp(-0.8, 0.8);
    let letter_gap = u(rng, 0.05, 0.5, 0.2);
    let word_gap = u(rng, 0.6, 1.4, 0.9);
    let allographs = glyphs
        .iter()
        .map(|g| {
            g.strokes
                .iter()
                .map(|_| {
                    let mut o = [(0.0, 0.0); 4];
                    for p in o.iter_mut() {
                        *p = (gauss(rng, 0.12 * spread), gauss(rng, 0.12 * spread));
                    }
                    o
                })
                .collect()
        })
        .collect();
    WriterStyle {
        slant,
        x_height,
        aspect,
        stroke_radius,
        curvature,
        letter_gap,
        word_gap,
        allographs,
    }
}

fn pick_word(rng: &mut ChaCha8Rng) -> &'static str {
    let weights: Vec<f64> = (0..VOCABULARY.len())
        .map(|r| {
            let w = 1.0 / ((r + 1) as f64).powf(0.8);
            // punctuation tokens are rare
            if VOCABULARY[r].chars().all(|c| !c.is_alphanumeric()) {
                w * 0.3
            } else {
                w
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (w, word) in weights.iter().zip(VOCABULARY) {
        if x < *w {
            return word;
        }
        x -= w;
    }
    VOCABULARY[VOCABULARY.len() - 1]
}

#[derive(Debug, Clone)]
struct PlacedStroke {
    ctrl: [Point; 4],
    radius: f64,
}

#[derive(Debug, Clone, Copy)]
struct BBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BBox {
    fn empty() -> Self {
        BBox {
            x0: f64::INFINITY,
            y0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y1: f64::NEG_INFINITY,
        }
    }

    fn include(&mut self, p: Point, r: f64) {
        self.x0 = self.x0.min(p.0 - r);
        self.y0 = self.y0.min(p.1 - r);
        self.x1 = self.x1.max(p.0 + r);
        self.y1 = self.y1.max(p.1 + r);
    }

    fn union(&mut self, o: &BBox) {
        self.x0 = self.x0.min(o.x0);
        self.y0 = self.y0.min(o.y0);
        self.x1 = self.x1.max(o.x1);
        self.y1 = self.y1.max(o.y1);
    }
}

fn bezier(c: &[Point; 4], t: f64) -> Point {
    let s = 1.0 - t;
    let a = s * s * s;
    let b = 3.0 * s * s * t;
    let d = 3.0 * s * t * t;
    let e = t * t * t;
    (
        a * c[0].0 + b * c[1].0 + d * c[2].0 + e * c[3].0,
        a * c[0].1 + b * c[1].1 + d * c[2].1 + e * c[3].1,
    )
}

fn polyline_len(c: &[Point; 4]) -> f64 {
    c.windows(2)
        .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
        .sum()
}

struct WordLayout {
    text: &'static str,
    strokes: Vec<PlacedStroke>,
    bbox: BBox,
}

struct LineLayout {
    baseline: f64,
    words: Vec<WordLayout>,
}

/// Places one word with its left edge at `x`; returns the layout and the
/// x position after the last glyph.
fn layout_word(
    text: &'static str,
    x: f64,
    baseline: f64,
    style: &WriterStyle,
    glyphs: &[Glyph],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> (WordLayout, f64) {
    let xh = style.x_height * (1.0 + gauss(rng, 0.03 * noise));
    let mut cursor = x;
    let mut strokes = Vec::new();
    let mut bbox = BBox::empty();
    for ch in text.chars() {
        let (gi, scale) = glyph_index(ch);
        let g = &glyphs[gi];
        let gx = xh * scale;
        for (si, stroke) in g.strokes.iter().enumerate() {
            let mut ctrl = [(0.0, 0.0); 4];
            for (pi, p) in stroke.iter().enumerate() {
                let off = style.allographs[gi][si][pi];
                let u = p.0 + off.0 + gauss(rng, 0.04 * noise);
                let v = p.1 + off.1 + gauss(rng, 0.04 * noise);
                ctrl[pi] = (u, v);
            }
            // bend inner control points away from the chord
            let (dx, dy) = (ctrl[3].0 - ctrl[0].0, ctrl[3].1 - ctrl[0].1);
            for p in &mut ctrl[1..3] {
                p.0 += -dy * style.curvature;
                p.1 += dx * style.curvature;
            }
            let placed: [Point; 4] = ctrl.map(|(u, v)| {
                let px = cursor + (u * style.aspect + style.slant * v) * gx;
                let py = baseline - v * gx;
                (px, py)
            });
            let radius = (style.stroke_radius * (1.0 + gauss(rng, 0.08 * noise))).max(0.5);
            for t in 0..=16 {
                bbox.include(bezier(&placed, t as f64 / 16.0), radius + 1.0);
            }
            strokes.push(PlacedStroke { ctrl: placed, radius });
        }
        cursor += g.width * style.aspect * gx + style.letter_gap * xh + gauss(rng, 0.05 * noise) * xh;
    }
    (WordLayout { text, strokes, bbox }, cursor)
}

fn render(strokes: &[&PlacedStroke], width: usize, height: usize, pixel_noise: f64, rng: &mut ChaCha8Rng) -> GrayImage {
    let mut cov = vec![0.0f64; width * height];
    for s in strokes {
        let steps = ((polyline_len(&s.ctrl) / 0.25).ceil() as usize).max(2);
        let r = s.radius;
        for i in 0..=steps {
            let (cx, cy) = bezier(&s.ctrl, i as f64 / steps as f64);
            let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
            let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
            let x1 = ((cx + r + 1.0).ceil() as usize).min(width.saturating_sub(1));
            let y1 = ((cy + r + 1.0).ceil() as usize).min(height.saturating_sub(1));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                    let c = (r + 0.5 - d).clamp(0.0, 1.0);
                    let slot = &mut cov[y * width + x];
                    if c > *slot {
                        *slot = c;
                    }
                }
            }
        }
    }
    let normal = Normal::new(0.0, pixel_noise.max(1e-12)).expect("finite sd");
    let pixels = cov
        .iter()
        .map(|&c| {
            let g = 232.0 - c * (232.0 - 32.0) + if pixel_noise > 0.0 { normal.sample(rng) } else { 0.0 };
            g.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage::new(width, height, pixels).expect("consistent size")
}

fn crop_box(img: &GrayImage, b: &BBox, pad: f64) -> Result<(GrayImage, (usize, usize, usize, usize))> {
    let x0 = (b.x0 - pad).floor().max(0.0) as usize;
    let y0 = (b.y0 - pad).floor().max(0.0) as usize;
    let x1 = ((b.x1 + pad).ceil() as usize).min(img.width());
    let y1 = ((b.y1 + pad).ceil() as usize).min(img.height());
    let rect = (x0, y0, x1.max(x0 + 1) - x0, y1.max(y0 + 1) - y0);
    Ok((img.crop(rect.0, rect.1, rect.2, rect.3)?, rect))
}

struct PageOutput {
    entries: Vec<ManifestEntry>,
    images: Vec<(EntityId, GrayImage)>,
}

fn render_page(
    cfg: &SynthConfig,
    glyphs: &[Glyph],
    style: &WriterStyle,
    page_id: &EntityId,
    split: Split,
) -> Result<PageOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &format!("page:{page_id}")));
    let margin = 12.0;
    let line_spacing = 3.0 * style.x_height;
    let mut lines = Vec::with_capacity(cfg.lines_per_page);
    for l in 0..cfg.lines_per_page {
        let baseline = margin + 2.0 * style.x_height + l as f64 * line_spacing + gauss(&mut rng, 0.05 * cfg.noise) * style.x_height;
        let mut x = margin + rng.random_range(0.0..1.0) * style.x_height;
        let mut words = Vec::with_capacity(cfg.words_per_line);
        for _ in 0..cfg.words_per_line {
            let text = pick_word(&mut rng);
            let (w, end) = layout_word(text, x, baseline, style, glyphs, cfg.noise, &mut rng);
            x = end + style.word_gap * style.x_height * (1.0 + gauss(&mut rng, 0.1 * cfg.noise)).max(0.3);
            words.push(w);
        }
        lines.push(LineLayout { baseline, words });
    }

    let mut page_box = BBox::empty();
    for w in lines.iter().flat_map(|l| &l.words) {
        page_box.union(&w.bbox);
    }
    // shift everything so the page box starts inside the margin
    let shift = (margin - page_box.x0.min(margin), margin - page_box.y0.min(margin));
    let width = (page_box.x1 + shift.0 + margin).ceil() as usize;
    let height = (page_box.y1 + shift.1 + margin).ceil() as usize;
    for line in &mut lines {
        line.baseline += shift.1;
        for w in &mut line.words {
            w.bbox.x0 += shift.0;
            w.bbox.x1 += shift.0;
            w.bbox.y0 += shift.1;
            w.bbox.y1 += shift.1;
            for s in &mut w.strokes {
                for p in &mut s.ctrl {
                    p.0 += shift.0;
                    p.1 += shift.1;
                }
            }
        }
    }

    let all: Vec<&PlacedStroke> = lines.iter().flat_map(|l| l.words.iter().flat_map(|w| &w.strokes)).collect();
    let page_img = render(&all, width, height, cfg.pixel_noise, &mut rng);

    let mut out = PageOutput {
        entries: Vec::new(),
        images: Vec::new(),
    };
    let entry = |id: &EntityId, transcription: Option<String>| ManifestEntry {
        id: id.clone(),
        path: format!("images/{id}.png"),
        crop: None,
        split,
        transcription,
    };
    out.entries.push(entry(page_id, None));
    out.images.push((page_id.clone(), page_img.clone()));

    for (li, line) in lines.iter().enumerate() {
        let line_id = page_id.with_line(li as u32);
        let mut lb = BBox::empty();
        for w in &line.words {
            lb.union(&w.bbox);
        }
        // restrict the line band vertically so neighbouring lines stay out
        lb.y0 = lb.y0.max(line.baseline - 2.2 * style.x_height);
        lb.y1 = lb.y1.min(line.baseline + 1.0 * style.x_height);
        let (line_img, _) = crop_box(&page_img, &lb, 2.0)?;
        let text = line.words.iter().map(|w| w.text).collect::<Vec<_>>().join(" ");
        out.entries.push(entry(&line_id, Some(text)));
        out.images.push((line_id.clone(), line_img));
        for (wi, w) in line.words.iter().enumerate() {
            let word_id = line_id.with_word(wi as u32);
            let mut wb = w.bbox;
            wb.y0 = wb.y0.max(lb.y0);
            wb.y1 = wb.y1.min(lb.y1);
            let (word_img, _) = crop_box(&page_img, &wb, 1.0)?;
            out.entries.push(entry(&word_id, Some(w.text.to_string())));
            out.images.push((word_id, word_img));
        }
    }
    Ok(out)
}

fn writer_label(i: usize, split: Split) -> String {
    match split {
        Split::Test => format!("{:04}", i + 1),
        Split::Train => format!("T{:03}", i + 1),
    }
}

/// Generates the corpus. Identical configs give identical output, independent
/// of thread count.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let glyphs = alphabet();
    let mut writers: Vec<(String, Split)> = (0..cfg.train_writers)
        .map(|i| (writer_label(i, Split::Train), Split::Train))
        .collect();
    writers.extend((0..cfg.writers).map(|i| (writer_label(i, Split::Test), Split::Test)));

    let styles: BTreeMap<String, WriterStyle> = writers
        .iter()
        .map(|(w, _)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &format!("writer:{w}")));
            (w.clone(), draw_style(&mut rng, &glyphs, cfg.style_spread))
        })
        .collect();

    let jobs: Vec<(EntityId, Split)> = writers
        .iter()
        .flat_map(|(w, split)| {
            (1..=cfg.pages_per_writer).map(move |p| (EntityId::page(w.clone(), p.to_string()).expect("valid labels"), *split))
        })
        .collect();

    let pages: Vec<PageOutput> = jobs
        .par_iter()
        .map(|(id, split)| render_page(cfg, &glyphs, &styles[id.writer()], id, *split))
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    let mut images = BTreeMap::new();
    for p in pages {
        entries.extend(p.entries);
        images.extend(p.images);
    }
    Ok(SynthCorpus {
        manifest: DatasetManifest::new(entries)?,
        images,
        styles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::image::binarize;

    fn small() -> SynthConfig {
        SynthConfig {
            writers: 2,
            train_writers: 1,
            pages_per_writer: 2,
            lines_per_page: 3,
            words_per_line: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_counts_are_rejected() {
        for f in [
            |c: &mut SynthConfig| c.writers = 0,
            |c: &mut SynthConfig| c.pages_per_writer = 0,
            |c: &mut SynthConfig| c.lines_per_page = 0,
            |c: &mut SynthConfig| c.words_per_line = 0,
        ] {
            let mut c = small();
            f(&mut c);
            assert!(matches!(generate_synthetic_corpus(&c), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic_corpus(&small()).unwrap();
        let b = generate_synthetic_corpus(&small()).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.manifest, b.manifest);
        let mut c = small();
        c.seed += 1;
        assert_ne!(generate_synthetic_corpus(&c).unwrap().digest(), a.digest());
    }

    #[test]
    fn hierarchy_is_nested() {
        let mut cfg = small();
        cfg.lines_per_page = 8;
        let c = generate_synthetic_corpus(&cfg).unwrap();
        let pages: Vec<_> = c.manifest.entries().iter().filter(|e| e.id.line().is_none()).collect();
        assert_eq!(pages.len(), 3 * 2);
        for p in pages {
            let lines = c
                .manifest
                .entries()
                .iter()
                .filter(|e| e.id.word().is_none() && e.id.line().is_some() && e.id.page_id() == p.id)
                .count();
            assert_eq!(lines, 8);
        }
        let words = c.manifest.entries().iter().filter(|e| e.id.word().is_some()).count();
        assert_eq!(words, 3 * 2 * 8 * 2);
        assert!(c.manifest.entries().iter().all(|e| c.images.contains_key(&e.id)));
    }

    #[test]
    fn pages_binarize_to_sparse_ink() {
        let c = generate_synthetic_corpus(&small()).unwrap();
        for (id, img) in &c.images {
            if id.line().is_none() {
                let f = binarize(img).unwrap().ink_fraction();
                assert!(f > 0.0 && f < 0.5, "{id}: {f}");
            }
        }
    }
}
