//! Synthetic image–question–answer generators with controllable budget
//! sensitivity, all aligned to the patch grid.
//!
//! - `global-majority`: the label is a global tint, recoverable from coarse
//!   statistics, so very few visual tokens suffice.
//! - `detail-locate`: the label is a glyph drawn in exactly one marked patch
//!   among distractor glyphs, so it rewards fine localization.
//! - `count-objects`: the label is the number of disjoint blobs on the grid.
//!
//! Generators are pure functions of (spec, stream, index): any sample can be
//! produced independently and in parallel, and every label is reconstructible
//! from the pixels by an exact oracle.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write as IoWrite;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::vlm::{QuestionAnswer, SyntheticImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "global-majority")]
    GlobalMajority,
    #[serde(rename = "detail-locate")]
    DetailLocate,
    #[serde(rename = "count-objects")]
    CountObjects,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::GlobalMajority => "global-majority",
            TaskKind::DetailLocate => "detail-locate",
            TaskKind::CountObjects => "count-objects",
        }
    }

    /// Fixed question id per task; the question vocabulary is task identity.
    pub fn question_id(&self) -> usize {
        match self {
            TaskKind::GlobalMajority => 0,
            TaskKind::DetailLocate => 1,
            TaskKind::CountObjects => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: TaskKind,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub answer_classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(name: TaskKind, seed: u64) -> Self {
        TaskSpec {
            name,
            image_size: 24,
            patch_size: 3,
            channels: 3,
            answer_classes: 8,
            noise: default_noise(name),
            seed,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn cells(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels != 3 {
            return Err(Error::Config("tasks are defined on 3-channel images".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("noise level must be non-negative".into()));
        }
        let k = self.answer_classes;
        match self.name {
            TaskKind::GlobalMajority if !(2..=8).contains(&k) => Err(Error::Config(format!(
                "global-majority supports 2..=8 classes, got {k}"
            ))),
            TaskKind::DetailLocate if !(2..=8).contains(&k) => Err(Error::Config(format!(
                "detail-locate supports 2..=8 glyph classes, got {k}"
            ))),
            TaskKind::DetailLocate if self.patch_size < 3 => Err(Error::Config(
                "detail-locate glyphs need a patch size of at least 3".into(),
            )),
            TaskKind::CountObjects if k < 2 => Err(Error::Config(
                "count-objects needs at least 2 classes".into(),
            )),
            TaskKind::CountObjects if k as i64 - 1 > self.cells() as i64 => Err(Error::Config(
                "count-objects cannot place more blobs than grid cells".into(),
            )),
            _ => Ok(()),
        }
    }
}

fn default_noise(name: TaskKind) -> f64 {
    match name {
        TaskKind::GlobalMajority => 0.1,
        TaskKind::DetailLocate => 0.1,
        TaskKind::CountObjects => 0.1,
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: SyntheticImage,
    pub qa: QuestionAnswer,
}

// K tint colors: the corners of the RGB cube.
fn palette(k: usize) -> Vec<[f64; 3]> {
    (0..k)
        .map(|i| {
            [
                ((i >> 2) & 1) as f64,
                ((i >> 1) & 1) as f64,
                (i & 1) as f64,
            ]
        })
        .collect()
}

// 3×3 glyph bitmaps, row-major, pairwise distinct.
const GLYPHS: [[u8; 9]; 8] = [
    [1, 1, 1, 1, 1, 1, 1, 1, 1], // solid
    [0, 1, 0, 1, 1, 1, 0, 1, 0], // plus
    [1, 0, 1, 0, 1, 0, 1, 0, 1], // X
    [0, 0, 0, 1, 1, 1, 0, 0, 0], // horizontal bar
    [0, 1, 0, 0, 1, 0, 0, 1, 0], // vertical bar
    [1, 0, 0, 0, 1, 0, 0, 0, 1], // diagonal
    [1, 0, 0, 1, 0, 0, 1, 1, 1], // L
    [1, 1, 1, 0, 1, 0, 0, 1, 0], // T
];

// Candidate cells (the marked one and the decoys) share an elevated red
// channel; background red is U[0,1), so the cue narrows the search without
// identifying the answer.
const DETAIL_RED_CUE: f64 = 0.55;
// Decoy cells per image: crisp binary patterns from outside the glyph
// codebook. Telling the marked cell from a decoy means reading the candidate
// almost purely, so low token budgets, which must mix many cells per token,
// lose exactly this information.
const DETAIL_DECOYS: usize = 12;
const BLOB_BG_CAP: f64 = 0.85;

struct ImageBuf {
    data: Vec<f64>,
    h: usize,
    w: usize,
}

impl ImageBuf {
    fn new(spec: &TaskSpec) -> Self {
        ImageBuf {
            data: vec![0.0; spec.channels * spec.image_size * spec.image_size],
            h: spec.image_size,
            w: spec.image_size,
        }
    }

    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[c * self.h * self.w + y * self.w + x] = v;
    }

    fn into_image(self, spec: &TaskSpec) -> SyntheticImage {
        SyntheticImage::new(
            Tensor::new(vec![spec.channels, self.h, self.w], self.data).expect("image buffer"),
        )
        .expect("image shape")
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn gen_global_majority(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Sample {
    let colors = palette(spec.answer_classes);
    let answer = rng.random_range(0..spec.answer_classes);
    let tint = colors[answer];
    let mut img = ImageBuf::new(spec);
    if spec.noise > 0.0 {
        let dist = Normal::new(0.0, spec.noise).expect("noise level");
        for c in 0..3 {
            for y in 0..spec.image_size {
                for x in 0..spec.image_size {
                    img.set(c, y, x, clamp01(tint[c] + dist.sample(rng)));
                }
            }
        }
    } else {
        for c in 0..3 {
            for y in 0..spec.image_size {
                for x in 0..spec.image_size {
                    img.set(c, y, x, tint[c]);
                }
            }
        }
    }
    Sample {
        image: img.into_image(spec),
        qa: QuestionAnswer { question_id: spec.name.question_id(), answer },
    }
}

/// Fold a value into [0,1] by reflection at the boundaries. Unlike clamping
/// this never produces exactly 0.0 or 1.0 from generic noise, so distractor
/// pixels get arbitrarily close to the marked cell's binary levels without a
/// separating margin a sharp softmax could exploit.
fn reflect01(v: f64) -> f64 {
    let v = v.rem_euclid(2.0);
    if v > 1.0 {
        2.0 - v
    } else {
        v
    }
}

fn glyph_code(bits: &[u8; 9]) -> u16 {
    bits.iter()
        .enumerate()
        .fold(0u16, |acc, (i, &b)| acc | (u16::from(b) << i))
}

fn in_codebook(code: u16, classes: usize) -> bool {
    GLYPHS[..classes].iter().any(|g| glyph_code(g) == code)
}

fn gen_detail_locate(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Sample {
    let side = spec.grid_side();
    let p = spec.patch_size;
    let answer = rng.random_range(0..spec.answer_classes);
    let noise = Normal::new(0.0, spec.noise.max(1e-6)).expect("noise level");

    // the marked cell plus decoys form the red-cued candidate pool
    let mut cells: Vec<usize> = (0..spec.cells()).collect();
    cells.shuffle(rng);
    let n_decoys = DETAIL_DECOYS.min(spec.cells() - 1);
    let marked = cells[0];
    let decoys: std::collections::HashSet<usize> = cells[1..1 + n_decoys].iter().copied().collect();

    let mut img = ImageBuf::new(spec);
    // paint a 3×3 bit pattern at exact binary levels with the candidate cue
    let mut paint_candidate = |img: &mut ImageBuf, rng: &mut ChaCha8Rng, y0: usize, x0: usize, code: u16| {
        for py in 0..p {
            for px in 0..p {
                let bit = if py < 3 && px < 3 { (code >> (py * 3 + px)) & 1 } else { 0 };
                img.set(0, y0 + py, x0 + px, rng.random_range(DETAIL_RED_CUE..1.0));
                img.set(1, y0 + py, x0 + px, f64::from(bit));
                img.set(2, y0 + py, x0 + px, rng.random_range(0.0..1.0));
            }
        }
    };
    for cell in 0..spec.cells() {
        let (gy, gx) = (cell / side, cell % side);
        let (y0, x0) = (gy * p, gx * p);
        if cell == marked {
            let code = glyph_code(&GLYPHS[answer]);
            paint_candidate(&mut img, rng, y0, x0, code);
        } else if decoys.contains(&cell) {
            // crisp binary pattern from outside the codebook
            let code = loop {
                let c = rng.random_range(0u16..512);
                if !in_codebook(c, spec.answer_classes) {
                    break c;
                }
            };
            paint_candidate(&mut img, rng, y0, x0, code);
        } else {
            // background clutter: a dim jittered glyph, no cue
            let dclass = rng.random_range(0..spec.answer_classes);
            let glyph = GLYPHS[dclass];
            let intensity: f64 = rng.random_range(0.35..0.85);
            for py in 0..p {
                for px in 0..p {
                    let bit = if py < 3 && px < 3 { glyph[py * 3 + px] } else { 0 };
                    let g = reflect01(f64::from(bit) * intensity + noise.sample(rng));
                    img.set(0, y0 + py, x0 + px, rng.random_range(0.0..1.0));
                    img.set(1, y0 + py, x0 + px, g);
                    img.set(2, y0 + py, x0 + px, rng.random_range(0.0..1.0));
                }
            }
        }
    }
    Sample {
        image: img.into_image(spec),
        qa: QuestionAnswer { question_id: spec.name.question_id(), answer },
    }
}

fn gen_count_objects(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Sample {
    let side = spec.grid_side();
    let p = spec.patch_size;
    let count = rng.random_range(0..spec.answer_classes);
    let mut cells: Vec<usize> = (0..spec.cells()).collect();
    cells.shuffle(rng);
    let blob_cells = &cells[..count];
    let bg_cap = (0.45 + spec.noise).min(BLOB_BG_CAP);
    let mut img = ImageBuf::new(spec);
    for cell in 0..spec.cells() {
        let (gy, gx) = (cell / side, cell % side);
        let (y0, x0) = (gy * p, gx * p);
        let is_blob = blob_cells.contains(&cell);
        for c in 0..3 {
            for py in 0..p {
                for px in 0..p {
                    let v = if is_blob { 1.0 } else { rng.random_range(0.0..bg_cap) };
                    img.set(c, y0 + py, x0 + px, v);
                }
            }
        }
    }
    Sample {
        image: img.into_image(spec),
        qa: QuestionAnswer { question_id: spec.name.question_id(), answer: count },
    }
}

/// Generate sample `index` of the stream identified by `stream` (use
/// [`crate::rng::stream`] tags to keep train and eval splits disjoint).
pub fn generate_sample(spec: &TaskSpec, stream: u64, index: u64) -> Sample {
    let mut rng = rng_for(spec.seed, stream, index);
    match spec.name {
        TaskKind::GlobalMajority => gen_global_majority(spec, &mut rng),
        TaskKind::DetailLocate => gen_detail_locate(spec, &mut rng),
        TaskKind::CountObjects => gen_count_objects(spec, &mut rng),
    }
}

/// Generate `n` samples starting at `start`; parallel when the `parallel`
/// feature is on, identical output either way.
pub fn generate_dataset(spec: &TaskSpec, stream: u64, start: u64, n: usize) -> Vec<Sample> {
    crate::par::map_indexed(n, |i| generate_sample(spec, stream, start + i as u64))
}

// ── Exact label oracles ─────────────────────────────────────────────

fn oracle_global_majority(spec: &TaskSpec, image: &SyntheticImage) -> Option<usize> {
    let px = image.pixels.data();
    let plane = spec.image_size * spec.image_size;
    let mut mean = [0.0; 3];
    for c in 0..3 {
        mean[c] = px[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
    }
    let colors = palette(spec.answer_classes);
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, col) in colors.iter().enumerate() {
        let d: f64 = (0..3).map(|c| (mean[c] - col[c]).powi(2)).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Some(best)
}

fn oracle_detail_locate(spec: &TaskSpec, image: &SyntheticImage) -> Option<usize> {
    let side = spec.grid_side();
    let p = spec.patch_size;
    let plane = spec.image_size * spec.image_size;
    let px = image.pixels.data();
    // candidates (marked cell and decoys) have bit-exact binary green; only
    // the marked cell's pattern is in the glyph codebook
    let binary_green = |cell: usize| -> bool {
        let (gy, gx) = (cell / side, cell % side);
        (0..p).all(|py| {
            (0..p).all(|qx| {
                let v = px[plane + (gy * p + py) * spec.image_size + (gx * p + qx)];
                v == 0.0 || v == 1.0
            })
        })
    };
    let read_bits = |cell: usize| -> [u8; 9] {
        let (gy, gx) = (cell / side, cell % side);
        let mut bits = [0u8; 9];
        for py in 0..3 {
            for qx in 0..3 {
                let v = px[plane + (gy * p + py) * spec.image_size + (gx * p + qx)];
                bits[py * 3 + qx] = u8::from(v == 1.0);
            }
        }
        bits
    };
    let mut found = None;
    for cell in (0..spec.cells()).filter(|&c| binary_green(c)) {
        let bits = read_bits(cell);
        if let Some(k) = (0..spec.answer_classes).find(|&k| GLYPHS[k] == bits) {
            if found.is_some() {
                return None; // more than one codebook match breaks uniqueness
            }
            found = Some(k);
        }
    }
    found
}

fn oracle_count_objects(spec: &TaskSpec, image: &SyntheticImage) -> Option<usize> {
    let side = spec.grid_side();
    let p = spec.patch_size;
    let plane = spec.image_size * spec.image_size;
    let px = image.pixels.data();
    let mut count = 0;
    for cell in 0..spec.cells() {
        let (gy, gx) = (cell / side, cell % side);
        let mut min = f64::INFINITY;
        for c in 0..3 {
            for py in 0..p {
                for qx in 0..p {
                    let y = gy * p + py;
                    let x = gx * p + qx;
                    min = min.min(px[c * plane + y * spec.image_size + x]);
                }
            }
        }
        if min >= 0.99 {
            count += 1;
        }
    }
    Some(count.min(spec.answer_classes - 1))
}

/// Reconstruct the label from pixels alone. Labels and oracle agree on every
/// generated sample.
pub fn oracle_label(spec: &TaskSpec, image: &SyntheticImage) -> Option<usize> {
    match spec.name {
        TaskKind::GlobalMajority => oracle_global_majority(spec, image),
        TaskKind::DetailLocate => oracle_detail_locate(spec, image),
        TaskKind::CountObjects => oracle_count_objects(spec, image),
    }
}

/// Stable content hash of one sample (pixel bits plus label).
pub fn sample_hash(sample: &Sample) -> u64 {
    let mut h = DefaultHasher::new();
    for v in sample.image.pixels.data() {
        v.to_bits().hash(&mut h);
    }
    sample.qa.question_id.hash(&mut h);
    sample.qa.answer.hash(&mut h);
    h.finish()
}

// ── Dataset dump ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: TaskSpec,
    pub stream: u64,
    pub start: u64,
    pub n: usize,
    /// SHA-256 of the binary payload, hex encoded.
    pub checksum: String,
}

/// Write a split to `<stem>.bin` (per sample: pixels as little-endian f64,
/// then question id and answer as u32) plus a `<stem>.json` manifest.
pub fn dump_dataset(
    stem: &Path,
    spec: &TaskSpec,
    stream: u64,
    start: u64,
    n: usize,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let samples = generate_dataset(spec, stream, start, n);
    let mut bin = Vec::new();
    for s in &samples {
        for v in s.image.pixels.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        bin.extend_from_slice(&(s.qa.question_id as u32).to_le_bytes());
        bin.extend_from_slice(&(s.qa.answer as u32).to_le_bytes());
    }
    let mut hasher = Sha256::new();
    hasher.update(&bin);
    let checksum = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect::<String>();
    let manifest = DatasetManifest {
        version: 1,
        spec: *spec,
        stream,
        start,
        n,
        checksum,
    };
    let bin_path = stem.with_extension("bin");
    let json_path = stem.with_extension("json");
    std::fs::File::create(&bin_path)?.write_all(&bin)?;
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::File::create(&json_path)?.write_all(&json)?;
    Ok(manifest)
}
