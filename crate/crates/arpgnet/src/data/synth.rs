//! Synthetic two-stream co-occurrence task.
//!
//! Each clip plants one appearance pattern `A_a` at frame `t_a` and one
//! relation pattern `B_b` at a frame `t_b` within `evidence_window` of it;
//! the class is `(a + b) mod n_classes`. Decoy patterns of both kinds are
//! planted far from every pattern of the opposite stream, so stream
//! marginals reveal candidate sets but only the temporally aligned pair
//! identifies the class. A faint per-class hint is added to every appearance
//! frame so that appearance-only models sit measurably above chance without
//! solving the task.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, DataLayout, Dataset, Manifest, RelationLayout, VideoSample};
use crate::model::EXTERNAL_MAP_SIDE;

/// The relation patterns live on this coarse block grid, both in feature
/// maps and in raw frames.
const BLOCK_GRID: usize = 6;

/// What kind of tensors the generator writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthMode {
    /// Precomputed features: appearance vectors plus either relation feature
    /// maps (`Some(channels)`) or relation vectors of width `c_prime`
    /// (`None`).
    Features {
        c_prime: usize,
        relation_map_channels: Option<usize>,
    },
    /// Raw frames consumed by the convolutional trunks.
    Frames {
        channels: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthTaskConfig {
    pub mode: SynthMode,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub n_subjects: usize,
    pub frames_per_sample: usize,
    /// Maximum distance between the aligned pattern pair.
    pub evidence_window: usize,
    pub noise_sigma: f64,
    /// Strength of the per-class pattern added to every appearance frame.
    pub appearance_hint: f64,
    /// Amplitude of the planted patterns.
    pub pattern_strength: f64,
    /// Unaligned extra patterns per stream and sample.
    pub decoys_per_sample: usize,
    /// Minimum distance between a decoy and every pattern of the opposite
    /// stream. Must be at least `evidence_window`.
    pub decoy_margin: usize,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        SynthTaskConfig {
            mode: SynthMode::Features {
                c_prime: 16,
                relation_map_channels: None,
            },
            n_classes: 4,
            samples_per_class: 256,
            n_subjects: 8,
            frames_per_sample: 8,
            evidence_window: 1,
            noise_sigma: 0.1,
            appearance_hint: 0.04,
            pattern_strength: 3.0,
            decoys_per_sample: 2,
            decoy_margin: 2,
        }
    }
}

impl SynthTaskConfig {
    fn validate(&self) -> Result<(), DataError> {
        let fail = |reason: String| Err(DataError::Synth { reason });
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.n_classes > BLOCK_GRID * BLOCK_GRID {
            return fail(format!(
                "at most {} classes fit on the relation block grid",
                BLOCK_GRID * BLOCK_GRID
            ));
        }
        if self.samples_per_class == 0 || self.n_subjects == 0 {
            return fail("samples_per_class and n_subjects must be positive".to_string());
        }
        if self.frames_per_sample < 2 * self.evidence_window + 2 {
            return fail(format!(
                "{} frames cannot hold an aligned pair with window {}",
                self.frames_per_sample, self.evidence_window
            ));
        }
        if self.decoy_margin < self.evidence_window {
            return fail("decoy_margin must be at least evidence_window".to_string());
        }
        if !(self.noise_sigma >= 0.0) || !(self.appearance_hint >= 0.0) {
            return fail("noise_sigma and appearance_hint must be non-negative".to_string());
        }
        if !(self.pattern_strength > 0.0) {
            return fail("pattern_strength must be positive".to_string());
        }
        match self.mode {
            SynthMode::Features {
                c_prime,
                relation_map_channels,
            } => {
                if c_prime == 0 || relation_map_channels == Some(0) {
                    return fail("feature widths must be positive".to_string());
                }
                if 2 * self.n_classes > c_prime {
                    return fail(format!(
                        "c_prime {c_prime} cannot hold {} orthogonal patterns",
                        2 * self.n_classes
                    ));
                }
            }
            SynthMode::Frames {
                channels,
                height,
                width,
            } => {
                if channels == 0 || height < BLOCK_GRID || width < BLOCK_GRID {
                    return fail(format!(
                        "frames must be at least {BLOCK_GRID}x{BLOCK_GRID} with one channel"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The fixed pattern bank derived from a seed. The generator and any
/// generator-aware decoder share it.
pub(crate) struct SynthPatterns {
    /// Per appearance pattern index: a unit vector over `c_prime`.
    pub appearance: Vec<Vec<f64>>,
    /// Per class: the faint always-on appearance direction.
    pub hint: Vec<Vec<f64>>,
    /// Per relation pattern index: a cell of the block grid.
    pub cells: Vec<usize>,
    /// Per relation pattern index: one sign per map channel (feature mode)
    /// or frame channel (frame mode).
    pub signs: Vec<Vec<f64>>,
    /// Feature mode with relation vectors: a unit vector over `c_prime` per
    /// relation pattern index.
    pub relation: Vec<Vec<f64>>,
    /// Frame mode only: per appearance pattern, a coarse 4x4 brightness
    /// grid spread over the whole frame.
    pub frame_grids: Vec<Vec<f64>>,
    /// Frame mode only: per class, a coarse 2x2 hint grid.
    pub frame_hints: Vec<Vec<f64>>,
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Mutually orthogonal unit vectors, so distinct patterns never leak into
/// each other's matched filters.
fn orthonormal_bank<R: Rng + ?Sized>(rng: &mut R, dim: usize, count: usize) -> Vec<Vec<f64>> {
    assert!(count <= dim, "cannot fit {count} orthogonal vectors in {dim} dims");
    let mut bank: Vec<Vec<f64>> = Vec::with_capacity(count);
    while bank.len() < count {
        let mut v = unit_vector(rng, dim);
        for u in &bank {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in &mut v {
                *x /= norm;
            }
            bank.push(v);
        }
    }
    bank
}

pub(crate) fn synth_patterns(cfg: &SynthTaskConfig, seed: u64) -> SynthPatterns {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.n_classes;
    let (app_dim, sign_dim) = match cfg.mode {
        SynthMode::Features {
            c_prime,
            relation_map_channels,
        } => (c_prime, relation_map_channels.unwrap_or(0)),
        SynthMode::Frames { channels, .. } => (0, channels),
    };
    let (appearance, hint) = if app_dim > 0 {
        let mut bank = orthonormal_bank(&mut rng, app_dim, 2 * k);
        let hint = bank.split_off(k);
        (bank, hint)
    } else {
        (vec![Vec::new(); k], vec![Vec::new(); k])
    };
    // Coprime stride spreads the cells over the grid.
    let cells = (0..k).map(|b| (b * 7) % (BLOCK_GRID * BLOCK_GRID)).collect();
    let signs = (0..k)
        .map(|_| {
            (0..sign_dim)
                .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    let relation = match cfg.mode {
        SynthMode::Features { .. } => orthonormal_bank(&mut rng, app_dim, k),
        SynthMode::Frames { .. } => Vec::new(),
    };
    let (frame_grids, frame_hints) = match cfg.mode {
        SynthMode::Frames { .. } => (
            (0..k).map(|_| unit_vector(&mut rng, 16)).collect(),
            (0..k).map(|_| unit_vector(&mut rng, 4)).collect(),
        ),
        SynthMode::Features { .. } => (Vec::new(), Vec::new()),
    };
    SynthPatterns {
        appearance,
        hint,
        cells,
        signs,
        relation,
        frame_grids,
        frame_hints,
    }
}

/// Where the evidence of one sample ended up.
struct Placement {
    a: usize,
    b: usize,
    t_a: usize,
    t_b: usize,
    /// Decoy appearance patterns: `(pattern, frame)`.
    app_decoys: Vec<(usize, usize)>,
    /// Decoy relation patterns: `(pattern, frame)`.
    rel_decoys: Vec<(usize, usize)>,
}

fn place_sample<R: Rng + ?Sized>(
    cfg: &SynthTaskConfig,
    label: usize,
    rng: &mut R,
) -> Placement {
    let n = cfg.frames_per_sample;
    let w = cfg.evidence_window;
    let k = cfg.n_classes;
    let a = rng.gen_range(0..k);
    let b = (label + k - a) % k;
    let t_a = rng.gen_range(w..n - w);
    let delta = rng.gen_range(0..=2 * w) as isize - w as isize;
    let t_b = (t_a as isize + delta) as usize;

    let mut app_frames = vec![t_a];
    let mut rel_frames = vec![t_b];
    let far = |frames: &[usize], t: usize, margin: usize| {
        frames.iter().all(|f| f.abs_diff(t) > margin)
    };
    let mut app_decoys = Vec::new();
    for _ in 0..cfg.decoys_per_sample {
        for _ in 0..100 {
            let t = rng.gen_range(0..n);
            if far(&rel_frames, t, cfg.decoy_margin) && !app_frames.contains(&t) {
                app_decoys.push((rng.gen_range(0..k), t));
                app_frames.push(t);
                break;
            }
        }
    }
    let mut rel_decoys = Vec::new();
    for _ in 0..cfg.decoys_per_sample {
        for _ in 0..100 {
            let t = rng.gen_range(0..n);
            if far(&app_frames, t, cfg.decoy_margin) && !rel_frames.contains(&t) {
                rel_decoys.push((rng.gen_range(0..k), t));
                rel_frames.push(t);
                break;
            }
        }
    }
    Placement {
        a,
        b,
        t_a,
        t_b,
        app_decoys,
        rel_decoys,
    }
}

/// The pixel rectangle of one block-grid cell inside a `height x width`
/// plane.
fn cell_rect(cell: usize, height: usize, width: usize) -> (usize, usize, usize, usize) {
    let row = cell / BLOCK_GRID;
    let col = cell % BLOCK_GRID;
    let y0 = row * height / BLOCK_GRID;
    let y1 = (row + 1) * height / BLOCK_GRID;
    let x0 = col * width / BLOCK_GRID;
    let x1 = (col + 1) * width / BLOCK_GRID;
    (y0, y1, x0, x1)
}

fn write_f32(path: &Path, values: &[f64]) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Generates a dataset under `root` and reloads it through the normal
/// loader. The same seed always produces byte-identical files.
pub fn generate_synth(
    cfg: &SynthTaskConfig,
    seed: u64,
    root: impl AsRef<Path>,
) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    let patterns = synth_patterns(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);

    let n = cfg.frames_per_sample;
    let k = cfg.n_classes;
    let mut samples = Vec::new();
    let mut index = 0usize;
    for label in 0..k {
        for _ in 0..cfg.samples_per_class {
            let id = format!("s{index:06}");
            let subject = format!("subj{}", index % cfg.n_subjects);
            let placement = place_sample(cfg, label, &mut rng);
            let dir = root.join(&id);
            fs::create_dir_all(&dir)?;
            match cfg.mode {
                SynthMode::Features {
                    c_prime,
                    relation_map_channels,
                } => write_feature_sample(
                    cfg,
                    &patterns,
                    &placement,
                    label,
                    c_prime,
                    relation_map_channels,
                    &dir,
                    &mut rng,
                )?,
                SynthMode::Frames {
                    channels,
                    height,
                    width,
                } => write_frame_sample(
                    cfg,
                    &patterns,
                    &placement,
                    label,
                    channels,
                    height,
                    width,
                    &dir,
                    &mut rng,
                )?,
            }
            samples.push(VideoSample {
                id,
                subject,
                label,
                n_frames: n,
            });
            index += 1;
        }
    }

    let layout = match cfg.mode {
        SynthMode::Features {
            c_prime,
            relation_map_channels,
        } => DataLayout::Features {
            c_prime,
            relation: match relation_map_channels {
                Some(channels) => RelationLayout::Maps { channels },
                None => RelationLayout::Vectors,
            },
        },
        SynthMode::Frames {
            channels,
            height,
            width,
        } => DataLayout::Frames {
            channels,
            height,
            width,
        },
    };
    let manifest = Manifest { layout, samples };
    fs::write(
        root.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest).expect("manifests serialize infallibly"),
    )?;
    let mut classes = String::new();
    for c in 0..k {
        classes.push_str(&format!("{c},class_{c}\n"));
    }
    fs::write(root.join("classes.csv"), classes)?;
    Dataset::load(root)
}

#[allow(clippy::too_many_arguments)]
fn write_feature_sample(
    cfg: &SynthTaskConfig,
    patterns: &SynthPatterns,
    placement: &Placement,
    label: usize,
    c_prime: usize,
    channels: Option<usize>,
    dir: &Path,
    rng: &mut ChaCha8Rng,
) -> Result<(), DataError> {
    let n = cfg.frames_per_sample;
    let side = EXTERNAL_MAP_SIDE;
    let mut app = vec![0.0f64; n * c_prime];
    for v in &mut app {
        *v = cfg.noise_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    for t in 0..n {
        for (j, h) in patterns.hint[label].iter().enumerate() {
            app[t * c_prime + j] += cfg.appearance_hint * h;
        }
    }
    let plant_app = |pattern: usize, frame: usize, app: &mut [f64]| {
        for (j, v) in patterns.appearance[pattern].iter().enumerate() {
            app[frame * c_prime + j] += cfg.pattern_strength * v;
        }
    };
    plant_app(placement.a, placement.t_a, &mut app);
    for (pattern, frame) in &placement.app_decoys {
        plant_app(*pattern, *frame, &mut app);
    }
    write_f32(&dir.join("app.bin"), &app)?;

    let Some(channels) = channels else {
        let mut rel = vec![0.0f64; n * c_prime];
        for v in &mut rel {
            *v = cfg.noise_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let plant = |pattern: usize, frame: usize, rel: &mut [f64]| {
            for (j, v) in patterns.relation[pattern].iter().enumerate() {
                rel[frame * c_prime + j] += cfg.pattern_strength * v;
            }
        };
        plant(placement.b, placement.t_b, &mut rel);
        for (pattern, frame) in &placement.rel_decoys {
            plant(*pattern, *frame, &mut rel);
        }
        write_f32(&dir.join("rel.bin"), &rel)?;
        return Ok(());
    };

    let per_frame = side * side * channels;
    let mut maps = vec![0.0f64; n * per_frame];
    for v in &mut maps {
        *v = cfg.noise_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    let plant_rel = |pattern: usize, frame: usize, maps: &mut [f64]| {
        let (y0, y1, x0, x1) = cell_rect(patterns.cells[pattern], side, side);
        for y in y0..y1 {
            for x in x0..x1 {
                for (c, sign) in patterns.signs[pattern].iter().enumerate() {
                    maps[frame * per_frame + (y * side + x) * channels + c] +=
                        cfg.pattern_strength * sign;
                }
            }
        }
    };
    plant_rel(placement.b, placement.t_b, &mut maps);
    for (pattern, frame) in &placement.rel_decoys {
        plant_rel(*pattern, *frame, &mut maps);
    }
    write_f32(&dir.join("relmap.bin"), &maps)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn write_frame_sample(
    cfg: &SynthTaskConfig,
    patterns: &SynthPatterns,
    placement: &Placement,
    label: usize,
    channels: usize,
    height: usize,
    width: usize,
    dir: &Path,
    rng: &mut ChaCha8Rng,
) -> Result<(), DataError> {
    let n = cfg.frames_per_sample;
    let per_frame = channels * height * width;
    for t in 0..n {
        let mut frame = vec![0.0f64; per_frame];
        for v in &mut frame {
            *v = cfg.noise_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let coarse = |grid: &[f64], gside: usize, y: usize, x: usize| {
            grid[(y * gside / height) * gside + (x * gside / width)]
        };
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let idx = c * height * width + y * width + x;
                    frame[idx] += cfg.appearance_hint
                        * coarse(&patterns.frame_hints[label], 2, y, x);
                }
            }
        }
        let paint_app = |pattern: usize, frame: &mut [f64]| {
            for c in 0..channels {
                for y in 0..height {
                    for x in 0..width {
                        let idx = c * height * width + y * width + x;
                        frame[idx] += cfg.pattern_strength
                            * coarse(&patterns.frame_grids[pattern], 4, y, x);
                    }
                }
            }
        };
        if placement.t_a == t {
            paint_app(placement.a, &mut frame);
        }
        for (pattern, at) in &placement.app_decoys {
            if *at == t {
                paint_app(*pattern, &mut frame);
            }
        }
        let paint_rel = |pattern: usize, frame: &mut [f64]| {
            let (y0, y1, x0, x1) = cell_rect(patterns.cells[pattern], height, width);
            for (c, sign) in patterns.signs[pattern].iter().enumerate() {
                for y in y0..y1 {
                    for x in x0..x1 {
                        frame[c * height * width + y * width + x] +=
                            cfg.pattern_strength * sign;
                    }
                }
            }
        };
        if placement.t_b == t {
            paint_rel(placement.b, &mut frame);
        }
        for (pattern, at) in &placement.rel_decoys {
            if *at == t {
                paint_rel(*pattern, &mut frame);
            }
        }
        write_f32(&dir.join(super::frame_file(t)), &frame)?;
    }
    Ok(())
}
