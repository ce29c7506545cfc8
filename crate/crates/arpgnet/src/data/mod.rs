//! Datasets on disk, frame sampling, and the synthetic co-occurrence task.
//!
//! A dataset is a directory holding `manifest.json`, `classes.csv`, and one
//! subdirectory per sample. Raw-frame datasets store one `f000000.bin` style
//! file per frame (little-endian f32, channels x height x width); feature
//! datasets store `app.bin` (frames x c_prime) plus either `relmap.bin`
//! (frames x side x side x channels) or `rel.bin` (frames x c_prime).

mod synth;

pub use synth::{generate_synth, SynthMode, SynthTaskConfig};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelInput, RelationFeatures, EXTERNAL_MAP_SIDE};
use crate::numerics::{Scalar, Tape, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad manifest: {reason}")]
    Manifest { reason: String },
    #[error("missing dataset file {path}")]
    MissingFile { path: PathBuf },
    #[error("{path} holds {got} bytes, expected {expected}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        got: u64,
    },
    #[error("frame sampling: {reason}")]
    Sampling { reason: String },
    #[error("synthetic task: {reason}")]
    Synth { reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How the relation stream is stored in a feature dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelationLayout {
    /// Per-frame feature maps at [`EXTERNAL_MAP_SIDE`] resolution, stored
    /// height-major with channels innermost.
    Maps { channels: usize },
    /// Ready per-frame vectors of width `c_prime`.
    Vectors,
}

/// Physical layout of the per-sample tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DataLayout {
    Frames {
        channels: usize,
        height: usize,
        width: usize,
    },
    Features {
        c_prime: usize,
        relation: RelationLayout,
    },
}

/// One clip: identity, grouping subject, class label, and length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoSample {
    pub id: String,
    pub subject: String,
    pub label: usize,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    layout: DataLayout,
    samples: Vec<VideoSample>,
}

/// A validated dataset rooted at one directory.
pub struct Dataset {
    root: PathBuf,
    layout: DataLayout,
    classes: Vec<String>,
    samples: Vec<VideoSample>,
}

fn frame_file(index: usize) -> String {
    format!("f{index:06}.bin")
}

impl Dataset {
    /// Reads and fully validates `root`: the manifest parses, every label is
    /// in range, every tensor file exists with exactly the size the layout
    /// implies.
    pub fn load(root: impl AsRef<Path>) -> Result<Dataset, DataError> {
        let root = root.as_ref().to_path_buf();
        let manifest_path = root.join("manifest.json");
        let manifest_bytes = fs::read(&manifest_path).map_err(|_| DataError::MissingFile {
            path: manifest_path.clone(),
        })?;
        let manifest: Manifest =
            serde_json::from_slice(&manifest_bytes).map_err(|e| DataError::Manifest {
                reason: format!("{manifest_path:?}: {e}"),
            })?;
        let classes = read_classes(&root.join("classes.csv"))?;
        if classes.is_empty() {
            return Err(DataError::Manifest {
                reason: "classes.csv lists no classes".to_string(),
            });
        }
        for sample in &manifest.samples {
            if sample.label >= classes.len() {
                return Err(DataError::Manifest {
                    reason: format!(
                        "sample {} has label {} but only {} classes exist",
                        sample.id,
                        sample.label,
                        classes.len()
                    ),
                });
            }
            if sample.n_frames == 0 {
                return Err(DataError::Manifest {
                    reason: format!("sample {} has no frames", sample.id),
                });
            }
            if sample.subject.is_empty() {
                return Err(DataError::Manifest {
                    reason: format!("sample {} has an empty subject", sample.id),
                });
            }
            check_sample_files(&root, &manifest.layout, sample)?;
        }
        Ok(Dataset {
            root,
            layout: manifest.layout,
            classes,
            samples: manifest.samples,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn layout(&self) -> DataLayout {
        self.layout
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn samples(&self) -> &[VideoSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct subjects, sorted.
    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.subject.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    fn sample_dir(&self, sample: &VideoSample) -> PathBuf {
        self.root.join(&sample.id)
    }

    /// Reads the listed frames of one sample into a model input on `tape`.
    /// Frame indices may repeat and appear in any order; rows follow the
    /// given order.
    pub fn read_clip<T: Scalar>(
        &self,
        tape: &Tape<T>,
        sample_index: usize,
        frames: &[usize],
    ) -> Result<ModelInput<T>, DataError> {
        let sample = self
            .samples
            .get(sample_index)
            .ok_or_else(|| DataError::Manifest {
                reason: format!("sample index {sample_index} out of range"),
            })?;
        for &f in frames {
            if f >= sample.n_frames {
                return Err(DataError::Sampling {
                    reason: format!(
                        "frame {f} out of range for sample {} with {} frames",
                        sample.id, sample.n_frames
                    ),
                });
            }
        }
        let dir = self.sample_dir(sample);
        match self.layout {
            DataLayout::Frames {
                channels,
                height,
                width,
            } => {
                let per_frame = channels * height * width;
                let mut data = Vec::with_capacity(frames.len() * per_frame);
                for &f in frames {
                    let raw = read_f32_file(&dir.join(frame_file(f)), per_frame)?;
                    data.extend_from_slice(&raw);
                }
                let values: Vec<T> = data.iter().map(|v| T::from_f64(*v as f64)).collect();
                let tensor =
                    tape.constant(&[frames.len(), channels, height, width], &values)?;
                Ok(ModelInput::Frames(tensor))
            }
            DataLayout::Features { c_prime, relation } => {
                let app_rows =
                    read_f32_rows(&dir.join("app.bin"), sample.n_frames, c_prime, frames)?;
                let app_values: Vec<T> =
                    app_rows.iter().map(|v| T::from_f64(*v as f64)).collect();
                let appearance = tape.constant(&[frames.len(), c_prime], &app_values)?;
                let relation = match relation {
                    RelationLayout::Vectors => {
                        let rel_rows = read_f32_rows(
                            &dir.join("rel.bin"),
                            sample.n_frames,
                            c_prime,
                            frames,
                        )?;
                        let values: Vec<T> =
                            rel_rows.iter().map(|v| T::from_f64(*v as f64)).collect();
                        RelationFeatures::Sequence(
                            tape.constant(&[frames.len(), c_prime], &values)?,
                        )
                    }
                    RelationLayout::Maps { channels } => {
                        let side = EXTERNAL_MAP_SIDE;
                        let per_frame = side * side * channels;
                        let rows = read_f32_rows(
                            &dir.join("relmap.bin"),
                            sample.n_frames,
                            per_frame,
                            frames,
                        )?;
                        // Stored height x width x channels; the model wants
                        // channels first.
                        let mut values =
                            vec![T::zero(); frames.len() * per_frame];
                        for (t, chunk) in rows.chunks_exact(per_frame).enumerate() {
                            for y in 0..side {
                                for x in 0..side {
                                    for c in 0..channels {
                                        let src = (y * side + x) * channels + c;
                                        let dst = t * per_frame
                                            + c * side * side
                                            + y * side
                                            + x;
                                        values[dst] = T::from_f64(chunk[src] as f64);
                                    }
                                }
                            }
                        }
                        RelationFeatures::Maps(tape.constant(
                            &[frames.len(), channels, side, side],
                            &values,
                        )?)
                    }
                };
                Ok(ModelInput::Features {
                    appearance: Some(appearance),
                    relation: Some(relation),
                })
            }
        }
    }
}

fn read_classes(path: &Path) -> Result<Vec<String>, DataError> {
    let text = fs::read_to_string(path).map_err(|_| DataError::MissingFile {
        path: path.to_path_buf(),
    })?;
    let mut classes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (index, name) = line.split_once(',').ok_or_else(|| DataError::Manifest {
            reason: format!("classes.csv line {} lacks an index,name pair", i + 1),
        })?;
        let parsed: usize = index.trim().parse().map_err(|_| DataError::Manifest {
            reason: format!("classes.csv line {} has a bad index", i + 1),
        })?;
        if parsed != classes.len() {
            return Err(DataError::Manifest {
                reason: format!(
                    "classes.csv indices must be contiguous from 0, line {} has {parsed}",
                    i + 1
                ),
            });
        }
        classes.push(name.trim().to_string());
    }
    Ok(classes)
}

fn check_file_size(path: &Path, expected: u64) -> Result<(), DataError> {
    let meta = fs::metadata(path).map_err(|_| DataError::MissingFile {
        path: path.to_path_buf(),
    })?;
    if meta.len() != expected {
        return Err(DataError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            got: meta.len(),
        });
    }
    Ok(())
}

fn check_sample_files(
    root: &Path,
    layout: &DataLayout,
    sample: &VideoSample,
) -> Result<(), DataError> {
    let dir = root.join(&sample.id);
    match layout {
        DataLayout::Frames {
            channels,
            height,
            width,
        } => {
            let bytes = (channels * height * width * 4) as u64;
            for f in 0..sample.n_frames {
                check_file_size(&dir.join(frame_file(f)), bytes)?;
            }
        }
        DataLayout::Features { c_prime, relation } => {
            let app_bytes = (sample.n_frames * c_prime * 4) as u64;
            check_file_size(&dir.join("app.bin"), app_bytes)?;
            match relation {
                RelationLayout::Vectors => {
                    check_file_size(&dir.join("rel.bin"), app_bytes)?;
                }
                RelationLayout::Maps { channels } => {
                    let bytes = (sample.n_frames
                        * EXTERNAL_MAP_SIDE
                        * EXTERNAL_MAP_SIDE
                        * channels
                        * 4) as u64;
                    check_file_size(&dir.join("relmap.bin"), bytes)?;
                }
            }
        }
    }
    Ok(())
}

fn read_f32_file(path: &Path, expected_len: usize) -> Result<Vec<f32>, DataError> {
    let bytes = fs::read(path).map_err(|_| DataError::MissingFile {
        path: path.to_path_buf(),
    })?;
    if bytes.len() != expected_len * 4 {
        return Err(DataError::SizeMismatch {
            path: path.to_path_buf(),
            expected: (expected_len * 4) as u64,
            got: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect())
}

/// Reads the given rows of a `[n_rows, row_len]` matrix file, in order.
fn read_f32_rows(
    path: &Path,
    n_rows: usize,
    row_len: usize,
    rows: &[usize],
) -> Result<Vec<f32>, DataError> {
    let all = read_f32_file(path, n_rows * row_len)?;
    let mut out = Vec::with_capacity(rows.len() * row_len);
    for &r in rows {
        out.extend_from_slice(&all[r * row_len..(r + 1) * row_len]);
    }
    Ok(out)
}

/// Training-time sparse sampling: the clip is divided into `t` equal
/// segments and one frame is drawn uniformly inside each. Clips shorter than
/// `t` cycle through their frames round-robin.
pub fn sample_sparse_train<R: Rng + ?Sized>(
    n_frames: usize,
    t: usize,
    rng: &mut R,
) -> Result<Vec<usize>, DataError> {
    check_sampling_args(n_frames, t)?;
    if n_frames < t {
        return Ok((0..t).map(|i| i % n_frames).collect());
    }
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let lo = i * n_frames / t;
        let hi = (i + 1) * n_frames / t;
        out.push(rng.gen_range(lo..hi));
    }
    Ok(out)
}

/// Evaluation-time sparse sampling: the deterministic segment centers
/// `floor((i + 0.5) * n / t)`.
pub fn sample_sparse_test(n_frames: usize, t: usize) -> Result<Vec<usize>, DataError> {
    check_sampling_args(n_frames, t)?;
    Ok((0..t)
        .map(|i| (2 * i + 1) * n_frames / (2 * t))
        .collect())
}

/// Context sampling around one frame: eight frames at offsets
/// `3 * (k - 4)` for `k` in `0..8`, clamped to the clip.
pub fn sample_dilated(center: usize, n_frames: usize) -> Result<Vec<usize>, DataError> {
    if n_frames == 0 {
        return Err(DataError::Sampling {
            reason: "cannot sample an empty clip".to_string(),
        });
    }
    if center >= n_frames {
        return Err(DataError::Sampling {
            reason: format!("center {center} out of range for {n_frames} frames"),
        });
    }
    Ok((0..8)
        .map(|k| {
            let offset = 3 * (k as isize - 4);
            (center as isize + offset).clamp(0, n_frames as isize - 1) as usize
        })
        .collect())
}

fn check_sampling_args(n_frames: usize, t: usize) -> Result<(), DataError> {
    if n_frames == 0 {
        return Err(DataError::Sampling {
            reason: "cannot sample an empty clip".to_string(),
        });
    }
    if t == 0 {
        return Err(DataError::Sampling {
            reason: "cannot sample zero frames".to_string(),
        });
    }
    Ok(())
}
