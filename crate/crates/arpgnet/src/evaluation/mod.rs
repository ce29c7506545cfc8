//! Metrics, the leave-one-subject-out harness, the variant ablation runner,
//! attention inspection, and inference timing.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{sample_sparse_test, DataError, Dataset};
use crate::model::{
    ArpgNet, ArpgNetConfig, AttentionTrace, Backbone, Mode, ModelError, ModelInput,
    RelationFeatures, Variant, EXTERNAL_MAP_SIDE,
};
use crate::numerics::{Scalar, Tape, TensorError};
use crate::training::{argmax, fit, TrainConfig, TrainingError};

/// Weights of the combined metric `M = 0.33 * accuracy + 0.67 * macro F1`.
const M_ACCURACY_WEIGHT: f64 = 0.33;
const M_F1_WEIGHT: f64 = 0.67;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metrics: {reason}")]
    Metrics { reason: String },
    #[error("evaluation setup: {reason}")]
    Setup { reason: String },
    #[error("subject audit failed: {reason}")]
    Audit { reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("evaluation io: {0}")]
    Io(#[from] std::io::Error),
}

/// Classification quality over one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    /// Unweighted mean of per-class F1; classes absent from both the labels
    /// and the predictions contribute zero.
    pub macro_f1: f64,
    pub m_score: f64,
    /// `confusion[true_class][predicted_class]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub n_samples: usize,
}

/// The combined metric.
pub fn m_score(accuracy: f64, macro_f1: f64) -> f64 {
    M_ACCURACY_WEIGHT * accuracy + M_F1_WEIGHT * macro_f1
}

/// Builds the confusion matrix and the derived metrics.
pub fn compute_metrics(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<MetricReport, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::Metrics {
            reason: format!(
                "{} predictions against {} labels",
                predictions.len(),
                labels.len()
            ),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::Metrics {
            reason: "no samples to score".to_string(),
        });
    }
    if n_classes == 0 {
        return Err(EvalError::Metrics {
            reason: "need at least one class".to_string(),
        });
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(EvalError::Metrics {
                reason: format!("class {} out of range for {n_classes} classes", p.max(l)),
            });
        }
        confusion[l][p] += 1;
    }
    let n = predictions.len();
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / n as f64;

    let mut f1_sum = 0.0;
    for c in 0..n_classes {
        let tp = confusion[c][c];
        let fp: usize = (0..n_classes).map(|t| confusion[t][c]).sum::<usize>() - tp;
        let fn_: usize = confusion[c].iter().sum::<usize>() - tp;
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            f1_sum += 2.0 * tp as f64 / denom as f64;
        }
    }
    let macro_f1 = f1_sum / n_classes as f64;
    Ok(MetricReport {
        accuracy,
        macro_f1,
        m_score: m_score(accuracy, macro_f1),
        confusion,
        n_samples: n,
    })
}

/// Runs the model in eval mode over the given dataset rows with
/// deterministic sparse sampling and returns the predicted classes.
pub fn predict<T: Scalar>(
    model: &ArpgNet<T>,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<usize>, EvalError> {
    let t = model.config().t;
    let tape = model.tape();
    let mark = tape.mark();
    let mut out = Vec::with_capacity(indices.len());
    for &index in indices {
        let sample = dataset
            .samples()
            .get(index)
            .ok_or_else(|| EvalError::Setup {
                reason: format!("sample index {index} out of range"),
            })?;
        let frames = sample_sparse_test(sample.n_frames, t)?;
        let input = dataset.read_clip(tape, index, &frames)?;
        let (logits, _) = model.forward(&input, &mut Mode::Eval)?;
        out.push(argmax(&logits.value()));
        tape.reset_to(mark);
    }
    Ok(out)
}

fn labels_of(dataset: &Dataset, indices: &[usize]) -> Vec<usize> {
    indices.iter().map(|&i| dataset.samples()[i].label).collect()
}

/// Scores the model on the given rows.
pub fn evaluate<T: Scalar>(
    model: &ArpgNet<T>,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<MetricReport, EvalError> {
    let predictions = predict(model, dataset, indices)?;
    compute_metrics(&predictions, &labels_of(dataset, indices), dataset.n_classes())
}

/// One cross-validation fold: the held-out subjects and the training
/// subjects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub held_out: Vec<String>,
    pub train: Vec<String>,
}

/// One fold per subject, in sorted subject order regardless of the input
/// order.
pub fn leave_one_subject_out_plan(subjects: &[String]) -> Vec<FoldPlan> {
    let mut sorted: Vec<String> = subjects.to_vec();
    sorted.sort();
    sorted.dedup();
    sorted
        .iter()
        .map(|held| FoldPlan {
            held_out: vec![held.clone()],
            train: sorted.iter().filter(|s| *s != held).cloned().collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub held_out: String,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: MetricReport,
}

/// Mean and population standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
    pub mean_m_score: f64,
    pub std_m_score: f64,
}

impl LosoReport {
    /// One row per fold plus a mean and std row.
    pub fn to_csv(&self) -> String {
        let mut csv = String::from("fold,held_out,n_train,n_test,accuracy,macro_f1,m_score\n");
        for (i, fold) in self.folds.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{i},{},{},{},{},{},{}",
                fold.held_out,
                fold.n_train,
                fold.n_test,
                fold.metrics.accuracy,
                fold.metrics.macro_f1,
                fold.metrics.m_score
            );
        }
        let _ = writeln!(
            csv,
            "mean,,,,{},{},{}",
            self.mean_accuracy, self.mean_macro_f1, self.mean_m_score
        );
        let _ = writeln!(
            csv,
            "std,,,,{},{},{}",
            self.std_accuracy, self.std_macro_f1, self.std_m_score
        );
        csv
    }
}

/// Leave-one-subject-out cross-validation: one freshly initialized model per
/// fold, trained on every other subject and scored on the held-out one. The
/// split is audited by sample id so a held-out sample can never leak into
/// training.
pub fn loso_run<T: Scalar>(
    dataset: &Dataset,
    model_cfg: &ArpgNetConfig,
    train_cfg: &TrainConfig,
) -> Result<LosoReport, EvalError> {
    let subjects = dataset.subjects();
    if subjects.len() < 2 {
        return Err(EvalError::Setup {
            reason: format!(
                "leave-one-subject-out needs at least 2 subjects, got {}",
                subjects.len()
            ),
        });
    }
    let plans = leave_one_subject_out_plan(&subjects);
    let mut folds = Vec::with_capacity(plans.len());
    for (fold_index, plan) in plans.iter().enumerate() {
        let held = &plan.held_out[0];
        let mut train_indices = Vec::new();
        let mut test_indices = Vec::new();
        for (i, sample) in dataset.samples().iter().enumerate() {
            if sample.subject == *held {
                test_indices.push(i);
            } else {
                train_indices.push(i);
            }
        }
        audit_split(dataset, &train_indices, &test_indices, held)?;

        let tape: Tape<T> = Tape::new();
        let mut init_rng =
            ChaCha8Rng::seed_from_u64(train_cfg.seed ^ (fold_index as u64).wrapping_mul(0x9e37));
        let model = ArpgNet::new(model_cfg.clone(), &tape, &mut init_rng)?;
        let mut fold_cfg = train_cfg.clone();
        fold_cfg.log_dir = train_cfg
            .log_dir
            .as_ref()
            .map(|dir| dir.join(format!("fold_{held}")));
        fit(&model, dataset, &train_indices, &fold_cfg)?;
        let metrics = evaluate(&model, dataset, &test_indices)?;
        folds.push(FoldReport {
            held_out: held.clone(),
            n_train: train_indices.len(),
            n_test: test_indices.len(),
            metrics,
        });
    }
    let accs: Vec<f64> = folds.iter().map(|f| f.metrics.accuracy).collect();
    let f1s: Vec<f64> = folds.iter().map(|f| f.metrics.macro_f1).collect();
    let ms: Vec<f64> = folds.iter().map(|f| f.metrics.m_score).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let (mean_macro_f1, std_macro_f1) = mean_std(&f1s);
    let (mean_m_score, std_m_score) = mean_std(&ms);
    Ok(LosoReport {
        folds,
        mean_accuracy,
        std_accuracy,
        mean_macro_f1,
        std_macro_f1,
        mean_m_score,
        std_m_score,
    })
}

/// Confirms by sample id that no training sample belongs to the held-out
/// subject and that the fold covers the whole dataset exactly once.
fn audit_split(
    dataset: &Dataset,
    train_indices: &[usize],
    test_indices: &[usize],
    held_out: &str,
) -> Result<(), EvalError> {
    if train_indices.is_empty() || test_indices.is_empty() {
        return Err(EvalError::Audit {
            reason: format!("fold for {held_out} has an empty side"),
        });
    }
    let mut seen = vec![false; dataset.len()];
    for &i in train_indices {
        let sample = &dataset.samples()[i];
        if sample.subject == held_out {
            return Err(EvalError::Audit {
                reason: format!(
                    "sample {} of held-out subject {held_out} appears in training",
                    sample.id
                ),
            });
        }
        seen[i] = true;
    }
    for &i in test_indices {
        let sample = &dataset.samples()[i];
        if sample.subject != held_out {
            return Err(EvalError::Audit {
                reason: format!(
                    "test sample {} belongs to {} rather than {held_out}",
                    sample.id, sample.subject
                ),
            });
        }
        if seen[i] {
            return Err(EvalError::Audit {
                reason: format!("sample {} appears in both sides", sample.id),
            });
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(EvalError::Audit {
            reason: format!("fold for {held_out} does not cover every sample"),
        });
    }
    Ok(())
}

/// Deterministic per-class split: roughly `test_fraction` of each class goes
/// to the test side.
pub fn stratified_split(
    dataset: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(EvalError::Setup {
            reason: format!("test fraction {test_fraction} is outside (0, 1)"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5711);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..dataset.n_classes() {
        let mut members: Vec<usize> = dataset
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64) * test_fraction).round() as usize;
        // Keep at least one sample on each side of any class with two or more;
        // a singleton class stays in the training side.
        let n_test = n_test.clamp(usize::from(members.len() > 1), members.len().saturating_sub(1));
        test.extend(&members[..n_test]);
        train.extend(&members[n_test..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::Setup {
            reason: "the split left one side empty".to_string(),
        });
    }
    train.sort();
    test.sort();
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// One row per variant, in the canonical variant order.
    pub fn to_csv(&self) -> String {
        let mut csv = String::from("variant,accuracy,macro_f1,m_score\n");
        for row in &self.rows {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                row.variant, row.metrics.accuracy, row.metrics.macro_f1, row.metrics.m_score
            );
        }
        csv
    }

    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant.name())
    }
}

/// Trains every variant on the same split with the same seeds and scores
/// them on the shared test side. Because the data order and frame draws come
/// from a stream independent of the model, every variant sees identical
/// sampled frames.
pub fn ablation_run<T: Scalar>(
    dataset: &Dataset,
    base_cfg: &ArpgNetConfig,
    train_cfg: &TrainConfig,
    train_indices: &[usize],
    test_indices: &[usize],
) -> Result<AblationReport, EvalError> {
    let mut rows = Vec::new();
    for variant in Variant::all() {
        let mut cfg = base_cfg.clone();
        cfg.variant = variant;
        let tape: Tape<T> = Tape::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0xab1a);
        let model = ArpgNet::new(cfg, &tape, &mut init_rng)?;
        let mut variant_cfg = train_cfg.clone();
        variant_cfg.log_dir = train_cfg
            .log_dir
            .as_ref()
            .map(|dir| dir.join(variant.name()));
        fit(&model, dataset, train_indices, &variant_cfg)?;
        let metrics = evaluate(&model, dataset, test_indices)?;
        rows.push(AblationRow {
            variant: variant.name().to_string(),
            metrics,
        });
    }
    Ok(AblationReport { rows })
}

/// Everything `dump_attention` extracts from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    /// `head,layer,src,dst,beta` rows for the fusion graph.
    pub fusion_csv: String,
    /// `frame,head,layer,src,dst,beta` rows for the per-frame relation
    /// graphs.
    pub relation_csv: String,
    /// `node,frame,score` rows over the fusion graph: for each node, the
    /// summed attention on edges leaving it, over all heads and layers.
    /// Nodes below `t` are the appearance row; the rest are the relation row.
    pub temporal_profile_csv: String,
    /// `node,frame,score` rows over the per-frame relation graphs, same
    /// outgoing-edge convention.
    pub spatial_profile_csv: String,
    pub fusion_records: usize,
    pub relation_records: usize,
}

impl AttentionDump {
    /// Writes the four CSV files into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("fusion_attention.csv"), &self.fusion_csv)?;
        std::fs::write(dir.join("relation_attention.csv"), &self.relation_csv)?;
        std::fs::write(dir.join("temporal_profile.csv"), &self.temporal_profile_csv)?;
        std::fs::write(dir.join("spatial_profile.csv"), &self.spatial_profile_csv)?;
        Ok(())
    }
}

fn render_dump(trace: &AttentionTrace, t: usize) -> AttentionDump {
    let mut fusion_csv = String::from("head,layer,src,dst,beta\n");
    let mut fusion_records = 0usize;
    let mut temporal: Vec<f64> = vec![0.0; 2 * t];
    for (layer, records) in trace.fusion.iter().enumerate() {
        for r in records {
            let _ = writeln!(fusion_csv, "{},{layer},{},{},{}", r.head, r.src, r.dst, r.beta);
            temporal[r.src] += r.beta;
            fusion_records += 1;
        }
    }

    let mut relation_csv = String::from("frame,head,layer,src,dst,beta\n");
    let mut relation_records = 0usize;
    let mut spatial: Vec<Vec<f64>> = Vec::new();
    for (frame, layers) in trace.relation.iter().enumerate() {
        let mut per_node: Vec<f64> = Vec::new();
        for (layer, records) in layers.iter().enumerate() {
            for r in records {
                let _ = writeln!(
                    relation_csv,
                    "{frame},{},{layer},{},{},{}",
                    r.head, r.src, r.dst, r.beta
                );
                if per_node.len() <= r.src {
                    per_node.resize(r.src + 1, 0.0);
                }
                per_node[r.src] += r.beta;
                relation_records += 1;
            }
        }
        spatial.push(per_node);
    }

    let mut temporal_profile_csv = String::from("node,frame,score\n");
    if !trace.fusion.is_empty() {
        for (node, score) in temporal.iter().enumerate() {
            let _ = writeln!(temporal_profile_csv, "{node},{},{score}", node % t);
        }
    }
    let mut spatial_profile_csv = String::from("node,frame,score\n");
    for (frame, per_node) in spatial.iter().enumerate() {
        for (node, score) in per_node.iter().enumerate() {
            let _ = writeln!(spatial_profile_csv, "{node},{frame},{score}");
        }
    }
    AttentionDump {
        fusion_csv,
        relation_csv,
        temporal_profile_csv,
        spatial_profile_csv,
        fusion_records,
        relation_records,
    }
}

/// Runs one eval-mode forward pass over a dataset sample and renders every
/// attention record plus the temporal and spatial profiles.
pub fn dump_attention<T: Scalar>(
    model: &ArpgNet<T>,
    dataset: &Dataset,
    sample_index: usize,
) -> Result<AttentionDump, EvalError> {
    let sample = dataset
        .samples()
        .get(sample_index)
        .ok_or_else(|| EvalError::Setup {
            reason: format!("sample index {sample_index} out of range"),
        })?;
    let tape = model.tape();
    let mark = tape.mark();
    let frames = sample_sparse_test(sample.n_frames, model.config().t)?;
    let input = dataset.read_clip(tape, sample_index, &frames)?;
    let (_, trace) = model.forward(&input, &mut Mode::Eval)?;
    tape.reset_to(mark);
    Ok(render_dump(&trace, model.config().t))
}

/// Timing for one model on synthetic input of its configured shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub warmup_runs: usize,
    /// Wall-clock seconds of each timed run.
    pub run_seconds: Vec<f64>,
    pub mean_seconds: f64,
    pub relation_edges: usize,
    pub fusion_edges: usize,
    pub t: usize,
    pub n_params: usize,
}

/// Builds a random input matching the model's configured shape.
fn random_input<T: Scalar, R: Rng + ?Sized>(
    model: &ArpgNet<T>,
    rng: &mut R,
) -> Result<ModelInput<T>, EvalError> {
    let cfg = model.config();
    let tape = model.tape();
    let draw = |tape: &Tape<T>, shape: &[usize], rng: &mut R| {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::standard_normal(rng)).collect();
        tape.constant(shape, &data)
    };
    match cfg.backbone {
        Backbone::Toy => Ok(ModelInput::Frames(draw(
            tape,
            &[cfg.t, cfg.input_channels, cfg.input_height, cfg.input_width],
            rng,
        )?)),
        Backbone::ExternalFeatures { .. } => {
            let appearance = if cfg.variant.uses_appearance() {
                Some(draw(tape, &[cfg.t, cfg.c_prime], rng)?)
            } else {
                None
            };
            let relation = if cfg.variant.uses_relation() {
                Some(match cfg.relation_map_channels() {
                    Some(channels) => RelationFeatures::Maps(draw(
                        tape,
                        &[cfg.t, channels, EXTERNAL_MAP_SIDE, EXTERNAL_MAP_SIDE],
                        rng,
                    )?),
                    None => RelationFeatures::Sequence(draw(tape, &[cfg.t, cfg.c_prime], rng)?),
                })
            } else {
                None
            };
            Ok(ModelInput::Features {
                appearance,
                relation,
            })
        }
    }
}

/// One warmup pass followed by exactly `repeats` timed eval-mode passes on
/// the same input, single-threaded, monotonic wall clock.
pub fn bench_inference<T: Scalar>(
    model: &ArpgNet<T>,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport, EvalError> {
    if repeats == 0 {
        return Err(EvalError::Setup {
            reason: "need at least one timed run".to_string(),
        });
    }
    let tape = model.tape();
    let mark = tape.mark();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_input(model, &mut rng)?;

    model.forward(&input, &mut Mode::Eval)?;
    tape.reset_to(mark);

    let mut run_seconds = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let input = random_input(model, &mut rng)?;
        let start = Instant::now();
        model.forward(&input, &mut Mode::Eval)?;
        run_seconds.push(start.elapsed().as_secs_f64());
        tape.reset_to(mark);
    }
    let mean_seconds = run_seconds.iter().sum::<f64>() / repeats as f64;
    Ok(BenchReport {
        warmup_runs: 1,
        run_seconds,
        mean_seconds,
        relation_edges: model.relation_adjacency().map_or(0, |a| a.true_entries()),
        fusion_edges: model.fusion_adjacency().map_or(0, |a| a.true_entries()),
        t: model.config().t,
        n_params: model.named_params().iter().map(|(_, p)| p.numel()).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synth, SynthMode, SynthTaskConfig};
    use crate::training::AdamConfig;
    use tempfile::TempDir;

    #[test]
    fn the_combined_metric_weights_are_fixed() {
        assert!((m_score(1.0, 1.0) - 1.0).abs() < 1e-12);
        assert!((m_score(1.0, 0.0) - 0.33).abs() < 1e-12);
        assert!((m_score(0.6, 0.5) - 0.533).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let labels = vec![0, 1, 2, 1, 0, 2];
        let report = compute_metrics(&labels, &labels, 3).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        assert!((report.m_score - 1.0).abs() < 1e-12);
        assert_eq!(report.n_samples, 6);
        let trace: usize = (0..3).map(|c| report.confusion[c][c]).sum();
        assert_eq!(trace, 6);
    }

    /// Per-class precision/recall computed straight from the label and
    /// prediction vectors, bypassing the confusion matrix.
    fn brute_force(predictions: &[usize], labels: &[usize], n_classes: usize) -> (f64, f64) {
        let n = labels.len() as f64;
        let correct = predictions
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count() as f64;
        let mut f1_sum = 0.0;
        for c in 0..n_classes {
            let tp = predictions
                .iter()
                .zip(labels)
                .filter(|(p, l)| **p == c && **l == c)
                .count() as f64;
            let pred_c = predictions.iter().filter(|p| **p == c).count() as f64;
            let true_c = labels.iter().filter(|l| **l == c).count() as f64;
            if pred_c + true_c > 0.0 && tp > 0.0 {
                let precision = tp / pred_c;
                let recall = tp / true_c;
                f1_sum += 2.0 * precision * recall / (precision + recall);
            }
        }
        (correct / n, f1_sum / n_classes as f64)
    }

    #[test]
    fn metrics_agree_with_brute_force_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..1000 {
            let n_classes = 2 + (rng.gen::<u32>() % 7) as usize;
            let n = 1 + (rng.gen::<u32>() % 50) as usize;
            let labels: Vec<usize> =
                (0..n).map(|_| (rng.gen::<u32>() as usize) % n_classes).collect();
            let predictions: Vec<usize> =
                (0..n).map(|_| (rng.gen::<u32>() as usize) % n_classes).collect();
            let report = compute_metrics(&predictions, &labels, n_classes).unwrap();
            let (acc, f1) = brute_force(&predictions, &labels, n_classes);
            assert!((report.accuracy - acc).abs() < 1e-9);
            assert!((report.macro_f1 - f1).abs() < 1e-9);
            assert!(
                (report.m_score - m_score(report.accuracy, report.macro_f1)).abs() < 1e-9
            );
            let total: usize = report.confusion.iter().flatten().sum();
            assert_eq!(total, n);
        }
    }

    #[test]
    fn metric_arguments_are_validated() {
        assert!(matches!(
            compute_metrics(&[0, 1], &[0], 2),
            Err(EvalError::Metrics { .. })
        ));
        assert!(matches!(
            compute_metrics(&[], &[], 2),
            Err(EvalError::Metrics { .. })
        ));
        assert!(matches!(
            compute_metrics(&[2], &[0], 2),
            Err(EvalError::Metrics { .. })
        ));
    }

    #[test]
    fn fold_plans_are_deterministic_and_order_independent() {
        let forward = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let shuffled = vec!["c".to_string(), "a".to_string(), "b".to_string()];
        let plan_a = leave_one_subject_out_plan(&forward);
        let plan_b = leave_one_subject_out_plan(&shuffled);
        assert_eq!(plan_a, plan_b);
        assert_eq!(plan_a.len(), 3);
        for (i, fold) in plan_a.iter().enumerate() {
            assert_eq!(fold.held_out.len(), 1);
            assert_eq!(fold.train.len(), 2);
            assert!(!fold.train.contains(&fold.held_out[0]));
            assert_eq!(fold.held_out[0], forward[i]);
        }
    }

    fn separable_task() -> SynthTaskConfig {
        SynthTaskConfig {
            n_classes: 2,
            samples_per_class: 6,
            n_subjects: 2,
            frames_per_sample: 8,
            noise_sigma: 0.05,
            appearance_hint: 0.6,
            decoys_per_sample: 1,
            decoy_margin: 1,
            ..SynthTaskConfig::default()
        }
    }

    fn small_model_cfg() -> ArpgNetConfig {
        ArpgNetConfig {
            t: 8,
            c_prime: 16,
            p: 3,
            trs: 2,
            heads: 2,
            relation_gat_layers: 1,
            fusion_gat_layers: 1,
            n_classes: 2,
            dropout: 0.0,
            backbone: Backbone::ExternalFeatures {
                relation_map_channels: None,
            },
            variant: Variant::FusionTrs,
            ..ArpgNetConfig::default()
        }
    }

    fn separable_maps_task() -> SynthTaskConfig {
        SynthTaskConfig {
            mode: SynthMode::Features {
                c_prime: 16,
                relation_map_channels: Some(4),
            },
            ..separable_task()
        }
    }

    fn maps_model_cfg() -> ArpgNetConfig {
        ArpgNetConfig {
            backbone: Backbone::ExternalFeatures {
                relation_map_channels: Some(4),
            },
            ..small_model_cfg()
        }
    }

    fn quick_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 12,
            batch_size: 4,
            seed: 2,
            gamma: 0.0,
            adam: AdamConfig {
                lr_other: 5e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loso_holds_out_each_subject_and_scores_separable_data_well() {
        let dir = TempDir::new().unwrap();
        let dataset = generate_synth(&separable_task(), 51, dir.path()).unwrap();
        let report =
            loso_run::<f32>(&dataset, &small_model_cfg(), &quick_train_cfg()).unwrap();
        assert_eq!(report.folds.len(), 2);
        for fold in &report.folds {
            assert_eq!(fold.n_train + fold.n_test, dataset.len());
            assert!(fold.n_test > 0);
        }
        assert!(
            report.mean_accuracy >= 0.75,
            "mean accuracy {}",
            report.mean_accuracy
        );
        let csv = report.to_csv();
        assert!(csv.starts_with("fold,held_out,n_train,n_test,accuracy,macro_f1,m_score\n"));
        assert_eq!(csv.lines().count(), 1 + 2 + 2);
    }

    #[test]
    fn loso_requires_at_least_two_subjects() {
        let dir = TempDir::new().unwrap();
        let cfg = SynthTaskConfig {
            n_subjects: 1,
            ..separable_task()
        };
        let dataset = generate_synth(&cfg, 52, dir.path()).unwrap();
        assert!(matches!(
            loso_run::<f32>(&dataset, &small_model_cfg(), &quick_train_cfg()),
            Err(EvalError::Setup { .. })
        ));
    }

    #[test]
    fn the_split_audit_rejects_leaks_and_gaps() {
        let dir = TempDir::new().unwrap();
        let dataset = generate_synth(&separable_task(), 53, dir.path()).unwrap();
        let held = dataset.samples()[0].subject.clone();
        let (mut train, mut test): (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());
        for (i, s) in dataset.samples().iter().enumerate() {
            if s.subject == held {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        audit_split(&dataset, &train, &test, &held).unwrap();

        let mut leaky = train.clone();
        leaky.push(test[0]);
        assert!(matches!(
            audit_split(&dataset, &leaky, &test, &held),
            Err(EvalError::Audit { .. })
        ));
        assert!(matches!(
            audit_split(&dataset, &train, &test[1..], &held),
            Err(EvalError::Audit { .. })
        ));
        assert!(matches!(
            audit_split(&dataset, &train, &train, &held),
            Err(EvalError::Audit { .. })
        ));
    }

    #[test]
    fn stratified_splits_are_deterministic_and_cover_each_class() {
        let dir = TempDir::new().unwrap();
        let dataset = generate_synth(&separable_task(), 54, dir.path()).unwrap();
        let (train_a, test_a) = stratified_split(&dataset, 0.25, 7).unwrap();
        let (train_b, test_b) = stratified_split(&dataset, 0.25, 7).unwrap();
        assert_eq!(train_a, train_b);
        assert_eq!(test_a, test_b);
        assert_eq!(train_a.len() + test_a.len(), dataset.len());
        let mut all: Vec<usize> = train_a.iter().chain(&test_a).copied().collect();
        all.sort();
        assert_eq!(all, (0..dataset.len()).collect::<Vec<_>>());
        for class in 0..dataset.n_classes() {
            assert!(test_a
                .iter()
                .any(|&i| dataset.samples()[i].label == class));
        }
        assert!(stratified_split(&dataset, 0.0, 7).is_err());
        assert!(stratified_split(&dataset, 1.0, 7).is_err());
    }

    #[test]
    fn the_ablation_table_lists_every_variant_in_canonical_order() {
        let dir = TempDir::new().unwrap();
        let dataset = generate_synth(&separable_task(), 55, dir.path()).unwrap();
        let (train, test) = stratified_split(&dataset, 0.25, 7).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..quick_train_cfg()
        };
        let report =
            ablation_run::<f32>(&dataset, &small_model_cfg(), &cfg, &train, &test).unwrap();
        let names: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
        let expected: Vec<&str> = Variant::all().iter().map(|v| v.name()).collect();
        assert_eq!(names, expected);
        let csv = report.to_csv();
        assert!(csv.starts_with("variant,accuracy,macro_f1,m_score\n"));
        assert_eq!(csv.lines().count(), 1 + expected.len());
        for row in &report.rows {
            assert_eq!(row.metrics.n_samples, test.len());
            assert!((0.0..=1.0).contains(&row.metrics.accuracy));
        }
        assert!(report.row(Variant::FusionTrs).is_some());
    }

    #[test]
    fn attention_dumps_cover_every_edge_of_every_head_and_layer() {
        let dir = TempDir::new().unwrap();
        let dataset = generate_synth(&separable_maps_task(), 56, dir.path()).unwrap();
        let cfg = maps_model_cfg();
        let tape: Tape<f32> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let model = ArpgNet::new(cfg.clone(), &tape, &mut rng).unwrap();
        let dump = dump_attention(&model, &dataset, 0).unwrap();

        let fusion_edges = model.fusion_adjacency().unwrap().true_entries();
        let relation_edges = model.relation_adjacency().unwrap().true_entries();
        assert_eq!(
            dump.fusion_records,
            cfg.heads * cfg.fusion_gat_layers * fusion_edges
        );
        assert_eq!(
            dump.relation_records,
            cfg.t * cfg.heads * cfg.relation_gat_layers * relation_edges
        );
        assert_eq!(
            dump.fusion_csv.lines().count(),
            1 + dump.fusion_records
        );
        assert_eq!(
            dump.relation_csv.lines().count(),
            1 + dump.relation_records
        );
        assert!(dump.fusion_csv.starts_with("head,layer,src,dst,beta\n"));
        assert!(dump
            .relation_csv
            .starts_with("frame,head,layer,src,dst,beta\n"));
        assert_eq!(
            dump.temporal_profile_csv.lines().count(),
            1 + 2 * cfg.t
        );

        // Total outgoing attention equals one unit per destination node, per
        // head and layer.
        let total: f64 = dump
            .temporal_profile_csv
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .sum();
        let expected = (cfg.heads * cfg.fusion_gat_layers * 2 * cfg.t) as f64;
        assert!((total - expected).abs() < 1e-3, "mass {total} vs {expected}");

        let out = TempDir::new().unwrap();
        dump.write_to(out.path()).unwrap();
        for file in [
            "fusion_attention.csv",
            "relation_attention.csv",
            "temporal_profile.csv",
            "spatial_profile.csv",
        ] {
            assert!(out.path().join(file).is_file(), "{file} missing");
        }
    }

    #[test]
    fn zeroed_attention_vectors_give_uniform_neighbor_weights() {
        let dir = TempDir::new().unwrap();
        let dataset = generate_synth(&separable_task(), 58, dir.path()).unwrap();
        let cfg = small_model_cfg();
        let tape: Tape<f32> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let model = ArpgNet::new(cfg, &tape, &mut rng).unwrap();
        for (name, p) in model.named_params() {
            if name.ends_with(".att") {
                p.set_data(&vec![0.0; p.numel()]).unwrap();
            }
        }
        let dump = dump_attention(&model, &dataset, 1).unwrap();
        let adj = model.fusion_adjacency().unwrap();
        for line in dump.fusion_csv.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let dst: usize = fields[3].parse().unwrap();
            let beta: f64 = fields[4].parse().unwrap();
            let degree = adj.degree(dst).unwrap();
            assert!(
                (beta - 1.0 / degree as f64).abs() < 1e-6,
                "node {dst} with degree {degree} got beta {beta}"
            );
        }
    }

    #[test]
    fn bench_times_exactly_the_requested_runs() {
        let cfg = maps_model_cfg();
        let tape: Tape<f32> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let model = ArpgNet::new(cfg, &tape, &mut rng).unwrap();
        let report = bench_inference(&model, 3, 61).unwrap();
        assert_eq!(report.warmup_runs, 1);
        assert_eq!(report.run_seconds.len(), 3);
        assert!(report.run_seconds.iter().all(|s| *s > 0.0));
        let mean = report.run_seconds.iter().sum::<f64>() / 3.0;
        assert!((report.mean_seconds - mean).abs() < 1e-12);
        assert_eq!(
            report.fusion_edges,
            model.fusion_adjacency().unwrap().true_entries()
        );
        assert_eq!(
            report.relation_edges,
            model.relation_adjacency().unwrap().true_entries()
        );
        assert!(report.n_params > 0);
        assert!(bench_inference(&model, 0, 61).is_err());
    }

    #[test]
    fn doubling_t_widens_the_fusion_band() {
        let mut small = small_model_cfg();
        small.t = 8;
        let mut large = small_model_cfg();
        large.t = 16;
        let tape_a: Tape<f32> = Tape::new();
        let tape_b: Tape<f32> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let model_a = ArpgNet::new(small, &tape_a, &mut rng).unwrap();
        let model_b = ArpgNet::new(large, &tape_b, &mut rng).unwrap();
        let edges_a = bench_inference(&model_a, 1, 63).unwrap().fusion_edges;
        let edges_b = bench_inference(&model_b, 1, 63).unwrap().fusion_edges;
        assert!(edges_b > 2 * edges_a, "band growth: {edges_a} -> {edges_b}");
    }
}
