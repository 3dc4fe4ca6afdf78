//! The metric suite: counting error (MAE/MSE), VQA answer scoring (embedding
//! score and Wu-Palmer similarity), segmentation IoU reports, and the table
//! renderers.

mod report;
mod taxonomy;

pub use report::{
    render_report, seg_report, CountingSection, EvalReport, ReportFormat, SegReportRow,
    SegmentationSection, VqaSection,
};
pub use taxonomy::Taxonomy;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("input lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("inputs are empty")]
    EmptyInput,
    #[error("term {0:?} is not in the taxonomy")]
    UnknownTerm(String),
    #[error("vector dimensions differ: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("vector norm {norm} is not within 1e-6 of 1")]
    NotNormalized { norm: f64 },
    #[error("class sets differ: {0}")]
    ClassSetMismatch(String),
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("no ground truth for image {0}")]
    MissingGroundTruth(u64),
    #[error("embedding backend failed: {0}")]
    EmbedFailure(String),
}

/// Mean absolute error: `(1/n) * sum(|pred - gt|)`.
pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64, EvalError> {
    check_paired(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Mean squared error: `(1/n) * sum((pred - gt)^2)`.
pub fn mse(pred: &[f64], gt: &[f64]) -> Result<f64, EvalError> {
    check_paired(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok(sum / pred.len() as f64)
}

fn check_paired(pred: &[f64], gt: &[f64]) -> Result<(), EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            a: pred.len(),
            b: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

/// Embedding similarity on a 0-100 scale: `100 * max(cos(u, v), 0)`. Both
/// vectors must be unit length to within 1e-6.
pub fn embed_score(u: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::DimensionMismatch { a: u.len(), b: v.len() });
    }
    if u.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    for vector in [u, v] {
        let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(EvalError::NotNormalized { norm });
        }
    }
    let cos: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(100.0 * cos.max(0.0))
}

/// Unweighted mean over the per-class IoU column.
pub fn miou(per_class: &BTreeMap<String, f64>) -> Result<f64, EvalError> {
    if per_class.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// Mean per class across samples; a class only averages over the samples
/// where it appears.
pub fn aggregate_per_class_iou(samples: &[BTreeMap<String, f64>]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for sample in samples {
        for (class, &score) in sample {
            let entry = sums.entry(class.clone()).or_insert((0.0, 0));
            entry.0 += score;
            entry.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(class, (sum, n))| (class, sum / n as f64))
        .collect()
}

/// A model's object-count prediction for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountPrediction {
    pub image_id: u64,
    pub predicted_total: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_per_category: Option<BTreeMap<String, u64>>,
}

/// MAE/MSE of predicted totals against ground-truth totals, matched by image
/// id in ascending order.
pub fn evaluate_counting(
    preds: &[CountPrediction],
    gt: &BTreeMap<u64, u64>,
) -> Result<CountingSection, EvalError> {
    let mut sorted: Vec<&CountPrediction> = preds.iter().collect();
    sorted.sort_by_key(|p| p.image_id);
    let mut predicted = Vec::with_capacity(sorted.len());
    let mut actual = Vec::with_capacity(sorted.len());
    for pred in sorted {
        let Some(&truth) = gt.get(&pred.image_id) else {
            return Err(EvalError::MissingGroundTruth(pred.image_id));
        };
        predicted.push(pred.predicted_total as f64);
        actual.push(truth as f64);
    }
    Ok(CountingSection {
        mae: mae(&predicted, &actual)?,
        mse: mse(&predicted, &actual)?,
    })
}

/// A model's free-text answer paired with the reference answer and the visual
/// content it should be aligned with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerPair {
    pub image_id: u64,
    pub predicted: String,
    pub reference: String,
    /// Reference to the visual content (image or frame) the answer is about.
    pub visual_ref: String,
}

/// Supplies unit embeddings for the embedding-score half of VQA evaluation.
pub trait EmbedProvider {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EvalError>;
    fn embed_image(&self, image_ref: &str) -> Result<Vec<f64>, EvalError>;
}

/// Mean embedding score (answer vs. visual content) and mean Wu-Palmer
/// similarity (predicted vs. reference answer, unmatched answers scoring 0).
pub fn evaluate_vqa(
    pairs: &[AnswerPair],
    taxonomy: &Taxonomy,
    embedder: &dyn EmbedProvider,
) -> Result<VqaSection, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut embed_sum = 0.0;
    let mut wup_sum = 0.0;
    for pair in pairs {
        let answer_vec = embedder.embed_text(&pair.predicted)?;
        let visual_vec = embedder.embed_image(&pair.visual_ref)?;
        embed_sum += embed_score(&answer_vec, &visual_vec)?;

        let predicted_node = taxonomy.answer_to_node(&pair.predicted);
        let reference_node = taxonomy.answer_to_node(&pair.reference);
        wup_sum += match (predicted_node, reference_node) {
            (Some(p), Some(r)) => taxonomy.wup(p, r)?,
            _ => 0.0,
        };
    }
    let n = pairs.len() as f64;
    Ok(VqaSection {
        mean_embed_score: embed_sum / n,
        mean_wup: wup_sum / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mae_identity_is_zero() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn mae_hand_example() {
        assert_eq!(mae(&[3.0, 5.0], &[4.0, 7.0]).unwrap(), 1.5);
    }

    #[test]
    fn mae_single_element() {
        assert_eq!(mae(&[10.0], &[4.0]).unwrap(), 6.0);
    }

    #[test]
    fn mse_identity_is_zero() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn mse_hand_example() {
        assert_eq!(mse(&[3.0, 5.0], &[4.0, 7.0]).unwrap(), 2.5);
    }

    #[test]
    fn mse_single_element() {
        assert_eq!(mse(&[10.0], &[4.0]).unwrap(), 36.0);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(matches!(
            mae(&[1.0], &[1.0, 2.0]),
            Err(EvalError::LengthMismatch { a: 1, b: 2 })
        ));
        assert!(matches!(
            mse(&[1.0], &[1.0, 2.0]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(mae(&[], &[]), Err(EvalError::EmptyInput)));
        assert!(matches!(mse(&[], &[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn embed_score_identical_vectors() {
        let u = vec![1.0, 0.0, 0.0];
        assert_eq!(embed_score(&u, &u).unwrap(), 100.0);
    }

    #[test]
    fn embed_score_orthogonal_vectors() {
        assert_eq!(embed_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn embed_score_clamps_negative_cosine() {
        assert_eq!(embed_score(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn embed_score_rejects_unnormalized() {
        assert!(matches!(
            embed_score(&[2.0, 0.0], &[1.0, 0.0]),
            Err(EvalError::NotNormalized { .. })
        ));
    }

    #[test]
    fn embed_score_rejects_dimension_mismatch() {
        assert!(matches!(
            embed_score(&[1.0], &[1.0, 0.0]),
            Err(EvalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn evaluate_counting_matches_by_image_id() {
        let preds = vec![
            CountPrediction { image_id: 2, predicted_total: 5, predicted_per_category: None },
            CountPrediction { image_id: 1, predicted_total: 3, predicted_per_category: None },
        ];
        let gt = BTreeMap::from([(1, 4u64), (2, 7u64)]);
        let section = evaluate_counting(&preds, &gt).unwrap();
        assert_eq!(section.mae, 1.5);
        assert_eq!(section.mse, 2.5);
    }

    #[test]
    fn evaluate_counting_missing_ground_truth() {
        let preds = vec![CountPrediction {
            image_id: 9,
            predicted_total: 1,
            predicted_per_category: None,
        }];
        assert!(matches!(
            evaluate_counting(&preds, &BTreeMap::new()),
            Err(EvalError::MissingGroundTruth(9))
        ));
    }

    #[test]
    fn aggregate_per_class_iou_averages_where_present() {
        let samples = vec![
            BTreeMap::from([("dog".to_string(), 0.5), ("cat".to_string(), 1.0)]),
            BTreeMap::from([("dog".to_string(), 1.0)]),
        ];
        let agg = aggregate_per_class_iou(&samples);
        assert_eq!(agg["dog"], 0.75);
        assert_eq!(agg["cat"], 1.0);
    }

    struct TrivialEmbedder;

    impl EmbedProvider for TrivialEmbedder {
        fn embed_text(&self, text: &str) -> Result<Vec<f64>, EvalError> {
            Ok(if text.contains("dog") { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
        }

        fn embed_image(&self, _image_ref: &str) -> Result<Vec<f64>, EvalError> {
            Ok(vec![1.0, 0.0])
        }
    }

    #[test]
    fn evaluate_vqa_means() {
        let taxonomy = Taxonomy::from_edges([
            ("animal".to_string(), "entity".to_string()),
            ("dog".to_string(), "animal".to_string()),
            ("cat".to_string(), "animal".to_string()),
        ])
        .unwrap();
        let pairs = vec![
            AnswerPair {
                image_id: 1,
                predicted: "a dog".to_string(),
                reference: "dog".to_string(),
                visual_ref: "img1".to_string(),
            },
            AnswerPair {
                image_id: 2,
                predicted: "seventeen".to_string(),
                reference: "cat".to_string(),
                visual_ref: "img2".to_string(),
            },
        ];
        let section = evaluate_vqa(&pairs, &taxonomy, &TrivialEmbedder).unwrap();
        // Embed: 100 (dog answer aligns) and 0 (orthogonal); wup: 1.0 and 0 (no match).
        assert_eq!(section.mean_embed_score, 50.0);
        assert_eq!(section.mean_wup, 0.5);
    }

    fn paired_vectors() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..32).prop_flat_map(|n| {
            let values = || proptest::collection::vec(-100i32..100, n);
            (values(), values()).prop_map(|(a, b)| {
                (
                    a.into_iter().map(f64::from).collect(),
                    b.into_iter().map(f64::from).collect(),
                )
            })
        })
    }

    proptest! {
        #[test]
        fn mse_zero_iff_equal((pred, gt) in paired_vectors()) {
            let value = mse(&pred, &gt).unwrap();
            prop_assert!(value >= 0.0);
            prop_assert_eq!(value == 0.0, pred == gt);
        }
    }
}
