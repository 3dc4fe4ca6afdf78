//! Binary masks, the COCO-compatible run-length codec, IoU, and temporal
//! track consistency checks.
//!
//! Runs are stored column-major (pixel `(x, y)` sits at flat index
//! `y + height * x`), alternating background then foreground and always
//! starting with the background run, which may have length zero. This matches
//! the COCO uncompressed RLE convention, so masks serialized here load in
//! existing COCO tooling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MaskError {
    #[error("mask dimensions differ: {a_width}x{a_height} vs {b_width}x{b_height}")]
    DimensionMismatch {
        a_width: u32,
        a_height: u32,
        b_width: u32,
        b_height: u32,
    },
    #[error("run lengths sum to {got}, expected width*height = {expected}")]
    LengthMismatch { expected: u64, got: u64 },
    #[error("run length at index {index} is zero; only the leading background run may be zero")]
    NonCanonical { index: usize },
    #[error("mask track has no frames")]
    EmptyTrack,
}

/// A dense bit grid. Bits are packed into 64-bit words in column-major order
/// so area and IoU reduce to popcounts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl BinaryMask {
    /// An all-background mask. Dimensions must be non-zero.
    pub fn new(width: u32, height: u32) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be non-zero");
        let bits = width as usize * height as usize;
        BinaryMask {
            width,
            height,
            words: vec![0; bits.div_ceil(64)],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    fn bit_index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y as usize + self.height as usize * x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        let idx = self.bit_index(x, y);
        self.words[idx / 64] >> (idx % 64) & 1 == 1
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let idx = self.bit_index(x, y);
        if value {
            self.words[idx / 64] |= 1 << (idx % 64);
        } else {
            self.words[idx / 64] &= !(1 << (idx % 64));
        }
    }

    /// Set a rectangle to foreground, clamped to the mask bounds.
    pub fn fill_rect(&mut self, x: u32, y: u32, w: u32, h: u32) {
        let x_end = (x.saturating_add(w)).min(self.width);
        let y_end = (y.saturating_add(h)).min(self.height);
        for cx in x.min(self.width)..x_end {
            for cy in y.min(self.height)..y_end {
                self.set(cx, cy, true);
            }
        }
    }

    /// Foreground pixel count.
    pub fn area(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|w| *w == 0)
    }

    fn same_dims(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.width != other.width || self.height != other.height {
            return Err(MaskError::DimensionMismatch {
                a_width: self.width,
                a_height: self.height,
                b_width: other.width,
                b_height: other.height,
            });
        }
        Ok(())
    }
}

/// Run-length encoded mask in canonical form: runs alternate background /
/// foreground starting with background, only the leading run may be zero,
/// and the runs cover the grid exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RleRepr", into = "RleRepr")]
pub struct RleMask {
    width: u32,
    height: u32,
    counts: Vec<u32>,
}

/// COCO uncompressed RLE field layout: `{"size": [height, width], "counts": [...]}`.
#[derive(Serialize, Deserialize)]
struct RleRepr {
    size: [u32; 2],
    counts: Vec<u32>,
}

impl TryFrom<RleRepr> for RleMask {
    type Error = MaskError;

    fn try_from(repr: RleRepr) -> Result<Self, MaskError> {
        RleMask::new(repr.size[1], repr.size[0], repr.counts)
    }
}

impl From<RleMask> for RleRepr {
    fn from(rle: RleMask) -> RleRepr {
        RleRepr {
            size: [rle.height, rle.width],
            counts: rle.counts,
        }
    }
}

impl RleMask {
    pub fn new(width: u32, height: u32, counts: Vec<u32>) -> Result<Self, MaskError> {
        for (index, &count) in counts.iter().enumerate() {
            if count == 0 && index != 0 {
                return Err(MaskError::NonCanonical { index });
            }
        }
        let expected = width as u64 * height as u64;
        let got: u64 = counts.iter().map(|&c| c as u64).sum();
        if got != expected {
            return Err(MaskError::LengthMismatch { expected, got });
        }
        Ok(RleMask {
            width,
            height,
            counts,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Foreground area: the sum of the odd-indexed (foreground) runs.
    pub fn area(&self) -> u64 {
        self.counts
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 2 == 1)
            .map(|(_, &c)| c as u64)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }
}

/// Encode a mask as canonical column-major RLE.
pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let mut counts: Vec<u32> = Vec::new();
    let mut current = false;
    let mut run: u32 = 0;
    for x in 0..mask.width() {
        for y in 0..mask.height() {
            let bit = mask.get(x, y);
            if bit == current {
                run += 1;
            } else {
                counts.push(run);
                current = bit;
                run = 1;
            }
        }
    }
    counts.push(run);
    RleMask {
        width: mask.width(),
        height: mask.height(),
        counts,
    }
}

/// Exact inverse of [`rle_encode`]. The run-sum invariant is enforced when an
/// [`RleMask`] is constructed, so decoding cannot fail.
pub fn rle_decode(rle: &RleMask) -> BinaryMask {
    let mut mask = BinaryMask::new(rle.width, rle.height);
    let height = rle.height as usize;
    let mut idx: usize = 0;
    let mut value = false;
    for &count in &rle.counts {
        if value {
            for flat in idx..idx + count as usize {
                mask.set((flat / height) as u32, (flat % height) as u32, true);
            }
        }
        idx += count as usize;
        value = !value;
    }
    mask
}

/// Intersection over union. Both masks empty scores 1.0: two annotators who
/// both marked "nothing here" are in perfect agreement.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    a.same_dims(b)?;
    let mut intersection: u64 = 0;
    let mut union: u64 = 0;
    for (wa, wb) in a.words.iter().zip(&b.words) {
        intersection += (wa & wb).count_ones() as u64;
        union += (wa | wb).count_ones() as u64;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(intersection as f64 / union as f64)
}

/// IoU for every class present in the ground truth. Classes the prediction
/// is missing score 0.0; prediction-only classes are ignored.
pub fn per_class_iou(
    pred: &BTreeMap<String, BinaryMask>,
    gt: &BTreeMap<String, BinaryMask>,
) -> Result<BTreeMap<String, f64>, MaskError> {
    let mut out = BTreeMap::new();
    for (class, gt_mask) in gt {
        let score = match pred.get(class) {
            Some(pred_mask) => iou(pred_mask, gt_mask)?,
            None => 0.0,
        };
        out.insert(class.clone(), score);
    }
    Ok(out)
}

/// One object's mask propagated across every frame of a video. All frames
/// share dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MaskTrackRepr", into = "MaskTrackRepr")]
pub struct MaskTrack {
    object_id: u64,
    category: String,
    frames: Vec<RleMask>,
}

#[derive(Serialize, Deserialize)]
struct MaskTrackRepr {
    object_id: u64,
    category: String,
    frames: Vec<RleMask>,
}

impl TryFrom<MaskTrackRepr> for MaskTrack {
    type Error = MaskError;

    fn try_from(repr: MaskTrackRepr) -> Result<Self, MaskError> {
        MaskTrack::new(repr.object_id, repr.category, repr.frames)
    }
}

impl From<MaskTrack> for MaskTrackRepr {
    fn from(track: MaskTrack) -> MaskTrackRepr {
        MaskTrackRepr {
            object_id: track.object_id,
            category: track.category,
            frames: track.frames,
        }
    }
}

impl MaskTrack {
    pub fn new(object_id: u64, category: String, frames: Vec<RleMask>) -> Result<Self, MaskError> {
        if let Some(first) = frames.first() {
            for frame in &frames[1..] {
                if frame.width() != first.width() || frame.height() != first.height() {
                    return Err(MaskError::DimensionMismatch {
                        a_width: first.width(),
                        a_height: first.height(),
                        b_width: frame.width(),
                        b_height: frame.height(),
                    });
                }
            }
        }
        Ok(MaskTrack {
            object_id,
            category,
            frames,
        })
    }

    pub fn object_id(&self) -> u64 {
        self.object_id
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn frames(&self) -> &[RleMask] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Temporal consistency summary for one track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackDiagnostics {
    pub object_id: u64,
    /// Max over consecutive frame pairs of `|a(t+1) - a(t)| / max(a(t), 1)`.
    pub max_area_change_ratio: f64,
    pub empty_frame_indices: Vec<usize>,
}

pub fn track_diagnostics(track: &MaskTrack) -> Result<TrackDiagnostics, MaskError> {
    if track.frames.is_empty() {
        return Err(MaskError::EmptyTrack);
    }
    let areas: Vec<u64> = track.frames.iter().map(RleMask::area).collect();
    let max_area_change_ratio = areas
        .windows(2)
        .map(|pair| pair[0].abs_diff(pair[1]) as f64 / pair[0].max(1) as f64)
        .fold(0.0, f64::max);
    let empty_frame_indices = areas
        .iter()
        .enumerate()
        .filter(|(_, &a)| a == 0)
        .map(|(i, _)| i)
        .collect();
    Ok(TrackDiagnostics {
        object_id: track.object_id,
        max_area_change_ratio,
        empty_frame_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from_column_major_bits(width: u32, height: u32, bits: &[u8]) -> BinaryMask {
        assert_eq!(bits.len() as u64, width as u64 * height as u64);
        let mut mask = BinaryMask::new(width, height);
        for (flat, &bit) in bits.iter().enumerate() {
            if bit != 0 {
                mask.set(flat as u32 / height, flat as u32 % height, true);
            }
        }
        mask
    }

    #[test]
    fn encode_all_background() {
        let mask = BinaryMask::new(2, 2);
        assert_eq!(rle_encode(&mask).counts(), &[4]);
    }

    #[test]
    fn encode_all_foreground() {
        let mut mask = BinaryMask::new(2, 2);
        mask.fill_rect(0, 0, 2, 2);
        assert_eq!(rle_encode(&mask).counts(), &[0, 4]);
    }

    #[test]
    fn encode_mixed_runs() {
        // Column-major bit sequence 0,1,1,0 on a 2x2 grid.
        let mask = mask_from_column_major_bits(2, 2, &[0, 1, 1, 0]);
        assert_eq!(rle_encode(&mask).counts(), &[1, 2, 1]);
    }

    #[test]
    fn decode_all_background() {
        let rle = RleMask::new(2, 2, vec![4]).unwrap();
        let mask = rle_decode(&rle);
        assert!(mask.is_empty());
    }

    #[test]
    fn decode_mixed_runs() {
        let rle = RleMask::new(2, 2, vec![1, 2, 1]).unwrap();
        assert_eq!(rle_decode(&rle), mask_from_column_major_bits(2, 2, &[0, 1, 1, 0]));
    }

    #[test]
    fn short_run_sum_is_length_mismatch() {
        let err = RleMask::new(2, 2, vec![3]).unwrap_err();
        assert_eq!(err, MaskError::LengthMismatch { expected: 4, got: 3 });
    }

    #[test]
    fn interior_zero_is_rejected() {
        let err = RleMask::new(2, 2, vec![1, 0, 3]).unwrap_err();
        assert_eq!(err, MaskError::NonCanonical { index: 1 });
    }

    #[test]
    fn leading_zero_is_canonical() {
        assert!(RleMask::new(2, 2, vec![0, 4]).is_ok());
    }

    #[test]
    fn iou_identical_masks() {
        let mut mask = BinaryMask::new(3, 3);
        mask.fill_rect(0, 0, 2, 2);
        assert_eq!(iou(&mask, &mask).unwrap(), 1.0);
    }

    #[test]
    fn iou_disjoint_masks() {
        let mut a = BinaryMask::new(4, 4);
        a.fill_rect(0, 0, 2, 2);
        let mut b = BinaryMask::new(4, 4);
        b.fill_rect(2, 2, 2, 2);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_partial_overlap() {
        // A = {(0,0), (0,1)}, B = {(0,1), (1,1)}: intersection 1, union 3.
        let mut a = BinaryMask::new(2, 2);
        a.set(0, 0, true);
        a.set(0, 1, true);
        let mut b = BinaryMask::new(2, 2);
        b.set(0, 1, true);
        b.set(1, 1, true);
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn iou_both_empty_is_one() {
        let a = BinaryMask::new(5, 5);
        let b = BinaryMask::new(5, 5);
        assert_eq!(iou(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn iou_dimension_mismatch() {
        let a = BinaryMask::new(2, 2);
        let b = BinaryMask::new(3, 2);
        assert!(matches!(iou(&a, &b), Err(MaskError::DimensionMismatch { .. })));
    }

    #[test]
    fn per_class_iou_scores_missing_pred_as_zero() {
        let mut gt_mask = BinaryMask::new(2, 2);
        gt_mask.fill_rect(0, 0, 1, 1);
        let gt = BTreeMap::from([("dog".to_string(), gt_mask)]);
        let scores = per_class_iou(&BTreeMap::new(), &gt).unwrap();
        assert_eq!(scores, BTreeMap::from([("dog".to_string(), 0.0)]));
    }

    #[test]
    fn per_class_iou_two_class_fixture() {
        let mut a_pred = BinaryMask::new(2, 2);
        a_pred.set(0, 0, true);
        a_pred.set(0, 1, true);
        let mut a_gt = BinaryMask::new(2, 2);
        a_gt.set(0, 1, true);
        a_gt.set(1, 1, true);
        let mut b_mask = BinaryMask::new(2, 2);
        b_mask.fill_rect(0, 0, 2, 1);

        let pred = BTreeMap::from([
            ("a".to_string(), a_pred),
            ("b".to_string(), b_mask.clone()),
        ]);
        let gt = BTreeMap::from([("a".to_string(), a_gt), ("b".to_string(), b_mask)]);
        let scores = per_class_iou(&pred, &gt).unwrap();
        assert_eq!(scores["a"], 1.0 / 3.0);
        assert_eq!(scores["b"], 1.0);
    }

    fn rect_rle(width: u32, height: u32, x: u32, y: u32, w: u32, h: u32) -> RleMask {
        let mut mask = BinaryMask::new(width, height);
        mask.fill_rect(x, y, w, h);
        rle_encode(&mask)
    }

    #[test]
    fn track_diagnostics_constant_track() {
        let frame = rect_rle(8, 8, 1, 1, 3, 3);
        let track = MaskTrack::new(1, "dog".into(), vec![frame; 5]).unwrap();
        let diag = track_diagnostics(&track).unwrap();
        assert_eq!(diag.max_area_change_ratio, 0.0);
        assert!(diag.empty_frame_indices.is_empty());
    }

    #[test]
    fn track_diagnostics_area_change_ratio() {
        // Areas 10, 15, 15: max ratio |15-10|/10 = 0.5.
        let frames = vec![
            rect_rle(8, 8, 0, 0, 2, 5),
            rect_rle(8, 8, 0, 0, 3, 5),
            rect_rle(8, 8, 1, 0, 3, 5),
        ];
        let track = MaskTrack::new(2, "cat".into(), frames).unwrap();
        let diag = track_diagnostics(&track).unwrap();
        assert_eq!(diag.max_area_change_ratio, 0.5);
    }

    #[test]
    fn track_diagnostics_flags_empty_frames() {
        let solid = rect_rle(4, 4, 0, 0, 2, 2);
        let empty = rle_encode(&BinaryMask::new(4, 4));
        let track =
            MaskTrack::new(3, "car".into(), vec![solid.clone(), solid, empty]).unwrap();
        let diag = track_diagnostics(&track).unwrap();
        assert_eq!(diag.empty_frame_indices, vec![2]);
    }

    #[test]
    fn track_diagnostics_empty_track_errors() {
        let track = MaskTrack::new(4, "bus".into(), vec![]).unwrap();
        assert_eq!(track_diagnostics(&track).unwrap_err(), MaskError::EmptyTrack);
    }

    #[test]
    fn mask_track_rejects_mixed_dimensions() {
        let a = rect_rle(4, 4, 0, 0, 1, 1);
        let b = rect_rle(5, 4, 0, 0, 1, 1);
        assert!(MaskTrack::new(1, "dog".into(), vec![a, b]).is_err());
    }

    #[test]
    fn rle_serializes_with_coco_field_layout() {
        let rle = rect_rle(3, 2, 0, 0, 1, 2);
        let json = serde_json::to_string(&rle).unwrap();
        assert_eq!(json, r#"{"size":[2,3],"counts":[0,2,4]}"#);
        let back: RleMask = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rle);
    }

    #[test]
    fn rle_deserialize_rejects_bad_sum() {
        let err = serde_json::from_str::<RleMask>(r#"{"size":[2,2],"counts":[3]}"#);
        assert!(err.is_err());
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (1u32..=64, 1u32..=64).prop_flat_map(|(w, h)| {
            let bits = w as usize * h as usize;
            proptest::collection::vec(any::<bool>(), bits).prop_map(move |values| {
                let mut mask = BinaryMask::new(w, h);
                for (flat, value) in values.into_iter().enumerate() {
                    if value {
                        mask.set(flat as u32 / h, flat as u32 % h, true);
                    }
                }
                mask
            })
        })
    }

    proptest! {
        #[test]
        fn rle_roundtrip(mask in arb_mask()) {
            let rle = rle_encode(&mask);
            prop_assert_eq!(rle_decode(&rle), mask);
        }

        #[test]
        fn rle_counts_cover_grid(mask in arb_mask()) {
            let rle = rle_encode(&mask);
            let total: u64 = rle.counts().iter().map(|&c| c as u64).sum();
            prop_assert_eq!(total, mask.width() as u64 * mask.height() as u64);
            prop_assert_eq!(rle.area(), mask.area());
        }

        #[test]
        fn iou_is_symmetric(a in arb_mask(), b in arb_mask()) {
            if a.width() == b.width() && a.height() == b.height() {
                prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            }
        }

        #[test]
        fn iou_self_is_one(a in arb_mask()) {
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }
    }
}
