//! Test-time augmentation: transform the test image, predict each version,
//! invert the transforms, and merge the predictions by majority vote.
//!
//! All transforms are exact index permutations (no interpolation), so
//! `inverse(t)(t(x))` is bit-identical to `x`.

use crate::error::{Error, Result};
use crate::mask::{LabelMask, ProbMap, NUM_CLASSES};
use crate::tensor::Tensor;

/// Exact geometric transforms on the image grid. Rotations are clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeoTransform {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

/// The default four-version protocol: identity plus the three transforms.
pub const DEFAULT_TRANSFORMS: [GeoTransform; 4] = [
    GeoTransform::Identity,
    GeoTransform::HFlip,
    GeoTransform::VFlip,
    GeoTransform::Rot90,
];

impl GeoTransform {
    pub fn inverse(self) -> GeoTransform {
        match self {
            GeoTransform::Identity => GeoTransform::Identity,
            GeoTransform::HFlip => GeoTransform::HFlip,
            GeoTransform::VFlip => GeoTransform::VFlip,
            GeoTransform::Rot90 => GeoTransform::Rot270,
            GeoTransform::Rot180 => GeoTransform::Rot180,
            GeoTransform::Rot270 => GeoTransform::Rot90,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GeoTransform::Identity => "identity",
            GeoTransform::HFlip => "hflip",
            GeoTransform::VFlip => "vflip",
            GeoTransform::Rot90 => "rot90",
            GeoTransform::Rot180 => "rot180",
            GeoTransform::Rot270 => "rot270",
        }
    }

    pub fn parse(s: &str) -> Result<GeoTransform> {
        match s {
            "identity" => Ok(GeoTransform::Identity),
            "hflip" => Ok(GeoTransform::HFlip),
            "vflip" => Ok(GeoTransform::VFlip),
            "rot90" => Ok(GeoTransform::Rot90),
            "rot180" => Ok(GeoTransform::Rot180),
            "rot270" => Ok(GeoTransform::Rot270),
            other => Err(Error::InvalidArgument(format!(
                "unknown transform '{other}'"
            ))),
        }
    }

    /// Output extents for an input plane of (h, w).
    fn out_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            GeoTransform::Rot90 | GeoTransform::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    /// Source coordinates for output pixel (i, j) of an (h_in, w_in) plane.
    #[inline]
    fn src(self, i: usize, j: usize, h_in: usize, w_in: usize) -> (usize, usize) {
        match self {
            GeoTransform::Identity => (i, j),
            GeoTransform::HFlip => (i, w_in - 1 - j),
            GeoTransform::VFlip => (h_in - 1 - i, j),
            // clockwise: out(i, j) = in(h - 1 - j, i)
            GeoTransform::Rot90 => (h_in - 1 - j, i),
            GeoTransform::Rot180 => (h_in - 1 - i, w_in - 1 - j),
            // counter-clockwise: out(i, j) = in(j, w - 1 - i)
            GeoTransform::Rot270 => (j, w_in - 1 - i),
        }
    }
}

fn transform_plane(t: GeoTransform, src: &[f64], h: usize, w: usize, dst: &mut Vec<f64>) {
    let (ho, wo) = t.out_dims(h, w);
    for i in 0..ho {
        for j in 0..wo {
            let (si, sj) = t.src(i, j, h, w);
            dst.push(src[si * w + sj]);
        }
    }
}

/// Apply an exact index-permutation transform to the trailing two axes of a
/// rank-2 or rank-4 tensor. Values never change.
pub fn apply_transform(x: &Tensor, t: GeoTransform) -> Result<Tensor> {
    let s = x.shape();
    match s.len() {
        2 => {
            let (h, w) = (s[0], s[1]);
            let (ho, wo) = t.out_dims(h, w);
            let mut out = Vec::with_capacity(h * w);
            transform_plane(t, x.data(), h, w, &mut out);
            Ok(Tensor::from_parts(vec![ho, wo], out, x.precision()))
        }
        4 => {
            let (n, c, h, w) = x.dims4();
            let (ho, wo) = t.out_dims(h, w);
            let mut out = Vec::with_capacity(x.numel());
            for p in 0..n * c {
                transform_plane(t, &x.data()[p * h * w..(p + 1) * h * w], h, w, &mut out);
            }
            Ok(Tensor::from_parts(vec![n, c, ho, wo], out, x.precision()))
        }
        other => Err(Error::shape(
            "apply_transform",
            format!("expected rank-2 or rank-4 tensor, got rank {other}"),
        )),
    }
}

/// Apply a transform to every slice of a label mask.
pub fn transform_mask(mask: &LabelMask, t: GeoTransform) -> LabelMask {
    let (n, h, w) = mask.dims();
    let (ho, wo) = t.out_dims(h, w);
    let mut out = LabelMask::zeros(n, ho, wo);
    for ni in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let (si, sj) = t.src(i, j, h, w);
                out.set(ni, i, j, mask.get(ni, si, sj));
            }
        }
    }
    out
}

/// Per-class binary prediction maps from each of T runs, plus the
/// probabilities used to break conflicting votes.
pub struct VoteStack {
    t: usize,
    h: usize,
    w: usize,
    /// (T, 4, H, W) binary votes.
    votes: Vec<u8>,
    /// (T, 4, H, W) probabilities; zeros when no probabilities were given.
    probs: Vec<f64>,
}

impl VoteStack {
    /// Build from per-run argmax masks; probabilities are optional.
    pub fn from_masks(masks: &[LabelMask], probs: Option<&[ProbMap]>) -> Result<VoteStack> {
        if masks.is_empty() {
            return Err(Error::InvalidArgument("empty vote stack".into()));
        }
        let (n, h, w) = masks[0].dims();
        if n != 1 {
            return Err(Error::InvalidArgument(
                "vote stacks are built from single-slice masks".into(),
            ));
        }
        let t = masks.len();
        let mut votes = vec![0u8; t * NUM_CLASSES * h * w];
        let mut pr = vec![0.0; t * NUM_CLASSES * h * w];
        for (ti, m) in masks.iter().enumerate() {
            if m.dims() != (1, h, w) {
                return Err(Error::shape(
                    "vote_stack",
                    format!("run {} has dims {:?}", ti, m.dims()),
                ));
            }
            for i in 0..h {
                for j in 0..w {
                    let c = m.get(0, i, j) as usize;
                    votes[((ti * NUM_CLASSES + c) * h + i) * w + j] = 1;
                }
            }
        }
        if let Some(ps) = probs {
            if ps.len() != t {
                return Err(Error::InvalidArgument(format!(
                    "{} probability maps for {} runs",
                    ps.len(),
                    t
                )));
            }
            for (ti, p) in ps.iter().enumerate() {
                let (pn, pc, ph, pw) = p.tensor().dims4();
                if pn != 1 || pc != NUM_CLASSES || ph != h || pw != w {
                    return Err(Error::shape(
                        "vote_stack",
                        format!("probability map {} has shape {:?}", ti, p.tensor().shape()),
                    ));
                }
                let base = ti * NUM_CLASSES * h * w;
                pr[base..base + NUM_CLASSES * h * w].copy_from_slice(p.tensor().data());
            }
        }
        Ok(VoteStack {
            t,
            h,
            w,
            votes,
            probs: pr,
        })
    }

    /// Build from raw per-class binaries (runs may mark several classes).
    pub fn from_binary(t: usize, h: usize, w: usize, votes: Vec<u8>) -> Result<VoteStack> {
        if votes.len() != t * NUM_CLASSES * h * w {
            return Err(Error::shape(
                "vote_stack",
                format!("expected {} entries, got {}", t * NUM_CLASSES * h * w, votes.len()),
            ));
        }
        if votes.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("votes must be 0 or 1".into()));
        }
        let probs = vec![0.0; votes.len()];
        Ok(VoteStack {
            t,
            h,
            w,
            votes,
            probs,
        })
    }

    pub fn runs(&self) -> usize {
        self.t
    }

    #[inline]
    fn vote(&self, t: usize, c: usize, i: usize, j: usize) -> u8 {
        self.votes[((t * NUM_CLASSES + c) * self.h + i) * self.w + j]
    }

    #[inline]
    fn prob(&self, t: usize, c: usize, i: usize, j: usize) -> f64 {
        self.probs[((t * NUM_CLASSES + c) * self.h + i) * self.w + j]
    }
}

/// Majority-vote merge: a pixel belongs to a structure class once it is
/// predicted twice or more across the runs. Pixels with no such class are
/// background; conflicts resolve by vote count, then mean predicted
/// probability, then lowest class index.
pub fn majority_vote(stack: &VoteStack) -> Result<LabelMask> {
    if stack.t < 2 {
        return Err(Error::InvalidArgument(format!(
            "majority vote needs at least 2 runs, got {}",
            stack.t
        )));
    }
    let mut out = LabelMask::zeros(1, stack.h, stack.w);
    for i in 0..stack.h {
        for j in 0..stack.w {
            let mut best: Option<(usize, usize, f64)> = None; // (class, count, mean prob)
            for c in 1..NUM_CLASSES {
                let count = (0..stack.t).map(|t| stack.vote(t, c, i, j) as usize).sum::<usize>();
                if count < 2 {
                    continue;
                }
                let mean_p = (0..stack.t).map(|t| stack.prob(t, c, i, j)).sum::<f64>()
                    / stack.t as f64;
                let better = match best {
                    None => true,
                    Some((_, bc, bp)) => count > bc || (count == bc && mean_p > bp),
                };
                if better {
                    best = Some((c, count, mean_p));
                }
            }
            if let Some((c, _, _)) = best {
                out.set(0, i, j, c as u8);
            }
        }
    }
    Ok(out)
}

/// Run the augmentation / prediction / inverse-augmentation / merge protocol
/// over a single-slice predictor. The predictor maps an (H, W) image to a
/// (1, 4, H, W) probability map.
pub fn tta_predict_with<F>(
    image: &Tensor,
    transforms: &[GeoTransform],
    mut predict: F,
) -> Result<LabelMask>
where
    F: FnMut(&Tensor) -> Result<ProbMap>,
{
    if !transforms.contains(&GeoTransform::Identity) {
        return Err(Error::InvalidArgument(
            "transform set must include identity".into(),
        ));
    }
    let mut masks = Vec::with_capacity(transforms.len());
    let mut probs = Vec::with_capacity(transforms.len());
    for &t in transforms {
        let augmented = apply_transform(image, t)?;
        let pred = predict(&augmented)?;
        let restored = ProbMap::new(apply_transform(pred.tensor(), t.inverse())?)?;
        masks.push(restored.argmax());
        probs.push(restored);
    }
    if masks.len() == 1 {
        return Ok(masks.into_iter().next().expect("one mask"));
    }
    majority_vote(&VoteStack::from_masks(&masks, Some(&probs))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_img(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![h, w], data, Precision::Single).unwrap()
    }

    #[test]
    fn identity_is_identity() {
        let x = rand_img(6, 6, 1);
        let y = apply_transform(&x, GeoTransform::Identity).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn hflip_is_an_involution() {
        let x = rand_img(5, 7, 2);
        let y = apply_transform(
            &apply_transform(&x, GeoTransform::HFlip).unwrap(),
            GeoTransform::HFlip,
        )
        .unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rot90_then_rot270_is_exact() {
        let x = rand_img(6, 6, 3);
        let y = apply_transform(
            &apply_transform(&x, GeoTransform::Rot90).unwrap(),
            GeoTransform::Rot270,
        )
        .unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn every_transform_round_trips_bit_exactly() {
        for (k, t) in [
            GeoTransform::Identity,
            GeoTransform::HFlip,
            GeoTransform::VFlip,
            GeoTransform::Rot90,
            GeoTransform::Rot180,
            GeoTransform::Rot270,
        ]
        .into_iter()
        .enumerate()
        {
            let x = rand_img(8, 8, 10 + k as u64);
            let y = apply_transform(&apply_transform(&x, t).unwrap(), t.inverse()).unwrap();
            assert_eq!(x, y, "transform {:?}", t);
        }
    }

    #[test]
    fn rot90_rotates_clockwise() {
        // [[1,2],[3,4]] rotated clockwise -> [[3,1],[4,2]]
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], Precision::Double).unwrap();
        let y = apply_transform(&x, GeoTransform::Rot90).unwrap();
        assert_eq!(y.data(), &[3.0, 1.0, 4.0, 2.0]);
    }

    fn mask_of(h: usize, w: usize, vals: &[u8]) -> LabelMask {
        LabelMask::new(1, h, w, vals.to_vec()).unwrap()
    }

    #[test]
    fn two_votes_of_four_carry() {
        let lv = mask_of(1, 1, &[1]);
        let bg = mask_of(1, 1, &[0]);
        let stack =
            VoteStack::from_masks(&[lv.clone(), lv, bg.clone(), bg], None).unwrap();
        let merged = majority_vote(&stack).unwrap();
        assert_eq!(merged.data(), &[1]);
    }

    #[test]
    fn one_vote_of_four_is_background() {
        let rv = mask_of(1, 1, &[3]);
        let bg = mask_of(1, 1, &[0]);
        let stack = VoteStack::from_masks(&[rv, bg.clone(), bg.clone(), bg], None).unwrap();
        let merged = majority_vote(&stack).unwrap();
        assert_eq!(merged.data(), &[0]);
    }

    #[test]
    fn higher_count_wins_conflicts() {
        // LV marked by 3 runs, MYO by 2 (overlapping binaries).
        let t = 4;
        let mut votes = vec![0u8; t * NUM_CLASSES];
        for ti in 0..3 {
            votes[ti * NUM_CLASSES + 1] = 1;
        }
        for ti in 2..4 {
            votes[ti * NUM_CLASSES + 2] = 1;
        }
        let stack = VoteStack::from_binary(t, 1, 1, votes).unwrap();
        let merged = majority_vote(&stack).unwrap();
        assert_eq!(merged.data(), &[1]);
    }

    #[test]
    fn count_tie_breaks_to_lowest_class_without_probs() {
        let t = 4;
        let mut votes = vec![0u8; t * NUM_CLASSES];
        for ti in 0..2 {
            votes[ti * NUM_CLASSES + 2] = 1; // MYO twice
        }
        for ti in 2..4 {
            votes[ti * NUM_CLASSES + 3] = 1; // RV twice
        }
        let stack = VoteStack::from_binary(t, 1, 1, votes).unwrap();
        let merged = majority_vote(&stack).unwrap();
        assert_eq!(merged.data(), &[2]);
    }

    #[test]
    fn vote_is_permutation_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let masks: Vec<LabelMask> = (0..4)
            .map(|_| {
                let vals: Vec<u8> = (0..16).map(|_| rng.gen_range(0..4)).collect();
                mask_of(4, 4, &vals)
            })
            .collect();
        let base = majority_vote(&VoteStack::from_masks(&masks, None).unwrap()).unwrap();
        let mut perm = masks.clone();
        perm.swap(0, 3);
        perm.swap(1, 2);
        let shuffled = majority_vote(&VoteStack::from_masks(&perm, None).unwrap()).unwrap();
        assert_eq!(base, shuffled);
    }

    #[test]
    fn unanimous_predictions_pass_through() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let vals: Vec<u8> = (0..36).map(|_| rng.gen_range(0..4)).collect();
        let m = mask_of(6, 6, &vals);
        let stack = VoteStack::from_masks(&[m.clone(), m.clone(), m.clone(), m.clone()], None)
            .unwrap();
        let merged = majority_vote(&stack).unwrap();
        assert_eq!(merged, m);
    }

    #[test]
    fn single_run_stack_is_rejected() {
        let m = mask_of(1, 1, &[1]);
        let stack = VoteStack::from_masks(&[m], None).unwrap();
        assert!(majority_vote(&stack).is_err());
    }

    #[test]
    fn degenerate_tta_equals_plain_prediction() {
        // Predictor that labels by thresholding the pixel value.
        let image = rand_img(8, 8, 42);
        let predict = |x: &Tensor| {
            let (h, w) = (x.shape()[0], x.shape()[1]);
            let mut p = vec![0.0; NUM_CLASSES * h * w];
            for (i, &v) in x.data().iter().enumerate() {
                let c = if v > 0.5 { 1 } else { 0 };
                p[c * h * w + i] = 1.0;
            }
            ProbMap::new(Tensor::new(vec![1, NUM_CLASSES, h, w], p, Precision::Single).unwrap())
        };
        let single = predict(&image).unwrap().argmax();
        let tta = tta_predict_with(&image, &[GeoTransform::Identity], predict).unwrap();
        assert_eq!(single, tta);
    }

    #[test]
    fn equivariant_predictor_matches_single_prediction() {
        // A pixel-local predictor is equivariant to every index permutation,
        // so TTA merging must reproduce its plain prediction.
        let image = rand_img(8, 8, 43);
        let predict = |x: &Tensor| {
            let (h, w) = (x.shape()[0], x.shape()[1]);
            let mut p = vec![0.0; NUM_CLASSES * h * w];
            for (i, &v) in x.data().iter().enumerate() {
                let c = ((v * 4.0) as usize).min(3);
                p[c * h * w + i] = 1.0;
            }
            ProbMap::new(Tensor::new(vec![1, NUM_CLASSES, h, w], p, Precision::Single).unwrap())
        };
        let single = predict(&image).unwrap().argmax();
        let tta = tta_predict_with(&image, &DEFAULT_TRANSFORMS, predict).unwrap();
        assert_eq!(single, tta);
    }
}
