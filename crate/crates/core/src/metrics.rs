//! Evaluation metric suite: Dice, Jaccard, Hausdorff distance of boundaries
//! and average symmetric surface distance, per structure and averaged.
//!
//! Distances are 2D slice-wise in pixel units; per-case values are slice
//! means, and report values are case means. Boundaries use 4-connectivity;
//! pixels on the image border count as boundary.

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

/// Structure classes evaluated (label value, display name).
pub const STRUCTURES: [(u8, &str); 3] = [(1, "LV"), (2, "MYO"), (3, "RV")];
pub const METRIC_NAMES: [&str; 4] = ["Dice", "Jac", "HDB", "ASSD"];

/// Binary footprint of one structure on one slice.
#[derive(Clone)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(
                "binary_mask",
                format!("{}x{} vs {} values", h, w, data.len()),
            ));
        }
        Ok(BinaryMask { h, w, data })
    }

    pub fn from_label(mask: &LabelMask, slice: usize, class: u8) -> Self {
        let (_, h, w) = mask.dims();
        BinaryMask {
            h,
            w,
            data: mask.binary(slice, class),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    #[inline]
    fn at(&self, i: isize, j: isize) -> bool {
        if i < 0 || j < 0 || i as usize >= self.h || j as usize >= self.w {
            false
        } else {
            self.data[i as usize * self.w + j as usize]
        }
    }
}

/// Overlap ratios. Fractions in [0,1]; both-empty convention D = J = 1.
pub fn dice_jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::shape(
            "dice_jaccard",
            format!("{}x{} vs {}x{}", pred.h, pred.w, gt.h, gt.w),
        ));
    }
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (a, b) in pred.data.iter().zip(&gt.data) {
        if *a {
            p += 1;
        }
        if *b {
            g += 1;
        }
        if *a && *b {
            inter += 1;
        }
    }
    if p + g == 0 {
        return Ok((1.0, 1.0));
    }
    let dice = 2.0 * inter as f64 / (p + g) as f64;
    let union = p + g - inter;
    let jac = inter as f64 / union as f64;
    Ok((dice, jac))
}

/// Pixels of the mask with at least one 4-neighbor outside the mask, or on
/// the image border. Empty mask yields an empty set.
pub fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let mut pts = Vec::new();
    for i in 0..mask.h {
        for j in 0..mask.w {
            if !mask.data[i * mask.w + j] {
                continue;
            }
            let (ii, jj) = (i as isize, j as isize);
            let interior = mask.at(ii - 1, jj)
                && mask.at(ii + 1, jj)
                && mask.at(ii, jj - 1)
                && mask.at(ii, jj + 1);
            if !interior {
                pts.push((i, j));
            }
        }
    }
    pts
}

fn min_dist_sq(p: (usize, usize), set: &[(usize, usize)]) -> f64 {
    let mut best = f64::INFINITY;
    for q in set {
        let di = p.0 as f64 - q.0 as f64;
        let dj = p.1 as f64 - q.1 as f64;
        let d = di * di + dj * dj;
        if d < best {
            best = d;
        }
    }
    best
}

fn boundary_sets(pred: &BinaryMask, gt: &BinaryMask) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::shape(
            "surface_distance",
            format!("{}x{} vs {}x{}", pred.h, pred.w, gt.h, gt.w),
        ));
    }
    let a = boundary(pred);
    let b = boundary(gt);
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "surface distance undefined for an empty mask".into(),
        ));
    }
    Ok((a, b))
}

/// Hausdorff distance of boundaries, in pixels.
pub fn hdb(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (a, b) = boundary_sets(pred, gt)?;
    let h_ab = a
        .iter()
        .map(|&p| min_dist_sq(p, &b))
        .fold(0.0f64, f64::max);
    let h_ba = b
        .iter()
        .map(|&p| min_dist_sq(p, &a))
        .fold(0.0f64, f64::max);
    Ok(h_ab.max(h_ba).sqrt())
}

/// Average symmetric surface distance, in pixels.
pub fn assd(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (a, b) = boundary_sets(pred, gt)?;
    let sum_a: f64 = a.iter().map(|&p| min_dist_sq(p, &b).sqrt()).sum();
    let sum_b: f64 = b.iter().map(|&p| min_dist_sq(p, &a).sqrt()).sum();
    Ok((sum_a + sum_b) / (a.len() + b.len()) as f64)
}

/// One evaluated case: paired prediction and ground-truth slices.
pub struct CasePrediction {
    pub case_id: String,
    pub pred: Vec<LabelMask>,
    pub gt: Vec<LabelMask>,
}

/// Aggregated values for one structure (or the AVG row). Percentages for
/// overlap metrics, pixels for distances; distances are `None` when no
/// slice had both boundaries defined.
#[derive(Clone, Debug)]
pub struct StructureMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub hdb: Option<f64>,
    pub assd: Option<f64>,
    /// Slices where a distance was undefined (a mask was empty).
    pub missing_distances: usize,
}

/// Per-structure and averaged metrics over a case set.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub structures: Vec<(String, StructureMetrics)>,
    pub avg: StructureMetrics,
    pub cases: usize,
}

impl MetricsReport {
    /// Mean Dice (percent) over the three structures.
    pub fn mean_dice(&self) -> f64 {
        self.avg.dice
    }

    /// Long-form CSV rows `metric,structure,vendor,value`, ordered in
    /// structure blocks AVG, LV, MYO, RV with metrics Dice/Jac/HDB/ASSD.
    pub fn csv_rows(&self, vendor: &str) -> Vec<String> {
        let mut rows = Vec::new();
        let mut blocks: Vec<(&str, &StructureMetrics)> = vec![("AVG", &self.avg)];
        for (name, m) in &self.structures {
            blocks.push((name, m));
        }
        for (sname, m) in blocks {
            let fmt = |v: Option<f64>| match v {
                Some(x) => format!("{:.2}", x),
                None => "NA".to_string(),
            };
            rows.push(format!("Dice,{},{},{:.2}", sname, vendor, m.dice));
            rows.push(format!("Jac,{},{},{:.2}", sname, vendor, m.jaccard));
            rows.push(format!("HDB,{},{},{}", sname, vendor, fmt(m.hdb)));
            rows.push(format!("ASSD,{},{},{}", sname, vendor, fmt(m.assd)));
        }
        rows
    }
}

/// CSV header for report files.
pub const CSV_HEADER: &str = "metric,structure,vendor,value";

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Evaluate paired case sets: slice-wise metrics, slice means per case,
/// case means per structure, and the AVG row over the three structures.
pub fn evaluate_cases(cases: &[CasePrediction]) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no cases to evaluate".into()));
    }
    for c in cases {
        if c.pred.len() != c.gt.len() {
            return Err(Error::InvalidArgument(format!(
                "case {}: {} predictions vs {} ground truths",
                c.case_id,
                c.pred.len(),
                c.gt.len()
            )));
        }
    }

    let mut structures = Vec::new();
    for &(class, name) in &STRUCTURES {
        let mut case_dice = Vec::new();
        let mut case_jac = Vec::new();
        let mut case_hdb = Vec::new();
        let mut case_assd = Vec::new();
        let mut missing = 0usize;
        for case in cases {
            let mut d_slices = Vec::new();
            let mut j_slices = Vec::new();
            let mut h_slices = Vec::new();
            let mut a_slices = Vec::new();
            for (p, g) in case.pred.iter().zip(&case.gt) {
                let pm = BinaryMask::from_label(p, 0, class);
                let gm = BinaryMask::from_label(g, 0, class);
                let (d, j) = dice_jaccard(&pm, &gm)?;
                d_slices.push(d * 100.0);
                j_slices.push(j * 100.0);
                match (hdb(&pm, &gm), assd(&pm, &gm)) {
                    (Ok(h), Ok(a)) => {
                        h_slices.push(h);
                        a_slices.push(a);
                    }
                    _ => missing += 1,
                }
            }
            case_dice.push(mean(&d_slices).unwrap_or(0.0));
            case_jac.push(mean(&j_slices).unwrap_or(0.0));
            if let Some(h) = mean(&h_slices) {
                case_hdb.push(h);
            }
            if let Some(a) = mean(&a_slices) {
                case_assd.push(a);
            }
        }
        structures.push((
            name.to_string(),
            StructureMetrics {
                dice: mean(&case_dice).unwrap_or(0.0),
                jaccard: mean(&case_jac).unwrap_or(0.0),
                hdb: mean(&case_hdb),
                assd: mean(&case_assd),
                missing_distances: missing,
            },
        ));
    }

    let avg = StructureMetrics {
        dice: structures.iter().map(|(_, m)| m.dice).sum::<f64>() / 3.0,
        jaccard: structures.iter().map(|(_, m)| m.jaccard).sum::<f64>() / 3.0,
        hdb: mean(&structures.iter().filter_map(|(_, m)| m.hdb).collect::<Vec<_>>()),
        assd: mean(&structures.iter().filter_map(|(_, m)| m.assd).collect::<Vec<_>>()),
        missing_distances: structures.iter().map(|(_, m)| m.missing_distances).sum(),
    };

    Ok(MetricsReport {
        structures,
        avg,
        cases: cases.len(),
    })
}

/// Render the boundary of one structure's predicted mask into a grayscale
/// slice as white contour pixels. Stands in for the qualitative figures.
pub fn overlay_contours(image: &Tensor, mask: &LabelMask, class: u8) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(Error::shape(
            "overlay_contours",
            format!("expected (H,W) image, got {:?}", s),
        ));
    }
    let (_, mh, mw) = mask.dims();
    if mh != s[0] || mw != s[1] {
        return Err(Error::shape(
            "overlay_contours",
            format!("image {:?} vs mask {}x{}", s, mh, mw),
        ));
    }
    let bm = BinaryMask::from_label(mask, 0, class);
    let mut data = image.data().to_vec();
    for (i, j) in boundary(&bm) {
        data[i * s[1] + j] = 1.0;
    }
    Ok(Tensor::from_parts(s.to_vec(), data, image.precision()))
}
