//! Label masks and class-probability maps.

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// Segmentation classes: 0 background, 1 LV, 2 MYO, 3 RV.
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["BG", "LV", "MYO", "RV"];

/// Per-pixel class map over {background, LV, MYO, RV}, shape (N, H, W).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::shape(
                "label_mask",
                format!("{}x{}x{} vs {} values", n, h, w, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!(
                "label value {} outside {{0,1,2,3}}",
                v
            )));
        }
        Ok(LabelMask { n, h, w, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        LabelMask {
            n,
            h,
            w,
            data: vec![0; n * h * w],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, n: usize, h: usize, w: usize) -> u8 {
        self.data[(n * self.h + h) * self.w + w]
    }

    #[inline]
    pub fn set(&mut self, n: usize, h: usize, w: usize, v: u8) {
        debug_assert!((v as usize) < NUM_CLASSES);
        self.data[(n * self.h + h) * self.w + w] = v;
    }

    /// Single-slice view as its own mask.
    pub fn slice(&self, i: usize) -> LabelMask {
        let hw = self.h * self.w;
        LabelMask {
            n: 1,
            h: self.h,
            w: self.w,
            data: self.data[i * hw..(i + 1) * hw].to_vec(),
        }
    }

    /// One-hot view Y^c, shape (N, 4, H, W).
    pub fn one_hot(&self, precision: Precision) -> Tensor {
        let hw = self.h * self.w;
        let mut data = vec![0.0; self.n * NUM_CLASSES * hw];
        for ni in 0..self.n {
            for p in 0..hw {
                let c = self.data[ni * hw + p] as usize;
                data[(ni * NUM_CLASSES + c) * hw + p] = 1.0;
            }
        }
        Tensor::from_parts(vec![self.n, NUM_CLASSES, self.h, self.w], data, precision)
    }

    /// Binary footprint of one class within slice `i`, row-major.
    pub fn binary(&self, i: usize, class: u8) -> Vec<bool> {
        let hw = self.h * self.w;
        self.data[i * hw..(i + 1) * hw]
            .iter()
            .map(|&v| v == class)
            .collect()
    }

    /// Count of pixels per class across all slices.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0usize; NUM_CLASSES];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }
}

/// Class probabilities, shape (N, 4, H, W); channel sums are 1.
#[derive(Clone)]
pub struct ProbMap(pub Tensor);

impl ProbMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != NUM_CLASSES {
            return Err(Error::shape(
                "prob_map",
                format!("expected (N,{},H,W), got {:?}", NUM_CLASSES, s),
            ));
        }
        Ok(ProbMap(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Verify values lie in [0,1] and channels sum to 1 within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let (n, c, h, w) = self.0.dims4();
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let mut s = 0.0;
                    for ci in 0..c {
                        let v = self.0.at4(ni, ci, hi, wi);
                        if !(0.0..=1.0).contains(&v) {
                            return Err(Error::NumericFailure(format!(
                                "probability {} outside [0,1]",
                                v
                            )));
                        }
                        s += v;
                    }
                    if (s - 1.0).abs() > tol {
                        return Err(Error::NumericFailure(format!(
                            "channel sum {} deviates from 1",
                            s
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Argmax over channels; ties break to the lowest class index.
    pub fn argmax(&self) -> LabelMask {
        let (n, c, h, w) = self.0.dims4();
        let mut mask = LabelMask::zeros(n, h, w);
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let mut best_c = 0usize;
                    let mut best_v = self.0.at4(ni, 0, hi, wi);
                    for ci in 1..c {
                        let v = self.0.at4(ni, ci, hi, wi);
                        if v > best_v {
                            best_v = v;
                            best_c = ci;
                        }
                    }
                    mask.set(ni, hi, wi, best_c as u8);
                }
            }
        }
        mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(LabelMask::new(1, 1, 2, vec![0, 4]).is_err());
        assert!(LabelMask::new(1, 1, 2, vec![0, 3]).is_ok());
    }

    #[test]
    fn one_hot_round_trips_through_argmax() {
        let m = LabelMask::new(1, 2, 2, vec![0, 1, 2, 3]).unwrap();
        let p = ProbMap::new(m.one_hot(Precision::Double)).unwrap();
        p.validate(1e-9).unwrap();
        assert_eq!(p.argmax(), m);
    }

    #[test]
    fn argmax_ties_break_to_lowest_class() {
        let t = Tensor::full(&[1, 4, 1, 1], 0.25, Precision::Double);
        let p = ProbMap::new(t).unwrap();
        assert_eq!(p.argmax().data(), &[0]);
    }
}
