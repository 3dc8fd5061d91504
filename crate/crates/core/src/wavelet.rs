//! Haar wavelet pooling and unpooling with exact perfect reconstruction.
//!
//! The four orthonormal 2x2 kernels split a feature map into one
//! low-frequency band (LL) and three detail bands (LH, HL, HH), each at half
//! resolution, applied per channel. Because the kernels form an orthonormal
//! basis, `haar_unpool(haar_pool(x)) == x` and energy is conserved.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, OpKind};
use crate::tensor::Tensor;

/// The four Haar subbands of one feature map, each (N, C, H/2, W/2).
#[derive(Clone)]
pub struct WaveletBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl WaveletBands {
    pub fn band(&self, i: usize) -> &Tensor {
        match i {
            0 => &self.ll,
            1 => &self.lh,
            2 => &self.hl,
            3 => &self.hh,
            _ => panic!("band index {i} out of range"),
        }
    }

    /// Sum of squares over all four bands.
    pub fn energy(&self) -> f64 {
        (0..4)
            .map(|b| self.band(b).data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Graph-node handles for the four subbands, used inside networks.
#[derive(Clone, Copy)]
pub struct BandIds {
    pub ll: NodeId,
    pub lh: NodeId,
    pub hl: NodeId,
    pub hh: NodeId,
}

/// Record the four-band Haar analysis of `x` on a graph.
pub fn haar_pool_graph(g: &mut Graph, x: NodeId) -> Result<BandIds> {
    Ok(BandIds {
        ll: g.op(OpKind::HaarBand(0), &[x])?,
        lh: g.op(OpKind::HaarBand(1), &[x])?,
        hl: g.op(OpKind::HaarBand(2), &[x])?,
        hh: g.op(OpKind::HaarBand(3), &[x])?,
    })
}

/// Record the Haar synthesis from four band nodes on a graph.
pub fn haar_unpool_graph(g: &mut Graph, bands: BandIds) -> Result<NodeId> {
    g.op(
        OpKind::HaarUnpool,
        &[bands.ll, bands.lh, bands.hl, bands.hh],
    )
}

/// Stride-2 application of the four orthonormal Haar kernels per channel.
pub fn haar_pool(x: &Tensor) -> Result<WaveletBands> {
    let mut g = Graph::new(x.precision());
    let ix = g.input(x.clone());
    let ids = haar_pool_graph(&mut g, ix)?;
    Ok(WaveletBands {
        ll: g.value(ids.ll).clone(),
        lh: g.value(ids.lh).clone(),
        hl: g.value(ids.hl).clone(),
        hh: g.value(ids.hh).clone(),
    })
}

/// Exact inverse of [`haar_pool`].
pub fn haar_unpool(bands: &WaveletBands) -> Result<Tensor> {
    let mut g = Graph::new(bands.ll.precision());
    let ids = BandIds {
        ll: g.input(bands.ll.clone()),
        lh: g.input(bands.lh.clone()),
        hl: g.input(bands.hl.clone()),
        hh: g.input(bands.hh.clone()),
    };
    let out = haar_unpool_graph(&mut g, ids)?;
    Ok(g.value(out).clone())
}

/// Repeated analysis: level k pools the LL of level k-1. The returned
/// pyramid keeps every level's four bands (level 0 first); the deepest LL
/// lives in the last entry.
pub fn haar_multilevel(x: &Tensor, levels: usize) -> Result<Vec<WaveletBands>> {
    if levels == 0 {
        return Err(Error::InvalidArgument("levels must be >= 1".into()));
    }
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::shape(
            "haar_multilevel",
            format!("expected NCHW tensor, got {:?}", shape),
        ));
    }
    let div = 1 << levels;
    if shape[2] % div != 0 || shape[3] % div != 0 {
        return Err(Error::shape(
            "haar_multilevel",
            format!(
                "extents {}x{} not divisible by 2^{}",
                shape[2], shape[3], levels
            ),
        ));
    }
    let mut pyramid = Vec::with_capacity(levels);
    let mut current = x.clone();
    for _ in 0..levels {
        let bands = haar_pool(&current)?;
        current = bands.ll.clone();
        pyramid.push(bands);
    }
    Ok(pyramid)
}

/// Inverse of [`haar_multilevel`]: reconstructs the original tensor from a
/// pyramid, finest level first.
pub fn haar_multilevel_reconstruct(pyramid: &[WaveletBands]) -> Result<Tensor> {
    if pyramid.is_empty() {
        return Err(Error::InvalidArgument("empty wavelet pyramid".into()));
    }
    let mut current = haar_unpool(pyramid.last().expect("nonempty"))?;
    for level in pyramid[..pyramid.len() - 1].iter().rev() {
        let bands = WaveletBands {
            ll: current,
            lh: level.lh.clone(),
            hl: level.hl.clone(),
            hh: level.hh.clone(),
        };
        current = haar_unpool(&bands)?;
    }
    Ok(current)
}
