//! Pixel affinities between a query and a reference feature map.
//!
//! The intra-video affinity is a row softmax of query·reference dot
//! products. The inter-and-intra-video affinity keeps the same numerator
//! but adds the exponentiated dot products with feature points from other
//! videos to each row's denominator, so its rows sum to less than one.

use std::rc::Rc;

use crate::diff::{Tape, Tensor, Var};
use crate::encoder::FeatureMap;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AffinityKind {
    Intra,
    IntraInter,
    Compact,
}

/// Dense `(h·w) × (h·w)` affinity between query rows and reference columns.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub kind: AffinityKind,
    /// Reference grid the columns index, row-major.
    pub height: usize,
    pub width: usize,
    pub rows: usize,
    pub values: Vec<f64>,
}

impl AffinityMatrix {
    pub fn new(kind: AffinityKind, rows: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * height * width {
            return Err(shape_err!(
                "affinity {}x{} given {} values",
                rows,
                height * width,
                values.len()
            ));
        }
        Ok(AffinityMatrix {
            kind,
            height,
            width,
            rows,
            values,
        })
    }

    pub fn cols(&self) -> usize {
        self.height * self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.values[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    /// Intra-video mass carried by each row.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols()], self.values.clone()).expect("sized by construction")
    }
}

/// Feature vectors from frames of other videos.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NegativeSet {
    dim: usize,
    vectors: Vec<f64>,
    sources: Vec<usize>,
}

impl NegativeSet {
    pub fn new(dim: usize) -> Self {
        NegativeSet {
            dim,
            vectors: Vec::new(),
            sources: Vec::new(),
        }
    }

    pub fn push(&mut self, vector: &[f64], source_video: usize) -> Result<()> {
        if vector.len() != self.dim {
            return Err(shape_err!("negative of dimension {} in a set of {}", vector.len(), self.dim));
        }
        self.vectors.extend_from_slice(vector);
        self.sources.push(source_video);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    /// `[K, c]` rows.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.vectors.clone()).expect("sized by construction")
    }
}

/// Softmax support of every (query, reference) pair within Chebyshev `radius`.
pub fn window_mask(height: usize, width: usize, radius: usize) -> Vec<bool> {
    let n = height * width;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        let (yi, xi) = ((i / width) as isize, (i % width) as isize);
        for j in 0..n {
            let (yj, xj) = ((j / width) as isize, (j % width) as isize);
            mask[i * n + j] = (yi - yj).unsigned_abs().max((xi - xj).unsigned_abs()) <= radius;
        }
    }
    mask
}

/// Query·reference dot products, `[hw_q, hw_r]`.
pub fn logits_on_tape(tape: &mut Tape, query: Var, reference: Var) -> Result<Var> {
    let rt = tape.transpose(reference)?;
    tape.matmul(query, rt)
}

/// Row softmax of the logits, optionally restricted to a window.
pub fn intra_on_tape(tape: &mut Tape, logits: Var, window: Option<Rc<[bool]>>) -> Result<Var> {
    match window {
        Some(mask) => tape.masked_softmax(logits, mask),
        None => tape.softmax(logits),
    }
}

/// Intra-video numerators over a denominator that also includes `negatives` (`[K, c]`).
pub fn intra_inter_on_tape(tape: &mut Tape, query: Var, logits: Var, negatives: Option<Var>) -> Result<Var> {
    let Some(neg) = negatives else {
        return tape.softmax(logits);
    };
    let cols = tape.value(logits).shape()[1];
    let nt = tape.transpose(neg)?;
    let neg_logits = tape.matmul(query, nt)?;
    let all = tape.concat_cols(logits, neg_logits)?;
    let soft = tape.softmax(all)?;
    tape.slice_cols(soft, 0, cols)
}

fn check_pair(fq: &FeatureMap, fr: &FeatureMap) -> Result<()> {
    if fq.channels != fr.channels || fq.height != fr.height || fq.width != fr.width {
        return Err(shape_err!(
            "query {}x{}x{} vs reference {}x{}x{}",
            fq.height,
            fq.width,
            fq.channels,
            fr.height,
            fr.width,
            fr.channels
        ));
    }
    Ok(())
}

/// Row-stochastic affinity; with `window = Some(r)` each row only covers
/// reference pixels within Chebyshev radius `r` of the query pixel.
pub fn intra_affinity(fq: &FeatureMap, fr: &FeatureMap, window: Option<usize>) -> Result<AffinityMatrix> {
    check_pair(fq, fr)?;
    let mut tape = Tape::new();
    let q = tape.constant(fq.rows_tensor())?;
    let r = tape.constant(fr.rows_tensor())?;
    let logits = logits_on_tape(&mut tape, q, r)?;
    let mask = window.map(|rad| Rc::from(window_mask(fr.height, fr.width, rad)));
    let a = intra_on_tape(&mut tape, logits, mask)?;
    AffinityMatrix::new(
        AffinityKind::Intra,
        fq.pixels(),
        fr.height,
        fr.width,
        tape.value(a).values().to_vec(),
    )
}

/// Sub-stochastic affinity whose denominators also range over `negatives`.
pub fn intra_inter_affinity(fq: &FeatureMap, fr: &FeatureMap, negatives: &NegativeSet) -> Result<AffinityMatrix> {
    check_pair(fq, fr)?;
    if !negatives.is_empty() && negatives.dim() != fq.channels {
        return Err(shape_err!(
            "negatives of dimension {} for features of {}",
            negatives.dim(),
            fq.channels
        ));
    }
    let mut tape = Tape::new();
    let q = tape.constant(fq.rows_tensor())?;
    let r = tape.constant(fr.rows_tensor())?;
    let logits = logits_on_tape(&mut tape, q, r)?;
    let neg = if negatives.is_empty() {
        None
    } else {
        Some(tape.constant(negatives.to_tensor())?)
    };
    let a = intra_inter_on_tape(&mut tape, q, logits, neg)?;
    AffinityMatrix::new(
        AffinityKind::IntraInter,
        fq.pixels(),
        fr.height,
        fr.width,
        tape.value(a).values().to_vec(),
    )
}
