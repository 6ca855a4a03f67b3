//! Per-stage dense layers with manual forward/backward. A stage is one
//! affine transform plus activation; its parameters live in a flat vector
//! (row-major weights then bias) so weight versions stay shape-agnostic.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageModel {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl StageModel {
    pub fn param_len(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    /// w[i*out + j] is the weight from input i to output j; bias follows.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let scale = 1.0 / (self.in_dim as f64).sqrt();
        let mut params: Vec<f64> = (0..self.in_dim * self.out_dim)
            .map(|_| (rng.gen::<f64>() - 0.5) * 2.0 * scale)
            .collect();
        params.extend(std::iter::repeat(0.0).take(self.out_dim));
        params
    }
}

/// Chain of stage shapes: input -> hidden... -> classes, tanh on hidden
/// stages and identity on the final (logits) stage.
pub fn stage_chain(stages: usize, input_dim: usize, hidden: usize, classes: usize) -> Vec<StageModel> {
    (0..stages)
        .map(|s| {
            let in_dim = if s == 0 { input_dim } else { hidden };
            let (out_dim, activation) = if s == stages - 1 {
                (classes, Activation::Identity)
            } else {
                (hidden, Activation::Tanh)
            };
            StageModel {
                in_dim,
                out_dim,
                activation,
            }
        })
        .collect()
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Affine transform + activation over a batch of rows.
pub fn forward_stage(model: &StageModel, params: &[f64], inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_len(model.param_len(), params.len())?;
    let (w, b) = params.split_at(model.in_dim * model.out_dim);
    let mut out = Vec::with_capacity(inputs.len());
    for row in inputs {
        check_len(model.in_dim, row.len())?;
        let mut y = b.to_vec();
        for (i, &x) in row.iter().enumerate() {
            let wrow = &w[i * model.out_dim..(i + 1) * model.out_dim];
            for (j, &wij) in wrow.iter().enumerate() {
                y[j] += x * wij;
            }
        }
        if model.activation == Activation::Tanh {
            for v in &mut y {
                *v = v.tanh();
            }
        }
        out.push(y);
    }
    Ok(out)
}

/// Backward through one stage given the cached forward inputs/outputs and
/// the upstream gradient w.r.t. this stage's outputs. Returns the flat
/// parameter gradient and the gradient w.r.t. the inputs.
///
/// `params` are the weights the backward runs on; under the staleness
/// policies they may differ from the weights that produced the cache.
pub fn backward_stage(
    model: &StageModel,
    params: &[f64],
    inputs: &[Vec<f64>],
    outputs: &[Vec<f64>],
    upstream: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    check_len(model.param_len(), params.len())?;
    check_len(inputs.len(), upstream.len())?;
    check_len(inputs.len(), outputs.len())?;
    let (w, _) = params.split_at(model.in_dim * model.out_dim);
    let mut grad = vec![0.0; model.param_len()];
    let (gw, gb) = grad.split_at_mut(model.in_dim * model.out_dim);
    let mut downstream = Vec::with_capacity(inputs.len());
    for ((x, y), up) in inputs.iter().zip(outputs).zip(upstream) {
        check_len(model.out_dim, up.len())?;
        // dz = dL/d(pre-activation)
        let dz: Vec<f64> = match model.activation {
            Activation::Identity => up.clone(),
            Activation::Tanh => up
                .iter()
                .zip(y)
                .map(|(&u, &a)| u * (1.0 - a * a))
                .collect(),
        };
        for (i, &xi) in x.iter().enumerate() {
            let grow = &mut gw[i * model.out_dim..(i + 1) * model.out_dim];
            for (j, &dzj) in dz.iter().enumerate() {
                grow[j] += xi * dzj;
            }
        }
        for (j, &dzj) in dz.iter().enumerate() {
            gb[j] += dzj;
        }
        let mut dx = vec![0.0; model.in_dim];
        for (i, dxi) in dx.iter_mut().enumerate() {
            let wrow = &w[i * model.out_dim..(i + 1) * model.out_dim];
            *dxi = wrow.iter().zip(&dz).map(|(&wij, &dzj)| wij * dzj).sum();
        }
        downstream.push(dx);
    }
    Ok((grad, downstream))
}

/// Mean cross-entropy through softmax and its gradient w.r.t. the logits.
/// `scale` divides the gradient, so callers can aggregate micro-batches as a
/// mean over the whole mini-batch.
pub fn softmax_cross_entropy(
    logits: &[Vec<f64>],
    labels: &[usize],
    scale: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_len(logits.len(), labels.len())?;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &label) in logits.iter().zip(labels) {
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss -= (exps[label] / sum).ln();
        let g: Vec<f64> = exps
            .iter()
            .enumerate()
            .map(|(j, &e)| (e / sum - if j == label { 1.0 } else { 0.0 }) / scale as f64)
            .collect();
        grads.push(g);
    }
    Ok((loss / logits.len() as f64, grads))
}

pub fn top1_correct(logits: &[Vec<f64>], labels: &[usize]) -> usize {
    logits
        .iter()
        .zip(labels)
        .filter(|(z, &label)| {
            let best = z
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            best == label
        })
        .count()
}
