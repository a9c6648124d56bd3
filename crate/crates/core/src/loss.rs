//! Training losses. All of them are built on the autodiff graph of a
//! completed forward pass so they can drive parameter updates.
//!
//! Normalization: every L1 term is a per-pixel mean so magnitudes are
//! resolution independent. The supervised loss keeps its outer
//! `1 / (T * L)` factor over the `L + 1` level sums; the decomposition
//! loss averages over pairs and sums the two layers; the unsupervised
//! terms sum over pairs/frames and levels with pixel-mean inside.

use serde::Serialize;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::flow::{PairFlows, PseudoGtFlows};
use crate::geom::build_pyramid;
use crate::image::ImageSequence;
use crate::model::{ForwardPass, TaskMode};

/// Loss weights, echoed into every report.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossWeights {
    pub lambda_grad: f64,
    pub lambda_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_grad: 1.0,
            lambda_tv: 0.1,
        }
    }
}

/// Named scalar loss terms of one evaluation. Fields not touched by the
/// evaluated loss stay zero.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LossReport {
    pub dec: f64,
    pub img: f64,
    pub grad: f64,
    pub supervised: f64,
    pub warp: f64,
    pub tv: f64,
    pub unsupervised: f64,
    pub lambda_grad: f64,
    pub lambda_tv: f64,
}

impl LossReport {
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("dec", self.dec),
            ("img", self.img),
            ("grad", self.grad),
            ("supervised", self.supervised),
            ("warp", self.warp),
            ("tv", self.tv),
            ("unsupervised", self.unsupervised),
        ]
    }
}

/// A scalar loss variable plus its report entries.
pub struct LossValue {
    pub total: Var,
    pub report: LossReport,
}

fn scalar(pass: &ForwardPass, v: Var) -> f64 {
    pass.graph.value(v)[[]]
}

/// Mean absolute error between the predicted initial flow fields and the
/// pseudo-ground-truth flows, averaged over pixels, components and
/// pairs, summed over layers.
pub fn decomposition_loss(pass: &mut ForwardPass, pseudo_gt: &PseudoGtFlows) -> Result<LossValue> {
    let pred_pairs = pass.initial_background.iter().count();
    let gt_pairs = PairFlows::pairs(pseudo_gt.background.num_frames()).len();
    if pred_pairs != gt_pairs {
        return Err(Error::ShapeMismatch {
            context: "decomposition_loss",
            expected: format!("{gt_pairs} flow pairs"),
            actual: format!("{pred_pairs} flow pairs"),
        });
    }

    let mut layer_terms: Vec<Var> = Vec::new();
    let add_layer = |pass: &mut ForwardPass,
                         pred: crate::model::PairVars,
                         gt: &PairFlows|
     -> Result<Var> {
        let mut terms = Vec::new();
        for ((src, dst), var) in pred.iter() {
            let gt_field = gt.get(src, dst);
            if pass.graph.value(var).shape() != gt_field.shape() {
                return Err(Error::ShapeMismatch {
                    context: "decomposition_loss",
                    expected: format!("{:?}", gt_field.shape()),
                    actual: format!("{:?}", pass.graph.value(var).shape()),
                });
            }
            let gt_c = pass.graph.constant(gt_field.clone().into_dyn());
            let term = pass.graph.mean_abs_diff(var, gt_c);
            terms.push((term, 1.0 / gt_pairs as f64));
        }
        Ok(pass.graph.sum_weighted(&terms))
    };

    let init_b = pass.initial_background.clone();
    layer_terms.push(add_layer(pass, init_b, &pseudo_gt.background)?);
    if let Some(init_r) = pass.initial_secondary.clone() {
        let gt_r = pseudo_gt.obstruction.as_ref().ok_or_else(|| {
            Error::InvalidArgument(
                "reflection-mode decomposition loss needs obstruction pseudo flows".into(),
            )
        })?;
        layer_terms.push(add_layer(pass, init_r, gt_r)?);
    }
    let weighted: Vec<(Var, f64)> = layer_terms.iter().map(|&v| (v, 1.0)).collect();
    let total = pass.graph.sum_weighted(&weighted);
    let report = LossReport {
        dec: scalar(pass, total),
        ..Default::default()
    };
    Ok(LossValue { total, report })
}

/// Image reconstruction loss plus gradient loss against ground-truth
/// layer pyramids: `supervised = img + lambda_grad * grad` with the
/// written `1 / (T * L)` outer factor over all frames and levels.
pub fn supervised_loss(
    pass: &mut ForwardPass,
    gt_background: &ImageSequence,
    gt_secondary: &ImageSequence,
    weights: &LossWeights,
) -> Result<LossValue> {
    let t = pass.result.levels[0].background.len();
    let num_levels = pass.result.levels.len();
    let l = num_levels - 1;
    if gt_background.len() != t || gt_secondary.len() != t {
        return Err(Error::ShapeMismatch {
            context: "supervised_loss",
            expected: format!("{t} ground-truth frames"),
            actual: format!(
                "{} background / {} secondary",
                gt_background.len(),
                gt_secondary.len()
            ),
        });
    }

    let outer = 1.0 / (t as f64 * l as f64);
    let mut img_terms: Vec<(Var, f64)> = Vec::new();
    let mut grad_terms: Vec<(Var, f64)> = Vec::new();

    for (frame, (gt_b, gt_s)) in gt_background
        .frames()
        .iter()
        .zip(gt_secondary.frames())
        .enumerate()
    {
        let pyr_b = build_pyramid(gt_b, l)?;
        let pyr_s = build_pyramid(gt_s, l)?;
        for level in 0..num_levels {
            for (pred, gt) in [
                (pass.result.levels[level].background[frame], &pyr_b[level]),
                (pass.result.levels[level].secondary[frame], &pyr_s[level]),
            ] {
                if pass.graph.value(pred).shape() != gt.shape() {
                    return Err(Error::ShapeMismatch {
                        context: "supervised_loss",
                        expected: format!("{:?}", gt.shape()),
                        actual: format!("{:?}", pass.graph.value(pred).shape()),
                    });
                }
                let g = &mut pass.graph;
                let gt_c = g.constant(gt.clone().into_dyn());
                img_terms.push((g.mean_abs_diff(pred, gt_c), outer));

                let (gt_gx, gt_gy) = crate::geom::spatial_gradient(gt);
                let gt_gx = g.constant(gt_gx.into_dyn());
                let gt_gy = g.constant(gt_gy.into_dyn());
                let pred_gx = g.grad_x(pred);
                let pred_gy = g.grad_y(pred);
                let dx = g.mean_abs_diff(pred_gx, gt_gx);
                let dy = g.mean_abs_diff(pred_gy, gt_gy);
                // The two gradient components average like one stacked map.
                grad_terms.push((dx, 0.5 * outer));
                grad_terms.push((dy, 0.5 * outer));
            }
        }
    }

    let img = pass.graph.sum_weighted(&img_terms);
    let grad = pass.graph.sum_weighted(&grad_terms);
    let total = pass
        .graph
        .sum_weighted(&[(img, 1.0), (grad, weights.lambda_grad)]);
    let report = LossReport {
        img: scalar(pass, img),
        grad: scalar(pass, grad),
        supervised: scalar(pass, total),
        lambda_grad: weights.lambda_grad,
        lambda_tv: weights.lambda_tv,
        ..Default::default()
    };
    Ok(LossValue { total, report })
}

/// Warping consistency plus total variation:
/// `unsupervised = warp + lambda_tv * tv`. Needs no ground truth; each
/// input frame is compared against the composite rebuilt from another
/// frame's layers under the per-level flows.
pub fn unsupervised_loss(pass: &mut ForwardPass, weights: &LossWeights) -> Result<LossValue> {
    let t = pass.result.levels[0].background.len();
    let num_levels = pass.result.levels.len();
    let mode = pass.result.mode;
    let channels = pass.pyramids[0][0].shape()[0];

    let mut warp_terms: Vec<(Var, f64)> = Vec::new();
    let mut tv_terms: Vec<(Var, f64)> = Vec::new();

    for level in 0..num_levels {
        let flows_b = pass.result.levels[level].flows_background.clone();
        let flows_s = pass.result.levels[level].flows_secondary.clone();
        let background: Vec<Var> = pass.result.levels[level].background.clone();
        let secondary: Vec<Var> = pass.result.levels[level].secondary.clone();

        for k in 0..t {
            for j in 0..t {
                if j == k {
                    continue;
                }
                let g = &mut pass.graph;
                // Reconstruct frame j from keyframe k's layers.
                let composite = match mode {
                    TaskMode::Reflection => {
                        let flows_r = flows_s.as_ref().expect("reflection flows");
                        let wb = g.warp(background[k], flows_b.get(j, k));
                        let wr = g.warp(secondary[k], flows_r.get(j, k));
                        g.add(wb, wr)
                    }
                    TaskMode::Obstruction => {
                        let flows_f = flows_s.as_ref().expect("foreground flows");
                        let alpha = secondary[k];
                        let alpha_c = if channels > 1 {
                            let copies = vec![alpha; channels];
                            g.concat_channels(&copies)
                        } else {
                            alpha
                        };
                        let frame_k = g.constant(pass.pyramids[k][level].clone().into_dyn());
                        let fg = g.mul(alpha_c, frame_k);
                        let w_fg = g.warp(fg, flows_f.get(j, k));
                        let neg = g.scale(alpha_c, -1.0);
                        let inv = g.add_scalar(neg, 1.0);
                        let w_inv = g.warp(inv, flows_f.get(j, k));
                        let w_b = g.warp(background[k], flows_b.get(j, k));
                        let occluded = g.mul(w_inv, w_b);
                        g.add(w_fg, occluded)
                    }
                };
                let frame_j = pass.pyramids[j][level].clone();
                let g = &mut pass.graph;
                let frame_c = g.constant(frame_j.into_dyn());
                warp_terms.push((g.mean_abs_diff(frame_c, composite), 1.0));
            }

            let g = &mut pass.graph;
            for layer in [background[k], secondary[k]] {
                let gx = g.grad_x(layer);
                let gy = g.grad_y(layer);
                let mx = g.mean_abs(gx);
                let my = g.mean_abs(gy);
                tv_terms.push((mx, 0.5));
                tv_terms.push((my, 0.5));
            }
        }
    }

    let warp = pass.graph.sum_weighted(&warp_terms);
    let tv = pass.graph.sum_weighted(&tv_terms);
    let total = pass
        .graph
        .sum_weighted(&[(warp, 1.0), (tv, weights.lambda_tv)]);
    let report = LossReport {
        warp: scalar(pass, warp),
        tv: scalar(pass, tv),
        unsupervised: scalar(pass, total),
        lambda_grad: weights.lambda_grad,
        lambda_tv: weights.lambda_tv,
        ..Default::default()
    };
    Ok(LossValue { total, report })
}
