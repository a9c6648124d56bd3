//! Test support: hand-built forward passes with fully controlled layer
//! predictions and flows. Used by unit and acceptance tests to exercise
//! the losses against independent oracles and finite differences.
#![doc(hidden)]

use crate::autodiff::Graph;
use crate::flow::PairFlows;
use crate::geom::build_pyramid;
use crate::image::{Image, ImageSequence};
use crate::model::{DecompositionResult, ForwardPass, LevelState, PairVars, TaskMode};

/// Exact per-level content of a synthetic pass.
pub struct SyntheticPass {
    pub mode: TaskMode,
    pub keyframe: usize,
    /// `frames[t]` full-resolution inputs; pyramids are derived.
    pub frames: ImageSequence,
    /// `backgrounds[level][t]`, coarsest first.
    pub backgrounds: Vec<Vec<Image>>,
    /// Reflection layers or alpha maps, same indexing.
    pub secondaries: Vec<Vec<Image>>,
    /// Per-level background flows.
    pub flows_background: Vec<PairFlows>,
    /// Per-level reflection/foreground flows.
    pub flows_secondary: Vec<Option<PairFlows>>,
    /// Initial per-pair flow fields (coarsest level).
    pub initial_background: PairFlows,
    pub initial_secondary: Option<PairFlows>,
}

impl SyntheticPass {
    /// Builds a [`ForwardPass`] whose layer predictions and initial
    /// flows are trainable leaves, so losses can be differentiated with
    /// respect to them directly.
    pub fn build(&self) -> ForwardPass {
        let levels = self.backgrounds.len() - 1;
        let t = self.frames.len();
        let pyramids: Vec<Vec<Image>> = self
            .frames
            .frames()
            .iter()
            .map(|f| build_pyramid(f, levels).expect("synthetic frames fit the pyramid"))
            .collect();

        let mut graph = Graph::new();
        let mut states = Vec::new();
        for (l, (bgs, secs)) in self
            .backgrounds
            .iter()
            .zip(self.secondaries.iter())
            .enumerate()
        {
            let background = bgs
                .iter()
                .enumerate()
                .map(|(k, img)| graph.param(&format!("b.{l}.{k}"), img.clone().into_dyn(), true))
                .collect();
            let secondary = secs
                .iter()
                .enumerate()
                .map(|(k, img)| graph.param(&format!("s.{l}.{k}"), img.clone().into_dyn(), true))
                .collect();
            states.push(LevelState {
                background,
                secondary,
                flows_background: self.flows_background[l].clone(),
                flows_secondary: self.flows_secondary[l].clone(),
            });
        }

        let mut init_b = Vec::new();
        let mut init_s = Vec::new();
        for (src, dst) in PairFlows::pairs(t) {
            init_b.push(graph.param(
                &format!("f.b.{src}.{dst}"),
                self.initial_background.get(src, dst).clone().into_dyn(),
                true,
            ));
            if let Some(sec) = &self.initial_secondary {
                init_s.push(graph.param(
                    &format!("f.s.{src}.{dst}"),
                    sec.get(src, dst).clone().into_dyn(),
                    true,
                ));
            }
        }

        ForwardPass {
            graph,
            result: DecompositionResult {
                mode: self.mode,
                keyframe: self.keyframe,
                levels: states,
            },
            pyramids,
            initial_background: PairVars::from_vec(t, init_b),
            initial_secondary: self
                .initial_secondary
                .as_ref()
                .map(|_| PairVars::from_vec(t, init_s)),
        }
    }
}
