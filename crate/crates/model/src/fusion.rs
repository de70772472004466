//! Mixture-of-experts fusion of a visual and a topological feature.
//!
//! Both raw features are projected to a shared width. Five experts read
//! them: visual only, topology only, concatenation, gated blending and
//! single-token cross-attention. A gating MLP with softmax weighs the expert
//! outputs and a final MLP maps the weighted sum to the embedding `z`.

use rand::Rng;
use topocl_nn::{Graph, Mlp, MultiHeadAttention, ParameterSet, Segment, Tensor, Var};

use crate::config::FusionConfig;
use crate::error::Result;

pub const NUM_EXPERTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub config: FusionConfig,
    pub proj_visual: Mlp,
    pub proj_topo: Mlp,
    /// Expert networks e1..e5.
    pub experts: Vec<Mlp>,
    /// Produces the logits of the expert-4 blend `g`.
    pub blend: Mlp,
    /// Expert 5: `f` querying `t`, and `t` querying `f`.
    pub cross_ft: MultiHeadAttention,
    pub cross_tf: MultiHeadAttention,
    pub gating: Mlp,
    pub head: Mlp,
}

#[derive(Debug, Clone)]
pub struct FusionVars {
    pub f: Var,
    pub t: Var,
    pub blend: Var,
    pub experts: Vec<Var>,
    pub gate: Var,
    pub h: Var,
    pub z: Var,
}

fn dims(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend(hidden);
    d.push(out);
    d
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParameterSet,
        name: &str,
        config: &FusionConfig,
        visual_dim: usize,
        topo_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let e = config.embed;
        let proj_visual = Mlp::new(set, &format!("{name}.proj_v"), &dims(visual_dim, &config.proj_hidden, e), rng)?;
        let proj_topo = Mlp::new(set, &format!("{name}.proj_t"), &dims(topo_dim, &config.proj_hidden, e), rng)?;
        let inputs = [e, e, 2 * e, e, 2 * e];
        let experts = inputs
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                Mlp::new(
                    set,
                    &format!("{name}.expert{}", i + 1),
                    &dims(d, &config.expert_hidden, config.expert_out),
                    rng,
                )
            })
            .collect::<topocl_nn::Result<Vec<_>>>()?;
        let blend = Mlp::new(set, &format!("{name}.blend"), &[2 * e, e, e, e], rng)?;
        let cross_ft = MultiHeadAttention::new(set, &format!("{name}.cross_ft"), e, config.heads, rng)?;
        let cross_tf = MultiHeadAttention::new(set, &format!("{name}.cross_tf"), e, config.heads, rng)?;
        let gating = Mlp::new(set, &format!("{name}.gating"), &dims(2 * e, &config.gate_hidden, NUM_EXPERTS), rng)?;
        let head = Mlp::new(set, &format!("{name}.head"), &dims(config.expert_out, &config.final_hidden, config.out), rng)?;
        Ok(Self {
            config: config.clone(),
            proj_visual,
            proj_topo,
            experts,
            blend,
            cross_ft,
            cross_tf,
            gating,
            head,
        })
    }

    /// Projects raw features (`B x visual_dim`, `B x topo_dim`).
    pub fn project(&self, g: &mut Graph, set: &ParameterSet, visual: Var, topo: Var) -> Result<(Var, Var)> {
        Ok((
            self.proj_visual.forward(g, set, visual)?,
            self.proj_topo.forward(g, set, topo)?,
        ))
    }

    /// Expert outputs for projected features; also returns the blend `g`.
    pub fn run_experts(&self, g: &mut Graph, set: &ParameterSet, f: Var, t: Var) -> Result<(Vec<Var>, Var)> {
        let ft = g.concat_cols(&[f, t])?;
        let e1 = self.experts[0].forward(g, set, f)?;
        let e2 = self.experts[1].forward(g, set, t)?;
        let e3 = self.experts[2].forward(g, set, ft)?;

        let logits = self.blend.forward(g, set, ft)?;
        let blend = g.sigmoid(logits);
        // t + g(f - t) = g f + (1 - g) t, and stays exactly f when f == t
        let diff = g.sub(f, t)?;
        let moved = g.mul(blend, diff)?;
        let mixed = g.add(t, moved)?;
        let e4 = self.experts[3].forward(g, set, mixed)?;

        // each sample is a one-token sequence attending to its own other token
        let n = g.shape(f).0;
        let segments: Vec<Segment> = (0..n)
            .map(|i| Segment {
                query: i..i + 1,
                key: i..i + 1,
            })
            .collect();
        let af = self.cross_ft.forward_segments(g, set, f, t, segments.clone(), None)?;
        let at = self.cross_tf.forward_segments(g, set, t, f, segments, None)?;
        let f2 = g.add(f, af)?;
        let t2 = g.add(t, at)?;
        let ft2 = g.concat_cols(&[f2, t2])?;
        let e5 = self.experts[4].forward(g, set, ft2)?;
        Ok((vec![e1, e2, e3, e4, e5], blend))
    }

    /// Full fusion from raw features.
    pub fn forward(&self, g: &mut Graph, set: &ParameterSet, visual: Var, topo: Var) -> Result<FusionVars> {
        let (f, t) = self.project(g, set, visual, topo)?;
        let (experts, blend) = self.run_experts(g, set, f, t)?;
        let ft = g.concat_cols(&[f, t])?;
        let logits = self.gating.forward(g, set, ft)?;
        let gate = g.softmax_rows(logits);
        let h = weighted_sum(g, gate, &experts)?;
        let z = self.head.forward(g, set, h)?;
        Ok(FusionVars {
            f,
            t,
            blend,
            experts,
            gate,
            h,
            z,
        })
    }
}

/// `sum_i gate[:, i] * e_i` with per-row weights.
fn weighted_sum(g: &mut Graph, gate: Var, experts: &[Var]) -> Result<Var> {
    let width = g.shape(experts[0]).1;
    let ones = g.constant(Tensor::filled(1, width, 1.0));
    let mut acc: Option<Var> = None;
    for (i, &e) in experts.iter().enumerate() {
        let col = g.slice_cols(gate, i..i + 1)?;
        let spread = g.matmul(col, ones)?;
        let term = g.mul(spread, e)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one expert"))
}
