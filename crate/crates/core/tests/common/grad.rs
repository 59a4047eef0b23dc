//! Finite-difference gradient checking of the training loss.

use super::{complete_input, cross_entropy, model_with_head, neg_cosine};
use flexprompt_core::autograd::Graph;
use flexprompt_core::flexdata::DenseInput;
use flexprompt_core::mmr::{apply_mask, MaskEvent, MaskKind};
use flexprompt_core::model::params::ParamId;
use flexprompt_core::prompt::{build_forward, prompted_forward};
use flexprompt_core::{Model, ModelConfig, Tensor};

pub const STEP: f64 = 1e-4;
/// Gradients below this magnitude are compared in absolute terms.
pub const FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy)]
pub enum Group {
    Prompt(ParamId),
    Backbone(ParamId),
}

fn trainable(m: &Model<f64>) -> Vec<(String, Group)> {
    let ps = m.prompts.store();
    let bb = m.backbone.store();
    let mut out: Vec<(String, Group)> = ps
        .ids()
        .filter(|&id| ps.param(id).trainable)
        .map(|id| (ps.param(id).name.clone(), Group::Prompt(id)))
        .collect();
    out.extend(
        bb.ids()
            .filter(|&id| bb.param(id).trainable)
            .map(|id| (bb.param(id).name.clone(), Group::Backbone(id))),
    );
    out
}

fn tensor_mut(m: &mut Model<f64>, g: Group) -> &mut Tensor<f64> {
    match g {
        Group::Prompt(id) => m.prompts.store_mut().get_mut(id),
        Group::Backbone(id) => m.backbone.store_mut().get_mut(id),
    }
}

pub struct Case {
    pub masked: DenseInput,
    pub complete: DenseInput,
    pub class: usize,
    lambda: f64,
}

/// Loss with the complete-branch embedding held at `target`.
pub fn loss_fixed_target(m: &Model<f64>, c: &Case, target: &Tensor<f64>) -> f64 {
    let out = prompted_forward(m, &c.masked).unwrap();
    cross_entropy(&out.logits, c.class) + c.lambda * neg_cosine(out.embedding.data(), target.data())
}

/// Loss with both branches depending on the parameters.
pub fn loss_both_branches(m: &Model<f64>, c: &Case) -> f64 {
    let target = prompted_forward(m, &c.complete).unwrap().embedding;
    loss_fixed_target(m, c, &target)
}

fn five_point(m: &Model<f64>, g: Group, k: usize, f: &dyn Fn(&Model<f64>) -> f64) -> f64 {
    let mut p = m.clone();
    let x0 = tensor_mut(&mut p, g).data()[k];
    let mut at = |dx: f64| {
        tensor_mut(&mut p, g).data_mut()[k] = x0 + dx;
        f(&p)
    };
    let (f2, f1, b1, b2) = (at(2.0 * STEP), at(STEP), at(-STEP), at(-2.0 * STEP));
    (-f2 + 8.0 * f1 - 8.0 * b1 + b2) / (12.0 * STEP)
}

/// Largest relative error over every trainable scalar.
pub fn max_rel_error(m: &Model<f64>, analytic: &[(String, Group, Tensor<f64>)], f: &dyn Fn(&Model<f64>) -> f64) -> (f64, String) {
    let mut worst = (0.0f64, String::new());
    for (name, g, grad) in analytic {
        for (k, &a) in grad.data().iter().enumerate() {
            let n = five_point(m, *g, k, f);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
            if err > worst.0 {
                worst = (err, format!("{name}[{k}]: analytic {a:e}, numeric {n:e}"));
            }
        }
    }
    worst
}

pub fn analytic_grads(m: &Model<f64>, c: &Case, stop_gradient: bool) -> Vec<(String, Group, Tensor<f64>)> {
    let mut g = Graph::new();
    let fa = build_forward(&mut g, m, &c.masked, true).unwrap();
    let ce = g.cross_entropy(fa.logits, c.class);
    let (target, extra) = if stop_gradient {
        let t = prompted_forward(m, &c.complete).unwrap().embedding;
        (g.constant(t), None)
    } else {
        let fb = build_forward(&mut g, m, &c.complete, true).unwrap();
        (fb.embedding, Some(fb.leaves))
    };
    let r = g.neg_cosine(fa.embedding, target, stop_gradient);
    let r = g.scale(r, c.lambda);
    let loss = g.add(ce, r);
    let grads = g.backward(loss);
    trainable(m)
        .into_iter()
        .map(|(name, grp)| {
            let leaf = |l: &flexprompt_core::prompt::ModelLeaves| match grp {
                Group::Prompt(id) => l.prompts[id.index()],
                Group::Backbone(id) => l.backbone[id.index()],
            };
            let shape = match grp {
                Group::Prompt(id) => m.prompts.get(id).shape(),
                Group::Backbone(id) => m.backbone.get(id).shape(),
            };
            let mut total = Tensor::zeros(shape.0, shape.1);
            for lv in std::iter::once(&fa.leaves).chain(extra.as_ref()) {
                if let Some(t) = grads.get(leaf(lv)) {
                    total.add_assign(t);
                }
            }
            (name, grp, total)
        })
        .collect()
}

pub fn case(cfg: &ModelConfig, kind: MaskKind, index: usize) -> Case {
    let (complete, label) = complete_input(cfg, 5, index);
    let masked = apply_mask(&complete, MaskEvent { kind, applicable: true });
    Case {
        masked,
        complete,
        class: label.class(),
        lambda: 1.0,
    }
}

/// `(nodes inspected, gradient entries)` for the complete branch's leaves
/// and embedding; unreached nodes contribute no entries.
pub fn complete_branch_gradient(m: &Model<f64>, c: &Case, stop_gradient: bool) -> (usize, Vec<f64>) {
    let mut g = Graph::new();
    let fa = build_forward(&mut g, m, &c.masked, true).unwrap();
    let fb = build_forward(&mut g, m, &c.complete, true).unwrap();
    let ce = g.cross_entropy(fa.logits, c.class);
    let r = g.neg_cosine(fa.embedding, fb.embedding, stop_gradient);
    let loss = g.add(ce, r);
    let grads = g.backward(loss);
    let nodes: Vec<_> = fb
        .leaves
        .prompts
        .iter()
        .chain(&fb.leaves.backbone)
        .chain(std::iter::once(&fb.embedding))
        .copied()
        .collect();
    let values = nodes.iter().filter_map(|&v| grads.get(v)).flat_map(|t| t.data().to_vec()).collect();
    (nodes.len(), values)
}

/// Worst relative error of the sg loss: `(error, location, scalars checked)`.
pub fn check_stop_gradient_loss(cfg: &ModelConfig, seed: u64, kind: MaskKind, index: usize) -> (f64, String, usize) {
    let m = model_with_head(cfg, seed);
    let c = case(cfg, kind, index);
    let target = prompted_forward(&m, &c.complete).unwrap().embedding;
    let analytic = analytic_grads(&m, &c, true);
    let scalars = analytic.iter().map(|a| a.2.len()).sum();
    let (err, at) = max_rel_error(&m, &analytic, &|p| loss_fixed_target(p, &c, &target));
    (err, at, scalars)
}

/// Worst relative error when both branches carry gradient.
pub fn check_full_loss(cfg: &ModelConfig, seed: u64, kind: MaskKind, index: usize) -> (f64, String) {
    let m = model_with_head(cfg, seed);
    let c = case(cfg, kind, index);
    let analytic = analytic_grads(&m, &c, false);
    max_rel_error(&m, &analytic, &|p| loss_both_branches(p, &c))
}
