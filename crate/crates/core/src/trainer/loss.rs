//! Critic and generator objectives.
//!
//! Critic: `L(D) = -E[D(I_f, I_m)] + E[D(I_f, T(I_m))]` over aligned pairs
//! and random perturbations `T`.
//!
//! Generator: `L(G) = E[1 - D(I_f, T_est(T(I_m))) + alpha * |T_est - T^-1|^2]`
//! with `T_est = G(I_f, T(I_m))`. The critic is held fixed during the
//! generator step; gradients still flow through it into the warp.

use crate::geometry::RigidParams2D;
use crate::nets::{pair_input, Network};
use crate::resampler::{warp, warp_var};
use crate::synthdata::ImagePair;
use crate::tensor::{self, Graph, Result, Tensor, Var};

/// A minibatch of aligned pairs with one perturbation per item.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[N,C,H,W]`.
    pub fixed: Tensor,
    /// Aligned moving images, `[N,C,H,W]`.
    pub aligned: Tensor,
    /// `warp(aligned[i], perturbations[i])`.
    pub perturbed: Tensor,
    pub perturbations: Vec<RigidParams2D>,
}

impl Batch {
    pub fn new(pairs: &[&ImagePair], perturbations: &[RigidParams2D]) -> Result<Self> {
        assert_eq!(pairs.len(), perturbations.len());
        let fixed: Vec<Tensor> = pairs.iter().map(|p| p.fixed.clone()).collect();
        let aligned: Vec<Tensor> = pairs.iter().map(|p| p.moving.clone()).collect();
        let perturbed = pairs
            .iter()
            .zip(perturbations)
            .map(|(p, &t)| warp(&p.moving, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            fixed: Tensor::stack(&fixed)?,
            aligned: Tensor::stack(&aligned)?,
            perturbed: Tensor::stack(&perturbed)?,
            perturbations: perturbations.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.perturbations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perturbations.is_empty()
    }

    /// `[N,3]` tensor of the inverse perturbations, the regression target.
    pub fn inverse_targets(&self) -> Tensor {
        let data = self
            .perturbations
            .iter()
            .flat_map(|t| t.invert().to_f32())
            .collect();
        Tensor::new([self.len(), 3], data).expect("targets")
    }
}

/// `mean(perturbed) - mean(aligned)`.
pub fn critic_objective<'g>(aligned_scores: Var<'g>, perturbed_scores: Var<'g>) -> Result<Var<'g>> {
    let real = tensor::reduce_mean(aligned_scores)?;
    let fake = tensor::reduce_mean(perturbed_scores)?;
    tensor::sub(fake, real)
}

/// `1 - mean(scores) + alpha * |t_est - t_inv|^2 / N` for `[N,3]` parameters.
pub fn generator_objective<'g>(
    scores: Var<'g>,
    t_est: Var<'g>,
    t_inv: Var<'g>,
    alpha: f32,
) -> Result<Var<'g>> {
    let n = t_est.shape()[0].max(1);
    let adversarial = tensor::add_scalar(tensor::scale(tensor::reduce_mean(scores)?, -1.0), 1.0);
    let distance = tensor::scale(tensor::squared_l2(t_est, t_inv)?, alpha / n as f32);
    tensor::add(adversarial, distance)
}

/// Loss value and gradients for every parameter of the network being
/// trained, in [`Network::params`] order.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f32,
    pub grads: Vec<Tensor>,
}

fn collect(graph: &Graph, root: Var<'_>, vars: &[Var<'_>]) -> Result<LossOutput> {
    let loss = root.value().item();
    let mut grads = graph.backward(root)?;
    let grads = vars
        .iter()
        .map(|&v| grads.take(v).expect("trainable leaf has a gradient"))
        .collect();
    Ok(LossOutput { loss, grads })
}

/// Critic loss over a batch with gradients for the critic.
pub fn critic_loss(d: &Network, batch: &Batch) -> Result<LossOutput> {
    let graph = Graph::new();
    let bound = d.bind(&graph, true);
    let aligned = graph.constant(batch.aligned.clone());
    let perturbed = graph.constant(batch.perturbed.clone());
    let real = bound.forward(pair_input(&graph, &batch.fixed, aligned)?)?;
    let fake = bound.forward(pair_input(&graph, &batch.fixed, perturbed)?)?;
    let root = critic_objective(real, fake)?;
    collect(&graph, root, bound.vars())
}

/// Generator loss over a batch with gradients for the generator only.
pub fn generator_loss(g: &Network, d: &Network, batch: &Batch, alpha: f32) -> Result<LossOutput> {
    let graph = Graph::new();
    let gen = g.bind(&graph, true);
    let critic = d.bind(&graph, false);
    let perturbed = graph.constant(batch.perturbed.clone());
    let t_est = gen.forward(pair_input(&graph, &batch.fixed, perturbed)?)?;
    let resampled = warp_var(perturbed, t_est)?;
    let scores = critic.forward(pair_input(&graph, &batch.fixed, resampled)?)?;
    let t_inv = graph.constant(batch.inverse_targets());
    let root = generator_objective(scores, t_est, t_inv, alpha)?;
    collect(&graph, root, gen.vars())
}

fn singleton(pair: &ImagePair, perturb_t: RigidParams2D) -> Result<Batch> {
    Batch::new(&[pair], &[perturb_t])
}

/// Critic loss for one pair and one perturbation.
pub fn d_loss(d: &Network, pair: &ImagePair, perturb_t: RigidParams2D) -> Result<f32> {
    Ok(critic_loss(d, &singleton(pair, perturb_t)?)?.loss)
}

/// Generator loss for one pair and one perturbation.
pub fn g_loss(
    g: &Network,
    d: &Network,
    pair: &ImagePair,
    perturb_t: RigidParams2D,
    alpha: f32,
) -> Result<f32> {
    Ok(generator_loss(g, d, &singleton(pair, perturb_t)?, alpha)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts<'g>(g: &'g Graph, v: &[f32], shape: &[usize]) -> Var<'g> {
        g.constant(Tensor::new(shape.to_vec(), v.to_vec()).unwrap())
    }

    #[test]
    fn critic_objective_examples() {
        let g = Graph::new();
        let half = consts(&g, &[0.5, 0.5], &[2, 1]);
        assert_eq!(critic_objective(half, half).unwrap().value().item(), 0.0);
        let ones = consts(&g, &[1.0, 1.0], &[2, 1]);
        let zeros = consts(&g, &[0.0, 0.0], &[2, 1]);
        assert_eq!(critic_objective(ones, zeros).unwrap().value().item(), -1.0);
    }

    #[test]
    fn generator_objective_examples() {
        let g = Graph::new();
        let t = RigidParams2D::new(0.2, 0.05, -0.1);
        let inv = t.invert().to_f32();
        let t_est = consts(&g, &inv, &[1, 3]);
        let t_inv = consts(&g, &inv, &[1, 3]);
        let one = consts(&g, &[1.0], &[1, 1]);
        assert_eq!(
            generator_objective(one, t_est, t_inv, 1.0)
                .unwrap()
                .value()
                .item(),
            0.0
        );

        let ident = consts(&g, &[0.0; 3], &[1, 3]);
        let half = consts(&g, &[0.5], &[1, 1]);
        assert_eq!(
            generator_objective(half, ident, ident, 1.0)
                .unwrap()
                .value()
                .item(),
            0.5
        );

        let off = consts(&g, &[0.0, 1.0, 0.0], &[1, 3]);
        let v0 = generator_objective(half, off, ident, 0.0)
            .unwrap()
            .value()
            .item();
        assert_eq!(v0, 0.5);
        let v2 = generator_objective(half, off, ident, 2.0)
            .unwrap()
            .value()
            .item();
        assert_eq!(v2, 2.5);
    }

    #[test]
    fn inverse_targets_follow_perturbations() {
        let pair = crate::synthdata::generate_pair(1, 32, 1, 1.0).unwrap();
        let t = RigidParams2D::new(0.3, 0.1, 0.0);
        let b = Batch::new(&[&pair, &pair], &[t, RigidParams2D::IDENTITY]).unwrap();
        let tgt = b.inverse_targets();
        assert_eq!(tgt.shape(), &[2, 3]);
        assert_eq!(&tgt.data()[..3], &t.invert().to_f32());
        assert_eq!(&tgt.data()[3..], &[0.0, 0.0, 0.0]);
        assert_eq!(
            b.perturbed.index_outer(1),
            warp(&pair.moving, RigidParams2D::IDENTITY).unwrap()
        );
    }
}
