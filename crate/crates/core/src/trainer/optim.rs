use crate::tensor::Tensor;

pub const RMS_DECAY: f32 = 0.9;
pub const RMS_EPS: f32 = 1e-8;

/// RMSProp without momentum:
/// `acc = 0.9 acc + 0.1 g^2`, `p -= lr g / (sqrt(acc) + 1e-8)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    accumulators: Vec<Tensor>,
}

impl RmsProp {
    /// Zeroed accumulators shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            accumulators: params
                .into_iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
        }
    }

    pub fn from_accumulators(accumulators: Vec<Tensor>) -> Self {
        Self { accumulators }
    }

    pub fn accumulators(&self) -> &[Tensor] {
        &self.accumulators
    }

    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        lr: f32,
    ) {
        let mut count = 0;
        for ((p, g), acc) in params.zip(grads).zip(&mut self.accumulators) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            assert_eq!(p.shape(), acc.shape(), "accumulator shape");
            for ((pv, &gv), av) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(acc.data_mut().iter_mut())
            {
                *av = RMS_DECAY * *av + (1.0 - RMS_DECAY) * gv * gv;
                *pv -= lr * gv / (av.sqrt() + RMS_EPS);
            }
            count += 1;
        }
        assert_eq!(count, self.accumulators.len(), "parameter count");
    }
}

/// Free-function form of [`RmsProp::step`].
pub fn optimizer_step<'a>(
    params: impl Iterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut RmsProp,
    lr: f32,
) {
    state.step(params, grads, lr);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::from_fn([3], |i| i as f32)];
        let before = p.clone();
        let mut opt = RmsProp::new(&p);
        opt.step(p.iter_mut(), &[Tensor::zeros([3])], 0.1);
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr_sign() {
        let lr = 1e-3;
        let mut p = vec![Tensor::zeros([2])];
        let mut opt = RmsProp::new(&p);
        let g = Tensor::new([2], vec![0.5, -4.0]).unwrap();
        let mut last = p[0].clone();
        let mut step = [0.0f32; 2];
        for _ in 0..200 {
            opt.step(p.iter_mut(), std::slice::from_ref(&g), lr);
            step = [
                p[0].data()[0] - last.data()[0],
                p[0].data()[1] - last.data()[1],
            ];
            last = p[0].clone();
        }
        assert!((step[0] + lr).abs() < 1e-6, "{step:?}");
        assert!((step[1] - lr).abs() < 1e-6, "{step:?}");
    }

    #[test]
    fn deterministic_given_state() {
        let g = vec![Tensor::from_fn([4], |i| (i as f32 - 1.5) * 0.3)];
        let run = || {
            let mut p = vec![Tensor::ones([4])];
            let mut opt = RmsProp::new(&p);
            for _ in 0..5 {
                opt.step(p.iter_mut(), &g, 0.01);
            }
            (p, opt)
        };
        assert_eq!(run(), run());
    }
}
