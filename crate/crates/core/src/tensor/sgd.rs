use super::{ParamGroup, Parameter, Real};
use crate::error::{Error, Result};

/// L2 coefficient per parameter group; the penalty `λ‖p‖²` contributes `2λp` to the step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WeightDecay {
    pub backbone: f64,
    pub prototype: f64,
    pub last_layer: f64,
}

impl WeightDecay {
    pub fn prototypes_only(lambda: f64) -> Self {
        Self { prototype: lambda, ..Self::default() }
    }

    pub fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Prototype => self.prototype,
            ParamGroup::LastLayer => self.last_layer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

/// One SGD update over the trainable parameters of `group`:
/// `v ← μv + g + 2λp`, `p ← p − lr·v`. Gradients of updated parameters are cleared.
///
/// Parameters of other groups are skipped untouched, gradient included.
pub fn sgd_step<'a, T, I>(params: I, group: ParamGroup, cfg: SgdConfig, decay: &WeightDecay) -> Result<()>
where
    T: Real,
    I: IntoIterator<Item = &'a mut Parameter<T>>,
{
    let lambda = T::of(2.0 * decay.for_group(group));
    let lr = T::of(cfg.lr);
    let mu = T::of(cfg.momentum);
    for p in params {
        if p.group() != group || !p.trainable {
            continue;
        }
        let grad = p.tensor.take_grad().ok_or_else(|| Error::MissingGradient(p.name().to_string()))?;
        let n = p.len();
        if cfg.momentum != 0.0 {
            let vel = p.velocity.get_or_insert_with(|| vec![T::zero(); n]);
            for ((v, &g), &w) in vel.iter_mut().zip(&grad).zip(p.tensor.data()) {
                *v = mu * *v + g + lambda * w;
            }
            let vel = p.velocity.take().expect("velocity set above");
            for (w, &v) in p.tensor.data_mut().iter_mut().zip(&vel) {
                *w = *w - lr * v;
            }
            p.velocity = Some(vel);
        } else {
            for (w, &g) in p.tensor.data_mut().iter_mut().zip(&grad) {
                *w = *w - lr * (g + lambda * *w);
            }
        }
        if !p.tensor.is_finite() {
            return Err(Error::NonFinite("sgd_step"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(group: ParamGroup, v: f64, g: Option<f64>) -> Parameter<f64> {
        let mut p = Parameter::new("p", group, Tensor::from_vec(&[1], vec![v]).unwrap());
        if let Some(g) = g {
            p.tensor.set_grad(vec![g]).unwrap();
        }
        p
    }

    const PLAIN: SgdConfig = SgdConfig { lr: 0.1, momentum: 0.0 };

    #[test]
    fn plain_step() {
        let mut p = scalar(ParamGroup::Backbone, 1.0, Some(1.0));
        sgd_step([&mut p], ParamGroup::Backbone, PLAIN, &WeightDecay::default()).unwrap();
        assert!((p.values()[0] - 0.9).abs() < 1e-15);
        assert!(p.tensor.grad().is_none());
    }

    #[test]
    fn decay_only_shrinks_prototypes() {
        let mut p = scalar(ParamGroup::Prototype, 2.0, Some(0.0));
        sgd_step([&mut p], ParamGroup::Prototype, PLAIN, &WeightDecay::prototypes_only(0.5)).unwrap();
        assert!((p.values()[0] - (2.0 - 0.1 * 2.0 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn backbone_ignores_prototype_decay() {
        let mut p = scalar(ParamGroup::Backbone, 2.0, Some(0.0));
        sgd_step([&mut p], ParamGroup::Backbone, PLAIN, &WeightDecay::prototypes_only(0.5)).unwrap();
        assert_eq!(p.values()[0], 2.0);
    }

    #[test]
    fn other_groups_untouched() {
        let mut p = scalar(ParamGroup::LastLayer, 2.0, Some(1.0));
        sgd_step([&mut p], ParamGroup::Backbone, PLAIN, &WeightDecay::default()).unwrap();
        assert_eq!(p.values()[0], 2.0);
        assert!(p.tensor.grad().is_some());
    }

    #[test]
    fn missing_gradient_errors() {
        let mut p = scalar(ParamGroup::Backbone, 1.0, None);
        let err = sgd_step([&mut p], ParamGroup::Backbone, PLAIN, &WeightDecay::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(_)));
    }
}
