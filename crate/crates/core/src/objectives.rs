//! Adversarial objectives: the cross-entropy GAN game, the Wasserstein critic
//! losses, the gradient penalty, the perceptual L1 term and weight clipping.
//!
//! Every loss is recorded on a [`Graph`] so the trainer can differentiate it.

use serde::{Deserialize, Serialize};

use crate::datapipe::SCALE_FACTOR;
use crate::diffgraph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Gan,
    Wgan,
    WganGp,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Gan => "gan",
            ObjectiveKind::Wgan => "wgan",
            ObjectiveKind::WganGp => "wgan_gp",
        }
    }

    /// Critic steps per generator step.
    pub fn default_n_critic(self) -> usize {
        match self {
            ObjectiveKind::Gan => 1,
            ObjectiveKind::Wgan | ObjectiveKind::WganGp => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Gradient-penalty weight; WGAN-GP only.
    pub lambda_gp: f64,
    /// Weight of the L1 term in the generator loss.
    pub gamma_l1: f64,
    /// Weight-clipping bound; WGAN only.
    pub clip_c: f64,
    pub n_critic: usize,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        ObjectiveConfig {
            kind,
            lambda_gp: 10.0,
            gamma_l1: 0.9,
            clip_c: 0.01,
            n_critic: kind.default_n_critic(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gp >= 0.0 && self.lambda_gp.is_finite()) {
            return Err(Error::config("objective.lambda_gp", "must be a finite value >= 0"));
        }
        if !(0.0..=1.0).contains(&self.gamma_l1) {
            return Err(Error::config("objective.gamma_l1", "must be within [0, 1]"));
        }
        if !(self.clip_c > 0.0 && self.clip_c.is_finite()) {
            return Err(Error::config("objective.clip_c", "must be a finite value > 0"));
        }
        if self.n_critic == 0 {
            return Err(Error::config("objective.n_critic", "must be at least 1"));
        }
        Ok(())
    }
}

fn check_probabilities(g: &Graph, id: NodeId, op: &'static str) -> Result<()> {
    match g.value(id).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Domain { op, detail: format!("{v} is not a probability") }),
        None => Ok(()),
    }
}

/// `mean(log(clamp(p)))`
fn mean_log(g: &mut Graph, p: NodeId) -> Result<NodeId> {
    let c = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let l = g.log(c)?;
    g.mean(l)
}

/// `−mean(log d_real) − mean(log(1 − d_fake))`
pub fn gan_d_loss(g: &mut Graph, d_real: NodeId, d_fake: NodeId) -> Result<NodeId> {
    check_probabilities(g, d_real, "gan_d_loss")?;
    check_probabilities(g, d_fake, "gan_d_loss")?;
    let real = mean_log(g, d_real)?;
    let neg = g.scale(d_fake, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let fake = mean_log(g, one_minus)?;
    let s = g.add(real, fake)?;
    g.scale(s, -1.0)
}

/// Non-saturating generator loss `−mean(log d_fake)`.
pub fn gan_g_loss(g: &mut Graph, d_fake: NodeId) -> Result<NodeId> {
    check_probabilities(g, d_fake, "gan_g_loss")?;
    let l = mean_log(g, d_fake)?;
    g.scale(l, -1.0)
}

/// Zero-sum generator loss, the exact negation of [`gan_d_loss`]. Training
/// uses [`gan_g_loss`]; this exists for comparison.
pub fn gan_zero_sum_g_loss(g: &mut Graph, d_real: NodeId, d_fake: NodeId) -> Result<NodeId> {
    let d = gan_d_loss(g, d_real, d_fake)?;
    g.scale(d, -1.0)
}

/// `mean(d_fake) − mean(d_real)`
pub fn wgan_d_loss(g: &mut Graph, d_real: NodeId, d_fake: NodeId) -> Result<NodeId> {
    let f = g.mean(d_fake)?;
    let r = g.mean(d_real)?;
    g.sub(f, r)
}

/// `−mean(d_fake)`
pub fn wgan_g_loss(g: &mut Graph, d_fake: NodeId) -> Result<NodeId> {
    let f = g.mean(d_fake)?;
    g.scale(f, -1.0)
}

/// `wgan_d_loss + λ·penalty`
pub fn wgan_gp_d_loss(
    g: &mut Graph,
    d_real: NodeId,
    d_fake: NodeId,
    penalty: NodeId,
    lambda_gp: f64,
) -> Result<NodeId> {
    let w = wgan_d_loss(g, d_real, d_fake)?;
    let p = g.scale(penalty, lambda_gp)?;
    g.add(w, p)
}

/// `x̂ = ε·x_real + (1 − ε)·x_fake` with one ε per batch row.
pub fn interpolate(x_real: &Tensor, x_fake: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if x_real.shape() != x_fake.shape() {
        return Err(Error::shape(
            "interpolate",
            format!("{:?} vs {:?}", x_real.shape(), x_fake.shape()),
        ));
    }
    if x_real.rank() == 0 || eps.shape() != [x_real.shape()[0]] {
        return Err(Error::shape(
            "interpolate",
            format!("eps {:?} for batch {:?}", eps.shape(), x_real.shape()),
        ));
    }
    if let Some(e) = eps.data().iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(Error::Domain { op: "interpolate", detail: format!("eps {e} outside [0, 1]") });
    }
    let row = x_real.row_len();
    let mut out = Vec::with_capacity(x_real.len());
    for (i, &e) in eps.data().iter().enumerate() {
        let (r, f) = (&x_real.data()[i * row..(i + 1) * row], &x_fake.data()[i * row..(i + 1) * row]);
        out.extend(r.iter().zip(f).map(|(&a, &b)| e * a + (1.0 - e) * b));
    }
    Tensor::new(x_real.shape().to_vec(), out)
}

/// `mean |f_d(x̃) − z|` over batch and pixels, with `f_d` the 4× block
/// average used to build training inputs.
pub fn l1_term(g: &mut Graph, generated: NodeId, input_z: NodeId) -> Result<NodeId> {
    let down = g.avg_pool(generated, SCALE_FACTOR)?;
    if g.shape(down) != g.shape(input_z) {
        return Err(Error::shape(
            "l1_term",
            format!("downscaled {:?} vs input {:?}", g.shape(down), g.shape(input_z)),
        ));
    }
    let d = g.sub(down, input_z)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// `(1 − γ)·j_g + γ·l1`
pub fn total_g_loss(g: &mut Graph, j_g: NodeId, l1: NodeId, gamma: f64) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain { op: "total_g_loss", detail: format!("gamma {gamma} outside [0, 1]") });
    }
    let a = g.scale(j_g, 1.0 - gamma)?;
    let b = g.scale(l1, gamma)?;
    g.add(a, b)
}

/// Clamps one tensor into `[−c, c]`; values already inside are untouched.
pub fn clip_tensor(t: &mut Tensor, c: f64) {
    if t.data().iter().any(|v| v.abs() > c) {
        for v in t.data_mut() {
            *v = v.clamp(-c, c);
        }
    }
}

/// Projects every trainable parameter of `model` into `[−c, c]`. Batch-norm
/// running statistics are left alone.
pub fn clip_weights(model: &mut Model, c: f64) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::Domain { op: "clip_weights", detail: format!("bound {c} must be > 0") });
    }
    for layer in model.layers_mut() {
        for (kind, t) in layer.params.iter_mut() {
            if kind.is_trainable() {
                clip_tensor(t, c);
            }
        }
    }
    Ok(())
}

/// Largest absolute trainable parameter.
pub fn max_abs_weight(model: &Model) -> f64 {
    model
        .layers()
        .iter()
        .flat_map(|l| l.params.iter())
        .filter(|(k, _)| k.is_trainable())
        .map(|(_, t)| t.max_abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_of(f: impl FnOnce(&mut Graph) -> Result<NodeId>) -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g)?;
        g.value(out).item()
    }

    fn v(g: &mut Graph, values: &[f64]) -> NodeId {
        g.constant(Tensor::vector(values)).unwrap()
    }

    #[test]
    fn gan_losses_at_half() {
        let d = scalar_of(|g| {
            let (r, f) = (v(g, &[0.5]), v(g, &[0.5]));
            gan_d_loss(g, r, f)
        })
        .unwrap();
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let gl = scalar_of(|g| {
            let f = v(g, &[0.5]);
            gan_g_loss(g, f)
        })
        .unwrap();
        assert!((gl - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gan_limits() {
        let d = scalar_of(|g| {
            let (r, f) = (v(g, &[1.0 - 1e-9]), v(g, &[1e-9]));
            gan_d_loss(g, r, f)
        })
        .unwrap();
        assert!(d.abs() < 1e-8);
        let gl = scalar_of(|g| {
            let f = v(g, &[1.0 - 1e-12]);
            gan_g_loss(g, f)
        })
        .unwrap();
        assert!(gl.abs() < 1e-11);
        // saturated sigmoid outputs are clamped rather than producing inf
        let sat = scalar_of(|g| {
            let (r, f) = (v(g, &[0.0]), v(g, &[1.0]));
            gan_d_loss(g, r, f)
        })
        .unwrap();
        assert!(sat.is_finite());
    }

    #[test]
    fn gan_domain_violation() {
        let mut g = Graph::new();
        let (r, f) = (v(&mut g, &[1.5]), v(&mut g, &[0.5]));
        assert!(matches!(gan_d_loss(&mut g, r, f), Err(Error::Domain { .. })));
        let f = v(&mut g, &[-0.1]);
        assert!(gan_g_loss(&mut g, f).is_err());
    }

    #[test]
    fn wgan_examples() {
        let d = scalar_of(|g| {
            let (r, f) = (v(g, &[2.0, 4.0]), v(g, &[1.0, 3.0]));
            wgan_d_loss(g, r, f)
        })
        .unwrap();
        assert_eq!(d, -1.0);
        let gl = scalar_of(|g| {
            let f = v(g, &[1.0, 3.0]);
            wgan_g_loss(g, f)
        })
        .unwrap();
        assert_eq!(gl, -2.0);
    }

    #[test]
    fn interpolate_endpoints() {
        let real = Tensor::full(&[2, 1, 2, 2], 4.0);
        let fake = Tensor::full(&[2, 1, 2, 2], 0.0);
        assert_eq!(interpolate(&real, &fake, &Tensor::vector(&[1.0, 1.0])).unwrap(), real);
        assert_eq!(interpolate(&real, &fake, &Tensor::vector(&[0.0, 0.0])).unwrap(), fake);
        let mid = interpolate(&real, &fake, &Tensor::vector(&[0.25, 0.25])).unwrap();
        assert!(mid.data().iter().all(|&x| x == 1.0));
        assert!(interpolate(&real, &Tensor::zeros(&[2, 1, 2, 1]), &Tensor::vector(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn gp_loss_compositions() {
        let val = scalar_of(|g| {
            let (r, f) = (v(g, &[2.0, 4.0]), v(g, &[1.0, 3.0]));
            let p = g.constant(Tensor::scalar(16.0))?;
            wgan_gp_d_loss(g, r, f, p, 10.0)
        })
        .unwrap();
        assert_eq!(val, 159.0);
        let zero_lambda = scalar_of(|g| {
            let (r, f) = (v(g, &[2.0, 4.0]), v(g, &[1.0, 3.0]));
            let p = g.constant(Tensor::scalar(16.0))?;
            wgan_gp_d_loss(g, r, f, p, 0.0)
        })
        .unwrap();
        assert_eq!(zero_lambda, -1.0);
    }

    #[test]
    fn total_g_loss_examples() {
        let t = |gamma| {
            scalar_of(|g| {
                let j = g.constant(Tensor::scalar(-2.0))?;
                let l = g.constant(Tensor::scalar(0.5))?;
                total_g_loss(g, j, l, gamma)
            })
        };
        assert!((t(0.9).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(t(0.0).unwrap(), -2.0);
        assert_eq!(t(1.0).unwrap(), 0.5);
        assert!(t(1.5).is_err());
    }

    #[test]
    fn clip_tensor_examples() {
        let mut t = Tensor::vector(&[-2.0, 0.005, 2.0]);
        clip_tensor(&mut t, 0.01);
        assert_eq!(t.data(), &[-0.01, 0.005, 0.01]);
        let once = t.clone();
        clip_tensor(&mut t, 0.01);
        assert_eq!(t, once);
    }

    #[test]
    fn config_validation_names_field() {
        let mut c = ObjectiveConfig::new(ObjectiveKind::WganGp);
        c.gamma_l1 = 1.5;
        match c.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "objective.gamma_l1"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(ObjectiveConfig::new(ObjectiveKind::Gan).n_critic, 1);
        assert_eq!(ObjectiveConfig::new(ObjectiveKind::Wgan).n_critic, 5);
    }
}
