//! Central finite-difference verification of analytic gradients.

use super::layers::{Layer, Sequential};
use super::loss::{cross_entropy_label, softmax, softmax_ce_grad};
use super::tensor::{NnError, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-4;

/// A scalar loss with analytic parameter gradients.
pub trait Differentiable {
    type Input;

    fn param_names(&self) -> Vec<String>;

    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn gradients(&self, input: &Self::Input, label: usize) -> Result<Vec<Vec<f64>>, NnError>;

    /// Loss plus the on/off pattern of every ReLU input. Perturbations that
    /// flip the pattern straddle a kink and are not comparable.
    fn loss_and_pattern(&self, input: &Self::Input, label: usize) -> Result<(f64, Vec<bool>), NnError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn skipped_kinks(&self) -> usize {
        self.groups.iter().map(|g| g.skipped_kinks).sum()
    }
}

pub fn relative_error(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8)
}

pub fn gradient_check<D: Differentiable>(
    net: &mut D,
    input: &D::Input,
    label: usize,
    epsilon: f64,
) -> Result<GradCheckReport, NnError> {
    let analytic = net.gradients(input, label)?;
    let (_, base) = net.loss_and_pattern(input, label)?;
    let names = net.param_names();
    let mut groups = Vec::with_capacity(names.len());
    for (g, name) in names.into_iter().enumerate() {
        let n = analytic[g].len();
        let mut check = GroupCheck {
            name,
            max_rel_error: 0.0,
            checked: 0,
            skipped_kinks: 0,
        };
        for j in 0..n {
            let orig = net.params_mut()[g][j];
            net.params_mut()[g][j] = orig + epsilon;
            let (plus, pat_plus) = net.loss_and_pattern(input, label)?;
            net.params_mut()[g][j] = orig - epsilon;
            let (minus, pat_minus) = net.loss_and_pattern(input, label)?;
            net.params_mut()[g][j] = orig;
            if pat_plus != base || pat_minus != base {
                check.skipped_kinks += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * epsilon);
            check.max_rel_error = check.max_rel_error.max(relative_error(fd, analytic[g][j]));
            check.checked += 1;
        }
        groups.push(check);
    }
    Ok(GradCheckReport { groups })
}

impl Differentiable for Sequential {
    type Input = Tensor;

    fn param_names(&self) -> Vec<String> {
        self.param_group_names("")
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        Sequential::params_mut(self)
    }

    fn gradients(&self, input: &Tensor, label: usize) -> Result<Vec<Vec<f64>>, NnError> {
        let acts = self.forward_trace(input.clone())?;
        let probs = softmax(acts.last().expect("output").data());
        let mut grads = self.zero_grads();
        self.backward(&acts, Tensor::from_vec(softmax_ce_grad(&probs, label)), &mut grads)?;
        Ok(grads)
    }

    fn loss_and_pattern(&self, input: &Tensor, label: usize) -> Result<(f64, Vec<bool>), NnError> {
        let acts = self.forward_trace(input.clone())?;
        let probs = softmax(acts.last().expect("output").data());
        let mut pattern = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::Relu) {
                pattern.extend(acts[i].data().iter().map(|&v| v > 0.0));
            }
        }
        Ok((cross_entropy_label(&probs, label), pattern))
    }
}
