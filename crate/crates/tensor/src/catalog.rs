//! A scalar-valued probe for every primitive, used to validate backward
//! rules against finite differences.

use crate::error::Result;
use crate::init::Init;
use crate::tensor::Tensor;

pub type ProbeFn = Box<dyn Fn(&Tensor) -> Result<Tensor>>;

pub struct Probe {
    pub name: &'static str,
    pub f: ProbeFn,
    pub shape: Vec<usize>,
    /// The op is only defined for positive inputs.
    pub positive: bool,
    /// Twice differentiable everywhere on its sampling domain.
    pub smooth: bool,
}

impl Probe {
    /// Seeded evaluation point inside the op's domain.
    pub fn point(&self, seed: u64) -> Tensor {
        let init = if self.positive {
            Init::Uniform { low: 0.5, high: 2.0 }
        } else {
            Init::Uniform { low: -1.0, high: 1.0 }
        };
        Tensor::seeded(&self.shape, init, seed)
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::seeded(shape, Init::Uniform { low: -1.0, high: 1.0 }, seed)
}

/// Contracts `y` with fixed weights so the gradient is generic.
fn project(y: &Tensor) -> Result<Tensor> {
    y.dot(&random(y.shape(), 4242))
}

fn probe(name: &'static str, shape: &[usize], positive: bool, smooth: bool, f: impl Fn(&Tensor) -> Result<Tensor> + 'static) -> Probe {
    Probe {
        name,
        f: Box::new(f),
        shape: shape.to_vec(),
        positive,
        smooth,
    }
}

pub fn primitives() -> Vec<Probe> {
    let other = random(&[3, 4], 1001);
    let other_pos = Tensor::seeded(&[3, 4], Init::Uniform { low: 0.5, high: 2.0 }, 1002);
    let rhs = random(&[4, 2], 1003);
    let bias = random(&[4], 1004);
    let brhs = random(&[2, 4, 3], 1005);
    let (o1, o2) = (other.clone(), other.clone());
    vec![
        probe("add", &[3, 4], false, false, move |x| project(&x.add(&o1)?)),
        probe("sub", &[3, 4], false, false, move |x| project(&o2.sub(x)?)),
        probe("mul", &[3, 4], false, true, move |x| project(&x.mul(&other)?.mul(x)?)),
        probe("div", &[3, 4], true, true, move |x| project(&other_pos.div(x)?)),
        probe("neg_scale_shift", &[5], false, false, |x| project(&x.neg().scale(1.7).shift(0.3))),
        probe("exp", &[3, 4], false, true, |x| project(&x.exp()?)),
        probe("log", &[3, 4], true, true, |x| project(&x.log()?)),
        probe("powf", &[3, 4], true, true, |x| project(&x.powf(-1.5)?)),
        probe("sqrt", &[6], true, false, |x| project(&x.sqrt()?)),
        probe("relu", &[3, 4], false, false, |x| project(&x.relu())),
        probe("abs", &[3, 4], false, false, |x| project(&x.abs())),
        probe("matmul", &[3, 4], false, false, move |x| project(&x.matmul(&rhs)?)),
        probe("matmul_batched", &[2, 3, 4], false, false, move |x| project(&x.matmul(&brhs)?)),
        probe("softmax", &[3, 4], false, true, |x| project(&x.softmax(1)?)),
        probe("softmax_axis0", &[3, 4], false, false, |x| project(&x.softmax(0)?)),
        probe("layer_norm", &[3, 4], false, true, |x| project(&x.layer_norm(1e-5)?)),
        probe("sum_axis", &[3, 4], false, false, |x| project(&x.sum_axis(1, false)?)),
        probe("mean_axis", &[3, 4], false, false, |x| project(&x.mean_axis(0, true)?)),
        probe("max_axis", &[3, 4], false, false, |x| project(&x.max_axis(1, false)?)),
        probe("min_axis", &[3, 4], false, false, |x| project(&x.min_axis(0, true)?)),
        probe("reshape", &[3, 4], false, false, |x| project(&x.reshape(&[2, 6])?.exp()?)),
        probe("permute", &[2, 3, 4], false, true, |x| project(&x.permute(&[2, 0, 1])?.softmax(2)?)),
        probe("transpose", &[3, 4], false, false, |x| project(&x.t()?.exp()?)),
        probe("broadcast", &[4], false, false, move |x| project(&x.broadcast_to(&[3, 4])?.mul(&bias)?.exp()?)),
        probe("sum_to", &[3, 4], false, false, |x| project(&x.exp()?.sum_to(&[1, 4])?)),
        probe("gather_rows", &[3, 4], false, true, |x| project(&x.gather_rows(&[2, 0, 2, 1])?.exp()?)),
        probe("scatter_rows", &[3, 4], false, false, |x| project(&x.scatter_rows(&[1, 1, 0], 4)?.exp()?)),
        probe("concat", &[3, 4], false, true, |x| {
            let a = x.exp()?;
            project(&Tensor::concat(&[&a, x, &a], 1)?)
        }),
        probe("narrow", &[3, 4], false, false, |x| project(&x.narrow(1, 1, 2)?.exp()?)),
        probe("embed", &[3, 4], false, false, |x| project(&x.exp()?.embed(0, 1, 5)?)),
        probe("sum_all_mean_all", &[3, 4], false, false, |x| x.exp()?.sum_all().mul(&x.mean_all())),
    ]
}
