use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tensor::{Param, Tensor};
use super::{Ctx, LayerSpec, Sequential};
use crate::error::Result;

/// Anything with parameters and a scalar objective on a fixed input.
pub trait GradCheckable {
    fn params_mut(&mut self) -> Vec<&mut Param>;
    /// Evaluates the objective; with `with_grad`, also back-propagates into
    /// the (previously zeroed) parameter gradients.
    fn evaluate(&mut self, with_grad: bool) -> Result<f64>;
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(param block, element)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central differences with step `h` on up to `per_block` randomly chosen
/// entries of every parameter block.
pub fn grad_check<T: GradCheckable>(
    target: &mut T,
    per_block: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    for p in target.params_mut() {
        p.zero_grad();
    }
    target.evaluate(true)?;
    let analytic: Vec<Vec<f64>> = target.params_mut().iter().map(|p| p.grad.clone()).collect();
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (block, &len) in sizes.iter().enumerate() {
        let picks = sample(&mut rng, len, per_block.min(len)).into_vec();
        for idx in picks {
            let original = target.params_mut()[block].value[idx];
            target.params_mut()[block].value[idx] = original + h;
            let plus = target.evaluate(false)?;
            target.params_mut()[block].value[idx] = original - h;
            let minus = target.evaluate(false)?;
            target.params_mut()[block].value[idx] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[block][idx], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((block, idx));
            }
        }
    }
    Ok(report)
}

/// A layer stack with a trainable input; the objective is a fixed random
/// projection of the output. Dropout masks are drawn once and frozen.
pub struct LayerRig {
    net: Sequential,
    input: Param,
    in_shape: Vec<usize>,
    proj: Vec<f64>,
    training: bool,
    rng: ChaCha8Rng,
}

impl LayerRig {
    pub fn new(
        specs: Vec<LayerSpec>,
        in_shape: Vec<usize>,
        training: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Sequential::new("rig", specs)?;
        net.init(&mut rng);
        // nonzero biases and affine parameters so their paths are exercised
        for p in net.params_mut() {
            for v in p.value.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let n: usize = in_shape.iter().product();
        let input = Param::new(
            vec![n],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let mut rig = LayerRig {
            net,
            input,
            in_shape,
            proj: Vec::new(),
            training,
            rng,
        };
        let mut ctx = Ctx {
            training,
            rng: Some(&mut rig.rng),
        };
        let out = rig.net.forward(
            &Tensor::new(rig.in_shape.clone(), rig.input.value.clone()),
            &mut ctx,
        )?;
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        rig.proj = (0..out.len())
            .map(|_| prng.random_range(-1.0..1.0))
            .collect();
        rig.net.set_dropout_frozen(true);
        Ok(rig)
    }
}

impl GradCheckable for LayerRig {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.input];
        v.extend(self.net.params_mut());
        v
    }

    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        let x = Tensor::new(self.in_shape.clone(), self.input.value.clone());
        let mut ctx = Ctx {
            training: self.training,
            rng: Some(&mut self.rng),
        };
        let out = self.net.forward(&x, &mut ctx)?;
        let loss = out.data.iter().zip(&self.proj).map(|(a, b)| a * b).sum();
        if with_grad {
            let dx = self
                .net
                .backward(&Tensor::new(out.shape.clone(), self.proj.clone()));
            for (g, d) in self.input.grad.iter_mut().zip(&dx.data) {
                *g += d;
            }
        }
        Ok(loss)
    }
}
