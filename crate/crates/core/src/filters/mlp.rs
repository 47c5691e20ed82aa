//! Dense ReLU networks: the MLP filter baseline and the PPO value function.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(with = "linalg::rows")]
    pub w: DMatrix<f64>,
    #[serde(with = "linalg::vector")]
    pub b: DVector<f64>,
}

/// Feed-forward network with ReLU on hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer inputs recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<DVector<f64>>,
    pub output: DVector<f64>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            check_dim("layer bias", l.w.nrows(), l.b.len())?;
            if i > 0 {
                check_dim("layer input width", layers[i - 1].w.nrows(), l.w.ncols())?;
            }
        }
        Ok(Self { layers })
    }

    /// He-scaled Gaussian hidden layers; the output layer is scaled by
    /// `out_scale` and all biases start at zero.
    pub fn init(widths: &[usize], out_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer widths {widths:?}")));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let scale = if i == last {
                    out_scale
                } else {
                    (2.0 / w[0] as f64).sqrt()
                };
                Layer {
                    w: DMatrix::from_fn(w[1], w[0], |_, _| scale * rng.sample::<f64, _>(StandardNormal)),
                    b: DVector::zeros(w[1]),
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.ncols()
    }
    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.nrows())
    }

    pub fn forward(&self, input: &DVector<f64>) -> Result<MlpTape> {
        check_dim("network input", self.input_width(), input.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = input.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut out = l.b.clone();
            out.gemv(1.0, &l.w, &h, 1.0);
            if i < last {
                out.apply(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut h, out));
        }
        Ok(MlpTape { inputs, output: h })
    }

    pub fn eval(&self, input: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.forward(input)?.output)
    }

    pub fn zero_grads(&self) -> Vec<Layer> {
        self.layers
            .iter()
            .map(|l| Layer {
                w: DMatrix::zeros(l.w.nrows(), l.w.ncols()),
                b: DVector::zeros(l.b.len()),
            })
            .collect()
    }

    /// Accumulates the parameter gradient of `grad_out · output` into `grads`
    /// and returns the gradient with respect to the input.
    pub fn backward(&self, tape: &MlpTape, grad_out: &DVector<f64>, grads: &mut [Layer]) -> Result<DVector<f64>> {
        check_dim("output gradient", self.output_width(), grad_out.len())?;
        check_dim("gradient layers", self.layers.len(), grads.len())?;
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            grads[i].w.ger(1.0, &g, &tape.inputs[i], 1.0);
            grads[i].b += &g;
            let mut gin = l.w.tr_mul(&g);
            if i > 0 {
                // inputs[i] is the ReLU output of layer i-1
                for (v, a) in gin.iter_mut().zip(tape.inputs[i].iter()) {
                    if *a <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            g = gin;
        }
        Ok(g)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("flat parameter vector", self.num_params(), flat.len())?;
        let mut rest = flat;
        for l in &mut self.layers {
            for dst in [l.w.as_mut_slice(), l.b.as_mut_slice()] {
                let (head, tail) = rest.split_at(dst.len());
                dst.copy_from_slice(head);
                rest = tail;
            }
        }
        Ok(())
    }
}

pub fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut v = Vec::new();
    for l in layers {
        v.extend_from_slice(l.w.as_slice());
        v.extend_from_slice(l.b.as_slice());
    }
    v
}

/// The MLP filter: maps `(x0, û)` to an input, with a learnable exploration
/// std used only in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpPolicy {
    pub net: Mlp,
    #[serde(with = "linalg::vector")]
    pub log_std: DVector<f64>,
}

impl MlpPolicy {
    pub fn init(n_sys: usize, log_std: DVector<f64>, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut widths = vec![n_sys + log_std.len()];
        widths.extend_from_slice(hidden);
        widths.push(log_std.len());
        Ok(Self {
            net: Mlp::init(&widths, 0.01, rng)?,
            log_std,
        })
    }

    pub fn m_sys(&self) -> usize {
        self.log_std.len()
    }

    pub fn n_sys(&self) -> usize {
        self.net.input_width() - self.m_sys()
    }

    pub fn input(x0: &DVector<f64>, u_ref: &DVector<f64>) -> DVector<f64> {
        linalg::vcat(&[x0, u_ref])
    }

    pub fn forward(&self, x0: &DVector<f64>, u_ref: &DVector<f64>) -> Result<MlpTape> {
        check_dim("u_ref", self.m_sys(), u_ref.len())?;
        self.net.forward(&Self::input(x0, u_ref))
    }
}

/// Output of the MLP filter at `(x0, û)`.
pub fn mlp_forward(policy: &MlpPolicy, x0: &DVector<f64>, u_ref: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(policy.forward(x0, u_ref)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn zero_weights_give_bias() {
        let policy = MlpPolicy {
            net: Mlp::new(vec![
                Layer {
                    w: DMatrix::zeros(3, 3),
                    b: DVector::zeros(3),
                },
                Layer {
                    w: DMatrix::zeros(1, 3),
                    b: v(&[0.25]),
                },
            ])
            .unwrap(),
            log_std: v(&[0.0]),
        };
        assert_eq!(mlp_forward(&policy, &v(&[1.0, 2.0]), &v(&[3.0])).unwrap(), v(&[0.25]));
    }

    #[test]
    fn single_layer_can_copy_reference() {
        let policy = MlpPolicy {
            net: Mlp::new(vec![Layer {
                w: DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]),
                b: v(&[0.0]),
            }])
            .unwrap(),
            log_std: v(&[0.0]),
        };
        assert_eq!(mlp_forward(&policy, &v(&[0.4, -0.1]), &v(&[0.3])).unwrap(), v(&[0.3]));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::init(&[3, 8, 8, 2], 0.5, &mut rng).unwrap();
        for l in &mut net.layers {
            l.b = DVector::from_fn(l.b.len(), |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
        let x = v(&[0.3, -0.7, 0.2]);
        let gout = v(&[0.6, -1.1]);
        let tape = net.forward(&x).unwrap();
        let mut grads = net.zero_grads();
        let gin = net.backward(&tape, &gout, &mut grads).unwrap();
        let analytic = flatten(&grads);
        let theta = net.to_flat();
        let h = 1e-5;
        let loss = |n: &Mlp, x: &DVector<f64>| n.eval(x).unwrap().dot(&gout);
        for i in 0..theta.len() {
            let mut p = net.clone();
            let mut t = theta.clone();
            t[i] += h;
            p.set_flat(&t).unwrap();
            let up = loss(&p, &x);
            t[i] -= 2.0 * h;
            p.set_flat(&t).unwrap();
            let down = loss(&p, &x);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - analytic[i]).abs();
            assert!(
                err <= 1e-4 * fd.abs().max(analytic[i].abs()) + 1e-7,
                "param {i}: {fd} vs {}",
                analytic[i]
            );
        }
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!((fd - gin[i]).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn rejects_mismatched_layers() {
        let r = Mlp::new(vec![
            Layer {
                w: DMatrix::zeros(4, 3),
                b: DVector::zeros(4),
            },
            Layer {
                w: DMatrix::zeros(1, 5),
                b: DVector::zeros(1),
            },
        ]);
        assert!(r.is_err());
    }
}
