use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::Var;

/// Two fully-connected layers with a leaky-rectifier in between.
///
/// Parameters are stored flat: `W1` (hidden x input, row-major), `b1`,
/// `W2` (output x hidden, row-major), `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub slope: f64,
    pub params: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Layout {
    input: usize,
    hidden: usize,
    output: usize,
    slope: f64,
}

impl Layout {
    fn w1(&self) -> usize {
        0
    }
    fn b1(&self) -> usize {
        self.hidden * self.input
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + self.output * self.hidden
    }
    fn len(&self) -> usize {
        self.b2() + self.output
    }

    fn pre_activation(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|j| {
                let row = &p[self.w1() + j * self.input..self.w1() + (j + 1) * self.input];
                p[self.b1() + j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    fn act(&self, v: f64) -> f64 {
        if v < 0.0 {
            self.slope * v
        } else {
            v
        }
    }

    fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self
            .pre_activation(p, x)
            .into_iter()
            .map(|v| self.act(v))
            .collect();
        (0..self.output)
            .map(|o| {
                let row = &p[self.w2() + o * self.hidden..self.w2() + (o + 1) * self.hidden];
                p[self.b2() + o] + row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Returns gradients for parameters and input.
    fn backward(&self, p: &[f64], x: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pre = self.pre_activation(p, x);
        let mut gp = vec![0.0; self.len()];
        let mut g_hidden = vec![0.0; self.hidden];
        for o in 0..self.output {
            gp[self.b2() + o] = g[o];
            if g[o] == 0.0 {
                continue;
            }
            for j in 0..self.hidden {
                let w = self.w2() + o * self.hidden + j;
                gp[w] = g[o] * self.act(pre[j]);
                g_hidden[j] += g[o] * p[w];
            }
        }
        let mut gx = vec![0.0; self.input];
        for j in 0..self.hidden {
            let gh = if pre[j] < 0.0 {
                g_hidden[j] * self.slope
            } else {
                g_hidden[j]
            };
            gp[self.b1() + j] = gh;
            if gh == 0.0 {
                continue;
            }
            let base = self.w1() + j * self.input;
            for i in 0..self.input {
                gp[base + i] = gh * x[i];
                gx[i] += gh * p[base + i];
            }
        }
        (gp, gx)
    }
}

impl Mlp {
    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(input: usize, hidden: usize, output: usize, slope: f64, seed: u64) -> Self {
        let mut m = Self::zeros(input, hidden, output, slope);
        let l = m.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k1 = 1.0 / (input as f64).sqrt();
        let k2 = 1.0 / (hidden as f64).sqrt();
        for (i, v) in m.params.iter_mut().enumerate() {
            let k = if i < l.w2() { k1 } else { k2 };
            *v = rng.random_range(-k..k);
        }
        m
    }

    pub fn zeros(input: usize, hidden: usize, output: usize, slope: f64) -> Self {
        let l = Layout {
            input,
            hidden,
            output,
            slope,
        };
        Self {
            input,
            hidden,
            output,
            slope,
            params: vec![0.0; l.len()],
        }
    }

    fn layout(&self) -> Layout {
        Layout {
            input: self.input,
            hidden: self.hidden,
            output: self.output,
            slope: self.slope,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }

    pub fn weight1(&self, j: usize, i: usize) -> f64 {
        self.params[j * self.input + i]
    }

    pub fn set_weight1(&mut self, j: usize, i: usize, v: f64) {
        self.params[j * self.input + i] = v;
    }

    pub fn set_weight2(&mut self, o: usize, j: usize, v: f64) {
        let at = self.layout().w2() + o * self.hidden + j;
        self.params[at] = v;
    }

    pub fn set_bias1(&mut self, j: usize, v: f64) {
        let at = self.layout().b1() + j;
        self.params[at] = v;
    }

    pub fn set_bias2(&mut self, o: usize, v: f64) {
        let at = self.layout().b2() + o;
        self.params[at] = v;
    }

    /// Hidden activations for `x`.
    pub fn hidden_activations(&self, x: &[f64]) -> Vec<f64> {
        let l = self.layout();
        l.pre_activation(&self.params, x)
            .into_iter()
            .map(|v| l.act(v))
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input {
            return Err(Error::invalid(format!(
                "network expects {} inputs, got {}",
                self.input,
                x.len()
            )));
        }
        Ok(self.layout().forward(&self.params, x))
    }

    /// Records a forward pass with parameters `params` (a variable of
    /// length [`Mlp::param_count`]) on input `x`.
    pub fn forward_var<'t>(&self, params: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let l = self.layout();
        if params.len() != l.len() || x.len() != l.input {
            return Err(Error::invalid("network parameter or input length mismatch"));
        }
        let (pv, xv) = (params.value(), x.value());
        let out = l.forward(&pv, &xv);
        Ok(params.tape().custom(&[params, x], out, move |g| {
            let (gp, gx) = l.backward(&pv, &xv, g);
            vec![gp, gx]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_difference, relative_error, Tape};

    #[test]
    fn init_respects_fan_in_bounds() {
        let m = Mlp::new(16, 8, 2, 0.2, 1);
        let k1 = 0.25;
        let l = m.layout();
        assert!(m.params[..l.w2()].iter().all(|v| v.abs() <= k1));
        assert!(m.params[l.w2()..].iter().all(|v| v.abs() <= 1.0 / 8f64.sqrt()));
        assert_eq!(m, Mlp::new(16, 8, 2, 0.2, 1));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = Mlp::new(6, 5, 3, 0.2, 4);
        let x = vec![0.3, -0.7, 1.1, 0.05, -0.2, 0.9];
        let w = [0.5, -1.5, 2.0];
        let tape = Tape::new();
        let pv = tape.input(m.params.clone());
        let xv = tape.input(x.clone());
        let out = m.forward_var(pv, xv).unwrap();
        let loss = out.dot(&tape.input(w.to_vec()));
        let grads = tape.backward(&loss).unwrap();
        let f = |p: &[f64], x: &[f64]| {
            let mut mm = m.clone();
            mm.params = p.to_vec();
            mm.forward(x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd_p = finite_difference(|p| f(p, &x), &m.params, 1e-6);
        let fd_x = finite_difference(|xx| f(&m.params, xx), &x, 1e-6);
        assert!(relative_error(&grads.wrt(&pv), &fd_p) < 1e-7);
        assert!(relative_error(&grads.wrt(&xv), &fd_x) < 1e-7);
    }
}
