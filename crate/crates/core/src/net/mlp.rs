use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{all_finite, axpy, dot};
use crate::rng::{self, tag};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    /// `(h, h', h'')` at pre-activation `z`.
    #[inline]
    fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let h = z.tanh();
                let d = 1.0 - h * h;
                (h, d, -2.0 * h * d)
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                let ds = s * (1.0 - s);
                (z * s, s + z * ds, ds * (2.0 + z * (1.0 - 2.0 * s)))
            }
        }
    }
}

/// How time enters the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeEmbedding {
    None,
    AppendLogT,
    AppendRawT,
}

impl TimeEmbedding {
    fn width(self) -> usize {
        match self {
            TimeEmbedding::None => 0,
            _ => 1,
        }
    }
}

/// Feed-forward network `[x, time feature, context] -> out`.
///
/// `layer_dims` is `[D, hidden..., out]`; the first affine layer actually
/// reads `D + time width + context_dim` inputs. Hidden layers apply the
/// activation, the output layer is affine. Parameters are stored flat, layer
/// by layer, as the row-major weight matrix followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldNet {
    layer_dims: Vec<usize>,
    activation: Activation,
    time_embedding: TimeEmbedding,
    context_dim: usize,
    params: Vec<f64>,
    /// `(fan_in, fan_out, weight offset)` per layer.
    layers: Vec<(usize, usize, usize)>,
}

/// Pre- and post-activations of one evaluation.
struct Tape {
    /// `h[0]` is the assembled input; `h[l]` the output of layer `l`.
    h: Vec<Vec<f64>>,
    /// Activation derivatives per hidden layer.
    d1: Vec<Vec<f64>>,
    d2: Vec<Vec<f64>>,
}

impl FieldNet {
    fn layout(layer_dims: &[usize], input_width: usize) -> (Vec<(usize, usize, usize)>, usize) {
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut fan_in = input_width;
        for &fan_out in &layer_dims[1..] {
            layers.push((fan_in, fan_out, offset));
            offset += fan_in * fan_out + fan_out;
            fan_in = fan_out;
        }
        (layers, offset)
    }

    /// Network with all parameters zero.
    pub fn zeros(layer_dims: &[usize], activation: Activation, time_embedding: TimeEmbedding, context_dim: usize) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::ShapeError(format!("invalid layer dims {layer_dims:?}")));
        }
        let input_width = layer_dims[0] + time_embedding.width() + context_dim;
        let (layers, n) = Self::layout(layer_dims, input_width);
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            time_embedding,
            context_dim,
            params: vec![0.0; n],
            layers,
        })
    }

    /// Weights and biases uniform on `±sqrt(1/fan_in)`.
    pub fn new(layer_dims: &[usize], activation: Activation, time_embedding: TimeEmbedding, context_dim: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, activation, time_embedding, context_dim)?;
        let mut s = rng::stream(seed, &[tag::INIT]);
        for &(fan_in, fan_out, off) in &net.layers {
            let bound = (1.0 / fan_in as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out + fan_out] {
                *p = s.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_params(
        layer_dims: &[usize],
        activation: Activation,
        time_embedding: TimeEmbedding,
        context_dim: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, activation, time_embedding, context_dim)?;
        check_dim(net.params.len(), params.len())?;
        net.params = params;
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }
    pub fn activation(&self) -> Activation {
        self.activation
    }
    pub fn time_embedding(&self) -> TimeEmbedding {
        self.time_embedding
    }
    pub fn context_dim(&self) -> usize {
        self.context_dim
    }
    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }
    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }
    pub fn n_params(&self) -> usize {
        self.params.len()
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight matrix (row-major, `fan_out x fan_in`) and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (fi, fo, off) = self.layers[l];
        (&self.params[off..off + fi * fo], &self.params[off + fi * fo..off + fi * fo + fo])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (fi, fo, off) = self.layers[l];
        let (w, b) = self.params[off..off + fi * fo + fo].split_at_mut(fi * fo);
        (w, b)
    }

    pub fn check_finite(&self) -> Result<()> {
        if all_finite(&self.params) {
            Ok(())
        } else {
            Err(Error::CorruptModel)
        }
    }

    fn assemble(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let mut input = Vec::with_capacity(self.layers[0].0);
        input.extend_from_slice(x);
        match self.time_embedding {
            TimeEmbedding::None => {}
            TimeEmbedding::AppendRawT => input.push(t),
            TimeEmbedding::AppendLogT => {
                if !(t > 0.0) {
                    return Err(Error::SingularTime(t));
                }
                input.push(t.ln());
            }
        }
        match (self.context_dim, c) {
            (0, _) => {}
            (k, Some(c)) => {
                check_dim(k, c.len())?;
                input.extend_from_slice(c);
            }
            (k, None) => return Err(Error::DimensionMismatch { expected: k, got: 0 }),
        }
        Ok(input)
    }

    fn finish(&self, out: Vec<f64>, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if all_finite(&out) {
            Ok(out)
        } else if !all_finite(&self.params) {
            Err(Error::CorruptModel)
        } else {
            Err(Error::NonFiniteField { x: x.to_vec(), t })
        }
    }

    fn affine(&self, l: usize, h: &[f64], out: &mut Vec<f64>) {
        let (w, b) = self.layer(l);
        let fi = h.len();
        out.clear();
        out.extend(b.iter().enumerate().map(|(o, bo)| bo + dot(&w[o * fi..(o + 1) * fi], h)));
    }

    /// `W h` without the bias.
    fn linear(&self, l: usize, h: &[f64]) -> Vec<f64> {
        let (w, _) = self.layer(l);
        let (fi, fo, _) = self.layers[l];
        (0..fo).map(|o| dot(&w[o * fi..(o + 1) * fi], h)).collect()
    }

    /// `W^T y` accumulated into `out`.
    fn linear_t(&self, l: usize, y: &[f64], out: &mut [f64]) {
        let (w, _) = self.layer(l);
        let fi = self.layers[l].0;
        for (o, &yo) in y.iter().enumerate() {
            if yo != 0.0 {
                axpy(yo, &w[o * fi..(o + 1) * fi], out);
            }
        }
    }

    fn tape(&self, input: Vec<f64>, second: bool) -> Tape {
        let n = self.layers.len();
        let mut h = Vec::with_capacity(n + 1);
        let mut d1 = Vec::with_capacity(n);
        let mut d2 = Vec::with_capacity(n);
        h.push(input);
        for l in 0..n {
            let mut z = Vec::new();
            self.affine(l, &h[l], &mut z);
            if l + 1 < n {
                let mut a = Vec::with_capacity(z.len());
                let mut g1 = Vec::with_capacity(z.len());
                let mut g2 = Vec::with_capacity(if second { z.len() } else { 0 });
                for &zi in &z {
                    let (v, p, pp) = self.activation.eval(zi);
                    a.push(v);
                    g1.push(p);
                    if second {
                        g2.push(pp);
                    }
                }
                h.push(a);
                d1.push(g1);
                d2.push(g2);
            } else {
                h.push(z);
            }
        }
        Tape { h, d1, d2 }
    }

    pub fn forward(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<Vec<f64>> {
        let input = self.assemble(x, t, c)?;
        let mut h = input;
        let mut z = Vec::new();
        let n = self.layers.len();
        for l in 0..n {
            self.affine(l, &h, &mut z);
            if l + 1 < n {
                for zi in z.iter_mut() {
                    *zi = match self.activation {
                        Activation::Tanh => zi.tanh(),
                        Activation::Silu => *zi / (1.0 + (-*zi).exp()),
                    };
                }
            }
            std::mem::swap(&mut h, &mut z);
        }
        self.finish(h, x, t)
    }

    /// Push an input-space tangent (over `x` only) through a recorded tape.
    fn push_tangent(&self, tape: &Tape, dx: &[f64]) -> Vec<Vec<f64>> {
        let mut dh = Vec::with_capacity(self.layers.len() + 1);
        let mut d0 = vec![0.0; self.layers[0].0];
        d0[..dx.len()].copy_from_slice(dx);
        dh.push(d0);
        let n = self.layers.len();
        for l in 0..n {
            let mut dz = self.linear(l, &dh[l]);
            if l + 1 < n {
                for (v, p) in dz.iter_mut().zip(&tape.d1[l]) {
                    *v *= p;
                }
            }
            dh.push(dz);
        }
        dh
    }

    /// Output and `J tangent` in one forward-mode sweep.
    pub fn forward_jvp(&self, x: &[f64], t: f64, c: Option<&[f64]>, tangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.input_dim(), tangent.len())?;
        let tape = self.tape(self.assemble(x, t, c)?, false);
        let mut dh = self.push_tangent(&tape, tangent);
        let out = self.finish(tape.h.last().unwrap().clone(), x, t)?;
        let jv = self.finish(dh.pop().unwrap(), x, t)?;
        Ok((out, jv))
    }

    pub fn jvp(&self, x: &[f64], t: f64, c: Option<&[f64]>, tangent: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_jvp(x, t, c, tangent)?.1)
    }

    /// Output and the `out x D` Jacobian with respect to `x`.
    pub fn forward_jacobian(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let tape = self.tape(self.assemble(x, t, c)?, false);
        let d = self.input_dim();
        let out_dim = self.output_dim();
        let mut jac = DMatrix::zeros(out_dim, d);
        let mut e = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            let col = self.push_tangent(&tape, &e).pop().unwrap();
            e[j] = 0.0;
            for i in 0..out_dim {
                jac[(i, j)] = col[i];
            }
        }
        let out = self.finish(tape.h.last().unwrap().clone(), x, t)?;
        if !jac.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteField { x: x.to_vec(), t });
        }
        Ok((out, jac))
    }

    pub fn jacobian(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<DMatrix<f64>> {
        Ok(self.forward_jacobian(x, t, c)?.1)
    }

    /// Reverse sweep from output adjoint `ybar`; returns the adjoint of the
    /// assembled input and, if `grad` is given, accumulates parameter
    /// gradients into it.
    fn reverse(&self, tape: &Tape, ybar: &[f64], mut grad: Option<&mut [f64]>) -> Vec<f64> {
        let n = self.layers.len();
        let mut zbar = ybar.to_vec();
        for l in (0..n).rev() {
            if l + 1 < n {
                for (v, p) in zbar.iter_mut().zip(&tape.d1[l]) {
                    *v *= p;
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                let (fi, fo, off) = self.layers[l];
                let h = &tape.h[l];
                for o in 0..fo {
                    if zbar[o] != 0.0 {
                        axpy(zbar[o], h, &mut g[off + o * fi..off + (o + 1) * fi]);
                    }
                    g[off + fi * fo + o] += zbar[o];
                }
            }
            let mut hbar = vec![0.0; self.layers[l].0];
            self.linear_t(l, &zbar, &mut hbar);
            zbar = hbar;
        }
        zbar
    }

    /// `grad_x <ybar, f(x)>`.
    pub fn vjp_input(&self, x: &[f64], t: f64, c: Option<&[f64]>, ybar: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.output_dim(), ybar.len())?;
        let tape = self.tape(self.assemble(x, t, c)?, false);
        let mut g = self.reverse(&tape, ybar, None);
        g.truncate(self.input_dim());
        self.finish(g, x, t)
    }

    /// Scalar output and its input gradient. Requires a scalar head.
    pub fn value_and_input_gradient(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
        if self.output_dim() != 1 {
            return Err(Error::ShapeError(format!(
                "input gradient needs a scalar output, network has {}",
                self.output_dim()
            )));
        }
        let tape = self.tape(self.assemble(x, t, c)?, false);
        let value = tape.h.last().unwrap()[0];
        let mut g = self.reverse(&tape, &[1.0], None);
        g.truncate(self.input_dim());
        let g = self.finish(g, x, t)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteField { x: x.to_vec(), t });
        }
        Ok((value, g))
    }

    pub fn input_gradient(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(self.value_and_input_gradient(x, t, c)?.1)
    }

    /// Accumulate `d/dparams <ybar, f(x)>` into `grad`; returns `f(x)`.
    pub fn backward_output(&self, x: &[f64], t: f64, c: Option<&[f64]>, ybar: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        check_dim(self.output_dim(), ybar.len())?;
        check_dim(self.n_params(), grad.len())?;
        let tape = self.tape(self.assemble(x, t, c)?, false);
        self.reverse(&tape, ybar, Some(grad));
        self.finish(tape.h.last().unwrap().clone(), x, t)
    }

    /// Accumulate the parameter gradient of
    /// `<ybar, f(x)> + <ydotbar, J_x f(x) u>` into `grad`.
    ///
    /// For a scalar head with `ybar = [a]`, `ydotbar = [1]` this is the
    /// gradient of `a * delta + <u, grad_x delta>`, the second-order pattern
    /// the Stein loss needs. Implemented as a reverse sweep over the
    /// forward-mode (value, tangent) evaluation.
    pub fn backward_tangent(
        &self,
        x: &[f64],
        t: f64,
        c: Option<&[f64]>,
        u: &[f64],
        ybar: &[f64],
        ydotbar: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        check_dim(self.input_dim(), u.len())?;
        check_dim(self.output_dim(), ybar.len())?;
        check_dim(self.output_dim(), ydotbar.len())?;
        check_dim(self.n_params(), grad.len())?;
        let tape = self.tape(self.assemble(x, t, c)?, true);
        let dh = self.push_tangent(&tape, u);
        let n = self.layers.len();

        // Pre-activation tangents of the hidden layers: zdot = W hdot_prev.
        let zdot: Vec<Vec<f64>> = (0..n.saturating_sub(1)).map(|l| self.linear(l, &dh[l])).collect();

        let mut hbar = ybar.to_vec();
        let mut hdbar = ydotbar.to_vec();
        for l in (0..n).rev() {
            let (zbar, zdbar) = if l + 1 < n {
                let p1 = &tape.d1[l];
                let p2 = &tape.d2[l];
                let zd = &zdot[l];
                let zbar: Vec<f64> = (0..hbar.len()).map(|i| p1[i] * hbar[i] + p2[i] * zd[i] * hdbar[i]).collect();
                let zdbar: Vec<f64> = (0..hbar.len()).map(|i| p1[i] * hdbar[i]).collect();
                (zbar, zdbar)
            } else {
                (hbar, hdbar)
            };
            let (fi, fo, off) = self.layers[l];
            let h = &tape.h[l];
            let hd = &dh[l];
            for o in 0..fo {
                let row = &mut grad[off + o * fi..off + (o + 1) * fi];
                if zbar[o] != 0.0 {
                    axpy(zbar[o], h, row);
                }
                if zdbar[o] != 0.0 {
                    axpy(zdbar[o], hd, row);
                }
                grad[off + fi * fo + o] += zbar[o];
            }
            let mut nb = vec![0.0; fi];
            let mut nd = vec![0.0; fi];
            if l > 0 {
                self.linear_t(l, &zbar, &mut nb);
                self.linear_t(l, &zdbar, &mut nd);
            }
            hbar = nb;
            hdbar = nd;
        }
        if !all_finite(grad) {
            return Err(Error::NonFiniteField { x: x.to_vec(), t });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_net(dims: &[usize], act: Activation, emb: TimeEmbedding, ctx: usize, seed: u64) -> FieldNet {
        // Inflate the init so the nonlinearity is actually exercised.
        let mut net = FieldNet::new(dims, act, emb, ctx, seed).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p *= 1.7);
        net
    }

    fn point(d: usize, seed: u64) -> Vec<f64> {
        rng::gaussian(&mut rng::stream(seed, &[]), d)
    }

    #[test]
    fn zero_net_is_zero_map() {
        let net = FieldNet::zeros(&[3, 8, 3], Activation::Tanh, TimeEmbedding::AppendLogT, 0).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 5.0], 0.3, None).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_affine_layer() {
        let w = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![0.5, -0.5];
        let params = [w.clone(), b].concat();
        let net = FieldNet::from_params(&[2, 2], Activation::Tanh, TimeEmbedding::None, 0, params).unwrap();
        assert_eq!(net.forward(&[1.0, -1.0], 0.0, None).unwrap(), vec![-0.5, -1.5]);
        let j = net.jacobian(&[0.3, 0.1], 0.0, None).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &w));
        assert_eq!(net.jvp(&[0.0, 0.0], 0.0, None, &[1.0, 0.0]).unwrap(), vec![1.0, 3.0]);
    }

    #[test]
    fn straight_line_two_layer_oracle() {
        let net = random_net(&[3, 5, 2], Activation::Tanh, TimeEmbedding::None, 0, 4);
        let x = point(3, 8);
        let (w1, b1) = net.layer(0);
        let (w2, b2) = net.layer(1);
        let mut h = [0.0; 5];
        for o in 0..5 {
            let mut z = b1[o];
            for i in 0..3 {
                z += w1[o * 3 + i] * x[i];
            }
            h[o] = z.tanh();
        }
        let y = net.forward(&x, 0.0, None).unwrap();
        for o in 0..2 {
            let mut z = b2[o];
            for i in 0..5 {
                z += w2[o * 5 + i] * h[i];
            }
            assert!((z - y[o]).abs() <= 1e-14);
        }
    }

    #[test]
    fn negative_identity_divergence() {
        let d = 4;
        let mut params = vec![0.0; d * d + d];
        for i in 0..d {
            params[i * d + i] = -1.0;
        }
        let net = FieldNet::from_params(&[d, d], Activation::Silu, TimeEmbedding::None, 0, params).unwrap();
        let j = net.jacobian(&point(d, 1), 0.0, None).unwrap();
        assert_eq!(j.trace(), -(d as f64));
    }

    #[test]
    fn jvp_agrees_with_jacobian() {
        for act in [Activation::Tanh, Activation::Silu] {
            let net = random_net(&[4, 7, 7, 4], act, TimeEmbedding::AppendRawT, 2, 3);
            let x = point(4, 2);
            let c = [0.3, -0.2];
            let u = point(4, 5);
            let j = net.jacobian(&x, 0.4, Some(&c)).unwrap();
            let jv = net.jvp(&x, 0.4, Some(&c), &u).unwrap();
            let expect = &j * nalgebra::DVector::from_vec(u.clone());
            for i in 0..4 {
                assert!((jv[i] - expect[i]).abs() <= 1e-12);
            }
            assert_eq!(net.jvp(&x, 0.4, Some(&c), &[0.0; 4]).unwrap(), vec![0.0; 4]);
        }
    }

    #[test]
    fn scalar_gradient_cases() {
        let w = [0.5, -1.5, 2.0];
        let lin = FieldNet::from_params(&[3, 1], Activation::Tanh, TimeEmbedding::None, 0, [&w[..], &[0.1]].concat()).unwrap();
        assert_eq!(lin.input_gradient(&[3.0, 1.0, -2.0], 0.0, None).unwrap(), w.to_vec());

        // tanh(w^T x) at 0 via a unit-width hidden layer and unit readout.
        let p = [&w[..], &[0.0], &[1.0], &[0.0]].concat();
        let th = FieldNet::from_params(&[3, 1, 1], Activation::Tanh, TimeEmbedding::None, 0, p).unwrap();
        assert_eq!(th.input_gradient(&[0.0; 3], 0.0, None).unwrap(), w.to_vec());

        let wide = FieldNet::zeros(&[3, 2], Activation::Tanh, TimeEmbedding::None, 0).unwrap();
        assert!(matches!(wide.input_gradient(&[0.0; 3], 0.0, None), Err(Error::ShapeError(_))));
    }

    #[test]
    fn linear_net_output_loss_gradient() {
        // L = |Wx + b|^2 -> dL/dW = 2 (Wx + b) x^T
        let net = random_net(&[3, 2], Activation::Tanh, TimeEmbedding::None, 0, 6);
        let x = point(3, 7);
        let y = net.forward(&x, 0.0, None).unwrap();
        let ybar: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let mut g = vec![0.0; net.n_params()];
        net.backward_output(&x, 0.0, None, &ybar, &mut g).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert!((g[o * 3 + i] - 2.0 * y[o] * x[i]).abs() < 1e-14);
            }
            assert!((g[6 + o] - 2.0 * y[o]).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_params_are_corrupt() {
        let mut net = FieldNet::new(&[2, 4, 2], Activation::Tanh, TimeEmbedding::None, 0, 1).unwrap();
        net.params_mut()[0] = f64::NAN;
        assert!(matches!(net.forward(&[1.0, 1.0], 0.0, None), Err(Error::CorruptModel)));
    }

    #[test]
    fn log_time_needs_positive_t() {
        let net = FieldNet::new(&[2, 4, 2], Activation::Tanh, TimeEmbedding::AppendLogT, 0, 1).unwrap();
        assert!(matches!(net.forward(&[1.0, 1.0], 0.0, None), Err(Error::SingularTime(_))));
    }
}
