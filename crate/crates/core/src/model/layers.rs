use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Affine map `x W + b` applied row-wise.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Result<Self> {
        let weight = store.add_xavier(format!("{name}.weight"), &[in_dim, out_dim], in_dim, out_dim, rng)?;
        let bias = store.add_constant(format!("{name}.bias"), &[out_dim], 0.0)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// LSTM layer with gates packed as `[input | forget | cell | output]`.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let w_ih = store.add_xavier(format!("{name}.w_ih"), &[in_dim, 4 * hidden], in_dim, hidden, rng)?;
        let w_hh = store.add_xavier(format!("{name}.w_hh"), &[hidden, 4 * hidden], hidden, hidden, rng)?;
        // Forget-gate bias starts at 1.
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(format!("{name}.bias"), Tensor::new(vec![4 * hidden], b)?)?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            in_dim,
            hidden,
        })
    }

    /// Applies the gate nonlinearities to pre-activations `[1 x 4h]`.
    fn cell(&self, g: &mut Graph, gates: Var, c: Var) -> Result<(Var, Var)> {
        let h = self.hidden;
        let i = g.slice_cols(gates, 0, h)?;
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, h, h)?;
        let f = g.sigmoid(f);
        let cand = g.slice_cols(gates, 2 * h, h)?;
        let cand = g.tanh(cand);
        let o = g.slice_cols(gates, 3 * h, h)?;
        let o = g.sigmoid(o);
        let fc = g.mul(f, c)?;
        let ic = g.mul(i, cand)?;
        let c_next = g.add(fc, ic)?;
        let tc = g.tanh(c_next);
        let h_next = g.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    /// One step: `x_t [1 x d]`, state `(h, c)` each `[1 x hidden]`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let b = g.param(store, self.bias);
        let xi = g.matmul(x, w_ih)?;
        let hh = g.matmul(h, w_hh)?;
        let pre = g.add(xi, hh)?;
        let gates = g.add_row(pre, b)?;
        self.cell(g, gates, c)
    }

    pub fn zero_state(&self, g: &mut Graph) -> (Var, Var) {
        let h = g.constant(Tensor::zeros(&[1, self.hidden]));
        let c = g.constant(Tensor::zeros(&[1, self.hidden]));
        (h, c)
    }

    /// Runs over a `[T x d]` sequence from a zero state; returns `[T x hidden]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, xs: Var) -> Result<Var> {
        let t_len = g.shape(xs)[0];
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let b = g.param(store, self.bias);
        let proj = g.matmul(xs, w_ih)?;
        let proj = g.add_row(proj, b)?;
        let (mut h, mut c) = self.zero_state(g);
        let mut outs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = g.slice_rows(proj, t, 1)?;
            let hh = g.matmul(h, w_hh)?;
            let gates = g.add(xt, hh)?;
            (h, c) = self.cell(g, gates, c)?;
            outs.push(h);
        }
        g.stack_rows(&outs)
    }
}

/// Elman recurrence `s_t = tanh(s_{t-1} U + x_t W + b)`.
#[derive(Debug, Clone)]
pub struct Rnn {
    pub w_in: ParamId,
    pub w_rec: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Rnn {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let w_in = store.add_xavier(format!("{name}.w_in"), &[in_dim, hidden], in_dim, hidden, rng)?;
        let w_rec = store.add_xavier(format!("{name}.w_rec"), &[hidden, hidden], hidden, hidden, rng)?;
        let bias = store.add_constant(format!("{name}.bias"), &[hidden], 0.0)?;
        Ok(Self {
            w_in,
            w_rec,
            bias,
            hidden,
        })
    }

    /// Context sequence where row `t` summarizes inputs strictly before `t`
    /// (or strictly after, when `reverse`); boundary rows are zero.
    pub fn context(&self, g: &mut Graph, store: &ParamStore, xs: Var, reverse: bool) -> Result<Var> {
        let t_len = g.shape(xs)[0];
        let w_in = g.param(store, self.w_in);
        let w_rec = g.param(store, self.w_rec);
        let b = g.param(store, self.bias);
        let proj = g.matmul(xs, w_in)?;
        let proj = g.add_row(proj, b)?;
        let mut state = g.constant(Tensor::zeros(&[1, self.hidden]));
        let mut rows = vec![state; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for w in order.windows(2) {
            let (src, dst) = (w[0], w[1]);
            let xp = g.slice_rows(proj, src, 1)?;
            let rec = g.matmul(state, w_rec)?;
            let pre = g.add(rec, xp)?;
            state = g.tanh(pre);
            rows[dst] = state;
        }
        g.stack_rows(&rows)
    }
}

/// 2-D convolution over a `C x T x F` map with explicit zero padding,
/// bias, and ReLU.
#[derive(Debug, Clone)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub kernel_size: (usize, usize),
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel_size: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        rng: &mut Rng,
    ) -> Result<Self> {
        let (kh, kw) = kernel_size;
        let kernel = store.add_xavier(
            format!("{name}.weight"),
            &[cout, cin, kh, kw],
            cin * kh * kw,
            cout * kh * kw,
            rng,
        )?;
        let bias = store.add_constant(format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Self {
            kernel,
            bias,
            stride,
            padding,
            kernel_size,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        let x = g.pad2d(x, self.padding)?;
        let y = g.conv2d(x, k, self.stride)?;
        let y = g.add_channel_bias(y, b)?;
        Ok(g.relu(y))
    }

    /// Output extent along one axis, or `None` if the input is too short.
    pub fn out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        (padded >= kernel).then(|| (padded - kernel) / stride + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_params;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let lstm = Lstm::new(&mut store, "encoder.l", 3, 4, &mut rng).unwrap();
        store.iter_mut().for_each(|p| p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let (h0, c0) = lstm.zero_state(&mut g);
        let (h, c) = lstm.step(&mut g, &store, x, h0, c0).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let lstm = Lstm::new(&mut store, "encoder.l", 2, 3, &mut rng).unwrap();
        store.get_mut(lstm.bias).tensor.data_mut()[3..6].iter_mut().for_each(|v| *v = 50.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.4, -0.3]).unwrap());
        let h0 = g.constant(Tensor::new(vec![1, 3], vec![0.1, 0.2, -0.1]).unwrap());
        let c0 = g.constant(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let (_, c) = lstm.step(&mut g, &store, x, h0, c0).unwrap();
        // Recompute i and g to form c + i*g.
        let wi = store.get(lstm.w_ih).tensor.clone();
        let wh = store.get(lstm.w_hh).tensor.clone();
        let b = store.get(lstm.bias).tensor.clone();
        let (xv, hv, cv) = ([0.4, -0.3], [0.1, 0.2, -0.1], [0.5, -1.0, 2.0]);
        for j in 0..3 {
            let pre = |gate: usize| {
                let col = gate * 3 + j;
                b.data()[col]
                    + (0..2).map(|k| xv[k] * wi.at2(k, col)).sum::<f64>()
                    + (0..3).map(|k| hv[k] * wh.at2(k, col)).sum::<f64>()
            };
            let expect = cv[j] + sig(pre(0)) * pre(2).tanh();
            assert!((g.value(c).data()[j] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn step_matches_scalar_recomputation() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let (d, hd) = (3, 2);
        let lstm = Lstm::new(&mut store, "encoder.l", d, hd, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.normal(0.0, 0.5));
        }
        let xv: Vec<f64> = (0..d).map(|_| rng.normal(0.0, 1.0)).collect();
        let hv: Vec<f64> = (0..hd).map(|_| rng.normal(0.0, 1.0)).collect();
        let cv: Vec<f64> = (0..hd).map(|_| rng.normal(0.0, 1.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, d], xv.clone()).unwrap());
        let h0 = g.constant(Tensor::new(vec![1, hd], hv.clone()).unwrap());
        let c0 = g.constant(Tensor::new(vec![1, hd], cv.clone()).unwrap());
        let (h, c) = lstm.step(&mut g, &store, x, h0, c0).unwrap();

        let wi = store.get(lstm.w_ih).tensor.clone();
        let wh = store.get(lstm.w_hh).tensor.clone();
        let b = store.get(lstm.bias).tensor.clone();
        for j in 0..hd {
            let pre = |gate: usize| {
                let col = gate * hd + j;
                let mut s = b.data()[col];
                for k in 0..d {
                    s += xv[k] * wi.at2(k, col);
                }
                for k in 0..hd {
                    s += hv[k] * wh.at2(k, col);
                }
                s
            };
            let c_new = sig(pre(1)) * cv[j] + sig(pre(0)) * pre(2).tanh();
            let h_new = sig(pre(3)) * c_new.tanh();
            assert!((g.value(c).data()[j] - c_new).abs() < 1e-12);
            assert!((g.value(h).data()[j] - h_new).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let conv = Conv::new(&mut store, "encoder.c", 1, 2, (3, 3), (2, 1), (1, 1), &mut rng).unwrap();
        let lstm = Lstm::new(&mut store, "encoder.l", 2 * 4, 3, &mut rng).unwrap();
        let rnn = Rnn::new(&mut store, "head.r", 3, 2, &mut rng).unwrap();
        let lin = Linear::new(&mut store, "head.o", 2, 1, &mut rng).unwrap();
        let input = Tensor::new(vec![1, 7, 4], (0..28).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let err = grad_check_params(
            |g, s| {
                let x = g.constant(input.clone());
                let y = conv.forward(g, s, x)?;
                let t = g.shape(y)[1];
                let y = g.swap_axes01(y)?;
                let y = g.reshape(y, &[t, 8])?;
                let h = lstm.forward(g, s, y)?;
                let r = rnn.context(g, s, h, true)?;
                let o = lin.forward(g, s, r)?;
                let m = g.max_axis(o, 0)?;
                Ok(g.sum(m))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
