//! Thin layer wrappers: each owns parameter names in a [`ParamStore`] and
//! replays itself onto a [`Tape`] at forward time.

use rand_chacha::ChaCha12Rng;

use super::params::{kaiming, zeros, ParamStore};
use super::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        trainable: bool,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.insert(&w, kaiming(rng, &[d_in, d_out]), trainable);
        store.insert(&b, zeros(&[d_out]), trainable);
        Linear { w, b }
    }

    /// `x [n,d_in] -> [n,d_out]`
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, &self.w);
        let b = tape.param(store, &self.b);
        let y = tape.matmul(x, w);
        tape.add_row_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: String,
    pub b: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        trainable: bool,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.insert(&w, kaiming(rng, &[c_out, c_in, kernel]), trainable);
        store.insert(&b, zeros(&[c_out]), trainable);
        Conv1d { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, &self.w);
        let b = tape.param(store, &self.b);
        let y = tape.conv1d(x, w, self.stride, self.pad);
        tape.add_chan_bias_1d(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: String,
    pub b: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        trainable: bool,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.insert(&w, kaiming(rng, &[c_out, c_in, kernel, kernel]), trainable);
        store.insert(&b, zeros(&[c_out]), trainable);
        Conv2d { w, b, stride, pad }
    }

    /// 1x1 convolution with weights and bias initialized to zero.
    pub fn new_zero_init(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        trainable: bool,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.insert(&w, zeros(&[c_out, c_in, 1, 1]), trainable);
        store.insert(&b, zeros(&[c_out]), trainable);
        Conv2d {
            w,
            b,
            stride: 1,
            pad: 0,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, &self.w);
        let b = tape.param(store, &self.b);
        let y = tape.conv2d(x, w, self.stride, self.pad);
        tape.add_chan_bias_2d(y, b)
    }
}

/// Single-layer LSTM over `[n, c, l]` input; returns the last hidden state.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w: String,
    pub b: String,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        input: usize,
        hidden: usize,
        trainable: bool,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.insert(&w, kaiming(rng, &[input + hidden, 4 * hidden]), trainable);
        store.insert(&b, zeros(&[4 * hidden]), trainable);
        Lstm {
            w,
            b,
            input,
            hidden,
        }
    }

    /// Runs the recurrence over the full sequence, returning `[n, hidden]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let shape = tape.shape(x).to_vec();
        let (n, _c, l) = (shape[0], shape[1], shape[2]);
        let hd = self.hidden;
        let w = tape.param(store, &self.w);
        let b = tape.param(store, &self.b);
        let mut h = tape.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[n, hd])));
        let mut c = h;
        for t in 0..l {
            let xt = tape.slice_time(x, t);
            let cat = tape.concat_cols(xt, h);
            let pre = tape.matmul(cat, w);
            let gates = tape.add_row_bias(pre, b);
            let i_g = tape.slice_cols(gates, 0, hd);
            let f_g = tape.slice_cols(gates, hd, 2 * hd);
            let g_g = tape.slice_cols(gates, 2 * hd, 3 * hd);
            let o_g = tape.slice_cols(gates, 3 * hd, 4 * hd);
            let i_s = tape.sigmoid(i_g);
            let f_s = tape.sigmoid(f_g);
            let g_t = tape.tanh(g_g);
            let o_s = tape.sigmoid(o_g);
            let fc = tape.mul(f_s, c);
            let ig = tape.mul(i_s, g_t);
            c = tape.add(fc, ig);
            let ct = tape.tanh(c);
            h = tape.mul(o_s, ct);
        }
        h
    }
}
