//! Parameter-holding layers: linear, RMS norm, feedforward, attention
//! projections. Forward passes return whatever intermediates their backward
//! needs; backward passes accumulate parameter gradients into the store and
//! return input gradients.

use crate::error::Result;
use crate::nncore::ops::{self, gelu, gelu_grad};
use crate::nncore::param::{ParamId, ParameterStore};
use crate::nncore::rng::CounterRng;
use crate::nncore::tensor::{Scalar, Tensor};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        Self::init_scaled(store, name, d_in, d_out, bias, 1.0 / (d_in as f64).sqrt(), rng)
    }

    pub fn init_scaled<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        let w = store.insert_normal(format!("{name}.w"), vec![d_out, d_in], std, rng)?;
        let b = if bias {
            Some(store.insert(format!("{name}.b"), Tensor::zeros(vec![d_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn bind<T: Scalar>(store: &ParameterStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let w = store.id(&format!("{name}.w"))?;
        let b = if bias { Some(store.id(&format!("{name}.b"))?) } else { None };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward<T: Scalar>(&self, store: &ParameterStore<T>, x: &[T], rows: usize) -> Vec<T> {
        let w = store.value(self.w).data();
        let b = self.b.map(|id| store.value(id).data());
        ops::linear_rows(x, w, b, rows, self.d_in, self.d_out)
    }

    /// Returns dx; accumulates dw/db.
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        x: &[T],
        dy: &[T],
        rows: usize,
    ) -> Vec<T> {
        let mut dx = vec![T::zero(); rows * self.d_in];
        self.backward_into(store, x, dy, rows, Some(&mut dx));
        dx
    }

    pub fn backward_into<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        x: &[T],
        dy: &[T],
        rows: usize,
        dx: Option<&mut [T]>,
    ) {
        let w = store.value(self.w).data().to_vec();
        let mut dw = vec![T::zero(); w.len()];
        let mut db = self.b.map(|_| vec![T::zero(); self.d_out]);
        ops::linear_rows_bwd(dy, x, &w, rows, self.d_in, self.d_out, dx, &mut dw, db.as_deref_mut());
        store.add_grad(self.w, &dw);
        if let (Some(b), Some(db)) = (self.b, db) {
            store.add_grad(b, &db);
        }
    }
}

#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub g: ParamId,
    pub dim: usize,
}

impl RmsNorm {
    pub fn init<T: Scalar>(store: &mut ParameterStore<T>, name: &str, dim: usize) -> Result<Self> {
        let ones = Tensor::new(vec![dim], vec![T::one(); dim])?;
        let g = store.insert(format!("{name}.g"), ones)?;
        Ok(RmsNorm { g, dim })
    }

    pub fn bind<T: Scalar>(store: &ParameterStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(RmsNorm {
            g: store.id(&format!("{name}.g"))?,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParameterStore<T>, x: &[T], rows: usize) -> (Vec<T>, Vec<T>) {
        ops::rmsnorm_rows(x, store.value(self.g).data(), rows, self.dim, T::from_f64(RMS_EPS))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        x: &[T],
        inv_rms: &[T],
        dy: &[T],
        rows: usize,
        dx: &mut [T],
    ) {
        let g = store.value(self.g).data().to_vec();
        let mut dg = vec![T::zero(); self.dim];
        ops::rmsnorm_rows_bwd(dy, x, &g, inv_rms, rows, self.dim, dx, &mut dg);
        store.add_grad(self.g, &dg);
    }
}

/// Two-layer feedforward with GeLU: `W2 gelu(W1 x + b1) + b2`.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

pub struct FfnCache<T> {
    pub pre: Vec<T>,
    pub act: Vec<T>,
}

impl Ffn {
    pub fn init<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        Ok(Ffn {
            up: Linear::init(store, &format!("{name}.up"), d_model, d_ff, true, rng)?,
            down: Linear::init(store, &format!("{name}.down"), d_ff, d_model, true, rng)?,
        })
    }

    pub fn bind<T: Scalar>(store: &ParameterStore<T>, name: &str, d_model: usize, d_ff: usize) -> Result<Self> {
        Ok(Ffn {
            up: Linear::bind(store, &format!("{name}.up"), d_model, d_ff, true)?,
            down: Linear::bind(store, &format!("{name}.down"), d_ff, d_model, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParameterStore<T>, x: &[T], rows: usize) -> (Vec<T>, FfnCache<T>) {
        let pre = self.up.forward(store, x, rows);
        let act: Vec<T> = pre.iter().map(|&h| gelu(h)).collect();
        let y = self.down.forward(store, &act, rows);
        (y, FfnCache { pre, act })
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        x: &[T],
        cache: &FfnCache<T>,
        dy: &[T],
        rows: usize,
    ) -> Vec<T> {
        let dact = self.down.backward(store, &cache.act, dy, rows);
        let dpre: Vec<T> = dact
            .iter()
            .zip(cache.pre.iter())
            .map(|(&da, &h)| da * gelu_grad(h))
            .collect();
        self.up.backward(store, x, &dpre, rows)
    }
}

/// Spec-level feedforward entry: `W2 gelu(W1 x + b1) + b2` over one vector.
pub fn ffn_forward<T: Scalar>(
    x: &[T],
    w1: &Tensor<T>,
    b1: &[T],
    w2: &Tensor<T>,
    b2: &[T],
) -> Result<Vec<T>> {
    let d_in = x.len();
    let d_hidden = w1.shape()[0];
    if w1.shape()[1] != d_in || b1.len() != d_hidden {
        return Err(crate::error::Error::shape(
            format!("[{d_hidden}, {d_in}]"),
            format!("{:?}", w1.shape()),
            "ffn_forward w1",
        ));
    }
    let d_out = w2.shape()[0];
    if w2.shape()[1] != d_hidden || b2.len() != d_out {
        return Err(crate::error::Error::shape(
            format!("[{d_out}, {d_hidden}]"),
            format!("{:?}", w2.shape()),
            "ffn_forward w2",
        ));
    }
    let h = ops::linear_rows(x, w1.data(), Some(b1), 1, d_in, d_hidden);
    let a: Vec<T> = h.iter().map(|&v| gelu(v)).collect();
    Ok(ops::linear_rows(&a, w2.data(), Some(b2), 1, d_hidden, d_out))
}

/// Attention projections for one layer (no biases).
#[derive(Debug, Clone)]
pub struct AttnProj {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl AttnProj {
    pub fn init<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        Ok(AttnProj {
            wq: Linear::init(store, &format!("{name}.wq"), d_model, d_model, false, rng)?,
            wk: Linear::init(store, &format!("{name}.wk"), d_model, d_model, false, rng)?,
            wv: Linear::init(store, &format!("{name}.wv"), d_model, d_model, false, rng)?,
            wo: Linear::init(store, &format!("{name}.wo"), d_model, d_model, false, rng)?,
            n_heads,
            d_model,
        })
    }

    pub fn bind<T: Scalar>(store: &ParameterStore<T>, name: &str, d_model: usize, n_heads: usize) -> Result<Self> {
        Ok(AttnProj {
            wq: Linear::bind(store, &format!("{name}.wq"), d_model, d_model, false)?,
            wk: Linear::bind(store, &format!("{name}.wk"), d_model, d_model, false)?,
            wv: Linear::bind(store, &format!("{name}.wv"), d_model, d_model, false)?,
            wo: Linear::bind(store, &format!("{name}.wo"), d_model, d_model, false)?,
            n_heads,
            d_model,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ffn_identity_like_gelu() {
        // 1x1 identity weight, zero bias, input 1.0 -> GeLU(1.0) ~ 0.8413.
        let w1 = Tensor::new(vec![1, 1], vec![1.0f64]).unwrap();
        let w2 = Tensor::new(vec![1, 1], vec![1.0f64]).unwrap();
        let y = ffn_forward(&[1.0], &w1, &[0.0], &w2, &[0.0]).unwrap();
        assert!((y[0] - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn ffn_zero_weights_zero_output() {
        let w1 = Tensor::new(vec![3, 2], vec![0.0f32; 6]).unwrap();
        let w2 = Tensor::new(vec![2, 3], vec![0.0f32; 6]).unwrap();
        let y = ffn_forward(&[1.0, -2.0], &w1, &[0.0; 3], &w2, &[0.0; 2]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn ffn_shape_mismatch_errors() {
        let w1 = Tensor::new(vec![3, 2], vec![0.0f32; 6]).unwrap();
        let w2 = Tensor::new(vec![2, 4], vec![0.0f32; 8]).unwrap();
        assert!(ffn_forward(&[1.0, -2.0], &w1, &[0.0; 3], &w2, &[0.0; 2]).is_err());
    }

    #[test]
    fn ffn_matches_scalar_oracle() {
        // Random 4-dim case against a plain nested-loop evaluation.
        let mut rng = CounterRng::new(11, 0);
        let d = 4;
        let h = 5;
        let w1v: Vec<f64> = (0..h * d).map(|_| rng.next_normal()).collect();
        let b1: Vec<f64> = (0..h).map(|_| rng.next_normal()).collect();
        let w2v: Vec<f64> = (0..d * h).map(|_| rng.next_normal()).collect();
        let b2: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
        let w1 = Tensor::new(vec![h, d], w1v.clone()).unwrap();
        let w2 = Tensor::new(vec![d, h], w2v.clone()).unwrap();
        let y = ffn_forward(&x, &w1, &b1, &w2, &b2).unwrap();

        for o in 0..d {
            let mut acc = b2[o];
            for j in 0..h {
                let mut pre = b1[j];
                for i in 0..d {
                    pre += w1v[j * d + i] * x[i];
                }
                acc += w2v[o * h + j] * gelu(pre);
            }
            assert!((y[o] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_backward_linear_gradient() {
        // loss = sum(W x): dW = broadcast of x per output row.
        let mut store = ParameterStore::<f64>::new();
        let mut rng = CounterRng::new(5, 0);
        let lin = Linear::init(&mut store, "l", 3, 2, false, &mut rng).unwrap();
        let x = [1.0, 2.0, 3.0];
        let dy = [1.0, 1.0];
        lin.backward(&mut store, &x, &dy, 1);
        assert_eq!(store.grad(lin.w).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }
}
