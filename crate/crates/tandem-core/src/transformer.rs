//! Standard decoder-only transformer: teacher-forced forward with hand-derived
//! backward, incremental decoding through a KV cache, and sampling.
//!
//! Layout per layer is pre-norm: `h = x + Wo attn(norm1(x))`,
//! `x' = h + ffn(norm2(h))`, with learned absolute position embeddings added
//! at layer 0 and a final RMS norm before the unembedding.

use crate::error::{Error, Result};
use crate::nncore::layers::{AttnProj, Ffn, FfnCache, Linear, RmsNorm};
use crate::nncore::ops::{self, KeySpan};
use crate::nncore::param::{ParamId, ParameterStore};
use crate::nncore::rng::CounterRng;
use crate::nncore::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.vocab_size > 0
            && self.d_model > 0
            && self.n_layers > 0
            && self.n_heads > 0
            && self.d_ff > 0
            && self.max_context > 0;
        if !all_positive {
            return Err(Error::InvalidConfig("decoder dims must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }
}

/// Token ids checked against a vocab size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        for &id in &ids {
            if id >= vocab_size {
                return Err(Error::TokenOutOfRange { id, vocab: vocab_size });
            }
        }
        Ok(TokenSequence { ids })
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub attn_norm: RmsNorm,
    pub attn: AttnProj,
    pub ffn_norm: RmsNorm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: RmsNorm,
    pub head: Linear,
    pub prefix: String,
}

/// Per-layer intermediates retained for backward.
pub struct LayerCache<T> {
    pub x_in: Vec<T>,
    pub n1: Vec<T>,
    pub inv1: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub attn_out: Vec<T>,
    pub h: Vec<T>,
    pub n2: Vec<T>,
    pub inv2: Vec<T>,
    pub ffn: FfnCache<T>,
}

/// Intermediates for one pass through the layer stack (any input embedding,
/// any attention spans).
pub struct StackCache<T> {
    pub spans: Vec<KeySpan>,
    pub rows: usize,
    pub layers: Vec<LayerCache<T>>,
    /// Residual stream after each layer; `layer_out[m]` is x^(m).
    pub layer_out: Vec<Vec<T>>,
    pub final_n: Vec<T>,
    pub final_inv: Vec<T>,
}

pub struct DecoderTrainCache<T> {
    pub tokens: Vec<usize>,
    pub stack: StackCache<T>,
}

/// Incremental key/value cache. Entries for positions below `len` are
/// immutable once written; `truncate` is the only rollback.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    pub d_model: usize,
    capacity: usize,
    len: usize,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(n_layers: usize, d_model: usize, capacity: usize) -> Self {
        KvCache {
            d_model,
            capacity,
            len: 0,
            k: (0..n_layers).map(|_| Vec::with_capacity(capacity * d_model)).collect(),
            v: (0..n_layers).map(|_| Vec::with_capacity(capacity * d_model)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn truncate(&mut self, new_len: usize) {
        if new_len >= self.len {
            return;
        }
        for layer in 0..self.k.len() {
            self.k[layer].truncate(new_len * self.d_model);
            self.v[layer].truncate(new_len * self.d_model);
        }
        self.len = new_len;
    }
}

impl Decoder {
    pub fn init<T: Scalar>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        cfg: &DecoderConfig,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let emb_std = 0.02;
        let tok_emb = store.insert_normal(
            format!("{prefix}.tok_emb"),
            vec![cfg.vocab_size, cfg.d_model],
            emb_std,
            rng,
        )?;
        let pos_emb = store.insert_normal(
            format!("{prefix}.pos_emb"),
            vec![cfg.max_context, cfg.d_model],
            emb_std,
            rng,
        )?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let base = format!("{prefix}.layers.{l}");
            layers.push(DecoderLayer {
                attn_norm: RmsNorm::init(store, &format!("{base}.attn_norm"), cfg.d_model)?,
                attn: AttnProj::init(store, &format!("{base}.attn"), cfg.d_model, cfg.n_heads, rng)?,
                ffn_norm: RmsNorm::init(store, &format!("{base}.ffn_norm"), cfg.d_model)?,
                ffn: Ffn::init(store, &format!("{base}.ffn"), cfg.d_model, cfg.d_ff, rng)?,
            });
        }
        let final_norm = RmsNorm::init(store, &format!("{prefix}.final_norm"), cfg.d_model)?;
        let head = Linear::init(store, &format!("{prefix}.head"), cfg.d_model, cfg.vocab_size, false, rng)?;
        Ok(Decoder {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            head,
            prefix: prefix.to_string(),
        })
    }

    /// Attach to parameters already present in the store (checkpoint load).
    pub fn bind<T: Scalar>(store: &ParameterStore<T>, prefix: &str, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let tok_emb = store.id(&format!("{prefix}.tok_emb"))?;
        let pos_emb = store.id(&format!("{prefix}.pos_emb"))?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let base = format!("{prefix}.layers.{l}");
            layers.push(DecoderLayer {
                attn_norm: RmsNorm::bind(store, &format!("{base}.attn_norm"), cfg.d_model)?,
                attn: AttnProj::bind(store, &format!("{base}.attn"), cfg.d_model, cfg.n_heads)?,
                ffn_norm: RmsNorm::bind(store, &format!("{base}.ffn_norm"), cfg.d_model)?,
                ffn: Ffn::bind(store, &format!("{base}.ffn"), cfg.d_model, cfg.d_ff)?,
            });
        }
        Ok(Decoder {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm: RmsNorm::bind(store, &format!("{prefix}.final_norm"), cfg.d_model)?,
            head: Linear::bind(store, &format!("{prefix}.head"), cfg.d_model, cfg.vocab_size, false)?,
            prefix: prefix.to_string(),
        })
    }

    pub fn embed<T: Scalar>(&self, store: &ParameterStore<T>, tokens: &[usize], pos_base: usize) -> Vec<T> {
        let d = self.cfg.d_model;
        let te = store.value(self.tok_emb).data();
        let pe = store.value(self.pos_emb).data();
        let mut x = vec![T::zero(); tokens.len() * d];
        for (r, &t) in tokens.iter().enumerate() {
            let pos = pos_base + r;
            for c in 0..d {
                x[r * d + c] = te[t * d + c] + pe[pos * d + c];
            }
        }
        x
    }

    fn check_tokens(&self, tokens: &[usize], extra_len: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        if tokens.len() + extra_len > self.cfg.max_context {
            return Err(Error::ContextOverflow {
                len: tokens.len() + extra_len,
                max_context: self.cfg.max_context,
            });
        }
        for &t in tokens {
            if t >= self.cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab: self.cfg.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Teacher-forced forward over a full sequence. `logits[i]` depends only
    /// on `tokens[0..=i]`.
    pub fn forward_full<T: Scalar>(&self, store: &ParameterStore<T>, tokens: &[usize]) -> Result<Tensor<T>> {
        Ok(self.forward_inner(store, tokens, false)?.0)
    }

    /// Teacher-forced forward retaining everything backward needs.
    pub fn forward_train<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        tokens: &[usize],
    ) -> Result<(Tensor<T>, DecoderTrainCache<T>)> {
        let (logits, cache) = self.forward_inner(store, tokens, true)?;
        Ok((logits, cache.expect("cache requested")))
    }

    fn forward_inner<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        tokens: &[usize],
        want_cache: bool,
    ) -> Result<(Tensor<T>, Option<DecoderTrainCache<T>>)> {
        self.check_tokens(tokens, 0)?;
        let spans: Vec<KeySpan> = (0..tokens.len()).map(KeySpan::causal).collect();
        let x = self.embed(store, tokens, 0);
        let (logits, stack) = self.stack_forward(store, x, tokens.len(), spans, want_cache)?;
        let cache = stack.map(|stack| DecoderTrainCache {
            tokens: tokens.to_vec(),
            stack,
        });
        Ok((logits, cache))
    }

    /// Run the layer stack, final norm and head over an arbitrary input
    /// embedding under arbitrary attention spans.
    pub fn stack_forward<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        x0: Vec<T>,
        rows: usize,
        spans: Vec<KeySpan>,
        want_cache: bool,
    ) -> Result<(Tensor<T>, Option<StackCache<T>>)> {
        let d = self.cfg.d_model;
        let mut x = x0;
        let mut layer_caches = Vec::new();
        let mut layer_out = Vec::new();

        for layer in &self.layers {
            let (n1, inv1) = layer.attn_norm.forward(store, &x, rows);
            let q = layer.attn.wq.forward(store, &n1, rows);
            let k = layer.attn.wk.forward(store, &n1, rows);
            let v = layer.attn.wv.forward(store, &n1, rows);
            let attn_out = ops::attention_rows(&q, &k, &v, &k, &v, &spans, None, self.cfg.n_heads, d)?;
            let o = layer.attn.wo.forward(store, &attn_out, rows);
            let mut h = x.clone();
            for i in 0..h.len() {
                h[i] = h[i] + o[i];
            }
            let (n2, inv2) = layer.ffn_norm.forward(store, &h, rows);
            let (f, ffn_cache) = layer.ffn.forward(store, &n2, rows);
            let mut x_next = h.clone();
            for i in 0..x_next.len() {
                x_next[i] = x_next[i] + f[i];
            }
            if want_cache {
                layer_caches.push(LayerCache {
                    x_in: x,
                    n1,
                    inv1,
                    q,
                    k,
                    v,
                    attn_out,
                    h,
                    n2,
                    inv2,
                    ffn: ffn_cache,
                });
                layer_out.push(x_next.clone());
            }
            x = x_next;
        }

        let (nf, invf) = self.final_norm.forward(store, &x, rows);
        let logits = self.head.forward(store, &nf, rows);
        let logits = Tensor::new(vec![rows, self.cfg.vocab_size], logits)?;
        let cache = want_cache.then(|| StackCache {
            spans,
            rows,
            layers: layer_caches,
            layer_out,
            final_n: nf,
            final_inv: invf,
        });
        Ok((logits, cache))
    }

    /// Backward through a teacher-forced forward. `dlogits` may be `None`
    /// when no loss is applied to this model's own output; `inject[m]`
    /// lets callers add gradient directly at layer output `m` (used by the
    /// tandem projections).
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &DecoderTrainCache<T>,
        dlogits: Option<&Tensor<T>>,
        inject: Option<&[Option<Vec<T>>]>,
    ) {
        let dx = self.stack_backward(store, &cache.stack, dlogits, inject);
        self.embed_backward(store, &cache.tokens, 0, &dx);
    }

    /// Backward through [`Self::stack_forward`]; returns the gradient at the
    /// input embedding.
    pub fn stack_backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &StackCache<T>,
        dlogits: Option<&Tensor<T>>,
        inject: Option<&[Option<Vec<T>>]>,
    ) -> Vec<T> {
        let s = cache.rows;
        let d = self.cfg.d_model;
        let last = self.layers.len() - 1;

        // Final norm + head.
        let mut dx = vec![T::zero(); s * d];
        if let Some(dlogits) = dlogits {
            let dnf = self.head.backward(store, &cache.final_n, dlogits.data(), s);
            let x_final = &cache.layer_out[last];
            self.final_norm
                .backward(store, x_final, &cache.final_inv, &dnf, s, &mut dx);
        }

        for (m, layer) in self.layers.iter().enumerate().rev() {
            if let Some(inject) = inject {
                if let Some(extra) = &inject[m] {
                    for i in 0..dx.len() {
                        dx[i] = dx[i] + extra[i];
                    }
                }
            }
            let lc = &cache.layers[m];
            // x_out = h + ffn(norm2(h))
            let dn2 = layer.ffn.backward(store, &lc.n2, &lc.ffn, &dx, s);
            let mut dh = dx; // residual path
            layer.ffn_norm.backward(store, &lc.h, &lc.inv2, &dn2, s, &mut dh);
            // h = x_in + Wo attn
            let dattn = layer.attn.wo.backward(store, &lc.attn_out, &dh, s);
            let mut dq = vec![T::zero(); s * d];
            let mut dk = vec![T::zero(); s * d];
            let mut dv = vec![T::zero(); s * d];
            ops::attention_rows_bwd(
                &dattn, &lc.q, &lc.k, &lc.v, &lc.k, &lc.v, &cache.spans, None, self.cfg.n_heads, d,
                &mut dq, None, None, &mut dk, &mut dv,
            );
            let mut dn1 = vec![T::zero(); s * d];
            layer.attn.wq.backward_into(store, &lc.n1, &dq, s, Some(&mut dn1));
            layer.attn.wk.backward_into(store, &lc.n1, &dk, s, Some(&mut dn1));
            layer.attn.wv.backward_into(store, &lc.n1, &dv, s, Some(&mut dn1));
            let mut dx_in = dh; // residual path
            layer.attn_norm.backward(store, &lc.x_in, &lc.inv1, &dn1, s, &mut dx_in);
            dx = dx_in;
        }
        dx
    }

    pub fn embed_backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        tokens: &[usize],
        pos_base: usize,
        dx: &[T],
    ) {
        let d = self.cfg.d_model;
        let mut dte = vec![T::zero(); store.value(self.tok_emb).len()];
        let mut dpe = vec![T::zero(); store.value(self.pos_emb).len()];
        for (r, &t) in tokens.iter().enumerate() {
            let pos = pos_base + r;
            for c in 0..d {
                dte[t * d + c] = dte[t * d + c] + dx[r * d + c];
                dpe[pos * d + c] = dpe[pos * d + c] + dx[r * d + c];
            }
        }
        store.add_grad(self.tok_emb, &dte);
        store.add_grad(self.pos_emb, &dpe);
    }

    pub fn new_cache<T: Scalar>(&self) -> KvCache<T> {
        KvCache::new(self.cfg.n_layers, self.cfg.d_model, self.cfg.max_context)
    }

    /// Feed `tokens` through the cache, appending their keys/values, and
    /// return the logits for each new position plus the per-layer residual
    /// outputs (needed by the tandem refresh).
    pub fn extend_cache<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        cache: &mut KvCache<T>,
        tokens: &[usize],
    ) -> Result<(Tensor<T>, Vec<Vec<T>>)> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("extend_cache tokens"));
        }
        let base = cache.len;
        if base + tokens.len() > cache.capacity {
            return Err(Error::CacheFull {
                capacity: cache.capacity,
            });
        }
        self.check_tokens(tokens, base)?;
        let n = tokens.len();
        let d = self.cfg.d_model;
        let spans: Vec<KeySpan> = (0..n).map(|r| KeySpan::causal(base + r)).collect();

        let mut x = self.embed(store, tokens, base);
        let mut layer_out = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (n1, _) = layer.attn_norm.forward(store, &x, n);
            let q = layer.attn.wq.forward(store, &n1, n);
            let k = layer.attn.wk.forward(store, &n1, n);
            let v = layer.attn.wv.forward(store, &n1, n);
            cache.k[l].extend_from_slice(&k);
            cache.v[l].extend_from_slice(&v);
            let attn_out = ops::attention_rows(
                &q,
                &cache.k[l],
                &cache.v[l],
                &cache.k[l],
                &cache.v[l],
                &spans,
                None,
                self.cfg.n_heads,
                d,
            )?;
            let o = layer.attn.wo.forward(store, &attn_out, n);
            let mut h = x;
            for i in 0..h.len() {
                h[i] = h[i] + o[i];
            }
            let (n2, _) = layer.ffn_norm.forward(store, &h, n);
            let (f, _) = layer.ffn.forward(store, &n2, n);
            let mut x_next = h;
            for i in 0..x_next.len() {
                x_next[i] = x_next[i] + f[i];
            }
            layer_out.push(x_next.clone());
            x = x_next;
        }
        cache.len = base + n;
        let (nf, _) = self.final_norm.forward(store, &x, n);
        let logits = self.head.forward(store, &nf, n);
        Ok((Tensor::new(vec![n, self.cfg.vocab_size], logits)?, layer_out))
    }

    /// Append one token and return the logits at its position.
    pub fn decode_step<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        cache: &mut KvCache<T>,
        token: usize,
    ) -> Result<Vec<T>> {
        let (logits, _) = self.extend_cache(store, cache, &[token])?;
        Ok(logits.into_data())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature(f64),
}

/// Greedy picks the lowest-index argmax; temperature mode draws from
/// `softmax(logits / t)` using the caller's counter RNG.
pub fn sample<T: Scalar>(logits: &[T], mode: Sampling, rng: &mut CounterRng) -> Result<usize> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sample logits"));
    }
    match mode {
        Sampling::Greedy => Ok(ops::argmax_first(logits)),
        Sampling::Temperature(t) => {
            if t <= 0.0 {
                return Err(Error::InvalidTemperature(t));
            }
            let scaled: Vec<T> = logits.iter().map(|&x| x / T::from_f64(t)).collect();
            let probs = ops::softmax(&scaled)?;
            let u = rng.next_f64();
            let mut acc = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                acc += p.as_f64();
                if u < acc {
                    return Ok(i);
                }
            }
            Ok(probs.len() - 1)
        }
    }
}
