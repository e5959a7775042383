//! Deep tandem: the large model drafts a sketch of the next block of tokens
//! in parallel (inputs shifted by the block length, attention restricted to
//! completed blocks), and a small fully-autoregressive model consumes the
//! sketch additively together with previous-token embeddings. The
//! block-parallel ablation maps the sketch straight through the unembedding.
//!
//! Output indexing: logits at position `i` predict `tokens[i]` (the sketch
//! stream consumes `tokens[i - gamma]`, the small stream `tokens[i - 1]`,
//! with a begin marker standing in below index zero).

use crate::error::{Error, Result};
use crate::nncore::layers::Linear;
use crate::nncore::ops::KeySpan;
use crate::nncore::param::ParameterStore;
use crate::nncore::rng::CounterRng;
use crate::nncore::tensor::{Scalar, Tensor};
use crate::transformer::{Decoder, DecoderConfig, StackCache};

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DeepTandemConfig {
    pub large: DecoderConfig,
    pub small: DecoderConfig,
    pub gamma: usize,
    /// In-vocab token id used as the begin-of-draft marker.
    pub begin_token: usize,
}

impl DeepTandemConfig {
    pub fn validate(&self) -> Result<()> {
        self.large.validate()?;
        self.small.validate()?;
        if self.gamma == 0 {
            return Err(Error::InvalidConfig("gamma must be >= 1".into()));
        }
        if self.large.vocab_size != self.small.vocab_size {
            return Err(Error::InvalidConfig("large/small vocab sizes differ".into()));
        }
        if self.large.max_context != self.small.max_context {
            return Err(Error::InvalidConfig("large/small max_context differ".into()));
        }
        if self.begin_token >= self.large.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "begin_token {} outside vocab {}",
                self.begin_token, self.large.vocab_size
            )));
        }
        Ok(())
    }
}

/// Sketch-stream attention span for position `i`: the prefix up to
/// `ceil((i - gamma)/gamma) * gamma` inclusive, plus the position itself.
pub fn sketch_span(i: usize, gamma: usize) -> KeySpan {
    let g = gamma as i64;
    let k = (i as i64 - g).div_euclid(g) + i64::from((i as i64 - g).rem_euclid(g) != 0);
    let boundary = k * g; // inclusive upper bound of the visible prefix
    let prefix = (boundary + 1).clamp(0, i as i64 + 1) as usize;
    let extra = (i >= prefix).then_some(i);
    KeySpan {
        prefix,
        extra,
        local_start: 0,
    }
}

/// Sketch-stream input ids: `tokens[i - gamma]`, begin marker below zero.
pub fn sketch_inputs(tokens: &[usize], gamma: usize, begin_token: usize) -> Vec<usize> {
    (0..tokens.len())
        .map(|i| if i < gamma { begin_token } else { tokens[i - gamma] })
        .collect()
}

fn small_inputs(tokens: &[usize], begin_token: usize) -> Vec<usize> {
    (0..tokens.len())
        .map(|i| if i == 0 { begin_token } else { tokens[i - 1] })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DeepTandem {
    pub cfg: DeepTandemConfig,
    pub large: Decoder,
    pub small: Decoder,
    pub ff_dt: Linear,
}

pub struct DeepTrainCache<T> {
    tokens: Vec<usize>,
    sketch_ids: Vec<usize>,
    small_ids: Vec<usize>,
    sketch_stack: StackCache<T>,
    small_stack: StackCache<T>,
}

impl DeepTandem {
    pub fn init<T: Scalar>(
        store: &mut ParameterStore<T>,
        cfg: &DeepTandemConfig,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let large = Decoder::init(store, "large", &cfg.large, rng)?;
        let small = Decoder::init(store, "small", &cfg.small, rng)?;
        let ff_dt = Linear::init_scaled(
            store,
            "deep.ff_dt",
            cfg.large.d_model,
            cfg.small.d_model,
            true,
            1.0 / (cfg.large.d_model as f64).sqrt(),
            rng,
        )?;
        Ok(DeepTandem {
            cfg: cfg.clone(),
            large,
            small,
            ff_dt,
        })
    }

    pub fn bind<T: Scalar>(store: &ParameterStore<T>, cfg: &DeepTandemConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(DeepTandem {
            cfg: cfg.clone(),
            large: Decoder::bind(store, "large", &cfg.large)?,
            small: Decoder::bind(store, "small", &cfg.small)?,
            ff_dt: Linear::bind(store, "deep.ff_dt", cfg.large.d_model, cfg.small.d_model, true)?,
        })
    }

    fn check_len(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        if tokens.len() > self.cfg.large.max_context {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                max_context: self.cfg.large.max_context,
            });
        }
        Ok(())
    }

    /// Large-model sketch pass. Returns the final-layer representations per
    /// position (and the stack cache when training).
    pub fn sketch_forward<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        tokens: &[usize],
        want_cache: bool,
    ) -> Result<(Vec<T>, Option<StackCache<T>>)> {
        self.check_len(tokens)?;
        let s = tokens.len();
        let ids = sketch_inputs(tokens, self.cfg.gamma, self.cfg.begin_token);
        let spans: Vec<KeySpan> = (0..s).map(|i| sketch_span(i, self.cfg.gamma)).collect();
        let x0 = self.large.embed(store, &ids, 0);
        let (_, cache) = self.large.stack_forward(store, x0, s, spans, true)?;
        let cache = cache.expect("cache requested");
        let reps = cache.layer_out.last().expect("at least one layer").clone();
        Ok((reps, want_cache.then_some(cache)))
    }

    /// Full deep-tandem pass; logits at `i` predict `tokens[i]`.
    pub fn forward<T: Scalar>(&self, store: &ParameterStore<T>, tokens: &[usize]) -> Result<Tensor<T>> {
        Ok(self.forward_inner(store, tokens, false)?.0)
    }

    pub fn forward_train<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        tokens: &[usize],
    ) -> Result<(Tensor<T>, DeepTrainCache<T>)> {
        let (logits, cache) = self.forward_inner(store, tokens, true)?;
        Ok((logits, cache.expect("cache requested")))
    }

    fn forward_inner<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        tokens: &[usize],
        want_cache: bool,
    ) -> Result<(Tensor<T>, Option<DeepTrainCache<T>>)> {
        let s = tokens.len();
        let (reps, sketch_stack) = self.sketch_forward(store, tokens, true)?;
        let small_ids = small_inputs(tokens, self.cfg.begin_token);
        let sketch_add = self.ff_dt.forward(store, &reps, s);
        let mut x0 = self.small.embed(store, &small_ids, 0);
        for i in 0..x0.len() {
            x0[i] = x0[i] + sketch_add[i];
        }
        let spans: Vec<KeySpan> = (0..s).map(KeySpan::causal).collect();
        let (logits, small_stack) = self.small.stack_forward(store, x0, s, spans, want_cache)?;
        let cache = want_cache.then(|| DeepTrainCache {
            tokens: tokens.to_vec(),
            sketch_ids: sketch_inputs(tokens, self.cfg.gamma, self.cfg.begin_token),
            small_ids,
            sketch_stack: sketch_stack.expect("sketch cache"),
            small_stack: small_stack.expect("small cache"),
        });
        Ok((logits, cache))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &DeepTrainCache<T>,
        dlogits: &Tensor<T>,
    ) {
        let s = cache.tokens.len();
        let dx0_small = self
            .small
            .stack_backward(store, &cache.small_stack, Some(dlogits), None);
        // x0_small = small embed + ff_dt(sketch reps)
        self.small.embed_backward(store, &cache.small_ids, 0, &dx0_small);
        let reps = cache.sketch_stack.layer_out.last().expect("layers");
        let mut d_reps = vec![T::zero(); reps.len()];
        self.ff_dt
            .backward_into(store, reps, &dx0_small, s, Some(&mut d_reps));
        let mut inject: Vec<Option<Vec<T>>> = vec![None; self.cfg.large.n_layers];
        inject[self.cfg.large.n_layers - 1] = Some(d_reps);
        let dx0_sketch = self
            .large
            .stack_backward(store, &cache.sketch_stack, None, Some(&inject));
        self.large.embed_backward(store, &cache.sketch_ids, 0, &dx0_sketch);
    }
}

/// Block-parallel ablation: the sketch stream mapped straight through the
/// large model's final norm and unembedding; logits at `i` predict
/// `tokens[i]`. No autoregressive component.
pub fn block_parallel_forward<T: Scalar>(
    large: &Decoder,
    store: &ParameterStore<T>,
    tokens: &[usize],
    gamma: usize,
    begin_token: usize,
) -> Result<Tensor<T>> {
    Ok(block_parallel_train(large, store, tokens, gamma, begin_token, false)?.0)
}

pub fn block_parallel_train<T: Scalar>(
    large: &Decoder,
    store: &ParameterStore<T>,
    tokens: &[usize],
    gamma: usize,
    begin_token: usize,
    want_cache: bool,
) -> Result<(Tensor<T>, Option<(Vec<usize>, StackCache<T>)>)> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("token sequence"));
    }
    if tokens.len() > large.cfg.max_context {
        return Err(Error::ContextOverflow {
            len: tokens.len(),
            max_context: large.cfg.max_context,
        });
    }
    let s = tokens.len();
    let ids = sketch_inputs(tokens, gamma, begin_token);
    let spans: Vec<KeySpan> = (0..s).map(|i| sketch_span(i, gamma)).collect();
    let x0 = large.embed(store, &ids, 0);
    let (logits, cache) = large.stack_forward(store, x0, s, spans, want_cache)?;
    Ok((logits, cache.map(|c| (ids, c))))
}

pub fn block_parallel_backward<T: Scalar>(
    large: &Decoder,
    store: &mut ParameterStore<T>,
    ids: &[usize],
    cache: &StackCache<T>,
    dlogits: &Tensor<T>,
) {
    let dx0 = large.stack_backward(store, cache, Some(dlogits), None);
    large.embed_backward(store, ids, 0, &dx0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::ops;

    fn micro_cfg(gamma: usize) -> DeepTandemConfig {
        DeepTandemConfig {
            large: DecoderConfig {
                vocab_size: 11,
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                d_ff: 20,
                max_context: 16,
            },
            small: DecoderConfig {
                vocab_size: 11,
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                d_ff: 12,
                max_context: 16,
            },
            gamma,
            begin_token: 0,
        }
    }

    fn build(seed: u64, gamma: usize) -> (ParameterStore<f32>, DeepTandem) {
        let mut store = ParameterStore::new();
        let mut rng = CounterRng::new(seed, 0);
        let model = DeepTandem::init(&mut store, &micro_cfg(gamma), &mut rng).unwrap();
        (store, model)
    }

    #[test]
    fn sketch_span_layouts() {
        // gamma=2: position 4 sees {0,1,2} plus itself; 5 sees {0..4} plus itself
        let s4 = sketch_span(4, 2);
        assert_eq!((s4.prefix, s4.extra), (3, Some(4)));
        let s5 = sketch_span(5, 2);
        assert_eq!((s5.prefix, s5.extra), (5, Some(5)));
        // first block: only itself (and markers before it)
        let s0 = sketch_span(0, 2);
        assert_eq!((s0.prefix, s0.extra), (0, Some(0)));
        let s1 = sketch_span(1, 2);
        assert_eq!((s1.prefix, s1.extra), (1, Some(1)));
        // gamma=1 degenerates to plain causal
        for i in 0..6 {
            let sp = sketch_span(i, 1);
            assert_eq!(sp.prefix + usize::from(sp.extra.is_some()), i + 1);
        }
    }

    #[test]
    fn first_block_sees_markers_only() {
        let (store, model) = build(31, 2);
        let (a, _) = model.sketch_forward(&store, &[1, 2, 3, 4, 5, 6], false).unwrap();
        let (b, _) = model.sketch_forward(&store, &[9, 8, 7, 6, 5, 4], false).unwrap();
        let d = model.cfg.large.d_model;
        for i in 0..2 {
            for c in 0..d {
                assert_eq!(a[i * d + c].to_bits(), b[i * d + c].to_bits());
            }
        }
    }

    #[test]
    fn sketch_mask_enumeration() {
        // Perturb every token in turn and verify the influence set obeys the
        // boundary rule: sketch_i may depend on tokens at positions <= k*gamma
        // with k = ceil((i-gamma)/gamma).
        let gamma = 2usize;
        let (store, model) = build(32, gamma);
        let tokens = [1usize, 2, 3, 4, 5, 6, 7, 8];
        let (base, _) = model.sketch_forward(&store, &tokens, false).unwrap();
        let d = model.cfg.large.d_model;
        for t in 0..tokens.len() {
            let mut perturbed = tokens;
            perturbed[t] = (tokens[t] + 3) % 11;
            let (alt, _) = model.sketch_forward(&store, &perturbed, false).unwrap();
            for i in 0..tokens.len() {
                let changed = (0..d).any(|c| base[i * d + c] != alt[i * d + c]);
                let g = gamma as i64;
                let k = (i as i64 - g).div_euclid(g)
                    + i64::from((i as i64 - g).rem_euclid(g) != 0);
                let allowed = t as i64 <= k * g;
                if !allowed {
                    assert!(!changed, "token {t} leaked into sketch {i}");
                }
            }
        }
        // Spec example: gamma=2, perturbing token 5 leaves sketches at
        // positions <= 6 unchanged and reaches position 7 via its own input.
        let mut perturbed = tokens;
        perturbed[5] = 9;
        let (alt, _) = model.sketch_forward(&store, &perturbed, false).unwrap();
        for i in 0..=6 {
            for c in 0..d {
                assert_eq!(base[i * d + c].to_bits(), alt[i * d + c].to_bits());
            }
        }
        let changed7 = (0..d).any(|c| base[7 * d + c] != alt[7 * d + c]);
        assert!(changed7);
    }

    #[test]
    fn gamma_one_equals_shifted_forward_full() {
        let (store, model) = build(33, 1);
        let tokens = [4usize, 1, 7, 2, 9];
        let shifted = sketch_inputs(&tokens, 1, model.cfg.begin_token);
        let direct = model.large.forward_full(&store, &shifted).unwrap();
        let (logits, _) =
            block_parallel_train(&model.large, &store, &tokens, 1, model.cfg.begin_token, false)
                .unwrap();
        for (a, b) in logits.data().iter().zip(direct.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_ff_dt_equals_standalone_small() {
        let (mut store, model) = build(34, 2);
        store.value_mut(model.ff_dt.w).fill(0.0);
        let tokens = [4usize, 1, 7, 2, 9, 3];
        let deep = model.forward(&store, &tokens).unwrap();
        let shifted = small_inputs(&tokens, model.cfg.begin_token);
        let alone = model.small.forward_full(&store, &shifted).unwrap();
        for (a, b) in deep.data().iter().zip(alone.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn deep_causality() {
        // logits at i predict tokens[i]; they may depend only on tokens < i.
        let (store, model) = build(35, 2);
        let tokens = [1usize, 2, 3, 4, 5, 6];
        let base = model.forward(&store, &tokens).unwrap();
        let v = model.cfg.small.vocab_size;
        for t in 0..tokens.len() {
            let mut perturbed = tokens;
            perturbed[t] = (tokens[t] + 5) % 11;
            let alt = model.forward(&store, &perturbed).unwrap();
            for i in 0..=t {
                for c in 0..v {
                    assert_eq!(
                        base.data()[i * v + c].to_bits(),
                        alt.data()[i * v + c].to_bits(),
                        "token {t} leaked into logits {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn block_parallel_deterministic() {
        let (store, model) = build(36, 2);
        let tokens = [3usize, 1, 4, 1, 5];
        let a = block_parallel_forward(&model.large, &store, &tokens, 2, 0).unwrap();
        let b = block_parallel_forward(&model.large, &store, &tokens, 2, 0).unwrap();
        assert_eq!(a.data(), b.data());
    }

    /// Scalar transcription of the deep-tandem equations in f64.
    #[test]
    fn deep_matches_equation_oracle() {
        let gamma = 2usize;
        let (store32, model) = build(37, gamma);
        let store = store32.map_precision::<f64>();
        let tokens = [4usize, 9, 2, 7, 1, 5];
        let got = model.forward(&store, &tokens).unwrap();

        let s = tokens.len();
        let get = |name: &str| store.value(store.id(name).unwrap()).data().to_vec();
        let rms = |x: &[f64], g: &[f64]| -> Vec<f64> {
            let n = x.len() as f64;
            let ms = x.iter().map(|v| v * v).sum::<f64>() / n + 1e-6;
            let r = 1.0 / ms.sqrt();
            x.iter().zip(g).map(|(v, gg)| v * r * gg).collect()
        };
        let matvec = |w: &[f64], x: &[f64], d_out: usize, d_in: usize| -> Vec<f64> {
            (0..d_out)
                .map(|o| (0..d_in).map(|i| w[o * d_in + i] * x[i]).sum())
                .collect()
        };
        // generic decoder layer walk over explicit allowed sets
        let run_stack = |prefix: &str,
                         cfg: &DecoderConfig,
                         x_in: Vec<Vec<f64>>,
                         allowed: &dyn Fn(usize) -> Vec<usize>|
         -> Vec<Vec<f64>> {
            let mut x = x_in;
            let d = cfg.d_model;
            let dh = d / cfg.n_heads;
            for l in 0..cfg.n_layers {
                let base = format!("{prefix}.layers.{l}");
                let g1 = get(&format!("{base}.attn_norm.g"));
                let wq = get(&format!("{base}.attn.wq.w"));
                let wk = get(&format!("{base}.attn.wk.w"));
                let wv = get(&format!("{base}.attn.wv.w"));
                let wo = get(&format!("{base}.attn.wo.w"));
                let g2 = get(&format!("{base}.ffn_norm.g"));
                let w1 = get(&format!("{base}.ffn.up.w"));
                let b1 = get(&format!("{base}.ffn.up.b"));
                let w2 = get(&format!("{base}.ffn.down.w"));
                let b2 = get(&format!("{base}.ffn.down.b"));
                let n1: Vec<Vec<f64>> = x.iter().map(|r| rms(r, &g1)).collect();
                let mut next = Vec::new();
                for i in 0..s {
                    let q = matvec(&wq, &n1[i], d, d);
                    let mut out = vec![0.0; d];
                    for h in 0..cfg.n_heads {
                        let qs = &q[h * dh..(h + 1) * dh];
                        let idxs = allowed(i);
                        let scores: Vec<f64> = idxs
                            .iter()
                            .map(|&p| {
                                let kp = matvec(&wk, &n1[p], d, d);
                                qs.iter()
                                    .zip(&kp[h * dh..(h + 1) * dh])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>()
                                    / (dh as f64).sqrt()
                            })
                            .collect();
                        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let ex: Vec<f64> = scores.iter().map(|sc| (sc - mx).exp()).collect();
                        let z: f64 = ex.iter().sum();
                        for (n, &p) in idxs.iter().enumerate() {
                            let vp = matvec(&wv, &n1[p], d, d);
                            for c in 0..dh {
                                out[h * dh + c] += ex[n] / z * vp[h * dh + c];
                            }
                        }
                    }
                    let o = matvec(&wo, &out, d, d);
                    let h: Vec<f64> = x[i].iter().zip(&o).map(|(a, b)| a + b).collect();
                    let n2 = rms(&h, &g2);
                    let mut up = matvec(&w1, &n2, cfg.d_ff, d);
                    for (u, b) in up.iter_mut().zip(&b1) {
                        *u += b;
                    }
                    let act: Vec<f64> = up.iter().map(|&v| ops::gelu(v)).collect();
                    let mut down = matvec(&w2, &act, d, cfg.d_ff);
                    for (dn, b) in down.iter_mut().zip(&b2) {
                        *dn += b;
                    }
                    next.push(h.iter().zip(&down).map(|(a, b)| a + b).collect());
                }
                x = next;
            }
            x
        };

        // Eq. 3: sketch stream
        let lcfg = &model.cfg.large;
        let l_tok = get("large.tok_emb");
        let l_pos = get("large.pos_emb");
        let dl = lcfg.d_model;
        let sk_ids = sketch_inputs(&tokens, gamma, model.cfg.begin_token);
        let x0: Vec<Vec<f64>> = (0..s)
            .map(|i| {
                (0..dl)
                    .map(|c| l_tok[sk_ids[i] * dl + c] + l_pos[i * dl + c])
                    .collect()
            })
            .collect();
        let g = gamma as i64;
        let sketch = run_stack("large", lcfg, x0, &|i: usize| {
            let k = (i as i64 - g).div_euclid(g) + i64::from((i as i64 - g).rem_euclid(g) != 0);
            let bound = k * g;
            let mut idxs: Vec<usize> = (0..=bound.min(i as i64 - 1).max(-1))
                .filter(|p| *p >= 0)
                .map(|p| p as usize)
                .collect();
            idxs.push(i);
            idxs
        });

        // Eq. 4: small stream with additive sketch projection
        let scfg = &model.cfg.small;
        let ds = scfg.d_model;
        let s_tok = get("small.tok_emb");
        let s_pos = get("small.pos_emb");
        let fw = get("deep.ff_dt.w");
        let fb = get("deep.ff_dt.b");
        let sm_ids = small_inputs(&tokens, model.cfg.begin_token);
        let y0: Vec<Vec<f64>> = (0..s)
            .map(|i| {
                let mut add = matvec(&fw, &sketch[i], ds, dl);
                for (a, b) in add.iter_mut().zip(&fb) {
                    *a += b;
                }
                (0..ds)
                    .map(|c| s_tok[sm_ids[i] * ds + c] + s_pos[i * ds + c] + add[c])
                    .collect()
            })
            .collect();
        let y = run_stack("small", scfg, y0, &|i: usize| (0..=i).collect());

        let gf = get("small.final_norm.g");
        let hw = get("small.head.w");
        let v = scfg.vocab_size;
        for i in 0..s {
            let want = matvec(&hw, &rms(&y[i], &gf), v, ds);
            for c in 0..v {
                let diff = (got.data()[i * v + c] - want[c]).abs();
                assert!(diff < 1e-9, "pos {i} col {c} diff {diff}");
            }
        }
    }
}
