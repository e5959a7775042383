//! Tandem pair: a secondary decoder that attends to projected primary-model
//! representations for tokens in completed blocks and to its own
//! representations inside the open block.
//!
//! The boundary convention is strict: for a query at 0-based position `i`
//! with block length `gamma`, positions below `floor(i/gamma)*gamma` are
//! primary-sourced and the rest of the causal window is secondary-local.
//! Inference keeps one key/value entry per position whose source tag flips to
//! primary-projected when a completed block is refreshed.

use crate::error::{Error, Result};
use crate::nncore::layers::Linear;
use crate::nncore::ops::{self, KeySpan};
use crate::nncore::param::ParameterStore;
use crate::nncore::rng::CounterRng;
use crate::nncore::tensor::{Scalar, Tensor};
use crate::transformer::{sample, Decoder, DecoderConfig, DecoderTrainCache, KvCache, Sampling};

/// Start of the block containing position `i`: `floor(i/gamma) * gamma`.
/// Primary-sourced positions for a query at `i` are exactly those below it.
pub fn block_boundary(i: usize, gamma: usize) -> usize {
    assert!(gamma >= 1, "gamma must be >= 1");
    (i / gamma) * gamma
}

/// Evenly spaced layer assignment from secondary to primary layers:
/// `l(j) = ceil((j+1) * L_L / L_S) - 1`. Non-decreasing and ends at the
/// primary's last layer.
pub fn default_layer_map(l_s: usize, l_l: usize) -> Result<Vec<usize>> {
    if l_s == 0 || l_l == 0 {
        return Err(Error::InvalidConfig("layer counts must be positive".into()));
    }
    if l_s > l_l {
        return Err(Error::InvalidConfig(format!(
            "secondary depth {l_s} exceeds primary depth {l_l}"
        )));
    }
    Ok((0..l_s).map(|j| ((j + 1) * l_l).div_ceil(l_s) - 1).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TandemConfig {
    pub primary: DecoderConfig,
    pub secondary: DecoderConfig,
    pub gamma: usize,
    pub layer_map: Vec<usize>,
    pub free_token: bool,
}

impl TandemConfig {
    pub fn with_default_map(
        primary: DecoderConfig,
        secondary: DecoderConfig,
        gamma: usize,
        free_token: bool,
    ) -> Result<Self> {
        let layer_map = default_layer_map(secondary.n_layers, primary.n_layers)?;
        let cfg = TandemConfig {
            primary,
            secondary,
            gamma,
            layer_map,
            free_token,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.primary.validate()?;
        self.secondary.validate()?;
        if self.gamma == 0 {
            return Err(Error::InvalidConfig("gamma must be >= 1".into()));
        }
        if self.primary.vocab_size != self.secondary.vocab_size {
            return Err(Error::InvalidConfig("primary/secondary vocab sizes differ".into()));
        }
        if self.primary.max_context != self.secondary.max_context {
            return Err(Error::InvalidConfig("primary/secondary max_context differ".into()));
        }
        if self.layer_map.len() != self.secondary.n_layers {
            return Err(Error::InvalidConfig(format!(
                "layer_map length {} != secondary layers {}",
                self.layer_map.len(),
                self.secondary.n_layers
            )));
        }
        let mut prev = 0usize;
        for (j, &m) in self.layer_map.iter().enumerate() {
            if m >= self.primary.n_layers {
                return Err(Error::InvalidConfig(format!(
                    "layer_map[{j}] = {m} out of range (primary has {} layers)",
                    self.primary.n_layers
                )));
            }
            if m < prev {
                return Err(Error::InvalidConfig("layer_map must be non-decreasing".into()));
            }
            prev = m;
        }
        Ok(())
    }
}

/// Per-position attention sourcing for a teacher-forced pass. `local_start[i]`
/// is the first position whose keys/values come from the secondary's own
/// stream when queried from `i`; `protected` positions stay primary-sourced
/// regardless (free-token rule).
#[derive(Debug, Clone)]
pub struct BlockPlan {
    pub local_start: Vec<usize>,
    pub protected: Vec<bool>,
}

impl BlockPlan {
    /// Training layout: blocks of `gamma` from position 0.
    pub fn training(len: usize, gamma: usize) -> Self {
        BlockPlan {
            local_start: (0..len).map(|i| block_boundary(i, gamma)).collect(),
            protected: vec![false; len],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TandemModel {
    pub cfg: TandemConfig,
    pub primary: Decoder,
    pub secondary: Decoder,
    /// One linear projection (with bias) per secondary layer, primary dim in.
    pub proj: Vec<Linear>,
}

pub struct TandemLayerCache<T> {
    y_in: Vec<T>,
    n1_own: Vec<T>,
    inv1_own: Vec<T>,
    n1_hat: Vec<T>,
    inv1_hat: Vec<T>,
    q: Vec<T>,
    k_own: Vec<T>,
    v_own: Vec<T>,
    k_hat: Vec<T>,
    v_hat: Vec<T>,
    attn_out: Vec<T>,
    h: Vec<T>,
    n2: Vec<T>,
    inv2: Vec<T>,
    ffn: crate::nncore::layers::FfnCache<T>,
}

pub struct TandemTrainCache<T> {
    pub tokens: Vec<usize>,
    pub plan: BlockPlan,
    pub primary: DecoderTrainCache<T>,
    pub primary_logits: Tensor<T>,
    yhat: Vec<Vec<T>>,
    layers: Vec<TandemLayerCache<T>>,
    sec_final_x: Vec<T>,
    sec_final_n: Vec<T>,
    sec_final_inv: Vec<T>,
}

impl TandemModel {
    pub fn init<T: Scalar>(
        store: &mut ParameterStore<T>,
        cfg: &TandemConfig,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let primary = Decoder::init(store, "primary", &cfg.primary, rng)?;
        let secondary = Decoder::init(store, "secondary", &cfg.secondary, rng)?;
        let proj = Self::init_projections(store, cfg, rng)?;
        Ok(TandemModel {
            cfg: cfg.clone(),
            primary,
            secondary,
            proj,
        })
    }

    /// Random projections at variance-preserving scale 1/sqrt(d_primary).
    pub fn init_projections<T: Scalar>(
        store: &mut ParameterStore<T>,
        cfg: &TandemConfig,
        rng: &mut CounterRng,
    ) -> Result<Vec<Linear>> {
        let scale = 1.0 / (cfg.primary.d_model as f64).sqrt();
        (0..cfg.secondary.n_layers)
            .map(|j| {
                let lin = Linear::init_scaled(
                    store,
                    &format!("proj.{j}"),
                    cfg.primary.d_model,
                    cfg.secondary.d_model,
                    true,
                    scale,
                    rng,
                )?;
                Ok(lin)
            })
            .collect()
    }

    pub fn bind<T: Scalar>(store: &ParameterStore<T>, cfg: &TandemConfig) -> Result<Self> {
        cfg.validate()?;
        let primary = Decoder::bind(store, "primary", &cfg.primary)?;
        let secondary = Decoder::bind(store, "secondary", &cfg.secondary)?;
        let proj = (0..cfg.secondary.n_layers)
            .map(|j| {
                Linear::bind(
                    store,
                    &format!("proj.{j}"),
                    cfg.primary.d_model,
                    cfg.secondary.d_model,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TandemModel {
            cfg: cfg.clone(),
            primary,
            secondary,
            proj,
        })
    }

    /// Teacher-forced tandem pass with the training block layout.
    pub fn forward_teacher<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        tokens: &[usize],
    ) -> Result<Tensor<T>> {
        let plan = BlockPlan::training(tokens.len(), self.cfg.gamma);
        Ok(self.forward_with_plan(store, tokens, &plan)?.0)
    }

    /// Teacher-forced training pass: logits plus the full train cache.
    pub fn forward_teacher_train<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        tokens: &[usize],
    ) -> Result<(Tensor<T>, TandemTrainCache<T>)> {
        let plan = BlockPlan::training(tokens.len(), self.cfg.gamma);
        self.forward_with_plan(store, tokens, &plan)
    }

    /// Teacher-forced tandem pass under an explicit block plan. Returns the
    /// secondary logits and a train cache (which also carries the primary's
    /// logits for distillation or dual-loss training).
    pub fn forward_with_plan<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        tokens: &[usize],
        plan: &BlockPlan,
    ) -> Result<(Tensor<T>, TandemTrainCache<T>)> {
        let s = tokens.len();
        if plan.local_start.len() != s || plan.protected.len() != s {
            return Err(Error::shape(
                format!("plan of length {s}"),
                format!("{}", plan.local_start.len()),
                "forward_with_plan",
            ));
        }
        let (primary_logits, primary_cache) = self.primary.forward_train(store, tokens)?;
        let d_s = self.cfg.secondary.d_model;
        let heads = self.cfg.secondary.n_heads;

        let spans: Vec<KeySpan> = (0..s)
            .map(|i| KeySpan {
                prefix: i + 1,
                extra: None,
                local_start: plan.local_start[i],
            })
            .collect();

        let mut y = self.secondary.embed(store, tokens, 0);
        let mut yhat_all = Vec::with_capacity(self.proj.len());
        let mut layer_caches = Vec::with_capacity(self.proj.len());

        for (j, layer) in self.secondary.layers.iter().enumerate() {
            let yhat = self.proj[j].forward(store, &primary_cache.stack.layer_out[self.cfg.layer_map[j]], s);
            let (n1_own, inv1_own) = layer.attn_norm.forward(store, &y, s);
            let (n1_hat, inv1_hat) = layer.attn_norm.forward(store, &yhat, s);
            let q = layer.attn.wq.forward(store, &n1_own, s);
            let k_own = layer.attn.wk.forward(store, &n1_own, s);
            let v_own = layer.attn.wv.forward(store, &n1_own, s);
            let k_hat = layer.attn.wk.forward(store, &n1_hat, s);
            let v_hat = layer.attn.wv.forward(store, &n1_hat, s);
            let attn_out = ops::attention_rows(
                &q,
                &k_hat,
                &v_hat,
                &k_own,
                &v_own,
                &spans,
                Some(&plan.protected),
                heads,
                d_s,
            )?;
            let o = layer.attn.wo.forward(store, &attn_out, s);
            let mut h = y.clone();
            for i in 0..h.len() {
                h[i] = h[i] + o[i];
            }
            let (n2, inv2) = layer.ffn_norm.forward(store, &h, s);
            let (f, ffn_cache) = layer.ffn.forward(store, &n2, s);
            let mut y_next = h.clone();
            for i in 0..y_next.len() {
                y_next[i] = y_next[i] + f[i];
            }
            layer_caches.push(TandemLayerCache {
                y_in: y,
                n1_own,
                inv1_own,
                n1_hat,
                inv1_hat,
                q,
                k_own,
                v_own,
                k_hat,
                v_hat,
                attn_out,
                h,
                n2,
                inv2,
                ffn: ffn_cache,
            });
            yhat_all.push(yhat);
            y = y_next;
        }

        let (nf, invf) = self.secondary.final_norm.forward(store, &y, s);
        let logits = self.secondary.head.forward(store, &nf, s);
        let logits = Tensor::new(vec![s, self.cfg.secondary.vocab_size], logits)?;
        let cache = TandemTrainCache {
            tokens: tokens.to_vec(),
            plan: plan.clone(),
            primary: primary_cache,
            primary_logits,
            yhat: yhat_all,
            layers: layer_caches,
            sec_final_x: y,
            sec_final_n: nf,
            sec_final_inv: invf,
        };
        Ok((logits, cache))
    }

    /// Backward through a [`forward_with_plan`] pass. `d_primary_logits`
    /// carries a loss applied directly to the primary's output (dual-loss
    /// training); `backprop_primary` controls whether gradient flows through
    /// the primary stack at all (pointless work when it is frozen).
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &TandemTrainCache<T>,
        d_sec_logits: &Tensor<T>,
        d_primary_logits: Option<&Tensor<T>>,
        backprop_primary: bool,
    ) {
        let s = cache.tokens.len();
        let d_s = self.cfg.secondary.d_model;
        let heads = self.cfg.secondary.n_heads;
        let spans: Vec<KeySpan> = (0..s)
            .map(|i| KeySpan {
                prefix: i + 1,
                extra: None,
                local_start: cache.plan.local_start[i],
            })
            .collect();

        let dnf = self
            .secondary
            .head
            .backward(store, &cache.sec_final_n, d_sec_logits.data(), s);
        let mut dy = vec![T::zero(); s * d_s];
        self.secondary.final_norm.backward(
            store,
            &cache.sec_final_x,
            &cache.sec_final_inv,
            &dnf,
            s,
            &mut dy,
        );

        let mut inject: Vec<Option<Vec<T>>> = vec![None; self.cfg.primary.n_layers];

        for (j, layer) in self.secondary.layers.iter().enumerate().rev() {
            let lc = &cache.layers[j];
            let dn2 = layer.ffn.backward(store, &lc.n2, &lc.ffn, &dy, s);
            let mut dh = dy;
            layer.ffn_norm.backward(store, &lc.h, &lc.inv2, &dn2, s, &mut dh);
            let dattn = layer.attn.wo.backward(store, &lc.attn_out, &dh, s);

            let mut dq = vec![T::zero(); s * d_s];
            let mut dk_own = vec![T::zero(); s * d_s];
            let mut dv_own = vec![T::zero(); s * d_s];
            let mut dk_hat = vec![T::zero(); s * d_s];
            let mut dv_hat = vec![T::zero(); s * d_s];
            ops::attention_rows_bwd(
                &dattn,
                &lc.q,
                &lc.k_hat,
                &lc.v_hat,
                &lc.k_own,
                &lc.v_own,
                &spans,
                Some(&cache.plan.protected),
                heads,
                d_s,
                &mut dq,
                Some(&mut dk_hat),
                Some(&mut dv_hat),
                &mut dk_own,
                &mut dv_own,
            );

            let mut dn1_own = vec![T::zero(); s * d_s];
            layer.attn.wq.backward_into(store, &lc.n1_own, &dq, s, Some(&mut dn1_own));
            layer.attn.wk.backward_into(store, &lc.n1_own, &dk_own, s, Some(&mut dn1_own));
            layer.attn.wv.backward_into(store, &lc.n1_own, &dv_own, s, Some(&mut dn1_own));
            let mut dn1_hat = vec![T::zero(); s * d_s];
            layer.attn.wk.backward_into(store, &lc.n1_hat, &dk_hat, s, Some(&mut dn1_hat));
            layer.attn.wv.backward_into(store, &lc.n1_hat, &dv_hat, s, Some(&mut dn1_hat));

            let mut dy_in = dh;
            layer
                .attn_norm
                .backward(store, &lc.y_in, &lc.inv1_own, &dn1_own, s, &mut dy_in);
            let mut dyhat = vec![T::zero(); s * d_s];
            layer
                .attn_norm
                .backward(store, &cache.yhat[j], &lc.inv1_hat, &dn1_hat, s, &mut dyhat);

            // Through the projection into the primary's layer output.
            let m = self.cfg.layer_map[j];
            let x_src = &cache.primary.stack.layer_out[m];
            if backprop_primary {
                let mut dx = vec![T::zero(); s * self.cfg.primary.d_model];
                self.proj[j].backward_into(store, x_src, &dyhat, s, Some(&mut dx));
                match &mut inject[m] {
                    Some(buf) => {
                        for i in 0..dx.len() {
                            buf[i] = buf[i] + dx[i];
                        }
                    }
                    None => inject[m] = Some(dx),
                }
            } else {
                self.proj[j].backward_into(store, x_src, &dyhat, s, None);
            }

            dy = dy_in;
        }

        self.secondary.embed_backward(store, &cache.tokens, 0, &dy);

        if backprop_primary || d_primary_logits.is_some() {
            self.primary
                .backward(store, &cache.primary, d_primary_logits, Some(&inject));
        }
    }
}

/// Key/value source tag per cached position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceTag {
    PrimaryProjected,
    SecondaryLocal,
}

/// Per-position key/value store for tandem generation: the primary's own KV
/// cache plus one K/V entry per secondary layer per position, with a source
/// tag. Completed blocks are primary-projected; the open block is local.
#[derive(Debug, Clone)]
pub struct TandemCache<T> {
    pub primary: KvCache<T>,
    sec_k: Vec<Vec<T>>,
    sec_v: Vec<Vec<T>>,
    tags: Vec<SourceTag>,
    protected: Vec<bool>,
    d_s: usize,
}

impl<T: Scalar> TandemCache<T> {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tag(&self, pos: usize) -> SourceTag {
        self.tags[pos]
    }

    pub fn is_protected(&self, pos: usize) -> bool {
        self.protected[pos]
    }

    /// Positions below this are primary-refreshed.
    pub fn refreshed_len(&self) -> usize {
        self.primary.len()
    }

    pub fn truncate(&mut self, new_len: usize) {
        if new_len >= self.len() {
            self.primary.truncate(new_len.min(self.primary.len()));
            return;
        }
        for j in 0..self.sec_k.len() {
            self.sec_k[j].truncate(new_len * self.d_s);
            self.sec_v[j].truncate(new_len * self.d_s);
        }
        self.tags.truncate(new_len);
        self.protected.truncate(new_len);
        self.primary.truncate(new_len.min(self.primary.len()));
    }

    /// Raw K/V row for tests.
    pub fn kv_row(&self, layer: usize, pos: usize) -> (&[T], &[T]) {
        (
            &self.sec_k[layer][pos * self.d_s..(pos + 1) * self.d_s],
            &self.sec_v[layer][pos * self.d_s..(pos + 1) * self.d_s],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TandemMode {
    FreeToken,
    ReprOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Primary,
    Secondary,
}

/// One recorded prediction during generation: the logits that produced the
/// token now at `pos` (i.e. computed from input position `pos - 1`).
pub struct StepRecord<T> {
    pub pos: usize,
    pub provenance: Provenance,
    pub logits: Vec<T>,
}

pub struct TandemGeneration<T> {
    /// Generated tokens only (prompt excluded).
    pub tokens: Vec<usize>,
    pub provenance: Vec<Provenance>,
    /// Prompt followed by the generated tokens.
    pub full_sequence: Vec<usize>,
    pub primary_runs: usize,
    pub secondary_steps: usize,
    /// Realized block layout over the full sequence, usable with
    /// [`TandemModel::forward_with_plan`] for parity checks.
    pub plan: BlockPlan,
    pub records: Vec<StepRecord<T>>,
}

impl TandemModel {
    pub fn new_cache<T: Scalar>(&self) -> TandemCache<T> {
        let cap = self.cfg.secondary.max_context;
        TandemCache {
            primary: self.primary.new_cache(),
            sec_k: (0..self.cfg.secondary.n_layers)
                .map(|_| Vec::with_capacity(cap * self.cfg.secondary.d_model))
                .collect(),
            sec_v: (0..self.cfg.secondary.n_layers)
                .map(|_| Vec::with_capacity(cap * self.cfg.secondary.d_model))
                .collect(),
            tags: Vec::with_capacity(cap),
            protected: Vec::with_capacity(cap),
            d_s: self.cfg.secondary.d_model,
        }
    }

    /// Primary consumes `tokens`, advancing its KV cache, and the projected
    /// representations overwrite (or append) the secondary K/V entries for
    /// those positions, tagged primary-projected. Returns the primary logits
    /// for the consumed positions.
    pub fn primary_absorb<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        cache: &mut TandemCache<T>,
        tokens: &[usize],
        mark_protected: bool,
    ) -> Result<Tensor<T>> {
        let base = cache.primary.len();
        let (logits, layer_out) = self.primary.extend_cache(store, &mut cache.primary, tokens)?;
        let n = tokens.len();
        let d_s = self.cfg.secondary.d_model;
        for (j, layer) in self.secondary.layers.iter().enumerate() {
            let yhat = self.proj[j].forward(store, &layer_out[self.cfg.layer_map[j]], n);
            let (n1, _) = layer.attn_norm.forward(store, &yhat, n);
            let k = layer.attn.wk.forward(store, &n1, n);
            let v = layer.attn.wv.forward(store, &n1, n);
            let need = (base + n) * d_s;
            if cache.sec_k[j].len() < need {
                cache.sec_k[j].resize(need, T::zero());
                cache.sec_v[j].resize(need, T::zero());
            }
            cache.sec_k[j][base * d_s..need].copy_from_slice(&k);
            cache.sec_v[j][base * d_s..need].copy_from_slice(&v);
        }
        for p in base..base + n {
            if p < cache.tags.len() {
                cache.tags[p] = SourceTag::PrimaryProjected;
                cache.protected[p] = mark_protected;
            } else {
                cache.tags.push(SourceTag::PrimaryProjected);
                cache.protected.push(mark_protected);
            }
        }
        Ok(logits)
    }

    /// Refresh one completed block of exactly `gamma` tokens.
    pub fn refresh_block<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        cache: &mut TandemCache<T>,
        block_tokens: &[usize],
    ) -> Result<Tensor<T>> {
        if block_tokens.len() != self.cfg.gamma {
            return Err(Error::InvalidConfig(format!(
                "refresh_block expects a complete block of {} tokens, got {}",
                self.cfg.gamma,
                block_tokens.len()
            )));
        }
        self.primary_absorb(store, cache, block_tokens, false)
    }

    /// Secondary consumes one input token at `pos` and returns its logits.
    /// A protected position keeps its primary-derived K/V bit-identical; any
    /// other already-cached position is a caller bug.
    pub fn secondary_step<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        cache: &mut TandemCache<T>,
        token: usize,
        pos: usize,
    ) -> Result<Vec<T>> {
        let appending = pos == cache.len();
        if !appending {
            if pos > cache.len() {
                return Err(Error::InvalidConfig(format!(
                    "secondary_step at position {pos} beyond cache length {}",
                    cache.len()
                )));
            }
            if pos + 1 != cache.len() || !cache.protected[pos] {
                return Err(Error::InvalidConfig(format!(
                    "secondary_step would overwrite non-protected position {pos}"
                )));
            }
        }
        if pos >= self.cfg.secondary.max_context {
            return Err(Error::ContextOverflow {
                len: pos + 1,
                max_context: self.cfg.secondary.max_context,
            });
        }
        let d_s = self.cfg.secondary.d_model;
        let heads = self.cfg.secondary.n_heads;
        let span = [KeySpan::causal(pos)];

        let mut x = self.secondary.embed(store, &[token], pos);
        for (j, layer) in self.secondary.layers.iter().enumerate() {
            let (n1, _) = layer.attn_norm.forward(store, &x, 1);
            let q = layer.attn.wq.forward(store, &n1, 1);
            if appending {
                let k = layer.attn.wk.forward(store, &n1, 1);
                let v = layer.attn.wv.forward(store, &n1, 1);
                cache.sec_k[j].extend_from_slice(&k);
                cache.sec_v[j].extend_from_slice(&v);
            }
            let kc = &cache.sec_k[j][..(pos + 1) * d_s];
            let vc = &cache.sec_v[j][..(pos + 1) * d_s];
            let attn_out = ops::attention_rows(&q, kc, vc, kc, vc, &span, None, heads, d_s)?;
            let o = layer.attn.wo.forward(store, &attn_out, 1);
            let mut h = x;
            for i in 0..h.len() {
                h[i] = h[i] + o[i];
            }
            let (n2, _) = layer.ffn_norm.forward(store, &h, 1);
            let (f, _) = layer.ffn.forward(store, &n2, 1);
            let mut x_next = h;
            for i in 0..x_next.len() {
                x_next[i] = x_next[i] + f[i];
            }
            x = x_next;
        }
        if appending {
            cache.tags.push(SourceTag::SecondaryLocal);
            cache.protected.push(false);
        }
        let (nf, _) = self.secondary.final_norm.forward(store, &x, 1);
        Ok(self.secondary.head.forward(store, &nf, 1))
    }

    /// Block-wise generation. The prompt is processed with
    /// representation-only semantics regardless of `mode`; generation blocks
    /// then follow the requested mode. `gamma_override` lets inference run at
    /// a different block length than training.
    #[allow(clippy::too_many_arguments)]
    pub fn generate<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        prompt: &[usize],
        n_tokens: usize,
        mode: TandemMode,
        gamma_override: Option<usize>,
        sampling: Sampling,
        rng: &mut CounterRng,
        record: bool,
    ) -> Result<TandemGeneration<T>> {
        let gamma = gamma_override.unwrap_or(self.cfg.gamma);
        if gamma == 0 {
            return Err(Error::InvalidConfig("gamma must be >= 1".into()));
        }
        if prompt.is_empty() {
            return Err(Error::EmptyInput("prompt"));
        }
        if n_tokens == 0 {
            return Err(Error::EmptyInput("n_tokens"));
        }
        let max_context = self.cfg.secondary.max_context;
        if prompt.len() + n_tokens > max_context {
            return Err(Error::ContextOverflow {
                len: prompt.len() + n_tokens,
                max_context,
            });
        }

        let mut cache = self.new_cache::<T>();
        let mut committed: Vec<usize> = prompt.to_vec();
        // all-primary convention for positions the secondary never queries
        let mut local_start: Vec<usize> = (0..prompt.len()).map(|i| i + 1).collect();
        let mut provenance = Vec::new();
        let mut records = Vec::new();
        let mut primary_runs = 0usize;
        let mut secondary_steps = 0usize;

        // Prefill: representation generation only, leaving the last token for
        // whichever model consumes it first.
        if committed.len() >= 2 {
            let absorbed = committed.len() - 1;
            self.primary_absorb(store, &mut cache, &committed[..absorbed], false)?;
            primary_runs += 1;
        }

        let mut generated = 0usize;
        while generated < n_tokens {
            if mode == TandemMode::FreeToken {
                // Primary catches up on everything committed, emits the free
                // token, then eagerly consumes it so its K/V are primary-owned.
                let pending: Vec<usize> = committed[cache.primary.len()..].to_vec();
                debug_assert!(!pending.is_empty());
                let logits = self.primary_absorb(store, &mut cache, &pending, false)?;
                primary_runs += 1;
                let last_row = logits.row(logits.shape()[0] - 1);
                let free = sample(last_row, sampling, rng)?;
                if record {
                    records.push(StepRecord {
                        pos: committed.len(),
                        provenance: Provenance::Primary,
                        logits: last_row.to_vec(),
                    });
                }
                committed.push(free);
                local_start.push(committed.len()); // primary-owned position
                provenance.push(Provenance::Primary);
                generated += 1;
                if generated == n_tokens {
                    break;
                }
                self.primary_absorb(store, &mut cache, &[free], true)?;
            } else {
                // Representation only: catch up on all but the last committed
                // token, which the secondary consumes next.
                let end = committed.len() - 1;
                if cache.primary.len() < end {
                    let pending: Vec<usize> = committed[cache.primary.len()..end].to_vec();
                    self.primary_absorb(store, &mut cache, &pending, false)?;
                    primary_runs += 1;
                }
            }

            // Secondary drafts up to gamma tokens.
            for _ in 0..gamma {
                if generated == n_tokens {
                    break;
                }
                let pos = committed.len() - 1;
                let input = committed[pos];
                let logits = self.secondary_step(store, &mut cache, input, pos)?;
                secondary_steps += 1;
                if !cache.is_protected(pos) {
                    // record this query's actual window; protected positions
                    // keep the all-primary convention
                    local_start[pos] = cache.refreshed_len();
                }
                let tok = sample(&logits, sampling, rng)?;
                if record {
                    records.push(StepRecord {
                        pos: pos + 1,
                        provenance: Provenance::Secondary,
                        logits,
                    });
                }
                committed.push(tok);
                local_start.push(committed.len());
                provenance.push(Provenance::Secondary);
                generated += 1;
            }
        }

        let protected = (0..committed.len())
            .map(|p| p < cache.len() && cache.is_protected(p))
            .collect();
        Ok(TandemGeneration {
            tokens: committed[prompt.len()..].to_vec(),
            provenance,
            full_sequence: committed,
            primary_runs,
            secondary_steps,
            plan: BlockPlan {
                local_start,
                protected,
            },
            records,
        })
    }
}
