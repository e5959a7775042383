//! Adaptive block length: a 2-layer MLP predicts drafter/verifier
//! disagreement (soft target: total-variation distance between their
//! next-token distributions) from the drafter's entropy, top-k probabilities
//! and top-k token embeddings. During decoding the prediction gates
//! continue-drafting versus verify-now.

use crate::error::{Error, Result};
use crate::nncore::layers::Linear;
use crate::nncore::ops::{gelu, gelu_grad, softmax};
use crate::nncore::param::ParameterStore;
use crate::nncore::rng::CounterRng;
use crate::nncore::tensor::{Scalar, Tensor};
use crate::tandem::TandemModel;
use rayon::prelude::*;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RouterConfig {
    /// Top-k count for probability and embedding features.
    pub k: usize,
    pub hidden_dim: usize,
    /// Agreement threshold: keep drafting while predicted agreement
    /// `1 - d` stays at or above `tau` (flip with
    /// `threshold_on_disagreement`).
    pub tau: f64,
    /// Hard cap on consecutive draft steps between verifications.
    pub gamma_max: usize,
    /// Alternate reading of the threshold: continue while the predicted
    /// disagreement itself is at or below `tau`.
    pub threshold_on_disagreement: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            k: 4,
            hidden_dim: 32,
            tau: 0.8,
            gamma_max: 12,
            threshold_on_disagreement: false,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.gamma_max == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("router k, hidden_dim, gamma_max must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau {} not in (0,1)", self.tau)));
        }
        Ok(())
    }

    pub fn feature_dim(&self, d_model: usize) -> usize {
        1 + self.k + self.k * d_model
    }
}

/// Total variation distance `0.5 * sum |p - q|` between two probability
/// vectors. Errors on length mismatch or unnormalized input (1e-5 slack).
pub fn tv_distance<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::shape(
            format!("{}", p.len()),
            format!("{}", q.len()),
            "tv_distance",
        ));
    }
    for v in [p, q] {
        let sum: f64 = v.iter().map(|x| x.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::NotNormalized { sum });
        }
    }
    let mut acc = T::zero();
    for i in 0..p.len() {
        acc = acc + (p[i] - q[i]).abs();
    }
    Ok(acc * T::from_f64(0.5))
}

#[derive(Debug, Clone)]
pub struct RouterFeatures<T> {
    pub entropy: T,
    pub topk_probs: Vec<T>,
    pub topk_embeddings: Vec<T>,
}

impl<T: Scalar> RouterFeatures<T> {
    pub fn to_vec(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(1 + self.topk_probs.len() + self.topk_embeddings.len());
        v.push(self.entropy);
        v.extend_from_slice(&self.topk_probs);
        v.extend_from_slice(&self.topk_embeddings);
        v
    }
}

/// Entropy (nats), descending top-k probabilities (ties broken toward the
/// lower token id) and the corresponding input-embedding rows.
pub fn extract_features<T: Scalar>(
    dist: &[T],
    emb_table: &Tensor<T>,
    cfg: &RouterConfig,
) -> Result<RouterFeatures<T>> {
    let vocab = dist.len();
    if cfg.k > vocab {
        return Err(Error::InvalidConfig(format!("k {} exceeds vocab {vocab}", cfg.k)));
    }
    let sum: f64 = dist.iter().map(|x| x.as_f64()).sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::NotNormalized { sum });
    }
    let mut entropy = T::zero();
    for &p in dist {
        if p > T::zero() {
            entropy = entropy - p * p.ln();
        }
    }
    let mut idx: Vec<usize> = (0..vocab).collect();
    idx.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).unwrap().then(a.cmp(&b)));
    let d = emb_table.shape()[1];
    let mut topk_probs = Vec::with_capacity(cfg.k);
    let mut topk_embeddings = Vec::with_capacity(cfg.k * d);
    for &t in idx.iter().take(cfg.k) {
        topk_probs.push(dist[t]);
        topk_embeddings.extend_from_slice(emb_table.row(t));
    }
    Ok(RouterFeatures {
        entropy,
        topk_probs,
        topk_embeddings,
    })
}

/// 2-layer MLP (linear, GeLU, linear, sigmoid) over the feature vector,
/// output read as disagreement probability. Owns its parameters.
#[derive(Debug, Clone)]
pub struct RouterModel<T> {
    pub cfg: RouterConfig,
    pub in_dim: usize,
    pub store: ParameterStore<T>,
    pub l1: Linear,
    pub l2: Linear,
}

impl<T: Scalar> RouterModel<T> {
    pub fn init(cfg: RouterConfig, in_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = CounterRng::new(seed, 77);
        let l1 = Linear::init(&mut store, "router.l1", in_dim, cfg.hidden_dim, true, &mut rng)?;
        let l2 = Linear::init(&mut store, "router.l2", cfg.hidden_dim, 1, true, &mut rng)?;
        Ok(RouterModel {
            cfg,
            in_dim,
            store,
            l1,
            l2,
        })
    }

    pub fn bind(cfg: RouterConfig, in_dim: usize, store: ParameterStore<T>) -> Result<Self> {
        cfg.validate()?;
        let l1 = Linear::bind(&store, "router.l1", in_dim, cfg.hidden_dim, true)?;
        let l2 = Linear::bind(&store, "router.l2", cfg.hidden_dim, 1, true)?;
        Ok(RouterModel {
            cfg,
            in_dim,
            store,
            l1,
            l2,
        })
    }

    fn logit(&self, features: &[T]) -> T {
        debug_assert_eq!(features.len(), self.in_dim);
        let pre = self.l1.forward(&self.store, features, 1);
        let act: Vec<T> = pre.iter().map(|&h| gelu(h)).collect();
        self.l2.forward(&self.store, &act, 1)[0]
    }

    /// Predicted disagreement probability in (0, 1).
    pub fn predict(&self, features: &[T]) -> T {
        let z = self.logit(features);
        T::one() / (T::one() + (-z).exp())
    }

    /// One BCE-with-soft-targets step over a batch of rows; accumulates
    /// gradients into the internal store and returns the mean loss.
    pub fn accumulate_bce(&mut self, features: &[Vec<T>], targets: &[T]) -> T {
        debug_assert_eq!(features.len(), targets.len());
        let n = features.len();
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut loss = T::zero();
        for (x, &t) in features.iter().zip(targets) {
            let pre = self.l1.forward(&self.store, x, 1);
            let act: Vec<T> = pre.iter().map(|&h| gelu(h)).collect();
            let z = self.l2.forward(&self.store, &act, 1)[0];
            // stable BCE with logits
            let zf = z.as_f64();
            let l = zf.max(0.0) - zf * t.as_f64() + (-zf.abs()).exp().ln_1p();
            loss = loss + T::from_f64(l);
            let p = T::one() / (T::one() + (-z).exp());
            let dz = [(p - t) * inv_n];
            let dact = self.l2.backward(&mut self.store, &act, &dz, 1);
            let dpre: Vec<T> = dact
                .iter()
                .zip(pre.iter())
                .map(|(&da, &h)| da * gelu_grad(h))
                .collect();
            self.l1.backward_into(&mut self.store, x, &dpre, 1, None);
        }
        loss * inv_n
    }
}

#[derive(Debug, Clone)]
pub struct RouterDataset<T> {
    /// Row-major `[n, feature_dim]`.
    pub features: Tensor<T>,
    pub targets: Vec<T>,
}

impl<T: Scalar> RouterDataset<T> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[T] {
        self.features.row(i)
    }
}

/// Teacher-forced pass over a held-out corpus: for every position, features
/// from the secondary's next-token distribution and target
/// `tv(secondary, primary)`.
pub fn build_router_dataset<T: Scalar>(
    chunks: &[Vec<usize>],
    model: &TandemModel,
    store: &ParameterStore<T>,
    cfg: &RouterConfig,
) -> Result<RouterDataset<T>> {
    if chunks.is_empty() {
        return Err(Error::EmptyInput("router corpus"));
    }
    cfg.validate()?;
    let emb = store.value(model.secondary.tok_emb);
    let dim = cfg.feature_dim(model.cfg.secondary.d_model);

    let per_chunk: Vec<Result<(Vec<T>, Vec<T>)>> = chunks
        .par_iter()
        .map(|chunk| {
            let (sec_logits, cache) = model.forward_teacher_train(store, chunk)?;
            let mut feats = Vec::with_capacity(chunk.len() * dim);
            let mut targets = Vec::with_capacity(chunk.len());
            for i in 0..chunk.len() {
                let q = softmax(sec_logits.row(i))?;
                let p = softmax(cache.primary_logits.row(i))?;
                targets.push(tv_distance(&q, &p)?);
                feats.extend(extract_features(&q, emb, cfg)?.to_vec());
            }
            Ok((feats, targets))
        })
        .collect();

    let mut features = Vec::new();
    let mut targets = Vec::new();
    for r in per_chunk {
        let (f, t) = r?;
        features.extend(f);
        targets.extend(t);
    }
    let n = targets.len();
    Ok(RouterDataset {
        features: Tensor::new(vec![n, dim], features)?,
        targets,
    })
}

/// Minibatch Adam on BCE against the soft TV targets.
pub fn train_router<T: Scalar>(
    dataset: &RouterDataset<T>,
    cfg: &RouterConfig,
    steps: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<(RouterModel<T>, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("router dataset"));
    }
    let in_dim = dataset.features.shape()[1];
    let mut model = RouterModel::init(cfg.clone(), in_dim, seed)?;
    let mut opt = crate::nncore::adam::Adam::new(crate::nncore::adam::AdamParams::default());
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut rng = CounterRng::new(seed, 0x7015 + step as u64);
        let idxs: Vec<usize> = (0..batch.min(dataset.len()))
            .map(|_| rng.next_below(dataset.len()))
            .collect();
        let feats: Vec<Vec<T>> = idxs.iter().map(|&i| dataset.feature_row(i).to_vec()).collect();
        let targs: Vec<T> = idxs.iter().map(|&i| dataset.targets[i]).collect();
        model.store.zero_grads();
        let loss = model.accumulate_bce(&feats, &targs);
        opt.step(&mut model.store, lr);
        curve.push(loss.as_f64());
    }
    Ok((model, curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteDecision {
    Continue,
    Verify,
}

/// Verify once the step cap is hit; otherwise continue while predicted
/// agreement clears the threshold (or predicted disagreement stays under it,
/// with the inverted reading).
pub fn should_continue(disagreement: f64, steps_in_block: usize, cfg: &RouterConfig) -> RouteDecision {
    if steps_in_block >= cfg.gamma_max {
        return RouteDecision::Verify;
    }
    let continue_ok = if cfg.threshold_on_disagreement {
        disagreement <= cfg.tau
    } else {
        (1.0 - disagreement) >= cfg.tau
    };
    if continue_ok {
        RouteDecision::Continue
    } else {
        RouteDecision::Verify
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tandem::TandemConfig;
    use crate::transformer::DecoderConfig;
    use proptest::prelude::*;

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.5f64, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let d = tv_distance(&[0.5f64, 0.5], &[0.75, 0.25]).unwrap();
        assert!((d - 0.25).abs() < 1e-12);
    }

    #[test]
    fn tv_errors() {
        assert!(tv_distance(&[1.0f32], &[0.5, 0.5]).is_err());
        assert!(tv_distance(&[0.9f32, 0.2], &[0.5, 0.5]).is_err());
    }

    proptest! {
        #[test]
        fn tv_is_a_metric(raw in proptest::collection::vec(0.01f64..1.0, 9)) {
            let norm = |v: &[f64]| -> Vec<f64> {
                let s: f64 = v.iter().sum();
                v.iter().map(|x| x / s).collect()
            };
            let p = norm(&raw[0..3]);
            let q = norm(&raw[3..6]);
            let r = norm(&raw[6..9]);
            let dpq = tv_distance(&p, &q).unwrap();
            let dqp = tv_distance(&q, &p).unwrap();
            prop_assert!((dpq - dqp).abs() < 1e-12);
            prop_assert!(tv_distance(&p, &p).unwrap() < 1e-12);
            let dpr = tv_distance(&p, &r).unwrap();
            let dqr = tv_distance(&q, &r).unwrap();
            prop_assert!(dpr <= dpq + dqr + 1e-12);
            prop_assert!((0.0..=1.0).contains(&dpq));
        }
    }

    fn emb(v: usize, d: usize) -> Tensor<f64> {
        Tensor::new(vec![v, d], (0..v * d).map(|i| i as f64 * 0.25).collect()).unwrap()
    }

    #[test]
    fn features_uniform() {
        let cfg = RouterConfig {
            k: 2,
            ..RouterConfig::default()
        };
        let f = extract_features(&[0.25f64; 4], &emb(4, 3), &cfg).unwrap();
        assert!((f.entropy - 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(f.topk_probs, vec![0.25, 0.25]);
        // ties break toward lower token ids: embeddings of tokens 0 and 1
        assert_eq!(f.topk_embeddings[..3], [0.0, 0.25, 0.5]);
        assert_eq!(f.topk_embeddings[3..], [0.75, 1.0, 1.25]);
    }

    #[test]
    fn features_one_hot() {
        let cfg = RouterConfig {
            k: 3,
            ..RouterConfig::default()
        };
        let f = extract_features(&[0.0f64, 1.0, 0.0, 0.0], &emb(4, 2), &cfg).unwrap();
        assert_eq!(f.entropy, 0.0);
        assert_eq!(f.topk_probs, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn feature_length() {
        let cfg = RouterConfig {
            k: 4,
            ..RouterConfig::default()
        };
        let dist = vec![0.125f64; 8];
        let f = extract_features(&dist, &emb(8, 8), &cfg).unwrap();
        assert_eq!(f.to_vec().len(), 1 + 4 + 4 * 8);
        assert_eq!(cfg.feature_dim(8), 37);
    }

    #[test]
    fn k_exceeding_vocab_errors() {
        let cfg = RouterConfig {
            k: 5,
            ..RouterConfig::default()
        };
        assert!(extract_features(&[0.25f64; 4], &emb(4, 2), &cfg).is_err());
    }

    fn twin_tandem(gamma: usize) -> (ParameterStore<f32>, TandemModel) {
        let dcfg = DecoderConfig {
            vocab_size: 7,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_context: 16,
        };
        let cfg = TandemConfig::with_default_map(dcfg.clone(), dcfg, gamma, false).unwrap();
        let mut store = ParameterStore::new();
        let mut rng = CounterRng::new(42, 0);
        let model = TandemModel::init(&mut store, &cfg, &mut rng).unwrap();
        // copy primary weights onto the secondary to make exact twins
        for l in 0..cfg.primary.n_layers {
            for suffix in [
                format!("layers.{l}.attn_norm.g"),
                format!("layers.{l}.attn.wq.w"),
                format!("layers.{l}.attn.wk.w"),
                format!("layers.{l}.attn.wv.w"),
                format!("layers.{l}.attn.wo.w"),
                format!("layers.{l}.ffn_norm.g"),
                format!("layers.{l}.ffn.up.w"),
                format!("layers.{l}.ffn.up.b"),
                format!("layers.{l}.ffn.down.w"),
                format!("layers.{l}.ffn.down.b"),
            ] {
                let src = store.value(store.id(&format!("primary.{suffix}")).unwrap()).clone();
                *store.value_mut(store.id(&format!("secondary.{suffix}")).unwrap()) = src;
            }
        }
        for suffix in ["tok_emb", "pos_emb", "final_norm.g", "head.w"] {
            let src = store.value(store.id(&format!("primary.{suffix}")).unwrap()).clone();
            *store.value_mut(store.id(&format!("secondary.{suffix}")).unwrap()) = src;
        }
        (store, model)
    }

    #[test]
    fn twin_models_give_zero_targets() {
        // gamma >= chunk length: the tandem degenerates to the standalone
        // secondary, which is an exact twin of the primary.
        let (store, model) = twin_tandem(16);
        let chunks = vec![vec![1usize, 2, 3, 4], vec![5, 6, 0]];
        let ds = build_router_dataset(&chunks, &model, &store, &RouterConfig::default()).unwrap();
        assert_eq!(ds.len(), 7); // total positions processed
        for &t in &ds.targets {
            assert!(t.abs() < 1e-6, "target {t}");
        }
    }

    #[test]
    fn dataset_spot_check_matches_recompute() {
        let (store, model) = twin_tandem(2);
        let chunks = vec![vec![1usize, 2, 3, 4, 5, 6]];
        let cfg = RouterConfig::default();
        let ds = build_router_dataset(&chunks, &model, &store, &cfg).unwrap();
        let (sec, cache) = model.forward_teacher_train(&store, &chunks[0]).unwrap();
        for i in 0..chunks[0].len() {
            let q = softmax(sec.row(i)).unwrap();
            let p = softmax(cache.primary_logits.row(i)).unwrap();
            let want = tv_distance(&q, &p).unwrap();
            assert_eq!(ds.targets[i], want);
        }
    }

    #[test]
    fn router_learns_all_zero_targets() {
        let mut rng = CounterRng::new(3, 0);
        let n = 64;
        let dim = 5;
        let feats: Vec<f64> = (0..n * dim).map(|_| rng.next_normal()).collect();
        let ds = RouterDataset {
            features: Tensor::new(vec![n, dim], feats).unwrap(),
            targets: vec![0.0f64; n],
        };
        let (model, _) = train_router(&ds, &RouterConfig::default(), 400, 0.01, 32, 1).unwrap();
        for i in 0..n {
            assert!(model.predict(ds.feature_row(i)) < 0.1);
        }
    }

    #[test]
    fn router_converges_to_target_mean() {
        // constant features, mixed targets: BCE optimum is the mean
        let n = 40;
        let dim = 3;
        let mu = 0.3;
        let ds = RouterDataset {
            features: Tensor::new(vec![n, dim], vec![1.0f64; n * dim]).unwrap(),
            targets: (0..n).map(|i| if i % 10 < 3 { 1.0 } else { 0.0 }).collect(),
        };
        let (model, _) = train_router(&ds, &RouterConfig::default(), 800, 0.02, 40, 2).unwrap();
        let p = model.predict(ds.feature_row(0));
        assert!((p - mu).abs() < 0.05, "predicted {p}, want ~{mu}");
    }

    #[test]
    fn router_loss_decreases_on_separable_data() {
        let mut rng = CounterRng::new(9, 0);
        let n = 128;
        let dim = 4;
        let mut feats = Vec::with_capacity(n * dim);
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let cls = i % 2;
            for _ in 0..dim {
                feats.push(rng.next_normal() * 0.2 + cls as f64);
            }
            targets.push(cls as f64);
        }
        let ds = RouterDataset {
            features: Tensor::new(vec![n, dim], feats).unwrap(),
            targets,
        };
        let (_, curve) = train_router(&ds, &RouterConfig::default(), 500, 0.01, 64, 3).unwrap();
        let early: f64 = curve[..20].iter().sum::<f64>() / 20.0;
        let late: f64 = curve[curve.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(late < 0.5 * early, "early {early}, late {late}");
    }

    #[test]
    fn should_continue_rules() {
        let cfg = RouterConfig {
            tau: 0.8,
            gamma_max: 10,
            ..RouterConfig::default()
        };
        assert_eq!(should_continue(0.1, 3, &cfg), RouteDecision::Continue);
        assert_eq!(should_continue(0.95, 3, &cfg), RouteDecision::Verify);
        assert_eq!(should_continue(0.0, 10, &cfg), RouteDecision::Verify);
        // monotone in d
        let mut prev = RouteDecision::Continue;
        for i in 0..=10 {
            let d = i as f64 / 10.0;
            let dec = should_continue(d, 0, &cfg);
            if prev == RouteDecision::Verify {
                assert_eq!(dec, RouteDecision::Verify);
            }
            prev = dec;
        }
    }
}
