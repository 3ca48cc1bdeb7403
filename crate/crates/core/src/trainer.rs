//! End-to-end training of an [`AggregatorModel`] on synthetic set
//! mini-batches with a multi-label logistic set loss.
//!
//! A batch samples `P` identities, partitions them into sets of `set_size`,
//! and draws two samples per identity: one contributing to its set, one used
//! as a query. Every query is scored against every set descriptor through the
//! logistic head, positives/negatives optionally re-weighted by their counts.
//! Gradients for all trainable parameters are computed analytically by
//! backpropagation through the whole aggregation pipeline and are verified
//! against central finite differences in the test suite.
//!
//! The training path is single-threaded and deterministic: a fixed seed
//! yields bit-identical final parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{
    aggregate_set_tape, AggTape, AggregatorModel, GemPower, LogisticHead, NetVladParams,
    PoolingMode, ReductionParams,
};
use crate::error::{Error, Result};
use crate::linalg::{dot, normalize_backward, Mat};
use crate::scalar::{from_f64, to_f64, Real};
use crate::synth::{sample_element_with, IdentityPrototype};

/// How positive/negative loss terms are re-weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    /// No re-weighting.
    Off,
    /// Weights `1/#positives`, `1/#negatives` counted per set.
    PerSet,
    /// Weights counted over the whole batch.
    PerBatch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: PoolingMode,
    /// Elements per synthetic training set.
    pub set_size: usize,
    /// Identities per mini-batch (`P`); must be a multiple of `set_size`.
    pub batch_identities: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    /// Head-only warm-up epochs run before the full training epochs.
    pub warmup_epochs: usize,
    /// Learning rate for the head-only warm-up stage.
    pub lr_pretrain: f64,
    /// Learning rate for the main stage.
    pub lr_finetune: f64,
    /// The main learning rate is divided by this factor once.
    pub lr_decay_factor: f64,
    /// Epoch at which the decay kicks in; default is 75% of `epochs`.
    pub lr_drop_epoch: Option<usize>,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    /// VLAD cluster count `K`.
    pub clusters: usize,
    pub elem_dim: usize,
    pub set_dim: usize,
    /// Assignment sharpness for the k-means initialization; default is
    /// `10 / median(pairwise centroid distance)^2`.
    pub kmeans_alpha: Option<f64>,
    /// Elements sampled from the gallery for the k-means/PCA initialization.
    pub init_samples: usize,
    pub noise_sigma: f64,
    pub balance: BalanceMode,
    /// Initial generalized-mean exponent for the gem modes.
    pub gem_p_init: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: PoolingMode::NetVlad,
            set_size: 2,
            batch_identities: 84,
            epochs: 24,
            batches_per_epoch: 25,
            warmup_epochs: 2,
            lr_pretrain: 0.5,
            lr_finetune: 0.05,
            lr_decay_factor: 10.0,
            lr_drop_epoch: None,
            weight_decay: 0.001,
            momentum: 0.9,
            seed: 1,
            clusters: 8,
            elem_dim: 64,
            set_dim: 32,
            kmeans_alpha: None,
            init_samples: 1024,
            noise_sigma: 0.25,
            balance: BalanceMode::PerSet,
            gem_p_init: 3.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.set_size < 1 || self.batch_identities <= self.set_size {
            return Err(Error::InvalidArgument(
                "batch_identities must exceed set_size".into(),
            ));
        }
        if self.batch_identities % self.set_size != 0 {
            return Err(Error::InvalidArgument(
                "batch_identities must be a multiple of set_size".into(),
            ));
        }
        if self.epochs == 0 || self.batches_per_epoch == 0 {
            return Err(Error::InvalidArgument("need at least one epoch and batch".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidArgument("warmup_epochs must be below epochs".into()));
        }
        for (name, v) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_finetune", self.lr_finetune),
            ("lr_decay_factor", self.lr_decay_factor),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::InvalidArgument(
                "weight_decay must be >= 0 and momentum in [0, 1)".into(),
            ));
        }
        if self.clusters < 1 || self.elem_dim < 2 || self.set_dim < 1 {
            return Err(Error::InvalidArgument("invalid model dimensions".into()));
        }
        if self.mode == PoolingMode::NetVlad && self.set_dim > self.elem_dim * self.clusters {
            return Err(Error::InvalidArgument(
                "set_dim cannot exceed elem_dim * clusters".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        if !(self.gem_p_init >= 1.0) {
            return Err(Error::InvalidArgument("gem_p_init must be >= 1".into()));
        }
        Ok(())
    }

    fn lr_drop_epoch(&self) -> usize {
        self.lr_drop_epoch.unwrap_or((self.epochs * 3) / 4)
    }
}

// ------------------------------------------------------------------
// k-means initialization
// ------------------------------------------------------------------

fn count_distinct<F: Real>(sample: &[Vec<F>]) -> usize {
    let mut sorted: Vec<&Vec<F>> = sample.iter().collect();
    sorted.sort_by(|a, b| {
        for (x, y) in a.iter().zip(b.iter()) {
            match x.partial_cmp(y) {
                Some(std::cmp::Ordering::Equal) | None => continue,
                Some(ord) => return ord,
            }
        }
        std::cmp::Ordering::Equal
    });
    1 + sorted.windows(2).filter(|w| w[0] != w[1]).count()
}

fn squared_distance<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x - *y) * (*x - *y))
        .sum()
}

/// Plain Lloyd k-means with k-means++ seeding, iteration cap 100 and
/// movement tolerance 1e-6. Deterministic for a fixed seed.
fn kmeans<F: Real>(sample: &[Vec<F>], k: usize, seed: u64) -> Result<Vec<Vec<F>>> {
    if sample.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least {k} points, got {}",
            sample.len()
        )));
    }
    if count_distinct(sample) < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs {k} distinct points"
        )));
    }
    let dim = sample[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centers: Vec<Vec<F>> = Vec::with_capacity(k);
    centers.push(sample[rng.random_range(0..sample.len())].clone());
    let mut nearest_sq: Vec<F> = sample
        .iter()
        .map(|x| squared_distance(x, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = nearest_sq.iter().map(|d| to_f64(*d)).sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = sample.len() - 1;
            for (i, d) in nearest_sq.iter().enumerate() {
                target -= to_f64(*d);
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..sample.len())
        };
        centers.push(sample[next].clone());
        for (d, x) in nearest_sq.iter_mut().zip(sample) {
            let nd = squared_distance(x, centers.last().unwrap());
            if nd < *d {
                *d = nd;
            }
        }
    }

    // Lloyd iterations.
    let tol = 1e-6;
    for _ in 0..100 {
        let mut sums = vec![vec![F::zero(); dim]; k];
        let mut counts = vec![0usize; k];
        for x in sample {
            let mut best = 0;
            let mut best_d = F::infinity();
            for (c, center) in centers.iter().enumerate() {
                let d = squared_distance(x, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            counts[best] += 1;
            for (s, v) in sums[best].iter_mut().zip(x) {
                *s = *s + *v;
            }
        }
        let mut movement = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue; // keep the previous centre for empty clusters
            }
            let inv = F::one() / from_f64::<F>(counts[c] as f64);
            let new_center: Vec<F> = sums[c].iter().map(|s| *s * inv).collect();
            movement = movement.max(to_f64(squared_distance(&new_center, &centers[c])).sqrt());
            centers[c] = new_center;
        }
        if movement < tol {
            break;
        }
    }
    Ok(centers)
}

/// Initialize VLAD parameters from k-means centroids: `a_k = 2*alpha*c_k`,
/// `b_k = -alpha*|c_k|^2`, which makes the soft assignment of an element
/// peak at its nearest centroid with sharpness `alpha`.
pub fn init_kmeans<F: Real>(
    sample: &[Vec<F>],
    k: usize,
    alpha: Option<f64>,
    seed: u64,
) -> Result<NetVladParams<F>> {
    let centers = kmeans(sample, k, seed)?;
    let dim = centers[0].len();
    let alpha = match alpha {
        Some(a) => {
            if !(a > 0.0) {
                return Err(Error::InvalidArgument("kmeans alpha must be positive".into()));
            }
            a
        }
        None => {
            let mut dists: Vec<f64> = Vec::new();
            for i in 0..k {
                for j in (i + 1)..k {
                    dists.push(to_f64(squared_distance(&centers[i], &centers[j])).sqrt());
                }
            }
            dists.sort_by(f64::total_cmp);
            let median = if dists.is_empty() { 0.0 } else { dists[dists.len() / 2] };
            if median > 1e-9 {
                10.0 / (median * median)
            } else {
                10.0
            }
        }
    };
    let alpha = from_f64::<F>(alpha);
    let two = from_f64::<F>(2.0);
    let mut assign_weights = Mat::zeros(k, dim);
    let mut assign_bias = Vec::with_capacity(k);
    let mut center_mat = Mat::zeros(k, dim);
    for (c, center) in centers.iter().enumerate() {
        for (j, v) in center.iter().enumerate() {
            assign_weights.set(c, j, two * alpha * *v);
            center_mat.set(c, j, *v);
        }
        assign_bias.push(-alpha * dot(center, center));
    }
    Ok(NetVladParams {
        assign_weights,
        assign_bias,
        centers: center_mat,
    })
}

/// Initialize the reduction by PCA of a sample of pooled contributions: the
/// weight rows are the first `out_dim` principal directions (descending
/// eigenvalue, sign fixed so each row's largest-magnitude entry is
/// positive); the affine starts as identity.
pub fn init_pca<F: Real>(contributions: &[Vec<F>], out_dim: usize) -> Result<ReductionParams<F>> {
    if contributions.len() <= out_dim {
        return Err(Error::InvalidArgument(format!(
            "PCA needs more samples ({}) than components ({out_dim})",
            contributions.len()
        )));
    }
    let (_, cov) = crate::linalg::mean_and_covariance(contributions)?;
    let (eigvals, eigvecs) = crate::linalg::sym_eigen_desc(&cov)?;
    let lead = to_f64(eigvals[0]).max(0.0);
    let rank = eigvals
        .iter()
        .take_while(|l| {
            let l = to_f64(**l);
            l > 1e-12 && l > lead * 1e-10
        })
        .count();
    if rank < out_dim {
        return Err(Error::RankDeficient {
            achieved: rank,
            required: out_dim,
        });
    }
    let in_dim = cov.rows();
    let mut weights = Mat::zeros(out_dim, in_dim);
    for r in 0..out_dim {
        weights.row_mut(r).copy_from_slice(eigvecs.row(r));
    }
    Ok(ReductionParams {
        weights,
        scale: vec![F::one(); out_dim],
        shift: vec![F::zero(); out_dim],
    })
}

// ------------------------------------------------------------------
// Batch construction
// ------------------------------------------------------------------

/// One synthetic training batch.
#[derive(Debug, Clone)]
pub struct TrainBatch<F> {
    /// Raw element descriptors per set.
    pub sets: Vec<Vec<Vec<F>>>,
    /// One query descriptor per sampled identity (`P` in total).
    pub queries: Vec<Vec<F>>,
    /// Per set: indicator over the `P` batch identities.
    pub labels: Vec<Vec<bool>>,
}

/// Build a batch: `P` distinct identities partitioned into sets of
/// `set_size`, two independent samples per identity (one set element, one
/// query).
pub fn build_batch<F: Real>(
    gallery: &[IdentityPrototype<F>],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainBatch<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_batch_with(gallery, config.set_size, config.batch_identities, config.noise_sigma, &mut rng)
}

pub(crate) fn build_batch_with<F: Real>(
    gallery: &[IdentityPrototype<F>],
    set_size: usize,
    batch_identities: usize,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<TrainBatch<F>> {
    if gallery.len() < batch_identities {
        return Err(Error::InvalidArgument(format!(
            "gallery has {} identities, batch needs {batch_identities}",
            gallery.len()
        )));
    }
    if batch_identities % set_size != 0 {
        return Err(Error::InvalidArgument(
            "batch_identities must be a multiple of set_size".into(),
        ));
    }
    let chosen = rand::seq::index::sample(rng, gallery.len(), batch_identities);
    let n_sets = batch_identities / set_size;
    let mut sets = Vec::with_capacity(n_sets);
    let mut queries = Vec::with_capacity(batch_identities);
    let mut labels = vec![vec![false; batch_identities]; n_sets];
    for (pos, idx) in chosen.iter().enumerate() {
        let proto = &gallery[idx];
        let set_idx = pos / set_size;
        if pos % set_size == 0 {
            sets.push(Vec::with_capacity(set_size));
        }
        let member = sample_element_with(proto, noise_sigma, rng)?;
        sets[set_idx].push(member.vector);
        let query = sample_element_with(proto, noise_sigma, rng)?;
        queries.push(query.vector);
        labels[set_idx][pos] = true;
    }
    Ok(TrainBatch { sets, queries, labels })
}

// ------------------------------------------------------------------
// Loss and gradients
// ------------------------------------------------------------------

/// Gradients with the same shapes as the trainable parameters of a model.
#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub assign_weights: Option<Mat<F>>,
    pub assign_bias: Option<Vec<F>>,
    pub centers: Option<Mat<F>>,
    pub reduction_weights: Option<Mat<F>>,
    pub scale: Option<Vec<F>>,
    pub shift: Option<Vec<F>>,
    /// Length 1 for a shared exponent, `elem_dim` per-dimension.
    pub gem: Option<Vec<F>>,
    pub head_weight: F,
    pub head_bias: F,
}

impl<F: Real> Grads<F> {
    pub fn zeros_like(model: &AggregatorModel<F>) -> Self {
        Grads {
            assign_weights: model
                .netvlad
                .as_ref()
                .map(|nv| Mat::zeros(nv.clusters(), nv.elem_dim())),
            assign_bias: model.netvlad.as_ref().map(|nv| vec![F::zero(); nv.clusters()]),
            centers: model
                .netvlad
                .as_ref()
                .map(|nv| Mat::zeros(nv.clusters(), nv.elem_dim())),
            reduction_weights: model
                .reduction
                .as_ref()
                .map(|r| Mat::zeros(r.out_dim(), r.in_dim())),
            scale: model.reduction.as_ref().map(|r| vec![F::zero(); r.out_dim()]),
            shift: model.reduction.as_ref().map(|r| vec![F::zero(); r.out_dim()]),
            gem: model.gem_power.as_ref().map(|g| match g {
                GemPower::Shared(_) => vec![F::zero()],
                GemPower::PerDim(v) => vec![F::zero(); v.len()],
            }),
            head_weight: F::zero(),
            head_bias: F::zero(),
        }
    }
}

fn clamp_probability<F: Real>(p: F) -> F {
    let lo = from_f64::<F>(1e-12);
    let hi = F::one() - lo;
    p.max(lo).min(hi)
}

struct ForwardAgg<F> {
    out: Vec<F>,
    tape: AggTape<F>,
}

fn forward_agg<F: Real>(model: &AggregatorModel<F>, xs: &[Vec<F>]) -> Result<ForwardAgg<F>> {
    let refs: Vec<&[F]> = xs.iter().map(|v| v.as_slice()).collect();
    let (out, tape) = aggregate_set_tape(&refs, model)?;
    Ok(ForwardAgg { out, tape })
}

/// Backpropagate `g_out` (gradient at the aggregation output) into the
/// trainable parameters.
fn backward_agg<F: Real>(
    model: &AggregatorModel<F>,
    xs: &[Vec<F>],
    fwd: &ForwardAgg<F>,
    g_out: &[F],
    grads: &mut Grads<F>,
) {
    match &fwd.tape {
        AggTape::Plain => {}
        AggTape::Gem(tape) => {
            let gem = model.gem_power.as_ref().expect("gem tape without exponent");
            let g_pool = normalize_backward(&tape.out, tape.pooled_norm, g_out);
            let acc = grads.gem.as_mut().expect("gem grads");
            for j in 0..tape.pooled.len() {
                let mean_pow = tape.pow_means[j];
                if !(mean_pow > F::zero()) {
                    continue;
                }
                let p = gem.at(j);
                let g_j = tape.pooled[j];
                let dg_dp = g_j
                    * (-mean_pow.ln() / (p * p) + tape.log_pow_means[j] / (p * mean_pow));
                let contribution = g_pool[j] * dg_dp;
                match gem {
                    GemPower::Shared(_) => acc[0] += contribution,
                    GemPower::PerDim(_) => acc[j] += contribution,
                }
            }
        }
        AggTape::NetVlad { vlad, reduce } => {
            let nv = model.netvlad.as_ref().expect("netvlad tape without params");
            let red = model.reduction.as_ref().expect("netvlad tape without reduction");
            let dim = nv.elem_dim();
            let k = nv.clusters();

            // Final normalization and affine.
            let g_affine = normalize_backward(&reduce.out, reduce.affine_norm, g_out);
            let g_scale = grads.scale.as_mut().expect("scale grads");
            let g_shift = grads.shift.as_mut().expect("shift grads");
            let mut g_pre = vec![F::zero(); g_affine.len()];
            for d in 0..g_affine.len() {
                g_scale[d] += g_affine[d] * reduce.pre_affine[d];
                g_shift[d] += g_affine[d];
                g_pre[d] = g_affine[d] * red.scale[d];
            }
            grads
                .reduction_weights
                .as_mut()
                .expect("reduction grads")
                .add_outer(&g_pre, &reduce.input);
            let g_vlad_out = red.weights.matvec_transposed(&g_pre);

            // Pooled-vector normalization; the pooled sum distributes the
            // gradient to every element contribution unchanged.
            let g_unit_contrib = normalize_backward(&vlad.vlad, vlad.pooled_norm, &g_vlad_out);

            let g_a = grads.assign_weights.as_mut().expect("assign grads");
            let g_b = grads.assign_bias.as_mut().expect("assign bias grads");
            let g_c = grads.centers.as_mut().expect("center grads");
            let mut t = vec![F::zero(); k];
            for (i, x) in xs.iter().enumerate() {
                let g_contrib = normalize_backward(
                    &vlad.unit_contribs[i],
                    vlad.contrib_norms[i],
                    &g_unit_contrib,
                );
                let alpha = &vlad.assigns[i];
                let mut weighted_sum = F::zero();
                for c in 0..k {
                    let block = &g_contrib[c * dim..(c + 1) * dim];
                    let center = nv.centers.row(c);
                    let mut t_c = F::zero();
                    let g_center_row = g_c.row_mut(c);
                    for j in 0..dim {
                        let residual = x[j] - center[j];
                        t_c += block[j] * residual;
                        g_center_row[j] -= alpha[c] * block[j];
                    }
                    t[c] = t_c;
                    weighted_sum += alpha[c] * t_c;
                }
                for c in 0..k {
                    let g_logit = alpha[c] * (t[c] - weighted_sum);
                    g_b[c] += g_logit;
                    let g_a_row = g_a.row_mut(c);
                    for j in 0..dim {
                        g_a_row[j] += g_logit * x[j];
                    }
                }
            }
        }
    }
}

fn balance_weights<F: Real>(labels: &[Vec<bool>], balance: BalanceMode) -> Vec<(F, F)> {
    match balance {
        BalanceMode::Off => vec![(F::one(), F::one()); labels.len()],
        BalanceMode::PerSet => labels
            .iter()
            .map(|row| {
                let pos = row.iter().filter(|y| **y).count().max(1);
                let neg = (row.len() - row.iter().filter(|y| **y).count()).max(1);
                (
                    F::one() / from_f64::<F>(pos as f64),
                    F::one() / from_f64::<F>(neg as f64),
                )
            })
            .collect(),
        BalanceMode::PerBatch => {
            let pos: usize = labels
                .iter()
                .map(|row| row.iter().filter(|y| **y).count())
                .sum();
            let total: usize = labels.iter().map(|row| row.len()).sum();
            let neg = (total - pos).max(1);
            let pos = pos.max(1);
            let w = (
                F::one() / from_f64::<F>(pos as f64),
                F::one() / from_f64::<F>(neg as f64),
            );
            vec![w; labels.len()]
        }
    }
}

fn check_batch_shapes<F: Real>(
    sets: &[Vec<Vec<F>>],
    queries: &[Vec<F>],
    labels: &[Vec<bool>],
) -> Result<()> {
    if sets.is_empty() || queries.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if labels.len() != sets.len() {
        return Err(Error::InvalidArgument("labels do not match set count".into()));
    }
    if labels.iter().any(|row| row.len() != queries.len()) {
        return Err(Error::InvalidArgument("label rows do not match query count".into()));
    }
    Ok(())
}

fn loss_core<F: Real>(
    model: &AggregatorModel<F>,
    sets: &[Vec<Vec<F>>],
    queries: &[Vec<F>],
    labels: &[Vec<bool>],
    balance: BalanceMode,
    with_grads: bool,
) -> Result<(F, Option<Grads<F>>)> {
    check_batch_shapes(sets, queries, labels)?;
    let set_fwd: Vec<ForwardAgg<F>> = sets
        .iter()
        .map(|s| forward_agg(model, s))
        .collect::<Result<_>>()?;
    let query_sets: Vec<Vec<Vec<F>>> = queries.iter().map(|q| vec![q.clone()]).collect();
    let query_fwd: Vec<ForwardAgg<F>> = query_sets
        .iter()
        .map(|q| forward_agg(model, q))
        .collect::<Result<_>>()?;

    let weights = balance_weights::<F>(labels, balance);
    let mut grads = with_grads.then(|| Grads::zeros_like(model));
    let mut g_queries = vec![vec![F::zero(); model.set_dim]; queries.len()];
    let mut loss = F::zero();

    for (s, fwd) in set_fwd.iter().enumerate() {
        let (w_pos, w_neg) = weights[s];
        let mut g_set = vec![F::zero(); model.set_dim];
        for (f, qf) in query_fwd.iter().enumerate() {
            let product = dot(&qf.out, &fwd.out);
            let score = model.head.weight * product + model.head.bias;
            let p = crate::aggregator::logistic(score);
            let y = labels[s][f];
            let clamped = clamp_probability(p);
            let (beta, term) = if y {
                (w_pos, -clamped.ln())
            } else {
                (w_neg, -(F::one() - clamped).ln())
            };
            loss += beta * term;
            if let Some(g) = grads.as_mut() {
                let target = if y { F::one() } else { F::zero() };
                let g_score = beta * (p - target);
                g.head_weight += g_score * product;
                g.head_bias += g_score;
                let g_product = g_score * model.head.weight;
                for d in 0..model.set_dim {
                    g_set[d] += g_product * qf.out[d];
                    g_queries[f][d] += g_product * fwd.out[d];
                }
            }
        }
        if let Some(g) = grads.as_mut() {
            backward_agg(model, &sets[s], fwd, &g_set, g);
        }
    }
    if let Some(g) = grads.as_mut() {
        for (f, fwd) in query_fwd.iter().enumerate() {
            backward_agg(model, &query_sets[f], fwd, &g_queries[f], g);
        }
    }
    Ok((loss, grads))
}

/// Multi-label logistic set loss over a batch: every query descriptor is
/// scored against every set descriptor and pushed toward its indicator.
/// Probabilities are clamped to `[1e-12, 1 - 1e-12]` inside the logs.
pub fn batch_loss<F: Real>(
    model: &AggregatorModel<F>,
    sets: &[Vec<Vec<F>>],
    queries: &[Vec<F>],
    labels: &[Vec<bool>],
    balance: BalanceMode,
) -> Result<F> {
    loss_core(model, sets, queries, labels, balance, false).map(|(l, _)| l)
}

/// Loss plus analytic gradients for every trainable parameter of the model's
/// mode (VLAD parameters, reduction, gem exponent, head).
pub fn loss_and_grads<F: Real>(
    model: &AggregatorModel<F>,
    sets: &[Vec<Vec<F>>],
    queries: &[Vec<F>],
    labels: &[Vec<bool>],
    balance: BalanceMode,
) -> Result<(F, Grads<F>)> {
    loss_core(model, sets, queries, labels, balance, true)
        .map(|(l, g)| (l, g.expect("gradients requested")))
}

// ------------------------------------------------------------------
// Flat parameter packing (used by the optimizer and by gradient checks)
// ------------------------------------------------------------------

/// Flatten the trainable parameters of `model` in a fixed order:
/// VLAD `a`, `b`, `c`, reduction `W`, `scale`, `shift`, gem exponent, head.
pub fn pack_params<F: Real>(model: &AggregatorModel<F>) -> Vec<F> {
    let mut out = Vec::new();
    if let Some(nv) = &model.netvlad {
        out.extend_from_slice(nv.assign_weights.data());
        out.extend_from_slice(&nv.assign_bias);
        out.extend_from_slice(nv.centers.data());
    }
    if let Some(r) = &model.reduction {
        out.extend_from_slice(r.weights.data());
        out.extend_from_slice(&r.scale);
        out.extend_from_slice(&r.shift);
    }
    if let Some(g) = &model.gem_power {
        match g {
            GemPower::Shared(p) => out.push(*p),
            GemPower::PerDim(v) => out.extend_from_slice(v),
        }
    }
    out.push(model.head.weight);
    out.push(model.head.bias);
    out
}

/// Inverse of [`pack_params`].
pub fn apply_params<F: Real>(model: &mut AggregatorModel<F>, flat: &[F]) {
    let mut at = 0usize;
    let mut take = |n: usize| {
        let slice = &flat[at..at + n];
        at += n;
        slice
    };
    if let Some(nv) = &mut model.netvlad {
        let n = nv.assign_weights.data().len();
        nv.assign_weights.data_mut().copy_from_slice(take(n));
        let n = nv.assign_bias.len();
        nv.assign_bias.copy_from_slice(take(n));
        let n = nv.centers.data().len();
        nv.centers.data_mut().copy_from_slice(take(n));
    }
    if let Some(r) = &mut model.reduction {
        let n = r.weights.data().len();
        r.weights.data_mut().copy_from_slice(take(n));
        let n = r.scale.len();
        r.scale.copy_from_slice(take(n));
        let n = r.shift.len();
        r.shift.copy_from_slice(take(n));
    }
    if let Some(g) = &mut model.gem_power {
        match g {
            GemPower::Shared(p) => *p = take(1)[0],
            GemPower::PerDim(v) => {
                let n = v.len();
                v.copy_from_slice(take(n));
            }
        }
    }
    model.head.weight = take(1)[0];
    model.head.bias = take(1)[0];
    debug_assert_eq!(at, flat.len());
}

/// Flatten gradients in the [`pack_params`] order.
pub fn pack_grads<F: Real>(grads: &Grads<F>) -> Vec<F> {
    let mut out = Vec::new();
    if let Some(m) = &grads.assign_weights {
        out.extend_from_slice(m.data());
    }
    if let Some(v) = &grads.assign_bias {
        out.extend_from_slice(v);
    }
    if let Some(m) = &grads.centers {
        out.extend_from_slice(m.data());
    }
    if let Some(m) = &grads.reduction_weights {
        out.extend_from_slice(m.data());
    }
    if let Some(v) = &grads.scale {
        out.extend_from_slice(v);
    }
    if let Some(v) = &grads.shift {
        out.extend_from_slice(v);
    }
    if let Some(v) = &grads.gem {
        out.extend_from_slice(v);
    }
    out.push(grads.head_weight);
    out.push(grads.head_bias);
    out
}

/// Weight-decay mask in [`pack_params`] order: decay applies to the matrix
/// parameters (`a`, `c`, `W`) but not to biases, the affine, the gem
/// exponent or the head.
pub fn decay_mask<F: Real>(model: &AggregatorModel<F>) -> Vec<bool> {
    let mut out = Vec::new();
    if let Some(nv) = &model.netvlad {
        out.extend(std::iter::repeat(true).take(nv.assign_weights.data().len()));
        out.extend(std::iter::repeat(false).take(nv.assign_bias.len()));
        out.extend(std::iter::repeat(true).take(nv.centers.data().len()));
    }
    if let Some(r) = &model.reduction {
        out.extend(std::iter::repeat(true).take(r.weights.data().len()));
        out.extend(std::iter::repeat(false).take(r.scale.len() + r.shift.len()));
    }
    if let Some(g) = &model.gem_power {
        let n = match g {
            GemPower::Shared(_) => 1,
            GemPower::PerDim(v) => v.len(),
        };
        out.extend(std::iter::repeat(false).take(n));
    }
    out.push(false);
    out.push(false);
    out
}

/// Indices of the head parameters within the flat layout.
fn head_param_range<F: Real>(model: &AggregatorModel<F>) -> std::ops::Range<usize> {
    let total = pack_params(model).len();
    total - 2..total
}

/// Indices of the reduction `scale` within the flat layout; kept strictly
/// positive during optimization by projection.
fn scale_param_range<F: Real>(model: &AggregatorModel<F>) -> Option<std::ops::Range<usize>> {
    let red = model.reduction.as_ref()?;
    let mut offset = 0usize;
    if let Some(nv) = &model.netvlad {
        offset += nv.assign_weights.data().len() + nv.assign_bias.len() + nv.centers.data().len();
    }
    offset += red.weights.data().len();
    Some(offset..offset + red.scale.len())
}

// ------------------------------------------------------------------
// Training loop
// ------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub model: AggregatorModel<F>,
    pub log: Vec<EpochLog>,
}

fn init_model<F: Real>(
    gallery: &[IdentityPrototype<F>],
    config: &TrainConfig,
) -> Result<AggregatorModel<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0xD1CE);
    let mut sample = Vec::with_capacity(config.init_samples);
    for _ in 0..config.init_samples.max(config.clusters) {
        let proto = &gallery[rng.random_range(0..gallery.len())];
        sample.push(sample_element_with(proto, config.noise_sigma, &mut rng)?.vector);
    }

    let model = match config.mode {
        PoolingMode::NetVlad => {
            let netvlad = init_kmeans(&sample, config.clusters, config.kmeans_alpha, config.seed)?;
            // PCA over per-element normalized contributions: a singleton
            // aggregation through the VLAD layer is exactly one contribution.
            let contributions: Vec<Vec<F>> = sample
                .iter()
                .map(|x| crate::aggregator::netvlad_forward(&[x.as_slice()], &netvlad))
                .collect::<Result<_>>()?;
            let reduction = init_pca(&contributions, config.set_dim)?;
            AggregatorModel {
                mode: PoolingMode::NetVlad,
                elem_dim: config.elem_dim,
                set_dim: config.set_dim,
                netvlad: Some(netvlad),
                reduction: Some(reduction),
                gem_power: None,
                head: LogisticHead::untrained(),
            }
        }
        PoolingMode::Average | PoolingMode::Sum => AggregatorModel {
            mode: config.mode,
            elem_dim: config.elem_dim,
            set_dim: config.elem_dim,
            netvlad: None,
            reduction: None,
            gem_power: None,
            head: LogisticHead::untrained(),
        },
        PoolingMode::GemShared => AggregatorModel {
            mode: config.mode,
            elem_dim: config.elem_dim,
            set_dim: config.elem_dim,
            netvlad: None,
            reduction: None,
            gem_power: Some(GemPower::Shared(from_f64(config.gem_p_init))),
            head: LogisticHead::untrained(),
        },
        PoolingMode::GemPerDim => AggregatorModel {
            mode: config.mode,
            elem_dim: config.elem_dim,
            set_dim: config.elem_dim,
            netvlad: None,
            reduction: None,
            gem_power: Some(GemPower::PerDim(vec![
                from_f64(config.gem_p_init);
                config.elem_dim
            ])),
            head: LogisticHead::untrained(),
        },
    };
    model.validate()?;
    Ok(model)
}

/// Train a model on synthetic batches drawn from `gallery`.
///
/// Pipeline: k-means/PCA initialization, a head-only warm-up stage at
/// `lr_pretrain`, then SGD with momentum and weight decay at `lr_finetune`
/// with a staged divide-by-`lr_decay_factor` drop. Single-threaded and
/// deterministic for a fixed seed.
pub fn train<F: Real>(
    gallery: &[IdentityPrototype<F>],
    config: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    if gallery[0].center.len() != config.elem_dim {
        return Err(Error::InvalidArgument(format!(
            "gallery dimension {} does not match configured elem_dim {}",
            gallery[0].center.len(),
            config.elem_dim
        )));
    }

    let mut model = init_model(gallery, config)?;
    let mut params = pack_params(&model);
    let mut velocity = vec![F::zero(); params.len()];
    let mask = decay_mask(&model);
    let head_range = head_param_range(&model);
    let scale_range = scale_param_range(&model);
    let drop_epoch = config.lr_drop_epoch();

    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    batch_rng.set_stream(0xBA7C);

    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let warmup = epoch < config.warmup_epochs;
        let mut lr = if warmup { config.lr_pretrain } else { config.lr_finetune };
        if !warmup && epoch >= drop_epoch {
            lr /= config.lr_decay_factor;
        }
        let lr_f = from_f64::<F>(lr);
        let wd = from_f64::<F>(config.weight_decay);
        let momentum = from_f64::<F>(config.momentum);

        let mut epoch_loss = 0.0f64;
        for batch_idx in 0..config.batches_per_epoch {
            let batch = build_batch_with(
                gallery,
                config.set_size,
                config.batch_identities,
                config.noise_sigma,
                &mut batch_rng,
            )?;
            apply_params(&mut model, &params);
            let (loss, grads) = loss_and_grads(
                &model,
                &batch.sets,
                &batch.queries,
                &batch.labels,
                config.balance,
            )?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_idx });
            }
            epoch_loss += to_f64(loss);
            let mut flat_grads = pack_grads(&grads);
            if warmup {
                for (i, g) in flat_grads.iter_mut().enumerate() {
                    if !head_range.contains(&i) {
                        *g = F::zero();
                    }
                }
            }
            for i in 0..params.len() {
                let mut g = flat_grads[i];
                if mask[i] && (!warmup) {
                    g += wd * params[i];
                }
                velocity[i] = momentum * velocity[i] - lr_f * g;
                params[i] += velocity[i];
            }
            if let Some(range) = &scale_range {
                let floor = from_f64::<F>(1e-6);
                for i in range.clone() {
                    if params[i] < floor {
                        params[i] = floor;
                        velocity[i] = F::zero();
                    }
                }
            }
        }
        log.push(EpochLog {
            epoch,
            loss: epoch_loss / config.batches_per_epoch as f64,
            lr,
        });
    }
    apply_params(&mut model, &params);
    model.validate()?;
    Ok(TrainOutcome { model, log })
}

/// Write a training log as CSV with columns `epoch,loss,lr`.
pub fn write_log_csv<W: std::io::Write>(log: &[EpochLog], mut w: W) -> Result<()> {
    writeln!(w, "epoch,loss,lr")?;
    for entry in log {
        writeln!(w, "{},{},{}", entry.epoch, entry.loss, entry.lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_gallery;

    fn small_gallery(n: usize, dim: usize, seed: u64) -> Vec<IdentityPrototype<f64>> {
        gen_gallery(n, dim, seed).unwrap()
    }

    #[test]
    fn kmeans_fixed_point_on_distinct_repeats() {
        // Exactly K distinct points, each repeated: centroids must be those points.
        let points = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
        ];
        let mut sample = Vec::new();
        for _ in 0..5 {
            sample.extend(points.iter().cloned());
        }
        let centers = kmeans(&sample, 3, 7).unwrap();
        let mut matched = 0;
        for p in &points {
            if centers.iter().any(|c| squared_distance(c, p) < 1e-20) {
                matched += 1;
            }
        }
        assert_eq!(matched, 3);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let sample: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 3.0]];
        let centers = kmeans(&sample, 1, 3).unwrap();
        assert!((centers[0][0] - 1.0).abs() < 1e-9);
        assert!((centers[0][1] - 4.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn kmeans_rejects_too_few_distinct() {
        let sample = vec![vec![1.0, 0.0]; 10];
        assert!(kmeans(&sample, 2, 1).is_err());
    }

    #[test]
    fn init_assignment_peaks_at_nearest_centroid() {
        // Brute-force check of the 2*alpha*c / -alpha*|c|^2 construction.
        let gallery = small_gallery(40, 8, 5);
        let sample: Vec<Vec<f64>> = gallery.iter().map(|p| p.center.clone()).collect();
        let params = init_kmeans(&sample, 4, None, 11).unwrap();
        for x in sample.iter().take(20) {
            let alpha = crate::aggregator::soft_assignments(x, &params);
            let best_assign = (0..4)
                .max_by(|&a, &b| alpha[a].total_cmp(&alpha[b]))
                .unwrap();
            let nearest = (0..4)
                .min_by(|&a, &b| {
                    squared_distance(x, params.centers.row(a))
                        .total_cmp(&squared_distance(x, params.centers.row(b)))
                })
                .unwrap();
            assert_eq!(best_assign, nearest);
        }
    }

    #[test]
    fn sharper_alpha_lowers_assignment_entropy() {
        let gallery = small_gallery(60, 8, 9);
        let sample: Vec<Vec<f64>> = gallery.iter().map(|p| p.center.clone()).collect();
        let entropy = |alpha: f64| -> f64 {
            let params = init_kmeans(&sample, 4, Some(alpha), 13).unwrap();
            sample
                .iter()
                .map(|x| {
                    crate::aggregator::soft_assignments(x, &params)
                        .iter()
                        .map(|p| if *p > 0.0 { -p * p.ln() } else { 0.0 })
                        .sum::<f64>()
                })
                .sum::<f64>()
                / sample.len() as f64
        };
        let coarse = entropy(0.5);
        let sharp = entropy(8.0);
        assert!(sharp < coarse, "entropy {sharp} !< {coarse}");
    }

    #[test]
    fn pca_identity_on_isotropic_full_rank() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let sample: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let params = init_pca(&sample, 4).unwrap();
        // Rows of W are orthonormal.
        for i in 0..4 {
            for j in 0..4 {
                let d = dot(params.weights.row(i), params.weights.row(j));
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((d - target).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_preserves_distances_in_subspace() {
        // Points in a 3-dim subspace of 6-dim space: top-3 projection must
        // preserve pairwise distances.
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let basis = [
            [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        ];
        let sample: Vec<Vec<f64>> = (0..100)
            .map(|_| {
                let coeffs: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                (0..6)
                    .map(|j| (0..3).map(|b| coeffs[b] * basis[b][j]).sum())
                    .collect()
            })
            .collect();
        let params = init_pca(&sample, 3).unwrap();
        let (mean, _) = crate::linalg::mean_and_covariance(&sample).unwrap();
        let project = |x: &Vec<f64>| -> Vec<f64> {
            let centered: Vec<f64> = x.iter().zip(&mean).map(|(a, m)| a - m).collect();
            params.weights.matvec(&centered)
        };
        for i in (0..sample.len()).step_by(10) {
            for j in (i + 1..sample.len()).step_by(17) {
                let orig = squared_distance(&sample[i], &sample[j]).sqrt();
                let proj = squared_distance(&project(&sample[i]), &project(&sample[j])).sqrt();
                assert!((orig - proj).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_rejects_rank_deficient_sample() {
        let sample: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![i as f64, 2.0 * i as f64, 0.0])
            .collect();
        match init_pca(&sample, 3) {
            Err(Error::RankDeficient { achieved, required }) => {
                assert_eq!(achieved, 1);
                assert_eq!(required, 3);
            }
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn pca_invariant_to_duplication() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let sample: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let doubled: Vec<Vec<f64>> = sample.iter().chain(sample.iter()).cloned().collect();
        let a = init_pca(&sample, 3).unwrap();
        let b = init_pca(&doubled, 3).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                assert!((a.weights.get(i, j) - b.weights.get(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn batch_shapes_and_label_counts() {
        let gallery = small_gallery(120, 8, 31);
        let config = TrainConfig {
            batch_identities: 84,
            set_size: 2,
            elem_dim: 8,
            ..TrainConfig::default()
        };
        let batch = build_batch(&gallery, &config, 7).unwrap();
        assert_eq!(batch.sets.len(), 42);
        assert_eq!(batch.queries.len(), 84);
        for labels in &batch.labels {
            assert_eq!(labels.iter().filter(|y| **y).count(), 2);
        }
    }

    #[test]
    fn degenerate_single_set_batch() {
        let gallery = small_gallery(10, 8, 33);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = build_batch_with(&gallery, 4, 4, 0.1, &mut rng);
        // set_size == P is rejected by TrainConfig validation but allowed at
        // the batch level: one set, all labels one.
        let batch = batch.unwrap();
        assert_eq!(batch.sets.len(), 1);
        assert!(batch.labels[0].iter().all(|y| *y));
    }

    #[test]
    fn batches_are_deterministic() {
        let gallery = small_gallery(100, 8, 35);
        let config = TrainConfig {
            batch_identities: 20,
            set_size: 2,
            elem_dim: 8,
            ..TrainConfig::default()
        };
        let a = build_batch(&gallery, &config, 99).unwrap();
        let b = build_batch(&gallery, &config, 99).unwrap();
        assert_eq!(a.sets, b.sets);
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn orthogonal_pair_loss_is_ln2() {
        let model = AggregatorModel::<f64> {
            head: LogisticHead::new(1.0, 0.0),
            ..AggregatorModel::average_baseline(3)
        };
        let sets = vec![vec![vec![1.0, 0.0, 0.0]]];
        let queries = vec![vec![0.0, 1.0, 0.0]];
        let labels = vec![vec![true]];
        let loss = batch_loss(&model, &sets, &queries, &labels, BalanceMode::Off).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn all_negative_loss_vanishes_with_large_negative_scores() {
        let model = AggregatorModel::<f64> {
            head: LogisticHead::new(-50.0, 0.0),
            ..AggregatorModel::average_baseline(3)
        };
        let sets = vec![vec![vec![1.0, 0.0, 0.0]]];
        let queries = vec![vec![1.0, 0.0, 0.0]];
        let labels = vec![vec![false]];
        let loss = batch_loss(&model, &sets, &queries, &labels, BalanceMode::Off).unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-10);
    }

    #[test]
    fn balancing_invariant_to_duplicated_negatives() {
        let gallery = small_gallery(30, 6, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = build_batch_with(&gallery, 2, 8, 0.2, &mut rng).unwrap();
        let model = AggregatorModel::<f64>::average_baseline(6);

        let base = batch_loss(&model, &batch.sets, &batch.queries, &batch.labels, BalanceMode::PerSet)
            .unwrap();

        // Duplicate every negative query of set 0 (and of every set, since
        // labels differ per set we duplicate all queries and extend labels).
        let mut queries = batch.queries.clone();
        let mut labels = batch.labels.clone();
        for (f, q) in batch.queries.iter().enumerate() {
            if batch.labels.iter().all(|row| !row[f]) {
                queries.push(q.clone());
                for row in labels.iter_mut() {
                    row.push(false);
                }
            }
        }
        let doubled =
            batch_loss(&model, &batch.sets, &queries, &labels, BalanceMode::PerSet).unwrap();
        // Negatives common to all sets are duplicated; per-set negative
        // weights halve... only exactly when every negative of that set was
        // duplicated. Queries positive in some other set are negatives here
        // too, so restrict the check: construct a single-set batch instead.
        let single_set = vec![batch.sets[0].clone()];
        let single_labels = vec![batch.labels[0].clone()];
        let base_single = batch_loss(&model, &single_set, &batch.queries, &single_labels, BalanceMode::PerSet)
            .unwrap();
        let mut dup_queries = batch.queries.clone();
        let mut dup_labels = batch.labels[0].clone();
        for (f, q) in batch.queries.iter().enumerate() {
            if !batch.labels[0][f] {
                dup_queries.push(q.clone());
                dup_labels.push(false);
            }
        }
        let dup_single = batch_loss(&model, &single_set, &dup_queries, &vec![dup_labels], BalanceMode::PerSet)
            .unwrap();
        assert!((base_single - dup_single).abs() < 1e-9);
        let _ = (base, doubled);
    }

    #[test]
    fn loss_is_nonnegative() {
        let gallery = small_gallery(20, 6, 43);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = build_batch_with(&gallery, 2, 6, 0.3, &mut rng).unwrap();
        let model = AggregatorModel::<f64>::average_baseline(6);
        for mode in [BalanceMode::Off, BalanceMode::PerSet, BalanceMode::PerBatch] {
            let loss = batch_loss(&model, &batch.sets, &batch.queries, &batch.labels, mode).unwrap();
            assert!(loss >= 0.0);
        }
    }

    fn tiny_netvlad_model(seed: u64) -> AggregatorModel<f64> {
        use rand::Rng;
        let (elem_dim, k, set_dim) = (6, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize, span: f64| {
            Mat::from_flat(r, c, (0..r * c).map(|_| rng.random_range(-span..span)).collect())
                .unwrap()
        };
        let assign_weights = mat(k, elem_dim, 1.0);
        let centers = mat(k, elem_dim, 0.8);
        let weights = mat(set_dim, elem_dim * k, 0.7);
        let netvlad = NetVladParams {
            assign_weights,
            assign_bias: (0..k).map(|_| rng.random_range(-0.4..0.4)).collect(),
            centers,
        };
        let reduction = ReductionParams {
            weights,
            scale: (0..set_dim).map(|_| rng.random_range(0.5..1.5)).collect(),
            shift: (0..set_dim).map(|_| rng.random_range(-0.2..0.2)).collect(),
        };
        AggregatorModel {
            mode: PoolingMode::NetVlad,
            elem_dim,
            set_dim,
            netvlad: Some(netvlad),
            reduction: Some(reduction),
            gem_power: None,
            head: LogisticHead::new(rng.random_range(0.5..2.0), rng.random_range(-0.5..0.5)),
        }
    }

    fn random_batch(seed: u64, elem_dim: usize, n_sets: usize, set_size: usize) -> TrainBatch<f64> {
        let gallery = small_gallery(n_sets * set_size + 4, elem_dim, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5555);
        build_batch_with(&gallery, set_size, n_sets * set_size, 0.3, &mut rng).unwrap()
    }

    /// Central-difference oracle for the full gradient, h = 1e-5.
    fn finite_difference_check(
        model: &AggregatorModel<f64>,
        batch: &TrainBatch<f64>,
        balance: BalanceMode,
    ) -> f64 {
        let (_, grads) = loss_and_grads(model, &batch.sets, &batch.queries, &batch.labels, balance)
            .unwrap();
        let analytic = pack_grads(&grads);
        let params = pack_params(model);
        assert_eq!(analytic.len(), params.len());
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut probe = model.clone();
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += h;
            apply_params(&mut probe, &plus);
            let lp = batch_loss(&probe, &batch.sets, &batch.queries, &batch.labels, balance)
                .unwrap();
            let mut minus = params.clone();
            minus[i] -= h;
            apply_params(&mut probe, &minus);
            let lm = batch_loss(&probe, &batch.sets, &batch.queries, &batch.labels, balance)
                .unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
        worst
    }

    #[test]
    fn netvlad_gradients_match_finite_differences() {
        for seed in 0..4u64 {
            let model = tiny_netvlad_model(100 + seed);
            let batch = random_batch(seed, 6, 3, 2);
            let worst = finite_difference_check(&model, &batch, BalanceMode::PerSet);
            assert!(worst <= 1e-4, "seed {seed}: max relative error {worst}");
        }
    }

    #[test]
    fn gem_gradients_match_finite_differences() {
        for (seed, mode) in [(1u64, PoolingMode::GemShared), (2, PoolingMode::GemPerDim)] {
            let elem_dim = 5;
            let gem = match mode {
                PoolingMode::GemShared => GemPower::Shared(2.3),
                _ => GemPower::PerDim(vec![1.7, 3.0, 2.1, 1.2, 2.8]),
            };
            let model = AggregatorModel {
                mode,
                elem_dim,
                set_dim: elem_dim,
                netvlad: None,
                reduction: None,
                gem_power: Some(gem),
                head: LogisticHead::new(1.4, -0.3),
            };
            let batch = random_batch(40 + seed, elem_dim, 2, 2);
            let worst = finite_difference_check(&model, &batch, BalanceMode::Off);
            assert!(worst <= 1e-4, "mode {mode:?}: max relative error {worst}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let gallery = small_gallery(40, 8, 51);
        let config = TrainConfig {
            elem_dim: 8,
            set_dim: 4,
            clusters: 2,
            batch_identities: 8,
            set_size: 2,
            epochs: 3,
            warmup_epochs: 1,
            batches_per_epoch: 2,
            init_samples: 64,
            // lr must be positive by validation; emulate zero via an
            // explicitly tiny-but-positive rate and compare against a direct
            // init to confirm the update path scales with lr.
            lr_pretrain: 1e-300,
            lr_finetune: 1e-300,
            seed: 5,
            ..TrainConfig::default()
        };
        let outcome = train(&gallery, &config).unwrap();
        let init = init_model(&gallery, &config).unwrap();
        let trained = pack_params(&outcome.model);
        let initial = pack_params(&init);
        for (a, b) in trained.iter().zip(&initial) {
            assert!((a - b).abs() < 1e-250);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let gallery = small_gallery(60, 8, 53);
        let config = TrainConfig {
            elem_dim: 8,
            set_dim: 4,
            clusters: 2,
            batch_identities: 12,
            set_size: 2,
            epochs: 4,
            warmup_epochs: 1,
            batches_per_epoch: 3,
            init_samples: 64,
            lr_pretrain: 0.2,
            lr_finetune: 0.05,
            seed: 17,
            ..TrainConfig::default()
        };
        let a = train(&gallery, &config).unwrap();
        let b = train(&gallery, &config).unwrap();
        assert_eq!(pack_params(&a.model), pack_params(&b.model));
        assert_eq!(a.log.len(), b.log.len());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.loss, y.loss);
        }
    }

    #[test]
    fn average_mode_training_calibrates_head() {
        let gallery = small_gallery(80, 16, 55);
        let config = TrainConfig {
            mode: PoolingMode::Average,
            elem_dim: 16,
            set_dim: 16,
            batch_identities: 16,
            set_size: 2,
            epochs: 6,
            warmup_epochs: 2,
            batches_per_epoch: 5,
            init_samples: 32,
            lr_pretrain: 0.5,
            lr_finetune: 0.1,
            seed: 7,
            ..TrainConfig::default()
        };
        let outcome = train(&gallery, &config).unwrap();
        assert!(outcome.model.head.weight > 0.0);
        assert!(outcome.log.last().unwrap().loss <= outcome.log[0].loss);
    }
}
