//! Set aggregation: pooling a variable-size set of element descriptors into
//! one fixed-length unit vector.
//!
//! The main pooling mode is a soft-assignment VLAD layer with per-element
//! residual normalization: each element is softly assigned to `K` learned
//! clusters, its weighted residuals are flattened (cluster-major), the
//! per-element contribution is L2-normalized so every element counts equally,
//! contributions are summed and the sum is L2-normalized. A learned linear
//! reduction (weights plus a folded affine) then maps the pooled vector to
//! the final `set_dim`-dimensional descriptor, which is L2-normalized again.
//!
//! Average, sum and generalized-mean pooling are available as baselines; for
//! those modes the output dimension equals the element dimension and no
//! reduction is applied.
//!
//! All operations are pure given an immutable model and are safe to call
//! concurrently. Summations over set elements run in a canonical order
//! (sorted by descriptor value), which makes aggregation exactly invariant
//! to input permutation, not merely up to floating-point reassociation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, normalize_in_place, Mat};
use crate::scalar::{from_f64, Real};

/// Pooling variants understood by [`aggregate_set`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    NetVlad,
    Average,
    Sum,
    GemShared,
    GemPerDim,
}

impl PoolingMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoolingMode::NetVlad => "netvlad",
            PoolingMode::Average => "average",
            PoolingMode::Sum => "sum",
            PoolingMode::GemShared => "gem_shared",
            PoolingMode::GemPerDim => "gem_per_dim",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "netvlad" => PoolingMode::NetVlad,
            "average" => PoolingMode::Average,
            "sum" => PoolingMode::Sum,
            "gem_shared" => PoolingMode::GemShared,
            "gem_per_dim" => PoolingMode::GemPerDim,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown pooling mode {other:?}"
                )))
            }
        })
    }
}

/// Soft-assignment VLAD parameters: `K` assignment weight vectors and biases
/// plus `K` cluster centres, all over the element dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct NetVladParams<F> {
    pub assign_weights: Mat<F>, // K x elem_dim
    pub assign_bias: Vec<F>,    // K
    pub centers: Mat<F>,        // K x elem_dim
}

impl<F: Real> NetVladParams<F> {
    pub fn clusters(&self) -> usize {
        self.centers.rows()
    }

    pub fn elem_dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.clusters();
        if k < 1 {
            return Err(Error::InvalidArgument("cluster count must be >= 1".into()));
        }
        if self.assign_weights.rows() != k
            || self.assign_bias.len() != k
            || self.assign_weights.cols() != self.centers.cols()
        {
            return Err(Error::InvalidArgument(
                "inconsistent VLAD parameter shapes".into(),
            ));
        }
        Ok(())
    }
}

/// Learned dimensionality reduction: `out = scale ⊙ (W·v) + shift`, then
/// L2-normalization. `scale`/`shift` are the inference-time affine of the
/// reduction's normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionParams<F> {
    pub weights: Mat<F>, // set_dim x (elem_dim * K)
    pub scale: Vec<F>,   // set_dim
    pub shift: Vec<F>,   // set_dim
}

impl<F: Real> ReductionParams<F> {
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.out_dim();
        if self.scale.len() != d || self.shift.len() != d {
            return Err(Error::InvalidArgument(
                "reduction affine length does not match output dimension".into(),
            ));
        }
        if self.scale.iter().any(|s| !(*s > F::zero())) {
            return Err(Error::InvalidArgument(
                "reduction scale must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Logistic scoring head: `score = sigma(weight * <q, v> + bias)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticHead<F> {
    pub weight: F,
    pub bias: F,
}

impl<F: Real> LogisticHead<F> {
    pub fn new(weight: F, bias: F) -> Self {
        LogisticHead { weight, bias }
    }

    /// Head used before any training: midpoint at cosine 0.5, which suits
    /// unit-norm descriptors compared by scalar product.
    pub fn untrained() -> Self {
        LogisticHead {
            weight: from_f64(10.0),
            bias: from_f64(-5.0),
        }
    }

    #[inline]
    pub fn score(&self, scalar_product: F) -> F {
        logistic(self.weight * scalar_product + self.bias)
    }
}

/// Generalized-mean exponent: one shared value or one value per dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum GemPower<F> {
    Shared(F),
    PerDim(Vec<F>),
}

impl<F: Real> GemPower<F> {
    #[inline]
    pub fn at(&self, dim: usize) -> F {
        match self {
            GemPower::Shared(p) => *p,
            GemPower::PerDim(v) => v[dim],
        }
    }

    fn validate(&self, elem_dim: usize, mode: PoolingMode) -> Result<()> {
        match (self, mode) {
            (GemPower::Shared(p), PoolingMode::GemShared) => {
                if !(*p >= F::one()) {
                    return Err(Error::InvalidArgument("gem exponent must be >= 1".into()));
                }
            }
            (GemPower::PerDim(v), PoolingMode::GemPerDim) => {
                if v.len() != elem_dim {
                    return Err(Error::InvalidArgument(
                        "per-dimension gem exponent length mismatch".into(),
                    ));
                }
                if v.iter().any(|p| !(*p >= F::one())) {
                    return Err(Error::InvalidArgument("gem exponents must be >= 1".into()));
                }
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "gem exponent shape does not match pooling mode".into(),
                ))
            }
        }
        Ok(())
    }
}

/// A complete aggregation model: pooling mode, the parameters that mode
/// needs, and the logistic scoring head.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorModel<F> {
    pub mode: PoolingMode,
    pub elem_dim: usize,
    pub set_dim: usize,
    pub netvlad: Option<NetVladParams<F>>,
    pub reduction: Option<ReductionParams<F>>,
    pub gem_power: Option<GemPower<F>>,
    pub head: LogisticHead<F>,
}

impl<F: Real> AggregatorModel<F> {
    /// Untrained average-pooling baseline over `dim`-dimensional elements.
    pub fn average_baseline(dim: usize) -> Self {
        AggregatorModel {
            mode: PoolingMode::Average,
            elem_dim: dim,
            set_dim: dim,
            netvlad: None,
            reduction: None,
            gem_power: None,
            head: LogisticHead::untrained(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.head.weight.is_finite() || !self.head.bias.is_finite() {
            return Err(Error::InvalidArgument("non-finite head parameters".into()));
        }
        match self.mode {
            PoolingMode::NetVlad => {
                let nv = self
                    .netvlad
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("netvlad mode needs VLAD parameters".into()))?;
                nv.validate()?;
                let red = self
                    .reduction
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("netvlad mode needs reduction parameters".into()))?;
                red.validate()?;
                if nv.elem_dim() != self.elem_dim {
                    return Err(Error::InvalidArgument("VLAD element dimension mismatch".into()));
                }
                if red.in_dim() != self.elem_dim * nv.clusters() || red.out_dim() != self.set_dim {
                    return Err(Error::InvalidArgument("reduction dimensions mismatch".into()));
                }
            }
            PoolingMode::Average | PoolingMode::Sum => {
                if self.set_dim != self.elem_dim {
                    return Err(Error::InvalidArgument(
                        "baseline pooling requires set_dim == elem_dim".into(),
                    ));
                }
            }
            PoolingMode::GemShared | PoolingMode::GemPerDim => {
                if self.set_dim != self.elem_dim {
                    return Err(Error::InvalidArgument(
                        "gem pooling requires set_dim == elem_dim".into(),
                    ));
                }
                let gem = self
                    .gem_power
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("gem mode needs an exponent".into()))?;
                gem.validate(self.elem_dim, self.mode)?;
            }
        }
        Ok(())
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn logistic<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Softmax of the assignment logits `a_k·x + b_k` for one element.
/// Rows sum to one by construction.
pub fn soft_assignments<F: Real>(x: &[F], params: &NetVladParams<F>) -> Vec<F> {
    let k = params.clusters();
    let mut logits = Vec::with_capacity(k);
    let mut max = F::neg_infinity();
    for c in 0..k {
        let l = dot(params.assign_weights.row(c), x) + params.assign_bias[c];
        if l > max {
            max = l;
        }
        logits.push(l);
    }
    let mut total = F::zero();
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logits.iter_mut() {
        *l = *l / total;
    }
    logits
}

/// Deterministic element order used for all pooled summations: sorting by
/// descriptor value makes aggregation exactly permutation invariant.
fn canonical_order<F: Real>(descriptors: &[&[F]]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..descriptors.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (descriptors[a], descriptors[b]);
        for (x, y) in da.iter().zip(db) {
            match x.partial_cmp(y).unwrap_or(Ordering::Equal) {
                Ordering::Equal => continue,
                ord => return ord,
            }
        }
        da.len().cmp(&db.len())
    });
    order
}

fn check_descriptors<F: Real>(descriptors: &[&[F]], dim: usize) -> Result<()> {
    if descriptors.is_empty() {
        return Err(Error::EmptySet);
    }
    for (i, d) in descriptors.iter().enumerate() {
        if d.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "element {i} has dimension {}, expected {dim}",
                d.len()
            )));
        }
        if d.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "element {i} contains non-finite values"
            )));
        }
    }
    Ok(())
}

/// Forward state kept by the aggregation so the trainer can backpropagate
/// without recomputing.
#[derive(Debug, Clone)]
pub(crate) struct NetVladTape<F> {
    pub assigns: Vec<Vec<F>>,       // per element, original index
    pub unit_contribs: Vec<Vec<F>>, // normalized flattened residuals
    pub contrib_norms: Vec<F>,
    pub pooled_norm: F,
    pub vlad: Vec<F>, // unit-norm pooled vector
}

#[derive(Debug, Clone)]
pub(crate) struct ReduceTape<F> {
    pub input: Vec<F>,
    pub pre_affine: Vec<F>,
    pub affine_norm: F,
    pub out: Vec<F>,
}

#[derive(Debug, Clone)]
pub(crate) struct GemTape<F> {
    pub pow_means: Vec<F>,     // m_j = (1/n) sum |x_ij|^p_j
    pub log_pow_means: Vec<F>, // s_j = (1/n) sum |x_ij|^p_j * ln|x_ij|
    pub pooled: Vec<F>,        // g_j before normalization
    pub pooled_norm: F,
    pub out: Vec<F>,
}

#[derive(Debug, Clone)]
pub(crate) enum AggTape<F> {
    NetVlad {
        vlad: NetVladTape<F>,
        reduce: ReduceTape<F>,
    },
    Plain,
    Gem(GemTape<F>),
}

pub(crate) fn netvlad_forward_tape<F: Real>(
    descriptors: &[&[F]],
    params: &NetVladParams<F>,
) -> Result<(Vec<F>, NetVladTape<F>)> {
    let dim = params.elem_dim();
    check_descriptors(descriptors, dim)?;
    let k = params.clusters();
    let flat = dim * k;
    let order = canonical_order(descriptors);

    let mut assigns = vec![Vec::new(); descriptors.len()];
    let mut unit_contribs = vec![Vec::new(); descriptors.len()];
    let mut contrib_norms = vec![F::zero(); descriptors.len()];
    for (i, x) in descriptors.iter().enumerate() {
        let alpha = soft_assignments(x, params);
        let mut contrib = vec![F::zero(); flat];
        for c in 0..k {
            let weight = alpha[c];
            let center = params.centers.row(c);
            let block = &mut contrib[c * dim..(c + 1) * dim];
            for ((out, xj), cj) in block.iter_mut().zip(x.iter()).zip(center) {
                *out = weight * (*xj - *cj);
            }
        }
        let norm = match normalize_in_place(&mut contrib, "vlad contribution") {
            Ok(n) => n,
            Err(_) => return Err(Error::ZeroContribution { element: i }),
        };
        assigns[i] = alpha;
        unit_contribs[i] = contrib;
        contrib_norms[i] = norm;
    }

    let mut pooled = vec![F::zero(); flat];
    for &i in &order {
        for (p, c) in pooled.iter_mut().zip(&unit_contribs[i]) {
            *p = *p + *c;
        }
    }
    let pooled_norm = normalize_in_place(&mut pooled, "pooled vlad vector")?;
    let tape = NetVladTape {
        assigns,
        unit_contribs,
        contrib_norms,
        pooled_norm,
        vlad: pooled.clone(),
    };
    Ok((pooled, tape))
}

/// Pool a descriptor set with the soft-assignment VLAD layer; the result has
/// dimension `elem_dim * K` and unit norm.
pub fn netvlad_forward<F: Real>(
    descriptors: &[&[F]],
    params: &NetVladParams<F>,
) -> Result<Vec<F>> {
    netvlad_forward_tape(descriptors, params).map(|(v, _)| v)
}

pub(crate) fn reduce_tape<F: Real>(
    v: &[F],
    params: &ReductionParams<F>,
) -> Result<(Vec<F>, ReduceTape<F>)> {
    if v.len() != params.in_dim() {
        return Err(Error::InvalidArgument(format!(
            "reduction input dimension {} does not match weights ({})",
            v.len(),
            params.in_dim()
        )));
    }
    let pre_affine = params.weights.matvec(v);
    let mut out: Vec<F> = pre_affine
        .iter()
        .zip(&params.scale)
        .zip(&params.shift)
        .map(|((z, s), t)| *z * *s + *t)
        .collect();
    let affine_norm = normalize_in_place(&mut out, "reduced descriptor")?;
    let tape = ReduceTape {
        input: v.to_vec(),
        pre_affine,
        affine_norm,
        out: out.clone(),
    };
    Ok((out, tape))
}

/// Apply the learned reduction and final normalization; unit-norm output of
/// dimension `set_dim`.
pub fn reduce<F: Real>(v: &[F], params: &ReductionParams<F>) -> Result<Vec<F>> {
    reduce_tape(v, params).map(|(out, _)| out)
}

pub(crate) fn pool_baseline_tape<F: Real>(
    descriptors: &[&[F]],
    mode: PoolingMode,
    gem: Option<&GemPower<F>>,
) -> Result<(Vec<F>, AggTape<F>)> {
    let dim = descriptors.first().map(|d| d.len()).unwrap_or(0);
    check_descriptors(descriptors, dim)?;
    let order = canonical_order(descriptors);
    let n = from_f64::<F>(descriptors.len() as f64);

    match mode {
        PoolingMode::Average | PoolingMode::Sum => {
            let mut pooled = vec![F::zero(); dim];
            for &i in &order {
                for (p, x) in pooled.iter_mut().zip(descriptors[i]) {
                    *p = *p + *x;
                }
            }
            if mode == PoolingMode::Average {
                for p in pooled.iter_mut() {
                    *p = *p / n;
                }
            }
            normalize_in_place(&mut pooled, "pooled baseline vector")?;
            Ok((pooled, AggTape::Plain))
        }
        PoolingMode::GemShared | PoolingMode::GemPerDim => {
            let gem = gem.ok_or_else(|| Error::InvalidArgument("gem pooling needs an exponent".into()))?;
            gem.validate(dim, mode)?;
            let mut pow_means = vec![F::zero(); dim];
            let mut log_pow_means = vec![F::zero(); dim];
            for &i in &order {
                for (j, x) in descriptors[i].iter().enumerate() {
                    let a = x.abs();
                    if a > F::zero() {
                        let powed = a.powf(gem.at(j));
                        pow_means[j] += powed;
                        log_pow_means[j] += powed * a.ln();
                    }
                }
            }
            for j in 0..dim {
                pow_means[j] = pow_means[j] / n;
                log_pow_means[j] = log_pow_means[j] / n;
            }
            let mut pooled = vec![F::zero(); dim];
            for j in 0..dim {
                if pow_means[j] > F::zero() {
                    pooled[j] = pow_means[j].powf(F::one() / gem.at(j));
                }
            }
            let pooled_prenorm = pooled.clone();
            let pooled_norm = normalize_in_place(&mut pooled, "pooled gem vector")?;
            let tape = GemTape {
                pow_means,
                log_pow_means,
                pooled: pooled_prenorm,
                pooled_norm,
                out: pooled.clone(),
            };
            Ok((pooled, AggTape::Gem(tape)))
        }
        PoolingMode::NetVlad => Err(Error::InvalidArgument(
            "netvlad is not a baseline pooling mode".into(),
        )),
    }
}

/// Baseline pooling: average, sum or generalized mean, each followed by
/// L2-normalization.
pub fn pool_baseline<F: Real>(
    descriptors: &[&[F]],
    mode: PoolingMode,
    gem: Option<&GemPower<F>>,
) -> Result<Vec<F>> {
    pool_baseline_tape(descriptors, mode, gem).map(|(v, _)| v)
}

pub(crate) fn aggregate_set_tape<F: Real>(
    descriptors: &[&[F]],
    model: &AggregatorModel<F>,
) -> Result<(Vec<F>, AggTape<F>)> {
    match model.mode {
        PoolingMode::NetVlad => {
            let nv = model
                .netvlad
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("netvlad mode needs VLAD parameters".into()))?;
            let red = model
                .reduction
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("netvlad mode needs reduction parameters".into()))?;
            let (vlad, vlad_tape) = netvlad_forward_tape(descriptors, nv)?;
            let (out, reduce_tape) = reduce_tape(&vlad, red)?;
            Ok((
                out,
                AggTape::NetVlad {
                    vlad: vlad_tape,
                    reduce: reduce_tape,
                },
            ))
        }
        mode => pool_baseline_tape(descriptors, mode, model.gem_power.as_ref()),
    }
}

/// Aggregate a non-empty descriptor set into one unit-norm vector of
/// dimension `model.set_dim`.
pub fn aggregate_set<F: Real>(
    descriptors: &[&[F]],
    model: &AggregatorModel<F>,
) -> Result<Vec<F>> {
    aggregate_set_tape(descriptors, model).map(|(v, _)| v)
}

/// Convenience wrapper over owned descriptor rows.
pub fn aggregate_set_vecs<F: Real>(
    descriptors: &[Vec<F>],
    model: &AggregatorModel<F>,
) -> Result<Vec<F>> {
    let refs: Vec<&[F]> = descriptors.iter().map(|d| d.as_slice()).collect();
    aggregate_set(&refs, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::l2_norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(k: usize, dim: usize, seed: u64) -> NetVladParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_mat = |r: usize, c: usize| {
            Mat::from_flat(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let assign_weights = rand_mat(k, dim);
        let centers = rand_mat(k, dim);
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        NetVladParams {
            assign_weights,
            assign_bias: (0..k).map(|_| rng2.random_range(-0.5..0.5)).collect(),
            centers,
        }
    }

    fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize_in_place(&mut v, "test").unwrap();
        v
    }

    #[test]
    fn single_cluster_is_normalized_residual() {
        let dim = 5;
        let params = random_params(1, dim, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_unit(dim, &mut rng);
        let out = netvlad_forward(&[&x], &params).unwrap();
        let expected: Vec<f64> = {
            let mut r: Vec<f64> = x.iter().zip(params.centers.row(0)).map(|(a, b)| a - b).collect();
            normalize_in_place(&mut r, "t").unwrap();
            r
        };
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_elements_collapse() {
        let params = random_params(3, 6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_unit(6, &mut rng);
        let one = netvlad_forward(&[&x], &params).unwrap();
        let two = netvlad_forward(&[&x, &x], &params).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_logits_split_assignment() {
        let dim = 4;
        let mut params = random_params(2, dim, 8);
        let row0 = params.assign_weights.row(0).to_vec();
        params.assign_weights.row_mut(1).copy_from_slice(&row0);
        params.assign_bias[1] = params.assign_bias[0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_unit(dim, &mut rng);
        let alpha = soft_assignments(&x, &params);
        assert!((alpha[0] - 0.5).abs() < 1e-12);
        assert!((alpha[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identity_reduction_passes_through() {
        let dim = 6;
        let params = ReductionParams {
            weights: Mat::identity(dim),
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_unit(dim, &mut rng);
        let out = reduce(&v, &params).unwrap();
        for (a, b) in out.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((l2_norm(&out) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reduce_matches_manual_matvec() {
        // Independent oracle: plain nested-loop matrix-vector product.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (rows, cols) = (4, 9);
        let w = Mat::from_flat(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let scale: Vec<f64> = (0..rows).map(|_| rng.random_range(0.5..2.0)).collect();
        let shift: Vec<f64> = (0..rows).map(|_| rng.random_range(-0.3..0.3)).collect();
        let v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut expected = vec![0.0f64; rows];
        for i in 0..rows {
            let mut acc = 0.0;
            for j in 0..cols {
                acc += w.get(i, j) * v[j];
            }
            expected[i] = acc * scale[i] + shift[i];
        }
        let norm = l2_norm(&expected);
        for e in expected.iter_mut() {
            *e /= norm;
        }

        let params = ReductionParams { weights: w, scale, shift };
        let out = reduce(&v, &params).unwrap();
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn gem_power_three_known_value() {
        // One dimension with |values| {1, 2}: ((1 + 8)/2)^(1/3) = 1.650963...
        let gem = GemPower::Shared(3.0);
        let a = vec![1.0, 0.0];
        let b = vec![2.0, 0.0];
        let (pooled, tape) =
            pool_baseline_tape(&[&a[..], &b[..]], PoolingMode::GemShared, Some(&gem)).unwrap();
        let expected_prenorm = (4.5f64).powf(1.0 / 3.0);
        assert!((expected_prenorm - 1.6509636244473134).abs() < 1e-12);
        match tape {
            AggTape::Gem(t) => assert!((t.pooled[0] - expected_prenorm).abs() < 1e-12),
            _ => panic!("expected gem tape"),
        }
        assert!((pooled[0] - 1.0).abs() < 1e-12); // single non-zero dim normalizes to 1
    }

    #[test]
    fn gem_p1_equals_average_on_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..5).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let gem = GemPower::Shared(1.0);
        let g = pool_baseline(&refs, PoolingMode::GemShared, Some(&gem)).unwrap();
        let a = pool_baseline(&refs, PoolingMode::Average, None).unwrap();
        for (x, y) in g.iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn average_of_orthonormal_pair() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let out = pool_baseline(&[&e1[..], &e2[..]], PoolingMode::Average, None).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((out[0] - s).abs() < 1e-12);
        assert!((out[1] - s).abs() < 1e-12);
    }

    #[test]
    fn zero_pooled_vector_is_error() {
        let a = vec![1.0, 0.0];
        let b = vec![-1.0, 0.0];
        assert!(matches!(
            pool_baseline(&[&a[..], &b[..]], PoolingMode::Average, None),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn empty_set_is_rejected() {
        let model = AggregatorModel::<f64>::average_baseline(4);
        let empty: Vec<&[f64]> = Vec::new();
        assert!(matches!(aggregate_set(&empty, &model), Err(Error::EmptySet)));
    }

    #[test]
    fn singleton_average_is_identity() {
        let model = AggregatorModel::<f64>::average_baseline(3);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_unit(3, &mut rng);
        let out = aggregate_set(&[&x], &model).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_is_exactly_invariant() {
        let params = random_params(4, 8, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let xs: Vec<Vec<f64>> = (0..5).map(|_| random_unit(8, &mut rng)).collect();
        let fwd: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let rev: Vec<&[f64]> = xs.iter().rev().map(|v| v.as_slice()).collect();
        let a = netvlad_forward(&fwd, &params).unwrap();
        let b = netvlad_forward(&rev, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn netvlad_matches_straight_line_reference() {
        // Independent straight-line implementation of the pooling pipeline,
        // written with explicit loops and no shared helpers.
        let k = 8;
        let dim = 16;
        let params = random_params(k, dim, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let xs: Vec<Vec<f64>> = (0..3).map(|_| random_unit(dim, &mut rng)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let got = netvlad_forward(&refs, &params).unwrap();

        let mut sum = vec![0.0f64; dim * k];
        for x in &xs {
            let mut logits = vec![0.0f64; k];
            for c in 0..k {
                let mut l = params.assign_bias[c];
                for j in 0..dim {
                    l += params.assign_weights.get(c, j) * x[j];
                }
                logits[c] = l;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let mut contrib = vec![0.0f64; dim * k];
            for c in 0..k {
                let alpha = (logits[c] - m).exp() / z;
                for j in 0..dim {
                    contrib[c * dim + j] = alpha * (x[j] - params.centers.get(c, j));
                }
            }
            let norm: f64 = contrib.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (s, c) in sum.iter_mut().zip(&contrib) {
                *s += c / norm;
            }
        }
        let norm: f64 = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        for s in sum.iter_mut() {
            *s /= norm;
        }

        for (a, b) in got.iter().zip(&sum) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn soft_assignment_rows_sum_to_one() {
        let params = random_params(6, 10, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let x = random_unit(10, &mut rng);
            let alpha = soft_assignments(&x, &params);
            let total: f64 = alpha.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
